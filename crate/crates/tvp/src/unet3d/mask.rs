//! Temporal attention masks over the flattened frame-major token order.
//!
//! Flattened index = frame * s + site, with site = y * w + x row-major.
//! Three variants share one attention kernel; only `allows` differs:
//!
//! - bidirectional: same spatial site, any frame pair
//! - directed: same spatial site, key frame <= query frame
//! - ast: causal over the whole flattened sequence (any site, no future);
//!   strict within-frame order by default, whole-frame visibility when
//!   `block_causal` is set

use crate::numerics::{AttendMask, RowSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Bidirectional,
    Directed,
    Ast,
}

impl MaskKind {
    pub fn parse(s: &str) -> Option<MaskKind> {
        match s {
            "bidir" | "bidirectional" => Some(MaskKind::Bidirectional),
            "directed" => Some(MaskKind::Directed),
            "ast" => Some(MaskKind::Ast),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::Bidirectional => "bidirectional",
            MaskKind::Directed => "directed",
            MaskKind::Ast => "ast",
        }
    }
}

/// Attention mask over n frames of s spatial tokens each.
#[derive(Clone, Copy, Debug)]
pub struct AttnMask {
    pub kind: MaskKind,
    pub n: usize,
    pub s: usize,
    /// ast only: allow attending to later tokens of the same frame.
    pub block_causal: bool,
}

pub fn build_mask(kind: MaskKind, n: usize, s: usize) -> AttnMask {
    AttnMask { kind, n, s, block_causal: false }
}

impl AttnMask {
    pub fn block_causal(mut self, on: bool) -> Self {
        self.block_causal = on;
        self
    }

    pub fn tokens(&self) -> usize {
        self.n * self.s
    }

    /// Materialized boolean matrix, row-major [tokens, tokens].
    pub fn matrix(&self) -> Vec<bool> {
        let t = self.tokens();
        let mut m = vec![false; t * t];
        for q in 0..t {
            for k in 0..t {
                m[q * t + k] = self.allows(q, k);
            }
        }
        m
    }
}

impl AttendMask for AttnMask {
    #[inline]
    fn allows(&self, q: usize, k: usize) -> bool {
        let (fq, sq) = (q / self.s, q % self.s);
        let (fk, sk) = (k / self.s, k % self.s);
        match self.kind {
            MaskKind::Bidirectional => sq == sk,
            MaskKind::Directed => sq == sk && fk <= fq,
            MaskKind::Ast => {
                if self.block_causal {
                    fk <= fq
                } else {
                    k <= q
                }
            }
        }
    }

    fn row_span(&self, q: usize, tk: usize) -> RowSpan {
        let (fq, sq) = (q / self.s, q % self.s);
        match self.kind {
            MaskKind::Bidirectional => RowSpan { start: sq, step: self.s, end: tk },
            MaskKind::Directed => RowSpan { start: sq, step: self.s, end: fq * self.s + sq + 1 },
            MaskKind::Ast => {
                if self.block_causal {
                    RowSpan { start: 0, step: 1, end: (fq + 1) * self.s }
                } else {
                    RowSpan { start: 0, step: 1, end: q + 1 }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_always_allowed() {
        for kind in [MaskKind::Bidirectional, MaskKind::Directed, MaskKind::Ast] {
            let m = build_mask(kind, 1, 1);
            assert!(m.allows(0, 0), "{kind:?}");
        }
    }

    #[test]
    fn ast_is_lower_triangular() {
        let m = build_mask(MaskKind::Ast, 2, 2);
        let mat = m.matrix();
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(mat[q * 4 + k], k <= q, "({q},{k})");
            }
        }
    }

    #[test]
    fn directed_counts_same_site_past_pairs() {
        // n=3, s=2: allow iff same site and frame_k <= frame_q.
        // Enumerate all 36 pairs against the rule; exactly 12 allowed.
        let m = build_mask(MaskKind::Directed, 3, 2);
        let mut allowed = 0;
        for q in 0..6 {
            for k in 0..6 {
                let rule = (q % 2 == k % 2) && (k / 2 <= q / 2);
                assert_eq!(m.allows(q, k), rule, "({q},{k})");
                if rule {
                    allowed += 1;
                }
            }
        }
        assert_eq!(allowed, 12);
    }

    #[test]
    fn bidirectional_sees_all_frames_same_site_only() {
        let m = build_mask(MaskKind::Bidirectional, 3, 4);
        assert!(m.allows(0, 2 * 4)); // site 0 across frames
        assert!(m.allows(2 * 4, 0));
        assert!(!m.allows(0, 1)); // different site, same frame
    }

    #[test]
    fn block_causal_frees_within_frame_order() {
        let strict = build_mask(MaskKind::Ast, 2, 3);
        let block = build_mask(MaskKind::Ast, 2, 3).block_causal(true);
        // within frame 0: token 0 attending token 2
        assert!(!strict.allows(0, 2));
        assert!(block.allows(0, 2));
        // neither sees the future frame
        assert!(!strict.allows(2, 3));
        assert!(!block.allows(2, 3));
    }
}
