//! Tokenizer and small text encoder for the instruction grammar.
//!
//! The vocabulary is the closed word set of the synthetic grammar plus
//! PAD/BOS/EOS. The encoder (token + position embeddings into two causal
//! transformer layers) trains jointly with the 2D U-Net during
//! pretraining and is frozen afterwards; the empty instruction's encoding
//! is the null condition for classifier-free guidance.

use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, linear_p};
use crate::numerics::{
    add, broadcast_rows, gather_rows, masked_attention, mul, reshape, silu, CausalAttend,
    ParamStore, Scalar, Tensor,
};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Grammar word list, ids offset by the three specials. Order is the
/// vocabulary contract: it is serialized into checkpoints.
const WORDS: &[&str] = &[
    "move", "grow", "shrink", "the", "left", "right", "up", "down", "red", "green", "blue",
    "square", "circle", "triangle",
];

/// Bijective word <-> id mapping, deterministic for a grammar version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        Vocabulary { tokens }
    }

    /// Rebuild from a serialized word list (checkpoint manifest).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != "<pad>" || tokens[1] != "<bos>" || tokens[2] != "<eos>"
        {
            return Err(Error::Data("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        Ok(Vocabulary { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    /// BOS + words + EOS, PAD-filled to `len`.
    pub fn tokenize(&self, instruction: &str, len: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = instruction.split_whitespace().collect();
        if words.len() + 2 > len {
            return Err(Error::Vocab(format!(
                "instruction '{instruction}' needs {} tokens, context length is {len}",
                words.len() + 2
            )));
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(BOS);
        for w in words {
            let id = self
                .id(w)
                .ok_or_else(|| Error::Vocab(format!("unknown word '{w}'")))?;
            ids.push(id);
        }
        ids.push(EOS);
        while ids.len() < len {
            ids.push(PAD);
        }
        Ok(ids)
    }

    /// Token count before padding.
    pub fn real_len(ids: &[usize]) -> usize {
        ids.iter().take_while(|&&id| id != PAD).count()
    }
}

/// Text encoder dimensions.
#[derive(Clone, Copy, Debug)]
pub struct TextConfig {
    pub dim: usize,
    pub len: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { dim: 64, len: 8, layers: 2, heads: 4 }
    }
}

/// Encoded instruction: [len, dim] token matrix plus the unpadded length.
#[derive(Clone, Debug)]
pub struct GlobalTextEmbedding<S: Scalar> {
    pub tokens: Tensor<S>,
    pub length: usize,
}

/// Create the encoder parameters under the `text.` prefix.
pub fn init_text_params<S: Scalar>(
    store: &mut ParamStore<S>,
    vocab: &Vocabulary,
    cfg: &TextConfig,
    rng: &mut Rng,
) {
    let d = cfg.dim;
    store.insert_normal("text.embed.w", vec![vocab.size(), d], 0.02, &mut rng.derive(&[1]));
    store.insert_normal("text.pos.w", vec![cfg.len, d], 0.02, &mut rng.derive(&[2]));
    for l in 0..cfg.layers {
        let p = format!("text.layer{l}");
        let mut lr = rng.derive(&[3, l as u64]);
        store.insert_full(&format!("{p}.ln1.g"), vec![d], 1.0);
        store.insert_zeros(&format!("{p}.ln1.b"), vec![d]);
        for name in ["q", "k", "v", "o"] {
            store.insert_normal(
                &format!("{p}.attn.{name}.w"),
                vec![d, d],
                (1.0 / d as f64).sqrt(),
                &mut lr,
            );
            store.insert_zeros(&format!("{p}.attn.{name}.b"), vec![d]);
        }
        store.insert_full(&format!("{p}.ln2.g"), vec![d], 1.0);
        store.insert_zeros(&format!("{p}.ln2.b"), vec![d]);
        store.insert_normal(&format!("{p}.ff.w1"), vec![d, 4 * d], (1.0 / d as f64).sqrt(), &mut lr);
        store.insert_zeros(&format!("{p}.ff.b1"), vec![4 * d]);
        store.insert_normal(
            &format!("{p}.ff.w2"),
            vec![4 * d, d],
            (1.0 / (4 * d) as f64).sqrt(),
            &mut lr,
        );
        store.insert_zeros(&format!("{p}.ff.b2"), vec![d]);
    }
    store.insert_full("text.final_ln.g", vec![d], 1.0);
    store.insert_zeros("text.final_ln.b", vec![d]);
}

/// Expected parameter names and dims (checkpoint manifest validation).
pub fn text_param_names(vocab_size: usize, cfg: &TextConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut names = vec![
        ("text.embed.w".to_string(), vec![vocab_size, d]),
        ("text.pos.w".to_string(), vec![cfg.len, d]),
        ("text.final_ln.g".to_string(), vec![d]),
        ("text.final_ln.b".to_string(), vec![d]),
    ];
    for l in 0..cfg.layers {
        let p = format!("text.layer{l}");
        names.push((format!("{p}.ln1.g"), vec![d]));
        names.push((format!("{p}.ln1.b"), vec![d]));
        for name in ["q", "k", "v", "o"] {
            names.push((format!("{p}.attn.{name}.w"), vec![d, d]));
            names.push((format!("{p}.attn.{name}.b"), vec![d]));
        }
        names.push((format!("{p}.ln2.g"), vec![d]));
        names.push((format!("{p}.ln2.b"), vec![d]));
        names.push((format!("{p}.ff.w1"), vec![d, 4 * d]));
        names.push((format!("{p}.ff.b1"), vec![4 * d]));
        names.push((format!("{p}.ff.w2"), vec![4 * d, d]));
        names.push((format!("{p}.ff.b2"), vec![d]));
    }
    names
}

/// Run the encoder. PAD positions of the output are replaced by the PAD
/// token's embedding, so positions past the real length hold one fixed
/// vector regardless of the instruction.
pub fn encode_text<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &TextConfig,
    ids: &[usize],
) -> Result<GlobalTextEmbedding<S>> {
    if ids.len() != cfg.len {
        return Err(Error::Shape(format!("encode_text: {} ids, context {}", ids.len(), cfg.len)));
    }
    let embed = store.get("text.embed.w")?;
    let vocab_size = embed.dims()[0];
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Vocab(format!("token id {bad} out of range {vocab_size}")));
    }
    let d = cfg.dim;
    let mut x = add(&gather_rows(&embed, ids)?, &store.get("text.pos.w")?)?;
    for l in 0..cfg.layers {
        let p = format!("text.layer{l}");
        let h = layer_norm(store, &format!("{p}.ln1"), &x)?;
        let q = reshape(&linear_p(store, &format!("{p}.attn.q"), &h)?, vec![1, cfg.len, d])?;
        let k = reshape(&linear_p(store, &format!("{p}.attn.k"), &h)?, vec![1, cfg.len, d])?;
        let v = reshape(&linear_p(store, &format!("{p}.attn.v"), &h)?, vec![1, cfg.len, d])?;
        let att = masked_attention(&q, &k, &v, cfg.heads, &CausalAttend)?;
        let att = linear_p(store, &format!("{p}.attn.o"), &reshape(&att, vec![cfg.len, d])?)?;
        x = add(&x, &att)?;
        let h = layer_norm(store, &format!("{p}.ln2"), &x)?;
        let h1 = silu(&linear(
            &h,
            &store.get(&format!("{p}.ff.w1"))?,
            &store.get(&format!("{p}.ff.b1"))?,
        )?);
        let h2 = linear(
            &h1,
            &store.get(&format!("{p}.ff.w2"))?,
            &store.get(&format!("{p}.ff.b2"))?,
        )?;
        x = add(&x, &h2)?;
    }
    x = layer_norm(store, "text.final_ln", &x)?;

    // overwrite PAD rows with the PAD embedding
    let length = Vocabulary::real_len(ids);
    if length < cfg.len {
        let mut keep = vec![S::one(); cfg.len * d];
        let mut fill = vec![S::zero(); cfg.len * d];
        for row in length..cfg.len {
            for j in 0..d {
                keep[row * d + j] = S::zero();
                fill[row * d + j] = S::one();
            }
        }
        let keep = Tensor::from_vec(vec![cfg.len, d], keep);
        let fill = Tensor::from_vec(vec![cfg.len, d], fill);
        let pad_row = gather_rows(&embed, &[PAD])?;
        let pad_mat = broadcast_rows(&reshape(&pad_row, vec![d])?, cfg.len)?;
        x = add(&mul(&x, &keep)?, &mul(&pad_mat, &fill)?)?;
    }
    Ok(GlobalTextEmbedding { tokens: x, length })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f32>, Vocabulary, TextConfig) {
        let vocab = Vocabulary::standard();
        let cfg = TextConfig::default();
        let mut store = ParamStore::new();
        init_text_params(&mut store, &vocab, &cfg, &mut Rng::new(17));
        (store, vocab, cfg)
    }

    #[test]
    fn vocabulary_is_small_and_bijective() {
        let vocab = Vocabulary::standard();
        assert!(vocab.size() <= 64);
        for (i, tok) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.id(tok), Some(i));
        }
    }

    #[test]
    fn empty_instruction_tokenizes_to_bos_eos_pad() {
        let vocab = Vocabulary::standard();
        let ids = vocab.tokenize("", 8).unwrap();
        assert_eq!(ids, vec![BOS, EOS, PAD, PAD, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn example_instruction_has_six_real_tokens() {
        let vocab = Vocabulary::standard();
        let ids = vocab.tokenize("move the square left", 8).unwrap();
        assert_eq!(Vocabulary::real_len(&ids), 6);
        assert_eq!(&ids[6..], &[PAD, PAD]);
    }

    #[test]
    fn unknown_word_is_named_in_error() {
        let vocab = Vocabulary::standard();
        let err = vocab.tokenize("move the blob left", 8).unwrap_err().to_string();
        assert!(err.contains("blob"), "{err}");
    }

    #[test]
    fn overlong_instruction_is_truncation_error() {
        let vocab = Vocabulary::standard();
        assert!(vocab.tokenize("move the red square left right up down", 8).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, vocab, cfg) = setup();
        let ids = vocab.tokenize("move the red square left", cfg.len).unwrap();
        let a = encode_text(&store, &cfg, &ids).unwrap();
        let b = encode_text(&store, &cfg, &ids).unwrap();
        for (x, y) in a.tokens.data().iter().zip(b.tokens.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn different_instructions_embed_differently() {
        let (store, vocab, cfg) = setup();
        let a = encode_text(&store, &cfg, &vocab.tokenize("move the square left", cfg.len).unwrap())
            .unwrap();
        let b = encode_text(&store, &cfg, &vocab.tokenize("move the square right", cfg.len).unwrap())
            .unwrap();
        let l2: f32 = a
            .tokens
            .data()
            .iter()
            .zip(b.tokens.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn pad_positions_hold_the_pad_embedding() {
        let (store, vocab, cfg) = setup();
        let a = encode_text(&store, &cfg, &vocab.tokenize("grow the red circle", cfg.len).unwrap())
            .unwrap();
        let b =
            encode_text(&store, &cfg, &vocab.tokenize("move the blue square up", cfg.len).unwrap())
                .unwrap();
        // a has length 6, b has length 7; rows 7.. agree across instructions
        let d = cfg.dim;
        for j in 7 * d..8 * d {
            assert_eq!(a.tokens.data()[j].to_bits(), b.tokens.data()[j].to_bits());
        }
        assert_eq!(a.length, 6);
        assert_eq!(b.length, 7);
    }

    #[test]
    fn bad_ids_are_range_errors() {
        let (store, _, cfg) = setup();
        let mut ids = vec![PAD; cfg.len];
        ids[0] = 999;
        assert!(encode_text(&store, &cfg, &ids).is_err());
    }
}
