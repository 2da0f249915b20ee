//! Noise schedules, forward noising, DDIM reverse steps and
//! classifier-free guidance.
//!
//! All of this is plain float arithmetic over latent buffers; nothing here
//! touches the autodiff tape. The sampler is a deterministic function of
//! (model parameters, reference latents, conditioning, seed): noise comes
//! from counter-based streams keyed by (seed, frame, step).

use crate::error::{Error, Result};
use crate::numerics::{real, Scalar};
use crate::rng::Rng;

/// Per-timestep alpha and cumulative alpha-bar tables.
///
/// Indexing: `alpha(t)` is defined for t in 1..=T, `alpha_bar(t)` for
/// t in 0..=T with `alpha_bar(0) = 1` as the boundary convention.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from per-step alphas; alpha-bar is their running product, so
    /// the product identity holds by construction.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("noise schedule: T = 0".into()));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Numeric(format!("alpha_{} = {a} outside (0,1)", i + 1)));
            }
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { alpha, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha.len()
    }

    /// alpha_t, t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative alpha-bar_t, t in 0..=T (alpha_bar_0 = 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Cosine schedule with the s = 0.008 offset; per-step alphas clipped to
/// >= 0.001 so the last steps never degenerate at small T.
pub fn cosine_schedule(t_count: usize) -> Result<NoiseSchedule> {
    if t_count == 0 {
        return Err(Error::Config("cosine_schedule: T must be >= 1".into()));
    }
    let s = 0.008;
    let f = |t: f64| {
        let x = ((t / t_count as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut alphas = Vec::with_capacity(t_count);
    let mut prev = 1.0; // f(0)/f(0)
    for t in 1..=t_count {
        let bar = f(t as f64) / f0;
        let a = (bar / prev).max(0.001);
        alphas.push(a.min(1.0 - 1e-12));
        prev = bar;
    }
    NoiseSchedule::from_alphas(alphas)
}

/// DDIM sampler settings.
#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f32,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 30, guidance_scale: 2.0, eta: 0.0, seed: 0 }
    }
}

/// Latent video: [frames, channels, h, w], flat row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    pub frames: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl VideoLatent {
    pub fn zeros(frames: usize, channels: usize, h: usize, w: usize) -> Self {
        VideoLatent { frames, channels, h, w, data: vec![0.0; frames * channels * h * w] }
    }

    pub fn frame_size(&self) -> usize {
        self.channels * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let fs = self.frame_size();
        &self.data[i * fs..(i + 1) * fs]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let fs = self.frame_size();
        &mut self.data[i * fs..(i + 1) * fs]
    }
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_noise<S: Scalar>(
    x0: &[S],
    t: usize,
    eps: &[S],
    sched: &NoiseSchedule,
) -> Result<Vec<S>> {
    if t > sched.t_max() {
        return Err(Error::Config(format!("forward_noise: t = {t} out of [0, {}]", sched.t_max())));
    }
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("forward_noise: x0 {} vs eps {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t);
    let ca = real::<S>(ab.sqrt());
    let ce = real::<S>((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| ca * x + ce * e).collect())
}

/// x0 = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t).
pub fn x0_from_eps<S: Scalar>(
    xt: &[S],
    eps_hat: &[S],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<S>> {
    if t == 0 || t > sched.t_max() {
        return Err(Error::Config(format!("x0_from_eps: t = {t} out of [1, {}]", sched.t_max())));
    }
    if xt.len() != eps_hat.len() {
        return Err(Error::Shape(format!("x0_from_eps: xt {} vs eps {}", xt.len(), eps_hat.len())));
    }
    let ab = sched.alpha_bar(t);
    if ab < 1e-12 {
        return Err(Error::Numeric(format!("x0_from_eps: alpha_bar_{t} = {ab} below 1e-12")));
    }
    let inv = real::<S>(1.0 / ab.sqrt());
    let ce = real::<S>((1.0 - ab).sqrt());
    Ok(xt.iter().zip(eps_hat).map(|(&x, &e)| (x - ce * e) * inv).collect())
}

/// Classifier-free guidance: (1 + w) eps_cond - w eps_uncond.
pub fn cfg_combine<S: Scalar>(eps_cond: &[S], eps_uncond: &[S], w: f64) -> Result<Vec<S>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::Shape(format!(
            "cfg_combine: {} vs {}",
            eps_cond.len(),
            eps_uncond.len()
        )));
    }
    let (cw, uw) = (real::<S>(1.0 + w), real::<S>(w));
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| cw * c - uw * u)
        .collect())
}

/// One DDIM update from t to t_prev. With eta = 0 this is deterministic;
/// with eta > 0, `noise` supplies the fresh standard normal draw.
pub fn ddim_step<S: Scalar>(
    xt: &[S],
    eps_hat: &[S],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&[S]>,
) -> Result<Vec<S>> {
    if t_prev >= t {
        return Err(Error::Config(format!("ddim_step: t_prev {t_prev} >= t {t}")));
    }
    let x0 = x0_from_eps(xt, eps_hat, t, sched)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let ca = real::<S>(ab_prev.sqrt());
    let cd = real::<S>((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
    let cs = real::<S>(sigma);
    let mut out: Vec<S> = x0
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| ca * x + cd * e)
        .collect();
    if cs != S::zero() {
        let z = noise.ok_or_else(|| Error::Config("ddim_step: eta > 0 needs noise".into()))?;
        if z.len() != out.len() {
            return Err(Error::Shape(format!("ddim_step noise: {} vs {}", z.len(), out.len())));
        }
        for (o, &n) in out.iter_mut().zip(z) {
            *o = *o + cs * n;
        }
    }
    Ok(out)
}

/// Which conditioning slot a sampler model call should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    Instruction,
    Null,
}

/// A denoiser as the sampler sees it: epsilon prediction for a full latent
/// video at one timestep, under either the instruction or the null
/// condition. Implementations may fuse the two calls into one batched
/// forward via `predict_both`; results must match the two single calls.
pub trait DenoiseModel {
    fn predict(&self, z: &VideoLatent, t: usize, cond: Cond) -> Result<VideoLatent>;

    fn predict_both(&self, z: &VideoLatent, t: usize) -> Result<(VideoLatent, VideoLatent)> {
        Ok((self.predict(z, t, Cond::Instruction)?, self.predict(z, t, Cond::Null)?))
    }
}

/// Uniform-stride DDIM sub-schedule, descending, last step lands on 0.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(Error::Config(format!("sampler steps {steps} out of [1, {t_total}]")));
    }
    let stride = t_total / steps;
    Ok((0..steps).map(|k| t_total - k * stride).collect())
}

/// Predict frames r..n-1 given clean reference latents for frames 0..r-1.
///
/// Non-reference slots start as seeded Gaussian noise; every DDIM step the
/// model runs under both conditions, the predictions combine via
/// classifier-free guidance, and reference slots are re-clamped to the
/// given latents so they pass through untouched.
pub fn sample_video(
    model: &dyn DenoiseModel,
    ref_latents: &VideoLatent,
    total_frames: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<VideoLatent> {
    let r = ref_latents.frames;
    if r >= total_frames {
        return Err(Error::Config(format!(
            "sample_video: {r} reference frames leave no frames to predict out of {total_frames}"
        )));
    }
    let (c, h, w) = (ref_latents.channels, ref_latents.h, ref_latents.w);
    let mut z = VideoLatent::zeros(total_frames, c, h, w);
    for f in 0..r {
        z.frame_mut(f).copy_from_slice(ref_latents.frame(f));
    }
    let root = Rng::new(cfg.seed);
    for f in r..total_frames {
        let mut stream = root.derive(&[0x696e6974, f as u64]);
        for v in z.frame_mut(f) {
            *v = stream.normal() as f32;
        }
    }

    let ts = ddim_timesteps(sched.t_max(), cfg.steps)?;
    let fs = z.frame_size();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = if k + 1 < ts.len() { ts[k + 1] } else { 0 };
        let (eps_c, eps_u) = model.predict_both(&z, t)?;
        let eps = cfg_combine(&eps_c.data, &eps_u.data, cfg.guidance_scale as f64)?;
        let noise = if cfg.eta > 0.0 {
            let mut buf = vec![0f32; z.data.len()];
            for f in 0..total_frames {
                let mut stream = root.derive(&[0x73746570, k as u64, f as u64]);
                for v in &mut buf[f * fs..(f + 1) * fs] {
                    *v = stream.normal() as f32;
                }
            }
            Some(buf)
        } else {
            None
        };
        z.data = ddim_step(&z.data, &eps, t, t_prev, sched, cfg.eta, noise.as_deref())?;
        for f in 0..r {
            z.frame_mut(f).copy_from_slice(ref_latents.frame(f));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_boundary_and_monotonicity() {
        let sched = cosine_schedule(1000).unwrap();
        assert_eq!(sched.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1), "not decreasing at {t}");
            assert!(sched.alpha_bar(t) > 0.0 && sched.alpha_bar(t) <= 1.0);
        }
        assert!(sched.alpha_bar(1000) < sched.alpha_bar(1));
    }

    #[test]
    fn cosine_matches_closed_form_at_t500() {
        // Independent evaluation of f(t)/f(0); no clipping active by t=500.
        let sched = cosine_schedule(1000).unwrap();
        let s = 0.008;
        let f = |t: f64| (((t / 1000.0 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2);
        let expect = f(500.0) / f(0.0);
        assert!((sched.alpha_bar(500) - expect).abs() < 1e-9,
            "{} vs {}", sched.alpha_bar(500), expect);
    }

    #[test]
    fn product_identity_within_tolerance() {
        let sched = cosine_schedule(250).unwrap();
        let mut prod = 1.0;
        for t in 1..=250 {
            prod *= sched.alpha(t);
            assert!((sched.alpha_bar(t) - prod).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(cosine_schedule(0).is_err());
    }

    #[test]
    fn forward_noise_t0_is_identity() {
        let sched = cosine_schedule(100).unwrap();
        let x0 = vec![0.3f32, -1.2, 0.0, 5.5];
        let eps = vec![1.0f32, -1.0, 2.0, 0.5];
        let xt = forward_noise(&x0, 0, &eps, &sched).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn forward_noise_closed_form() {
        // alpha_bar = 0.25 via a crafted schedule: alpha_1 = 0.25
        let sched = NoiseSchedule::from_alphas(vec![0.25]).unwrap();
        let xt = forward_noise(&[1.0f32], 1, &[0.0], &sched).unwrap();
        assert!((xt[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn x0_round_trip_f64_all_t() {
        // The algebraic identity holds to 1e-5 at every t in 64-bit mode.
        let sched = cosine_schedule(1000).unwrap();
        let mut rng = crate::rng::Rng::new(3);
        for &t in &[1usize, 17, 250, 600, 990, 999, 1000] {
            let x0: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let eps: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            let back = x0_from_eps(&xt, &eps, t, &sched).unwrap();
            for (a, b) in x0.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn x0_round_trip_f32_storage() {
        // In f32 the same bound holds wherever alpha_bar is large enough
        // that 1/sqrt(alpha_bar) does not amplify storage quantization of
        // x_t past 1e-5 (alpha_bar >= ~1e-4; t <= ~0.95 T for this
        // schedule). Beyond that the limit is the 32-bit format itself.
        let sched = cosine_schedule(1000).unwrap();
        let mut rng = crate::rng::Rng::new(3);
        for &t in &[1usize, 17, 250, 600, 900, 950] {
            assert!(sched.alpha_bar(t) >= 1e-4);
            let x0: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
            let eps: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            let back = x0_from_eps(&xt, &eps, t, &sched).unwrap();
            for (a, b) in x0.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn x0_scalar_oracle() {
        // xt = 0.5, eps = 0, alpha_bar = 0.25 -> x0 = 1.0
        let sched = NoiseSchedule::from_alphas(vec![0.25]).unwrap();
        let x0 = x0_from_eps(&[0.5f32], &[0.0], 1, &sched).unwrap();
        assert!((x0[0] - 1.0).abs() < 1e-7);
        // random case against an independent scalar evaluation
        let sched = cosine_schedule(50).unwrap();
        let (xt, eh, t) = (0.73f32, -0.41f32, 20usize);
        let ab = sched.alpha_bar(t);
        let expect = (xt as f64 - (1.0 - ab).sqrt() * eh as f64) / ab.sqrt();
        let got = x0_from_eps(&[xt], &[eh], t, &sched).unwrap()[0];
        assert!((got as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn cfg_cases() {
        let c = vec![1.0f32, 2.0];
        let u = vec![0.0f32, 2.0];
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &c, 7.5).unwrap(), c);
        // w = 7.5, cond 1, uncond 0 -> 8.5
        assert_eq!(cfg_combine(&[1.0], &[0.0], 7.5).unwrap()[0], 8.5);
    }

    #[test]
    fn cfg_affine_in_w() {
        let c = vec![0.4f32, -1.1, 2.0];
        let u = vec![1.0f32, 0.3, -0.2];
        let (w1, w2) = (1.5f64, 4.0f64);
        let a = cfg_combine(&c, &u, w1).unwrap();
        let b = cfg_combine(&c, &u, w2).unwrap();
        let mid = cfg_combine(&c, &u, (w1 + w2) / 2.0).unwrap();
        for i in 0..c.len() {
            assert!((a[i] + b[i] - 2.0 * mid[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_to_zero_returns_x0_hat() {
        let sched = cosine_schedule(100).unwrap();
        let xt = vec![0.9f32, -0.3];
        let eh = vec![0.1f32, 0.2];
        let got = ddim_step(&xt, &eh, 40, 0, &sched, 0.0, None).unwrap();
        let x0 = x0_from_eps(&xt, &eh, 40, &sched).unwrap();
        assert_eq!(got, x0);
    }

    #[test]
    fn ddim_ordering_enforced() {
        let sched = cosine_schedule(100).unwrap();
        assert!(ddim_step(&[0.0], &[0.0], 10, 10, &sched, 0.0, None).is_err());
    }

    #[test]
    fn ddim_recursion_with_oracle_noise_recovers_x0() {
        // If eps_hat always equals the exact noise that links x_t to x0,
        // the eta = 0 recursion lands on x0.
        let sched = cosine_schedule(1000).unwrap();
        let mut rng = crate::rng::Rng::new(11);
        let x0: Vec<f32> = (0..32).map(|_| rng.normal() as f32).collect();
        let ts = ddim_timesteps(1000, 25).unwrap();
        // start from pure noise = forward at t = ts[0]
        let eps0: Vec<f32> = (0..32).map(|_| rng.normal() as f32).collect();
        let mut x = forward_noise(&x0, ts[0], &eps0, &sched).unwrap();
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = if k + 1 < ts.len() { ts[k + 1] } else { 0 };
            let ab = sched.alpha_bar(t);
            let eps_true: Vec<f32> = x
                .iter()
                .zip(&x0)
                .map(|(&xt, &x0v)| ((xt as f64 - ab.sqrt() * x0v as f64) / (1.0 - ab).sqrt()) as f32)
                .collect();
            x = ddim_step(&x, &eps_true, t, t_prev, &sched, 0.0, None).unwrap();
        }
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
