//! DDPM schedule, masked denoising objective, AdamW training and ancestral
//! sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::masked_mse_value;
use crate::error::{Error, Result};
use crate::model::codec::{ImageCodec, TextEmbedder};
use crate::model::latent::{CaptionEmbedding, LatentStack, MaskSet};
use crate::model::{Denoiser, DenoiserInput};
use crate::dataset::TrainingRecord;
use crate::panelize::PanelImageStack;
use crate::script::ScriptSet;
use crate::seed::{rng_for, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            beta_start: 1e-4,
            beta_end: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if t == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(timesteps: usize, cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(timesteps, cfg.beta_start, cfg.beta_end, cfg.kind)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!("timestep {t} out of range 0..{}", self.len())));
        }
        Ok(())
    }

    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Variance of q(z_{t-1} | z_t, z_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar[t])
    }
}

/// `sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps`.
pub fn q_sample(z0: &LatentStack, t: usize, eps: &LatentStack, sched: &NoiseSchedule) -> Result<LatentStack> {
    sched.check_t(t)?;
    if !z0.same_shape(eps) {
        return Err(Error::Shape("noise and latent shapes differ".into()));
    }
    let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
    let mut out = z0.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

pub fn standard_normal_like<R: Rng + ?Sized>(k: usize, c: usize, h: usize, w: usize, rng: &mut R) -> LatentStack {
    let data = (0..k * c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    LatentStack::from_vec(k, c, h, w, data).expect("sized by construction")
}

fn loss_include(eps: &LatentStack, eps_hat: &LatentStack, masks: &MaskSet, patch: usize) -> Result<Vec<bool>> {
    if !eps.same_shape(eps_hat) {
        return Err(Error::Shape("eps and eps_hat shapes differ".into()));
    }
    if !eps.h.is_multiple_of(patch) || !eps.w.is_multiple_of(patch) {
        return Err(Error::Shape(format!("latent {}x{} not divisible by patch {patch}", eps.h, eps.w)));
    }
    masks.check(eps.k, (eps.h / patch) * (eps.w / patch))?;
    Ok(masks.latent_include(eps.c, eps.h, eps.w, patch))
}

/// Mean squared error over latent positions outside the bubble mask; padded
/// panels are included. Each masked token hides its `patch × patch × C`
/// latent footprint. Zero (with a warning) when everything is masked.
pub fn masked_denoising_loss(eps: &LatentStack, eps_hat: &LatentStack, masks: &MaskSet, patch: usize) -> Result<f64> {
    let include = loss_include(eps, eps_hat, masks, patch)?;
    let (loss, count) = masked_mse_value(eps_hat.data(), eps.data(), &include);
    if count == 0 {
        log::warn!("every latent position is masked; loss defined as 0");
    }
    Ok(loss)
}

/// Loss and its gradient with respect to `eps_hat`.
pub fn masked_denoising_loss_grad(
    eps: &LatentStack,
    eps_hat: &LatentStack,
    masks: &MaskSet,
    patch: usize,
) -> Result<(f64, LatentStack)> {
    let include = loss_include(eps, eps_hat, masks, patch)?;
    let (loss, count) = masked_mse_value(eps_hat.data(), eps.data(), &include);
    let mut grad = LatentStack::zeros(eps.k, eps.c, eps.h, eps.w);
    if count > 0 {
        let s = 2.0 / count as f64;
        for (j, g) in grad.data_mut().iter_mut().enumerate() {
            if include[j] {
                *g = s * (eps_hat.data()[j] - eps.data()[j]);
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            log_every: 100,
        }
    }
}

/// Model, AdamW moments, step counter and root seed. Parameters and moments
/// are kept at `f32` precision so that a saved checkpoint resumes exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Denoiser, seed: u64) -> Self {
        let zeros = |m: &Denoiser| m.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        TrainState {
            m: zeros(&model),
            v: zeros(&model),
            model,
            step: 0,
            seed,
        }
    }
}

/// A record with its latents and caption embeddings precomputed.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub z0: LatentStack,
    pub captions: CaptionEmbedding,
    pub masks: MaskSet,
}

pub fn prepare_record(rec: &TrainingRecord, codec: &dyn ImageCodec, embedder: &dyn TextEmbedder) -> Result<PreparedRecord> {
    rec.check()?;
    Ok(PreparedRecord {
        z0: codec.encode(&rec.panel_images)?,
        captions: embedder.embed(&rec.captions),
        masks: MaskSet::from_record(rec),
    })
}

/// Indices of the batch used at `step`: consecutive slices of a stream of
/// per-epoch shuffles, each shuffle seeded by its epoch number.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, Stream::Shuffle, epoch as u64));
    for pos in start..start + batch {
        if pos / n != epoch {
            epoch = pos / n;
            perm = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, Stream::Shuffle, epoch as u64));
        }
        out.push(perm[pos % n]);
    }
    out
}

/// One AdamW update on the mean masked loss of `batch`. Returns the loss.
pub fn train_step(state: &mut TrainState, batch: &[&PreparedRecord], sched: &NoiseSchedule, opt: &OptimizerConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let model = &state.model;
    let mut rng = rng_for(state.seed, Stream::TrainNoise, state.step);
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    let mut losses = Vec::with_capacity(batch.len());
    for rec in batch {
        let t = rng.random_range(0..sched.len());
        let z = &model.config().to_diffusion_space(&rec.z0);
        let eps = standard_normal_like(z.k, z.c, z.h, z.w, &mut rng);
        let z_t = q_sample(z, t, &eps, sched)?;
        let input = DenoiserInput {
            z_t: &z_t,
            t,
            captions: &rec.captions,
            masks: &rec.masks,
        };
        let (loss, g) = model.loss_and_grads(&input, &eps)?;
        losses.push((t, loss));
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g.params) {
            if let Some(gi) = gi {
                acc.add_assign(&gi);
            }
        }
    }
    let loss = total / batch.len() as f64;
    let grads_finite = grads.iter().all(Tensor::all_finite);
    if !loss.is_finite() || !grads_finite {
        return Err(Error::NonFinite(format!(
            "step {}: batch loss {loss}, gradients finite: {grads_finite}, per-sample (t, loss): {losses:?}",
            state.step
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale(scale));
    adamw_update(state, &grads, opt);
    Ok(loss)
}

fn adamw_update(state: &mut TrainState, grads: &[Tensor], opt: &OptimizerConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let params = state.model.params_mut();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            let mut x = p[j];
            x -= opt.lr * opt.weight_decay * x;
            let mj = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            let vj = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            x -= opt.lr * (mj / bc1) / ((vj / bc2).sqrt() + opt.eps);
            m[j] = mj as f32 as f64;
            v[j] = vj as f32 as f64;
            p[j] = x as f32 as f64;
        }
    }
}

/// Anything that predicts the noise in `z_t` at step `t`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &LatentStack, t: usize) -> Result<LatentStack>;
}

/// The denoiser bound to fixed captions and masks.
pub struct Conditioned<'a> {
    pub model: &'a Denoiser,
    pub captions: &'a CaptionEmbedding,
    pub masks: &'a MaskSet,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, z_t: &LatentStack, t: usize) -> Result<LatentStack> {
        self.model.forward(&DenoiserInput {
            z_t,
            t,
            captions: self.captions,
            masks: self.masks,
        })
    }
}

/// Ancestral sampling from `z_T`: at each step the predicted `z0` is
/// optionally clipped to `clip`, then `z_{t-1}` is drawn from the posterior
/// q(z_{t-1} | z_t, ẑ0). The last step returns the posterior mean.
pub fn ancestral_sample<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    z_start: LatentStack,
    clip: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<LatentStack> {
    let mut z = z_start;
    for t in (0..sched.len()).rev() {
        let eps = predictor.predict(&z, t)?;
        if !eps.same_shape(&z) {
            return Err(Error::Shape("predictor changed the latent shape".into()));
        }
        let ab = sched.alpha_bar[t];
        let ab_prev = sched.alpha_bar_prev(t);
        let c1 = sched.beta[t] * ab_prev.sqrt() / (1.0 - ab);
        let c2 = (1.0 - ab_prev) * sched.alpha[t].sqrt() / (1.0 - ab);
        let sigma = sched.posterior_variance(t).sqrt();
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (x, e) in z.data_mut().iter_mut().zip(eps.data()) {
            let mut x0 = (*x - sb * e) / sa;
            if let Some((lo, hi)) = clip {
                x0 = x0.clamp(lo, hi);
            }
            *x = c1 * x0 + c2 * *x;
        }
        if t > 0 {
            for x in z.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *x += sigma * n;
            }
        }
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("sampler produced non-finite latents at t={t}")));
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Clip predicted clean latents to the codec's latent range.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { clip_x0: true }
    }
}

/// Generates one panel image per script; `EMPTY` scripts are padded panels.
/// Page size is `(height, width)` in pixels.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &Denoiser,
    codec: &dyn ImageCodec,
    embedder: &dyn TextEmbedder,
    scripts: &ScriptSet,
    sched: &NoiseSchedule,
    page_size: (usize, usize),
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<PanelImageStack> {
    let mc = model.config();
    if scripts.len() != mc.k_max {
        return Err(Error::Config(format!(
            "{} scripts but the model expects K_max = {}",
            scripts.len(),
            mc.k_max
        )));
    }
    if sched.len() != mc.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps, model was built for {}",
            sched.len(),
            mc.timesteps
        )));
    }
    let f = codec.factor();
    let (hh, ww) = page_size;
    if hh % (f * mc.patch_size) != 0 || ww % (f * mc.patch_size) != 0 {
        return Err(Error::Config(format!("page {hh}x{ww} not divisible by {}", f * mc.patch_size)));
    }
    let (h, w) = (hh / f, ww / f);
    let n = (h / mc.patch_size) * (w / mc.patch_size);
    let masks = MaskSet {
        intra: vec![vec![false; n]; mc.k_max],
        inter: scripts.pad_mask(),
    };
    let captions = embedder.embed(&scripts.scripts);
    let predictor = Conditioned {
        model,
        captions: &captions,
        masks: &masks,
    };
    let mut rng = rng_for(seed, Stream::Sampling, 0);
    let z_start = standard_normal_like(mc.k_max, codec.latent_channels(), h, w, &mut rng);
    let clip = if cfg.clip_x0 {
        codec.latent_range().map(|(lo, hi)| ((lo - mc.latent_shift) * mc.latent_scale, (hi - mc.latent_shift) * mc.latent_scale))
    } else {
        None
    };
    let z0 = ancestral_sample(&predictor, sched, z_start, clip, &mut rng)?;
    Ok(PanelImageStack::from_images(codec.decode(&mc.to_codec_space(&z0))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar[0], 1.0 - 1e-4);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
        // direct product, independent of the running accumulation
        let prod: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar[999] - prod).abs() < 1e-15);
        assert!(s.alpha_bar[999] < 0.01);
        assert!(make_schedule(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_closed_forms() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = standard_normal_like(2, 4, 2, 2, &mut rng);
        let zero = LatentStack::zeros(2, 4, 2, 2);
        let zt = q_sample(&z0, 500, &zero, &s).unwrap();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert_eq!(*a, s.alpha_bar[500].sqrt() * b);
        }
        assert!(q_sample(&z0, 1000, &zero, &s).is_err());
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = 300;
        let z0 = LatentStack::zeros(1, 1, 100, 100);
        let eps = standard_normal_like(1, 1, 100, 100, &mut rng);
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let n = zt.data().len() as f64;
        let mean = zt.data().iter().sum::<f64>() / n;
        let var = zt.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 1.0 - s.alpha_bar[t];
        assert!((var - expect).abs() / expect < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn loss_reductions() {
        let eps = LatentStack::zeros(2, 4, 2, 4);
        let mut hat = eps.clone();
        hat.data_mut().iter_mut().for_each(|v| *v = 1.0);
        // tokens: 2 panels x (1 x 2) positions; mask one of each panel's two
        let mut masks = MaskSet::unmasked(2, 2);
        masks.intra[0][0] = true;
        masks.intra[1][1] = true;
        assert_eq!(masked_denoising_loss(&eps, &hat, &masks, 2).unwrap(), 1.0);
        masks.intra = vec![vec![true; 2]; 2];
        assert_eq!(masked_denoising_loss(&eps, &hat, &masks, 2).unwrap(), 0.0);
    }

    #[test]
    fn lr_zero_keeps_parameters() {
        let cfg = crate::model::ModelConfig::micro();
        let model = Denoiser::new(cfg.clone(), 0).unwrap();
        let before = model.params().to_vec();
        let mut state = TrainState::new(model, 3);
        let rec = PreparedRecord {
            z0: LatentStack::zeros(2, 4, 2, 4),
            captions: crate::model::codec::HashEmbedder { dim: 8, max_tokens: 10 }
                .embed(&["a".into(), "EMPTY".into()]),
            masks: MaskSet::for_inference(2, 2, 1),
        };
        let sched = default_schedule();
        let opt = OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::default()
        };
        train_step(&mut state, &[&rec, &rec], &sched, &opt).unwrap();
        assert_eq!(state.model.params(), before.as_slice());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = Vec::new();
        for step in 0..5 {
            seen.extend(batch_indices(9, step, 4, n));
        }
        let mut first: Vec<usize> = seen[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut second: Vec<usize> = seen[10..20].to_vec();
        second.sort();
        assert_eq!(second, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(9, 2, 4, n), batch_indices(9, 2, 4, n));
    }

    struct Oracle {
        z0: LatentStack,
        sched: NoiseSchedule,
    }
    impl NoisePredictor for Oracle {
        fn predict(&self, z_t: &LatentStack, t: usize) -> Result<LatentStack> {
            let ab = self.sched.alpha_bar[t];
            let mut e = z_t.clone();
            for (x, z) in e.data_mut().iter_mut().zip(self.z0.data()) {
                *x = (*x - ab.sqrt() * z) / (1.0 - ab).sqrt();
            }
            Ok(e)
        }
    }

    #[test]
    fn one_step_sampler_with_true_noise_recovers_z0() {
        let sched = make_schedule(1, 0.3, 0.5, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = standard_normal_like(2, 4, 2, 2, &mut rng);
        let start = standard_normal_like(2, 4, 2, 2, &mut rng);
        let oracle = Oracle { z0: z0.clone(), sched: sched.clone() };
        let out = ancestral_sample(&oracle, &sched, start, None, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_sampler_converges_over_many_steps() {
        let sched = make_schedule(50, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = standard_normal_like(1, 4, 2, 2, &mut rng);
        let start = standard_normal_like(1, 4, 2, 2, &mut rng);
        let oracle = Oracle { z0: z0.clone(), sched: sched.clone() };
        let out = ancestral_sample(&oracle, &sched, start, None, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
