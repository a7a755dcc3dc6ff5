//! Noise schedules, DDIM stepping and the feature-guided reverse sampler.
//!
//! The sampler starts from a decoded low-level latent, forward-diffuses it
//! to the step implied by the img2img strength, and runs deterministic DDIM
//! back to zero. During the first guided iterations the noise estimate is
//! corrected by the gradient of a guidance objective evaluated on a blend
//! of the Tweedie estimate and the current state.

use std::f64::consts::FRAC_PI_2;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::brain::{Frozen, SubjectModel, STIMULUS_LEN};
use crate::error::{Error, Result};
use crate::tensors::{rng_for, GuidanceFeatureSet, Image, Latent, SemanticEmbedding, FEATURE_DIM, FEATURE_LEN, FEATURE_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Offset of the cosine schedule, as in improved DDPM.
const COSINE_S: f64 = 0.008;

pub fn make_schedule(t: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t < 2 {
        return Err(Error::param(format!("schedule needs at least 2 steps, got {t}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |i: f64| ((i / t as f64 + COSINE_S) / (1.0 + COSINE_S) * FRAC_PI_2).cos().powi(2);
            (0..t)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for &b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    if let Some(step) = alpha_bar.iter().position(|&a| a <= 0.0) {
        return Err(Error::DegenerateSchedule { step });
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::param(format!("timestep {t} outside schedule of {} steps", self.num_steps())))
    }

    /// DDIM timesteps `τ_i = i·(T/S)` for `i = 0..S`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.num_steps() {
            return Err(Error::param(format!(
                "ddim steps must be in 1..={}, got {steps}",
                self.num_steps()
            )));
        }
        let stride = self.num_steps() / steps;
        Ok((0..steps).map(|i| i * stride).collect())
    }
}

fn check_pair(a: &Latent, b: &Latent) -> Result<()> {
    a.check()?;
    b.check()
}

pub fn forward_diffuse_at(z0: &Latent, eps: &Latent, ab: f64) -> Result<Latent> {
    check_pair(z0, eps)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Latent(ndarray::Zip::from(&z0.0).and(&eps.0).map_collect(|&z, &e| s * z + n * e)))
}

pub fn forward_diffuse(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    forward_diffuse_at(z0, eps, sched.alpha_bar(t)?)
}

/// Score-parameterised form of the Tweedie estimate, used as a
/// cross-check of the ε form.
pub fn tweedie_score_form(z_t: &Latent, eps_hat: &Latent, ab: f64) -> Latent {
    let n2 = 1.0 - ab;
    let sd = n2.sqrt();
    let inv = 1.0 / ab.sqrt();
    Latent(ndarray::Zip::from(&z_t.0).and(&eps_hat.0).map_collect(|&z, &e| {
        let score = -e / sd;
        (z + n2 * score) * inv
    }))
}

/// `ẑ_0 = (z_t − √(1−ᾱ)·ε̂)/√ᾱ` for an explicit `ᾱ` (step index only used
/// in the error).
pub fn tweedie_at(z_t: &Latent, eps_hat: &Latent, ab: f64, step: usize) -> Result<Latent> {
    check_pair(z_t, eps_hat)?;
    if ab <= 0.0 {
        return Err(Error::DegenerateSchedule { step });
    }
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = Latent(ndarray::Zip::from(&z_t.0).and(&eps_hat.0).map_collect(|&z, &e| (z - n * e) / s));
    if ab < 1.0 && out.is_finite() {
        let score = tweedie_score_form(z_t, eps_hat, ab);
        let worst = (&score.0 - &out.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= 1e-10, "Tweedie forms disagree by {worst} at alpha_bar {ab}");
    }
    Ok(out)
}

pub fn tweedie_estimate(z_t: &Latent, eps_hat: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    tweedie_at(z_t, eps_hat, sched.alpha_bar(t)?, t)
}

/// `ẑ_t = √(1−ᾱ)·ẑ_0 + (1 − √(1−ᾱ))·z_t`.
pub fn blend_weighted_at(z0_hat: &Latent, z_t: &Latent, ab: f64) -> Result<Latent> {
    check_pair(z0_hat, z_t)?;
    let w = (1.0 - ab).sqrt();
    Ok(Latent(ndarray::Zip::from(&z0_hat.0).and(&z_t.0).map_collect(|&a, &b| w * a + (1.0 - w) * b)))
}

pub fn blend_weighted(z0_hat: &Latent, z_t: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    blend_weighted_at(z0_hat, z_t, sched.alpha_bar(t)?)
}

pub fn cfg_epsilon(eps_cond: &Latent, eps_uncond: &Latent, scale: f64) -> Result<Latent> {
    check_pair(eps_cond, eps_uncond)?;
    Ok(Latent(
        ndarray::Zip::from(&eps_cond.0)
            .and(&eps_uncond.0)
            .map_collect(|&c, &u| u + scale * (c - u)),
    ))
}

/// One deterministic DDIM update from `ᾱ` to `ᾱ_prev` with noise estimate
/// `eps`. Both sampler branches go through here.
fn ddim_step(z_t: &Latent, eps: &Latent, ab: f64, ab_prev: f64, step: usize) -> Result<Latent> {
    let z0 = tweedie_at(z_t, eps, ab, step)?;
    forward_diffuse_at(&z0, eps, ab_prev)
}

/// A conditional noise-prediction network.
pub trait NoisePredictor: Sync {
    /// Predictions for a batch sharing one timestep.
    fn predict(&self, z: &[&Latent], t: usize, c: &[&SemanticEmbedding]) -> Result<Vec<Latent>>;

    /// `Jᵀ·cot` where `J = ∂ε_θ(z, t, c)/∂z`.
    fn predict_vjp(&self, z: &Latent, t: usize, c: &SemanticEmbedding, cot: &Latent) -> Result<Latent>;
}

/// Classifier-free noise estimate; conditional and null branches are
/// evaluated as one batch.
pub fn cfg_predict(model: &dyn NoisePredictor, z: &Latent, t: usize, c: &SemanticEmbedding, scale: f64) -> Result<Latent> {
    let null = SemanticEmbedding::null();
    let out = model.predict(&[z, z], t, &[c, &null])?;
    cfg_epsilon(&out[0], &out[1], scale)
}

fn cfg_vjp(model: &dyn NoisePredictor, z: &Latent, t: usize, c: &SemanticEmbedding, scale: f64, cot: &Latent) -> Result<Latent> {
    let cond = model.predict_vjp(z, t, c, cot)?;
    let unc = model.predict_vjp(z, t, &SemanticEmbedding::null(), cot)?;
    cfg_epsilon(&cond, &unc, scale)
}

/// A differentiable loss on the blended latent `ẑ_t`. Implementations
/// return the unscaled loss; the sampler applies κ.
pub trait GuidanceObjective {
    fn loss_and_grad(&self, z_hat: &Latent) -> Result<(f64, Latent)>;

    fn loss(&self, z_hat: &Latent) -> Result<f64> {
        Ok(self.loss_and_grad(z_hat)?.0)
    }
}

/// `Σ_l ‖f^l(D(ẑ)) − ĝ^l‖²` over the configured layers.
pub struct FeatureGuidance<'a> {
    pub frozen: &'a Frozen,
    pub targets: &'a GuidanceFeatureSet,
    pub layers: Vec<usize>,
}

impl GuidanceObjective for FeatureGuidance<'_> {
    fn loss_and_grad(&self, z_hat: &Latent) -> Result<(f64, Latent)> {
        let img = self.frozen.codec.decode(z_hat)?;
        let feats = self.frozen.features.extract_all(&img)?;
        let mut loss = 0.0;
        let mut cot = GuidanceFeatureSet::default();
        for &l in &self.layers {
            crate::features::check_layer(l)?;
            let diff = feats.layer(l)? - self.targets.layer(l)?;
            loss += diff.iter().map(|v| v * v).sum::<f64>();
            cot.layers.insert(l, diff * 2.0);
        }
        let gimg = self.frozen.features.vjp(&img, &cot)?;
        Ok((loss, self.frozen.codec.decode_vjp(&gimg)?))
    }
}

/// Guidance by a voxel encoding model: `‖W·[g(D(ẑ)); ĉ] − v‖²`, with the
/// semantic block fixed to the decoded condition.
pub struct BrainGuidance<'a> {
    pub frozen: &'a Frozen,
    pub subject: &'a SubjectModel,
    pub semantic: &'a SemanticEmbedding,
    pub measured: &'a [f64],
}

impl GuidanceObjective for BrainGuidance<'_> {
    fn loss_and_grad(&self, z_hat: &Latent) -> Result<(f64, Latent)> {
        if self.measured.len() != self.subject.voxels() {
            return Err(Error::param(format!(
                "subject {} has {} voxels, measurement has {}",
                self.subject.id,
                self.subject.voxels(),
                self.measured.len()
            )));
        }
        let img = self.frozen.codec.decode(z_hat)?;
        let feats = self.frozen.features.extract_all(&img)?;
        let stim = crate::brain::stimulus_vector(&feats, self.semantic)?;
        let pred = self.subject.w.dot(&ndarray::Array1::from(stim));
        let resid = &pred - &ndarray::ArrayView1::from(self.measured);
        let loss = resid.dot(&resid);
        let gstim = self.subject.w.t().dot(&resid) * 2.0;
        debug_assert_eq!(gstim.len(), STIMULUS_LEN);
        let mut cot = GuidanceFeatureSet::default();
        for (i, l) in crate::tensors::LAYERS.iter().enumerate() {
            let block = gstim.slice(ndarray::s![i * FEATURE_LEN..(i + 1) * FEATURE_LEN]).to_owned();
            cot.layers.insert(*l, block.into_shape_with_order((FEATURE_TOKENS, FEATURE_DIM)).unwrap());
        }
        let gimg = self.frozen.features.vjp(&img, &cot)?;
        Ok((loss, self.frozen.codec.decode_vjp(&gimg)?))
    }
}

/// `L_g = κ·Σ_l ‖f^l(D(ẑ_t)) − ĝ^l‖²` and its gradient with respect to
/// `ẑ_t`, over all layers present in `targets`.
pub fn guidance_loss(z_t_hat: &Latent, targets: &GuidanceFeatureSet, kappa: f64, frozen: &Frozen) -> Result<(f64, Latent)> {
    if targets.layers.is_empty() {
        return Err(Error::Config("guidance targets contain no layers".into()));
    }
    let g = FeatureGuidance {
        frozen,
        targets,
        layers: targets.layers.keys().copied().collect(),
    };
    let (l, grad) = g.loss_and_grad(z_t_hat)?;
    Ok((kappa * l, Latent(grad.0 * kappa)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    StopGradient,
    FullBackprop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub kappa: f64,
    pub eta: f64,
    pub cfg_scale: f64,
    pub ddim_steps: usize,
    pub img2img_strength: f64,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            eta: 0.2,
            cfg_scale: 7.5,
            ddim_steps: 50,
            img2img_strength: 0.75,
            grad_mode: GradMode::StopGradient,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be a nonnegative number, got {}", self.kappa));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return bad(format!("cfg_scale must be nonnegative, got {}", self.cfg_scale));
        }
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be positive".into());
        }
        if !(self.img2img_strength > 0.0 && self.img2img_strength <= 1.0) {
            return bad(format!("img2img_strength must lie in (0, 1], got {}", self.img2img_strength));
        }
        Ok(())
    }

    /// Reverse iterations actually run: `⌊S·strength⌋`, at least one.
    pub fn init_steps(&self) -> usize {
        ((self.ddim_steps as f64 * self.img2img_strength + 1e-9).floor() as usize).clamp(1, self.ddim_steps)
    }

    /// Number of leading (highest-noise) iterations that take the guided
    /// branch: `⌈η·iterations⌉`.
    pub fn guided_iterations(&self) -> usize {
        let n = self.init_steps();
        ((self.eta * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

pub struct SamplerModels<'a> {
    pub denoiser: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub t: usize,
    pub guided: bool,
    /// Scaled guidance loss `κ·L` at `ẑ_t`, guided iterations only.
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub latent: Latent,
    pub trace: Vec<TraceStep>,
}

/// The starting state: `init` diffused to the first reverse timestep with
/// seeded noise.
pub fn initial_state(init: &Latent, cfg: &GuidanceConfig, sched: &NoiseSchedule) -> Result<(Latent, usize)> {
    let taus = sched.ddim_timesteps(cfg.ddim_steps)?;
    let start = taus[cfg.init_steps() - 1];
    let mut rng = rng_for(cfg.seed, "sampler-init", 0);
    let eps = Latent::randn(&mut rng);
    Ok((forward_diffuse(init, start, &eps, sched)?, start))
}

/// Gradient with respect to `z_t` of an objective evaluated at the blended
/// latent, given its gradient `g` with respect to `ẑ_t`.
fn chain_to_state(
    g: &Latent,
    ab: f64,
    mode: GradMode,
    models: &SamplerModels,
    z_t: &Latent,
    t: usize,
    c: &SemanticEmbedding,
    cfg_scale: f64,
) -> Result<Latent> {
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    // ẑ_t = n·(z_t − n·ε)/s + (1 − n)·z_t
    let direct = n / s + 1.0 - n;
    let mut out = Latent(&g.0 * direct);
    if mode == GradMode::FullBackprop {
        let through_eps = cfg_vjp(models.denoiser, z_t, t, c, cfg_scale, g)?;
        out.0.scaled_add(-n * n / s, &through_eps.0);
    }
    Ok(out)
}

pub fn guided_sample(
    init: &Latent,
    c: &SemanticEmbedding,
    objective: Option<&dyn GuidanceObjective>,
    cfg: &GuidanceConfig,
    models: &SamplerModels,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let sched = models.schedule;
    let taus = sched.ddim_timesteps(cfg.ddim_steps)?;
    let n_iter = cfg.init_steps();
    let n_guided = if objective.is_some() { cfg.guided_iterations() } else { 0 };
    let (mut z, _) = initial_state(init, cfg, sched)?;
    let mut trace = Vec::with_capacity(n_iter);
    for it in 0..n_iter {
        let idx = n_iter - 1 - it;
        let t = taus[idx];
        let ab = sched.alpha_bar(t)?;
        let ab_prev = if idx == 0 { 1.0 } else { sched.alpha_bar(taus[idx - 1])? };
        let eps_cfg = cfg_predict(models.denoiser, &z, t, c, cfg.cfg_scale)?;
        let mut step = TraceStep {
            iteration: it,
            t,
            guided: it < n_guided,
            loss: None,
            grad_norm: None,
        };
        let eps = match objective {
            Some(obj) if it < n_guided => {
                let z0 = tweedie_at(&z, &eps_cfg, ab, t)?;
                let zh = blend_weighted_at(&z0, &z, ab)?;
                let (loss, g) = obj.loss_and_grad(&zh)?;
                let g = Latent(g.0 * cfg.kappa);
                let gz = chain_to_state(&g, ab, cfg.grad_mode, models, &z, t, c, cfg.cfg_scale)?;
                step.loss = Some(cfg.kappa * loss);
                step.grad_norm = Some(gz.norm());
                if cfg.kappa == 0.0 {
                    eps_cfg
                } else {
                    let mut e = eps_cfg;
                    e.0.scaled_add((1.0 - ab).sqrt(), &gz.0);
                    e
                }
            }
            _ => eps_cfg,
        };
        z = ddim_step(&z, &eps, ab, ab_prev, t)?;
        if !z.is_finite() {
            return Err(Error::NumericDivergence { step: it, timestep: t });
        }
        trace.push(step);
    }
    Ok(SampleOutput { latent: z, trace })
}

pub fn unguided_sample(init: &Latent, c: &SemanticEmbedding, cfg: &GuidanceConfig, models: &SamplerModels) -> Result<SampleOutput> {
    guided_sample(init, c, None, cfg, models)
}

/// Scale at which `‖√(1−ᾱ)·∇_z(κ·L)‖ ≈ ‖ε_cfg‖` on the first guided step:
/// the median ratio over the calibration items.
pub fn calibrate_kappa(
    items: &[(&Latent, &SemanticEmbedding, &dyn GuidanceObjective)],
    cfg: &GuidanceConfig,
    models: &SamplerModels,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("calibration needs at least one item".into()));
    }
    let mut ratios = Vec::with_capacity(items.len());
    for (k, (init, c, obj)) in items.iter().enumerate() {
        let item_cfg = GuidanceConfig {
            seed: crate::tensors::derive_seed(cfg.seed, "calibration", k as u64),
            ..cfg.clone()
        };
        let (z, t) = initial_state(init, &item_cfg, models.schedule)?;
        let ab = models.schedule.alpha_bar(t)?;
        let eps = cfg_predict(models.denoiser, &z, t, c, cfg.cfg_scale)?;
        let zh = blend_weighted_at(&tweedie_at(&z, &eps, ab, t)?, &z, ab)?;
        let (_, g) = obj.loss_and_grad(&zh)?;
        let gz = chain_to_state(&g, ab, cfg.grad_mode, models, &z, t, c, cfg.cfg_scale)?;
        let denom = (1.0 - ab).sqrt() * gz.norm();
        if denom > 0.0 && denom.is_finite() {
            ratios.push(eps.norm() / denom);
        }
    }
    if ratios.is_empty() {
        return Err(Error::DegenerateBatch("guidance gradient vanished on every calibration item".into()));
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    Ok(if m % 2 == 1 { ratios[m / 2] } else { 0.5 * (ratios[m / 2 - 1] + ratios[m / 2]) })
}

/// The decoded, clamped image of a sampler output.
pub fn render_latent(frozen: &Frozen, z: &Latent) -> Result<Image> {
    frozen.codec.decode_clamped(z)
}

pub fn zeros_like() -> Latent {
    Latent(Array3::zeros((4, 8, 8)))
}
