//! Voxel decoders: subject encoders into a shared space, the semantic
//! (high-level) and guidance-feature pipelines with a diffusion prior, the
//! latent (low-level) pipeline, and the pretrain/fine-tune protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::checkpoint::TensorArchive;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{randn, timestep_embeddings, AdamW, Bound, Conv, ConvTranspose, Linear, MixerBlock, OneCycle, ParamSet};
use crate::tensors::{derive_seed, pearson, rng_for, Latent, LATENT_CHANNELS, LATENT_LEN, LATENT_SIDE};

pub const SHARED_DIM: usize = 256;
const TOKEN_DIM: usize = 64;
const MIXER_BLOCKS: usize = 4;
const PRIOR_BLOCKS: usize = 1;
const PROJ_HIDDEN: usize = 128;
const CHANNEL_HIDDEN: usize = 64;
pub const PRIOR_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub mix_beta: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 21,
            peak_lr: 3e-4,
            weight_decay: 0.01,
            alpha: 30.0,
            beta: 0.25,
            tau: 0.07,
            mix_beta: 0.2,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("decoder config: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("contrastive training needs batch_size >= 2");
        }
        if !(self.peak_lr > 0.0 && self.tau > 0.0 && self.mix_beta > 0.0) {
            return bad("peak_lr, tau and mix_beta must be positive");
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.weight_decay < 0.0 {
            return bad("alpha, beta and weight_decay must be nonnegative");
        }
        Ok(())
    }

    /// First epoch (0-based) trained with the soft contrastive loss.
    pub fn switch_epoch(&self) -> usize {
        self.epochs.div_ceil(3)
    }
}

/// Per-voxel z-scoring with training-split statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(train: &Array2<f64>) -> Result<Self> {
        if train.nrows() < 2 {
            return Err(Error::Data("standardization needs at least two training records".into()));
        }
        let mean = train.mean_axis(Axis(0)).unwrap();
        let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::param(format!(
                "standardizer fitted on {} voxels, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok((x - &self.mean) / &self.std)
    }

    pub fn write_into(&self, prefix: &str, a: &mut TensorArchive) {
        a.insert(format!("{prefix}mean"), self.mean.clone().into_dyn());
        a.insert(format!("{prefix}std"), self.std.clone().into_dyn());
    }

    pub fn read_from(prefix: &str, a: &TensorArchive) -> Result<Self> {
        let get = |k: &str| -> Result<Array1<f64>> {
            a.require(&format!("{prefix}{k}"))?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::Data(format!("{prefix}{k} is not a vector")))
        };
        Ok(Self {
            mean: get("mean")?,
            std: get("std")?,
        })
    }
}

/// Training rows of one subject: standardized voxels and flattened targets.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub subject: usize,
    pub voxels: Array2<f64>,
    pub targets: Array2<f64>,
}

fn row_normalize(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r /= n;
    }
    out
}

/// Soft contrastive loss on a tape. `p` is a tape value `[n, D]` (normalized
/// here); `c` holds the targets and is normalized and treated as constant.
pub fn softclip_on_tape(t: &mut Tape, p: Var, c: &Array2<f64>, tau: f64) -> Var {
    let n = c.nrows() as f64;
    let cn = row_normalize(c);
    let target = softmax_rows(&(cn.dot(&cn.t()) / tau));
    let pn = t.normalize_rows(p);
    let ct = t.constant(cn.t().to_owned().into_dyn());
    let logits = t.matmul(pn, ct);
    let logits = t.scale(logits, 1.0 / tau);
    let lsm = t.log_softmax_rows(logits);
    let w = t.constant(target.into_dyn());
    let prod = t.mul(lsm, w);
    let s = t.sum(prod);
    t.scale(s, -1.0 / n)
}

/// Bidirectional MixCo InfoNCE with the target mass matrix `probs`
/// (`probs[i][i] = λ_i`, `probs[i][k(i)] += 1 − λ_i`). The two directions
/// are summed.
pub fn mixco_on_tape(t: &mut Tape, p: Var, c: &Array2<f64>, probs: &Array2<f64>, tau: f64) -> Var {
    let n = c.nrows() as f64;
    let cn = row_normalize(c);
    let pn = t.normalize_rows(p);
    let ct = t.constant(cn.t().to_owned().into_dyn());
    let logits = t.matmul(pn, ct);
    let logits = t.scale(logits, 1.0 / tau);
    let fwd = t.log_softmax_rows(logits);
    let logits_t = t.permute(logits, &[1, 0]);
    let bwd = t.log_softmax_rows(logits_t);
    let w = t.constant(probs.clone().into_dyn());
    let wt = t.constant(probs.t().to_owned().into_dyn());
    let a = t.mul(fwd, w);
    let b = t.mul(bwd, wt);
    let sa = t.sum(a);
    let sb = t.sum(b);
    let tot = t.add(sa, sb);
    t.scale(tot, -1.0 / n)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|v| (v - m).exp());
        let s = r.sum();
        r /= s;
    }
    out
}

fn check_batch(p: &Array2<f64>, c: &Array2<f64>) -> Result<()> {
    if p.nrows() < 2 || p.dim() != c.dim() {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs matching batches of at least 2, got {:?} and {:?}",
            p.dim(),
            c.dim()
        )));
    }
    Ok(())
}

/// `−(1/N) Σ_i Σ_j softmax(c·cᵀ/τ)_ij · log softmax(p·cᵀ/τ)_ij` on
/// L2-normalized rows.
pub fn softclip_loss(p: &Array2<f64>, c: &Array2<f64>, tau: f64) -> Result<f64> {
    check_batch(p, c)?;
    let mut t = Tape::new();
    let pv = t.constant(p.clone().into_dyn());
    let l = softclip_on_tape(&mut t, pv, c, tau);
    Ok(t.scalar(l))
}

/// Target mass matrix for MixCo: row `i` puts `λ_i` on `i` and `1 − λ_i` on
/// `perm[i]`.
pub fn mixco_targets(lambda: &[f64], perm: &[usize]) -> Array2<f64> {
    let n = lambda.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] += lambda[i];
        m[[i, perm[i]]] += 1.0 - lambda[i];
    }
    m
}

/// MixCo loss of voxel embeddings `p` (computed from mixed inputs) against
/// targets `c`.
pub fn mixco_loss(p: &Array2<f64>, c: &Array2<f64>, lambda: &[f64], perm: &[usize], tau: f64) -> Result<f64> {
    check_batch(p, c)?;
    if lambda.len() != p.nrows() || perm.len() != p.nrows() || perm.iter().any(|&k| k >= p.nrows()) {
        return Err(Error::param("mixco: lambda/perm do not match the batch"));
    }
    let mut t = Tape::new();
    let pv = t.constant(p.clone().into_dyn());
    let l = mixco_on_tape(&mut t, pv, c, &mixco_targets(lambda, perm), tau);
    Ok(t.scalar(l))
}

/// Mixes half the batch: returns mixed voxels, λ and partners.
pub fn mix_batch<R: Rng>(x: &Array2<f64>, mix_beta: f64, rng: &mut R) -> (Array2<f64>, Vec<f64>, Vec<usize>) {
    let n = x.nrows();
    let beta = Beta::new(mix_beta, mix_beta).expect("positive beta parameters");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mixed: Vec<usize> = idx[..n / 2].to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut lambda = vec![1.0; n];
    let mut partner: Vec<usize> = (0..n).collect();
    let mut out = x.clone();
    for &i in &mixed {
        let l: f64 = beta.sample(rng);
        let k = perm[i];
        lambda[i] = l;
        partner[i] = k;
        let row = &x.row(i) * l + &x.row(k) * (1.0 - l);
        out.row_mut(i).assign(&row);
    }
    (out, lambda, partner)
}

/// Statistics-matching of a prediction batch to the training latents,
/// using global scalars over all elements.
pub fn momentum_align(batch: &[Latent], mu_tr: f64, sigma_tr: f64) -> Result<Vec<Latent>> {
    if batch.len() < 2 {
        return Err(Error::DegenerateBatch("momentum alignment needs a batch of at least 2".into()));
    }
    let all: Vec<f64> = batch.iter().flat_map(|z| z.as_slice().iter().copied()).collect();
    let n = all.len() as f64;
    let mu = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateBatch("prediction batch has zero variance".into()));
    }
    Ok(batch
        .iter()
        .map(|z| Latent(z.0.mapv(|v| sigma_tr * (v - mu) / sd + mu_tr)))
        .collect())
}

/// Global mean and (population) standard deviation of a latent set.
pub fn latent_stats(latents: &[Latent]) -> (f64, f64) {
    let all: Vec<f64> = latents.iter().flat_map(|z| z.as_slice().iter().copied()).collect();
    let n = all.len().max(1) as f64;
    let mu = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    (mu, sd)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Mixco,
    Soft,
}

/// Loss components of one batch: contrastive term and the second term
/// (prior loss or MAE).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub contrastive: f64,
    pub second: f64,
    pub total: f64,
}

/// A trainable voxel decoder.
pub trait Pipeline: Clone {
    fn kind(&self) -> &str;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn subjects(&self) -> Vec<usize>;
    fn write_into(&self, prefix: &str, a: &mut TensorArchive);
    fn read_from(&mut self, prefix: &str, a: &TensorArchive) -> Result<()>;
    /// Called once a training stage has finished.
    fn mark_trained(&mut self) {}

    fn batch_loss<'a>(
        &'a self,
        t: &mut Tape<'a>,
        p: &Bound,
        subject: usize,
        voxels: &Array2<f64>,
        targets: &Array2<f64>,
        phase: Phase,
        cfg: &DecoderConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(Var, LossParts)>;
}

fn encoder_name(id: usize) -> String {
    format!("enc{id}")
}

fn add_encoders<R: Rng>(ps: &mut ParamSet, subjects: &[(usize, usize)], rng: &mut R) -> BTreeMap<usize, Linear> {
    subjects
        .iter()
        .map(|&(id, d)| (id, Linear::new(ps, &encoder_name(id), d, SHARED_DIM, 1.0, rng)))
        .collect()
}

fn encode_on_tape(t: &mut Tape, p: &Bound, enc: &BTreeMap<usize, Linear>, subject: usize, x: Var) -> Result<Var> {
    let e = enc
        .get(&subject)
        .ok_or_else(|| Error::param(format!("decoder has no encoder for subject {subject}")))?;
    let d = t.shape(x)[1];
    let expect = t.shape(p[e.w])[0];
    if d != expect {
        return Err(Error::param(format!("subject {subject} encoder expects {expect} voxels, got {d}")));
    }
    Ok(e.forward(t, p, x))
}

/// Backbone + projector + diffusion prior over `tokens × 64` targets.
#[derive(Clone, Debug)]
pub struct SemanticPipeline {
    kind: String,
    pub tokens: usize,
    pub params: ParamSet,
    encoders: BTreeMap<usize, Linear>,
    stem: Linear,
    blocks: Vec<MixerBlock>,
    proj: [Linear; 4],
    prior_in: Linear,
    prior_blocks: Vec<MixerBlock>,
    prior_out: Linear,
    prior_sched: NoiseSchedule,
    pub prior_trained: bool,
}

pub fn prior_schedule() -> NoiseSchedule {
    make_schedule(PRIOR_STEPS, 1e-4, 0.999, ScheduleKind::Cosine).expect("valid prior schedule")
}

impl SemanticPipeline {
    pub fn new(kind: &str, tokens: usize, subjects: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = rng_for(seed, &format!("{kind}-init"), 0);
        let r = &mut rng;
        let mut ps = ParamSet::new();
        let encoders = add_encoders(&mut ps, subjects, r);
        let d = tokens * TOKEN_DIM;
        let stem = Linear::new(&mut ps, "shared.stem", SHARED_DIM, d, 1.0, r);
        let blocks = (0..MIXER_BLOCKS)
            .map(|i| MixerBlock::new(&mut ps, &format!("shared.mix{i}"), tokens, TOKEN_DIM, tokens, CHANNEL_HIDDEN, r))
            .collect();
        let proj = [
            Linear::new(&mut ps, "shared.proj0", d, PROJ_HIDDEN, 1.0, r),
            Linear::new(&mut ps, "shared.proj1", PROJ_HIDDEN, PROJ_HIDDEN, 1.0, r),
            Linear::new(&mut ps, "shared.proj2", PROJ_HIDDEN, PROJ_HIDDEN, 1.0, r),
            Linear::new(&mut ps, "shared.proj3", PROJ_HIDDEN, d, 1.0, r),
        ];
        let prior_in = Linear::new(&mut ps, "shared.prior_in", 3 * TOKEN_DIM, TOKEN_DIM, 1.0, r);
        let prior_blocks = (0..PRIOR_BLOCKS)
            .map(|i| MixerBlock::new(&mut ps, &format!("shared.prior_mix{i}"), tokens, TOKEN_DIM, tokens, CHANNEL_HIDDEN, r))
            .collect();
        let prior_out = Linear::new(&mut ps, "shared.prior_out", TOKEN_DIM, TOKEN_DIM, 0.5, r);
        Self {
            kind: kind.to_string(),
            tokens,
            params: ps,
            encoders,
            stem,
            blocks,
            proj,
            prior_in,
            prior_blocks,
            prior_out,
            prior_sched: prior_schedule(),
            prior_trained: false,
        }
    }

    pub fn target_len(&self) -> usize {
        self.tokens * TOKEN_DIM
    }

    /// Fresh encoders for `subjects`, shared weights copied from `self`.
    pub fn with_fresh_encoders(&self, subjects: &[(usize, usize)], seed: u64) -> Result<Self> {
        let mut out = Self::new(&self.kind, self.tokens, subjects, seed);
        out.params.copy_matching(&self.params, "shared.")?;
        out.prior_trained = self.prior_trained;
        Ok(out)
    }

    /// Voxels `[n, d]` → backbone output `[n, tokens·64]`.
    pub fn backbone(&self, t: &mut Tape, p: &Bound, subject: usize, x: Var) -> Result<Var> {
        let n = t.shape(x)[0];
        let h = encode_on_tape(t, p, &self.encoders, subject, x)?;
        let h = self.stem.forward(t, p, h);
        let mut h = t.reshape(h, &[n * self.tokens, TOKEN_DIM]);
        for b in &self.blocks {
            h = b.forward(t, p, h, n);
        }
        Ok(t.reshape(h, &[n, self.target_len()]))
    }

    fn projector(&self, t: &mut Tape, p: &Bound, b: Var) -> Var {
        let mut h = b;
        for (i, l) in self.proj.iter().enumerate() {
            h = l.forward(t, p, h);
            if i < 3 {
                h = t.silu(h);
            }
        }
        h
    }

    /// Clean-target prediction from `x_t` given the backbone output.
    fn prior_net(&self, t: &mut Tape, p: &Bound, x_t: Var, b: Var, ts: &[f64]) -> Var {
        let n = ts.len();
        let k = self.tokens;
        let xr = t.reshape(x_t, &[n * k, TOKEN_DIM]);
        let br = t.reshape(b, &[n * k, TOKEN_DIM]);
        let te = t.constant(timestep_embeddings(ts, TOKEN_DIM));
        let te = t.repeat_rows(te, k);
        let h = t.concat_cols(xr, br);
        let h = t.concat_cols(h, te);
        let mut h = self.prior_in.forward(t, p, h);
        for blk in &self.prior_blocks {
            h = blk.forward(t, p, h, n);
        }
        let h = self.prior_out.forward(t, p, h);
        let h = t.add(h, br);
        t.reshape(h, &[n, self.target_len()])
    }

    pub fn backbone_output(&self, subject: usize, voxels: &Array2<f64>) -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = t.constant(voxels.clone().into_dyn());
        let b = self.backbone(&mut t, &p, subject, x)?;
        Ok(as_matrix(t.value(b)))
    }

    /// Prior loss `mean ‖x̂_0 − c‖²` for one seeded noising of `c`.
    pub fn prior_loss(&self, b: &Array2<f64>, c: &Array2<f64>, seed: u64) -> f64 {
        let mut rng = rng_for(seed, "prior-loss", 0);
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let bv = t.constant(b.clone().into_dyn());
        let mask = vec![1.0; b.nrows()];
        let l = self.prior_term(&mut t, &p, bv, c, &mask, &mut rng);
        t.scalar(l)
    }

    fn prior_term<R: Rng>(&self, t: &mut Tape, p: &Bound, b: Var, c: &Array2<f64>, mask: &[f64], rng: &mut R) -> Var {
        let n = c.nrows();
        let mut x_t = Array2::zeros(c.dim());
        let mut ts = Vec::with_capacity(n);
        for i in 0..n {
            let k = rng.random_range(0..PRIOR_STEPS);
            let ab = self.prior_sched.alpha_bars()[k];
            let eps = randn(&[c.ncols()], 1.0, rng);
            let row = &c.row(i) * ab.sqrt() + &eps.view().into_dimensionality::<ndarray::Ix1>().unwrap() * (1.0 - ab).sqrt();
            x_t.row_mut(i).assign(&row);
            ts.push(k as f64);
        }
        let xv = t.constant(x_t.into_dyn());
        let pred = self.prior_net(t, p, xv, b, &ts);
        let cv = t.constant(c.clone().into_dyn());
        let d = t.sub(pred, cv);
        let kept: f64 = mask.iter().sum();
        let d = t.scale_rows(d, mask.to_vec());
        let sq = t.mul(d, d);
        let m = t.mean(sq);
        t.scale(m, n as f64 / kept.max(1.0))
    }

    /// Deterministic reverse chain of the prior from seeded noise.
    pub fn prior_sample(&self, b: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
        if !self.prior_trained {
            return Err(Error::State(format!("{} prior has not been trained", self.kind)));
        }
        let n = b.nrows();
        let d = self.target_len();
        let mut rng = rng_for(seed, "prior-sample", 0);
        let mut x = as_matrix(&randn(&[n, d], 1.0, &mut rng));
        let abs = self.prior_sched.alpha_bars();
        for k in (0..PRIOR_STEPS).rev() {
            let mut t = Tape::new();
            let p = self.params.bind_frozen(&mut t);
            let xv = t.constant(x.clone().into_dyn());
            let bv = t.constant(b.clone().into_dyn());
            let out = self.prior_net(&mut t, &p, xv, bv, &vec![k as f64; n]);
            let x0 = as_matrix(t.value(out));
            if k == 0 {
                x = x0;
                break;
            }
            let (ab, ab_prev) = (abs[k], abs[k - 1]);
            let eps = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
            x = &x0 * ab_prev.sqrt() + &eps * (1.0 - ab_prev).sqrt();
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericDivergence { step: 0, timestep: 0 });
        }
        Ok(x)
    }

    /// Standardized voxels → decoded targets `[n, tokens·64]`.
    pub fn decode(&self, subject: usize, voxels: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
        let b = self.backbone_output(subject, voxels)?;
        self.prior_sample(&b, seed)
    }

    pub fn encode_shared(&self, subject: usize, voxels: &Array2<f64>) -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = t.constant(voxels.clone().into_dyn());
        let h = encode_on_tape(&mut t, &p, &self.encoders, subject, x)?;
        Ok(as_matrix(t.value(h)))
    }

    pub fn write_into(&self, prefix: &str, a: &mut TensorArchive) {
        self.params.write_into(prefix, a);
        a.insert(format!("{prefix}prior_trained"), ArrayD::from_elem(IxDyn(&[1]), self.prior_trained as u8 as f64));
    }

    pub fn read_from(&mut self, prefix: &str, a: &TensorArchive) -> Result<()> {
        self.params.read_from(prefix, a)?;
        self.prior_trained = a.require(&format!("{prefix}prior_trained"))?.iter().next() == Some(&1.0);
        Ok(())
    }
}

fn as_matrix(a: &ArrayD<f64>) -> Array2<f64> {
    a.view().into_dimensionality().expect("matrix").to_owned()
}

impl Pipeline for SemanticPipeline {
    fn kind(&self) -> &str {
        &self.kind
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn subjects(&self) -> Vec<usize> {
        self.encoders.keys().copied().collect()
    }
    fn write_into(&self, prefix: &str, a: &mut TensorArchive) {
        SemanticPipeline::write_into(self, prefix, a)
    }
    fn read_from(&mut self, prefix: &str, a: &TensorArchive) -> Result<()> {
        SemanticPipeline::read_from(self, prefix, a)
    }
    fn mark_trained(&mut self) {
        self.prior_trained = true;
    }

    fn batch_loss<'a>(
        &'a self,
        t: &mut Tape<'a>,
        p: &Bound,
        subject: usize,
        voxels: &Array2<f64>,
        targets: &Array2<f64>,
        phase: Phase,
        cfg: &DecoderConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(Var, LossParts)> {
        check_targets(voxels, targets, self.target_len())?;
        let n = voxels.nrows();
        let (x, probs, mask) = match phase {
            Phase::Mixco => {
                let (mixed, lambda, partner) = mix_batch(voxels, cfg.mix_beta, rng);
                let mask = lambda.iter().map(|&l| if l == 1.0 { 1.0 } else { 0.0 }).collect();
                (mixed, Some(mixco_targets(&lambda, &partner)), mask)
            }
            Phase::Soft => (voxels.clone(), None, vec![1.0; n]),
        };
        let xv = t.constant(x.into_dyn());
        let b = self.backbone(t, p, subject, xv)?;
        let proj = self.projector(t, p, b);
        let con = match &probs {
            Some(m) => mixco_on_tape(t, proj, targets, m, cfg.tau),
            None => softclip_on_tape(t, proj, targets, cfg.tau),
        };
        let prior = self.prior_term(t, p, b, targets, &mask, rng);
        let scaled = t.scale(prior, cfg.alpha);
        let total = t.add(con, scaled);
        let parts = LossParts {
            contrastive: t.scalar(con),
            second: t.scalar(prior),
            total: t.scalar(total),
        };
        Ok((total, parts))
    }
}

fn check_targets(voxels: &Array2<f64>, targets: &Array2<f64>, len: usize) -> Result<()> {
    if targets.ncols() != len || targets.nrows() != voxels.nrows() {
        return Err(Error::param(format!(
            "targets are {:?}, expected {} rows of width {len}",
            targets.dim(),
            voxels.nrows()
        )));
    }
    Ok(())
}

const LOW_GRID: usize = 16;

/// Residual dense backbone + transposed-conv upsampler to the latent grid.
#[derive(Clone, Debug)]
pub struct LatentPipeline {
    pub params: ParamSet,
    encoders: BTreeMap<usize, Linear>,
    res: Vec<(Linear, Linear)>,
    to_grid: Linear,
    up: ConvTranspose,
    out: Conv,
    proj: [Linear; 4],
    pub mu_tr: f64,
    pub sigma_tr: f64,
}

impl LatentPipeline {
    pub fn new(subjects: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = rng_for(seed, "low-init", 0);
        let r = &mut rng;
        let mut ps = ParamSet::new();
        let encoders = add_encoders(&mut ps, subjects, r);
        let res = (0..4)
            .map(|i| {
                (
                    Linear::new(&mut ps, &format!("shared.res{i}a"), SHARED_DIM, SHARED_DIM, 1.0, r),
                    Linear::new(&mut ps, &format!("shared.res{i}b"), SHARED_DIM, SHARED_DIM, 0.5, r),
                )
            })
            .collect();
        let to_grid = Linear::new(&mut ps, "shared.to_grid", SHARED_DIM, LOW_GRID * 16, 1.0, r);
        let up = ConvTranspose::new(&mut ps, "shared.up", LOW_GRID, LOW_GRID, 4, ConvGeom::new(2, 1), 1.0, r);
        let out = Conv::new(&mut ps, "shared.out", LOW_GRID, LATENT_CHANNELS, 3, ConvGeom::new(1, 1), 1.0, r);
        let proj = [
            Linear::new(&mut ps, "shared.proj0", SHARED_DIM, PROJ_HIDDEN, 1.0, r),
            Linear::new(&mut ps, "shared.proj1", PROJ_HIDDEN, PROJ_HIDDEN, 1.0, r),
            Linear::new(&mut ps, "shared.proj2", PROJ_HIDDEN, PROJ_HIDDEN, 1.0, r),
            Linear::new(&mut ps, "shared.proj3", PROJ_HIDDEN, LATENT_LEN, 1.0, r),
        ];
        Self {
            params: ps,
            encoders,
            res,
            to_grid,
            up,
            out,
            proj,
            mu_tr: 0.0,
            sigma_tr: 1.0,
        }
    }

    pub fn with_fresh_encoders(&self, subjects: &[(usize, usize)], seed: u64) -> Result<Self> {
        let mut out = Self::new(subjects, seed);
        out.params.copy_matching(&self.params, "shared.")?;
        out.mu_tr = self.mu_tr;
        out.sigma_tr = self.sigma_tr;
        Ok(out)
    }

    /// Returns (backbone features `[n, 256]`, latent `[n, 4, 8, 8]`).
    fn forward(&self, t: &mut Tape, p: &Bound, subject: usize, x: Var) -> Result<(Var, Var)> {
        let n = t.shape(x)[0];
        let mut h = encode_on_tape(t, p, &self.encoders, subject, x)?;
        for (a, b) in &self.res {
            let u = a.forward(t, p, h);
            let u = t.silu(u);
            let u = b.forward(t, p, u);
            h = t.add(h, u);
        }
        let g = self.to_grid.forward(t, p, h);
        let g = t.reshape(g, &[n, LOW_GRID, 4, 4]);
        let g = self.up.forward(t, p, g);
        let g = t.silu(g);
        let z = self.out.forward(t, p, g);
        Ok((h, z))
    }

    pub fn predict(&self, subject: usize, voxels: &Array2<f64>) -> Result<Vec<Latent>> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = t.constant(voxels.clone().into_dyn());
        let (_, z) = self.forward(&mut t, &p, subject, x)?;
        Ok(t.value(z).outer_iter().map(|v| Latent::from_dyn(&v.to_owned()).unwrap()).collect())
    }

    /// Prediction followed by momentum alignment to the training statistics.
    pub fn decode(&self, subject: usize, voxels: &Array2<f64>) -> Result<Vec<Latent>> {
        momentum_align(&self.predict(subject, voxels)?, self.mu_tr, self.sigma_tr)
    }

    pub fn write_into(&self, prefix: &str, a: &mut TensorArchive) {
        self.params.write_into(prefix, a);
        a.insert(format!("{prefix}stats"), ArrayD::from_shape_vec(IxDyn(&[2]), vec![self.mu_tr, self.sigma_tr]).unwrap());
    }

    pub fn read_from(&mut self, prefix: &str, a: &TensorArchive) -> Result<()> {
        self.params.read_from(prefix, a)?;
        let s = a.require(&format!("{prefix}stats"))?;
        if s.len() != 2 {
            return Err(Error::Data("latent statistics must hold two values".into()));
        }
        self.mu_tr = s[[0]];
        self.sigma_tr = s[[1]];
        Ok(())
    }
}

impl Pipeline for LatentPipeline {
    fn kind(&self) -> &str {
        "low"
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn subjects(&self) -> Vec<usize> {
        self.encoders.keys().copied().collect()
    }
    fn write_into(&self, prefix: &str, a: &mut TensorArchive) {
        LatentPipeline::write_into(self, prefix, a)
    }
    fn read_from(&mut self, prefix: &str, a: &TensorArchive) -> Result<()> {
        LatentPipeline::read_from(self, prefix, a)
    }

    fn batch_loss<'a>(
        &'a self,
        t: &mut Tape<'a>,
        p: &Bound,
        subject: usize,
        voxels: &Array2<f64>,
        targets: &Array2<f64>,
        _phase: Phase,
        cfg: &DecoderConfig,
        _rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(Var, LossParts)> {
        check_targets(voxels, targets, LATENT_LEN)?;
        let n = voxels.nrows();
        let xv = t.constant(voxels.clone().into_dyn());
        let (h, z) = self.forward(t, p, subject, xv)?;
        let zf = t.reshape(z, &[n, LATENT_LEN]);
        let tv = t.constant(targets.clone().into_dyn());
        let d = t.sub(zf, tv);
        let a = t.abs(d);
        let mae = t.mean(a);
        let mut q = h;
        for (i, l) in self.proj.iter().enumerate() {
            q = l.forward(t, p, q);
            if i < 3 {
                q = t.silu(q);
            }
        }
        let con = softclip_on_tape(t, q, targets, cfg.tau);
        let scaled = t.scale(con, cfg.beta);
        let total = t.add(mae, scaled);
        let parts = LossParts {
            contrastive: t.scalar(con),
            second: t.scalar(mae),
            total: t.scalar(total),
        };
        Ok((total, parts))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub phase: Phase,
    pub contrastive: f64,
    pub second: f64,
    pub total: f64,
}

/// Resumable training state of one pipeline for one stage.
pub struct Trainer<P: Pipeline> {
    pub model: P,
    pub opt: AdamW,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub stage: String,
    cfg: DecoderConfig,
}

/// Subject-homogeneous batches over all training sets, in seeded order.
fn epoch_batches<R: Rng>(sets: &[TrainSet], bs: usize, rng: &mut R) -> Vec<(usize, Vec<usize>)> {
    let mut batches = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        let mut idx: Vec<usize> = (0..set.voxels.nrows()).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(bs) {
            if chunk.len() >= 2 {
                batches.push((s, chunk.to_vec()));
            }
        }
    }
    batches.shuffle(rng);
    batches
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

impl<P: Pipeline> Trainer<P> {
    pub fn new(model: P, stage: &str, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params(), cfg.weight_decay);
        Ok(Self {
            model,
            opt,
            epoch: 0,
            log: Vec::new(),
            stage: stage.to_string(),
            cfg,
        })
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.cfg.switch_epoch() {
            Phase::Mixco
        } else {
            Phase::Soft
        }
    }

    fn steps_per_epoch(&self, sets: &[TrainSet]) -> usize {
        sets.iter().map(|s| s.voxels.nrows().div_ceil(self.cfg.batch_size)).sum()
    }

    pub fn run_epoch(&mut self, sets: &[TrainSet]) -> Result<EpochLog> {
        if sets.iter().all(|s| s.voxels.nrows() < 2) {
            return Err(Error::Data(format!("{}: no training batches", self.model.kind())));
        }
        for s in sets {
            if s.voxels.nrows() != s.targets.nrows() {
                return Err(Error::Data(format!("subject {}: voxel and target rows differ", s.subject)));
            }
        }
        let tag = format!("{}-{}-epoch", self.model.kind(), self.stage);
        let mut rng = rng_for(self.cfg.seed, &tag, self.epoch as u64);
        let batches = epoch_batches(sets, self.cfg.batch_size, &mut rng);
        let lr = OneCycle::new(self.cfg.peak_lr, self.steps_per_epoch(sets) * self.cfg.epochs);
        let base_step = self.epoch * self.steps_per_epoch(sets);
        let phase = self.phase(self.epoch);
        let mut acc = LossParts::default();
        let mut count = 0.0;
        for (b, (s, rows)) in batches.iter().enumerate() {
            let set = &sets[*s];
            let x = gather(&set.voxels, rows);
            let y = gather(&set.targets, rows);
            let (parts, grads) = {
                let mut t = Tape::new();
                let p = self.model.params().bind(&mut t);
                let (loss, parts) = self.model.batch_loss(&mut t, &p, set.subject, &x, &y, phase, &self.cfg, &mut rng)?;
                let grads = p.collect(&t.backward(loss), self.model.params());
                (parts, grads)
            };
            if !parts.total.is_finite() {
                return Err(Error::NumericDivergence {
                    step: base_step + b,
                    timestep: 0,
                });
            }
            let w = rows.len() as f64;
            acc.contrastive += parts.contrastive * w;
            acc.second += parts.second * w;
            acc.total += parts.total * w;
            count += w;
            let step_lr = lr.lr(base_step + b);
            self.opt.update(self.model.params_mut(), grads, step_lr);
        }
        let entry = EpochLog {
            stage: self.stage.clone(),
            epoch: self.epoch,
            phase,
            contrastive: acc.contrastive / count,
            second: acc.second / count,
            total: acc.total / count,
        };
        log::debug!("{} {} epoch {}: {:?}", self.model.kind(), self.stage, self.epoch, entry);
        self.epoch += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn run_to_end(&mut self, sets: &[TrainSet]) -> Result<()> {
        while !self.done() {
            self.run_epoch(sets)?;
        }
        Ok(())
    }

    pub fn write_into(&self, a: &mut TensorArchive) {
        self.opt.write_into("opt.", self.model.params(), a);
        a.insert("trainer.epoch", ArrayD::from_elem(IxDyn(&[1]), self.epoch as f64));
        let rows: Vec<f64> = self
            .log
            .iter()
            .flat_map(|l| [l.contrastive, l.second, l.total])
            .collect();
        a.insert("trainer.log", ArrayD::from_shape_vec(IxDyn(&[self.log.len(), 3]), rows).unwrap());
    }

    /// Restores optimizer, epoch counter and log; the model parameters must
    /// already have been restored into `self.model`.
    pub fn read_from(&mut self, a: &TensorArchive) -> Result<()> {
        self.opt = AdamW::new(self.model.params(), self.cfg.weight_decay);
        self.opt.read_from("opt.", self.model.params(), a)?;
        self.epoch = a.require("trainer.epoch")?[[0]] as usize;
        let l = a.require("trainer.log")?;
        if l.ndim() != 2 || l.shape()[0] != self.epoch || l.shape()[1] != 3 {
            return Err(Error::Data("trainer log does not match its epoch".into()));
        }
        self.log = l
            .outer_iter()
            .enumerate()
            .map(|(e, r)| EpochLog {
                stage: self.stage.clone(),
                epoch: e,
                phase: self.phase(e),
                contrastive: r[0],
                second: r[1],
                total: r[2],
            })
            .collect();
        Ok(())
    }
}

/// Which decoder a pipeline stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Semantic,
    Latent,
    Guide1,
    Guide2,
    Guide3,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Semantic, Head::Latent, Head::Guide1, Head::Guide2, Head::Guide3];

    pub fn name(self) -> &'static str {
        match self {
            Head::Semantic => "semantic",
            Head::Latent => "latent",
            Head::Guide1 => "guide1",
            Head::Guide2 => "guide2",
            Head::Guide3 => "guide3",
        }
    }

    pub fn layer(self) -> Option<usize> {
        match self {
            Head::Guide1 => Some(1),
            Head::Guide2 => Some(2),
            Head::Guide3 => Some(3),
            _ => None,
        }
    }
}

/// Training targets of every head for one subject split.
#[derive(Clone, Debug)]
pub struct SubjectTargets {
    pub subject: usize,
    pub voxels: Array2<f64>,
    pub heads: BTreeMap<Head, Array2<f64>>,
}

/// Flattened per-record targets of `split` for every head.
pub fn split_targets(frozen: &crate::brain::Frozen, split: &crate::brain::Split) -> BTreeMap<Head, Array2<f64>> {
    let t = frozen.targets(&split.scenes);
    let rows = split.record_scene.len();
    let mut out = BTreeMap::new();
    let fill = |len: usize, f: &dyn Fn(usize) -> Vec<f64>| {
        let mut m = Array2::zeros((rows, len));
        for (r, &sc) in split.record_scene.iter().enumerate() {
            m.row_mut(r).assign(&Array1::from(f(sc)));
        }
        m
    };
    out.insert(Head::Semantic, fill(crate::tensors::EMBED_LEN, &|i| t.embeddings[i].to_vec()));
    out.insert(Head::Latent, fill(LATENT_LEN, &|i| t.latents[i].to_vec()));
    for h in [Head::Guide1, Head::Guide2, Head::Guide3] {
        let l = h.layer().unwrap();
        out.insert(h, fill(crate::tensors::FEATURE_LEN, &|i| t.features[i].layers[&l].iter().copied().collect()));
    }
    out
}

fn train_sets(subjects: &[&SubjectTargets], head: Head) -> Vec<TrainSet> {
    subjects
        .iter()
        .map(|s| TrainSet {
            subject: s.subject,
            voxels: s.voxels.clone(),
            targets: s.heads[&head].clone(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum AnyPipeline {
    Semantic(SemanticPipeline),
    Latent(LatentPipeline),
}

const PIPELINE_KIND: &str = "decoder";

impl AnyPipeline {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = TensorArchive::new(PIPELINE_KIND);
        match self {
            AnyPipeline::Semantic(m) => m.write_into("", &mut a),
            AnyPipeline::Latent(m) => m.write_into("", &mut a),
        }
        a.save(path)
    }

    /// Loads a fine-tuned pipeline holding one subject encoder.
    pub fn load(path: &Path, head: Head, subject: usize, voxels: usize) -> Result<Self> {
        let a = TensorArchive::load_kind(path, PIPELINE_KIND)?;
        let mut p = new_pipeline(head, &[(subject, voxels)], 0);
        match &mut p {
            AnyPipeline::Semantic(m) => m.read_from("", &a)?,
            AnyPipeline::Latent(m) => m.read_from("", &a)?,
        }
        Ok(p)
    }

    /// Decoded test rows: prior samples for the semantic heads, aligned
    /// latents for the latent head.
    pub fn decode(&self, subject: usize, voxels: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
        match self {
            AnyPipeline::Semantic(m) => m.decode(subject, voxels, seed),
            AnyPipeline::Latent(m) => Ok(latents_to_rows(&m.decode(subject, voxels)?)),
        }
    }
}

pub fn new_pipeline(head: Head, subjects: &[(usize, usize)], seed: u64) -> AnyPipeline {
    let seed = derive_seed(seed, head.name(), 0);
    match head {
        Head::Latent => AnyPipeline::Latent(LatentPipeline::new(subjects, seed)),
        Head::Semantic => AnyPipeline::Semantic(SemanticPipeline::new(head.name(), crate::tensors::EMBED_TOKENS, subjects, seed)),
        _ => AnyPipeline::Semantic(SemanticPipeline::new(head.name(), crate::tensors::FEATURE_TOKENS, subjects, seed)),
    }
}

/// Logs of both training stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLogs {
    pub pretrain: Vec<EpochLog>,
    pub finetune: Vec<EpochLog>,
}

const STAGE_KIND: &str = "decoder-stage";

/// Runs one training stage to completion. With a state path, the trainer is
/// checkpointed after every epoch and resumed from the file if it exists.
fn run_stage<P: Pipeline>(
    model: P,
    stage: &str,
    cfg: &DecoderConfig,
    sets: &[TrainSet],
    state: Option<&Path>,
) -> Result<(P, Vec<EpochLog>)> {
    let mut tr = Trainer::new(model, stage, cfg.clone())?;
    if let Some(path) = state.filter(|p| p.exists()) {
        let a = TensorArchive::load_kind(path, STAGE_KIND)?;
        tr.model.read_from("model.", &a)?;
        tr.read_from(&a)?;
        if tr.epoch > cfg.epochs {
            return Err(Error::Data(format!("{}: stored epoch {} exceeds the configured {}", path.display(), tr.epoch, cfg.epochs)));
        }
    }
    while !tr.done() {
        tr.run_epoch(sets)?;
        if let Some(path) = state {
            let mut a = TensorArchive::new(STAGE_KIND);
            tr.model.write_into("model.", &mut a);
            tr.write_into(&mut a);
            a.save(path)?;
        }
    }
    tr.model.mark_trained();
    Ok((tr.model, tr.log))
}

fn state_path(dir: Option<&Path>, head: Head, stage: &str) -> Option<PathBuf> {
    dir.map(|d| d.join(format!("{}.{stage}.state.nrta", head.name())))
}

/// Leave-one-subject-out: pretrain on every other subject, then fine-tune a
/// fresh target encoder together with the shared weights on the target.
pub fn pretrain_then_finetune(
    all: &[SubjectTargets],
    target: usize,
    head: Head,
    cfg: &DecoderConfig,
) -> Result<(AnyPipeline, StageLogs)> {
    pretrain_then_finetune_in(all, target, head, cfg, None)
}

/// As [`pretrain_then_finetune`], keeping resumable stage state in `dir`.
pub fn pretrain_then_finetune_in(
    all: &[SubjectTargets],
    target: usize,
    head: Head,
    cfg: &DecoderConfig,
    dir: Option<&Path>,
) -> Result<(AnyPipeline, StageLogs)> {
    if all.len() < 2 {
        return Err(Error::Protocol(format!("pretraining needs at least 2 subjects, got {}", all.len())));
    }
    let tgt = all
        .iter()
        .find(|s| s.subject == target)
        .ok_or_else(|| Error::Protocol(format!("target subject {target} not in the dataset")))?;
    let others: Vec<&SubjectTargets> = all.iter().filter(|s| s.subject != target).collect();
    let dims: Vec<(usize, usize)> = others.iter().map(|s| (s.subject, s.voxels.ncols())).collect();
    let tdim = [(target, tgt.voxels.ncols())];
    let pre_sets = train_sets(&others, head);
    let tgt_sets = train_sets(&[tgt], head);
    let fine_seed = derive_seed(cfg.seed, "finetune-encoder", target as u64);
    let mut logs = StageLogs::default();
    let pre_state = state_path(dir, head, "pretrain");
    let fin_state = state_path(dir, head, "finetune");
    let (pre_state, fin_state) = (pre_state.as_deref(), fin_state.as_deref());
    let out = match new_pipeline(head, &dims, cfg.seed) {
        AnyPipeline::Semantic(m) => {
            let (pre, l1) = run_stage(m, "pretrain", cfg, &pre_sets, pre_state)?;
            let (fin, l2) = run_stage(pre.with_fresh_encoders(&tdim, fine_seed)?, "finetune", cfg, &tgt_sets, fin_state)?;
            logs.pretrain = l1;
            logs.finetune = l2;
            AnyPipeline::Semantic(fin)
        }
        AnyPipeline::Latent(mut m) => {
            let (mu, sd) = stats_of(&tgt.heads[&Head::Latent]);
            m.mu_tr = mu;
            m.sigma_tr = sd;
            let (pre, l1) = run_stage(m, "pretrain", cfg, &pre_sets, pre_state)?;
            let (fin, l2) = run_stage(pre.with_fresh_encoders(&tdim, fine_seed)?, "finetune", cfg, &tgt_sets, fin_state)?;
            logs.pretrain = l1;
            logs.finetune = l2;
            AnyPipeline::Latent(fin)
        }
    };
    Ok((out, logs))
}

/// Target-only training from a fresh initialization.
pub fn train_scratch(tgt: &SubjectTargets, head: Head, cfg: &DecoderConfig) -> Result<(AnyPipeline, Vec<EpochLog>)> {
    train_scratch_in(tgt, head, cfg, None)
}

pub fn train_scratch_in(tgt: &SubjectTargets, head: Head, cfg: &DecoderConfig, dir: Option<&Path>) -> Result<(AnyPipeline, Vec<EpochLog>)> {
    let state = state_path(dir, head, "scratch");
    let state = state.as_deref();
    let dims = [(tgt.subject, tgt.voxels.ncols())];
    let sets = train_sets(&[tgt], head);
    let seed = derive_seed(cfg.seed, "scratch", tgt.subject as u64);
    Ok(match new_pipeline(head, &dims, seed) {
        AnyPipeline::Semantic(m) => {
            let (m, l) = run_stage(m, "scratch", cfg, &sets, state)?;
            (AnyPipeline::Semantic(m), l)
        }
        AnyPipeline::Latent(mut m) => {
            let (mu, sd) = stats_of(&tgt.heads[&Head::Latent]);
            m.mu_tr = mu;
            m.sigma_tr = sd;
            let (m, l) = run_stage(m, "scratch", cfg, &sets, state)?;
            (AnyPipeline::Latent(m), l)
        }
    })
}

fn stats_of(x: &Array2<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.sum() / n;
    let sd = (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    (mu, sd)
}

/// Mean over items of the Pearson correlation between decoded and true
/// rows.
pub fn mean_item_pearson(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let n = pred.nrows();
    (0..n)
        .map(|i| pearson(pred.row(i).as_slice().unwrap(), truth.row(i).as_slice().unwrap()).unwrap_or(0.0))
        .sum::<f64>()
        / n as f64
}

/// Mean over elements (columns) of the Pearson correlation across items;
/// constant columns count as 0.
pub fn mean_element_pearson(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let d = pred.ncols();
    (0..d)
        .map(|j| pearson(&pred.column(j).to_vec(), &truth.column(j).to_vec()).unwrap_or(0.0))
        .sum::<f64>()
        / d as f64
}

/// Voxels of a subject's test split in shared space, for geometry probes.
pub fn voxel_encode(pipeline: &SemanticPipeline, subject: usize, voxels: &[f64]) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, voxels.len()), voxels.to_vec()).unwrap();
    Ok(pipeline.encode_shared(subject, &x)?.row(0).to_vec())
}

/// Rows of a `[n, 4·8·8]` matrix as latents.
pub fn rows_to_latents(m: &Array2<f64>) -> Vec<Latent> {
    m.rows()
        .into_iter()
        .map(|r| Latent::from_vec(r.to_vec()).unwrap())
        .collect()
}

pub fn latents_to_rows(z: &[Latent]) -> Array2<f64> {
    let mut m = Array2::zeros((z.len(), LATENT_LEN));
    for (i, l) in z.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from(l.to_vec()));
    }
    m
}

const _: () = assert!(LATENT_SIDE == 8 && LOW_GRID * 16 == SHARED_DIM);
