//! Small conditional noise-prediction network ε_θ(z_t, t, c).
//!
//! Two stride-2 stages take the 8×8 latent down to 2×2 and transposed
//! convolutions bring it back up with skip connections. A sinusoidal
//! timestep embedding and a learned linear pooling of the semantic
//! condition are summed into one embedding that is added, per channel, at
//! every stage.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::checkpoint::TensorArchive;
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{timestep_embeddings, AdamW, Bound, Conv, ConvTranspose, Linear, OneCycle, ParamSet};
use crate::tensors::{rng_for, Latent, SemanticEmbedding, EMBED_LEN, LATENT_CHANNELS, LATENT_LEN, LATENT_SIDE};

pub const CHECKPOINT_KIND: &str = "denoiser";
const EMB: usize = 64;
const C1: usize = 24;
const C2: usize = 48;

const SAME: ConvGeom = ConvGeom::new(1, 1);
const DOWN: ConvGeom = ConvGeom::new(2, 1);
const UP: ConvGeom = ConvGeom::new(2, 1);

#[derive(Clone, Copy, Debug)]
struct Layers {
    t_fc: Linear,
    c_fc: Linear,
    emb_fc: Linear,
    inject: [Linear; 5],
    conv_in: Conv,
    res1: Conv,
    down1: Conv,
    res2: Conv,
    down2: Conv,
    up2: ConvTranspose,
    res3: Conv,
    up1: ConvTranspose,
    res4: Conv,
    conv_out: Conv,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub params: ParamSet,
    layers: Layers,
}

impl Denoiser {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "denoiser-init", 0);
        let r = &mut rng;
        let mut ps = ParamSet::new();
        let p = &mut ps;
        let inject_ch = [C1, C2, C2, C2, C1];
        let inject = std::array::from_fn(|i| Linear::new(p, &format!("inject{i}"), EMB, inject_ch[i], 0.5, r));
        let layers = Layers {
            t_fc: Linear::new(p, "t_fc", EMB, EMB, 1.0, r),
            c_fc: Linear::new(p, "c_fc", EMBED_LEN, EMB, 1.0, r),
            emb_fc: Linear::new(p, "emb_fc", EMB, EMB, 1.0, r),
            inject,
            conv_in: Conv::new(p, "conv_in", LATENT_CHANNELS, C1, 3, SAME, 1.0, r),
            res1: Conv::new(p, "res1", C1, C1, 3, SAME, 1.0, r),
            down1: Conv::new(p, "down1", C1, C2, 3, DOWN, 1.0, r),
            res2: Conv::new(p, "res2", C2, C2, 3, SAME, 1.0, r),
            down2: Conv::new(p, "down2", C2, C2, 3, DOWN, 1.0, r),
            up2: ConvTranspose::new(p, "up2", C2, C2, 4, UP, 1.0, r),
            res3: Conv::new(p, "res3", C2, C2, 3, SAME, 1.0, r),
            up1: ConvTranspose::new(p, "up1", C2, C1, 4, UP, 1.0, r),
            res4: Conv::new(p, "res4", C1, C1, 3, SAME, 1.0, r),
            conv_out: Conv::new(p, "conv_out", C1, LATENT_CHANNELS, 3, SAME, 0.5, r),
        };
        Self { params: ps, layers }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records the network on `t`. `z: [n, 4, 8, 8]`, `c: [n, 512]`.
    fn forward(&self, t: &mut Tape, p: &Bound, z: Var, ts: &[f64], c: Var) -> Var {
        let l = &self.layers;
        let n = ts.len();
        let temb = t.constant(timestep_embeddings(ts, EMB));
        let te = l.t_fc.forward(t, p, temb);
        let ce = l.c_fc.forward(t, p, c);
        let e = t.add(te, ce);
        let e = t.silu(e);
        let e = l.emb_fc.forward(t, p, e);
        let e = t.silu(e);
        let inject = |t: &mut Tape, x: Var, k: usize| {
            let side = t.shape(x)[2];
            let b = l.inject[k].forward(t, p, e);
            let b = t.broadcast_spatial(b, side, side);
            t.add(x, b)
        };
        let act = |t: &mut Tape, x: Var| t.silu(x);
        debug_assert_eq!(t.shape(z)[0], n);

        let h = l.conv_in.forward(t, p, z);
        let h = inject(t, h, 0);
        let h = act(t, h);
        let r = l.res1.forward(t, p, h);
        let r = act(t, r);
        let s1 = t.add(h, r); // 8×8

        let h = l.down1.forward(t, p, s1);
        let h = inject(t, h, 1);
        let h = act(t, h);
        let r = l.res2.forward(t, p, h);
        let r = act(t, r);
        let s2 = t.add(h, r); // 4×4

        let h = l.down2.forward(t, p, s2);
        let h = inject(t, h, 2);
        let h = act(t, h); // 2×2

        let h = l.up2.forward(t, p, h);
        let h = t.add(h, s2);
        let h = inject(t, h, 3);
        let h = act(t, h);
        let r = l.res3.forward(t, p, h);
        let r = act(t, r);
        let h = t.add(h, r);

        let h = l.up1.forward(t, p, h);
        let h = t.add(h, s1);
        let h = inject(t, h, 4);
        let h = act(t, h);
        let r = l.res4.forward(t, p, h);
        let r = act(t, r);
        let h = t.add(h, r);
        l.conv_out.forward(t, p, h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = TensorArchive::new(CHECKPOINT_KIND);
        self.params.write_into("", &mut a);
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = TensorArchive::load_kind(path, CHECKPOINT_KIND)?;
        let mut d = Self::new(0);
        d.params.read_from("", &a)?;
        if !d.params.all_finite() {
            return Err(Error::Data(format!("{}: non-finite denoiser parameters", path.display())));
        }
        Ok(d)
    }
}

fn stack_latents(z: &[&Latent]) -> ArrayD<f64> {
    let mut v = Vec::with_capacity(z.len() * LATENT_LEN);
    for x in z {
        v.extend_from_slice(x.as_slice());
    }
    ArrayD::from_shape_vec(IxDyn(&[z.len(), LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE]), v).unwrap()
}

fn stack_conds(c: &[&SemanticEmbedding]) -> ArrayD<f64> {
    let mut v = Vec::with_capacity(c.len() * EMBED_LEN);
    for x in c {
        v.extend_from_slice(x.as_slice());
    }
    ArrayD::from_shape_vec(IxDyn(&[c.len(), EMBED_LEN]), v).unwrap()
}

fn check_inputs(z: &[&Latent], c: &[&SemanticEmbedding]) -> Result<()> {
    if z.len() != c.len() {
        return Err(Error::param(format!("{} latents but {} conditions", z.len(), c.len())));
    }
    for x in z {
        x.check()?;
    }
    for x in c {
        crate::error::ensure_shape("semantic embedding", x.0.shape(), &[crate::tensors::EMBED_TOKENS, crate::tensors::EMBED_DIM])?;
    }
    Ok(())
}

fn unstack(a: &ArrayD<f64>) -> Vec<Latent> {
    a.outer_iter().map(|x| Latent::from_dyn(&x.to_owned()).unwrap()).collect()
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z: &[&Latent], t: usize, c: &[&SemanticEmbedding]) -> Result<Vec<Latent>> {
        check_inputs(z, c)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(stack_latents(z));
        let cv = tape.constant(stack_conds(c));
        let out = self.forward(&mut tape, &p, zv, &vec![t as f64; z.len()], cv);
        Ok(unstack(tape.value(out)))
    }

    fn predict_vjp(&self, z: &Latent, t: usize, c: &SemanticEmbedding, cot: &Latent) -> Result<Latent> {
        check_inputs(&[z], &[c])?;
        cot.check()?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zv = tape.input(stack_latents(&[z]));
        let cv = tape.constant(stack_conds(&[c]));
        let out = self.forward(&mut tape, &p, zv, &[t as f64], cv);
        let mut g = tape.backward_with(out, stack_latents(&[cot]));
        let gz = g.take(zv).unwrap_or_else(|| ArrayD::zeros(IxDyn(&[1, 4, 8, 8])));
        Ok(unstack(&gz).remove(0))
    }
}

/// Deterministic forward for a single item.
pub fn denoiser_forward(z_t: &Latent, t: usize, c: &SemanticEmbedding, model: &Denoiser, sched: &NoiseSchedule) -> Result<Latent> {
    sched.alpha_bar(t)?;
    Ok(model.predict(&[z_t], t, &[c])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            peak_lr: 3e-4,
            weight_decay: 0.01,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("denoiser epochs and batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.cond_dropout) || self.weight_decay < 0.0 {
            return Err(Error::Config("denoiser learning rate, dropout or weight decay out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub first_batch_loss: f64,
    pub samples: usize,
    pub dropped: usize,
}

impl EpochStats {
    pub fn dropout_rate(&self) -> f64 {
        self.dropped as f64 / self.samples.max(1) as f64
    }
}

/// Everything needed to continue training after an interruption.
pub struct DenoiserTrainer {
    pub model: Denoiser,
    pub opt: AdamW,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    cfg: DenoiserTrainConfig,
}

/// `(ε_θ(z_t, t, c), ε)` regression loss of one batch and its gradients.
fn batch_loss(
    model: &Denoiser,
    z_t: ArrayD<f64>,
    ts: &[f64],
    c: ArrayD<f64>,
    eps: ArrayD<f64>,
    with_grads: bool,
) -> (f64, Option<Vec<ArrayD<f64>>>) {
    let mut tape = Tape::new();
    let p = if with_grads {
        model.params.bind(&mut tape)
    } else {
        model.params.bind_frozen(&mut tape)
    };
    let zv = tape.constant(z_t);
    let cv = tape.constant(c);
    let ev = tape.constant(eps);
    let out = model.forward(&mut tape, &p, zv, ts, cv);
    let d = tape.sub(out, ev);
    let sq = tape.mul(d, d);
    let loss = tape.mean(sq);
    let value = tape.scalar(loss);
    let grads = with_grads.then(|| p.collect(&tape.backward(loss), &model.params));
    (value, grads)
}

/// Loss of one seeded training batch over `latents`, with parameter
/// gradients when `with_grads` is set.
pub fn training_batch_loss(
    model: &Denoiser,
    latents: &[Latent],
    conds: &[SemanticEmbedding],
    sched: &NoiseSchedule,
    cond_dropout: f64,
    seed: u64,
    with_grads: bool,
) -> (f64, Option<Vec<ArrayD<f64>>>) {
    let mut rng = rng_for(seed, "denoiser-probe-batch", 0);
    let idx: Vec<usize> = (0..latents.len()).collect();
    let b = make_batch(&idx, latents, conds, sched, cond_dropout, &mut rng);
    batch_loss(model, b.z_t, &b.ts, b.c, b.eps, with_grads)
}

/// A noised training batch: items, timesteps, dropout mask and noise.
struct Batch {
    z_t: ArrayD<f64>,
    ts: Vec<f64>,
    c: ArrayD<f64>,
    eps: ArrayD<f64>,
    dropped: usize,
}

fn make_batch<R: Rng>(
    idx: &[usize],
    latents: &[Latent],
    conds: &[SemanticEmbedding],
    sched: &NoiseSchedule,
    dropout: f64,
    rng: &mut R,
) -> Batch {
    let null = SemanticEmbedding::null();
    let mut zs = Vec::with_capacity(idx.len());
    let mut cs = Vec::with_capacity(idx.len());
    let mut es = Vec::with_capacity(idx.len());
    let mut ts = Vec::with_capacity(idx.len());
    let mut dropped = 0;
    for &i in idx {
        let t = rng.random_range(0..sched.num_steps());
        let eps = Latent::randn(rng);
        let ab = sched.alpha_bars()[t];
        zs.push(crate::diffusion::forward_diffuse_at(&latents[i], &eps, ab).unwrap());
        let drop = rng.random::<f64>() < dropout;
        dropped += drop as usize;
        cs.push(if drop { &null } else { &conds[i] });
        es.push(eps);
        ts.push(t as f64);
    }
    let zr: Vec<&Latent> = zs.iter().collect();
    let er: Vec<&Latent> = es.iter().collect();
    Batch {
        z_t: stack_latents(&zr),
        ts,
        c: stack_conds(&cs),
        eps: stack_latents(&er),
        dropped,
    }
}

impl DenoiserTrainer {
    pub fn new(cfg: DenoiserTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::new(cfg.seed);
        let opt = AdamW::new(&model.params, cfg.weight_decay);
        Ok(Self {
            model,
            opt,
            epoch: 0,
            history: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserTrainConfig {
        &self.cfg
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One pass over the data. Each epoch draws from its own stream, so a
    /// resumed run continues exactly as an uninterrupted one.
    pub fn run_epoch(&mut self, latents: &[Latent], conds: &[SemanticEmbedding], sched: &NoiseSchedule) -> Result<EpochStats> {
        if latents.is_empty() {
            return Err(Error::Data("denoiser training set is empty".into()));
        }
        if latents.len() != conds.len() {
            return Err(Error::Data(format!("{} latents but {} conditions", latents.len(), conds.len())));
        }
        let bs = self.cfg.batch_size;
        let per_epoch = latents.len().div_ceil(bs);
        let sched_lr = OneCycle::new(self.cfg.peak_lr, per_epoch * self.cfg.epochs);
        let mut rng = rng_for(self.cfg.seed, "denoiser-epoch", self.epoch as u64);
        let mut order: Vec<usize> = (0..latents.len()).collect();
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch: self.epoch,
            ..Default::default()
        };
        let mut total = 0.0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let batch = make_batch(chunk, latents, conds, sched, self.cfg.cond_dropout, &mut rng);
            let (loss, grads) = batch_loss(&self.model, batch.z_t, &batch.ts, batch.c, batch.eps, true);
            if !loss.is_finite() {
                return Err(Error::NumericDivergence {
                    step: self.opt.step as usize,
                    timestep: 0,
                });
            }
            if b == 0 {
                stats.first_batch_loss = loss;
            }
            total += loss * chunk.len() as f64;
            stats.samples += chunk.len();
            stats.dropped += batch.dropped;
            let step = self.epoch * per_epoch + b;
            self.opt.update(&mut self.model.params, grads.unwrap(), sched_lr.lr(step));
        }
        stats.mean_loss = total / stats.samples as f64;
        log::debug!("denoiser epoch {} loss {:.4}", self.epoch, stats.mean_loss);
        self.epoch += 1;
        self.history.push(stats.clone());
        Ok(stats)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new("denoiser-trainer");
        self.model.params.write_into("model.", &mut a);
        self.opt.write_into("opt.", &self.model.params, &mut a);
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|s| [s.mean_loss, s.first_batch_loss, s.samples as f64, s.dropped as f64])
            .collect();
        a.insert("history", ArrayD::from_shape_vec(IxDyn(&[self.history.len(), 4]), hist).unwrap());
        a.insert("epoch", ArrayD::from_elem(IxDyn(&[1]), self.epoch as f64));
        a
    }

    pub fn from_archive(cfg: DenoiserTrainConfig, a: &TensorArchive) -> Result<Self> {
        let mut tr = Self::new(cfg)?;
        if a.kind() != "denoiser-trainer" {
            return Err(Error::Data(format!("expected a denoiser-trainer archive, found {}", a.kind())));
        }
        tr.model.params.read_from("model.", a)?;
        tr.opt.read_from("opt.", &tr.model.params, a)?;
        tr.epoch = a.require("epoch")?[[0]] as usize;
        let h = a.require("history")?;
        if h.ndim() != 2 || h.shape()[0] != tr.epoch || h.shape()[1] != 4 {
            return Err(Error::Data("denoiser trainer history does not match its epoch".into()));
        }
        tr.history = h
            .outer_iter()
            .enumerate()
            .map(|(e, r)| EpochStats {
                epoch: e,
                mean_loss: r[0],
                first_batch_loss: r[1],
                samples: r[2] as usize,
                dropped: r[3] as usize,
            })
            .collect();
        Ok(tr)
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train_denoiser(
    latents: &[Latent],
    conds: &[SemanticEmbedding],
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(Denoiser, Vec<EpochStats>)> {
    let mut tr = DenoiserTrainer::new(cfg.clone())?;
    if latents.is_empty() {
        return Err(Error::Data("denoiser training set is empty".into()));
    }
    while !tr.done() {
        tr.run_epoch(latents, conds, sched)?;
    }
    Ok((tr.model, tr.history))
}

/// Mean squared noise-prediction error on `(z0, c)` pairs at seeded
/// timesteps and noise.
pub fn eval_mse(model: &Denoiser, latents: &[Latent], conds: &[SemanticEmbedding], sched: &NoiseSchedule, seed: u64) -> (f64, f64) {
    let mut rng = rng_for(seed, "denoiser-eval", 0);
    let idx: Vec<usize> = (0..latents.len()).collect();
    let mut model_se = 0.0;
    let mut zero_se = 0.0;
    for chunk in idx.chunks(64) {
        let b = make_batch(chunk, latents, conds, sched, 0.0, &mut rng);
        zero_se += b.eps.iter().map(|v| v * v).sum::<f64>();
        let (l, _) = batch_loss(model, b.z_t, &b.ts, b.c, b.eps, false);
        model_se += l * (chunk.len() * LATENT_LEN) as f64;
    }
    let n = (latents.len() * LATENT_LEN) as f64;
    (model_se / n, zero_se / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use crate::brain::{render_scene, Frozen};
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::features::SceneParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        make_schedule(1000, 8.5e-4, 0.012, ScheduleKind::Linear).unwrap()
    }

    fn pairs(n: usize, seed: u64) -> (Vec<Latent>, Vec<SemanticEmbedding>) {
        let frozen = Frozen::new(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = SceneParams::random(&mut rng);
                (frozen.codec.encode(&render_scene(&p)).unwrap(), frozen.semantics.embed(&p))
            })
            .unzip()
    }

    #[test]
    fn parameter_budget() {
        let n = Denoiser::new(0).num_params();
        assert!(n <= 500_000, "{n}");
        assert!(n > 50_000);
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let d = Denoiser::new(1);
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Latent::randn(&mut rng);
        let c = SemanticEmbedding::null();
        for t in [0, 500, 999] {
            let a = denoiser_forward(&z, t, &c, &d, &s).unwrap();
            let b = denoiser_forward(&z, t, &c, &d, &s).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.0.shape(), &[4, 8, 8]);
        }
        assert!(denoiser_forward(&z, 1000, &c, &d, &s).is_err());
        let bad = SemanticEmbedding(ndarray::Array2::zeros((4, 64)));
        assert!(denoiser_forward(&z, 0, &bad, &d, &s).is_err());
    }

    #[test]
    fn batched_prediction_matches_single() {
        let d = Denoiser::new(2);
        let (z, c) = pairs(3, 1);
        let zr: Vec<&Latent> = z.iter().collect();
        let cr: Vec<&SemanticEmbedding> = c.iter().collect();
        let all = d.predict(&zr, 300, &cr).unwrap();
        for i in 0..3 {
            let one = d.predict(&[&z[i]], 300, &[&c[i]]).unwrap().remove(0);
            assert!((&one.0 - &all[i].0).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let d = Denoiser::new(3);
        let (z, c) = pairs(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cot = Latent::randn(&mut rng);
        let g = d.predict_vjp(&z[0], 250, &c[0], &cot).unwrap();
        let f = |x: &ArrayD<f64>| {
            let out = d.predict(&[&Latent::from_dyn(x).unwrap()], 250, &[&c[0]]).unwrap().remove(0);
            (out.0 * &cot.0).sum()
        };
        let err = max_rel_error(&z[0].to_dyn(), &g.to_dyn(), f, 32, 1e-5, 1e-6, &mut rng);
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        let d = Denoiser::new(4);
        let (z, c) = pairs(4, 4);
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = make_batch(&[0, 1, 2, 3], &z, &c, &s, 0.25, &mut rng);
        let (_, grads) = batch_loss(&d, b.z_t.clone(), &b.ts, b.c.clone(), b.eps.clone(), true);
        let grads = grads.unwrap();
        // Flatten every parameter into one vector and probe 32 coordinates.
        let flat: Vec<f64> = d.params.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let gflat: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let shapes: Vec<Vec<usize>> = d.params.iter().map(|(_, v)| v.shape().to_vec()).collect();
        let f = |x: &ArrayD<f64>| {
            let mut m = d.clone();
            let mut off = 0;
            for (v, sh) in m.params.values_mut().zip(&shapes) {
                let len: usize = sh.iter().product();
                *v = ArrayD::from_shape_vec(IxDyn(sh), x.as_slice().unwrap()[off..off + len].to_vec()).unwrap();
                off += len;
            }
            batch_loss(&m, b.z_t.clone(), &b.ts, b.c.clone(), b.eps.clone(), false).0
        };
        let x = ArrayD::from_shape_vec(IxDyn(&[flat.len()]), flat).unwrap();
        let g = ArrayD::from_shape_vec(IxDyn(&[gflat.len()]), gflat).unwrap();
        let err = max_rel_error(&x, &g, f, 32, 1e-5, 1e-7, &mut rng);
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn one_epoch_makes_progress_and_drops_conditions_at_rate() {
        let (z, c) = pairs(2000, 6);
        let s = sched();
        let cfg = DenoiserTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (_, hist) = train_denoiser(&z, &c, &s, &cfg).unwrap();
        assert!(hist[0].mean_loss < hist[0].first_batch_loss, "{:?}", hist[0]);
        assert!((hist[0].dropout_rate() - 0.1).abs() <= 0.02, "{}", hist[0].dropout_rate());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (z, c) = pairs(64, 7);
        let s = sched();
        let cfg = DenoiserTrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let (a, _) = train_denoiser(&z, &c, &s, &cfg).unwrap();
        let (b, _) = train_denoiser(&z, &c, &s, &cfg).unwrap();
        assert_eq!(a.params, b.params);

        let mut tr = DenoiserTrainer::new(cfg.clone()).unwrap();
        tr.run_epoch(&z, &c, &s).unwrap();
        let bytes = tr.to_archive().to_bytes();
        let mut resumed = DenoiserTrainer::from_archive(cfg, &TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        resumed.run_epoch(&z, &c, &s).unwrap();
        assert_eq!(resumed.model.params, a.params);
        assert!(resumed.done());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let d = Denoiser::new(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("den.nrta");
        d.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.params, d.params);
    }

    #[test]
    fn empty_training_set_is_a_data_error() {
        let cfg = DenoiserTrainConfig::default();
        assert!(matches!(train_denoiser(&[], &[], &sched(), &cfg), Err(Error::Data(_))));
    }
}
