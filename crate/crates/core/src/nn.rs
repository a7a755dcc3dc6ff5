//! Parameter storage, layers and the optimizer used by every trained model.

use std::ops::Index;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ConvGeom, Grads, Tape, Var};
use crate::checkpoint::TensorArchive;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

/// Tape handles for every tensor in a [`ParamSet`].
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Gradient of each parameter, zero where the parameter was unused.
    pub fn collect(&self, grads: &Grads, params: &ParamSet) -> Vec<ArrayD<f64>> {
        self.0
            .iter()
            .zip(&params.values)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
            })
            .collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        self.values.iter_mut()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v)).collect())
    }

    /// Binds every tensor as a constant: forward passes without parameter
    /// gradients.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant_ref(v)).collect())
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamSet, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if !name.starts_with(prefix) {
                continue;
            }
            let k = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::State(format!("source parameters lack {name}")))?;
            if other.values[k].shape() != value.shape() {
                return Err(Error::State(format!("shape mismatch copying {name}")));
            }
            value.assign(&other.values[k]);
            copied += 1;
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn write_into(&self, prefix: &str, archive: &mut TensorArchive) {
        for (name, value) in self.iter() {
            archive.insert(format!("{prefix}{name}"), value.clone());
        }
    }

    /// Overwrites every tensor from `archive`, checking names and shapes.
    pub fn read_from(&mut self, prefix: &str, archive: &TensorArchive) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let stored = archive
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {key}")))?;
            if stored.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "tensor {key}: checkpoint shape {:?} does not match model shape {:?}",
                    stored.shape(),
                    value.shape()
                )));
            }
            value.assign(stored);
        }
        Ok(())
    }
}

pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weight `[inp, out]` drawn with variance `gain^2 / inp`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        inp: usize,
        out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            randn(&[inp, out], gain / (inp as f64).sqrt(), rng),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = t.matmul(x, p[self.w]);
        t.add_row(h, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = ps.add(
            format!("{name}.w"),
            randn(&[cout, cin, k, k], gain / fan_in.sqrt(), rng),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self { w, b, geom }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = t.conv2d(x, p[self.w], self.geom);
        t.add_channel_bias(h, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        // Each output pixel of a stride-s transposed conv sees about
        // cin * (k/s)^2 taps.
        let taps = (cin * (k / geom.stride).max(1).pow(2)) as f64;
        let w = ps.add(
            format!("{name}.w"),
            randn(&[cin, cout, k, k], gain / taps.sqrt(), rng),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self { w, b, geom }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = t.conv_transpose2d(x, p[self.w], self.geom);
        t.add_channel_bias(h, p[self.b])
    }
}

/// Two-layer SiLU perceptron `inp -> hidden -> out`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), inp, hidden, 1.0, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out, out_gain, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(t, p, x);
        let h = t.silu(h);
        self.fc2.forward(t, p, h)
    }
}

/// Residual MLP-Mixer block over `[n * tokens, dim]` activations.
#[derive(Clone, Copy, Debug)]
pub struct MixerBlock {
    pub token_mlp: Mlp2,
    pub channel_mlp: Mlp2,
    pub tokens: usize,
    pub dim: usize,
}

impl MixerBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        tokens: usize,
        dim: usize,
        token_hidden: usize,
        channel_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            token_mlp: Mlp2::new(ps, &format!("{name}.tok"), tokens, token_hidden, tokens, 0.5, rng),
            channel_mlp: Mlp2::new(ps, &format!("{name}.ch"), dim, channel_hidden, dim, 0.5, rng),
            tokens,
            dim,
        }
    }

    /// `x: [n * tokens, dim]`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, n: usize) -> Var {
        let xt = t.swap_inner(x, n, self.tokens, self.dim);
        let mixed = self.token_mlp.forward(t, p, xt);
        let back = t.swap_inner(mixed, n, self.dim, self.tokens);
        let x = t.add(x, back);
        let ch = self.channel_mlp.forward(t, p, x);
        t.add(x, ch)
    }
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Batch of timestep embeddings `[n, dim]`.
pub fn timestep_embeddings(ts: &[f64], dim: usize) -> ArrayD<f64> {
    let mut out = ndarray::Array2::zeros((ts.len(), dim));
    for (mut row, &t) in out.rows_mut().into_iter().zip(ts) {
        row.assign(&ndarray::Array1::from(timestep_embedding(t, dim)));
    }
    out.into_dyn()
}

/// Learning rate of a one-cycle policy with cosine warm-up and annealing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        Self {
            peak_lr,
            total_steps: total_steps.max(2),
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.peak_lr / self.div_factor;
        let min = initial / self.final_div_factor;
        let up = ((self.pct_start * self.total_steps as f64) - 1.0).max(1.0);
        let last = (self.total_steps - 1) as f64;
        let s = step as f64;
        let cos_anneal = |from: f64, to: f64, frac: f64| {
            to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos())
        };
        if s <= up {
            cos_anneal(initial, self.peak_lr, s / up)
        } else {
            cos_anneal(self.peak_lr, min, (s - up) / (last - up).max(1.0))
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros = || params.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, mut grads: Vec<ArrayD<f64>>, lr: f64) {
        assert_eq!(grads.len(), params.len());
        if let Some(max) = self.clip_norm {
            let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > max {
                for g in &mut grads {
                    *g *= max / norm;
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *p);
                });
        }
    }

    pub fn write_into(&self, prefix: &str, params: &ParamSet, archive: &mut TensorArchive) {
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            archive.insert(format!("{prefix}m.{name}"), m.clone());
            archive.insert(format!("{prefix}v.{name}"), v.clone());
        }
        archive.insert(
            format!("{prefix}step"),
            ArrayD::from_elem(IxDyn(&[]), self.step as f64),
        );
    }

    pub fn read_from(&mut self, prefix: &str, params: &ParamSet, archive: &TensorArchive) -> Result<()> {
        for ((name, p), (m, v)) in params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (slot, key) in [(m, format!("{prefix}m.{name}")), (v, format!("{prefix}v.{name}"))] {
                let stored = archive
                    .get(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint is missing optimizer tensor {key}")))?;
                if stored.shape() != p.shape() {
                    return Err(Error::Data(format!("optimizer tensor {key} has the wrong shape")));
                }
                slot.assign(stored);
            }
        }
        let step = archive
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Data("checkpoint is missing optimizer step".into()))?;
        self.step = step.iter().next().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_cycle_peaks_then_anneals() {
        let s = OneCycle::new(3e-4, 100);
        let lrs: Vec<f64> = (0..100).map(|i| s.lr(i)).collect();
        let (imax, &max) = lrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!((max - 3e-4).abs() < 1e-12);
        assert!((28..=30).contains(&imax));
        assert!((lrs[0] - 3e-4 / 25.0).abs() < 1e-12);
        assert!(lrs[99] < 1e-8);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut opt = AdamW::new(&ps, 0.0);
        for _ in 0..2000 {
            let g = ps.get(id).mapv(|x| 2.0 * x);
            opt.update(&mut ps, vec![g], 1e-2);
        }
        assert!(ps.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn mixer_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let block = MixerBlock::new(&mut ps, "b", 4, 6, 8, 8, &mut rng);
        let mut t = Tape::new();
        let p = ps.bind(&mut t);
        let x = t.constant(randn(&[3 * 4, 6], 1.0, &mut rng));
        let y = block.forward(&mut t, &p, x, 3);
        assert_eq!(t.shape(y), &[12, 6]);
    }
}
