//! Frozen feature pyramid and the scene-parameter semantic space.
//!
//! Three stride-2 convolution stages with `tanh` produce 4×16×16, 16×8×8
//! and 64×4×4 activations; each is read out as a 16×64 token matrix.
//! Deeper stages mix a fixed blur into their kernels, so they respond to
//! coarse structure rather than pixel-level detail.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ParamSet};
use crate::tensors::{
    dyn_from, rng_for, GuidanceFeatureSet, Image, SemanticEmbedding, EMBED_DIM, EMBED_TOKENS,
    FEATURE_DIM, FEATURE_LEN, FEATURE_TOKENS, IMAGE_CHANNELS, IMAGE_LEN, IMAGE_SIDE, LAYERS,
};

pub const NUM_SHAPES: usize = 6;
pub const NUM_COLORS: usize = 8;
pub const NUM_BACKGROUNDS: usize = 4;
pub const NUM_BINS: usize = 4;
pub const SIZE_MIN: f64 = 0.2;
pub const SIZE_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub shape: usize,
    pub color: usize,
    pub background: usize,
    pub position: [f64; 2],
    pub size: f64,
    pub textured: bool,
}

impl SceneParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            shape: rng.random_range(0..NUM_SHAPES),
            color: rng.random_range(0..NUM_COLORS),
            background: rng.random_range(0..NUM_BACKGROUNDS),
            position: [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)],
            size: rng.random_range(SIZE_MIN..=SIZE_MAX),
            textured: rng.random_bool(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.shape < NUM_SHAPES
            && self.color < NUM_COLORS
            && self.background < NUM_BACKGROUNDS
            && self.position.iter().all(|p| (0.0..=1.0).contains(p))
            && (SIZE_MIN..=SIZE_MAX).contains(&self.size);
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("scene parameters out of range: {self:?}")))
        }
    }

    pub fn position_bins(&self) -> [usize; 2] {
        self.position.map(|p| bin(p, 0.0, 1.0))
    }

    pub fn size_bin(&self) -> usize {
        bin(self.size, SIZE_MIN, SIZE_MAX)
    }
}

fn bin(v: f64, lo: f64, hi: f64) -> usize {
    (((v - lo) / (hi - lo) * NUM_BINS as f64).floor().max(0.0) as usize).min(NUM_BINS - 1)
}

/// Row layout of a semantic embedding.
pub mod token {
    pub const SHAPE: usize = 0;
    pub const COLOR: usize = 1;
    pub const BACKGROUND: usize = 2;
    pub const TEXTURE: usize = 3;
    pub const POS_X: usize = 4;
    pub const POS_Y: usize = 5;
    pub const SIZE: usize = 6;
    pub const PAD: usize = 7;
}

const TABLE_SIZES: [usize; EMBED_TOKENS] = [NUM_SHAPES, NUM_COLORS, NUM_BACKGROUNDS, 2, NUM_BINS, NUM_BINS, NUM_BINS, 1];

/// Seeded lookup tables, one per embedding row.
#[derive(Clone, Debug)]
pub struct SemanticTables {
    tables: Vec<Array2<f64>>,
}

impl SemanticTables {
    pub fn new(seed: u64) -> Self {
        let tables = TABLE_SIZES
            .iter()
            .enumerate()
            .map(|(row, &n)| {
                let mut rng = rng_for(seed, "semantic-table", row as u64);
                Array2::from_shape_fn((n, EMBED_DIM), |_| StandardNormal.sample(&mut rng))
            })
            .collect();
        Self { tables }
    }

    pub fn table(&self, row: usize) -> &Array2<f64> {
        &self.tables[row]
    }

    pub fn embed(&self, p: &SceneParams) -> SemanticEmbedding {
        let [bx, by] = p.position_bins();
        let idx = [p.shape, p.color, p.background, p.textured as usize, bx, by, p.size_bin(), 0];
        let mut out = Array2::zeros((EMBED_TOKENS, EMBED_DIM));
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(row).assign(&self.tables[row].row(i));
        }
        SemanticEmbedding(out)
    }
}

const STAGES: [(usize, usize); 3] = [(IMAGE_CHANNELS, 4), (4, 16), (16, 64)];
const GAINS: [f64; 3] = [2.0, 1.6, 1.6];
const BLUR_MIX: [f64; 3] = [0.0, 0.85, 0.9];

/// Fixed random convolutional pyramid.
#[derive(Clone, Debug)]
pub struct FeatureSpace {
    seed: u64,
    params: ParamSet,
    convs: [Conv; 3],
}

impl FeatureSpace {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "feature-space", 0);
        let mut params = ParamSet::new();
        let geom = ConvGeom::new(2, 1);
        let convs = std::array::from_fn(|i| {
            let (cin, cout) = STAGES[i];
            Conv::new(&mut params, &format!("stage{}", i + 1), cin, cout, 3, geom, GAINS[i], &mut rng)
        });
        let blur = [1.0, 2.0, 1.0];
        for (i, conv) in convs.iter().enumerate() {
            let mix = BLUR_MIX[i];
            let (cin, cout) = STAGES[i];
            let fan = (cin as f64).sqrt();
            let w = params.get_mut(conv.w);
            for o in 0..cout {
                for c in 0..cin {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            // The blur kernel has unit sum, so it carries the
                            // channel mixing weight at full strength.
                            let smooth = GAINS[i] * a / fan * blur[ky] * blur[kx] / 16.0 * 3.0;
                            let v = &mut w[[o, c, ky, kx]];
                            *v = (1.0 - mix) * *v + mix * smooth;
                        }
                    }
                }
            }
            let b = params.get_mut(conv.b);
            for v in b.iter_mut() {
                *v = 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        Self { seed, params, convs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Records the pyramid for `x: [n, 3, 32, 32]` (raw pixel values) and
    /// returns each layer as `[n * 16, 64]`.
    pub fn forward_tape<'a>(&'a self, t: &mut Tape<'a>, x: Var) -> [Var; 3] {
        let n = t.shape(x)[0];
        let p = self.params.bind_frozen(t);
        let mut h = t.offset(x, -0.5);
        let mut out = Vec::with_capacity(3);
        for conv in &self.convs {
            let a = conv.forward(t, &p, h);
            h = t.tanh(a);
            out.push(t.reshape(h, &[n * FEATURE_TOKENS, FEATURE_DIM]));
        }
        [out[0], out[1], out[2]]
    }

    pub fn extract_batch(&self, imgs: &[Image]) -> Vec<GuidanceFeatureSet> {
        if imgs.is_empty() {
            return Vec::new();
        }
        let n = imgs.len();
        let mut data = Vec::with_capacity(n * IMAGE_LEN);
        for img in imgs {
            data.extend_from_slice(img.as_slice());
        }
        let mut t = Tape::new();
        let x = t.constant(dyn_from(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data));
        let outs = self.forward_tape(&mut t, x);
        (0..n)
            .map(|i| {
                let mut layers = BTreeMap::new();
                for (l, v) in LAYERS.iter().zip(outs) {
                    let all = t.value(v).as_slice().unwrap();
                    let block = all[i * FEATURE_LEN..(i + 1) * FEATURE_LEN].to_vec();
                    layers.insert(*l, Array2::from_shape_vec((FEATURE_TOKENS, FEATURE_DIM), block).unwrap());
                }
                GuidanceFeatureSet { layers }
            })
            .collect()
    }

    pub fn extract_all(&self, img: &Image) -> Result<GuidanceFeatureSet> {
        img.check()?;
        Ok(self.extract_batch(std::slice::from_ref(img)).remove(0))
    }

    pub fn extract(&self, img: &Image, l: usize) -> Result<Array2<f64>> {
        check_layer(l)?;
        Ok(self.extract_all(img)?.layers.remove(&l).unwrap())
    }

    /// Pulls per-layer feature cotangents back to the image. Layers absent
    /// from `cot` contribute nothing.
    pub fn vjp(&self, img: &Image, cot: &GuidanceFeatureSet) -> Result<Image> {
        img.check()?;
        for &l in cot.layers.keys() {
            check_layer(l)?;
        }
        let mut t = Tape::new();
        let x = t.input(img.to_dyn().into_shape_with_order(IxDyn(&[1, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE])).unwrap());
        let outs = self.forward_tape(&mut t, x);
        let mut total: Option<Var> = None;
        for (l, c) in &cot.layers {
            let seed = t.constant(c.clone().into_dyn());
            let prod = t.mul(outs[l - 1], seed);
            let s = t.sum(prod);
            total = Some(match total {
                Some(acc) => t.add(acc, s),
                None => s,
            });
        }
        let Some(total) = total else {
            return Ok(Image::zeros());
        };
        let g = t.backward(total);
        let gx = g.get(x).cloned().unwrap_or_else(|| ArrayD::zeros(IxDyn(&[IMAGE_LEN])));
        Image::from_vec(gx.iter().copied().collect())
    }
}

pub fn check_layer(l: usize) -> Result<()> {
    if LAYERS.contains(&l) {
        Ok(())
    } else {
        Err(Error::param(format!("feature layer must be 1, 2 or 3, got {l}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use crate::brain::render_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_change(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let d = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
        d / a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn extraction_is_deterministic_and_shaped() {
        let fs = FeatureSpace::new(1);
        let img = render_scene(&SceneParams::random(&mut ChaCha8Rng::seed_from_u64(0)));
        let a = fs.extract_all(&img).unwrap();
        let b = FeatureSpace::new(1).extract_all(&img).unwrap();
        assert_eq!(a, b);
        for l in LAYERS {
            assert_eq!(a.layer(l).unwrap().dim(), (FEATURE_TOKENS, FEATURE_DIM));
        }
        assert!(fs.extract(&img, 4).is_err());
        assert!(fs.extract(&img, 0).is_err());
    }

    #[test]
    fn batched_matches_single() {
        let fs = FeatureSpace::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Image> = (0..4).map(|_| render_scene(&SceneParams::random(&mut rng))).collect();
        let batch = fs.extract_batch(&imgs);
        for (img, f) in imgs.iter().zip(&batch) {
            let single = fs.extract_all(img).unwrap();
            for l in LAYERS {
                let d = (single.layer(l).unwrap() - f.layer(l).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(d < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let fs = FeatureSpace::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = render_scene(&SceneParams::random(&mut rng));
        let cot = GuidanceFeatureSet::from_flat(
            &LAYERS.map(|l| (l, (0..FEATURE_LEN).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>())),
        )
        .unwrap();
        let analytic = fs.vjp(&img, &cot).unwrap().to_dyn();
        let f = |x: &ArrayD<f64>| {
            let im = Image::from_vec(x.iter().copied().collect()).unwrap();
            let g = fs.extract_all(&im).unwrap();
            LAYERS.iter().map(|&l| (g.layer(l).unwrap() * cot.layer(l).unwrap()).sum()).sum()
        };
        let err = max_rel_error(&img.to_dyn(), &analytic, f, 32, 1e-5, 1e-6, &mut rng);
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn color_change_moves_layer_one() {
        let fs = FeatureSpace::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let p = SceneParams::random(&mut rng);
            let q = SceneParams { color: (p.color + 1) % NUM_COLORS, ..p };
            let a = fs.extract(&render_scene(&p), 1).unwrap();
            let b = fs.extract(&render_scene(&q), 1).unwrap();
            assert!(rel_change(&a, &b) > 0.0);
        }
    }

    #[test]
    fn shallow_layers_are_more_sensitive_to_pixel_noise() {
        let fs = FeatureSpace::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut d1, mut d3) = (0.0, 0.0);
        for _ in 0..100 {
            let img = render_scene(&SceneParams::random(&mut rng));
            let noisy = Image(img.0.mapv(|v| v + 0.02 * Distribution::<f64>::sample(&StandardNormal, &mut rng)));
            let (a, b) = (fs.extract_all(&img).unwrap(), fs.extract_all(&noisy).unwrap());
            d1 += rel_change(a.layer(1).unwrap(), b.layer(1).unwrap());
            d3 += rel_change(a.layer(3).unwrap(), b.layer(3).unwrap());
        }
        assert!(d1 > d3, "layer 1 {d1} vs layer 3 {d3}");
    }

    #[test]
    fn semantic_rows_follow_the_table_structure() {
        let tables = SemanticTables::new(0);
        let p = SceneParams { shape: 1, color: 2, background: 0, position: [0.3, 0.6], size: 0.3, textured: false };
        assert_eq!(tables.embed(&p), tables.embed(&p));
        let q = SceneParams { position: [0.55, 0.6], ..p };
        assert_ne!(p.position_bins(), q.position_bins());
        let (a, b) = (tables.embed(&p), tables.embed(&q));
        let differing: Vec<usize> = (0..EMBED_TOKENS).filter(|&r| a.0.row(r) != b.0.row(r)).collect();
        assert_eq!(differing, vec![token::POS_X]);
    }

    #[test]
    fn table_rows_are_distinguishable() {
        let tables = SemanticTables::new(0);
        for row in 0..EMBED_TOKENS {
            let t = tables.table(row);
            for i in 0..t.nrows() {
                for j in 0..i {
                    let c = crate::tensors::cosine(t.row(i).as_slice().unwrap(), t.row(j).as_slice().unwrap());
                    assert!(c < 0.99);
                }
            }
        }
    }

    #[test]
    fn scene_validation() {
        let mut p = SceneParams::random(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.validate().is_ok());
        p.size = 0.6;
        assert!(p.validate().is_err());
        p.size = 0.3;
        p.shape = NUM_SHAPES;
        assert!(p.validate().is_err());
    }

    #[test]
    fn bins_cover_the_range() {
        assert_eq!(bin(0.0, 0.0, 1.0), 0);
        assert_eq!(bin(1.0, 0.0, 1.0), 3);
        assert_eq!(bin(0.26, 0.0, 1.0), 1);
        assert_eq!(bin(SIZE_MAX, SIZE_MIN, SIZE_MAX), 3);
    }
}
