//! Fixed-shape domain tensors shared by every stage of the pipeline.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_shape, Error, Result};

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIDE: usize = 8;
pub const LATENT_LEN: usize = LATENT_CHANNELS * LATENT_SIDE * LATENT_SIDE;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

pub const EMBED_TOKENS: usize = 8;
pub const EMBED_DIM: usize = 64;
pub const EMBED_LEN: usize = EMBED_TOKENS * EMBED_DIM;

pub const FEATURE_TOKENS: usize = 16;
pub const FEATURE_DIM: usize = 64;
pub const FEATURE_LEN: usize = FEATURE_TOKENS * FEATURE_DIM;

/// Guidance layers are numbered 1..=3, shallow to deep.
pub const LAYERS: [usize; 3] = [1, 2, 3];

/// Diffusion state `z`: 4 × 8 × 8.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent(pub Array3<f64>);

/// RGB image, 3 × 32 × 32, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(pub Array3<f64>);

/// Semantic condition `c`: 8 tokens × 64.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding(pub Array2<f64>);

/// Per-layer guidance features, each 16 tokens × 64.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GuidanceFeatureSet {
    pub layers: BTreeMap<usize, Array2<f64>>,
}

macro_rules! flat_helpers {
    ($t:ty, $len:expr) => {
        impl $t {
            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice().expect("standard layout")
            }

            pub fn to_vec(&self) -> Vec<f64> {
                self.as_slice().to_vec()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn to_dyn(&self) -> ArrayD<f64> {
                self.0.clone().into_dyn()
            }

            pub const LEN: usize = $len;
        }
    };
}

flat_helpers!(Latent, LATENT_LEN);
flat_helpers!(Image, IMAGE_LEN);
flat_helpers!(SemanticEmbedding, EMBED_LEN);

impl Latent {
    pub fn zeros() -> Self {
        Latent(Array3::zeros((LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE)))
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        ensure_shape("latent", &[v.len()], &[LATENT_LEN])?;
        Ok(Latent(
            Array3::from_shape_vec((LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE), v).unwrap(),
        ))
    }

    pub fn from_dyn(a: &ArrayD<f64>) -> Result<Self> {
        Self::from_vec(a.iter().copied().collect())
    }

    pub fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Latent(Array3::from_shape_fn(
            (LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE),
            |_| StandardNormal.sample(rng),
        ))
    }

    pub fn check(&self) -> Result<()> {
        ensure_shape(
            "latent",
            self.0.shape(),
            &[LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE],
        )
    }
}

impl Image {
    pub fn zeros() -> Self {
        Image(Array3::zeros((IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE)))
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        ensure_shape("image", &[v.len()], &[IMAGE_LEN])?;
        Ok(Image(
            Array3::from_shape_vec((IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE), v).unwrap(),
        ))
    }

    pub fn check(&self) -> Result<()> {
        ensure_shape(
            "image",
            self.0.shape(),
            &[IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
        )
    }

    pub fn clamped(&self) -> Image {
        Image(self.0.mapv(|v| v.clamp(0.0, 1.0)))
    }
}

impl SemanticEmbedding {
    /// The reserved unconditional embedding used for classifier-free
    /// guidance.
    pub fn null() -> Self {
        SemanticEmbedding(Array2::zeros((EMBED_TOKENS, EMBED_DIM)))
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        ensure_shape("semantic embedding", &[v.len()], &[EMBED_LEN])?;
        Ok(SemanticEmbedding(
            Array2::from_shape_vec((EMBED_TOKENS, EMBED_DIM), v).unwrap(),
        ))
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

impl GuidanceFeatureSet {
    pub fn layer(&self, l: usize) -> Result<&Array2<f64>> {
        self.layers
            .get(&l)
            .ok_or_else(|| Error::Config(format!("guidance targets are missing layer {l}")))
    }

    pub fn from_flat(layers: &[(usize, Vec<f64>)]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (l, v) in layers {
            ensure_shape("feature layer", &[v.len()], &[FEATURE_LEN])?;
            out.insert(
                *l,
                Array2::from_shape_vec((FEATURE_TOKENS, FEATURE_DIM), v.clone()).unwrap(),
            );
        }
        Ok(Self { layers: out })
    }

    /// Concatenation of the requested layers in ascending order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .values()
            .flat_map(|a| a.iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn dyn_from(shape: &[usize], v: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape matches data")
}

/// Stable seed derivation: mixes a base seed with a tag and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(base ^ splitmix(h ^ splitmix(index)))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn rng_for(base: u64, tag: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Pearson correlation of two equal-length slices; `None` when either has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
