//! Scene rendering, simulated subjects and the NSD-like dataset layout.
//!
//! A subject is a linear map from the stacked stimulus descriptors
//! `[g¹; g²; g³; c]` to voxels plus Gaussian noise. Each voxel draws its
//! row mostly from one descriptor block, which defines its group
//! (V1-like ... higher-like).

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, TensorArchive};
use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::features::{FeatureSpace, SceneParams, SemanticTables};
use crate::tensors::{
    rng_for, GuidanceFeatureSet, Image, Latent, SemanticEmbedding, EMBED_LEN, FEATURE_LEN,
    IMAGE_SIDE,
};

const BACKGROUNDS: [[f64; 3]; 4] = [
    [0.08, 0.08, 0.10],
    [0.85, 0.85, 0.80],
    [0.20, 0.35, 0.55],
    [0.45, 0.30, 0.20],
];

const COLORS: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.12],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.55, 0.10],
    [0.55, 0.55, 0.55],
];

const TEXTURE_DARKEN: f64 = 0.55;
const TEXTURE_PERIOD: usize = 4;

/// Whether the pixel centre `(dx, dy)` (relative to the object centre, in
/// pixels) lies inside a shape of half-size `r`.
fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => d <= r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        3 => dx.abs() + dy.abs() <= r,
        4 => d <= r && d >= 0.55 * r,
        _ => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

fn fill(rgb: [f64; 3]) -> Image {
    let mut img = Image::zeros();
    for (c, &v) in rgb.iter().enumerate() {
        img.0.index_axis_mut(Axis(0), c).fill(v);
    }
    img
}

const SUPERSAMPLE: usize = 4;
/// Edge softness in pixels. Soft edges keep scenes representable by the
/// 4×-downsampled latent.
pub const EDGE_SIGMA: f64 = 3.0;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).round() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable blur with edge-replicating borders.
fn blur(m: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let n = m.nrows() as i64;
    let clamp = |i: i64| i.clamp(0, n - 1) as usize;
    let mut tmp = Array2::zeros(m.raw_dim());
    for y in 0..n {
        for x in 0..n {
            tmp[[y as usize, x as usize]] = k.iter().enumerate().map(|(j, w)| w * m[[y as usize, clamp(x + j as i64 - r)]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros(m.raw_dim());
    for y in 0..n {
        for x in 0..n {
            out[[y as usize, x as usize]] = k.iter().enumerate().map(|(j, w)| w * tmp[[clamp(y + j as i64 - r), x as usize]]).sum::<f64>();
        }
    }
    out
}

/// Soft object coverage in `[0, 1]` per pixel.
pub fn object_mask(p: &SceneParams) -> Array2<f64> {
    let cx = p.position[0] * IMAGE_SIDE as f64;
    let cy = p.position[1] * IMAGE_SIDE as f64;
    let r = p.size * IMAGE_SIDE as f64 / 2.0;
    let ss = SUPERSAMPLE as f64;
    let mut m = Array2::zeros((IMAGE_SIDE, IMAGE_SIDE));
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / ss;
                    let py = y as f64 + (sy as f64 + 0.5) / ss;
                    hits += inside(p.shape, px - cx, py - cy, r) as usize;
                }
            }
            m[[y, x]] = hits as f64 / (ss * ss);
        }
    }
    blur(&m, EDGE_SIGMA)
}

pub fn render_scene(p: &SceneParams) -> Image {
    let bg = BACKGROUNDS[p.background];
    let m = object_mask(p);
    let mut img = Image::zeros();
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let dark = p.textured && (x / TEXTURE_PERIOD + y / TEXTURE_PERIOD) % 2 == 1;
            let k = if dark { TEXTURE_DARKEN } else { 1.0 };
            let a = m[[y, x]];
            for c in 0..3 {
                img.0[[c, y, x]] = bg[c] * (1.0 - a) + COLORS[p.color][c] * k * a;
            }
        }
    }
    img
}

/// The scene with its object removed.
pub fn render_background(p: &SceneParams) -> Image {
    fill(BACKGROUNDS[p.background])
}

/// Pixels with at least 10% object coverage.
pub fn object_pixels(p: &SceneParams) -> usize {
    object_mask(p).iter().filter(|&&a| a >= 0.1).count()
}

/// The frozen transforms shared by data generation, training and
/// evaluation.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub codec: LatentCodec,
    pub features: FeatureSpace,
    pub semantics: SemanticTables,
}

impl Frozen {
    pub fn new(codec_seed: u64, feature_seed: u64) -> Self {
        Self {
            codec: LatentCodec::new(codec_seed),
            features: FeatureSpace::new(feature_seed),
            semantics: SemanticTables::new(feature_seed),
        }
    }

    /// Every per-scene target the decoders learn from.
    pub fn targets(&self, scenes: &[SceneParams]) -> SceneTargets {
        let images: Vec<Image> = scenes.iter().map(render_scene).collect();
        let features = self.features.extract_batch(&images);
        let latents = images.iter().map(|i| self.codec.encode(i).expect("rendered image shape")).collect();
        let embeddings = scenes.iter().map(|p| self.semantics.embed(p)).collect();
        SceneTargets {
            images,
            latents,
            embeddings,
            features,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneTargets {
    pub images: Vec<Image>,
    pub latents: Vec<Latent>,
    pub embeddings: Vec<SemanticEmbedding>,
    pub features: Vec<GuidanceFeatureSet>,
}

impl SceneTargets {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Length of the stacked descriptor `[g¹; g²; g³; c]`.
pub const STIMULUS_LEN: usize = 3 * FEATURE_LEN + EMBED_LEN;

pub fn stimulus_vector(g: &GuidanceFeatureSet, c: &SemanticEmbedding) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(STIMULUS_LEN);
    for l in crate::tensors::LAYERS {
        v.extend(g.layer(l)?.iter().copied());
    }
    v.extend_from_slice(c.as_slice());
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoxelGroup {
    V1,
    V2,
    V3,
    Higher,
}

impl VoxelGroup {
    pub const ALL: [VoxelGroup; 4] = [VoxelGroup::V1, VoxelGroup::V2, VoxelGroup::V3, VoxelGroup::Higher];

    pub fn name(self) -> &'static str {
        match self {
            VoxelGroup::V1 => "v1",
            VoxelGroup::V2 => "v2",
            VoxelGroup::V3 => "v3",
            VoxelGroup::Higher => "higher",
        }
    }

    /// Column range of this group's dominant block in the stimulus vector.
    pub fn block(self) -> std::ops::Range<usize> {
        match self {
            VoxelGroup::V1 => 0..FEATURE_LEN,
            VoxelGroup::V2 => FEATURE_LEN..2 * FEATURE_LEN,
            VoxelGroup::V3 => 2 * FEATURE_LEN..3 * FEATURE_LEN,
            VoxelGroup::Higher => 3 * FEATURE_LEN..STIMULUS_LEN,
        }
    }
}

pub const DEFAULT_VOXEL_COUNTS: [usize; 4] = [900, 1000, 1100, 1200];
const OFF_BLOCK_WEIGHT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectModel {
    pub id: usize,
    /// `[voxels, STIMULUS_LEN]`, unit-norm rows.
    pub w: Array2<f64>,
    pub sigma: f64,
    pub groups: Vec<VoxelGroup>,
}

impl SubjectModel {
    /// Draws the forward matrix; `sigma` is set separately by
    /// [`SubjectModel::calibrate_noise`].
    pub fn new(seed: u64, id: usize, voxels: usize) -> Self {
        let mut rng = rng_for(seed, "subject", id as u64);
        let mut w = Array2::zeros((voxels, STIMULUS_LEN));
        let mut drawn = Vec::with_capacity(voxels);
        for v in 0..voxels {
            let dom = VoxelGroup::ALL[rng.random_range(0..4)];
            drawn.push(dom);
            let mut row = w.row_mut(v);
            for g in VoxelGroup::ALL {
                let k = if g == dom { 1.0 } else { OFF_BLOCK_WEIGHT };
                for j in g.block() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    row[j] = k * z;
                }
            }
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        let groups = (0..voxels)
            .map(|v| {
                let row = w.row(v);
                *VoxelGroup::ALL
                    .iter()
                    .max_by(|a, b| {
                        let ea: f64 = a.block().map(|j| row[j] * row[j]).sum();
                        let eb: f64 = b.block().map(|j| row[j] * row[j]).sum();
                        ea.total_cmp(&eb)
                    })
                    .unwrap()
            })
            .collect();
        debug_assert_eq!(drawn, groups);
        Self {
            id,
            w,
            sigma: 0.0,
            groups,
        }
    }

    pub fn voxels(&self) -> usize {
        self.w.nrows()
    }

    /// Noiseless responses for stacked stimuli `[n, STIMULUS_LEN]`.
    pub fn predict(&self, stim: &Array2<f64>) -> Array2<f64> {
        stim.dot(&self.w.t())
    }

    /// Sets `sigma` so that single-trial SNR (scene-driven signal RMS over
    /// noise RMS) equals `snr` on the given stimuli.
    pub fn calibrate_noise(&mut self, stim: &Array2<f64>, snr: f64) {
        let sig = self.predict(stim);
        let mean = sig.mean_axis(Axis(0)).unwrap();
        let centered = &sig - &mean;
        let rms = (centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64).sqrt();
        self.sigma = rms / snr;
    }

    pub fn indices(&self, g: VoxelGroup) -> Vec<usize> {
        (0..self.voxels()).filter(|&v| self.groups[v] == g).collect()
    }

    pub fn simulate<R: Rng + ?Sized>(&self, stim: &[f64], rng: &mut R) -> Array1<f64> {
        let clean = self.w.dot(&Array1::from(stim.to_vec()));
        clean.mapv(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + self.sigma * z
        })
    }
}

/// Forward model on a single scene.
pub fn simulate_voxels<R: Rng + ?Sized>(
    frozen: &Frozen,
    img: &Image,
    p: &SceneParams,
    s: &SubjectModel,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let g = frozen.features.extract_all(img)?;
    let c = frozen.semantics.embed(p);
    Ok(s.simulate(&stimulus_vector(&g, &c)?, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub codec_seed: u64,
    pub feature_seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub repeats: usize,
    pub voxel_counts: Vec<usize>,
    pub snr: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codec_seed: 1,
            feature_seed: 2,
            train_scenes: 900,
            test_scenes: 100,
            repeats: 3,
            voxel_counts: DEFAULT_VOXEL_COUNTS.to_vec(),
            snr: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes < 2 || self.test_scenes < 2 {
            return Err(Error::Config("need at least 2 train and 2 test scenes".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if self.voxel_counts.is_empty() || self.voxel_counts.contains(&0) {
            return Err(Error::Config("voxel counts must be positive".into()));
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return Err(Error::Config("snr must be positive".into()));
        }
        Ok(())
    }

    pub fn frozen(&self) -> Frozen {
        Frozen::new(self.codec_seed, self.feature_seed)
    }
}

/// One split of one subject. `voxels` has one row per record; for the test
/// split each record is the mean of the stored `repeats`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub scenes: Vec<SceneParams>,
    pub record_scene: Vec<usize>,
    pub voxels: Array2<f64>,
    pub repeats: Option<Array3<f64>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.record_scene.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_scene.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub model: SubjectModel,
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub subjects: Vec<SubjectData>,
}

fn scene_list(seed: u64, tag: &str, idx: u64, n: usize, avoid: &[SceneParams]) -> Vec<SceneParams> {
    let mut rng = rng_for(seed, tag, idx);
    let mut out: Vec<SceneParams> = Vec::with_capacity(n);
    while out.len() < n {
        let p = SceneParams::random(&mut rng);
        if !avoid.contains(&p) && !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn stimuli(frozen: &Frozen, scenes: &[SceneParams]) -> Result<Array2<f64>> {
    let t = frozen.targets(scenes);
    let mut m = Array2::zeros((scenes.len(), STIMULUS_LEN));
    for (i, (g, c)) in t.features.iter().zip(&t.embeddings).enumerate() {
        m.row_mut(i).assign(&Array1::from(stimulus_vector(g, c)?));
    }
    Ok(m)
}

/// Subject models are fully determined by the data config; the dataset on
/// disk stores only their seeds.
pub fn subject_models(cfg: &DataConfig, frozen: &Frozen) -> Result<Vec<SubjectModel>> {
    let calib = scene_list(cfg.seed, "calibration-scenes", 0, 200.min(cfg.train_scenes.max(50)), &[]);
    let stim = stimuli(frozen, &calib)?;
    Ok(cfg
        .voxel_counts
        .iter()
        .enumerate()
        .map(|(id, &d)| {
            let mut m = SubjectModel::new(cfg.seed, id, d);
            m.calibrate_noise(&stim, cfg.snr);
            m
        })
        .collect())
}

pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let frozen = cfg.frozen();
    let models = subject_models(cfg, &frozen)?;
    let test_scenes = scene_list(cfg.seed, "test-scenes", 0, cfg.test_scenes, &[]);
    let test_stim = stimuli(&frozen, &test_scenes)?;
    let mut subjects = Vec::with_capacity(models.len());
    for model in models {
        let id = model.id as u64;
        let train_scenes = scene_list(cfg.seed, "train-scenes", id, cfg.train_scenes, &test_scenes);
        let train_stim = stimuli(&frozen, &train_scenes)?;
        let d = model.voxels();

        let mut rng = rng_for(cfg.seed, "train-noise", id);
        let n_rec = cfg.train_scenes * cfg.repeats;
        let mut voxels = Array2::zeros((n_rec, d));
        let mut record_scene = Vec::with_capacity(n_rec);
        for r in 0..cfg.repeats {
            for i in 0..cfg.train_scenes {
                let row = r * cfg.train_scenes + i;
                voxels.row_mut(row).assign(&model.simulate(train_stim.row(i).as_slice().unwrap(), &mut rng));
                record_scene.push(i);
            }
        }
        let train = Split {
            scenes: train_scenes,
            record_scene,
            voxels,
            repeats: None,
        };

        let mut rng = rng_for(cfg.seed, "test-noise", id);
        let mut reps = Array3::zeros((cfg.test_scenes, cfg.repeats, d));
        for i in 0..cfg.test_scenes {
            for r in 0..cfg.repeats {
                reps.slice_mut(s![i, r, ..])
                    .assign(&model.simulate(test_stim.row(i).as_slice().unwrap(), &mut rng));
            }
        }
        let test = Split {
            scenes: test_scenes.clone(),
            record_scene: (0..cfg.test_scenes).collect(),
            voxels: reps.mean_axis(Axis(1)).unwrap(),
            repeats: Some(reps),
        };
        subjects.push(SubjectData { model, train, test });
    }
    Ok(Dataset {
        config: cfg.clone(),
        subjects,
    })
}

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub test_scenes: Vec<SceneParams>,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: usize,
    pub voxels: usize,
    pub sigma: f64,
    pub group_sizes: Vec<(VoxelGroup, usize)>,
    pub train_file: String,
    pub test_file: String,
    pub train_records: usize,
    pub test_records: usize,
    pub train_scenes: Vec<SceneParams>,
}

impl Manifest {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if m.format_version != MANIFEST_VERSION {
            return Err(format!("unsupported manifest version {}", m.format_version));
        }
        m.config.validate().map_err(|e| e.to_string())?;
        if m.subjects.len() != m.config.voxel_counts.len() {
            return Err("subject list does not match voxel counts".into());
        }
        for (i, s) in m.subjects.iter().enumerate() {
            if s.id != i || s.voxels != m.config.voxel_counts[i] {
                return Err(format!("subject entry {i} is inconsistent"));
            }
            for name in [&s.train_file, &s.test_file] {
                if name.contains('/') || name.contains('\\') || name.starts_with('.') {
                    return Err(format!("invalid file name {name}"));
                }
            }
            if s.train_scenes.len() != m.config.train_scenes {
                return Err(format!("subject {i} lists {} train scenes", s.train_scenes.len()));
            }
            for p in s.train_scenes.iter().chain(&m.test_scenes) {
                p.validate().map_err(|e| e.to_string())?;
            }
        }
        if m.test_scenes.len() != m.config.test_scenes {
            return Err("test scene count mismatch".into());
        }
        Ok(m)
    }
}

fn split_file(id: usize, split: &str) -> String {
    format!("subj{id}_{split}.nrta")
}

fn indices_tensor(v: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.iter().map(|&i| i as f64).collect()).unwrap()
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for s in &self.subjects {
            let id = s.model.id;
            for (name, split) in [("train", &s.train), ("test", &s.test)] {
                let mut a = TensorArchive::new(format!("dataset-{name}"));
                a.insert("voxels", split.voxels.clone().into_dyn());
                a.insert("record_scene", indices_tensor(&split.record_scene));
                if let Some(r) = &split.repeats {
                    a.insert("repeats", r.clone().into_dyn());
                }
                a.save(&dir.join(split_file(id, name)))?;
            }
            entries.push(SubjectEntry {
                id,
                voxels: s.model.voxels(),
                sigma: s.model.sigma,
                group_sizes: VoxelGroup::ALL.iter().map(|&g| (g, s.model.indices(g).len())).collect(),
                train_file: split_file(id, "train"),
                test_file: split_file(id, "test"),
                train_records: s.train.len(),
                test_records: s.test.len(),
                train_scenes: s.train.scenes.clone(),
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            config: self.config.clone(),
            test_scenes: self.subjects.first().map(|s| s.test.scenes.clone()).unwrap_or_default(),
            subjects: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::parse(&text).map_err(|reason| Error::Format {
            path: path.clone(),
            reason,
        })?;
        let cfg = manifest.config.clone();
        let frozen = cfg.frozen();
        let models = subject_models(&cfg, &frozen)?;
        let mut subjects = Vec::new();
        for (entry, model) in manifest.subjects.iter().zip(models) {
            if (entry.sigma - model.sigma).abs() > 1e-9 * model.sigma.max(1.0) {
                return Err(Error::Data(format!(
                    "subject {}: manifest noise level does not match the regenerated model",
                    entry.id
                )));
            }
            let train = load_split(&dir.join(&entry.train_file), "dataset-train", entry.train_scenes.clone(), model.voxels(), entry.train_records)?;
            let test = load_split(&dir.join(&entry.test_file), "dataset-test", manifest.test_scenes.clone(), model.voxels(), entry.test_records)?;
            subjects.push(SubjectData { model, train, test });
        }
        Ok(Dataset { config: cfg, subjects })
    }
}

fn load_split(path: &Path, kind: &str, scenes: Vec<SceneParams>, d: usize, records: usize) -> Result<Split> {
    let a = TensorArchive::load_kind(path, kind)?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let voxels = a
        .require("voxels")?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| bad("voxels must be a matrix"))?;
    if voxels.dim() != (records, d) {
        return Err(bad("voxel matrix has the wrong shape"));
    }
    let record_scene: Vec<usize> = a
        .require("record_scene")?
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < scenes.len() {
                Ok(v as usize)
            } else {
                Err(bad("record scene index out of range"))
            }
        })
        .collect::<Result<_>>()?;
    if record_scene.len() != records {
        return Err(bad("record index has the wrong length"));
    }
    let repeats = match a.get("repeats") {
        Some(r) => {
            let r = r
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|_| bad("repeats must be rank 3"))?;
            if r.dim().0 != records || r.dim().2 != d {
                return Err(bad("repeat tensor has the wrong shape"));
            }
            Some(r)
        }
        None => None,
    };
    Ok(Split {
        scenes,
        record_scene,
        voxels,
        repeats,
    })
}
