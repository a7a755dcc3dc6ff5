//! Experiment config, output-directory layout and the commands the CLI
//! exposes: generate-data, train, reconstruct, evaluate and ablate.
//!
//! Layout under the experiment root:
//!
//! ```text
//! data/                    dataset (manifest + one archive per split and subject)
//! models/denoiser.nrta     trained denoiser (+ .state.nrta while training)
//! models/subj{k}/          standardizer, one archive per decoder head, stage state, logs
//! recon/subj{k}/decoded.nrta      decoded test conditions, latents and features
//! recon/subj{k}/kappa_op.json     calibrated guidance scale per guidance source
//! recon/subj{k}/{label}/          latents.nrta, run.json, grid.ppm
//! reports/subj{k}/{label}.csv|json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::brain::{build_dataset, DataConfig, Dataset, Frozen, SubjectData};
use crate::checkpoint::{write_atomic, TensorArchive};
use crate::decoders::{
    mean_element_pearson, mean_item_pearson, pretrain_then_finetune_in, split_targets, train_scratch_in, AnyPipeline,
    DecoderConfig, Head, StageLogs, Standardizer, SubjectTargets,
};
use crate::denoiser::{Denoiser, DenoiserTrainConfig, DenoiserTrainer};
use crate::diffusion::{
    calibrate_kappa, guided_sample, make_schedule, BrainGuidance, FeatureGuidance, GuidanceConfig, GuidanceObjective,
    NoiseSchedule, SamplerModels, ScheduleKind, TraceStep,
};
use crate::error::{Error, Result};
use crate::eval::{
    brain_correlation, pixcorr_or_zero, repeat_consistency, retrieval, save_ppm_grid, similarity_matrix, ssim,
    two_way_identification, vote_retrieval, MetricReport, ReportMeta, SemanticProbe,
};
use crate::tensors::{derive_seed, GuidanceFeatureSet, Image, Latent, SemanticEmbedding, LATENT_LEN, LAYERS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.999,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max, self.kind).map_err(|e| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSource {
    FeatureDecoders,
    GroundTruthFeatures,
    BrainEncoder,
}

impl GuidanceSource {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceSource::FeatureDecoders => "feature-decoders",
            GuidanceSource::GroundTruthFeatures => "ground-truth-features",
            GuidanceSource::BrainEncoder => "brain-encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Self::FeatureDecoders, Self::GroundTruthFeatures, Self::BrainEncoder]
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown guidance source '{s}'")))
    }
}

/// Reconstruction and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Target subjects; empty means every subject in the dataset.
    pub targets: Vec<usize>,
    pub guidance_source: GuidanceSource,
    pub eval_items: usize,
    pub repeats: usize,
    pub repeat_items: usize,
    pub calibration_items: usize,
    /// Fixed guidance scale; calibrated per subject and source when absent.
    pub kappa_op: Option<f64>,
    pub decode_seed: u64,
    pub scratch_baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            guidance_source: GuidanceSource::FeatureDecoders,
            eval_items: 100,
            repeats: 5,
            repeat_items: 20,
            calibration_items: 8,
            kappa_op: None,
            decode_seed: 0,
            scratch_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub kappa_multipliers: Vec<f64>,
    pub etas: Vec<f64>,
    pub items: usize,
    pub subjects: Vec<usize>,
    pub guidance_source: GuidanceSource,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            kappa_multipliers: vec![0.0, 1e-2, 1e-1, 1.0, 10.0],
            etas: vec![1.0, 0.8, 0.6, 0.4, 0.2, 0.1],
            items: 50,
            subjects: vec![0],
            guidance_source: GuidanceSource::FeatureDecoders,
        }
    }
}

/// The single config file of an experiment. In `[guidance]`, `kappa` is a
/// multiple of the calibrated operating scale κ_op.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserTrainConfig,
    pub decoders: DecoderConfig,
    pub guidance: GuidanceConfig,
    pub run: RunConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.decoders.validate()?;
        self.guidance.validate()?;
        let n = self.data.voxel_counts.len();
        if let Some(&k) = self.run.targets.iter().chain(&self.ablation.subjects).find(|&&k| k >= n) {
            return Err(Error::Config(format!("subject {k} does not exist ({n} subjects)")));
        }
        let r = &self.run;
        if r.eval_items < 2 || r.eval_items > self.data.test_scenes {
            return Err(Error::Config(format!("eval_items must be in 2..={}", self.data.test_scenes)));
        }
        if r.repeat_items > self.data.test_scenes || self.ablation.items > self.data.test_scenes {
            return Err(Error::Config("more items requested than test scenes".into()));
        }
        if r.calibration_items == 0 || r.calibration_items > self.data.train_scenes {
            return Err(Error::Config("calibration_items must be in 1..=train_scenes".into()));
        }
        if r.kappa_op.is_some_and(|k| !(k.is_finite() && k >= 0.0)) {
            return Err(Error::Config("kappa_op must be finite and nonnegative".into()));
        }
        if self.ablation.items < 2 {
            return Err(Error::Config("ablation needs at least 2 items".into()));
        }
        if self.ablation.kappa_multipliers.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::Config("kappa multipliers must be finite and nonnegative".into()));
        }
        if self.ablation.etas.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("ablation etas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn targets(&self) -> Vec<usize> {
        if self.run.targets.is_empty() {
            (0..self.data.voxel_counts.len()).collect()
        } else {
            self.run.targets.clone()
        }
    }
}

/// Paths of an experiment directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn denoiser(&self) -> PathBuf {
        self.root.join("models").join("denoiser.nrta")
    }
    pub fn denoiser_state(&self) -> PathBuf {
        self.root.join("models").join("denoiser.state.nrta")
    }
    pub fn models(&self, subject: usize) -> PathBuf {
        self.root.join("models").join(format!("subj{subject}"))
    }
    pub fn head(&self, subject: usize, head: Head) -> PathBuf {
        self.models(subject).join(format!("{}.nrta", head.name()))
    }
    pub fn scratch(&self, subject: usize) -> PathBuf {
        self.models(subject).join("semantic-scratch.nrta")
    }
    pub fn recon(&self, subject: usize) -> PathBuf {
        self.root.join("recon").join(format!("subj{subject}"))
    }
    pub fn run(&self, subject: usize, label: &str) -> PathBuf {
        self.recon(subject).join(label)
    }
    pub fn reports(&self, subject: usize) -> PathBuf {
        self.root.join("reports").join(format!("subj{subject}"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Builds the dataset and writes it under `data/`.
pub fn generate_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset> {
    cfg.validate()?;
    let ds = build_dataset(&cfg.data)?;
    ds.save(&layout.data())?;
    Ok(ds)
}

fn load_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset> {
    let ds = Dataset::load(&layout.data())?;
    if ds.config != cfg.data {
        return Err(Error::Data("dataset on disk was generated with a different data config".into()));
    }
    Ok(ds)
}

/// Stage, seeds and hyperparameters of the trained models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub stage: String,
    pub denoiser: DenoiserTrainConfig,
    pub schedule: ScheduleConfig,
    pub decoders: DecoderConfig,
    pub targets: Vec<usize>,
    pub denoiser_history: Vec<crate::denoiser::EpochStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrainLog {
    pub heads: BTreeMap<String, StageLogs>,
    pub scratch: Vec<crate::decoders::EpochLog>,
}

fn standardized_targets(ds: &Dataset, frozen: &Frozen) -> Result<(Vec<SubjectTargets>, Vec<Standardizer>)> {
    let mut all = Vec::new();
    let mut stds = Vec::new();
    for s in &ds.subjects {
        let st = Standardizer::fit(&s.train.voxels)?;
        all.push(SubjectTargets {
            subject: s.model.id,
            voxels: st.apply(&s.train.voxels)?,
            heads: split_targets(frozen, &s.train),
        });
        stds.push(st);
    }
    Ok((all, stds))
}

/// Denoiser training pairs: every training scene of every subject.
fn denoiser_pairs(ds: &Dataset, frozen: &Frozen) -> (Vec<Latent>, Vec<SemanticEmbedding>) {
    let scenes: Vec<_> = ds.subjects.iter().flat_map(|s| s.train.scenes.iter().cloned()).collect();
    let t = frozen.targets(&scenes);
    (t.latents, t.embeddings)
}

/// Trains the denoiser and every decoder head for every target subject.
/// Finished models are skipped and interrupted stages resume from their
/// per-epoch state files.
pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> Result<ModelManifest> {
    cfg.validate()?;
    let ds = load_dataset(cfg, layout)?;
    let frozen = cfg.data.frozen();
    let sched = cfg.schedule.build()?;

    let history = if layout.denoiser().exists() {
        read_json::<Vec<crate::denoiser::EpochStats>>(&layout.root.join("models").join("denoiser_log.json"))?
    } else {
        let (lat, con) = denoiser_pairs(&ds, &frozen);
        let state = layout.denoiser_state();
        let mut tr = if state.exists() {
            DenoiserTrainer::from_archive(cfg.denoiser.clone(), &TensorArchive::load(&state)?)?
        } else {
            DenoiserTrainer::new(cfg.denoiser.clone())?
        };
        while !tr.done() {
            let st = tr.run_epoch(&lat, &con, &sched)?;
            log::info!("denoiser epoch {}: loss {:.4}", st.epoch, st.mean_loss);
            tr.to_archive().save(&state)?;
        }
        write_json(&layout.root.join("models").join("denoiser_log.json"), &tr.history)?;
        tr.model.save(&layout.denoiser())?;
        tr.history.clone()
    };

    let (all, stds) = standardized_targets(&ds, &frozen)?;
    for &k in &cfg.targets() {
        let dir = layout.models(k);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut a = TensorArchive::new("standardizer");
        stds[k].write_into("", &mut a);
        a.save(&dir.join("standardizer.nrta"))?;
        let log_path = dir.join("train_log.json");
        let mut logs: SubjectTrainLog = if log_path.exists() { read_json(&log_path)? } else { Default::default() };
        for head in Head::ALL {
            if layout.head(k, head).exists() {
                continue;
            }
            let (p, l) = pretrain_then_finetune_in(&all, k, head, &cfg.decoders, Some(&dir))?;
            log::info!("subject {k} {}: finetune loss {:.4}", head.name(), l.finetune.last().map_or(f64::NAN, |e| e.total));
            p.save(&layout.head(k, head))?;
            logs.heads.insert(head.name().into(), l);
            write_json(&log_path, &logs)?;
        }
        if cfg.run.scratch_baseline && !layout.scratch(k).exists() {
            let (p, l) = train_scratch_in(&all[k], Head::Semantic, &cfg.decoders, Some(&dir))?;
            p.save(&layout.scratch(k))?;
            logs.scratch = l;
            write_json(&log_path, &logs)?;
        }
    }
    let manifest = ModelManifest {
        format_version: 1,
        stage: "fine-tuned".into(),
        denoiser: cfg.denoiser.clone(),
        schedule: cfg.schedule.clone(),
        decoders: cfg.decoders.clone(),
        targets: cfg.targets(),
        denoiser_history: history,
    };
    write_json(&layout.root.join("models").join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A subject's trained decoder bundle.
pub struct Bundle {
    pub subject: usize,
    pub standardizer: Standardizer,
    pub heads: BTreeMap<Head, AnyPipeline>,
    pub scratch: Option<AnyPipeline>,
}

impl Bundle {
    pub fn load(layout: &Layout, s: &SubjectData) -> Result<Self> {
        let k = s.model.id;
        let d = s.model.voxels();
        let a = TensorArchive::load_kind(&layout.models(k).join("standardizer.nrta"), "standardizer")?;
        let standardizer = Standardizer::read_from("", &a)?;
        let mut heads = BTreeMap::new();
        for h in Head::ALL {
            let path = layout.head(k, h);
            if !path.exists() {
                return Err(Error::State(format!("subject {k} has no trained {} decoder; run train first", h.name())));
            }
            heads.insert(h, AnyPipeline::load(&path, h, k, d)?);
        }
        let scratch = match layout.scratch(k) {
            p if p.exists() => Some(AnyPipeline::load(&p, Head::Semantic, k, d)?),
            _ => None,
        };
        Ok(Self {
            subject: k,
            standardizer,
            heads,
            scratch,
        })
    }

    /// Decodes raw voxels into one row matrix per head.
    pub fn decode(&self, voxels: &Array2<f64>, seed: u64) -> Result<BTreeMap<Head, Array2<f64>>> {
        let x = self.standardizer.apply(voxels)?;
        self.heads
            .iter()
            .map(|(&h, p)| Ok((h, p.decode(self.subject, &x, derive_seed(seed, h.name(), self.subject as u64))?)))
            .collect()
    }
}

/// Decoded test outputs of one subject.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub rows: BTreeMap<Head, Array2<f64>>,
    pub scratch_semantic: Option<Array2<f64>>,
}

impl Decoded {
    pub fn semantic(&self, i: usize) -> SemanticEmbedding {
        SemanticEmbedding::from_vec(self.rows[&Head::Semantic].row(i).to_vec()).expect("semantic row length")
    }

    pub fn latent(&self, i: usize) -> Latent {
        Latent::from_vec(self.rows[&Head::Latent].row(i).to_vec()).expect("latent row length")
    }

    pub fn features(&self, i: usize) -> GuidanceFeatureSet {
        let layers: Vec<(usize, Vec<f64>)> = [Head::Guide1, Head::Guide2, Head::Guide3]
            .iter()
            .map(|h| (h.layer().unwrap(), self.rows[h].row(i).to_vec()))
            .collect();
        GuidanceFeatureSet::from_flat(&layers).expect("feature row length")
    }
}

const DECODED_KIND: &str = "decoded";

/// Decodes the subject's test split once and caches it.
pub fn decoded_test(cfg: &ExperimentConfig, layout: &Layout, s: &SubjectData) -> Result<Decoded> {
    let path = layout.recon(s.model.id).join("decoded.nrta");
    if path.exists() {
        let a = TensorArchive::load_kind(&path, DECODED_KIND)?;
        let mut rows = BTreeMap::new();
        for h in Head::ALL {
            rows.insert(h, as_matrix(a.require(h.name())?, &path)?);
        }
        let scratch_semantic = a.get("semantic-scratch").map(|m| as_matrix(m, &path)).transpose()?;
        return Ok(Decoded { rows, scratch_semantic });
    }
    let bundle = Bundle::load(layout, s)?;
    let rows = bundle.decode(&s.test.voxels, cfg.run.decode_seed)?;
    let scratch_semantic = match &bundle.scratch {
        Some(p) => {
            let x = bundle.standardizer.apply(&s.test.voxels)?;
            Some(p.decode(s.model.id, &x, derive_seed(cfg.run.decode_seed, "semantic", s.model.id as u64))?)
        }
        None => None,
    };
    let mut a = TensorArchive::new(DECODED_KIND);
    for (h, m) in &rows {
        a.insert(h.name(), m.clone().into_dyn());
    }
    if let Some(m) = &scratch_semantic {
        a.insert("semantic-scratch", m.clone().into_dyn());
    }
    a.save(&path)?;
    Ok(Decoded { rows, scratch_semantic })
}

fn as_matrix(a: &ArrayD<f64>, path: &Path) -> Result<Array2<f64>> {
    a.clone().into_dimensionality().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "expected a matrix".into(),
    })
}

/// One reconstruction run: `kappa` is a multiple of κ_op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub kappa: f64,
    pub eta: f64,
    pub source: GuidanceSource,
    pub items: usize,
    pub repeats: usize,
}

impl RunSpec {
    /// The configured guided run.
    pub fn guided(cfg: &ExperimentConfig) -> Self {
        Self {
            label: "guided".into(),
            kappa: cfg.guidance.kappa,
            eta: cfg.guidance.eta,
            source: cfg.run.guidance_source,
            items: cfg.run.eval_items,
            repeats: 1,
        }
    }

    /// The paired κ = 0 baseline.
    pub fn unguided(cfg: &ExperimentConfig) -> Self {
        Self {
            label: "unguided".into(),
            kappa: 0.0,
            ..Self::guided(cfg)
        }
    }

    fn validate(&self, test_items: usize) -> Result<()> {
        let ok_label = !self.label.is_empty()
            && self.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.label.starts_with('.');
        if !ok_label {
            return Err(Error::Config(format!("invalid run label '{}'", self.label)));
        }
        if self.items < 2 || self.items > test_items || self.repeats == 0 {
            return Err(Error::Config(format!("run needs 2..={test_items} items and at least one repeat")));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("run kappa must be nonnegative and eta in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Guidance objective of one test item.
pub enum Objective<'a> {
    Features(FeatureGuidance<'a>),
    Brain(BrainGuidance<'a>),
}

impl Objective<'_> {
    pub fn as_dyn(&self) -> &dyn GuidanceObjective {
        match self {
            Objective::Features(f) => f,
            Objective::Brain(b) => b,
        }
    }
}

/// Everything a reconstruction of one subject needs, loaded once.
pub struct Context {
    pub frozen: Frozen,
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub subject: SubjectData,
    pub decoded: Decoded,
    pub truth_images: Vec<Image>,
    pub truth_features: Vec<GuidanceFeatureSet>,
    pub truth_semantics: Vec<SemanticEmbedding>,
    pub decoded_features: Vec<GuidanceFeatureSet>,
    pub decoded_semantics: Vec<SemanticEmbedding>,
    pub measured: Vec<Vec<f64>>,
}

impl Context {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout, subject: usize) -> Result<Self> {
        cfg.validate()?;
        let ds = load_dataset(cfg, layout)?;
        let s = ds
            .subjects
            .into_iter()
            .find(|s| s.model.id == subject)
            .ok_or_else(|| Error::Config(format!("subject {subject} not in the dataset")))?;
        let frozen = cfg.data.frozen();
        if !layout.denoiser().exists() {
            return Err(Error::State("no trained denoiser; run train first".into()));
        }
        let denoiser = Denoiser::load(&layout.denoiser())?;
        let decoded = decoded_test(cfg, layout, &s)?;
        let t = frozen.targets(&s.test.scenes);
        let n = s.test.len();
        let decoded_features = (0..n).map(|i| decoded.features(i)).collect();
        let decoded_semantics = (0..n).map(|i| decoded.semantic(i)).collect();
        let measured = s.test.voxels.rows().into_iter().map(|r| r.to_vec()).collect();
        Ok(Self {
            schedule: cfg.schedule.build()?,
            frozen,
            denoiser,
            decoded,
            truth_images: t.images,
            truth_features: t.features,
            truth_semantics: t.embeddings,
            decoded_features,
            decoded_semantics,
            measured,
            subject: s,
        })
    }

    pub fn objective(&self, source: GuidanceSource, i: usize) -> Objective<'_> {
        let all_layers = LAYERS.to_vec();
        match source {
            GuidanceSource::FeatureDecoders => Objective::Features(FeatureGuidance {
                frozen: &self.frozen,
                targets: &self.decoded_features[i],
                layers: all_layers,
            }),
            GuidanceSource::GroundTruthFeatures => Objective::Features(FeatureGuidance {
                frozen: &self.frozen,
                targets: &self.truth_features[i],
                layers: all_layers,
            }),
            GuidanceSource::BrainEncoder => Objective::Brain(BrainGuidance {
                frozen: &self.frozen,
                subject: &self.subject.model,
                semantic: &self.decoded_semantics[i],
                measured: &self.measured[i],
            }),
        }
    }

    fn models(&self) -> SamplerModels<'_> {
        SamplerModels {
            denoiser: &self.denoiser,
            schedule: &self.schedule,
        }
    }
}

/// Calibrated κ_op per guidance source, cached per subject.
pub fn kappa_op(cfg: &ExperimentConfig, layout: &Layout, ctx: &Context, source: GuidanceSource) -> Result<f64> {
    if let Some(k) = cfg.run.kappa_op {
        return Ok(k);
    }
    let path = layout.recon(ctx.subject.model.id).join("kappa_op.json");
    let mut cache: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
    if let Some(&k) = cache.get(source.name()) {
        return Ok(k);
    }
    let k = calibrate(cfg, layout, ctx, source)?;
    cache.insert(source.name().into(), k);
    write_json(&path, &cache)?;
    Ok(k)
}

/// Calibrates on the first training scenes of the subject, decoded from
/// their training voxels, so that no test item informs the scale.
fn calibrate(cfg: &ExperimentConfig, layout: &Layout, ctx: &Context, source: GuidanceSource) -> Result<f64> {
    let s = &ctx.subject;
    let n = cfg.run.calibration_items;
    let bundle = Bundle::load(layout, s)?;
    let rows: Vec<usize> = (0..n).collect();
    let voxels = s.train.voxels.select(Axis(0), &rows);
    let dec = Decoded {
        rows: bundle.decode(&voxels, derive_seed(cfg.run.decode_seed, "calibration-decode", s.model.id as u64))?,
        scratch_semantic: None,
    };
    let scenes: Vec<_> = rows.iter().map(|&r| s.train.scenes[s.train.record_scene[r]]).collect();
    let truth = ctx.frozen.targets(&scenes);
    let lat: Vec<Latent> = (0..n).map(|i| dec.latent(i)).collect();
    let sem: Vec<SemanticEmbedding> = (0..n).map(|i| dec.semantic(i)).collect();
    let feats: Vec<GuidanceFeatureSet> = (0..n).map(|i| dec.features(i)).collect();
    let measured: Vec<Vec<f64>> = (0..n).map(|i| voxels.row(i).to_vec()).collect();
    let objectives: Vec<Objective> = (0..n)
        .map(|i| match source {
            GuidanceSource::FeatureDecoders => Objective::Features(FeatureGuidance {
                frozen: &ctx.frozen,
                targets: &feats[i],
                layers: LAYERS.to_vec(),
            }),
            GuidanceSource::GroundTruthFeatures => Objective::Features(FeatureGuidance {
                frozen: &ctx.frozen,
                targets: &truth.features[i],
                layers: LAYERS.to_vec(),
            }),
            GuidanceSource::BrainEncoder => Objective::Brain(BrainGuidance {
                frozen: &ctx.frozen,
                subject: &s.model,
                semantic: &sem[i],
                measured: &measured[i],
            }),
        })
        .collect();
    let items: Vec<(&Latent, &SemanticEmbedding, &dyn GuidanceObjective)> =
        (0..n).map(|i| (&lat[i], &sem[i], objectives[i].as_dyn())).collect();
    let gcfg = GuidanceConfig {
        kappa: 1.0,
        ..cfg.guidance.clone()
    };
    calibrate_kappa(&items, &gcfg, &ctx.models())
}

/// Per-step trace of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub item: usize,
    pub repeat: usize,
    pub seed: u64,
    pub trace: Vec<TraceStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub subject: usize,
    pub spec: RunSpec,
    pub kappa_op: f64,
    pub kappa: f64,
    pub guidance: GuidanceConfig,
    pub samples: Vec<SampleRecord>,
}

/// Sampler seed of item `i`, repeat `r`.
pub fn sample_seed(base: u64, item: usize, repeat: usize) -> u64 {
    derive_seed(derive_seed(base, "sample-item", item as u64), "repeat", repeat as u64)
}

/// Reconstructed latents `[items][repeats]` and the run record.
pub struct ReconSet {
    pub record: RunRecord,
    pub latents: Vec<Vec<Latent>>,
}

const RECON_KIND: &str = "reconstructions";

impl ReconSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let record: RunRecord = read_json(&dir.join("run.json"))?;
        let path = dir.join("latents.nrta");
        let a = TensorArchive::load_kind(&path, RECON_KIND)?;
        let t = a.require("latents")?;
        let (n, r) = (record.spec.items, record.spec.repeats);
        if t.shape() != [n, r, 4, 8, 8] {
            return Err(Error::Format {
                path,
                reason: format!("latents have shape {:?}, run record says {n}×{r}", t.shape()),
            });
        }
        let latents = (0..n)
            .map(|i| (0..r).map(|j| Latent::from_vec(t.slice(ndarray::s![i, j, .., .., ..]).iter().copied().collect()).unwrap()).collect())
            .collect();
        Ok(Self { record, latents })
    }

    fn save(&self, dir: &Path, frozen: &Frozen, truth: &[Image]) -> Result<()> {
        let n = self.latents.len();
        let r = self.record.spec.repeats;
        let flat: Vec<f64> = self.latents.iter().flatten().flat_map(|z| z.to_vec()).collect();
        let mut a = TensorArchive::new(RECON_KIND);
        a.insert("latents", ArrayD::from_shape_vec(IxDyn(&[n, r, 4, 8, 8]), flat).unwrap());
        a.save(&dir.join("latents.nrta"))?;
        write_json(&dir.join("run.json"), &self.record)?;
        let rows: Vec<Vec<Image>> = (0..n.min(10))
            .map(|i| {
                let mut row = vec![truth[i].clone()];
                row.extend(self.latents[i].iter().map(|z| frozen.codec.decode_clamped(z).unwrap()));
                row
            })
            .collect();
        save_ppm_grid(&dir.join("grid.ppm"), &rows)
    }
}

/// Reconstructs the first `spec.items` test items of `subject`.
pub fn reconstruct(cfg: &ExperimentConfig, layout: &Layout, ctx: &Context, spec: &RunSpec) -> Result<ReconSet> {
    spec.validate(ctx.subject.test.len())?;
    let k_op = kappa_op(cfg, layout, ctx, spec.source)?;
    let kappa = spec.kappa * k_op;
    let models = ctx.models();
    let mut latents = Vec::with_capacity(spec.items);
    let mut samples = Vec::new();
    for i in 0..spec.items {
        let obj = ctx.objective(spec.source, i);
        let init = ctx.decoded.latent(i);
        let c = &ctx.decoded_semantics[i];
        let mut reps = Vec::with_capacity(spec.repeats);
        for r in 0..spec.repeats {
            let seed = sample_seed(cfg.guidance.seed, i, r);
            let g = GuidanceConfig {
                kappa,
                eta: spec.eta,
                seed,
                ..cfg.guidance.clone()
            };
            let out = guided_sample(&init, c, Some(obj.as_dyn()), &g, &models)?;
            reps.push(out.latent);
            samples.push(SampleRecord {
                item: i,
                repeat: r,
                seed,
                trace: out.trace,
            });
        }
        latents.push(reps);
    }
    let set = ReconSet {
        record: RunRecord {
            format_version: 1,
            subject: ctx.subject.model.id,
            spec: spec.clone(),
            kappa_op: k_op,
            kappa,
            guidance: GuidanceConfig {
                kappa,
                eta: spec.eta,
                ..cfg.guidance.clone()
            },
            samples,
        },
        latents,
    };
    set.save(&layout.run(ctx.subject.model.id, &spec.label), &ctx.frozen, &ctx.truth_images)?;
    Ok(set)
}

pub const RUN_COLUMNS: [&str; 7] = ["pixcorr", "ssim", "id_pixel", "id_layer1", "id_layer3", "id_semantic", "guidance_loss"];

fn flat_layer(f: &GuidanceFeatureSet, l: usize) -> Vec<f64> {
    f.layers[&l].iter().copied().collect()
}

/// Scores a reconstruction set against the subject's test truths. Metrics
/// other than repeat consistency use repeat 0.
pub fn evaluate_run(ctx: &Context, probe: &SemanticProbe, set: &ReconSet) -> Result<MetricReport> {
    let rec = &set.record;
    let n = set.latents.len();
    let imgs: Vec<Image> = set
        .latents
        .iter()
        .map(|r| ctx.frozen.codec.decode_clamped(&r[0]))
        .collect::<Result<_>>()?;
    let truth = &ctx.truth_images[..n];
    let meta = ReportMeta {
        label: rec.spec.label.clone(),
        subject: Some(rec.subject),
        kappa: rec.kappa,
        kappa_op: Some(rec.kappa_op),
        eta: rec.spec.eta,
        seed: rec.guidance.seed,
        guidance_source: rec.spec.source.name().into(),
        distractors: "all".into(),
        retrieval_chance: 1.0 / n as f64,
    };
    let mut cols: Vec<&str> = RUN_COLUMNS.to_vec();
    if rec.spec.repeats >= 2 {
        cols.push("repeat_consistency");
    }
    let mut report = MetricReport::new(meta, &cols);
    let feats = ctx.frozen.features.extract_batch(&imgs);
    let flat = |v: &[Image]| v.iter().map(|i| i.to_vec()).collect::<Vec<_>>();
    let id = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| two_way_identification(&a, &b);
    let id_pixel = id(flat(&imgs), flat(truth))?;
    let layer = |fs: &[GuidanceFeatureSet], l| fs.iter().map(|f| flat_layer(f, l)).collect::<Vec<_>>();
    let id_l1 = id(layer(&feats, 1), layer(&ctx.truth_features[..n], 1))?;
    let id_l3 = id(layer(&feats, 3), layer(&ctx.truth_features[..n], 3))?;
    let id_sem = id(
        probe.embed(&ctx.frozen, &imgs),
        ctx.truth_semantics[..n].iter().map(|c| c.to_vec()).collect(),
    )?;
    for i in 0..n {
        let obj = ctx.objective(rec.spec.source, i);
        let mut row = vec![
            pixcorr_or_zero(&imgs[i], &truth[i]),
            ssim(&imgs[i], &truth[i])?,
            id_pixel[i],
            id_l1[i],
            id_l3[i],
            id_sem[i],
            obj.as_dyn().loss(&set.latents[i][0])?,
        ];
        if rec.spec.repeats >= 2 {
            let reps: Vec<Image> = set.latents[i]
                .iter()
                .map(|z| ctx.frozen.codec.decode_clamped(z))
                .collect::<Result<_>>()?;
            row.push(repeat_consistency(&reps)?);
        }
        report.push_item(row)?;
    }
    let measured = ctx.subject.test.voxels.select(Axis(0), &(0..n).collect::<Vec<_>>());
    let brain = brain_correlation(&ctx.frozen, &imgs, &ctx.decoded_semantics[..n], &measured, &ctx.subject.model)?;
    for (g, v) in brain {
        report.scores.insert(format!("brain_{g}"), v);
    }
    Ok(report)
}

/// `retrieval_*` query with the decoded rows among the true ones (image
/// direction); `retrieval_brain_*` query with the true rows among the
/// decoded ones.
pub const DECODING_COLUMNS: [&str; 12] = [
    "r_semantic",
    "r_latent",
    "r_guide1",
    "r_guide2",
    "r_guide3",
    "retrieval_semantic",
    "retrieval_guide1",
    "retrieval_guide2",
    "retrieval_guide3",
    "retrieval_vote",
    "retrieval_brain_semantic",
    "retrieval_brain_vote",
];

/// Decoding quality on the full test split: per-item correlations and
/// retrieval hits, with element-wise correlations as scores.
pub fn evaluate_decoding(ctx: &Context) -> Result<MetricReport> {
    let s = &ctx.subject;
    let n = s.test.len();
    let truth = split_targets(&ctx.frozen, &s.test);
    let meta = ReportMeta {
        label: "decoding".into(),
        subject: Some(s.model.id),
        distractors: "all".into(),
        retrieval_chance: 1.0 / n as f64,
        ..Default::default()
    };
    let mut report = MetricReport::new(meta, &DECODING_COLUMNS);
    let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let per_item_r = |h: Head| -> Vec<f64> {
        let (p, t) = (&ctx.decoded.rows[&h], &truth[&h]);
        (0..n)
            .map(|i| crate::tensors::pearson(p.row(i).as_slice().unwrap(), t.row(i).as_slice().unwrap()).unwrap_or(0.0))
            .collect()
    };
    let sims: BTreeMap<Head, Vec<Vec<f64>>> = [Head::Semantic, Head::Guide1, Head::Guide2, Head::Guide3]
        .into_iter()
        .map(|h| (h, similarity_matrix(&rows(&ctx.decoded.rows[&h]), &rows(&truth[&h]))))
        .collect();
    let guide_sims: Vec<Vec<Vec<f64>>> = [Head::Guide1, Head::Guide2, Head::Guide3].iter().map(|h| sims[h].clone()).collect();
    let transpose = |m: &Vec<Vec<f64>>| (0..n).map(|j| (0..n).map(|i| m[i][j]).collect()).collect::<Vec<Vec<f64>>>();
    let brain_guide_sims: Vec<Vec<Vec<f64>>> = guide_sims.iter().map(transpose).collect();
    let cols = [
        per_item_r(Head::Semantic),
        per_item_r(Head::Latent),
        per_item_r(Head::Guide1),
        per_item_r(Head::Guide2),
        per_item_r(Head::Guide3),
        retrieval(&sims[&Head::Semantic]),
        retrieval(&sims[&Head::Guide1]),
        retrieval(&sims[&Head::Guide2]),
        retrieval(&sims[&Head::Guide3]),
        vote_retrieval(&guide_sims),
        retrieval(&transpose(&sims[&Head::Semantic])),
        vote_retrieval(&brain_guide_sims),
    ];
    for i in 0..n {
        report.push_item(cols.iter().map(|c| c[i]).collect())?;
    }
    for h in Head::ALL {
        report
            .scores
            .insert(format!("r_elem_{}", h.name()), mean_element_pearson(&ctx.decoded.rows[&h], &truth[&h]));
    }
    if let Some(m) = &ctx.decoded.scratch_semantic {
        report.scores.insert("r_semantic_scratch".into(), mean_item_pearson(m, &truth[&Head::Semantic]));
    }
    Ok(report)
}

/// The probe is fitted on the first subject's training scenes, so every
/// subject is scored in the same semantic read-out.
pub fn semantic_probe(cfg: &ExperimentConfig, layout: &Layout) -> Result<SemanticProbe> {
    let ds = load_dataset(cfg, layout)?;
    let frozen = cfg.data.frozen();
    let t = frozen.targets(&ds.subjects[0].train.scenes);
    SemanticProbe::fit(&frozen, &t.images, &t.embeddings)
}

/// Evaluates the decoding and every reconstruction run of `subject` found
/// on disk, writing one report per run.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout, subject: usize) -> Result<Vec<MetricReport>> {
    let ctx = Context::load(cfg, layout, subject)?;
    let probe = semantic_probe(cfg, layout)?;
    let out_dir = layout.reports(subject);
    let dec = evaluate_decoding(&ctx)?;
    dec.save(&out_dir, "decoding")?;
    let mut reports = vec![dec];
    let mut labels = Vec::new();
    let recon = layout.recon(subject);
    if recon.exists() {
        for e in std::fs::read_dir(&recon).map_err(|e| Error::io(&recon, e))? {
            let e = e.map_err(|e| Error::io(&recon, e))?;
            if e.path().join("run.json").exists() {
                labels.push(e.file_name().to_string_lossy().into_owned());
            }
        }
    }
    labels.sort();
    for label in labels {
        let set = ReconSet::load(&layout.run(subject, &label))?;
        let rep = evaluate_run(&ctx, &probe, &set)?;
        rep.save(&out_dir, &label)?;
        reports.push(rep);
    }
    Ok(reports)
}

pub fn ablation_label(kappa: f64, eta: f64) -> String {
    format!("ablate-k{kappa}-e{eta}")
}

/// The κ × η grid: one reconstruction and report per cell, plus a summary
/// table with one row per cell.
pub fn ablate(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let probe = semantic_probe(cfg, layout)?;
    let mut out = Vec::new();
    for &k in &cfg.ablation.subjects {
        let ctx = Context::load(cfg, layout, k)?;
        let mut table = csv::Writer::from_writer(Vec::new());
        let keys = ["pixcorr", "ssim", "id_layer1", "id_layer3", "id_semantic", "guidance_loss"];
        let mut header = vec!["kappa_multiplier".to_string(), "eta".into(), "kappa".into()];
        header.extend(keys.iter().map(|s| s.to_string()));
        header.push("brain_v1".into());
        table.write_record(&header).map_err(csv_err)?;
        for &m in &cfg.ablation.kappa_multipliers {
            for &eta in &cfg.ablation.etas {
                let spec = RunSpec {
                    label: ablation_label(m, eta),
                    kappa: m,
                    eta,
                    source: cfg.ablation.guidance_source,
                    items: cfg.ablation.items,
                    repeats: 1,
                };
                let set = reconstruct(cfg, layout, &ctx, &spec)?;
                let rep = evaluate_run(&ctx, &probe, &set)?;
                rep.save(&layout.reports(k), &spec.label)?;
                let agg = rep.aggregate();
                let mut row = vec![m.to_string(), eta.to_string(), set.record.kappa.to_string()];
                row.extend(keys.iter().map(|c| agg[*c].to_string()));
                row.push(rep.scores["brain_v1"].to_string());
                table.write_record(&row).map_err(csv_err)?;
                out.push(rep);
            }
        }
        let bytes = table.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(&layout.reports(k).join("ablation_grid.csv"), &bytes)?;
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

const _: () = assert!(LATENT_LEN == 256);
