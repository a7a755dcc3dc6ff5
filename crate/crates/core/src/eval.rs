//! Reconstruction metrics, the metric report and image-grid dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::brain::{stimulus_vector, Frozen, SubjectModel, VoxelGroup};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensors::{cosine, pearson, Image, SemanticEmbedding, IMAGE_SIDE};

pub fn pixcorr(a: &Image, b: &Image) -> Result<f64> {
    a.check()?;
    b.check()?;
    pearson(a.as_slice(), b.as_slice()).ok_or_else(|| Error::DegenerateBatch("pixcorr of a constant image".into()))
}

/// `pixcorr`, but 0 where either image is constant.
pub fn pixcorr_or_zero(a: &Image, b: &Image) -> f64 {
    pearson(a.as_slice(), b.as_slice()).unwrap_or(0.0)
}

const GRAY: [f64; 3] = [0.2125, 0.7154, 0.0721];
const SSIM_WIN: usize = 7;

pub fn grayscale(img: &Image) -> Array2<f64> {
    let x = &img.0;
    Array2::from_shape_fn((x.shape()[1], x.shape()[2]), |(i, j)| (0..3).map(|c| GRAY[c] * x[[c, i, j]]).sum())
}

/// Mean SSIM over all fully contained 7×7 windows of the grayscale images,
/// with sample (co)variances and data range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(ssim_gray(grayscale(a).view(), grayscale(b).view()))
}

pub fn ssim_gray(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let np = (SSIM_WIN * SSIM_WIN) as f64;
    let cov_norm = np / (np - 1.0);
    let (h, w) = x.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WIN {
        for j in 0..=w - SSIM_WIN {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WIN {
                for dj in 0..SSIM_WIN {
                    let (u, v) = (x[[i + di, j + dj]], y[[i + di, j + dj]]);
                    sx += u;
                    sy += v;
                    sxx += u * u;
                    syy += v * v;
                    sxy += u * v;
                }
            }
            let (mx, my) = (sx / np, sy / np);
            let vx = cov_norm * (sxx / np - mx * mx);
            let vy = cov_norm * (syy / np - my * my);
            let vxy = cov_norm * (sxy / np - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Per-item two-way identification: the fraction of distractors `j ≠ i`
/// for which `corr(recon_i, truth_i) > corr(recon_i, truth_j)`; ties count
/// half. Every other item is a distractor.
pub fn two_way_identification(recons: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = recons.len();
    if n < 2 || truths.len() != n {
        return Err(Error::Data(format!(
            "two-way identification needs at least 2 paired items, got {} and {}",
            recons.len(),
            truths.len()
        )));
    }
    let corr = |a: &[f64], b: &[f64]| pearson(a, b).unwrap_or(0.0);
    Ok((0..n)
        .map(|i| {
            let own = corr(&recons[i], &truths[i]);
            let mut wins = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let other = corr(&recons[i], &truths[j]);
                if own > other {
                    wins += 1.0;
                } else if own == other {
                    wins += 0.5;
                }
            }
            wins / (n - 1) as f64
        })
        .collect())
}

/// `sim[q][c]`: cosine similarity of query `q` to candidate `c`.
pub fn similarity_matrix(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| candidates.iter().map(|c| cosine(q, c)).collect())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 hit (1.0 or 0.0) per query, where query `i` should retrieve
/// candidate `i`.
pub fn retrieval(sim: &[Vec<f64>]) -> Vec<f64> {
    sim.iter()
        .enumerate()
        .map(|(i, row)| if argmax(row) == i { 1.0 } else { 0.0 })
        .collect()
}

/// Majority vote over per-layer top-1 candidates. A full tie goes to the
/// tied candidate with the highest similarity summed over layers.
pub fn vote(per_layer: &[&[f64]]) -> usize {
    let tops: Vec<usize> = per_layer.iter().map(|row| argmax(row)).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in &tops {
        *counts.entry(t).or_default() += 1;
    }
    let most = *counts.values().max().unwrap();
    let tied: Vec<usize> = counts.iter().filter(|(_, &k)| k == most).map(|(&c, _)| c).collect();
    if tied.len() == 1 {
        return tied[0];
    }
    let summed = |c: usize| per_layer.iter().map(|row| row[c]).sum::<f64>();
    let mut best = tied[0];
    for &c in &tied[1..] {
        if summed(c) > summed(best) {
            best = c;
        }
    }
    best
}

/// Per-query hit of [`vote`] over layer similarity matrices.
pub fn vote_retrieval(sims: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let n = sims[0].len();
    (0..n)
        .map(|i| {
            let rows: Vec<&[f64]> = sims.iter().map(|s| s[i].as_slice()).collect();
            if vote(&rows) == i {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean over voxels of the across-item Pearson correlation between the
/// noiseless forward-model prediction from the reconstructions and the
/// measured voxels, per voxel group and over all voxels. A voxel with no
/// variance across items scores 0.
pub fn brain_correlation(
    frozen: &Frozen,
    recons: &[Image],
    semantics: &[SemanticEmbedding],
    measured: &Array2<f64>,
    subject: &SubjectModel,
) -> Result<BTreeMap<String, f64>> {
    if measured.ncols() != subject.voxels() {
        return Err(Error::param(format!(
            "subject {} has {} voxels, measurements have {}",
            subject.id,
            subject.voxels(),
            measured.ncols()
        )));
    }
    if recons.len() != measured.nrows() || semantics.len() != recons.len() {
        return Err(Error::param("reconstructions, semantics and measurements differ in length"));
    }
    let feats = frozen.features.extract_batch(recons);
    let mut stim = Array2::zeros((recons.len(), crate::brain::STIMULUS_LEN));
    for (i, (f, c)) in feats.iter().zip(semantics).enumerate() {
        stim.row_mut(i).assign(&ndarray::Array1::from(stimulus_vector(f, c)?));
    }
    let pred = subject.predict(&stim);
    let r: Vec<f64> = (0..subject.voxels())
        .map(|v| {
            let p = pred.column(v).to_vec();
            let m = measured.column(v).to_vec();
            pearson(&p, &m).unwrap_or(0.0)
        })
        .collect();
    let mean = |idx: &[usize]| if idx.is_empty() { 0.0 } else { idx.iter().map(|&v| r[v]).sum::<f64>() / idx.len() as f64 };
    let mut out = BTreeMap::new();
    for g in VoxelGroup::ALL {
        out.insert(g.name().to_string(), mean(&subject.indices(g)));
    }
    out.insert("whole".into(), mean(&(0..subject.voxels()).collect::<Vec<_>>()));
    Ok(out)
}

/// Frozen linear read-out from layer-3 features to the semantic space, used
/// as the "semantic" feature of a reconstructed image. Ridge regression on
/// centred data, ridge strength relative to the mean feature energy.
#[derive(Clone, Debug)]
pub struct SemanticProbe {
    x_mean: Array1<f64>,
    y_mean: Array1<f64>,
    w: Array2<f64>,
}

pub const PROBE_RIDGE: f64 = 1e-3;

impl SemanticProbe {
    pub fn fit(frozen: &Frozen, images: &[Image], embeddings: &[SemanticEmbedding]) -> Result<Self> {
        if images.len() < 2 || images.len() != embeddings.len() {
            return Err(Error::Data("semantic probe needs at least 2 paired images and embeddings".into()));
        }
        let x = stack(&probe_inputs(frozen, images));
        let y = stack(&embeddings.iter().map(|c| c.to_vec()).collect::<Vec<_>>());
        let x_mean = x.mean_axis(Axis(0)).unwrap();
        let y_mean = y.mean_axis(Axis(0)).unwrap();
        let xc = &x - &x_mean;
        let yc = &y - &y_mean;
        let mut gram = xc.t().dot(&xc);
        let d = gram.nrows();
        let lambda = PROBE_RIDGE * gram.diag().sum() / d as f64;
        gram.diag_mut().mapv_inplace(|v| v + lambda.max(1e-12));
        let w = cholesky_solve(gram, xc.t().dot(&yc))?;
        Ok(Self { x_mean, y_mean, w })
    }

    pub fn embed(&self, frozen: &Frozen, images: &[Image]) -> Vec<Vec<f64>> {
        let x = stack(&probe_inputs(frozen, images));
        let y = (&x - &self.x_mean).dot(&self.w) + &self.y_mean;
        y.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

fn probe_inputs(frozen: &Frozen, images: &[Image]) -> Vec<Vec<f64>> {
    frozen
        .features
        .extract_batch(images)
        .iter()
        .map(|f| f.layers[&3].iter().copied().collect())
        .collect()
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Solves `A·X = B` for symmetric positive definite `A`.
fn cholesky_solve(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) {
            return Err(Error::DegenerateBatch("probe system is not positive definite".into()));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    // L·Y = B, then Lᵀ·X = Y, column block at a time.
    for i in 0..n {
        for k in 0..i {
            let l = a[[i, k]];
            if l != 0.0 {
                let (done, mut rest) = b.view_mut().split_at(Axis(0), i);
                rest.row_mut(0).scaled_add(-l, &done.row(k));
            }
        }
        let l = a[[i, i]];
        b.row_mut(i).mapv_inplace(|v| v / l);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let l = a[[k, i]];
            if l != 0.0 {
                let (mut head, tail) = b.view_mut().split_at(Axis(0), i + 1);
                head.row_mut(i).scaled_add(-l, &tail.row(k - i - 1));
            }
        }
        let l = a[[i, i]];
        b.row_mut(i).mapv_inplace(|v| v / l);
    }
    Ok(b)
}

/// Mean pairwise PixCorr among the repeats of one item.
pub fn repeat_consistency(repeats: &[Image]) -> Result<f64> {
    if repeats.len() < 2 {
        return Err(Error::Data(format!("repeat consistency needs at least 2 repeats, got {}", repeats.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..repeats.len() {
        for j in i + 1..repeats.len() {
            total += pixcorr_or_zero(&repeats[i], &repeats[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    pub label: String,
    pub subject: Option<usize>,
    pub kappa: f64,
    pub kappa_op: Option<f64>,
    pub eta: f64,
    pub seed: u64,
    pub guidance_source: String,
    pub distractors: String,
    pub retrieval_chance: f64,
}

/// Per-item metric table plus report-level scores (brain correlation per
/// voxel group, retrieval rates).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub columns: Vec<String>,
    pub items: Vec<Vec<f64>>,
    pub scores: BTreeMap<String, f64>,
}

/// The structured summary: metadata, column means and report-level scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSummary {
    pub format_version: u32,
    pub meta: ReportMeta,
    pub items: usize,
    pub aggregate: BTreeMap<String, f64>,
    pub scores: BTreeMap<String, f64>,
}

pub const SUMMARY_VERSION: u32 = 1;

impl MetricReport {
    pub fn new(meta: ReportMeta, columns: &[&str]) -> Self {
        Self {
            meta,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            items: Vec::new(),
            scores: BTreeMap::new(),
        }
    }

    pub fn push_item(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::param(format!("row has {} values, report has {} columns", values.len(), self.columns.len())));
        }
        self.items.push(values);
        Ok(())
    }

    /// Sets a column from a per-item vector, adding it if new.
    pub fn set_column(&mut self, name: &str, values: &[f64]) -> Result<()> {
        if !self.items.is_empty() && values.len() != self.items.len() {
            return Err(Error::param(format!("column {name} has {} values for {} items", values.len(), self.items.len())));
        }
        if self.items.is_empty() {
            self.items = vec![Vec::new(); values.len()];
            for row in &mut self.items {
                row.resize(self.columns.len(), f64::NAN);
            }
        }
        let k = match self.columns.iter().position(|c| c == name) {
            Some(k) => k,
            None => {
                self.columns.push(name.to_string());
                for row in &mut self.items {
                    row.push(f64::NAN);
                }
                self.columns.len() - 1
            }
        };
        for (row, &v) in self.items.iter_mut().zip(values) {
            row[k] = v;
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.items.iter().map(|r| r[k]).collect())
    }

    pub fn aggregate(&self) -> BTreeMap<String, f64> {
        let n = self.items.len().max(1) as f64;
        self.columns
            .iter()
            .enumerate()
            .map(|(k, c)| (c.clone(), self.items.iter().map(|r| r[k]).sum::<f64>() / n))
            .collect()
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            format_version: SUMMARY_VERSION,
            meta: self.meta.clone(),
            items: self.items.len(),
            aggregate: self.aggregate(),
            scores: self.scores.clone(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut header = vec!["item".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (i, row) in self.items.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        let agg = self.aggregate();
        let mut rec = vec!["mean".to_string()];
        rec.extend(self.columns.iter().map(|c| agg[c].to_string()));
        w.write_record(&rec).map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        let json = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        write_atomic(&dir.join(format!("{stem}.json")), (json + "\n").as_bytes())
    }
}

impl ReportSummary {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let s: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if s.format_version != SUMMARY_VERSION {
            return Err(format!("unsupported summary version {}", s.format_version));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// A binary PPM of images laid out in rows, with a one-pixel white gap.
pub fn ppm_grid(rows: &[Vec<Image>]) -> Vec<u8> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let s = IMAGE_SIDE;
    let w = cols * (s + 1) + 1;
    let h = rows.len() * (s + 1) + 1;
    let mut px = vec![255u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let img = img.clamped();
            for i in 0..s {
                for j in 0..s {
                    let y = r * (s + 1) + 1 + i;
                    let x = c * (s + 1) + 1 + j;
                    for ch in 0..3 {
                        px[(y * w + x) * 3 + ch] = (img.0[[ch, i, j]] * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    let _ = write!(HeaderSink(&mut out), "P6\n{w} {h}\n255\n");
    out.extend(px);
    out
}

struct HeaderSink<'a>(&'a mut Vec<u8>);

impl std::fmt::Write for HeaderSink<'_> {
    fn write_str(&mut self, s: &str) -> std::fmt::Result {
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

pub fn save_ppm_grid(path: &Path, rows: &[Vec<Image>]) -> Result<()> {
    write_atomic(path, &ppm_grid(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brain::render_scene;
    use crate::features::SceneParams;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng) -> Image {
        Image(Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f64>()))
    }

    #[test]
    fn pixcorr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_image(&mut rng);
        assert!((pixcorr(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image(x.0.mapv(|v| 0.3 - v));
        assert!((pixcorr(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pixcorr(&x, &Image::zeros()).is_err());
        // Three pixels (1,2,3) vs (1,3,2): r = 0.5 by hand.
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        let y = rand_image(&mut rng);
        assert_eq!(pixcorr(&x, &y).unwrap(), pixcorr(&y, &x).unwrap());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_image(&mut rng);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Image(Array3::from_elem((3, 32, 32), 0.4));
        let d = Image(Array3::from_elem((3, 32, 32), 0.6));
        assert!(ssim(&c, &d).unwrap() < 1.0);
        let y = rand_image(&mut rng);
        let v = ssim(&x, &y).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    /// Value computed once with scikit-image 0.25
    /// (`structural_similarity(gx, gy, win_size=7, data_range=1.0)` on
    /// `rgb2gray` of the two ramps below).
    #[test]
    fn ssim_matches_reference_value() {
        let a = Image(Array3::from_shape_fn((3, 32, 32), |(c, i, j)| ((i * 32 + j) as f64 / 1023.0 + 0.1 * c as f64).min(1.0)));
        let b = Image(Array3::from_shape_fn((3, 32, 32), |(c, i, j)| {
            (((i * 7 + j * 3 + c * 5) % 17) as f64 / 16.0) * 0.5 + (j as f64 / 31.0) * 0.5
        }));
        let v = ssim(&a, &b).unwrap();
        assert!((v - SSIM_REFERENCE).abs() < 1e-9, "{v}");
    }

    const SSIM_REFERENCE: f64 = 0.05619554348512746;

    #[test]
    fn identification_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truths: Vec<Vec<f64>> = (0..100).map(|_| (0..50).map(|_| rng.random::<f64>()).collect()).collect();
        let same = two_way_identification(&truths, &truths).unwrap();
        assert!(same.iter().all(|&v| v == 1.0));
        let mut shuffled = truths.clone();
        shuffled.rotate_left(1);
        let rate = two_way_identification(&shuffled, &truths).unwrap().iter().sum::<f64>() / 100.0;
        assert!((rate - 0.5).abs() <= 0.07, "{rate}");
        assert!(two_way_identification(&truths[..1], &truths[..1]).is_err());
    }

    #[test]
    fn retrieval_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<Vec<f64>> = (0..100).map(|_| (0..32).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        assert!(retrieval(&similarity_matrix(&e, &e)).iter().all(|&v| v == 1.0));
        let q: Vec<Vec<f64>> = (0..100).map(|_| (0..32).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let rate = retrieval(&similarity_matrix(&q, &e)).iter().sum::<f64>() / 100.0;
        assert!(rate <= 0.03, "{rate}");
    }

    #[test]
    fn voting_rules() {
        let a = [0.9, 0.1, 0.0];
        assert_eq!(vote(&[&a, &a, &a]), 0);
        let b = [0.1, 0.8, 0.0];
        assert_eq!(vote(&[&a, &b, &b]), 1);
        // Three different winners: summed similarity decides.
        let l1 = [0.50, 0.40, 0.45];
        let l2 = [0.30, 0.60, 0.55];
        let l3 = [0.20, 0.35, 0.70];
        let got = vote(&[&l1, &l2, &l3]);
        let brute = (0..3)
            .max_by(|&x, &y| (l1[x] + l2[x] + l3[x]).total_cmp(&(l1[y] + l2[y] + l3[y])))
            .unwrap();
        assert_eq!(got, brute);
        assert_eq!(got, 2);
    }

    #[test]
    fn repeat_consistency_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_image(&mut rng);
        assert!((repeat_consistency(&vec![x.clone(); 5]).unwrap() - 1.0).abs() < 1e-12);
        let ind: Vec<Image> = (0..5).map(|_| rand_image(&mut rng)).collect();
        assert!(repeat_consistency(&ind).unwrap().abs() < 0.05);
        assert!(repeat_consistency(&[x]).is_err());
    }

    #[test]
    fn brain_correlation_ceiling_and_null() {
        let frozen = Frozen::new(1, 2);
        let subject = SubjectModel::new(3, 0, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scenes: Vec<SceneParams> = (0..60).map(|_| SceneParams::random(&mut rng)).collect();
        let t = frozen.targets(&scenes);
        let mut stim = Array2::zeros((60, crate::brain::STIMULUS_LEN));
        for i in 0..60 {
            stim.row_mut(i).assign(&ndarray::Array1::from(stimulus_vector(&t.features[i], &t.embeddings[i]).unwrap()));
        }
        let clean = subject.predict(&stim);
        let noisy = &clean + &Array2::from_shape_fn(clean.dim(), |_| 0.05 * (rng.random::<f64>() - 0.5));
        let r = brain_correlation(&frozen, &t.images, &t.embeddings, &noisy, &subject).unwrap();
        // Ceiling computed directly from the noiseless prediction.
        let ceil: Vec<f64> = (0..200)
            .map(|v| pearson(&clean.column(v).to_vec(), &noisy.column(v).to_vec()).unwrap())
            .collect();
        let whole = ceil.iter().sum::<f64>() / 200.0;
        assert!((r["whole"] - whole).abs() < 1e-10);

        let flat = vec![Image(Array3::from_elem((3, 32, 32), 0.5)); 60];
        let nulls = vec![SemanticEmbedding::null(); 60];
        let r0 = brain_correlation(&frozen, &flat, &nulls, &noisy, &subject).unwrap();
        assert!(r0["whole"].abs() <= 0.1);
        let other = SubjectModel::new(3, 1, 150);
        assert!(brain_correlation(&frozen, &t.images, &t.embeddings, &noisy, &other).is_err());
    }

    #[test]
    fn report_aggregates_and_files() {
        let mut r = MetricReport::new(ReportMeta { label: "x".into(), ..Default::default() }, &["a", "b"]);
        r.push_item(vec![1.0, 2.0]).unwrap();
        r.push_item(vec![3.0, 5.0]).unwrap();
        r.set_column("c", &[0.0, 1.0]).unwrap();
        r.scores.insert("whole".into(), 0.25);
        let agg = r.aggregate();
        assert_eq!(agg["a"], 2.0);
        assert_eq!(agg["b"], 3.5);
        assert_eq!(agg["c"], 0.5);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,2,3.5,0.5"));
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path(), "rep").unwrap();
        let back = ReportSummary::load(&dir.path().join("rep.json")).unwrap();
        assert_eq!(back, r.summary());
        assert!(ReportSummary::parse("{}").is_err());
    }

    #[test]
    fn ppm_grid_layout() {
        let img = render_scene(&SceneParams::random(&mut ChaCha8Rng::seed_from_u64(6)));
        let bytes = ppm_grid(&[vec![img.clone(), img.clone()], vec![img]]);
        let header = b"P6\n67 67\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 67 * 67 * 3);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = ndarray::array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let x = ndarray::array![[1.0, -2.0], [0.5, 0.0], [-1.0, 3.0]];
        let b = a.dot(&x);
        let got = cholesky_solve(a, b).unwrap();
        assert!((&got - &x).iter().all(|v| v.abs() < 1e-12));
        assert!(cholesky_solve(ndarray::array![[1.0, 2.0], [2.0, 1.0]], Array2::zeros((2, 1))).is_err());
    }

    #[test]
    fn semantic_probe_tracks_the_embedding() {
        let frozen = Frozen::new(1, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scenes: Vec<SceneParams> = (0..400).map(|_| SceneParams::random(&mut rng)).collect();
        let t = frozen.targets(&scenes);
        let probe = SemanticProbe::fit(&frozen, &t.images[..300], &t.embeddings[..300]).unwrap();
        let out = probe.embed(&frozen, &t.images[300..]);
        let truth: Vec<Vec<f64>> = t.embeddings[300..].iter().map(|c| c.to_vec()).collect();
        let hits = two_way_identification(&out, &truth).unwrap();
        let rate = hits.iter().sum::<f64>() / hits.len() as f64;
        assert!(rate > 0.8, "{rate}");
    }
}
