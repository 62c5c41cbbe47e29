//! Filtering defenses over feature representations of target-class training
//! data: spectral signatures, activation clustering, robust-covariance
//! whitening, deep k-NN label conflicts, and the cosine filter against
//! natural backdoor features. Evaluation compares filtered ids against the
//! known poison ids and optionally retrains on the filtered data.

pub mod linalg;

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::PoisonSet;
use crate::datamodel::{ClassDataset, ImageSample};
use crate::error::{Error, Result};
use crate::metrics;
use crate::modelharness::{build_model, train, ClassifierModel, TrainConfig};

/// Feature rows with ids, optional labels, and ground-truth poison flags.
/// The flags exist for evaluation only; no filter reads them.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub features: Array2<f64>,
    pub sample_ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
    pub poison_flags: Option<Vec<bool>>,
}

impl FeatureBank {
    pub fn new(
        features: Array2<f64>,
        sample_ids: Vec<String>,
        labels: Option<Vec<usize>>,
        poison_flags: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = features.dim().0;
        if sample_ids.len() != n {
            return Err(Error::precondition("feature rows and ids misaligned"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::precondition("feature rows and labels misaligned"));
        }
        if poison_flags.as_ref().is_some_and(|f| f.len() != n) {
            return Err(Error::precondition("feature rows and flags misaligned"));
        }
        Ok(FeatureBank {
            features,
            sample_ids,
            labels,
            poison_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.features.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extract features of `samples` under `model` with poison ground truth
    /// taken from `poison_ids`.
    pub fn from_model(
        model: &ClassifierModel,
        samples: &[&ImageSample],
        poison_ids: Option<&BTreeSet<String>>,
    ) -> Self {
        let features = model.extract_features(samples);
        FeatureBank {
            features,
            sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            labels: Some(samples.iter().map(|s| s.label).collect()),
            poison_flags: poison_ids
                .map(|ids| samples.iter().map(|s| ids.contains(&s.sample_id)).collect()),
        }
    }

    /// Persist as a float32 array file plus a JSON sidecar, usable on
    /// external embedding dumps as well.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        let fpath = dir.join("features.f32");
        let (n, m) = self.features.dim();
        let mut bytes = Vec::with_capacity(8 + n * m * 4);
        bytes.extend_from_slice(&(n as u32).to_le_bytes());
        bytes.extend_from_slice(&(m as u32).to_le_bytes());
        for v in self.features.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(&fpath, bytes).map_err(|e| Error::io(fpath, e))?;

        #[derive(Serialize)]
        struct Sidecar<'a> {
            sample_ids: &'a [String],
            labels: &'a Option<Vec<usize>>,
            poison_flags: &'a Option<Vec<bool>>,
        }
        let spath = dir.join("bank.json");
        let raw = serde_json::to_string_pretty(&Sidecar {
            sample_ids: &self.sample_ids,
            labels: &self.labels,
            poison_flags: &self.poison_flags,
        })
        .map_err(|e| Error::Json {
            path: spath.clone(),
            source: e,
        })?;
        std::fs::write(&spath, raw).map_err(|e| Error::io(spath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fpath = dir.join("features.f32");
        let mut f = std::fs::File::open(&fpath).map_err(|e| Error::io(fpath.clone(), e))?;
        let mut header = [0u8; 8];
        f.read_exact(&mut header)
            .map_err(|e| Error::io(fpath.clone(), e))?;
        let n = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes")) as usize;
        let m = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| Error::io(fpath.clone(), e))?;
        if bytes.len() != n * m * 4 {
            return Err(Error::precondition(format!(
                "feature file {} has wrong payload size",
                fpath.display()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let features = Array2::from_shape_vec((n, m), data)
            .map_err(|e| Error::precondition(format!("bad feature shape: {e}")))?;

        #[derive(Deserialize)]
        struct Sidecar {
            sample_ids: Vec<String>,
            labels: Option<Vec<usize>>,
            poison_flags: Option<Vec<bool>>,
        }
        let spath = dir.join("bank.json");
        let raw = std::fs::read_to_string(&spath).map_err(|e| Error::io(spath.clone(), e))?;
        let side: Sidecar = serde_json::from_str(&raw).map_err(|e| Error::Json {
            path: spath,
            source: e,
        })?;
        FeatureBank::new(features, side.sample_ids, side.labels, side.poison_flags)
    }
}

/// Output of one filter run, optionally enriched with evaluation numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub defense: String,
    pub sample_ids: Vec<String>,
    /// Suspicion score per sample (meaning is filter-specific).
    pub scores: Vec<f64>,
    pub filtered_ids: Vec<String>,
    pub non_separable: bool,
    pub ridge_applied: bool,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub post_filter_asr: Option<f64>,
    pub post_filter_acc: Option<f64>,
    pub random_filter_asr: Option<f64>,
    pub random_filter_acc: Option<f64>,
}

impl DefenseReport {
    fn new(defense: &str, sample_ids: Vec<String>, scores: Vec<f64>) -> Self {
        DefenseReport {
            defense: defense.to_string(),
            sample_ids,
            scores,
            filtered_ids: Vec::new(),
            non_separable: false,
            ridge_applied: false,
            recall: None,
            precision: None,
            post_filter_asr: None,
            post_filter_acc: None,
            random_filter_asr: None,
            random_filter_acc: None,
        }
    }
}

/// Indices of the `count` largest scores; ties break toward lower index.
fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(count);
    idx
}

/// Spectral signatures: score each sample by its squared projection onto the
/// top singular direction of the centered feature matrix.
pub fn spectral_signature_filter(bank: &FeatureBank, removal_count: usize) -> Result<DefenseReport> {
    let n = bank.len();
    if n <= removal_count {
        return Err(Error::precondition(format!(
            "cannot remove {removal_count} of {n} samples"
        )));
    }
    let mu = linalg::row_mean(&bank.features);
    let cov = linalg::covariance(&bank.features, &mu);
    let (vals, vecs) = linalg::sym_eigen(&cov);
    let m = cov.dim().0;
    let top_val = vals[m - 1];

    let mut report;
    if top_val < 1e-12 {
        report = DefenseReport::new("spectral_signature", bank.sample_ids.clone(), vec![0.0; n]);
        report.non_separable = true;
        report.filtered_ids = bank.sample_ids.iter().take(removal_count).cloned().collect();
        return Ok(report);
    }
    let u = vecs.column(m - 1);
    let scores: Vec<f64> = bank
        .features
        .outer_iter()
        .map(|row| {
            let p: f64 = row
                .iter()
                .zip(mu.iter())
                .zip(u.iter())
                .map(|((x, m), uk)| (x - m) * uk)
                .sum();
            p * p
        })
        .collect();
    let filtered = top_indices(&scores, removal_count)
        .into_iter()
        .map(|i| bank.sample_ids[i].clone())
        .collect();
    report = DefenseReport::new("spectral_signature", bank.sample_ids.clone(), scores);
    report.filtered_ids = filtered;
    Ok(report)
}

/// Activation clustering: project onto the top 10 principal components,
/// split with 2-means, and flag the smaller cluster when it holds at most
/// 35% of the samples.
pub fn activation_clustering_filter(bank: &FeatureBank) -> Result<DefenseReport> {
    let n = bank.len();
    if n < 4 {
        return Err(Error::precondition("activation clustering needs n >= 4"));
    }
    let mu = linalg::row_mean(&bank.features);
    let cov = linalg::covariance(&bank.features, &mu);
    let (_, vecs) = linalg::sym_eigen(&cov);
    let m = cov.dim().0;
    let dims = m.min(10);
    let mut projected = Array2::<f64>::zeros((n, dims));
    for (i, row) in bank.features.outer_iter().enumerate() {
        for d in 0..dims {
            let col = vecs.column(m - 1 - d);
            projected[[i, d]] = row
                .iter()
                .zip(mu.iter())
                .zip(col.iter())
                .map(|((x, mv), v)| (x - mv) * v)
                .sum();
        }
    }
    let assign = linalg::kmeans2(&projected);
    let size1 = assign.iter().filter(|&&a| a == 1).count();
    let size0 = n - size1;
    let (small, small_size) = if size0 <= size1 { (0, size0) } else { (1, size1) };

    let scores: Vec<f64> = assign.iter().map(|&a| f64::from(a == small)).collect();
    let mut report = DefenseReport::new("activation_clustering", bank.sample_ids.clone(), scores);
    if small_size as f64 <= 0.35 * n as f64 {
        report.filtered_ids = bank
            .sample_ids
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == small)
            .map(|(id, _)| id.clone())
            .collect();
    }
    Ok(report)
}

/// SPECTRE-style filter: robust covariance by iterative trimming, whitening
/// with its inverse square root, then spectral scoring of the whitened data.
pub fn spectre_filter(
    bank: &FeatureBank,
    removal_count: usize,
    robust_fraction: f64,
) -> Result<DefenseReport> {
    spectre_filter_with_rounds(bank, removal_count, robust_fraction, 5)
}

pub fn spectre_filter_with_rounds(
    bank: &FeatureBank,
    removal_count: usize,
    robust_fraction: f64,
    trimming_rounds: usize,
) -> Result<DefenseReport> {
    let n = bank.len();
    if n <= removal_count {
        return Err(Error::precondition(format!(
            "cannot remove {removal_count} of {n} samples"
        )));
    }
    if !(robust_fraction > 0.0 && robust_fraction <= 1.0) {
        return Err(Error::config("robust_fraction must be in (0, 1]"));
    }

    let rows = |subset: &[usize]| -> Array2<f64> {
        let m = bank.features.dim().1;
        let mut out = Array2::<f64>::zeros((subset.len(), m));
        for (r, &i) in subset.iter().enumerate() {
            out.row_mut(r).assign(&bank.features.row(i));
        }
        out
    };

    let mut ridge_applied = false;
    let mut subset: Vec<usize> = (0..n).collect();
    let keep = ((robust_fraction * n as f64).ceil() as usize).clamp(2, n);

    let estimate = |subset: &[usize], ridge_applied: &mut bool| -> (Array1<f64>, Array2<f64>) {
        let data = rows(subset);
        let mu = linalg::row_mean(&data);
        let mut cov = linalg::covariance(&data, &mu);
        let (vals, _) = linalg::sym_eigen(&cov);
        if vals[0] < 1e-9 {
            *ridge_applied = true;
            for i in 0..cov.dim().0 {
                cov[[i, i]] += 1e-6;
            }
        }
        (mu, cov)
    };

    let (mut mu, mut cov) = estimate(&subset, &mut ridge_applied);
    for _ in 0..trimming_rounds {
        let d = linalg::mahalanobis_sq(&bank.features, &mu, &cov, 1e-12);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            d[a].partial_cmp(&d[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        subset = idx[..keep].to_vec();
        subset.sort_unstable();
        let est = estimate(&subset, &mut ridge_applied);
        mu = est.0;
        cov = est.1;
    }

    let w = linalg::inv_sqrt(&cov, 1e-12);
    let m = bank.features.dim().1;
    let mut z = Array2::<f64>::zeros((n, m));
    for (i, row) in bank.features.outer_iter().enumerate() {
        let d = &row - &mu;
        for a in 0..m {
            let mut s = 0.0;
            for b in 0..m {
                s += w[[a, b]] * d[b];
            }
            z[[i, a]] = s;
        }
    }
    let zmu = linalg::row_mean(&z);
    let zcov = linalg::covariance(&z, &zmu);
    let (_, zvecs) = linalg::sym_eigen(&zcov);
    let u = zvecs.column(m - 1);
    let scores: Vec<f64> = z
        .outer_iter()
        .map(|row| {
            let p: f64 = row
                .iter()
                .zip(zmu.iter())
                .zip(u.iter())
                .map(|((x, mv), uk)| (x - mv) * uk)
                .sum();
            p * p
        })
        .collect();

    let filtered = top_indices(&scores, removal_count)
        .into_iter()
        .map(|i| bank.sample_ids[i].clone())
        .collect();
    let mut report = DefenseReport::new("spectre", bank.sample_ids.clone(), scores);
    report.filtered_ids = filtered;
    report.ridge_applied = ridge_applied;
    Ok(report)
}

/// Deep k-NN: flag target-class samples whose k nearest neighbors (over all
/// classes, Euclidean, excluding self) disagree with the target label more
/// than k/2 times.
pub fn deep_knn_filter(
    bank: &FeatureBank,
    k_neighbors: usize,
    target_class: usize,
) -> Result<DefenseReport> {
    let labels = bank
        .labels
        .as_ref()
        .ok_or_else(|| Error::precondition("deep k-NN needs labeled features"))?;
    let n = bank.len();
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::precondition(format!(
            "k = {k_neighbors} must be in [1, n-1] for n = {n}"
        )));
    }

    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut filtered = Vec::new();
    for i in 0..n {
        if labels[i] != target_class {
            continue;
        }
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = bank
                    .features
                    .row(i)
                    .iter()
                    .zip(bank.features.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, j)
            })
            .collect();
        dists.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let conflicts = dists[..k_neighbors]
            .iter()
            .filter(|(_, j)| labels[*j] != target_class)
            .count();
        ids.push(bank.sample_ids[i].clone());
        scores.push(conflicts as f64);
        if conflicts as f64 > k_neighbors as f64 / 2.0 {
            filtered.push(bank.sample_ids[i].clone());
        }
    }
    let mut report = DefenseReport::new("deep_knn", ids, scores);
    report.filtered_ids = filtered;
    Ok(report)
}

/// Natural-backdoor filter: remove the target-class samples whose features
/// lie closest (cosine distance) to the mean trigger-source feature.
/// Scores are distances, so smaller means more suspicious.
pub fn backdoor_feature_filter(
    target_bank: &FeatureBank,
    trigger_features: &Array2<f64>,
    removal_count: usize,
) -> Result<DefenseReport> {
    if trigger_features.dim().0 == 0 {
        return Err(Error::precondition("empty trigger feature set"));
    }
    let n = target_bank.len();
    if n <= removal_count {
        return Err(Error::precondition(format!(
            "cannot remove {removal_count} of {n} samples"
        )));
    }
    let mu = linalg::row_mean(trigger_features);
    let mu_norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if mu_norm < 1e-12 {
        return Err(Error::numeric("trigger feature centroid has zero norm"));
    }
    let mut scores = Vec::with_capacity(n);
    for row in target_bank.features.outer_iter() {
        let x_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if x_norm < 1e-12 {
            return Err(Error::numeric("zero-norm feature vector"));
        }
        let dot: f64 = row.iter().zip(mu.iter()).map(|(a, b)| a * b).sum();
        scores.push(1.0 - dot / (x_norm * mu_norm));
    }
    // smallest distance first
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let filtered = idx[..removal_count]
        .iter()
        .map(|&i| target_bank.sample_ids[i].clone())
        .collect();
    let mut report = DefenseReport::new(
        "backdoor_feature",
        target_bank.sample_ids.clone(),
        scores,
    );
    report.filtered_ids = filtered;
    Ok(report)
}

/// Retraining context for [`defense_eval`].
pub struct RetrainEval<'a> {
    pub train_ds: &'a ClassDataset,
    pub test_ds: &'a ClassDataset,
    pub architecture_id: &'a str,
    pub train_cfg: TrainConfig,
    pub trigger_id: &'a str,
    pub model_seed: u64,
    pub random_filter_seed: u64,
}

/// Score a filter's output against ground-truth poison ids; optionally
/// retrain on the filtered data and re-measure ASR/ACC, alongside a
/// random-filtering baseline of equal count from the target class.
pub fn defense_eval(
    mut report: DefenseReport,
    poisons: &PoisonSet,
    retrain: Option<&RetrainEval<'_>>,
) -> Result<DefenseReport> {
    let poison_ids: BTreeSet<&str> = poisons.deltas.iter().map(|d| d.sample_id.as_str()).collect();
    let filtered: BTreeSet<&str> = report.filtered_ids.iter().map(String::as_str).collect();
    let tp = filtered.intersection(&poison_ids).count();
    if !poison_ids.is_empty() {
        report.recall = Some(tp as f64 / poison_ids.len() as f64);
    }
    if !filtered.is_empty() {
        report.precision = Some(tp as f64 / filtered.len() as f64);
    }

    if let Some(ctx) = retrain {
        let (asr_v, acc_v) = retrain_and_eval(ctx, poisons, &report.filtered_ids)?;
        report.post_filter_asr = Some(asr_v);
        report.post_filter_acc = Some(acc_v);

        // random baseline: same count, drawn from target-class training ids
        let pool: Vec<String> = ctx
            .train_ds
            .clean_class(poisons.pair.target)
            .iter()
            .map(|s| s.sample_id.clone())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.random_filter_seed);
        let mut shuffled = pool;
        shuffled.shuffle(&mut rng);
        let random_ids: Vec<String> = shuffled
            .into_iter()
            .take(report.filtered_ids.len())
            .collect();
        let (rasr, racc) = retrain_and_eval(ctx, poisons, &random_ids)?;
        report.random_filter_asr = Some(rasr);
        report.random_filter_acc = Some(racc);
    }
    Ok(report)
}

fn retrain_and_eval(
    ctx: &RetrainEval<'_>,
    poisons: &PoisonSet,
    removed_ids: &[String],
) -> Result<(f64, f64)> {
    let removed: BTreeSet<String> = removed_ids.iter().cloned().collect();
    let filtered_ds = ctx.train_ds.remove_clean_samples(&removed)?;
    let kept_poisons = PoisonSet {
        deltas: poisons
            .deltas
            .iter()
            .filter(|d| !removed.contains(&d.sample_id))
            .cloned()
            .collect(),
        ..poisons.clone()
    };
    let norm = filtered_ds.compute_normalization()?;
    let model = build_model(
        ctx.architecture_id,
        filtered_ds.classes(),
        norm,
        ctx.model_seed,
        None,
    )?;
    let poisons_opt = (!kept_poisons.deltas.is_empty()).then_some(&kept_poisons);
    let (trained, _) = train(model, &filtered_ds, poisons_opt, &ctx.train_cfg)?;

    let held_out: Vec<&ImageSample> = ctx
        .test_ds
        .triggered_set(poisons.pair.source, ctx.trigger_id)
        .iter()
        .collect();
    let asr_v = metrics::asr(&trained, &held_out, poisons.pair)?;
    let clean_test: Vec<&ImageSample> = ctx.test_ds.iter_clean().collect();
    let acc_v = metrics::acc(&trained, &clean_test)?;
    Ok((asr_v, acc_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// n-row bank: `clean` rows ~ N(0, I), `plants` rows shifted by
    /// `shift` along the first axis, all in `dim` dimensions.
    fn planted_bank(clean: usize, plants: usize, dim: usize, shift: f64, seed: u64) -> FeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = clean + plants;
        let mut x = Array2::<f64>::zeros((n, dim));
        for i in 0..n {
            for d in 0..dim {
                x[[i, d]] = normal.sample(&mut rng);
            }
            if i >= clean {
                x[[i, 0]] += shift;
            }
        }
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let flags = (0..n).map(|i| i >= clean).collect();
        FeatureBank::new(x, ids, None, Some(flags)).unwrap()
    }

    fn recall_of(report: &DefenseReport, bank: &FeatureBank) -> f64 {
        let flags = bank.poison_flags.as_ref().unwrap();
        let planted: BTreeSet<&str> = bank
            .sample_ids
            .iter()
            .zip(flags)
            .filter(|(_, &f)| f)
            .map(|(id, _)| id.as_str())
            .collect();
        let caught = report
            .filtered_ids
            .iter()
            .filter(|id| planted.contains(id.as_str()))
            .count();
        caught as f64 / planted.len() as f64
    }

    #[test]
    fn spectral_signature_catches_plants() {
        let bank = planted_bank(90, 10, 16, 5.0, 1);
        let report = spectral_signature_filter(&bank, 10).unwrap();
        assert_eq!(recall_of(&report, &bank), 1.0);
        assert!(!report.non_separable);
    }

    #[test]
    fn spectral_signature_degenerate_flags_non_separability() {
        let x = Array2::<f64>::from_elem((20, 8), 0.3);
        let ids = (0..20).map(|i| format!("s{i}")).collect();
        let bank = FeatureBank::new(x, ids, None, None).unwrap();
        let report = spectral_signature_filter(&bank, 3).unwrap();
        assert!(report.non_separable);
        assert!(report.scores.iter().all(|&s| s == 0.0));
        assert_eq!(report.filtered_ids.len(), 3);
    }

    #[test]
    fn spectral_signature_centering_invariance() {
        let bank = planted_bank(40, 5, 8, 4.0, 3);
        let report = spectral_signature_filter(&bank, 5).unwrap();
        let mut shifted = bank.clone();
        for mut row in shifted.features.outer_iter_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v += 3.0 + i as f64;
            }
        }
        let report2 = spectral_signature_filter(&shifted, 5).unwrap();
        for (a, b) in report.scores.iter().zip(&report2.scores) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn activation_clustering_flags_small_blob() {
        let bank = planted_bank(90, 10, 16, 8.0, 5);
        let report = activation_clustering_filter(&bank).unwrap();
        assert_eq!(recall_of(&report, &bank), 1.0);
        assert_eq!(report.filtered_ids.len(), 10);
    }

    #[test]
    fn activation_clustering_single_blob_flags_nothing() {
        let bank = planted_bank(100, 0, 16, 0.0, 7);
        let report = activation_clustering_filter(&bank).unwrap();
        // one isotropic blob splits near 50/50, above the 35% bound
        assert!(report.filtered_ids.is_empty());
    }

    #[test]
    fn spectre_at_least_matches_spectral_signature_on_plants() {
        let bank = planted_bank(90, 10, 16, 5.0, 9);
        let ss = spectral_signature_filter(&bank, 10).unwrap();
        let sp = spectre_filter(&bank, 10, 0.8).unwrap();
        assert!(recall_of(&sp, &bank) >= recall_of(&ss, &bank));
    }

    #[test]
    fn spectre_without_trimming_reduces_to_whitened_spectral_signature() {
        let bank = planted_bank(30, 5, 6, 3.0, 11);
        let sp = spectre_filter_with_rounds(&bank, 5, 1.0, 0).unwrap();

        // oracle: whiten with the full-data covariance, then run the
        // spectral-signature filter on the whitened rows
        let mu = linalg::row_mean(&bank.features);
        let cov = linalg::covariance(&bank.features, &mu);
        let w = linalg::inv_sqrt(&cov, 1e-12);
        let (n, m) = bank.features.dim();
        let mut z = Array2::<f64>::zeros((n, m));
        for (i, row) in bank.features.outer_iter().enumerate() {
            let d = &row - &mu;
            for a in 0..m {
                z[[i, a]] = (0..m).map(|b| w[[a, b]] * d[b]).sum();
            }
        }
        let zbank = FeatureBank::new(z, bank.sample_ids.clone(), None, None).unwrap();
        let ss = spectral_signature_filter(&zbank, 5).unwrap();

        let rank = |scores: &[f64]| {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            idx
        };
        assert_eq!(rank(&sp.scores), rank(&ss.scores));
    }

    #[test]
    fn spectre_fixed_count_even_without_plants() {
        let bank = planted_bank(50, 0, 8, 0.0, 13);
        let report = spectre_filter(&bank, 7, 0.9).unwrap();
        assert_eq!(report.filtered_ids.len(), 7);
    }

    #[test]
    fn deep_knn_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let n = rng.gen_range(20..=60);
            let k = rng.gen_range(1..=7);
            let dim = 5;
            let mut x = Array2::<f64>::zeros((n, dim));
            for v in x.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let bank =
                FeatureBank::new(x.clone(), ids.clone(), Some(labels.clone()), None).unwrap();
            let report = deep_knn_filter(&bank, k, 0).unwrap();

            // oracle: full distance matrix and sorted scan
            let mut oracle_scores = Vec::new();
            let mut oracle_flagged = Vec::new();
            for i in 0..n {
                if labels[i] != 0 {
                    continue;
                }
                let mut d: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let dist: f64 = (0..dim)
                            .map(|t| (x[[i, t]] - x[[j, t]]) * (x[[i, t]] - x[[j, t]]))
                            .sum();
                        (dist, j)
                    })
                    .collect();
                d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let conflicts = d[..k].iter().filter(|(_, j)| labels[*j] != 0).count();
                oracle_scores.push(conflicts as f64);
                if conflicts as f64 > k as f64 / 2.0 {
                    oracle_flagged.push(ids[i].clone());
                }
            }
            assert_eq!(report.scores, oracle_scores, "trial {trial}");
            assert_eq!(report.filtered_ids, oracle_flagged, "trial {trial}");
        }
    }

    #[test]
    fn deep_knn_handcrafted_five_points() {
        // point s0 (label 0) sits between two label-1 points; its two
        // nearest neighbors disagree, so it is flagged at k = 2
        let rows = vec![
            [0.0, 0.0],   // s0 label 0
            [0.1, 0.0],   // s1 label 1
            [-0.1, 0.0],  // s2 label 1
            [5.0, 0.0],   // s3 label 0
            [5.1, 0.0],   // s4 label 0
        ];
        let x = Array2::from_shape_vec((5, 2), rows.into_iter().flatten().collect()).unwrap();
        let ids: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let labels = vec![0usize, 1, 1, 0, 0];
        let bank = FeatureBank::new(x, ids, Some(labels), None).unwrap();
        let report = deep_knn_filter(&bank, 2, 0).unwrap();
        assert_eq!(report.sample_ids, vec!["s0", "s3", "s4"]);
        assert_eq!(report.scores, vec![2.0, 0.0, 0.0]);
        assert_eq!(report.filtered_ids, vec!["s0"]);
    }

    #[test]
    fn deep_knn_rejects_bad_k() {
        let bank = planted_bank(10, 0, 4, 0.0, 19);
        let labeled = FeatureBank::new(
            bank.features.clone(),
            bank.sample_ids.clone(),
            Some(vec![0; 10]),
            None,
        )
        .unwrap();
        assert!(deep_knn_filter(&labeled, 10, 0).is_err());
        assert!(deep_knn_filter(&labeled, 0, 0).is_err());
        assert!(deep_knn_filter(&bank, 3, 0).is_err()); // unlabeled
    }

    #[test]
    fn backdoor_filter_cosine_extremes() {
        let mu_rows = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let targets = Array2::from_shape_vec(
            (3, 3),
            vec![
                1.0, 0.0, 0.0, // equal to mu -> dist 0
                0.0, 1.0, 0.0, // orthogonal -> dist 1
                -1.0, 0.0, 0.0, // opposite -> dist 2
            ],
        )
        .unwrap();
        let ids = vec!["eq".to_string(), "orth".to_string(), "opp".to_string()];
        let bank = FeatureBank::new(targets, ids, None, None).unwrap();
        let report = backdoor_feature_filter(&bank, &mu_rows, 1).unwrap();
        assert!((report.scores[0] - 0.0).abs() < 1e-12);
        assert!((report.scores[1] - 1.0).abs() < 1e-12);
        assert!((report.scores[2] - 2.0).abs() < 1e-12);
        assert_eq!(report.filtered_ids, vec!["eq"]);
    }

    #[test]
    fn backdoor_filter_zero_norm_errors() {
        let mu_rows = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let targets = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let bank =
            FeatureBank::new(targets, vec!["a".into(), "b".into()], None, None).unwrap();
        assert!(backdoor_feature_filter(&bank, &mu_rows, 1).is_err());
    }

    #[test]
    fn filters_are_permutation_equivariant() {
        let bank = planted_bank(30, 5, 8, 4.0, 23);
        let n = bank.len();
        // reverse-order permutation
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut px = Array2::<f64>::zeros(bank.features.dim());
        let mut pids = Vec::with_capacity(n);
        for (new, &old) in perm.iter().enumerate() {
            px.row_mut(new).assign(&bank.features.row(old));
            pids.push(bank.sample_ids[old].clone());
        }
        let pbank = FeatureBank::new(px, pids, None, None).unwrap();

        let a = spectral_signature_filter(&bank, 5).unwrap();
        let b = spectral_signature_filter(&pbank, 5).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((b.scores[new] - a.scores[old]).abs() < 1e-9);
        }

        let a = spectre_filter(&bank, 5, 0.8).unwrap();
        let b = spectre_filter(&pbank, 5, 0.8).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((b.scores[new] - a.scores[old]).abs() < 1e-9);
        }
    }

    #[test]
    fn defense_eval_trivial_recall_and_precision() {
        use crate::attacks::{PoisonDelta, PoisonSet};
        use ndarray::Array3;

        let mut ps = PoisonSet::empty_for_tests();
        for id in ["p0", "p1"] {
            ps.deltas.push(PoisonDelta {
                sample_id: id.to_string(),
                delta: Array3::zeros((2, 2, 3)),
                final_objective: 0.0,
                iterations_run: 0,
            });
        }
        let mut report = DefenseReport::new(
            "stub",
            vec!["p0".into(), "p1".into(), "c0".into()],
            vec![1.0, 1.0, 0.0],
        );
        report.filtered_ids = vec!["p0".into(), "p1".into()];
        let out = defense_eval(report, &ps, None).unwrap();
        assert_eq!(out.recall, Some(1.0));
        assert_eq!(out.precision, Some(1.0));
    }

    #[test]
    fn feature_bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = planted_bank(6, 2, 4, 3.0, 29);
        bank.save(dir.path()).unwrap();
        let loaded = FeatureBank::load(dir.path()).unwrap();
        assert_eq!(loaded.sample_ids, bank.sample_ids);
        assert_eq!(loaded.poison_flags, bank.poison_flags);
        for (a, b) in loaded.features.iter().zip(bank.features.iter()) {
            assert!((a - b).abs() < 1e-6); // f32 storage
        }
    }
}
