//! Threshold-free OOD metrics, OOD subsampling and score histograms.
//!
//! Scores follow one convention throughout: higher means more
//! in-distribution, and a sample is accepted as ID when `score >= t`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::FeatureDataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::oodscore::{score_dataset, ClassPrototypes};
use crate::rng;

pub const DEFAULT_OOD_RATIO: f64 = 0.2;
pub const DEFAULT_TPR: f64 = 0.95;
pub const HISTOGRAM_BINS: usize = 100;

fn check_sets(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid(format!(
            "metric needs non-empty score sets, got {} ID and {} OOD",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Probability that an ID score beats an OOD score, ties counting one half.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let ood = sorted(ood);
    let mut wins = 0.0;
    for &s in id {
        let below = ood.partition_point(|&o| o < s);
        let tied = ood.partition_point(|&o| o <= s) - below;
        wins += below as f64 + 0.5 * tied as f64;
    }
    Ok(wins / (id.len() as f64 * ood.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positive {
    /// ID samples are positives, ranked by high scores.
    Id,
    /// OOD samples are positives, ranked by low scores.
    Ood,
}

/// Average precision: recall increments weighted by the best precision at
/// that recall or beyond, with tied scores forming a single threshold.
pub fn aupr(id: &[f64], ood: &[f64], positive: Positive) -> Result<f64> {
    check_sets(id, ood)?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        Positive::Id => (id.to_vec(), ood.to_vec()),
        Positive::Ood => (ood.iter().map(|v| -v).collect(), id.iter().map(|v| -v).collect()),
    };
    let mut pooled: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = pos.len() as f64;
    // (recall, precision) at each distinct threshold, descending thresholds
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == t {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / n_pos, tp as f64 / (tp + fp) as f64));
    }
    // best precision at this recall or beyond
    let mut best_right = vec![0.0f64; curve.len()];
    let mut run = 0.0f64;
    for (k, &(_, p)) in curve.iter().enumerate().rev() {
        run = run.max(p);
        best_right[k] = run;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        area += (r - prev_recall) * best_right[k];
        prev_recall = r;
    }
    Ok(area)
}

/// Fraction of OOD accepted at the largest threshold that accepts at least
/// `tpr_target` of the ID scores.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check_sets(id, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::invalid(format!("TPR target must lie in (0, 1], got {tpr_target}")));
    }
    let mut desc = id.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let n = id.len() as f64;
    let mut threshold = desc[desc.len() - 1];
    let mut i = 0;
    while i < desc.len() {
        let t = desc[i];
        while i < desc.len() && desc[i] == t {
            i += 1;
        }
        if i as f64 / n >= tpr_target {
            threshold = t;
            break;
        }
    }
    let accepted = ood.iter().filter(|&&o| o >= threshold).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Seeded sample of `floor(ratio * id_count)` rows drawn without
/// replacement; if the set is too small every row is kept and a warning
/// is returned.
pub fn subsample_ood(
    ood: &FeatureDataset,
    id_count: usize,
    ratio: f64,
    seed: u64,
) -> Result<(FeatureDataset, Option<String>)> {
    subsample_with(ood, id_count, ratio, &mut rng::substream(seed, rng::SUBSAMPLE))
}

fn subsample_with(
    ood: &FeatureDataset,
    id_count: usize,
    ratio: f64,
    rng: &mut rng::Rng,
) -> Result<(FeatureDataset, Option<String>)> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::invalid(format!("subsample ratio must be positive, got {ratio}")));
    }
    let want = (ratio * id_count as f64).floor() as usize;
    if want >= ood.len() {
        let warning = (want > ood.len()).then(|| {
            format!("requested {want} OOD rows but only {} are available; using all", ood.len())
        });
        return Ok((ood.clone(), warning));
    }
    let idx = rand::seq::index::sample(rng, ood.len(), want).into_vec();
    Ok((ood.subset(&idx), None))
}

/// Counts per uniform bin over the pooled score range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub id_counts: Vec<u64>,
    pub ood_counts: Vec<u64>,
}

pub fn histogram(id: &[f64], ood: &[f64], bins: usize) -> Result<Histogram> {
    check_sets(id, ood)?;
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let lo = id.iter().chain(ood).copied().fold(f64::INFINITY, f64::min);
    let hi = id.iter().chain(ood).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + width * b as f64 })
        .collect();
    let bin = |v: f64| {
        if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let mut h = Histogram {
        edges,
        id_counts: vec![0; bins],
        ood_counts: vec![0; bins],
    };
    for &v in id {
        h.id_counts[bin(v)] += 1;
    }
    for &v in ood {
        h.ood_counts[bin(v)] += 1;
    }
    Ok(h)
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,id_count,ood_count\n");
        for b in 0..self.id_counts.len() {
            let _ = writeln!(
                out,
                "{:e},{:e},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.id_counts[b],
                self.ood_counts[b]
            );
        }
        out
    }
}

/// The four OOD metrics for one pairing of ID and OOD scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub aupr_s: f64,
    pub aupr_e: f64,
    pub fpr95: f64,
}

pub fn compute_metrics(id: &[f64], ood: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        auroc: auroc(id, ood)?,
        aupr_s: aupr(id, ood, Positive::Id)?,
        aupr_e: aupr(id, ood, Positive::Ood)?,
        fpr95: fpr_at_tpr(id, ood, DEFAULT_TPR)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub ratio: f64,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            ratio: DEFAULT_OOD_RATIO,
            bins: HISTOGRAM_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ood_set: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub id_count: usize,
    pub ood_count: usize,
    pub seed: u64,
    pub ratio: f64,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSet {
    pub ood_set: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<EvalReport>,
    /// Unweighted mean over `reports`; absent when every set was skipped.
    pub mean: Option<EvalReport>,
    pub skipped: Vec<SkippedSet>,
}

/// Scores the ID set once, then each OOD set subsampled with its own stream.
pub fn evaluate_suite(
    model: &FlowModel,
    protos: &ClassPrototypes,
    id_test: &FeatureDataset,
    ood_sets: &[(String, FeatureDataset)],
    cfg: &EvalConfig,
) -> Result<SuiteReport> {
    let id_scores: Vec<f64> = score_dataset(model, protos, id_test)?.into_iter().map(|(s, _)| s).collect();
    let results: Vec<Result<EvalReport>> = ood_sets
        .par_iter()
        .enumerate()
        .map(|(i, (name, ood))| {
            if ood.is_empty() {
                return Err(Error::invalid(format!("OOD set {name} is empty")));
            }
            let mut rng = rng::indexed_substream(cfg.seed, rng::SUBSAMPLE, i as u64);
            let (sample, warning) = subsample_with(ood, id_test.len(), cfg.ratio, &mut rng)?;
            if sample.is_empty() {
                return Err(Error::invalid(format!("OOD subsample of {name} is empty")));
            }
            let ood_scores: Vec<f64> = score_dataset(model, protos, &sample)?.into_iter().map(|(s, _)| s).collect();
            Ok(EvalReport {
                ood_set: name.clone(),
                metrics: compute_metrics(&id_scores, &ood_scores)?,
                id_count: id_scores.len(),
                ood_count: ood_scores.len(),
                seed: cfg.seed,
                ratio: cfg.ratio,
                warnings: warning.into_iter().collect(),
                histogram: Some(histogram(&id_scores, &ood_scores, cfg.bins)?),
            })
        })
        .collect();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for ((name, _), r) in ood_sets.iter().zip(results) {
        match r {
            Ok(r) => reports.push(r),
            Err(e) if e.is_numeric() => return Err(e),
            Err(e) => {
                log::warn!("skipping OOD set {name}: {e}");
                skipped.push(SkippedSet {
                    ood_set: name.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let mean = mean_report(&reports, cfg);
    Ok(SuiteReport { reports, mean, skipped })
}

fn mean_report(reports: &[EvalReport], cfg: &EvalConfig) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&Metrics) -> f64| reports.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    Some(EvalReport {
        ood_set: "mean".into(),
        metrics: Metrics {
            auroc: avg(|m| m.auroc),
            aupr_s: avg(|m| m.aupr_s),
            aupr_e: avg(|m| m.aupr_e),
            fpr95: avg(|m| m.fpr95),
        },
        id_count: reports[0].id_count,
        ood_count: reports.iter().map(|r| r.ood_count).sum(),
        seed: cfg.seed,
        ratio: cfg.ratio,
        warnings: reports.iter().flat_map(|r| r.warnings.iter().cloned()).collect(),
        histogram: None,
    })
}
