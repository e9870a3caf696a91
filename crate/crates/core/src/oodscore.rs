//! Class prototypes and likelihood-based OOD scoring.

use std::path::Path;

use rayon::prelude::*;

use crate::container::{self, Reader, Writer};
use crate::datasets::{FeatureDataset, UNLABELED};
use crate::error::{Error, Result};
use crate::flow::{FlowBatch, FlowModel};
use crate::loss::HALF_LOG_2PI;
use crate::nd::Tensor;

pub const MAGIC: &[u8; 4] = b"FCPT";
pub const VERSION: u32 = 1;

/// Rows scored per forward pass.
const SCORE_CHUNK: usize = 256;

/// Per-class Gaussians `N(mu_c, sigma_c)` in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub d: usize,
    pub class_ids: Vec<u32>,
    /// `k` rows of length `d`.
    pub mu: Vec<Vec<f64>>,
    /// `k` rows of strictly positive scales.
    pub sigma: Vec<Vec<f64>>,
    pub counts: Vec<u32>,
    /// Class ids declared by the dataset but absent from it.
    pub omitted: Vec<u32>,
}

impl ClassPrototypes {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let k = self.class_ids.len();
        if self.mu.len() != k || self.sigma.len() != k || self.counts.len() != k {
            return Err(Error::invalid("prototype tables have inconsistent lengths"));
        }
        for (c, (m, s)) in self.mu.iter().zip(&self.sigma).enumerate() {
            if m.len() != self.d || s.len() != self.d {
                return Err(Error::invalid(format!("prototype {c} has the wrong dimension")));
            }
            if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("prototype {c} has a non-positive or non-finite entry")));
            }
        }
        Ok(())
    }

    /// Log-density of `z` under every prototype.
    pub fn log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(mu, sigma)| {
                z.iter()
                    .zip(mu)
                    .zip(sigma)
                    .map(|((&zk, &mk), &sk)| {
                        let r = (zk - mk) / sk;
                        -sk.ln() - HALF_LOG_2PI - 0.5 * r * r
                    })
                    .sum()
            })
            .collect()
    }

    /// Highest log-density and the index (not class id) attaining it; ties
    /// resolve to the smallest index.
    pub fn best(&self, z: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, ll) in self.log_densities(z).into_iter().enumerate() {
            if ll > best.0 {
                best = (ll, c);
            }
        }
        best
    }
}

/// Flow outputs for every row, computed in fixed-size chunks in parallel.
pub fn forward_rows(model: &FlowModel, data: &FeatureDataset) -> Result<Vec<FlowBatch>> {
    check_dim(model, data.dim)?;
    let starts: Vec<usize> = (0..data.len()).step_by(SCORE_CHUNK).collect();
    starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + SCORE_CHUNK).min(data.len())).collect();
            model.forward_batch(&data.gather(&idx))
        })
        .collect()
}

fn check_dim(model: &FlowModel, d: usize) -> Result<()> {
    if d != model.d {
        return Err(Error::invalid(format!("feature dimension {d} does not match model dimension {}", model.d)));
    }
    Ok(())
}

/// Per-class arithmetic means of per-sample `(mu, sigma)` rows, summed in
/// input order. Unlabeled samples are skipped.
pub fn aggregate_prototypes<'a>(
    d: usize,
    num_classes: usize,
    samples: impl IntoIterator<Item = (u32, &'a [f64], &'a [f64])>,
) -> Result<ClassPrototypes> {
    let mut mu_sum = vec![vec![0.0; d]; num_classes];
    let mut sigma_sum = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0u32; num_classes];
    for (label, mu, sigma) in samples {
        if label == UNLABELED {
            continue;
        }
        let c = label as usize;
        if c >= num_classes || mu.len() != d || sigma.len() != d {
            return Err(Error::invalid(format!("sample of class {label} does not fit {num_classes} classes of dimension {d}")));
        }
        counts[c] += 1;
        for (acc, &m) in mu_sum[c].iter_mut().zip(mu) {
            *acc += m;
        }
        for (acc, &s) in sigma_sum[c].iter_mut().zip(sigma) {
            *acc += s;
        }
    }
    let mut out = ClassPrototypes {
        d,
        class_ids: Vec::new(),
        mu: Vec::new(),
        sigma: Vec::new(),
        counts: Vec::new(),
        omitted: Vec::new(),
    };
    for c in 0..num_classes {
        if counts[c] == 0 {
            log::warn!("class {c} has no rows; prototype omitted");
            out.omitted.push(c as u32);
            continue;
        }
        let n = f64::from(counts[c]);
        out.class_ids.push(c as u32);
        out.mu.push(mu_sum[c].iter().map(|s| s / n).collect());
        out.sigma.push(sigma_sum[c].iter().map(|s| s / n).collect());
        out.counts.push(counts[c]);
    }
    if out.is_empty() {
        return Err(Error::invalid("dataset has no labeled rows"));
    }
    Ok(out)
}

/// Prototypes from the prior head's `mu` and `sigma` over `data`; `sigma`
/// is averaged in the linear domain.
pub fn compute_prototypes(model: &FlowModel, data: &FeatureDataset) -> Result<ClassPrototypes> {
    if data.is_empty() {
        return Err(Error::invalid("cannot compute prototypes from an empty dataset"));
    }
    let batches = forward_rows(model, data)?;
    let mut rows = Vec::with_capacity(data.len());
    for b in &batches {
        let sigma: Vec<f64> = b.log_sigma.data().iter().map(|ls| ls.exp()).collect();
        for i in 0..b.len() {
            rows.push((b.mu.row(i).to_vec(), sigma[i * model.d..(i + 1) * model.d].to_vec()));
        }
    }
    aggregate_prototypes(
        model.d,
        data.num_classes,
        rows.iter()
            .zip(&data.labels)
            .map(|((m, s), &l)| (l, m.as_slice(), s.as_slice())),
    )
}

/// Highest class log-likelihood of `x` and the class id attaining it.
pub fn ood_score(model: &FlowModel, protos: &ClassPrototypes, x: &[f64]) -> Result<(f64, u32)> {
    check_dim(model, x.len())?;
    check_dim(model, protos.d)?;
    let out = crate::flow::flow_forward(model, x)?;
    let (score, c) = protos.best(&out.z_flow);
    Ok((score, protos.class_ids[c]))
}

pub fn classify(model: &FlowModel, protos: &ClassPrototypes, x: &[f64]) -> Result<u32> {
    ood_score(model, protos, x).map(|(_, c)| c)
}

/// `(score, class id)` for every row of `data`, in row order.
pub fn score_dataset(model: &FlowModel, protos: &ClassPrototypes, data: &FeatureDataset) -> Result<Vec<(f64, u32)>> {
    check_dim(model, protos.d)?;
    let batches = forward_rows(model, data)?;
    Ok(batches
        .par_iter()
        .flat_map_iter(|b| {
            (0..b.len()).map(move |i| {
                let (s, c) = protos.best(b.z.row(i));
                (s, protos.class_ids[c])
            })
        })
        .collect())
}

/// Latent codes of every row as a `[n, d]` matrix.
pub fn embed(model: &FlowModel, data: &FeatureDataset) -> Result<Tensor> {
    let batches = forward_rows(model, data)?;
    let mut z = Vec::with_capacity(data.len() * model.d);
    for b in batches {
        z.extend(b.z.into_data());
    }
    Tensor::new(vec![data.len(), model.d], z)
}

/// Bayes-rule accuracy over labelled rows.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub labeled: usize,
    pub unlabeled: usize,
}

pub fn accuracy(model: &FlowModel, protos: &ClassPrototypes, data: &FeatureDataset) -> Result<Accuracy> {
    let labeled: Vec<usize> = (0..data.len()).filter(|&i| data.is_labeled(i)).collect();
    if labeled.is_empty() {
        return Err(Error::invalid("no labeled rows"));
    }
    let scored = score_dataset(model, protos, &data.subset(&labeled))?;
    let correct = scored
        .iter()
        .zip(&labeled)
        .filter(|((_, c), &i)| *c == data.labels[i])
        .count();
    Ok(Accuracy {
        accuracy: correct as f64 / labeled.len() as f64,
        correct,
        labeled: labeled.len(),
        unlabeled: data.len() - labeled.len(),
    })
}

pub fn encode_prototypes(p: &ClassPrototypes) -> Result<Vec<u8>> {
    p.validate()?;
    let mut w = Writer::new(MAGIC);
    w.u32(VERSION)
        .u32(container::len_u32(p.len(), "k")?)
        .u32(container::len_u32(p.d, "d")?);
    for c in 0..p.len() {
        w.u32(p.class_ids[c]);
        for &v in &p.mu[c] {
            w.f64(v);
        }
        for &v in &p.sigma[c] {
            w.f64(v);
        }
        w.u32(p.counts[c]);
    }
    Ok(w.finish())
}

pub fn decode_prototypes(bytes: &[u8]) -> Result<ClassPrototypes> {
    let mut r = Reader::open(bytes, MAGIC)?;
    r.expect_version(VERSION)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut p = ClassPrototypes {
        d,
        class_ids: Vec::new(),
        mu: Vec::new(),
        sigma: Vec::new(),
        counts: Vec::new(),
        omitted: Vec::new(),
    };
    for _ in 0..k {
        p.class_ids.push(r.u32()?);
        p.mu.push((0..d).map(|_| r.f64()).collect::<Result<_>>()?);
        let at = r.offset();
        let sigma: Vec<f64> = (0..d).map(|_| r.f64()).collect::<Result<_>>()?;
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(r.fail(at, "non-positive sigma"));
        }
        p.sigma.push(sigma);
        p.counts.push(r.u32()?);
    }
    r.finish()?;
    p.validate()?;
    Ok(p)
}

pub fn save_prototypes(p: &ClassPrototypes, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &encode_prototypes(p)?)
}

pub fn load_prototypes(path: impl AsRef<Path>) -> Result<ClassPrototypes> {
    decode_prototypes(&container::read_file(path.as_ref())?)
}
