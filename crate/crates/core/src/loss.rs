//! Training objective: flow negative log-likelihood plus a supervised
//! contrastive term whose similarity is a product of Gaussian likelihoods.
//!
//! For an anchor `i` with prior `N_i = N(mu_i, sigma_i)` the similarity to a
//! partner `j` is
//!
//! ```text
//! g_ij = exp(clamp(tau1 * (log N_i(z_i) / d + log N_i(z_j) / d), -E, E))
//! ```
//!
//! and the contrastive loss is the supervised InfoNCE sum
//! `sum_i -1/|P(i)| sum_{p in P(i)} log softmax_{a != i}(g_ia / tau2)[p]`.
//! Anchors without positives in the batch contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowBatch, FlowNodes};
use crate::nd::{Bindings, Graph, NodeId, Tensor};

pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub lambda: f64,
    pub exponent_clamp: f64,
    /// When false the contrastive term is dropped and only `lambda * L_flow` is optimised.
    pub contrastive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau1: 1.5,
            tau2: 0.1,
            lambda: 0.07,
            exponent_clamp: 40.0,
            contrastive: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau1", self.tau1)?;
        positive("tau2", self.tau2)?;
        positive("exponent_clamp", self.exponent_clamp)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// A labelled batch of flow outputs. Matrices are `[B, d]`, `logdet` is `[B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLatent {
    pub z: Tensor,
    pub logdet: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub labels: Vec<usize>,
}

impl BatchLatent {
    pub fn new(z: Tensor, logdet: Tensor, mu: Tensor, log_sigma: Tensor, labels: Vec<usize>) -> Result<Self> {
        let b = labels.len();
        let [rows, _] = *z.shape() else {
            return Err(Error::invalid(format!("z must be a matrix, got {:?}", z.shape())));
        };
        if b == 0 || rows != b {
            return Err(Error::invalid(format!("batch of {rows} rows with {b} labels")));
        }
        if mu.shape() != z.shape() || log_sigma.shape() != z.shape() || logdet.shape() != [b] {
            return Err(Error::invalid(format!(
                "inconsistent shapes z {:?}, mu {:?}, log_sigma {:?}, logdet {:?}",
                z.shape(),
                mu.shape(),
                log_sigma.shape(),
                logdet.shape()
            )));
        }
        Ok(BatchLatent {
            z,
            logdet,
            mu,
            log_sigma,
            labels,
        })
    }

    pub fn from_flow(batch: FlowBatch, labels: Vec<usize>) -> Result<Self> {
        Self::new(batch.z, batch.logdet, batch.mu, batch.log_sigma, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }
}

/// Diagonal Gaussian log-density `sum_k -log sigma_k - log(2 pi)/2 - ((z_k - mu_k)/sigma_k)^2 / 2`.
pub fn gaussian_logpdf(z: &[f64], mu: &[f64], log_sigma: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != log_sigma.len() {
        return Err(Error::invalid(format!(
            "length mismatch: z {}, mu {}, log_sigma {}",
            z.len(),
            mu.len(),
            log_sigma.len()
        )));
    }
    let mut acc = 0.0;
    for ((&zk, &mk), &lk) in z.iter().zip(mu).zip(log_sigma) {
        let r = (zk - mk) * (-lk).exp();
        acc += -lk - HALF_LOG_2PI - 0.5 * r * r;
    }
    if !acc.is_finite() {
        return Err(Error::Numeric("non-finite Gaussian log-density".into()));
    }
    Ok(acc)
}

/// Similarity `g_ij` from two log-likelihoods under the anchor's distribution.
pub fn similarity_logit(ll_i: f64, ll_j: f64, cfg: &LossConfig, d: usize) -> f64 {
    let d = d as f64;
    let e = cfg.exponent_clamp;
    (cfg.tau1 * (ll_i / d + ll_j / d)).clamp(-e, e).exp()
}

/// Graph nodes of the three loss values (all scalars).
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub l_con: NodeId,
    pub l_flow: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub l_con: f64,
    pub l_flow: f64,
}

/// `[B]` node of per-row log-densities `log N_i(z_i)`.
fn build_self_loglik(g: &mut Graph, n: &FlowNodes) -> NodeId {
    let diff = g.sub(n.z, n.mu);
    let neg_ls = g.neg(n.log_sigma);
    let inv_sigma = g.exp(neg_ls);
    let r = g.mul(diff, inv_sigma);
    let sq = g.square(r);
    let half_sq = g.scale(sq, 0.5);
    let t = g.add(n.log_sigma, half_sq);
    let t = g.neg(t);
    let t = g.offset(t, -HALF_LOG_2PI);
    g.sum_last(t)
}

/// Batch-mean negative log-likelihood `-(log N_i(z_i) + logdet_i)`.
fn build_flow_nll(g: &mut Graph, n: &FlowNodes, self_ll: NodeId) -> NodeId {
    let ll = g.add(self_ll, n.logdet);
    let nll = g.neg(ll);
    g.mean(nll)
}

/// `[B, B]` matrix `Q_ij = log N_i(z_j)`, minus the row terms that depend
/// only on `i`, returned separately as a `[B]` vector.
fn build_pairwise_loglik(g: &mut Graph, n: &FlowNodes, d: usize) -> (NodeId, NodeId) {
    // (z_j - mu_i)^2 / sigma_i^2 = z_j^2 w_i - 2 z_j mu_i w_i + mu_i^2 w_i, w = exp(-2 log sigma)
    let w_exp = g.scale(n.log_sigma, -2.0);
    let w = g.exp(w_exp);
    let z_sq = g.square(n.z);
    let z_sq_t = g.transpose(z_sq);
    let quad = g.matmul(w, z_sq_t);
    let mu_w = g.mul(n.mu, w);
    let z_t = g.transpose(n.z);
    let cross = g.matmul(mu_w, z_t);
    let half_quad = g.scale(quad, -0.5);
    let pair = g.add(half_quad, cross);

    let mu_sq = g.square(n.mu);
    let mu_sq_w = g.mul(mu_sq, w);
    let c = g.sum_last(mu_sq_w);
    let c = g.scale(c, 0.5);
    let s = g.sum_last(n.log_sigma);
    let row = g.add(c, s);
    let row = g.neg(row);
    let row = g.offset(row, -(d as f64) * HALF_LOG_2PI);
    (pair, row)
}

fn contrastive_weights(labels: &[usize]) -> (Tensor, Tensor, Vec<bool>) {
    let b = labels.len();
    let mut weights = vec![0.0; b * b];
    let mut has_pos = vec![0.0; b];
    let mut off_diag = vec![true; b * b];
    for i in 0..b {
        off_diag[i * b + i] = false;
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        has_pos[i] = 1.0;
        let w = -1.0 / pos.len() as f64;
        for p in pos {
            weights[i * b + p] = w;
        }
    }
    (
        Tensor::from_parts(vec![b, b], weights),
        Tensor::vector(has_pos),
        off_diag,
    )
}

fn build_contrastive(
    g: &mut Graph,
    n: &FlowNodes,
    self_ll: NodeId,
    labels: &[usize],
    d: usize,
    cfg: &LossConfig,
) -> NodeId {
    let (pair, row) = build_pairwise_loglik(g, n, d);
    // log N_i(z_i) + log N_i(z_j): add the per-anchor terms along rows.
    let anchor = g.add(row, self_ll);
    let pair_t = g.transpose(pair);
    let summed_t = g.add(pair_t, anchor);
    let summed = g.transpose(summed_t);
    let inner = g.scale(summed, cfg.tau1 / d as f64);
    let inner = g.clamp(inner, -cfg.exponent_clamp, cfg.exponent_clamp);
    let sim = g.exp(inner);
    let logits = g.scale(sim, 1.0 / cfg.tau2);

    let (weights, has_pos, off_diag) = contrastive_weights(labels);
    let weights = g.constant(weights);
    let has_pos = g.constant(has_pos);
    let weighted = g.mul(logits, weights);
    let positive_term = g.sum(weighted);
    let lse = g.logsumexp_masked(logits, off_diag);
    let lse = g.mul(lse, has_pos);
    let normaliser = g.sum(lse);
    g.add(positive_term, normaliser)
}

/// Appends the full objective to `g`. `labels` has one entry per batch row.
pub fn build_loss(g: &mut Graph, n: &FlowNodes, labels: &[usize], d: usize, cfg: &LossConfig) -> Result<LossNodes> {
    cfg.validate()?;
    if cfg.contrastive && labels.len() < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            labels.len()
        )));
    }
    let self_ll = build_self_loglik(g, n);
    let l_flow = build_flow_nll(g, n, self_ll);
    let l_con = if cfg.contrastive {
        build_contrastive(g, n, self_ll, labels, d, cfg)
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let weighted = g.scale(l_flow, cfg.lambda);
    let total = g.add(l_con, weighted);
    Ok(LossNodes { total, l_con, l_flow })
}

struct LatentGraph {
    g: Graph,
    nodes: FlowNodes,
    bindings: Bindings,
}

fn latent_graph(batch: &BatchLatent, requires_grad: bool) -> LatentGraph {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut leaf = |name: &str, t: &Tensor| {
        let id = g.leaf(name);
        bindings.insert(id, t.clone().with_grad(requires_grad));
        id
    };
    let nodes = FlowNodes {
        z: leaf("z", &batch.z),
        logdet: leaf("logdet", &batch.logdet),
        mu: leaf("mu", &batch.mu),
        log_sigma: leaf("log_sigma", &batch.log_sigma),
    };
    LatentGraph { g, nodes, bindings }
}

pub fn flow_nll(batch: &BatchLatent) -> Result<f64> {
    let LatentGraph {
        mut g,
        nodes,
        bindings,
    } = latent_graph(batch, false);
    let self_ll = build_self_loglik(&mut g, &nodes);
    let nll = build_flow_nll(&mut g, &nodes, self_ll);
    g.evaluate(bindings)?;
    Ok(g.value(nll).item())
}

pub fn contrastive_loss(batch: &BatchLatent, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    let LatentGraph {
        mut g,
        nodes,
        bindings,
    } = latent_graph(batch, false);
    let self_ll = build_self_loglik(&mut g, &nodes);
    let l_con = build_contrastive(&mut g, &nodes, self_ll, &batch.labels, batch.dim(), cfg);
    g.evaluate(bindings)?;
    Ok(g.value(l_con).item())
}

pub fn total_loss(batch: &BatchLatent, cfg: &LossConfig) -> Result<LossValues> {
    Ok(total_loss_with_grad(batch, cfg, false)?.0)
}

/// Gradients of the total loss with respect to each batch field.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGradients {
    pub z: Tensor,
    pub logdet: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

/// Loss values and, when `with_grad` is set, their gradients with respect to the batch.
pub fn total_loss_with_grad(
    batch: &BatchLatent,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossValues, Option<LatentGradients>)> {
    let LatentGraph {
        mut g,
        nodes,
        bindings,
    } = latent_graph(batch, with_grad);
    let loss = build_loss(&mut g, &nodes, &batch.labels, batch.dim(), cfg)?;
    g.evaluate(bindings)?;
    let values = LossValues {
        total: g.value(loss.total).item(),
        l_con: g.value(loss.l_con).item(),
        l_flow: g.value(loss.l_flow).item(),
    };
    if !with_grad {
        return Ok((values, None));
    }
    let mut grads = g.gradients(loss.total)?;
    let mut take = |id: NodeId| grads.remove(&id).expect("leaf requires grad");
    let grads = LatentGradients {
        z: take(nodes.z),
        logdet: take(nodes.logdet),
        mu: take(nodes.mu),
        log_sigma: take(nodes.log_sigma),
    };
    Ok((values, Some(grads)))
}
