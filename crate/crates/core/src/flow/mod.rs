//! RealNVP-style affine coupling flow with a learned per-sample Gaussian prior.
//!
//! The flow maps an embedding `x` to `z = f(x)` through a stack of coupling
//! blocks. Each block keeps the masked half of the coordinates and applies
//! `x * exp(s) + t` to the other half, where `s` and `t` are two-layer
//! perceptrons of the kept half. The prior head maps the same embedding to
//! the mean and log standard deviation of a diagonal Gaussian.

mod checkpoint;

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::nd::{Bindings, Graph, NodeId, Tensor};
use crate::rng;

pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_SCALE_CLAMP: f64 = 2.0;
/// Prior log standard deviations are clamped to `[-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND]`.
pub const LOG_SIGMA_BOUND: f64 = 7.0;
const PARAMS_PER_BLOCK: usize = 8;
const PRIOR_PARAMS: usize = 4;

/// Hidden width used when none is configured: `4 d`, capped at 1024.
pub fn default_hidden(d: usize) -> usize {
    (4 * d).min(1024)
}

/// affine -> tanh -> affine
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    fn zeros(d: usize, h: usize) -> Self {
        Mlp {
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn build(g: &mut Graph, x: NodeId, p: &[NodeId]) -> NodeId {
        let hidden = g.affine(x, p[0], p[1]);
        let act = g.tanh(hidden);
        g.affine(act, p[2], p[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    /// `true` marks coordinates passed through unchanged.
    pub mask: Vec<bool>,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
    pub scale_clamp: f64,
}

/// Alternating parity mask: block 0 keeps even coordinates, block 1 odd ones, ...
pub fn alternating_mask(d: usize, block: usize) -> Vec<bool> {
    (0..d).map(|i| i % 2 == block % 2).collect()
}

impl CouplingBlock {
    pub fn identity(d: usize, h: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), d);
        CouplingBlock {
            mask,
            scale_net: Mlp::zeros(d, h),
            translate_net: Mlp::zeros(d, h),
            scale_clamp: DEFAULT_SCALE_CLAMP,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    fn params(&self) -> [&Tensor; PARAMS_PER_BLOCK] {
        let (s, t) = (&self.scale_net, &self.translate_net);
        [&s.w1, &s.b1, &s.w2, &s.b2, &t.w1, &t.b1, &t.w2, &t.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor; PARAMS_PER_BLOCK] {
        let (s, t) = (&mut self.scale_net, &mut self.translate_net);
        [
            &mut s.w1, &mut s.b1, &mut s.w2, &mut s.b2, &mut t.w1, &mut t.b1, &mut t.w2, &mut t.b2,
        ]
    }

    /// Clamped log-scale `s` and shift `t` of the transformed half, both zero on kept coordinates.
    fn build_scale_shift(&self, g: &mut Graph, x: NodeId, p: &[NodeId]) -> (NodeId, NodeId) {
        let keep = g.constant(Tensor::vector(
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        ));
        let free = g.constant(Tensor::vector(
            self.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect(),
        ));
        let kept = g.mul(x, keep);
        let c = self.scale_clamp;
        let raw = Mlp::build(g, kept, &p[..4]);
        let squashed = g.scale(raw, 1.0 / c);
        let squashed = g.tanh(squashed);
        let s = g.scale(squashed, c);
        let s = g.mul(s, free);
        let t = Mlp::build(g, kept, &p[4..]);
        let t = g.mul(t, free);
        (s, t)
    }

    /// Returns `(y, logdet)` nodes for a `[n, d]` input.
    pub fn build_forward(&self, g: &mut Graph, x: NodeId, p: &[NodeId]) -> (NodeId, NodeId) {
        let (s, t) = self.build_scale_shift(g, x, p);
        let es = g.exp(s);
        let scaled = g.mul(x, es);
        let y = g.add(scaled, t);
        (y, g.sum_last(s))
    }

    pub fn build_inverse(&self, g: &mut Graph, y: NodeId, p: &[NodeId]) -> NodeId {
        // Kept coordinates of y equal those of x, so s and t are recomputable.
        let (s, t) = self.build_scale_shift(g, y, p);
        let shifted = g.sub(y, t);
        let ns = g.neg(s);
        let ens = g.exp(ns);
        g.mul(shifted, ens)
    }

    fn register(&self, g: &mut Graph, trainable: bool, bindings: &mut Bindings) -> Vec<NodeId> {
        self.params()
            .iter()
            .map(|t| register_param(g, t, trainable, bindings))
            .collect()
    }
}

fn register_param(g: &mut Graph, t: &Tensor, trainable: bool, bindings: &mut Bindings) -> NodeId {
    if trainable {
        let id = g.leaf("param");
        bindings.insert(id, t.clone().with_grad(true));
        id
    } else {
        g.constant(t.clone())
    }
}

fn check_len(got: usize, d: usize) -> Result<()> {
    if got != d {
        return Err(Error::invalid(format!("expected a vector of length {d}, got {got}")));
    }
    Ok(())
}

fn row_input(x: &[f64]) -> Tensor {
    Tensor::from_parts(vec![1, x.len()], x.to_vec())
}

/// Applies one coupling block to a single vector.
pub fn coupling_forward(block: &CouplingBlock, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_len(x.len(), block.dim())?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let input = g.leaf("x");
    b.insert(input, row_input(x));
    let p = block.register(&mut g, false, &mut b);
    let (y, ld) = block.build_forward(&mut g, input, &p);
    g.evaluate(b)?;
    Ok((g.value(y).data().to_vec(), g.value(ld).item()))
}

pub fn coupling_inverse(block: &CouplingBlock, y: &[f64]) -> Result<Vec<f64>> {
    check_len(y.len(), block.dim())?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let input = g.leaf("y");
    b.insert(input, row_input(y));
    let p = block.register(&mut g, false, &mut b);
    let x = block.build_inverse(&mut g, input, &p);
    g.evaluate(b)?;
    Ok(g.value(x).data().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorHead {
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_log_sigma: Tensor,
    pub b_log_sigma: Tensor,
}

impl PriorHead {
    fn zeros(d: usize) -> Self {
        PriorHead {
            w_mu: Tensor::zeros(&[d, d]),
            b_mu: Tensor::zeros(&[d]),
            w_log_sigma: Tensor::zeros(&[d, d]),
            b_log_sigma: Tensor::zeros(&[d]),
        }
    }

    fn params(&self) -> [&Tensor; PRIOR_PARAMS] {
        [&self.w_mu, &self.b_mu, &self.w_log_sigma, &self.b_log_sigma]
    }

    fn params_mut(&mut self) -> [&mut Tensor; PRIOR_PARAMS] {
        [
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_log_sigma,
            &mut self.b_log_sigma,
        ]
    }

    /// `(mu, log_sigma)` nodes conditioned on the embedding `x`.
    pub fn build(&self, g: &mut Graph, x: NodeId, p: &[NodeId]) -> (NodeId, NodeId) {
        let mu = g.affine(x, p[0], p[1]);
        let raw = g.affine(x, p[2], p[3]);
        let log_sigma = g.clamp(raw, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND);
        (mu, log_sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub d: usize,
    pub hidden: usize,
    pub blocks: Vec<CouplingBlock>,
    pub prior: PriorHead,
}

/// Per-sample flow quantities for one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub z_flow: Vec<f64>,
    pub logdet: f64,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

/// Graph nodes of a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FlowNodes {
    /// `[n, d]`
    pub z: NodeId,
    /// `[n]`
    pub logdet: NodeId,
    pub mu: NodeId,
    pub log_sigma: NodeId,
}

/// Values of a batched forward pass; matrices are `[n, d]`, `logdet` is `[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub z: Tensor,
    pub logdet: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.logdet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logdet.is_empty()
    }

    pub fn output(&self, i: usize) -> FlowOutput {
        FlowOutput {
            z_flow: self.z.row(i).to_vec(),
            logdet: self.logdet.data()[i],
            mu: self.mu.row(i).to_vec(),
            log_sigma: self.log_sigma.row(i).to_vec(),
        }
    }
}

impl FlowModel {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Canonical parameter names, in the order of [`FlowModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_tensors());
        for k in 0..self.blocks.len() {
            for net in ["scale", "translate"] {
                for p in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("blocks.{k}.{net}.{p}"));
                }
            }
        }
        for p in ["w_mu", "b_mu", "w_log_sigma", "b_log_sigma"] {
            names.push(format!("prior.{p}"));
        }
        names
    }

    pub fn num_tensors(&self) -> usize {
        self.blocks.len() * PARAMS_PER_BLOCK + PRIOR_PARAMS
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.params()).collect();
        out.extend(self.prior.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend(self.prior.params_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Adds every parameter tensor to the graph, as differentiable leaves
    /// (bound in `bindings`) or as constants.
    pub fn register_params(&self, g: &mut Graph, trainable: bool, bindings: &mut Bindings) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|t| register_param(g, t, trainable, bindings))
            .collect()
    }

    fn block_params<'a>(&self, params: &'a [NodeId], k: usize) -> &'a [NodeId] {
        &params[k * PARAMS_PER_BLOCK..(k + 1) * PARAMS_PER_BLOCK]
    }

    fn prior_params<'a>(&self, params: &'a [NodeId]) -> &'a [NodeId] {
        let start = self.blocks.len() * PARAMS_PER_BLOCK;
        &params[start..start + PRIOR_PARAMS]
    }

    /// Forward pass of a `[n, d]` node; `params` comes from [`FlowModel::register_params`].
    pub fn build_forward(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> FlowNodes {
        assert_eq!(params.len(), self.num_tensors());
        let mut z = x;
        let mut logdet = None;
        for (k, block) in self.blocks.iter().enumerate() {
            let (y, ld) = block.build_forward(g, z, self.block_params(params, k));
            z = y;
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => g.add(acc, ld),
            });
        }
        let logdet = match logdet {
            Some(ld) => ld,
            None => {
                let zero_rows = g.scale(x, 0.0);
                g.sum_last(zero_rows)
            }
        };
        let (mu, log_sigma) = self.prior.build(g, x, self.prior_params(params));
        FlowNodes {
            z,
            logdet,
            mu,
            log_sigma,
        }
    }

    /// Inverse of the coupling stack: blocks undone in reverse order.
    pub fn build_inverse(&self, g: &mut Graph, z: NodeId, params: &[NodeId]) -> NodeId {
        assert_eq!(params.len(), self.num_tensors());
        self.blocks
            .iter()
            .enumerate()
            .rev()
            .fold(z, |y, (k, block)| block.build_inverse(g, y, self.block_params(params, k)))
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [_, d] if d == self.d => Ok(()),
            _ => Err(Error::invalid(format!(
                "expected a [n, {}] batch, got {:?}",
                self.d,
                x.shape()
            ))),
        }
    }

    /// Forward pass over the rows of a `[n, d]` matrix.
    pub fn forward_batch(&self, x: &Tensor) -> Result<FlowBatch> {
        self.check_batch(x)?;
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let input = g.leaf("x");
        b.insert(input, x.clone());
        let params = self.register_params(&mut g, false, &mut b);
        let nodes = self.build_forward(&mut g, input, &params);
        g.evaluate(b)?;
        Ok(FlowBatch {
            z: g.value(nodes.z).clone(),
            logdet: g.value(nodes.logdet).clone(),
            mu: g.value(nodes.mu).clone(),
            log_sigma: g.value(nodes.log_sigma).clone(),
        })
    }

    pub fn inverse_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_batch(z)?;
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let input = g.leaf("z");
        b.insert(input, z.clone());
        let params = self.register_params(&mut g, false, &mut b);
        let x = self.build_inverse(&mut g, input, &params);
        g.evaluate(b)?;
        Ok(g.value(x).clone())
    }
}

pub fn flow_forward(model: &FlowModel, z_emb: &[f64]) -> Result<FlowOutput> {
    check_len(z_emb.len(), model.d)?;
    Ok(model.forward_batch(&row_input(z_emb))?.output(0))
}

pub fn flow_inverse(model: &FlowModel, z_flow: &[f64]) -> Result<Vec<f64>> {
    check_len(z_flow.len(), model.d)?;
    Ok(model.inverse_batch(&row_input(z_flow))?.into_data())
}

fn check_shape(d: usize, blocks: usize, hidden: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::invalid(format!("feature dimension must be at least 2, got {d}")));
    }
    if blocks < 1 || hidden < 1 {
        return Err(Error::invalid(format!(
            "need at least one block and one hidden unit, got K={blocks}, h={hidden}"
        )));
    }
    Ok(())
}

fn fill_uniform(t: &mut Tensor, bound: f64, rng: &mut rng::Rng) {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
}

/// Identity-initialised model: hidden layers drawn uniform in `±1/sqrt(fan_in)`,
/// output layers and the prior head zero, so the flow starts as the identity
/// with a standard normal prior.
pub fn init_model(d: usize, blocks: usize, hidden: usize, seed: u64) -> Result<FlowModel> {
    check_shape(d, blocks, hidden)?;
    let mut rng = rng::substream(seed, rng::INIT);
    let bound = 1.0 / (d as f64).sqrt();
    let blocks = (0..blocks)
        .map(|k| {
            let mut block = CouplingBlock::identity(d, hidden, alternating_mask(d, k));
            for net in [&mut block.scale_net, &mut block.translate_net] {
                fill_uniform(&mut net.w1, bound, &mut rng);
                fill_uniform(&mut net.b1, bound, &mut rng);
            }
            block
        })
        .collect();
    Ok(FlowModel {
        d,
        hidden,
        blocks,
        prior: PriorHead::zeros(d),
    })
}

/// Model with every parameter randomised, output layers at `scale / sqrt(fan_in)`.
/// Used for diagnostics and property tests where the identity start is uninformative.
pub fn init_perturbed(d: usize, blocks: usize, hidden: usize, seed: u64, scale: f64) -> Result<FlowModel> {
    let mut model = init_model(d, blocks, hidden, seed)?;
    let mut rng = rng::substream(seed, "perturb");
    let out_bound = scale / (hidden as f64).sqrt();
    for block in &mut model.blocks {
        for net in [&mut block.scale_net, &mut block.translate_net] {
            fill_uniform(&mut net.w2, out_bound, &mut rng);
            fill_uniform(&mut net.b2, out_bound, &mut rng);
        }
    }
    let prior_bound = scale / (d as f64).sqrt();
    for t in model.prior.params_mut() {
        fill_uniform(t, prior_bound, &mut rng);
    }
    // keep log sigma away from the clamp
    let shift: f64 = rng.random_range(-0.2..0.2);
    model.prior.b_log_sigma.data_mut().iter_mut().for_each(|v| *v += shift);
    Ok(model)
}
