//! The invertible core: channel split, fixed channel permutations,
//! two-sided affine coupling, stacked flow with exact log-determinant,
//! Gaussian base density and the per-dimension NLL objective.
//!
//! One coupling block splits its input into halves `u1` (first ceil(C/2)
//! channels) and `u2`, then applies
//!
//! ```text
//! v1 = u1 * exp(s2(u2)) + t2(u2)
//! v2 = u2 * exp(s1(v1)) + t1(v1)
//! ```
//!
//! where each `(s, t)` pair comes from one subnet. The Jacobian is
//! triangular, so the per-sample log-determinant is the sum of all `s`
//! values. Each block is wrapped in a fixed seeded channel permutation and
//! its inverse; the sandwich keeps a fresh model exactly equal to the
//! identity map while still giving every block a different channel
//! partition.
//!
//! Per-channel feature standardization precedes the flow. Its constant
//! affine log-determinant is omitted: only relative likelihoods matter
//! and the objective merely shifts by a constant.

use crate::autodiff::{grad_check, Graph, NodeId};
use crate::error::{Error, Result};
use crate::parallel::try_map_indexed;
use crate::rng::{seeded, sub_seed};
use crate::scalar::Scalar;
use crate::subnet::{
    register_subnet_with, subnet_eval, subnet_init, subnet_nodes_forward, SubnetConfig,
    SubnetNodes, SubnetParams, Variant,
};
use crate::tensor::{BinaryOp, Tensor, UnaryOp};
use rand::Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

/// One permutation-wrapped coupling step.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock<T> {
    /// Produces `(s2, t2)` from `u2`; sized in = |u2|, out = 2|u1|.
    pub subnet_a: SubnetParams<T>,
    /// Produces `(s1, t1)` from `v1`; sized in = |u1|, out = 2|u2|.
    pub subnet_b: SubnetParams<T>,
    pub perm: Vec<usize>,
    /// Soft scale clamp `s <- alpha * tanh(s / alpha)`; `None` disables.
    pub clamp_alpha: Option<T>,
}

impl<T: Scalar> CouplingBlock<T> {
    pub fn channels(&self) -> usize {
        self.subnet_a.in_channels() + self.subnet_b.in_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let m1 = c.div_ceil(2);
        let m2 = c - m1;
        if self.subnet_b.in_channels() != m1
            || self.subnet_a.in_channels() != m2
            || self.subnet_a.out_channels() != 2 * m1
            || self.subnet_b.out_channels() != 2 * m2
        {
            return Err(Error::contract(
                "coupling_block",
                format!(
                    "subnet widths a:{}→{} b:{}→{} inconsistent with a {}/{} split of {} channels",
                    self.subnet_a.in_channels(),
                    self.subnet_a.out_channels(),
                    self.subnet_b.in_channels(),
                    self.subnet_b.out_channels(),
                    m1,
                    m2,
                    c
                ),
            ));
        }
        if self.perm.len() != c {
            return Err(Error::contract(
                "coupling_block",
                format!("permutation length {} != {} channels", self.perm.len(), c),
            ));
        }
        if let Some(a) = self.clamp_alpha {
            if !(a > T::zero()) {
                return Err(Error::contract("coupling_block", "clamp_alpha must be positive"));
            }
        }
        Ok(())
    }
}

/// A stack of coupling blocks plus the input geometry and feature
/// standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub blocks: Vec<CouplingBlock<T>>,
    /// `(C, H, W)` of every input sample.
    pub input_dims: (usize, usize, usize),
    pub norm_mean: Vec<T>,
    pub norm_std: Vec<T>,
}

/// Forward result: latent field and per-sample log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput<T> {
    pub z: Tensor<T>,
    pub logdet: Vec<T>,
}

impl<T: Scalar> FlowModel<T> {
    /// Builds an identity-start model: `steps` blocks with seeded random
    /// channel permutations, zero-initialized final subnet layers, unit
    /// feature normalization. `hidden_channels = None` sizes each subnet
    /// interior to its own input width.
    pub fn new(
        input_dims: (usize, usize, usize),
        steps: usize,
        variant: Variant,
        hidden_channels: Option<usize>,
        clamp_alpha: Option<T>,
        seed: u64,
    ) -> Result<FlowModel<T>> {
        let (c, _h, _w) = input_dims;
        if c < 2 {
            return Err(Error::contract(
                "flow_model",
                format!("coupling needs at least 2 channels, got {c}"),
            ));
        }
        if steps == 0 {
            return Err(Error::contract("flow_model", "step count must be at least 1"));
        }
        if let Some(a) = clamp_alpha {
            if !(a > T::zero()) {
                return Err(Error::contract("flow_model", "clamp_alpha must be positive"));
            }
        }
        let m1 = c.div_ceil(2);
        let m2 = c - m1;
        let mut blocks = Vec::with_capacity(steps);
        for k in 0..steps {
            let mut perm: Vec<usize> = (0..c).collect();
            let mut rng = seeded(sub_seed(seed, 3 * k as u64));
            for i in (1..c).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let subnet_a = subnet_init(&SubnetConfig {
                variant,
                in_channels: m2,
                hidden_channels: hidden_channels.unwrap_or(m2),
                out_channels: 2 * m1,
                seed: sub_seed(seed, 3 * k as u64 + 1),
            })?;
            let subnet_b = subnet_init(&SubnetConfig {
                variant,
                in_channels: m1,
                hidden_channels: hidden_channels.unwrap_or(m1),
                out_channels: 2 * m2,
                seed: sub_seed(seed, 3 * k as u64 + 2),
            })?;
            blocks.push(CouplingBlock { subnet_a, subnet_b, perm, clamp_alpha });
        }
        Ok(FlowModel {
            blocks,
            input_dims,
            norm_mean: vec![T::zero(); c],
            norm_std: vec![T::one(); c],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (c, _, _) = self.input_dims;
        if self.blocks.is_empty() {
            return Err(Error::contract("flow_model", "model has no blocks"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.channels() != c {
                return Err(Error::contract(
                    "flow_model",
                    format!("block {i} spans {} channels, model expects {c}", b.channels()),
                ));
            }
        }
        if self.norm_mean.len() != c || self.norm_std.len() != c {
            return Err(Error::contract(
                "flow_model",
                format!(
                    "normalization has {} means / {} stds for {c} channels",
                    self.norm_mean.len(),
                    self.norm_std.len()
                ),
            ));
        }
        for &s in &self.norm_std {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(Error::contract(
                    "flow_model",
                    "per-channel std values must be positive and finite",
                ));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.blocks.len()
    }

    /// Installs feature standardization statistics.
    pub fn set_feature_norm(&mut self, mean: Vec<T>, std: Vec<T>) -> Result<()> {
        let c = self.input_dims.0;
        if mean.len() != c || std.len() != c {
            return Err(Error::contract(
                "set_feature_norm",
                format!("got {} means / {} stds for {c} channels", mean.len(), std.len()),
            ));
        }
        if std.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(Error::contract(
                "set_feature_norm",
                "per-channel std values must be positive and finite",
            ));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(())
    }

    /// Walks every trainable tensor as `blocks.<k>.subnet_<a|b>.<name>`.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.subnet_a.visit(&format!("blocks.{k}.subnet_a."), f);
            b.subnet_b.visit(&format!("blocks.{k}.subnet_b."), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.subnet_a.visit_mut(&format!("blocks.{k}.subnet_a."), f);
            b.subnet_b.visit_mut(&format!("blocks.{k}.subnet_b."), f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.shape().count());
        n
    }

    /// Overwrites every parameter with seeded uniform noise in
    /// `±scale`. Produces a usable non-identity model for round-trip and
    /// oracle testing.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = seeded(seed);
        self.visit_params_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = T::from_f64(rng.random_range(-scale..scale));
            }
        });
    }
}

// ── Channel split ───────────────────────────────────────────────────────

/// First ceil(C/2) channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.shape().c;
    if c < 2 {
        return Err(Error::contract(
            "split_channels",
            format!("coupling is undefined on {c} channel(s)"),
        ));
    }
    let m1 = c.div_ceil(2);
    Ok((x.slice_channels(0, m1)?, x.slice_channels(m1, c)?))
}

/// Inverse of [`split_channels`].
pub fn merge_channels<T: Scalar>(u1: &Tensor<T>, u2: &Tensor<T>) -> Result<Tensor<T>> {
    u1.concat_channels(u2)
}

fn clamp_tensor<T: Scalar>(s: Tensor<T>, alpha: Option<T>) -> Tensor<T> {
    match alpha {
        None => s,
        Some(a) => s
            .scale_add(T::one() / a, T::zero())
            .map_unary(UnaryOp::Tanh)
            .scale_add(a, T::zero()),
    }
}

fn clamp_nodes<T: Scalar>(g: &mut Graph<T>, s: NodeId, alpha: Option<T>) -> NodeId {
    match alpha {
        None => s,
        Some(a) => {
            let y = g.scale_add(s, T::one() / a, T::zero());
            let y = g.unary(y, UnaryOp::Tanh);
            g.scale_add(y, a, T::zero())
        }
    }
}

// ── Graph registration and builders ─────────────────────────────────────

pub(crate) struct BlockNodes {
    pub a: SubnetNodes,
    pub b: SubnetNodes,
}

pub(crate) struct FlowNodes {
    pub blocks: Vec<BlockNodes>,
}

impl FlowNodes {
    /// Trainable leaves in [`FlowModel::visit_params`] order and naming.
    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, NodeId)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.a.visit(&format!("blocks.{k}.subnet_a."), f);
            b.b.visit(&format!("blocks.{k}.subnet_b."), f);
        }
    }
}

/// Copies the model's parameters into `g` as leaves; `over` substitutes
/// one named parameter with an existing node.
pub(crate) fn register_flow_with<T: Scalar>(
    g: &mut Graph<T>,
    model: &FlowModel<T>,
    over: Option<(&str, NodeId)>,
) -> FlowNodes {
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(k, b)| BlockNodes {
            a: register_subnet_with(g, &b.subnet_a, &format!("blocks.{k}.subnet_a."), over),
            b: register_subnet_with(g, &b.subnet_b, &format!("blocks.{k}.subnet_b."), over),
        })
        .collect();
    FlowNodes { blocks }
}

fn finite_check<T: Scalar>(
    g: &Graph<T>,
    ids: [NodeId; 2],
    block_index: Option<usize>,
) -> Result<()> {
    if ids.iter().all(|&id| g.value(id).is_finite()) {
        return Ok(());
    }
    let place = match block_index {
        Some(i) => format!("coupling block {i}"),
        None => "coupling".to_string(),
    };
    Err(Error::numeric("coupling_forward", format!("{place}: non-finite subnet output")))
}

/// Builds one coupling step on the tape: returns `(v, logdet)` with
/// `logdet` shaped `(N, 1, 1, 1)`.
pub(crate) fn coupling_nodes<T: Scalar>(
    g: &mut Graph<T>,
    u: NodeId,
    block: &CouplingBlock<T>,
    nodes: &BlockNodes,
    block_index: Option<usize>,
) -> Result<(NodeId, NodeId)> {
    let c = g.shape(u).c;
    let m1 = c.div_ceil(2);
    let u1 = g.slice_channels(u, 0, m1)?;
    let u2 = g.slice_channels(u, m1, c)?;

    let (s2_raw, t2) = subnet_nodes_forward(g, u2, &nodes.a)?;
    finite_check(g, [s2_raw, t2], block_index)?;
    let s2 = clamp_nodes(g, s2_raw, block.clamp_alpha);
    let e2 = g.unary(s2, UnaryOp::Exp);
    let scaled1 = g.binary(u1, e2, BinaryOp::Mul)?;
    let v1 = g.binary(scaled1, t2, BinaryOp::Add)?;

    let (s1_raw, t1) = subnet_nodes_forward(g, v1, &nodes.b)?;
    finite_check(g, [s1_raw, t1], block_index)?;
    let s1 = clamp_nodes(g, s1_raw, block.clamp_alpha);
    let e1 = g.unary(s1, UnaryOp::Exp);
    let scaled2 = g.binary(u2, e1, BinaryOp::Mul)?;
    let v2 = g.binary(scaled2, t1, BinaryOp::Add)?;

    let v = g.concat(v1, v2)?;
    let ld2 = g.sum_per_sample(s2);
    let ld1 = g.sum_per_sample(s1);
    let logdet = g.binary(ld2, ld1, BinaryOp::Add)?;
    Ok((v, logdet))
}

/// Builds the whole flow on the tape from an already-normalized input
/// node: per block, permute, couple, unpermute. Returns `(z, logdet)`.
pub(crate) fn flow_forward_nodes<T: Scalar>(
    g: &mut Graph<T>,
    x_norm: NodeId,
    model: &FlowModel<T>,
    nodes: &FlowNodes,
) -> Result<(NodeId, NodeId)> {
    let mut y = x_norm;
    let mut logdet: Option<NodeId> = None;
    for (k, (block, bn)) in model.blocks.iter().zip(&nodes.blocks).enumerate() {
        let p = g.permute(y, &block.perm)?;
        let (v, ld) = coupling_nodes(g, p, block, bn, Some(k))?;
        y = g.unpermute(v, &block.perm)?;
        logdet = Some(match logdet {
            None => ld,
            Some(acc) => g.binary(acc, ld, BinaryOp::Add)?,
        });
    }
    let logdet = logdet.expect("validate() guarantees at least one block");
    Ok((y, logdet))
}

/// Per-dimension normalized NLL node from latent and log-determinant
/// nodes: `mean over batch of (0.5*sum(z^2) + 0.5*D*ln(2pi) - logdet) / D`.
pub(crate) fn nll_nodes<T: Scalar>(g: &mut Graph<T>, z: NodeId, logdet: NodeId) -> Result<NodeId> {
    let s = g.shape(z);
    let d = (s.c * s.h * s.w) as f64;
    let sq = g.binary(z, z, BinaryOp::Mul)?;
    let ssq = g.sum_per_sample(sq);
    let energy = g.scale_add(ssq, T::from_f64(0.5 / d), T::from_f64(0.5 * LN_2PI));
    let ld = g.scale_add(logdet, T::from_f64(-1.0 / d), T::zero());
    let per = g.binary(energy, ld, BinaryOp::Add)?;
    g.mean_batch(per)
}

// ── Normalization ───────────────────────────────────────────────────────

fn check_dims<T: Scalar>(op: &'static str, x: &Tensor<T>, model: &FlowModel<T>) -> Result<()> {
    let s = x.shape();
    let (c, h, w) = model.input_dims;
    if (s.c, s.h, s.w) != (c, h, w) {
        return Err(Error::shape(
            op,
            format!("input {} does not match model dims (C={c}, H={h}, W={w})", s),
        ));
    }
    Ok(())
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize<T: Scalar>(x: &Tensor<T>, model: &FlowModel<T>) -> Result<Tensor<T>> {
    check_dims("normalize", x, model)?;
    model.validate()?;
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, sd) = (model.norm_mean[c], model.norm_std[c]);
            let base = (n * s.c + c) * s.spatial();
            for v in &mut out.data_mut()[base..base + s.spatial()] {
                *v = (*v - m) / sd;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(z: &Tensor<T>, model: &FlowModel<T>) -> Result<Tensor<T>> {
    check_dims("denormalize", z, model)?;
    model.validate()?;
    let s = z.shape();
    let mut out = z.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, sd) = (model.norm_mean[c], model.norm_std[c]);
            let base = (n * s.c + c) * s.spatial();
            for v in &mut out.data_mut()[base..base + s.spatial()] {
                *v = *v * sd + m;
            }
        }
    }
    Ok(out)
}

// ── Pure forward / inverse ──────────────────────────────────────────────

/// One coupling step. Returns the transformed tensor and the per-sample
/// log-determinant contribution.
pub fn coupling_forward<T: Scalar>(
    u: &Tensor<T>,
    block: &CouplingBlock<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    block.validate()?;
    let mut g = Graph::new();
    let un = g.leaf(u.clone());
    let nodes = BlockNodes {
        a: register_subnet_with(&mut g, &block.subnet_a, "a.", None),
        b: register_subnet_with(&mut g, &block.subnet_b, "b.", None),
    };
    let (v, ld) = coupling_nodes(&mut g, un, block, &nodes, None)?;
    Ok((g.value(v).clone(), g.value(ld).data().to_vec()))
}

/// Exact algebraic inverse of [`coupling_forward`].
pub fn coupling_inverse<T: Scalar>(v: &Tensor<T>, block: &CouplingBlock<T>) -> Result<Tensor<T>> {
    block.validate()?;
    let (v1, v2) = split_channels(v)?;
    let (s1_raw, t1) = subnet_eval(&v1, &block.subnet_b)?;
    if !s1_raw.is_finite() || !t1.is_finite() {
        return Err(Error::numeric("coupling_inverse", "coupling: non-finite subnet output"));
    }
    let s1 = clamp_tensor(s1_raw, block.clamp_alpha);
    let neg_e1 = s1.scale_add(-T::one(), T::zero()).map_unary(UnaryOp::Exp);
    let u2 = v2
        .elementwise(&t1.scale_add(-T::one(), T::zero()), BinaryOp::Add)?
        .elementwise(&neg_e1, BinaryOp::Mul)?;

    let (s2_raw, t2) = subnet_eval(&u2, &block.subnet_a)?;
    if !s2_raw.is_finite() || !t2.is_finite() {
        return Err(Error::numeric("coupling_inverse", "coupling: non-finite subnet output"));
    }
    let s2 = clamp_tensor(s2_raw, block.clamp_alpha);
    let neg_e2 = s2.scale_add(-T::one(), T::zero()).map_unary(UnaryOp::Exp);
    let u1 = v1
        .elementwise(&t2.scale_add(-T::one(), T::zero()), BinaryOp::Add)?
        .elementwise(&neg_e2, BinaryOp::Mul)?;

    merge_channels(&u1, &u2)
}

/// Normalizes, then runs every block (permute, couple, unpermute),
/// accumulating per-sample log-determinants.
pub fn flow_forward<T: Scalar>(x: &Tensor<T>, model: &FlowModel<T>) -> Result<FlowOutput<T>> {
    let x_norm = normalize(x, model)?;
    let mut g = Graph::new();
    let xn = g.leaf(x_norm);
    let nodes = register_flow_with(&mut g, model, None);
    let (z, ld) = flow_forward_nodes(&mut g, xn, model, &nodes)?;
    let z = g.value(z).clone();
    let logdet = g.value(ld).data().to_vec();
    if !z.is_finite() || logdet.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("flow_forward", "non-finite flow output"));
    }
    Ok(FlowOutput { z, logdet })
}

/// Runs the blocks' inverses in reverse order, then denormalizes.
pub fn flow_inverse<T: Scalar>(z: &Tensor<T>, model: &FlowModel<T>) -> Result<Tensor<T>> {
    check_dims("flow_inverse", z, model)?;
    model.validate()?;
    let mut y = z.clone();
    for block in model.blocks.iter().rev() {
        let p = y.permute_channels(&block.perm)?;
        let u = coupling_inverse(&p, block)?;
        y = u.unpermute_channels(&block.perm)?;
    }
    denormalize(&y, model)
}

// ── Density and loss ────────────────────────────────────────────────────

/// Per-sample standard-normal log-density: `sum(-0.5 * (z^2 + ln 2pi))`.
pub fn gaussian_logdensity<T: Scalar>(z: &Tensor<T>) -> Vec<T> {
    let s = z.shape();
    let d = (s.c * s.h * s.w) as f64;
    let per = s.c * s.spatial();
    (0..s.n)
        .map(|n| {
            let mut ssq = T::zero();
            for &v in &z.data()[n * per..(n + 1) * per] {
                ssq += v * v;
            }
            T::from_f64(-0.5) * ssq + T::from_f64(-0.5 * d * LN_2PI)
        })
        .collect()
}

/// Mean over the batch of `-(logdensity + logdet) / D`: per-dimension
/// normalized negative log-likelihood.
pub fn nll_loss<T: Scalar>(out: &FlowOutput<T>) -> T {
    let s = out.z.shape();
    let d = T::from_f64((s.c * s.h * s.w) as f64);
    let logp = gaussian_logdensity(&out.z);
    let mut acc = T::zero();
    for (lp, ld) in logp.iter().zip(&out.logdet) {
        acc += -(*lp + *ld) / d;
    }
    acc / T::from_f64(s.n as f64)
}

// ── Oracles and checks ──────────────────────────────────────────────────

/// Log-determinant of a dense matrix via LU with partial pivoting.
fn lu_logdet(mut m: Vec<f64>, d: usize) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..d {
        let mut piv = k;
        for r in k + 1..d {
            if m[r * d + k].abs() > m[piv * d + k].abs() {
                piv = r;
            }
        }
        let pval = m[piv * d + k];
        if pval.abs() < 1e-300 {
            return Err(Error::numeric(
                "numerical_logdet_oracle",
                "Jacobian is singular to machine precision",
            ));
        }
        if piv != k {
            for c in 0..d {
                m.swap(k * d + c, piv * d + c);
            }
        }
        acc += pval.abs().ln();
        for r in k + 1..d {
            let f = m[r * d + k] / pval;
            for c in k + 1..d {
                m[r * d + c] -= f * m[k * d + c];
            }
            m[r * d + k] = 0.0;
        }
    }
    Ok(acc)
}

/// Independent check of the analytic log-determinant: builds the full
/// Jacobian of `flow_forward` at `x` by central differences and
/// eliminates. The constant normalization contribution is removed so the
/// result is comparable to [`FlowOutput::logdet`] under any feature norm.
pub fn numerical_logdet_oracle<T: Scalar>(
    x: &Tensor<T>,
    model: &FlowModel<T>,
    eps: f64,
) -> Result<f64> {
    model.validate()?;
    check_dims("numerical_logdet_oracle", x, model)?;
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::contract(
            "numerical_logdet_oracle",
            format!("expected a single sample, got batch of {}", s.n),
        ));
    }
    let d = s.c * s.h * s.w;
    if d > 64 {
        return Err(Error::contract(
            "numerical_logdet_oracle",
            format!("dense Jacobian limited to 64 dimensions, got {d}"),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::contract("numerical_logdet_oracle", "eps must be positive"));
    }
    let columns = try_map_indexed(d, |j| -> Result<Vec<f64>> {
        let h = T::from_f64(eps);
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let zp = flow_forward(&plus, model)?.z;
        let zm = flow_forward(&minus, model)?.z;
        Ok(zp
            .data()
            .iter()
            .zip(zm.data())
            .map(|(p, m)| (p.as_f64() - m.as_f64()) / (2.0 * eps))
            .collect())
    })?;
    let mut jac = vec![0.0f64; d * d];
    for (j, col) in columns.iter().enumerate() {
        for i in 0..d {
            jac[i * d + j] = col[i];
        }
    }
    let full = lu_logdet(jac, d)?;
    let norm_contribution: f64 = model
        .norm_std
        .iter()
        .map(|sd| (s.h * s.w) as f64 * (1.0 / sd.as_f64()).ln())
        .sum();
    Ok(full - norm_contribution)
}

/// Finite-difference check of `d nll / d p` for every named parameter.
/// Returns `(name, error)` pairs with the same error metric as
/// [`grad_check`].
pub fn nll_grad_check<T: Scalar>(
    model: &FlowModel<T>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Vec<(String, f64)>> {
    model.validate()?;
    let x_norm = normalize(x, model)?;
    let mut params: Vec<(String, Tensor<T>)> = Vec::new();
    model.visit_params(&mut |name, t| params.push((name, t.clone())));
    let mut out = Vec::with_capacity(params.len());
    for (name, value) in params {
        let f = |g: &mut Graph<T>, p: NodeId| -> Result<NodeId> {
            let nodes = register_flow_with(g, model, Some((name.as_str(), p)));
            let xn = g.leaf(x_norm.clone());
            let (z, ld) = flow_forward_nodes(g, xn, model, &nodes)?;
            nll_nodes(g, z, ld)
        };
        let err = grad_check(f, &value, eps)?;
        out.push((name, err));
    }
    Ok(out)
}
