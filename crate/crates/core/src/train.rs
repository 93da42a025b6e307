//! Minibatch NLL training with a bias-corrected adaptive-moment
//! optimizer, plus binary checkpoint persistence.
//!
//! Training normalizes features with statistics gathered in one pre-pass,
//! then repeats seeded shuffles and graph-per-minibatch descent. A
//! non-finite loss or gradient aborts the run and hands back the model as
//! of the last completed epoch.
//!
//! Checkpoint layout ("CAFW", all little-endian):
//!
//! ```text
//! "CAFW" | u32 version=1
//! | u64 epochs | f64 lr | u32 batch | u32 steps | u8 variant | u64 seed
//! | u8 clamp_flag | f64 clamp_alpha | u8 hidden_flag | u32 hidden
//! | u32 C | u32 H | u32 W | u8 dtype
//! | C×f64 mean | C×f64 std | steps×C×u32 perms
//! | u32 history_len | f64 entries
//! | u32 n_tensors | per tensor: u32 name_len, name, 4×u32 shape, payload
//! | u32 CRC32 over everything before
//! ```

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flow::{flow_forward_nodes, nll_nodes, normalize, register_flow_with, FlowModel};
use crate::rng::{seeded, sub_seed};
use crate::scalar::{Dtype, Scalar};
use crate::subnet::Variant;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use std::path::Path;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

const CHECKPOINT_MAGIC: [u8; 4] = *b"CAFW";
const CHECKPOINT_VERSION: u32 = 1;
const TAG_SHUFFLE: u64 = 0x5000_0000;
const STD_FLOOR: f64 = 1e-6;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Coupling blocks in the flow.
    pub steps: usize,
    pub variant: Variant,
    pub seed: u64,
    pub clamp_alpha: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 750,
            learning_rate: 5e-4,
            batch_size: 32,
            steps: 2,
            variant: Variant::Cac,
            seed: 0,
            clamp_alpha: Some(1.9),
        }
    }
}

impl TrainConfig {
    /// `epochs` may be zero: that run returns the identity-start model.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::contract("train", "learning rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("train", "batch size must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::contract("train", "step count must be at least 1"));
        }
        if let Some(a) = self.clamp_alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::contract("train", "clamp_alpha must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// First/second moment accumulators, aligned with the model's parameter
/// visit order.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &FlowModel<T>) -> OptimizerState<T> {
        let mut m = Vec::new();
        model.visit_params(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        OptimizerState { v: m.clone(), m, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update over every parameter.
/// `grads` must list `(name, gradient)` in the model's visit order. Any
/// non-finite gradient aborts before a single parameter changes.
pub fn optimizer_step<T: Scalar>(
    model: &mut FlowModel<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut OptimizerState<T>,
    learning_rate: T,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::contract(
            "optimizer_step",
            format!("{} gradients for {} state slots", grads.len(), state.m.len()),
        ));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::numeric(
                "optimizer_step",
                format!("non-finite gradient for {name}"),
            ));
        }
    }
    state.step += 1;
    let t = state.step;
    let c1 = T::from_f64(1.0 - BETA1.powi(t as i32));
    let c2 = T::from_f64(1.0 - BETA2.powi(t as i32));
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let eps = T::from_f64(EPSILON);
    let mut idx = 0;
    let mut err: Option<Error> = None;
    let (ms, vs) = (&mut state.m, &mut state.v);
    model.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let (gname, g) = &grads[idx];
        if *gname != name || g.shape() != p.shape() {
            err = Some(Error::contract(
                "optimizer_step",
                format!("gradient {gname} does not line up with parameter {name}"),
            ));
            return;
        }
        let (m, v) = (&mut ms[idx], &mut vs[idx]);
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = b1 * *mv + (T::one() - b1) * *gv;
            *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// A finished (or aborted) training run.
#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: FlowModel<T>,
    /// Mean per-dimension NLL per epoch.
    pub loss_history: Vec<f64>,
    /// True when a non-finite loss or gradient cut the run short; the
    /// model is then the state after the last fully completed epoch.
    pub diverged: bool,
}

fn feature_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let mut mean = Vec::with_capacity(s.c);
    let mut std = Vec::with_capacity(s.c);
    let per_channel = (s.n * s.spatial()) as f64;
    for c in 0..s.c {
        let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            let base = (n * s.c + c) * s.spatial();
            for &v in &x.data()[base..base + s.spatial()] {
                let v = v.as_f64();
                sum += v;
                sumsq += v * v;
            }
        }
        let m = sum / per_channel;
        let var = (sumsq / per_channel - m * m).max(0.0);
        mean.push(T::from_f64(m));
        std.push(T::from_f64(var.sqrt().max(STD_FLOOR)));
    }
    (mean, std)
}

fn train_batch<T: Scalar>(
    model: &mut FlowModel<T>,
    batch: &Tensor<T>,
    state: &mut OptimizerState<T>,
    learning_rate: T,
) -> Result<f64> {
    let x_norm = normalize(batch, model)?;
    let mut g = Graph::new();
    let x = g.leaf(x_norm);
    let nodes = register_flow_with(&mut g, model, None);
    let (z, ld) = flow_forward_nodes(&mut g, x, model, &nodes)?;
    let loss = nll_nodes(&mut g, z, ld)?;
    let loss_val = g.value(loss).scalar_value()?.as_f64();
    if !loss_val.is_finite() {
        return Ok(loss_val);
    }
    let mut grads = g.backward(loss)?;
    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    nodes.visit(&mut |name, id| {
        named.push((name, grads.take_or_zeros(id, g.shape(id))));
    });
    optimizer_step(model, &named, state, learning_rate)?;
    Ok(loss_val)
}

/// Fits an identity-start flow to all-normal feature maps by shuffled
/// minibatch NLL descent. Each element of `samples` is one `(1, C, H, W)`
/// feature map; dims must be uniform.
pub fn train<T: Scalar>(samples: &[Tensor<T>], cfg: &TrainConfig) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("train", "training set is empty"));
    }
    for t in samples {
        if t.shape().n != 1 {
            return Err(Error::contract(
                "train",
                format!("expected single-sample feature maps, got {}", t.shape()),
            ));
        }
    }
    let x = Tensor::stack(samples)?;
    let s = x.shape();
    let (mean, std) = feature_stats(&x);
    let mut model = FlowModel::new(
        (s.c, s.h, s.w),
        cfg.steps,
        cfg.variant,
        None,
        cfg.clamp_alpha.map(T::from_f64),
        cfg.seed,
    )?;
    model.set_feature_norm(mean, std)?;

    let mut state = OptimizerState::new(&model);
    let learning_rate = T::from_f64(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..s.n).collect();
        let mut rng = seeded(sub_seed(cfg.seed, TAG_SHUFFLE + epoch as u64));
        for i in (1..s.n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut aborted = false;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<Tensor<T>> =
                chunk.iter().map(|&i| x.sample(i)).collect::<Result<_>>()?;
            let batch = Tensor::stack(&members)?;
            match train_batch(&mut model, &batch, &mut state, learning_rate) {
                Ok(loss) if loss.is_finite() => epoch_loss += loss * chunk.len() as f64,
                Ok(_) | Err(Error::Numeric { .. }) => {
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if aborted {
            return Ok(TrainOutput { model: last_good, loss_history: history, diverged: true });
        }
        history.push(epoch_loss / s.n as f64);
        last_good = model.clone();
    }
    Ok(TrainOutput { model, loss_history: history, diverged: false })
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// Everything needed to resume or reproduce inference: config, model and
/// per-epoch loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub model: FlowModel<T>,
    pub loss_history: Vec<f64>,
}

fn variant_flag(v: Variant) -> u8 {
    match v {
        Variant::Ca => 0,
        Variant::Ac => 1,
        Variant::Cac => 2,
        Variant::Cc => 3,
    }
}

fn flag_variant(flag: u8) -> Option<Variant> {
    match flag {
        0 => Some(Variant::Ca),
        1 => Some(Variant::Ac),
        2 => Some(Variant::Cac),
        3 => Some(Variant::Cc),
        _ => None,
    }
}

/// The single interior-width marker stored in a checkpoint: `None` when
/// every subnet uses its own input width (the construction default),
/// `Some(x)` when all subnets share one explicit width.
fn hidden_marker<T: Scalar>(model: &FlowModel<T>) -> Result<Option<usize>> {
    let mut explicit: Option<usize> = None;
    let mut any_default = false;
    for b in &model.blocks {
        for sub in [&b.subnet_a, &b.subnet_b] {
            if sub.hidden_channels() == sub.in_channels() {
                any_default = true;
            } else {
                match explicit {
                    None => explicit = Some(sub.hidden_channels()),
                    Some(x) if x == sub.hidden_channels() => {}
                    Some(x) => {
                        return Err(Error::contract(
                            "save_checkpoint",
                            format!(
                                "mixed interior widths {x} and {} are not representable",
                                sub.hidden_channels()
                            ),
                        ));
                    }
                }
            }
        }
    }
    match (explicit, any_default) {
        (None, _) => Ok(None),
        (Some(x), false) => Ok(Some(x)),
        (Some(x), true) => Err(Error::contract(
            "save_checkpoint",
            format!("interior width {x} is not used by every subnet"),
        )),
    }
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    ck.config.validate()?;
    ck.model.validate()?;
    if ck.model.steps() != ck.config.steps {
        return Err(Error::contract(
            "save_checkpoint",
            format!("model has {} blocks, config says {}", ck.model.steps(), ck.config.steps),
        ));
    }
    for b in &ck.model.blocks {
        if b.subnet_a.variant() != ck.config.variant || b.subnet_b.variant() != ck.config.variant {
            return Err(Error::contract(
                "save_checkpoint",
                "model subnet variant disagrees with config variant",
            ));
        }
    }
    let hidden = hidden_marker(&ck.model)?;
    let (c, h, w) = ck.model.input_dims;

    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ck.config.epochs as u64).to_le_bytes());
    buf.extend_from_slice(&ck.config.learning_rate.to_le_bytes());
    buf.extend_from_slice(&(ck.config.batch_size as u32).to_le_bytes());
    buf.extend_from_slice(&(ck.config.steps as u32).to_le_bytes());
    buf.push(variant_flag(ck.config.variant));
    buf.extend_from_slice(&ck.config.seed.to_le_bytes());
    buf.push(ck.config.clamp_alpha.is_some() as u8);
    buf.extend_from_slice(&ck.config.clamp_alpha.unwrap_or(0.0).to_le_bytes());
    buf.push(hidden.is_some() as u8);
    buf.extend_from_slice(&(hidden.unwrap_or(0) as u32).to_le_bytes());
    for dim in [c, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(T::DTYPE.flag());
    for v in &ck.model.norm_mean {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    for v in &ck.model.norm_std {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    for b in &ck.model.blocks {
        for &p in &b.perm {
            buf.extend_from_slice(&(p as u32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ck.loss_history.len() as u32).to_le_bytes());
    for v in &ck.loss_history {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut n_tensors = 0u32;
    ck.model.visit_params(&mut |_, _| n_tensors += 1);
    buf.extend_from_slice(&n_tensors.to_le_bytes());
    ck.model.visit_params(&mut |name, t| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for dim in [s.n, s.c, s.h, s.w] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    });
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n - available, available });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn malformed(path: &Path, detail: String) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, detail))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let found = cur.take(4)?;
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: found.try_into().expect("4 bytes"),
        });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let epochs = cur.u64()? as usize;
    let learning_rate = cur.f64()?;
    let batch_size = cur.u32()? as usize;
    let steps = cur.u32()? as usize;
    let variant = flag_variant(cur.u8()?)
        .ok_or_else(|| malformed(path, "unknown subnet variant flag".to_string()))?;
    let seed = cur.u64()?;
    let clamp_flag = cur.u8()?;
    let clamp_value = cur.f64()?;
    let clamp_alpha = (clamp_flag != 0).then_some(clamp_value);
    let hidden_flag = cur.u8()?;
    let hidden_value = cur.u32()? as usize;
    let hidden = (hidden_flag != 0).then_some(hidden_value);
    let c = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let dtype = Dtype::from_flag(cur.u8()?).ok_or(Error::DtypeMismatch {
        expected: T::DTYPE.name(),
        found: "unknown",
    })?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch { expected: T::DTYPE.name(), found: dtype.name() });
    }
    let mut mean = Vec::with_capacity(c);
    for _ in 0..c {
        mean.push(T::from_f64(cur.f64()?));
    }
    let mut std = Vec::with_capacity(c);
    for _ in 0..c {
        std.push(T::from_f64(cur.f64()?));
    }
    let mut perms = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut perm = Vec::with_capacity(c);
        for _ in 0..c {
            perm.push(cur.u32()? as usize);
        }
        let mut seen = vec![false; c];
        for &p in &perm {
            if p >= c || seen[p] {
                return Err(malformed(path, format!("stored list {perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        perms.push(perm);
    }
    let history_len = cur.u32()? as usize;
    let mut loss_history = Vec::with_capacity(history_len);
    for _ in 0..history_len {
        loss_history.push(cur.f64()?);
    }

    let config = TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        steps,
        variant,
        seed,
        clamp_alpha,
    };
    config.validate()?;
    let mut model = FlowModel::<T>::new(
        (c, h, w),
        steps,
        variant,
        hidden,
        clamp_alpha.map(T::from_f64),
        seed,
    )?;
    model.set_feature_norm(mean, std)?;
    for (block, perm) in model.blocks.iter_mut().zip(perms) {
        block.perm = perm;
    }

    let n_tensors = cur.u32()? as usize;
    let mut stored: Vec<(String, Shape, Vec<T>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| malformed(path, "tensor name is not UTF-8".to_string()))?
            .to_string();
        let n = cur.u32()? as usize;
        let tc = cur.u32()? as usize;
        let th = cur.u32()? as usize;
        let tw = cur.u32()? as usize;
        let shape = Shape::new(n, tc, th, tw);
        let payload = cur.take(shape.count() * T::DTYPE.size())?;
        let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        stored.push((name, shape, data));
    }
    let stored_crc = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if cur.pos != buf.len() {
        return Err(malformed(path, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    let computed = crc32fast::hash(&buf[..buf.len() - 4]);
    if stored_crc != computed {
        return Err(Error::Checksum { stored: stored_crc, computed });
    }

    let mut idx = 0;
    let mut err: Option<Error> = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match stored.get(idx) {
            Some((sname, sshape, sdata)) if *sname == name && *sshape == t.shape() => {
                t.data_mut().copy_from_slice(sdata);
            }
            Some((sname, sshape, _)) => {
                err = Some(malformed(
                    path,
                    format!(
                        "tensor {idx} holds {sname} {sshape}, model expects {name} {}",
                        t.shape()
                    ),
                ));
            }
            None => {
                err = Some(malformed(path, format!("missing tensor record for {name}")));
            }
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != stored.len() {
        return Err(malformed(path, format!("{} extra tensor records", stored.len() - idx)));
    }
    model.validate()?;
    Ok(Checkpoint { config, model, loss_history })
}
