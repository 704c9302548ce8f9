//! Recording a [`ModelSpec`] forward pass on a tape.
//!
//! Noise masks enter the tape as constants: nothing downstream can produce a
//! gradient for them, so they stay fixed by construction.

use crate::arch::{Act, Block, ModelSpec, ModuleSpec, PerturbSpec, UpMode};
use crate::params::{Buffers, ParamStore};
use crate::{Error, Result};
use indexmap::IndexMap;
use pgan_noise::{make_mask, DistKind, MaskKey, RngKind};
use pgan_tensor::{kernels, NodeId, Tape, Tensor};
use std::collections::HashMap;

pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their previous value each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// How masks are derived for a run. The seed is a hyperparameter of the run,
/// not of the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskConfig {
    pub seed: u64,
    pub rng: RngKind,
    pub dist: DistKind,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rng: RngKind::Mt19937,
            dist: DistKind::Snd,
        }
    }
}

impl MaskConfig {
    pub fn key(&self, spec: &PerturbSpec, channel: usize) -> MaskKey {
        MaskKey {
            global_seed: self.seed,
            layer_id: spec.layer,
            channel: channel as u32,
            height: spec.height,
            width: spec.width,
            rng: self.rng,
            dist: self.dist,
        }
    }
}

/// Masks for one perturbation layer, stacked `(channels, H, W)`.
#[derive(Clone, Debug)]
pub struct LayerMasks {
    pub keys: Vec<MaskKey>,
    pub stacked: Tensor,
}

/// All masks a model needs, derived once from their keys and held for the
/// lifetime of a run. Never serialized.
#[derive(Clone, Debug, Default)]
pub struct MaskBank {
    layers: IndexMap<String, LayerMasks>,
}

impl MaskBank {
    pub fn for_model(spec: &ModelSpec, cfg: MaskConfig) -> Result<Self> {
        let mut layers = IndexMap::new();
        for p in spec.perturb_layers() {
            layers.insert(p.path, derive_layer(&p.spec, cfg)?);
        }
        Ok(Self { layers })
    }

    pub fn get(&self, path: &str) -> Option<&LayerMasks> {
        self.layers.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerMasks)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Replace the mask values of one layer, keeping its keys. The shape must
    /// not change. Meant for probing layers with hand-picked masks.
    pub fn override_values(&mut self, path: &str, stacked: Tensor) -> Result<()> {
        let layer = self
            .layers
            .get_mut(path)
            .ok_or_else(|| Error::Model(format!("no masks for {path}")))?;
        if layer.stacked.shape() != stacked.shape() {
            return Err(Error::Model(format!(
                "masks for {path} have shape {:?}, not {:?}",
                layer.stacked.shape(),
                stacked.shape()
            )));
        }
        layer.stacked = stacked;
        Ok(())
    }
}

pub fn derive_layer(spec: &PerturbSpec, cfg: MaskConfig) -> Result<LayerMasks> {
    let c = spec.mask_channels();
    let mut keys = Vec::with_capacity(c);
    let mut data = Vec::with_capacity(c * spec.height * spec.width);
    for ch in 0..c {
        let key = cfg.key(spec, ch);
        data.extend_from_slice(make_mask(&key)?.data());
        keys.push(key);
    }
    Ok(LayerMasks {
        keys,
        stacked: Tensor::new(vec![c, spec.height, spec.width], data)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

/// Parameter path to tape node.
pub type Bound = HashMap<String, NodeId>;

/// Record every parameter of `store` on `tape` as a leaf.
pub fn bind(tape: &mut Tape, store: &ParamStore) -> Bound {
    store
        .iter()
        .map(|(k, t)| (k.to_string(), tape.constant(t.clone())))
        .collect()
}

/// Node ids of `bound` in `store` order, for gradient requests.
pub fn ordered(bound: &Bound, store: &ParamStore) -> Vec<NodeId> {
    store.iter().map(|(k, _)| bound[k]).collect()
}

pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    pub masks: &'a MaskBank,
    pub buffers: &'a mut Buffers,
    pub mode: Mode,
}

fn model_err(block: usize, kind: &str, msg: impl std::fmt::Display) -> Error {
    Error::Model(format!("block {block} ({kind}): {msg}"))
}

impl Forward<'_> {
    fn param(&self, path: &str) -> Result<NodeId> {
        self.params
            .get(path)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter {path:?} is not bound")))
    }

    fn shape(&self, x: NodeId) -> Vec<usize> {
        self.tape.shape(x).to_vec()
    }

    pub fn act(&mut self, x: NodeId, a: Act) -> Result<NodeId> {
        Ok(match a {
            Act::Relu => self.tape.relu(x)?,
            Act::LeakyRelu(s) => self.tape.leaky_relu(x, s)?,
            Act::Tanh => self.tape.tanh(x)?,
        })
    }

    fn dense(&mut self, x: NodeId, path: &str, bias: bool) -> Result<NodeId> {
        let w = self.param(&format!("{path}.weight"))?;
        let y = self.tape.channel_combine(x, w)?;
        if bias {
            let b = self.param(&format!("{path}.bias"))?;
            Ok(self.tape.add_channel_bias(y, b)?)
        } else {
            Ok(y)
        }
    }

    /// `combine(act(x + masks))`.
    pub fn perturb(&mut self, x: NodeId, path: &str, spec: &PerturbSpec) -> Result<NodeId> {
        let shape = self.shape(x);
        let expect = [spec.inp, spec.height, spec.width];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Model(format!(
                "perturbation layer {path} expects (N, {}, {}, {}), got {shape:?}",
                spec.inp, spec.height, spec.width
            )));
        }
        let masks = self
            .masks
            .get(path)
            .ok_or_else(|| Error::Model(format!("no masks derived for {path}")))?;
        let mut x = x;
        if spec.masks > 1 {
            let k = spec.masks;
            let fan = Tensor::from_fn(&[spec.inp * k, spec.inp], |i| {
                if (i / spec.inp) / k == i % spec.inp {
                    1.0
                } else {
                    0.0
                }
            });
            let e = self.tape.constant(fan);
            x = self.tape.channel_combine(x, e)?;
        }
        let m = self.tape.constant(masks.stacked.clone());
        let mb = self.tape.broadcast_batch(m, shape[0])?;
        let shifted = self.tape.add(x, mb)?;
        let a = self.act(shifted, spec.act)?;
        self.dense(a, path, spec.bias)
    }

    pub fn batch_norm(&mut self, x: NodeId, path: &str) -> Result<NodeId> {
        let mean_key = format!("{path}.running_mean");
        let var_key = format!("{path}.running_var");
        match self.mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.tape.value(x))?;
                let y = self.tape.batch_norm(x, BN_EPS)?;
                for (key, batch) in [(mean_key, mean), (var_key, var)] {
                    let buf = self
                        .buffers
                        .get_mut(&key)
                        .ok_or_else(|| Error::Model(format!("missing buffer {key}")))?;
                    for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let get = |k: &str| {
                    self.buffers
                        .get(k)
                        .cloned()
                        .ok_or_else(|| Error::Model(format!("missing buffer {k}")))
                };
                let mean = get(&mean_key)?;
                let inv = get(&var_key)?.map(|v| 1.0 / (v + BN_EPS).sqrt());
                let shape = self.shape(x);
                let m = self.tape.constant(mean);
                let m = self.tape.broadcast_per_channel(m, &shape)?;
                let s = self.tape.constant(inv);
                let s = self.tape.broadcast_per_channel(s, &shape)?;
                let c = self.tape.sub(x, m)?;
                Ok(self.tape.mul(c, s)?)
            }
        }
    }

    fn shortcut(&mut self, x: NodeId, path: &str, m: &ModuleSpec) -> Result<NodeId> {
        if m.inp == m.out {
            Ok(x)
        } else {
            self.dense(x, &format!("{path}.shortcut"), false)
        }
    }

    fn block(&mut self, i: usize, b: &Block, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let n = shape[0];
        let err = |msg: String| model_err(i, b.kind(), msg);
        let need_rank = |r: usize| {
            if shape.len() == r {
                Ok(())
            } else {
                Err(err(format!("expected rank {r} input, got {shape:?}")))
            }
        };
        let need_channels = |c: usize| {
            if shape.get(1) == Some(&c) {
                Ok(())
            } else {
                Err(err(format!("expected {c} channels, got {shape:?}")))
            }
        };
        Ok(match b {
            Block::Linear { path, inp, bias, .. } => {
                need_rank(2)?;
                need_channels(*inp)?;
                self.dense(x, path, *bias)?
            }
            Block::Combine { path, inp, bias, .. } => {
                need_rank(4)?;
                need_channels(*inp)?;
                self.dense(x, path, *bias)?
            }
            Block::Conv {
                path,
                inp,
                stride,
                pad,
                bias,
                ..
            } => {
                need_rank(4)?;
                need_channels(*inp)?;
                let k = self.param(&format!("{path}.weight"))?;
                let y = self.tape.conv2d(x, k, *stride, *pad)?;
                if *bias {
                    let bb = self.param(&format!("{path}.bias"))?;
                    self.tape.add_channel_bias(y, bb)?
                } else {
                    y
                }
            }
            Block::Perturb { path, spec } => self.perturb(x, path, spec)?,
            Block::BatchNorm { path, channels } => {
                need_channels(*channels)?;
                self.batch_norm(x, path)?
            }
            Block::Act(a) => self.act(x, *a)?,
            Block::Reshape { shape: [c, h, w] } => {
                if shape.iter().product::<usize>() != n * c * h * w {
                    return Err(err(format!("cannot reshape {shape:?} to (N, {c}, {h}, {w})")));
                }
                self.tape.reshape(x, &[n, *c, *h, *w])?
            }
            Block::Flatten => {
                let rest = shape[1..].iter().product();
                self.tape.reshape(x, &[n, rest])?
            }
            Block::Upsample(UpMode::Nearest) => self.tape.upsample_nearest(x)?,
            Block::Upsample(UpMode::Bilinear) => self.tape.upsample_bilinear(x)?,
            Block::AvgPool => self.tape.avg_pool2(x)?,
            Block::GlobalAvgPool => self.tape.spatial_mean(x)?,
            Block::Bpm { path, m } => {
                let p = m.perturb(m.inp, m.out, m.layer, m.height, m.width);
                let mut y = self.perturb(x, &format!("{path}.p"), &p)?;
                if m.norm {
                    y = self.batch_norm(y, &format!("{path}.n"))?;
                }
                self.act(y, m.act)?
            }
            Block::Tpm { path, m } => {
                let up = self.tape.upsample_bilinear(x)?;
                let p = m.perturb(m.inp, m.out, m.layer, 2 * m.height, 2 * m.width);
                let mut y = self.perturb(up, &format!("{path}.p"), &p)?;
                if m.norm {
                    y = self.batch_norm(y, &format!("{path}.n"))?;
                }
                self.act(y, m.act)?
            }
            Block::Grpm { path, m } => {
                let p1 = m.perturb(m.inp, m.out, m.layer, m.height, m.width);
                let p2 = m.perturb(m.out, m.out, m.layer + 1, m.height, m.width);
                let mut h = self.perturb(x, &format!("{path}.p1"), &p1)?;
                if m.norm {
                    h = self.batch_norm(h, &format!("{path}.n1"))?;
                }
                h = self.act(h, m.act)?;
                h = self.perturb(h, &format!("{path}.p2"), &p2)?;
                if m.norm {
                    h = self.batch_norm(h, &format!("{path}.n2"))?;
                }
                let s = self.shortcut(x, path, m)?;
                let sum = self.tape.add(h, s)?;
                self.act(sum, m.act)?
            }
            Block::Drpm { path, m } => {
                let p1 = m.perturb(m.inp, m.out, m.layer, m.height, m.width);
                let p2 = m.perturb(m.out, m.out, m.layer + 1, m.height, m.width);
                let mut h = self.perturb(x, &format!("{path}.p1"), &p1)?;
                h = self.act(h, m.act)?;
                h = self.perturb(h, &format!("{path}.p2"), &p2)?;
                h = self.tape.avg_pool2(h)?;
                let s = self.shortcut(x, path, m)?;
                let s = self.tape.avg_pool2(s)?;
                let sum = self.tape.add(h, s)?;
                self.act(sum, m.act)?
            }
        })
    }

    /// Record `spec` applied to the batch `x`.
    pub fn run(&mut self, spec: &ModelSpec, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() != spec.input.len() + 1 || shape[1..] != spec.input[..] {
            return Err(Error::Model(format!(
                "{} expects per-sample input {:?}, got batch {shape:?}",
                spec.name, spec.input
            )));
        }
        let mut h = x;
        for (i, b) in spec.blocks.iter().enumerate() {
            h = self.block(i, b, h)?;
        }
        Ok(h)
    }
}

/// Everything needed to run one model: its description, parameters,
/// normalization buffers and masks.
#[derive(Clone, Debug)]
pub struct Net {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub buffers: Buffers,
    pub masks: MaskBank,
}

impl Net {
    pub fn new(spec: ModelSpec, init_seed: u64, masks: MaskConfig) -> Result<Self> {
        let params = ParamStore::init(&spec, init_seed);
        let buffers = crate::params::init_buffers(&spec);
        let masks = MaskBank::for_model(&spec, masks)?;
        Ok(Self {
            spec,
            params,
            buffers,
            masks,
        })
    }

    /// Record a forward pass with parameters bound from `bound`.
    pub fn forward_bound(&mut self, tape: &mut Tape, bound: &Bound, x: NodeId, mode: Mode) -> Result<NodeId> {
        Forward {
            tape,
            params: bound,
            masks: &self.masks,
            buffers: &mut self.buffers,
            mode,
        }
        .run(&self.spec, x)
    }

    /// Forward pass on a fresh tape, returning only the output value.
    pub fn infer(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params);
        let xi = tape.constant(x.clone());
        let y = self.forward_bound(&mut tape, &bound, xi, mode)?;
        Ok(tape.value(y).clone())
    }

    /// [`Net::infer`] in slices of at most `chunk` samples.
    pub fn infer_batched(&mut self, x: &Tensor, chunk: usize, mode: Mode) -> Result<Tensor> {
        let n = x.batch();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let count = chunk.min(n - start);
            parts.push(self.infer(&x.slice_batch(start, count)?, mode)?);
            start += count;
        }
        Ok(Tensor::concat_batch(&parts)?)
    }
}
