//! Declarative model descriptions and their text form.
//!
//! An architecture file is a header of `key = value` lines followed by one
//! `[kind path]` section per block, each with its own `key = value` lines.
//! Blank lines and `#` comments are ignored. Example:
//!
//! ```text
//! model = PGv1
//! role = generator
//! input = 128
//! output = 3x32x32
//!
//! [linear fc]
//! in = 128
//! out = 16384
//! bias = true
//!
//! [reshape]
//! shape = 1024x4x4
//!
//! [grpm stage0.res]
//! in = 1024
//! out = 1024
//! size = 4x4
//! layer = 0
//! masks = 1
//! act = relu
//! norm = true
//! ```
//!
//! The SHA-256 of the rendered text identifies the architecture inside
//! checkpoints.

use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::fmt::{self, Write as _};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Critic,
    Classifier,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Critic => "critic",
            Role::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl fmt::Display for Act {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Act::Relu => f.write_str("relu"),
            Act::LeakyRelu(a) => write!(f, "leaky_relu({a})"),
            Act::Tanh => f.write_str("tanh"),
        }
    }
}

fn parse_act(s: &str) -> Option<Act> {
    match s {
        "relu" => Some(Act::Relu),
        "tanh" => Some(Act::Tanh),
        _ => {
            let inner = s.strip_prefix("leaky_relu(")?.strip_suffix(')')?;
            inner.parse().ok().map(Act::LeakyRelu)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpMode {
    Nearest,
    Bilinear,
}

/// One perturbation layer: `combine(act(x + masks))`.
///
/// `height` x `width` is the extent the masks are added at (for a TPM that is
/// the upsampled extent). Channel `i`, copy `j` uses mask channel `i * masks + j`
/// of layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbSpec {
    pub inp: usize,
    pub out: usize,
    pub masks: usize,
    pub act: Act,
    pub layer: u32,
    pub height: usize,
    pub width: usize,
    pub bias: bool,
}

impl PerturbSpec {
    pub fn mask_channels(&self) -> usize {
        self.inp * self.masks
    }

    pub fn param_count(&self) -> u64 {
        (self.out * self.mask_channels() + if self.bias { self.out } else { 0 }) as u64
    }
}

/// Residual and basic perturbation modules share these fields. For modules
/// with two perturbation layers the first maps `inp -> out`, the second
/// `out -> out`, and they use layer ids `layer` and `layer + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModuleSpec {
    pub inp: usize,
    pub out: usize,
    pub masks: usize,
    pub act: Act,
    pub layer: u32,
    /// Input extent of the module.
    pub height: usize,
    pub width: usize,
    pub norm: bool,
}

impl ModuleSpec {
    pub fn perturb(&self, inp: usize, out: usize, layer: u32, height: usize, width: usize) -> PerturbSpec {
        PerturbSpec {
            inp,
            out,
            masks: self.masks,
            act: self.act,
            layer,
            height,
            width,
            bias: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    /// `(N, in) -> (N, out)`.
    Linear { path: String, inp: usize, out: usize, bias: bool },
    /// 1x1 combination over channels.
    Combine { path: String, inp: usize, out: usize, bias: bool },
    Conv {
        path: String,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Perturb { path: String, spec: PerturbSpec },
    /// Non-affine batch normalization with running statistics under `path`.
    BatchNorm { path: String, channels: usize },
    Act(Act),
    Reshape { shape: [usize; 3] },
    Flatten,
    Upsample(UpMode),
    AvgPool,
    GlobalAvgPool,
    /// Perturbation layer, optional normalization, activation.
    Bpm { path: String, m: ModuleSpec },
    /// Bilinear 2x upsample, perturbation layer at the doubled extent, optional normalization, activation.
    Tpm { path: String, m: ModuleSpec },
    /// `act(norm(P2(act(norm(P1 x)))) + shortcut(x))`.
    Grpm { path: String, m: ModuleSpec },
    /// `act(pool(P2(act(P1 x))) + pool(shortcut(x)))`; never normalized.
    Drpm { path: String, m: ModuleSpec },
}

impl Block {
    pub fn kind(&self) -> &'static str {
        match self {
            Block::Linear { .. } => "linear",
            Block::Combine { .. } => "combine",
            Block::Conv { .. } => "conv",
            Block::Perturb { .. } => "perturb",
            Block::BatchNorm { .. } => "batchnorm",
            Block::Act(_) => "act",
            Block::Reshape { .. } => "reshape",
            Block::Flatten => "flatten",
            Block::Upsample(_) => "upsample",
            Block::AvgPool => "avgpool",
            Block::GlobalAvgPool => "global_avgpool",
            Block::Bpm { .. } => "bpm",
            Block::Tpm { .. } => "tpm",
            Block::Grpm { .. } => "grpm",
            Block::Drpm { .. } => "drpm",
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            Block::Linear { path, .. }
            | Block::Combine { path, .. }
            | Block::Conv { path, .. }
            | Block::Perturb { path, .. }
            | Block::BatchNorm { path, .. }
            | Block::Bpm { path, .. }
            | Block::Tpm { path, .. }
            | Block::Grpm { path, .. }
            | Block::Drpm { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn is_module(&self) -> bool {
        matches!(self, Block::Bpm { .. } | Block::Tpm { .. } | Block::Grpm { .. } | Block::Drpm { .. })
    }
}

/// Trainable tensor declared by a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub path: String,
    pub shape: Vec<usize>,
    /// Fan-in for initialization; zero means "initialize to zero".
    pub fan_in: usize,
}

impl ParamDecl {
    fn weight(path: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self { path, shape, fan_in }
    }

    fn bias(path: String, n: usize) -> Self {
        Self {
            path,
            shape: vec![n],
            fan_in: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

/// A perturbation layer placed in a model, with the path its weights live under.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedPerturb {
    pub path: String,
    pub spec: PerturbSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub role: Role,
    /// Per-sample input shape: `[latent]` for generators, `[C, H, W]` otherwise.
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub blocks: Vec<Block>,
}

fn linear_params(out: &mut Vec<ParamDecl>, path: &str, inp: usize, o: usize, bias: bool) {
    out.push(ParamDecl::weight(format!("{path}.weight"), vec![o, inp], inp));
    if bias {
        out.push(ParamDecl::bias(format!("{path}.bias"), o));
    }
}

impl ModelSpec {
    /// Every perturbation layer, in forward order, with module sub-paths expanded.
    pub fn perturb_layers(&self) -> Vec<PlacedPerturb> {
        let mut v = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Perturb { path, spec } => v.push(PlacedPerturb {
                    path: path.clone(),
                    spec: *spec,
                }),
                Block::Bpm { path, m } => v.push(PlacedPerturb {
                    path: format!("{path}.p"),
                    spec: m.perturb(m.inp, m.out, m.layer, m.height, m.width),
                }),
                Block::Tpm { path, m } => v.push(PlacedPerturb {
                    path: format!("{path}.p"),
                    spec: m.perturb(m.inp, m.out, m.layer, 2 * m.height, 2 * m.width),
                }),
                Block::Grpm { path, m } | Block::Drpm { path, m } => {
                    v.push(PlacedPerturb {
                        path: format!("{path}.p1"),
                        spec: m.perturb(m.inp, m.out, m.layer, m.height, m.width),
                    });
                    v.push(PlacedPerturb {
                        path: format!("{path}.p2"),
                        spec: m.perturb(m.out, m.out, m.layer + 1, m.height, m.width),
                    });
                }
                _ => {}
            }
        }
        v
    }

    /// Trainable parameters in forward order.
    pub fn params(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Linear { path, inp, out: o, bias } | Block::Combine { path, inp, out: o, bias } => {
                    linear_params(&mut out, path, *inp, *o, *bias)
                }
                Block::Conv {
                    path,
                    inp,
                    out: o,
                    kernel,
                    bias,
                    ..
                } => {
                    out.push(ParamDecl::weight(
                        format!("{path}.weight"),
                        vec![*o, *inp, *kernel, *kernel],
                        inp * kernel * kernel,
                    ));
                    if *bias {
                        out.push(ParamDecl::bias(format!("{path}.bias"), *o));
                    }
                }
                Block::Perturb { path, spec } => {
                    linear_params(&mut out, path, spec.mask_channels(), spec.out, spec.bias)
                }
                Block::Bpm { path, m } | Block::Tpm { path, m } => {
                    linear_params(&mut out, &format!("{path}.p"), m.inp * m.masks, m.out, false)
                }
                Block::Grpm { path, m } | Block::Drpm { path, m } => {
                    linear_params(&mut out, &format!("{path}.p1"), m.inp * m.masks, m.out, false);
                    linear_params(&mut out, &format!("{path}.p2"), m.out * m.masks, m.out, false);
                    if m.inp != m.out {
                        linear_params(&mut out, &format!("{path}.shortcut"), m.inp, m.out, false);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Batch-norm paths with their channel counts, in forward order.
    pub fn norms(&self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for b in &self.blocks {
            match b {
                Block::BatchNorm { path, channels } => v.push((path.clone(), *channels)),
                Block::Bpm { path, m } | Block::Tpm { path, m } if m.norm => v.push((format!("{path}.n"), m.out)),
                Block::Grpm { path, m } if m.norm => {
                    v.push((format!("{path}.n1"), m.out));
                    v.push((format!("{path}.n2"), m.out));
                }
                _ => {}
            }
        }
        v
    }

    pub fn param_count(&self) -> u64 {
        self.params().iter().map(ParamDecl::count).sum()
    }

    pub fn module_count(&self, kind: &str) -> usize {
        self.blocks.iter().filter(|b| b.kind() == kind).count()
    }

    /// Canonical text form; `parse(render())` returns an equal spec.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let dims = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(s, "model = {}", self.name);
        let _ = writeln!(s, "role = {}", self.role.as_str());
        let _ = writeln!(s, "input = {}", dims(&self.input));
        let _ = writeln!(s, "output = {}", dims(&self.output));
        for b in &self.blocks {
            s.push('\n');
            match b.path() {
                Some(p) => {
                    let _ = writeln!(s, "[{} {p}]", b.kind());
                }
                None => {
                    let _ = writeln!(s, "[{}]", b.kind());
                }
            }
            let mut kv = |k: &str, v: String| {
                let _ = writeln!(s, "{k} = {v}");
            };
            match b {
                Block::Linear { inp, out, bias, .. } | Block::Combine { inp, out, bias, .. } => {
                    kv("in", inp.to_string());
                    kv("out", out.to_string());
                    kv("bias", bias.to_string());
                }
                Block::Conv {
                    inp,
                    out,
                    kernel,
                    stride,
                    pad,
                    bias,
                    ..
                } => {
                    kv("in", inp.to_string());
                    kv("out", out.to_string());
                    kv("kernel", kernel.to_string());
                    kv("stride", stride.to_string());
                    kv("pad", pad.to_string());
                    kv("bias", bias.to_string());
                }
                Block::Perturb { spec, .. } => {
                    kv("in", spec.inp.to_string());
                    kv("out", spec.out.to_string());
                    kv("size", format!("{}x{}", spec.height, spec.width));
                    kv("layer", spec.layer.to_string());
                    kv("masks", spec.masks.to_string());
                    kv("act", spec.act.to_string());
                    kv("bias", spec.bias.to_string());
                }
                Block::BatchNorm { channels, .. } => kv("channels", channels.to_string()),
                Block::Act(a) => kv("fn", a.to_string()),
                Block::Reshape { shape } => kv("shape", dims(shape)),
                Block::Upsample(m) => kv(
                    "mode",
                    match m {
                        UpMode::Nearest => "nearest",
                        UpMode::Bilinear => "bilinear",
                    }
                    .into(),
                ),
                Block::Flatten | Block::AvgPool | Block::GlobalAvgPool => {}
                Block::Bpm { m, .. } | Block::Tpm { m, .. } | Block::Grpm { m, .. } | Block::Drpm { m, .. } => {
                    kv("in", m.inp.to_string());
                    kv("out", m.out.to_string());
                    kv("size", format!("{}x{}", m.height, m.width));
                    kv("layer", m.layer.to_string());
                    kv("masks", m.masks.to_string());
                    kv("act", m.act.to_string());
                    kv("norm", m.norm.to_string());
                }
            }
        }
        s
    }

    /// Lowercase hex SHA-256 of [`ModelSpec::render`].
    pub fn hash(&self) -> String {
        text_hash(&self.render())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Parser::default().run(text)
    }
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn arch_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Arch(format!("line {line}: {msg}"))
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.trim().parse().ok()).collect()
}

#[derive(Default)]
struct Section {
    kind: String,
    path: Option<String>,
    line: usize,
    kv: Vec<(String, String, usize)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Result<String> {
        match self.kv.iter().position(|(k, _, _)| k == key) {
            Some(i) => Ok(self.kv.remove(i).1),
            None => Err(arch_err(self.line, format!("[{}] is missing `{key}`", self.kind))),
        }
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| arch_err(self.line, format!("`{key}` = {v:?} is not a valid number")))
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| arch_err(self.line, format!("`{key}` = {v:?} is not true/false")))
    }

    fn act(&mut self, key: &str) -> Result<Act> {
        let v = self.take(key)?;
        parse_act(&v).ok_or_else(|| arch_err(self.line, format!("unknown activation {v:?}")))
    }

    fn size(&mut self) -> Result<(usize, usize)> {
        let v = self.take("size")?;
        match parse_dims(&v).as_deref() {
            Some(&[h, w]) => Ok((h, w)),
            _ => Err(arch_err(self.line, format!("size {v:?} is not HxW"))),
        }
    }

    fn path(&self) -> Result<String> {
        self.path
            .clone()
            .ok_or_else(|| arch_err(self.line, format!("[{}] needs a path", self.kind)))
    }

    fn module(&mut self) -> Result<ModuleSpec> {
        let (height, width) = self.size()?;
        Ok(ModuleSpec {
            inp: self.num("in")?,
            out: self.num("out")?,
            masks: self.num("masks")?,
            act: self.act("act")?,
            layer: self.num("layer")?,
            height,
            width,
            norm: self.flag("norm")?,
        })
    }

    fn finish(self, block: Block) -> Result<Block> {
        if let Some((k, _, line)) = self.kv.first() {
            return Err(arch_err(*line, format!("unknown key `{k}` in [{}]", self.kind)));
        }
        Ok(block)
    }

    fn block(mut self) -> Result<Block> {
        let b = match self.kind.as_str() {
            "linear" | "combine" => {
                let (path, inp, out, bias) = (self.path()?, self.num("in")?, self.num("out")?, self.flag("bias")?);
                if self.kind == "linear" {
                    Block::Linear { path, inp, out, bias }
                } else {
                    Block::Combine { path, inp, out, bias }
                }
            }
            "conv" => Block::Conv {
                path: self.path()?,
                inp: self.num("in")?,
                out: self.num("out")?,
                kernel: self.num("kernel")?,
                stride: self.num("stride")?,
                pad: self.num("pad")?,
                bias: self.flag("bias")?,
            },
            "perturb" => {
                let (height, width) = self.size()?;
                Block::Perturb {
                    path: self.path()?,
                    spec: PerturbSpec {
                        inp: self.num("in")?,
                        out: self.num("out")?,
                        masks: self.num("masks")?,
                        act: self.act("act")?,
                        layer: self.num("layer")?,
                        height,
                        width,
                        bias: self.flag("bias")?,
                    },
                }
            }
            "batchnorm" => Block::BatchNorm {
                path: self.path()?,
                channels: self.num("channels")?,
            },
            "act" => Block::Act(self.act("fn")?),
            "reshape" => {
                let v = self.take("shape")?;
                match parse_dims(&v).as_deref() {
                    Some(&[c, h, w]) => Block::Reshape { shape: [c, h, w] },
                    _ => return Err(arch_err(self.line, format!("shape {v:?} is not CxHxW"))),
                }
            }
            "upsample" => match self.take("mode")?.as_str() {
                "nearest" => Block::Upsample(UpMode::Nearest),
                "bilinear" => Block::Upsample(UpMode::Bilinear),
                m => return Err(arch_err(self.line, format!("unknown upsample mode {m:?}"))),
            },
            "flatten" => Block::Flatten,
            "avgpool" => Block::AvgPool,
            "global_avgpool" => Block::GlobalAvgPool,
            "bpm" => Block::Bpm {
                path: self.path()?,
                m: self.module()?,
            },
            "tpm" => Block::Tpm {
                path: self.path()?,
                m: self.module()?,
            },
            "grpm" => Block::Grpm {
                path: self.path()?,
                m: self.module()?,
            },
            "drpm" => Block::Drpm {
                path: self.path()?,
                m: self.module()?,
            },
            k => return Err(arch_err(self.line, format!("unknown block kind {k:?}"))),
        };
        self.finish(b)
    }
}

#[derive(Default)]
struct Parser {
    header: Vec<(String, String, usize)>,
    sections: Vec<Section>,
}

impl Parser {
    fn run(mut self, text: &str) -> Result<ModelSpec> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(inner) = l.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| arch_err(line, "unterminated section header"))?;
                let mut words = inner.split_whitespace();
                let kind = words.next().ok_or_else(|| arch_err(line, "empty section header"))?;
                let path = words.next().map(str::to_string);
                if words.next().is_some() {
                    return Err(arch_err(line, "section header is `[kind path]`"));
                }
                self.sections.push(Section {
                    kind: kind.to_string(),
                    path,
                    line,
                    kv: Vec::new(),
                });
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| arch_err(line, format!("expected `key = value`, got {l:?}")))?;
            let entry = (k.trim().to_string(), v.trim().to_string(), line);
            match self.sections.last_mut() {
                Some(s) => {
                    if s.kv.iter().any(|(k, _, _)| *k == entry.0) {
                        return Err(arch_err(line, format!("duplicate key `{}`", entry.0)));
                    }
                    s.kv.push(entry)
                }
                None => self.header.push(entry),
            }
        }
        let mut head = Section {
            kind: "header".into(),
            path: None,
            line: 1,
            kv: std::mem::take(&mut self.header),
        };
        let name = head.take("model")?;
        let role = match head.take("role")?.as_str() {
            "generator" => Role::Generator,
            "critic" => Role::Critic,
            "classifier" => Role::Classifier,
            r => return Err(arch_err(1, format!("unknown role {r:?}"))),
        };
        let dims = |s: String| parse_dims(&s).ok_or_else(|| arch_err(1, format!("bad shape {s:?}")));
        let input = dims(head.take("input")?)?;
        let output = dims(head.take("output")?)?;
        if let Some((k, _, line)) = head.kv.first() {
            return Err(arch_err(*line, format!("unknown header key `{k}`")));
        }
        let blocks = self.sections.into_iter().map(Section::block).collect::<Result<_>>()?;
        Ok(ModelSpec {
            name,
            role,
            input,
            output,
            blocks,
        })
    }
}
