//! The six models: PGv1/v2/v3 and CG generators, PD and CD critics, plus the
//! small proxy classifier used for evaluation.

use crate::arch::{Act, Block, ModelSpec, ModuleSpec, Role, UpMode};
use crate::{Error, Result};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    PGv1,
    PGv2,
    PGv3,
    CG,
    PD,
    CD,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::PGv1,
        Variant::PGv2,
        Variant::PGv3,
        Variant::CG,
        Variant::PD,
        Variant::CD,
    ];

    pub fn role(self) -> Role {
        match self {
            Variant::PD | Variant::CD => Role::Critic,
            _ => Role::Generator,
        }
    }

    /// Spatial extent produced by the first linear layer of a generator.
    fn start_extent(self) -> usize {
        match self {
            Variant::PGv2 => 2,
            Variant::PGv3 => 1,
            _ => 4,
        }
    }

    /// Published trainable-parameter counts for the full-size models.
    pub fn reference_count(self) -> u64 {
        match self {
            Variant::CG => 11_540_480,
            Variant::PGv1 => 5_570_944,
            Variant::PGv2 => 5_833_088,
            Variant::PGv3 => 7_537_024,
            Variant::CD => 11_017_216,
            Variant::PD => 1_395_584,
        }
    }

    /// Published ratio of this variant's count to its baseline's.
    pub fn reference_ratio(self) -> Option<f64> {
        match self {
            Variant::PGv1 => Some(0.48),
            Variant::PGv2 => Some(0.51),
            Variant::PGv3 => Some(0.65),
            Variant::PD => Some(0.13),
            Variant::CG | Variant::CD => None,
        }
    }

    /// The baseline a variant is compared against.
    pub fn baseline(self) -> Variant {
        match self.role() {
            Role::Critic => Variant::CD,
            _ => Variant::CG,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Model(format!("unknown model variant {s:?} (PGv1, PGv2, PGv3, CG, PD, CD)")))
    }
}

/// Size knobs shared by all builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZooConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent: usize,
    /// Generator width at the 4x4 stage; halves at every upsampling after it.
    pub gen_width: usize,
    /// First critic width; doubles at every downsampling.
    pub critic_width: usize,
    pub masks_per_channel: usize,
    pub leaky_slope: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent: 128,
            gen_width: 1024,
            critic_width: 0,
            masks_per_channel: 1,
            leaky_slope: 0.2,
        }
    }
}

impl ZooConfig {
    fn critic_width(&self, v: Variant) -> usize {
        match (self.critic_width, v) {
            (0, Variant::CD) => 256,
            (0, _) => 128,
            (w, _) => w,
        }
    }
}

fn log2_exact(n: usize) -> Option<u32> {
    (n.is_power_of_two()).then(|| n.trailing_zeros())
}

/// Generator width at spatial extent `r`: `base` up to 4x4, halving per doubling after.
fn gen_width(base: usize, r: usize) -> usize {
    let halvings = log2_exact(r.max(4) / 4).unwrap_or(0);
    base >> halvings
}

pub fn build(v: Variant, cfg: &ZooConfig) -> Result<ModelSpec> {
    let s = cfg.image_size;
    if log2_exact(s).is_none() || s < 8 {
        return Err(Error::Model(format!("image size {s} must be a power of two >= 8")));
    }
    if cfg.masks_per_channel == 0 || cfg.latent == 0 || cfg.channels == 0 {
        return Err(Error::Model("latent, channels and masks per channel must be positive".into()));
    }
    match v {
        Variant::PGv1 | Variant::PGv2 | Variant::PGv3 | Variant::CG => generator(v, cfg),
        Variant::CD => conv_critic(cfg),
        Variant::PD => perturb_critic(cfg),
    }
}

fn generator(v: Variant, cfg: &ZooConfig) -> Result<ModelSpec> {
    let s = cfg.image_size;
    let base = cfg.gen_width;
    let last = gen_width(base, s);
    let halvings = log2_exact(s / 4).expect("power of two");
    if base == 0 || base % (1 << halvings) != 0 {
        return Err(Error::Model(format!(
            "generator width {base} cannot be halved down to a {s}x{s} stage"
        )));
    }
    let s0 = v.start_extent();
    let relu = Act::Relu;
    let mut blocks = vec![
        Block::Linear {
            path: "fc".into(),
            inp: cfg.latent,
            out: base * s0 * s0,
            bias: true,
        },
        Block::Reshape { shape: [base, s0, s0] },
        Block::BatchNorm {
            path: "fc.bn".into(),
            channels: base,
        },
        Block::Act(relu),
    ];
    let mut r = s0;
    let mut stage = 0;
    let mut layer = 0u32;
    while r < s {
        let (w_in, w_out) = (gen_width(base, r), gen_width(base, 2 * r));
        if v == Variant::CG {
            blocks.push(Block::Upsample(UpMode::Nearest));
            blocks.push(Block::Conv {
                path: format!("stage{stage}.conv"),
                inp: w_in,
                out: w_out,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            });
            blocks.push(Block::BatchNorm {
                path: format!("stage{stage}.bn"),
                channels: w_out,
            });
            blocks.push(Block::Act(relu));
        } else {
            let m = |inp, out, layer| ModuleSpec {
                inp,
                out,
                masks: cfg.masks_per_channel,
                act: relu,
                layer,
                height: r,
                width: r,
                norm: true,
            };
            blocks.push(Block::Grpm {
                path: format!("stage{stage}.res"),
                m: m(w_in, w_in, layer),
            });
            blocks.push(Block::Tpm {
                path: format!("stage{stage}.up"),
                m: m(w_in, w_out, layer + 2),
            });
            layer += 3;
        }
        r *= 2;
        stage += 1;
    }
    if v == Variant::CG {
        blocks.push(Block::Conv {
            path: "out.conv".into(),
            inp: last,
            out: cfg.channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: false,
        });
    } else {
        blocks.push(Block::Bpm {
            path: "out.bpm".into(),
            m: ModuleSpec {
                inp: last,
                out: last,
                masks: cfg.masks_per_channel,
                act: relu,
                layer,
                height: s,
                width: s,
                norm: true,
            },
        });
        blocks.push(Block::Combine {
            path: "out.rgb".into(),
            inp: last,
            out: cfg.channels,
            bias: false,
        });
    }
    blocks.push(Block::Act(Act::Tanh));
    Ok(ModelSpec {
        name: v.to_string(),
        role: Role::Generator,
        input: vec![cfg.latent],
        output: vec![cfg.channels, s, s],
        blocks,
    })
}

fn conv_critic(cfg: &ZooConfig) -> Result<ModelSpec> {
    let s = cfg.image_size;
    let d = cfg.critic_width(Variant::CD);
    let leaky = Act::LeakyRelu(cfg.leaky_slope);
    let mut blocks = Vec::new();
    let mut c = cfg.channels;
    for i in 0..3 {
        let out = d << i;
        blocks.push(Block::Conv {
            path: format!("conv{i}"),
            inp: c,
            out,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: false,
        });
        blocks.push(Block::Act(leaky));
        blocks.push(Block::AvgPool);
        c = out;
    }
    let r = s / 8;
    blocks.push(Block::Flatten);
    blocks.push(Block::Linear {
        path: "out".into(),
        inp: c * r * r,
        out: 1,
        bias: true,
    });
    Ok(ModelSpec {
        name: "CD".into(),
        role: Role::Critic,
        input: vec![cfg.channels, s, s],
        output: vec![1],
        blocks,
    })
}

fn perturb_critic(cfg: &ZooConfig) -> Result<ModelSpec> {
    let s = cfg.image_size;
    let d = cfg.critic_width(Variant::PD);
    let leaky = Act::LeakyRelu(cfg.leaky_slope);
    let mut blocks = Vec::new();
    let mut c = cfg.channels;
    let mut r = s;
    let mut i = 0;
    while r > 4 {
        let out = d << i;
        blocks.push(Block::Drpm {
            path: format!("block{i}"),
            m: ModuleSpec {
                inp: c,
                out,
                masks: cfg.masks_per_channel,
                act: leaky,
                layer: 2 * i as u32,
                height: r,
                width: r,
                norm: false,
            },
        });
        c = out;
        r /= 2;
        i += 1;
    }
    blocks.push(Block::GlobalAvgPool);
    blocks.push(Block::Linear {
        path: "out".into(),
        inp: c,
        out: 1,
        bias: true,
    });
    Ok(ModelSpec {
        name: "PD".into(),
        role: Role::Critic,
        input: vec![cfg.channels, s, s],
        output: vec![1],
        blocks,
    })
}

/// Two conv stages, global pooling and a linear read-out to `classes` logits.
pub fn proxy_classifier(image_size: usize, channels: usize, width: usize, classes: usize) -> Result<ModelSpec> {
    if image_size % 4 != 0 || classes < 2 || width == 0 {
        return Err(Error::Model(format!(
            "classifier needs image size divisible by 4 and >= 2 classes (got {image_size}, {classes})"
        )));
    }
    let leaky = Act::LeakyRelu(0.2);
    let blocks = vec![
        Block::Conv {
            path: "conv0".into(),
            inp: channels,
            out: width,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
        },
        Block::Act(leaky),
        Block::AvgPool,
        Block::Conv {
            path: "conv1".into(),
            inp: width,
            out: 2 * width,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
        },
        Block::Act(leaky),
        Block::AvgPool,
        Block::GlobalAvgPool,
        Block::Linear {
            path: "out".into(),
            inp: 2 * width,
            out: classes,
            bias: true,
        },
    ];
    Ok(ModelSpec {
        name: "proxy".into(),
        role: Role::Classifier,
        input: vec![channels, image_size, image_size],
        output: vec![classes],
        blocks,
    })
}

/// A TPM stage and the CG stage that plays the same role.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePair {
    pub perturb_path: String,
    pub perturb_count: u64,
    pub conv_path: String,
    pub conv_count: u64,
}

/// Pair each upsampling TPM of a PG model with the upsample-conv of CG at the
/// same position, and the final RGB combine with CG's final conv.
pub fn matched_stages(pg: &ModelSpec, cg: &ModelSpec) -> Vec<StagePair> {
    let count = |spec: &ModelSpec, path: &str| -> u64 {
        spec.params()
            .iter()
            .filter(|p| p.path.starts_with(&format!("{path}.")))
            .map(|p| p.count())
            .sum()
    };
    let tpms: Vec<(String, usize, usize)> = pg
        .blocks
        .iter()
        .filter_map(|b| match b {
            Block::Tpm { path, m } => Some((format!("{path}.p"), m.inp, m.out)),
            Block::Combine { path, inp, out, .. } => Some((path.clone(), *inp, *out)),
            _ => None,
        })
        .collect();
    let convs: Vec<(String, usize, usize)> = cg
        .blocks
        .iter()
        .filter_map(|b| match b {
            Block::Conv { path, inp, out, .. } => Some((path.clone(), *inp, *out)),
            _ => None,
        })
        .collect();
    // Align from the output end so the extra early stages of PGv2/v3 stay unmatched.
    tpms.iter()
        .rev()
        .zip(convs.iter().rev())
        .filter(|(t, c)| t.1 == c.1 && t.2 == c.2)
        .map(|(t, c)| StagePair {
            perturb_path: t.0.clone(),
            perturb_count: count(pg, &t.0),
            conv_path: c.0.clone(),
            conv_count: count(cg, &c.0),
        })
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_counts() {
        let cfg = ZooConfig::default();
        let pg = build(Variant::PGv1, &cfg).unwrap();
        let cg = build(Variant::CG, &cfg).unwrap();
        assert_eq!(pg.param_count(), 5_570_944);
        assert_eq!(cg.param_count(), 8_310_144);
        let fc = pg.params().into_iter().find(|p| p.path == "fc.weight").unwrap();
        assert_eq!(fc.count(), 2_097_152);
    }

    #[test]
    fn extra_stages_for_v2_v3() {
        let cfg = ZooConfig::default();
        let v1 = build(Variant::PGv1, &cfg).unwrap();
        let v2 = build(Variant::PGv2, &cfg).unwrap();
        let v3 = build(Variant::PGv3, &cfg).unwrap();
        assert_eq!(v2.module_count("grpm"), v1.module_count("grpm") + 1);
        assert_eq!(v2.module_count("tpm"), v1.module_count("tpm") + 1);
        assert_eq!(v3.module_count("grpm"), v1.module_count("grpm") + 2);
        assert_eq!(v3.module_count("tpm"), v1.module_count("tpm") + 2);
    }

    #[test]
    fn stage_pairs_obey_inverse_kernel_area() {
        let cfg = ZooConfig::default();
        let cg = build(Variant::CG, &cfg).unwrap();
        for v in [Variant::PGv1, Variant::PGv2, Variant::PGv3] {
            let pairs = matched_stages(&build(v, &cfg).unwrap(), &cg);
            assert_eq!(pairs.len(), 4, "{v}");
            for p in pairs {
                assert_eq!(p.perturb_count * 9, p.conv_count, "{p:?}");
            }
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        let mut cfg = ZooConfig::default();
        cfg.image_size = 24;
        assert!(build(Variant::PGv1, &cfg).is_err());
        cfg.image_size = 32;
        cfg.gen_width = 4;
        assert!(build(Variant::PGv1, &cfg).is_err());
        assert!(build(Variant::CD, &cfg).is_ok());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("pgv4".parse::<Variant>().is_err());
    }

    #[test]
    fn layer_ids_are_unique() {
        let spec = build(Variant::PGv3, &ZooConfig::default()).unwrap();
        let mut ids: Vec<u32> = spec.perturb_layers().iter().map(|p| p.spec.layer).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }
}
