//! Training configuration: a flat `key = value` file with `#` comments.

use crate::data::{self, Dataset, SynthKind};
use crate::zoo::{Variant, ZooConfig};
use crate::{Error, Result};
use pgan_noise::{DistKind, RngKind};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetRef {
    Synth(SynthKind),
    /// A CIFAR-10 batch file or a directory of them.
    Cifar10(PathBuf),
    /// A directory holding `images.ptns` and `labels.ptns` as written by `make-synth`.
    Ptns(PathBuf),
}

impl std::fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetRef::Synth(k) => write!(f, "{k}"),
            DatasetRef::Cifar10(p) => write!(f, "cifar10:{}", p.display()),
            DatasetRef::Ptns(p) => write!(f, "ptns:{}", p.display()),
        }
    }
}

impl FromStr for DatasetRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("cifar10:") {
            Ok(DatasetRef::Cifar10(p.into()))
        } else if let Some(p) = s.strip_prefix("ptns:") {
            Ok(DatasetRef::Ptns(p.into()))
        } else {
            Ok(DatasetRef::Synth(s.parse()?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: Variant,
    pub critic: Variant,
    pub image_size: usize,
    pub gen_width: usize,
    /// 0 picks the variant's default.
    pub critic_width: usize,
    pub masks_per_channel: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub n_critic: usize,
    pub gp_lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: u64,
    /// Seeds parameter initialization and the per-iteration latent/interpolation streams.
    pub seed: u64,
    pub mask_seed: u64,
    pub rng_kind: RngKind,
    pub dist_kind: DistKind,
    pub dataset: DatasetRef,
    pub dataset_size: usize,
    pub data_seed: u64,
    /// Evaluate the moment distance every this many iterations (0 = never).
    pub eval_every: u64,
    pub eval_images: usize,
    pub sample_every: u64,
    pub checkpoint_every: u64,
    /// Architecture files that replace the zoo builds.
    pub generator_arch: Option<PathBuf>,
    pub critic_arch: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: Variant::PGv1,
            critic: Variant::CD,
            image_size: 32,
            gen_width: 1024,
            critic_width: 0,
            masks_per_channel: 1,
            batch_size: 64,
            latent_dim: 128,
            n_critic: 5,
            gp_lambda: 10.0,
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            adam_eps: 1e-8,
            iterations: 1000,
            seed: 0,
            mask_seed: 0,
            rng_kind: RngKind::Mt19937,
            dist_kind: DistKind::Snd,
            dataset: DatasetRef::Synth(SynthKind::TwoMode),
            dataset_size: 1024,
            data_seed: 0,
            eval_every: 100,
            eval_images: 1024,
            sample_every: 0,
            checkpoint_every: 0,
            generator_arch: None,
            critic_arch: None,
        }
    }
}

/// Keys that change the training trajectory. A resumed run must agree on all of them.
pub const TRAJECTORY_KEYS: &[&str] = &[
    "generator",
    "critic",
    "image_size",
    "gen_width",
    "critic_width",
    "masks_per_channel",
    "batch_size",
    "latent_dim",
    "n_critic",
    "gp_lambda",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "mask_seed",
    "rng_kind",
    "dist_kind",
    "dataset",
    "dataset_size",
    "data_seed",
];

fn parse_val<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value {v:?} for {key}: {e}")))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {body:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {line}: {k} given twice")));
            }
            c.set(line, k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = Self::parse(&text)?;
        // Relative architecture paths are taken from the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.generator_arch, &mut c.critic_arch].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    fn set(&mut self, line: usize, k: &str, v: &str) -> Result<()> {
        match k {
            "generator" => self.generator = parse_val(line, k, v)?,
            "critic" => self.critic = parse_val(line, k, v)?,
            "image_size" => self.image_size = parse_val(line, k, v)?,
            "gen_width" => self.gen_width = parse_val(line, k, v)?,
            "critic_width" => self.critic_width = parse_val(line, k, v)?,
            "masks_per_channel" => self.masks_per_channel = parse_val(line, k, v)?,
            "batch_size" => self.batch_size = parse_val(line, k, v)?,
            "latent_dim" => self.latent_dim = parse_val(line, k, v)?,
            "n_critic" => self.n_critic = parse_val(line, k, v)?,
            "gp_lambda" => self.gp_lambda = parse_val(line, k, v)?,
            "lr" => self.lr = parse_val(line, k, v)?,
            "beta1" => self.beta1 = parse_val(line, k, v)?,
            "beta2" => self.beta2 = parse_val(line, k, v)?,
            "adam_eps" => self.adam_eps = parse_val(line, k, v)?,
            "iterations" => self.iterations = parse_val(line, k, v)?,
            "seed" => self.seed = parse_val(line, k, v)?,
            "mask_seed" => self.mask_seed = parse_val(line, k, v)?,
            "rng_kind" => self.rng_kind = parse_val(line, k, v)?,
            "dist_kind" => self.dist_kind = parse_val(line, k, v)?,
            "dataset" => self.dataset = parse_val(line, k, v)?,
            "dataset_size" => self.dataset_size = parse_val(line, k, v)?,
            "data_seed" => self.data_seed = parse_val(line, k, v)?,
            "eval_every" => self.eval_every = parse_val(line, k, v)?,
            "eval_images" => self.eval_images = parse_val(line, k, v)?,
            "sample_every" => self.sample_every = parse_val(line, k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_val(line, k, v)?,
            "generator_arch" => self.generator_arch = Some(v.into()),
            "critic_arch" => self.critic_arch = Some(v.into()),
            "workers" => {
                if v != "1" {
                    return Err(Error::Config(format!(
                        "line {line}: only workers = 1 is supported (deterministic single-worker mode)"
                    )));
                }
            }
            "precision" => {
                if v != "64" {
                    return Err(Error::Config(format!("line {line}: only precision = 64 is supported")));
                }
            }
            _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.n_critic < 1 {
            return bad("n_critic must be >= 1".into());
        }
        if self.latent_dim == 0 || self.dataset_size == 0 {
            return bad("latent_dim and dataset_size must be positive".into());
        }
        if self.generator.role() != crate::arch::Role::Generator {
            return bad(format!("{} is not a generator", self.generator));
        }
        if self.critic.role() != crate::arch::Role::Critic {
            return bad(format!("{} is not a critic", self.critic));
        }
        for (name, v) in [("gp_lambda", self.gp_lambda), ("lr", self.lr), ("adam_eps", self.adam_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.eval_every > 0 && self.eval_images < 2 {
            return bad("eval_images must be >= 2".into());
        }
        Ok(())
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("generator", self.generator.to_string()),
            ("critic", self.critic.to_string()),
            ("image_size", self.image_size.to_string()),
            ("gen_width", self.gen_width.to_string()),
            ("critic_width", self.critic_width.to_string()),
            ("masks_per_channel", self.masks_per_channel.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("n_critic", self.n_critic.to_string()),
            ("gp_lambda", format!("{:?}", self.gp_lambda)),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("iterations", self.iterations.to_string()),
            ("seed", self.seed.to_string()),
            ("mask_seed", self.mask_seed.to_string()),
            ("rng_kind", self.rng_kind.to_string()),
            ("dist_kind", self.dist_kind.to_string()),
            ("dataset", self.dataset.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_images", self.eval_images.to_string()),
            ("sample_every", self.sample_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        if let Some(p) = &self.generator_arch {
            v.push(("generator_arch", p.display().to_string()));
        }
        if let Some(p) = &self.critic_arch {
            v.push(("critic_arch", p.display().to_string()));
        }
        v
    }

    /// Keys whose values differ between `self` and `other`, limited to [`TRAJECTORY_KEYS`].
    pub fn trajectory_diff(&self, other: &Self) -> Vec<&'static str> {
        let a = self.pairs();
        let b = other.pairs();
        TRAJECTORY_KEYS
            .iter()
            .copied()
            .filter(|k| {
                let find = |p: &[(&str, String)]| p.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone());
                find(&a) != find(&b)
            })
            .collect()
    }

    pub fn zoo(&self) -> ZooConfig {
        ZooConfig {
            image_size: self.image_size,
            latent: self.latent_dim,
            gen_width: self.gen_width,
            critic_width: self.critic_width,
            masks_per_channel: self.masks_per_channel,
            ..ZooConfig::default()
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetRef::Synth(kind) => data::synth(*kind, self.dataset_size, self.image_size, 3, self.data_seed)?,
            DatasetRef::Cifar10(p) => data::load_cifar10(p)?,
            DatasetRef::Ptns(dir) => data::load_ptns_dir(dir)?,
        };
        if ds.image_size() != self.image_size || ds.channels() != 3 {
            return Err(Error::Data(format!(
                "dataset holds {:?} images, config wants 3x{}x{}",
                &ds.images.shape()[1..],
                self.image_size,
                self.image_size
            )));
        }
        if ds.len() < self.batch_size {
            return Err(Error::Data(format!(
                "dataset of {} images is smaller than one batch of {}",
                ds.len(),
                self.batch_size
            )));
        }
        Ok(ds)
    }
}
