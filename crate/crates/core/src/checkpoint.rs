//! Checkpoint files.
//!
//! Layout (little-endian): magic `PGCK`, `u16` version, then length-prefixed
//! UTF-8 config text, generator architecture text and hash, critic
//! architecture text and hash, `u64` iteration, `u64` mask seed, the two Adam
//! step counters, and eight archives: generator parameters, buffers, first and
//! second moments, then the same for the critic. Noise masks are never
//! written; they are re-derived from the mask seed on load.

use crate::arch::ModelSpec;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::layers::Net;
use crate::params::{read_u32, Buffers, ParamStore};
use crate::trainer::{AdamState, Trainer};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u16 = 1;

/// Stored state of one network.
#[derive(Clone, Debug)]
pub struct NetState {
    pub spec: ModelSpec,
    pub hash: String,
    pub params: ParamStore,
    pub buffers: Buffers,
    pub adam: AdamState,
}

impl NetState {
    fn of(net: &Net, adam: &AdamState) -> Self {
        Self {
            spec: net.spec.clone(),
            hash: net.spec.hash(),
            params: net.params.clone(),
            buffers: net.buffers.clone(),
            adam: adam.clone(),
        }
    }

    pub fn bit_eq(&self, o: &Self) -> bool {
        self.spec == o.spec
            && self.hash == o.hash
            && self.params.bit_eq(&o.params)
            && self.buffers.bit_eq(&o.buffers)
            && self.adam.bit_eq(&o.adam)
    }

    /// Rebuild the network, deriving its masks from `masks`.
    pub fn to_net(&self, masks: crate::layers::MaskConfig) -> Result<Net> {
        let mut net = Net::new(self.spec.clone(), 0, masks)?;
        self.params.check_against(&self.spec)?;
        net.params = self.params.clone();
        net.buffers = self.buffers.clone();
        Ok(net)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub mask_seed: u64,
    pub gen: NetState,
    pub critic: NetState,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Checkpoint(format!("text field of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("text field is not UTF-8".into()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.cfg.clone(),
            iteration: t.iteration,
            mask_seed: t.cfg.mask_seed,
            gen: NetState::of(&t.gen, &t.gen_adam),
            critic: NetState::of(&t.critic, &t.critic_adam),
        }
    }

    pub fn bit_eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.iteration == o.iteration
            && self.mask_seed == o.mask_seed
            && self.gen.bit_eq(&o.gen)
            && self.critic.bit_eq(&o.critic)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.config.render())?;
        for s in [&self.gen, &self.critic] {
            write_str(w, &s.spec.render())?;
            write_str(w, &s.hash)?;
        }
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.mask_seed.to_le_bytes())?;
        w.write_all(&self.gen.adam.step.to_le_bytes())?;
        w.write_all(&self.critic.adam.step.to_le_bytes())?;
        for s in [&self.gen, &self.critic] {
            for store in [&s.params, &s.buffers, &s.adam.m, &s.adam.v] {
                store.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {VERSION}"
            )));
        }
        let config = TrainConfig::parse(&read_str(r)?)?;
        let mut specs = Vec::new();
        for _ in 0..2 {
            let spec = ModelSpec::parse(&read_str(r)?)?;
            let stored = read_str(r)?;
            let found = spec.hash();
            if stored != found {
                return Err(Error::HashMismatch {
                    model: spec.name.clone(),
                    stored,
                    found,
                });
            }
            specs.push((spec, stored));
        }
        let iteration = read_u64(r)?;
        let mask_seed = read_u64(r)?;
        let steps = [read_u64(r)?, read_u64(r)?];
        let mut states = Vec::new();
        for ((spec, hash), step) in specs.into_iter().zip(steps) {
            let mut stores: Vec<ParamStore> = Vec::new();
            for _ in 0..4 {
                stores.push(ParamStore::read_from(r)?);
            }
            let [params, buffers, m, v]: [ParamStore; 4] = stores.try_into().expect("four stores");
            params.check_against(&spec)?;
            for (name, other) in [("first moments", &m), ("second moments", &v)] {
                let shapes_match = params.len() == other.len()
                    && params.iter().zip(other.iter()).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape());
                if !shapes_match {
                    return Err(Error::Checkpoint(format!("{} {name} do not match its parameters", spec.name)));
                }
            }
            states.push(NetState {
                spec,
                hash,
                params,
                buffers,
                adam: AdamState { m, v, step },
            });
        }
        let critic = states.pop().expect("two states");
        let gen = states.pop().expect("two states");
        Ok(Self {
            config,
            iteration,
            mask_seed,
            gen,
            critic,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Compare architecture files against the hashes held in the checkpoint.
    pub fn verify_arch(&self, generator: Option<&Path>, critic: Option<&Path>) -> Result<()> {
        for (file, state) in [(generator, &self.gen), (critic, &self.critic)] {
            let Some(file) = file else { continue };
            let found = ModelSpec::parse(&std::fs::read_to_string(file)?)?.hash();
            if found != state.hash {
                return Err(Error::HashMismatch {
                    model: state.spec.name.clone(),
                    stored: state.hash.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// [`Checkpoint::load`], then check `generator.arch` / `critic.arch` next to
    /// the file (when present) and any architecture files named in the config.
    pub fn load_verified(path: &Path) -> Result<Self> {
        let ck = Self::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let near = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        ck.verify_arch(near("generator.arch").as_deref(), near("critic.arch").as_deref())?;
        ck.verify_arch(ck.config.generator_arch.as_deref(), ck.config.critic_arch.as_deref())?;
        Ok(ck)
    }

    /// A trainer positioned after `self.iteration` iterations. Masks are re-derived.
    pub fn into_trainer(self, cfg: TrainConfig, data: Dataset) -> Result<Trainer> {
        let diff = self.config.trajectory_diff(&cfg);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "resume config differs from the checkpoint in {}",
                diff.join(", ")
            )));
        }
        let masks = cfg.mask_config();
        let gen = self.gen.to_net(masks)?;
        let critic = self.critic.to_net(masks)?;
        Trainer::from_parts(
            cfg,
            gen,
            critic,
            Some((self.gen.adam, self.critic.adam)),
            self.iteration,
            data,
        )
    }
}
