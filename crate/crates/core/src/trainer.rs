//! WGAN-GP training with Adam.
//!
//! Every random draw of iteration `t` comes from an MT19937 stream seeded by
//! `seed_mix(seed, ITER_DOMAIN, t)`, and batch `b` of the run reads a fixed
//! slot of the epoch permutation, so a run restarted from any checkpoint
//! replays the remaining iterations bit for bit.

use crate::arch::ModelSpec;
use crate::config::TrainConfig;
use crate::data::{write_ppm, Dataset};
use crate::layers::{bind, ordered, MaskConfig, Mode, Net};
use crate::metrics::{pixel_moment_distance, ProxyClassifier};
use crate::params::ParamStore;
use crate::zoo::build;
use crate::{Error, Result};
use pgan_noise::{seed_mix, RngKind, RngState};
use pgan_tensor::{gradient, gradient_penalty, NodeId, Tape, Tensor};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const ITER_DOMAIN: u32 = 0x17E2;
pub const SHUFFLE_DOMAIN: u32 = 0x5F1E;
pub const MODEL_DOMAIN: u32 = 0x30DE;
pub const EVAL_DOMAIN: u32 = 0xE7A1;
pub const SAMPLE_DOMAIN: u32 = 0x5A4E;

/// Images per sample grid.
pub const SAMPLE_GRID: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step && self.m.bit_eq(&other.m) && self.v.bit_eq(&other.v)
    }
}

/// One bias-corrected Adam update. `grads` follows the store's order.
///
/// Nothing is modified unless every gradient has the right shape and is finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Model(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((path, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Model(format!(
                "gradient for {path} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                iteration: state.step + 1,
                what: format!("gradient of {path}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let moments = state.m.values_mut().zip(state.v.values_mut());
    for ((p, g), (m, v)) in params.values_mut().zip(grads).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Loss nodes recorded by [`wgan_gp_losses`].
#[derive(Clone, Copy, Debug)]
pub struct GpLosses {
    pub d_loss: NodeId,
    pub g_loss: NodeId,
    /// `lambda * penalty`; absent when `lambda` is zero.
    pub gp_term: Option<NodeId>,
}

/// Record the WGAN-GP critic and generator losses.
///
/// `critic` maps an image batch node to per-sample scores. `real` and `fake`
/// must have equal shapes; the interpolates are `eps_n * real_n + (1 - eps_n) * fake_n`.
pub fn wgan_gp_losses<F>(
    tape: &mut Tape,
    mut critic: F,
    real: NodeId,
    fake: NodeId,
    eps: &[f64],
    lambda: f64,
) -> Result<GpLosses>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    let shape = tape.shape(real).to_vec();
    if tape.shape(fake) != shape.as_slice() {
        return Err(Error::Model(format!(
            "real batch {:?} and fake batch {:?} differ",
            shape,
            tape.shape(fake)
        )));
    }
    if eps.len() != shape[0] || eps.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::Model(format!(
            "need {} interpolation weights in [0, 1], got {:?}",
            shape[0],
            eps
        )));
    }
    let d_real = critic(tape, real)?;
    let d_fake = critic(tape, fake)?;
    let mr = tape.mean(d_real)?;
    let mf = tape.mean(d_fake)?;
    let g_loss = tape.scale(mf, -1.0)?;
    let mut d_loss = tape.sub(mf, mr)?;
    let mut gp_term = None;
    if lambda != 0.0 {
        let e = tape.constant(Tensor::vector(eps));
        let e = tape.broadcast_per_sample(e, &shape)?;
        let diff = tape.sub(real, fake)?;
        let scaled = tape.mul(e, diff)?;
        let x_hat = tape.add(fake, scaled)?;
        let d_hat = critic(tape, x_hat)?;
        let total = tape.sum(d_hat)?;
        let penalty = gradient_penalty(tape, total, x_hat)?;
        let term = tape.scale(penalty, lambda)?;
        d_loss = tape.add(d_loss, term)?;
        gp_term = Some(term);
    }
    Ok(GpLosses { d_loss, g_loss, gp_term })
}

/// One line of `history.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub metric: Option<f64>,
}

impl HistoryRow {
    pub const HEADER: &'static str = "iteration,d_loss,g_loss,gp,metric";

    pub fn csv(&self) -> String {
        let metric = self.metric.map(|m| m.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.iteration, self.d_loss, self.g_loss, self.gp, metric)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("bad history row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad())?,
            d_loss: num(f[1])?,
            g_loss: num(f[2])?,
            gp: num(f[3])?,
            metric: if f[4].is_empty() { None } else { Some(num(f[4])?) },
        })
    }
}

/// Periodic evaluation of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSnapshot {
    pub iteration: u64,
    pub moment_distance: f64,
    pub proxy_is: Option<f64>,
    pub n_images: usize,
}

impl MetricSnapshot {
    pub const HEADER: &'static str = "iteration,moment_distance,proxy_is,n_images";

    pub fn csv(&self) -> String {
        let is = self.proxy_is.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.iteration, self.moment_distance, is, self.n_images)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("bad metric row {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad())?,
            moment_distance: f[1].parse().map_err(|_| bad())?,
            proxy_is: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
            n_images: f[3].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub snapshots: Vec<MetricSnapshot>,
}

impl TrainHistory {
    pub fn history_csv(&self) -> String {
        let mut s = format!("{}\n", HistoryRow::HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{}\n", MetricSnapshot::HEADER);
        for r in &self.snapshots {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }

    /// Read `history.csv` and `metrics.csv` from `dir`; missing files give empty lists.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut h = Self::default();
        let read = |name: &str| -> Result<Vec<String>> {
            let p = dir.join(name);
            if !p.exists() {
                return Ok(Vec::new());
            }
            Ok(std::fs::read_to_string(p)?.lines().skip(1).map(str::to_string).collect())
        };
        for l in read("history.csv")? {
            h.rows.push(HistoryRow::parse(&l)?);
        }
        for l in read("metrics.csv")? {
            h.snapshots.push(MetricSnapshot::parse(&l)?);
        }
        Ok(h)
    }

    /// Drop everything recorded after `iteration`.
    pub fn truncate(&mut self, iteration: u64) {
        self.rows.retain(|r| r.iteration <= iteration);
        self.snapshots.retain(|r| r.iteration <= iteration);
    }
}

/// Build the generator and critic descriptions a config asks for.
pub fn model_specs(cfg: &TrainConfig) -> Result<(ModelSpec, ModelSpec)> {
    let zoo = cfg.zoo();
    let load = |p: &Option<PathBuf>, fallback: &dyn Fn() -> Result<ModelSpec>| match p {
        Some(p) => ModelSpec::parse(&std::fs::read_to_string(p)?),
        None => fallback(),
    };
    let g = load(&cfg.generator_arch, &|| build(cfg.generator, &zoo))?;
    let d = load(&cfg.critic_arch, &|| build(cfg.critic, &zoo))?;
    if g.output != d.input {
        return Err(Error::Config(format!(
            "generator output {:?} does not fit critic input {:?}",
            g.output, d.input
        )));
    }
    if d.output != [1] {
        return Err(Error::Config(format!("critic must output one score, not {:?}", d.output)));
    }
    Ok((g, d))
}

/// Model, optimizer and position of a run: everything a checkpoint must hold.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Net,
    pub critic: Net,
    pub gen_adam: AdamState,
    pub critic_adam: AdamState,
    /// Number of completed iterations.
    pub iteration: u64,
    pub data: Dataset,
    pub classifier: Option<ProxyClassifier>,
    perm: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let (gs, ds) = model_specs(&cfg)?;
        let masks = cfg.mask_config();
        let gen = Net::new(gs, seed_mix(cfg.seed, MODEL_DOMAIN, 0), masks)?;
        let critic = Net::new(ds, seed_mix(cfg.seed, MODEL_DOMAIN, 1), masks)?;
        Self::from_parts(cfg, gen, critic, None, 0, data)
    }

    /// Assemble a trainer from existing networks. Fresh optimizer state when `adam` is `None`.
    pub fn from_parts(
        cfg: TrainConfig,
        gen: Net,
        critic: Net,
        adam: Option<(AdamState, AdamState)>,
        iteration: u64,
        data: Dataset,
    ) -> Result<Self> {
        if data.images.shape()[1..] != gen.spec.output[..] {
            return Err(Error::Data(format!(
                "dataset images {:?} do not match generator output {:?}",
                &data.images.shape()[1..],
                gen.spec.output
            )));
        }
        if data.len() < cfg.batch_size {
            return Err(Error::Data(format!("{} images cannot fill a batch of {}", data.len(), cfg.batch_size)));
        }
        let (gen_adam, critic_adam) =
            adam.unwrap_or_else(|| (AdamState::new(&gen.params), AdamState::new(&critic.params)));
        Ok(Self {
            cfg,
            gen,
            critic,
            gen_adam,
            critic_adam,
            iteration,
            data,
            classifier: None,
            perm: None,
        })
    }

    /// The data indices of batch slot `g` (counted over the whole run).
    fn batch_indices(&mut self, batch: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.cfg.batch_size as u64;
        (batch * b..(batch + 1) * b)
            .map(|g| {
                let epoch = g / n;
                if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
                    let mut rng = RngState::seeded(
                        RngKind::Mt19937,
                        seed_mix(self.cfg.data_seed, SHUFFLE_DOMAIN, epoch as u32),
                    );
                    self.perm = Some((epoch, rng.permutation(n as usize)));
                }
                self.perm.as_ref().expect("just set").1[(g % n) as usize]
            })
            .collect()
    }

    fn latent(&self, rng: &mut RngState, n: usize) -> Tensor {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.gen.spec.input);
        let len = shape.iter().product();
        Tensor::new(shape, rng.normals(len)).expect("latent shape")
    }

    fn critic_step(&mut self, rng: &mut RngState, slot: u64) -> Result<(f64, f64)> {
        let b = self.cfg.batch_size;
        let idx = self.batch_indices(slot);
        let real = self.data.gather(&idx);
        let z = self.latent(rng, b);
        let eps: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
        let fake = self.gen.infer(&z, Mode::Train)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.critic.params);
        let r = tape.constant(real);
        let f = tape.constant(fake);
        let critic = &mut self.critic;
        let losses = wgan_gp_losses(
            &mut tape,
            |t, x| critic.forward_bound(t, &bound, x, Mode::Train),
            r,
            f,
            &eps,
            self.cfg.gp_lambda,
        )?;
        let d_loss = tape.value(losses.d_loss).item()?;
        let gp = match losses.gp_term {
            Some(n) => tape.value(n).item()?,
            None => 0.0,
        };
        if !d_loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration + 1,
                what: "d_loss".into(),
            });
        }
        let wrt = ordered(&bound, &self.critic.params);
        let grads = gradient(&mut tape, losses.d_loss, &wrt)?;
        adam_step(&mut self.critic.params, &grads, &mut self.critic_adam, &AdamHyper::from_config(&self.cfg))?;
        Ok((d_loss, gp))
    }

    fn generator_step(&mut self, rng: &mut RngState) -> Result<f64> {
        let z = self.latent(rng, self.cfg.batch_size);
        let mut tape = Tape::new();
        let gb = bind(&mut tape, &self.gen.params);
        let db = bind(&mut tape, &self.critic.params);
        let zi = tape.constant(z);
        let fake = self.gen.forward_bound(&mut tape, &gb, zi, Mode::Train)?;
        let score = self.critic.forward_bound(&mut tape, &db, fake, Mode::Train)?;
        let m = tape.mean(score)?;
        let g_loss = tape.scale(m, -1.0)?;
        let value = tape.value(g_loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration + 1,
                what: "g_loss".into(),
            });
        }
        let grads = gradient(&mut tape, g_loss, &ordered(&gb, &self.gen.params))?;
        adam_step(&mut self.gen.params, &grads, &mut self.gen_adam, &AdamHyper::from_config(&self.cfg))?;
        Ok(value)
    }

    /// Run one iteration: `n_critic` critic updates, then one generator update.
    ///
    /// On failure the trainer is left exactly as it was before the call.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let saved = (
            self.gen.params.clone(),
            self.gen.buffers.clone(),
            self.critic.params.clone(),
            self.critic.buffers.clone(),
            self.gen_adam.clone(),
            self.critic_adam.clone(),
        );
        match self.step_inner() {
            Ok(row) => Ok(row),
            Err(e) => {
                let it = self.iteration + 1;
                (
                    self.gen.params,
                    self.gen.buffers,
                    self.critic.params,
                    self.critic.buffers,
                    self.gen_adam,
                    self.critic_adam,
                ) = saved;
                Err(match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { iteration: it, what },
                    e => e,
                })
            }
        }
    }

    fn step_inner(&mut self) -> Result<HistoryRow> {
        let it = self.iteration + 1;
        let mut rng = RngState::seeded(RngKind::Mt19937, seed_mix(self.cfg.seed, ITER_DOMAIN, it as u32));
        let mut last = (0.0, 0.0);
        for j in 0..self.cfg.n_critic as u64 {
            last = self.critic_step(&mut rng, (it - 1) * self.cfg.n_critic as u64 + j)?;
        }
        let g_loss = self.generator_step(&mut rng)?;
        self.iteration = it;
        Ok(HistoryRow {
            iteration: it,
            d_loss: last.0,
            g_loss,
            gp: last.1,
            metric: None,
        })
    }

    /// `n` generator samples in eval mode from the stream `seed_mix(seed, domain, 0)`.
    pub fn samples(&mut self, n: usize, domain: u32) -> Result<Tensor> {
        let mut rng = RngState::seeded(RngKind::Mt19937, seed_mix(self.cfg.seed, domain, 0));
        let z = self.latent(&mut rng, n);
        self.gen.infer_batched(&z, 256, Mode::Eval)
    }

    /// Moment distance (and proxy score, given a classifier) of a fixed set of samples.
    pub fn evaluate(&mut self) -> Result<MetricSnapshot> {
        let n = self.cfg.eval_images;
        let fake = self.samples(n, EVAL_DOMAIN)?;
        let moment_distance = pixel_moment_distance(&fake, &self.data.images)?;
        let proxy_is = match &mut self.classifier {
            Some(c) => Some(c.score(&fake)?),
            None => None,
        };
        Ok(MetricSnapshot {
            iteration: self.iteration,
            moment_distance,
            proxy_is,
            n_images: n,
        })
    }

    /// Run until `iterations` are complete, with no output files.
    pub fn train(&mut self, history: &mut TrainHistory) -> Result<()> {
        self.run(history, None)
    }

    /// Run until `cfg.iterations`, writing history, metrics, samples and
    /// checkpoints into `out` when given.
    pub fn run(&mut self, history: &mut TrainHistory, out: Option<&Path>) -> Result<()> {
        let every = |n: u64, it: u64| n > 0 && it % n == 0;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir.join("samples"))?;
            std::fs::write(dir.join("generator.arch"), self.gen.spec.render())?;
            std::fs::write(dir.join("critic.arch"), self.critic.spec.render())?;
        }
        let total = self.cfg.iterations;
        if self.iteration == 0 && self.cfg.eval_every > 0 && history.snapshots.is_empty() {
            history.snapshots.push(self.evaluate()?);
        }
        if self.iteration == 0 {
            if let Some(dir) = out {
                self.write_samples(dir)?;
            }
        }
        while self.iteration < total {
            let mut row = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = out {
                        self.save_checkpoint(dir)?;
                        write_history(dir, history)?;
                    }
                    return Err(e);
                }
            };
            let it = row.iteration;
            // Only the cadence decides, so a run split across a resume logs the same rows.
            if every(self.cfg.eval_every, it) {
                let snap = self.evaluate()?;
                row.metric = Some(snap.moment_distance);
                history.snapshots.push(snap);
            }
            history.rows.push(row);
            if let Some(dir) = out {
                if every(self.cfg.sample_every, it) || it == total {
                    self.write_samples(dir)?;
                }
                if every(self.cfg.checkpoint_every, it) || it == total {
                    self.save_checkpoint(dir)?;
                    write_history(dir, history)?;
                }
            }
        }
        if let Some(dir) = out {
            write_history(dir, history)?;
        }
        Ok(())
    }

    fn write_samples(&mut self, dir: &Path) -> Result<()> {
        let imgs = self.samples(SAMPLE_GRID, SAMPLE_DOMAIN)?;
        write_ppm(&dir.join("samples").join(format!("iter_{}.ppm", self.iteration)), &imgs)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("checkpoint_{}.bin", self.iteration));
        crate::checkpoint::Checkpoint::from_trainer(self).save(&path)?;
        Ok(path)
    }
}

impl TrainConfig {
    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            seed: self.mask_seed,
            rng: self.rng_kind,
            dist: self.dist_kind,
        }
    }
}

pub fn write_history(dir: &Path, h: &TrainHistory) -> Result<()> {
    std::fs::write(dir.join("history.csv"), h.history_csv())?;
    std::fs::write(dir.join("metrics.csv"), h.metrics_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vals)).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = store(&[0.3, -1.0]);
        let mut st = AdamState::new(&p);
        let h = AdamHyper {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        };
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &h).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3, -1.0]);
        assert!(st.m.get("w").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = store(&[0.0]);
        let mut st = AdamState::new(&p);
        let h = AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut p, &[Tensor::vector(&[0.5])], &mut st, &h).unwrap();
        // m_hat = 0.5, v_hat = 0.25, so the step is lr * 0.5 / (0.5 + eps).
        let want = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn adam_rejects_bad_gradients_untouched() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        let h = AdamHyper {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        };
        assert!(matches!(
            adam_step(&mut p, &[Tensor::vector(&[f64::NAN])], &mut st, &h),
            Err(Error::NonFinite { .. })
        ));
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &h).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn history_rows_round_trip() {
        let r = HistoryRow {
            iteration: 3,
            d_loss: -0.1 / 3.0,
            g_loss: 1e-300,
            gp: 0.0,
            metric: Some(2.5),
        };
        assert_eq!(HistoryRow::parse(&r.csv()).unwrap(), r);
        let r = HistoryRow { metric: None, ..r };
        assert_eq!(HistoryRow::parse(&r.csv()).unwrap(), r);
    }
}
