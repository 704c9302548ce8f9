//! Evaluation: proxy inception score, pixel moment distance and the proxy
//! classifier they rely on.

use crate::arch::ModelSpec;
use crate::data::Dataset;
use crate::layers::{bind, ordered, MaskConfig, Mode, Net};
use crate::params::{read_u32, ParamStore};
use crate::trainer::{adam_step, AdamHyper, AdamState};
use crate::zoo::proxy_classifier;
use crate::{Error, Result};
use pgan_noise::{seed_mix, RngKind, RngState};
use pgan_tensor::{gradient, Tape, Tensor};
use std::io::{Read, Write};
use std::path::Path;

/// Probabilities are floored here before taking logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// `exp(mean_n KL(p(y|x_n) || mean_n p(y|x_n)))` for rows of `probs (N, C)`.
pub fn proxy_inception_score(probs: &Tensor) -> Result<f64> {
    let (n, c) = match *probs.shape() {
        [n, c] if n >= 2 && c >= 2 => (n, c),
        _ => {
            return Err(Error::Model(format!(
                "inception score needs (N >= 2, C >= 2) probabilities, got {:?}",
                probs.shape()
            )))
        }
    };
    let p: Vec<f64> = probs.data().iter().map(|&v| v.max(KL_FLOOR)).collect();
    let mut marginal = vec![0.0; c];
    for row in p.chunks_exact(c) {
        for (m, v) in marginal.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut kl = 0.0;
    for row in p.chunks_exact(c) {
        kl += row
            .iter()
            .zip(&marginal)
            .map(|(v, m)| v * (v.ln() - m.ln()))
            .sum::<f64>();
    }
    Ok((kl / n as f64).exp())
}

/// Per-position means and population standard deviations over the batch axis.
pub fn pixel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.batch();
    let per = x.len() / n.max(1);
    let mut mean = vec![0.0; per];
    for s in x.data().chunks_exact(per) {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; per];
    for s in x.data().chunks_exact(per) {
        for ((q, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *q += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|q| (q / n as f64).sqrt()).collect())
}

/// `||mu_a - mu_b||_2 + ||sigma_a - sigma_b||_2` over per-pixel moments.
pub fn pixel_moment_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape()[1..] != b.shape()[1..] || a.batch() == 0 || b.batch() == 0 {
        return Err(Error::Model(format!(
            "moment distance needs matching image shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ma, sa) = pixel_moments(a);
    let (mb, sb) = pixel_moments(b);
    let norm = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    Ok(norm(&ma, &mb) + norm(&sa, &sb))
}

/// Softmax rows from logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(pgan_tensor::kernels::log_softmax(logits)?.map(f64::exp))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub width: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 8,
            steps: 300,
            batch: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Seed domain for classifier training streams.
pub const CLASSIFIER_DOMAIN: u32 = 0xC1A5;

/// Small conv net trained once and then frozen; stands in for a large
/// pretrained network when scoring generated images.
#[derive(Clone, Debug)]
pub struct ProxyClassifier {
    pub net: Net,
    pub classes: usize,
}

const CLASSIFIER_MAGIC: &[u8; 4] = b"PGCL";

impl ProxyClassifier {
    /// Train on `ds` with cross-entropy and Adam.
    pub fn train(ds: &Dataset, cfg: &ClassifierConfig) -> Result<Self> {
        let spec = proxy_classifier(ds.image_size(), ds.channels(), cfg.width, ds.classes)?;
        let mut net = Net::new(spec, seed_mix(cfg.seed, CLASSIFIER_DOMAIN, 0), MaskConfig::default())?;
        let hyper = AdamHyper {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = AdamState::new(&net.params);
        let mut rng = RngState::seeded(RngKind::Mt19937, seed_mix(cfg.seed, CLASSIFIER_DOMAIN, 1));
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(ds.len())).collect();
            let x = ds.gather(&idx);
            let mut onehot = Tensor::zeros(&[cfg.batch, ds.classes]);
            for (r, &i) in idx.iter().enumerate() {
                onehot.data_mut()[r * ds.classes + ds.labels[i] as usize] = 1.0;
            }
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &net.params);
            let xi = tape.constant(x);
            let logits = net.forward_bound(&mut tape, &bound, xi, Mode::Train)?;
            let lp = tape.log_softmax(logits)?;
            let t = tape.constant(onehot);
            let picked = tape.mul(lp, t)?;
            let s = tape.sum(picked)?;
            let loss = tape.scale(s, -1.0 / cfg.batch as f64)?;
            let grads = gradient(&mut tape, loss, &ordered(&bound, &net.params))?;
            adam_step(&mut net.params, &grads, &mut adam, &hyper)?;
        }
        Ok(Self {
            net,
            classes: ds.classes,
        })
    }

    /// Class probabilities `(N, C)`.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let logits = self.net.infer_batched(images, 256, Mode::Eval)?;
        softmax(&logits)
    }

    pub fn accuracy(&mut self, ds: &Dataset) -> Result<f64> {
        let p = self.predict(&ds.images)?;
        let hits = p
            .data()
            .chunks_exact(self.classes)
            .zip(&ds.labels)
            .filter(|(row, &l)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                best == l as usize
            })
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }

    pub fn score(&mut self, images: &Tensor) -> Result<f64> {
        proxy_inception_score(&self.predict(images)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CLASSIFIER_MAGIC)?;
        let arch = self.net.spec.render();
        f.write_all(&(arch.len() as u32).to_le_bytes())?;
        f.write_all(arch.as_bytes())?;
        self.net.params.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CLASSIFIER_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a classifier file", path.display())));
        }
        let len = read_u32(&mut f)? as usize;
        let mut arch = vec![0u8; len];
        f.read_exact(&mut arch)?;
        let spec = ModelSpec::parse(&String::from_utf8_lossy(&arch))?;
        let params = ParamStore::read_from(&mut f)?;
        params.check_against(&spec)?;
        let classes = spec.output[0];
        let mut net = Net::new(spec, 0, MaskConfig::default())?;
        net.params = params;
        Ok(Self { net, classes })
    }
}

/// Final metrics of one sweep run, or why it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub moment_distance: Option<f64>,
    pub proxy_is: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepTable {
    fn column(&self, f: impl Fn(&SweepRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter_map(f).collect()
    }

    pub fn moment_distances(&self) -> Vec<f64> {
        self.column(|r| r.moment_distance)
    }

    /// Standard deviation over mean of the final moment distances.
    pub fn relative_std(&self) -> f64 {
        let (m, s) = mean_std(&self.moment_distances());
        s / m
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("seed,moment_distance,proxy_is,status\n");
        for r in &self.rows {
            out += &format!("{},{},{},{}\n", r.seed, opt(r.moment_distance), opt(r.proxy_is), r.status);
        }
        let (md_m, md_s) = mean_std(&self.moment_distances());
        let is = self.column(|r| r.proxy_is);
        let (is_m, is_s) = if is.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&is) };
        let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        out += &format!("mean,{},{},\n", fmt(md_m), fmt(is_m));
        out += &format!("std,{},{},\n", fmt(md_s), fmt(is_s));
        out
    }
}

/// Train once per mask seed with everything else fixed and collect the final
/// metrics. A run that fails is recorded in its row and the sweep moves on.
///
/// With `out`, each run writes its files to `out/seed_<s>`.
pub fn mask_seed_sweep(
    base: &crate::config::TrainConfig,
    seeds: &[u64],
    data: &Dataset,
    classifier: Option<&ProxyClassifier>,
    out: Option<&Path>,
) -> Result<SweepTable> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("a sweep needs at least two seeds, got {}", seeds.len())));
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = crate::config::TrainConfig {
            mask_seed: seed,
            ..base.clone()
        };
        let run = || -> Result<crate::trainer::MetricSnapshot> {
            let mut t = crate::trainer::Trainer::new(cfg.clone(), data.clone())?;
            t.classifier = classifier.cloned();
            let mut h = crate::trainer::TrainHistory::default();
            let dir = out.map(|d| d.join(format!("seed_{seed}")));
            t.run(&mut h, dir.as_deref())?;
            match h.snapshots.last() {
                Some(s) if s.iteration == t.iteration => Ok(s.clone()),
                _ => t.evaluate(),
            }
        };
        rows.push(match run() {
            Ok(s) => SweepRow {
                seed,
                moment_distance: Some(s.moment_distance),
                proxy_is: s.proxy_is,
                status: "ok".into(),
            },
            Err(e) if e.is_io() => return Err(e),
            Err(e) => SweepRow {
                seed,
                moment_distance: None,
                proxy_is: None,
                status: e.to_string().replace([',', '\n'], ";"),
            },
        });
    }
    Ok(SweepTable { rows })
}
