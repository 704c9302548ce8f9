//! `pgan`: train and evaluate perturbative GANs.
//!
//! Exit status is 0 on success, 1 when an input or contract is violated and
//! 2 when the file system fails.

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand};
use pgan_core::checkpoint::Checkpoint;
use pgan_core::config::TrainConfig;
use pgan_core::data::{self, SynthKind};
use pgan_core::metrics::{self, ClassifierConfig, ProxyClassifier};
use pgan_core::trainer::{TrainHistory, Trainer};
use pgan_core::zoo::{self, Variant, ZooConfig};
use pgan_core::{Mode, ModelSpec};
use pgan_noise::{lattice_diagnostic, make_mask, LcParams, Lcg, MaskKey, RngKind, RngState};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pgan", version, about = "Perturbative GAN training and evaluation")]
struct Cli {
    /// Single-worker 64-bit mode. Only `true` is supported.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a generator/critic pair with WGAN-GP.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's iteration budget.
        #[arg(long)]
        iterations: Option<u64>,
        /// Add proxy inception scores to metric snapshots.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Sample images from a checkpoint's generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer parameter counts, optionally compared with a second model.
    CountParams {
        #[arg(long)]
        model: Variant,
        #[arg(long)]
        compare: Option<Variant>,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 1024)]
        gen_width: usize,
        /// 0 selects the critic's default width.
        #[arg(long, default_value_t = 0)]
        critic_width: usize,
        #[arg(long, default_value_t = 1)]
        masks: usize,
        /// Print only totals.
        #[arg(long)]
        summary: bool,
    },
    /// Derive one noise mask from its key.
    Maskgen {
        /// `seed,layer,channel,HxW,rng,dist`, e.g. `7,0,3,8x8,mt,snd`.
        #[arg(long)]
        key: MaskKey,
        /// Write the mask as a PTNS tensor.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lattice and uniformity diagnostics for a generator stream.
    RngTest {
        /// `mt`, `lc` (1103515245, 12345, 2^31) or `randu`.
        #[arg(long, default_value = "mt")]
        rng: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// Write the scaled triples as CSV.
        #[arg(long)]
        triples: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: one CSV row `iteration,moment_distance,proxy_is,n_images`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long)]
        header: bool,
    },
    /// Train once per mask seed and tabulate the final metrics.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Write a synthetic dataset as `images.ptns`, `labels.ptns` and `preview.ppm`.
    MakeSynth {
        #[arg(long)]
        spec: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the proxy classifier on a config's dataset.
    TrainClassifier {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    keep_heap();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Training allocates and frees the same large buffers every step; stop glibc
/// from handing them back to the kernel each time.
fn keep_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before any threads exist.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(pe) = cause.downcast_ref::<pgan_core::Error>() {
            return if pe.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    if !cli.deterministic {
        bail!("only deterministic single-worker 64-bit mode is supported");
    }
    match cli.cmd {
        Cmd::Train {
            config,
            resume,
            out,
            iterations,
            classifier,
        } => train(config, resume, &out, iterations, classifier),
        Cmd::Generate { checkpoint, n, out, seed } => generate(&checkpoint, n, &out, seed),
        Cmd::CountParams {
            model,
            compare,
            image_size,
            gen_width,
            critic_width,
            masks,
            summary,
        } => {
            let zc = ZooConfig {
                image_size,
                gen_width,
                critic_width,
                masks_per_channel: masks,
                ..ZooConfig::default()
            };
            count_params(model, compare, &zc, summary)
        }
        Cmd::Maskgen { key, out } => maskgen(&key, out.as_deref()),
        Cmd::RngTest { rng, seed, n, triples } => rng_test(&rng, seed, n, triples.as_deref()),
        Cmd::Eval {
            checkpoint,
            classifier,
            n,
            header,
        } => eval(&checkpoint, classifier.as_deref(), n, header),
        Cmd::Sweep {
            config,
            seeds,
            out,
            classifier,
        } => sweep(&config, &seeds, &out, classifier.as_deref()),
        Cmd::MakeSynth {
            spec,
            n,
            seed,
            size,
            out,
        } => make_synth(spec, n, seed, size, &out),
        Cmd::TrainClassifier {
            config,
            out,
            steps,
            width,
            seed,
        } => train_classifier(&config, &out, steps, width, seed),
    }
}

fn load_classifier(path: Option<&Path>) -> Result<Option<ProxyClassifier>> {
    Ok(match path {
        Some(p) => Some(ProxyClassifier::load(p).with_context(|| format!("loading classifier {}", p.display()))?),
        None => None,
    })
}

fn train(
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: &Path,
    iterations: Option<u64>,
    classifier: Option<PathBuf>,
) -> Result<()> {
    let file_cfg = config.as_deref().map(TrainConfig::load).transpose()?;
    let (mut trainer, mut history) = match resume {
        Some(ck_path) => {
            let ck = Checkpoint::load_verified(&ck_path)
                .with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
            let mut cfg = file_cfg.unwrap_or_else(|| ck.config.clone());
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let data = cfg.load_dataset()?;
            let at = ck.iteration;
            let t = ck.into_trainer(cfg, data)?;
            let mut h = TrainHistory::load_dir(out)?;
            h.truncate(at);
            (t, h)
        }
        None => {
            let Some(mut cfg) = file_cfg else {
                bail!("train needs --config (or --resume)");
            };
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let data = cfg.load_dataset()?;
            (Trainer::new(cfg, data)?, TrainHistory::default())
        }
    };
    trainer.classifier = load_classifier(classifier.as_deref())?;
    trainer.run(&mut history, Some(out))?;
    if let Some(s) = history.snapshots.last() {
        println!("iteration {} moment_distance {}", s.iteration, s.moment_distance);
    }
    Ok(())
}

fn generator_from(ck: &Checkpoint) -> Result<pgan_core::Net> {
    Ok(ck.gen.to_net(ck.config.mask_config())?)
}

fn generate(path: &Path, n: usize, out: &Path, seed: u64) -> Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    let ck = Checkpoint::load_verified(path)?;
    let mut gen = generator_from(&ck)?;
    let mut rng = RngState::seeded(RngKind::Mt19937, seed);
    let mut shape = vec![n];
    shape.extend_from_slice(&gen.spec.input);
    let z = pgan_tensor::Tensor::new(shape.clone(), rng.normals(shape.iter().product()))?;
    let imgs = gen.infer_batched(&z, 256, Mode::Eval)?;
    std::fs::create_dir_all(out)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("images.ptns"))?);
    imgs.write_ptns(&mut f)?;
    f.flush()?;
    data::write_ppm(&out.join("samples.ppm"), &imgs)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn print_layers(spec: &ModelSpec) {
    println!("{:<28} {:<20} {:>12}", "parameter", "shape", "count");
    for p in spec.params() {
        println!("{:<28} {:<20} {:>12}", p.path, format!("{:?}", p.shape), p.count());
    }
}

fn count_params(model: Variant, compare: Option<Variant>, zc: &ZooConfig, summary: bool) -> Result<()> {
    let a = zoo::build(model, zc)?;
    if !summary {
        println!("== {model} ({}x{})", zc.image_size, zc.image_size);
        print_layers(&a);
    }
    println!("{model} total {} (published {})", a.param_count(), model.reference_count());
    let Some(other) = compare else { return Ok(()) };
    let b = zoo::build(other, zc)?;
    if !summary {
        println!("== {other} ({}x{})", zc.image_size, zc.image_size);
        print_layers(&b);
    }
    println!("{other} total {} (published {})", b.param_count(), other.reference_count());
    let ratio = a.param_count() as f64 / b.param_count() as f64;
    match model.reference_ratio().filter(|_| other == model.baseline()) {
        Some(r) => println!("ratio {ratio:.6} (published {r})"),
        None => println!("ratio {ratio:.6}"),
    }
    let (pg, cg) = match (model, other) {
        (_, Variant::CG) if model != Variant::CG => (&a, &b),
        (Variant::CG, _) if other != Variant::CG => (&b, &a),
        _ => return Ok(()),
    };
    let mut all = true;
    println!("stage law (perturbation count * 9 == convolution count):");
    for s in zoo::matched_stages(pg, cg) {
        let ok = s.perturb_count * 9 == s.conv_count;
        all &= ok;
        println!(
            "  {:<16} {:>10} | {:<12} {:>10}  {}",
            s.perturb_path,
            s.perturb_count,
            s.conv_path,
            s.conv_count,
            if ok { "1/9" } else { "MISMATCH" }
        );
    }
    println!("stage law holds: {}", if all { "yes" } else { "no" });
    Ok(())
}

fn maskgen(key: &MaskKey, out: Option<&Path>) -> Result<()> {
    let m = make_mask(key)?;
    let n = m.len() as f64;
    let mean = m.mean();
    let sd = (m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    println!("key {key}");
    println!("shape {:?} mean {mean:.6} std {sd:.6} min {:.6} max {:.6}", m.shape(), m.min(), m.max());
    if let Some(path) = out {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        m.write_ptns(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn rng_test(rng: &str, seed: u64, n: usize, triples: Option<&Path>) -> Result<()> {
    let stream = match rng {
        "mt" => RngState::seeded(RngKind::Mt19937, seed),
        "lc" => RngState::Lc(Lcg::new(LcParams::DEFAULT, seed)),
        "randu" => RngState::Lc(Lcg::new(LcParams::RANDU, seed)),
        other => bail!("unknown generator {other:?} (mt, lc, randu)"),
    };
    let r = lattice_diagnostic(&stream, n)?;
    println!("generator {rng} seed {seed} n {n}");
    println!("residue_zero_fraction {}", r.residue_zero_fraction());
    println!("chi2_64_bins {:.3}", r.chi2);
    println!("chi2_accepts {}", r.chi2_accepts());
    if let Some(path) = triples {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x0,x1,x2")?;
        for t in &r.triples {
            writeln!(f, "{},{},{}", t[0], t[1], t[2])?;
        }
        f.flush()?;
    }
    Ok(())
}

fn eval(path: &Path, classifier: Option<&Path>, n: usize, header: bool) -> Result<()> {
    let ck = Checkpoint::load_verified(path)?;
    let mut cfg = ck.config.clone();
    cfg.eval_images = n;
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let mut t = ck.into_trainer(cfg, data)?;
    t.classifier = load_classifier(classifier)?;
    let snap = t.evaluate()?;
    if header {
        println!("{}", pgan_core::trainer::MetricSnapshot::HEADER);
    }
    println!("{}", snap.csv());
    Ok(())
}

fn sweep(config: &Path, seeds: &[u64], out: &Path, classifier: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let clf = load_classifier(classifier)?;
    std::fs::create_dir_all(out)?;
    let table = metrics::mask_seed_sweep(&cfg, seeds, &data, clf.as_ref(), Some(out))?;
    let csv = table.csv();
    std::fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn make_synth(spec: SynthKind, n: usize, seed: u64, size: usize, out: &Path) -> Result<()> {
    let ds = data::synth(spec, n, size, 3, seed)?;
    data::save_ptns_dir(out, &ds)?;
    let preview = ds.images.slice_batch(0, n.min(64))?;
    data::write_ppm(&out.join("preview.ppm"), &preview)?;
    println!("wrote {n} {spec} images of {size}x{size} to {}", out.display());
    Ok(())
}

fn train_classifier(config: &Path, out: &Path, steps: usize, width: usize, seed: u64) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let cc = ClassifierConfig {
        steps,
        width,
        seed,
        ..ClassifierConfig::default()
    };
    let mut clf = ProxyClassifier::train(&data, &cc)?;
    let acc = clf.accuracy(&data)?;
    clf.save(out)?;
    println!("classifier accuracy {acc:.4} on {} images", data.len());
    Ok(())
}
