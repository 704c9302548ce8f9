//! Acceptance checks. Each criterion prints one `PASS` or `FAIL` line; the
//! run exits non-zero if any criterion fails. There is no test harness, so the
//! lines are never captured.
//!
//! The training criteria run the real `pgan` binary on `configs/smoke.cfg`
//! and take roughly half an hour on one core. Set `PGAN_CRITERIA=1,2,5` to
//! run a subset.

use pgan_core::arch::{Block, ModelSpec, PerturbSpec, Role};
use pgan_core::checkpoint::Checkpoint;
use pgan_core::metrics::{mean_std, softmax};
use pgan_core::{proxy_inception_score, Act, TrainConfig, TrainHistory, Trainer};
use pgan_noise::{make_mask, DistKind, LcParams, Lcg, MaskKey, Mt19937, RngKind};
use pgan_tensor::{finite_difference_check, gradient_of_gradient_norm, ConvGeom, NodeId, Op, Tape, Tensor};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

/// Largest relative standard deviation of the final MT(SND) moment distances
/// across mask seeds. Frozen from the calibration sweep over seeds 1, 2, 3.
const MT_SND_RELATIVE_STD_MAX: f64 = 0.10;

/// Required fractional drop of the moment distance over the smoke run.
const MOMENT_DROP_MIN: f64 = 0.5;

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke_config() -> PathBuf {
    workspace().join("configs/smoke.cfg")
}

fn pgan(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pgan"))
        .args(args)
        .output()
        .map_err(|e| format!("could not start pgan: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "pgan {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Deterministic uniform draws on [0, 1).
struct Draw(u64);

impl Draw {
    fn next(&mut self) -> f64 {
        self.0 = pgan_noise::splitmix64(self.0);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn sym(&mut self) -> f64 {
        2.0 * self.next() - 1.0
    }

    fn away(&mut self, lo: f64, hi: f64) -> f64 {
        let m = lo + (hi - lo) * self.next();
        if self.next() < 0.5 {
            -m
        } else {
            m
        }
    }

    fn tensor(&mut self, shape: &[usize], f: fn(&mut Draw) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| f(self)).collect()).unwrap()
    }
}

fn perturb(inp: usize, out: usize, h: usize, w: usize) -> PerturbSpec {
    PerturbSpec {
        inp,
        out,
        masks: 1,
        act: Act::Relu,
        layer: 0,
        height: h,
        width: w,
        bias: false,
    }
}

fn c1_parameter_law() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (p, q) in [(4, 8), (64, 64), (256, 128)] {
        let pert = perturb(p, q, 8, 8).param_count();
        let conv = ModelSpec {
            name: "conv".into(),
            role: Role::Critic,
            input: vec![p, 8, 8],
            output: vec![q, 8, 8],
            blocks: vec![Block::Conv {
                path: "c".into(),
                inp: p,
                out: q,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            }],
        }
        .param_count();
        ok &= pert * 9 == conv && pert == (p * q) as u64;
        lines.push(format!("({p},{q}) {pert}/{conv}"));
    }
    check(ok, lines.join(", "))
}

fn c2_table_report() -> Outcome {
    let out = pgan(&["count-params", "--model", "PGv1", "--compare", "CG", "--summary"])?;
    let ratio_line = out.lines().find(|l| l.starts_with("ratio ")).ok_or("no ratio line")?;
    let ratio: f64 = ratio_line
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .ok_or("unparsable ratio")?;
    let published = ratio_line.contains("published 0.48");
    let law = out.lines().any(|l| l == "stage law holds: yes");
    let totals = out.lines().filter(|l| l.contains(" total ")).count() == 2;
    check(
        (0.35..=0.70).contains(&ratio) && published && law && totals,
        format!("ratio {ratio:.4} against published 0.48, stage law {}", if law { "exact" } else { "broken" }),
    )
}

/// Input shapes and sampler for one op, or `None` for ops without a
/// gradient rule of their own.
fn fd_case(op: &Op) -> Option<(Vec<Vec<usize>>, fn(&mut Draw) -> f64)> {
    let any: fn(&mut Draw) -> f64 = |d| d.sym();
    let kink_free: fn(&mut Draw) -> f64 = |d| d.away(0.1, 1.0);
    let positive: fn(&mut Draw) -> f64 = |d| 0.5 + 1.5 * d.next();
    let img = vec![2, 3, 4, 4];
    let geom_in = vec![2, 2, 5, 5];
    Some(match op {
        Op::Leaf | Op::BatchNormBackward { .. } => return None,
        Op::Add | Op::Sub | Op::Mul => (vec![img.clone(), img], any),
        Op::Div => (vec![img.clone(), img], kink_free),
        Op::Scale(_) | Op::AddScalar(_) | Op::Square | Op::Exp | Op::Tanh => (vec![img], any),
        Op::Sqrt => (vec![img], positive),
        Op::Relu | Op::LeakyRelu(_) | Op::Step { .. } => (vec![img], kink_free),
        Op::Sum | Op::SumPerSample | Op::SumPerChannel | Op::SumBatch | Op::SpatialSum => (vec![img], any),
        Op::Fill { .. } => (vec![vec![1]], any),
        Op::BroadcastPerSample { .. } => (vec![vec![2]], any),
        Op::BroadcastPerChannel { .. } => (vec![vec![3]], any),
        Op::BroadcastBatch { .. } => (vec![vec![3, 4, 4]], any),
        Op::SpatialBroadcast { .. } => (vec![vec![2, 3]], any),
        Op::ChannelCombine { transpose: false } => (vec![img, vec![5, 3]], any),
        Op::ChannelCombine { transpose: true } => (vec![img, vec![3, 5]], any),
        Op::ChannelOuter => (vec![img, vec![2, 5, 4, 4]], any),
        Op::Conv2d(_) => (vec![geom_in, vec![3, 2, 3, 3]], any),
        Op::Conv2dInputGrad { .. } => (vec![vec![2, 3, 3, 3], vec![3, 2, 3, 3]], any),
        Op::Conv2dWeightGrad { .. } => (vec![geom_in, vec![2, 3, 3, 3]], any),
        Op::UpsampleNearest | Op::UpsampleBilinear | Op::AvgPool2 | Op::BilinearAdjoint => (vec![img], any),
        Op::Reshape { .. } => (vec![img], any),
        Op::LogSoftmax => (vec![vec![4, 5]], any),
        Op::SampleNorm => (vec![img], kink_free),
        Op::BatchNorm { .. } => (vec![vec![5, 3, 2, 2]], any),
    })
}

fn all_ops() -> Vec<Op> {
    let geom = ConvGeom { stride: 2, pad: 1 };
    vec![
        Op::Leaf,
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Div,
        Op::Scale(-1.5),
        Op::AddScalar(0.3),
        Op::Square,
        Op::Sqrt,
        Op::Exp,
        Op::Tanh,
        Op::Relu,
        Op::LeakyRelu(0.2),
        Op::Step { neg_slope: 0.2 },
        Op::Sum,
        Op::Fill { shape: vec![2, 3] },
        Op::SumPerSample,
        Op::BroadcastPerSample { shape: vec![2, 3, 2] },
        Op::SumPerChannel,
        Op::BroadcastPerChannel { shape: vec![2, 3, 2, 2] },
        Op::SumBatch,
        Op::BroadcastBatch { n: 2 },
        Op::SpatialSum,
        Op::SpatialBroadcast { shape: vec![2, 3, 2, 2] },
        Op::ChannelCombine { transpose: false },
        Op::ChannelCombine { transpose: true },
        Op::ChannelOuter,
        Op::Conv2d(geom),
        Op::Conv2dInputGrad { geom, in_hw: (5, 5) },
        Op::Conv2dWeightGrad { geom, kernel: 3 },
        Op::UpsampleNearest,
        Op::AvgPool2,
        Op::UpsampleBilinear,
        Op::BilinearAdjoint,
        Op::Reshape { shape: vec![6, 16] },
        Op::LogSoftmax,
        Op::SampleNorm,
        Op::BatchNorm { eps: 1e-5 },
        Op::BatchNormBackward { eps: 1e-5 },
    ]
}

fn c3_gradients() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (k, op) in all_ops().into_iter().enumerate() {
        let Some((shapes, sample)) = fd_case(&op) else { continue };
        let mut d = Draw(1000 + k as u64);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let ins: Vec<NodeId> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| tape.input(format!("x{i}"), d.tensor(s, sample)).unwrap())
                .collect();
            let out = tape.apply(op.clone(), &ins).map_err(|e| format!("{}: {e}", op.name()))?;
            let w = d.tensor(tape.shape(out), |d| d.away(0.5, 1.5));
            let w = tape.constant(w);
            let y = tape.mul(out, w).unwrap();
            let y = tape.sum(y).unwrap();
            for &x in &ins {
                let err = finite_difference_check(&mut tape, y, x, 1e-5).map_err(|e| format!("{}: {e}", op.name()))?;
                if err > worst.0 {
                    worst = (err, op.name().to_string());
                }
            }
        }
        checked += 1;
    }
    check(
        worst.0 < 1e-4,
        format!("{checked} ops x 20 points, worst relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn c4_second_order() -> Outcome {
    let mut d = Draw(44);
    // (a) Linear critic: penalty (|w| - 1)^2 for every row of x.
    let w_val = d.tensor(&[1, 6], |d| d.sym());
    let mut tape = Tape::new();
    let x = tape.input("x", d.tensor(&[4, 6], |d| d.sym())).unwrap();
    let w = tape.input("w", w_val.clone()).unwrap();
    let y = tape.linear(x, w).unwrap();
    let s = tape.sum(y).unwrap();
    let (p, g) = gradient_of_gradient_norm(&mut tape, s, x, &[w]).map_err(|e| e.to_string())?;
    let norm = w_val.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut analytic_err: f64 = (tape.value(p).item().unwrap() - (norm - 1.0).powi(2)).abs();
    for (gi, wi) in tape.value(g[0]).data().iter().zip(w_val.data()) {
        analytic_err = analytic_err.max((gi - 2.0 * (norm - 1.0) * wi / norm).abs());
    }
    let lin_fd = finite_difference_check(&mut tape, p, w, 1e-6).map_err(|e| e.to_string())?;

    // (b) Two perturbation layers: relu(x + m) combined over channels, twice.
    let (c, h) = (3, 4);
    let masks = |layer: u32, ch: usize| {
        let planes: Vec<f64> = (0..ch)
            .flat_map(|k| {
                make_mask(&MaskKey {
                    global_seed: 7,
                    layer_id: layer,
                    channel: k as u32,
                    height: h,
                    width: h,
                    rng: RngKind::Mt19937,
                    dist: DistKind::Snd,
                })
                .unwrap()
                .data()
                .to_vec()
            })
            .collect();
        Tensor::new(vec![ch, h, h], planes).unwrap()
    };
    let (m1, m2) = (masks(0, c), masks(1, 4));
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    while trials < 5 {
        let mut tape = Tape::new();
        let x = tape.input("x", d.tensor(&[2, c, h, h], |d| d.sym())).unwrap();
        let v1 = tape.input("v1", d.tensor(&[4, c], |d| d.sym())).unwrap();
        let v2 = tape.input("v2", d.tensor(&[1, 4], |d| d.sym())).unwrap();
        let m1n = tape.constant(m1.clone());
        let m1b = tape.broadcast_batch(m1n, 2).unwrap();
        let pre1 = tape.add(x, m1b).unwrap();
        let a1 = tape.relu(pre1).unwrap();
        let h1 = tape.channel_combine(a1, v1).unwrap();
        let m2n = tape.constant(m2.clone());
        let m2b = tape.broadcast_batch(m2n, 2).unwrap();
        let pre2 = tape.add(h1, m2b).unwrap();
        let near_kink = |t: &Tape, n: NodeId| t.value(n).data().iter().any(|v| v.abs() < 1e-3);
        if near_kink(&tape, pre1) || near_kink(&tape, pre2) {
            continue;
        }
        let a2 = tape.relu(pre2).unwrap();
        let out = tape.channel_combine(a2, v2).unwrap();
        let s = tape.sum(out).unwrap();
        let (p, _) = gradient_of_gradient_norm(&mut tape, s, x, &[v1, v2]).map_err(|e| e.to_string())?;
        for param in [v1, v2] {
            worst = worst.max(finite_difference_check(&mut tape, p, param, 1e-6).map_err(|e| e.to_string())?);
        }
        trials += 1;
    }
    check(
        analytic_err < 1e-10 && lin_fd < 1e-3 && worst < 1e-3,
        format!("linear: closed-form error {analytic_err:.1e}, fd {lin_fd:.1e}; two-layer perturbative: fd {worst:.1e}"),
    )
}

fn golden(name: &str) -> Vec<u64> {
    let path = workspace().join("crates/noise/tests/data").join(name);
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect()
}

fn c5_golden_vectors() -> Outcome {
    let mut exact = Vec::with_capacity(1000);
    let mut x: u128 = 1;
    for _ in 0..1000 {
        x = (1_103_515_245u128 * x + 12_345) % (1u128 << 31);
        exact.push(x as u64);
    }
    let mut lc = Lcg::new(LcParams::DEFAULT, 1);
    let ours: Vec<u64> = (0..1000).map(|_| lc.next_u64()).collect();
    let lc_ok = ours == exact && exact == golden("lc_1103515245_12345_2p31_x1_first1000.txt");
    let reference = golden("mt19937_seed5489_first1000.txt");
    let mut mt = Mt19937::new(5489);
    let mt_ours: Vec<u64> = (0..1000).map(|_| mt.next_u32() as u64).collect();
    let mt_ok = reference.len() == 1000 && mt_ours == reference;
    check(
        lc_ok && mt_ok,
        format!(
            "LC 1000/1000 {}, MT19937 1000/1000 {}",
            if lc_ok { "match" } else { "differ" },
            if mt_ok { "match" } else { "differ" }
        ),
    )
}

fn residue_fraction(rng: &str, seed: &str) -> Result<f64, String> {
    let out = pgan(&["rng-test", "--rng", rng, "--seed", seed, "--n", "100000"])?;
    out.lines()
        .find_map(|l| l.strip_prefix("residue_zero_fraction "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no residue line in {out:?}"))
}

fn c6_lattice() -> Outcome {
    let randu = residue_fraction("randu", "1")?;
    let mt = residue_fraction("mt", "5489")?;
    check(
        randu == 1.0 && 1.0 - mt > 0.99,
        format!("RANDU zero residues {:.3}%, MT19937 nonzero {:.3}%", 100.0 * randu, 100.0 * (1.0 - mt)),
    )
}

#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_heap() {
    // SAFETY: mallopt only adjusts allocator tunables; the test runs single-threaded.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_heap() {}

fn c7_masks(tmp: &Path) -> Outcome {
    keep_heap();
    let mut cfg = TrainConfig::load(&smoke_config()).map_err(|e| e.to_string())?;
    cfg.iterations = 1000;
    cfg.eval_every = 0;
    let data = cfg.load_dataset().map_err(|e| e.to_string())?;
    let mut t = Trainer::new(cfg.clone(), data.clone()).map_err(|e| e.to_string())?;
    let dir = tmp.join("c7");
    t.run(&mut TrainHistory::default(), Some(&dir)).map_err(|e| e.to_string())?;

    let mut planes = 0;
    let mut mismatched = 0;
    for net in [&t.gen, &t.critic] {
        for (_, layer) in net.masks.iter() {
            let size: usize = layer.stacked.shape()[1..].iter().product();
            for (k, key) in layer.keys.iter().enumerate() {
                let fresh = make_mask(key).map_err(|e| e.to_string())?;
                planes += 1;
                if fresh.data() != &layer.stacked.data()[k * size..(k + 1) * size] {
                    mismatched += 1;
                }
            }
        }
    }

    let ck_path = dir.join("checkpoint_1000.bin");
    let bytes = std::fs::read(&ck_path).map_err(|e| e.to_string())?;
    let mut found = 0;
    for (_, layer) in t.gen.masks.iter().chain(t.critic.masks.iter()) {
        let probe: Vec<u8> = layer.stacked.data()[..4].iter().flat_map(|v| v.to_le_bytes()).collect();
        found += bytes.windows(probe.len()).filter(|w| *w == probe).count();
    }
    let ck = Checkpoint::load_verified(&ck_path).map_err(|e| e.to_string())?;
    let restored = ck.into_trainer(cfg.clone(), data).map_err(|e| e.to_string())?;
    let reloaded_same = restored
        .gen
        .masks
        .iter()
        .zip(t.gen.masks.iter())
        .all(|((_, a), (_, b))| a.stacked.bit_eq(&b.stacked));
    check(
        planes > 0 && mismatched == 0 && found == 0 && reloaded_same,
        format!(
            "{planes} mask planes re-derived after 1000 iterations, {mismatched} differ; \
             mask bytes found in checkpoint: {found}"
        ),
    )
}

fn c8_determinism(tmp: &Path) -> Outcome {
    let cfg = smoke_config();
    let cfg = path_str(&cfg);
    let run = |name: &str, extra: &[&str]| -> Result<PathBuf, String> {
        let dir = tmp.join(name);
        let mut args = vec!["train", "--config", cfg, "--out", path_str(&dir)];
        args.extend_from_slice(extra);
        pgan(&args)?;
        Ok(dir)
    };
    let a = run("c8a", &["--iterations", "200"])?;
    let b = run("c8b", &["--iterations", "200"])?;
    let c = run("c8c", &["--iterations", "100"])?;
    let ck = c.join("checkpoint_100.bin");
    pgan(&["train", "--config", cfg, "--resume", path_str(&ck), "--out", path_str(&c), "--iterations", "200"])?;
    let read = |d: &Path| std::fs::read_to_string(d.join("history.csv")).map_err(|e| e.to_string());
    let (ha, hb, hc) = (read(&a)?, read(&b)?, read(&c)?);
    let rows = ha.lines().count() - 1;
    let tail = |h: &str| h.lines().skip(101).collect::<Vec<_>>().join("\n");
    check(
        rows == 200 && ha == hb && ha == hc,
        format!(
            "{rows} rows; repeat run {}, resumed 101-200 {}",
            if ha == hb { "bit-identical" } else { "differs" },
            if ha == hc { "bit-identical" } else if tail(&ha) == tail(&hc) { "identical losses, other columns differ" } else { "differs" }
        ),
    )
}

fn metrics_rows(dir: &Path) -> Result<Vec<(u64, f64, f64)>, String> {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or(format!("bad row {l:?}"));
            Ok((num(0)? as u64, num(1)?, num(2)?))
        })
        .collect()
}

fn classifier(tmp: &Path) -> Result<PathBuf, String> {
    let path = tmp.join("classifier.bin");
    if !path.exists() {
        pgan(&["train-classifier", "--config", path_str(&smoke_config()), "--out", path_str(&path)])?;
    }
    Ok(path)
}

fn c9_convergence(tmp: &Path) -> Outcome {
    let clf = classifier(tmp)?;
    let dir = tmp.join("c9");
    let start = Instant::now();
    pgan(&[
        "train",
        "--config",
        path_str(&smoke_config()),
        "--out",
        path_str(&dir),
        "--classifier",
        path_str(&clf),
    ])?;
    let elapsed = start.elapsed();
    let rows = metrics_rows(&dir)?;
    let (first, last) = (rows.first().ok_or("no metrics")?, rows.last().ok_or("no metrics")?);
    let drop = 1.0 - last.1 / first.1;
    check(
        first.0 == 0
            && last.0 == 2000
            && elapsed < Duration::from_secs(15 * 60)
            && drop >= MOMENT_DROP_MIN
            && last.2 > first.2,
        format!(
            "2000 iterations in {:.0} s wall; moment distance {:.3} -> {:.3} ({:.0}% drop, need {:.0}%); \
             proxy IS {:.4} -> {:.4}",
            elapsed.as_secs_f64(),
            first.1,
            last.1,
            100.0 * drop,
            100.0 * MOMENT_DROP_MIN,
            first.2,
            last.2
        ),
    )
}

fn sweep(tmp: &Path, config: &str, name: &str) -> Result<Vec<(u64, f64, f64)>, String> {
    let clf = classifier(tmp)?;
    let dir = tmp.join(name);
    let cfg = workspace().join("configs").join(config);
    pgan(&[
        "sweep",
        "--config",
        path_str(&cfg),
        "--seeds",
        "1,2,3",
        "--out",
        path_str(&dir),
        "--classifier",
        path_str(&clf),
    ])?;
    let text = std::fs::read_to_string(dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .filter(|l| l.ends_with(",ok"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("bad sweep row {l:?}"));
            Ok((num(0)? as u64, num(1)?, num(2)?))
        })
        .collect()
}

fn c10_rng_kinds(tmp: &Path) -> Outcome {
    let mt = sweep(tmp, "smoke.cfg", "c10_mt_snd")?;
    let lc = sweep(tmp, "smoke-lc-ud.cfg", "c10_lc_ud")?;
    let rel = |rows: &[(u64, f64, f64)]| {
        let (m, s) = mean_std(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
        s / m
    };
    let fmt = |rows: &[(u64, f64, f64)]| {
        rows.iter()
            .map(|(s, d, is)| format!("seed {s}: {d:.3}/{is:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mt_rel = rel(&mt);
    check(
        mt.len() == 3 && mt_rel < MT_SND_RELATIVE_STD_MAX,
        format!(
            "MT(SND) moment distance/IS [{}] relative std {mt_rel:.4} (max {MT_SND_RELATIVE_STD_MAX}); \
             LC(UD) [{}] relative std {:.4}, no bar",
            fmt(&mt),
            fmt(&lc),
            rel(&lc)
        ),
    )
}

fn c11_score_contract() -> Outcome {
    let uniform = proxy_inception_score(&Tensor::full(&[16, 10], 0.1)).map_err(|e| e.to_string())?;
    let c = 10;
    let onehot = Tensor::from_fn(&[3 * c, c], |i| if i % c == (i / c) % c { 1.0 } else { 0.0 });
    let balanced = proxy_inception_score(&onehot).map_err(|e| e.to_string())?;
    let pair = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.1, 0.9]).unwrap();
    let two = proxy_inception_score(&pair).map_err(|e| e.to_string())?;
    let closed = (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln()).exp();
    let probs = softmax(&Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 3.0, 0.0, 0.5]).unwrap()).unwrap();
    let sums_ok = probs.data().chunks_exact(3).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    check(
        (uniform - 1.0).abs() < 1e-9 && (balanced - c as f64).abs() < 1e-6 && (two - closed).abs() < 1e-4 && sums_ok,
        format!("uniform {uniform:.12}, one-hot over {c} classes {balanced:.9}, N=2 case {two:.6} (closed form {closed:.6})"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "parameter-count law", Box::new(c1_parameter_law)),
        (2, "count-params report", Box::new(c2_table_report)),
        (3, "gradient correctness", Box::new(c3_gradients)),
        (4, "second-order correctness", Box::new(c4_second_order)),
        (5, "RNG golden vectors", Box::new(c5_golden_vectors)),
        (6, "lattice pathology", Box::new(c6_lattice)),
        (7, "mask determinism", Box::new(move || c7_masks(t))),
        (8, "run determinism", Box::new(move || c8_determinism(t))),
        (9, "convergence smoke", Box::new(move || c9_convergence(t))),
        (10, "RNG-kind comparison", Box::new(move || c10_rng_kinds(t))),
        (11, "proxy score contract", Box::new(c11_score_contract)),
    ];
    let only: Option<Vec<u32>> = std::env::var("PGAN_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1} s]");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
