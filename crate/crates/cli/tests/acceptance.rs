//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p genequery-cli --test acceptance -- --nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use genequery::config::RunConfig;
use genequery::evalkit::{self, cross_validate, pearson, Panel, Scope};
use genequery::featurize::Encoders;
use genequery::model::{GeneQueryModel, Mode, ModelConfig};
use genequery::numcore::{grad_check, Graph, SplitMix64, Tensor};
use genequery::stdata::{make_wsi_folds, normalize, synth_dataset, Dataset, ExprState, ExpressionMatrix, GeneRecord, SynthParams};
use genequery::trainer::{Checkpoint, Trainer};
use genequery::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fixture() -> Dataset {
    synth_dataset(&SynthParams::default()).unwrap().0.normalized().unwrap()
}

/// Small gene-aware model used by the learning criteria.
fn learning_config() -> RunConfig {
    RunConfig {
        d_fuse: 32,
        heads: 4,
        batch_size: 50,
        epochs: 100,
        ..RunConfig::default()
    }
}

fn tiny(mode: Mode) -> ModelConfig {
    ModelConfig {
        d_fuse: 8,
        layers: 2,
        heads: 2,
        max_len: 16,
        seed: 3,
        ..ModelConfig::new(mode, 5, 6)
    }
}

fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

fn spread(m: &mut GeneQueryModel<f64>, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for (_, p) in m.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
}

fn forward(m: &GeneQueryModel<f64>, ei: &Tensor<f64>, eg: &Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.input(ei.clone());
    let b = g.input(eg.clone());
    let out = m.forward_batch(&mut g, a, b, None).unwrap();
    g.data(out.preds).to_vec()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for mode in [Mode::GeneAware, Mode::SpotAware] {
        let mut m = GeneQueryModel::<f64>::new(tiny(mode)).unwrap();
        spread(&mut m, 21);
        let mut rng = SplitMix64::new(22);
        let (ei, eg) = (random(&mut rng, 3, 5), random(&mut rng, 4, 6));
        let target: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = m.config().clone();
        let r = grad_check(m.params(), 1e-4, |g, p| {
            let model = GeneQueryModel::from_params(cfg.clone(), p.clone())?;
            let a = g.input(ei.clone());
            let b = g.input(eg.clone());
            let out = model.forward_batch(g, a, b, None)?;
            g.masked_mse(out.preds, &target, &[true; 12])
        })
        .unwrap();
        worst = worst.max(r.max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over both modes, {secs:.1} s"),
    )
}

/// n Σxy − Σx Σy over the root terms, written independently of the library.
fn direct_pcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn criterion_2() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    let mut oracle_err: f64 = 0.0;
    let mut pairs = Vec::new();
    for _ in 0..1000 {
        let x: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.uniform() + rng.normal()).collect();
        let r = pearson(&x, &y).unwrap().unwrap();
        oracle_err = oracle_err.max((r - direct_pcc(&x, &y)).abs());
        pairs.push((x, y, r));
    }
    let mut affine_err: f64 = 0.0;
    for (x, y, r) in pairs.iter().take(100) {
        let a = loop {
            let a = 10.0 * (rng.uniform() - 0.5);
            if a.abs() > 1e-3 {
                break a;
            }
        };
        let b = 100.0 * (rng.uniform() - 0.5);
        let t: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r2 = pearson(&t, y).unwrap().unwrap();
        affine_err = affine_err.max((r2 - a.signum() * r).abs());
    }
    outcome(
        oracle_err < 1e-9 && affine_err < 1e-9,
        format!("oracle gap {oracle_err:.1e} over 1000 pairs, affine gap {affine_err:.1e} over 100 transforms"),
    )
}

fn criterion_3(ds: &Dataset) -> Outcome {
    let t = Instant::now();
    let cfg = learning_config();
    let fold = &make_wsi_folds(&ds.wsi_ids(), 2, cfg.seed).unwrap()[0];
    let all: Vec<usize> = (0..ds.library.len()).collect();
    let out = Trainer::new(ds, &fold.train, &all, &cfg).unwrap().run(|_| {}).unwrap();
    let first = out.log[0].train_mse;
    let last = out.log.last().unwrap().train_mse;
    let entries =
        evalkit::evaluate(&out.model, &out.encoders, ds, &fold.test, &all, &all, &[Scope::All], 0).unwrap();
    let pcc = entries[0].score(Panel::All).value;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        last <= 0.1 * first && pcc >= 0.5 && secs < 600.0,
        format!(
            "train MSE {first:.4} -> {last:.4} ({:.1}%), held-out PCC(ALL) {pcc:.3}, {secs:.0} s",
            100.0 * last / first
        ),
    )
}

fn criterion_4(ds: &Dataset) -> Outcome {
    let cfg = learning_config();
    let mut scores = Vec::new();
    for ratio in [0.2, 0.4, 0.6] {
        let cv = cross_validate(ds, &cfg, 2, Some(ratio), &[Scope::Unseen], 1).unwrap();
        scores.push(cv.reports[0].mean(Panel::All));
    }
    let pass = scores.iter().all(|&s| s > 0.2) && scores[2] >= scores[0];
    outcome(
        pass,
        format!(
            "unseen PCC(ALL) {:.3} / {:.3} / {:.3} at 20/40/60% seen",
            scores[0], scores[1], scores[2]
        ),
    )
}

fn criterion_5(ds: &Dataset) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // both modes train and evaluate on the same fixture
    let small = ds.select_genes(&(0..12).collect::<Vec<_>>()).unwrap();
    let all: Vec<usize> = (0..12).collect();
    for mode in [Mode::GeneAware, Mode::SpotAware] {
        let mut cfg = learning_config();
        cfg.mode = mode;
        cfg.epochs = 3;
        let out = Trainer::new(&small, &["wsi0".to_string()], &all, &cfg).unwrap().run(|_| {}).unwrap();
        let e = evalkit::evaluate(&out.model, &out.encoders, &small, &["wsi1".into()], &all, &all, &[Scope::All], 0)
            .unwrap();
        let v = e[0].score(Panel::All).value;
        pass &= v.is_finite() && out.log.iter().all(|l| l.train_mse.is_finite());
        notes.push(format!("{} ok", mode.as_str()));
    }

    // gene-aware permutation equivariance
    let mut m = GeneQueryModel::<f64>::new(tiny(Mode::GeneAware)).unwrap();
    spread(&mut m, 9);
    let mut rng = SplitMix64::new(10);
    let (ei, eg) = (random(&mut rng, 2, 5), random(&mut rng, 5, 6));
    let perm = [3, 0, 4, 1, 2];
    let eg_p = Tensor::matrix(5, 6, perm.iter().flat_map(|&p| eg.row(p).to_vec()).collect()).unwrap();
    let (base, shuffled) = (forward(&m, &ei, &eg), forward(&m, &ei, &eg_p));
    let mut perm_gap: f64 = 0.0;
    for s in 0..2 {
        for (i, &p) in perm.iter().enumerate() {
            perm_gap = perm_gap.max((shuffled[s * 5 + i] - base[s * 5 + p]).abs());
        }
    }

    // spot-aware permutation equivariance and padding invariance
    let mut sa = GeneQueryModel::<f64>::new(tiny(Mode::SpotAware)).unwrap();
    spread(&mut sa, 11);
    let hs = random(&mut rng, 3, 8);
    let hg = random(&mut rng, 1, 8);
    let seq = |m: &GeneQueryModel<f64>, spots: Tensor<f64>, mask: &[bool]| {
        let mut g = Graph::new();
        let a = g.input(spots);
        let b = g.input(hg.clone());
        let out = m.forward_spot_aware(&mut g, a, b, mask).unwrap();
        g.data(out.preds).to_vec()
    };
    let base = seq(&sa, hs.clone(), &[true; 3]);
    let rev = Tensor::matrix(3, 8, (0..3).rev().flat_map(|r| hs.row(r).to_vec()).collect()).unwrap();
    let r = seq(&sa, rev, &[true; 3]);
    for i in 0..3 {
        perm_gap = perm_gap.max((r[i] - base[2 - i]).abs());
    }
    let mut padded = hs.data().to_vec();
    padded.extend((0..5 * 8).map(|_| 100.0 * rng.normal()));
    let mut mask = vec![false; 8];
    mask[..3].fill(true);
    let long = GeneQueryModel::from_params(ModelConfig { max_len: 8, ..sa.config().clone() }, sa.params().clone()).unwrap();
    let p = seq(&long, Tensor::matrix(8, 8, padded).unwrap(), &mask);
    let pad_gap = (0..3).map(|i| (p[i] - base[i]).abs()).fold(0.0, f64::max);

    // zeroed transformer output projections reduce to R(h_img + h_gene)
    let mut closed_gap: f64 = 0.0;
    for mode in [Mode::GeneAware, Mode::SpotAware] {
        let mut m = GeneQueryModel::<f64>::new(tiny(mode)).unwrap();
        spread(&mut m, 5);
        for (name, p) in m.params_mut().iter_mut() {
            if name.contains(".attn.o.") || name.contains(".mlp.fc2.") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (ei, eg) = (random(&mut rng, 3, 5), random(&mut rng, 4, 6));
        let out = forward(&m, &ei, &eg);
        let pr = m.params();
        let affine = |x: &[f64], w: &str, b: &str| -> Vec<f64> {
            let w = pr.value(w).unwrap();
            let (r, c) = w.dims2();
            (0..c)
                .map(|j| (0..r).map(|i| x[i] * w.data()[i * c + j]).sum::<f64>() + pr.value(b).unwrap().data()[j])
                .collect()
        };
        for s in 0..3 {
            for j in 0..4 {
                let hi = affine(ei.row(s), "proj.img.w", "proj.img.b");
                let hgv = affine(eg.row(j), "proj.gene.w", "proj.gene.b");
                let joint: Vec<f64> = hi.iter().zip(&hgv).map(|(a, b)| a + b).collect();
                let want = affine(&joint, "reg.w", "reg.b")[0];
                closed_gap = closed_gap.max((out[s * 4 + j] - want).abs());
            }
        }
    }
    pass &= perm_gap < 1e-6 && pad_gap < 1e-6 && closed_gap < 1e-12;
    outcome(
        pass,
        format!(
            "{}; permutation gap {perm_gap:.1e}, padding gap {pad_gap:.1e}, closed-form gap {closed_gap:.1e}",
            notes.join(", ")
        ),
    )
}

fn genequery(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_genequery"))
        .args(args)
        .env("GENEQUERY_THREADS", "1")
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_default()
}

fn criterion_6(root: &Path) -> Outcome {
    let data = root.join("det-data");
    let cfg = root.join("det.txt");
    std::fs::write(&cfg, "d_fuse=16\nheads=2\nepochs=4\nbatch_size=20\nseed=7\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut codes = vec![genequery(&["synth", "--out", &s(&data), "--wsis", "2", "--spots-per-wsi", "30", "--m-genes", "10"])];
    for run in ["r1", "r2"] {
        let out = root.join(run);
        codes.push(genequery(&["eval", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out), "--folds", "2"]));
        codes.push(genequery(&["train", "--config", &s(&cfg), "--data", &s(&data), "--out", &s(&out.join("train"))]));
    }
    let same = |f: &str| {
        let (a, b) = (read(&root.join("r1").join(f)), read(&root.join("r2").join(f)));
        !a.is_empty() && a == b
    };
    let files = ["report.tsv", "report.txt", "loss_fold0.tsv", "loss_fold1.tsv", "train/loss.tsv", "train/model.gqck"];
    let identical = files.iter().all(|f| same(f));

    // save -> load gives bitwise identical predictions
    let ds = synth_dataset(&SynthParams {
        spots_per_wsi: 30,
        m_genes: 10,
        ..SynthParams::default()
    })
    .unwrap()
    .0
    .normalized()
    .unwrap();
    let rc = RunConfig {
        d_fuse: 16,
        heads: 2,
        epochs: 2,
        ..RunConfig::default()
    };
    let genes: Vec<usize> = (0..10).collect();
    let out = Trainer::new(&ds, &ds.wsi_ids(), &genes, &rc).unwrap().run(|_| {}).unwrap();
    let path = root.join("ck.gqck");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let recs: Vec<&GeneRecord> = ds.library.records().iter().collect();
    let bits = |m: &GeneQueryModel<f32>, e: &Encoders| {
        m.predict_matrix(e, &ds.wsis[0], &recs).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let round_trip = bits(&out.model, &out.encoders) == bits(&loaded.model().unwrap(), &loaded.encoders().unwrap());

    // corrupted files
    let bytes = read(&path);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
    let truncated = &bytes[..bytes.len() - 9];
    let rejected = matches!(Checkpoint::from_bytes(&bad_magic, "c"), Err(Error::BadMagic { .. }))
        && matches!(
            Checkpoint::from_bytes(&bad_version, "c"),
            Err(Error::VersionMismatch { expected: 1, found: 2 })
        )
        && matches!(Checkpoint::from_bytes(truncated, "c"), Err(Error::Truncated(_)));

    outcome(
        codes.iter().all(|&c| c == 0) && identical && round_trip && rejected,
        format!(
            "exit codes {codes:?}, repeated outputs identical: {identical}, checkpoint round trip: {round_trip}, corrupt files rejected: {rejected}"
        ),
    )
}

fn criterion_7(root: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let four = root.join("four");
    let out = root.join("four-eval");
    let cfg = root.join("quick.txt");
    std::fs::write(&cfg, "d_fuse=16\nheads=2\nepochs=2\nbatch_size=20\n").unwrap();
    let mut codes = vec![genequery(&["synth", "--out", &s(&four), "--wsis", "4", "--spots-per-wsi", "20", "--m-genes", "8"])];
    codes.push(genequery(&["eval", "--config", &s(&cfg), "--data", &s(&four), "--out", &s(&out), "--folds", "4"]));
    let splits = String::from_utf8(read(&out.join("splits.tsv"))).unwrap_or_default();
    let tests: Vec<&str> = splits.lines().skip(1).filter_map(|l| l.split('\t').nth(2)).collect();
    let mut sorted = tests.clone();
    sorted.sort_unstable();
    let loo = sorted == ["wsi0", "wsi1", "wsi2", "wsi3"];
    let report = String::from_utf8(read(&out.join("report.tsv"))).unwrap_or_default();
    let all_rows: Vec<&str> = report.lines().filter(|l| l.starts_with("ALL\t")).collect();
    let rows_ok = all_rows.len() == 5 && all_rows[4].split('\t').nth(2) == Some("mean");

    // transfer between two sets sharing half of their gene names
    let a = root.join("tr-a");
    let b = root.join("tr-b");
    let train = root.join("tr-train");
    let tr_out = root.join("tr-eval");
    let tcfg = root.join("transfer.txt");
    std::fs::write(&tcfg, "d_fuse=32\nheads=4\nepochs=60\nbatch_size=50\n").unwrap();
    codes.push(genequery(&["synth", "--out", &s(&a), "--spots-per-wsi", "100", "--m-genes", "40"]));
    codes.push(genequery(&[
        "synth", "--out", &s(&b), "--spots-per-wsi", "100", "--m-genes", "40", "--seed", "9", "--world-seed", "0", "--gene-offset", "20",
    ]));
    codes.push(genequery(&["train", "--config", &s(&tcfg), "--data", &s(&a), "--out", &s(&train)]));
    codes.push(genequery(&[
        "eval", "--checkpoint", &s(&train.join("model.gqck")), "--data", &s(&a), "--transfer", &s(&b), "--out", &s(&tr_out),
    ]));
    let genes = String::from_utf8(read(&tr_out.join("genes.txt"))).unwrap_or_default();
    let want: Vec<String> = (20..40).map(|i| format!("GQ{i:05}")).collect();
    let intersection = genes.lines().map(str::to_string).collect::<Vec<_>>() == want;
    let tr_report = String::from_utf8(read(&tr_out.join("report.tsv"))).unwrap_or_default();
    let pcc = tr_report
        .lines()
        .find(|l| l.starts_with("ALL\tall\tmean"))
        .and_then(|l| l.split('\t').nth(3))
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::NAN);
    outcome(
        codes.iter().all(|&c| c == 0) && loo && rows_ok && intersection && pcc > 0.0,
        format!(
            "test slides {tests:?}, 4 folds + mean row: {rows_ok}, transfer scored exactly the 20 shared genes: {intersection}, transfer PCC(ALL) {pcc:.3}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let e = std::f64::consts::E;
    let m = ExpressionMatrix::new(1, 3, vec![0.0, e - 1.0, e * e - 1.0], ExprState::Raw).unwrap();
    let n = normalize(&m).unwrap();
    let want = [0.0, 0.5, 1.0];
    let exact = n.values().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = SplitMix64::new(88);
    let (mut in_range, mut constant_zero, mut monotone) = (true, true, true);
    for case in 0..200 {
        let (rows, cols) = (1 + rng.below(6), 1 + rng.below(12));
        let mut v: Vec<f64> = (0..rows * cols).map(|_| rng.below(500) as f64).collect();
        if case % 10 == 0 {
            let c = rng.below(50) as f64;
            v[..cols].fill(c);
        }
        let raw = ExpressionMatrix::new(rows, cols, v.clone(), ExprState::Raw).unwrap();
        let out = normalize(&raw).unwrap();
        for r in 0..rows {
            let (x, y) = (&v[r * cols..(r + 1) * cols], out.row(r));
            in_range &= y.iter().all(|t| (0.0..=1.0).contains(t));
            if x.iter().all(|&t| t == x[0]) {
                constant_zero &= y.iter().all(|&t| t == 0.0);
            }
            for i in 0..cols {
                for j in 0..cols {
                    if x[i] < x[j] {
                        monotone &= y[i] <= y[j];
                    }
                }
            }
        }
    }
    outcome(
        exact < 1e-12 && in_range && constant_zero && monotone,
        format!(
            "hand case gap {exact:.1e}, in [0,1]: {in_range}, constant rows zero: {constant_zero}, monotone: {monotone}"
        ),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let checks: Vec<(&str, Check)> = vec![
        ("gradient fidelity", Box::new(criterion_1)),
        ("metric oracle", Box::new(criterion_2)),
        ("synthetic learning", Box::new(|| criterion_3(&ds))),
        ("unseen-gene generalization", Box::new(|| criterion_4(&ds))),
        ("mode parity and equivariance", Box::new(|| criterion_5(&ds))),
        ("determinism and persistence", Box::new(|| criterion_6(dir.path()))),
        ("protocol shape", Box::new(|| criterion_7(dir.path()))),
        ("normalization", Box::new(criterion_8)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        // written past the test harness capture so plain `cargo test` shows it
        let line = format!("criterion {} {name}: {} ({})\n", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
