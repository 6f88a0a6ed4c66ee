//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line for
//! its criterion, then fails if the criterion does not hold.

mod common;

use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{gradcheck, micro, oracles};
use rand::Rng;
use rawdarts::config::RunConfig;
use rawdarts::frontend::{sample_mask, SincFilterBank};
use rawdarts::metrics::{compute_eer, compute_min_tdcf, split_scores, ScoreRecord, TdcfCosts};
use rawdarts::model::{Architecture, Model, ModelConfig, ParamCounts};
use rawdarts::nn::Mode;
use rawdarts::pipeline;
use rawdarts::rng::seeded;
use rawdarts::search::{
    derive_cell, derive_genotype, AlphaSnapshot, Genotype, MixedEdge, OpKind, EDGES,
};
use rawdarts::trainer::{Checkpoint, ScratchConfig, ScratchRun, SearchRun};
use rawdarts::{Graph, ParamStore};

/// Runs `check`, prints its verdict and re-raises a failure.
fn criterion(n: usize, name: &str, check: impl FnOnce() -> String) {
    let result = catch_unwind(AssertUnwindSafe(check));
    let line = match &result {
        Ok(detail) => format!("PASS criterion {n:>2} {name}: {detail}"),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("FAIL criterion {n:>2} {name}: {msg}")
        }
    };
    // bypasses the test harness capture so every verdict is visible
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

#[test]
fn criterion_01_gradients() {
    criterion(1, "gradient checks", || {
        let start = Instant::now();
        let results = gradcheck::all();
        for r in &results {
            assert!(
                r.worst < gradcheck::TOL,
                "{}: max relative error {:.3e}",
                r.name,
                r.worst
            );
        }
        let worst = results.iter().map(|r| r.worst).fold(0.0, f64::max);
        assert!(
            start.elapsed() < Duration::from_secs(120),
            "took {:?}",
            start.elapsed()
        );
        format!(
            "{} primitives x {} shapes, worst {worst:.2e}, {:.1}s",
            results.len(),
            gradcheck::CASES,
            start.elapsed().as_secs_f64()
        )
    });
}

#[test]
fn criterion_02_structure() {
    criterion(2, "full-size structure", || {
        let start = Instant::now();
        let cfg = ModelConfig::full();
        let lengths = cfg.stage_lengths().unwrap();
        assert_eq!(*lengths.last().unwrap(), 41);
        assert_eq!(cfg.final_channels(), 1024);
        let mut widths: Vec<usize> = cfg.cell_specs().iter().map(|s| 4 * s.channels).collect();
        widths.dedup();
        assert_eq!(widths, vec![256, 512, 1024]);
        let mut store = ParamStore::new();
        Model::build(
            &mut store,
            &mut seeded(0),
            &cfg,
            &Architecture::Discrete(Genotype::reference()),
        )
        .unwrap();
        let c = ParamCounts::of(&store);
        assert_eq!(c.gru, 18_892_800);
        let total = c.total() as f64;
        assert!((total / 24.48e6 - 1.0).abs() <= 0.03, "total {total}");
        assert!(start.elapsed() < Duration::from_secs(60));
        format!(
            "output 1024 x 41, total {} params, GRU {}",
            c.total(),
            c.gru
        )
    });
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn criterion_03_partial_channel_degeneracy() {
    criterion(3, "partial channels", || {
        let mut rng = seeded(30);
        for case in 0..100 {
            let c = 4 * rng.random_range(1..4);
            let (b, l) = (rng.random_range(1..3), rng.random_range(3..12));
            let x: Vec<f64> = (0..b * c * l)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let alpha: Vec<f64> = (0..OpKind::COUNT)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let w = softmax(&alpha);
            for k_c in [1, 2, 4] {
                let mut store = ParamStore::new();
                let edge = MixedEdge::new(&mut store, &mut seeded(case), "e", c / k_c);
                let mut g = Graph::new();
                let xv = g.input([b, c, l], x.clone()).unwrap();
                let wv = g.input([OpKind::COUNT], w.clone()).unwrap();
                let mut selected: Vec<usize> =
                    rand::seq::index::sample(&mut rng, c, c / k_c).into_vec();
                selected.sort_unstable();
                let y = edge
                    .forward(&mut g, &store, xv, wv, 0, &selected, Mode::Train, 0.3)
                    .unwrap();
                let xs = g.select_channels(xv, &selected).unwrap();
                let full = edge
                    .mixture(&mut g, &store, xs, wv, 0, Mode::Train, 0.3)
                    .unwrap();
                let (y, full) = (g.value(y).to_vec(), g.value(full).to_vec());
                for bi in 0..b {
                    for ch in 0..c {
                        let out = &y[(bi * c + ch) * l..][..l];
                        match selected.iter().position(|&s| s == ch) {
                            Some(p) => {
                                let m = &full[(bi * selected.len() + p) * l..][..l];
                                assert!(
                                    out.iter().zip(m).all(|(a, b)| a.to_bits() == b.to_bits()),
                                    "mixed channel {ch}"
                                );
                            }
                            None => {
                                let inp = &x[(bi * c + ch) * l..][..l];
                                assert!(
                                    out.iter().zip(inp).all(|(a, b)| a.to_bits() == b.to_bits()),
                                    "passthrough channel {ch}"
                                );
                            }
                        }
                    }
                }
            }
        }
        "K_C=1 equals the full mixture bitwise; K_C 2/4 pass unselected channels through".into()
    });
}

#[test]
fn criterion_04_derivation() {
    criterion(4, "genotype derivation", || {
        let mut rng = seeded(40);
        let sorted = |mut v: Vec<[(usize, OpKind); 2]>| {
            v.iter_mut().for_each(|p| p.sort_by_key(|e| e.0));
            v
        };
        for _ in 0..1000 {
            let table: Vec<f64> = (0..EDGES * OpKind::COUNT)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let got = derive_cell(&table).unwrap();
            assert_eq!(sorted(got.0.clone()), sorted(oracles::derive_cell(&table)));
            let c = rng.random_range(-5.0..5.0);
            let shifted: Vec<f64> = table.iter().map(|a| a + c).collect();
            assert_eq!(derive_cell(&shifted).unwrap(), got);
            for pair in &got.0 {
                assert!(pair.iter().all(|(_, op)| *op != OpKind::None));
                assert_ne!(pair[0].0, pair[1].0);
            }
            got.validate().unwrap();
        }
        let snap = AlphaSnapshot {
            normal: vec![0.0; EDGES * OpKind::COUNT],
            expand: (0..EDGES * OpKind::COUNT)
                .map(|i| (i as f64 * 0.37).sin())
                .collect(),
        };
        derive_genotype(&snap, 2).unwrap().validate().unwrap();
        "1000 tables match the brute-force oracle, shift invariant, no `none`, 2 distinct inputs"
            .into()
    });
}

#[test]
fn criterion_05_masking_law() {
    criterion(5, "filter masking", || {
        let mut rng = seeded(50);
        let (filters, max, draws) = (64, 16, 10_000);
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            let m = sample_mask(&mut rng, filters, max).unwrap();
            assert!(m.count < max);
            assert!(m.start + m.count <= filters);
            counts[m.count] += 1;
        }
        let expected = draws as f64 / max as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 99% quantile of chi-square with 15 degrees of freedom
        assert!(chi2 < 30.578, "chi2 {chi2}");
        for f in [0, 1] {
            for _ in 0..1000 {
                assert_eq!(sample_mask(&mut rng, filters, f).unwrap().count, 0);
            }
        }
        format!("chi2 {chi2:.2} over 15 dof, F in {{0, 1}} never masks")
    });
}

/// Magnitude response of a kernel at `hz`.
fn response(kernel: &[f64], hz: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * hz / sample_rate;
    let (re, im) = kernel
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(re, im), (n, &k)| {
            (re + k * (w * n as f64).cos(), im - k * (w * n as f64).sin())
        });
    re.hypot(im)
}

#[test]
fn criterion_06_sinc_bands() {
    criterion(6, "sinc frontend", || {
        let (sr, k) = (16000.0, 128);
        let bands = [
            (100.0, 900.0),
            (300.0, 1200.0),
            (500.0, 2500.0),
            (1000.0, 2000.0),
            (1500.0, 3000.0),
            (2000.0, 4000.0),
            (3000.0, 4500.0),
            (4000.0, 6000.0),
            (5000.0, 7000.0),
            (6000.0, 7400.0),
        ];
        let bank = SincFilterBank::new(
            bands.iter().map(|b| b.0).collect(),
            bands.iter().map(|b| b.1).collect(),
            k,
            sr,
        )
        .unwrap();
        let kernels = bank.build_kernels().unwrap();
        // transition allowance of the Hamming-windowed kernel
        let guard = 4.0 * sr / k as f64;
        let mut worst_margin = f64::INFINITY;
        for (c, &(f1, f2)) in bands.iter().enumerate() {
            let kern = &kernels.data()[c * k..][..k];
            let grid: Vec<f64> = (0..=8000).map(|i| i as f64).collect();
            let mags: Vec<f64> = grid.iter().map(|&f| response(kern, f, sr)).collect();
            let (peak_i, peak) =
                mags.iter()
                    .enumerate()
                    .fold((0, 0.0), |b, (i, &m)| if m > b.1 { (i, m) } else { b });
            assert!(
                (f1..=f2).contains(&grid[peak_i]),
                "band {c}: peak at {} Hz",
                grid[peak_i]
            );
            let stop = grid
                .iter()
                .zip(&mags)
                .filter(|(&f, _)| f < f1 - guard || f > f2 + guard)
                .map(|(_, &m)| m)
                .fold(0.0, f64::max);
            let margin = 20.0 * (peak / stop).log10();
            assert!(
                margin >= 20.0,
                "band {c}: stop band only {margin:.1} dB down"
            );
            worst_margin = worst_margin.min(margin);
        }
        let flat = SincFilterBank::new(vec![1000.0], vec![1000.0], k, sr)
            .unwrap()
            .build_kernels()
            .unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
        format!("10 bands peak in band, stop band >= {worst_margin:.1} dB down, f1 = f2 gives a zero kernel")
    });
}

#[test]
fn criterion_07_metrics() {
    criterion(7, "metrics oracles", || {
        let mut rng = seeded(70);
        for _ in 0..200 {
            let t: Vec<f64> = (0..rng.random_range(1..11))
                .map(|_| rng.random_range(0..8) as f64 * 0.5)
                .collect();
            let n: Vec<f64> = (0..rng.random_range(1..11))
                .map(|_| rng.random_range(0..8) as f64 * 0.5 - 1.0)
                .collect();
            let (eer, _) = compute_eer(&t, &n).unwrap();
            assert!((eer - oracles::eer(&t, &n)).abs() <= 1e-12, "{t:?} {n:?}");
        }
        assert_eq!(compute_eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap().0, 0.0);
        assert!((compute_eer(&[1.0, 3.0], &[0.0, 2.0]).unwrap().0 - 0.25).abs() <= 1e-12);
        assert!((compute_eer(&[1.0, 1.0], &[1.0, 1.0]).unwrap().0 - 0.5).abs() <= 1e-12);
        for i in 0..100 {
            let costs = if i == 0 {
                TdcfCosts::default()
            } else {
                oracles::random_costs(&mut rng)
            };
            let records: Vec<ScoreRecord> = (0..rng.random_range(2..20))
                .map(|j| ScoreRecord {
                    utterance: format!("u{j}"),
                    attack: if j % 2 == 0 { "-".into() } else { "A01".into() },
                    key: if j % 2 == 0 {
                        rawdarts::data::Key::Bonafide
                    } else {
                        rawdarts::data::Key::Spoof
                    },
                    score: rng.random_range(0..6) as f64,
                })
                .collect();
            let (bona, spoof) = split_scores(&records);
            let (got, _) = compute_min_tdcf(&records, &costs).unwrap();
            let want = oracles::min_tdcf(&bona, &spoof, &costs);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
        "200 EER sets and 100 min t-DCF fixtures match exhaustive enumeration; fixtures 0 / 0.25 / 0.5".into()
    });
}

#[test]
fn criterion_08_bilevel() {
    criterion(8, "bi-level search", || {
        let train = micro::data(80, 6);
        let dev = micro::data(81, 2);
        let mut run = SearchRun::new(&micro::search(3, 2), &micro::model(), &train).unwrap();
        let mut prev = run.alpha_snapshot();
        for epoch in 0..3 {
            let stats = run.run_epoch(&train, &dev).unwrap();
            pipeline::audit_batches(run.split(), &stats.w_batches, &stats.alpha_batches).unwrap();
            let now = run.alpha_snapshot();
            let same =
                |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if epoch < 2 {
                assert!(
                    same(&now.normal, &prev.normal) && same(&now.expand, &prev.expand),
                    "epoch {epoch}"
                );
            } else {
                assert!(!same(&now.normal, &prev.normal) && !same(&now.expand, &prev.expand));
            }
            prev = now;
        }
        let split = run.split();
        assert!(split.w.iter().all(|i| !split.alpha.contains(i)));
        "architecture weights frozen for 2 warm-up epochs, updated in epoch 3; splits disjoint"
            .into()
    });
}

fn synth(dir: &Path, n_per_class: usize, seed: u64) {
    pipeline::synth_data(dir, n_per_class, seed, Some(4000)).unwrap();
}

struct DeskRun {
    genotype: Vec<u8>,
    scores: Vec<u8>,
    eer: f64,
}

fn desk_run(root: &Path, out: &str) -> DeskRun {
    let mut cfg = RunConfig::toy();
    cfg.train_protocol = Some(root.join("train").join(pipeline::PROTOCOL_FILE));
    cfg.dev_protocol = Some(root.join("dev").join(pipeline::PROTOCOL_FILE));
    let out = root.join(out);
    let train = pipeline::load_configured(&cfg, &cfg.train_protocol, &None, "train").unwrap();
    let dev = pipeline::load_configured(&cfg, &cfg.dev_protocol, &None, "dev").unwrap();
    let sel =
        pipeline::run_search(&cfg, &train, &dev, &out.join("search"), false, &mut |_| {}).unwrap();
    let best = pipeline::run_train(
        &cfg,
        &sel.genotype,
        Some(&sel.frontend),
        &train,
        &dev,
        &out.join("train"),
        false,
        &mut |_| {},
    )
    .unwrap();
    let eval = root.join("eval");
    let scores = out.join("scores.txt");
    let report = pipeline::run_eval(
        &best,
        &eval.join(pipeline::PROTOCOL_FILE),
        &eval,
        &scores,
        None,
        32,
    )
    .unwrap();
    DeskRun {
        genotype: fs::read(out.join("search").join(pipeline::GENOTYPE_FILE)).unwrap(),
        scores: fs::read(scores).unwrap(),
        eer: report.pooled_eer,
    }
}

#[test]
fn criterion_09_desk_run() {
    criterion(9, "toy end-to-end run", || {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        synth(&root.join("train"), 200, 1);
        synth(&root.join("dev"), 100, 2);
        synth(&root.join("eval"), 100, 3);
        let start = Instant::now();
        let first = desk_run(root, "a");
        let elapsed = start.elapsed();
        let second = desk_run(root, "b");
        assert!(
            first.genotype == second.genotype,
            "genotype files differ between reruns"
        );
        assert!(
            first.scores == second.scores,
            "score files differ between reruns"
        );
        assert!(elapsed < Duration::from_secs(30 * 60), "took {elapsed:?}");
        assert!(
            first.eer <= 0.10,
            "eval EER {:.2}% exceeds 10%",
            100.0 * first.eer
        );
        format!(
            "eval EER {:.2}%, {:.0}s per run, rerun byte-identical",
            100.0 * first.eer,
            elapsed.as_secs_f64()
        )
    });
}

#[test]
fn criterion_10_resume() {
    criterion(10, "checkpoint and resume", || {
        let train = micro::data(100, 4);
        let dev = micro::data(101, 2);
        let geno = Genotype::reference();
        let mut full = ScratchRun::new(&micro::scratch(4), &micro::model(), &geno, None).unwrap();
        while !full.is_done() {
            full.run_epoch(&train, &dev).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ckpt");
        for k in 1..4 {
            let mut first =
                ScratchRun::new(&micro::scratch(4), &micro::model(), &geno, None).unwrap();
            for _ in 0..k {
                first.run_epoch(&train, &dev).unwrap();
            }
            first.checkpoint().save(&path).unwrap();
            drop(first);
            let mut resumed =
                ScratchRun::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
            while !resumed.is_done() {
                resumed.run_epoch(&train, &dev).unwrap();
            }
            assert!(
                resumed.checkpoint().to_bytes().unwrap() == full.checkpoint().to_bytes().unwrap(),
                "resume at {k}"
            );
        }
        let mut search = SearchRun::new(&micro::search(3, 1), &micro::model(), &train).unwrap();
        search.run_epoch(&train, &dev).unwrap();
        let mut search_full =
            SearchRun::new(&micro::search(3, 1), &micro::model(), &train).unwrap();
        while !search_full.is_done() {
            search_full.run_epoch(&train, &dev).unwrap();
        }
        search.checkpoint().save(&path).unwrap();
        let mut search = SearchRun::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        while !search.is_done() {
            search.run_epoch(&train, &dev).unwrap();
        }
        assert!(
            search.checkpoint().to_bytes().unwrap() == search_full.checkpoint().to_bytes().unwrap()
        );

        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        full.checkpoint().save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert!(fs::read(&a).unwrap() == fs::read(&b).unwrap());
        "resume at epochs 1-3 and mid-search reproduce the uninterrupted checkpoint; save-load-save byte-identical".into()
    });
}

#[test]
fn criterion_11_cosine_endpoints() {
    criterion(11, "learning-rate schedule", || {
        let defaults = ScratchConfig::default();
        assert_eq!((defaults.lr_max, defaults.lr_min), (5e-5, 2e-5));
        let dir = tempfile::tempdir().unwrap();
        let m = micro::model();
        let mut cfg = RunConfig::from_parts(
            0,
            &m,
            &micro::search(1, 0),
            &ScratchConfig {
                epochs: 3,
                batch: 4,
                ..ScratchConfig::default()
            },
        );
        cfg.freeze_frontend = true;
        let train = micro::data(110, 2);
        let dev = micro::data(111, 2);
        let out = dir.path().join("train");
        pipeline::run_train(
            &cfg,
            &Genotype::reference(),
            None,
            &train,
            &dev,
            &out,
            false,
            &mut |_| {},
        )
        .unwrap();
        let log = fs::read_to_string(out.join(pipeline::TRAIN_LOG)).unwrap();
        let lrs: Vec<f64> = log
            .lines()
            .skip(1)
            .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(lrs.len(), 3);
        assert!((lrs[0] - 5e-5).abs() <= 1e-12, "first lr {}", lrs[0]);
        assert!((lrs[2] - 2e-5).abs() <= 1e-12, "last lr {}", lrs[2]);
        assert!(
            (defaults.lr(0) - 5e-5).abs() <= 1e-12
                && (defaults.lr(defaults.epochs - 1) - 2e-5).abs() <= 1e-12
        );
        format!(
            "logged lr {} at epoch 0 and {} at the final epoch",
            lrs[0], lrs[2]
        )
    });
}
