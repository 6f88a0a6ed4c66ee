use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rawdarts::data::digest_dataset;
use rawdarts::metrics::{per_attack_report, read_scores};
use rawdarts::search::Genotype;

fn rawdarts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawdarts"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MICRO: &str = r#"
seed = 3
frontend = "sinc-linear"
filters = 8
kernel_len = 32
sample_rate = 4000
mask_max = 4
samples = 600
channels = 4
cells = 4
expand_positions = [2]
gru_hidden = 8
gru_layers = 1
embedding_dim = 8
search_epochs = 2
warmup_epochs = 1
search_batch = 4
w_lr = 1e-3
train_epochs = 3
train_batch = 4
lr_max = 1e-3
lr_min = 4e-4
train_protocol = "train/protocol.txt"
dev_protocol = "dev/protocol.txt"
"#;

#[test]
fn synth_data_writes_wavs_and_a_reproducible_digest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = rawdarts(&[
        "synth-data",
        "--out",
        p(&a),
        "--n-per-class",
        "10",
        "--seed",
        "4",
        "--toy-rate",
        "4000",
    ]);
    assert!(out_a.status.success());
    let wavs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "wav")
        })
        .count();
    assert_eq!(wavs, 20);
    let out_b = rawdarts(&[
        "synth-data",
        "--out",
        p(&b),
        "--n-per-class",
        "10",
        "--seed",
        "4",
        "--toy-rate",
        "4000",
    ]);
    assert_eq!(stdout(&out_a), stdout(&out_b));
    let digest = digest_dataset(&a.join("protocol.txt"), &a).unwrap();
    assert!(stdout(&out_a).contains(&format!("sha256 {}", digest.sha256)));
    assert!(stdout(&out_a).contains("count 20"));
    assert!(stdout(&out_a).contains("duration_s 20.000"));
}

#[test]
fn default_param_count_matches_the_reference_budget() {
    let o = rawdarts(&["param-count"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row = |name: &str| -> usize {
        text.lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .and_then(|l| l.split_whitespace().last())
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(row("gru"), 18_892_800);
    let total = row("total") as f64;
    assert!((total - 24.48e6).abs() <= 0.03 * 24.48e6);
}

#[test]
fn print_config_emits_resolved_defaults() {
    let o = rawdarts(&["param-count", "--print-config"]);
    let cfg = rawdarts::config::RunConfig::parse(&stdout(&o)).unwrap();
    assert_eq!(cfg, rawdarts::config::RunConfig::default());
    let toy = rawdarts(&["config", "--preset", "toy"]);
    assert_eq!(
        rawdarts::config::RunConfig::parse(&stdout(&toy)).unwrap(),
        rawdarts::config::RunConfig::toy()
    );
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(
        rawdarts(&["param-count", "--config", p(&cfg)])
            .status
            .code(),
        Some(2)
    );
    fs::write(&cfg, MICRO).unwrap();
    let missing = dir.path().join("missing.txt");
    let o = rawdarts(&[
        "train",
        "--config",
        p(&cfg),
        "--genotype",
        p(&missing),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        rawdarts(&["train", "--config", p(&cfg)]).status.code(),
        Some(2)
    );
    // the configured protocols do not exist yet
    let o = rawdarts(&[
        "search",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn micro_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (name, seed) in [("train", "1"), ("dev", "2"), ("eval", "3")] {
        let o = rawdarts(&[
            "synth-data",
            "--out",
            p(&root.join(name)),
            "--n-per-class",
            "4",
            "--seed",
            seed,
            "--toy-rate",
            "4000",
        ]);
        assert!(o.status.success());
    }
    let cfg = root.join("run.toml");
    fs::write(&cfg, MICRO).unwrap();

    let search = root.join("search");
    let o = rawdarts(&["search", "--config", p(&cfg), "--out", p(&search)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let genotype = search.join("genotype.txt");
    Genotype::parse(&fs::read_to_string(&genotype).unwrap()).unwrap();
    assert_eq!(
        fs::read_to_string(search.join("search_log.tsv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    // warm-up leaves the architecture weights untouched
    assert_eq!(
        fs::read(search.join("alpha/initial.txt")).unwrap(),
        fs::read(search.join("alpha/epoch_000.txt")).unwrap()
    );
    assert_ne!(
        fs::read(search.join("alpha/epoch_000.txt")).unwrap(),
        fs::read(search.join("alpha/epoch_001.txt")).unwrap()
    );

    let train = root.join("train_out");
    let o = rawdarts(&[
        "train",
        "--config",
        p(&cfg),
        "--genotype",
        p(&genotype),
        "--frontend",
        p(&search.join("frontend.txt")),
        "--out",
        p(&train),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(train.join("train_log.tsv")).unwrap();
    let lrs: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next_back().unwrap())
        .collect();
    assert_eq!(lrs.first(), Some(&"0.001"));
    assert_eq!(lrs.last(), Some(&"0.0004"));

    let scores = root.join("scores.txt");
    let tdcf = root.join("tdcf.toml");
    fs::write(&tdcf, "p_fa_asv = 0.02\n").unwrap();
    let eval_protocol = root.join("eval/protocol.txt");
    let args = |extra: &[&str]| {
        let mut a = vec![
            "eval",
            "--checkpoint",
            p(&train.join("best.ckpt")),
            "--protocol",
            p(&eval_protocol),
            "--out",
            p(&scores),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    };
    let plain = Command::new(env!("CARGO_BIN_EXE_rawdarts"))
        .args(args(&[]))
        .output()
        .unwrap();
    assert!(
        plain.status.success(),
        "{}",
        String::from_utf8_lossy(&plain.stderr)
    );
    assert!(!stdout(&plain).contains("t-DCF"));
    assert!(stdout(&plain).contains("pooled"));
    let with = Command::new(env!("CARGO_BIN_EXE_rawdarts"))
        .args(args(&["--tdcf-config", p(&tdcf)]))
        .output()
        .unwrap();
    assert!(stdout(&with).contains("min t-DCF"));
    let reread = per_attack_report(&read_scores(&scores).unwrap(), None).unwrap();
    assert_eq!(reread.to_text(), stdout(&plain));
    assert_eq!(read_scores(&scores).unwrap().len(), 8);
}
