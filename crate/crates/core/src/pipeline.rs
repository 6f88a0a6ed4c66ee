//! File-level stages: synthetic data export, search, training from scratch,
//! scoring and parameter counting. Every stage writes only inside its output
//! directory.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{
    export_dataset, load_dataset, synth_task, DatasetDigest, SynthConfig, Utterance,
};
use crate::error::{Error, Result};
use crate::metrics::{parse_scores, per_attack_report, scores_to_string, Report, TdcfCosts};
use crate::model::{Architecture, Model, ModelConfig, ParamCounts};
use crate::rng::seeded;
use crate::search::{AlphaSnapshot, Genotype};
use crate::tensor::ParamStore;
use crate::trainer::{
    log_line, log_to_string, score_dataset, Checkpoint, EpochRecord, FrontendState, ScratchRun,
    SearchRun, Selection, LOG_HEADER,
};

pub const PROTOCOL_FILE: &str = "protocol.txt";
pub const SEARCH_CHECKPOINT: &str = "search.ckpt";
pub const SEARCH_LOG: &str = "search_log.tsv";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const FRONTEND_FILE: &str = "frontend.txt";
pub const TRAIN_CHECKPOINT: &str = "train.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Writes `2 * n_per_class` synthetic utterances and a protocol to `out`.
/// Without `toy_rate` the utterances are 4 s at 16 kHz; with it they last
/// one second at that rate.
pub fn synth_data(
    out: &Path,
    n_per_class: usize,
    seed: u64,
    toy_rate: Option<u32>,
) -> Result<DatasetDigest> {
    let cfg = match toy_rate {
        None => SynthConfig::full(),
        Some(rate) => SynthConfig {
            sample_rate: rate,
            samples: rate as usize,
            ..SynthConfig::toy()
        },
    };
    let utts = synth_task(&mut seeded(seed), n_per_class, &cfg)?;
    export_dataset(out, PROTOCOL_FILE, &utts, cfg.sample_rate)
}

/// Loads the dataset named by a protocol/WAV-directory pair of the config.
pub fn load_configured(
    cfg: &RunConfig,
    protocol: &Option<PathBuf>,
    wav_dir: &Option<PathBuf>,
    what: &str,
) -> Result<Vec<Utterance>> {
    let protocol = protocol
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{what}_protocol is not set")))?;
    let wav_dir = wav_dir
        .as_deref()
        .or_else(|| protocol.parent())
        .ok_or_else(|| Error::Config(format!("{what}_wav_dir is not set")))?;
    load_dataset(protocol, wav_dir, cfg.sample_rate, cfg.samples)
}

fn alpha_file(out: &Path, epoch: usize) -> PathBuf {
    out.join("alpha").join(format!("epoch_{epoch:03}.txt"))
}

/// Runs (or, with `resume`, continues) the search and writes the per-epoch
/// log and architecture snapshots, the selected genotype and its frontend
/// kernels. `alpha/initial.txt` holds the weights before the first epoch.
pub fn run_search(
    cfg: &RunConfig,
    train: &[Utterance],
    dev: &[Utterance],
    out: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Selection> {
    cfg.validate()?;
    mkdir(&out.join("alpha"))?;
    let ckpt_path = out.join(SEARCH_CHECKPOINT);
    let log = out.join(SEARCH_LOG);
    let mut run = if resume && ckpt_path.exists() {
        let run = SearchRun::from_checkpoint(Checkpoint::load(&ckpt_path)?)?;
        write(&log, &log_to_string(run.history()))?;
        run
    } else {
        let run = SearchRun::new(&cfg.search(), &cfg.model(), train)?;
        write(&log, &format!("{LOG_HEADER}\n"))?;
        write(
            &out.join("alpha").join("initial.txt"),
            &run.alpha_snapshot().to_text(),
        )?;
        run
    };
    let mut previous: AlphaSnapshot = run.alpha_snapshot();
    while !run.is_done() {
        let stats = run.run_epoch(train, dev)?;
        let epoch = stats.record.epoch;
        audit_batches(run.split(), &stats.w_batches, &stats.alpha_batches)?;
        let now = run.alpha_snapshot();
        if epoch < cfg.warmup_epochs && now != previous {
            return Err(Error::Invariant(format!(
                "architecture weights changed during warm-up epoch {epoch}"
            )));
        }
        previous = now;
        write(&alpha_file(out, epoch), &previous.to_text())?;
        run.checkpoint().save(&ckpt_path)?;
        append_line(&log, &log_line(&stats.record))?;
        progress(&stats.record);
    }
    let selection = run.select()?;
    write(&out.join(GENOTYPE_FILE), &selection.genotype.to_text())?;
    write(&out.join(FRONTEND_FILE), &selection.frontend.to_text())?;
    Ok(selection)
}

/// Weight steps read only the weight split and architecture steps only the
/// architecture split.
pub fn audit_batches(
    split: &crate::trainer::Split,
    w: &[Vec<usize>],
    alpha: &[Vec<usize>],
) -> Result<()> {
    let check = |batches: &[Vec<usize>], allowed: &[usize], name: &str| match batches
        .iter()
        .flatten()
        .find(|i| allowed.binary_search(i).is_err())
    {
        Some(i) => Err(Error::Invariant(format!(
            "{name} step read utterance {i} from the other split"
        ))),
        None => Ok(()),
    };
    check(w, &split.w, "weight")?;
    check(alpha, &split.alpha, "architecture")
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Genotype::parse(&text)
}

pub fn read_frontend(path: &Path) -> Result<FrontendState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FrontendState::parse(&text, &path.display().to_string())
}

/// Trains the discrete model, checkpointing every epoch (`train.ckpt`) and
/// keeping the best development epoch (`best.ckpt`). Returns the best
/// checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_train(
    cfg: &RunConfig,
    genotype: &Genotype,
    frontend: Option<&FrontendState>,
    train: &[Utterance],
    dev: &[Utterance],
    out: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    mkdir(out)?;
    let ckpt_path = out.join(TRAIN_CHECKPOINT);
    let log = out.join(TRAIN_LOG);
    let mut run = if resume && ckpt_path.exists() {
        let run = ScratchRun::from_checkpoint(Checkpoint::load(&ckpt_path)?)?;
        if run.model.genotype() != Some(genotype) {
            return Err(Error::Config(
                "the checkpoint was trained with a different genotype".into(),
            ));
        }
        write(&log, &log_to_string(run.history()))?;
        run
    } else {
        write(&log, &format!("{LOG_HEADER}\n"))?;
        ScratchRun::new(&cfg.scratch(), &cfg.model(), genotype, frontend)?
    };
    let frozen = frozen_kernels(&run.model, &run.store);
    while !run.is_done() {
        let record = run.run_epoch(train, dev)?;
        if cfg.freeze_frontend && frozen_kernels(&run.model, &run.store) != frozen {
            return Err(Error::Invariant("frozen frontend kernels changed".into()));
        }
        run.checkpoint().save(&ckpt_path)?;
        if let Some(best) = run.best_checkpoint() {
            if best.next_epoch == record.epoch + 1 {
                best.save(&out.join(BEST_CHECKPOINT))?;
            }
        }
        append_line(&log, &log_line(&record))?;
        progress(&record);
    }
    run.best_checkpoint()
        .cloned()
        .ok_or_else(|| Error::Invariant("training finished without a best epoch".into()))
}

fn frozen_kernels(model: &Model, store: &ParamStore) -> Vec<Vec<f64>> {
    model
        .frontend
        .kernel_params()
        .iter()
        .map(|&p| store.get(p).data().to_vec())
        .collect()
}

/// Scores a protocol with a checkpoint's model, writes the score file and
/// returns the report of the written scores.
pub fn run_eval(
    ckpt: &Checkpoint,
    protocol: &Path,
    wav_dir: &Path,
    scores_out: &Path,
    costs: Option<&TdcfCosts>,
    batch: usize,
) -> Result<Report> {
    let (model, store) = ckpt.restore_model()?;
    let data = load_dataset(
        protocol,
        wav_dir,
        model.config.frontend.sample_rate,
        model.config.samples,
    )?;
    let records = score_dataset(&model, &store, &data, batch)?;
    let text = scores_to_string(&records);
    write(scores_out, &text)?;
    // the report describes the scores exactly as written
    per_attack_report(
        &parse_scores(&text, &scores_out.display().to_string())?,
        costs,
    )
}

/// Learnable parameters of a freshly built model; the reference genotype is
/// used when none is given.
pub fn param_counts(model: &ModelConfig, genotype: Option<&Genotype>) -> Result<ParamCounts> {
    let genotype = genotype.cloned().unwrap_or_else(Genotype::reference);
    let mut store = ParamStore::new();
    Model::build(
        &mut store,
        &mut seeded(0),
        model,
        &Architecture::Discrete(genotype),
    )?;
    Ok(ParamCounts::of(&store))
}
