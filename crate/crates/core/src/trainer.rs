//! Bi-level architecture search with warm-up, training from scratch with a
//! cosine schedule, model selection on the development set, and resumable
//! checkpoints.
//!
//! Each run owns one seeded stream. It is consumed in this order: model
//! initialization, then (search only) the data split, then per epoch the
//! batch shuffles followed by the masks drawn by every training forward pass.
//! Evaluation draws nothing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Key, Utterance};
use crate::error::{Error, Result};
use crate::frontend::FrontendKind;
use crate::metrics::ScoreRecord;
use crate::model::{p2sgrad_loss, predictions, scores, Architecture, Model, ModelConfig};
use crate::nn::Mode;
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::rng::{seeded, RngState, RunRng};
use crate::search::{derive_genotype, AlphaSnapshot, Genotype};
use crate::tensor::{Graph, ParamEntry, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch: usize,
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub w_lr: f64,
    pub k_c: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 30,
            warmup_epochs: 10,
            batch: 14,
            alpha_lr: 6e-4,
            alpha_weight_decay: 1e-3,
            w_lr: 5e-5,
            k_c: 2,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.k_c == 0 {
            return Err(Error::Config(
                "search epochs, batch and k_c must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        check_rate("alpha_lr", self.alpha_lr)?;
        check_rate("w_lr", self.w_lr)?;
        if !(self.alpha_weight_decay >= 0.0 && self.alpha_weight_decay.is_finite()) {
            return Err(Error::Config(
                "alpha_weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScratchConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub freeze_frontend: bool,
}

impl Default for ScratchConfig {
    fn default() -> Self {
        ScratchConfig {
            epochs: 100,
            batch: 32,
            lr_max: 5e-5,
            lr_min: 2e-5,
            seed: 0,
            freeze_frontend: true,
        }
    }
}

impl ScratchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config(
                "training epochs and batch must be positive".into(),
            ));
        }
        check_rate("lr_max", self.lr_max)?;
        check_rate("lr_min", self.lr_min)?;
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr_max, self.lr_min)
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

/// Disjoint halves of a training set, as indices into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Updates network weights.
    pub w: Vec<usize>,
    /// Updates architecture weights.
    pub alpha: Vec<usize>,
}

/// Shuffles each class and sends `floor(n / 2)` of it to the weight split and
/// the rest to the architecture split. Both lists are sorted.
pub fn split_search_data(data: &[Utterance], rng: &mut RunRng) -> Result<Split> {
    use rand::seq::SliceRandom;
    let mut split = Split {
        w: vec![],
        alpha: vec![],
    };
    for key in [Key::Bonafide, Key::Spoof] {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].key == key).collect();
        idx.shuffle(rng);
        let half = idx.len() / 2;
        split.w.extend_from_slice(&idx[..half]);
        split.alpha.extend_from_slice(&idx[half..]);
    }
    if split.w.is_empty() || split.alpha.is_empty() {
        return Err(Error::invalid("training set too small to split for search"));
    }
    split.w.sort_unstable();
    split.alpha.sort_unstable();
    Ok(split)
}

/// One line of the per-epoch log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss of the weight steps.
    pub train_loss: f64,
    /// Mean development loss in evaluation mode.
    pub val_loss: f64,
    pub dev_acc: f64,
    /// Network-weight learning rate used in the epoch.
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_loss\tdev_acc\tlr";

pub fn log_line(r: &EpochRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        r.epoch, r.train_loss, r.val_loss, r.dev_acc, r.lr
    )
}

pub fn log_to_string(history: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{}", log_line(r));
    }
    s
}

/// Stacks utterances into a `[B, 1, L]` input and their labels.
fn load_batch(
    g: &mut Graph,
    data: &[Utterance],
    idx: &[usize],
    samples: usize,
) -> Result<(crate::tensor::Var, Vec<usize>)> {
    let mut wave = Vec::with_capacity(idx.len() * samples);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let u = data
            .get(i)
            .ok_or_else(|| Error::invalid(format!("utterance index {i} out of range")))?;
        if u.samples.len() != samples {
            return Err(Error::shape(format!(
                "{} has {} samples, expected {samples}",
                u.id,
                u.samples.len()
            )));
        }
        wave.extend_from_slice(&u.samples);
        labels.push(u.key.class());
    }
    Ok((g.input([idx.len(), 1, samples], wave)?, labels))
}

/// One optimizer step on a training-mode batch. Returns the loss and the
/// number of correct predictions.
fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamState,
    data: &[Utterance],
    idx: &[usize],
    rng: &mut RunRng,
) -> Result<(f64, usize)> {
    store.zero_grads();
    let mut g = Graph::new();
    let (x, labels) = load_batch(&mut g, data, idx, model.config.samples)?;
    let out = model.forward(&mut g, store, x, Mode::Train, rng)?;
    let loss = p2sgrad_loss(&mut g, out.cos, &labels)?;
    let value = g.item(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let correct = predictions(&g, out.cos)
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    g.backward(loss)?;
    store.accumulate_grads(&g)?;
    store.apply_buffer_updates(&mut g)?;
    opt.step(store)?;
    Ok((value, correct))
}

/// Evaluation-mode pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Bona fide cosine per utterance, in dataset order.
    pub scores: Vec<f64>,
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &[Utterance],
    batch: usize,
) -> Result<Evaluation> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid(
            "evaluation needs data and a positive batch size",
        ));
    }
    // evaluation draws nothing; this stream only satisfies the signature
    let mut unused = seeded(0);
    let (mut loss, mut correct, mut all) = (0.0, 0, Vec::with_capacity(data.len()));
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let mut g = Graph::new();
        let (x, labels) = load_batch(&mut g, data, chunk, model.config.samples)?;
        let out = model.forward(&mut g, store, x, Mode::Eval, &mut unused)?;
        let l = p2sgrad_loss(&mut g, out.cos, &labels)?;
        loss += g.item(l) * chunk.len() as f64;
        correct += predictions(&g, out.cos)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        all.extend(scores(&g, out.cos));
    }
    if !loss.is_finite() || all.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("evaluation".into()));
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        scores: all,
    })
}

/// Score records for a dataset.
pub fn score_dataset(
    model: &Model,
    store: &ParamStore,
    data: &[Utterance],
    batch: usize,
) -> Result<Vec<ScoreRecord>> {
    let ev = evaluate(model, store, data, batch)?;
    Ok(data
        .iter()
        .zip(ev.scores)
        .map(|(u, score)| ScoreRecord {
            utterance: u.id.clone(),
            attack: u.attack.clone(),
            key: u.key,
            score,
        })
        .collect())
}

/// Index of the highest accuracy, the later one on ties.
pub fn select_epoch(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a >= accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

/// Frontend kernel tensors (band edges or `Conv0` weights) carried from the
/// search to training from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendState {
    pub kind: FrontendKind,
    pub tensors: Vec<ParamEntry>,
}

const FRONTEND_HEADER: &str = "# rawdarts frontend";

impl FrontendState {
    pub fn capture(model: &Model, store: &ParamStore) -> Self {
        FrontendState {
            kind: model.config.frontend.kind,
            tensors: model
                .frontend
                .kernel_params()
                .into_iter()
                .map(|p| store.entry(p).clone())
                .collect(),
        }
    }

    /// Copies the kernels into a model built with the same frontend.
    pub fn apply(&self, model: &Model, store: &mut ParamStore) -> Result<()> {
        if self.kind != model.config.frontend.kind {
            return Err(Error::Config(format!(
                "frontend state is {} but the model uses {}",
                self.kind, model.config.frontend.kind
            )));
        }
        for id in model.frontend.kernel_params() {
            let name = store.entry(id).name.clone();
            let src = self
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Config(format!("frontend state lacks {name}")))?;
            if src.tensor.shape() != store.get(id).shape() {
                return Err(Error::Config(format!(
                    "{name}: stored shape {:?} does not match {:?}",
                    src.tensor.shape(),
                    store.get(id).shape()
                )));
            }
            store
                .get_mut(id)
                .data_mut()
                .copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    /// Text with exact (shortest round-trip) values.
    pub fn to_text(&self) -> String {
        let mut s = format!("{FRONTEND_HEADER}\nkind {}\n", self.kind);
        for e in &self.tensors {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            let values: Vec<String> = e.tensor.data().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "tensor {} {}\n{}",
                e.name,
                shape.join(" "),
                values.join(" ")
            );
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(n, l)| (n + 1, l))
                .ok_or_else(|| Error::parse(source, 0, format!("missing {what}")))
        };
        let (n, header) = next("header")?;
        if header.trim() != FRONTEND_HEADER {
            return Err(Error::parse(source, n, "not a rawdarts frontend file"));
        }
        let (n, kind_line) = next("kind line")?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::parse(source, n, "expected `kind <frontend>`"))?
            .trim()
            .parse::<FrontendKind>()
            .map_err(|e| Error::parse(source, n, e.to_string()))?;
        let mut tensors = Vec::new();
        while let Ok((n, head)) = next("tensor") {
            let mut f = head.split_whitespace();
            if f.next() != Some("tensor") {
                return Err(Error::parse(
                    source,
                    n,
                    "expected `tensor <name> <shape...>`",
                ));
            }
            let name = f
                .next()
                .ok_or_else(|| Error::parse(source, n, "missing tensor name"))?
                .to_string();
            let shape = f
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|e| Error::parse(source, n, e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (m, body) = next("tensor values")?;
            let data = body
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::parse(source, m, e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let tensor = crate::tensor::Tensor::new(shape, data)
                .map_err(|e| Error::parse(source, m, e.to_string()))?;
            tensors.push(ParamEntry {
                name,
                group: ParamGroup::Frontend,
                tensor,
            });
        }
        Ok(FrontendState { kind, tensors })
    }
}

/// State recorded at the end of every search epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub alpha: AlphaSnapshot,
    pub frontend: FrontendState,
}

/// What one search epoch did, including every batch it read.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchEpochStats {
    pub record: EpochRecord,
    /// Mean loss of the architecture steps; `None` during warm-up.
    pub alpha_loss: Option<f64>,
    pub train_acc: f64,
    /// Training-set indices of each weight-step batch.
    pub w_batches: Vec<Vec<usize>>,
    /// Training-set indices of each architecture-step batch.
    pub alpha_batches: Vec<Vec<usize>>,
}

/// Stage-specific part of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Search {
        config: SearchConfig,
        split: Split,
        snapshots: Vec<EpochSnapshot>,
    },
    Scratch {
        config: ScratchConfig,
        /// Full state at the best epoch so far.
        best: Option<Box<Checkpoint>>,
    },
}

/// Everything needed to resume a run bit-exactly, or to score with its model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub architecture: Architecture,
    pub store: ParamStore,
    pub optimizers: Vec<AdamState>,
    pub rng: RngState,
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stage: Stage,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDARTSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Magic, little-endian format version, then the bincode body.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model structure and loads the stored values.
    pub fn restore_model(&self) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Model::build(&mut store, &mut seeded(0), &self.model, &self.architecture)?;
        store.load_values(&self.store)?;
        Ok((model, store))
    }
}

/// Architecture search over a supernet.
pub struct SearchRun {
    pub config: SearchConfig,
    pub model: Model,
    pub store: ParamStore,
    w_opt: AdamState,
    a_opt: AdamState,
    rng: RunRng,
    split: Split,
    next_epoch: usize,
    history: Vec<EpochRecord>,
    snapshots: Vec<EpochSnapshot>,
}

impl SearchRun {
    pub fn new(
        config: &SearchConfig,
        model_config: &ModelConfig,
        train: &[Utterance],
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut store = ParamStore::new();
        let model = Model::build(
            &mut store,
            &mut rng,
            model_config,
            &Architecture::Search { k_c: config.k_c },
        )?;
        let split = split_search_data(train, &mut rng)?;
        let mut w_params = store.trainable_in(ParamGroup::Frontend);
        w_params.extend(store.trainable_in(ParamGroup::Network));
        let w_opt = AdamState::new(AdamConfig::new(config.w_lr, 0.0), &store, w_params);
        let a_opt = AdamState::new(
            AdamConfig::new(config.alpha_lr, config.alpha_weight_decay),
            &store,
            store.ids_in(ParamGroup::Architecture),
        );
        Ok(SearchRun {
            config: config.clone(),
            model,
            store,
            w_opt,
            a_opt,
            rng,
            split,
            next_epoch: 0,
            history: vec![],
            snapshots: vec![],
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let Stage::Search {
            config,
            split,
            snapshots,
        } = ckpt.stage.clone()
        else {
            return Err(Error::Checkpoint("not a search checkpoint".into()));
        };
        let (model, store) = ckpt.restore_model()?;
        let [w_opt, a_opt]: [AdamState; 2] = ckpt
            .optimizers
            .try_into()
            .map_err(|_| Error::Checkpoint("a search checkpoint holds two optimizers".into()))?;
        Ok(SearchRun {
            config,
            model,
            store,
            w_opt,
            a_opt,
            rng: ckpt.rng.restore(),
            split,
            next_epoch: ckpt.next_epoch,
            history: ckpt.history,
            snapshots,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            architecture: Architecture::Search {
                k_c: self.config.k_c,
            },
            store: self.store.clone(),
            optimizers: vec![self.w_opt.clone(), self.a_opt.clone()],
            rng: RngState::capture(&self.rng),
            next_epoch: self.next_epoch,
            history: self.history.clone(),
            stage: Stage::Search {
                config: self.config.clone(),
                split: self.split.clone(),
                snapshots: self.snapshots.clone(),
            },
        }
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn snapshots(&self) -> &[EpochSnapshot] {
        &self.snapshots
    }

    pub fn alpha_snapshot(&self) -> AlphaSnapshot {
        self.model
            .alpha()
            .expect("search model")
            .snapshot(&self.store)
    }

    /// During warm-up, one weight step per batch of the weight split.
    /// Afterwards each weight step is preceded by an architecture step on a
    /// batch of the architecture split (cycled if it has fewer batches).
    pub fn run_epoch(
        &mut self,
        train: &[Utterance],
        dev: &[Utterance],
    ) -> Result<SearchEpochStats> {
        if self.is_done() {
            return Err(Error::invalid("search already finished"));
        }
        let epoch = self.next_epoch;
        let warmup = epoch < self.config.warmup_epochs;
        let pick = |batches: Vec<Vec<usize>>, ids: &[usize]| -> Vec<Vec<usize>> {
            batches
                .into_iter()
                .map(|b| b.into_iter().map(|i| ids[i]).collect())
                .collect()
        };
        let w_batches = pick(
            batches(self.split.w.len(), self.config.batch, &mut self.rng, false)?,
            &self.split.w,
        );
        let alpha_batches = if warmup {
            vec![]
        } else {
            pick(
                batches(
                    self.split.alpha.len(),
                    self.config.batch,
                    &mut self.rng,
                    false,
                )?,
                &self.split.alpha,
            )
        };
        let (mut w_loss, mut a_loss, mut correct, mut seen) = (0.0, 0.0, 0, 0);
        let mut used_alpha = Vec::new();
        for (i, wb) in w_batches.iter().enumerate() {
            if !warmup {
                let ab = &alpha_batches[i % alpha_batches.len()];
                let (l, _) = train_step(
                    &self.model,
                    &mut self.store,
                    &mut self.a_opt,
                    train,
                    ab,
                    &mut self.rng,
                )?;
                a_loss += l;
                used_alpha.push(ab.clone());
            }
            let (l, c) = train_step(
                &self.model,
                &mut self.store,
                &mut self.w_opt,
                train,
                wb,
                &mut self.rng,
            )?;
            w_loss += l;
            correct += c;
            seen += wb.len();
        }
        let ev = evaluate(&self.model, &self.store, dev, self.config.batch)?;
        let record = EpochRecord {
            epoch,
            train_loss: w_loss / w_batches.len() as f64,
            val_loss: ev.loss,
            dev_acc: ev.accuracy,
            lr: self.config.w_lr,
        };
        self.history.push(record);
        self.snapshots.push(EpochSnapshot {
            alpha: self.alpha_snapshot(),
            frontend: FrontendState::capture(&self.model, &self.store),
        });
        self.next_epoch += 1;
        Ok(SearchEpochStats {
            record,
            alpha_loss: (!warmup).then(|| a_loss / w_batches.len() as f64),
            train_acc: correct as f64 / seen as f64,
            w_batches,
            alpha_batches: used_alpha,
        })
    }

    /// The epoch with the best development accuracy (later on ties), its
    /// derived genotype and its frontend kernels.
    pub fn select(&self) -> Result<Selection> {
        select_architecture(&self.history, &self.snapshots, self.config.k_c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub epoch: usize,
    pub genotype: Genotype,
    pub frontend: FrontendState,
}

pub fn select_architecture(
    history: &[EpochRecord],
    snapshots: &[EpochSnapshot],
    k_c: usize,
) -> Result<Selection> {
    if history.len() != snapshots.len() {
        return Err(Error::invalid("one snapshot per epoch is required"));
    }
    let accs: Vec<f64> = history.iter().map(|r| r.dev_acc).collect();
    let i = select_epoch(&accs).ok_or_else(|| Error::invalid("no search epochs to select from"))?;
    Ok(Selection {
        epoch: history[i].epoch,
        genotype: derive_genotype(&snapshots[i].alpha, k_c)?,
        frontend: snapshots[i].frontend.clone(),
    })
}

/// Training of a discrete architecture from freshly initialized weights.
pub struct ScratchRun {
    pub config: ScratchConfig,
    pub model: Model,
    pub store: ParamStore,
    opt: AdamState,
    rng: RunRng,
    next_epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<Box<Checkpoint>>,
}

impl ScratchRun {
    /// With `frontend`, the kernels are copied from it before (optionally)
    /// being frozen.
    pub fn new(
        config: &ScratchConfig,
        model_config: &ModelConfig,
        genotype: &Genotype,
        frontend: Option<&FrontendState>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut store = ParamStore::new();
        let model = Model::build(
            &mut store,
            &mut rng,
            model_config,
            &Architecture::Discrete(genotype.clone()),
        )?;
        if let Some(state) = frontend {
            state.apply(&model, &mut store)?;
        }
        if config.freeze_frontend {
            for id in model.frontend.kernel_params() {
                store.get_mut(id).set_requires_grad(false);
            }
        }
        let mut params = store.trainable_in(ParamGroup::Frontend);
        params.extend(store.trainable_in(ParamGroup::Network));
        let opt = AdamState::new(AdamConfig::new(config.lr(0), 0.0), &store, params);
        Ok(ScratchRun {
            config: config.clone(),
            model,
            store,
            opt,
            rng,
            next_epoch: 0,
            history: vec![],
            best: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let Stage::Scratch { config, best } = ckpt.stage.clone() else {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        };
        let (model, store) = ckpt.restore_model()?;
        let [opt]: [AdamState; 1] = ckpt
            .optimizers
            .try_into()
            .map_err(|_| Error::Checkpoint("a training checkpoint holds one optimizer".into()))?;
        Ok(ScratchRun {
            config,
            model,
            store,
            opt,
            rng: ckpt.rng.restore(),
            next_epoch: ckpt.next_epoch,
            history: ckpt.history,
            best,
        })
    }

    fn state(&self, best: Option<Box<Checkpoint>>) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            architecture: Architecture::Discrete(
                self.model.genotype().expect("discrete model").clone(),
            ),
            store: self.store.clone(),
            optimizers: vec![self.opt.clone()],
            rng: RngState::capture(&self.rng),
            next_epoch: self.next_epoch,
            history: self.history.clone(),
            stage: Stage::Scratch {
                config: self.config.clone(),
                best,
            },
        }
    }

    /// Resumable state including the best-epoch checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        self.state(self.best.clone())
    }

    /// State as of the epoch with the best development accuracy so far.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_deref()
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn run_epoch(&mut self, train: &[Utterance], dev: &[Utterance]) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let epoch = self.next_epoch;
        let lr = self.config.lr(epoch);
        self.opt.set_lr(lr);
        let mut loss = 0.0;
        let order = batches(train.len(), self.config.batch, &mut self.rng, false)?;
        for b in &order {
            loss += train_step(
                &self.model,
                &mut self.store,
                &mut self.opt,
                train,
                b,
                &mut self.rng,
            )?
            .0;
        }
        let ev = evaluate(&self.model, &self.store, dev, self.config.batch)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss / order.len() as f64,
            val_loss: ev.loss,
            dev_acc: ev.accuracy,
            lr,
        };
        self.history.push(record);
        self.next_epoch += 1;
        if self
            .best
            .as_ref()
            .is_none_or(|b| record.dev_acc >= b.history.last().expect("non-empty").dev_acc)
        {
            self.best = Some(Box::new(self.state(None)));
        }
        Ok(record)
    }
}
