//! A very small model and dataset for exercising the training loops.

use rawdarts::data::{synth_task, SynthConfig, Utterance};
use rawdarts::frontend::FrontendKind;
use rawdarts::model::ModelConfig;
use rawdarts::rng::seeded;
use rawdarts::trainer::{ScratchConfig, SearchConfig};

pub fn model() -> ModelConfig {
    let mut m = ModelConfig::toy();
    m.samples = 600;
    m.frontend.kind = FrontendKind::SincMel;
    m.frontend.filters = 8;
    m.frontend.kernel_len = 32;
    m.channels = 4;
    m.gru_hidden = 8;
    m.embedding_dim = 8;
    m
}

pub fn data(seed: u64, n_per_class: usize) -> Vec<Utterance> {
    let cfg = SynthConfig {
        sample_rate: 4000,
        samples: 600,
        snr_db: 20.0,
    };
    synth_task(&mut seeded(seed), n_per_class, &cfg).unwrap()
}

pub fn search(epochs: usize, warmup: usize) -> SearchConfig {
    SearchConfig {
        epochs,
        warmup_epochs: warmup,
        batch: 4,
        w_lr: 1e-3,
        seed: 5,
        ..SearchConfig::default()
    }
}

pub fn scratch(epochs: usize) -> ScratchConfig {
    ScratchConfig {
        epochs,
        batch: 4,
        lr_max: 1e-3,
        lr_min: 4e-4,
        seed: 6,
        freeze_frontend: true,
    }
}
