//! Inputs shared by the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ffsv_core::audio_io::Waveform;
use ffsv_core::embed_net::{Model, NetworkConfig};
use ffsv_core::synth::{self, CorpusConfig};

/// One synthetic utterance at 16 kHz.
pub fn utterance(seed: u64) -> Waveform {
    let corpus = synth::generate_corpus(&CorpusConfig {
        seed,
        n_speakers: 1,
        utts_per_speaker: 1,
        ..CorpusConfig::default()
    })
    .expect("synthetic corpus");
    corpus.into_iter().next().expect("one utterance").waveform
}

/// `n` scored trials, targets shifted up by one.
pub fn scores(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let target = i % 10 == 0;
            let s: f64 = rng.random_range(-1.0..1.0);
            (if target { s + 1.0 } else { s }, target)
        })
        .collect()
}

/// Small ResNet-34-shaped model for forward-pass timing.
pub fn small_model(width: f64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = NetworkConfig::resnet34(20)
        .with_width(width)
        .with_blocks([1, 1, 1, 1])
        .with_embedding_dim(32);
    Model::new(cfg, &mut rng).expect("valid config")
}
