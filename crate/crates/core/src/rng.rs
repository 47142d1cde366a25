//! Named random streams expanded from one master seed.
//!
//! Each concern draws from its own ChaCha8 stream: the generator is seeded
//! with the master seed and the stream id below selects an independent
//! keystream. Freezing or replaying one concern never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init,
    DropoutEncoder,
    DropoutPass1,
    DropoutPass2,
    Data,
    Sampling,
    MonteCarlo,
}

impl Stream {
    pub const ALL: [Stream; 7] = [
        Stream::Init,
        Stream::DropoutEncoder,
        Stream::DropoutPass1,
        Stream::DropoutPass2,
        Stream::Data,
        Stream::Sampling,
        Stream::MonteCarlo,
    ];

    pub fn id(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::DropoutEncoder => 1,
            Stream::DropoutPass1 => 2,
            Stream::DropoutPass2 => 3,
            Stream::Data => 4,
            Stream::Sampling => 5,
            Stream::MonteCarlo => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::DropoutEncoder => "dropout_encoder",
            Stream::DropoutPass1 => "dropout_pass1",
            Stream::DropoutPass2 => "dropout_pass2",
            Stream::Data => "data",
            Stream::Sampling => "sampling",
            Stream::MonteCarlo => "monte_carlo",
        }
    }
}

/// `ChaCha8Rng::seed_from_u64(seed)` with its stream set to `stream.id()`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Human-readable description of the expansion, echoed into run configs.
pub fn expansion_scheme() -> String {
    let ids: Vec<String> = Stream::ALL
        .iter()
        .map(|s| format!("{}={}", s.name(), s.id()))
        .collect();
    format!(
        "ChaCha8Rng::seed_from_u64(seed) then set_stream(id); ids: {}",
        ids.join(", ")
    )
}

/// All training-time streams.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
}

/// Serializable position of every stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    /// Word positions (128-bit, as decimal strings) in [`Stream::ALL`] order.
    pub word_pos: Vec<String>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            seed,
            rngs: Stream::ALL.iter().map(|&s| stream_rng(seed, s)).collect(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, stream: Stream) -> &mut ChaCha8Rng {
        &mut self.rngs[stream.id() as usize]
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            word_pos: self.rngs.iter().map(|r| r.get_word_pos().to_string()).collect(),
        }
    }

    pub fn restore(snapshot: &RngSnapshot) -> Option<Self> {
        if snapshot.word_pos.len() != Stream::ALL.len() {
            return None;
        }
        let mut streams = RngStreams::new(snapshot.seed);
        for (rng, pos) in streams.rngs.iter_mut().zip(&snapshot.word_pos) {
            rng.set_word_pos(pos.parse().ok()?);
        }
        Some(streams)
    }
}
