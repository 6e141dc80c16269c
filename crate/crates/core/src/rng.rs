//! Named, independently seeded random streams.
//!
//! Every source of randomness in training draws from its own ChaCha stream
//! derived from the experiment seed, so the order in which subsystems consume
//! randomness cannot perturb each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Weight initialization.
    Init,
    /// Window shuffling.
    Data,
    /// Timestamp masking and dropout inside the encoder.
    Eta,
    /// Hard-concrete noise for the factorization mask.
    Concrete,
    /// Anchor/positive/negative draws for the temporal regularizer.
    Triplet,
    /// Static baseline augmentations.
    Static,
}

impl Stream {
    pub const ALL: [Stream; 6] = [
        Stream::Init,
        Stream::Data,
        Stream::Eta,
        Stream::Concrete,
        Stream::Triplet,
        Stream::Static,
    ];

    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Eta => 3,
            Stream::Concrete => 4,
            Stream::Triplet => 5,
            Stream::Static => 6,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Serializable position of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub stream: Stream,
    /// Word position, stored as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    pub init: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub eta: ChaCha8Rng,
    pub concrete: ChaCha8Rng,
    pub triplet: ChaCha8Rng,
    pub statics: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            init: stream_rng(seed, Stream::Init),
            data: stream_rng(seed, Stream::Data),
            eta: stream_rng(seed, Stream::Eta),
            concrete: stream_rng(seed, Stream::Concrete),
            triplet: stream_rng(seed, Stream::Triplet),
            statics: stream_rng(seed, Stream::Static),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn get(&self, s: Stream) -> &ChaCha8Rng {
        match s {
            Stream::Init => &self.init,
            Stream::Data => &self.data,
            Stream::Eta => &self.eta,
            Stream::Concrete => &self.concrete,
            Stream::Triplet => &self.triplet,
            Stream::Static => &self.statics,
        }
    }

    fn get_mut(&mut self, s: Stream) -> &mut ChaCha8Rng {
        match s {
            Stream::Init => &mut self.init,
            Stream::Data => &mut self.data,
            Stream::Eta => &mut self.eta,
            Stream::Concrete => &mut self.concrete,
            Stream::Triplet => &mut self.triplet,
            Stream::Static => &mut self.statics,
        }
    }

    pub fn snapshot(&self) -> Vec<StreamState> {
        Stream::ALL
            .iter()
            .map(|&s| StreamState {
                stream: s,
                word_pos: self.get(s).get_word_pos().to_string(),
            })
            .collect()
    }

    pub fn restore(seed: u64, states: &[StreamState]) -> Result<Self, String> {
        let mut out = Self::new(seed);
        for st in states {
            let pos: u128 = st
                .word_pos
                .parse()
                .map_err(|e| format!("bad word position for {:?}: {e}", st.stream))?;
            out.get_mut(st.stream).set_word_pos(pos);
        }
        Ok(out)
    }
}
