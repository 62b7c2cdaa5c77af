//! Synthetic audio+text multiple-choice task with known per-modality ceilings.
//!
//! Two kinds of item:
//!
//! * `TEXT`: the passage holds one key token `K_i`; the label is `i`. The
//!   audio carries a random tone that means nothing.
//! * `TONE`: the passage holds a pair token `P_p`, the audio carries tone bit
//!   `t`, and the label is `2p + t`. Neither modality alone suffices.
//!
//! The tone is a fixed ±magnitude pattern added to every frame on top of
//! Gaussian noise, so it survives mean pooling and needs no positions.

mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AUDIO_FEATURE_DIM;
use crate::tensor::Tensor;

pub use io::{read_dataset, read_manifest, read_split, split_path, write_dataset, write_split, BayesCeilings, Manifest};

pub const KEY_TOKENS: [usize; 4] = [0, 1, 2, 3];
pub const PAIR_TOKENS: [usize; 2] = [4, 5];
pub const QUESTION_TEMPLATE: [usize; 2] = [6, 7];
pub const CHOICE_TOKENS: [usize; 4] = [8, 9, 10, 11];
pub const FIRST_FILLER: usize = 12;
pub const MIN_FILLERS: usize = 4;
pub const MAX_SEQ_LEN: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Kind {
    Text,
    Tone,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Text => "TEXT",
            Kind::Tone => "TONE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: u64,
    pub kind: Kind,
    pub passage: Vec<usize>,
    /// `M` frames of width 128.
    pub audio: Vec<Vec<f64>>,
    pub question: Vec<usize>,
    pub choices: [Vec<usize>; 4],
    pub label: usize,
}

impl Instance {
    pub fn audio_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.audio)
    }

    /// Checks structural invariants; returns the offending field name on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.label >= 4 {
            return Err(("label", format!("{} not in 0..4", self.label)));
        }
        if self.passage.is_empty() || self.passage.len() > MAX_SEQ_LEN {
            return Err(("passage", format!("length {} outside 1..={MAX_SEQ_LEN}", self.passage.len())));
        }
        if self.audio.is_empty() || self.audio.len() > MAX_SEQ_LEN {
            return Err(("audio", format!("{} frames outside 1..={MAX_SEQ_LEN}", self.audio.len())));
        }
        if let Some(f) = self.audio.iter().find(|f| f.len() != AUDIO_FEATURE_DIM) {
            return Err(("audio", format!("frame width {} != {AUDIO_FEATURE_DIM}", f.len())));
        }
        if self.question.is_empty() {
            return Err(("question", "empty".into()));
        }
        if self.choices.iter().any(Vec::is_empty) {
            return Err(("choices", "empty choice".into()));
        }
        let keys: Vec<usize> = self
            .passage
            .iter()
            .copied()
            .filter(|t| KEY_TOKENS.contains(t) || PAIR_TOKENS.contains(t))
            .collect();
        let [key] = keys.as_slice() else {
            return Err(("passage", format!("expected exactly one key token, found {}", keys.len())));
        };
        let consistent = match self.kind {
            Kind::Text => KEY_TOKENS.contains(key) && KEY_TOKENS[self.label] == *key,
            Kind::Tone => PAIR_TOKENS.contains(key) && PAIR_TOKENS[self.label / 2] == *key,
        };
        if !consistent {
            return Err(("label", format!("label {} inconsistent with {} key token {key}", self.label, self.kind.name())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Fraction of `TONE` items.
    pub rho: f64,
    pub vocab: usize,
    pub passage_len_min: usize,
    pub passage_len_max: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise_std: f64,
    pub tone_magnitude: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 2000,
            dev: 400,
            test: 400,
            rho: 0.5,
            vocab: 64,
            passage_len_min: 8,
            passage_len_max: 16,
            frames_min: 6,
            frames_max: 12,
            noise_std: 0.5,
            tone_magnitude: 2.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0,1]", self.rho));
        }
        if self.vocab < FIRST_FILLER + MIN_FILLERS {
            return bad(format!("vocab {} below minimum {}", self.vocab, FIRST_FILLER + MIN_FILLERS));
        }
        if self.passage_len_min == 0 || self.passage_len_min > self.passage_len_max || self.passage_len_max > MAX_SEQ_LEN {
            return bad(format!(
                "passage length range {}..={} must lie in 1..={MAX_SEQ_LEN}",
                self.passage_len_min, self.passage_len_max
            ));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max || self.frames_max > MAX_SEQ_LEN {
            return bad(format!(
                "frame count range {}..={} must lie in 1..={MAX_SEQ_LEN}",
                self.frames_min, self.frames_max
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if !(self.tone_magnitude > 0.0 && self.tone_magnitude.is_finite()) {
            return bad(format!("tone_magnitude {} must be finite and positive", self.tone_magnitude));
        }
        Ok(())
    }
}

/// The two orthogonal ±1 patterns; tone `t` adds `magnitude * tone_pattern(t)`.
pub fn tone_pattern(tone: usize) -> [f64; AUDIO_FEATURE_DIM] {
    let mut u = [0.0; AUDIO_FEATURE_DIM];
    for (j, v) in u.iter_mut().enumerate() {
        *v = match tone {
            0 => {
                if j < AUDIO_FEATURE_DIM / 2 {
                    1.0
                } else {
                    -1.0
                }
            }
            _ => {
                if j % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
    }
    u
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Instance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Input(format!("unknown split `{other}` (train|dev|test)"))),
        }
    }
}

fn generate_instance(rng: &mut ChaCha8Rng, cfg: &GenConfig, noise: &Normal<f64>, id: u64) -> Instance {
    let kind = if rng.random::<f64>() < cfg.rho { Kind::Tone } else { Kind::Text };
    let tone = rng.random_range(0..2usize);
    let (key, label) = match kind {
        Kind::Text => {
            let k = rng.random_range(0..KEY_TOKENS.len());
            (KEY_TOKENS[k], k)
        }
        Kind::Tone => {
            let p = rng.random_range(0..PAIR_TOKENS.len());
            (PAIR_TOKENS[p], 2 * p + tone)
        }
    };

    let len = rng.random_range(cfg.passage_len_min..=cfg.passage_len_max);
    let mut passage: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_FILLER..cfg.vocab)).collect();
    let pos = rng.random_range(0..len);
    passage[pos] = key;

    let frames = rng.random_range(cfg.frames_min..=cfg.frames_max);
    let pattern = tone_pattern(tone);
    let audio = (0..frames)
        .map(|_| {
            pattern
                .iter()
                .map(|u| noise.sample(rng) + cfg.tone_magnitude * u)
                .collect()
        })
        .collect();

    Instance {
        id,
        kind,
        passage,
        audio,
        question: QUESTION_TEMPLATE.to_vec(),
        choices: CHOICE_TOKENS.map(|c| vec![c]),
        label,
    }
}

/// Draws train, dev and test from one seeded stream; ids are consecutive
/// across splits so no instance appears twice.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut next_id = 0u64;
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Instance> {
        (0..n)
            .map(|_| {
                let inst = generate_instance(rng, cfg, &noise, next_id);
                next_id += 1;
                inst
            })
            .collect()
    };
    let train = draw(cfg.train, &mut rng);
    let dev = draw(cfg.dev, &mut rng);
    let test = draw(cfg.test, &mut rng);
    Ok(Dataset { train, dev, test })
}

/// Which inputs a predictor may look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observed {
    Text,
    Audio,
    Both,
}

/// Best achievable accuracy under the generative rule given only `observed`.
pub fn bayes_accuracy(cfg: &GenConfig, observed: Observed) -> f64 {
    let rho = cfg.rho;
    match observed {
        Observed::Text => (1.0 - rho) + rho * 0.5,
        Observed::Audio => (1.0 - rho) * 0.25 + rho * 0.5,
        Observed::Both => 1.0,
    }
}

/// Reads the label straight off the generative rule: the key token from the
/// passage and the tone by correlating the mean frame with both patterns.
pub fn rule_decode(inst: &Instance) -> Option<usize> {
    let key = inst
        .passage
        .iter()
        .find(|t| KEY_TOKENS.contains(t) || PAIR_TOKENS.contains(t))?;
    if let Some(k) = KEY_TOKENS.iter().position(|t| t == key) {
        return Some(k);
    }
    let p = PAIR_TOKENS.iter().position(|t| t == key)?;
    Some(2 * p + decode_tone(&inst.audio))
}

pub fn decode_tone(frames: &[Vec<f64>]) -> usize {
    let mut mean = [0.0; AUDIO_FEATURE_DIM];
    for f in frames {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    let corr = |t: usize| -> f64 { tone_pattern(t).iter().zip(&mean).map(|(u, m)| u * m).sum() };
    usize::from(corr(1) > corr(0))
}

/// Shuffles `indices` with a generator derived from `seed` and `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
