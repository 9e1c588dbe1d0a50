//! Synthetic paired-modality corpus.
//!
//! Each utterance draws a latent "source" sequence: one prototype vector per
//! phoneme segment plus per-frame jitter. The EMG and audio channels are
//! distinct noisy linear mixings of that source. A silent reading reuses the
//! source of its vocalized twin under a random monotone time warp, keeps only
//! the EMG channel and sees a perturbed EMG mixing with extra noise.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alphabet::{Alphabet, SILENCE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sampler::{DatasetClass, PackingItem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One example. EMG and audio are `features×T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub class: DatasetClass,
    pub split: Split,
    pub emg: Option<Tensor>,
    pub audio: Option<Tensor>,
    /// Frame-level phoneme ids (silence is 0).
    pub phonemes: Option<Vec<u32>>,
    /// Id of the vocalized reading of the same sentence (silent utterances only).
    pub parallel: Option<String>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.emg
            .as_ref()
            .or(self.audio.as_ref())
            .map_or(0, Tensor::cols)
    }

    /// Checks the per-class shape rules.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("utterance {}: {m}", self.id)));
        match self.class {
            DatasetClass::GaddyVocal => match (&self.emg, &self.audio) {
                (Some(e), Some(a)) if e.cols() == a.cols() => {}
                _ => return bad("vocal needs EMG and audio of equal length"),
            },
            DatasetClass::GaddySilent => {
                if self.emg.is_none() || self.audio.is_some() || self.parallel.is_none() {
                    return bad("silent needs EMG only and a parallel link");
                }
            }
            DatasetClass::LibriSpeech => {
                if self.audio.is_none() || self.emg.is_some() {
                    return bad("audio-only class needs audio only");
                }
            }
        }
        if let Some(p) = &self.phonemes {
            if p.len() != self.frames() {
                return bad("phoneme labels must cover every frame");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub alphabet_size: usize,
    /// Training utterances per class; each silent utterance gets its own vocal twin
    /// on top of `vocal`.
    pub silent: usize,
    pub vocal: usize,
    pub librispeech: usize,
    /// Held-out silent/vocal pairs per evaluation split.
    pub validation: usize,
    pub test: usize,
    pub source_dim: usize,
    pub emg_features: usize,
    pub audio_features: usize,
    /// Frames per phoneme segment (inclusive range).
    pub min_segment: usize,
    pub max_segment: usize,
    pub vocabulary: usize,
    pub words_per_sentence: (usize, usize),
    pub letters_per_word: (usize, usize),
    pub jitter: f64,
    pub emg_noise: f64,
    pub audio_noise: f64,
    pub silent_noise: f64,
    /// Relative size of the perturbation applied to the EMG mixing for silent speech.
    pub silent_mixing_shift: f64,
    /// Per-segment stretch factor range of the silent time warp.
    pub warp: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            alphabet_size: 8,
            silent: 24,
            vocal: 24,
            librispeech: 96,
            validation: 24,
            test: 24,
            source_dim: 8,
            emg_features: 8,
            audio_features: 8,
            min_segment: 2,
            max_segment: 3,
            vocabulary: 24,
            words_per_sentence: (2, 3),
            letters_per_word: (2, 4),
            jitter: 0.3,
            emg_noise: 0.6,
            audio_noise: 0.2,
            silent_noise: 0.8,
            silent_mixing_shift: 0.3,
            warp: (0.7, 1.5),
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (usize, usize)| a >= 1 && a <= b;
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return Err(Error::config("alphabet_size must be in 1..=26"));
        }
        if self.source_dim == 0 || self.emg_features == 0 || self.audio_features == 0 {
            return Err(Error::config("feature dimensions must be positive"));
        }
        if self.min_segment < 2 || self.min_segment > self.max_segment {
            return Err(Error::config("segments need 2 <= min_segment <= max_segment"));
        }
        if !range_ok(self.words_per_sentence) || !range_ok(self.letters_per_word) || self.vocabulary == 0 {
            return Err(Error::config("sentence shape ranges must be nonempty"));
        }
        if !(self.warp.0 > 0.0 && self.warp.0 <= self.warp.1) {
            return Err(Error::config("warp range must satisfy 0 < lo <= hi"));
        }
        let noise = [self.jitter, self.emg_noise, self.audio_noise, self.silent_noise, self.silent_mixing_shift];
        if noise.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("noise levels must be finite and >= 0"));
        }
        if self.silent == 0 {
            return Err(Error::config("at least one silent training utterance is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: SyntheticCorpusConfig,
    pub alphabet: Alphabet,
    pub vocabulary: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.utterances.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Training utterances as sampler items; `index` is the position in `utterances`.
    pub fn packing_items(&self) -> Vec<PackingItem> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == Split::Train)
            .map(|(index, u)| PackingItem {
                index,
                length: u.frames(),
                class: u.class,
            })
            .collect()
    }

    /// Training sentences, one per line (used to estimate a language model).
    pub fn training_text(&self) -> Vec<String> {
        self.split(Split::Train).map(|u| u.text.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Corpus = serde_json::from_str(s)?;
        for u in &c.utterances {
            u.validate()?;
        }
        Ok(c)
    }
}

struct Mixings {
    emg: Tensor,
    audio: Tensor,
    silent_emg: Tensor,
    prototypes: Vec<Vec<f64>>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let scale = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale * 3f64.sqrt()).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("sd >= 0").sample(rng)
}

/// `mix · source + noise`, with `source` given as per-frame vectors.
fn observe(rng: &mut ChaCha8Rng, mix: &Tensor, source: &[Vec<f64>], noise: f64) -> Tensor {
    let (rows, dim) = (mix.rows(), mix.cols());
    let mut out = Tensor::zeros(rows, source.len());
    for (t, s) in source.iter().enumerate() {
        for r in 0..rows {
            let v: f64 = (0..dim).map(|k| mix.get(r, k) * s[k]).sum();
            out.set(r, t, v + gaussian(rng, noise));
        }
    }
    out
}

struct Reading {
    source: Vec<Vec<f64>>,
    phonemes: Vec<u32>,
    /// `(phoneme, length)` per segment.
    segments: Vec<(u32, usize)>,
}

fn read_sentence(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, m: &Mixings, spelling: &[u32]) -> Reading {
    let mut source = Vec::new();
    let mut phonemes = Vec::new();
    let mut segments = Vec::new();
    for &p in spelling {
        let len = rng.gen_range(cfg.min_segment..=cfg.max_segment);
        for _ in 0..len {
            let proto = &m.prototypes[p as usize];
            source.push(proto.iter().map(|&v| v + gaussian(rng, cfg.jitter)).collect());
            phonemes.push(p);
        }
        segments.push((p, len));
    }
    Reading {
        source,
        phonemes,
        segments,
    }
}

/// Stretches each segment by a random factor, resampling frames by nearest index.
fn time_warp(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, r: &Reading) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut source = Vec::new();
    let mut phonemes = Vec::new();
    let mut start = 0;
    for &(p, len) in &r.segments {
        let f = if cfg.warp.0 == cfg.warp.1 {
            cfg.warp.0
        } else {
            rng.gen_range(cfg.warp.0..=cfg.warp.1)
        };
        let new_len = ((len as f64 * f).round() as usize).max(cfg.min_segment);
        for k in 0..new_len {
            let src = if new_len == len {
                k
            } else {
                ((k as f64 + 0.5) * len as f64 / new_len as f64).floor() as usize
            };
            source.push(r.source[start + src.min(len - 1)].clone());
            phonemes.push(p);
        }
        start += len;
    }
    (source, phonemes)
}

fn make_vocabulary(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, alphabet: &Alphabet) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut guard = 0;
    while words.len() < cfg.vocabulary && guard < 100_000 {
        guard += 1;
        let n = rng.gen_range(cfg.letters_per_word.0..=cfg.letters_per_word.1);
        let w: String = (0..n).map(|_| *alphabet.letters().choose(rng).expect("nonempty")).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Sentences follow a random first-order word chain so that a word n-gram
/// model has structure to exploit.
fn make_sentence(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, vocab: &[String], successors: &[Vec<usize>]) -> String {
    let n = rng.gen_range(cfg.words_per_sentence.0..=cfg.words_per_sentence.1);
    let mut w = rng.gen_range(0..vocab.len());
    let mut out = vec![vocab[w].clone()];
    for _ in 1..n {
        w = if rng.gen_bool(0.8) {
            *successors[w].choose(rng).expect("nonempty")
        } else {
            rng.gen_range(0..vocab.len())
        };
        out.push(vocab[w].clone());
    }
    out.join(" ")
}

pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alphabet = Alphabet::first(cfg.alphabet_size)?;
    let vocab = make_vocabulary(&mut rng, cfg, &alphabet);
    let successors: Vec<Vec<usize>> = (0..vocab.len())
        .map(|_| (0..2).map(|_| rng.gen_range(0..vocab.len())).collect())
        .collect();

    let emg = random_matrix(&mut rng, cfg.emg_features, cfg.source_dim);
    let audio = random_matrix(&mut rng, cfg.audio_features, cfg.source_dim);
    let shift = random_matrix(&mut rng, cfg.emg_features, cfg.source_dim);
    let silent_emg = Tensor::matrix(
        emg.rows(),
        emg.cols(),
        emg.data()
            .iter()
            .zip(shift.data())
            .map(|(a, b)| a + cfg.silent_mixing_shift * b)
            .collect(),
    )?;
    let prototypes = (0..alphabet.num_phonemes())
        .map(|_| (0..cfg.source_dim).map(|_| gaussian(&mut rng, 1.0)).collect())
        .collect();
    let m = Mixings {
        emg,
        audio,
        silent_emg,
        prototypes,
    };

    let mut utterances = Vec::new();
    let push_pair = |rng: &mut ChaCha8Rng, split: Split, n: usize, tag: &str, utterances: &mut Vec<Utterance>| -> Result<()> {
        for i in 0..n {
            let text = make_sentence(rng, cfg, &vocab, &successors);
            let reading = read_sentence(rng, cfg, &m, &alphabet.phoneme_spelling(&text)?);
            let vocal_id = format!("{tag}-vocal-{i:04}");
            let (warped, warped_ph) = time_warp(rng, cfg, &reading);
            let silent = Utterance {
                id: format!("{tag}-silent-{i:04}"),
                text: text.clone(),
                class: DatasetClass::GaddySilent,
                split,
                emg: Some(observe(rng, &m.silent_emg, &warped, cfg.silent_noise)),
                audio: None,
                phonemes: Some(warped_ph),
                parallel: Some(vocal_id.clone()),
            };
            let vocal = Utterance {
                id: vocal_id,
                text,
                class: DatasetClass::GaddyVocal,
                split,
                emg: Some(observe(rng, &m.emg, &reading.source, cfg.emg_noise)),
                audio: Some(observe(rng, &m.audio, &reading.source, cfg.audio_noise)),
                phonemes: Some(reading.phonemes),
                parallel: None,
            };
            utterances.push(vocal);
            utterances.push(silent);
        }
        Ok(())
    };
    push_pair(&mut rng, Split::Train, cfg.silent, "train", &mut utterances)?;
    push_pair(&mut rng, Split::Validation, cfg.validation, "val", &mut utterances)?;
    push_pair(&mut rng, Split::Test, cfg.test, "test", &mut utterances)?;

    for i in 0..cfg.vocal {
        let text = make_sentence(&mut rng, cfg, &vocab, &successors);
        let reading = read_sentence(&mut rng, cfg, &m, &alphabet.phoneme_spelling(&text)?);
        utterances.push(Utterance {
            id: format!("train-vocalonly-{i:04}"),
            text,
            class: DatasetClass::GaddyVocal,
            split: Split::Train,
            emg: Some(observe(&mut rng, &m.emg, &reading.source, cfg.emg_noise)),
            audio: Some(observe(&mut rng, &m.audio, &reading.source, cfg.audio_noise)),
            phonemes: Some(reading.phonemes),
            parallel: None,
        });
    }
    for i in 0..cfg.librispeech {
        let text = make_sentence(&mut rng, cfg, &vocab, &successors);
        let reading = read_sentence(&mut rng, cfg, &m, &alphabet.phoneme_spelling(&text)?);
        utterances.push(Utterance {
            id: format!("train-libri-{i:04}"),
            text,
            class: DatasetClass::LibriSpeech,
            split: Split::Train,
            emg: None,
            audio: Some(observe(&mut rng, &m.audio, &reading.source, cfg.audio_noise)),
            phonemes: Some(reading.phonemes),
            parallel: None,
        });
    }
    for u in &utterances {
        u.validate()?;
    }
    Ok(Corpus {
        config: cfg.clone(),
        alphabet,
        vocabulary: vocab,
        utterances,
    })
}

/// Collapses runs of equal ids.
pub fn collapse(labels: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

/// True when every frame label is silence or a letter id of the alphabet.
pub fn labels_in_range(alphabet: &Alphabet, labels: &[u32]) -> bool {
    labels.iter().all(|&l| l == SILENCE || (l as usize) < alphabet.num_phonemes())
}
