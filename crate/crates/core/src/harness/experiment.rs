//! Training runs over the synthetic corpus: one run per (variant, seed),
//! periodic validation, final test evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::corpus::{generate_corpus, Corpus, Split, SyntheticCorpusConfig, Utterance};
use super::metrics::MetricsRecord;
use crate::alignment::AlignmentSource;
use crate::decoding::{beam_search_batch, corpus_wer, ArpaNGram, DecodeConfig, NBestList};
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, LossConfig, LossWeights, Modality};
use crate::model::{EncoderConfig, ModelConfig, ModelParams, OptimizerConfig, OptimizerState, TrainConfig, TrainItem};
use crate::parallel::{map_slice_with, Strategy};
use crate::sampler::{epoch_stream, ClassProportions, DatasetClass, PackingConfig};

/// Loss configurations compared by the runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Emg,
    AudioEmg,
    Suptcon,
    Crosscon,
    CrossconSuptcon,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Emg,
        Variant::AudioEmg,
        Variant::Suptcon,
        Variant::Crosscon,
        Variant::CrossconSuptcon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Emg => "emg",
            Variant::AudioEmg => "audio_emg",
            Variant::Suptcon => "suptcon",
            Variant::Crosscon => "crosscon",
            Variant::CrossconSuptcon => "crosscon_suptcon",
        }
    }

    pub fn weights(self) -> LossWeights {
        LossWeights::preset(self.name()).expect("every variant has a preset")
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Model sizes; input widths and class count come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub latent_features: usize,
    pub num_blocks: usize,
    pub decoder_hidden: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            latent_features: 16,
            num_blocks: 2,
            decoder_hidden: 32,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub discount: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { order: 3, discount: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub epochs: usize,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Corpus file; generated from `corpus` when absent.
    pub corpus_path: Option<PathBuf>,
    pub corpus: SyntheticCorpusConfig,
    pub model: ModelShape,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub alignment: AlignmentSource,
    /// Timesteps per packed bin.
    pub max_len: usize,
    pub proportions: ClassProportions,
    /// Sampler seed shared by all runs, so every model sees the same batches.
    pub data_seed: u64,
    pub decode: DecodeConfig,
    pub lm: LmConfig,
    /// Write measured wall time to the metrics; off gives byte-identical output
    /// across repeated runs.
    pub record_wall_time: bool,
    /// Run seeds and variants on the thread pool.
    pub parallel_runs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            epochs: 12,
            eval_every: 4,
            seeds: vec![0, 1, 2],
            variants: vec![Variant::Emg, Variant::AudioEmg, Variant::Crosscon],
            corpus_path: None,
            corpus: SyntheticCorpusConfig::default(),
            model: ModelShape::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            alignment: AlignmentSource::default(),
            max_len: 600,
            proportions: ClassProportions::default(),
            data_seed: 0,
            decode: DecodeConfig::default(),
            lm: LmConfig::default(),
            record_wall_time: true,
            parallel_runs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::config("epochs and eval_every must be >= 1"));
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::config("need at least one seed and one variant"));
        }
        self.corpus.validate()?;
        self.optimizer.validate()?;
        self.decode.validate()?;
        self.packing().map(|_| ())
    }

    pub fn packing(&self) -> Result<PackingConfig> {
        PackingConfig::new(
            self.max_len,
            self.proportions,
            vec![DatasetClass::GaddySilent],
            self.data_seed,
        )
    }

    pub fn model_config(&self, corpus: &Corpus, seed: u64) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                emg_features: corpus.config.emg_features,
                audio_features: corpus.config.audio_features,
                latent_features: self.model.latent_features,
                num_blocks: self.model.num_blocks,
            },
            decoder_hidden: self.model.decoder_hidden,
            num_classes: corpus.alphabet.num_classes(),
            layer_norm_eps: self.model.layer_norm_eps,
            seed,
        }
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        TrainConfig {
            weights: variant.weights(),
            loss: self.loss,
            alignment: self.alignment,
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus_path {
            Some(p) => Corpus::from_json(&std::fs::read_to_string(p)?),
            None => generate_corpus(&self.corpus),
        }
    }
}

/// Back-off LM over the training sentences.
pub fn corpus_lm(corpus: &Corpus, cfg: &LmConfig) -> Result<ArpaNGram> {
    ArpaNGram::estimate(&corpus.training_text(), cfg.order, cfg.discount)
}

/// Which held-out signal is decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// EMG of silent utterances.
    Silent,
    /// EMG of vocalized utterances.
    Vocal,
    /// Audio of vocalized utterances.
    Audio,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Silent, Condition::Vocal, Condition::Audio];

    fn class(self) -> DatasetClass {
        match self {
            Condition::Silent => DatasetClass::GaddySilent,
            Condition::Vocal | Condition::Audio => DatasetClass::GaddyVocal,
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Condition::Silent | Condition::Vocal => Modality::Emg,
            Condition::Audio => Modality::Audio,
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silent" => Ok(Condition::Silent),
            "vocal" => Ok(Condition::Vocal),
            "audio" => Ok(Condition::Audio),
            _ => Err(Error::config(format!("unknown condition {s:?}"))),
        }
    }
}

pub fn eval_utterances(corpus: &Corpus, split: Split, condition: Condition) -> Vec<&Utterance> {
    corpus
        .split(split)
        .filter(|u| u.class == condition.class())
        .collect()
}

fn signal(u: &Utterance, m: Modality) -> Result<&crate::numerics::Tensor> {
    match m {
        Modality::Emg => u.emg.as_ref(),
        Modality::Audio => u.audio.as_ref(),
    }
    .ok_or_else(|| Error::contract(format!("utterance {} lacks the {m:?} signal", u.id)))
}

/// Beam-search N-best lists for one split and condition, in corpus order.
pub fn decode_condition(
    params: &ModelParams,
    corpus: &Corpus,
    split: Split,
    condition: Condition,
    lm: Option<&ArpaNGram>,
    decode: &DecodeConfig,
    nbest: usize,
    strategy: Strategy,
) -> Result<Vec<(String, NBestList)>> {
    let utts = eval_utterances(corpus, split, condition);
    let logits = utts
        .iter()
        .map(|u| params.logits(condition.modality(), signal(u, condition.modality())?))
        .collect::<Result<Vec<_>>>()?;
    let lists = beam_search_batch(&logits, lm, decode, nbest, &corpus.alphabet, strategy);
    utts.iter()
        .zip(lists)
        .map(|(u, l)| Ok((u.id.clone(), l?)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub wer: HashMap<Condition, f64>,
    /// Length-normalised CTC loss of the silent condition.
    pub silent_ctc: f64,
}

/// Top-1 WER per condition. Parameters are only read.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    split: Split,
    lm: Option<&ArpaNGram>,
    decode: &DecodeConfig,
    strategy: Strategy,
) -> Result<Evaluation> {
    let mut out = Evaluation::default();
    for c in Condition::ALL {
        let lists = decode_condition(params, corpus, split, c, lm, decode, 1, strategy)?;
        let refs: HashMap<&str, &str> = eval_utterances(corpus, split, c)
            .into_iter()
            .map(|u| (u.id.as_str(), u.text.as_str()))
            .collect();
        let w = corpus_wer(lists.iter().map(|(id, l)| (l.top().text.as_str(), refs[id.as_str()])))?;
        out.wer.insert(c, w);
    }
    let silent = eval_utterances(corpus, split, Condition::Silent);
    let mut total = 0.0;
    for u in &silent {
        let logits = params.logits(Modality::Emg, signal(u, Modality::Emg)?)?;
        let label = corpus.alphabet.encode(&u.text)?;
        total += ctc_loss(&logits, &label, 0)? / label.len().max(1) as f64;
    }
    out.silent_ctc = total / silent.len().max(1) as f64;
    Ok(out)
}

pub fn run_id(variant: Variant, seed: u64) -> String {
    format!("{}-s{seed}", variant.name())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub params: ModelParams,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Trains one (variant, seed) run. Decoding inside the run is sequential so
/// runs can themselves be spread over threads.
pub fn run_variant(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    lm: Option<&ArpaNGram>,
    variant: Variant,
    seed: u64,
) -> Result<RunOutput> {
    let start = Instant::now();
    let id = run_id(variant, seed);
    let ctx = |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (run {id})")),
        other => other,
    };
    let tcfg = cfg.train_config(variant);
    let mut params = ModelParams::init(&cfg.model_config(corpus, seed))?;
    let mut state = OptimizerState::new(&params);
    let items = corpus.packing_items();
    let index = corpus.index();
    let mut records = Vec::new();
    let mut stream = epoch_stream(&items, &cfg.packing()?);
    let mut steps = 0u64;
    for epoch in 1..=cfg.epochs {
        let packed = stream.next().expect("epoch stream is endless")?;
        let mut comps: [Vec<f64>; 6] = Default::default();
        for bin in &packed.bins {
            let batch = bin
                .items
                .iter()
                .map(|&i| {
                    let u = &corpus.utterances[i];
                    let parallel = match &u.parallel {
                        Some(p) => Some(&corpus.utterances[*index.get(p.as_str()).ok_or_else(|| {
                            Error::contract(format!("{} links to missing {p}", u.id))
                        })?]),
                        None => None,
                    };
                    Ok(TrainItem { utt: u, parallel })
                })
                .collect::<Result<Vec<_>>>()?;
            let m = crate::model::train_step(&mut params, &mut state, &batch, &tcfg, &corpus.alphabet).map_err(ctx)?;
            steps += 1;
            let parts = [Some(m.total), m.emg_ctc, m.audio_ctc, m.cross, m.sup, m.dtw_cost];
            for (acc, v) in comps.iter_mut().zip(parts) {
                acc.extend(v);
            }
        }
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let val = evaluate(&params, corpus, Split::Validation, lm, &cfg.decode, Strategy::Sequential)?;
        let test = if epoch == cfg.epochs {
            Some(evaluate(&params, corpus, Split::Test, lm, &cfg.decode, Strategy::Sequential)?)
        } else {
            None
        };
        records.push(MetricsRecord {
            run_id: id.clone(),
            variant: variant.name().to_string(),
            seed,
            epoch: epoch as u64,
            steps,
            loss_total: mean(&comps[0]),
            loss_emg_ctc: mean(&comps[1]),
            loss_audio_ctc: mean(&comps[2]),
            loss_cross: mean(&comps[3]),
            loss_sup: mean(&comps[4]),
            dtw_cost: mean(&comps[5]),
            val_ctc_silent: Some(val.silent_ctc),
            wer_silent: val.wer.get(&Condition::Silent).copied(),
            wer_vocal: val.wer.get(&Condition::Vocal).copied(),
            wer_audio: val.wer.get(&Condition::Audio).copied(),
            test_wer_silent: test.as_ref().and_then(|t| t.wer.get(&Condition::Silent).copied()),
            wall_time_s: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
    }
    Ok(RunOutput {
        run_id: id,
        variant,
        seed,
        records,
        params,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub corpus: Corpus,
    pub lm: ArpaNGram,
    /// Variant-major, seeds in config order.
    pub runs: Vec<RunOutput>,
}

impl ExperimentOutput {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.runs.iter().flat_map(|r| r.records.iter().cloned()).collect()
    }

    /// Run with the lowest final validation WER on silent EMG; ties go to the
    /// earlier run.
    pub fn best_run(&self, variant: Variant) -> Option<&RunOutput> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .min_by(|a, b| final_silent(a).total_cmp(&final_silent(b)))
    }
}

fn final_silent(r: &RunOutput) -> f64 {
    r.records.last().and_then(|m| m.wer_silent).unwrap_or(f64::INFINITY)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let corpus = cfg.load_corpus()?;
    let lm = corpus_lm(&corpus, &cfg.lm)?;
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let strategy = if cfg.parallel_runs { Strategy::Parallel } else { Strategy::Sequential };
    let runs = map_slice_with(strategy, &jobs, |&(v, s)| run_variant(cfg, &corpus, Some(&lm), v, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutput { corpus, lm, runs })
}

/// Writes `metrics.csv` and one checkpoint per run into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::fs::File::create(dir.join("metrics.csv"))?;
    super::metrics::write_csv(&out.records(), f)?;
    for r in &out.runs {
        crate::model::save_checkpoint(&r.params, &dir.join(format!("{}.ckpt", r.run_id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            epochs: 2,
            eval_every: 1,
            seeds: vec![0],
            variants: vec![Variant::Emg, Variant::Crosscon],
            corpus: SyntheticCorpusConfig {
                alphabet_size: 4,
                silent: 4,
                vocal: 2,
                librispeech: 8,
                validation: 3,
                test: 2,
                vocabulary: 6,
                words_per_sentence: (1, 2),
                letters_per_word: (1, 3),
                source_dim: 4,
                emg_features: 4,
                audio_features: 4,
                seed: 5,
                ..Default::default()
            },
            model: ModelShape {
                latent_features: 6,
                num_blocks: 1,
                decoder_hidden: 8,
                ..Default::default()
            },
            max_len: 150,
            decode: DecodeConfig {
                beam_width: 8,
                ..Default::default()
            },
            record_wall_time: false,
            ..Default::default()
        }
    }

    #[test]
    fn variants_follow_presets() {
        assert_eq!(Variant::Emg.weights(), LossWeights::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(Variant::Crosscon.weights(), LossWeights::new(1.0, 1.0, 1.0, 0.0));
        assert_eq!("crosscon_suptcon".parse::<Variant>().unwrap(), Variant::CrossconSuptcon);
        assert!("dtw".parse::<Variant>().is_err());
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = tiny();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("epochs = 3\nvariants = [\"emg\"]\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.seeds, vec![0, 1, 2]);
        assert!(ExperimentConfig::from_toml("epochs = 0").is_err());
        assert!(ExperimentConfig::from_toml("variants = [\"nope\"]").is_err());
    }

    #[test]
    fn tiny_experiment_is_deterministic_and_evaluation_is_read_only() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&ExperimentConfig {
            parallel_runs: false,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a.records(), b.records());
        assert_eq!(a.records().len(), 4);
        let r = &a.records()[1];
        assert_eq!((r.epoch, r.variant.as_str()), (2, "emg"));
        assert!(r.test_wer_silent.is_some() && a.records()[0].test_wer_silent.is_none());
        assert!(r.loss_cross.is_none() && a.records()[3].loss_cross.is_some());

        let p = &a.runs[0].params;
        let before = p.checksum();
        evaluate(p, &a.corpus, Split::Validation, Some(&a.lm), &cfg.decode, Strategy::Parallel).unwrap();
        assert_eq!(p.checksum(), before);
        assert!(a.best_run(Variant::Crosscon).is_some());
    }
}
