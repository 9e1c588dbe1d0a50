//! One optimisation step over a packed bin.
//!
//! Per dataset class:
//! - silent EMG: CTC on the silent EMG, plus contrastive terms against the
//!   DTW-warped audio latents of its vocalized twin;
//! - vocalized EMG+audio: CTC on both modalities, frame-paired contrastive terms;
//! - audio only: audio CTC and the supervised contrastive term.
//!
//! CTC terms are divided by label length and averaged per modality.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{align_silent, silent_fragment_layout, AlignmentSource};
use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::harness::Utterance;
use crate::losses::{
    crosscon_on_tape, ctc_on_tape, mona_loss_on_tape, suptcon_on_tape, ColumnMeta, LatentLayout, LossConfig,
    LossTerm, LossWeights, Modality,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::sampler::DatasetClass;

use super::{Bound, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Decay of the running mean of squared gradients.
    pub decay: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            decay: 0.99,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.decay) || !(self.eps > 0.0) {
            return Err(Error::config("decay must be in [0, 1) and eps > 0"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Running mean of squared gradients per tensor (momentum-free adaptive step).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub sq: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            sq: params.tensors().iter().map(|t| t.map(|_| 0.0)).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub loss: LossConfig,
    pub alignment: AlignmentSource,
    pub optimizer: OptimizerConfig,
}

/// A bin member together with its vocalized twin when it is a silent utterance.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub utt: &'a Utterance,
    pub parallel: Option<&'a Utterance>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub total: f64,
    pub emg_ctc: Option<f64>,
    pub audio_ctc: Option<f64>,
    pub cross: Option<f64>,
    pub sup: Option<f64>,
    /// Mean per-frame DTW cost over the silent items.
    pub dtw_cost: Option<f64>,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn component(&self, t: LossTerm) -> Option<f64> {
        match t {
            LossTerm::Emg => self.emg_ctc,
            LossTerm::Audio => self.audio_ctc,
            LossTerm::Cross => self.cross,
            LossTerm::Sup => self.sup,
        }
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}

fn labelled_layout(utterance: usize, modality: Modality, labels: &[u32]) -> LatentLayout {
    let mut layout = LatentLayout::new();
    for (t, &l) in labels.iter().enumerate() {
        layout.push(ColumnMeta {
            modality,
            utterance,
            timestep: t,
            class_label: Some(l),
        });
    }
    layout
}

fn signal(u: &Utterance, m: Modality) -> Result<&Tensor> {
    match m {
        Modality::Emg => u.emg.as_ref(),
        Modality::Audio => u.audio.as_ref(),
    }
    .ok_or_else(|| Error::contract(format!("utterance {} has no {m:?} signal", u.id)))
}

fn phonemes(u: &Utterance) -> Result<&[u32]> {
    u.phonemes
        .as_deref()
        .ok_or_else(|| Error::pre(format!("utterance {} has no frame phoneme labels", u.id)))
}

/// Encodes each (utterance, modality) once per tape.
struct EncodeCache<'a> {
    bound: &'a Bound,
    vars: HashMap<(String, Modality), Var>,
}

impl EncodeCache<'_> {
    fn get(&mut self, tape: &mut Tape, u: &Utterance, m: Modality) -> Result<Var> {
        let key = (u.id.clone(), m);
        if let Some(&v) = self.vars.get(&key) {
            return Ok(v);
        }
        let x = tape.constant(signal(u, m)?.clone());
        let z = self.bound.encode(tape, m, x)?;
        self.vars.insert(key, z);
        Ok(z)
    }
}

/// Records the bin's combined loss on `tape`. Terms with zero weight are not built.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &Bound,
    items: &[TrainItem],
    cfg: &TrainConfig,
    alphabet: &Alphabet,
) -> Result<(Var, StepMetrics)> {
    let w = &cfg.weights;
    let want_emg = w.lambda_emg != 0.0;
    let want_audio = w.lambda_audio != 0.0;
    let want_cross = w.lambda_cross != 0.0;
    let want_sup = w.lambda_sup != 0.0;
    let contrastive = want_cross || want_sup;
    let blank = cfg.loss.ctc_blank_index;

    let mut cache = EncodeCache {
        bound,
        vars: HashMap::new(),
    };
    let mut emg_terms = Vec::new();
    let mut audio_terms = Vec::new();
    // paired fragments feed both contrastive terms; unpaired ones only supTcon
    let mut paired: Vec<(Var, LatentLayout)> = Vec::new();
    let mut unpaired: Vec<(Var, LatentLayout)> = Vec::new();
    let mut dtw_costs = Vec::new();

    let ctc = |tape: &mut Tape, z: Var, u: &Utterance| -> Result<Var> {
        let label = alphabet.encode(&u.text)?;
        let logits = bound.decode(tape, z)?;
        let nll = ctc_on_tape(tape, logits, &label, blank)?;
        Ok(tape.scale(nll, 1.0 / label.len().max(1) as f64))
    };

    for (k, item) in items.iter().enumerate() {
        let u = item.utt;
        match u.class {
            DatasetClass::GaddySilent => {
                let needs_emg = want_emg || contrastive;
                if !needs_emg {
                    continue;
                }
                let z = cache.get(tape, u, Modality::Emg)?;
                if want_emg {
                    emg_terms.push(ctc(tape, z, u)?);
                }
                if contrastive {
                    let v = item.parallel.ok_or_else(|| {
                        Error::pre(format!("silent utterance {} has no vocalized twin in the batch", u.id))
                    })?;
                    let za = cache.get(tape, v, Modality::Audio)?;
                    let align_on = match cfg.alignment {
                        AlignmentSource::VocalAudio => za,
                        AlignmentSource::VocalEmg => cache.get(tape, v, Modality::Emg)?,
                    };
                    let al = align_silent(tape.value(z), tape.value(align_on), phonemes(v)?)?;
                    dtw_costs.push(al.cost / al.path.pairs().len() as f64);
                    let warped = tape.select_cols(za, al.source.clone())?;
                    let frag = tape.concat_cols(&[z, warped])?;
                    paired.push((frag, silent_fragment_layout(k, &al.labels)?));
                }
            }
            DatasetClass::GaddyVocal => {
                if want_emg || contrastive {
                    let ze = cache.get(tape, u, Modality::Emg)?;
                    if want_emg {
                        emg_terms.push(ctc(tape, ze, u)?);
                    }
                    if contrastive {
                        let za = cache.get(tape, u, Modality::Audio)?;
                        let frag = tape.concat_cols(&[ze, za])?;
                        paired.push((frag, silent_fragment_layout(k, phonemes(u)?)?));
                    }
                }
                if want_audio {
                    let za = cache.get(tape, u, Modality::Audio)?;
                    audio_terms.push(ctc(tape, za, u)?);
                }
            }
            DatasetClass::LibriSpeech => {
                if want_audio || want_sup {
                    let za = cache.get(tape, u, Modality::Audio)?;
                    if want_audio {
                        audio_terms.push(ctc(tape, za, u)?);
                    }
                    if want_sup {
                        unpaired.push((za, labelled_layout(k, Modality::Audio, phonemes(u)?)));
                    }
                }
            }
        }
    }

    let emg = mean_of(tape, &emg_terms)?;
    let audio = mean_of(tape, &audio_terms)?;
    let join = |tape: &mut Tape, parts: &[(Var, LatentLayout)]| -> Result<Option<(Var, LatentLayout)>> {
        if parts.is_empty() {
            return Ok(None);
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let z = tape.concat_cols(&vars)?;
        let mut layout = LatentLayout::new();
        for (_, l) in parts {
            layout.extend(l);
        }
        Ok(Some((z, layout)))
    };
    let cross = if want_cross {
        match join(tape, &paired)? {
            Some((z, layout)) => Some(crosscon_on_tape(tape, z, &layout, cfg.loss.tau)?),
            None => None,
        }
    } else {
        None
    };
    let sup = if want_sup {
        let all: Vec<(Var, LatentLayout)> = paired.iter().chain(&unpaired).cloned().collect();
        match join(tape, &all)? {
            Some((z, layout)) => Some(suptcon_on_tape(tape, z, &layout, cfg.loss.sup_tau)?),
            None => None,
        }
    } else {
        None
    };

    let terms = [emg, audio, cross, sup];
    let value = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
    let metrics = StepMetrics {
        total: f64::NAN,
        emg_ctc: value(emg),
        audio_ctc: value(audio),
        cross: value(cross),
        sup: value(sup),
        dtw_cost: if dtw_costs.is_empty() {
            None
        } else {
            Some(dtw_costs.iter().sum::<f64>() / dtw_costs.len() as f64)
        },
        grad_norm: 0.0,
    };
    for t in LossTerm::ALL {
        if let Some(v) = metrics.component(t) {
            if !v.is_finite() {
                let ids: Vec<&str> = items.iter().map(|i| i.utt.id.as_str()).collect();
                return Err(Error::Numeric(format!("{} loss on batch [{}]", t.name(), ids.join(", "))));
            }
        }
    }
    let total = mona_loss_on_tape(tape, w, terms)?
        .ok_or_else(|| Error::pre("batch yields no loss term with nonzero weight"))?;
    let mut metrics = metrics;
    metrics.total = tape.value(total).data()[0];
    Ok((total, metrics))
}

/// Computes the bin loss, backpropagates and applies one adaptive update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    items: &[TrainItem],
    cfg: &TrainConfig,
    alphabet: &Alphabet,
) -> Result<StepMetrics> {
    cfg.optimizer.validate()?;
    cfg.weights.validate()?;
    if params.config.num_classes != alphabet.num_classes() {
        return Err(Error::config(format!(
            "model has {} classes, alphabet needs {}",
            params.config.num_classes,
            alphabet.num_classes()
        )));
    }
    if state.sq.len() != params.tensors().len() {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (loss, mut metrics) = batch_loss(&mut tape, &bound, items, cfg, alphabet)?;
    let mut grads = tape.backward(loss)?;
    let mut g: Vec<Tensor> = bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| tape.value(v).map(|_| 0.0)))
        .collect();
    let norm = g
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient".into()));
    }
    metrics.grad_norm = norm;
    if let Some(c) = cfg.optimizer.clip_norm {
        if norm > c {
            let s = c / norm;
            for t in &mut g {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    let o = &cfg.optimizer;
    for ((p, sq), gt) in params.tensors_mut().iter_mut().zip(&mut state.sq).zip(&g) {
        for ((pv, sv), &gv) in p.data_mut().iter_mut().zip(sq.data_mut()).zip(gt.data()) {
            *sv = o.decay * *sv + (1.0 - o.decay) * gv * gv;
            *pv -= o.learning_rate * gv / (sv.sqrt() + o.eps);
        }
    }
    state.step += 1;
    if !params.is_finite() {
        return Err(Error::Numeric("parameters after update".into()));
    }
    Ok(metrics)
}
