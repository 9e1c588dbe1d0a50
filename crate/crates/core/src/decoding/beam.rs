//! CTC decoding: greedy best path and prefix beam search with word-level
//! n-gram fusion.
//!
//! Hypotheses are ranked by `log P_ctc + α·ln P_lm + β·words`. The language
//! model is consulted when a word is closed by a space and, at the end, for
//! the trailing word and the sentence end.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use super::arpa::{ArpaNGram, BOS, EOS};
use super::nbest::{Candidate, NBestList, NBestSource};
use crate::alphabet::{Alphabet, BLANK, SPACE};
use crate::error::{Error, Result};
use crate::losses::ctc::{log_add, log_softmax_rows};
use crate::numerics::Tensor;
use crate::parallel::{map_slice_with, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// α: weight of the natural-log LM score.
    pub lm_weight: f64,
    /// β: bonus per emitted word.
    pub word_bonus: f64,
    pub blank: usize,
    /// Word separator. When set, a space cannot start a transcript or follow
    /// another space. `None` decodes plain symbol strings.
    pub space: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 150,
            lm_weight: 1.0,
            word_bonus: 0.5,
            blank: BLANK,
            space: Some(SPACE),
        }
    }
}

impl DecodeConfig {
    /// Beam width used for validation during training.
    pub const TRAINING_BEAM: usize = 150;
    /// Beam width used for final evaluation.
    pub const INFERENCE_BEAM: usize = 5000;

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam_width must be >= 1"));
        }
        if !self.lm_weight.is_finite() || !self.word_bonus.is_finite() {
            return Err(Error::config("lm_weight and word_bonus must be finite"));
        }
        if self.space == Some(self.blank) {
            return Err(Error::config("space and blank must differ"));
        }
        Ok(())
    }
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_ctc_decode(logits: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.rows() {
        let row = logits.row_slice(t);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != blank && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn greedy_transcript(logits: &Tensor, alphabet: &Alphabet) -> String {
    alphabet.decode(&greedy_ctc_decode(logits, BLANK)).trim().to_string()
}

/// Prefix tree node; the root is the empty prefix.
struct Node {
    parent: usize,
    label: usize,
    len: usize,
    /// Completed words (for LM context).
    words: Vec<String>,
    /// Letters of the word in progress.
    partial: String,
    /// Accumulated natural-log LM score of completed words.
    lm: f64,
}

struct Arena {
    nodes: Vec<Node>,
    children: HashMap<(usize, usize), usize>,
}

impl Arena {
    fn labels(&self, mut id: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes[id].len);
        while id != 0 {
            out.push(self.nodes[id].label);
            id = self.nodes[id].parent;
        }
        out.reverse();
        out
    }

    fn cmp_labels(&self, a: usize, b: usize) -> Ordering {
        self.labels(a).cmp(&self.labels(b))
    }
}

fn lm_ln(lm: Option<&ArpaNGram>, words: &[String], word: &str) -> f64 {
    match lm {
        Some(lm) => {
            let mut ctx: Vec<&str> = vec![BOS];
            ctx.extend(words.iter().map(String::as_str));
            lm.log10_prob(&ctx, word) * LN_10
        }
        None => 0.0,
    }
}

#[derive(Clone, Copy)]
struct Probs {
    blank: f64,
    non_blank: f64,
}

impl Probs {
    const ZERO: Probs = Probs {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search returning at most `k` distinct transcripts.
///
/// `symbol` renders a label as text; it is needed for LM fusion and output.
pub fn beam_search_with<F>(
    logits: &Tensor,
    lm: Option<&ArpaNGram>,
    cfg: &DecodeConfig,
    k: usize,
    symbol: F,
) -> Result<NBestList>
where
    F: Fn(usize) -> String,
{
    cfg.validate()?;
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::pre("empty logits"));
    }
    if k == 0 || k > cfg.beam_width {
        return Err(Error::pre(format!("k = {k} must be in 1..=beam_width ({})", cfg.beam_width)));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("decoder logits".into()));
    }
    if cfg.blank >= logits.cols() {
        return Err(Error::pre("blank index outside the logits"));
    }
    let lp = log_softmax_rows(logits);
    let (t_len, n_sym) = (lp.rows(), lp.cols());
    let alpha = if lm.is_some() { cfg.lm_weight } else { 0.0 };
    let space = cfg.space;

    let mut arena = Arena {
        nodes: vec![Node {
            parent: 0,
            label: usize::MAX,
            len: 0,
            words: Vec::new(),
            partial: String::new(),
            lm: 0.0,
        }],
        children: HashMap::new(),
    };
    let mut beams: Vec<(usize, Probs)> = vec![(
        0,
        Probs {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];

    let prune_score = |arena: &Arena, id: usize, p: Probs| {
        let n = &arena.nodes[id];
        p.total() + alpha * n.lm + cfg.word_bonus * n.words.len() as f64
    };

    for t in 0..t_len {
        let row = lp.row_slice(t);
        let mut next: HashMap<usize, Probs> = HashMap::new();
        let mut order: Vec<usize> = Vec::new();
        let mut bump = |next: &mut HashMap<usize, Probs>, id: usize, blank: f64, non_blank: f64| {
            let e = next.entry(id).or_insert_with(|| {
                order.push(id);
                Probs::ZERO
            });
            e.blank = log_add(e.blank, blank);
            e.non_blank = log_add(e.non_blank, non_blank);
        };
        for &(id, p) in &beams {
            let total = p.total();
            bump(&mut next, id, total + row[cfg.blank], f64::NEG_INFINITY);
            let last = if id == 0 { None } else { Some(arena.nodes[id].label) };
            for (c, &lpc) in row.iter().enumerate().take(n_sym) {
                if c == cfg.blank {
                    continue;
                }
                if Some(c) == last {
                    // repeat without a blank stays on the same prefix
                    bump(&mut next, id, f64::NEG_INFINITY, p.non_blank + lpc);
                }
                if Some(c) == space && (id == 0 || last == space) {
                    continue;
                }
                let from = if Some(c) == last { p.blank } else { total };
                if from == f64::NEG_INFINITY {
                    continue;
                }
                let child = match arena.children.get(&(id, c)) {
                    Some(&ch) => ch,
                    None => {
                        let parent = &arena.nodes[id];
                        let mut words = parent.words.clone();
                        let mut partial = parent.partial.clone();
                        let mut lm_acc = parent.lm;
                        if Some(c) == space {
                            lm_acc += lm_ln(lm, &words, &partial);
                            words.push(std::mem::take(&mut partial));
                        } else {
                            partial.push_str(&symbol(c));
                        }
                        arena.nodes.push(Node {
                            parent: id,
                            label: c,
                            len: parent.len + 1,
                            words,
                            partial,
                            lm: lm_acc,
                        });
                        let ch = arena.nodes.len() - 1;
                        arena.children.insert((id, c), ch);
                        ch
                    }
                };
                bump(&mut next, child, f64::NEG_INFINITY, from + lpc);
            }
        }
        let mut cand: Vec<(usize, Probs, f64)> = order
            .into_iter()
            .map(|id| {
                let p = next[&id];
                (id, p, prune_score(&arena, id, p))
            })
            .collect();
        cand.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| arena.cmp_labels(a.0, b.0)));
        cand.truncate(cfg.beam_width);
        beams = cand.into_iter().map(|(id, p, _)| (id, p)).collect();
    }

    // close the trailing word and the sentence
    let mut finals: Vec<Candidate> = beams
        .iter()
        .map(|&(id, p)| {
            let n = &arena.nodes[id];
            let mut words = n.words.clone();
            let mut lm_score = n.lm;
            if !n.partial.is_empty() {
                lm_score += lm_ln(lm, &words, &n.partial);
                words.push(n.partial.clone());
            }
            if lm.is_some() && space.is_some() {
                lm_score += lm_ln(lm, &words, EOS);
            }
            let acoustic = p.total();
            let labels = arena.labels(id);
            let text = match space {
                Some(_) => words.join(" "),
                None => labels.iter().map(|&l| symbol(l)).collect(),
            };
            let word_count = if space.is_some() { words.len() } else { 0 };
            Candidate {
                text,
                acoustic,
                lm: lm_score,
                combined: acoustic + alpha * lm_score + cfg.word_bonus * word_count as f64,
                labels,
            }
        })
        .collect();
    finals.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| a.labels.cmp(&b.labels))
    });
    // a trailing space gives the same text as the prefix without it
    let mut seen = std::collections::HashSet::new();
    finals.retain(|c| seen.insert(c.text.clone()));
    finals.truncate(k);
    NBestList::new(NBestSource::BeamSearch, finals)
}

/// Beam search over an alphabet's label layout (blank 0, space 1, letters).
pub fn beam_search(
    logits: &Tensor,
    lm: Option<&ArpaNGram>,
    cfg: &DecodeConfig,
    k: usize,
    alphabet: &Alphabet,
) -> Result<NBestList> {
    if logits.cols() != alphabet.num_classes() {
        return Err(Error::dim(format!(
            "logits have {} classes, alphabet has {}",
            logits.cols(),
            alphabet.num_classes()
        )));
    }
    beam_search_with(logits, lm, cfg, k, |l| alphabet.decode(&[l]))
}

/// Decodes many utterances; results keep the input order.
pub fn beam_search_batch(
    logits: &[Tensor],
    lm: Option<&ArpaNGram>,
    cfg: &DecodeConfig,
    k: usize,
    alphabet: &Alphabet,
    strategy: Strategy,
) -> Vec<Result<NBestList>> {
    map_slice_with(strategy, logits, |l| beam_search(l, lm, cfg, k, alphabet))
}
