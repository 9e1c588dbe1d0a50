use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::client::{ChatClient, RequestConfig};
use super::{build_prompt, parse_response, CandidateSet, ParsedResponse, PromptTemplate};
use crate::decoding::{wer_counts, EditCounts};
use crate::error::{Error, Result};

/// What a noncompliant utterance contributes to the included WER.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    TopCandidate,
    /// Scored as an empty hypothesis.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RescorePolicy {
    pub max_retries: usize,
    pub max_in_flight: usize,
    pub fallback: Fallback,
    pub request: RequestConfig,
}

impl Default for RescorePolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            max_in_flight: 4,
            fallback: Fallback::TopCandidate,
            request: RequestConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "text")]
pub enum Outcome {
    Transcript(String),
    Noncompliant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescoreResult {
    pub id: String,
    pub outcome: Outcome,
    /// Empty when every attempt failed.
    pub raw: String,
    /// Set when the transport failed after all retries; the outcome is then
    /// noncompliant.
    pub error: Option<String>,
    pub attempts: usize,
    pub latency_ms: f64,
    pub model: String,
    pub temperature: f64,
}

impl RescoreResult {
    /// Hypothesis used for the included WER.
    pub fn hypothesis<'a>(&'a self, set: &'a CandidateSet, fallback: Fallback) -> &'a str {
        match (&self.outcome, fallback) {
            (Outcome::Transcript(t), _) => t,
            (Outcome::Noncompliant, Fallback::TopCandidate) => set.top(),
            (Outcome::Noncompliant, Fallback::Empty) => "",
        }
    }
}

fn rescore_one(
    set: &CandidateSet,
    client: &dyn ChatClient,
    template: &PromptTemplate,
    policy: &RescorePolicy,
) -> Result<RescoreResult> {
    let prompt = build_prompt(template, set)?;
    let request = policy.request.request(&prompt);
    let start = Instant::now();
    let mut attempts = 0;
    let mut last_err = None;
    while attempts <= policy.max_retries {
        attempts += 1;
        match client.complete(&set.id, &request) {
            Ok(raw) => {
                let outcome = match parse_response(template, &raw) {
                    ParsedResponse::Transcript(t) => Outcome::Transcript(t),
                    ParsedResponse::Noncompliant => Outcome::Noncompliant,
                };
                return Ok(RescoreResult {
                    id: set.id.clone(),
                    outcome,
                    raw,
                    error: None,
                    attempts,
                    latency_ms: start.elapsed().as_secs_f64() * 1e3,
                    model: request.model,
                    temperature: request.temperature,
                });
            }
            Err(e @ Error::Transport(_)) => last_err = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(RescoreResult {
        id: set.id.clone(),
        outcome: Outcome::Noncompliant,
        raw: String::new(),
        error: last_err,
        attempts,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        model: request.model,
        temperature: request.temperature,
    })
}

/// One request per candidate set, at most `policy.max_in_flight` at a time.
/// Results come back in input order. Transport failures are recorded per
/// utterance; other errors (bad candidate sets, mock misconfiguration) abort.
pub fn rescore(
    sets: &[CandidateSet],
    client: &dyn ChatClient,
    template: &PromptTemplate,
    policy: &RescorePolicy,
) -> Result<Vec<RescoreResult>> {
    let workers = policy.max_in_flight.max(1).min(sets.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RescoreResult>>>> = Mutex::new((0..sets.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= sets.len() {
                    break;
                }
                let r = rescore_one(&sets[i], client, template, policy);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RescoreWer {
    /// Noncompliant utterances scored through the fallback.
    pub included: f64,
    /// Noncompliant utterances dropped.
    pub excluded: f64,
    /// Rescorer's input top-1.
    pub top1: f64,
    pub total: usize,
    pub scored: usize,
    pub noncompliant: usize,
}

/// Corpus WER of rescored transcripts. `sets` and `results` are matched by id.
pub fn score_results(
    sets: &[CandidateSet],
    results: &[RescoreResult],
    references: &HashMap<String, String>,
    fallback: Fallback,
) -> Result<RescoreWer> {
    let by_id: HashMap<&str, &CandidateSet> = sets.iter().map(|s| (s.id.as_str(), s)).collect();
    let (mut inc, mut exc, mut top) = (EditCounts::default(), EditCounts::default(), EditCounts::default());
    let mut out = RescoreWer::default();
    for r in results {
        let set = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::pre(format!("no candidate set for result {:?}", r.id)))?;
        let reference = references
            .get(&r.id)
            .ok_or_else(|| Error::pre(format!("no reference for {:?}", r.id)))?;
        let c = wer_counts(r.hypothesis(set, fallback), reference)?;
        inc.add(&c);
        top.add(&wer_counts(set.top(), reference)?);
        out.total += 1;
        if matches!(r.outcome, Outcome::Transcript(_)) {
            exc.add(&c);
            out.scored += 1;
        } else {
            out.noncompliant += 1;
        }
    }
    out.included = inc.rate();
    out.excluded = exc.rate();
    out.top1 = top.rate();
    Ok(out)
}
