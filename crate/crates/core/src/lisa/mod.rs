//! LLM rescoring of candidate transcripts: prompt rendering, response
//! parsing, chat clients, batch rescoring and fine-tune export.

pub mod client;
mod export;
mod rescore;

use serde::{Deserialize, Serialize};

use crate::alphabet::normalize;
use crate::decoding::NBestList;
use crate::error::{Error, Result};

pub use client::{ChatClient, ChatMessage, ChatRequest, MockClient, RequestConfig, Role};
#[cfg(feature = "live")]
pub use client::LiveClient;
pub use export::{
    ensemble_candidates, export_finetune_dataset, split_ids, write_jsonl, EnsembleMode, ExportReport, FinetuneRecord,
    FinetuneSplit,
};
pub use rescore::{rescore, score_results, Fallback, Outcome, RescorePolicy, RescoreResult, RescoreWer};

const DIRECT_INSTRUCTION: &str = "Your task is to perform automatic speech recognition. Below are multiple candidate \
transcriptions, listed from most likely to least likely. Choose the transcription that is most accurate, ensuring it \
is contextually and grammatically correct. Focus on key differences in the options that change the meaning or \
correctness. Avoid selections with repetitive or nonsensical phrases. In cases of ambiguity, select the option that \
is most coherent and contextually sound. Respond with the chosen transcription only, without any introductory text.";

const COR_INSTRUCTION: &str = "Your task is to perform automatic speech recognition. Below are multiple candidate \
transcriptions, listed from most likely to least likely. Begin your response with a Chain of Reasoning, explaining \
your analysis and decision-making process in choosing the most accurate transcription. After your analysis, clearly \
indicate your final choice with the cue 'TRANSCRIPT: '. Ensure the transcription you choose is contextually and \
grammatically correct. Focus on key differences in the options that change the meaning or correctness. Avoid \
selections with repetitive or nonsensical phrases. In cases of ambiguity, select the option that is most coherent \
and contextually sound. Respond first with your reasoning, followed by 'TRANSCRIPT: ' and then the chosen \
transcription.";

const NLL_INSTRUCTION: &str = "Your task is automatic speech recognition. Below are the candidate transcriptions \
along with their negative log-likelihood from a CTC beam search. Respond with the correct transcription, without \
any introductory text.";

/// Marker preceding the final answer in chain-of-reasoning responses.
pub const TRANSCRIPT_CUE: &str = "TRANSCRIPT:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Direct,
    Ensemble,
    ChainOfReasoning,
    NllAnnotated,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 4] = [
        PromptVariant::Direct,
        PromptVariant::Ensemble,
        PromptVariant::ChainOfReasoning,
        PromptVariant::NllAnnotated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Direct => "direct",
            PromptVariant::Ensemble => "ensemble",
            PromptVariant::ChainOfReasoning => "chain_of_reasoning",
            PromptVariant::NllAnnotated => "nll_annotated",
        }
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || (s == "nll" && *v == PromptVariant::NllAnnotated) || (s == "cor" && *v == PromptVariant::ChainOfReasoning))
            .ok_or_else(|| Error::config(format!("unknown prompt template {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub variant: PromptVariant,
    pub instruction: String,
}

impl PromptTemplate {
    /// The canonical instruction for a variant. Ensemble lists share the
    /// direct wording.
    pub fn new(variant: PromptVariant) -> Self {
        let instruction = match variant {
            PromptVariant::Direct | PromptVariant::Ensemble => DIRECT_INSTRUCTION,
            PromptVariant::ChainOfReasoning => COR_INSTRUCTION,
            PromptVariant::NllAnnotated => NLL_INSTRUCTION,
        };
        Self {
            variant,
            instruction: instruction.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    TopBeams { k: usize },
    Ensemble { models: usize, top_n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub id: String,
    /// Most to least likely.
    pub candidates: Vec<String>,
    pub provenance: Provenance,
    pub nll: Option<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(id: impl Into<String>, candidates: Vec<String>, provenance: Provenance, nll: Option<Vec<f64>>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            candidates,
            provenance,
            nll,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::pre(format!("candidate set {:?} is empty", self.id)));
        }
        if let Some(n) = &self.nll {
            if n.len() != self.candidates.len() {
                return Err(Error::dim(format!(
                    "{} NLL values for {} candidates",
                    n.len(),
                    self.candidates.len()
                )));
            }
        }
        if let Some(c) = self.candidates.iter().find(|c| c.contains('\n')) {
            return Err(Error::pre(format!("candidate spans several lines: {c:?}")));
        }
        Ok(())
    }

    /// The first `k` beams; NLL is the negated combined beam score.
    pub fn from_nbest(id: impl Into<String>, list: &NBestList, k: usize) -> Result<Self> {
        let top = &list.candidates[..k.min(list.len())];
        Self::new(
            id,
            top.iter().map(|c| c.text.clone()).collect(),
            Provenance::TopBeams { k: top.len() },
            Some(top.iter().map(|c| -c.combined).collect()),
        )
    }

    pub fn top(&self) -> &str {
        &self.candidates[0]
    }
}

fn nll_suffix(nll: f64) -> String {
    format!(" (NLL: {nll:.3})")
}

/// Instruction paragraph, then one candidate per line in the given order.
pub fn build_prompt(template: &PromptTemplate, set: &CandidateSet) -> Result<String> {
    set.validate()?;
    let mut out = template.instruction.trim_end().to_string();
    if template.variant == PromptVariant::NllAnnotated {
        let nll = set
            .nll
            .as_ref()
            .ok_or_else(|| Error::config(format!("NLL template needs NLL values for {:?}", set.id)))?;
        for (c, x) in set.candidates.iter().zip(nll) {
            out.push('\n');
            out.push_str(c.trim_end());
            out.push_str(&nll_suffix(*x));
        }
    } else {
        for c in &set.candidates {
            out.push('\n');
            out.push_str(c.trim_end());
        }
    }
    Ok(out)
}

/// Recovers the candidate lines from a prompt rendered by [`build_prompt`].
pub fn prompt_candidates(template: &PromptTemplate, prompt: &str) -> Result<Vec<String>> {
    let body = prompt
        .strip_prefix(template.instruction.trim_end())
        .and_then(|r| r.strip_prefix('\n'))
        .ok_or_else(|| Error::pre("prompt does not start with the template instruction"))?;
    body.split('\n')
        .map(|line| {
            if template.variant == PromptVariant::NllAnnotated {
                let cut = line
                    .rfind(" (NLL: ")
                    .ok_or_else(|| Error::pre(format!("line without NLL annotation: {line:?}")))?;
                Ok(line[..cut].to_string())
            } else {
                Ok(line.to_string())
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "text")]
pub enum ParsedResponse {
    Transcript(String),
    Noncompliant,
}

const REFUSALS: [&str; 6] = ["i cannot", "i can't", "i'm sorry", "i am sorry", "sorry,", "i am unable"];

/// Lowercases, collapses whitespace and strips surrounding quotes and
/// terminal punctuation.
pub fn normalize_transcript(text: &str) -> String {
    let t = text.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '`');
    let t = t.trim_end_matches(['.', '!', '?', ',', ';', ':']);
    normalize(t)
}

pub fn parse_response(template: &PromptTemplate, raw: &str) -> ParsedResponse {
    let answer = match template.variant {
        PromptVariant::ChainOfReasoning => match raw.rfind(TRANSCRIPT_CUE) {
            Some(i) => raw[i + TRANSCRIPT_CUE.len()..].lines().next().unwrap_or(""),
            None => return ParsedResponse::Noncompliant,
        },
        _ => raw.trim(),
    };
    let text = normalize_transcript(answer);
    if text.is_empty() || REFUSALS.iter().any(|r| text.starts_with(r)) {
        ParsedResponse::Noncompliant
    } else {
        ParsedResponse::Transcript(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{Candidate, NBestSource};

    const CANDIDATES: &str = include_str!("golden/candidates.txt");

    fn golden_set(nll: bool) -> CandidateSet {
        let c: Vec<String> = CANDIDATES.lines().map(String::from).collect();
        let n = nll.then(|| (0..c.len()).map(|i| 1.5 + 0.25 * i as f64).collect());
        CandidateSet::new("u", c, Provenance::Ensemble { models: 10, top_n: 1 }, n).unwrap()
    }

    #[test]
    fn renders_match_golden_files() {
        let cases = [
            (PromptVariant::Direct, include_str!("golden/direct.txt")),
            (PromptVariant::Ensemble, include_str!("golden/direct.txt")),
            (PromptVariant::ChainOfReasoning, include_str!("golden/chain_of_reasoning.txt")),
            (PromptVariant::NllAnnotated, include_str!("golden/nll.txt")),
        ];
        for (v, golden) in cases {
            let p = build_prompt(&PromptTemplate::new(v), &golden_set(true)).unwrap();
            assert_eq!(p, golden, "{v:?}");
            assert!(p.lines().all(|l| l == l.trim_end()));
        }
    }

    #[test]
    fn single_candidate_and_cue() {
        let set = CandidateSet::new("u", vec!["hello world".into()], Provenance::TopBeams { k: 1 }, None).unwrap();
        let p = build_prompt(&PromptTemplate::new(PromptVariant::Direct), &set).unwrap();
        assert_eq!(p, format!("{DIRECT_INSTRUCTION}\nhello world"));
        assert!(COR_INSTRUCTION.contains("'TRANSCRIPT: '"));
    }

    #[test]
    fn nll_template_requires_values() {
        let err = build_prompt(&PromptTemplate::new(PromptVariant::NllAnnotated), &golden_set(false));
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(CandidateSet::new("u", vec![], Provenance::TopBeams { k: 0 }, None).is_err());
        assert!(CandidateSet::new("u", vec!["a".into()], Provenance::TopBeams { k: 1 }, Some(vec![])).is_err());
    }

    #[test]
    fn prompt_reparses_into_candidates() {
        for v in PromptVariant::ALL {
            let t = PromptTemplate::new(v);
            let set = golden_set(true);
            let p = build_prompt(&t, &set).unwrap();
            assert_eq!(prompt_candidates(&t, &p).unwrap(), set.candidates);
        }
    }

    #[test]
    fn parses_responses() {
        let cor = PromptTemplate::new(PromptVariant::ChainOfReasoning);
        let direct = PromptTemplate::new(PromptVariant::Direct);
        assert_eq!(
            parse_response(&cor, "TRANSCRIPT: hello world"),
            ParsedResponse::Transcript("hello world".into())
        );
        assert_eq!(parse_response(&cor, "I cannot choose."), ParsedResponse::Noncompliant);
        let reasoning = "Options 5 and 6 differ only in 'i' versus 'a'. The pronoun reads naturally, and \
            TRANSCRIPT: appears in my notes.\nTRANSCRIPT: After breakfast instead of working I decided to walk down towards the common.\n";
        assert_eq!(
            parse_response(&cor, reasoning),
            ParsedResponse::Transcript(
                "after breakfast instead of working i decided to walk down towards the common".into()
            )
        );
        assert_eq!(parse_response(&cor, "TRANSCRIPT:   "), ParsedResponse::Noncompliant);
        assert_eq!(
            parse_response(&direct, "  \"Hello   World!\"\n"),
            ParsedResponse::Transcript("hello world".into())
        );
        assert_eq!(parse_response(&direct, "I'm sorry, I can't help."), ParsedResponse::Noncompliant);
        assert_eq!(parse_response(&direct, ""), ParsedResponse::Noncompliant);
    }

    #[test]
    fn from_nbest_takes_prefix() {
        let list = NBestList::new(
            NBestSource::BeamSearch,
            vec![Candidate::from_text("a", -1.0), Candidate::from_text("b", -2.0), Candidate::from_text("c", -3.0)],
        )
        .unwrap();
        let s = CandidateSet::from_nbest("x", &list, 2).unwrap();
        assert_eq!(s.candidates, ["a", "b"]);
        assert_eq!(s.nll, Some(vec![1.0, 2.0]));
        assert_eq!(s.provenance, Provenance::TopBeams { k: 2 });
    }
}
