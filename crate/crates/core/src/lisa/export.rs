use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::client::{ChatMessage, Role};
use super::{build_prompt, CandidateSet, PromptTemplate, Provenance};
use crate::decoding::NBestList;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "n")]
pub enum EnsembleMode {
    /// First transcript of each model, in model order.
    TopOne,
    /// Rank 1 of every model, then rank 2 of every model, and so on.
    RoundRobin(usize),
    /// Each model's top `n` in turn.
    Concatenate(usize),
}

/// Merges per-model N-best lists into one candidate set. Duplicates are kept.
pub fn ensemble_candidates(id: impl Into<String>, lists: &[NBestList], mode: EnsembleMode) -> Result<CandidateSet> {
    if lists.is_empty() {
        return Err(Error::pre("ensemble needs at least one model list"));
    }
    let (n, candidates): (usize, Vec<String>) = match mode {
        EnsembleMode::TopOne => (1, lists.iter().map(|l| l.top().text.clone()).collect()),
        EnsembleMode::RoundRobin(n) => (
            n,
            (0..n)
                .flat_map(|r| lists.iter().filter_map(move |l| l.candidates.get(r)))
                .map(|c| c.text.clone())
                .collect(),
        ),
        EnsembleMode::Concatenate(n) => (
            n,
            lists
                .iter()
                .flat_map(|l| l.candidates.iter().take(n))
                .map(|c| c.text.clone())
                .collect(),
        ),
    };
    CandidateSet::new(
        id,
        candidates,
        Provenance::Ensemble {
            models: lists.len(),
            top_n: n,
        },
        None,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSplit {
    /// Utterances exported for fine-tuning; the rest are held out.
    pub size: usize,
    pub seed: u64,
}

impl Default for FinetuneSplit {
    fn default() -> Self {
        Self { size: 100, seed: 0 }
    }
}

/// Seeded shuffle of the ids; the first `split.size` go to fine-tuning. The
/// input order does not matter.
pub fn split_ids(ids: &[&str], split: FinetuneSplit) -> (Vec<String>, Vec<String>) {
    let mut sorted: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    sorted.sort();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    let held = sorted.split_off(split.size.min(sorted.len()));
    (sorted, held)
}

/// One chat-format training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub messages: Vec<ChatMessage>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub records: Vec<FinetuneRecord>,
    pub exported: Vec<String>,
    pub held_out: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

pub fn export_finetune_dataset(
    sets: &[CandidateSet],
    references: &HashMap<String, String>,
    template: &PromptTemplate,
    split: FinetuneSplit,
) -> Result<ExportReport> {
    let by_id: HashMap<&str, &CandidateSet> = sets.iter().map(|s| (s.id.as_str(), s)).collect();
    if by_id.len() != sets.len() {
        return Err(Error::pre("duplicate utterance ids in candidate sets"));
    }
    let ids: Vec<&str> = sets.iter().map(|s| s.id.as_str()).collect();
    let (train, held_out) = split_ids(&ids, split);
    let mut report = ExportReport {
        held_out,
        ..Default::default()
    };
    for id in train {
        let set = by_id[id.as_str()];
        let Some(reference) = references.get(&id) else {
            report.skipped.push((id, "missing reference".into()));
            continue;
        };
        if set.candidates.is_empty() {
            report.skipped.push((id, "empty candidate set".into()));
            continue;
        }
        let prompt = build_prompt(template, set)?;
        report.records.push(FinetuneRecord {
            messages: vec![
                ChatMessage::new(Role::User, prompt),
                ChatMessage::new(Role::Assistant, reference.clone()),
            ],
        });
        report.exported.push(id);
    }
    Ok(report)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(records: &[T], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{Candidate, NBestSource};
    use crate::lisa::{prompt_candidates, PromptVariant};

    fn nbest(texts: &[&str]) -> NBestList {
        let c = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Candidate::from_text(*t, -(i as f64)))
            .collect();
        NBestList::new(NBestSource::BeamSearch, c).unwrap()
    }

    #[test]
    fn ensemble_modes() {
        let lists: Vec<NBestList> = (0..10).map(|m| nbest(&[&format!("m{m} a"), &format!("m{m} b")])).collect();
        let top1 = ensemble_candidates("u", &lists, EnsembleMode::TopOne).unwrap();
        assert_eq!(top1.candidates.len(), 10);
        assert_eq!(top1.candidates[3], "m3 a");
        assert_eq!(top1.provenance, Provenance::Ensemble { models: 10, top_n: 1 });

        let one = [nbest(&["a", "b", "c"])];
        let rr = ensemble_candidates("u", &one, EnsembleMode::RoundRobin(10)).unwrap();
        assert_eq!(rr.candidates, ["a", "b", "c"]);

        let two = [nbest(&["x", "y"]), nbest(&["x", "z", "w"])];
        let rr = ensemble_candidates("u", &two, EnsembleMode::RoundRobin(3)).unwrap();
        assert_eq!(rr.candidates, ["x", "x", "y", "z", "w"]);
        let cat = ensemble_candidates("u", &two, EnsembleMode::Concatenate(2)).unwrap();
        assert_eq!(cat.candidates, ["x", "y", "x", "z"]);
        assert!(ensemble_candidates("u", &[], EnsembleMode::TopOne).is_err());
    }

    fn sets(n: usize) -> (Vec<CandidateSet>, HashMap<String, String>) {
        let mut s = Vec::new();
        let mut r = HashMap::new();
        for i in 0..n {
            let id = format!("v{i:03}");
            s.push(CandidateSet::new(id.clone(), vec![format!("cand {i}")], Provenance::TopBeams { k: 1 }, None).unwrap());
            r.insert(id, format!("ref {i}"));
        }
        (s, r)
    }

    #[test]
    fn split_and_export() {
        let t = PromptTemplate::new(PromptVariant::Direct);
        let (s, r) = sets(200);
        let rep = export_finetune_dataset(&s, &r, &t, FinetuneSplit::default()).unwrap();
        assert_eq!((rep.records.len(), rep.held_out.len(), rep.skipped.len()), (100, 100, 0));
        let again = export_finetune_dataset(&s, &r, &t, FinetuneSplit::default()).unwrap();
        assert_eq!(rep, again);
        let other = export_finetune_dataset(&s, &r, &t, FinetuneSplit { size: 100, seed: 1 }).unwrap();
        assert_ne!(rep.exported, other.exported);

        let rec = &rep.records[0];
        let id = &rep.exported[0];
        assert_eq!(rec.messages[1].content, r[id]);
        let set = s.iter().find(|x| &x.id == id).unwrap();
        assert_eq!(prompt_candidates(&t, &rec.messages[0].content).unwrap(), set.candidates);

        let mut buf = Vec::new();
        write_jsonl(&rep.records[..2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["messages"][0]["role"], "user");
        assert_eq!(first["messages"][1]["role"], "assistant");
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn skips_are_reported() {
        let t = PromptTemplate::new(PromptVariant::Direct);
        let (mut s, mut r) = sets(10);
        s[0].candidates.clear();
        r.remove("v001");
        let rep = export_finetune_dataset(&s, &r, &t, FinetuneSplit { size: 10, seed: 3 }).unwrap();
        assert_eq!(rep.records.len(), 10 - rep.skipped.len());
        assert_eq!(rep.skipped.len(), 2);
        assert!(rep.skipped.iter().any(|(id, why)| id == "v000" && why.contains("empty")));
    }
}
