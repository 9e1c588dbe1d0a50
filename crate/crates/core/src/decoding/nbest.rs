//! Ranked candidate lists and their line-oriented text format.
//!
//! One candidate per line: `rank<TAB>combined<TAB>acoustic<TAB>lm<TAB>transcript`,
//! ranks starting at 1. A file may hold several lists; each then starts with a
//! header line `# utt=<id> source=<beam_search|ensemble>`. Blank lines are
//! ignored.

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NBestSource {
    #[default]
    BeamSearch,
    Ensemble,
}

impl NBestSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NBestSource::BeamSearch => "beam_search",
            NBestSource::Ensemble => "ensemble",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "beam_search" => Some(NBestSource::BeamSearch),
            "ensemble" => Some(NBestSource::Ensemble),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Natural-log CTC probability.
    pub acoustic: f64,
    /// Natural-log LM score (unweighted).
    pub lm: f64,
    pub combined: f64,
    /// Decoder labels; not part of the text format.
    #[serde(skip)]
    pub labels: Vec<usize>,
}

impl Candidate {
    pub fn from_text(text: impl Into<String>, combined: f64) -> Self {
        Self {
            text: text.into(),
            acoustic: combined,
            lm: 0.0,
            combined,
            labels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub source: NBestSource,
    pub candidates: Vec<Candidate>,
}

impl NBestList {
    /// Checks the list is nonempty and sorted by nonincreasing combined score.
    pub fn new(source: NBestSource, candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::contract("N-best list must be nonempty"));
        }
        if candidates.windows(2).any(|w| w[0].combined < w[1].combined) {
            return Err(Error::contract("N-best list must be sorted by combined score"));
        }
        Ok(Self { source, candidates })
    }

    pub fn top(&self) -> &Candidate {
        &self.candidates[0]
    }

    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.candidates.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", i + 1, c.combined, c.acoustic, c.lm, c.text);
        }
        s
    }
}

/// N-best lists keyed by utterance id, in file order.
pub fn write_nbest_file(lists: &[(String, NBestList)]) -> String {
    let mut s = String::new();
    for (id, l) in lists {
        let _ = writeln!(s, "# utt={id} source={}", l.source.as_str());
        s.push_str(&l.to_lines());
    }
    s
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses lists written by [`write_nbest_file`] or a bare [`NBestList::to_lines`]
/// block (which gets the id `""`).
pub fn read_nbest_file<R: BufRead>(input: R) -> Result<Vec<(String, NBestList)>> {
    let mut out: Vec<(String, NBestSource, Vec<Candidate>, usize)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let mut id = None;
            let mut source = NBestSource::BeamSearch;
            for tok in h.split_whitespace() {
                if let Some(v) = tok.strip_prefix("utt=") {
                    id = Some(v.to_string());
                } else if let Some(v) = tok.strip_prefix("source=") {
                    source = NBestSource::parse(v).ok_or_else(|| perr(n, format!("unknown source {v:?}")))?;
                }
            }
            let id = id.ok_or_else(|| perr(n, "header needs utt=<id>"))?;
            out.push((id, source, Vec::new(), n));
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() != 5 {
            return Err(perr(n, "expected rank, combined, acoustic, lm, transcript"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr(n, format!("not a number: {s:?}")));
        let rank: usize = fields[0].parse().map_err(|_| perr(n, "bad rank"))?;
        if out.is_empty() {
            out.push((String::new(), NBestSource::BeamSearch, Vec::new(), n));
        }
        let cur = out.last_mut().expect("nonempty");
        if rank != cur.2.len() + 1 {
            return Err(perr(n, format!("rank {rank} out of sequence")));
        }
        cur.2.push(Candidate {
            text: fields[4].to_string(),
            acoustic: num(fields[2])?,
            lm: num(fields[3])?,
            combined: num(fields[1])?,
            labels: Vec::new(),
        });
    }
    out.into_iter()
        .map(|(id, src, c, line)| {
            NBestList::new(src, c)
                .map(|l| (id, l))
                .map_err(|e| perr(line, e.to_string()))
        })
        .collect()
}
