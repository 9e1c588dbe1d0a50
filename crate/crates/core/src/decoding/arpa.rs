//! ARPA back-off n-gram language models: parsing, scoring, writing and a small
//! absolute-discounting estimator.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// log10 probability used for words missing from a model without `<unk>`.
pub const DEFAULT_OOV_LOG10: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: f64,
}

/// Back-off n-gram model; all scores are log10.
#[derive(Clone, Debug, PartialEq)]
pub struct ArpaNGram {
    order: usize,
    /// `grams[n - 1]` holds the n-grams.
    grams: Vec<HashMap<Vec<String>, Entry>>,
    pub oov_log10: f64,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| perr(line, format!("not a number: {tok:?}")))
}

impl ArpaNGram {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocabulary_size(&self) -> usize {
        self.grams[0].len()
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.grams[0].keys().map(|k| k[0].as_str())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.grams[0].contains_key(&[word.to_string()][..])
    }

    pub fn count(&self, n: usize) -> usize {
        self.grams.get(n - 1).map_or(0, HashMap::len)
    }

    fn entry(&self, gram: &[String]) -> Option<&Entry> {
        self.grams.get(gram.len().checked_sub(1)?)?.get(gram)
    }

    /// `log10 P(word | context)` with standard back-off. Only the last
    /// `order − 1` context words are used.
    pub fn log10_prob(&self, context: &[&str], word: &str) -> f64 {
        let word = if self.contains(word) {
            word
        } else if self.contains(UNK) {
            UNK
        } else {
            return self.oov_log10;
        };
        let keep = context.len().min(self.order - 1);
        let ctx: Vec<String> = context[context.len() - keep..].iter().map(|s| s.to_string()).collect();
        self.backoff_prob(&ctx, word)
    }

    fn backoff_prob(&self, ctx: &[String], word: &str) -> f64 {
        let mut gram = ctx.to_vec();
        gram.push(word.to_string());
        if let Some(e) = self.entry(&gram) {
            return e.log10_prob;
        }
        if ctx.is_empty() {
            return self.oov_log10;
        }
        let bow = self.entry(ctx).map_or(0.0, |e| e.log10_backoff);
        bow + self.backoff_prob(&ctx[1..], word)
    }

    /// Sum of `log10` probabilities of the words and `</s>`, starting from `<s>`.
    pub fn score_sentence(&self, words: &[&str]) -> f64 {
        let mut ctx: Vec<&str> = vec![BOS];
        let mut total = 0.0;
        for &w in words.iter().chain(std::iter::once(&EOS)) {
            total += self.log10_prob(&ctx, w);
            ctx.push(w);
        }
        total
    }

    /// Reads an ARPA file. Errors carry 1-based line numbers.
    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut declared: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut grams: Vec<HashMap<Vec<String>, Entry>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;
        let mut last_line = 0;

        let close = |section: Option<usize>, grams: &Vec<HashMap<Vec<String>, Entry>>, declared: &BTreeMap<usize, (usize, usize)>, line: usize| -> Result<()> {
            if let Some(n) = section {
                let (want, _) = declared[&n];
                let got = grams[n - 1].len();
                if got != want {
                    return Err(perr(line, format!("{n}-grams: header declares {want}, section has {got}")));
                }
            }
            Ok(())
        };

        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            last_line = lineno;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || ended {
                continue;
            }
            if t == "\\data\\" {
                if in_data || !declared.is_empty() {
                    return Err(perr(lineno, "duplicate \\data\\ section"));
                }
                in_data = true;
                continue;
            }
            if t == "\\end\\" {
                close(section, &grams, &declared, lineno)?;
                ended = true;
                continue;
            }
            if let Some(rest) = t.strip_prefix('\\') {
                let n = rest
                    .strip_suffix("-grams:")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| perr(lineno, format!("unknown section {t:?}")))?;
                close(section, &grams, &declared, lineno)?;
                if !declared.contains_key(&n) {
                    return Err(perr(lineno, format!("{n}-grams section not declared in \\data\\")));
                }
                let expected = section.map_or(1, |s| s + 1);
                if n != expected {
                    return Err(perr(lineno, format!("expected \\{expected}-grams:, found \\{n}-grams:")));
                }
                in_data = false;
                section = Some(n);
                continue;
            }
            if in_data {
                let body = t
                    .strip_prefix("ngram ")
                    .ok_or_else(|| perr(lineno, format!("expected 'ngram N=count', got {t:?}")))?;
                let (n, c) = body
                    .split_once('=')
                    .ok_or_else(|| perr(lineno, "missing '=' in ngram count"))?;
                let n: usize = n.trim().parse().map_err(|_| perr(lineno, "bad n-gram order"))?;
                let c: usize = c.trim().parse().map_err(|_| perr(lineno, "bad n-gram count"))?;
                if n == 0 || n != declared.len() + 1 {
                    return Err(perr(lineno, format!("n-gram orders must be declared as 1, 2, ...; got {n}")));
                }
                declared.insert(n, (c, lineno));
                grams.push(HashMap::new());
                continue;
            }
            let Some(n) = section else {
                return Err(perr(lineno, format!("content outside any section: {t:?}")));
            };
            let toks: Vec<&str> = t.split_whitespace().collect();
            let (prob, words, bow) = if toks.len() == n + 1 {
                (parse_f64(toks[0], lineno)?, &toks[1..], 0.0)
            } else if toks.len() == n + 2 {
                (parse_f64(toks[0], lineno)?, &toks[1..=n], parse_f64(toks[n + 1], lineno)?)
            } else {
                return Err(perr(lineno, format!("{n}-gram line needs {} or {} fields", n + 1, n + 2)));
            };
            if prob > 0.0 {
                return Err(perr(lineno, format!("log10 probability {prob} > 0")));
            }
            let key: Vec<String> = words.iter().map(|s| s.to_string()).collect();
            if n > 1 && !grams[n - 2].contains_key(&key[..n - 1]) {
                return Err(perr(lineno, format!("prefix of {:?} missing at order {}", key, n - 1)));
            }
            if grams[n - 1]
                .insert(key, Entry { log10_prob: prob, log10_backoff: bow })
                .is_some()
            {
                return Err(perr(lineno, format!("duplicate {n}-gram")));
            }
        }
        if !ended {
            return Err(perr(last_line, "missing \\end\\"));
        }
        if declared.is_empty() {
            return Err(perr(last_line, "missing \\data\\ header"));
        }
        if let Some((&n, &(_, line))) = declared.iter().find(|(n, _)| **n > 0 && grams[**n - 1].is_empty() && declared[n].0 > 0) {
            return Err(perr(line, format!("declared {n}-grams never given")));
        }
        Ok(Self {
            order: declared.len(),
            grams,
            oov_log10: DEFAULT_OOV_LOG10,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::load(text.as_bytes())
    }

    /// Serialises in ARPA format with entries sorted for stable output.
    pub fn to_arpa(&self) -> String {
        let mut s = String::from("\\data\\\n");
        for (n, g) in self.grams.iter().enumerate() {
            let _ = writeln!(s, "ngram {}={}", n + 1, g.len());
        }
        for (n, g) in self.grams.iter().enumerate() {
            let _ = write!(s, "\n\\{}-grams:\n", n + 1);
            let mut keys: Vec<&Vec<String>> = g.keys().collect();
            keys.sort();
            for k in keys {
                let e = g[k];
                let _ = write!(s, "{}\t{}", e.log10_prob, k.join(" "));
                if n + 1 < self.order {
                    let _ = write!(s, "\t{}", e.log10_backoff);
                }
                s.push('\n');
            }
        }
        s.push_str("\n\\end\\\n");
        s
    }

    /// Estimates a back-off model from whitespace-tokenised sentences with
    /// absolute discounting `d` at every order above one. Unigrams use add-one
    /// smoothing over the vocabulary plus `</s>` and `<unk>`.
    pub fn estimate(sentences: &[String], order: usize, discount: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("order must be >= 1"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::config("discount must be in (0, 1)"));
        }
        // counts[n-1][gram]
        let mut counts: Vec<BTreeMap<Vec<String>, f64>> = vec![BTreeMap::new(); order];
        for s in sentences {
            let mut toks = vec![BOS.to_string()];
            toks.extend(s.split_whitespace().map(str::to_string));
            toks.push(EOS.to_string());
            for n in 1..=order {
                for w in toks.windows(n) {
                    if n == 1 && w[0] == BOS {
                        continue;
                    }
                    *counts[n - 1].entry(w.to_vec()).or_insert(0.0) += 1.0;
                }
            }
        }
        counts[0].entry(vec![UNK.to_string()]).or_insert(0.0);
        let total: f64 = counts[0].values().sum();
        let v = counts[0].len() as f64;
        let mut grams: Vec<HashMap<Vec<String>, Entry>> = vec![HashMap::new(); order];
        for (k, &c) in &counts[0] {
            let p = ((c + 1.0) / (total + v)).log10();
            grams[0].insert(k.clone(), Entry { log10_prob: p, log10_backoff: 0.0 });
        }
        grams[0].insert(vec![BOS.to_string()], Entry { log10_prob: -99.0, log10_backoff: 0.0 });

        for n in 2..=order {
            // history totals and distinct continuations
            let mut hist: BTreeMap<Vec<String>, (f64, f64)> = BTreeMap::new();
            for (k, &c) in &counts[n - 1] {
                let h = hist.entry(k[..n - 1].to_vec()).or_insert((0.0, 0.0));
                h.0 += c;
                h.1 += 1.0;
            }
            for (k, &c) in &counts[n - 1] {
                let (ch, _) = hist[&k[..n - 1]];
                let p = ((c - discount) / ch).log10();
                grams[n - 1].insert(k.clone(), Entry { log10_prob: p, log10_backoff: 0.0 });
            }
            let lower = Self {
                order: n - 1,
                grams: grams[..n - 1].to_vec(),
                oov_log10: DEFAULT_OOV_LOG10,
            };
            for (h, &(ch, distinct)) in &hist {
                let left = discount * distinct / ch;
                let seen_lower: f64 = counts[n - 1]
                    .keys()
                    .filter(|k| k[..n - 1] == h[..])
                    .map(|k| 10f64.powf(lower.backoff_prob(&h[1..], &k[n - 1])))
                    .sum();
                let denom = (1.0 - seen_lower).max(1e-12);
                if let Some(e) = grams[n - 2].get_mut(h) {
                    e.log10_backoff = (left / denom).log10();
                }
            }
        }
        Ok(Self {
            order,
            grams,
            oov_log10: DEFAULT_OOV_LOG10,
        })
    }
}

pub fn load_arpa<R: BufRead>(input: R) -> Result<ArpaNGram> {
    ArpaNGram::load(input)
}
