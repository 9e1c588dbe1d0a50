//! Greedy class-weighted bin packing for minibatch construction.
//!
//! Items (utterances) are packed into bins whose total length stays under a
//! cap, while the class mix follows target proportions and every bin holds at
//! least one item of each required class. Items force-added to satisfy the
//! required classes put their class into "debt", and later draws of that class
//! are skipped to pay it back.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetClass {
    GaddySilent,
    GaddyVocal,
    #[serde(rename = "librispeech")]
    LibriSpeech,
}

impl DatasetClass {
    pub const ALL: [DatasetClass; 3] = [
        DatasetClass::GaddySilent,
        DatasetClass::GaddyVocal,
        DatasetClass::LibriSpeech,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetClass::GaddySilent => "gaddy_silent",
            DatasetClass::GaddyVocal => "gaddy_vocal",
            DatasetClass::LibriSpeech => "librispeech",
        }
    }
}

/// Target share of each dataset class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProportions {
    pub gaddy_silent: f64,
    pub gaddy_vocal: f64,
    pub librispeech: f64,
}

impl ClassProportions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.gaddy_silent, self.gaddy_vocal, self.librispeech]
    }

    pub fn get(&self, class: DatasetClass) -> f64 {
        self.as_array()[class.index()]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }

    /// Rescales to sum to exactly one. Sums more than 1% away from one are rejected.
    pub fn normalized(&self) -> Result<Self> {
        let a = self.as_array();
        if a.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config(format!("proportions must be >= 0: {self:?}")));
        }
        let s = self.sum();
        if (s - 1.0).abs() > 0.01 {
            return Err(Error::config(format!("proportions sum to {s}, expected 1")));
        }
        Ok(Self {
            gaddy_silent: a[0] / s,
            gaddy_vocal: a[1] / s,
            librispeech: a[2] / s,
        })
    }
}

impl Default for ClassProportions {
    fn default() -> Self {
        default_proportions()
    }
}

/// Silent 11.2%, vocalized 38.8%, LibriSpeech 50%.
pub fn default_proportions() -> ClassProportions {
    ClassProportions {
        gaddy_silent: 0.112,
        gaddy_vocal: 0.388,
        librispeech: 0.5,
    }
}

/// The balanced EMG/audio mix: silent 18.3%, vocalized 63.3%, LibriSpeech 18.3%.
///
/// These sum to 0.999; [`PackingConfig::new`] renormalises them.
pub fn balanced_proportions() -> ClassProportions {
    ClassProportions {
        gaddy_silent: 0.183,
        gaddy_vocal: 0.633,
        librispeech: 0.183,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingItem {
    pub index: usize,
    /// Timesteps.
    pub length: usize,
    pub class: DatasetClass,
}

fn default_max_len() -> usize {
    128_000
}

fn default_failure_threshold() -> usize {
    50
}

fn default_required() -> Vec<DatasetClass> {
    vec![DatasetClass::GaddySilent]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub proportions: ClassProportions,
    #[serde(default = "default_required")]
    pub required_classes: Vec<DatasetClass>,
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            max_len: default_max_len(),
            proportions: default_proportions(),
            required_classes: default_required(),
            failure_threshold: default_failure_threshold(),
            seed: 0,
        }
    }
}

impl PackingConfig {
    pub fn new(max_len: usize, proportions: ClassProportions, required_classes: Vec<DatasetClass>, seed: u64) -> Result<Self> {
        let cfg = Self {
            max_len,
            proportions: proportions.normalized()?,
            required_classes,
            failure_threshold: default_failure_threshold(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        if self.failure_threshold == 0 {
            return Err(Error::config("failure_threshold must be positive"));
        }
        self.proportions.normalized().map(|_| ())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub items: Vec<usize>,
    pub length: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackResult {
    pub bins: Vec<Bin>,
    /// Items left over when packing stopped.
    pub discarded: Vec<usize>,
    /// Items rejected at ingestion (longer than `max_len` or empty).
    pub rejected: Vec<usize>,
    /// Class whose exhaustion ended the proportional phase.
    pub exhausted: Option<DatasetClass>,
}

impl PackResult {
    pub fn packed(&self) -> impl Iterator<Item = usize> + '_ {
        self.bins.iter().flat_map(|b| b.items.iter().copied())
    }
}

struct Packer<'a> {
    items: &'a [PackingItem],
    max_len: usize,
    bins: Vec<Bin>,
    bin_classes: Vec<[bool; 3]>,
}

impl Packer<'_> {
    fn first_fit(&self, length: usize) -> Option<usize> {
        self.bins.iter().position(|b| b.length + length <= self.max_len)
    }

    fn add(&mut self, bin: usize, item: usize) {
        let it = self.items[item];
        self.bins[bin].items.push(item);
        self.bins[bin].length += it.length;
        self.bin_classes[bin][it.class.index()] = true;
    }

    fn open(&mut self) -> usize {
        self.bins.push(Bin::default());
        self.bin_classes.push([false; 3]);
        self.bins.len() - 1
    }
}

/// Packs items into bins. Item `index` fields identify the items in the output.
pub fn pack(items: &[PackingItem], config: &PackingConfig) -> Result<PackResult> {
    config.validate()?;
    let p = config.proportions.normalized()?.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // positions into `items`, grouped by class
    let mut queues: [Vec<usize>; 3] = Default::default();
    let mut rejected = Vec::new();
    for (pos, it) in items.iter().enumerate() {
        if it.length == 0 || it.length > config.max_len {
            rejected.push(it.index);
        } else {
            queues[it.class.index()].push(pos);
        }
    }
    for &req in &config.required_classes {
        if queues[req.index()].is_empty() {
            return Err(Error::config(format!(
                "required class {} has no items",
                req.name()
            )));
        }
    }
    for q in &mut queues {
        q.shuffle(&mut rng);
    }

    let mut packer = Packer {
        items,
        max_len: config.max_len,
        bins: Vec::new(),
        bin_classes: Vec::new(),
    };
    let mut unplaceable = Vec::new();
    // classes that take part in proportional sampling
    let active: Vec<usize> = (0..3).filter(|&c| p[c] > 0.0 && !queues[c].is_empty()).collect();
    let mut debt = [0usize; 3];
    let mut exhausted = None;

    if !active.is_empty() {
        let dist = WeightedIndex::new(active.iter().map(|&c| p[c])).expect("positive weights");
        loop {
            if let Some(&c) = active.iter().find(|&&c| queues[c].is_empty()) {
                exhausted = Some(DatasetClass::ALL[c]);
                break;
            }
            let c = active[dist.sample(&mut rng)];
            if debt[c] > 0 {
                debt[c] -= 1;
                continue;
            }
            let pos = queues[c].pop().expect("nonempty by loop condition");
            let len = items[pos].length;
            if let Some(b) = packer.first_fit(len) {
                packer.add(b, pos);
                continue;
            }
            let b = packer.open();
            packer.add(b, pos);
            let mut added = Vec::new();
            let mut ok = true;
            for &req in &config.required_classes {
                let r = req.index();
                if packer.bin_classes[b][r] {
                    continue;
                }
                let room = config.max_len - packer.bins[b].length;
                match queues[r].iter().rposition(|&q| items[q].length <= room) {
                    Some(k) => {
                        let q = queues[r].remove(k);
                        packer.add(b, q);
                        added.push(r);
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                for r in added {
                    debt[r] += 1;
                }
            } else {
                // cannot satisfy the required classes around this item: undo the bin
                let bin = packer.bins.pop().expect("just opened");
                packer.bin_classes.pop();
                for &q in bin.items.iter().skip(1) {
                    queues[items[q].class.index()].insert(0, q);
                }
                unplaceable.push(pos);
            }
        }

        let mut failures = 0;
        while failures < config.failure_threshold {
            let live: Vec<usize> = active.iter().copied().filter(|&c| !queues[c].is_empty()).collect();
            if live.is_empty() {
                break;
            }
            let dist = WeightedIndex::new(live.iter().map(|&c| p[c])).expect("positive weights");
            let c = live[dist.sample(&mut rng)];
            let pos = *queues[c].last().expect("live class");
            match packer.first_fit(items[pos].length) {
                Some(b) => {
                    queues[c].pop();
                    packer.add(b, pos);
                    failures = 0;
                }
                None => {
                    // rotate so the next draw of this class tries another item
                    let q = queues[c].pop().expect("live class");
                    queues[c].insert(0, q);
                    failures += 1;
                }
            }
        }
    }

    let mut discarded: Vec<usize> = unplaceable
        .into_iter()
        .chain(queues.iter().flatten().copied())
        .map(|pos| items[pos].index)
        .collect();
    discarded.sort_unstable();
    let mut bins: Vec<Bin> = packer
        .bins
        .into_iter()
        .map(|b| Bin {
            items: b.items.iter().map(|&pos| items[pos].index).collect(),
            length: b.length,
        })
        .collect();
    bins.shuffle(&mut rng);
    Ok(PackResult {
        bins,
        discarded,
        rejected,
        exhausted,
    })
}

/// Seed for epoch `epoch` derived from the base seed (SplitMix64 finaliser).
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Endless, deterministic sequence of epochs; each epoch re-packs the corpus
/// with a seed derived from the base seed and the epoch number.
pub struct EpochStream<'a> {
    items: &'a [PackingItem],
    config: PackingConfig,
    epoch: u64,
}

impl Iterator for EpochStream<'_> {
    type Item = Result<PackResult>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut cfg = self.config.clone();
        cfg.seed = epoch_seed(self.config.seed, self.epoch);
        self.epoch += 1;
        Some(pack(self.items, &cfg))
    }
}

pub fn epoch_stream<'a>(items: &'a [PackingItem], config: &PackingConfig) -> EpochStream<'a> {
    EpochStream {
        items,
        config: config.clone(),
        epoch: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn corpus(rng: &mut ChaCha8Rng, counts: [usize; 3], len: std::ops::RangeInclusive<usize>) -> Vec<PackingItem> {
        let mut out = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.push(PackingItem {
                    index: out.len(),
                    length: rng.gen_range(len.clone()),
                    class: DatasetClass::ALL[c],
                });
            }
        }
        out
    }

    fn check_invariants(items: &[PackingItem], cfg: &PackingConfig, r: &PackResult) {
        let class_of = |i: usize| items.iter().find(|it| it.index == i).unwrap().class;
        let mut seen = HashSet::new();
        for b in &r.bins {
            assert!(b.length <= cfg.max_len);
            let sum: usize = b.items.iter().map(|&i| items[i].length).sum();
            assert_eq!(sum, b.length);
            for req in &cfg.required_classes {
                assert!(b.items.iter().any(|&i| class_of(i) == *req));
            }
            for &i in &b.items {
                assert!(seen.insert(i), "item {i} packed twice");
            }
        }
        let mut rest: Vec<usize> = items
            .iter()
            .map(|it| it.index)
            .filter(|i| !seen.contains(i) && !r.rejected.contains(i))
            .collect();
        rest.sort_unstable();
        assert_eq!(rest, r.discarded);
    }

    #[test]
    fn one_class_full_length_items_get_one_bin_each() {
        let items: Vec<PackingItem> = (0..7)
            .map(|i| PackingItem { index: i, length: 10, class: DatasetClass::GaddyVocal })
            .collect();
        let cfg = PackingConfig::new(
            10,
            ClassProportions { gaddy_silent: 0.0, gaddy_vocal: 1.0, librispeech: 0.0 },
            vec![DatasetClass::GaddyVocal],
            1,
        )
        .unwrap();
        let r = pack(&items, &cfg).unwrap();
        assert_eq!(r.bins.len(), 7);
        assert!(r.bins.iter().all(|b| b.items.len() == 1));
        assert!(r.discarded.is_empty());
    }

    #[test]
    fn every_bin_holds_a_silent_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items = corpus(&mut rng, [20, 60, 0], 1..=1);
        let cfg = PackingConfig::new(
            10,
            ClassProportions { gaddy_silent: 0.25, gaddy_vocal: 0.75, librispeech: 0.0 },
            vec![DatasetClass::GaddySilent],
            9,
        )
        .unwrap();
        let r = pack(&items, &cfg).unwrap();
        assert!(!r.bins.is_empty());
        check_invariants(&items, &cfg, &r);
    }

    #[test]
    fn missing_required_class_is_a_config_error() {
        let items = vec![PackingItem { index: 0, length: 3, class: DatasetClass::GaddyVocal }];
        let cfg = PackingConfig { max_len: 10, ..PackingConfig::default() };
        assert!(matches!(pack(&items, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn overlong_items_are_rejected_at_ingestion() {
        let items = vec![
            PackingItem { index: 0, length: 3, class: DatasetClass::GaddySilent },
            PackingItem { index: 1, length: 11, class: DatasetClass::GaddyVocal },
            PackingItem { index: 2, length: 4, class: DatasetClass::GaddyVocal },
        ];
        let cfg = PackingConfig { max_len: 10, ..PackingConfig::default() };
        let r = pack(&items, &cfg).unwrap();
        assert_eq!(r.rejected, vec![1]);
        check_invariants(&items, &cfg, &r);
    }

    #[test]
    fn proportion_helpers() {
        let bal = balanced_proportions();
        assert!((0.999..=1.001).contains(&bal.sum()));
        assert!((bal.normalized().unwrap().sum() - 1.0).abs() < 1e-12);
        assert!((default_proportions().sum() - 1.0).abs() < 1e-12);
        let base = PackingConfig::default();
        let swapped = PackingConfig { proportions: bal.normalized().unwrap(), ..base.clone() };
        assert_eq!(swapped.max_len, base.max_len);
        assert_eq!(swapped.required_classes, base.required_classes);
        assert!(ClassProportions { gaddy_silent: 0.5, gaddy_vocal: 0.0, librispeech: 0.0 }.normalized().is_err());
        assert!(ClassProportions { gaddy_silent: -0.5, gaddy_vocal: 1.5, librispeech: 0.0 }.normalized().is_err());
    }

    #[test]
    fn realized_proportions_track_targets() {
        let target = default_proportions().as_array();
        let mut mean = [0f64; 3];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let items = corpus(&mut rng, [112, 388, 500], 50..=400);
            let cfg = PackingConfig::new(6_000, default_proportions(), vec![DatasetClass::GaddySilent], seed).unwrap();
            let r = pack(&items, &cfg).unwrap();
            check_invariants(&items, &cfg, &r);
            let mut counts = [0usize; 3];
            for i in r.packed() {
                counts[items[i].class.index()] += 1;
            }
            let total: usize = counts.iter().sum();
            for c in 0..3 {
                mean[c] += counts[c] as f64 / total as f64 / 20.0;
            }
        }
        for c in 0..3 {
            assert!((mean[c] - target[c]).abs() <= 0.03, "class {c}: {}", mean[c]);
        }
    }

    #[test]
    fn same_seed_same_bins_and_epochs_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items = corpus(&mut rng, [30, 100, 120], 5..=40);
        let cfg = PackingConfig { max_len: 300, seed: 42, ..PackingConfig::default() };
        let a: Vec<PackResult> = epoch_stream(&items, &cfg).take(3).map(Result::unwrap).collect();
        let b: Vec<PackResult> = epoch_stream(&items, &cfg).take(3).map(Result::unwrap).collect();
        assert_eq!(a, b);
        assert_ne!(a[0].bins, a[1].bins);
        let firsts: HashSet<Vec<usize>> = (0..10u64)
            .map(|s| {
                let c = PackingConfig { seed: s, ..cfg.clone() };
                epoch_stream(&items, &c).next().unwrap().unwrap().bins[0].items.clone()
            })
            .collect();
        assert!(firsts.len() >= 9);
    }

    #[test]
    fn epoch_ends_when_the_scarcest_class_runs_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let items = corpus(&mut rng, [10, 100, 2000], 5..=20);
        let cfg = PackingConfig { max_len: 200, seed: 1, ..PackingConfig::default() };
        let r = pack(&items, &cfg).unwrap();
        check_invariants(&items, &cfg, &r);
        let ex = r.exhausted.expect("phase one ended by exhaustion");
        assert!(r.discarded.iter().all(|&i| items[i].class != ex));
        // most LibriSpeech items are left for later epochs
        assert!(r.discarded.iter().filter(|&&i| items[i].class == DatasetClass::LibriSpeech).count() > 1000);
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: PackingConfig = toml::from_str(
            "max_len = 256000\nseed = 3\nrequired_classes = [\"gaddy_silent\"]\n[proportions]\ngaddy_silent = 0.183\ngaddy_vocal = 0.633\nlibrispeech = 0.183\n",
        )
        .unwrap();
        assert_eq!(cfg.max_len, 256_000);
        assert_eq!(cfg.failure_threshold, 50);
        cfg.validate().unwrap();
        let d: PackingConfig = toml::from_str("").unwrap();
        assert_eq!(d, PackingConfig::default());
    }
}
