use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Emg,
    Audio,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Emg => Modality::Audio,
            Modality::Audio => Modality::Emg,
        }
    }
}

/// Annotation carried by one column of a latent batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnMeta {
    pub modality: Modality,
    pub utterance: usize,
    /// 10 ms frame index within the utterance.
    pub timestep: usize,
    /// Phoneme (or silence) class; `None` when unlabelled.
    pub class_label: Option<u32>,
}

/// Column annotations and the cross-modal pairing, without the embedding values.
///
/// Kept separate from the values so the same layout can index a tape variable
/// during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentLayout {
    meta: Vec<ColumnMeta>,
    partner: Vec<Option<usize>>,
}

impl LatentLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a column and returns its index.
    pub fn push(&mut self, meta: ColumnMeta) -> usize {
        self.meta.push(meta);
        self.partner.push(None);
        self.meta.len() - 1
    }

    /// Links two columns as a cross-modal positive pair.
    pub fn pair(&mut self, a: usize, b: usize) -> Result<()> {
        let (ma, mb) = (self.meta.get(a), self.meta.get(b));
        let (Some(ma), Some(mb)) = (ma, mb) else {
            return Err(Error::dim(format!("pair ({a},{b}) out of range")));
        };
        if a == b || ma.modality == mb.modality {
            return Err(Error::contract("paired columns must differ in modality"));
        }
        if (ma.utterance, ma.timestep) != (mb.utterance, mb.timestep) {
            return Err(Error::contract("paired columns must share utterance and timestep"));
        }
        if self.partner[a].is_some() || self.partner[b].is_some() {
            return Err(Error::contract("column already paired"));
        }
        self.partner[a] = Some(b);
        self.partner[b] = Some(a);
        Ok(())
    }

    /// Concatenates another layout after this one, offsetting its indices.
    pub fn extend(&mut self, other: &LatentLayout) {
        let off = self.meta.len();
        self.meta.extend_from_slice(&other.meta);
        self.partner
            .extend(other.partner.iter().map(|p| p.map(|j| j + off)));
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[ColumnMeta] {
        &self.meta
    }

    pub fn partner(&self, i: usize) -> Option<usize> {
        self.partner[i]
    }

    pub fn all_paired(&self) -> bool {
        self.partner.iter().all(Option::is_some)
    }

    /// Swaps every column's modality tag; pairing is unchanged.
    pub fn swap_modalities(&self) -> Self {
        let mut out = self.clone();
        for m in &mut out.meta {
            m.modality = m.modality.other();
        }
        out
    }

    /// Columns sharing `i`'s class label, excluding `i`; empty if unlabelled.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        match self.meta[i].class_label {
            None => Vec::new(),
            Some(c) => (0..self.meta.len())
                .filter(|&q| q != i && self.meta[q].class_label == Some(c))
                .collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        for (i, p) in self.partner.iter().enumerate() {
            if let Some(j) = *p {
                if self.partner.get(j).copied().flatten() != Some(i) {
                    return Err(Error::contract(format!("pairing is not an involution at {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Embedding matrix `Z (F×L)` plus its column layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub layout: LatentLayout,
}

impl LatentBatch {
    pub fn new(z: Tensor, layout: LatentLayout) -> Result<Self> {
        if z.cols() != layout.len() {
            return Err(Error::dim(format!(
                "{} columns but {} annotations",
                z.cols(),
                layout.len()
            )));
        }
        layout.check()?;
        Ok(Self { z, layout })
    }

    /// One utterance of `T` paired frames: EMG columns first, then audio.
    pub fn paired_utterance(
        utterance: usize,
        emg: &Tensor,
        audio: &Tensor,
        labels: Option<&[u32]>,
    ) -> Result<Self> {
        if emg.rows() != audio.rows() || emg.cols() != audio.cols() {
            return Err(Error::dim("paired modalities must have equal shape"));
        }
        let t = emg.cols();
        let mut layout = LatentLayout::new();
        for modality in [Modality::Emg, Modality::Audio] {
            for step in 0..t {
                layout.push(ColumnMeta {
                    modality,
                    utterance,
                    timestep: step,
                    class_label: labels.map(|l| l[step]),
                });
            }
        }
        for step in 0..t {
            layout.pair(step, t + step)?;
        }
        let mut cols: Vec<Vec<f64>> = (0..t).map(|c| emg.column_vec(c)).collect();
        cols.extend((0..t).map(|c| audio.column_vec(c)));
        Self::new(Tensor::from_columns(&cols)?, layout)
    }

    /// Concatenates batches column-wise.
    pub fn concat(parts: &[LatentBatch]) -> Result<Self> {
        let mut layout = LatentLayout::new();
        let mut cols = Vec::new();
        for p in parts {
            layout.extend(&p.layout);
            cols.extend((0..p.z.cols()).map(|c| p.z.column_vec(c)));
        }
        Self::new(Tensor::from_columns(&cols)?, layout)
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }
}
