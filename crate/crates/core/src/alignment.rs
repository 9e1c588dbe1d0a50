//! Latent-space dynamic time warping.
//!
//! A silent utterance's latents `Z1 (F×T1)` are aligned with the latents of its
//! vocalized reading `Z2 (F×T2)`; the vocalized columns and phoneme labels are
//! then resampled onto the silent time base so the contrastive losses can treat
//! silent frames as if they had a simultaneous audio partner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ColumnMeta, LatentBatch, LatentLayout, Modality};
use crate::numerics::Tensor;
use crate::parallel::{map_slice_with, Strategy};

/// `T1×T2` Euclidean distances between columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged distance matrix"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::pre("distances must be finite and nonnegative"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.cols + b]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for a in 0..self.rows {
            for b in 0..self.cols {
                data[b * self.rows + a] = self.get(a, b);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Monotone alignment path from `(0, 0)` to `(T1−1, T2−1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpPath(pub Vec<(usize, usize)>);

impl WarpPath {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Checks boundary, monotonicity and step-set constraints for a `t1×t2` grid.
    pub fn validate(&self, t1: usize, t2: usize) -> Result<()> {
        let p = &self.0;
        if t1 == 0 || t2 == 0 {
            return Err(Error::pre("empty alignment grid"));
        }
        if p.first() != Some(&(0, 0)) || p.last() != Some(&(t1 - 1, t2 - 1)) {
            return Err(Error::contract("path must run from (0,0) to (T1-1,T2-1)"));
        }
        for w in p.windows(2) {
            let (da, db) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!((da, db), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::contract(format!("illegal step {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        WarpPath(self.0.iter().map(|&(a, b)| (b, a)).collect())
    }
}

/// Warped vocalized latents and labels on the silent time base.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedSequence {
    pub z: Tensor,
    pub labels: Vec<u32>,
    /// Column of `Z2` chosen for each silent frame.
    pub source: Vec<usize>,
}

pub fn distance_matrix(z1: &Tensor, z2: &Tensor) -> Result<DistanceMatrix> {
    if z1.rows() != z2.rows() {
        return Err(Error::dim(format!(
            "feature dimension {} vs {}",
            z1.rows(),
            z2.rows()
        )));
    }
    let (f, t1, t2) = (z1.rows(), z1.cols(), z2.cols());
    let mut data = vec![0.0; t1 * t2];
    for a in 0..t1 {
        for b in 0..t2 {
            let mut s = 0.0;
            for r in 0..f {
                let d = z1.get(r, a) - z2.get(r, b);
                s += d * d;
            }
            data[a * t2 + b] = s.sqrt();
        }
    }
    if data.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("distance matrix".into()));
    }
    Ok(DistanceMatrix {
        rows: t1,
        cols: t2,
        data,
    })
}

/// Minimum-cost monotone path under steps `(1,0)`, `(0,1)`, `(1,1)`.
///
/// Ties prefer the diagonal predecessor, then `(a, b−1)`, then `(a−1, b)`.
pub fn dtw_align(d: &DistanceMatrix) -> Result<(WarpPath, f64)> {
    let (t1, t2) = (d.rows(), d.cols());
    if t1 == 0 || t2 == 0 {
        return Err(Error::pre("DTW needs a nonempty distance matrix"));
    }
    let inf = f64::INFINITY;
    let mut acc = vec![inf; t1 * t2];
    let at = |a: usize, b: usize| a * t2 + b;
    for a in 0..t1 {
        for b in 0..t2 {
            let best = if a == 0 && b == 0 {
                0.0
            } else {
                let diag = if a > 0 && b > 0 { acc[at(a - 1, b - 1)] } else { inf };
                let left = if b > 0 { acc[at(a, b - 1)] } else { inf };
                let up = if a > 0 { acc[at(a - 1, b)] } else { inf };
                diag.min(left).min(up)
            };
            acc[at(a, b)] = best + d.get(a, b);
        }
    }
    let mut path = vec![(t1 - 1, t2 - 1)];
    let (mut a, mut b) = (t1 - 1, t2 - 1);
    while (a, b) != (0, 0) {
        let diag = if a > 0 && b > 0 { acc[at(a - 1, b - 1)] } else { inf };
        let left = if b > 0 { acc[at(a, b - 1)] } else { inf };
        let up = if a > 0 { acc[at(a - 1, b)] } else { inf };
        if diag <= left && diag <= up {
            a -= 1;
            b -= 1;
        } else if left <= up {
            b -= 1;
        } else {
            a -= 1;
        }
        path.push((a, b));
    }
    path.reverse();
    Ok((WarpPath(path), acc[at(t1 - 1, t2 - 1)]))
}

/// Resamples `Z2`/`P2` onto `t1` frames. When several vocal frames map to one
/// silent frame, the last one on the path wins.
pub fn warp(z2: &Tensor, p2: &[u32], path: &WarpPath, t1: usize) -> Result<WarpedSequence> {
    let t2 = z2.cols();
    if p2.len() != t2 {
        return Err(Error::dim(format!("{} labels for {t2} frames", p2.len())));
    }
    path.validate(t1, t2)?;
    let mut source = vec![0usize; t1];
    for &(a, b) in path.pairs() {
        source[a] = b;
    }
    Ok(WarpedSequence {
        z: z2.select_columns(&source),
        labels: source.iter().map(|&b| p2[b]).collect(),
        source,
    })
}

/// Which vocalized latent drives the DTW distance computation.
///
/// Positives are always the warped vocal audio columns; since vocal EMG and
/// audio share one time base, either latent yields a valid path for them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSource {
    #[default]
    VocalAudio,
    VocalEmg,
}

/// Result of aligning one silent utterance against its vocalized reading.
#[derive(Clone, Debug, PartialEq)]
pub struct SilentAlignment {
    pub path: WarpPath,
    pub cost: f64,
    /// Vocal frame chosen for each silent frame.
    pub source: Vec<usize>,
    /// Warped phoneme label per silent frame.
    pub labels: Vec<u32>,
}

/// DTW + warp for a silent/vocal pair. `align_on` is the vocal latent used for
/// distances (audio or vocal EMG, same length as the labels).
pub fn align_silent(silent: &Tensor, align_on: &Tensor, vocal_labels: &[u32]) -> Result<SilentAlignment> {
    let d = distance_matrix(silent, align_on)?;
    let (path, cost) = dtw_align(&d)?;
    let warped = warp(align_on, vocal_labels, &path, silent.cols())?;
    Ok(SilentAlignment {
        path,
        cost,
        source: warped.source,
        labels: warped.labels,
    })
}

/// Layout for `[silent EMG columns | warped audio columns]` of one silent
/// utterance: frame `t` of each half is paired, and both carry the warped label.
pub fn silent_fragment_layout(utterance: usize, labels: &[u32]) -> Result<LatentLayout> {
    let t1 = labels.len();
    let mut layout = LatentLayout::new();
    for modality in [Modality::Emg, Modality::Audio] {
        for (t, &l) in labels.iter().enumerate() {
            layout.push(ColumnMeta {
                modality,
                utterance,
                timestep: t,
                class_label: Some(l),
            });
        }
    }
    for t in 0..t1 {
        layout.pair(t, t1 + t)?;
    }
    Ok(layout)
}

/// Builds the latent-batch fragment that lets the contrastive losses see a
/// silent utterance: silent EMG columns paired with warped vocal audio columns,
/// all labelled with the warped phonemes. The path is a constant of the
/// forward pass; callers recompute it each step.
pub fn silent_pairing(
    utterance: usize,
    silent_latents: &Tensor,
    vocal_audio_latents: &Tensor,
    vocal_phonemes: &[u32],
    vocal_emg_latents: Option<&Tensor>,
    source: AlignmentSource,
) -> Result<(LatentBatch, SilentAlignment)> {
    let align_on = match (source, vocal_emg_latents) {
        (AlignmentSource::VocalAudio, _) => vocal_audio_latents,
        (AlignmentSource::VocalEmg, Some(e)) => e,
        (AlignmentSource::VocalEmg, None) => {
            return Err(Error::config("vocal EMG alignment requested without vocal EMG latents"))
        }
    };
    if align_on.cols() != vocal_audio_latents.cols() {
        return Err(Error::dim("vocal EMG and audio latents must share a time base"));
    }
    let al = align_silent(silent_latents, align_on, vocal_phonemes)?;
    let warped_audio = vocal_audio_latents.select_columns(&al.source);
    let t1 = silent_latents.cols();
    let mut cols: Vec<Vec<f64>> = (0..t1).map(|c| silent_latents.column_vec(c)).collect();
    cols.extend((0..t1).map(|c| warped_audio.column_vec(c)));
    let layout = silent_fragment_layout(utterance, &al.labels)?;
    Ok((LatentBatch::new(Tensor::from_columns(&cols)?, layout)?, al))
}

/// Aligns many `(silent, vocal)` pairs; order of results follows the input.
pub fn align_batch(
    pairs: &[(Tensor, Tensor)],
    strategy: Strategy,
) -> Vec<Result<(WarpPath, f64)>> {
    map_slice_with(strategy, pairs, |(a, b)| {
        distance_matrix(a, b).and_then(|d| dtw_align(&d))
    })
}
