//! Contrastive (cross-modal and supervised temporal) and CTC losses, and their
//! weighted combination.

mod batch;
mod contrastive;
pub(crate) mod ctc;

pub use batch::{ColumnMeta, LatentBatch, LatentLayout, Modality};
pub use contrastive::{crosscon, crosscon_on_tape, pairwise_sim, pairwise_sim_with, suptcon, suptcon_on_tape};
pub use ctc::{ctc_loss, ctc_loss_and_grad, ctc_on_tape, log_softmax_rows, required_frames};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Per-term weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_emg: f64,
    pub lambda_audio: f64,
    pub lambda_cross: f64,
    pub lambda_sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::CROSSCON_SUPTCON
    }
}

impl LossWeights {
    pub const AUDIO: Self = Self::new(0.0, 1.0, 0.0, 0.0);
    pub const EMG: Self = Self::new(1.0, 0.0, 0.0, 0.0);
    pub const AUDIO_EMG: Self = Self::new(1.0, 1.0, 0.0, 0.0);
    pub const SUPTCON: Self = Self::new(1.0, 1.0, 0.0, 0.1);
    pub const CROSSCON: Self = Self::new(1.0, 1.0, 1.0, 0.0);
    pub const CROSSCON_SUPTCON: Self = Self::new(1.0, 1.0, 1.0, 0.1);

    pub const fn new(lambda_emg: f64, lambda_audio: f64, lambda_cross: f64, lambda_sup: f64) -> Self {
        Self {
            lambda_emg,
            lambda_audio,
            lambda_cross,
            lambda_sup,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_emg, self.lambda_audio, self.lambda_cross, self.lambda_sup];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }

    /// Named presets: `audio`, `emg`, `audio_emg`, `suptcon`, `crosscon`, `crosscon_suptcon`.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "audio" => Self::AUDIO,
            "emg" => Self::EMG,
            "audio_emg" => Self::AUDIO_EMG,
            "suptcon" => Self::SUPTCON,
            "crosscon" => Self::CROSSCON,
            "crosscon_suptcon" => Self::CROSSCON_SUPTCON,
            _ => return None,
        })
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Emg => self.lambda_emg,
            LossTerm::Audio => self.lambda_audio,
            LossTerm::Cross => self.lambda_cross,
            LossTerm::Sup => self.lambda_sup,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Emg,
    Audio,
    Cross,
    Sup,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Emg, LossTerm::Audio, LossTerm::Cross, LossTerm::Sup];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Emg => "emg_ctc",
            LossTerm::Audio => "audio_ctc",
            LossTerm::Cross => "crosscon",
            LossTerm::Sup => "suptcon",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature of the cross-modal term.
    pub tau: f64,
    /// Temperature of the supervised temporal term.
    pub sup_tau: f64,
    pub ctc_blank_index: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            sup_tau: 0.1,
            ctc_blank_index: 0,
        }
    }
}

/// Weighted sum of loss terms.
///
/// `term` is only called for terms with a nonzero weight.
pub fn mona_loss<F>(w: &LossWeights, mut term: F) -> Result<f64>
where
    F: FnMut(LossTerm) -> Result<f64>,
{
    let mut total = 0.0;
    for t in LossTerm::ALL {
        let lambda = w.weight(t);
        if lambda == 0.0 {
            continue;
        }
        let v = term(t)?;
        if !v.is_finite() {
            return Err(Error::Numeric(t.name().into()));
        }
        total += lambda * v;
    }
    Ok(total)
}

/// Tape version of [`mona_loss`]. Terms with zero weight may be `None`.
pub fn mona_loss_on_tape(tape: &mut Tape, w: &LossWeights, terms: [Option<Var>; 4]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (t, v) in LossTerm::ALL.into_iter().zip(terms) {
        let lambda = w.weight(t);
        if lambda == 0.0 {
            continue;
        }
        let Some(v) = v else { continue };
        let scaled = tape.scale(v, lambda);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{eval_scalar, finite_difference_gradient, grad, max_relative_error, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ---- independent oracles (direct summation / enumeration) ----

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb + 1e-8)
    }

    fn oracle_crosscon(cols: &[Vec<f64>], partner: &[usize], tau: f64) -> f64 {
        let l = cols.len();
        let sim = |i: usize, j: usize| (cos(&cols[i], &cols[j]) / tau).exp();
        (0..l)
            .map(|i| {
                let den: f64 = (0..l).filter(|&j| j != i).map(|j| sim(i, j)).sum();
                -(sim(i, partner[i]) / den).ln()
            })
            .sum::<f64>()
            / l as f64
    }

    fn oracle_suptcon(cols: &[Vec<f64>], class: &[u32], tau: f64) -> f64 {
        let l = cols.len();
        let sim = |i: usize, j: usize| (cos(&cols[i], &cols[j]) / tau).exp();
        let mut tot = 0.0;
        for i in 0..l {
            let pos: Vec<usize> = (0..l).filter(|&q| q != i && class[q] == class[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let den: f64 = (0..l).filter(|&j| j != i).map(|j| sim(i, j)).sum();
            tot -= pos.iter().map(|&q| (sim(i, q) / den).ln()).sum::<f64>() / pos.len() as f64;
        }
        tot / l as f64
    }

    /// Sums the probability of every frame path that collapses to `label`.
    fn oracle_ctc(logits: &Tensor, label: &[usize], blank: usize) -> f64 {
        let (t, k) = (logits.rows(), logits.cols());
        let lp = log_softmax_rows(logits);
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &s in &path {
                if Some(s) != prev && s != blank {
                    collapsed.push(s);
                }
                prev = Some(s);
            }
            if collapsed == label {
                total += path.iter().enumerate().map(|(f, &s)| lp.get(f, s)).sum::<f64>().exp();
            }
            let mut pos = 0;
            loop {
                if pos == t {
                    return -total.ln();
                }
                path[pos] += 1;
                if path[pos] < k {
                    break;
                }
                path[pos] = 0;
                pos += 1;
            }
        }
    }

    fn layout_from(meta: &[(Modality, usize, usize, Option<u32>)], pairs: &[(usize, usize)]) -> LatentLayout {
        let mut layout = LatentLayout::new();
        for &(modality, utterance, timestep, class_label) in meta {
            layout.push(ColumnMeta { modality, utterance, timestep, class_label });
        }
        for &(a, b) in pairs {
            layout.pair(a, b).unwrap();
        }
        layout
    }

    fn random_paired(rng: &mut ChaCha8Rng, utts: usize, t: usize, f: usize, classes: u32) -> LatentBatch {
        let parts: Vec<LatentBatch> = (0..utts)
            .map(|u| {
                let e = Tensor::matrix(f, t, (0..f * t).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
                let a = Tensor::matrix(f, t, (0..f * t).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
                let labels: Vec<u32> = (0..t).map(|_| rng.gen_range(0..classes)).collect();
                LatentBatch::paired_utterance(u, &e, &a, Some(&labels)).unwrap()
            })
            .collect();
        LatentBatch::concat(&parts).unwrap()
    }

    fn columns(b: &LatentBatch) -> Vec<Vec<f64>> {
        (0..b.len()).map(|c| b.z.column_vec(c)).collect()
    }

    // ---- pairwise_sim ----

    #[test]
    fn pairwise_sim_diagonal_and_orthogonal() {
        let z = Tensor::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let layout = layout_from(
            &[(Modality::Emg, 0, 0, None), (Modality::Audio, 0, 0, None)],
            &[(0, 1)],
        );
        let s = pairwise_sim(&LatentBatch::new(z, layout).unwrap(), 0.1).unwrap();
        // ε in the cosine shifts exp(1/τ) by a relative 1e-7
        assert!((s.get(0, 0) / 22026.465_794_806_718 - 1.0).abs() < 1e-6);
        assert_eq!(s.get(0, 1), 1.0);
    }

    #[test]
    fn pairwise_sim_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_paired(&mut rng, 1, 2, 3, 2);
        let s = pairwise_sim(&b, 0.1).unwrap();
        let cols = columns(&b);
        for i in 0..b.len() {
            for j in 0..b.len() {
                let want = (cos(&cols[i], &cols[j]) / 0.1).exp();
                assert!((s.get(i, j) - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }

    #[test]
    fn pairwise_sim_rejects_non_finite() {
        let z = Tensor::from_columns(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]]).unwrap();
        let layout = layout_from(&[(Modality::Emg, 0, 0, None), (Modality::Audio, 0, 0, None)], &[(0, 1)]);
        let b = LatentBatch::new(z, layout).unwrap();
        assert!(matches!(pairwise_sim(&b, 0.1), Err(Error::Numeric(_))));
    }

    // ---- crosscon ----

    #[test]
    fn crosscon_single_pair_is_exactly_zero() {
        let e = Tensor::column(vec![0.3, -1.4, 2.0]);
        let a = Tensor::column(vec![-0.7, 0.1, 0.5]);
        let b = LatentBatch::paired_utterance(0, &e, &a, None).unwrap();
        assert_eq!(crosscon(&b, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn crosscon_two_utterances_fixture() {
        // frozen from a standalone numpy direct summation
        let p0 = LatentBatch::paired_utterance(0, &Tensor::column(vec![1.0, 0.0]), &Tensor::column(vec![0.8, 0.6]), None).unwrap();
        let p1 = LatentBatch::paired_utterance(1, &Tensor::column(vec![0.0, 1.0]), &Tensor::column(vec![-0.2, 1.0]), None).unwrap();
        let b = LatentBatch::concat(&[p0, p1]).unwrap();
        let v = crosscon(&b, 0.1).unwrap();
        assert!((v - 0.043_834_772_505_711_696).abs() < 1e-12, "{v}");
        let cols = columns(&b);
        assert!((v - oracle_crosscon(&cols, &[1, 0, 3, 2], 0.1)).abs() < 1e-12);
    }

    #[test]
    fn crosscon_matches_direct_summation_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = random_paired(&mut rng, 2, 3, 4, 3);
            let partner: Vec<usize> = (0..b.len()).map(|i| b.layout.partner(i).unwrap()).collect();
            let want = oracle_crosscon(&columns(&b), &partner, 0.1);
            assert!((crosscon(&b, 0.1).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn crosscon_requires_partners() {
        let z = Tensor::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let layout = layout_from(
            &[(Modality::Emg, 0, 0, None), (Modality::Audio, 0, 0, None), (Modality::Audio, 1, 0, None)],
            &[(0, 1)],
        );
        let b = LatentBatch::new(z, layout).unwrap();
        assert!(matches!(crosscon(&b, 0.1), Err(Error::Precondition(_))));
        assert!(matches!(crosscon(&b, 0.0), Err(Error::Config(_)) | Err(Error::Precondition(_))));
    }

    #[test]
    fn crosscon_is_symmetric_under_modality_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_paired(&mut rng, 2, 3, 3, 2);
        let swapped = LatentBatch::new(b.z.clone(), b.layout.swap_modalities()).unwrap();
        assert_eq!(crosscon(&b, 0.1).unwrap(), crosscon(&swapped, 0.1).unwrap());
    }

    #[test]
    fn contrastive_losses_ignore_column_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let b = random_paired(&mut rng, 2, 3, 3, 2);
            let col = rng.gen_range(0..b.len());
            let factor = rng.gen_range(0.1..10.0);
            let mut z = b.z.clone();
            for r in 0..z.rows() {
                let v = z.get(r, col);
                z.set(r, col, v * factor);
            }
            let scaled = LatentBatch::new(z, b.layout.clone()).unwrap();
            assert!((crosscon(&b, 0.1).unwrap() - crosscon(&scaled, 0.1).unwrap()).abs() < 1e-6);
            assert!((suptcon(&b, 0.1).unwrap() - suptcon(&scaled, 0.1).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn crosscon_sharpens_as_temperature_drops_on_separable_batch() {
        // emg == audio per frame; frames mutually orthogonal across (u, t)
        let f = 4;
        let mut parts = Vec::new();
        for u in 0..2 {
            let mut e = Tensor::zeros(f, 2);
            for t in 0..2 {
                e.set(u * 2 + t, t, 1.0 + u as f64);
            }
            parts.push(LatentBatch::paired_utterance(u, &e, &e, None).unwrap());
        }
        let b = LatentBatch::concat(&parts).unwrap();
        let vals: Vec<f64> = [1.0, 0.5, 0.1].iter().map(|&t| crosscon(&b, t).unwrap()).collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    // ---- suptcon ----

    #[test]
    fn suptcon_identical_columns_is_log_l_minus_one() {
        let col = vec![0.4, -1.1, 0.9];
        let z = Tensor::from_columns(&vec![col; 4]).unwrap();
        let layout = layout_from(
            &[
                (Modality::Emg, 0, 0, Some(2)),
                (Modality::Emg, 0, 1, Some(2)),
                (Modality::Audio, 1, 0, Some(2)),
                (Modality::Audio, 1, 1, Some(2)),
            ],
            &[],
        );
        let v = suptcon(&LatentBatch::new(z, layout).unwrap(), 0.1).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn suptcon_three_column_fixture() {
        // frozen from a standalone numpy direct summation; column 2 has no positive
        let cols = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![-1.0, 0.5]];
        let layout = layout_from(
            &[(Modality::Emg, 0, 0, Some(0)), (Modality::Audio, 1, 0, Some(0)), (Modality::Emg, 0, 1, Some(1))],
            &[],
        );
        let b = LatentBatch::new(Tensor::from_columns(&cols).unwrap(), layout).unwrap();
        let v1 = suptcon(&b, 0.1).unwrap();
        let v5 = suptcon(&b, 0.5).unwrap();
        assert!((v1 - 0.000_138_188_309_409_653_77).abs() < 1e-15, "{v1}");
        assert!((v5 - 0.080_079_669_019_568_21).abs() < 1e-12, "{v5}");
        assert!((v5 - oracle_suptcon(&cols, &[0, 0, 1], 0.5)).abs() < 1e-12);
    }

    #[test]
    fn suptcon_matches_direct_summation_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let b = random_paired(&mut rng, 2, 3, 3, 3);
            let class: Vec<u32> = b.layout.meta().iter().map(|m| m.class_label.unwrap()).collect();
            let want = oracle_suptcon(&columns(&b), &class, 0.1);
            assert!((suptcon(&b, 0.1).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn suptcon_requires_labels_and_some_positive() {
        let z = Tensor::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let unlabeled = layout_from(&[(Modality::Emg, 0, 0, Some(1)), (Modality::Audio, 0, 0, None)], &[]);
        assert!(matches!(
            suptcon(&LatentBatch::new(z.clone(), unlabeled).unwrap(), 0.1),
            Err(Error::Precondition(_))
        ));
        let distinct = layout_from(&[(Modality::Emg, 0, 0, Some(1)), (Modality::Audio, 0, 0, Some(2))], &[]);
        assert!(suptcon(&LatentBatch::new(z, distinct).unwrap(), 0.1).is_err());
    }

    // ---- ctc ----

    #[test]
    fn ctc_uniform_single_frame_is_log_k() {
        let logits = Tensor::zeros(1, 5);
        assert!((ctc_loss(&logits, &[3], 0).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_matches_enumeration() {
        let logits = Tensor::from_rows(&[vec![0.2, 1.0, -0.5], vec![0.7, -0.3, 0.4]]).unwrap();
        let lp = log_softmax_rows(&logits);
        let p = |t: usize, k: usize| lp.get(t, k).exp();
        let want = -(p(0, 1) * p(1, 1) + p(0, 0) * p(1, 1) + p(0, 1) * p(1, 0)).ln();
        let got = ctc_loss(&logits, &[1], 0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - oracle_ctc(&logits, &[1], 0)).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_label_is_all_blank_path() {
        let logits = Tensor::from_rows(&[vec![0.2, 1.0], vec![0.7, -0.3], vec![0.0, 0.1]]).unwrap();
        let lp = log_softmax_rows(&logits);
        let want: f64 = -(0..3).map(|t| lp.get(t, 0)).sum::<f64>();
        assert!((ctc_loss(&logits, &[], 0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_label_is_an_error() {
        let logits = Tensor::zeros(2, 3);
        assert!(matches!(
            ctc_loss(&logits, &[1, 1], 0),
            Err(Error::InfeasibleLabel { required: 3, frames: 2, .. })
        ));
        assert!(ctc_loss(&logits, &[0], 0).is_err());
        assert!(ctc_loss(&logits, &[3], 0).is_err());
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let logits = Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let label = [1, 3, 3];
            let (_, g) = ctc_loss_and_grad(&logits, &label, 0).unwrap();
            let fd = finite_difference_gradient(|x| ctc_loss(x, &label, 0), &logits, 1e-5).unwrap();
            assert!(max_relative_error(&g, &fd, 1e-6) <= 1e-4);
        }
    }

    #[test]
    fn ctc_matches_enumeration_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 1..=4 {
            for k in 2..=3 {
                let logits = Tensor::matrix(t, k, (0..t * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
                for label in [vec![], vec![1], vec![1, 1], vec![k - 1, 1]] {
                    match ctc_loss(&logits, &label, 0) {
                        Ok(v) => assert!((v - oracle_ctc(&logits, &label, 0)).abs() < 1e-10),
                        Err(Error::InfeasibleLabel { .. }) => assert!(t < required_frames(&label)),
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    // ---- gradients of contrastive terms ----

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..3 {
            let b = random_paired(&mut rng, 2, 2, 3, 2);
            let layout = b.layout.clone();
            for sup in [false, true] {
                let f = |t: &mut Tape, v: &[Var]| {
                    if sup {
                        suptcon_on_tape(t, v[0], &layout, 0.1)
                    } else {
                        crosscon_on_tape(t, v[0], &layout, 0.1)
                    }
                };
                let g = grad(f, std::slice::from_ref(&b.z)).unwrap();
                let fd = finite_difference_gradient(|x| eval_scalar(&f, std::slice::from_ref(x)), &b.z, 1e-5).unwrap();
                assert!(max_relative_error(&g[0], &fd, 1e-6) <= 1e-4);
            }
        }
    }

    // ---- combination ----

    #[test]
    fn table_weight_rows() {
        assert_eq!(LossWeights::CROSSCON, LossWeights { lambda_audio: 1.0, lambda_emg: 1.0, lambda_sup: 0.0, lambda_cross: 1.0 });
        assert_eq!(LossWeights::CROSSCON_SUPTCON, LossWeights { lambda_audio: 1.0, lambda_emg: 1.0, lambda_sup: 0.1, lambda_cross: 1.0 });
        assert_eq!(LossWeights::EMG, LossWeights { lambda_audio: 0.0, lambda_emg: 1.0, lambda_sup: 0.0, lambda_cross: 0.0 });
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn mona_loss_sums_and_short_circuits() {
        let all_one = mona_loss(&LossWeights::new(1.0, 1.0, 1.0, 1.0), |_| Ok(1.0)).unwrap();
        assert_eq!(all_one, 4.0);
        let mut called = Vec::new();
        let v = mona_loss(&LossWeights::CROSSCON, |t| {
            called.push(t);
            Ok(2.0)
        })
        .unwrap();
        assert_eq!(v, 6.0);
        assert!(!called.contains(&LossTerm::Sup));
        let nan = mona_loss(&LossWeights::EMG, |_| Ok(f64::NAN));
        assert!(matches!(nan, Err(Error::Numeric(_))));
    }
}
