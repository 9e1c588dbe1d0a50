use super::batch::{LatentBatch, LatentLayout};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Tape, Tensor, Var};
use crate::parallel::{map_indexed_with, Strategy};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

/// `exp(cos(z_i, z_j) / τ)` for every pair of columns.
pub fn pairwise_sim(batch: &LatentBatch, tau: f64) -> Result<Tensor> {
    pairwise_sim_with(batch, tau, Strategy::default())
}

/// [`pairwise_sim`] with an explicit execution strategy (rows are independent).
pub fn pairwise_sim_with(batch: &LatentBatch, tau: f64, strategy: Strategy) -> Result<Tensor> {
    check_tau(tau)?;
    if !batch.z.is_finite() {
        return Err(Error::Numeric("latent batch".into()));
    }
    let l = batch.len();
    let cols: Vec<Vec<f64>> = (0..l).map(|c| batch.z.column_vec(c)).collect();
    let rows = map_indexed_with(strategy, l, |i| {
        (0..l)
            .map(|j| cosine_similarity(&cols[i], &cols[j]).map(|c| (c / tau).exp()))
            .collect::<Result<Vec<f64>>>()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Scaled cosine logits `cos / τ` on the tape.
fn logits(tape: &mut Tape, z: Var, layout: &LatentLayout, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if tape.value(z).cols() != layout.len() {
        return Err(Error::dim("latent columns do not match layout"));
    }
    if !tape.value(z).is_finite() {
        return Err(Error::Numeric("latent batch".into()));
    }
    let cos = tape.cosine_matrix(z)?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// Cross-modal contrastive loss on the tape.
///
/// Every column is a query whose positive is its paired column; all other
/// columns of either modality are distractors.
pub fn crosscon_on_tape(tape: &mut Tape, z: Var, layout: &LatentLayout, tau: f64) -> Result<Var> {
    let l = layout.len();
    let mut entries = Vec::with_capacity(l);
    for i in 0..l {
        let j = layout
            .partner(i)
            .ok_or_else(|| Error::pre(format!("column {i} has no cross-modal partner")))?;
        entries.push((i, j, 1.0));
    }
    let s = logits(tape, z, layout, tau)?;
    let lse = tape.masked_row_logsumexp(s)?;
    let lse_sum = tape.sum(lse);
    let pos = tape.weighted_entries(s, entries)?;
    let total = tape.sub(lse_sum, pos)?;
    Ok(tape.scale(total, 1.0 / l as f64))
}

/// Supervised temporal contrastive loss on the tape.
///
/// Positives of `i` are the other columns with the same class label, across
/// modalities and utterances. Columns without positives add zero but still
/// count in the `1/L` normaliser.
pub fn suptcon_on_tape(tape: &mut Tape, z: Var, layout: &LatentLayout, tau: f64) -> Result<Var> {
    let l = layout.len();
    if let Some(i) = layout.meta().iter().position(|m| m.class_label.is_none()) {
        return Err(Error::pre(format!("column {i} has no class label")));
    }
    let mut entries = Vec::new();
    let mut active = vec![0.0; l];
    for (i, a) in active.iter_mut().enumerate() {
        let pos = layout.positives(i);
        if pos.is_empty() {
            continue;
        }
        *a = 1.0;
        let w = 1.0 / pos.len() as f64;
        entries.extend(pos.into_iter().map(|q| (i, q, w)));
    }
    if entries.is_empty() {
        return Err(Error::pre("no column has a positive"));
    }
    let s = logits(tape, z, layout, tau)?;
    let lse = tape.masked_row_logsumexp(s)?;
    let mask = tape.constant(Tensor::column(active));
    let lse = tape.mul(lse, mask)?;
    let lse_sum = tape.sum(lse);
    let pos = tape.weighted_entries(s, entries)?;
    let total = tape.sub(lse_sum, pos)?;
    Ok(tape.scale(total, 1.0 / l as f64))
}

pub fn crosscon(batch: &LatentBatch, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(batch.z.clone());
    let out = crosscon_on_tape(&mut tape, z, &batch.layout, tau)?;
    tape.value(out).item()
}

pub fn suptcon(batch: &LatentBatch, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(batch.z.clone());
    let out = suptcon_on_tape(&mut tape, z, &batch.layout, tau)?;
    tape.value(out).item()
}
