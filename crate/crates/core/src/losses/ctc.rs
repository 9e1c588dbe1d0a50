use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax of a `T×K` matrix.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let (t, k) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(t, k);
    for r in 0..t {
        let row = logits.row_slice(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (c, x) in row.iter().enumerate() {
            out.set(r, c, x - lse);
        }
    }
    out
}

/// Minimum number of frames a label needs: one per symbol plus a blank
/// between each pair of equal neighbours.
pub fn required_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(logits: &Tensor, label: &[usize], blank: usize) -> Result<()> {
    let (t, k) = (logits.rows(), logits.cols());
    if t == 0 {
        return Err(Error::pre("CTC needs at least one frame"));
    }
    if blank >= k {
        return Err(Error::pre(format!("blank {blank} outside {k} classes")));
    }
    if let Some(&s) = label.iter().find(|&&s| s >= k || s == blank) {
        return Err(Error::pre(format!("label symbol {s} is blank or out of range")));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("CTC logits".into()));
    }
    let required = required_frames(label);
    if t < required {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            required,
            frames: t,
        });
    }
    Ok(())
}

/// CTC negative log-likelihood and its gradient with respect to the logits.
///
/// `logits` is `T×K` (frames by classes); a softmax is applied per frame.
/// Computed with the forward-backward recursions in log space.
pub fn ctc_loss_and_grad(logits: &Tensor, label: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    validate(logits, label, blank)?;
    let (t_len, k) = (logits.rows(), logits.cols());
    let lp = log_softmax_rows(logits);
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(label.iter().flat_map(|&s| [s, blank]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            if a != ninf {
                alpha[t][s] = a + lp.get(t, ext[s]);
            }
        }
    }
    let last = &alpha[t_len - 1];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::Numeric("CTC total probability".into()));
    }

    // beta[t][s]: log-probability of completing the label from state s at frame t,
    // not counting frame t's emission.
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lp.get(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lp.get(t + 1, ext[s + 2]));
            }
            beta[t][s] = b;
        }
    }

    let mut grad = Tensor::zeros(t_len, k);
    for t in 0..t_len {
        let mut occ = vec![ninf; k];
        for s in 0..s_len {
            let g = alpha[t][s] + beta[t][s];
            occ[ext[s]] = log_add(occ[ext[s]], g);
        }
        for c in 0..k {
            let post = if occ[c] == ninf { 0.0 } else { (occ[c] - log_p).exp() };
            grad.set(t, c, lp.get(t, c).exp() - post);
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(logits: &Tensor, label: &[usize], blank: usize) -> Result<f64> {
    ctc_loss_and_grad(logits, label, blank).map(|(l, _)| l)
}

/// CTC loss recorded on the tape; `logits` is a `T×K` variable.
pub fn ctc_on_tape(tape: &mut Tape, logits: Var, label: &[usize], blank: usize) -> Result<Var> {
    let (loss, grad) = ctc_loss_and_grad(tape.value(logits), label, blank)?;
    tape.scalar_with_grad(logits, loss, grad)
}
