//! Dense tensors, a reverse-mode tape, and a central-difference gradient check.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use crate::error::{Error, Result};

/// Added to the norm product so cosine stays finite at the zero vector.
pub const COSINE_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `a·b / (‖a‖‖b‖ + ε)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::pre("cosine of empty vectors"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb + COSINE_EPS))
}

/// GeLU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_scalar_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Reverse-mode gradients of a scalar-valued `f` with respect to every input.
///
/// `f` receives the inputs as trainable leaves on a fresh tape.
pub fn grad<F>(f: F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(&tape, v)).collect())
}

/// Evaluates a tape-built scalar function without recording gradients.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::pre("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Max over coordinates of `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero coordinates from dominating through rounding noise.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn check<F>(f: F, inputs: &[Tensor])
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let analytic = grad(&f, inputs).unwrap();
        for (k, a) in analytic.iter().enumerate() {
            let numeric = finite_difference_gradient(
                |x| {
                    let mut ins = inputs.to_vec();
                    ins[k] = x.clone();
                    eval_scalar(&f, &ins)
                },
                &inputs[k],
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(a, &numeric, 1e-6);
            assert!(err <= 1e-4, "input {k}: rel err {err}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0 / (1.0 + 1e-8));
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-8);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn gelu_limits() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        let t = gelu(&Tensor::column(vec![0.0, 10.0, -10.0]));
        assert_eq!(t.shape(), &[3, 1]);
    }

    #[test]
    fn gelu_close_to_exact_erf_form() {
        // exact: x Φ(x); tanh form differs by well under 1e-3
        for i in -40..=40 {
            let x = i as f64 / 10.0;
            let exact = 0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
            assert!((gelu_scalar(x) - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Tensor::column(vec![1.0, 2.0]);
        let g = grad(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_cosine_at_maximum_vanishes() {
        // residual gradient is ε·c/‖c‖⁴, below 1e-10 once ‖c‖ ≳ 5
        let c = Tensor::column(vec![3.0, -12.0, 7.0]);
        let g = grad(
            |t, v| {
                let cst = t.constant(c.clone());
                t.cosine(v[0], cst)
            },
            std::slice::from_ref(&c),
        )
        .unwrap();
        assert!(g[0].data().iter().all(|x| x.abs() < 1e-10), "{:?}", g[0]);
    }

    #[test]
    fn grad_rejects_non_scalar_output() {
        let x = Tensor::column(vec![1.0, 2.0]);
        let r = grad(|_, v| Ok(v[0]), &[x]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|x| Ok(x.data()[0].powi(2)), &Tensor::column(vec![3.0]), 1e-5)
            .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        let g = finite_difference_gradient(|x| Ok(x.data()[0].exp()), &Tensor::column(vec![0.0]), 1e-5)
            .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!(finite_difference_gradient(|_| Ok(0.0), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let w1 = random(&mut rng, 4, 3);
            let w2 = random(&mut rng, 4, 4);
            let w3 = random(&mut rng, 2, 4);
            let x = random(&mut rng, 3, 5);
            check(
                |t, v| {
                    let h = t.matmul(v[0], v[3])?;
                    let h = t.gelu(h);
                    let h = t.matmul(v[1], h)?;
                    let h = t.gelu(h);
                    let h = t.matmul(v[2], h)?;
                    let sq = t.mul(h, h)?;
                    Ok(t.sum(sq))
                },
                &[w1, w2, w3, x],
            );
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let bias = random(&mut rng, 3, 1);
        let w = random(&mut rng, 3, 4);
        let weights = |t: &mut Tape, x: Var| -> Result<Var> {
            let c = t.constant(w.clone());
            let p = t.mul(x, c)?;
            Ok(t.sum(p))
        };
        check(|t, v| { let y = t.add(v[0], v[1])?; weights(t, y) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.sub(v[0], v[1])?; weights(t, y) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.mul(v[0], v[1])?; weights(t, y) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.add_col_bias(v[0], v[1])?; let y = t.gelu(y); weights(t, y) }, &[a.clone(), bias.clone()]);
        check(|t, v| { let y = t.scale_rows(v[0], v[1])?; weights(t, y) }, &[a.clone(), bias.clone()]);
        check(|t, v| { let y = t.scale(v[0], -1.7); weights(t, y) }, std::slice::from_ref(&a));
        check(|t, v| { let y = t.exp(v[0]); weights(t, y) }, std::slice::from_ref(&a));
        check(|t, v| { let e = t.exp(v[0]); let y = t.log(e)?; let y = t.gelu(y); weights(t, y) }, std::slice::from_ref(&a));
        check(|t, v| { let y = t.transpose(v[0]); let y = t.transpose(y); weights(t, y) }, std::slice::from_ref(&a));
        check(|t, v| { let y = t.shift_cols(v[0], 1); let z = t.shift_cols(v[0], -2); let s = t.add(y, z)?; weights(t, s) }, std::slice::from_ref(&a));
        check(|t, v| { let y = t.layer_norm_cols(v[0], 1e-5); weights(t, y) }, std::slice::from_ref(&a));
        check(|t, v| { let y = t.select_cols(v[0], vec![3, 0, 0, 2])?; weights(t, y) }, std::slice::from_ref(&a));
        check(
            |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                let y = t.select_cols(y, vec![0, 5, 7, 1])?;
                weights(t, y)
            },
            &[a.clone(), b.clone()],
        );
        check(|t, v| t.cosine(v[0], v[1]), &[a.clone(), b.clone()]);
        check(
            |t, v| {
                let s = t.cosine_matrix(v[0])?;
                let s = t.scale(s, 3.0);
                let l = t.masked_row_logsumexp(s)?;
                let e = t.weighted_entries(s, vec![(0, 1, 1.0), (2, 3, -0.5), (1, 1, 0.3)])?;
                let ls = t.sum(l);
                t.sub(ls, e)
            },
            std::slice::from_ref(&a),
        );
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 6);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.cosine_matrix(v[0])?;
            let l = t.masked_row_logsumexp(s)?;
            Ok(t.sum(l))
        };
        let g1 = grad(f, std::slice::from_ref(&a)).unwrap();
        let g2 = grad(f, &[a]).unwrap();
        assert_eq!(
            g1[0].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g2[0].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tensor_shape_is_checked() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            v in proptest::collection::vec(-2.0f64..2.0, 1..8),
            lambda in 0.01f64..100.0,
        ) {
            // ε only matters once λ‖v‖² approaches ε / 1e-9
            prop_assume!(lambda * v.iter().map(|x| x * x).sum::<f64>() >= 10.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
            let c = cosine_similarity(&v, &scaled).unwrap();
            prop_assert!((c - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_is_bounded(
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let c = cosine_similarity(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
