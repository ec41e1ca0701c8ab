use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Per-coordinate central differences `(f(θ+h) − f(θ−h)) / 2h`.
pub fn central_difference<F>(f: &F, params: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |theta: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(theta);
        let out = f(&mut tape, p)?;
        Ok(tape.value(out).item())
    };
    let mut fd = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[i] += h;
        let mut minus = params.clone();
        minus.data_mut()[i] -= h;
        fd.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(fd)
}

/// Compares the tape gradient of the scalar function `f` at `params` with
/// central finite differences and returns the largest relative error.
///
/// Functions with kinks (ReLU, absolute value, clamps) must be evaluated
/// away from them.
pub fn grad_check<F>(f: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(params.clone());
    let out = f(&mut tape, p)?;
    let grads = tape.backward(out);
    let analytic = grads.get_or_zeros(p, params.shape());
    let numeric = central_difference(&f, params, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |t, p| {
                let sq = t.square(p);
                Ok(t.sum(sq))
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _p| Ok(t.constant(Tensor::scalar(4.0))),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let x = Tensor::new(
                vec![4, 3],
                (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = Tensor::new(
                vec![3, 5],
                (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let labels = [0usize, 4, 2, 1];
            let err = grad_check(
                |t, wv| {
                    let xv = t.constant(x.clone());
                    let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.0, 0.3, 0.05]));
                    let z = t.affine(xv, wv, b)?;
                    let p = t.softmax(z)?;
                    cross_entropy(t, p, &labels)
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "err = {err}");
        }
    }
}
