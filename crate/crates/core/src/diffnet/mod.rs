//! Minimal reverse-mode differentiable core: tensors, a recording tape,
//! batch normalization with separable affine parameters, and a
//! finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};

pub use gradcheck::{central_difference, grad_check, relative_error};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Variance stabilizer inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Lower clamp applied before every logarithm.
pub const EPS_LOG: f64 = 1e-8;
/// Weight of the newest batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalization picks its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Batch statistics; running averages untouched. A batch of one falls
    /// back to running statistics.
    Adapt,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            scale: vec![1.0; width],
            shift: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }

    /// Folds observed batch statistics into the running averages. The
    /// stored variance uses the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let b = stats.batch_size as f64;
        let correction = if stats.batch_size > 1 {
            b / (b - 1.0)
        } else {
            1.0
        };
        let m = self.momentum;
        for j in 0..self.width() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * stats.var[j] * correction;
        }
    }
}

/// Records batch normalization of `x` using `state`'s statistics for `mode`.
///
/// `scale` and `shift` are the tape handles of the affine parameters (bound
/// from `state.scale`/`state.shift` by the caller). In [`Mode::Train`] the
/// observed batch statistics are returned so the caller can fold them into
/// the running averages; the state itself is never mutated here.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    shift: Var,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let xv = tape.value(x);
    if xv.cols() != state.width() {
        return Err(Error::Dimension {
            op: "batchnorm",
            left: xv.shape().to_vec(),
            right: vec![state.width()],
        });
    }
    let rows = xv.rows();
    match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::Input(
                    "batch normalization in train mode needs at least two rows".into(),
                ));
            }
            let (y, stats) = tape.batch_norm(x, scale, shift, state.eps)?;
            Ok((y, Some(stats)))
        }
        Mode::Adapt if rows >= 2 => {
            let (y, _) = tape.batch_norm(x, scale, shift, state.eps)?;
            Ok((y, None))
        }
        Mode::Adapt | Mode::Eval => {
            let y = tape.batch_norm_fixed(
                x,
                scale,
                shift,
                &state.running_mean,
                &state.running_var,
                state.eps,
            )?;
            Ok((y, None))
        }
    }
}

/// Mean over the batch of `−log p[i, label_i]`, with `p` clamped to
/// [`EPS_LOG`].
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.gather(probs, labels)?;
    let logs = tape.log_clamp(picked, EPS_LOG);
    let total = tape.sum(logs);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0]]));
        let w = t.param(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = t.param(Tensor::vector(vec![0.0, 0.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 1.0]]));
        let w = t.param(m(&[&[2.0], &[3.0]]));
        let b = t.param(Tensor::vector(vec![1.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_bias_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, -2.0, 0.5]]));
        let w = t.param(Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap());
        let b = t.param(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = t.affine(x, w, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let w = t.param(m(&[&[1.0], &[2.0]]));
        let b = t.param(Tensor::vector(vec![0.0]));
        match t.affine(x, w, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![1, 3]);
                assert_eq!(right, vec![2, 1]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn relu_examples() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[-1.0, 0.0, 2.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(m(&[&[-3.0, -0.5]]));
        let y = t.relu(x);
        let s = t.sum(y);
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        assert_eq!(t.backward(s).get(x).unwrap().data(), &[0.0, 0.0]);
    }

    fn bn_once(x: Tensor, scale: f64, shift: f64, eps: f64) -> Vec<f64> {
        let mut st = BatchNormState::new(1);
        st.scale = vec![scale];
        st.shift = vec![shift];
        st.eps = eps;
        let mut t = Tape::new();
        let xv = t.constant(x);
        let s = t.param(Tensor::vector(st.scale.clone()));
        let h = t.param(Tensor::vector(st.shift.clone()));
        let (y, _) = batchnorm_forward(&mut t, xv, s, h, &st, Mode::Train).unwrap();
        t.value(y).data().to_vec()
    }

    #[test]
    fn batchnorm_examples() {
        let y = bn_once(m(&[&[1.0], &[3.0]]), 1.0, 0.0, 1e-300);
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
        let y = bn_once(m(&[&[1.0], &[3.0]]), 2.0, 1.0, 1e-300);
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 3.0).abs() < 1e-12);
        let y = bn_once(m(&[&[5.0], &[5.0]]), 1.7, 0.25, BN_EPS);
        assert_eq!(y, vec![0.25, 0.25]);
    }

    #[test]
    fn batchnorm_width_mismatch() {
        let st = BatchNormState::new(3);
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = t.param(Tensor::vector(vec![1.0; 3]));
        let h = t.param(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(
            batchnorm_forward(&mut t, x, s, h, &st, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn running_stats_update_uses_unbiased_variance() {
        let mut st = BatchNormState::new(1);
        st.update_running(&BatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            batch_size: 2,
        });
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        // 0.9·1 + 0.1·(1·2/1)
        assert!((st.running_var[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(m(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 1000.0]]));
        let p = t.softmax(z).unwrap();
        let p = t.value(p).data();
        assert_eq!(&p[0..2], &[0.5, 0.5]);
        assert!((p[2] - 2.0 / 3.0).abs() < 1e-15 && (p[3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&p[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        type Case<'a> = (&'a [&'a [f64]], &'a [usize], f64);
        let cases: [Case; 3] = [
            (&[&[1.0, 0.0]], &[0], 0.0),
            (&[&[0.5, 0.5]], &[1], 2f64.ln()),
            (&[&[1.0, 0.0], &[0.5, 0.5]], &[0, 0], 2f64.ln() / 2.0),
        ];
        for (rows, labels, want) in cases {
            let mut t = Tape::new();
            let p = t.constant(m(rows));
            let l = cross_entropy(&mut t, p, labels).unwrap();
            assert!((t.value(l).item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::new();
        let p = t.constant(m(&[&[0.5, 0.5]]));
        assert!(matches!(
            cross_entropy(&mut t, p, &[2]),
            Err(Error::Index {
                index: 2,
                len: 2,
                ..
            })
        ));
    }

    #[test]
    fn grad_reverse_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.grad_reverse(x, 1.5);
        assert_eq!(t.value(y), t.value(x));
        let up = t.constant(Tensor::vector(vec![1.0, -2.0]));
        let prod = t.mul(y, up).unwrap();
        let s = t.sum(prod);
        assert_eq!(t.backward(s).get(x).unwrap().data(), &[-1.5, 3.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.grad_reverse(x, 0.0);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
