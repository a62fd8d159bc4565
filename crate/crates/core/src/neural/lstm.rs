//! Single-layer LSTM cell with gate order `[input, forget, cell, output]`.

use serde::{Deserialize, Serialize};

use super::loss::sigmoid;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams<S> {
    /// `4H × E`
    pub w_x: Tensor<S>,
    /// `4H × H`
    pub w_h: Tensor<S>,
    /// `4H`
    pub b: Tensor<S>,
}

impl<S: Scalar> LstmParams<S> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(&[4 * hidden_dim, input_dim]),
            w_h: Tensor::zeros(&[4 * hidden_dim, hidden_dim]),
            b: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.cols()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let h = self.hidden_dim();
        for (name, rows) in [
            ("w_x", self.w_x.rows()),
            ("w_h", self.w_h.rows()),
            ("b", self.b.rows()),
        ] {
            if rows != 4 * h {
                return Err(Error::DimensionMismatch {
                    context: format!("lstm {name} rows"),
                    expected: 4 * h,
                    actual: rows,
                });
            }
        }
        Ok(())
    }
}

/// Intermediates of one step, enough to run the step backwards.
#[derive(Clone, Debug)]
pub struct LstmCache<S> {
    pub x: Vec<S>,
    pub h_prev: Vec<S>,
    pub c_prev: Vec<S>,
    pub i: Vec<S>,
    pub f: Vec<S>,
    pub g: Vec<S>,
    pub o: Vec<S>,
    pub tanh_c: Vec<S>,
    pub h: Vec<S>,
    pub c: Vec<S>,
}

fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// One LSTM update `(x, h, c) → (h', c')`.
pub fn lstm_step<S: Scalar>(
    x: &[S],
    h: &[S],
    c: &[S],
    p: &LstmParams<S>,
) -> Result<(Vec<S>, Vec<S>)> {
    let cache = lstm_step_cached(x.to_vec(), h, c, p)?;
    Ok((cache.h, cache.c))
}

pub fn lstm_step_cached<S: Scalar>(
    x: Vec<S>,
    h: &[S],
    c: &[S],
    p: &LstmParams<S>,
) -> Result<LstmCache<S>> {
    let hd = p.hidden_dim();
    check_len("lstm input", p.input_dim(), x.len())?;
    check_len("lstm hidden state", hd, h.len())?;
    check_len("lstm cell state", hd, c.len())?;

    let mut z = p.b.values().to_vec();
    p.w_x.matvec_acc(&x, &mut z);
    p.w_h.matvec_acc(h, &mut z);

    let i: Vec<S> = z[..hd].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<S> = z[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<S> = z[2 * hd..3 * hd].iter().map(|&v| v.tanh()).collect();
    let o: Vec<S> = z[3 * hd..].iter().map(|&v| sigmoid(v)).collect();

    let c_new: Vec<S> = (0..hd).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<S> = c_new.iter().map(|&v| v.tanh()).collect();
    let h_new: Vec<S> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();

    Ok(LstmCache {
        x,
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        i,
        f,
        g,
        o,
        tanh_c,
        h: h_new,
        c: c_new,
    })
}

/// Backpropagates `dh`, `dc` (gradients w.r.t. the step's outputs) through
/// one step, accumulating parameter gradients into `grads`.
///
/// Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_step_backward<S: Scalar>(
    p: &LstmParams<S>,
    cache: &LstmCache<S>,
    dh: &[S],
    dc: &[S],
    grads: &mut LstmParams<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let hd = p.hidden_dim();
    let one = S::one();
    let mut dz = vec![S::zero(); 4 * hd];
    let mut dc_prev = vec![S::zero(); hd];
    for k in 0..hd {
        let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
        let dct = dc[k] + dh[k] * o * (one - tc * tc);
        dz[k] = dct * g * i * (one - i);
        dz[hd + k] = dct * cache.c_prev[k] * f * (one - f);
        dz[2 * hd + k] = dct * i * (one - g * g);
        dz[3 * hd + k] = dh[k] * tc * o * (one - o);
        dc_prev[k] = dct * f;
    }

    grads.w_x.outer_acc(&dz, &cache.x);
    grads.w_h.outer_acc(&dz, &cache.h_prev);
    for (b, &d) in grads.b.values_mut().iter_mut().zip(&dz) {
        *b += d;
    }

    let mut dx = vec![S::zero(); cache.x.len()];
    p.w_x.matvec_t_acc(&dz, &mut dx);
    let mut dh_prev = vec![S::zero(); hd];
    p.w_h.matvec_t_acc(&dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::<f64>::zeros(3, 2);
        let (h, c) = lstm_step(&[0.3, -1.0, 2.0], &[0.0; 2], &[0.0; 2], &p).unwrap();
        assert_eq!(h, [0.0, 0.0]);
        assert_eq!(c, [0.0, 0.0]);
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let c0 = [1.0, -2.0, 0.5];
        let (h, c) = lstm_step(&[0.7, 0.1], &[0.2, 0.2, 0.2], &c0, &p).unwrap();
        for k in 0..3 {
            assert_eq!(c[k], 0.5 * c0[k]);
            assert!((h[k] - 0.5 * (0.5 * c0[k]).tanh()).abs() < 1e-15);
        }
    }

    // Gate equations written out longhand for a 1-dim cell.
    #[test]
    fn scalar_cell_matches_longhand() {
        let (wi, wf, wg, wo) = (0.3, -0.7, 1.1, 0.4);
        let (ui, uf, ug, uo) = (-0.2, 0.5, 0.9, -1.3);
        let (bi, bf, bg, bo) = (0.1, 1.0, -0.3, 0.2);
        let (x, h0, c0) = (0.8, -0.4, 0.6);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(wi * x + ui * h0 + bi);
        let f = sig(wf * x + uf * h0 + bf);
        let g = (wg * x + ug * h0 + bg).tanh();
        let o = sig(wo * x + uo * h0 + bo);
        let c_exp = f * c0 + i * g;
        let h_exp = o * c_exp.tanh();

        let p = LstmParams {
            w_x: Tensor::from_vec(vec![4, 1], vec![wi, wf, wg, wo]).unwrap(),
            w_h: Tensor::from_vec(vec![4, 1], vec![ui, uf, ug, uo]).unwrap(),
            b: Tensor::from_vec(vec![4], vec![bi, bf, bg, bo]).unwrap(),
        };
        let (h, c) = lstm_step(&[x], &[h0], &[c0], &p).unwrap();
        assert!((h[0] - h_exp).abs() < 1e-12);
        assert!((c[0] - c_exp).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let p = LstmParams::<f64>::zeros(3, 2);
        assert!(matches!(
            lstm_step(&[0.0; 2], &[0.0; 2], &[0.0; 2], &p),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(lstm_step(&[0.0; 3], &[0.0; 3], &[0.0; 2], &p).is_err());
    }

    #[test]
    fn f32_cell_runs() {
        let p = LstmParams::<f32>::zeros(1, 1);
        let (h, c) = lstm_step(&[1.0f32], &[0.0], &[1.0], &p).unwrap();
        assert_eq!(c[0], 0.5);
        assert!((h[0] - 0.5 * 0.5f32.tanh()).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn hidden_output_bounded(
            w in proptest::collection::vec(-3.0f64..3.0, 4 * 2 * 3 + 4 * 2 * 2 + 8),
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            c in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let p = LstmParams {
                w_x: Tensor::from_vec(vec![8, 3], w[..24].to_vec()).unwrap(),
                w_h: Tensor::from_vec(vec![8, 2], w[24..40].to_vec()).unwrap(),
                b: Tensor::from_vec(vec![8], w[40..].to_vec()).unwrap(),
            };
            let (h, c2) = lstm_step(&x, &[0.1, -0.1], &c, &p).unwrap();
            for v in h.iter().chain(&c2) {
                prop_assert!(v.is_finite());
            }
            for v in h {
                prop_assert!(v.abs() < 1.0);
            }
        }
    }
}
