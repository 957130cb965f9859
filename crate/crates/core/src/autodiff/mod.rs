//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Exactly the primitives the forecasting models need: affine maps, a few
//! elementwise functions, layer normalization, concatenation/selection,
//! embedding lookup, and an explicit [`Tensor::detach`] for severing gradient
//! flow. Gradients accumulate by addition into zero-initialized buffers in
//! reverse recording order, so two backward passes over the same tape are
//! bit-identical.

mod special;
mod tape;
mod tensor;

pub use special::{digamma, ln_gamma};
pub use tape::{Gradients, MapKind, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum AdError {
    /// Operand shapes do not conform; the message names the offending axis.
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },
    /// An elementwise map was applied outside its domain.
    #[error("numeric domain error in {op} at element {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// An API contract was violated (non-scalar loss, detached loss, ...).
    #[error("contract error: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs());
        if denom < 1e-9 {
            (a - b).abs()
        } else {
            (a - b).abs() / denom
        }
    }

    /// Central finite differences of a scalar function of a flat parameter
    /// vector. Independent of the tape: every evaluation reruns the closure.
    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], step: f64) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        let mut point = at.to_vec();
        for i in 0..at.len() {
            let orig = point[i];
            point[i] = orig + step;
            let fp = f(&point);
            point[i] = orig - step;
            let fm = f(&point);
            point[i] = orig;
            grad[i] = (fp - fm) / (2.0 * step);
        }
        grad
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(
                rel_err(a, n) < tol || (a - n).abs() < 1e-7,
                "gradient mismatch at {}: analytic {} vs numeric {}",
                i,
                a,
                n
            );
        }
    }

    fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
        // simple deterministic values in [-2, 2]
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn linear_identity_weights() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let out = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_arithmetic() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 1.0], &[1, 2]).unwrap();
        let w = Tensor::from_vec(vec![2.0, 3.0], &[2, 1]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        let out = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(out.values(), &[6.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_axis() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let err = tape.linear(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis"), "unexpected message: {}", msg);
    }

    #[test]
    fn linear_weight_gradient_matches_finite_differences() {
        let x_vals = lcg_values(7, 6); // [3,2]
        let w0 = lcg_values(8, 6); // [2,3]
        let b0 = lcg_values(9, 3);

        let f = |wv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = Tensor::from_vec(x_vals.clone(), &[3, 2]).unwrap();
            let w = Tensor::from_vec(wv.to_vec(), &[2, 3]).unwrap();
            let b = Tensor::vector(b0.clone());
            let out = tape.linear(&x, &w, &b).unwrap();
            out.values().iter().sum()
        };
        let numeric = finite_diff(f, &w0, 1e-5);

        let mut tape = Tape::new();
        let x = Tensor::from_vec(x_vals.clone(), &[3, 2]).unwrap();
        let w = tape.var(&Tensor::from_vec(w0.clone(), &[2, 3]).unwrap());
        let b = Tensor::vector(b0.clone());
        let out = tape.linear(&x, &w, &b).unwrap();
        let loss = tape.sum(&out);
        let grads = tape.backward(&loss).unwrap();
        assert_grad_close(&grads.get_or_zeros(&w), &numeric, 1e-6);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let r = tape.relu(&x).unwrap();
        assert_eq!(r.values(), &[0.0, 0.0, 2.0]);

        let sp = tape.softplus(&Tensor::scalar(0.0)).unwrap();
        assert!((sp.values()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let lg = tape.map(MapKind::LnGamma, &Tensor::scalar(5.0)).unwrap();
        assert!((lg.values()[0] - 24f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn log_domain_error_reports_element() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![1.0, -3.0, 2.0]);
        match tape.map(MapKind::Log, &x) {
            Err(AdError::Domain { index, value, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(value, -3.0);
            }
            other => panic!("expected domain error, got {:?}", other.map(|t| t.len())),
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let gain = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let bias = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let out = tape.layer_norm(&ones, &gain, &bias, 1e-5).unwrap();
        for &v in out.values() {
            assert!(v.abs() < 1e-9);
        }

        let x = Tensor::vector(vec![0.0, 2.0]);
        let gain = Tensor::vector(vec![1.0, 1.0]);
        let bias = Tensor::vector(vec![0.0, 0.0]);
        let out = tape.layer_norm(&x, &gain, &bias, 0.0).unwrap();
        assert!((out.values()[0] + 1.0).abs() < 1e-12);
        assert!((out.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x0 = lcg_values(21, 8); // [2,4]
        let g0 = lcg_values(22, 4);
        let b0 = lcg_values(23, 4);
        let eps = 1e-5;

        // gradient w.r.t. x
        let f = |xv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = Tensor::from_vec(xv.to_vec(), &[2, 4]).unwrap();
            let gain = Tensor::vector(g0.clone());
            let bias = Tensor::vector(b0.clone());
            let out = tape.layer_norm(&x, &gain, &bias, eps).unwrap();
            // weighted sum so the gradient is not constant
            out.values()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (i as f64 + 1.0))
                .sum()
        };
        let numeric = finite_diff(f, &x0, 1e-6);

        let mut tape = Tape::new();
        let x = tape.var(&Tensor::from_vec(x0.clone(), &[2, 4]).unwrap());
        let gain = tape.var(&Tensor::vector(g0.clone()));
        let bias = tape.var(&Tensor::vector(b0.clone()));
        let out = tape.layer_norm(&x, &gain, &bias, eps).unwrap();
        let weights = Tensor::from_vec((1..=8).map(|i| i as f64).collect(), &[2, 4]).unwrap();
        let weighted = tape.mul(&out, &weights).unwrap();
        let loss = tape.sum(&weighted);
        let grads = tape.backward(&loss).unwrap();
        assert_grad_close(&grads.get_or_zeros(&x), &numeric, 1e-5);

        // gradient w.r.t. gain
        let fg = |gv: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = Tensor::from_vec(x0.clone(), &[2, 4]).unwrap();
            let gain = Tensor::vector(gv.to_vec());
            let bias = Tensor::vector(b0.clone());
            let out = tape.layer_norm(&x, &gain, &bias, eps).unwrap();
            out.values()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (i as f64 + 1.0))
                .sum()
        };
        let numeric_gain = finite_diff(fg, &g0, 1e-6);
        assert_grad_close(&grads.get_or_zeros(&gain), &numeric_gain, 1e-5);
    }

    #[test]
    fn detach_preserves_values_and_blocks_gradient() {
        let x_vals = lcg_values(33, 5);
        let w_vals = lcg_values(34, 5);

        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(x_vals.clone()));
        let w = tape.var(&Tensor::vector(w_vals.clone()));
        let xd = x.detach();
        assert_eq!(xd.values(), x.values());
        assert!(xd.node().is_none());

        let prod = tape.mul(&xd, &w).unwrap();
        let loss = tape.sum(&prod);
        let grads = tape.backward(&loss).unwrap();
        // d loss / d x is exactly zero (never receives gradient)
        assert!(grads.get(&x).is_none());
        assert_eq!(grads.get_or_zeros(&x), vec![0.0; 5]);
        // d loss / d w = x
        assert_eq!(grads.get_or_zeros(&w), x_vals);
    }

    #[test]
    fn backward_simple_sums() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get_or_zeros(&x), vec![1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get_or_zeros(&x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_tracked_loss() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(vec![1.0, 2.0]));
        let doubled = tape.scale(&x, 2.0);
        assert!(matches!(
            tape.backward(&doubled),
            Err(AdError::Contract(_))
        ));
        let constant = Tensor::scalar(1.0);
        assert!(matches!(
            tape.backward(&constant),
            Err(AdError::Contract(_))
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(lcg_values(55, 16)));
        let w = tape.var(&Tensor::from_vec(lcg_values(56, 16 * 4), &[16, 4]).unwrap());
        let b = tape.var(&Tensor::vector(lcg_values(57, 4)));
        let xm = x.reshaped(&[1, 16]).unwrap();
        let h = tape.linear(&xm, &w, &b).unwrap();
        let a = tape.relu(&h).unwrap();
        let loss = tape.sum(&a);
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        for t in [&x, &w, &b] {
            let a = g1.get_or_zeros(t);
            let b2 = g2.get_or_zeros(t);
            assert!(a
                .iter()
                .zip(&b2)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gradient_of_loss_sum_is_sum_of_gradients() {
        // two losses sharing a parameter: grad(l1 + l2) == grad(l1) + grad(l2)
        let vals = lcg_values(77, 6);
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::vector(vals));
        let sq = tape.mul(&x, &x).unwrap();
        let l1 = tape.sum(&sq);
        let sp = tape.softplus(&x).unwrap();
        let l2 = tape.sum(&sp);
        let total = tape.add(&l1, &l2).unwrap();

        let g1 = tape.backward(&l1).unwrap().get_or_zeros(&x);
        let g2 = tape.backward(&l2).unwrap().get_or_zeros(&x);
        let gt = tape.backward(&total).unwrap().get_or_zeros(&x);
        for i in 0..6 {
            assert_eq!((g1[i] + g2[i]).to_bits(), gt[i].to_bits());
        }
    }

    #[test]
    fn concat_column_lookup_roundtrip_gradients() {
        let mut tape = Tape::new();
        let table = tape.var(&Tensor::from_vec(lcg_values(91, 6), &[3, 2]).unwrap());
        let emb = tape.lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(emb.shape(), &[3, 2]);
        let other = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let cat = tape.concat_cols(&[&emb, &other]).unwrap();
        assert_eq!(cat.shape(), &[3, 3]);
        let col = tape.column(&cat, 1).unwrap();
        let loss = tape.sum(&col);
        let grads = tape.backward(&loss).unwrap();
        // column 1 of the concat is column 1 of the embedding; row 2 of the
        // table is used twice, row 0 once, row 1 never.
        assert_eq!(grads.get_or_zeros(&table), vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_transpose_gradients_match_finite_differences() {
        let a0 = lcg_values(101, 6); // [2,3]
        let b0 = lcg_values(102, 12); // [3,4]

        let f = |av: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let a = Tensor::from_vec(av.to_vec(), &[2, 3]).unwrap();
            let b = Tensor::from_vec(b0.clone(), &[3, 4]).unwrap();
            let prod = tape.matmul(&a, &b).unwrap();
            let t = tape.transpose(&prod).unwrap();
            t.values().iter().enumerate().map(|(i, &v)| v * i as f64).sum()
        };
        let numeric = finite_diff(f, &a0, 1e-5);

        let mut tape = Tape::new();
        let a = tape.var(&Tensor::from_vec(a0.clone(), &[2, 3]).unwrap());
        let b = Tensor::from_vec(b0.clone(), &[3, 4]).unwrap();
        let prod = tape.matmul(&a, &b).unwrap();
        let t = tape.transpose(&prod).unwrap();
        let weights = Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[4, 2]).unwrap();
        let weighted = tape.mul(&t, &weights).unwrap();
        let loss = tape.sum(&weighted);
        let grads = tape.backward(&loss).unwrap();
        assert_grad_close(&grads.get_or_zeros(&a), &numeric, 1e-6);
    }

    #[test]
    fn constant_only_operations_stay_off_the_tape() {
        let mut tape = Tape::new();
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        let c = tape.add(&a, &b).unwrap();
        let d = tape.mul(&c, &c).unwrap();
        let _ = tape.sum(&d);
        assert_eq!(tape.num_records(), 0);
        assert_eq!(tape.num_nodes(), 0);
    }
}
