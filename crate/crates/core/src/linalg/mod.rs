//! Dense matrix arithmetic and the reverse-mode differentiation engine that
//! trains the whole objective.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{analytic_gradients, grad_check, ScalarFn};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, VarId};

#[cfg(test)]
mod primitive_grad_tests {
    //! Every registered primitive against central finite differences.

    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn positive_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(0.2..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn check(f: impl Fn(&Tape, &[VarId]) -> Result<VarId>, params: Vec<Matrix>) {
        let err = grad_check(&f, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "finite-difference mismatch: {err}");
    }

    #[test]
    fn matmul_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        check(
            |t, p| {
                let c = t.matmul(p[0], p[1])?;
                Ok(t.sum_all(t.mul(c, c)?))
            },
            vec![a.clone(), b.clone()],
        );
        check(
            |t, p| {
                let c = t.matmul(t.transpose(p[1]), t.transpose(p[0]))?;
                Ok(t.sum_all(t.mul(c, c)?))
            },
            vec![a, b],
        );
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let f = |t: &Tape, p: &[VarId]| -> Result<VarId> { Ok(t.sum_all(t.matmul(p[0], p[1])?)) };
        let grads = analytic_gradients(&f, &[a, b.clone()]).unwrap();
        let expect = Matrix::filled(5, 3, 1.0).matmul_nt(&b).unwrap();
        assert!(grads[0].sub(&expect).unwrap().max_abs() < 1e-12);
        let err = grad_check(&f, &[random_matrix(&mut rng, 5, 4), b], 1e-6).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn elementwise_binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3, 4);
        let b = positive_matrix(&mut rng, 3, 4);
        check(
            |t, p| {
                let s = t.add(p[0], p[1])?;
                let d = t.sub(s, t.mul(p[0], p[1])?)?;
                let q = t.div(d, t.add_scalar(p[1], 3.0))?;
                Ok(t.sum_all(t.mul(q, q)?))
            },
            vec![a, b],
        );
    }

    #[test]
    fn broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 4, 3);
        let row = random_matrix(&mut rng, 1, 3);
        let col = random_matrix(&mut rng, 4, 1);
        check(
            |t, p| {
                let a = t.add_row(p[0], p[1])?;
                let b = t.add_col(a, p[2])?;
                let c = t.scale_rows(b, p[2])?;
                Ok(t.sum_all(t.mul(c, c)?))
            },
            vec![x, row, col],
        );
    }

    #[test]
    fn unary_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = positive_matrix(&mut rng, 3, 3);
        check(
            |t, p| {
                let e = t.exp(t.scale(p[0], 0.3));
                let l = t.ln(t.add_scalar(e, 1.0));
                let s = t.sqrt(l);
                let r = t.recip(t.add_scalar(s, 0.5));
                Ok(t.sum_all(t.mul(r, r)?))
            },
            vec![x],
        );
    }

    #[test]
    fn relu_and_clamp_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // keep inputs away from the non-differentiable points
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Matrix::from_vec(3, 4, data).unwrap();
        check(
            |t, p| {
                let r = t.relu(p[0]);
                let c = t.clamp_min(p[0], 0.05);
                Ok(t.sum_all(t.add(t.mul(r, r)?, c)?))
            },
            vec![x],
        );
    }

    #[test]
    fn softmax_rows_and_cols() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 4, 3);
        let w = random_matrix(&mut rng, 4, 3);
        let wc = w.clone();
        check(
            move |t, p| {
                let s = t.softmax_rows(p[0]);
                let weighted = t.mul(s, t.constant(wc.clone()))?;
                Ok(t.sum_all(t.mul(weighted, weighted)?))
            },
            vec![x.clone()],
        );
        check(
            move |t, p| {
                let s = t.softmax_cols(p[0]);
                let weighted = t.mul(s, t.constant(w.clone()))?;
                Ok(t.sum_all(t.mul(weighted, weighted)?))
            },
            vec![x],
        );
    }

    #[test]
    fn reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 4, 5);
        check(
            |t, p| {
                let r = t.sum_rows(p[0]);
                let c = t.sum_cols(p[0]);
                let a = t.sum_all(t.mul(r, r)?);
                let b = t.sum_all(t.mul(c, c)?);
                t.add(a, b)
            },
            vec![x],
        );
    }
}
