//! Central finite-difference verification of the backward pass.

use super::graph::{Graph, ParamKey, Var};
use super::tensor::{AutodiffError, Scalar, Tensor};

/// Key reserved for the tensor under check; model parameters added inside
/// the closure must use other keys.
pub const CHECK_KEY: ParamKey = ParamKey(usize::MAX);

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub pass: bool,
}

/// Compare the analytic gradient of a scalar-valued builder against central
/// finite differences, coordinate by coordinate.
///
/// Relative error per coordinate is `|a - fd| / max(|a|, |fd|, 1e-6)`;
/// the check passes iff the max over coordinates is at most `tol`.
/// The builder must be deterministic, and inputs should stay clear of the
/// kinks of `abs`/`wrap_angle` by more than `10 h`.
pub fn grad_check<F, B>(
    build: B,
    x: &Tensor<F>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let xv = g.param(x, CHECK_KEY);
    let loss = build(&mut g, xv)?;
    if g.value(loss).len() != 1 {
        return Err(AutodiffError::NonScalarLoss(g.shape(loss).to_vec()));
    }
    let grads = g.backward(loss)?;
    let analytic = grads.get(&CHECK_KEY).cloned().unwrap_or_default();
    if analytic.is_empty() {
        return Err(AutodiffError::Invalid {
            op: "grad_check",
            msg: "loss does not depend on the checked tensor".into(),
        });
    }

    let eval = |data: Vec<F>| -> Result<f64, AutodiffError> {
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let mut g = Graph::new();
        let v = g.param(&t, CHECK_KEY);
        let loss = build(&mut g, v)?;
        Ok(g.scalar_value(loss).as_f64())
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] = plus[i] + F::from_f64(h);
        let mut minus = x.data().to_vec();
        minus[i] = minus[i] - F::from_f64(h);
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i].as_f64();
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport {
        n_coords: x.numel(),
        max_rel_err,
        worst_coord,
        pass: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randu(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Dot the op output against fixed pseudo-random weights so every
    /// coordinate gets a distinct cotangent.
    fn weighted(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, AutodiffError> {
        let shape = g.shape(v).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = randu(&mut rng, shape, -1.0, 1.0);
        let wv = g.input(&w);
        let prod = g.mul(v, wv)?;
        Ok(g.sum_all(prod))
    }

    fn assert_passes<B>(build: B, x: &Tensor<f64>, tol: f64)
    where
        B: Fn(&mut Graph<f64>, Var) -> Result<Var, AutodiffError>,
    {
        let rep = grad_check(&build, x, 1e-5, tol).unwrap();
        assert!(
            rep.pass,
            "max rel err {:.3e} at coordinate {} of {}",
            rep.max_rel_err, rep.worst_coord, rep.n_coords
        );
    }

    #[test]
    fn quadratic_has_known_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.param(&x, CHECK_KEY);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[&CHECK_KEY], vec![2.0, 4.0]);
        assert_passes(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-8,
        );
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let rep = grad_check(|g, v| Ok(g.sum_all(v)), &x, 1e-5, 1e-10).unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn abs_away_from_kink_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = randu(&mut rng, vec![6], 0.15, 1.0);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        assert_passes(
            |g, v| {
                let a = g.abs(v);
                weighted(g, a, 3)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn matmul_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randu(&mut rng, vec![2, 3], -1.0, 1.0);
        let b = randu(&mut rng, vec![3, 4], -1.0, 1.0);
        // d(loss)/dA
        let b2 = b.clone();
        assert_passes(
            move |g, v| {
                let bv = g.input(&b2);
                let c = g.matmul(v, bv)?;
                weighted(g, c, 5)
            },
            &a,
            1e-6,
        );
        // d(loss)/dB
        assert_passes(
            move |g, v| {
                let av = g.input(&a);
                let c = g.matmul(av, v)?;
                weighted(g, c, 6)
            },
            &b,
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_scalar_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randu(&mut rng, vec![3, 4], -1.5, 1.5);
        assert_passes(
            |g, v| {
                let s = g.sigmoid(v);
                weighted(g, s, 7)
            },
            &x,
            1e-6,
        );
        assert_passes(
            |g, v| {
                let s = g.gelu(v);
                weighted(g, s, 8)
            },
            &x,
            1e-6,
        );
        assert_passes(
            |g, v| {
                let s = g.softplus(v);
                weighted(g, s, 9)
            },
            &x,
            1e-6,
        );
        assert_passes(
            |g, v| {
                let s = g.scale(v, -2.5);
                weighted(g, s, 10)
            },
            &x,
            1e-6,
        );
        // tensor-times-scalar-node, gradient w.r.t. the scalar too
        let s = Tensor::scalar(0.7);
        let x2 = x.clone();
        assert_passes(
            move |g, v| {
                let xv = g.input(&x2);
                let prod = g.scalar_mul(xv, v)?;
                weighted(g, prod, 11)
            },
            &s,
            1e-6,
        );
    }

    #[test]
    fn reductions_and_reshapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randu(&mut rng, vec![4, 5], -1.0, 1.0);
        for axis in [0, 1] {
            assert_passes(
                move |g, v| {
                    let m = g.mean_axis(v, axis)?;
                    weighted(g, m, 12 + axis as u64)
                },
                &x,
                1e-6,
            );
            assert_passes(
                move |g, v| {
                    let m = g.std_axis(v, axis)?;
                    weighted(g, m, 14 + axis as u64)
                },
                &x,
                1e-5,
            );
            assert_passes(
                move |g, v| {
                    let m = g.softmax(v, axis)?;
                    weighted(g, m, 16 + axis as u64)
                },
                &x,
                1e-5,
            );
        }
        assert_passes(|g, v| Ok(g.mean_all(v)), &x, 1e-8);
        assert_passes(
            |g, v| {
                let r = g.reshape(v, vec![2, 10])?;
                weighted(g, r, 18)
            },
            &x,
            1e-6,
        );
        assert_passes(
            |g, v| {
                let t = g.transpose(v)?;
                weighted(g, t, 19)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randu(&mut rng, vec![5, 3], -1.0, 1.0);
        assert_passes(
            |g, v| {
                let a = g.slice(v, 0, 1, 4)?; // [3,3]
                let b = g.slice(v, 1, 0, 2)?; // [5,2]
                let bt = g.transpose(b)?; // [2,5]
                let c = g.matmul(bt, v)?; // [2,3]
                let la = weighted(g, a, 40)?;
                let lc = weighted(g, c, 20)?;
                g.add(la, lc)
            },
            &x,
            1e-6,
        );
        let x2 = x.clone();
        assert_passes(
            move |g, v| {
                let other = g.input(&x2);
                let cat0 = g.concat(0, &[v, other])?;
                let cat1 = g.concat(1, &[v, v])?;
                let a = weighted(g, cat0, 21)?;
                let b = weighted(g, cat1, 22)?;
                g.add(a, b)
            },
            &x,
            1e-6,
        );
        let vec_x = randu(&mut rng, vec![4], -1.0, 1.0);
        assert_passes(
            |g, v| {
                let r = g.repeat_rows(v, 6)?;
                weighted(g, r, 23)
            },
            &vec_x,
            1e-6,
        );
    }

    #[test]
    fn linear_and_layer_norm_all_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randu(&mut rng, vec![4, 3], -1.0, 1.0);
        let w = randu(&mut rng, vec![3, 5], -1.0, 1.0);
        let b = randu(&mut rng, vec![5], -0.5, 0.5);
        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        let (w2, b2) = (w.clone(), b.clone());
        assert_passes(
            move |g, v| {
                let wv = g.input(&w2);
                let bv = g.input(&b2);
                let y = g.linear(v, wv, bv)?;
                weighted(g, y, 24)
            },
            &x,
            1e-6,
        );
        let (xc2, bc2) = (xc.clone(), bc.clone());
        assert_passes(
            move |g, v| {
                let xv = g.input(&xc2);
                let bv = g.input(&bc2);
                let y = g.linear(xv, v, bv)?;
                weighted(g, y, 25)
            },
            &w,
            1e-6,
        );
        assert_passes(
            move |g, v| {
                let xv = g.input(&xc);
                let wv = g.input(&wc);
                let y = g.linear(xv, wv, v)?;
                weighted(g, y, 26)
            },
            &b,
            1e-6,
        );

        let scale = randu(&mut rng, vec![3], 0.5, 1.5);
        let shift = randu(&mut rng, vec![3], -0.5, 0.5);
        let (sc, hc) = (scale.clone(), shift.clone());
        assert_passes(
            move |g, v| {
                let s = g.input(&sc);
                let h = g.input(&hc);
                let y = g.layer_norm(v, s, h)?;
                weighted(g, y, 27)
            },
            &x,
            1e-5,
        );
        let (xc3, hc3) = (x.clone(), shift.clone());
        assert_passes(
            move |g, v| {
                let xv = g.input(&xc3);
                let h = g.input(&hc3);
                let y = g.layer_norm(xv, v, h)?;
                weighted(g, y, 28)
            },
            &scale,
            1e-6,
        );
        let xc4 = x.clone();
        let sc4 = scale.clone();
        assert_passes(
            move |g, v| {
                let xv = g.input(&xc4);
                let s = g.input(&sc4);
                let y = g.layer_norm(xv, s, v)?;
                weighted(g, y, 29)
            },
            &shift,
            1e-6,
        );
    }

    #[test]
    fn sequence_ops_and_hilbert_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randu(&mut rng, vec![8, 2], -1.0, 1.0);
        assert_passes(
            |g, v| {
                let d = g.diff_rows(v)?;
                weighted(g, d, 30)
            },
            &x,
            1e-6,
        );
        assert_passes(
            |g, v| {
                let m = g.moving_avg_rows(v, 3)?;
                weighted(g, m, 31)
            },
            &x,
            1e-6,
        );
        assert_passes(
            |g, v| {
                let h = g.hilbert_imag(v)?;
                weighted(g, h, 32)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn angle_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // keep |values| well away from the atan2 origin and wrap boundary
        let y = randu(&mut rng, vec![3, 3], 0.2, 1.0);
        let x = randu(&mut rng, vec![3, 3], 0.2, 1.0);
        let xc = x.clone();
        assert_passes(
            move |g, v| {
                let xv = g.input(&xc);
                let th = g.atan2(v, xv)?;
                weighted(g, th, 33)
            },
            &y,
            1e-5,
        );
        let yc = y.clone();
        assert_passes(
            move |g, v| {
                let yv = g.input(&yc);
                let th = g.atan2(yv, v)?;
                weighted(g, th, 34)
            },
            &x,
            1e-5,
        );
        let angles = randu(&mut rng, vec![6], -2.0, 2.0);
        assert_passes(
            |g, v| {
                let w = g.wrap_angle(v);
                weighted(g, w, 35)
            },
            &angles,
            1e-6,
        );
    }
}
