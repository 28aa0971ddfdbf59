//! Finite-difference verification of recorded gradients.

use super::{Tape, Tensor};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `point`, coordinate by coordinate, and returns the
/// worst relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// Panics if the function produces a non-finite value or a non-scalar.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let x = tape.param(point);
    let y = f(&mut tape, &x);
    assert!(y.is_scalar(), "grad_check: function must be scalar-valued, got {:?}", y.shape());
    assert!(y.item().is_finite(), "grad_check: non-finite value at base point");
    let analytic = tape.backward(&y).get_or_zeros(&x);

    let eval = |data: Vec<f64>| -> f64 {
        let mut t = Tape::new();
        let p = t.param(&Tensor::new(point.shape().to_vec(), data));
        let v = f(&mut t, &p).item();
        assert!(v.is_finite(), "grad_check: non-finite value at perturbed point");
        v
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, uniform};

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = stream(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect())
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        for seed in 0..4 {
            let x = randn(vec![12], 100 + seed);
            let err = grad_check(
                |t, p| {
                    let sq = t.mul(p, p);
                    let s = t.sum_all(&sq);
                    t.scale(&s, 0.5)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = randn(vec![5], 7);
        let err = grad_check(|t, _| t.sum_all(&Tensor::scalar(2.5)), &x, 1e-5);
        assert_eq!(err, 0.0);
    }

    /// Every registered primitive passes finite differences at 10 random
    /// points each.
    #[test]
    fn all_primitives_pass_grad_check() {
        type Case = (&'static str, Vec<usize>, fn(&mut Tape, &Tensor) -> Tensor);
        let cases: Vec<Case> = vec![
            ("add", vec![6], |t, p| {
                let b = Tensor::new(vec![6], vec![0.3, -1.0, 2.0, 0.7, -0.2, 1.1]);
                let y = t.add(p, &b);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("sub", vec![6], |t, p| {
                let b = Tensor::new(vec![6], vec![0.3, -1.0, 2.0, 0.7, -0.2, 1.1]);
                let y = t.sub(&b, p);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("mul", vec![6], |t, p| {
                let b = Tensor::new(vec![6], vec![0.3, -1.0, 2.0, 0.7, -0.2, 1.1]);
                let y = t.mul(p, &b);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("add_n", vec![4], |t, p| {
                let a = t.scale(p, 2.0);
                let b = t.gelu(p);
                let y = t.add_n(&[&a, &b, p]);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("scale", vec![5], |t, p| {
                let y = t.scale(p, -1.7);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("add_scalar", vec![5], |t, p| {
                let y = t.add_scalar(p, 0.9);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("exp", vec![5], |t, p| {
                let y = t.exp(p);
                t.sum_all(&y)
            }),
            ("gelu", vec![7], |t, p| {
                let y = t.gelu(p);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("matmul_lhs", vec![3, 4], |t, p| {
                let b = randn(vec![4, 2], 999);
                let y = t.matmul(p, &b);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("matmul_rhs", vec![4, 2], |t, p| {
                let a = randn(vec![3, 4], 998);
                let y = t.matmul(&a, p);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("transpose", vec![3, 4], |t, p| {
                let y = t.transpose(p);
                let a = randn(vec![3, 2], 997);
                let y = t.matmul(&y, &a);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("row", vec![4, 3], |t, p| {
                let y = t.row(p, 2);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("slice_rows", vec![5, 3], |t, p| {
                let y = t.slice_rows(p, 1, 4);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("concat0", vec![2, 3], |t, p| {
                let a = randn(vec![2, 3], 996);
                let y = t.concat0(&[p, &a, p]);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("embed", vec![5, 3], |t, p| {
                let y = t.embed(p, &[4, 0, 4, 2]);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("softmax_rows", vec![3, 5], |t, p| {
                let s = t.softmax_rows(p);
                let w = randn(vec![3, 5], 995);
                let y = t.mul(&s, &w);
                t.sum_all(&y)
            }),
            ("softmax_cross_entropy", vec![6], |t, p| t.softmax_cross_entropy(p, 3)),
            ("layer_norm_input", vec![3, 6], |t, p| {
                let g = Tensor::new(vec![6], vec![1.1, 0.9, 1.3, 0.8, 1.0, 1.2]);
                let b = Tensor::new(vec![6], vec![0.1, -0.2, 0.0, 0.3, -0.1, 0.2]);
                let y = t.layer_norm(p, &g, &b, 1e-5);
                let w = randn(vec![3, 6], 994);
                let y = t.mul(&y, &w);
                t.sum_all(&y)
            }),
            ("layer_norm_affine", vec![4], |t, p| {
                let x = randn(vec![2, 4], 993);
                let beta = Tensor::new(vec![4], vec![0.0, 0.1, -0.1, 0.2]);
                let y = t.layer_norm(&x, p, &beta, 1e-5);
                let w = randn(vec![2, 4], 992);
                let y = t.mul(&y, &w);
                t.sum_all(&y)
            }),
            ("sum_all", vec![7], |t, p| {
                let y = t.mul(p, p);
                t.sum_all(&y)
            }),
            ("mean_all", vec![7], |t, p| {
                let y = t.mul(p, p);
                t.mean_all(&y)
            }),
            ("mean_rows", vec![4, 3], |t, p| {
                let y = t.mean_rows(p);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("l2_norm", vec![6], |t, p| t.l2_norm(p)),
            ("cosine_u", vec![5], |t, p| {
                let v = randn(vec![5], 991);
                t.cosine_similarity(p, &v)
            }),
            ("cosine_v", vec![5], |t, p| {
                let u = randn(vec![5], 990);
                t.cosine_similarity(&u, p)
            }),
            ("bilinear_resize", vec![3, 8, 8], |t, p| {
                let y = t.bilinear_resize(p, 5, 5);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("pad_center", vec![3, 4, 4], |t, p| {
                let y = t.pad_center(p, 8, 8);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("patchify", vec![3, 4, 4], |t, p| {
                let y = t.patchify(p, 2);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
            ("masked_add", vec![3, 2, 2], |t, p| {
                let base = randn(vec![3, 2, 2], 989);
                let mask = Tensor::new(vec![3, 2, 2], vec![1., 0., 1., 0., 0., 1., 0., 1., 1., 1., 0., 0.]);
                let y = t.masked_add(&base, p, &mask);
                let y = t.mul(&y, &y);
                t.sum_all(&y)
            }),
        ];

        for (name, shape, f) in cases {
            for pt in 0..10u64 {
                let mut r = stream(7_000 + pt);
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| uniform(&mut r, -1.5, 1.5)).collect();
                let point = Tensor::new(shape.clone(), data);
                let err = grad_check(f, &point, 1e-5);
                assert!(err < 1e-4, "{name} point {pt}: max relative error {err}");
            }
        }
    }

    /// Composite graph gradients match finite differences.
    #[test]
    fn composite_loss_matches_finite_differences() {
        let w1 = randn(vec![6, 4], 50);
        let w2 = randn(vec![4, 3], 51);
        let g = Tensor::filled(vec![4], 1.0);
        let b = Tensor::zeros(vec![4]);
        let f = move |t: &mut Tape, p: &Tensor| {
            let h = t.matmul(p, &w1);
            let h = t.layer_norm(&h, &g, &b, 1e-5);
            let h = t.gelu(&h);
            let o = t.matmul(&h, &w2);
            let r0 = t.row(&o, 0);
            let ce = t.softmax_cross_entropy(&r0, 1);
            let n = t.l2_norm(p);
            t.add(&ce, &n)
        };
        for pt in 0..5u64 {
            let x = randn(vec![2, 6], 60 + pt);
            let err = grad_check(&f, &x, 1e-5);
            assert!(err < 1e-4, "point {pt}: {err}");
        }
    }
}
