//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, ErrorAccumulator, GradCheckReport, ZERO_ABS_TOL, ZERO_GRAD};
pub use tape::{gelu, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_slice;

/// LayerNorm epsilon used throughout the models.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn value_of(f: impl for<'t> FnOnce(&mut Tape<'t>) -> Var) -> Tensor {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.value(v).clone()
    }

    #[test]
    fn matmul_examples() {
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = value_of(|t| {
            let a = t.constant(Tensor::eye(2));
            let b = t.constant(b.clone());
            t.matmul(a, b).unwrap()
        });
        assert_eq!(out, b);

        let out = value_of(|t| {
            let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
            let b = t.constant(Tensor::zeros(&[2, 1]));
            t.matmul(a, b).unwrap()
        });
        assert_eq!(out.data(), &[0.0]);

        let out = value_of(|t| {
            let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
            let b = t.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
            t.matmul(a, b).unwrap()
        });
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    fn ln_row(x: Vec<f64>, gain: f64, eps: f64) -> Tensor {
        let d = x.len();
        value_of(|t| {
            let x = t.constant(Tensor::matrix(1, d, x).unwrap());
            let g = t.constant(Tensor::full(&[d], gain));
            let b = t.constant(Tensor::zeros(&[d]));
            t.layer_norm(x, g, b, eps).unwrap()
        })
    }

    #[test]
    fn layer_norm_examples() {
        let out = ln_row(vec![1.0, 3.0], 1.0, 1e-12);
        assert!((out.data()[0] + 1.0).abs() < 1e-9);
        assert!((out.data()[1] - 1.0).abs() < 1e-9);

        let out = ln_row(vec![2.5; 6], 1.0, LN_EPS);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let bias = Tensor::vector(vec![0.3, -0.2, 0.1]);
        let out = value_of(|t| {
            let x = t.constant(Tensor::from_rows(&[vec![1.0, 5.0, 2.0], vec![0.0, -3.0, 9.0]]).unwrap());
            let g = t.constant(Tensor::zeros(&[3]));
            let b = t.constant(bias.clone());
            t.layer_norm(x, g, b, LN_EPS).unwrap()
        });
        assert_eq!(out.row(0), bias.data());
        assert_eq!(out.row(1), bias.data());
    }

    #[test]
    fn layer_norm_rejects_degenerate_width() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 1]));
        let g = t.constant(Tensor::zeros(&[1]));
        let b = t.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            t.layer_norm(x, g, b, LN_EPS),
            Err(crate::Error::Domain(_))
        ));
    }

    fn softmax_t(w: Vec<f64>, tau: f64) -> crate::Result<Tensor> {
        let mut t = Tape::new();
        let w = t.constant(Tensor::vector(w));
        let a = t.softmax_temperature(w, tau)?;
        Ok(t.value(a).clone())
    }

    #[test]
    fn softmax_temperature_examples() {
        assert_eq!(softmax_t(vec![0.0; 4], 1.0).unwrap().data(), &[0.25; 4]);
        let a = softmax_t(vec![2f64.ln(), 0.0], 1.0).unwrap();
        assert!((a.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = softmax_t(vec![1.0, 0.0], 0.01).unwrap();
        assert!((a.data()[0] - 1.0).abs() < 1e-4 && a.data()[1] < 1e-4);
        let a = softmax_t(vec![41.0, -14.0], 0.05).unwrap();
        assert!(a.data()[1] > 0.0 && a.data()[0] == 1.0);
        assert!(matches!(softmax_t(vec![1.0], 0.0), Err(crate::Error::Domain(_))));
        assert!(softmax_t(vec![1.0], -1.0).is_err());
    }

    fn depthwise(x: Tensor, k: Tensor) -> crate::Result<Tensor> {
        let mut t = Tape::new();
        let x = t.constant(x);
        let k = t.constant(k);
        let y = t.conv1d_depthwise(x, k)?;
        Ok(t.value(y).clone())
    }

    #[test]
    fn depthwise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[7, 4]);
        let mut delta = Tensor::zeros(&[4, 3]);
        for c in 0..4 {
            delta.data_mut()[c * 3 + 1] = 1.0;
        }
        assert_eq!(depthwise(x.clone(), delta).unwrap(), x);
        let y = depthwise(x.clone(), Tensor::zeros(&[4, 5])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = depthwise(
            Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap(),
            Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);

        assert!(matches!(
            depthwise(x, Tensor::zeros(&[4, 2])),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn pointwise_examples_and_matmul_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let bias = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[4, 3]);

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let eye = t.constant(Tensor::eye(4));
        let zb = t.constant(Tensor::zeros(&[4]));
        let y = t.conv1d_pointwise(xv, eye, zb).unwrap();
        assert_eq!(t.value(y), &x);

        let zw = t.constant(Tensor::zeros(&[4, 3]));
        let bv = t.constant(bias.clone());
        let y = t.conv1d_pointwise(xv, zw, bv).unwrap();
        for i in 0..5 {
            assert_eq!(t.value(y).row(i), bias.data());
        }

        let wv = t.constant(w);
        let pw = t.conv1d_pointwise(xv, wv, bv).unwrap();
        let mm = t.matmul(xv, wv).unwrap();
        let mm = t.add_row(mm, bv).unwrap();
        assert!(t.value(pw).max_abs_diff(t.value(mm)) <= 1e-12);
    }

    fn ce(logits: Tensor, targets: &[usize], mask: &[bool]) -> crate::Result<f64> {
        let mut t = Tape::new();
        let l = t.constant(logits);
        let loss = t.cross_entropy(l, targets, mask)?;
        Ok(t.value(loss).item())
    }

    #[test]
    fn cross_entropy_examples() {
        let l = ce(Tensor::zeros(&[3, 16]), &[0, 5, 15], &[true; 3]).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
        assert!((l - 2.7726).abs() < 1e-4);

        // ln(1 + (V-1)e^-20) stays under 1e-8 for V <= 5.
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 20.0;
        assert!(ce(logits, &[2], &[true]).unwrap() < 1e-8);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 5]);
        let mut b = a.clone();
        for j in 0..5 {
            b.data_mut()[5 + j] = 100.0 * j as f64;
        }
        let mask = [true, false, true];
        assert_eq!(ce(a, &[1, 2, 3], &mask).unwrap(), ce(b, &[1, 2, 3], &mask).unwrap());

        assert!(matches!(
            ce(Tensor::zeros(&[2, 4]), &[0, 0], &[false, false]),
            Err(crate::Error::EmptyLoss)
        ));
        assert!(matches!(
            ce(Tensor::zeros(&[2, 4]), &[0, 4], &[true, true]),
            Err(crate::Error::Index { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let s = t.sum(xv);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[1.0; 6]);

        let mut t = Tape::new();
        let xv = t.leaf(x, true);
        let y = t.gelu(xv);
        let s = t.sum(y);
        let z = t.scale(s, 0.0);
        let g = t.backward(z).unwrap();
        assert!(g.get(xv).unwrap().data().iter().all(|&v| v == 0.0));

        let v = t.gelu(xv);
        assert!(matches!(t.backward(v), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn only_requires_grad_leaves_get_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let b = t.leaf(Tensor::vector(vec![3.0, 4.0]), false);
        let c = t.constant(Tensor::vector(vec![5.0, 6.0]));
        let ab = t.mul(a, b).unwrap();
        let abc = t.add(ab, c).unwrap();
        let s = t.sum(abc);
        let g = t.backward(s).unwrap();
        assert_eq!(g.populated(), 1);
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]), true);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }

    // Every primitive against central differences at step 1e-5.
    fn check(f: impl for<'t> Fn(&mut Tape<'t>, Var) -> crate::Result<Var>, x: &Tensor) {
        let r = grad_check(f, x, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let w2 = rand_tensor(&mut rng, &[6, 3]);
        let row = rand_tensor(&mut rng, &[3]);
        let other = rand_tensor(&mut rng, &[4, 3]);
        let kernels = rand_tensor(&mut rng, &[3, 3]);
        let proj = rand_tensor(&mut rng, &[4, 3]);

        // Weighted read-out so that every output element matters.
        fn readout<'t>(t: &mut Tape<'t>, y: Var, p: &Tensor) -> crate::Result<Var> {
            let pv = t.constant(p.clone());
            let prod = t.mul(y, pv)?;
            Ok(t.sum(prod))
        }

        let pm = rand_tensor(&mut rng, &[4, 5]);
        check(|t, x| { let wv = t.constant(w.clone()); let y = t.matmul(x, wv)?; readout(t, y, &pm) }, &x);
        check(|t, wv| { let xv = t.constant(x.clone()); let y = t.matmul(xv, wv)?; readout(t, y, &pm) }, &w);
        let pbt = rand_tensor(&mut rng, &[4, 6]);
        check(|t, x| { let b = t.constant(w2.clone()); let y = t.matmul_bt(x, b)?; readout(t, y, &pbt) }, &x);
        check(|t, b| { let xv = t.constant(x.clone()); let y = t.matmul_bt(xv, b)?; readout(t, y, &pbt) }, &w2);
        check(|t, x| { let o = t.constant(other.clone()); let y = t.mul(x, o)?; let y = t.sub(y, x)?; let y = t.add(y, o)?; readout(t, y, &proj) }, &x);
        check(|t, r| { let xv = t.constant(x.clone()); let y = t.add_row(xv, r)?; let y = t.mul_row(y, r)?; readout(t, y, &proj) }, &row);
        check(|t, x| { let r = t.constant(row.clone()); let y = t.mul_row(x, r)?; readout(t, y, &proj) }, &x);
        check(|t, x| { let y = t.gelu(x); let y = t.sigmoid(y); let y = t.scale(y, 1.7); readout(t, y, &proj) }, &x);
        check(|t, x| {
            let g = t.constant(row.clone());
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let y = t.layer_norm(x, g, b, LN_EPS)?;
            readout(t, y, &proj)
        }, &x);
        check(|t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let y = t.layer_norm(xv, g, b, LN_EPS)?;
            let y = t.layer_norm(y, g, g, LN_EPS)?;
            readout(t, y, &proj)
        }, &row);
        check(|t, w| {
            let a = t.softmax_temperature(w, 0.7)?;
            let p = t.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
            let y = t.mul(a, p)?;
            Ok(t.sum(y))
        }, &row);
        let sq = rand_tensor(&mut rng, &[4, 4]);
        let psq = rand_tensor(&mut rng, &[4, 4]);
        check(|t, s| { let y = t.softmax_rows(s, true)?; readout(t, y, &psq) }, &sq);
        check(|t, s| { let y = t.softmax_rows(s, false)?; readout(t, y, &psq) }, &sq);
        check(|t, x| { let k = t.constant(kernels.clone()); let y = t.conv1d_depthwise(x, k)?; readout(t, y, &proj) }, &x);
        check(|t, k| { let xv = t.constant(x.clone()); let y = t.conv1d_depthwise(xv, k)?; readout(t, y, &proj) }, &kernels);
        check(|t, x| {
            let wv = t.constant(w.clone());
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
            let y = t.conv1d_pointwise(x, wv, b)?;
            readout(t, y, &pm)
        }, &x);
        check(|t, wv| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
            let y = t.conv1d_pointwise(xv, wv, b)?;
            readout(t, y, &pm)
        }, &w);
        check(|t, b| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv1d_pointwise(xv, wv, b)?;
            readout(t, y, &pm)
        }, &Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
        check(|t, l| t.cross_entropy(l, &[1, 4, 0, 2], &[true, true, false, true]), &pm);
        check(|t, x| { let m = t.mean_rows(x); let p = t.constant(row.clone()); let y = t.mul(m, p)?; let s = t.sum(y); let mm = t.mean(x); let s = t.add(s, mm)?; Ok(s) }, &x);
        check(|t, a| {
            let h0 = t.constant(x.clone());
            let h1 = t.constant(other.clone());
            let h2 = t.constant(proj.clone());
            let y = t.weighted_sum(&[h0, h1, h2], a)?;
            readout(t, y, &proj)
        }, &row);
        check(|t, h| {
            let h1 = t.constant(other.clone());
            let a = t.constant(Tensor::vector(vec![0.3, 0.7]));
            let y = t.weighted_sum(&[h, h1], a)?;
            readout(t, y, &proj)
        }, &x);
        let pg = rand_tensor(&mut rng, &[5, 3]);
        check(|t, tab| { let y = t.gather(tab, &[0, 3, 3, 1, 0])?; readout(t, y, &pg) }, &x);
        let pc = rand_tensor(&mut rng, &[8, 3]);
        check(|t, x| {
            let o = t.constant(other.clone());
            let c = t.concat_rows(&[o, x])?;
            let s = t.slice_rows(c, 2, 5)?;
            let s = t.reshape(s, &[5, 3])?;
            let c2 = t.concat_rows(&[s, s])?;
            let c2 = t.slice_rows(c2, 0, 8)?;
            readout(t, c2, &pc)
        }, &x);
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let k = rng.random_range(1..10);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
            let tau = rng.random_range(0.05..3.0);
            let a = softmax_t(w, tau).unwrap();
            let s: f64 = a.data().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(a.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[6, 16]);
        let out = value_of(|t| {
            let x = t.constant(x.clone());
            let g = t.constant(Tensor::full(&[16], 1.0));
            let b = t.constant(Tensor::zeros(&[16]));
            t.layer_norm(x, g, b, LN_EPS).unwrap()
        });
        for i in 0..6 {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            let row = out.row(i);
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() <= 1e-10);
            // eps shrinks the variance by var/(var+eps)
            let expected = var / (var + LN_EPS);
            assert!((v - expected).abs() <= 1e-8, "{v} vs {expected}");
            assert!((v - 1.0).abs() <= LN_EPS / var + 1e-8);
        }
        // With a vanishing eps the rows are exactly standardized.
        let out = value_of(|t| {
            let x = t.constant(x.clone());
            let g = t.constant(Tensor::full(&[16], 1.0));
            let b = t.constant(Tensor::zeros(&[16]));
            t.layer_norm(x, g, b, 1e-14).unwrap()
        });
        for i in 0..6 {
            let row = out.row(i);
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() <= 1e-10 && (v - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn forwards_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let k = rand_tensor(&mut rng, &[4, 3]);
        let run = || {
            value_of(|t| {
                let xv = t.constant(x.clone());
                let kv = t.constant(k.clone());
                let y = t.conv1d_depthwise(xv, kv).unwrap();
                let y = t.gelu(y);
                let s = t.matmul_bt(y, xv).unwrap();
                t.softmax_rows(s, true).unwrap()
            })
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
