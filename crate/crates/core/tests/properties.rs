use std::collections::BTreeSet;

use proptest::prelude::*;

use hebbseed_core::data::{make_split, Dataset};
use hebbseed_core::hebbian::{HebbianLayerState, RuleKind};
use hebbseed_core::layers::ops::{batchnorm_forward, conv_forward};
use hebbseed_core::layers::{BatchNormState, BnMode};
use hebbseed_core::oracle::direct_conv2d;
use hebbseed_core::tensor::matmul;
use hebbseed_core::{Rng, Tensor};

/// Orthogonal `d×d` matrix from Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &rows {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= dot * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_rows(&rows).unwrap()
}

fn dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    Dataset::new("labels-only", Tensor::zeros(&[n, 1, 1, 1]), labels, classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn im2col_conv_equals_direct_loop(
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..9, w in 3usize..9, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut rng = Rng::new(seed);
        let x = Tensor::normal(&[b, cin, h, w], 0.0, 1.0, &mut rng);
        let wt = Tensor::normal(&[cout, cin, k, k], 0.0, 1.0, &mut rng);
        let bias = Tensor::normal(&[cout], 0.0, 1.0, &mut rng);
        let fast = conv_forward(&x, &wt, &bias, stride, pad).unwrap();
        let slow = direct_conv2d(&x, &wt, Some(&bias), (stride, stride), (pad, pad)).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-10);
    }

    #[test]
    fn linear_hpca_is_rotation_equivariant(d in 2usize..7, n in 1usize..4, batch in 1usize..5, seed in any::<u64>()) {
        let n = n.min(d);
        let mut rng = Rng::new(seed);
        let q = random_orthogonal(d, &mut rng);
        let w0 = Tensor::normal(&[n, d], 0.0, 0.3, &mut rng);
        let mut plain = HebbianLayerState::from_weights(w0.clone(), 0.01, 0.1).unwrap();
        let mut rotated = HebbianLayerState::from_weights(matmul(&w0, &q.transpose().unwrap()).unwrap(), 0.01, 0.1).unwrap();
        for _ in 0..100 {
            let x = Tensor::normal(&[batch, d], 0.0, 1.0, &mut rng);
            let xq = matmul(&x, &q.transpose().unwrap()).unwrap();
            let dp = plain.batch_delta(&x, RuleKind::LinearHpca).unwrap();
            plain.apply(&dp).unwrap();
            let dr = rotated.batch_delta(&xq, RuleKind::LinearHpca).unwrap();
            rotated.apply(&dr).unwrap();
        }
        let expected = matmul(plain.weights(), &q.transpose().unwrap()).unwrap();
        prop_assert!(rotated.weights().max_abs_diff(&expected) < 1e-8);
    }

    #[test]
    fn splits_are_disjoint_and_nested(
        n in 40usize..400, classes in 2usize..11, seed in any::<u64>(),
        r1 in 1.0f64..100.0, r2 in 1.0f64..100.0, val in 0.0f64..0.5,
    ) {
        let ds = dataset(n, classes, seed);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let (Ok(a), Ok(b)) = (make_split(&ds, val, lo, seed), make_split(&ds, val, hi, seed)) else {
            // Too few training samples for one labeled example.
            return Ok(());
        };
        let lab: BTreeSet<usize> = b.labeled_idx.iter().copied().collect();
        let unl: BTreeSet<usize> = b.unlabeled_idx.iter().copied().collect();
        let vs: BTreeSet<usize> = b.val_idx.iter().copied().collect();
        prop_assert!(lab.is_disjoint(&unl) && lab.is_disjoint(&vs) && unl.is_disjoint(&vs));
        prop_assert_eq!(lab.len() + unl.len() + vs.len(), n);
        prop_assert_eq!(&a.val_idx, &b.val_idx);
        prop_assert!(a.labeled_idx.iter().all(|i| lab.contains(i)));
        prop_assert_eq!(a.train_idx(), b.train_idx());
    }

    #[test]
    fn batchnorm_preserves_orderings(b in 2usize..8, c in 1usize..5, hw in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::normal(&[b, c, hw, hw], 0.5, 2.0, &mut rng);
        for mode in [BnMode::Standard, BnMode::VarianceAveraged] {
            let mut state = BatchNormState::new(c);
            let y = batchnorm_forward(&x, &mut state, mode, true).unwrap();
            let per = hw * hw;
            let var = |t: &Tensor, ch: usize| {
                let v: Vec<f64> = (0..b).flat_map(|s| t.data()[(s * c + ch) * per..(s * c + ch + 1) * per].to_vec()).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
            };
            if mode == BnMode::VarianceAveraged {
                for i in 0..c {
                    for j in 0..c {
                        if var(&x, i) < var(&x, j) {
                            prop_assert!(var(&y, i) <= var(&y, j));
                        }
                    }
                }
            }
            for ch in 0..c {
                let gather = |t: &Tensor| -> Vec<f64> {
                    (0..b).flat_map(|s| t.data()[(s * c + ch) * per..(s * c + ch + 1) * per].to_vec()).collect()
                };
                let (xs, ys) = (gather(&x), gather(&y));
                for i in 0..xs.len() {
                    for j in 0..xs.len() {
                        if xs[i] < xs[j] {
                            prop_assert!(ys[i] <= ys[j]);
                        }
                    }
                }
            }
        }
    }
}
