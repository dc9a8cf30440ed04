mod common;

use common::{drift_objective, random_checkpoint, random_net, rng, to_na, uniform};
use lotmerge::analysis::mean_cosine_distance;
use lotmerge::json::format_g17;
use lotmerge::merge_lot::{self, MergeConfig};
use lotmerge::netspec;
use lotmerge::tensor::{pinv, svd};
use lotmerge::Matrix;
use proptest::prelude::*;

/// `rows × cols` matrix of rank at most `rank`, with optional zero columns.
fn low_rank(seed: u64, rows: usize, cols: usize, rank: usize, zero_cols: bool) -> Matrix {
    let mut r = rng(seed);
    let m = uniform(&mut r, rows, rank).matmul(&uniform(&mut r, rank, cols)).unwrap();
    if !zero_cols {
        return m;
    }
    let mut out = m;
    for row in 0..rows {
        out.row_mut(row)[0] = 0.0;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn svd_reconstructs_low_rank(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12, rank in 1usize..12, zero in any::<bool>()) {
        let a = low_rank(seed, rows, cols, rank.min(rows).min(cols), zero);
        let f = svd(&a).unwrap();
        let k = rows.min(cols);
        let scale = a.frobenius_norm().max(1.0);
        prop_assert!(f.reconstruct().max_abs_diff(&a) <= 1e-12 * scale);
        prop_assert!(f.u.t_matmul(&f.u).unwrap().max_abs_diff(&Matrix::identity(k)) <= 1e-12);
        prop_assert!(f.vt.matmul(&f.vt.transpose()).unwrap().max_abs_diff(&Matrix::identity(k)) <= 1e-12);
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]) && f.sigma.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn pinv_satisfies_penrose_conditions(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10, rank in 1usize..10) {
        let a = low_rank(seed, rows, cols, rank.min(rows).min(cols), false);
        let p = pinv(&a, 1e-12).unwrap();
        let (an, pn) = (to_na(&a), to_na(&p));
        let tol = 1e-9 * (1.0 + an.amax()) * (1.0 + pn.amax());
        prop_assert!((&an * &pn * &an - &an).amax() <= tol);
        prop_assert!((&pn * &an * &pn - &pn).amax() <= tol * (1.0 + pn.amax()));
        let ap = &an * &pn;
        let pa = &pn * &an;
        prop_assert!((&ap - ap.transpose()).amax() <= tol);
        prop_assert!((&pa - pa.transpose()).amax() <= tol);
    }

    #[test]
    fn lot_beats_every_task_arithmetic_scale(seed in any::<u64>(), d_in in 1usize..8, d_out in 1usize..6, k in 1usize..5, lambda in 0.0f64..2.0) {
        let mut r = rng(seed);
        let xs: Vec<Matrix> = (0..k).map(|i| uniform(&mut r, 3 + i * 2, d_in)).collect();
        let ts: Vec<Matrix> = (0..k).map(|_| uniform(&mut r, d_in, d_out)).collect();
        let mut g = Matrix::zeros(d_in, d_in);
        let mut b = Matrix::zeros(d_in, d_out);
        let mut sum = Matrix::zeros(d_in, d_out);
        for (x, t) in xs.iter().zip(&ts) {
            g.axpy(1.0, &x.gram()).unwrap();
            b.axpy(1.0, &x.gram().matmul(t).unwrap()).unwrap();
            sum.axpy(1.0, t).unwrap();
        }
        let lot = merge_lot::solve_matmul(&g, &b, &MergeConfig::default()).unwrap();
        let f_lot = drift_objective(&xs, &ts, &lot);
        let f_ta = drift_objective(&xs, &ts, &sum.scale(lambda));
        prop_assert!(f_lot <= f_ta * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn lot_ignores_task_order(seed in any::<u64>(), d in 1usize..7, k in 2usize..5) {
        let mut r = rng(seed);
        let xs: Vec<Matrix> = (0..k).map(|_| uniform(&mut r, 4, d)).collect();
        let ts: Vec<Matrix> = (0..k).map(|_| uniform(&mut r, d, 3)).collect();
        let solve = |order: &[usize]| {
            let mut g = Matrix::zeros(d, d);
            let mut b = Matrix::zeros(d, 3);
            for &i in order {
                g.axpy(1.0, &xs[i].gram()).unwrap();
                b.axpy(1.0, &xs[i].gram().matmul(&ts[i]).unwrap()).unwrap();
            }
            merge_lot::solve_matmul(&g, &b, &MergeConfig::default()).unwrap()
        };
        let forward: Vec<usize> = (0..k).collect();
        let backward: Vec<usize> = (0..k).rev().collect();
        let (a, c) = (solve(&forward), solve(&backward));
        prop_assert!(a.max_abs_diff(&c) <= 1e-8 * a.max_abs().max(1.0));
    }

    #[test]
    fn scale_solution_is_a_convex_combination(seed in any::<u64>(), d in 1usize..10, k in 1usize..5) {
        let mut r = rng(seed);
        let ts: Vec<Matrix> = (0..k).map(|_| uniform(&mut r, 1, d)).collect();
        let mut sq = Matrix::zeros(1, d);
        let mut sqd = Matrix::zeros(1, d);
        for t in &ts {
            let w = uniform(&mut r, 1, d).map(|v| v * v);
            sq.axpy(1.0, &w).unwrap();
            sqd.axpy(1.0, &w.hadamard(t).unwrap()).unwrap();
        }
        let s = merge_lot::solve_scale(&sq, &sqd).unwrap();
        for c in 0..d {
            let lo = ts.iter().map(|t| t.as_slice()[c]).fold(f64::INFINITY, f64::min);
            let hi = ts.iter().map(|t| t.as_slice()[c]).fold(f64::NEG_INFINITY, f64::max);
            let v = s.as_slice()[c];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn g17_round_trips(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let text = format_g17(v);
        let back: f64 = text.parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
        let json: f64 = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(json.to_bits(), v.to_bits());
    }

    #[test]
    fn cosine_distance_ignores_positive_rescaling(seed in any::<u64>(), n in 1usize..6, d in 1usize..6, s in 0.01f64..100.0, t in 0.01f64..100.0) {
        let mut r = rng(seed);
        let a = uniform(&mut r, n, d);
        let b = uniform(&mut r, n, d);
        let base = mean_cosine_distance(&a, &b).unwrap();
        let scaled = mean_cosine_distance(&a.scale(s), &b.scale(t)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12);
        prop_assert!((0.0..=2.0).contains(&base));
    }

    #[test]
    fn task_vector_then_apply_recovers_expert(seed in any::<u64>(), units in 1usize..5) {
        let mut r = rng(seed);
        let spec = random_net(&mut r, 3, 4, units, &[]);
        let pre = random_checkpoint(&spec, &mut r);
        let expert = random_checkpoint(&spec, &mut r);
        let tv = netspec::task_vector(&expert, &pre, &spec).unwrap();
        let back = netspec::apply(&pre, &tv, 1.0).unwrap();
        for (id, w) in &expert.params {
            prop_assert!(back.params[id].max_abs_diff(w) <= 1e-12 * w.max_abs().max(1.0));
        }
    }
}
