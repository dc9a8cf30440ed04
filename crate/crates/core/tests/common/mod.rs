#![allow(dead_code)]

use std::collections::BTreeMap;

use lotmerge::netspec::{ActivationTag, Checkpoint, NetworkSpec, UnitSpec};
use lotmerge::Matrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_vec(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec()).unwrap()
}

/// `Σ_k ‖X_k (T − T_k)‖²_F` computed directly from the features.
pub fn drift_objective(xs: &[Matrix], ts: &[Matrix], t: &Matrix) -> f64 {
    xs.iter()
        .zip(ts)
        .map(|(x, tk)| {
            let d = to_na(x) * (to_na(t) - to_na(tk));
            d.norm_squared()
        })
        .sum()
}

pub fn random_checkpoint(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Checkpoint {
    let params: BTreeMap<String, Matrix> = spec
        .all_units()
        .filter(|u| u.kind.has_params())
        .map(|u| (u.unit_id.clone(), uniform(rng, u.shape[0], u.shape[1])))
        .collect();
    Checkpoint::new(spec, params).unwrap()
}

/// A small trunk with `mergeable` parameterized units drawn from MatMul,
/// Scale and Bias, interleaved with activations, normalization and skips.
pub fn random_net(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize, mergeable: usize, tasks: &[(String, usize)]) -> NetworkSpec {
    let mut units = vec![UnitSpec::matmul("u0", input_dim, hidden)];
    let mut count = 1;
    while count < mergeable {
        let id = format!("u{}", units.len());
        match rng.random_range(0..3) {
            0 => units.push(UnitSpec::bias(&id, hidden)),
            1 => units.push(UnitSpec::scale(&id, hidden)),
            _ => {
                units.push(UnitSpec::matmul(&id, hidden, hidden));
                if rng.random_bool(0.5) {
                    let rid = format!("u{}", units.len());
                    units.push(UnitSpec::residual(&rid, hidden, &id));
                }
            }
        }
        count += 1;
        let id = format!("u{}", units.len());
        match rng.random_range(0..4) {
            0 => units.push(UnitSpec::activation(&id, hidden, ActivationTag::Relu)),
            1 => units.push(UnitSpec::activation(&id, hidden, ActivationTag::Gelu)),
            2 => units.push(UnitSpec::normalize(&id, hidden)),
            _ => {}
        }
    }
    let heads = tasks
        .iter()
        .map(|(t, c)| UnitSpec::head(&format!("head.{t}"), t, hidden, *c))
        .collect();
    NetworkSpec::new(input_dim, units, heads).unwrap()
}
