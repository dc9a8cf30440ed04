//! Network description, parameter containers and task-vector arithmetic.
//!
//! A [`NetworkSpec`] is a flat, ordered list of primitive units. Composite
//! layers are expected to arrive already decomposed: a linear layer is a
//! `MatMul` unit followed by a `Bias` unit, a layer norm is `Normalize` →
//! `Scale` → `Bias`, and attention projections are independent `MatMul`s.
//! Per-task classification heads live outside the trunk as `Frozen` units.

pub mod io;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::json;
use crate::tensor::Matrix;

/// Epsilon inside the row standardization of `Normalize` units.
pub const NORMALIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    /// `X · W`, parameter shape `[d_in, d_out]`.
    MatMul,
    /// Row-wise Hadamard product with a `[1, d]` parameter.
    Scale,
    /// Row-wise addition of a `[1, d]` parameter.
    Bias,
    /// Per-row mean/variance standardization; no parameters.
    Normalize,
    /// Element-wise nonlinearity selected by [`ActivationTag`].
    Activation,
    /// Adds the saved input of an earlier unit (`source`).
    Residual,
    /// A `MatMul`-shaped parameter that never participates in merging.
    Frozen,
}

impl UnitKind {
    /// Carries parameters that the mergers solve for.
    pub fn is_mergeable(self) -> bool {
        matches!(self, UnitKind::MatMul | UnitKind::Scale | UnitKind::Bias)
    }

    pub fn has_params(self) -> bool {
        self.is_mergeable() || self == UnitKind::Frozen
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::MatMul => "mat_mul",
            UnitKind::Scale => "scale",
            UnitKind::Bias => "bias",
            UnitKind::Normalize => "normalize",
            UnitKind::Activation => "activation",
            UnitKind::Residual => "residual",
            UnitKind::Frozen => "frozen",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationTag {
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Identity,
}

fn default_dtype() -> String {
    "f64".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub unit_id: String,
    pub kind: UnitKind,
    /// Parameter shape for parameterized units; `[1, d]` feature width
    /// for the parameter-free ones.
    pub shape: [usize; 2],
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationTag>,
    /// Residual units only: the unit whose *input* is added back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Heads only: the task this head scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl UnitSpec {
    fn base(unit_id: &str, kind: UnitKind, shape: [usize; 2]) -> Self {
        Self {
            unit_id: unit_id.to_string(),
            kind,
            shape,
            dtype: default_dtype(),
            activation: None,
            source: None,
            task: None,
        }
    }

    pub fn matmul(unit_id: &str, d_in: usize, d_out: usize) -> Self {
        Self::base(unit_id, UnitKind::MatMul, [d_in, d_out])
    }

    pub fn frozen(unit_id: &str, d_in: usize, d_out: usize) -> Self {
        Self::base(unit_id, UnitKind::Frozen, [d_in, d_out])
    }

    pub fn scale(unit_id: &str, d: usize) -> Self {
        Self::base(unit_id, UnitKind::Scale, [1, d])
    }

    pub fn bias(unit_id: &str, d: usize) -> Self {
        Self::base(unit_id, UnitKind::Bias, [1, d])
    }

    pub fn normalize(unit_id: &str, d: usize) -> Self {
        Self::base(unit_id, UnitKind::Normalize, [1, d])
    }

    pub fn activation(unit_id: &str, d: usize, tag: ActivationTag) -> Self {
        Self {
            activation: Some(tag),
            ..Self::base(unit_id, UnitKind::Activation, [1, d])
        }
    }

    pub fn residual(unit_id: &str, d: usize, source: &str) -> Self {
        Self {
            source: Some(source.to_string()),
            ..Self::base(unit_id, UnitKind::Residual, [1, d])
        }
    }

    pub fn head(unit_id: &str, task: &str, d_in: usize, classes: usize) -> Self {
        Self {
            task: Some(task.to_string()),
            ..Self::base(unit_id, UnitKind::Frozen, [d_in, classes])
        }
    }

    /// Feature width this unit consumes.
    pub fn input_width(&self) -> usize {
        match self.kind {
            UnitKind::MatMul | UnitKind::Frozen => self.shape[0],
            _ => self.shape[1],
        }
    }

    /// Feature width this unit produces.
    pub fn output_width(&self) -> usize {
        self.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub units: Vec<UnitSpec>,
    #[serde(default)]
    pub heads: Vec<UnitSpec>,
}

impl NetworkSpec {
    /// Validates and returns the spec.
    pub fn new(
        input_dim: usize,
        units: Vec<UnitSpec>,
        heads: Vec<UnitSpec>,
    ) -> Result<Self> {
        let output_dim = units.last().map_or(input_dim, |u| u.output_width());
        let spec = Self {
            input_dim,
            output_dim,
            units,
            heads,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        let mut seen = HashSet::new();
        for u in self.units.iter().chain(&self.heads) {
            if u.unit_id.is_empty()
                || !u
                    .unit_id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            {
                return bad(format!("unit id `{}` must match [A-Za-z0-9_.-]+", u.unit_id));
            }
            if !seen.insert(u.unit_id.as_str()) {
                return bad(format!("duplicate unit id `{}`", u.unit_id));
            }
            if u.dtype != "f64" {
                return bad(format!("unit `{}`: unsupported dtype `{}`", u.unit_id, u.dtype));
            }
            if u.shape[0] == 0 || u.shape[1] == 0 {
                return bad(format!("unit `{}` has an empty shape", u.unit_id));
            }
            if !matches!(u.kind, UnitKind::MatMul | UnitKind::Frozen) && u.shape[0] != 1 {
                return bad(format!("unit `{}`: shape must be [1, d]", u.unit_id));
            }
            if (u.kind == UnitKind::Activation) != u.activation.is_some() {
                return bad(format!(
                    "unit `{}`: activation tag is required on activation units only",
                    u.unit_id
                ));
            }
            if (u.kind == UnitKind::Residual) != u.source.is_some() {
                return bad(format!(
                    "unit `{}`: source is required on residual units only",
                    u.unit_id
                ));
            }
        }

        let mut width = self.input_dim;
        let mut input_widths: BTreeMap<&str, usize> = BTreeMap::new();
        for u in &self.units {
            if u.task.is_some() {
                return bad(format!("trunk unit `{}` must not carry a task", u.unit_id));
            }
            if u.input_width() != width {
                return bad(format!(
                    "unit `{}` expects width {} but receives {width}",
                    u.unit_id,
                    u.input_width()
                ));
            }
            if let Some(src) = &u.source {
                match input_widths.get(src.as_str()) {
                    Some(&w) if w == width => {}
                    Some(&w) => {
                        return bad(format!(
                            "residual `{}` adds width {w} onto width {width}",
                            u.unit_id
                        ))
                    }
                    None => {
                        return bad(format!(
                            "residual `{}` refers to `{src}`, which is not an earlier unit",
                            u.unit_id
                        ))
                    }
                }
            }
            input_widths.insert(&u.unit_id, width);
            width = u.output_width();
        }
        if width != self.output_dim {
            return bad(format!(
                "output_dim {} does not match the last unit width {width}",
                self.output_dim
            ));
        }
        let mut tasks = HashSet::new();
        for h in &self.heads {
            if h.kind != UnitKind::Frozen {
                return bad(format!("head `{}` must be frozen", h.unit_id));
            }
            if h.shape[0] != self.output_dim {
                return bad(format!(
                    "head `{}` expects width {} but the trunk produces {}",
                    h.unit_id, h.shape[0], self.output_dim
                ));
            }
            let Some(task) = &h.task else {
                return bad(format!("head `{}` has no task", h.unit_id));
            };
            if !tasks.insert(task.as_str()) {
                return bad(format!("two heads for task `{task}`"));
            }
        }
        Ok(())
    }

    /// Trunk units followed by heads.
    pub fn all_units(&self) -> impl Iterator<Item = &UnitSpec> {
        self.units.iter().chain(&self.heads)
    }

    pub fn unit(&self, unit_id: &str) -> Option<&UnitSpec> {
        self.all_units().find(|u| u.unit_id == unit_id)
    }

    pub fn mergeable_units(&self) -> impl Iterator<Item = &UnitSpec> {
        self.units.iter().filter(|u| u.kind.is_mergeable())
    }

    pub fn head_for_task(&self, task: &str) -> Option<&UnitSpec> {
        self.heads.iter().find(|h| h.task.as_deref() == Some(task))
    }

    /// SHA-256 (hex) of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = json::to_canonical_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Parameters of one network, keyed by unit id.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: String,
    pub params: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    /// Checks that every parameterized unit has exactly one finite entry of
    /// the declared shape and nothing else is present.
    pub fn new(spec: &NetworkSpec, params: BTreeMap<String, Matrix>) -> Result<Self> {
        for u in spec.all_units().filter(|u| u.kind.has_params()) {
            let Some(m) = params.get(&u.unit_id) else {
                return Err(Error::Incompatible(format!("missing parameter `{}`", u.unit_id)));
            };
            check_param_shape(u, m)?;
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}`", u.unit_id)));
            }
        }
        let expected = spec.all_units().filter(|u| u.kind.has_params()).count();
        if params.len() != expected {
            let extra: Vec<_> = params
                .keys()
                .filter(|k| spec.unit(k).is_none_or(|u| !u.kind.has_params()))
                .collect();
            return Err(Error::Incompatible(format!("unexpected parameters {extra:?}")));
        }
        Ok(Self {
            spec_hash: spec.hash(),
            params,
        })
    }

    pub fn param(&self, unit_id: &str) -> Option<&Matrix> {
        self.params.get(unit_id)
    }

    pub(crate) fn expect_param(&self, unit_id: &str) -> Result<&Matrix> {
        self.params
            .get(unit_id)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks `{unit_id}`")))
    }

    pub fn ensure_spec(&self, spec: &NetworkSpec) -> Result<()> {
        ensure_hash(&self.spec_hash, spec, "checkpoint")
    }
}

/// Per-unit parameter deltas `W_k − W_pre`. Units without an entry are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub spec_hash: String,
    pub deltas: BTreeMap<String, Matrix>,
}

impl TaskVector {
    /// Validates that deltas only touch mergeable units, with matching shapes.
    pub fn new(spec: &NetworkSpec, deltas: BTreeMap<String, Matrix>) -> Result<Self> {
        for (id, m) in &deltas {
            let u = spec
                .unit(id)
                .ok_or_else(|| Error::Incompatible(format!("task vector names unknown unit `{id}`")))?;
            if !u.kind.is_mergeable() {
                return Err(Error::Incompatible(format!(
                    "task vector carries a delta for {} unit `{id}`",
                    u.kind
                )));
            }
            check_param_shape(u, m)?;
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("delta `{id}`")));
            }
        }
        Ok(Self {
            spec_hash: spec.hash(),
            deltas,
        })
    }

    /// All-zero deltas for every mergeable unit.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let deltas = spec
            .mergeable_units()
            .map(|u| (u.unit_id.clone(), Matrix::zeros(u.shape[0], u.shape[1])))
            .collect();
        Self {
            spec_hash: spec.hash(),
            deltas,
        }
    }

    pub fn delta(&self, unit_id: &str) -> Option<&Matrix> {
        self.deltas.get(unit_id)
    }

    /// Delta for `unit`, materializing zeros for absent entries.
    pub fn delta_or_zero(&self, unit: &UnitSpec) -> Matrix {
        self.deltas
            .get(&unit.unit_id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(unit.shape[0], unit.shape[1]))
    }

    pub fn scaled(&self, lambda: f64) -> TaskVector {
        TaskVector {
            spec_hash: self.spec_hash.clone(),
            deltas: self
                .deltas
                .iter()
                .map(|(k, v)| (k.clone(), v.scale(lambda)))
                .collect(),
        }
    }

    pub fn ensure_spec(&self, spec: &NetworkSpec) -> Result<()> {
        ensure_hash(&self.spec_hash, spec, "task vector")
    }
}

fn ensure_hash(hash: &str, spec: &NetworkSpec, what: &str) -> Result<()> {
    let want = spec.hash();
    if hash != want {
        return Err(Error::Incompatible(format!(
            "{what} was built for spec {hash}, expected {want}"
        )));
    }
    Ok(())
}

fn check_param_shape(u: &UnitSpec, m: &Matrix) -> Result<()> {
    if m.shape() != (u.shape[0], u.shape[1]) {
        return Err(Error::Incompatible(format!(
            "`{}` has shape {:?}, spec says {:?}",
            u.unit_id,
            m.shape(),
            u.shape
        )));
    }
    Ok(())
}

/// `T_k = W_k − W_pre` over the mergeable units.
///
/// Frozen parameters must agree between the two checkpoints.
pub fn task_vector(expert: &Checkpoint, pretrained: &Checkpoint, spec: &NetworkSpec) -> Result<TaskVector> {
    expert.ensure_spec(spec)?;
    pretrained.ensure_spec(spec)?;
    let mut deltas = BTreeMap::new();
    for u in spec.all_units().filter(|u| u.kind.has_params()) {
        let e = expert.expect_param(&u.unit_id)?;
        let p = pretrained.expect_param(&u.unit_id)?;
        if u.kind.is_mergeable() {
            deltas.insert(u.unit_id.clone(), e.sub(p)?);
        } else if e != p {
            return Err(Error::Incompatible(format!(
                "frozen unit `{}` differs between expert and pretrained",
                u.unit_id
            )));
        }
    }
    Ok(TaskVector {
        spec_hash: spec.hash(),
        deltas,
    })
}

/// `W_pre + λ·T`; frozen units are copied unchanged.
pub fn apply(pretrained: &Checkpoint, tv: &TaskVector, lambda: f64) -> Result<Checkpoint> {
    if pretrained.spec_hash != tv.spec_hash {
        return Err(Error::Incompatible(
            "task vector and checkpoint were built for different specs".into(),
        ));
    }
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite, got {lambda}")));
    }
    let mut params = pretrained.params.clone();
    for (id, delta) in &tv.deltas {
        let w = params
            .get_mut(id)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks `{id}`")))?;
        if lambda == 0.0 {
            continue;
        }
        if lambda == 1.0 {
            *w = w.add(delta)?;
        } else {
            w.axpy(lambda, delta)?;
        }
    }
    Ok(Checkpoint {
        spec_hash: pretrained.spec_hash.clone(),
        params,
    })
}

/// `λ · Σ_k T_k`, element-wise over the union of units.
pub fn scale_sum(tvs: &[TaskVector], lambda: f64) -> Result<TaskVector> {
    let first = tvs
        .first()
        .ok_or_else(|| Error::InvalidArgument("scale_sum needs at least one task vector".into()))?;
    if tvs.iter().any(|t| t.spec_hash != first.spec_hash) {
        return Err(Error::Incompatible("task vectors come from different specs".into()));
    }
    let mut acc: BTreeMap<String, Matrix> = BTreeMap::new();
    for tv in tvs {
        for (id, d) in &tv.deltas {
            match acc.get_mut(id) {
                Some(a) => a.axpy(1.0, d)?,
                None => {
                    acc.insert(id.clone(), d.clone());
                }
            }
        }
    }
    Ok(TaskVector {
        spec_hash: first.spec_hash.clone(),
        deltas: acc.into_iter().map(|(k, v)| (k, v.scale(lambda))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(
            2,
            vec![
                UnitSpec::matmul("fc", 2, 3),
                UnitSpec::bias("fc.bias", 3),
                UnitSpec::activation("act", 3, ActivationTag::Relu),
            ],
            vec![UnitSpec::head("head.a", "a", 3, 2)],
        )
        .unwrap()
    }

    fn ckpt(spec: &NetworkSpec, fill: f64) -> Checkpoint {
        let params = spec
            .all_units()
            .filter(|u| u.kind.has_params())
            .map(|u| {
                let v = if u.kind == UnitKind::Frozen { 0.25 } else { fill };
                (u.unit_id.clone(), Matrix::from_vec(u.shape[0], u.shape[1], vec![v; u.shape[0] * u.shape[1]]).unwrap())
            })
            .collect();
        Checkpoint::new(spec, params).unwrap()
    }

    #[test]
    fn spec_validation_catches_width_mismatch() {
        let err = NetworkSpec::new(
            2,
            vec![UnitSpec::matmul("a", 2, 3), UnitSpec::bias("b", 4)],
            vec![],
        );
        assert!(matches!(err, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn spec_validation_checks_residual_source() {
        let ok = NetworkSpec::new(
            3,
            vec![UnitSpec::matmul("a", 3, 3), UnitSpec::residual("r", 3, "a")],
            vec![],
        );
        assert!(ok.is_ok());
        let fwd = NetworkSpec::new(
            3,
            vec![UnitSpec::residual("r", 3, "a"), UnitSpec::matmul("a", 3, 3)],
            vec![],
        );
        assert!(fwd.is_err());
    }

    #[test]
    fn spec_rejects_duplicate_and_unsafe_ids() {
        assert!(NetworkSpec::new(2, vec![UnitSpec::bias("x", 2), UnitSpec::bias("x", 2)], vec![]).is_err());
        assert!(NetworkSpec::new(2, vec![UnitSpec::bias("../x", 2)], vec![]).is_err());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = tiny_spec();
        assert_eq!(a.hash(), tiny_spec().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.units[0].unit_id = "fc0".into();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn task_vector_of_self_is_zero() {
        let spec = tiny_spec();
        let p = ckpt(&spec, 0.5);
        let tv = task_vector(&p, &p, &spec).unwrap();
        assert!(tv.deltas.values().all(|d| d.max_abs() == 0.0));
        assert!(!tv.deltas.contains_key("head.a"));
    }

    #[test]
    fn single_unit_delta_and_apply() {
        let spec = NetworkSpec::new(1, vec![UnitSpec::matmul("w", 1, 1)], vec![]).unwrap();
        let mk = |v: f64| {
            Checkpoint::new(&spec, [("w".to_string(), Matrix::from_rows(&[[v]]))].into()).unwrap()
        };
        let tv = task_vector(&mk(2.0), &mk(0.5), &spec).unwrap();
        assert_eq!(tv.deltas["w"], Matrix::from_rows(&[[1.5]]));

        let one = TaskVector::new(&spec, [("w".to_string(), Matrix::from_rows(&[[1.0]]))].into()).unwrap();
        assert_eq!(apply(&mk(3.0), &one, 2.0).unwrap().params["w"], Matrix::from_rows(&[[5.0]]));
        assert_eq!(apply(&mk(3.0), &one, 0.0).unwrap(), mk(3.0));
    }

    #[test]
    fn scale_sum_examples() {
        let spec = NetworkSpec::new(1, vec![UnitSpec::matmul("w", 1, 1)], vec![]).unwrap();
        let tv = |v: f64| TaskVector::new(&spec, [("w".to_string(), Matrix::from_rows(&[[v]]))].into()).unwrap();
        let s = scale_sum(&[tv(1.0), tv(2.0)], 0.5).unwrap();
        assert_eq!(s.deltas["w"], Matrix::from_rows(&[[1.5]]));
        assert_eq!(scale_sum(&[tv(4.0)], 1.0).unwrap(), tv(4.0));
        assert!(matches!(scale_sum(&[], 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frozen_mismatch_is_rejected() {
        let spec = tiny_spec();
        let p = ckpt(&spec, 0.5);
        let mut e = ckpt(&spec, 1.0);
        e.params.insert("head.a".into(), Matrix::zeros(3, 2));
        assert!(matches!(task_vector(&e, &p, &spec), Err(Error::Incompatible(_))));
    }

    #[test]
    fn apply_rejects_foreign_task_vector() {
        let spec = tiny_spec();
        let other = NetworkSpec::new(1, vec![UnitSpec::matmul("w", 1, 1)], vec![]).unwrap();
        let tv = TaskVector::zeros(&other);
        assert!(apply(&ckpt(&spec, 0.0), &tv, 1.0).is_err());
    }

    #[test]
    fn checkpoint_rejects_missing_and_extra_params() {
        let spec = tiny_spec();
        let mut p = ckpt(&spec, 0.5).params;
        p.remove("fc.bias");
        assert!(Checkpoint::new(&spec, p.clone()).is_err());
        p.insert("fc.bias".into(), Matrix::zeros(1, 3));
        p.insert("ghost".into(), Matrix::zeros(1, 1));
        assert!(Checkpoint::new(&spec, p).is_err());
    }
}
