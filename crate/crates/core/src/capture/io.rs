//! On-disk layout for layer statistics and exemplar sets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExemplarSet, LayerStats, UnitStats};
use crate::error::Result;
use crate::netspec::io::{
    check_version, malformed, prepare_dir, read_manifest, read_matrix, read_u32s, write_f64_blob,
    write_manifest, write_u32_blob, FORMAT_VERSION, MANIFEST,
};
use crate::netspec::UnitKind;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Gram,
    GramTimesDelta,
    SqSums,
    SqSumsTimesDelta,
    BiasDelta,
}

impl StatKind {
    fn as_str(self) -> &'static str {
        match self {
            StatKind::Gram => "gram",
            StatKind::GramTimesDelta => "gram_times_delta",
            StatKind::SqSums => "sq_sums",
            StatKind::SqSumsTimesDelta => "sq_sums_times_delta",
            StatKind::BiasDelta => "bias_delta",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatEntry {
    pub unit_id: String,
    pub kind: UnitKind,
    pub stat_kind: StatKind,
    pub shape: [usize; 2],
    pub dtype: String,
    pub blob: String,
    /// Sample count behind a `bias_delta` entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsManifest {
    pub format_version: u32,
    pub content: String,
    pub task_id: String,
    pub spec_hash: String,
    pub n_samples: usize,
    pub stats: Vec<StatEntry>,
}

pub fn save_layer_stats(dir: &Path, stats: &LayerStats) -> Result<()> {
    prepare_dir(dir)?;
    let mut entries = Vec::new();
    let mut put = |unit_id: &str, kind: UnitKind, stat_kind: StatKind, m: &Matrix, count: Option<usize>| -> Result<()> {
        let blob = format!("{unit_id}.{}.bin", stat_kind.as_str());
        write_f64_blob(&dir.join(&blob), m.as_slice())?;
        entries.push(StatEntry {
            unit_id: unit_id.to_string(),
            kind,
            stat_kind,
            shape: [m.rows(), m.cols()],
            dtype: "f64".into(),
            blob,
            count,
        });
        Ok(())
    };
    for (id, u) in &stats.units {
        match u {
            UnitStats::MatMul { gram, gram_times_delta } => {
                put(id, UnitKind::MatMul, StatKind::Gram, gram, None)?;
                put(id, UnitKind::MatMul, StatKind::GramTimesDelta, gram_times_delta, None)?;
            }
            UnitStats::Scale { sq_sums, sq_sums_times_delta } => {
                put(id, UnitKind::Scale, StatKind::SqSums, sq_sums, None)?;
                put(id, UnitKind::Scale, StatKind::SqSumsTimesDelta, sq_sums_times_delta, None)?;
            }
            UnitStats::Bias { delta, count } => {
                put(id, UnitKind::Bias, StatKind::BiasDelta, delta, Some(*count))?;
            }
        }
    }
    let manifest = StatsManifest {
        format_version: FORMAT_VERSION,
        content: "layer_stats".into(),
        task_id: stats.task_id.clone(),
        spec_hash: stats.spec_hash.clone(),
        n_samples: stats.n_samples,
        stats: entries,
    };
    write_manifest(dir, &manifest)
}

pub fn load_layer_stats(dir: &Path) -> Result<LayerStats> {
    let m: StatsManifest = read_manifest(dir)?;
    check_version(&dir.join(MANIFEST), m.format_version)?;
    if m.content != "layer_stats" {
        return Err(malformed(dir, format!("expected layer_stats, found `{}`", m.content)));
    }
    let mut parts: BTreeMap<(String, StatKind), (Matrix, Option<usize>)> = BTreeMap::new();
    let mut kinds: BTreeMap<String, UnitKind> = BTreeMap::new();
    for e in &m.stats {
        if e.dtype != "f64" {
            return Err(malformed(dir, format!("`{}`: unsupported dtype {}", e.blob, e.dtype)));
        }
        let field = format!("{}.{}", e.unit_id, e.stat_kind.as_str());
        let mat = read_matrix(dir, &e.blob, &field, e.shape[0], e.shape[1])?;
        if let Some(k) = kinds.insert(e.unit_id.clone(), e.kind) {
            if k != e.kind {
                return Err(malformed(dir, format!("`{}` listed with two unit kinds", e.unit_id)));
            }
        }
        parts.insert((e.unit_id.clone(), e.stat_kind), (mat, e.count));
    }
    let mut units = BTreeMap::new();
    for (id, kind) in kinds {
        let mut take = |sk: StatKind| {
            parts
                .remove(&(id.clone(), sk))
                .ok_or_else(|| malformed(dir, format!("`{id}` lacks its {} statistic", sk.as_str())))
        };
        let stats = match kind {
            UnitKind::MatMul => UnitStats::MatMul {
                gram: take(StatKind::Gram)?.0,
                gram_times_delta: take(StatKind::GramTimesDelta)?.0,
            },
            UnitKind::Scale => UnitStats::Scale {
                sq_sums: take(StatKind::SqSums)?.0,
                sq_sums_times_delta: take(StatKind::SqSumsTimesDelta)?.0,
            },
            UnitKind::Bias => {
                let (delta, count) = take(StatKind::BiasDelta)?;
                UnitStats::Bias {
                    delta,
                    count: count.ok_or_else(|| malformed(dir, format!("`{id}` bias_delta lacks a count")))?,
                }
            }
            other => return Err(malformed(dir, format!("`{id}`: {other} units carry no statistics"))),
        };
        units.insert(id, stats);
    }
    if let Some(((id, sk), _)) = parts.into_iter().next() {
        return Err(malformed(dir, format!("stray {} statistic for `{id}`", sk.as_str())));
    }
    Ok(LayerStats {
        task_id: m.task_id,
        spec_hash: m.spec_hash,
        n_samples: m.n_samples,
        units,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarManifest {
    pub format_version: u32,
    pub content: String,
    pub task_id: String,
    pub rows: usize,
    pub cols: usize,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

pub fn save_exemplars(dir: &Path, set: &ExemplarSet) -> Result<()> {
    prepare_dir(dir)?;
    write_f64_blob(&dir.join("features.bin"), set.features.as_slice())?;
    if let Some(l) = &set.labels {
        write_u32_blob(&dir.join("labels.bin"), l)?;
    }
    let manifest = ExemplarManifest {
        format_version: FORMAT_VERSION,
        content: "exemplars".into(),
        task_id: set.task_id.clone(),
        rows: set.features.rows(),
        cols: set.features.cols(),
        features: "features.bin".into(),
        labels: set.labels.as_ref().map(|_| "labels.bin".into()),
    };
    write_manifest(dir, &manifest)
}

pub fn load_exemplars(dir: &Path) -> Result<ExemplarSet> {
    let m: ExemplarManifest = read_manifest(dir)?;
    check_version(&dir.join(MANIFEST), m.format_version)?;
    if m.content != "exemplars" {
        return Err(malformed(dir, format!("expected exemplars, found `{}`", m.content)));
    }
    let features = read_matrix(dir, &m.features, "features", m.rows, m.cols)?;
    let labels = match &m.labels {
        Some(blob) => Some(read_u32s(dir, blob, "labels", m.rows)?),
        None => None,
    };
    ExemplarSet::new(m.task_id, features, labels).map_err(|e| malformed(dir, e.to_string()))
}
