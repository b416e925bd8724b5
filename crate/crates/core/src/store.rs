//! On-disk knowledge-base layout: one metadata document at the root plus one
//! CSV per sample at `<group>/<device>/<regime>/<sample-id>.csv`.
//!
//! Sample files hold a mandatory header (`timestamp` then the schema
//! variables in order) and values in the canonical decimal form from
//! `matrix::format_value`. The metadata document records the schema, format
//! version, column statistics, the covariate-weight cache, and the sample
//! manifest in ingestion order.
//!
//! Saved statistics are computed over the canonical (as-written) values, so
//! a load can re-derive them and compare exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{ColumnStats, HierarchicalPath, KbBuilder, KbConfig, KnowledgeBase, RegimeSample};
use crate::matrix::{canonicalize_value, format_value, parse_value, Matrix};
use crate::par;
use crate::schema::VariableSchema;
use crate::weighting::CovariateWeights;

pub const META_FILE: &str = "kb_meta.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaDoc {
    format_version: u32,
    schema: VariableSchema,
    config: KbConfig,
    stats: ColumnStats,
    covariate_weights: CovariateWeights,
    samples: Vec<String>,
}

/// Path of a sample file under the store root.
pub fn sample_file(root: &Path, path: &HierarchicalPath) -> PathBuf {
    let segs = path.segments();
    let mut p = root.to_path_buf();
    for s in &segs[..segs.len() - 1] {
        p.push(s);
    }
    p.push(format!("{}.csv", segs.last().expect("non-empty path")));
    p
}

/// Write one sample CSV (creating parent directories). Shared by the store
/// and the synthetic generator.
pub fn write_sample_csv(
    root: &Path,
    schema: &VariableSchema,
    path: &HierarchicalPath,
    timestamps: &[f64],
    values: &Matrix,
) -> Result<()> {
    let file = sample_file(root, path);
    if let Some(parent) = file.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = String::with_capacity(32 * (values.rows() + 1) * (values.cols() + 1));
    out.push_str("timestamp");
    for name in schema.names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..values.rows() {
        out.push_str(&format_value(timestamps[r]));
        for c in 0..values.cols() {
            out.push(',');
            out.push_str(&format_value(values.get(r, c)));
        }
        out.push('\n');
    }
    fs::write(&file, out).map_err(|e| Error::io(&file, e))
}

/// Read one sample CSV, validating the header against the schema.
pub fn read_sample_csv(
    file: &Path,
    schema: &VariableSchema,
) -> Result<(Vec<f64>, Matrix)> {
    let corrupt = |msg: String| Error::CorruptStore(format!("{}: {msg}", file.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| corrupt(e.to_string()))?;
    let headers = reader.headers().map_err(|e| corrupt(e.to_string()))?.clone();
    let expected: Vec<&str> = std::iter::once("timestamp")
        .chain(schema.names())
        .collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(corrupt(format!(
            "header {got:?} does not match schema {expected:?}"
        )));
    }
    let mut timestamps = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| corrupt(e.to_string()))?;
        if record.len() != expected.len() {
            return Err(corrupt(format!("row {i} has {} fields", record.len())));
        }
        timestamps.push(
            parse_value(&record[0]).map_err(|_| corrupt(format!("row {i} timestamp")))?,
        );
        let mut row = Vec::with_capacity(schema.var_count());
        for c in 0..schema.var_count() {
            row.push(
                parse_value(&record[c + 1])
                    .map_err(|_| corrupt(format!("row {i} column {}", expected[c + 1])))?,
            );
        }
        rows.push(row);
    }
    let values = Matrix::from_rows(rows).map_err(|e| corrupt(e.to_string()))?;
    Ok((timestamps, values))
}

/// Persist a knowledge base under `root`.
pub fn save_kb(kb: &KnowledgeBase, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    // Canonicalize through the textual form so the recorded statistics match
    // what a loader will recompute from the files.
    let canonical: Vec<RegimeSample> = par::map_threshold(kb.samples(), 64, |s| RegimeSample {
        path: s.path.clone(),
        values: Matrix::from_vec(
            s.values.rows(),
            s.values.cols(),
            s.values.data().iter().map(|&v| canonicalize_value(v)).collect(),
        )
        .expect("same shape"),
        timestamps: s.timestamps.iter().map(|&t| canonicalize_value(t)).collect(),
    });
    let stats = ColumnStats::compute(&canonical, kb.schema().var_count());
    let meta = MetaDoc {
        format_version: FORMAT_VERSION,
        schema: kb.schema().clone(),
        config: kb.config().clone(),
        stats,
        covariate_weights: kb.covariate_weights().clone(),
        samples: kb.samples().iter().map(|s| s.path.to_string()).collect(),
    };
    write_meta_doc(&meta, root)?;
    par::try_map_threshold(&canonical, 64, |s| {
        write_sample_csv(root, kb.schema(), &s.path, &s.timestamps, &s.values)
    })?;
    Ok(())
}

/// Write only the metadata document for a KB whose sample files already live
/// under `root` (the ingest-from-directory path).
pub fn write_meta(kb: &KnowledgeBase, root: &Path) -> Result<()> {
    let meta = MetaDoc {
        format_version: FORMAT_VERSION,
        schema: kb.schema().clone(),
        config: kb.config().clone(),
        stats: kb.stats().clone(),
        covariate_weights: kb.covariate_weights().clone(),
        samples: kb.samples().iter().map(|s| s.path.to_string()).collect(),
    };
    write_meta_doc(&meta, root)
}

fn write_meta_doc(meta: &MetaDoc, root: &Path) -> Result<()> {
    let file = root.join(META_FILE);
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::CorruptStore(format!("serializing metadata: {e}")))?;
    fs::write(&file, text).map_err(|e| Error::io(&file, e))
}

/// Load a knowledge base from `root`. Statistics are re-derived from the
/// sample files and must match the saved ones within 1e-12; the covariate
/// weight cache is taken from the metadata document.
pub fn load_kb(root: &Path) -> Result<KnowledgeBase> {
    let meta_path = root.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| {
        Error::CorruptStore(format!("missing metadata {}: {e}", meta_path.display()))
    })?;
    let meta: MetaDoc = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptStore(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let loaded: Vec<(HierarchicalPath, Vec<f64>, Matrix)> =
        par::try_map_threshold(&meta.samples, 64, |p| {
            let hp = HierarchicalPath::parse(p)
                .map_err(|e| Error::CorruptStore(format!("manifest entry {p:?}: {e}")))?;
            let (ts, values) = read_sample_csv(&sample_file(root, &hp), &meta.schema)?;
            Ok((hp, ts, values))
        })?;
    let mut builder = KbBuilder::new(meta.schema.clone(), meta.config.clone());
    for (hp, ts, values) in loaded {
        builder
            .ingest(hp, values, ts)
            .map_err(|e| Error::CorruptStore(e.to_string()))?;
    }
    let kb = builder.finalize_with_cached(Some(meta.covariate_weights))?;
    for (got, saved) in kb
        .stats()
        .mean
        .iter()
        .chain(kb.stats().std.iter())
        .zip(meta.stats.mean.iter().chain(meta.stats.std.iter()))
    {
        if (got - saved).abs() > 1e-12 {
            return Err(Error::CorruptStore(format!(
                "re-derived statistics {got} drifted from saved {saved}"
            )));
        }
    }
    Ok(kb)
}

/// Ingest every `*.csv` under `root` (except the metadata and labels files)
/// into a fresh KB, in lexicographic path order.
pub fn ingest_directory(
    root: &Path,
    schema: &VariableSchema,
    config: KbConfig,
    truncate_tail: bool,
) -> Result<KnowledgeBase> {
    let mut files = Vec::new();
    collect_sample_files(root, root, &mut files)?;
    files.sort();
    let mut builder = KbBuilder::new(schema.clone(), config).truncate_tail(truncate_tail);
    for rel in &files {
        let segments: Vec<String> = rel
            .iter()
            .map(|c| c.to_string_lossy().into_owned())
            .collect();
        let mut segments = segments;
        let last = segments.last_mut().expect("non-empty");
        *last = last.trim_end_matches(".csv").to_string();
        let hp = HierarchicalPath::new(segments)?;
        let (ts, values) = read_sample_csv(&root.join(rel), schema)?;
        builder.ingest(hp, values, ts)?;
    }
    builder.finalize()
}

fn collect_sample_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_sample_files(root, &path, out)?;
        } else if path.extension().map_or(false, |e| e == "csv") {
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            if name == "labels.csv" && path.parent() == Some(root) {
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::CorruptStore(format!("{} outside root", path.display())))?;
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

/// Flight health labels beside the store (`labels.csv`: path,label).
pub fn write_labels(root: &Path, labels: &[(String, bool)]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut out = String::from("path,label\n");
    for (path, faulty) in labels {
        out.push_str(path);
        out.push(',');
        out.push_str(if *faulty { "faulty" } else { "healthy" });
        out.push('\n');
    }
    let file = root.join("labels.csv");
    fs::write(&file, out).map_err(|e| Error::io(&file, e))
}

pub fn read_labels(root: &Path) -> Result<HashMap<String, bool>> {
    let file = root.join("labels.csv");
    let corrupt = |msg: String| Error::CorruptStore(format!("{}: {msg}", file.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(&file)
        .map_err(|e| corrupt(e.to_string()))?;
    let mut labels = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| corrupt(e.to_string()))?;
        if record.len() != 2 {
            return Err(corrupt(format!("expected 2 fields, got {}", record.len())));
        }
        let faulty = match &record[1] {
            "faulty" => true,
            "healthy" => false,
            other => return Err(corrupt(format!("unknown label {other:?}"))),
        };
        labels.insert(record[0].to_string(), faulty);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbBuilder;
    use crate::schema::Variable;
    use tempfile::tempdir;

    fn schema() -> VariableSchema {
        VariableSchema::new(vec![
            Variable::target("MP", "psi"),
            Variable::covariate("IP", "psi"),
            Variable::covariate("N2", "%rpm"),
        ])
        .unwrap()
    }

    fn canonical_kb(n: usize) -> KnowledgeBase {
        let mut b = KbBuilder::new(schema(), KbConfig { regime_len: 18, mi_bins: Some(3) });
        for i in 0..n {
            let rows: Vec<Vec<f64>> = (0..18)
                .map(|r| {
                    vec![
                        canonicalize_value(1.0 + i as f64 * 0.37 + r as f64 * 0.011),
                        canonicalize_value(2.0 + (i * r) as f64 * 0.003),
                        canonicalize_value(60.0 + r as f64 * 1.7 - i as f64 * 0.09),
                    ]
                })
                .collect();
            let ts: Vec<f64> = (0..18).map(|r| i as f64 * 100.0 + r as f64 * 0.5).collect();
            b.ingest(
                HierarchicalPath::parse(&format!("B777/tail{:02}/takeoff/f{i:04}", i % 3)).unwrap(),
                Matrix::from_rows(rows).unwrap(),
                ts,
            )
            .unwrap();
        }
        b.finalize().unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let kb = canonical_kb(10);
        let dir = tempdir().unwrap();
        save_kb(&kb, dir.path()).unwrap();
        let loaded = load_kb(dir.path()).unwrap();
        assert_eq!(loaded.len(), kb.len());
        for (a, b) in kb.samples().iter().zip(loaded.samples()) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.timestamps, b.timestamps);
            assert_eq!(a.values, b.values);
        }
        assert_eq!(loaded.covariate_weights(), kb.covariate_weights());
    }

    #[test]
    fn empty_store_loads_as_schema_only() {
        let b = KbBuilder::new(schema(), KbConfig::default());
        let kb = b.finalize().unwrap();
        let dir = tempdir().unwrap();
        save_kb(&kb, dir.path()).unwrap();
        let loaded = load_kb(dir.path()).unwrap();
        assert_eq!(loaded.len(), 0);
        assert_eq!(loaded.schema(), kb.schema());
    }

    #[test]
    fn missing_sample_file_is_corrupt() {
        let kb = canonical_kb(3);
        let dir = tempdir().unwrap();
        save_kb(&kb, dir.path()).unwrap();
        let victim = sample_file(dir.path(), &kb.samples()[1].path);
        fs::remove_file(victim).unwrap();
        assert!(matches!(load_kb(dir.path()), Err(Error::CorruptStore(_))));
    }

    #[test]
    fn schema_mismatched_sample_is_corrupt() {
        let kb = canonical_kb(2);
        let dir = tempdir().unwrap();
        save_kb(&kb, dir.path()).unwrap();
        let victim = sample_file(dir.path(), &kb.samples()[0].path);
        let text = fs::read_to_string(&victim).unwrap();
        fs::write(&victim, text.replace("timestamp,MP,IP,N2", "timestamp,MP,XX,N2")).unwrap();
        assert!(matches!(load_kb(dir.path()), Err(Error::CorruptStore(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let kb = canonical_kb(1);
        let dir = tempdir().unwrap();
        save_kb(&kb, dir.path()).unwrap();
        let meta = dir.path().join(META_FILE);
        let text = fs::read_to_string(&meta).unwrap();
        fs::write(&meta, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(
            load_kb(dir.path()),
            Err(Error::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn ingest_directory_matches_saved_samples() {
        let kb = canonical_kb(6);
        let dir = tempdir().unwrap();
        save_kb(&kb, dir.path()).unwrap();
        fs::remove_file(dir.path().join(META_FILE)).unwrap();
        let rebuilt = ingest_directory(
            dir.path(),
            kb.schema(),
            KbConfig { regime_len: 18, mi_bins: Some(3) },
            false,
        )
        .unwrap();
        assert_eq!(rebuilt.len(), kb.len());
        for s in kb.samples() {
            assert_eq!(rebuilt.get(&s.path).unwrap().values, s.values);
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempdir().unwrap();
        let labels = vec![
            ("B777/tail00/takeoff/f0000".to_string(), false),
            ("B777/tail01/takeoff/f0001".to_string(), true),
        ];
        write_labels(dir.path(), &labels).unwrap();
        let read = read_labels(dir.path()).unwrap();
        assert_eq!(read.len(), 2);
        assert!(read["B777/tail01/takeoff/f0001"]);
        assert!(!read["B777/tail00/takeoff/f0000"]);
    }
}
