//! Dataset persistence: a flat CSV with one row per (curve, step) and a JSON
//! manifest carrying the generating spec and per-curve metadata. Stress
//! columns stay empty until an oracle labels the curve; floats are written
//! in shortest round-trip form, so regenerating an identical dataset yields
//! byte-identical files.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Curve, CurveKind, Dataset, DatasetSpec, LabelFailure, LoadPath, PathGenError, PathMeta};
use crate::constitutive::{StrainVec, StressVec};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub meta: PathMeta,
}

/// Companion document of a dataset CSV: everything needed to regenerate or
/// sanity-check the rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub curves: Vec<ManifestEntry>,
    /// Curves dropped because labeling faulted; kept for the audit trail.
    #[serde(default)]
    pub failures: Vec<LabelFailure>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    curve_id: u32,
    #[serde(rename = "type")]
    kind: CurveKind,
    step: usize,
    eps_xx: f64,
    eps_yy: f64,
    gamma_xy: f64,
    sigma_xx: Option<f64>,
    sigma_yy: Option<f64>,
    sigma_xy: Option<f64>,
}

/// Writes the row file and its manifest.
pub fn write_dataset(
    csv_path: &Path,
    manifest_path: &Path,
    dataset: &Dataset,
) -> Result<(), PathGenError> {
    let mut w = csv::Writer::from_path(csv_path)?;
    for curve in &dataset.curves {
        if let Some(stresses) = &curve.stresses {
            if stresses.len() != curve.path.strains.len() {
                return Err(PathGenError::Format(format!(
                    "curve {} has {} stress rows for {} strain rows",
                    curve.id,
                    stresses.len(),
                    curve.path.strains.len()
                )));
            }
        }
        for (step, strain) in curve.path.strains.iter().enumerate() {
            let stress = curve.stresses.as_ref().map(|s| s[step]);
            w.serialize(CsvRow {
                curve_id: curve.id,
                kind: curve.path.meta.kind,
                step,
                eps_xx: strain.x,
                eps_yy: strain.y,
                gamma_xy: strain.z,
                sigma_xx: stress.map(|s| s.x),
                sigma_yy: stress.map(|s| s.y),
                sigma_xy: stress.map(|s| s.z),
            })?;
        }
    }
    w.flush()?;

    let manifest = Manifest {
        spec: dataset.spec.clone(),
        curves: dataset
            .curves
            .iter()
            .map(|c| ManifestEntry { id: c.id, meta: c.path.meta.clone() })
            .collect(),
        failures: dataset.failures.clone(),
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset back; curves come out in file order and keep their labels.
/// Every curve must be fully labeled or fully unlabeled.
pub fn read_dataset(csv_path: &Path, manifest_path: &Path) -> Result<Dataset, PathGenError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;

    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut rows: Vec<CsvRow> = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }

    let mut curves: Vec<Curve> = Vec::with_capacity(manifest.curves.len());
    let mut cursor = 0usize;
    for entry in &manifest.curves {
        let n_rows = entry.meta.n_steps + 1;
        let end = cursor + n_rows;
        if end > rows.len() {
            return Err(PathGenError::Format(format!(
                "curve {} truncated: expected {} rows",
                entry.id, n_rows
            )));
        }
        let slice = &rows[cursor..end];
        cursor = end;

        let mut strains: Vec<StrainVec> = Vec::with_capacity(n_rows);
        let mut stresses: Vec<StressVec> = Vec::with_capacity(n_rows);
        let mut n_labeled = 0usize;
        for (step, row) in slice.iter().enumerate() {
            if row.curve_id != entry.id || row.step != step || row.kind != entry.meta.kind {
                return Err(PathGenError::Format(format!(
                    "row mismatch at curve {} step {step}: found curve {} step {}",
                    entry.id, row.curve_id, row.step
                )));
            }
            strains.push(Vector3::new(row.eps_xx, row.eps_yy, row.gamma_xy));
            if let (Some(sx), Some(sy), Some(sxy)) = (row.sigma_xx, row.sigma_yy, row.sigma_xy) {
                stresses.push(Vector3::new(sx, sy, sxy));
                n_labeled += 1;
            }
        }
        let stresses = match n_labeled {
            0 => None,
            n if n == n_rows => Some(stresses),
            n => {
                return Err(PathGenError::Format(format!(
                    "curve {} is partially labeled ({n} of {n_rows} rows)",
                    entry.id
                )))
            }
        };
        curves.push(Curve {
            id: entry.id,
            path: LoadPath { meta: entry.meta.clone(), strains },
            stresses,
        });
    }
    if cursor != rows.len() {
        return Err(PathGenError::Format(format!(
            "{} trailing rows not covered by the manifest",
            rows.len() - cursor
        )));
    }
    Ok(Dataset { spec: manifest.spec, curves, failures: manifest.failures })
}
