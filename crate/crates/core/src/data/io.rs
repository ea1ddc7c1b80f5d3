//! Dataset directories: `manifest.json` plus `samples.jsonl`, one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Dataset, Modality, NormStats, PixelSample, SyntheticSpec, BAND_NAMES, DEM_FEATURES, DEM_NAMES, SA_FEATURES, SCL_CLASSES,
    SOIL_DEPTHS, SOIL_FEATURES, SOIL_PROPERTIES, WEATHER_NAMES, W_FEATURES,
};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub modality: Modality,
    pub channels: Vec<String>,
    pub units: Vec<String>,
}

impl ModalitySchema {
    fn defaults() -> Vec<ModalitySchema> {
        let mut sa: Vec<String> = BAND_NAMES.iter().map(|s| s.to_string()).collect();
        let mut sa_units = vec!["reflectance".to_string(); sa.len()];
        sa.extend((0..SCL_CLASSES).map(|c| if c + 1 == SCL_CLASSES { "scl_pad".into() } else { format!("scl_{c}") }));
        sa_units.resize(SA_FEATURES, "one-hot".into());
        let soil = SOIL_PROPERTIES.iter().flat_map(|p| SOIL_DEPTHS.iter().map(move |d| format!("{p}_{d}"))).collect();
        vec![
            ModalitySchema { modality: Modality::Satellite, channels: sa, units: sa_units },
            ModalitySchema {
                modality: Modality::Weather,
                channels: WEATHER_NAMES.iter().map(|s| s.to_string()).collect(),
                units: vec!["degC".into(), "degC".into(), "degC".into(), "mm".into()],
            },
            ModalitySchema { modality: Modality::Soil, channels: soil, units: vec!["soilgrids".into(); SOIL_FEATURES] },
            ModalitySchema {
                modality: Modality::Dem,
                channels: DEM_NAMES.iter().map(|s| s.to_string()).collect(),
                units: vec!["m".into(), "deg".into(), "deg".into(), "1/m".into(), "index".into()],
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub schema: Vec<ModalitySchema>,
    #[serde(default)]
    pub samples: usize,
    #[serde(default)]
    pub norm_stats: Option<NormStats>,
    /// Generator settings and yield-rule coefficients for synthetic data.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl Manifest {
    pub fn new() -> Self {
        Self { format_version: DATASET_FORMAT_VERSION, schema: ModalitySchema::defaults(), samples: 0, norm_stats: None, synthetic: None }
    }

    fn check_schema(&self) -> Result<()> {
        for m in Modality::ALL {
            let expected = m.features();
            let found = self.schema.iter().find(|s| s.modality == m).map(|s| s.channels.len());
            if found != Some(expected) {
                return Err(Error::format("manifest", format!("{m} must have {expected} channels, found {found:?}")));
            }
        }
        Ok(())
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = dataset.manifest.clone();
    manifest.samples = dataset.samples.len();
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SAMPLES_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::format("sample", e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(DATASET_FORMAT_VERSION as u64) {
        return Err(Error::Version {
            path,
            expected: DATASET_FORMAT_VERSION.to_string(),
            found: raw.get("format_version").map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::format("manifest", e.to_string()))?;
    manifest.check_schema()?;

    let path = dir.join(SAMPLES_FILE);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::with_capacity(manifest.samples);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = || format!("record {i}");
        let s: PixelSample = serde_json::from_str(&line).map_err(|e| Error::format(record(), e.to_string()))?;
        let widths_ok = s.x_sa.len() == s.sa_steps() * SA_FEATURES
            && s.x_w.len() == s.w_steps() * W_FEATURES
            && s.x_so.len() == SOIL_FEATURES
            && s.x_dem.len() == DEM_FEATURES;
        if !widths_ok {
            return Err(Error::format(record(), "feature widths do not match 25/4/24/5"));
        }
        s.validate().map_err(|e| Error::format(record(), e.to_string()))?;
        samples.push(s);
    }
    if samples.len() != manifest.samples {
        return Err(Error::format("dataset", format!("manifest lists {} samples, file has {}", manifest.samples, samples.len())));
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::sample;
    use super::*;

    fn three() -> Dataset {
        let mut s = vec![sample(0, 0, 2020, 3, 4), sample(1, 0, 2020, 2, 4), sample(2, 1, 2021, 1, 2)];
        s[1].y = 0.1 + 0.2;
        s[2].x_so[3] = std::f64::consts::PI;
        let mut d = Dataset::new(s);
        d.manifest.samples = 3;
        d
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = three();
        write_dataset(&d, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Missing(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&three(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Version { .. })));
    }

    #[test]
    fn channel_counts_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = three();
        d.manifest.schema[2].channels.pop();
        write_dataset(&d, dir.path()).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("soil"), "{err}");
    }

    #[test]
    fn malformed_record_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&three(), dir.path()).unwrap();
        let p = dir.path().join(SAMPLES_FILE);
        let mut lines: Vec<String> = std::fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"x_dem\":[", "\"x_dem\":[1.0,");
        std::fs::write(&p, lines.join("\n")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("record 2"), "{err}");
    }
}
