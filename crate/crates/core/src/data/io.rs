//! On-disk dataset layout:
//!
//! ```text
//! <dir>/images/NNNN.png   8-bit grayscale
//! <dir>/masks/NNNN.png    8-bit class ids
//! <dir>/meta.json         specs, seeds and split membership
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::benchmark::{Benchmark, BenchmarkSpec, SplitKind};
use super::scene::Sample;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "sfuda-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEntry {
    pub index: usize,
    pub id: String,
    pub split: SplitKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub spec: BenchmarkSpec,
    pub entries: Vec<MetaEntry>,
}

/// Checks the structure of a parsed `meta.json` without deserializing it,
/// so malformed files get a precise message.
pub fn validate_meta_schema(meta: &Value) -> std::result::Result<(), String> {
    let obj = meta.as_object().ok_or("meta must be a JSON object")?;
    match obj.get("format").and_then(Value::as_str) {
        Some(DATASET_FORMAT) => {}
        other => return Err(format!("format must be {DATASET_FORMAT:?}, got {other:?}")),
    }
    match obj.get("version").and_then(Value::as_u64) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        other => return Err(format!("unsupported version {other:?}")),
    }
    let spec = obj.get("spec").and_then(Value::as_object).ok_or("spec must be an object")?;
    for key in ["scene", "target_shift", "per_domain", "split_ratio", "seed"] {
        if !spec.contains_key(key) {
            return Err(format!("spec.{key} is missing"));
        }
    }
    let entries = obj.get("entries").and_then(Value::as_array).ok_or("entries must be an array")?;
    for (i, e) in entries.iter().enumerate() {
        let e = e.as_object().ok_or(format!("entries[{i}] must be an object"))?;
        if e.get("index").and_then(Value::as_u64) != Some(i as u64) {
            return Err(format!("entries[{i}].index must equal {i}"));
        }
        if e.get("id").and_then(Value::as_str).is_none() {
            return Err(format!("entries[{i}].id must be a string"));
        }
        if e.get("seed").and_then(Value::as_u64).is_none() {
            return Err(format!("entries[{i}].seed must be an unsigned integer"));
        }
        let split = e.get("split").and_then(Value::as_str).unwrap_or("");
        if !["source_train", "source_val", "target_train", "target_val"].contains(&split) {
            return Err(format!("entries[{i}].split {split:?} is not a known split"));
        }
    }
    Ok(())
}

fn file_name(index: usize) -> String {
    format!("{index:04}.png")
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(Error::format(path, format!("expected 8-bit grayscale, got {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("dimensions match"))
}

/// Writes the bundle under `dir` (created if needed). Target-train masks are
/// stored for evaluation.
pub fn write_dataset(bench: &Benchmark, dir: &Path) -> Result<DatasetMeta> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::new();
    for split in SplitKind::ALL {
        for (i, s) in bench.labeled(split).into_iter().enumerate() {
            let index = entries.len();
            let (h, w) = s.image.dim();
            write_png(&images.join(file_name(index)), h, w, s.image.iter().map(|&v| to_u8(v)).collect())?;
            write_png(&masks.join(file_name(index)), h, w, s.mask.iter().copied().collect())?;
            entries.push(MetaEntry {
                index,
                id: s.id,
                split,
                seed: bench.spec.sample_seed(split, i),
            });
        }
    }
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        spec: bench.spec.clone(),
        entries,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    validate_meta_schema(&value).map_err(|r| Error::format(&path, r))?;
    serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))
}

/// Loads a bundle written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Benchmark> {
    let meta = read_meta(dir)?;
    let classes = meta.spec.scene.num_classes;
    let mut splits: [Vec<Sample>; 4] = Default::default();
    for e in &meta.entries {
        let img_path: PathBuf = dir.join("images").join(file_name(e.index));
        let mask_path: PathBuf = dir.join("masks").join(file_name(e.index));
        let image = read_png(&img_path)?;
        let mask = read_png(&mask_path)?;
        if image.dim() != mask.dim() {
            return Err(Error::format(&mask_path, "mask and image sizes differ"));
        }
        if let Some(&bad) = mask.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::format(&mask_path, format!("class id {bad} >= {classes}")));
        }
        let pos = SplitKind::ALL.iter().position(|&s| s == e.split).expect("known split");
        splits[pos].push(Sample {
            id: e.id.clone(),
            image: image.mapv(|v| v as f32 / 255.0),
            mask,
        });
    }
    let [st, sv, tt, tv] = splits;
    Ok(Benchmark::from_parts(meta.spec, st, sv, tt, tv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::benchmark::make_benchmark;

    #[test]
    fn round_trip_is_exact() {
        let spec = BenchmarkSpec {
            per_domain: 5,
            ..BenchmarkSpec::default()
        };
        let bench = make_benchmark(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&bench, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), bench);
    }

    #[test]
    fn schema_rejects_bad_meta() {
        let good = serde_json::json!({
            "format": DATASET_FORMAT, "version": 1,
            "spec": {"scene": {}, "target_shift": [], "per_domain": 1, "split_ratio": [4, 1], "seed": 0},
            "entries": [{"index": 0, "id": "a", "split": "source_train", "seed": 3}]
        });
        assert!(validate_meta_schema(&good).is_ok());
        let mut bad = good.clone();
        bad["entries"][0]["split"] = "test".into();
        assert!(validate_meta_schema(&bad).is_err());
        let mut bad = good.clone();
        bad["version"] = 9.into();
        assert!(validate_meta_schema(&bad).is_err());
    }

    #[test]
    fn missing_dataset_names_path() {
        let err = read_dataset(Path::new("/nonexistent/ds")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ds"), "{err}");
    }
}
