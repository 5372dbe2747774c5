use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{raster, LabeledDataset, LabeledImage, Origin};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    class: String,
    #[serde(default)]
    origin: Option<Origin>,
    #[serde(default)]
    source_id: Option<usize>,
}

#[derive(Serialize)]
struct OutRow<'a> {
    path: String,
    class: &'a str,
    origin: Origin,
    source_id: Option<usize>,
}

/// Summary written next to a dataset cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub class_counts: BTreeMap<String, usize>,
    pub origin: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn of(ds: &LabeledDataset) -> Self {
        let counts = ds.counts();
        let aug = ds.augmented_count();
        DatasetStats {
            class_counts: ds
                .class_names()
                .iter()
                .cloned()
                .zip(counts)
                .collect(),
            origin: [
                ("original".to_string(), ds.len() - aug),
                ("augmented".to_string(), aug),
            ]
            .into_iter()
            .collect(),
        }
    }
}

fn row_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Load a `path,class` CSV manifest. Image paths are relative to the
/// manifest's directory. When `classes` is `None` the class list is the
/// sorted set of names in the file; otherwise any other name is an error.
pub fn load_manifest(path: impl AsRef<Path>, classes: Option<&[String]>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    for col in ["path", "class"] {
        if !headers.iter().any(|h| h == col) {
            return Err(row_err(path, 1, format!("missing `{col}` column")));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: Row = rec
            .deserialize(Some(&headers))
            .map_err(|e| row_err(path, line, e.to_string()))?;
        rows.push((line, row));
    }
    if rows.is_empty() {
        return Err(row_err(path, 1, "no samples"));
    }
    let class_names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<String> = rows.iter().map(|(_, r)| r.class.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let mut images = Vec::with_capacity(rows.len());
    for (id, (line, row)) in rows.into_iter().enumerate() {
        let label = class_names
            .iter()
            .position(|c| *c == row.class)
            .ok_or_else(|| row_err(path, line, format!("unknown class {:?}", row.class)))?;
        let img_path: PathBuf = base.join(&row.path);
        let (w, h, px) = raster::read(&img_path)
            .map_err(|e| row_err(path, line, format!("{}: {e}", img_path.display())))?;
        let mut img = LabeledImage::new(id, h, w, px, label)
            .map_err(|e| row_err(path, line, e.to_string()))?;
        if let Some(o) = row.origin {
            img.origin = o;
        }
        img.source_id = row.source_id;
        images.push(img);
    }
    LabeledDataset::new(class_names, images)
}

/// Write `dir/images/*.pgm`, `dir/manifest.csv` (with provenance columns)
/// and `dir/stats.json`.
pub fn save_cache(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for (i, img) in ds.images().iter().enumerate() {
        let rel = format!("images/{i:06}.pgm");
        raster::write(dir.join(&rel), img.width, img.height, &img.pixels)?;
        w.serialize(OutRow {
            path: rel,
            class: &ds.class_names()[img.label],
            origin: img.origin,
            source_id: img.source_id,
        })?;
    }
    w.flush()?;
    let stats = DatasetStats::of(ds);
    std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    std::fs::write(
        dir.join("classes.json"),
        serde_json::to_string(ds.class_names())?,
    )?;
    Ok(())
}

/// Reload a directory written by [`save_cache`]. Pixels are 8-bit
/// quantized, so values match the saved dataset to within `0.5 / 255`.
pub fn load_cache(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let classes: Vec<String> = serde_json::from_slice(&std::fs::read(dir.join("classes.json"))?)?;
    load_manifest(dir.join("manifest.csv"), Some(&classes))
}
