//! Data splits on disk: `img_%05d.ppm`, `lbl_%05d.pgm` and a `manifest.json`.

use std::path::{Path, PathBuf};

use fcan_core::data::{gen_scene, Domain, LabelMap, Sample, SceneSpec};
use fcan_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::netpbm;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub domain: Domain,
    /// Scene index of the first file.
    pub first: u64,
    pub count: usize,
    pub scene: SceneSpec,
    pub files: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub image: String,
    pub labels: String,
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:05}.ppm")
}

pub fn label_name(i: usize) -> String {
    format!("lbl_{i:05}.pgm")
}

/// Generates scenes `first..first + n` and writes them with a manifest.
pub fn synthesize(dir: &Path, spec: &SceneSpec, domain: Domain, first: u64, n: usize) -> Result<SplitManifest> {
    crate::ensure_dir(dir)?;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let (image, labels) = gen_scene(&spec.nth(first + i as u64), domain)?;
        let entry = SplitEntry {
            image: image_name(i),
            labels: label_name(i),
        };
        netpbm::save_image(&dir.join(&entry.image), &image)?;
        netpbm::save_labels(&dir.join(&entry.labels), &labels)?;
        files.push(entry);
    }
    let manifest = SplitManifest {
        domain,
        first,
        count: n,
        scene: spec.clone(),
        files,
    };
    crate::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Files in `dir` named `<prefix>NNNNN.<ext>`, sorted by name.
pub fn list(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.starts_with(prefix) && name.ends_with(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let paths = list(dir, "img_", ".ppm")?;
    if paths.is_empty() {
        return Err(AppError::config(format!("{}: no img_*.ppm files", dir.display())));
    }
    paths.iter().map(|p| netpbm::load_image(p)).collect()
}

pub fn label_path_for(image: &Path) -> PathBuf {
    let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.trim_start_matches("img_").trim_end_matches(".ppm");
    image.with_file_name(format!("lbl_{stem}.pgm"))
}

/// Loads every `img_*.ppm` in `dir` together with its `lbl_*.pgm`.
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let paths = list(dir, "img_", ".ppm")?;
    if paths.is_empty() {
        return Err(AppError::config(format!("{}: no img_*.ppm files", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let image = netpbm::load_image(&p)?;
        let lp = label_path_for(&p);
        let labels = netpbm::load_labels(&lp)?;
        if [labels.height(), labels.width()] != image.shape()[1..] {
            return Err(AppError::format(lp, "label map size differs from its image"));
        }
        out.push(Sample { image, labels });
    }
    Ok(out)
}

/// Loads every `lbl_*.pgm` in `dir` keyed by file name.
pub fn load_label_maps(dir: &Path) -> Result<Vec<(String, LabelMap)>> {
    let paths = list(dir, "lbl_", ".pgm")?;
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            Ok((name, netpbm::load_labels(&p)?))
        })
        .collect()
}
