//! Checkpoint directories: a `manifest.json` naming every tensor, plus one
//! FCT1 blob per tensor.

use std::path::Path;

use fcan_core::aan::{DomainStyle, GramMatrix};
use fcan_core::backbone::{BackboneConfig, Layer, MiniFcn};
use fcan_core::ran::{Discriminator, DiscriminatorConfig};
use fcan_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::fct::{self, Dtype};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "fcan-checkpoint-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Backbone,
    Discriminator,
    Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub kind: Kind,
    pub dtype: Dtype,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleLayer {
    layer: Layer,
    normalizer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleInfo {
    count: usize,
    layers: Vec<StyleLayer>,
}

fn write_checkpoint(
    dir: &Path,
    kind: Kind,
    config: &impl Serialize,
    tensors: Vec<(String, &Tensor)>,
    dtype: Dtype,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = format!("{name}.fct");
        fct::save(&dir.join(&file), t, dtype)?;
        entries.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        kind,
        dtype,
        config: serde_json::to_value(config).map_err(|e| AppError::config(e.to_string()))?,
        tensors: entries,
    };
    crate::write_json(&dir.join(MANIFEST), &manifest)
}

/// Reads and checks a manifest, returning it with its decoded config.
fn read_manifest<C: DeserializeOwned>(dir: &Path, kind: Kind) -> Result<(Manifest, C)> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = crate::read_json(&path)?;
    if manifest.format != FORMAT {
        return Err(AppError::format(&path, format!("unknown format {:?}", manifest.format)));
    }
    if manifest.kind != kind {
        return Err(AppError::format(
            &path,
            format!("expected a {kind:?} checkpoint, found {:?}", manifest.kind),
        ));
    }
    let config =
        serde_json::from_value(manifest.config.clone()).map_err(|e| AppError::format(&path, format!("config: {e}")))?;
    Ok((manifest, config))
}

struct Blobs<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Blobs<'_> {
    fn load(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let path = self.dir.join(MANIFEST);
        let Some(entry) = self.manifest.tensors.iter().find(|e| e.name == name) else {
            return Err(AppError::format(path, format!("tensor {name} missing")));
        };
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(AppError::format(
                path,
                format!("tensor file {:?} escapes the checkpoint", entry.file),
            ));
        }
        let blob = self.dir.join(&entry.file);
        let t = fct::load(&blob)?;
        if t.shape() != shape || entry.shape != shape {
            return Err(AppError::format(
                blob,
                format!("{name}: expected shape {shape:?}, found {:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    fn fill(&self, name: &str, dst: &mut [f64], shape: &[usize]) -> Result<()> {
        dst.copy_from_slice(self.load(name, shape)?.data());
        Ok(())
    }
}

pub fn save_backbone(dir: &Path, model: &MiniFcn, dtype: Dtype) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = model.param_names().into_iter().zip(model.params()).collect();
    let stats: Vec<(String, Tensor)> = Layer::ALL
        .iter()
        .zip(model.stages())
        .flat_map(|(l, s)| {
            let c = s.stats.mean.len();
            [
                (format!("{l}.running_mean"), Tensor::new([c], s.stats.mean.clone())),
                (format!("{l}.running_var"), Tensor::new([c], s.stats.var.clone())),
            ]
        })
        .map(|(n, t)| (n, t.expect("stats length matches channels")))
        .collect();
    tensors.extend(stats.iter().map(|(n, t)| (n.clone(), t)));
    write_checkpoint(dir, Kind::Backbone, model.config(), tensors, dtype)
}

pub fn load_backbone(dir: &Path) -> Result<MiniFcn> {
    let (manifest, config): (_, BackboneConfig) = read_manifest(dir, Kind::Backbone)?;
    let mut model = MiniFcn::new(config)?;
    let blobs = Blobs {
        dir,
        manifest: &manifest,
    };
    let names = model.param_names();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let shape = p.shape().to_vec();
        blobs.fill(name, p.data_mut(), &shape)?;
    }
    for (l, s) in Layer::ALL.iter().zip(model.stages_mut()) {
        let c = [s.stats.mean.len()];
        blobs.fill(&format!("{l}.running_mean"), &mut s.stats.mean, &c)?;
        blobs.fill(&format!("{l}.running_var"), &mut s.stats.var, &c)?;
    }
    Ok(model)
}

pub fn save_discriminator(dir: &Path, disc: &Discriminator, dtype: Dtype) -> Result<()> {
    let tensors = disc.param_names().into_iter().zip(disc.params()).collect();
    write_checkpoint(dir, Kind::Discriminator, disc.config(), tensors, dtype)
}

pub fn load_discriminator(dir: &Path) -> Result<Discriminator> {
    let (manifest, config): (_, DiscriminatorConfig) = read_manifest(dir, Kind::Discriminator)?;
    let mut disc = Discriminator::new(config)?;
    let blobs = Blobs {
        dir,
        manifest: &manifest,
    };
    let names = disc.param_names();
    for (name, p) in names.iter().zip(disc.params_mut()) {
        let shape = p.shape().to_vec();
        blobs.fill(name, p.data_mut(), &shape)?;
    }
    Ok(disc)
}

/// Writes one `gram.<layer>` blob per layer of a domain style.
pub fn save_style(dir: &Path, style: &DomainStyle, dtype: Dtype) -> Result<()> {
    let info = StyleInfo {
        count: style.count(),
        layers: style
            .iter()
            .map(|(layer, g)| StyleLayer {
                layer,
                normalizer: g.normalizer(),
            })
            .collect(),
    };
    let grams: Vec<(String, Tensor)> = style
        .iter()
        .map(|(l, g)| (format!("gram.{l}"), g.to_tensor()))
        .collect();
    let tensors = grams.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_checkpoint(dir, Kind::Style, &info, tensors, dtype)
}

pub fn load_style(dir: &Path) -> Result<DomainStyle> {
    let (manifest, info): (_, StyleInfo) = read_manifest(dir, Kind::Style)?;
    let blobs = Blobs {
        dir,
        manifest: &manifest,
    };
    let mut grams = Vec::with_capacity(info.layers.len());
    for l in info.layers {
        let name = format!("gram.{}", l.layer);
        let Some(entry) = manifest.tensors.iter().find(|e| e.name == name) else {
            return Err(AppError::format(dir.join(MANIFEST), format!("tensor {name} missing")));
        };
        let size = entry.shape.first().copied().unwrap_or(0);
        let t = blobs.load(&name, &[size, size])?;
        grams.push((l.layer, GramMatrix::new(size, t.into_data(), l.normalizer)?));
    }
    Ok(DomainStyle::new(grams, info.count)?)
}
