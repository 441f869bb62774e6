//! Checkpoint directories: `tensors.rdt` holds one RDT1 record per parameter
//! back to back, `manifest.txt` says where each one starts.
//!
//! ```text
//! groundseg-checkpoint 1
//! step 200
//! config dim = 64
//! config heads = 4
//! ...
//! param frontend.patch.weight 48,64 0
//! param frontend.patch.bias 64 24592
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diff::{write_tensor_record, TensorRecord};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::Model;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TENSOR_FILE: &str = "tensors.rdt";
const HEADER: &str = "groundseg-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub step: usize,
    pub config: RunConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nstep {}\n", self.step);
        for line in self.config.to_text().lines() {
            let _ = writeln!(out, "config {line}");
        }
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {} {} {}", e.name, shape.join(","), e.offset);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("checkpoint manifest", m);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(bad(format!("missing {HEADER:?} header"))),
        }
        let mut step = None;
        let mut config_text = String::new();
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "step" => {
                    if step.is_some() {
                        return Err(bad(format!("line {}: second step line", i + 1)));
                    }
                    step = Some(rest.trim().parse().map_err(|_| bad(format!("line {}: bad step", i + 1)))?);
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "param" => {
                    let fields: Vec<&str> = rest.split_whitespace().collect();
                    let [name, shape, offset] = fields[..] else {
                        return Err(bad(format!("line {}: expected name, shape, offset", i + 1)));
                    };
                    let shape = shape
                        .split(',')
                        .map(|s| s.parse::<usize>().ok().filter(|&e| e > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(format!("line {}: bad shape", i + 1)))?;
                    let offset = offset.parse().map_err(|_| bad(format!("line {}: bad offset", i + 1)))?;
                    if entries.iter().any(|e| e.name == name) {
                        return Err(bad(format!("line {}: {name} listed twice", i + 1)));
                    }
                    entries.push(ManifestEntry {
                        name: name.to_string(),
                        shape,
                        offset,
                    });
                }
                other => return Err(bad(format!("line {}: unknown entry {other:?}", i + 1))),
            }
        }
        let step = step.ok_or_else(|| bad("no step line".into()))?;
        let config = RunConfig::parse(&config_text)?;
        Ok(Manifest { step, config, entries })
    }
}

/// Serializes the parameters of `model` into the manifest and tensor bytes.
pub fn encode(model: &Model, step: usize) -> Result<(Manifest, Vec<u8>)> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(model.store.len());
    for param in model.store.iter() {
        entries.push(ManifestEntry {
            name: param.name.clone(),
            shape: param.shape.clone(),
            offset: bytes.len(),
        });
        write_tensor_record(&mut bytes, &param.shape, &param.values)?;
    }
    let manifest = Manifest {
        step,
        config: model.config.clone(),
        entries,
    };
    Ok((manifest, bytes))
}

/// Rebuilds a model from a manifest and its tensor bytes. Every parameter of
/// the configured model must be present with its exact shape, and nothing
/// else may be.
pub fn decode(manifest: &Manifest, bytes: &[u8]) -> Result<Model> {
    let bad = |m: String| Error::format("checkpoint", m);
    let mut model = Model::new(manifest.config.clone())?;
    if manifest.entries.len() != model.store.len() {
        return Err(bad(format!(
            "{} tensors listed, model has {}",
            manifest.entries.len(),
            model.store.len()
        )));
    }
    for param in model.store.iter_mut() {
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.name == param.name)
            .ok_or_else(|| bad(format!("tensor {} missing", param.name)))?;
        let tail = bytes
            .get(entry.offset..)
            .ok_or_else(|| bad(format!("offset {} of {} out of range", entry.offset, entry.name)))?;
        let (record, _) = TensorRecord::decode(tail)?;
        if record.shape != param.shape || entry.shape != param.shape {
            return Err(bad(format!(
                "{} has shape {:?}, expected {:?}",
                param.name, record.shape, param.shape
            )));
        }
        param.values = record.values;
    }
    Ok(model)
}

/// Writes a checkpoint into `dir`, replacing any previous one only after
/// the new files are complete.
pub fn save(model: &Model, step: usize, dir: &Path) -> Result<()> {
    let (manifest, bytes) = encode(model, step)?;
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    fs::write(staging.join(TENSOR_FILE), &bytes)?;
    fs::write(staging.join(MANIFEST_FILE), manifest.to_text())?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

/// Loads a checkpoint directory, returning the model and its step counter.
pub fn load(dir: &Path) -> Result<(Model, usize)> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(TENSOR_FILE))?;
    let model = decode(&manifest, &bytes)?;
    Ok((model, manifest.step))
}
