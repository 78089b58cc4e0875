//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `config.ini` (the full run config),
//! `manifest.tsv` (header lines, then one `param <name> <shape> <offset>`
//! line per parameter) and `params.bin`, the parameters as one flat
//! little-endian `f32` blob in manifest order.

use std::fs;
use std::path::Path;

use super::{Dims, Model};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rl::BetaSpace;

pub const CONFIG_FILE: &str = "config.ini";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub step: u64,
    pub tau: f64,
    pub build: String,
}

/// Model dimensions implied by a run config.
pub fn dims_for(config: &RunConfig) -> Result<Dims> {
    let vocab = config.corpus.vocabulary()?;
    Ok(Dims {
        vocab: vocab.len(),
        domains: vocab.num_domains(),
        actions: BetaSpace::from_config(&config.rl)?.len(),
    })
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save(dir: &Path, config: &RunConfig, model: &Model, step: u64, tau: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "build\t{}\nvariant\t{}\nstep\t{step}\ntau\t{tau}\nparams\t{}\n",
        RunConfig::build_tag(),
        model.variant().as_str(),
        model.store.len()
    );
    let mut blob = Vec::with_capacity(model.store.num_scalars() * 4);
    for (_, p) in model.store.iter() {
        manifest.push_str(&format!(
            "param\t{}\t{}\t{}\n",
            p.name,
            shape_str(p.value.shape()),
            blob.len()
        ));
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write(CONFIG_FILE, config.to_text().as_bytes())?;
    write(MANIFEST_FILE, manifest.as_bytes())?;
    write(PARAMS_FILE, &blob)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mname = manifest_path.display().to_string();
    let err = |line: usize, msg: String| Error::Format {
        path: mname.clone(),
        line,
        msg,
    };

    let mut model = Model::new(&config.model, dims_for(&config)?)?;
    let (mut step, mut tau, mut build) = (0u64, 0.0f64, String::new());
    let mut seen = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["build", b] => build = b.to_string(),
            ["variant", v] => {
                if *v != model.variant().as_str() {
                    return Err(err(lineno, format!("variant {v} does not match config")));
                }
            }
            ["step", s] => step = s.parse().map_err(|_| err(lineno, format!("bad step {s:?}")))?,
            ["tau", t] => tau = t.parse().map_err(|_| err(lineno, format!("bad tau {t:?}")))?,
            ["params", _] => {}
            ["param", name, shape, offset] => {
                let id = model
                    .store
                    .find(name)
                    .ok_or_else(|| err(lineno, format!("unknown parameter {name}")))?;
                let expected = shape_str(model.store.value(id).shape());
                if *shape != expected {
                    return Err(err(
                        lineno,
                        format!("{name} has shape {shape}, model expects {expected}"),
                    ));
                }
                let offset: usize = offset
                    .parse()
                    .map_err(|_| err(lineno, format!("bad offset {offset:?}")))?;
                let n = model.store.value(id).len();
                let bytes = blob
                    .get(offset..offset + 4 * n)
                    .ok_or_else(|| err(lineno, format!("{name} runs past the end of {PARAMS_FILE}")))?;
                let values: Vec<f64> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                let shape = model.store.value(id).shape().to_vec();
                *model.store.value_mut(id) = Tensor::new(&shape, values)?;
                seen += 1;
            }
            _ => return Err(err(lineno, format!("unrecognised manifest line {line:?}"))),
        }
    }
    if seen != model.store.len() {
        return Err(err(
            0,
            format!("manifest lists {seen} of {} parameters", model.store.len()),
        ));
    }
    Ok(Checkpoint {
        config,
        model,
        step,
        tau,
        build,
    })
}
