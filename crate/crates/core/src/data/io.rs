//! Line-oriented dataset files (one JSON record per line) and the manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{bayes_accuracy, Dataset, GenConfig, Instance, Observed};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const MANIFEST: &str = "manifest.toml";

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn write_split(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instances always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Best-effort field name from a serde_json message such as "missing field `label`".
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

pub fn read_split(path: &Path) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                field: field_from_message(&msg),
                msg,
            }
        })?;
        inst.validate().map_err(|(field, msg)| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            field: field.to_string(),
            msg,
        })?;
        out.push(inst);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesCeilings {
    pub text: f64,
    pub audio: f64,
    pub multimodal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: GenConfig,
    pub bayes: BayesCeilings,
}

impl Manifest {
    pub fn new(cfg: &GenConfig) -> Self {
        Self {
            generator: cfg.clone(),
            bayes: BayesCeilings {
                text: bayes_accuracy(cfg, Observed::Text),
                audio: bayes_accuracy(cfg, Observed::Audio),
                multimodal: bayes_accuracy(cfg, Observed::Both),
            },
        }
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset, cfg: &GenConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in SPLITS {
        write_split(&split_path(dir, split), ds.split(split)?)?;
    }
    let manifest = toml::to_string(&Manifest::new(cfg)).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_split(&split_path(dir, "train"))?,
        dev: read_split(&split_path(dir, "dev"))?,
        test: read_split(&split_path(dir, "test"))?,
    })
}
