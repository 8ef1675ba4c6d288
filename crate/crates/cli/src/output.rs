//! Output files. Every file records the hash of the resolved run: JSON in a
//! `config_hash` field, CSV in a leading `#` line, PNG in a `tEXt` chunk and
//! SVG in a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use conceal_core::attack::AttackTrace;
use conceal_core::image::Image;
use conceal_core::persist::{config_hash, csv_bytes, save_png, trace_csv, write_atomic, write_json, PngDepth};
use conceal_core::whitening::WhiteningTransform;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Everything that determines a run's primary artifacts. The output
/// location is not part of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Document<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

/// A learned whitening with its source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhiteningDocument {
    pub source: String,
    pub source_model: String,
    pub descriptors: usize,
    pub transform: WhiteningTransform,
}

pub struct Output {
    dir: PathBuf,
    pub provenance: Provenance,
    pub hash: String,
}

impl Output {
    pub fn new(dir: &Path, provenance: Provenance) -> Result<Self> {
        let hash = config_hash(&provenance)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance,
            hash,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, body: T) -> Result<PathBuf> {
        let path = self.path(name);
        let doc = Document {
            config_hash: self.hash.clone(),
            provenance: self.provenance.clone(),
            body,
        };
        write_json(&path, &doc)?;
        Ok(path)
    }

    fn commented(&self, bytes: Vec<u8>) -> Vec<u8> {
        let mut out = format!("# config_hash={}\n", self.hash).into_bytes();
        out.extend(bytes);
        out
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, &self.commented(csv_bytes(rows)?))?;
        Ok(path)
    }

    pub fn trace(&self, name: &str, trace: &AttackTrace) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, &self.commented(trace_csv(trace)?))?;
        Ok(path)
    }

    pub fn png(&self, name: &str, image: &Image, depth: PngDepth) -> Result<PathBuf> {
        let path = self.path(name);
        save_png(image, &path, depth, &[("config_hash", &self.hash)])?;
        Ok(path)
    }

    pub fn svg(&self, name: &str, svg: &str) -> Result<PathBuf> {
        let path = self.path(name);
        let comment = format!("<!-- config_hash={} -->\n", self.hash);
        // after the XML declaration when there is one
        let text = match svg.find("?>") {
            Some(i) if svg.starts_with("<?xml") => format!("{}\n{comment}{}", &svg[..i + 2], svg[i + 2..].trim_start()),
            _ => format!("{comment}{svg}"),
        };
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
