//! File persistence: atomic writes, PNG images, descriptor files, traces and
//! JSON documents.
//!
//! Descriptor files hold `count x dim` little-endian `f32` values; a JSON
//! sidecar with the same stem describes them.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackTrace, TraceMetrics, TraceRecord};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::Image;

/// Write `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// SHA-256 (hex) of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

/// Load a PNG or JPEG as RGB in `[0, 1]`. 16-bit files keep full precision.
/// The image id is the file stem.
pub fn load_image(path: &Path) -> Result<Image> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::format(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let sixteen = matches!(
        decoded,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    if sixteen {
        Image::from_rgb16(id, w, h, decoded.to_rgb16().as_raw())
    } else {
        Image::from_rgb8(id, w, h, decoded.to_rgb8().as_raw())
    }
}

/// Sample depth of a written PNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Write `image` as an RGB PNG with optional `tEXt` chunks.
pub fn save_png(image: &Image, path: &Path, depth: PngDepth, text: &[(&str, &str)]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(match depth {
            PngDepth::Eight => png::BitDepth::Eight,
            PngDepth::Sixteen => png::BitDepth::Sixteen,
        });
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| Error::format(path, e))?;
        }
        let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
        let bytes: Vec<u8> = match depth {
            PngDepth::Eight => image.to_rgb8(),
            PngDepth::Sixteen => image.to_rgb16().iter().flat_map(|v| v.to_be_bytes()).collect(),
        };
        w.write_image_data(&bytes).map_err(|e| Error::format(path, e))?;
        w.finish().map_err(|e| Error::format(path, e))?;
    }
    write_atomic(path, &buf)
}

/// `tEXt` chunks of a PNG file.
pub fn png_text(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::format(path, e))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect())
}

pub fn save_png16(image: &Image, path: &Path) -> Result<()> {
    save_png(image, path, PngDepth::Sixteen, &[])
}

pub fn save_png8(image: &Image, path: &Path) -> Result<()> {
    save_png(image, path, PngDepth::Eight, &[])
}

/// Sidecar describing a descriptor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMeta {
    pub model: String,
    pub backend: String,
    pub pooling: String,
    pub resolution: String,
    pub whitening: Option<String>,
    pub dim: usize,
    /// Image id of each row, in file order.
    pub ids: Vec<String>,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write descriptors as little-endian `f32` rows plus the JSON sidecar.
pub fn write_descriptors(path: &Path, meta: &DescriptorMeta, descriptors: &[Descriptor]) -> Result<()> {
    if meta.ids.len() != descriptors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {} descriptors",
            meta.ids.len(),
            descriptors.len()
        )));
    }
    let mut bytes = Vec::with_capacity(4 * meta.dim * descriptors.len());
    for d in descriptors {
        if d.dim() != meta.dim {
            return Err(Error::ShapeMismatch(format!("descriptor of dim {} in a dim-{} file", d.dim(), meta.dim)));
        }
        for v in d.values() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)?;
    write_json(&sidecar_path(path), meta)
}

/// Read a descriptor file and its sidecar. Rows are renormalized after the
/// `f32` round trip.
pub fn read_descriptors(path: &Path) -> Result<(DescriptorMeta, Vec<Descriptor>)> {
    let meta: DescriptorMeta = read_json(&sidecar_path(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let row = 4 * meta.dim;
    if meta.dim == 0 || bytes.len() != row * meta.ids.len() {
        return Err(Error::format(
            path,
            format!("{} bytes do not hold {} descriptors of dim {}", bytes.len(), meta.ids.len(), meta.dim),
        ));
    }
    let descriptors = bytes
        .chunks_exact(row)
        .map(|r| {
            let v = r
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Descriptor::from_unnormalized(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((meta, descriptors))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    iteration: usize,
    distortion: f64,
    perf_loss: f64,
    sim_target: f64,
    sim_carrier: f64,
    attack_loss: f64,
    total_loss: f64,
    restart: usize,
}

/// Trace as CSV: `iteration, distortion, perf_loss, sim_target, sim_carrier,
/// attack_loss, total_loss, restart`.
pub fn trace_csv(trace: &AttackTrace) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &trace.records {
        w.serialize(TraceRow {
            iteration: r.iteration,
            distortion: r.metrics.distortion,
            perf_loss: r.metrics.perf_loss,
            sim_target: r.metrics.sim_target,
            sim_carrier: r.metrics.sim_carrier,
            attack_loss: r.attack_loss,
            total_loss: r.total_loss,
            restart: r.restart,
        })
        .map_err(|e| Error::InvalidInput(format!("cannot serialize trace: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(format!("cannot serialize trace: {e}")))
}

pub fn write_trace_csv(path: &Path, trace: &AttackTrace) -> Result<()> {
    write_atomic(path, &trace_csv(trace)?)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e))
}

/// Reads traces written by [`trace_csv`]; `#` lines are skipped.
pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv_reader(path)?;
    r.deserialize::<TraceRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::format(path, e))?;
            Ok(TraceRecord {
                iteration: row.iteration,
                restart: row.restart,
                metrics: TraceMetrics {
                    distortion: row.distortion,
                    perf_loss: row.perf_loss,
                    sim_target: row.sim_target,
                    sim_carrier: row.sim_carrier,
                },
                attack_loss: row.attack_loss,
                total_loss: row.total_loss,
            })
        })
        .collect()
}

/// Rows of a serializable type as CSV bytes.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidInput(format!("cannot serialize row: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(format!("cannot serialize rows: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

/// Reads CSV with a header row; `#` lines are skipped.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv_reader(path)?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e))).collect()
}
