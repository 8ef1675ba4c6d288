//! Retrieval datasets on disk: an images directory plus a ground-truth JSON
//! file.
//!
//! ```json
//! {
//!   "name": "holidays",
//!   "protocol": "classic",
//!   "images": "jpg",
//!   "database": [{"id": "100000", "file": "100000.jpg"}],
//!   "queries": [{"id": "100000", "image": "100000", "relevant": ["100001"]}]
//! }
//! ```
//!
//! Paths are relative to the JSON file. A query names either a database
//! `image` or its own `file`; `bbox` is `[x0, y0, x1, y1]` in source pixels,
//! exclusive on the right and bottom.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ap::ApConvention;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Resolution;
use crate::persist::{load_image, read_json};
use crate::resample::{check_resolution, resample, scaled_dims, resize};

/// Largest side every image is normalized to before anything else.
pub const DEFAULT_ORIGINAL_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseEntry {
    pub id: String,
    /// Relative to the images directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    /// Database id of the query image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Query image outside the database, relative to the images directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
    pub relevant: Vec<String>,
    #[serde(default)]
    pub junk: Vec<String>,
}

/// Which queries of a dataset take part in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySubset {
    All,
    First(usize),
}

impl QuerySubset {
    /// First 50 queries of Holidays and Copydays, every query elsewhere.
    pub fn standard(dataset: &str) -> Self {
        let name = dataset.to_ascii_lowercase();
        if name.starts_with("holidays") || name.starts_with("copydays") {
            QuerySubset::First(50)
        } else {
            QuerySubset::All
        }
    }

    pub fn take(self, n: usize) -> usize {
        match self {
            QuerySubset::All => n,
            QuerySubset::First(k) => k.min(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub name: String,
    /// Free-form protocol tag such as `classic` or `medium`.
    pub protocol: String,
    /// Defaults to revisited for ROxford/RParis and classic elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<ApConvention>,
    /// Drop the query's own database image from its ranking. Defaults to
    /// true for Holidays/Copydays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_self: Option<bool>,
    pub images: String,
    pub database: Vec<DatabaseEntry>,
    pub queries: Vec<QueryRecord>,
}

/// A validated dataset. Images are read on demand.
#[derive(Debug, Clone)]
pub struct RetrievalDataset {
    pub truth: GroundTruth,
    images_dir: PathBuf,
    index: HashMap<String, usize>,
}

fn is_revisited(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    n.starts_with("roxford") || n.starts_with("rparis")
}

fn is_classic_inria(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    n.starts_with("holidays") || n.starts_with("copydays")
}

impl RetrievalDataset {
    /// Read and validate the ground-truth file, including that every
    /// referenced image exists and every crop box fits its image.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("dataset ground truth {} not found", path.display())));
        }
        let truth: GroundTruth = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let images = root.join(&truth.images);
        Self::new(truth, images)
    }

    pub fn new(truth: GroundTruth, images_dir: PathBuf) -> Result<Self> {
        let mut index = HashMap::with_capacity(truth.database.len());
        for (i, e) in truth.database.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Config(format!("{}: duplicate database id '{}'", truth.name, e.id)));
            }
        }
        let ds = Self { truth, images_dir, index };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let name = &self.truth.name;
        if self.truth.database.is_empty() {
            return Err(Error::Config(format!("{name}: empty database")));
        }
        for e in &self.truth.database {
            let p = self.images_dir.join(&e.file);
            if !p.is_file() {
                return Err(Error::Config(format!("{name}: missing image {}", p.display())));
            }
        }
        let mut seen = HashSet::new();
        for q in &self.truth.queries {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::Config(format!("{name}: duplicate query id '{}'", q.id)));
            }
            for id in q.relevant.iter().chain(&q.junk) {
                if !self.index.contains_key(id) {
                    return Err(Error::Config(format!("{name}: query '{}' lists unknown database id '{id}'", q.id)));
                }
            }
            let path = self.query_path(q)?;
            if let Some([x0, y0, x1, y1]) = q.bbox {
                let (w, h) = image::image_dimensions(&path).map_err(|e| Error::format(&path, e))?;
                if x0 >= x1 || y0 >= y1 || x1 > w as usize || y1 > h as usize {
                    return Err(Error::Config(format!(
                        "{name}: query '{}' box {:?} outside its {w}x{h} image",
                        q.id,
                        [x0, y0, x1, y1]
                    )));
                }
            } else if !path.is_file() {
                return Err(Error::Config(format!("{name}: missing image {}", path.display())));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.truth.name
    }

    pub fn ap_convention(&self) -> ApConvention {
        self.truth.ap.unwrap_or(if is_revisited(&self.truth.name) {
            ApConvention::Revisited
        } else {
            ApConvention::Classic
        })
    }

    pub fn excludes_self(&self) -> bool {
        self.truth.exclude_self.unwrap_or_else(|| is_classic_inria(&self.truth.name))
    }

    pub fn database_ids(&self) -> Vec<String> {
        self.truth.database.iter().map(|e| e.id.clone()).collect()
    }

    pub fn queries(&self, subset: QuerySubset) -> &[QueryRecord] {
        &self.truth.queries[..subset.take(self.truth.queries.len())]
    }

    pub fn database_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn query_path(&self, q: &QueryRecord) -> Result<PathBuf> {
        match (&q.image, &q.file) {
            (Some(id), None) => {
                let i = self
                    .database_index(id)
                    .ok_or_else(|| Error::Config(format!("query '{}' names unknown image '{id}'", q.id)))?;
                Ok(self.images_dir.join(&self.truth.database[i].file))
            }
            (None, Some(f)) => Ok(self.images_dir.join(f)),
            _ => Err(Error::Config(format!("query '{}' needs exactly one of 'image' and 'file'", q.id))),
        }
    }

    /// Database image `i` with its largest side set to `original`.
    pub fn database_image(&self, i: usize, original: usize) -> Result<Image> {
        let e = &self.truth.database[i];
        let img = load_image(&self.images_dir.join(&e.file))?.with_id(e.id.clone());
        normalize(&img, original)
    }

    /// The query image at `test_resolution`: normalized to `original`, cropped
    /// if the record has a box, then scaled by the factor that takes the
    /// uncropped image to `test_resolution`. `Original` keeps the normalized
    /// scale.
    pub fn prepare_query(&self, q: &QueryRecord, test_resolution: Resolution, original: usize) -> Result<Image> {
        let source = load_image(&self.query_path(q)?)?.with_id(q.id.clone());
        prepare_query(&source, q.bbox, test_resolution, original)
    }
}

fn normalize(img: &Image, original: usize) -> Result<Image> {
    if img.max_dim() == original {
        return Ok(img.clone());
    }
    resample(img, original)
}

/// [`RetrievalDataset::prepare_query`] on an already loaded source image.
pub fn prepare_query(
    source: &Image,
    bbox: Option<[usize; 4]>,
    test_resolution: Resolution,
    original: usize,
) -> Result<Image> {
    check_resolution(original)?;
    let normalized = normalize(source, original)?;
    let region = match bbox {
        None => normalized,
        Some([x0, y0, x1, y1]) => {
            // box corners follow the source-to-normalized scale
            let f = normalized.width() as f64 / source.width() as f64;
            let g = normalized.height() as f64 / source.height() as f64;
            let (nx0, ny0) = ((x0 as f64 * f).round() as usize, (y0 as f64 * g).round() as usize);
            let nx1 = ((x1 as f64 * f).round() as usize).min(normalized.width());
            let ny1 = ((y1 as f64 * g).round() as usize).min(normalized.height());
            if nx1 <= nx0 || ny1 <= ny0 {
                return Err(Error::DegenerateCrop(format!("box {:?} vanishes at scale {original}", [x0, y0, x1, y1])));
            }
            normalized.crop(nx0, ny0, nx1 - nx0, ny1 - ny0)?
        }
    };
    match test_resolution {
        Resolution::Original => Ok(region),
        Resolution::Fixed(s) => {
            let (w, h) = scaled_dims(region.width(), region.height(), s, original);
            if (w, h) == (region.width(), region.height()) {
                return Ok(region);
            }
            if w == 0 || h == 0 {
                return Err(Error::DegenerateCrop(format!(
                    "{}x{} region vanishes at resolution {s}",
                    region.width(),
                    region.height()
                )));
            }
            Ok(resize(&region, w, h))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn no_crop_resamples_to_the_test_resolution() {
        let src = synthetic::scene(1, 200, 150);
        let q = prepare_query(&src, None, Resolution::Fixed(100), 200).unwrap();
        assert_eq!((q.width(), q.height()), (100, 75));
        let q = prepare_query(&src, None, Resolution::Original, 100).unwrap();
        assert_eq!((q.width(), q.height()), (100, 75));
    }

    #[test]
    fn crop_uses_the_uncropped_scale() {
        let src = synthetic::scene(2, 512, 384);
        // 512-max source, normalized to 256; a 128x128 box there is 64x64
        // and halves again at test resolution 128
        let q = prepare_query(&src, Some([64, 64, 192, 192]), Resolution::Fixed(128), 256).unwrap();
        assert_eq!((q.width(), q.height()), (32, 32));
    }

    #[test]
    fn stated_crop_arithmetic() {
        let src = Image::constant("c", 2048, 1024, 0.5).unwrap();
        let q = prepare_query(&src, Some([0, 0, 512, 512]), Resolution::Fixed(1024), 2048).unwrap();
        assert_eq!((q.width(), q.height()), (256, 256));
    }

    #[test]
    fn full_box_equals_no_box() {
        let src = synthetic::scene(3, 300, 180);
        for res in [Resolution::Original, Resolution::Fixed(96), Resolution::Fixed(150)] {
            let a = prepare_query(&src, None, res, 150).unwrap();
            let b = prepare_query(&src, Some([0, 0, 300, 180]), res, 150).unwrap();
            assert_eq!(a, b.with_id(a.id().to_string()));
        }
    }

    #[test]
    fn subset_rules() {
        assert_eq!(QuerySubset::standard("Holidays"), QuerySubset::First(50));
        assert_eq!(QuerySubset::standard("copydays-strong"), QuerySubset::First(50));
        assert_eq!(QuerySubset::standard("roxford5k"), QuerySubset::All);
        assert_eq!(QuerySubset::First(50).take(70), 50);
        assert_eq!(QuerySubset::First(50).take(10), 10);
        assert_eq!(QuerySubset::All.take(70), 70);
    }
}
