//! Procedural retrieval datasets for desk-scale runs and tests.
//!
//! Each group is one synthetic scene; database images are shifted, rescaled
//! and noisy views of it, and the group's query is one more view. Everything
//! is deterministic in the seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::ApConvention;
use super::dataset::{DatabaseEntry, GroundTruth, QueryRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::persist::{save_png16, write_json};
use crate::resample::resize;
use crate::synthetic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub name: String,
    pub groups: usize,
    /// Database views per group.
    pub views: usize,
    /// Largest side of every generated image.
    pub size: usize,
    /// Give every query a crop box covering most of its image.
    pub crop_queries: bool,
    /// Keep the query outside the database instead of reusing a view.
    pub separate_queries: bool,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            groups: 5,
            views: 2,
            size: 128,
            crop_queries: false,
            separate_queries: true,
            seed: 0,
        }
    }
}

fn view(scene: &Image, r: &mut ChaCha8Rng, seed: u64, w: usize, h: usize) -> Result<Image> {
    // random sub-window covering 70-100% of each side, resized back
    let fw = r.gen_range(0.7..=1.0);
    let fh = r.gen_range(0.7..=1.0);
    let cw = ((scene.width() as f64 * fw) as usize).max(1);
    let ch = ((scene.height() as f64 * fh) as usize).max(1);
    let x0 = r.gen_range(0..=scene.width() - cw);
    let y0 = r.gen_range(0..=scene.height() - ch);
    let region = resize(&scene.crop(x0, y0, cw, ch)?, w, h);
    let noise = synthetic::noise(seed, w, h);
    let amp = r.gen_range(0.02..0.08);
    let data = region.data().iter().zip(noise.data()).map(|(v, n)| v + amp * (n - 0.5)).collect();
    Image::from_planar_clipped("view", w, h, data)
}

/// Write `dir/images/*.png` and `dir/gt.json`; returns the ground-truth path.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticDatasetSpec) -> Result<std::path::PathBuf> {
    if spec.groups == 0 || spec.views == 0 {
        return Err(Error::Config("synthetic dataset needs at least one group and one view".into()));
    }
    if spec.size < 32 {
        return Err(Error::Config(format!("synthetic image size {} below 32", spec.size)));
    }
    let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
    let images = dir.join("images");
    let mut database = Vec::new();
    let mut queries = Vec::new();
    for g in 0..spec.groups {
        let landscape = r.gen_bool(0.7);
        let (w, h) = if landscape {
            (spec.size, spec.size * 3 / 4)
        } else {
            (spec.size * 3 / 4, spec.size)
        };
        let scene = synthetic::scene(spec.seed.wrapping_mul(1000) + g as u64, w * 5 / 4, h * 5 / 4);
        let mut ids = Vec::new();
        for v in 0..spec.views {
            let id = format!("g{g:03}v{v}");
            let img = view(&scene, &mut r, spec.seed ^ ((g * 31 + v) as u64), w, h)?;
            let file = format!("{id}.png");
            save_png16(&img, &images.join(&file))?;
            database.push(DatabaseEntry { id: id.clone(), file });
            ids.push(id);
        }
        let (image, file, relevant) = if spec.separate_queries {
            let file = format!("q{g:03}.png");
            let img = view(&scene, &mut r, spec.seed ^ (0xface + g as u64), w, h)?;
            save_png16(&img, &images.join(&file))?;
            (None, Some(file), ids.clone())
        } else {
            (Some(ids[0].clone()), None, ids[1..].to_vec())
        };
        let bbox = spec.crop_queries.then(|| [w / 10, h / 10, w - w / 10, h - h / 10]);
        queries.push(QueryRecord {
            id: format!("q{g:03}"),
            image,
            file,
            bbox,
            relevant,
            junk: Vec::new(),
        });
    }
    let truth = GroundTruth {
        name: spec.name.clone(),
        protocol: "classic".into(),
        ap: Some(ApConvention::Classic),
        exclude_self: Some(!spec.separate_queries),
        images: "images".into(),
        database,
        queries,
    };
    let gt = dir.join("gt.json");
    write_json(&gt, &truth)?;
    Ok(gt)
}
