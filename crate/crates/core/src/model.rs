//! Retrieval test-models: resolution, backend, pooling and optional whitening.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::FeatureBackend;
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pooling::{pool, PoolingKind};
use crate::resample::{check_resolution, ResolutionView};
use crate::tensor::ActivationTensor;
use crate::whitening::WhiteningTransform;

/// Resolution at which a model processes images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Resolution {
    /// Use the image as given.
    Original,
    /// Rescale so the largest side (or the reference side) becomes `s`.
    Fixed(usize),
}

impl Resolution {
    pub fn fixed(s: usize) -> Result<Self> {
        check_resolution(s)?;
        Ok(Resolution::Fixed(s))
    }

    /// View of a `width x height` image at this resolution. `reference` is the
    /// side length that maps to `s` (normally the image's own largest side).
    pub fn view(self, width: usize, height: usize, reference: usize) -> Result<ResolutionView> {
        match self {
            Resolution::Original => Ok(ResolutionView::identity(width, height)),
            Resolution::Fixed(s) => ResolutionView::new(width, height, s, reference, false),
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resolution::Original => f.write_str("original"),
            Resolution::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" | "s0" => Ok(Resolution::Original),
            other => {
                let v: usize = other
                    .parse()
                    .map_err(|_| Error::Config(format!("bad resolution '{s}'")))?;
                Resolution::fixed(v)
            }
        }
    }
}

impl TryFrom<String> for Resolution {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Resolution> for String {
    fn from(r: Resolution) -> Self {
        r.to_string()
    }
}

/// The `[backend, pooling, resolution]` triplet used at retrieval time, plus
/// optional whitening.
#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub backend: Arc<FeatureBackend>,
    pub resolution: Resolution,
    pub pooling: PoolingKind,
    pub whitening: Option<Arc<WhiteningTransform>>,
}

impl RetrievalModel {
    pub fn new(backend: Arc<FeatureBackend>, resolution: Resolution, pooling: PoolingKind) -> Self {
        Self {
            backend,
            resolution,
            pooling,
            whitening: None,
        }
    }

    pub fn with_whitening(mut self, w: Arc<WhiteningTransform>) -> Self {
        self.whitening = Some(w);
        self
    }

    /// Short label such as `[A-random-w0.25-s1, gem, 1024]`.
    pub fn label(&self) -> String {
        let mut s = format!("[{}, {}, {}", self.backend.label(), self.pooling, self.resolution);
        if let Some(w) = &self.whitening {
            s.push_str(", ");
            s.push_str(&w.id);
        }
        s.push(']');
        s
    }

    /// Activation tensor of `image` at the model resolution.
    pub fn tensor(&self, image: &Image) -> Result<ActivationTensor> {
        self.tensor_scaled(image, image.max_dim())
    }

    /// Like [`tensor`](Self::tensor), with `reference` pixels mapping to the
    /// model resolution (cropped queries keep the uncropped image's scale).
    pub fn tensor_scaled(&self, image: &Image, reference: usize) -> Result<ActivationTensor> {
        let view = self.resolution.view(image.width(), image.height(), reference)?;
        let x = view.apply(image)?;
        self.backend.forward(&x)
    }

    pub fn describe(&self, image: &Image) -> Result<Descriptor> {
        self.describe_scaled(image, image.max_dim())
    }

    pub fn describe_scaled(&self, image: &Image, reference: usize) -> Result<Descriptor> {
        let d = pool(&self.tensor_scaled(image, reference)?, self.pooling)?;
        match &self.whitening {
            Some(w) => w.apply(&d),
            None => Ok(d),
        }
    }
}

/// `describe` as a free function.
pub fn describe(model: &RetrievalModel, image: &Image) -> Result<Descriptor> {
    model.describe(image)
}
