//! Bag-of-local-features image representation.
//!
//! An image is described by one feature for the whole frame plus one feature
//! per object proposal region (OPR). Five OPRs come from a fixed unsupervised
//! layout over the frame; up to [`MAX_EXTERNAL_BOXES`] more are supplied by an
//! external detector.

use std::fmt;

use crate::config::MAX_EXTERNAL_BOXES;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Half-open pixel box `[x0, x1) × [y0, y1)`, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::EmptyBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::EmptyBox {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
            });
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::BoxOutOfBounds {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x0, self.x1, self.y0, self.y1)
    }
}

/// The five unsupervised proposal boxes for a `width`×`height` image, in the
/// order: centre, top-left, top-right, bottom-left, bottom-right. Thirds are
/// floored.
pub fn unsupervised_proposals(width: u32, height: u32) -> Result<[BoundingBox; 5]> {
    if width < 3 || height < 3 {
        return Err(Error::DegenerateBox { width, height });
    }
    let (w1, w2) = (width / 3, 2 * width / 3);
    let (h1, h2) = (height / 3, 2 * height / 3);
    let b = |x0, y0, x1, y1| BoundingBox { x0, y0, x1, y1 };
    Ok([
        b(w1, h1, w2, h2),
        b(0, 0, w2, h2),
        b(w1, 0, width, h2),
        b(0, h1, w2, height),
        b(w1, h1, width, height),
    ])
}

/// Fixed-length real feature vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("feature vector must not be empty".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature { index });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        l2_distance(&self.0, &other.0)
    }
}

/// Euclidean distance between two equal-length slices.
#[inline]
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OprSource {
    Unsupervised,
    External,
    FullImage,
}

impl OprSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            OprSource::Unsupervised => "unsupervised",
            OprSource::External => "external",
            OprSource::FullImage => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unsupervised" => Some(OprSource::Unsupervised),
            "external" => Some(OprSource::External),
            "full" => Some(OprSource::FullImage),
            _ => None,
        }
    }
}

/// Object proposal region: a box and the feature describing its content.
#[derive(Debug, Clone, PartialEq)]
pub struct Opr {
    pub bbox: BoundingBox,
    pub feature: FeatureVector,
    pub source: OprSource,
}

/// Encodes square pixel patches into feature vectors.
pub trait FeatureExtractor: Sync {
    /// Side length of the square patch expected by [`FeatureExtractor::extract`].
    fn input_side(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn extract(&self, patch: &[f64]) -> Result<FeatureVector>;
}

/// An image's bag of local features.
///
/// Local feature 0 is always the full-image pseudo-OPR covering the whole
/// frame; local features `1..` are the entries of [`BolfImage::oprs`].
#[derive(Debug, Clone, PartialEq)]
pub struct BolfImage {
    id: String,
    width: u32,
    height: u32,
    full_feature: FeatureVector,
    oprs: Vec<Opr>,
}

/// Maximum number of OPRs (full image excluded) an image may carry.
pub const MAX_OPRS: usize = 5 + MAX_EXTERNAL_BOXES;

impl BolfImage {
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        full_feature: FeatureVector,
        oprs: Vec<Opr>,
    ) -> Result<Self> {
        let id = id.into();
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image `{id}` has empty dimensions {width}x{height}"
            )));
        }
        if oprs.is_empty() || oprs.len() > MAX_OPRS {
            return Err(Error::InvalidArgument(format!(
                "image `{id}` has {} OPRs; expected 1..={MAX_OPRS}",
                oprs.len()
            )));
        }
        let dim = full_feature.dim();
        for opr in &oprs {
            if opr.source == OprSource::FullImage {
                return Err(Error::InvalidArgument(format!(
                    "image `{id}` lists more than one full-image feature"
                )));
            }
            opr.bbox.check_within(width, height)?;
            if opr.feature.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: opr.feature.dim(),
                });
            }
        }
        Ok(Self {
            id,
            width,
            height,
            full_feature,
            oprs,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn full_feature(&self) -> &FeatureVector {
        &self.full_feature
    }

    pub fn oprs(&self) -> &[Opr] {
        &self.oprs
    }

    pub fn feature_dim(&self) -> usize {
        self.full_feature.dim()
    }

    /// Number of local features, full image included.
    pub fn feature_count(&self) -> usize {
        1 + self.oprs.len()
    }

    pub fn local_feature(&self, index: usize) -> Option<(BoundingBox, &FeatureVector)> {
        match index {
            0 => Some((BoundingBox::full(self.width, self.height), &self.full_feature)),
            i => self.oprs.get(i - 1).map(|o| (o.bbox, &o.feature)),
        }
    }

    /// All local features, full image first.
    pub fn local_features(&self) -> impl Iterator<Item = (BoundingBox, &FeatureVector)> + '_ {
        (0..self.feature_count()).filter_map(|i| self.local_feature(i))
    }
}

/// Content from which a [`BolfImage`] is assembled.
pub enum BolfInput<'a> {
    /// Raw pixels; every feature is extracted.
    Pixels(&'a GrayImage),
    /// Features already computed elsewhere, attached verbatim.
    Precomputed {
        width: u32,
        height: u32,
        full_feature: FeatureVector,
        oprs: Vec<Opr>,
    },
}

/// Builds the BoLF of one image.
///
/// From pixels, the result holds the full-image feature, one OPR per
/// unsupervised proposal and one per external box (at most
/// [`MAX_EXTERNAL_BOXES`]; extra boxes are dropped). Each region is cropped,
/// resized to the extractor's input side and encoded.
pub fn assemble_bolf(
    id: &str,
    input: BolfInput<'_>,
    external_boxes: &[BoundingBox],
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<BolfImage> {
    match input {
        BolfInput::Precomputed {
            width,
            height,
            full_feature,
            oprs,
        } => {
            if let Some(ex) = extractor {
                if ex.feature_dim() != full_feature.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: ex.feature_dim(),
                        actual: full_feature.dim(),
                    });
                }
            }
            BolfImage::new(id, width, height, full_feature, oprs)
        }
        BolfInput::Pixels(image) => {
            let extractor = extractor.ok_or_else(|| {
                Error::InvalidArgument(format!("image `{id}` needs a feature extractor"))
            })?;
            let (width, height) = (image.width(), image.height());
            for b in external_boxes {
                b.check_within(width, height)?;
            }
            let external = if external_boxes.len() > MAX_EXTERNAL_BOXES {
                log::warn!(
                    "image `{id}`: {} external boxes, keeping the first {MAX_EXTERNAL_BOXES}",
                    external_boxes.len()
                );
                &external_boxes[..MAX_EXTERNAL_BOXES]
            } else {
                external_boxes
            };
            let side = extractor.input_side();
            let encode = |b: &BoundingBox| -> Result<FeatureVector> {
                let fv = extractor.extract(&image.crop_resized(b, side)?)?;
                if fv.dim() != extractor.feature_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: extractor.feature_dim(),
                        actual: fv.dim(),
                    });
                }
                Ok(fv)
            };
            let full_feature = encode(&image.full_box())?;
            let mut oprs = Vec::with_capacity(5 + external.len());
            for bbox in unsupervised_proposals(width, height)? {
                oprs.push(Opr {
                    feature: encode(&bbox)?,
                    bbox,
                    source: OprSource::Unsupervised,
                });
            }
            for &bbox in external {
                oprs.push(Opr {
                    feature: encode(&bbox)?,
                    bbox,
                    source: OprSource::External,
                });
            }
            BolfImage::new(id, width, height, full_feature, oprs)
        }
    }
}
