//! Map database with exact per-feature ranking and NBNN image retrieval.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::bolf::{l2_distance, BolfImage, FeatureVector};
use crate::error::{Error, Result};

/// Location of one reference feature: image position in the map and local
/// feature index within that image (0 is the full image).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureRef {
    pub image_index: usize,
    pub opr_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub feature: FeatureRef,
    pub distance: f64,
}

impl RankedEntry {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.feature.cmp(&other.feature))
    }
}

/// Every reference feature ordered by ascending distance to one query
/// feature, ties broken by `(image_index, opr_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based position of the best-ranked feature of each image.
    pub fn best_positions(&self, image_count: usize) -> Vec<usize> {
        let mut best = vec![usize::MAX; image_count];
        for (pos, e) in self.entries.iter().enumerate() {
            let slot = &mut best[e.feature.image_index];
            if *slot == usize::MAX {
                *slot = pos + 1;
            }
        }
        best
    }
}

/// A candidate reference image for the query's viewpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub image_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MapDatabase {
    images: Vec<BolfImage>,
    ids: HashMap<String, usize>,
    table: Vec<FeatureRef>,
    /// Feature values, `table.len() × dim`, row-major.
    values: Vec<f64>,
    dim: Option<usize>,
}

impl MapDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_images(images: impl IntoIterator<Item = BolfImage>) -> Result<Self> {
        let mut db = Self::new();
        for image in images {
            db.insert(image)?;
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[BolfImage] {
        &self.images
    }

    pub fn image(&self, index: usize) -> Result<&BolfImage> {
        self.images.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.images.len(),
        })
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.get(id).copied()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.dim
    }

    /// Number of reference features, full-image features included.
    pub fn feature_count(&self) -> usize {
        self.table.len()
    }

    pub fn feature_table(&self) -> &[FeatureRef] {
        &self.table
    }

    /// Registers every local feature of `image` under the next image index.
    pub fn insert(&mut self, image: BolfImage) -> Result<usize> {
        if self.ids.contains_key(image.id()) {
            return Err(Error::DuplicateId(image.id().to_string()));
        }
        let dim = *self.dim.get_or_insert(image.feature_dim());
        if image.feature_dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: image.feature_dim(),
            });
        }
        let image_index = self.images.len();
        for (opr_index, (_, feature)) in image.local_features().enumerate() {
            self.table.push(FeatureRef {
                image_index,
                opr_index,
            });
            self.values.extend_from_slice(feature.as_slice());
        }
        self.ids.insert(image.id().to_string(), image_index);
        self.images.push(image);
        Ok(image_index)
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        match self.dim {
            Some(expected) if expected != actual => {
                Err(Error::DimensionMismatch { expected, actual })
            }
            _ => Ok(()),
        }
    }

    /// All reference features ranked by L2 distance to `query`.
    pub fn rank_features(&self, query: &FeatureVector) -> Result<RankedList> {
        self.check_dim(query.dim())?;
        let q = query.as_slice();
        let dim = q.len();
        let mut entries: Vec<RankedEntry> = self
            .table
            .par_iter()
            .with_min_len(512)
            .enumerate()
            .map(|(row, &feature)| RankedEntry {
                feature,
                distance: l2_distance(q, &self.values[row * dim..(row + 1) * dim]),
            })
            .collect();
        entries.par_sort_unstable_by(RankedEntry::cmp_key);
        Ok(RankedList { entries })
    }

    /// NBNN dissimilarity between `query` and reference `ref_index`: the
    /// full-image distance plus `opr_weight` times the mean, over the query's
    /// OPRs, of the distance to the nearest local feature of the reference.
    pub fn nbnn_score(&self, query: &BolfImage, ref_index: usize, opr_weight: f64) -> Result<f64> {
        let reference = self.image(ref_index)?;
        self.check_dim(query.feature_dim())?;
        let full = query.full_feature().distance(reference.full_feature());
        let oprs = query.oprs();
        if oprs.is_empty() || opr_weight == 0.0 {
            return Ok(full);
        }
        let mut sum = 0.0;
        for opr in oprs {
            let q = opr.feature.as_slice();
            sum += reference
                .local_features()
                .map(|(_, f)| l2_distance(q, f.as_slice()))
                .fold(f64::INFINITY, f64::min);
        }
        Ok(full + opr_weight * sum / oprs.len() as f64)
    }

    /// The `y` best viewpoint hypotheses by ascending NBNN score, ties broken
    /// by image index.
    pub fn localize(&self, query: &BolfImage, y: usize, opr_weight: f64) -> Result<Vec<Hypothesis>> {
        if y == 0 || y > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {y} hypotheses from a map of {} images",
                self.len()
            )));
        }
        let mut scored = (0..self.len())
            .into_par_iter()
            .map(|i| {
                self.nbnn_score(query, i, opr_weight).map(|score| Hypothesis {
                    image_index: i,
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_unstable_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(a.image_index.cmp(&b.image_index))
        });
        scored.truncate(y);
        Ok(scored)
    }
}
