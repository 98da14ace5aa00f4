//! Likelihood-of-change maps from retrieval ranks.
//!
//! Each query local feature is ranked against every reference feature. Its
//! score with respect to a hypothesised reference image is the best 1-based
//! position reached by any of that image's features. Scores are spread over
//! the feature's box and fused per pixel with the harmonic mean; maps from
//! several hypotheses are combined with a per-pixel minimum.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::bolf::BolfImage;
use crate::error::{Error, Result};
use crate::map::{Hypothesis, MapDatabase, RankedList};

/// Per-pixel likelihood of change; larger means more likely changed.
#[derive(Debug, Clone, PartialEq)]
pub struct LocMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
    hypothesis: Option<usize>,
}

impl LocMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "LoC value {} at pixel {index} is not a finite nonnegative number",
                values[index]
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            hypothesis: None,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Reference image the map was computed against, if a single one.
    pub fn hypothesis(&self) -> Option<usize> {
        self.hypothesis
    }

    /// First pixel (row-major) holding the maximum value.
    pub fn argmax(&self) -> (u32, u32) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        let w = self.width as usize;
        ((best % w) as u32, (best / w) as u32)
    }
}

/// Harmonic mean of the ranks covering one pixel.
///
/// The reciprocal sum is accumulated as an exact fraction while it fits in
/// 128 bits, so the result is the correctly rounded value in that range.
pub fn fuse_pixel(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::NoCoverage);
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    let n = ranks.len();
    if let Some((num, den)) = reciprocal_sum(ranks) {
        // n / (num / den)
        if let Some(top) = den.checked_mul(n as u128) {
            if top % num == 0 && top / num < (1u128 << 53) {
                return Ok((top / num) as f64);
            }
            if top < (1u128 << 53) && num < (1u128 << 53) {
                return Ok(top as f64 / num as f64);
            }
        }
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let inv: f64 = sorted.iter().map(|&r| 1.0 / r as f64).sum();
    Ok(n as f64 / inv)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ 1/r` as a reduced fraction, or `None` on overflow.
fn reciprocal_sum(ranks: &[usize]) -> Option<(u128, u128)> {
    let (mut num, mut den) = (0u128, 1u128);
    for &r in ranks {
        let r = r as u128;
        num = num.checked_mul(r)?.checked_add(den)?;
        den = den.checked_mul(r)?;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    Some((num, den))
}

/// Best 1-based position in `ranked` of any feature of reference `ref_image`.
pub fn opr_rank(ranked: &RankedList, ref_image: usize) -> Result<usize> {
    ranked
        .entries()
        .iter()
        .position(|e| e.feature.image_index == ref_image)
        .map(|p| p + 1)
        .ok_or(Error::IndexOutOfRange {
            index: ref_image,
            len: ranked.len(),
        })
}

/// Per query feature, the best position of every map image in its ranked list.
#[derive(Debug, Clone)]
pub struct QueryRanks {
    best: Vec<Vec<usize>>,
}

impl QueryRanks {
    pub fn compute(db: &MapDatabase, query: &BolfImage) -> Result<Self> {
        let n = db.len();
        let best = (0..query.feature_count())
            .into_par_iter()
            .map(|j| {
                let (_, f) = query.local_feature(j).unwrap();
                db.rank_features(f).map(|list| list.best_positions(n))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { best })
    }

    /// Rank of each query feature with respect to reference `ref_image`.
    pub fn ranks_for(&self, ref_image: usize) -> Result<Vec<usize>> {
        self.best
            .iter()
            .map(|b| match b.get(ref_image) {
                Some(&r) if r != usize::MAX => Ok(r),
                _ => Err(Error::IndexOutOfRange {
                    index: ref_image,
                    len: b.len(),
                }),
            })
            .collect()
    }
}

/// Spreads each query feature's rank over its box and fuses per pixel.
pub fn fuse_ranks(query: &BolfImage, ranks: &[usize]) -> Result<LocMap> {
    if ranks.len() != query.feature_count() {
        return Err(Error::DimensionMismatch {
            expected: query.feature_count(),
            actual: ranks.len(),
        });
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    // Pixels covered by the same set of features share one fused value.
    let (w, h) = (query.width() as usize, query.height() as usize);
    let mut cover = vec![0u32; w * h];
    for (j, (bbox, _)) in query.local_features().enumerate() {
        let bit = 1u32 << j;
        for y in bbox.y0 as usize..bbox.y1 as usize {
            let row = y * w;
            for c in &mut cover[row + bbox.x0 as usize..row + bbox.x1 as usize] {
                *c |= bit;
            }
        }
    }
    let mut fused: HashMap<u32, f64> = HashMap::new();
    let mut values = Vec::with_capacity(w * h);
    for &mask in &cover {
        let v = match fused.get(&mask) {
            Some(&v) => v,
            None => {
                let covering: Vec<usize> = (0..ranks.len())
                    .filter(|j| mask & (1 << j) != 0)
                    .map(|j| ranks[j])
                    .collect();
                let v = fuse_pixel(&covering)?;
                fused.insert(mask, v);
                v
            }
        };
        values.push(v);
    }
    LocMap::new(query.width(), query.height(), values)
}

/// LoC map of `query` assuming reference `ref_index` shares its viewpoint.
pub fn loc_map_for_hypothesis(db: &MapDatabase, query: &BolfImage, ref_index: usize) -> Result<LocMap> {
    db.image(ref_index)?;
    let ranks = QueryRanks::compute(db, query)?;
    loc_map_from_ranks(query, &ranks, ref_index)
}

pub fn loc_map_from_ranks(query: &BolfImage, ranks: &QueryRanks, ref_index: usize) -> Result<LocMap> {
    let mut map = fuse_ranks(query, &ranks.ranks_for(ref_index)?)?;
    map.hypothesis = Some(ref_index);
    Ok(map)
}

/// Per-pixel minimum over hypothesis maps.
pub fn min_pool_hypotheses(maps: &[LocMap]) -> Result<LocMap> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("min-pooling needs at least one map".into()))?;
    let mut values = first.values.clone();
    for m in rest {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::DimensionMismatch {
                expected: first.values.len(),
                actual: m.values.len(),
            });
        }
        for (v, &o) in values.iter_mut().zip(&m.values) {
            *v = v.min(o);
        }
    }
    let mut pooled = LocMap::new(first.width, first.height, values)?;
    if maps.len() == 1 {
        pooled.hypothesis = first.hypothesis;
    }
    Ok(pooled)
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub hypotheses: Vec<Hypothesis>,
    pub loc: LocMap,
}

/// Localises `query` against the map and fuses the LoC maps of its `y`
/// best viewpoint hypotheses.
pub fn detect(db: &MapDatabase, query: &BolfImage, y: usize, opr_weight: f64) -> Result<Detection> {
    let hypotheses = db.localize(query, y, opr_weight)?;
    let ranks = QueryRanks::compute(db, query)?;
    let maps = hypotheses
        .iter()
        .map(|h| loc_map_from_ranks(query, &ranks, h.image_index))
        .collect::<Result<Vec<_>>>()?;
    Ok(Detection {
        loc: min_pool_hypotheses(&maps)?,
        hypotheses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bolf::{BoundingBox, FeatureVector, Opr, OprSource};
    use proptest::prelude::*;

    #[test]
    fn hand_fusion_examples() {
        assert_eq!(fuse_pixel(&[7]).unwrap(), 7.0);
        assert_eq!(fuse_pixel(&[2, 6]).unwrap(), 3.0);
        assert_eq!(fuse_pixel(&[3, 4, 6]).unwrap(), 4.0);
        assert_eq!(fuse_pixel(&[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(fuse_pixel(&[]), Err(Error::NoCoverage)));
        assert!(fuse_pixel(&[0, 2]).is_err());
    }

    #[test]
    fn fusion_survives_overflowing_fractions() {
        let primes = [
            9973, 9967, 9949, 9941, 9931, 9929, 9923, 9907, 9901, 9887, 9883, 9871, 9859, 9857,
            9851, 9839, 9833,
        ];
        let f = fuse_pixel(&primes).unwrap();
        let direct = primes.len() as f64 / primes.iter().map(|&p| 1.0 / p as f64).sum::<f64>();
        assert!((f - direct).abs() <= 1e-13 * direct);
    }

    proptest! {
        #[test]
        fn fusion_is_bounded_and_order_free(ranks in proptest::collection::vec(1usize..5000, 1..20)) {
            let f = fuse_pixel(&ranks).unwrap();
            let lo = *ranks.iter().min().unwrap() as f64;
            let hi = *ranks.iter().max().unwrap() as f64;
            prop_assert!(f >= lo * (1.0 - 1e-12) && f <= hi * (1.0 + 1e-12));
            let mut rev = ranks.clone();
            rev.reverse();
            let g = fuse_pixel(&rev).unwrap();
            prop_assert!((f - g).abs() <= 1e-12 * f);
        }
    }

    fn fv(v: f64) -> FeatureVector {
        FeatureVector::new(vec![v, -v]).unwrap()
    }

    fn query(values: &[f64], boxes: &[BoundingBox]) -> BolfImage {
        let oprs = values[1..]
            .iter()
            .zip(boxes)
            .map(|(&v, &bbox)| Opr {
                bbox,
                feature: fv(v),
                source: OprSource::External,
            })
            .collect();
        BolfImage::new("q", 9, 6, fv(values[0]), oprs).unwrap()
    }

    #[test]
    fn opr_rank_takes_the_best_position() {
        let boxes = [BoundingBox::new(0, 0, 3, 3).unwrap(); 3];
        let db = MapDatabase::from_images([
            query(&[10.0, 20.0, 30.0, 40.0], &boxes),
            query(&[0.0, 1.0, 2.0, 3.0], &boxes),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, q)| BolfImage::new(format!("r{i}"), 9, 6, q.full_feature().clone(), q.oprs().to_vec()).unwrap()))
        .unwrap();
        let list = db.rank_features(&fv(1.2)).unwrap();
        assert_eq!(opr_rank(&list, 1).unwrap(), 1);
        // image 0's nearest feature (10) comes after all four features of image 1
        assert_eq!(opr_rank(&list, 0).unwrap(), 5);
        assert!(opr_rank(&list, 2).is_err());
    }

    #[test]
    fn fused_map_follows_box_coverage() {
        let boxes = [BoundingBox::new(0, 0, 3, 3).unwrap(), BoundingBox::new(2, 2, 9, 6).unwrap()];
        let q = query(&[0.0, 0.0, 0.0], &boxes);
        let map = fuse_ranks(&q, &[1, 7, 1]).unwrap();
        // only full image
        assert_eq!(map.get(8, 0), 1.0);
        // full + first box
        assert_eq!(map.get(0, 0), 7.0 / 4.0);
        // all three
        assert_eq!(map.get(2, 2), 7.0 / 5.0);
        assert_eq!(map.argmax(), (0, 0));
    }

    #[test]
    fn min_pool_examples() {
        let a = LocMap::new(1, 1, vec![5.0]).unwrap();
        let b = LocMap::new(1, 1, vec![12.0]).unwrap();
        let c = LocMap::new(1, 1, vec![300.0]).unwrap();
        let pooled = min_pool_hypotheses(&[b.clone(), c.clone(), a.clone()]).unwrap();
        assert_eq!(pooled.values(), &[5.0]);
        assert_eq!(min_pool_hypotheses(std::slice::from_ref(&b)).unwrap(), b);
        let wide = LocMap::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(min_pool_hypotheses(&[a, wide]).is_err());
        assert!(min_pool_hypotheses(&[]).is_err());
    }

    #[test]
    fn locmap_rejects_negative_values() {
        assert!(LocMap::new(2, 1, vec![1.0, -0.5]).is_err());
        assert!(LocMap::new(2, 1, vec![1.0]).is_err());
    }
}
