//! Line-delimited JSON manifests, annotation files and the map container.
//!
//! Manifest record, one per line:
//!
//! ```text
//! {"id": "r0001", "width": 160, "height": 120,
//!  "image_path": "images/r0001.pgm", "boxes": [[x0, y0, x1, y1], ...],
//!  "reference_id": "r0001"}
//! ```
//!
//! or, with features computed elsewhere, `"features": [{"box": [x0, y0, x1,
//! y1], "source": "full" | "unsupervised" | "external", "values": [...]}]` in
//! place of `image_path`. Exactly one feature must have source `full`.
//! `boxes` lists externally detected proposal boxes; `reference_id` names the
//! ground-truth reference of a query and is optional. Relative image paths
//! are resolved against the manifest's directory.
//!
//! Annotation record: `{"query_id": "q0001", "boxes": [[x0, y0, x1, y1], ...]}`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::bolf::{assemble_bolf, BolfImage, BolfInput, BoundingBox, FeatureExtractor, FeatureVector, Opr, OprSource};
use crate::error::{Error, Result};
use crate::eval::Annotation;
use crate::image::GrayImage;
use crate::map::MapDatabase;

const MAP_MAGIC: &[u8; 8] = b"LCDICDMP";
const MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub source: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<[u32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<FeatureRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub query_id: String,
    pub boxes: Vec<[u32; 4]>,
}

fn to_box(b: [u32; 4]) -> Result<BoundingBox> {
    BoundingBox::new(b[0], b[1], b[2], b[3])
}

/// Manifest loaded from disk, with the directory used to resolve image paths.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records: Vec<ImageRecord> = read_jsonl(path)?;
        for (line, r) in records.iter().enumerate() {
            let fail = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line + 1,
                message,
            };
            match (&r.image_path, &r.features) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(fail(format!(
                        "record `{}` needs exactly one of image_path or features",
                        r.id
                    )))
                }
            }
            if r.width == 0 || r.height == 0 {
                return Err(fail(format!("record `{}` has empty dimensions", r.id)));
            }
        }
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn image_path(&self, record: &ImageRecord) -> Option<PathBuf> {
        record.image_path.as_ref().map(|p| self.base_dir.join(p))
    }

    /// Loads the record's pixels, checking the declared dimensions.
    pub fn load_image(&self, record: &ImageRecord) -> Result<GrayImage> {
        let path = self.image_path(record).ok_or_else(|| {
            Error::InvalidArgument(format!("record `{}` has no image_path", record.id))
        })?;
        let img = GrayImage::read_pgm(&path)?;
        if (img.width(), img.height()) != (record.width, record.height) {
            return Err(Error::InvalidArgument(format!(
                "{}: image is {}x{}, manifest says {}x{}",
                path.display(),
                img.width(),
                img.height(),
                record.width,
                record.height
            )));
        }
        Ok(img)
    }

    pub fn external_boxes(record: &ImageRecord) -> Result<Vec<BoundingBox>> {
        record.boxes.iter().map(|&b| to_box(b)).collect()
    }

    /// Builds the record's BoLF, extracting features from pixels when needed.
    pub fn to_bolf(&self, record: &ImageRecord, extractor: Option<&dyn FeatureExtractor>) -> Result<BolfImage> {
        if let Some(features) = &record.features {
            let mut full = None;
            let mut oprs = Vec::new();
            for f in features {
                let source = OprSource::parse(&f.source).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown feature source `{}`", f.source))
                })?;
                let feature = FeatureVector::new(f.values.clone())?;
                let bbox = to_box(f.bbox)?;
                if source == OprSource::FullImage {
                    if full.replace(feature).is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "record `{}` has several full-image features",
                            record.id
                        )));
                    }
                } else {
                    oprs.push(Opr {
                        bbox,
                        feature,
                        source,
                    });
                }
            }
            let full_feature = full.ok_or_else(|| {
                Error::InvalidArgument(format!("record `{}` lacks a full-image feature", record.id))
            })?;
            return assemble_bolf(
                &record.id,
                BolfInput::Precomputed {
                    width: record.width,
                    height: record.height,
                    full_feature,
                    oprs,
                },
                &[],
                extractor,
            );
        }
        let image = self.load_image(record)?;
        assemble_bolf(
            &record.id,
            BolfInput::Pixels(&image),
            &Self::external_boxes(record)?,
            extractor,
        )
    }
}

/// Features-form record describing `image`.
pub fn bolf_record(image: &BolfImage) -> ImageRecord {
    let features = std::iter::once(FeatureRecord {
        bbox: BoundingBox::full(image.width(), image.height()).to_array(),
        source: OprSource::FullImage.as_str().to_string(),
        values: image.full_feature().as_slice().to_vec(),
    })
    .chain(image.oprs().iter().map(|o| FeatureRecord {
        bbox: o.bbox.to_array(),
        source: o.source.as_str().to_string(),
        values: o.feature.as_slice().to_vec(),
    }))
    .collect();
    ImageRecord {
        id: image.id().to_string(),
        width: image.width(),
        height: image.height(),
        image_path: None,
        boxes: Vec::new(),
        features: Some(features),
        reference_id: None,
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("in-memory serialisation");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    std::fs::write(path, to_jsonl(items)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    read_jsonl::<AnnotationRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let boxes = r.boxes.iter().map(|&b| to_box(b)).collect::<Result<Vec<_>>>();
            boxes
                .map(|boxes| Annotation {
                    query_id: r.query_id,
                    boxes,
                })
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let records: Vec<AnnotationRecord> = annotations
        .iter()
        .map(|a| AnnotationRecord {
            query_id: a.query_id.clone(),
            boxes: a.boxes.iter().map(BoundingBox::to_array).collect(),
        })
        .collect();
    write_jsonl(path.as_ref(), &records)
}

/// Serialises the map: an index header (magic, version, feature dim, image
/// and feature counts, manifest length) followed by the features-form
/// manifest of every image in insertion order.
pub fn write_map<W: Write>(db: &MapDatabase, out: W) -> Result<()> {
    let records: Vec<ImageRecord> = db.images().iter().map(bolf_record).collect();
    let body = to_jsonl(&records);
    let mut w = Writer::new(out);
    w.bytes(MAP_MAGIC)?;
    w.u32(MAP_VERSION)?;
    w.u32(db.feature_dim().unwrap_or(0) as u32)?;
    w.u64(db.len() as u64)?;
    w.u64(db.feature_count() as u64)?;
    w.u64(body.len() as u64)?;
    w.bytes(&body)
}

pub fn read_map(bytes: &[u8]) -> Result<MapDatabase> {
    let mut r = Reader::new(bytes, "map");
    r.expect_magic(MAP_MAGIC)?;
    let version = r.u32()?;
    if version != MAP_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let n_images = r.u64()? as usize;
    let n_features = r.u64()? as usize;
    let len = r.u64()? as usize;
    let body = r.bytes(len)?;
    let manifest = Manifest {
        base_dir: PathBuf::new(),
        records: Vec::new(),
    };
    let mut db = MapDatabase::new();
    for (i, line) in body.split(|&b| b == b'\n').filter(|l| !l.is_empty()).enumerate() {
        let record: ImageRecord = serde_json::from_slice(line)
            .map_err(|e| r.error(format!("record {}: {e}", i + 1)))?;
        if record.features.is_none() {
            return Err(r.error(format!("record `{}` carries no features", record.id)));
        }
        db.insert(manifest.to_bolf(&record, None)?)?;
    }
    if db.len() != n_images || db.feature_count() != n_features || db.feature_dim().unwrap_or(0) != dim {
        return Err(r.error("index header disagrees with the stored records"));
    }
    Ok(db)
}

pub fn save_map(db: &MapDatabase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_map(db, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<MapDatabase> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_map(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features_line(id: &str, n: usize, dim: usize) -> String {
        let mut feats = vec![format!(
            r#"{{"box":[0,0,90,60],"source":"full","values":{:?}}}"#,
            vec![0.5; dim]
        )];
        for i in 0..n {
            feats.push(format!(
                r#"{{"box":[{i},0,{},30],"source":"unsupervised","values":{:?}}}"#,
                i + 10,
                vec![i as f64; dim]
            ));
        }
        format!(r#"{{"id":"{id}","width":90,"height":60,"features":[{}]}}"#, feats.join(","))
    }

    #[test]
    fn precomputed_record_echoes_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, features_line("a", 5, 16) + "\n").unwrap();
        let m = Manifest::read(&path).unwrap();
        let bolf = m.to_bolf(&m.records[0], None).unwrap();
        assert_eq!(bolf.feature_count(), 6);
        assert_eq!(bolf.oprs()[3].feature.as_slice(), &[3.0; 16]);
        assert_eq!(bolf_record(&bolf), m.records[0]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, features_line("a", 5, 4) + "\n\n{\"id\": 3}\n").unwrap();
        match Manifest::read(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_with_both_sources_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, r#"{"id":"a","width":3,"height":3}"#).unwrap();
        assert!(matches!(Manifest::read(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn map_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let body = (0..4).map(|i| features_line(&format!("r{i}"), 5, 3)).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, body).unwrap();
        let m = Manifest::read(&path).unwrap();
        let db = MapDatabase::from_images(m.records.iter().map(|r| m.to_bolf(r, None).unwrap())).unwrap();
        let mut buf = Vec::new();
        write_map(&db, &mut buf).unwrap();
        let back = read_map(&buf).unwrap();
        assert_eq!(back.images(), db.images());
        buf[8] = 9;
        assert!(read_map(&buf).is_err());
    }

    #[test]
    fn annotations_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let anns = vec![Annotation {
            query_id: "q1".into(),
            boxes: vec![BoundingBox::new(1, 2, 3, 4).unwrap()],
        }];
        write_annotations(&path, &anns).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), anns);
    }
}
