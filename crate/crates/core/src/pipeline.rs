//! End-to-end orchestration: feature training, map building, simultaneous
//! localisation and change detection, and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_ae, AeModel, TrainConfig};
use crate::bolf::{assemble_bolf, unsupervised_proposals, BolfImage, BolfInput, BoundingBox, FeatureExtractor};
use crate::change::{detect, LocMap};
use crate::config;
use crate::ensemble::{train_ensemble, AeEnsemble};
use crate::error::{Error, Result};
use crate::eval::{baseline_ae_locmap, pool_cells, render_report, AccuracyTable, Annotation, CellGrid, OverlapMetric};
use crate::heatmap::write_loc_outputs;
use crate::image::GrayImage;
use crate::manifest::write_jsonl;
use crate::map::MapDatabase;
use crate::synth::SyntheticDataset;

/// Method names used for output directories and report columns.
pub const LCD_METHOD: &str = "LCD";
pub const AE_METHOD: &str = "AE";

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub input_side: usize,
    pub k: usize,
    pub train: TrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            input_side: config::DEFAULT_BASELINE_SIDE,
            k: config::DEFAULT_ENSEMBLE_K,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub feature_side: usize,
    pub feature_train: TrainConfig,
    pub hypotheses: usize,
    pub opr_weight: f64,
    pub baseline: Option<BaselineConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            feature_side: config::DEFAULT_FEATURE_SIDE,
            feature_train: TrainConfig::default(),
            hypotheses: config::DEFAULT_HYPOTHESES,
            opr_weight: config::DEFAULT_OPR_WEIGHT,
            baseline: None,
        }
    }
}

/// Patches the feature autoencoder is trained on: each image's full frame,
/// unsupervised proposals and external boxes, resized to `side`.
pub fn feature_training_set(images: &[(&GrayImage, &[BoundingBox])], side: usize) -> Result<Vec<Vec<f64>>> {
    let per_image = images
        .par_iter()
        .map(|(img, external)| {
            let mut boxes = vec![img.full_box()];
            boxes.extend(unsupervised_proposals(img.width(), img.height())?);
            boxes.extend(external.iter().take(config::MAX_EXTERNAL_BOXES));
            boxes
                .iter()
                .map(|b| img.crop_resized(b, side))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn train_feature_model(images: &[(&GrayImage, &[BoundingBox])], side: usize, train: &TrainConfig) -> Result<AeModel> {
    let samples = feature_training_set(images, side)?;
    log::info!("training feature autoencoder on {} patches", samples.len());
    let trained = train_ae(&samples, side, train)?;
    log::info!(
        "feature autoencoder: mse {:.5} -> {:.5}",
        trained.initial_mse,
        trained.final_mse
    );
    Ok(trained.model)
}

/// BoLFs of many images, extracted in parallel, in input order.
pub fn extract_all(
    images: &[(&str, &GrayImage, &[BoundingBox])],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<BolfImage>> {
    images
        .par_iter()
        .map(|(id, img, boxes)| assemble_bolf(id, BolfInput::Pixels(img), boxes, Some(extractor)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
    pub hypotheses: Vec<HypothesisRecord>,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub localization: LocalizationRecord,
    pub lcd: LocMap,
    pub ae: Option<LocMap>,
}

impl QueryOutcome {
    pub fn top1_correct(&self) -> Option<bool> {
        let gt = self.localization.reference_id.as_ref()?;
        Some(self.localization.hypotheses.first().map(|h| &h.image_id) == Some(gt))
    }
}

/// Localises and scores one query; with an ensemble, the baseline map uses
/// the background model of the top-ranked hypothesis.
pub fn process_query(
    db: &MapDatabase,
    query: &BolfImage,
    pixels: Option<&GrayImage>,
    reference_id: Option<&str>,
    ensemble: Option<&AeEnsemble>,
    hypotheses: usize,
    opr_weight: f64,
) -> Result<QueryOutcome> {
    let detection = detect(db, query, hypotheses, opr_weight)?;
    let records: Vec<HypothesisRecord> = detection
        .hypotheses
        .iter()
        .map(|h| HypothesisRecord {
            image_id: db.images()[h.image_index].id().to_string(),
            score: h.score,
        })
        .collect();
    let ae = match (ensemble, pixels) {
        (Some(ens), Some(img)) => Some(baseline_ae_locmap(ens, img, &records[0].image_id)?),
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!(
                "query `{}` has no pixels for the reconstruction baseline",
                query.id()
            )))
        }
        _ => None,
    };
    Ok(QueryOutcome {
        localization: LocalizationRecord {
            query_id: query.id().to_string(),
            reference_id: reference_id.map(str::to_string),
            hypotheses: records,
        },
        lcd: detection.loc,
        ae,
    })
}

pub struct PipelineRun {
    pub model: AeModel,
    pub database: MapDatabase,
    pub ensemble: Option<AeEnsemble>,
    pub outcomes: Vec<QueryOutcome>,
}

impl PipelineRun {
    /// Fraction of queries whose top hypothesis is their ground-truth reference.
    pub fn top1_recall(&self) -> f64 {
        let hits: Vec<bool> = self.outcomes.iter().filter_map(QueryOutcome::top1_correct).collect();
        hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64
    }

    pub fn method_maps(&self) -> Vec<(String, BTreeMap<String, LocMap>)> {
        let mut methods = vec![(
            LCD_METHOD.to_string(),
            self.outcomes
                .iter()
                .map(|o| (o.localization.query_id.clone(), o.lcd.clone()))
                .collect(),
        )];
        if self.ensemble.is_some() {
            methods.push((
                AE_METHOD.to_string(),
                self.outcomes
                    .iter()
                    .filter_map(|o| Some((o.localization.query_id.clone(), o.ae.clone()?)))
                    .collect(),
            ));
        }
        methods
    }

    /// Writes `hypotheses.jsonl` and one heatmap/CSV set per query and method.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records: Vec<&LocalizationRecord> = self.outcomes.iter().map(|o| &o.localization).collect();
        write_jsonl(&dir.join("hypotheses.jsonl"), &records)?;
        for (method, maps) in self.method_maps() {
            write_method_maps(dir, &method, &maps)?;
        }
        Ok(())
    }
}

pub fn write_method_maps(dir: &Path, method: &str, maps: &BTreeMap<String, LocMap>) -> Result<()> {
    let sub = dir.join(method);
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    for (id, loc) in maps {
        write_loc_outputs(loc, &sub, id)?;
    }
    Ok(())
}

/// Runs the full pipeline on a synthetic dataset: trains the feature model
/// on the references, builds the map, then localises and scores every query.
pub fn run_synthetic(dataset: &SyntheticDataset, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let refs: Vec<(&GrayImage, &[BoundingBox])> = dataset
        .references
        .iter()
        .map(|s| (&s.image, s.objects.as_slice()))
        .collect();
    let model = train_feature_model(&refs, cfg.feature_side, &cfg.feature_train)?;

    let ref_inputs: Vec<(&str, &GrayImage, &[BoundingBox])> = dataset
        .references
        .iter()
        .map(|s| (s.id.as_str(), &s.image, s.objects.as_slice()))
        .collect();
    let database = MapDatabase::from_images(extract_all(&ref_inputs, &model)?)?;

    let ensemble = cfg
        .baseline
        .as_ref()
        .map(|b| {
            let images: Vec<(String, GrayImage)> = dataset
                .references
                .iter()
                .map(|s| (s.id.clone(), s.image.clone()))
                .collect();
            train_ensemble(&images, b.k, b.input_side, &b.train)
        })
        .transpose()?;

    let query_inputs: Vec<(&str, &GrayImage, &[BoundingBox])> = dataset
        .queries
        .iter()
        .map(|q| (q.scene.id.as_str(), &q.scene.image, q.scene.objects.as_slice()))
        .collect();
    let query_bolfs = extract_all(&query_inputs, &model)?;
    let outcomes = dataset
        .queries
        .par_iter()
        .zip(&query_bolfs)
        .map(|(q, bolf)| {
            process_query(
                &database,
                bolf,
                Some(&q.scene.image),
                Some(&q.reference_id),
                ensemble.as_ref(),
                cfg.hypotheses,
                cfg.opr_weight,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineRun {
        model,
        database,
        ensemble,
        outcomes,
    })
}

/// Accuracy tables per metric and method, plus the rendered report.
pub struct Evaluation {
    pub tables: Vec<(OverlapMetric, Vec<(String, AccuracyTable)>)>,
    pub report: String,
}

impl Evaluation {
    pub fn table(&self, metric: OverlapMetric, method: &str) -> Option<&AccuracyTable> {
        self.tables
            .iter()
            .find(|(m, _)| *m == metric)?
            .1
            .iter()
            .find(|(name, _)| name == method)
            .map(|(_, t)| t)
    }
}

pub fn evaluate_methods(
    methods: &[(String, BTreeMap<String, LocMap>)],
    annotations: &[Annotation],
    x_percents: &[f64],
    thresholds: &[f64],
    cell_size: u32,
) -> Result<Evaluation> {
    let grids: Vec<(String, BTreeMap<String, CellGrid>)> = methods
        .iter()
        .map(|(name, maps)| {
            let g = maps
                .iter()
                .map(|(id, loc)| pool_cells(loc, cell_size).map(|g| (id.clone(), g)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok((name.clone(), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let tables = [OverlapMetric::Coverage, OverlapMetric::Iou]
        .into_iter()
        .map(|metric| {
            let per_method = grids
                .iter()
                .map(|(name, g)| {
                    AccuracyTable::compute(g, annotations, x_percents, thresholds, metric)
                        .map(|t| (name.clone(), t))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((metric, per_method))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = render_report(&tables, cell_size);
    Ok(Evaluation { tables, report })
}
