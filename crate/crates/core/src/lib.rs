//! Simultaneous loop-closure detection and image change detection.
//!
//! Images are described as bags of local features (a full-image feature plus
//! one feature per object proposal region). Retrieval against a map database
//! yields viewpoint hypotheses; the rank that each query region assigns to a
//! hypothesised reference image is fused per pixel into a likelihood-of-change
//! map, and maps from several hypotheses are min-pooled. An autoencoder
//! provides both the region features and a reconstruction-error baseline.

mod binio;

pub mod autoencoder;
pub mod bolf;
pub mod change;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod image;
pub mod kmeans;
pub mod manifest;
pub mod map;
pub mod pipeline;
pub mod synth;

pub use autoencoder::{train_ae, AeModel, TrainConfig, TrainedAe};
pub use bolf::{assemble_bolf, unsupervised_proposals, BolfImage, BolfInput, BoundingBox, FeatureExtractor, FeatureVector, Opr, OprSource};
pub use change::{detect, fuse_pixel, loc_map_for_hypothesis, min_pool_hypotheses, opr_rank, Detection, LocMap};
pub use ensemble::{train_ensemble, AeEnsemble};
pub use error::{Error, Result};
pub use eval::{pool_cells, top_x_accuracy, Annotation, CellGrid, OverlapMetric};
pub use image::GrayImage;
pub use kmeans::{kmeans, KMeans};
pub use map::{FeatureRef, Hypothesis, MapDatabase, RankedEntry, RankedList};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
