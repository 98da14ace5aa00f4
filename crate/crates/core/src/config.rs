//! Default constants of the LCD-ICD pipeline.

/// Number of viewpoint hypotheses aggregated per query.
pub const DEFAULT_HYPOTHESES: usize = 10;

/// Weight of the mean per-OPR NBNN term relative to the full-image distance.
pub const DEFAULT_OPR_WEIGHT: f64 = 1.0 / 20.0;

/// Side length in pixels of the evaluation grid cells.
pub const DEFAULT_CELL_SIZE: u32 = 10;

/// Top-X percentages reported by the evaluation.
pub const DEFAULT_TOP_X: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

/// Coverage thresholds reported by the evaluation.
pub const DEFAULT_IOU: [f64; 2] = [0.5, 0.25];

/// Number of cluster-specific autoencoders in the reconstruction baseline.
pub const DEFAULT_ENSEMBLE_K: usize = 10;

/// Map database size used by the benchmark protocol.
pub const DEFAULT_DATABASE_SIZE: usize = 100;

/// Upper bound on externally supplied proposal boxes per image.
pub const MAX_EXTERNAL_BOXES: usize = 11;

/// Square input side of the feature-extraction autoencoder.
pub const DEFAULT_FEATURE_SIDE: usize = 32;

/// Square input side of the reconstruction-baseline autoencoder.
pub const DEFAULT_BASELINE_SIDE: usize = 128;

/// Hidden layer widths of the autoencoder, input and output excluded.
pub const AE_HIDDEN_LAYERS: [usize; 8] = [128, 64, 32, 16, 16, 32, 64, 128];

/// Width of the bottleneck code returned by the encoder.
pub const AE_CODE_DIM: usize = 16;
