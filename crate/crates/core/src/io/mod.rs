//! Files and experiments: YOLO label files, P6 pixmaps, the dataset layout,
//! the synthetic generator, structured-text configs, detection rendering
//! and the ablation harness.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod labels;
pub mod pnm;
pub mod render;
pub mod synth;

pub use ablation::{run_ablation, run_variant, AblationReport, AblationRow, VariantSummary};
pub use config::{apply_model_config, apply_synth_config, load_config, parse_config, ConfigFile};
pub use dataset::{generate_synthetic_to, load_dataset, write_dataset, Dataset, DatasetManifest};
pub use labels::{format_yolo_labels, load_yolo_labels, parse_yolo_labels, write_yolo_labels};
pub use pnm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use render::{box_outline, draw_boxes, render_detections, PREDICTION_COLOR, TRUTH_COLOR};
pub use synth::{generate_synthetic, ClassStyle, Shape, SyntheticDataset, SyntheticSpec};

use std::path::PathBuf;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "YOLORS_OUT_DIR";

/// `$YOLORS_OUT_DIR`, or `runs` when unset.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
