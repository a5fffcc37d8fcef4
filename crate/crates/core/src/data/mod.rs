//! Synthetic labeled scenes, the darkening model, severity calibration and
//! dataset I/O.

mod corpus;
mod darken;
mod io;
mod scene;

pub use corpus::{
    build_corpus, calibrate_presets, file_name, load_corpus, load_split, read_corpus_info,
    read_manifest, scene_seed, write_corpus, CalibratedPreset, Corpus, CorpusConfig, CorpusInfo,
    ManifestRecord, Split, SplitName, CORPUS_FILE, MANIFEST_FILE,
};
pub use darken::{
    calibrate_exposure, darken, partition_by_intensity, DarkeningParams, SeverityPreset, SubsetTag,
};
pub use io::{load_image, load_labels, quantize, save_image, save_labels, to_byte};
pub use scene::{class_hue, generate_scene, hsv_to_rgb, LabeledScene, DEFAULT_CLASSES};
