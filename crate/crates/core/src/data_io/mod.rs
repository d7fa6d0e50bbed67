//! Annotation files, feature files, vocabularies and synthetic data.

mod annotation;
mod dataset;
mod features;
mod synth;
mod vocab;

pub use annotation::{
    load_annotation, parse_annotation, save_annotation, HumanAnnotation, JointTrack, ObjectAnnotation, VideoAnnotation,
    ANNOTATION_FORMAT, ANNOTATION_VERSION,
};
pub use dataset::{load_dataset, write_dataset, Dataset, Video};
pub use features::{decode_features, encode_features, load_features, save_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{
    benchmark_configs, generate_synthetic, hand_joint, random_script, synth_visual_features, synthetic_vocabularies,
    BenchmarkConfig, Motion, ScriptStep, SubjectStyle, SynthConfig, AFFORDANCES, CATEGORIES, MAX_JOINTS,
    SUB_ACTIVITIES,
};
pub use vocab::{Vocabularies, Vocabulary};
