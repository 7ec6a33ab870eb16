//! End-to-end pieces: file formats, synthetic data, the assembled model,
//! sequence inference, training and the self-test.

pub mod manifest;
pub mod model;
pub mod pnm;
pub mod runner;
pub mod selftest;
pub mod synth;
pub mod train;

pub use manifest::{find_manifests, load_sequence, Sequence, SequenceManifest};
pub use model::Model;
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm, RgbImage};
pub use runner::{
    evaluate_dirs, fuse_scales, run_sequence, write_predictions, RunOutput, SequenceRunner,
};
pub use selftest::{run_selftest, SelftestReport, SuiteResult};
pub use synth::{gen_synthetic, GenRequest, Motion, SyntheticSpec};
pub use train::{load_training_set, sample_points, train, StepLog};
