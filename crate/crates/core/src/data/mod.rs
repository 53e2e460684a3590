//! Synthetic scenes, domain shifts, augmentations and the on-disk dataset
//! format.

pub mod augment;
pub mod benchmark;
pub mod io;
pub mod scene;
pub mod shift;

pub use augment::{augment, AugConfig};
pub use benchmark::{make_benchmark, Benchmark, BenchmarkSpec, SplitKind, UnlabeledImage};
pub use io::{read_dataset, read_meta, validate_meta_schema, write_dataset, DatasetMeta};
pub use scene::{generate_scene, Sample, SceneSpec};
pub use shift::{apply_domain_shift, default_target_shift, DomainShiftSpec, ShiftKind};
