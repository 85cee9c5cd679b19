//! Dataset ingestion, augmentation, scribble synthesis and sampling.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod mask;
pub mod sampling;
pub mod scribble;
pub mod synth;

pub use augment::{augment_pair, random_crop, random_hflip, random_rescale, AugmentParams};
pub use image::ImageTensor;
pub use manifest::{load_indexed_mask, DatasetManifest, Record};
pub use mask::{derive_multilabel_target, ClassTarget, Label, LabelMask, MaskKind, IGNORE};
pub use sampling::{kfold_splits, subsample_per_class, SplitSpec};
pub use scribble::{scribble_dataset, synthesize_scribbles, ScribbleParams};
pub use synth::{generate_synthetic_dataset, Domain, SynthSpec, Task};
