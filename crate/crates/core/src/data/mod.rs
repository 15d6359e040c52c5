//! Toy face dataset generation, mask encoding and dataset directories.

mod dataset;
mod mask;
pub mod png_io;
mod record;
mod toyface;

pub use dataset::{
    load_dataset, read_meta, select_split, split_indices, toy_split, write_toy_dataset, DatasetMeta, Layout,
    RecordMeta, Split, EXTERNAL_DEFAULT_CLASSES, SPLIT_DENOMINATOR,
};
pub use mask::{downsample_to, one_hot, LabelMap, SemanticMask};
pub use record::FaceRecord;
pub use toyface::{
    generate_dataset, generate_record, toy_class_names, traits, variation_seed, DataConfig, ToyIdentitySpec,
    BACKGROUND, EYEBROWS, EYES, HAIR, MOUTH, SKIN, TOY_CLASSES,
};
