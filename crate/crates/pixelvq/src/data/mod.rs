//! Sprite ingestion, augmentation, entity-safe splits, and the synthetic
//! desk-scale corpus.

pub mod corpus;
pub mod epoch;
pub mod raster;
pub mod synthetic;

pub use corpus::{load_corpus, write_corpus, AttributeVocab, Corpus, ManifestRow, Split, SpriteRecord};
pub use epoch::{build_epoch, AugSpec, AugmentedExample, Batch, EpochPlan, Provenance};
pub use raster::{
    augment, composite_background, flip_horizontal, render_background, resize_bicubic,
    rotate_about_center, BackgroundKind, Resampler, Rgb8Image, Rgba8Image,
};
pub use synthetic::{make_synthetic_corpus, SyntheticCorpus};
