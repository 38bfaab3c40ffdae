//! Corpus manifests, text-disjoint splits and padded mini-batches.

mod batch;
mod manifest;
mod split;

pub use batch::{make_batch, Batch, Example};
pub use manifest::{
    build_manifest, read_manifest, renumber_speakers, write_manifest, AccentTag, UtteranceRecord,
};
pub use split::{split_manifest, Split, SplitSizes};
