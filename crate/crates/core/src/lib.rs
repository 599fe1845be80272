//! Near-duplicate detection and curation for image datasets.
//!
//! Every image is reduced to a 15×15 grid of mean RGB values. Two images
//! match at threshold `T` when their tile-wise mean absolute difference `D`
//! satisfies `100 − D ≥ T`; at `T = 100` the file bytes must also agree.
//! Matches are closed transitively into groups, and a curation pass keeps the
//! canonically first member of each group.

pub mod analysis;
pub mod curation;
pub mod dataset;
pub mod error;
pub mod fingerprint;
pub mod grouping;
pub mod matcher;
pub mod synth;

pub use dataset::{attach_labels, load_labels, scan_images, ClassLabel, DatasetIndex, ImageEntry, LabelMap, SetTag};
pub use error::{Error, Result};
pub use fingerprint::{fingerprint_all, FingerprintCache, ImageFingerprint, TileGrid};
pub use grouping::{build_groups, group_stats, GroupStats, SimilarityGroup};
pub use matcher::{match_pairs, MatchRecord, Scope, SimilarityScore, Threshold};
