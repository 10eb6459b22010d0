//! Feature-matrix storage, dataset manifests, and real/generated pairing.

mod cbfm;
mod manifest;
mod matrix;

pub use cbfm::{
    decode_feature_matrix, encode_feature_matrix, read_feature_matrix, write_feature_matrix,
    Container, Section, SectionData, CONTAINER_VERSION, MAGIC, MATRIX_VERSION,
};
pub(crate) use cbfm::{read_bytes, write_bytes};
pub use manifest::{
    load_paired_features, DatasetManifest, ManifestEntry, PairedFeatures, RowRef,
    MANIFEST_VERSION,
};
pub use matrix::{FeatureMatrix, TokenGrouping};
