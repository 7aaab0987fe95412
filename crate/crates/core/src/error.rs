use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("empty dataset label map")]
    EmptyLabelMap,

    #[error("dataset `{dataset}` has an empty label list")]
    EmptyLabelList { dataset: String },

    #[error("category `{name}` listed twice in dataset `{dataset}`")]
    DuplicateCategory { dataset: String, name: String },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("overlap report needs at least two datasets, got {0}")]
    TooFewDatasets(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("N_T = {n_t} out of range [1, {k}]")]
    SelectionSize { n_t: usize, k: usize },

    #[error("more tracks ({tracks}) than queries ({queries})")]
    TooManyTracks { tracks: usize, queries: usize },

    #[error("assignment index out of range: {0}")]
    BadAssignment(String),

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("{0}")]
    Corpus(String),

    #[error("prediction references unknown clip `{0}`")]
    UnknownClip(String),

    #[error("taxonomy hash mismatch: checkpoint {checkpoint}, corpus {corpus}")]
    TaxonomyMismatch { checkpoint: String, corpus: String },

    #[error("non-finite loss at iteration {iteration} on clip `{clip_id}`")]
    NonFiniteLoss { iteration: usize, clip_id: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
