//! C ABI for taxovis.
//!
//! Every fallible function returns a [`TxvStatus`]. On failure a message is
//! kept per thread and can be read with [`txv_last_error`]. Objects are
//! handed out as opaque pointers and released with their `_free` function.
//! Strings returned through `char**` are owned by the caller and released
//! with [`txv_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use taxovis::checkpoint::Checkpoint;
use taxovis::corpus::{self, Corpus, Split};
use taxovis::embedding::keyed_embedding;
use taxovis::error::Error;
use taxovis::matching::hungarian_match;
use taxovis::synth::stock_config;
use taxovis::taxonomy::{build_space, DatasetId, LabelLists, TaxonomySpace};
use taxovis::tensor::Mat;
use taxovis::train::evaluate_checkpoint;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Taxonomy = 6,
    Numeric = 7,
    Panic = 8,
}

/// Unified label space.
pub struct TxvTaxonomy {
    space: TaxonomySpace,
}

/// Trained model checkpoint.
pub struct TxvCheckpoint {
    checkpoint: Checkpoint,
}

/// Synthetic corpus loaded from disk.
pub struct TxvCorpus {
    corpus: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TxvStatus {
    match e {
        Error::Io(_) => TxvStatus::Io,
        Error::Json(_) | Error::Format { .. } | Error::Corpus(_) => TxvStatus::Format,
        Error::EmptyLabelMap
        | Error::EmptyLabelList { .. }
        | Error::DuplicateCategory { .. }
        | Error::UnknownDataset(_)
        | Error::UnknownCategory(_)
        | Error::TooFewDatasets(_)
        | Error::TaxonomyMismatch { .. } => TxvStatus::Taxonomy,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => TxvStatus::Numeric,
        _ => TxvStatus::InvalidArgument,
    }
}

struct Fail(TxvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TxvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TxvStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            TxvStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TxvStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TxvStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(TxvStatus::Format, "string holds a nul byte".into()))?;
    put(out, c.into_raw(), "out")
}

/// Message of the last failure on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn txv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn txv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a label space from a JSON object mapping dataset ids to label lists.
///
/// # Safety
/// `label_lists_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_from_json(
    label_lists_json: *const c_char,
    out: *mut *mut TxvTaxonomy,
) -> TxvStatus {
    guard(|| {
        let json = str_arg(label_lists_json, "label_lists_json")?;
        let lists: LabelLists = serde_json::from_str(json).map_err(Error::from)?;
        let space = build_space(&lists)?;
        put(out, Box::into_raw(Box::new(TxvTaxonomy { space })), "out")
    })
}

/// Reads a serialized label space such as a corpus's `taxonomy.json`.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_read(path: *const c_char, out: *mut *mut TxvTaxonomy) -> TxvStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let text = std::fs::read_to_string(p).map_err(Error::from)?;
        let space = TaxonomySpace::from_json(&text)?;
        put(out, Box::into_raw(Box::new(TxvTaxonomy { space })), "out")
    })
}

/// Number of categories `K`.
///
/// # Safety
/// `taxonomy` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_size(taxonomy: *const TxvTaxonomy, out: *mut usize) -> TxvStatus {
    guard(|| put(out, ref_arg(taxonomy, "taxonomy")?.space.k(), "out"))
}

/// Global id of a category name.
///
/// # Safety
/// `taxonomy` must come from this library, `name` must be a valid C string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_category_id(
    taxonomy: *const TxvTaxonomy,
    name: *const c_char,
    out: *mut usize,
) -> TxvStatus {
    guard(|| {
        let t = ref_arg(taxonomy, "taxonomy")?;
        put(out, t.space.id_of(str_arg(name, "name")?)?, "out")
    })
}

/// Hex SHA-256 of the serialized label space.
///
/// # Safety
/// `taxonomy` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_hash(taxonomy: *const TxvTaxonomy, out: *mut *mut c_char) -> TxvStatus {
    guard(|| put_string(out, ref_arg(taxonomy, "taxonomy")?.space.hash()))
}

/// Pairwise shared-category report, as text.
///
/// # Safety
/// `taxonomy` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_overlap_report(
    taxonomy: *const TxvTaxonomy,
    out: *mut *mut c_char,
) -> TxvStatus {
    guard(|| {
        let r = ref_arg(taxonomy, "taxonomy")?.space.overlap_report()?;
        put_string(out, r.to_string())
    })
}

/// # Safety
/// `taxonomy` must be null or come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn txv_taxonomy_free(taxonomy: *mut TxvTaxonomy) {
    if !taxonomy.is_null() {
        drop(Box::from_raw(taxonomy));
    }
}

/// Writes the unit-norm keyed embedding of `name` into `out[0..d]`.
///
/// # Safety
/// `name` must be a valid C string and `out` must hold `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn txv_embedding(name: *const c_char, d: usize, seed: u64, out: *mut f64) -> TxvStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = keyed_embedding(name, d, seed);
        ptr::copy_nonoverlapping(e.as_ptr(), out, d);
        Ok(())
    })
}

/// Minimum-cost assignment of `g` tracks to `n` queries.
///
/// `cost` is row-major `n × g`; `query_of_track[j]` receives the query
/// matched to track `j`.
///
/// # Safety
/// `cost` must hold `n·g` doubles and `query_of_track` room for `g` values.
#[no_mangle]
pub unsafe extern "C" fn txv_hungarian(
    cost: *const f64,
    n: usize,
    g: usize,
    query_of_track: *mut usize,
) -> TxvStatus {
    guard(|| {
        if g > 0 && (cost.is_null() || query_of_track.is_null()) {
            return Err(null("cost"));
        }
        let data = if n * g == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(cost, n * g).to_vec()
        };
        let a = hungarian_match(&Mat::from_vec(n, g, data)?)?;
        for (j, q) in a.query_of_track().into_iter().enumerate() {
            query_of_track.add(j).write(q);
        }
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn txv_checkpoint_load(path: *const c_char, out: *mut *mut TxvCheckpoint) -> TxvStatus {
    guard(|| {
        let checkpoint = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(TxvCheckpoint { checkpoint })), "out")
    })
}

/// Hex SHA-256 of the checkpoint bytes.
///
/// # Safety
/// `checkpoint` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn txv_checkpoint_hash(checkpoint: *const TxvCheckpoint, out: *mut *mut c_char) -> TxvStatus {
    guard(|| put_string(out, ref_arg(checkpoint, "checkpoint")?.checkpoint.hash()?))
}

/// Training iterations recorded in the checkpoint.
///
/// # Safety
/// `checkpoint` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn txv_checkpoint_iteration(checkpoint: *const TxvCheckpoint, out: *mut usize) -> TxvStatus {
    guard(|| put(out, ref_arg(checkpoint, "checkpoint")?.checkpoint.iteration, "out"))
}

/// Copy of the checkpoint's label space; free it with [`txv_taxonomy_free`].
///
/// # Safety
/// `checkpoint` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn txv_checkpoint_taxonomy(
    checkpoint: *const TxvCheckpoint,
    out: *mut *mut TxvTaxonomy,
) -> TxvStatus {
    guard(|| {
        let space = ref_arg(checkpoint, "checkpoint")?.checkpoint.space.clone();
        put(out, Box::into_raw(Box::new(TxvTaxonomy { space })), "out")
    })
}

/// # Safety
/// `checkpoint` must be null or come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn txv_checkpoint_free(checkpoint: *mut TxvCheckpoint) {
    if !checkpoint.is_null() {
        drop(Box::from_raw(checkpoint));
    }
}

/// Writes the stock three-dataset synthetic corpus to `dir`.
///
/// # Safety
/// `dir` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn txv_synth_stock(seed: u64, dir: *const c_char) -> TxvStatus {
    guard(|| {
        let dir = Path::new(str_arg(dir, "dir")?);
        corpus::write(&corpus::generate(&stock_config(seed))?, dir)?;
        Ok(())
    })
}

/// Reads a corpus directory.
///
/// # Safety
/// `dir` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn txv_corpus_read(dir: *const c_char, out: *mut *mut TxvCorpus) -> TxvStatus {
    guard(|| {
        let corpus = corpus::read(Path::new(str_arg(dir, "dir")?))?;
        put(out, Box::into_raw(Box::new(TxvCorpus { corpus })), "out")
    })
}

/// # Safety
/// `corpus` must be null or come from this library and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn txv_corpus_free(corpus: *mut TxvCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Evaluates a checkpoint on a dataset's validation split.
///
/// `out_json` receives the metrics (`AP`, `AP50`, `AP75`, `AR1`, `AR10`,
/// `per_category`). A nonzero `zero_shot` allows datasets left out of
/// training.
///
/// # Safety
/// `checkpoint` and `corpus` must come from this library, `dataset` must be
/// a valid C string and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn txv_evaluate(
    checkpoint: *const TxvCheckpoint,
    corpus: *const TxvCorpus,
    dataset: *const c_char,
    zero_shot: i32,
    out_json: *mut *mut c_char,
) -> TxvStatus {
    guard(|| {
        let ck = &ref_arg(checkpoint, "checkpoint")?.checkpoint;
        let co = &ref_arg(corpus, "corpus")?.corpus;
        let d = DatasetId::new(str_arg(dataset, "dataset")?);
        let (r, _) = evaluate_checkpoint(ck, co, &d, Split::Val, zero_shot != 0)?;
        put_string(out_json, serde_json::to_string(&r).map_err(Error::from)?)
    })
}
