use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use taxovis_ffi::*;

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { txv_string_free(p) };
    s
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(txv_last_error()) }.to_str().unwrap().to_string()
}

fn taxonomy(json: &str) -> *mut TxvTaxonomy {
    let c = CString::new(json).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { txv_taxonomy_from_json(c.as_ptr(), &mut t) }, TxvStatus::Ok);
    t
}

#[test]
fn taxonomy_handle_lifecycle() {
    let t = taxonomy(r#"{"a": ["cat", "dog"], "b": ["dog", "fish"]}"#);
    let mut k = 0;
    assert_eq!(unsafe { txv_taxonomy_size(t, &mut k) }, TxvStatus::Ok);
    assert_eq!(k, 3);
    let name = CString::new("fish").unwrap();
    let mut id = 99;
    assert_eq!(unsafe { txv_taxonomy_category_id(t, name.as_ptr(), &mut id) }, TxvStatus::Ok);
    assert_eq!(id, 2);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { txv_taxonomy_hash(t, &mut s) }, TxvStatus::Ok);
    assert_eq!(take_string(s).len(), 64);
    assert_eq!(unsafe { txv_taxonomy_overlap_report(t, &mut s) }, TxvStatus::Ok);
    assert!(take_string(s).contains("dog"));
    unsafe { txv_taxonomy_free(t) };
}

#[test]
fn errors_map_to_codes_and_messages() {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { txv_taxonomy_from_json(ptr::null(), &mut t) }, TxvStatus::NullPointer);
    let bad = CString::new("{").unwrap();
    assert_eq!(unsafe { txv_taxonomy_from_json(bad.as_ptr(), &mut t) }, TxvStatus::Format);
    let dup = CString::new(r#"{"a": ["x", "x"]}"#).unwrap();
    assert_eq!(unsafe { txv_taxonomy_from_json(dup.as_ptr(), &mut t) }, TxvStatus::Taxonomy);
    assert!(last_error().contains("twice"));
    let t = taxonomy(r#"{"a": ["x"]}"#);
    let name = CString::new("y").unwrap();
    let mut id = 0;
    assert_eq!(unsafe { txv_taxonomy_category_id(t, name.as_ptr(), &mut id) }, TxvStatus::Taxonomy);
    unsafe { txv_taxonomy_free(t) };
    let missing = CString::new("/nonexistent/ck.bin").unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { txv_checkpoint_load(missing.as_ptr(), &mut ck) }, TxvStatus::Io);
    unsafe {
        txv_taxonomy_free(ptr::null_mut());
        txv_string_free(ptr::null_mut());
    }
}

#[test]
fn hungarian_through_the_abi() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut out = [usize::MAX; 3];
    assert_eq!(unsafe { txv_hungarian(cost.as_ptr(), 3, 3, out.as_mut_ptr()) }, TxvStatus::Ok);
    let total: f64 = out.iter().enumerate().map(|(j, &q)| cost[q * 3 + j]).sum();
    assert_eq!(total, 5.0);
    let nan = [f64::NAN];
    assert_eq!(unsafe { txv_hungarian(nan.as_ptr(), 1, 1, out.as_mut_ptr()) }, TxvStatus::Numeric);
    assert_eq!(unsafe { txv_hungarian(cost.as_ptr(), 1, 3, out.as_mut_ptr()) }, TxvStatus::InvalidArgument);
}

#[test]
fn embedding_matches_the_library() {
    let name = CString::new("sedan").unwrap();
    let mut out = [0.0; 16];
    assert_eq!(unsafe { txv_embedding(name.as_ptr(), 16, 3, out.as_mut_ptr()) }, TxvStatus::Ok);
    assert_eq!(out.to_vec(), taxovis::embedding::keyed_embedding("sedan", 16, 3));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/taxovis.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ TxvTaxonomy *t = 0; size_t k = 0;\n\
             TxvStatus s = txv_taxonomy_size(t, &k); return s == TXV_STATUS_NULL_POINTER ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status()
        .expect("C compiler available");
    assert!(status.success());
}

#[test]
fn checkpoint_and_corpus_handles_evaluate() {
    use taxovis::config::RunConfig;
    use taxovis::synth::stock_config;

    let dir = tempfile::tempdir().unwrap();
    let mut synth = stock_config(5);
    for d in &mut synth.datasets {
        d.train_clips = 3;
        d.val_clips = 2;
    }
    taxovis::corpus::write(&taxovis::corpus::generate(&synth).unwrap(), dir.path()).unwrap();
    let corpus = taxovis::corpus::read(dir.path()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.num_queries = 6;
    cfg.model.width = 16;
    cfg.model.feature_dim = 16;
    cfg.model.mask_dim = 8;
    cfg.model.layers = 2;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 16;
    cfg.model.embed_dim = 16;
    cfg.model.n_t = 4;
    cfg.optim.iterations = 2;
    cfg.data.ratios = [(taxovis::taxonomy::DatasetId::new("synth_a"), 1.0)].into_iter().collect();
    let trained = taxovis::train::train(&cfg, &corpus).unwrap();
    let ck_path = dir.path().join("ck.bin");
    trained.checkpoint.save(&ck_path).unwrap();

    let p = CString::new(ck_path.to_str().unwrap()).unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { txv_checkpoint_load(p.as_ptr(), &mut ck) }, TxvStatus::Ok);
    let mut it = 0;
    assert_eq!(unsafe { txv_checkpoint_iteration(ck, &mut it) }, TxvStatus::Ok);
    assert_eq!(it, 2);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { txv_checkpoint_hash(ck, &mut s) }, TxvStatus::Ok);
    assert_eq!(take_string(s), trained.checkpoint.hash().unwrap());
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { txv_checkpoint_taxonomy(ck, &mut t) }, TxvStatus::Ok);
    let mut k = 0;
    unsafe { txv_taxonomy_size(t, &mut k) };
    assert_eq!(k, 20);
    unsafe { txv_taxonomy_free(t) };

    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut co = ptr::null_mut();
    assert_eq!(unsafe { txv_corpus_read(d.as_ptr(), &mut co) }, TxvStatus::Ok);
    let a = CString::new("synth_a").unwrap();
    assert_eq!(unsafe { txv_evaluate(ck, co, a.as_ptr(), 0, &mut s) }, TxvStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(s)).unwrap();
    assert!(v["AP"].as_f64().unwrap() >= 0.0);
    let b = CString::new("synth_b").unwrap();
    assert_eq!(unsafe { txv_evaluate(ck, co, b.as_ptr(), 0, &mut s) }, TxvStatus::InvalidArgument);
    assert_eq!(unsafe { txv_evaluate(ck, co, b.as_ptr(), 1, &mut s) }, TxvStatus::Ok);
    unsafe {
        txv_string_free(s);
        txv_corpus_free(co);
        txv_checkpoint_free(ck);
    }
}
