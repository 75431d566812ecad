use std::ffi::{c_char, CStr, CString};
use std::ptr;

use spacefusion::corpus::{build_vocab, generate_synthetic};
use spacefusion::model::{ModelConfig, SpaceFusionModel};
use spacefusion::trainer::{save_checkpoint, CheckpointMeta};
use spacefusion_ffi::*;

fn checkpoint_dir() -> (tempfile::TempDir, SpaceFusionModel, spacefusion::corpus::Vocabulary) {
    let samples = generate_synthetic(12, 3, 4).unwrap();
    let vocab = build_vocab(&samples, 1000).unwrap();
    let model = SpaceFusionModel::new(ModelConfig::desk(vocab.len()).with_hidden(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &vocab, &CheckpointMeta::default()).unwrap();
    (dir, model, vocab)
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sf_last_error_message()) }.to_str().unwrap().to_string()
}

fn load(dir: &std::path::Path) -> *mut SfModel {
    let mut m = ptr::null_mut();
    let path = c(dir.to_str().unwrap());
    assert_eq!(unsafe { sf_model_load(path.as_ptr(), &mut m) }, SfStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(sf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_encode_and_free() {
    let (dir, model, vocab) = checkpoint_dir();
    let m = load(dir.path());
    let dim = unsafe { sf_model_latent_dim(m) };
    assert_eq!(dim, 8);
    let mut buf = vec![0.0; dim];
    let ctx = c("anyone want to come to the game tonight ?");
    assert_eq!(unsafe { sf_model_encode_context(m, ctx.as_ptr(), buf.as_mut_ptr(), dim) }, SfStatus::Ok);
    let ids = vocab.tokenize("anyone want to come to the game tonight ?");
    let want = model.encode_contexts(&[&ids]).unwrap().remove(0);
    assert_eq!(buf, want.0);
    assert_eq!(
        unsafe { sf_model_encode_context(m, ctx.as_ptr(), buf.as_mut_ptr(), dim - 1) },
        SfStatus::InvalidArgument
    );
    assert!(last_error().contains("latent"));
    unsafe { sf_model_free(m) };
}

#[test]
fn radius_zero_generation_is_the_greedy_reply() {
    let (dir, model, vocab) = checkpoint_dir();
    let m = load(dir.path());
    let ctx = c("anyone want to come to the game tonight ?");
    let mut out: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { sf_model_generate(m, ctx.as_ptr(), 3, 0.0, 1, 0.0, 9, &mut out) }, SfStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { sf_string_free(out) };
    let ids = vocab.tokenize("anyone want to come to the game tonight ?");
    let z = model.encode_contexts(&[&ids]).unwrap().remove(0);
    let greedy = model.greedy_decode(&z, 31).unwrap();
    assert_eq!(text, vocab.detokenize(&greedy));
    assert!(!text.contains('\n'));
    unsafe { sf_model_free(m) };
}

#[test]
fn failures_report_status_and_message() {
    let mut m = ptr::null_mut();
    let missing = c("/nonexistent/checkpoint");
    assert_eq!(unsafe { sf_model_load(missing.as_ptr(), &mut m) }, SfStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("manifest.txt"));
    assert_eq!(unsafe { sf_model_load(ptr::null(), &mut m) }, SfStatus::NullPointer);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "format=other\n").unwrap();
    let p = c(dir.path().to_str().unwrap());
    assert_eq!(unsafe { sf_model_load(p.as_ptr(), &mut m) }, SfStatus::Checkpoint);
    unsafe { sf_model_free(ptr::null_mut()) };
    unsafe { sf_string_free(ptr::null_mut()) };
    assert_eq!(unsafe { sf_model_latent_dim(ptr::null()) }, 0);
}

#[test]
fn metrics_through_the_c_api() {
    let mut v = -1.0;
    let s = c("we can meet at noon today");
    assert_eq!(unsafe { sf_bleu4(s.as_ptr(), s.as_ptr(), &mut v) }, SfStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { sf_bleu4(s.as_ptr(), s.as_ptr(), ptr::null_mut()) }, SfStatus::NullPointer);

    let refs = [c("yes i will come"), c("sorry i am busy")];
    let hyps = [c("sorry i am busy"), c("yes i will come")];
    let rp: Vec<*const c_char> = refs.iter().map(|s| s.as_ptr()).collect();
    let hp: Vec<*const c_char> = hyps.iter().map(|s| s.as_ptr()).collect();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { sf_multi_ref_scores(rp.as_ptr(), 2, hp.as_ptr(), 2, &mut p, &mut r, &mut f) }, SfStatus::Ok);
    assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    assert_eq!(
        unsafe { sf_multi_ref_scores(rp.as_ptr(), 0, hp.as_ptr(), 2, &mut p, &mut r, &mut f) },
        SfStatus::InvalidArgument
    );
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spacefusion.h")).unwrap();
    for name in [
        "sf_version",
        "sf_last_error_message",
        "sf_model_load",
        "sf_model_free",
        "sf_model_latent_dim",
        "sf_model_encode_context",
        "sf_model_generate",
        "sf_string_free",
        "sf_bleu4",
        "sf_multi_ref_scores",
        "SF_STATUS_OK",
        "typedef struct SfModel SfModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
