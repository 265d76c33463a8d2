use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use lmar_ffi::*;

fn last_error() -> String {
    let p = lmar_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn tokens_and_tcdt() {
    let text = CString::new("don't stop").unwrap();
    let mut n = 0usize;
    assert_eq!(unsafe { lmar_count_tokens(text.as_ptr(), &mut n) }, LmarStatus::Ok);
    assert_eq!(n, 3);

    let mut v = 0.0;
    assert_eq!(unsafe { lmar_tcdt(5_883_005, 243_489, 979_843, &mut v) }, LmarStatus::Ok);
    assert!((v - 6.25).abs() < 0.01);
    assert_eq!(unsafe { lmar_tcdt(1, 1, 0, &mut v) }, LmarStatus::ZeroDocumentTokens);
    assert!(last_error().contains("zero"));
    assert_eq!(unsafe { lmar_count_tokens(ptr::null(), &mut n) }, LmarStatus::NullPointer);
}

#[test]
fn tf_score_example() {
    let e = CString::new("ultrasound fracture").unwrap();
    let r = CString::new("ultrasound ultrasound xray").unwrap();
    let rs = [r.as_ptr()];
    let mut v = 0.0;
    assert_eq!(unsafe { lmar_tf_score(e.as_ptr(), rs.as_ptr(), 1, &mut v) }, LmarStatus::Ok);
    assert!((v - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn parse_structured_roundtrip() {
    let c = CString::new(r#"noise {"grade": 0.7} trailing"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { lmar_parse_structured(c.as_ptr(), LmarSchema::QaGrade, &mut out) },
        LmarStatus::Ok
    );
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { lmar_string_free(out) };
    assert_eq!(json, r#"{"QaGrade":0.7}"#);

    let bad = CString::new("no json here").unwrap();
    assert_eq!(
        unsafe { lmar_parse_structured(bad.as_ptr(), LmarSchema::QaPairs, &mut out) },
        LmarStatus::ParseFailure
    );
    assert!(out.is_null());
}

#[test]
fn index_top_k_and_clusters() {
    let rows = [1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9];
    let mut ix = ptr::null_mut();
    assert_eq!(unsafe { lmar_index_new(rows.as_ptr(), 4, 2, &mut ix) }, LmarStatus::Ok);
    let (mut n, mut d) = (0, 0);
    unsafe { lmar_index_shape(ix, &mut n, &mut d) };
    assert_eq!((n, d), (4, 2));

    let q = [1.0, 0.0];
    let mut ids = [0usize; 3];
    let mut sims = [0.0; 3];
    let mut got = 0;
    let st = unsafe { lmar_index_top_k(ix, q.as_ptr(), 2, 3, ids.as_mut_ptr(), sims.as_mut_ptr(), &mut got) };
    assert_eq!(st, LmarStatus::Ok);
    assert_eq!(got, 3);
    assert_eq!(&ids[..2], &[0, 1]);
    assert!(sims[0] >= sims[1] && sims[1] >= sims[2]);

    let bad_q = [1.0, 0.0, 0.0];
    let st = unsafe { lmar_index_top_k(ix, bad_q.as_ptr(), 3, 3, ids.as_mut_ptr(), ptr::null_mut(), &mut got) };
    assert_eq!(st, LmarStatus::DimMismatch);

    let mut cl = ptr::null_mut();
    assert_eq!(unsafe { lmar_cluster(ix, 2, 0.5, 3, &mut cl) }, LmarStatus::Ok);
    let mut count = 0;
    unsafe { lmar_clusters_count(cl, &mut count) };
    let mut seen = Vec::new();
    for i in 0..count {
        let (mut p, mut len) = (ptr::null(), 0);
        assert_eq!(unsafe { lmar_clusters_members(cl, i, &mut p, &mut len) }, LmarStatus::Ok);
        seen.extend_from_slice(unsafe { std::slice::from_raw_parts(p, len) });
    }
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    let (mut p, mut len) = (ptr::null(), 0);
    assert_eq!(
        unsafe { lmar_clusters_members(cl, count, &mut p, &mut len) },
        LmarStatus::InvalidArgument
    );
    unsafe { lmar_clusters_free(cl) };

    let mut cl2 = ptr::null_mut();
    assert_eq!(unsafe { lmar_cluster(ix, 2, 1.5, 3, &mut cl2) }, LmarStatus::InvalidParams);
    assert!(cl2.is_null());
    unsafe { lmar_index_free(ix) };
}

#[test]
fn adapter_identity_and_file() {
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { lmar_adapter_identity(2, &mut a) }, LmarStatus::Ok);
    let v = [3.0, 4.0];
    let mut out = [0.0; 2];
    assert_eq!(unsafe { lmar_adapter_apply(a, v.as_ptr(), 2, out.as_mut_ptr(), 2) }, LmarStatus::Ok);
    assert_eq!(out, [0.6, 0.8]);
    assert_eq!(
        unsafe { lmar_adapter_apply(a, v.as_ptr(), 2, out.as_mut_ptr(), 1) },
        LmarStatus::BufferTooSmall
    );
    unsafe { lmar_adapter_free(a) };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.lmad");
    lmar::trainer::AdapterParams::from_matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0])
        .unwrap()
        .save(&path, &serde_json::json!({}))
        .unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { lmar_adapter_load(cpath.as_ptr(), &mut a) }, LmarStatus::Ok);
    let (mut di, mut dout) = (0, 0);
    unsafe { lmar_adapter_dims(a, &mut di, &mut dout) };
    assert_eq!((di, dout), (2, 2));
    unsafe { lmar_adapter_apply(a, v.as_ptr(), 2, out.as_mut_ptr(), 2) };
    assert_eq!(out, [0.8, 0.6]);
    unsafe { lmar_adapter_free(a) };

    let missing = CString::new("/nonexistent/a.lmad").unwrap();
    assert_eq!(unsafe { lmar_adapter_load(missing.as_ptr(), &mut a) }, LmarStatus::Io);
}

#[test]
fn stub_embed_matches_core() {
    let t = CString::new("Hello world").unwrap();
    let mut out = [0.0; 16];
    assert_eq!(unsafe { lmar_stub_embed(t.as_ptr(), 16, out.as_mut_ptr()) }, LmarStatus::Ok);
    assert_eq!(out.to_vec(), lmar::embedding::stub_embed("Hello world", 16));
}

#[test]
fn free_null_is_noop() {
    unsafe {
        lmar_index_free(ptr::null_mut());
        lmar_clusters_free(ptr::null_mut());
        lmar_adapter_free(ptr::null_mut());
        lmar_string_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lmar.h");
    assert!(header.is_file(), "build script writes the header");
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; header syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
