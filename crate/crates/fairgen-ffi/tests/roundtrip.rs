// Exercises the C surface from Rust: status codes, error messages, opaque
// handle lifecycles, and agreement with the underlying library.

use std::ffi::{c_char, CStr, CString};

use fairgen_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { fairgen_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    assert!(n < buf.len());
    String::from_utf8(buf[..n].to_vec()).unwrap()
}

#[test]
fn cluster_rule_matches_library() {
    assert_eq!(fairgen_cluster_count_rule(56), 3);
    assert_eq!(fairgen_cluster_count_rule(1387), 20);
    assert_eq!(fairgen_cluster_count_rule(103), 5);
}

#[test]
fn cosine_similarity_values_and_errors() {
    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 2.0, 0.0];
    let mut out = f64::NAN;
    let status =
        unsafe { fairgen_cosine_similarity(a.as_ptr(), b.as_ptr(), 3, &mut out) };
    assert_eq!(status, FairgenStatus::Ok);
    assert_eq!(out, 0.0);

    let zero = [0.0, 0.0, 0.0];
    let status =
        unsafe { fairgen_cosine_similarity(a.as_ptr(), zero.as_ptr(), 3, &mut out) };
    assert_eq!(status, FairgenStatus::Internal);
    assert!(last_error().contains("zero vector"), "{}", last_error());

    let status =
        unsafe { fairgen_cosine_similarity(std::ptr::null(), b.as_ptr(), 3, &mut out) };
    assert_eq!(status, FairgenStatus::NullPointer);
}

#[test]
fn frechet_identical_rows_is_zero() {
    // 3 rows x 2 dims, non-degenerate.
    let rows = [0.0, 0.0, 1.0, 2.0, -1.0, 0.5];
    let mut out = f64::NAN;
    let status = unsafe {
        fairgen_frechet_distance(rows.as_ptr(), 3, rows.as_ptr(), 3, 2, &mut out)
    };
    assert_eq!(status, FairgenStatus::Ok);
    assert!(out.abs() < 1e-6);
}

#[test]
fn losses_match_reference_values() {
    let probs = [0.5, 0.5];
    let labels = [0u32];
    let mut out = f64::NAN;
    let status = unsafe { fairgen_ce_loss(probs.as_ptr(), 1, 2, labels.as_ptr(), &mut out) };
    assert_eq!(status, FairgenStatus::Ok);
    assert!((out - std::f64::consts::LN_2).abs() < 1e-9);

    // Four identical unit vectors split across two classes: 4 ln 2 in the
    // negatives-only form.
    let features = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let labels = [0u32, 0, 1, 1];
    let status = unsafe {
        fairgen_supcon_loss(features.as_ptr(), 4, 2, labels.as_ptr(), 1.0, 1, &mut out)
    };
    assert_eq!(status, FairgenStatus::Ok);
    assert!((out - 4.0 * std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn combined_score_requires_centroid_below_alpha_one() {
    let mut out = f64::NAN;
    let status =
        unsafe { fairgen_combined_score(1.0, 0.8, std::ptr::null(), &mut out) };
    assert_eq!(status, FairgenStatus::Ok);
    assert_eq!(out, 0.8);

    let centroid = 0.4;
    let status = unsafe { fairgen_combined_score(0.5, 0.8, &centroid, &mut out) };
    assert_eq!(status, FairgenStatus::Ok);
    assert!((out - 0.6).abs() < 1e-12);

    let status =
        unsafe { fairgen_combined_score(0.5, 0.8, std::ptr::null(), &mut out) };
    assert_eq!(status, FairgenStatus::InvalidArgument);
    assert!(last_error().contains("centroid"));
}

#[test]
fn group_weights_lifecycle_and_closed_form() {
    let handle = fairgen_group_weights_new(2, 1.0);
    assert!(!handle.is_null());
    let losses = [1.0, 0.0];
    let present = [1u8, 1];
    let mut weighted = f64::NAN;
    let status = unsafe {
        fairgen_group_weights_step(handle, losses.as_ptr(), present.as_ptr(), 2, &mut weighted)
    };
    assert_eq!(status, FairgenStatus::Ok);
    let mut q = [0.0f64; 2];
    let status = unsafe { fairgen_group_weights_get(handle, q.as_mut_ptr(), 2) };
    assert_eq!(status, FairgenStatus::Ok);
    let e = std::f64::consts::E;
    assert!((q[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((q[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((weighted - q[0]).abs() < 1e-12);
    unsafe { fairgen_group_weights_free(handle) };

    assert!(fairgen_group_weights_new(0, 1.0).is_null());
}

#[test]
fn prompt_rendering_over_c_strings() {
    let dataset = CString::new("waterbirds").unwrap();
    let strategy = CString::new("dreambooth_per_group").unwrap();
    let class = CString::new("waterbird").unwrap();
    let bias = CString::new("land").unwrap();
    let mut positive: *mut c_char = std::ptr::null_mut();
    let mut negative: *mut c_char = std::ptr::null_mut();
    let status = unsafe {
        fairgen_render_prompt(
            dataset.as_ptr(),
            strategy.as_ptr(),
            class.as_ptr(),
            bias.as_ptr(),
            1,
            &mut positive,
            &mut negative,
        )
    };
    assert_eq!(status, FairgenStatus::Ok);
    let pos = unsafe { CStr::from_ptr(positive) }.to_str().unwrap();
    let neg = unsafe { CStr::from_ptr(negative) }.to_str().unwrap();
    assert_eq!(pos, "Photo of a waterbird on ((land))");
    assert_eq!(neg, "((water))");
    unsafe {
        fairgen_string_free(positive);
        fairgen_string_free(negative);
    }

    let bad = CString::new("flamingo").unwrap();
    let status = unsafe {
        fairgen_render_prompt(
            dataset.as_ptr(),
            strategy.as_ptr(),
            bad.as_ptr(),
            bias.as_ptr(),
            0,
            &mut positive,
            &mut negative,
        )
    };
    assert_eq!(status, FairgenStatus::InvalidArgument);
    assert!(last_error().contains("flamingo"));
}

#[test]
fn embedder_embeds_images_and_text() {
    let handle = fairgen_embedder_new(7, 8, 16);
    assert!(!handle.is_null());
    let pixels = vec![0.3f32; 16 * 16 * 3];
    let mut img = vec![0.0f64; 8];
    let status = unsafe {
        fairgen_embedder_embed_image(handle, pixels.as_ptr(), pixels.len(), img.as_mut_ptr())
    };
    assert_eq!(status, FairgenStatus::Ok);
    let norm: f64 = img.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);

    let prompt = CString::new("Photo of a square").unwrap();
    let mut txt = vec![0.0f64; 8];
    let status =
        unsafe { fairgen_embedder_embed_text(handle, prompt.as_ptr(), txt.as_mut_ptr()) };
    assert_eq!(status, FairgenStatus::Ok);

    // Wrong pixel count is a dimension error, not a crash.
    let status = unsafe {
        fairgen_embedder_embed_image(handle, pixels.as_ptr(), 5, img.as_mut_ptr())
    };
    assert_eq!(status, FairgenStatus::Internal);
    unsafe { fairgen_embedder_free(handle) };
}
