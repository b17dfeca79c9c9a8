//! C ABI over the numeric core: similarity and distance metrics, loss
//! functions, robust group weights, prompt rendering, and the toy embedding
//! backend. Handles are opaque pointers; every fallible call returns a status
//! code and records a message retrievable with `fairgen_last_error`.
//!
//! The header is generated into `include/fairgen.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use fairgen::cluster::cluster_count_rule;
use fairgen::data::GroupKey;
use fairgen::embed::{cosine_similarity, frechet_distance, Embedding, EmbeddingBackend, ToyEmbedder};
use fairgen::error::Error;
use fairgen::filter::combined_score;
use fairgen::loss::{ce_loss, supcon_loss, GroupWeights, SupConForm};
use fairgen::prompt::{render_prompts, DatasetId, PromptMode, Strategy};
use fairgen::toy::default_vocabulary;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairgenStatus {
    Ok = 0,
    /// Internal failure (I/O, integrity, backend, ...).
    Internal = 1,
    /// Invalid configuration or argument value.
    InvalidArgument = 2,
    /// A required prior computation is missing.
    MissingDependency = 3,
    /// Numerical failure (non-finite values, degenerate input).
    Numerical = 4,
    /// A required pointer was null.
    NullPointer = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> FairgenStatus {
    match err.exit_code() {
        2 => FairgenStatus::InvalidArgument,
        3 => FairgenStatus::MissingDependency,
        4 => FairgenStatus::Numerical,
        _ => FairgenStatus::Internal,
    }
}

fn fail(err: Error) -> FairgenStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn guarded(f: impl FnOnce() -> FairgenStatus) -> FairgenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            FairgenStatus::Internal
        }
    }
}

/// Copy the message of the most recent error on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn fairgen_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Number of generator clusters for a group of the given size:
/// min(size/20, 20), floored at 1.
#[no_mangle]
pub extern "C" fn fairgen_cluster_count_rule(smallest_group_size: usize) -> u32 {
    cluster_count_rule(smallest_group_size) as u32
}

unsafe fn embedding_from(ptr: *const f64, dim: usize) -> Embedding {
    Embedding::new(slice::from_raw_parts(ptr, dim).to_vec())
}

/// Cosine similarity of two `dim`-vectors.
///
/// # Safety
/// `a` and `b` must point to `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fairgen_cosine_similarity(
    a: *const f64,
    b: *const f64,
    dim: usize,
    out: *mut f64,
) -> FairgenStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let u = embedding_from(a, dim);
        let v = embedding_from(b, dim);
        match cosine_similarity(&u, &v) {
            Ok(s) => {
                *out = s;
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Fréchet distance between the Gaussian fits of two row-major embedding
/// matrices (`a_rows x dim` and `b_rows x dim`).
///
/// # Safety
/// `a` and `b` must point to `a_rows * dim` and `b_rows * dim` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fairgen_frechet_distance(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    dim: usize,
    out: *mut f64,
) -> FairgenStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let rows = |ptr: *const f64, n: usize| -> Vec<Embedding> {
            (0..n)
                .map(|r| embedding_from(ptr.add(r * dim), dim))
                .collect()
        };
        match frechet_distance(&rows(a, a_rows), &rows(b, b_rows)) {
            Ok(d) => {
                *out = d;
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Mean negative log-likelihood of row-major probability rows
/// (`rows x classes`) against integer labels.
///
/// # Safety
/// `probs` must point to `rows * classes` doubles, `labels` to `rows` values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fairgen_ce_loss(
    probs: *const f64,
    rows: usize,
    classes: usize,
    labels: *const u32,
    out: *mut f64,
) -> FairgenStatus {
    if probs.is_null() || labels.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let p: Vec<Vec<f64>> = (0..rows)
            .map(|r| slice::from_raw_parts(probs.add(r * classes), classes).to_vec())
            .collect();
        let y: Vec<usize> = slice::from_raw_parts(labels, rows)
            .iter()
            .map(|&l| l as usize)
            .collect();
        match ce_loss(&p, &y) {
            Ok(l) => {
                *out = l;
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Supervised contrastive loss over row-major features (`rows x dim`).
/// `negatives_only` selects the denominator form (non-zero: negatives only).
///
/// # Safety
/// `features` must point to `rows * dim` doubles, `labels` to `rows` values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fairgen_supcon_loss(
    features: *const f64,
    rows: usize,
    dim: usize,
    labels: *const u32,
    tau: f64,
    negatives_only: i32,
    out: *mut f64,
) -> FairgenStatus {
    if features.is_null() || labels.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let f: Vec<Vec<f64>> = (0..rows)
            .map(|r| slice::from_raw_parts(features.add(r * dim), dim).to_vec())
            .collect();
        let y: Vec<usize> = slice::from_raw_parts(labels, rows)
            .iter()
            .map(|&l| l as usize)
            .collect();
        let form = if negatives_only != 0 {
            SupConForm::NegativesOnly
        } else {
            SupConForm::AllPairs
        };
        match supcon_loss(&f, &y, tau, form) {
            Ok(l) => {
                *out = l;
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// alpha-weighted filter score. `centroid` may be null only when alpha >= 1.
///
/// # Safety
/// `centroid` must be null or point to one double; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fairgen_combined_score(
    alpha: f64,
    label_score: f64,
    centroid: *const f64,
    out: *mut f64,
) -> FairgenStatus {
    if out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let c = if centroid.is_null() { None } else { Some(*centroid) };
        match combined_score(alpha, label_score, c) {
            Ok(s) => {
                *out = s;
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Opaque adversarial group-weight state.
pub struct FairgenGroupWeights(GroupWeights);

/// Uniform weights over `n_groups` with exponentiated-gradient step `eta`.
/// Returns null on invalid arguments.
#[no_mangle]
pub extern "C" fn fairgen_group_weights_new(
    n_groups: usize,
    eta: f64,
) -> *mut FairgenGroupWeights {
    match GroupWeights::uniform(n_groups, eta) {
        Ok(w) => Box::into_raw(Box::new(FairgenGroupWeights(w))),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// One robust update. `losses[i]` is the mean loss of group i; `present[i]`
/// zero marks a group absent from the batch (its weight is kept). Writes the
/// weighted loss to `out`.
///
/// # Safety
/// `handle` must come from `fairgen_group_weights_new`; `losses` and
/// `present` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fairgen_group_weights_step(
    handle: *mut FairgenGroupWeights,
    losses: *const f64,
    present: *const u8,
    n: usize,
    out: *mut f64,
) -> FairgenStatus {
    if handle.is_null() || losses.is_null() || present.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let l = slice::from_raw_parts(losses, n);
        let p = slice::from_raw_parts(present, n);
        let group_losses: Vec<Option<f64>> = l
            .iter()
            .zip(p)
            .map(|(&l, &p)| (p != 0).then_some(l))
            .collect();
        match (*handle).0.step(&group_losses) {
            Ok(weighted) => {
                *out = weighted;
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Copy the current weight distribution into `out` (length = group count).
///
/// # Safety
/// `handle` must come from `fairgen_group_weights_new`; `out` must hold `n`
/// doubles where `n` matches the handle's group count.
#[no_mangle]
pub unsafe extern "C" fn fairgen_group_weights_get(
    handle: *const FairgenGroupWeights,
    out: *mut f64,
    n: usize,
) -> FairgenStatus {
    if handle.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    let q = &(*handle).0.q;
    if q.len() != n {
        set_error("weight buffer length mismatch");
        return FairgenStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(q.as_ptr(), out, n);
    FairgenStatus::Ok
}

/// # Safety
/// `handle` must come from `fairgen_group_weights_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fairgen_group_weights_free(handle: *mut FairgenGroupWeights) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn cstr_arg(ptr: *const c_char, what: &str) -> Result<String, Error> {
    if ptr.is_null() {
        return Err(Error::Config(format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Error::Parse(format!("{what} is not valid UTF-8")))
}

/// Render a catalog prompt. `dataset` is one of waterbirds/celeba/utkface/
/// shapes; `strategy` one of vanilla/lora_per_group/dreambooth_per_group/
/// clustered_dreambooth. Non-zero `transfer` selects severe-mode transfer
/// prompts. On success `*positive_out` (and `*negative_out`, which may be set
/// to null) hold NUL-terminated strings owned by the caller; release them
/// with `fairgen_string_free`.
///
/// # Safety
/// String arguments must be NUL-terminated; `positive_out` and `negative_out`
/// must be writable pointer slots.
#[no_mangle]
pub unsafe extern "C" fn fairgen_render_prompt(
    dataset: *const c_char,
    strategy: *const c_char,
    class_label: *const c_char,
    bias_label: *const c_char,
    transfer: i32,
    positive_out: *mut *mut c_char,
    negative_out: *mut *mut c_char,
) -> FairgenStatus {
    if positive_out.is_null() || negative_out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let render = || -> Result<(CString, Option<CString>), Error> {
            let dataset: DatasetId = cstr_arg(dataset, "dataset")?.parse()?;
            let strategy = match cstr_arg(strategy, "strategy")?.as_str() {
                "vanilla" => Strategy::Vanilla,
                "lora_per_group" => Strategy::LoraPerGroup,
                "dreambooth_per_group" => Strategy::DreamboothPerGroup,
                "clustered_dreambooth" => Strategy::ClusteredDreambooth,
                other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
            };
            let group = GroupKey::new(
                cstr_arg(class_label, "class_label")?,
                cstr_arg(bias_label, "bias_label")?,
            );
            let mode = if transfer != 0 {
                PromptMode::Transfer
            } else {
                PromptMode::Standard
            };
            let rendered = render_prompts(dataset, strategy, &group, mode)?;
            let positive = CString::new(rendered.positive)
                .map_err(|_| Error::Parse("prompt contains NUL".into()))?;
            let negative = rendered
                .negative
                .map(|n| CString::new(n).map_err(|_| Error::Parse("prompt contains NUL".into())))
                .transpose()?;
            Ok((positive, negative))
        };
        match render() {
            Ok((positive, negative)) => {
                *positive_out = positive.into_raw();
                *negative_out = negative.map_or(std::ptr::null_mut(), CString::into_raw);
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fairgen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque toy embedding backend (seeded random projection + prompt
/// vocabulary), the desk-scale CLIP substitute.
pub struct FairgenEmbedder {
    backend: ToyEmbedder,
    dim: usize,
    input_len: usize,
}

/// Backend for square `image_size` x `image_size` RGB images embedding into
/// `dim` dimensions. Returns null on invalid arguments.
#[no_mangle]
pub extern "C" fn fairgen_embedder_new(
    seed: u64,
    dim: usize,
    image_size: usize,
) -> *mut FairgenEmbedder {
    if dim < 2 || image_size == 0 {
        set_error("embedder needs dim >= 2 and a positive image size");
        return std::ptr::null_mut();
    }
    let input_len = image_size * image_size * 3;
    let backend =
        ToyEmbedder::new(seed, dim, input_len).with_vocabulary(default_vocabulary(image_size));
    Box::into_raw(Box::new(FairgenEmbedder {
        backend,
        dim,
        input_len,
    }))
}

/// Embed an image given as `image_size * image_size * 3` interleaved RGB
/// floats in [0, 1]. Writes `dim` doubles to `out`.
///
/// # Safety
/// `handle` must come from `fairgen_embedder_new`; `pixels` must hold
/// `pixels_len` floats; `out` must hold the embedder's dimension in doubles.
#[no_mangle]
pub unsafe extern "C" fn fairgen_embedder_embed_image(
    handle: *const FairgenEmbedder,
    pixels: *const f32,
    pixels_len: usize,
    out: *mut f64,
) -> FairgenStatus {
    if handle.is_null() || pixels.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let this = &*handle;
        if pixels_len != this.input_len {
            return fail(Error::Dimension {
                expected: this.input_len,
                got: pixels_len,
            });
        }
        let size = (this.input_len / 3).isqrt();
        let image = fairgen::image::Image {
            width: size,
            height: size,
            channels: 3,
            pixels: slice::from_raw_parts(pixels, pixels_len).to_vec(),
        };
        match this.backend.embed_image(&image) {
            Ok(e) => {
                std::ptr::copy_nonoverlapping(e.vector.as_ptr(), out, this.dim);
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Embed a text prompt. Writes `dim` doubles to `out`.
///
/// # Safety
/// `handle` must come from `fairgen_embedder_new`; `prompt` must be
/// NUL-terminated; `out` must hold the embedder's dimension in doubles.
#[no_mangle]
pub unsafe extern "C" fn fairgen_embedder_embed_text(
    handle: *const FairgenEmbedder,
    prompt: *const c_char,
    out: *mut f64,
) -> FairgenStatus {
    if handle.is_null() || out.is_null() {
        set_error("null pointer");
        return FairgenStatus::NullPointer;
    }
    guarded(|| {
        let this = &*handle;
        let text = match cstr_arg(prompt, "prompt") {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match this.backend.embed_text(&text) {
            Ok(e) => {
                std::ptr::copy_nonoverlapping(e.vector.as_ptr(), out, this.dim);
                FairgenStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `handle` must come from `fairgen_embedder_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fairgen_embedder_free(handle: *mut FairgenEmbedder) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
