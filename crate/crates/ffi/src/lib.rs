//! C interface to the report metrics, the local difference operator,
//! Noisy-OR pooling, synthetic cases and a trained classifier.
//!
//! Every function returns a [`DvpStatus`]. On failure the message is
//! available from [`dvp_last_error`] on the same thread. Handles are
//! opaque; free them with the matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use diffvp::classifier::{noisy_or_pool, FrozenClassifier};
use diffvp::data::{generate_case, CaseRecord, Volume, Vocabulary, NUM_CLASSES};
use diffvp::experiments::load_classifier;
use diffvp::hde;
use diffvp::metrics::{self, RougeVariant};
use diffvp::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    DegenerateSamples = 6,
    Panic = 7,
    Other = 8,
}

/// Which ROUGE score [`dvp_rouge`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvpRouge {
    One = 0,
    Two = 1,
    L = 2,
}

/// Micro-averaged clinical efficacy scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DvpCeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DvpWelch {
    pub t: f64,
    pub dof: f64,
    pub p_two_sided: f64,
}

/// A synthetic case: volume, report and labels.
pub struct DvpCase {
    record: CaseRecord,
    report: CString,
}

/// A frozen classifier loaded from a `train-classifier` directory.
pub struct DvpClassifier {
    inner: FrozenClassifier,
}

/// Number of finding classes.
pub const DVP_NUM_CLASSES: usize = 18;
const _: () = assert!(DVP_NUM_CLASSES == NUM_CLASSES);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(DvpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => DvpStatus::Shape,
            Error::Invalid(_) | Error::Config(_) => DvpStatus::InvalidArgument,
            Error::Io(_) | Error::Missing(_) => DvpStatus::Io,
            Error::Checkpoint { .. } | Error::Json(_) => DvpStatus::Checkpoint,
            Error::DegenerateSamples => DvpStatus::DegenerateSamples,
            _ => DvpStatus::Other,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DvpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DvpStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DvpStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (DvpStatus::Ok, String::new()),
        Ok(Err(Fail(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (DvpStatus::Panic, m)
        }
    };
    set_error(&msg);
    status
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn words<'a>(p: *const c_char, what: &str) -> Result<Vec<&'a str>, Fail> {
    Ok(text(p, what)?.split_whitespace().collect())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dvp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dvp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `1 − Π(1 − p_i)` over `n` cell probabilities in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn dvp_noisy_or(probs: *const f32, n: usize, out: *mut f32) -> DvpStatus {
    guard(|| {
        let p = input(probs, n, "probs")?;
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("probability {bad} outside [0, 1]")));
        }
        *out_ref(out, "out")? = noisy_or_pool(p);
        Ok(())
    })
}

/// Token weights of the local difference operator for two `[n, d]`
/// row-major token sets. Writes `n` weights.
#[no_mangle]
pub unsafe extern "C" fn dvp_local_weights(
    target: *const f32,
    reference: *const f32,
    n: usize,
    d: usize,
    out: *mut f32,
) -> DvpStatus {
    guard(|| {
        if d == 0 {
            return Err(invalid("d must be positive"));
        }
        let w = hde::local_weights(input(target, n * d, "target")?, input(reference, n * d, "reference")?, d)?;
        output(out, n, "out")?.copy_from_slice(&w);
        Ok(())
    })
}

/// Weighted sum of token residuals for two `[n, d]` token sets. Writes
/// `d` values.
#[no_mangle]
pub unsafe extern "C" fn dvp_local_delta(
    target: *const f32,
    reference: *const f32,
    n: usize,
    d: usize,
    out: *mut f32,
) -> DvpStatus {
    guard(|| {
        if d == 0 {
            return Err(invalid("d must be positive"));
        }
        let delta = hde::local_delta(input(target, n * d, "target")?, input(reference, n * d, "reference")?, d)?;
        output(out, d, "out")?.copy_from_slice(&delta);
        Ok(())
    })
}

/// BLEU-`order` (1 to 4) in percent between whitespace-tokenised texts.
#[no_mangle]
pub unsafe extern "C" fn dvp_bleu(
    candidate: *const c_char,
    reference: *const c_char,
    order: u32,
    out: *mut f64,
) -> DvpStatus {
    guard(|| {
        if !(1..=4).contains(&order) {
            return Err(invalid(format!("BLEU order {order} outside 1..=4")));
        }
        let (c, r) = (words(candidate, "candidate")?, words(reference, "reference")?);
        *out_ref(out, "out")? = metrics::bleu(&c, &r, order as usize);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dvp_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    variant: DvpRouge,
    out: *mut f64,
) -> DvpStatus {
    guard(|| {
        let (c, r) = (words(candidate, "candidate")?, words(reference, "reference")?);
        let v = match variant {
            DvpRouge::One => RougeVariant::One,
            DvpRouge::Two => RougeVariant::Two,
            DvpRouge::L => RougeVariant::L,
        };
        *out_ref(out, "out")? = metrics::rouge(&c, &r, v);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dvp_meteor(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> DvpStatus {
    guard(|| {
        let (c, r) = (words(candidate, "candidate")?, words(reference, "reference")?);
        *out_ref(out, "out")? = metrics::meteor_lite(&c, &r);
        Ok(())
    })
}

/// Finding labels a report text asserts, as 18 bytes of 0 or 1.
#[no_mangle]
pub unsafe extern "C" fn dvp_report_labels(report: *const c_char, out: *mut u8) -> DvpStatus {
    guard(|| {
        let tokens = Vocabulary::get().encode(text(report, "report")?)?;
        output(out, NUM_CLASSES, "out")?.copy_from_slice(&metrics::extract_labels(&tokens));
        Ok(())
    })
}

/// Micro-averaged CE scores over `n_cases` rows of 18 labels each.
#[no_mangle]
pub unsafe extern "C" fn dvp_ce_scores(
    predicted: *const u8,
    truth: *const u8,
    n_cases: usize,
    out: *mut DvpCeScores,
) -> DvpStatus {
    guard(|| {
        let rows = |p: *const u8, what: &str| -> Result<Vec<[u8; NUM_CLASSES]>, Fail> {
            let flat = input(p, n_cases * NUM_CLASSES, what)?;
            if flat.iter().any(|&v| v > 1) {
                return Err(invalid(format!("{what} labels must be 0 or 1")));
            }
            Ok(flat.chunks(NUM_CLASSES).map(|c| c.try_into().unwrap()).collect())
        };
        let s = metrics::clinical_efficacy(&rows(predicted, "predicted")?, &rows(truth, "truth")?)?;
        *out_ref(out, "out")? = DvpCeScores {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        };
        Ok(())
    })
}

/// Welch's t-test between two samples of at least two values each.
#[no_mangle]
pub unsafe extern "C" fn dvp_welch(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    out: *mut DvpWelch,
) -> DvpStatus {
    guard(|| {
        let r = metrics::welch_t_test(input(a, n_a, "a")?, input(b, n_b, "b")?)?;
        *out_ref(out, "out")? = DvpWelch {
            t: r.t,
            dof: r.dof,
            p_two_sided: r.p_two_sided,
        };
        Ok(())
    })
}

/// Generates the synthetic case for `seed` with the given active classes
/// (indices below 18). Free with [`dvp_case_free`].
#[no_mangle]
pub unsafe extern "C" fn dvp_case_generate(
    seed: u64,
    classes: *const u32,
    n_classes: usize,
    out: *mut *mut DvpCase,
) -> DvpStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let classes: Vec<usize> = input(classes, n_classes, "classes")?.iter().map(|&k| k as usize).collect();
        let record = generate_case(seed, &classes)?;
        let report = CString::new(Vocabulary::get().decode(&record.report)).map_err(|e| invalid(e.to_string()))?;
        *slot = Box::into_raw(Box::new(DvpCase { record, report }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dvp_case_free(case: *mut DvpCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

/// Volume extents (slices, height, width) and a borrowed pointer to its
/// voxels, valid until the case is freed.
#[no_mangle]
pub unsafe extern "C" fn dvp_case_volume(
    case: *const DvpCase,
    extents: *mut usize,
    voxels: *mut *const f32,
) -> DvpStatus {
    guard(|| {
        let c = case.as_ref().ok_or_else(|| null("case"))?;
        output(extents, 3, "extents")?.copy_from_slice(&c.record.volume.extents());
        *out_ref(voxels, "voxels")? = c.record.volume.voxels().as_ptr();
        Ok(())
    })
}

/// Borrowed NUL-terminated report text, valid until the case is freed.
#[no_mangle]
pub unsafe extern "C" fn dvp_case_report(case: *const DvpCase, report: *mut *const c_char) -> DvpStatus {
    guard(|| {
        let c = case.as_ref().ok_or_else(|| null("case"))?;
        *out_ref(report, "report")? = c.report.as_ptr();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dvp_case_labels(case: *const DvpCase, out: *mut u8) -> DvpStatus {
    guard(|| {
        let c = case.as_ref().ok_or_else(|| null("case"))?;
        output(out, NUM_CLASSES, "out")?.copy_from_slice(&c.record.labels);
        Ok(())
    })
}

/// Loads a classifier directory written by `diffvp train-classifier`.
#[no_mangle]
pub unsafe extern "C" fn dvp_classifier_load(dir: *const c_char, out: *mut *mut DvpClassifier) -> DvpStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let inner = load_classifier(Path::new(text(dir, "dir")?))?;
        *slot = Box::into_raw(Box::new(DvpClassifier { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dvp_classifier_free(classifier: *mut DvpClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

/// Per-class probabilities (18 floats) for a volume of `n` voxels laid
/// out as the classifier's extents.
#[no_mangle]
pub unsafe extern "C" fn dvp_classifier_predict(
    classifier: *const DvpClassifier,
    voxels: *const f32,
    n: usize,
    out: *mut f32,
) -> DvpStatus {
    guard(|| {
        let c = classifier.as_ref().ok_or_else(|| null("classifier"))?;
        let volume = Volume::new(c.inner.config().extents, input(voxels, n, "voxels")?.to_vec())?;
        output(out, NUM_CLASSES, "out")?.copy_from_slice(&c.inner.predict(&volume)?);
        Ok(())
    })
}
