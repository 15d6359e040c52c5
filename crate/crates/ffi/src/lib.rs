//! C ABI over `idsis-core`.
//!
//! Models and recognizers are opaque heap handles created by `*_load` and
//! released by `*_free`. Every fallible call returns an [`IdsisStatus`]; the
//! message of the last failure on the calling thread is available through
//! [`idsis_last_error`]. Images cross the boundary as `[3, R, R]` row-major
//! `f32` in [-1, 1], masks as `R·R` class labels.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use idsis_core::autograd::Tensor;
use idsis_core::data::{one_hot, LabelMap};
use idsis_core::evaluation::{calibrate_threshold, frechet_distance};
use idsis_core::identity::{FREmbedder, IdentityEmbedding};
use idsis_core::model::Synthesizer;
use idsis_core::Error;

/// Status codes; 0 is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdsisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Config = 10,
    Validation = 11,
    Shape = 12,
    Ingestion = 13,
    Checkpoint = 14,
    MissingPrerequisite = 20,
    State = 21,
    Numeric = 30,
    QualityGate = 31,
    Divergence = 32,
    Io = 40,
    Json = 41,
    Panic = 99,
}

impl From<&Error> for IdsisStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => IdsisStatus::Config,
            Error::Validation(_) => IdsisStatus::Validation,
            Error::Shape(_) => IdsisStatus::Shape,
            Error::Ingestion(_) => IdsisStatus::Ingestion,
            Error::Checkpoint(_) => IdsisStatus::Checkpoint,
            Error::MissingPrerequisite { .. } => IdsisStatus::MissingPrerequisite,
            Error::State(_) => IdsisStatus::State,
            Error::Numeric(_) => IdsisStatus::Numeric,
            Error::QualityGate(_) => IdsisStatus::QualityGate,
            Error::Divergence(_) => IdsisStatus::Divergence,
            Error::Io { .. } => IdsisStatus::Io,
            Error::Json(_) => IdsisStatus::Json,
        }
    }
}

/// Trained synthesizer.
pub struct IdsisSynthesizer {
    model: Synthesizer,
}

/// Trained face recognizer.
pub struct IdsisEmbedder {
    fr: FREmbedder,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(IdsisStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IdsisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IdsisStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            IdsisStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(IdsisStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(IdsisStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Fail(IdsisStatus::BufferTooSmall, format!("{what} holds {len} values, {needed} needed")));
    }
    Ok(slice::from_raw_parts_mut(p, needed))
}

unsafe fn image_arg(p: *const f32, resolution: usize, what: &str) -> Result<Tensor<f32>, Fail> {
    let data = slice_arg(p, 3 * resolution * resolution, what)?;
    Ok(Tensor::new(&[3, resolution, resolution], data.to_vec())?)
}

unsafe fn labels_arg(p: *const u8, resolution: usize) -> Result<LabelMap, Fail> {
    let data = slice_arg(p, resolution * resolution, "labels")?;
    Ok(LabelMap::new(resolution, resolution, data.to_vec())?)
}

/// Copy the last error message on this thread into `buf` (NUL-terminated,
/// truncated to fit). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn idsis_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn idsis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a recognizer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn idsis_embedder_load(path: *const c_char, out: *mut *mut IdsisEmbedder) -> IdsisStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let fr = FREmbedder::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(IdsisEmbedder { fr }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`idsis_embedder_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn idsis_embedder_free(h: *mut IdsisEmbedder) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Embedding width, 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idsis_embedder_dim(h: *const IdsisEmbedder) -> usize {
    h.as_ref().map_or(0, |h| h.fr.dim())
}

/// Input image side, 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idsis_embedder_resolution(h: *const IdsisEmbedder) -> usize {
    h.as_ref().map_or(0, |h| h.fr.resolution())
}

/// Unit-norm embedding of one image into `out` (`out_len` ≥ dim).
///
/// # Safety
/// `image` must hold `3·R·R` floats; `out` must be valid for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn idsis_embedder_embed(
    h: *const IdsisEmbedder,
    image: *const f32,
    out: *mut f32,
    out_len: usize,
) -> IdsisStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("embedder"))?;
        let img = image_arg(image, h.fr.resolution(), "image")?;
        let emb = h.fr.embed(&img)?;
        out_slice(out, out_len, emb.vector.len(), "out")?.copy_from_slice(&emb.vector);
        Ok(())
    })
}

/// Cosine similarity of two images under a recognizer.
///
/// # Safety
/// `a` and `b` must hold `3·R·R` floats; `score` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn idsis_embedder_score(
    h: *const IdsisEmbedder,
    a: *const f32,
    b: *const f32,
    score: *mut f64,
) -> IdsisStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("embedder"))?;
        if score.is_null() {
            return Err(null("score"));
        }
        let r = h.fr.resolution();
        let (ea, eb) = (h.fr.embed(&image_arg(a, r, "a")?)?, h.fr.embed(&image_arg(b, r, "b")?)?);
        *score = ea.cosine(&eb);
        Ok(())
    })
}

/// Load a synthesizer checkpoint (training checkpoints work too).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn idsis_synthesizer_load(path: *const c_char, out: *mut *mut IdsisSynthesizer) -> IdsisStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (model, _, _) = Synthesizer::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(IdsisSynthesizer { model }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`idsis_synthesizer_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn idsis_synthesizer_free(h: *mut IdsisSynthesizer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idsis_synthesizer_resolution(h: *const IdsisSynthesizer) -> usize {
    h.as_ref().map_or(0, |h| h.model.resolution())
}

/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn idsis_synthesizer_classes(h: *const IdsisSynthesizer) -> usize {
    h.as_ref().map_or(0, |h| h.model.classes())
}

/// Generate from `labels` with styles read from (`style_image`,
/// `style_labels`) and the identity of `identity_image` under `fr`.
/// Reconstruction passes the same image and labels for all three.
///
/// # Safety
/// Images hold `3·R·R` floats, label maps `R·R` bytes; `out` is valid for
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn idsis_synthesizer_generate(
    h: *const IdsisSynthesizer,
    fr: *const IdsisEmbedder,
    labels: *const u8,
    style_image: *const f32,
    style_labels: *const u8,
    identity_image: *const f32,
    out: *mut f32,
    out_len: usize,
) -> IdsisStatus {
    guard(|| {
        let m = &h.as_ref().ok_or_else(|| null("synthesizer"))?.model;
        let fr = &fr.as_ref().ok_or_else(|| null("embedder"))?.fr;
        let r = m.resolution();
        if fr.resolution() != r {
            return Err(Fail(
                IdsisStatus::Shape,
                format!("recognizer expects {} px, synthesizer {r} px", fr.resolution()),
            ));
        }
        let c = m.classes();
        let mask = one_hot(&labels_arg(labels, r)?, c)?;
        let style_mask = one_hot(&labels_arg(style_labels, r)?, c)?;
        let styles = m.extract_styles(&image_arg(style_image, r, "style_image")?, &style_mask)?;
        let emb: IdentityEmbedding = fr.embed(&image_arg(identity_image, r, "identity_image")?)?;
        let tokens = m.tokens(&styles, &emb)?;
        let g = m.generate(&m.embed_mask(&mask)?, &tokens)?;
        out_slice(out, out_len, g.image.data().len(), "out")?.copy_from_slice(g.image.data());
        Ok(())
    })
}

/// Threshold accepting at most `far` of the impostor scores.
///
/// # Safety
/// `scores` holds `n` values; `tau` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn idsis_calibrate_threshold(scores: *const f64, n: usize, far: f64, tau: *mut f64) -> IdsisStatus {
    guard(|| {
        if tau.is_null() {
            return Err(null("tau"));
        }
        *tau = calibrate_threshold(slice_arg(scores, n, "scores")?, far)?;
        Ok(())
    })
}

/// Fréchet distance between Gaussians fit to two row-major sample sets of
/// width `dim`.
///
/// # Safety
/// `a` holds `na·dim` values, `b` holds `nb·dim`; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn idsis_frechet_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> IdsisStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(Fail(IdsisStatus::Validation, "dim must be positive".into()));
        }
        let rows = |p, n, what| -> Result<Vec<Vec<f64>>, Fail> {
            Ok(slice_arg(p, n * dim, what)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        *out = frechet_distance(&rows(a, na, "a")?, &rows(b, nb, "b")?)?;
        Ok(())
    })
}
