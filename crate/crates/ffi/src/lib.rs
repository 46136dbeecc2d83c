//! C ABI over the `zsvqa` scorer.
//!
//! Every fallible function returns a [`ZsvqaStatus`]. On failure the message
//! is kept per thread and read with [`zsvqa_last_error`]. Handles are opaque
//! and freed with the matching `*_free` function; passing NULL to a free
//! function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use zsvqa::dataset::{load_dataset, Instance, QuestionType, ZsFlags, NUM_CHOICES};
use zsvqa::features::{Encoder, Stores};
use zsvqa::model::{argmax, model_grad_check, score_batch, Checkpoint, GradCheckOptions, Interaction};
use zsvqa::textproc::{porter_stem, tokenize, Token};
use zsvqa::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZsvqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Lookup = 6,
    Shape = 7,
    State = 8,
    Numerical = 9,
    Split = 10,
    InvalidArgument = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZsvqaMode {
    Multiplicative = 0,
    Order = 1,
    OrderReversed = 2,
}

/// Loaded feature stores.
pub struct ZsvqaStores {
    inner: Stores,
}

/// A checkpoint plus the encoder that feeds it.
pub struct ZsvqaModel {
    checkpoint: Checkpoint,
    encoder: Encoder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ZsvqaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => ZsvqaStatus::Io,
            Error::Format { .. } => ZsvqaStatus::Format,
            Error::Config(_) => ZsvqaStatus::Config,
            Error::Lookup(_) => ZsvqaStatus::Lookup,
            Error::Shape { .. } => ZsvqaStatus::Shape,
            Error::State(_) => ZsvqaStatus::State,
            Error::Numerical(_) => ZsvqaStatus::Numerical,
            Error::Split(_) => ZsvqaStatus::Split,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ZsvqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ZsvqaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ZsvqaStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(ZsvqaStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ZsvqaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_path(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(|s| Some(PathBuf::from(s)))
    }
}

fn null(what: &str) -> Failure {
    Failure(ZsvqaStatus::NullPointer, format!("{what} is NULL"))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn zsvqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Porter stem of one lowercase word. `*out` receives a string to release
/// with [`zsvqa_string_free`].
///
/// # Safety
/// `word` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_porter_stem(word: *const c_char, out: *mut *mut c_char) -> ZsvqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = text(word, "word")?;
        let token = Token::new(w).ok_or_else(|| {
            Failure(ZsvqaStatus::InvalidArgument, format!("'{w}' is not a lowercase word without whitespace"))
        })?;
        let s = CString::new(porter_stem(&token)).expect("stems have no NUL");
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Open the image feature file and the optional detection and exemplar
/// files (NULL to skip).
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_stores_open(
    images: *const c_char,
    detections: *const c_char,
    exemplars: *const c_char,
    out: *mut *mut ZsvqaStores,
) -> ZsvqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let images = PathBuf::from(text(images, "images")?);
        let det = opt_path(detections, "detections")?;
        let ex = opt_path(exemplars, "exemplars")?;
        let inner = Stores::open(&images, det.as_deref(), ex.as_deref())?;
        *out = Box::into_raw(Box::new(ZsvqaStores { inner }));
        Ok(())
    })
}

/// # Safety
/// `stores` must come from [`zsvqa_stores_open`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_stores_free(stores: *mut ZsvqaStores) {
    if !stores.is_null() {
        drop(Box::from_raw(stores));
    }
}

/// Load a checkpoint. `dataset` (may be NULL) should be the dataset file the
/// model was trained on, so that stemmed words map exactly as in training;
/// without it words are stemmed one by one.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_model_load(
    checkpoint: *const c_char,
    dataset: *const c_char,
    out: *mut *mut ZsvqaModel,
) -> ZsvqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(text(checkpoint, "checkpoint")?);
        let instances = match opt_path(dataset, "dataset")? {
            Some(p) => load_dataset(&p)?,
            None => Vec::new(),
        };
        let checkpoint = Checkpoint::load(&path)?;
        if checkpoint.params.tables().is_none() {
            return Err(Error::State("checkpoint has no word tables".into()).into());
        }
        let encoder = Encoder::new(checkpoint.features.clone(), &instances)?;
        *out = Box::into_raw(Box::new(ZsvqaModel { checkpoint, encoder }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`zsvqa_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_model_free(model: *mut ZsvqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn scores(
    model: *const ZsvqaModel,
    stores: *const ZsvqaStores,
    image_id: *const c_char,
    question: *const c_char,
    choices: *const *const c_char,
    n_choices: usize,
) -> Result<Vec<f64>, Failure> {
    let model = model.as_ref().ok_or_else(|| null("model"))?;
    let stores = stores.as_ref().ok_or_else(|| null("stores"))?;
    if choices.is_null() {
        return Err(null("choices"));
    }
    if n_choices != NUM_CHOICES {
        return Err(Failure(
            ZsvqaStatus::InvalidArgument,
            format!("expected {NUM_CHOICES} choices, got {n_choices}"),
        ));
    }
    let mut toks = Vec::with_capacity(NUM_CHOICES);
    for i in 0..NUM_CHOICES {
        toks.push(tokenize(text(*choices.add(i), "choice")?));
    }
    let inst = Instance {
        id: "query".into(),
        image_id: text(image_id, "image_id")?.to_owned(),
        question_type: QuestionType::What,
        question: tokenize(text(question, "question")?),
        choices: toks.try_into().expect("exactly NUM_CHOICES"),
        correct_index: 0,
    };
    let params = &model.checkpoint.params;
    let tables = params.tables().expect("checked at load");
    let enc = model.encoder.encode(&inst, ZsFlags::default(), tables, &stores.inner)?;
    Ok(score_batch(params, &[enc])?.remove(0))
}

/// Score the 4 candidate answers of one question; writes 4 values in (0, 1)
/// to `scores_out`.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `choices` must hold
/// `n_choices` pointers and `scores_out` room for `n_choices` doubles.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_model_score(
    model: *const ZsvqaModel,
    stores: *const ZsvqaStores,
    image_id: *const c_char,
    question: *const c_char,
    choices: *const *const c_char,
    n_choices: usize,
    scores_out: *mut f64,
) -> ZsvqaStatus {
    guard(|| {
        if scores_out.is_null() {
            return Err(null("scores_out"));
        }
        let s = scores(model, stores, image_id, question, choices, n_choices)?;
        ptr::copy_nonoverlapping(s.as_ptr(), scores_out, s.len());
        Ok(())
    })
}

/// Index of the best-scoring candidate; ties go to the lowest index.
///
/// # Safety
/// As for [`zsvqa_model_score`], with `index_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_model_predict(
    model: *const ZsvqaModel,
    stores: *const ZsvqaStores,
    image_id: *const c_char,
    question: *const c_char,
    choices: *const *const c_char,
    n_choices: usize,
    index_out: *mut usize,
) -> ZsvqaStatus {
    guard(|| {
        if index_out.is_null() {
            return Err(null("index_out"));
        }
        let s = scores(model, stores, image_id, question, choices, n_choices)?;
        *index_out = argmax(&s);
        Ok(())
    })
}

/// Finite-difference check of the model gradients on a random draw;
/// writes the worst relative error. `mode` is a [`ZsvqaMode`] value.
///
/// # Safety
/// `max_error_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zsvqa_gradcheck(
    mode: u32,
    dims: usize,
    seed: u64,
    eps: f64,
    max_error_out: *mut f64,
) -> ZsvqaStatus {
    guard(|| {
        if max_error_out.is_null() {
            return Err(null("max_error_out"));
        }
        let interaction = match mode {
            m if m == ZsvqaMode::Multiplicative as u32 => Interaction::Multiplicative,
            m if m == ZsvqaMode::Order as u32 => Interaction::Order,
            m if m == ZsvqaMode::OrderReversed as u32 => Interaction::OrderReversed,
            other => return Err(Failure(ZsvqaStatus::InvalidArgument, format!("unknown mode {other}"))),
        };
        let opts = GradCheckOptions { dims, interaction, seed, eps, ..GradCheckOptions::default() };
        *max_error_out = model_grad_check(&opts)?.max_relative_error;
        Ok(())
    })
}
