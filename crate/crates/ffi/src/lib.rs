//! C ABI over `c2f-caption`.
//!
//! Every function returns a [`C2fStatus`]. On failure the message of the most
//! recent error on the calling thread is available from [`c2f_last_error`].
//! Handles are opaque and must be released with their `*_free` function.
//! Strings cross the boundary as NUL-terminated UTF-8.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use c2f_caption::attention::SpatialFeatures;
use c2f_caption::beam::beam_search;
use c2f_caption::checkpoint::Checkpoint;
use c2f_caption::decoder::rollout_greedy;
use c2f_caption::metrics::{bleu_n, ReferenceCorpus};
use c2f_caption::model::ModelParams;
use c2f_caption::task::{self, Color, Object, Scene, Shape};
use c2f_caption::tensor::Tensor;
use c2f_caption::vocab::{TokenId, Vocabulary, NUM_RESERVED};
use c2f_caption::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C2fStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A loaded model. Opaque.
pub struct C2fModel {
    params: ModelParams,
    vocab: Vocabulary,
}

/// A reference corpus for CIDEr. Opaque.
pub struct C2fCorpus {
    corpus: ReferenceCorpus,
    words: HashMap<String, TokenId>,
}

/// One object of a scene. `shape`: 0 circle, 1 square, 2 triangle.
/// `color`: 0 red, 1 green, 2 blue. `cell` is `row * grid + col`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct C2fObject {
    pub cell: u32,
    pub shape: u32,
    pub color: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> C2fStatus {
    match e {
        Error::Io { .. } => C2fStatus::Io,
        Error::Checkpoint(_) | Error::Format(_) | Error::Json(_) | Error::Config(_) => C2fStatus::Checkpoint,
        e if e.is_numeric() => C2fStatus::Numeric,
        _ => C2fStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (C2fStatus, String)>) -> C2fStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            C2fStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            C2fStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (C2fStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (C2fStatus, String) {
    (C2fStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (C2fStatus, String) {
    (C2fStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (C2fStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, (C2fStatus, String)> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|&s| str_arg(s, what))
        .collect()
}

/// Copies `text` and a NUL into `buf`. `*written` receives the byte count
/// including the NUL, also when the buffer is too small.
unsafe fn copy_out(text: &str, buf: *mut c_char, cap: usize, written: *mut usize) -> Result<(), (C2fStatus, String)> {
    let need = text.len() + 1;
    if !written.is_null() {
        *written = need;
    }
    if cap < need {
        return Err((C2fStatus::BufferTooSmall, format!("need {need} bytes, buffer has {cap}")));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn c2f_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn c2f_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_load(path: *const c_char, out: *mut *mut C2fModel) -> C2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let vocab = task::vocabulary();
        if ckpt.params.dims.vocab_size != vocab.len() {
            return Err(invalid("checkpoint vocabulary does not match the task vocabulary"));
        }
        *out = Box::into_raw(Box::new(C2fModel {
            params: ckpt.params,
            vocab,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`c2f_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_free(model: *mut C2fModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const C2fModel) -> Result<&'a C2fModel, (C2fStatus, String)> {
    model.as_ref().ok_or_else(|| null("model"))
}

/// Number of decoding stages, `N_f + 1`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_num_stages(model: *const C2fModel, out: *mut usize) -> C2fStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.dims.num_stages();
        Ok(())
    })
}

/// Side length `k` of the feature grid.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_grid_side(model: *const C2fModel, out: *mut usize) -> C2fStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.dims.grid;
        Ok(())
    })
}

/// Feature width `d_v` of each grid cell.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn c2f_model_feature_dim(model: *const C2fModel, out: *mut usize) -> C2fStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.dims.feature_dim;
        Ok(())
    })
}

fn decode(m: &C2fModel, features: &SpatialFeatures, stage: usize, beam: usize) -> Result<String, (C2fStatus, String)> {
    let stages = m.params.dims.num_stages();
    if stage >= stages {
        return Err(invalid(format!("stage {stage} out of range, model has {stages}")));
    }
    let words = if beam > 0 {
        if stage != stages - 1 {
            return Err(invalid("beam search decodes the final stage only"));
        }
        beam_search(&m.params, features, beam).map_err(lib_err)?.words().to_vec()
    } else {
        rollout_greedy(&m.params, features).map_err(lib_err)?[stage].words().to_vec()
    };
    Ok(m.vocab.decode(&words))
}

/// Decodes a scene given as objects and writes `stage`'s caption into `buf`.
/// `beam` = 0 decodes greedily; a positive width runs beam search on the
/// final stage.
///
/// # Safety
/// `objects` must point to `n_objects` values, `buf` to `cap` writable bytes,
/// and `written` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn c2f_decode_scene(
    model: *const C2fModel,
    objects: *const C2fObject,
    n_objects: usize,
    stage: usize,
    beam: usize,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> C2fStatus {
    guard(|| {
        let m = model_ref(model)?;
        if objects.is_null() && n_objects > 0 {
            return Err(null("objects"));
        }
        let raw = if n_objects == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(objects, n_objects)
        };
        let objs = raw
            .iter()
            .map(|o| {
                Ok(Object {
                    cell: o.cell as usize,
                    shape: *Shape::ALL
                        .get(o.shape as usize)
                        .ok_or_else(|| invalid(format!("shape {} out of range", o.shape)))?,
                    color: *Color::ALL
                        .get(o.color as usize)
                        .ok_or_else(|| invalid(format!("color {} out of range", o.color)))?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scene = Scene::new(0, m.params.dims.grid, objs).map_err(lib_err)?;
        let caption = decode(m, &task::encode_scene(&scene), stage, beam)?;
        copy_out(&caption, buf, cap, written)
    })
}

/// Decodes raw features, `k*k` rows of `d_v` values in row-major order.
///
/// # Safety
/// `features` must point to `len` doubles; see [`c2f_decode_scene`] for the rest.
#[no_mangle]
pub unsafe extern "C" fn c2f_decode_features(
    model: *const C2fModel,
    features: *const f64,
    len: usize,
    stage: usize,
    beam: usize,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> C2fStatus {
    guard(|| {
        let m = model_ref(model)?;
        if features.is_null() {
            return Err(null("features"));
        }
        let dims = m.params.dims;
        let (rows, cols) = (dims.regions(), dims.feature_dim);
        if len != rows * cols {
            return Err(invalid(format!("expected {} feature values, got {len}", rows * cols)));
        }
        let data = std::slice::from_raw_parts(features, len).to_vec();
        let t = Tensor::new(vec![rows, cols], data).map_err(lib_err)?;
        let v = SpatialFeatures::new(dims.grid, t).map_err(lib_err)?;
        let caption = decode(m, &v, stage, beam)?;
        copy_out(&caption, buf, cap, written)
    })
}

/// Word ids private to a corpus handle; unseen words get fresh ids.
fn intern(words: &mut HashMap<String, TokenId>, sentence: &str) -> Vec<TokenId> {
    sentence
        .split_whitespace()
        .map(|w| {
            let next = NUM_RESERVED + words.len();
            *words.entry(w.to_string()).or_insert(next)
        })
        .collect()
}

/// BLEU-`n_max` of a whitespace-tokenised candidate against references.
///
/// # Safety
/// `candidate` must be a NUL-terminated string, `refs` must point to `n_refs`
/// such strings, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn c2f_bleu(
    candidate: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    n_max: usize,
    out: *mut f64,
) -> C2fStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cand = str_arg(candidate, "candidate")?;
        let refs = str_array(refs, n_refs, "refs")?;
        let mut words = HashMap::new();
        let c = intern(&mut words, cand);
        let r: Vec<Vec<TokenId>> = refs.iter().map(|s| intern(&mut words, s)).collect();
        *out = bleu_n(&c, &r, n_max).map_err(lib_err)?;
        Ok(())
    })
}

/// Builds a CIDEr corpus from `n_refs` reference sentences, the i-th of which
/// describes image `image_ids[i]`.
///
/// # Safety
/// `image_ids` and `refs` must each point to `n_refs` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn c2f_corpus_new(
    image_ids: *const u64,
    refs: *const *const c_char,
    n_refs: usize,
    out: *mut *mut C2fCorpus,
) -> C2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if image_ids.is_null() && n_refs > 0 {
            return Err(null("image_ids"));
        }
        let refs = str_array(refs, n_refs, "refs")?;
        let ids = if n_refs == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(image_ids, n_refs)
        };
        let mut words = HashMap::new();
        let mut grouped: BTreeMap<u64, Vec<Vec<TokenId>>> = BTreeMap::new();
        for (&id, s) in ids.iter().zip(&refs) {
            grouped.entry(id).or_default().push(intern(&mut words, s));
        }
        let corpus = ReferenceCorpus::new(grouped).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(C2fCorpus { corpus, words }));
        Ok(())
    })
}

/// Releases a corpus. Null is ignored.
///
/// # Safety
/// `corpus` must come from [`c2f_corpus_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn c2f_corpus_free(corpus: *mut C2fCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// CIDEr of `candidate` against the references of `image_id`.
///
/// # Safety
/// `corpus` must be a live handle, `candidate` a NUL-terminated string and
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn c2f_corpus_cider(
    corpus: *const C2fCorpus,
    image_id: u64,
    candidate: *const c_char,
    out: *mut f64,
) -> C2fStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cand = str_arg(candidate, "candidate")?;
        // Words outside the corpus cannot match; a scratch copy keeps the handle immutable.
        let mut words = c.words.clone();
        let ids = intern(&mut words, cand);
        *out = c.corpus.cider_for(image_id, &ids).map_err(lib_err)?;
        Ok(())
    })
}
