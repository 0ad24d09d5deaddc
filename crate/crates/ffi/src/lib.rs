//! C interface: open a corpus, load a checkpoint, segment a volume from a text
//! prompt, and validate vocabularies.
//!
//! Every function returns a [`VlsegStatus`]. On failure the message is kept
//! per thread and can be copied out with [`vlseg_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vlseg::dataset::Dataset;
use vlseg::eval::{NetPredictor, Predictor};
use vlseg::nn::Checkpoint;
use vlseg::tensor::{voxel_count, Field, Mask};
use vlseg::vocab::{validate_expansion, ConflictRecord, ExpandedVocabulary, LabelSchema};
use vlseg::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VlsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Shape = 4,
    Parse = 5,
    Io = 6,
    Checkpoint = 7,
    Config = 8,
    BufferTooSmall = 9,
    OutOfRange = 10,
    Panic = 11,
}

impl From<&Error> for VlsegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => VlsegStatus::Shape,
            Error::Parse(_) | Error::Schema(_) | Error::Consistency(_) | Error::Json(_) => VlsegStatus::Parse,
            Error::Io { .. } => VlsegStatus::Io,
            Error::Checkpoint(_) => VlsegStatus::Checkpoint,
            Error::Config(_) => VlsegStatus::Config,
            _ => VlsegStatus::InvalidInput,
        }
    }
}

/// A corpus opened from disk.
pub struct VlsegDataset(Dataset);

/// A trained network bound to the prompt embedder of a corpus.
pub struct VlsegPredictor(NetPredictor);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(VlsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn fail<T>(status: VlsegStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VlsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VlsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VlsegStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(VlsegStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(VlsegStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(VlsegStatus::NullPointer, format!("{what} is null")), Ok)
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(VlsegStatus::NullPointer, format!("{what} is null"))
    } else {
        Ok(())
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the length the full message needs,
/// including the terminator; 1 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vlseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Opens a corpus directory written by `vlseg gen-data`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vlseg_dataset_open(path: *const c_char, out: *mut *mut VlsegDataset) -> VlsegStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let ds = Dataset::open(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(VlsegDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`vlseg_dataset_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vlseg_dataset_free(ds: *mut VlsegDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of cases over all splits.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vlseg_dataset_len(ds: *const VlsegDataset, out: *mut usize) -> VlsegStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = get(ds, "dataset")?.0.len();
        Ok(())
    })
}

/// Spatial extent `[H, W, D]` of case `index`.
///
/// # Safety
/// `ds` must be a live dataset handle; `dims` must be writable for 3 values.
#[no_mangle]
pub unsafe extern "C" fn vlseg_dataset_case_dims(
    ds: *const VlsegDataset,
    index: usize,
    dims: *mut usize,
) -> VlsegStatus {
    guard(|| {
        out_ptr(dims, "dims")?;
        let ds = &get(ds, "dataset")?.0;
        if index >= ds.len() {
            return fail(VlsegStatus::OutOfRange, format!("case {index} of {}", ds.len()));
        }
        let shape = ds.entry(index).shape;
        ptr::copy_nonoverlapping(shape.as_ptr(), dims, 3);
        Ok(())
    })
}

/// Copies the intensity volume of case `index` (x-major, then y, then z).
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vlseg_dataset_case_volume(
    ds: *const VlsegDataset,
    index: usize,
    out: *mut f32,
    len: usize,
) -> VlsegStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let ds = &get(ds, "dataset")?.0;
        if index >= ds.len() {
            return fail(VlsegStatus::OutOfRange, format!("case {index} of {}", ds.len()));
        }
        let volume = ds.case(index)?.volume;
        if len < volume.data.len() {
            return fail(
                VlsegStatus::BufferTooSmall,
                format!("volume needs {} floats, buffer has {len}", volume.data.len()),
            );
        }
        ptr::copy_nonoverlapping(volume.data.as_ptr(), out, volume.data.len());
        Ok(())
    })
}

/// Loads a checkpoint and binds it to the prompt embedder of `ds`. The
/// dataset handle may be freed afterwards.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string, `ds` a live dataset handle and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vlseg_predictor_load(
    checkpoint: *const c_char,
    ds: *const VlsegDataset,
    out: *mut *mut VlsegPredictor,
) -> VlsegStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let ck = Checkpoint::load(Path::new(text(checkpoint, "checkpoint")?))?;
        let embedder = get(ds, "dataset")?.0.prompt_embedder()?;
        *out = Box::into_raw(Box::new(VlsegPredictor(NetPredictor::new(ck, embedder)?)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`vlseg_predictor_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vlseg_predictor_free(p: *mut VlsegPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Probability threshold applied to the finest-scale sigmoid (default 0.5).
///
/// # Safety
/// `p` must be a live predictor handle.
#[no_mangle]
pub unsafe extern "C" fn vlseg_predictor_set_threshold(p: *mut VlsegPredictor, threshold: f64) -> VlsegStatus {
    guard(|| {
        let p = p.as_mut().map_or_else(|| fail(VlsegStatus::NullPointer, "predictor is null"), Ok)?;
        if !(0.0..=1.0).contains(&threshold) {
            return fail(VlsegStatus::InvalidInput, format!("threshold {threshold} outside [0, 1]"));
        }
        p.0.threshold = threshold;
        Ok(())
    })
}

/// Segments a single-channel volume of extent `dims[0..3]` for `prompt` and
/// writes a 0/1 mask of the same layout into `mask`. Writes the number of
/// foreground voxels to `foreground` when it is not null.
///
/// # Safety
/// `p` must be a live predictor handle, `volume` readable and `mask` writable
/// for `dims[0] * dims[1] * dims[2]` elements, `dims` readable for 3 values,
/// `prompt` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vlseg_predictor_segment(
    p: *mut VlsegPredictor,
    volume: *const f32,
    dims: *const usize,
    prompt: *const c_char,
    mask: *mut u8,
    foreground: *mut usize,
) -> VlsegStatus {
    guard(|| {
        let p = p.as_mut().map_or_else(|| fail(VlsegStatus::NullPointer, "predictor is null"), Ok)?;
        if volume.is_null() || dims.is_null() {
            return fail(VlsegStatus::NullPointer, "volume or dims is null");
        }
        out_ptr(mask, "mask")?;
        let prompt = text(prompt, "prompt")?;
        let d = [*dims, *dims.add(1), *dims.add(2)];
        let n = voxel_count(d);
        let field = Field::from_vec(1, d, std::slice::from_raw_parts(volume, n).to_vec())?;
        let m: Mask = p.0.predict(&field, prompt)?;
        ptr::copy_nonoverlapping(m.data.as_ptr(), mask, n);
        if !foreground.is_null() {
            *foreground = m.count();
        }
        Ok(())
    })
}

/// Checks an expanded vocabulary against its label schema and writes the
/// number of rule violations to `violations`; the first one is described by
/// [`vlseg_last_error`]. Documents that do not parse return an error status.
///
/// # Safety
/// `schema` and `vocab` must be NUL-terminated strings; `violations` writable.
#[no_mangle]
pub unsafe extern "C" fn vlseg_validate_vocabulary(
    schema: *const c_char,
    vocab: *const c_char,
    violations: *mut usize,
) -> VlsegStatus {
    let mut first = None;
    let status = guard(|| {
        out_ptr(violations, "violations")?;
        let schema = LabelSchema::parse(text(schema, "schema")?)?;
        let vocab = ExpandedVocabulary::parse(text(vocab, "vocab")?)?;
        let v = validate_expansion(&schema, &vocab);
        *violations = v.len();
        first = v.first().map(|v| format!("{} {}: {}", v.rule_id.id(), v.key, v.message));
        Ok(())
    });
    if let Some(msg) = first {
        set_error(msg);
    }
    status
}

/// Parses a conflict-record document; `has_conflict` receives 0 or 1.
///
/// # Safety
/// `doc` must be a NUL-terminated string; `has_conflict` writable.
#[no_mangle]
pub unsafe extern "C" fn vlseg_check_conflict_record(doc: *const c_char, has_conflict: *mut i32) -> VlsegStatus {
    guard(|| {
        out_ptr(has_conflict, "has_conflict")?;
        let r = ConflictRecord::parse(text(doc, "doc")?)?;
        *has_conflict = r.has_conflict as i32;
        Ok(())
    })
}
