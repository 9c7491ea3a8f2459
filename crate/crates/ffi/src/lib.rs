//! C interface to a trained kalab run.
//!
//! Every fallible call returns a [`KalabStatus`]. On failure the message is
//! kept per thread and can be copied out with [`kalab_last_error`].
//! Output buffers follow one convention: the call always stores the required
//! element count in `*out_len` and returns `KALAB_STATUS_BUFFER_TOO_SMALL` when
//! `cap` is insufficient, leaving the buffer untouched.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use kalab::config::RunConfig;
use kalab::metrics::{parse_metrics, to_jsonl, MetricRecord};
use kalab::model::Model;
use kalab::tokenizer::EOD;
use kalab::trainer::{open_run, Setup};
use kalab::Error;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KalabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    Vocabulary = 6,
    Overlength = 7,
    BufferTooSmall = 8,
    InvalidArgument = 9,
    Metrics = 10,
    Internal = 11,
    Panic = 12,
}

/// An opened run directory: config, regenerated world and vocabulary, and
/// the loaded model weights.
pub struct KalabRun {
    cfg: RunConfig,
    setup: Setup,
    model: Model<f32>,
    step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> KalabStatus {
    match e {
        Error::Io { .. } => KalabStatus::Io,
        Error::UnknownConfigKeys(_) | Error::Config(_) | Error::InvalidPool { .. } | Error::InvalidTemplate { .. } => {
            KalabStatus::Config
        }
        Error::Checkpoint { .. } => KalabStatus::Checkpoint,
        Error::OutOfVocabulary(_) | Error::UnknownTokenId(_) => KalabStatus::Vocabulary,
        Error::Overlength { .. } => KalabStatus::Overlength,
        Error::InvalidArgument(_) | Error::OutputNotEmpty(_) => KalabStatus::InvalidArgument,
        Error::Metrics(_) | Error::Json(_) => KalabStatus::Metrics,
        _ => KalabStatus::Internal,
    }
}

enum Fail {
    Status(KalabStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type FResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FResult<()>) -> KalabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            KalabStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KalabStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(KalabStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(KalabStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn run_ref<'a>(run: *const KalabRun) -> FResult<&'a KalabRun> {
    run.as_ref().ok_or_else(|| null("run"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> FResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies `data` to `out` when it fits; always reports the needed length.
unsafe fn emit<T: Copy>(data: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> FResult<()> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = data.len();
    if data.len() > cap {
        return Err(Fail::Status(
            KalabStatus::BufferTooSmall,
            format!("buffer holds {cap}, {} needed", data.len()),
        ));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

/// Writes a NUL-terminated string; `*out_len` counts the terminator.
unsafe fn emit_str(s: &str, out: *mut c_char, cap: usize, out_len: *mut usize) -> FResult<()> {
    let mut bytes: Vec<c_char> = s.bytes().map(|b| b as c_char).collect();
    bytes.push(0);
    emit(&bytes, out, cap, out_len)
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `cap`). Returns the full length including the terminator;
/// 1 means no error is recorded.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null when `cap` is 0.
#[no_mangle]
pub unsafe extern "C" fn kalab_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if cap > 0 && !buf.is_null() {
            let n = e.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        e.len() + 1
    })
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn kalab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opens a run directory. `checkpoint` may be null to pick `final.ckpt` or
/// the latest step checkpoint. Free the handle with [`kalab_run_free`].
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kalab_run_open(dir: *const c_char, checkpoint: *const c_char, out: *mut *mut KalabRun) -> KalabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let ck = if checkpoint.is_null() {
            None
        } else {
            Some(Path::new(str_arg(checkpoint, "checkpoint")?))
        };
        let (cfg, setup, model) = open_run(Path::new(dir), ck)?;
        let step = ck
            .and_then(|p| p.file_stem()?.to_str()?.strip_prefix("step-")?.parse().ok())
            .unwrap_or(cfg.max_steps);
        *out = Box::into_raw(Box::new(KalabRun { cfg, setup, model, step }));
        Ok(())
    })
}

/// Releases a handle from [`kalab_run_open`]. Null is ignored.
///
/// # Safety
/// `run` must come from `kalab_run_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kalab_run_free(run: *mut KalabRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Vocabulary size of the run, or 0 for a null handle.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn kalab_run_vocab_size(run: *const KalabRun) -> usize {
    run.as_ref().map_or(0, |r| r.setup.vocab.len())
}

/// Maximum prompt plus generation length of the model, or 0 for null.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn kalab_run_context_len(run: *const KalabRun) -> usize {
    run.as_ref().map_or(0, |r| r.model.config.context_len)
}

/// Tokenizes whitespace-separated text into ids.
///
/// # Safety
/// `text` must be NUL-terminated; `ids` valid for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn kalab_encode(
    run: *const KalabRun,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> KalabStatus {
    guard(|| {
        let r = run_ref(run)?;
        let seq = r.setup.vocab.encode(str_arg(text, "text")?)?;
        emit(&seq.ids, ids, cap, out_len)
    })
}

/// Turns ids back into text.
///
/// # Safety
/// `ids` valid for `n` elements; `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn kalab_decode(
    run: *const KalabRun,
    ids: *const u32,
    n: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> KalabStatus {
    guard(|| {
        let r = run_ref(run)?;
        let text = r.setup.vocab.decode(slice_arg(ids, n, "ids")?)?;
        emit_str(&text, buf, cap, out_len)
    })
}

/// Greedy continuation of `prompt`; writes only the `max_new` new ids.
///
/// # Safety
/// `prompt` valid for `n` elements; `out` valid for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn kalab_generate(
    run: *const KalabRun,
    prompt: *const u32,
    n: usize,
    max_new: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> KalabStatus {
    guard(|| {
        let r = run_ref(run)?;
        let prompt = slice_arg(prompt, n, "prompt")?;
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= r.setup.vocab.len()) {
            return Err(Error::UnknownTokenId(bad).into());
        }
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        if max_new > cap {
            *out_len = max_new;
            return Err(Fail::Status(KalabStatus::BufferTooSmall, format!("buffer holds {cap}, {max_new} needed")));
        }
        let full = r.model.generate_greedy(prompt, max_new)?;
        emit(&full[n..], out, cap, out_len)
    })
}

/// Text-in, text-out greedy completion. The prompt is preceded by the
/// document separator, as during evaluation.
///
/// # Safety
/// `prompt` must be NUL-terminated; `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn kalab_complete(
    run: *const KalabRun,
    prompt: *const c_char,
    max_new: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> KalabStatus {
    guard(|| {
        let r = run_ref(run)?;
        let mut ids = vec![EOD];
        ids.extend(r.setup.vocab.encode(str_arg(prompt, "prompt")?)?.ids);
        let full = r.model.generate_greedy(&ids, max_new)?;
        let text = r.setup.vocab.decode(&full[ids.len()..])?;
        emit_str(&text, buf, cap, out_len)
    })
}

/// Runs the three evaluation scenarios on the loaded weights and returns
/// the metric records as JSON lines.
///
/// # Safety
/// `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn kalab_evaluate(run: *const KalabRun, buf: *mut c_char, cap: usize, out_len: *mut usize) -> KalabStatus {
    guard(|| {
        let r = run_ref(run)?;
        let ev = r.setup.evaluator(&r.cfg)?;
        let (report, _) = ev.evaluate(&r.model, r.step)?;
        let text = to_jsonl(&report.records(r.step, r.cfg.seed))?;
        emit_str(&text, buf, cap, out_len)
    })
}

/// Validates metric JSON lines and reports how many records they hold.
///
/// # Safety
/// `text` must be NUL-terminated; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn kalab_metrics_count(text: *const c_char, count: *mut usize) -> KalabStatus {
    guard(|| {
        if count.is_null() {
            return Err(null("count"));
        }
        let recs: Vec<MetricRecord> = parse_metrics(str_arg(text, "text")?)?;
        *count = recs.len();
        Ok(())
    })
}
