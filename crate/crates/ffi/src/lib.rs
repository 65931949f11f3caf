//! C interface to the bandcontrol library.
//!
//! Every function returns a [`BcStatus`]; results come back through out
//! pointers. Handles are opaque and must be released with their `_free`
//! function. After a failure, `bc_last_error` describes it until the next
//! call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bandcontrol::metrics::evaluate_pair;
use bandcontrol::neural::{generate, BandControlNet, GenerateOptions, Sample};
use bandcontrol::score::{compress_instruments, parse_midi, quantize_song, write_midi, Song};
use bandcontrol::tokenizer::{detokenize, tokenize_song, TrackTokenSeqs, Vocab};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Tokenize = 4,
    Model = 5,
    Metrics = 6,
    Io = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// A song in the six-class, quantized form.
pub struct BcSong(Song);

/// Per-track token sequences of a song under the default vocabulary.
pub struct BcTokens(TrackTokenSeqs);

/// A trained generator.
pub struct BcModel(BandControlNet);

/// Fidelity metrics of a cover against its reference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct BcMetrics {
    pub nde: f64,
    pub oap: f64,
    pub oad: f64,
    pub oav: f64,
    pub ccs: f64,
    pub gcs: f64,
    pub ca: f64,
    pub ssmd: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type FfiResult<T> = Result<T, (BcStatus, String)>;

/// Run `f`, turning errors and panics into a status plus the thread's last
/// error message.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> BcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BcStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BcStatus::Panic
        }
    }
}

fn fail<E: std::fmt::Display>(status: BcStatus) -> impl FnOnce(E) -> (BcStatus, String) {
    move |e| (status, e.to_string())
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or((BcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<T>(p: *mut T, value: T, what: &str) -> FfiResult<()> {
    if p.is_null() {
        return Err((BcStatus::NullPointer, format!("{what} is null")));
    }
    p.write(value);
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((BcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(fail(BcStatus::InvalidUtf8))
}

unsafe fn bytes<'a>(p: *const u8, len: usize) -> FfiResult<&'a [u8]> {
    if p.is_null() {
        return Err((BcStatus::NullPointer, "data is null".into()));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn bc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn bc_status_name(status: BcStatus) -> *const c_char {
    let s: &'static CStr = match status {
        BcStatus::Ok => c"ok",
        BcStatus::NullPointer => c"null pointer",
        BcStatus::InvalidUtf8 => c"invalid UTF-8",
        BcStatus::Parse => c"parse error",
        BcStatus::Tokenize => c"tokenization error",
        BcStatus::Model => c"model error",
        BcStatus::Metrics => c"metrics error",
        BcStatus::Io => c"I/O error",
        BcStatus::OutOfRange => c"index out of range",
        BcStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Parse the line-oriented song text format.
///
/// # Safety
/// `text` must be a NUL-terminated string; `song` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_song_from_text(text: *const c_char, song: *mut *mut BcSong) -> BcStatus {
    guard(|| {
        let s = Song::from_text(c_str(text, "text")?).map_err(fail(BcStatus::Parse))?;
        out(song, boxed(BcSong(s)), "song")
    })
}

/// Parse a Standard MIDI File, then quantize it and compress its tracks to
/// the six instrument classes.
///
/// # Safety
/// `data` must point to `len` readable bytes; `song` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_song_from_midi(data: *const u8, len: usize, song: *mut *mut BcSong) -> BcStatus {
    guard(|| {
        let raw = parse_midi(bytes(data, len)?).map_err(fail(BcStatus::Parse))?;
        let s = compress_instruments(&raw).map_err(fail(BcStatus::Parse))?;
        out(song, boxed(BcSong(quantize_song(&s))), "song")
    })
}

/// # Safety
/// `song` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn bc_song_free(song: *mut BcSong) {
    if !song.is_null() {
        drop(Box::from_raw(song));
    }
}

/// # Safety
/// `song` must be a live handle; `n_bars` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_song_n_bars(song: *const BcSong, n_bars: *mut usize) -> BcStatus {
    guard(|| out(n_bars, deref(song, "song")?.0.n_bars, "n_bars"))
}

/// # Safety
/// `song` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_song_note_count(song: *const BcSong, count: *mut usize) -> BcStatus {
    guard(|| out(count, deref(song, "song")?.0.note_count(), "count"))
}

/// Song text; release it with `bc_string_free`.
///
/// # Safety
/// `song` must be a live handle; `text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_song_to_text(song: *const BcSong, text: *mut *mut c_char) -> BcStatus {
    guard(|| {
        let s = CString::new(deref(song, "song")?.0.to_text()).map_err(fail(BcStatus::Parse))?;
        out(text, s.into_raw(), "text")
    })
}

/// Standard MIDI File bytes; release them with `bc_bytes_free`.
///
/// # Safety
/// `song` must be a live handle; `data` and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_song_to_midi(song: *const BcSong, data: *mut *mut u8, len: *mut usize) -> BcStatus {
    guard(|| {
        let bytes = write_midi(&deref(song, "song")?.0).into_boxed_slice();
        out(len, bytes.len(), "len")?;
        out(data, Box::into_raw(bytes).cast::<u8>(), "data")
    })
}

/// # Safety
/// `text` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn bc_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// # Safety
/// `data` and `len` must be exactly as returned by this library.
#[no_mangle]
pub unsafe extern "C" fn bc_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// # Safety
/// `song` must be a live handle; `tokens` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_tokenize(song: *const BcSong, tokens: *mut *mut BcTokens) -> BcStatus {
    guard(|| {
        let seqs = tokenize_song(&deref(song, "song")?.0, &Vocab::default_vocab()).map_err(fail(BcStatus::Tokenize))?;
        out(tokens, boxed(BcTokens(seqs)), "tokens")
    })
}

/// # Safety
/// `tokens` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn bc_tokens_free(tokens: *mut BcTokens) {
    if !tokens.is_null() {
        drop(Box::from_raw(tokens));
    }
}

/// # Safety
/// `tokens` must be a live handle; `n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_tokens_n_tracks(tokens: *const BcTokens, n: *mut usize) -> BcStatus {
    guard(|| out(n, deref(tokens, "tokens")?.0.n_tracks(), "n"))
}

/// Borrow the unpadded ids of one track. The pointer stays valid while the
/// handle lives.
///
/// # Safety
/// `tokens` must be a live handle; `ids` and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_tokens_track(tokens: *const BcTokens, track: usize, ids: *mut *const u32, len: *mut usize) -> BcStatus {
    guard(|| {
        let t = &deref(tokens, "tokens")?.0;
        if track >= t.n_tracks() {
            return Err((BcStatus::OutOfRange, format!("track {track} of {}", t.n_tracks())));
        }
        let seq = t.unpadded(track);
        out(len, seq.len(), "len")?;
        out(ids, seq.as_ptr(), "ids")
    })
}

/// # Safety
/// `tokens` must be a live handle; `song` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_detokenize(tokens: *const BcTokens, song: *mut *mut BcSong) -> BcStatus {
    guard(|| {
        let s = detokenize(&deref(tokens, "tokens")?.0, &Vocab::default_vocab()).map_err(fail(BcStatus::Tokenize))?;
        out(song, boxed(BcSong(s)), "song")
    })
}

/// Load a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_model_load(path: *const c_char, model: *mut *mut BcModel) -> BcStatus {
    guard(|| {
        let bytes = std::fs::read(c_str(path, "path")?).map_err(fail(BcStatus::Io))?;
        let m = BandControlNet::load(&mut bytes.as_slice()).map_err(fail(BcStatus::Model))?;
        out(model, boxed(BcModel(m)), "model")
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn bc_model_free(model: *mut BcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generate a piece steered by the expert features of `reference`, with the
/// same instruments and bar count. `max_len` of 0 uses the model limit.
///
/// # Safety
/// `model` and `reference` must be live handles; `song` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_generate(
    model: *const BcModel,
    reference: *const BcSong,
    seed: u64,
    max_len: usize,
    song: *mut *mut BcSong,
) -> BcStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let vocab = Vocab::default_vocab();
        if m.config.vocab_size != vocab.size() {
            return Err((BcStatus::Model, "models trained with BPE merges are not supported here".into()));
        }
        let sample = Sample::from_song(&deref(reference, "reference")?.0, &vocab).map_err(fail(BcStatus::Tokenize))?;
        let opts = GenerateOptions { seed, max_len: (max_len > 0).then_some(max_len), ..Default::default() };
        let g = generate(m, &sample.grid, &sample.instruments, &vocab, None, &opts).map_err(fail(BcStatus::Model))?;
        let s = detokenize(&g.seqs, &vocab).map_err(fail(BcStatus::Tokenize))?;
        out(song, boxed(BcSong(s)), "song")
    })
}

/// # Safety
/// `reference` and `cover` must be live handles; `metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_evaluate(reference: *const BcSong, cover: *const BcSong, metrics: *mut BcMetrics) -> BcStatus {
    guard(|| {
        let r = evaluate_pair(&deref(reference, "reference")?.0, &deref(cover, "cover")?.0, None).map_err(fail(BcStatus::Metrics))?;
        let m = BcMetrics { nde: r.nde, oap: r.oap, oad: r.oad, oav: r.oav, ccs: r.ccs, gcs: r.gcs, ca: r.ca, ssmd: r.ssmd };
        out(metrics, m, "metrics")
    })
}
