//! C ABI over `cirlab`.
//!
//! Every function returns a [`CirlabStatus`]. On failure the message is kept
//! per thread and can be read with [`cirlab_last_error`]. Stores are opaque
//! handles released with [`cirlab_store_free`]. Token data is passed as
//! row-major buffers of `n * p * d` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cirlab::loss::{self, Batch, CollapseConfig};
use cirlab::maxsim::{maxsim, maxsim_matrix_threads};
use cirlab::tokens::{synth_embeddings, EmbeddingStore, SynthSpec, TokenMatrix};
use cirlab::{load_embedding_store, save_embedding_store, Error};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirlabStatus {
    CirlabOk = 0,
    CirlabErrNullPointer = 1,
    CirlabErrInvalidArgument = 2,
    CirlabErrIo = 3,
    CirlabErrFormat = 4,
    CirlabErrZeroNorm = 5,
    CirlabErrTie = 6,
    CirlabErrNonBijective = 7,
    CirlabErrBufferTooSmall = 8,
    CirlabErrPanic = 9,
}

/// Opaque embedding store.
pub struct CirlabStore {
    inner: EmbeddingStore,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CirlabBoundReport {
    pub loss_maxsim: f64,
    pub loss_standard: f64,
    pub gap: f64,
    pub p1: f64,
    pub p2: f64,
    pub bound: f64,
    pub log_bound: f64,
    pub assumption_holds: bool,
    pub proposition_ok: bool,
    pub corollary_ok: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirlabCollapseConfig {
    pub m: usize,
    pub p: usize,
    pub d: usize,
    pub tau: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub tie_v_to_u: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CirlabCollapseResult {
    pub final_objective: f64,
    pub etf_error: f64,
    pub alignment_error: f64,
    /// Objective values available (`steps + 1`), whether or not they fit
    /// in the caller's trace buffer.
    pub trace_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Fail {
    Null(&'static str),
    Lib(Error),
    Buffer { need: usize, have: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

impl Fail {
    fn status(&self) -> CirlabStatus {
        match self {
            Fail::Null(_) => CirlabStatus::CirlabErrNullPointer,
            Fail::Buffer { .. } => CirlabStatus::CirlabErrBufferTooSmall,
            Fail::Lib(e) => match e.root() {
                Error::Io { .. } => CirlabStatus::CirlabErrIo,
                Error::Format { .. } => CirlabStatus::CirlabErrFormat,
                Error::ZeroNormToken { .. } => CirlabStatus::CirlabErrZeroNorm,
                Error::TieDetected { .. } => CirlabStatus::CirlabErrTie,
                Error::NonBijectiveSigma { .. } => CirlabStatus::CirlabErrNonBijective,
                _ => CirlabStatus::CirlabErrInvalidArgument,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Fail::Null(what) => format!("NullPointer: {what} is null"),
            Fail::Buffer { need, have } => format!("BufferTooSmall: need {need} values, got {have}"),
            Fail::Lib(e) => format!("{}: {e}", e.kind()),
        }
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CirlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CirlabStatus::CirlabOk,
        Ok(Err(fail)) => {
            set_last_error(fail.message());
            fail.status()
        }
        Err(_) => {
            set_last_error("Panic: internal error".into());
            CirlabStatus::CirlabErrPanic
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    nonnull(path, "path")?;
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidConfig("path is not UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

fn checked_len(parts: &[usize]) -> Result<usize, Fail> {
    parts
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| Fail::Lib(Error::InvalidConfig("shape overflows".into())))
}

/// Splits a row-major `n * p * d` buffer into normalized f64 stacks.
unsafe fn stacks(
    data: *const f64,
    n: usize,
    p: usize,
    d: usize,
    what: &'static str,
) -> Result<Vec<TokenMatrix<f64>>, Fail> {
    nonnull(data, what)?;
    let len = checked_len(&[n, p, d])?;
    if len == 0 {
        return Err(Fail::Lib(Error::InvalidBatch(format!("empty shape {n}x{p}x{d}"))));
    }
    let all = std::slice::from_raw_parts(data, len);
    all.chunks(p * d)
        .map(|chunk| Ok(TokenMatrix::from_flat(p, d, chunk.to_vec())?))
        .collect()
}

unsafe fn batch(q: *const f64, t: *const f64, n: usize, p: usize, d: usize, tau: f64) -> Result<Batch, Fail> {
    let queries = stacks(q, n, p, d, "queries")?;
    let targets = stacks(t, n, p, d, "targets")?;
    Ok(Batch::new(queries, targets, tau)?)
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    nonnull(out, "out")?;
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cirlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// including the NUL, or 0 when no error is recorded.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cirlab_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Defaults of the collapse lab.
#[no_mangle]
pub extern "C" fn cirlab_collapse_config_default() -> CirlabCollapseConfig {
    let c = CollapseConfig::default();
    CirlabCollapseConfig {
        m: c.m,
        p: c.p,
        d: c.d,
        tau: c.tau,
        steps: c.steps,
        step_size: c.step_size,
        seed: c.seed,
        tie_v_to_u: c.tie_v_to_u,
    }
}

fn boxed(store: EmbeddingStore) -> *mut CirlabStore {
    Box::into_raw(Box::new(CirlabStore { inner: store }))
}

/// Loads a TEMB file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_load(path: *const c_char, out: *mut *mut CirlabStore) -> CirlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        let store = load_embedding_store(path_arg(path)?)?;
        write_out(out, boxed(store))
    })
}

/// Writes a TEMB file.
///
/// # Safety
/// `store` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_save(store: *const CirlabStore, path: *const c_char) -> CirlabStatus {
    guard(|| {
        nonnull(store, "store")?;
        save_embedding_store(&(*store).inner, path_arg(path)?)?;
        Ok(())
    })
}

/// Seeded synthetic store; `clusters = 0` draws items independently.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_synth(
    n: usize,
    p: usize,
    d: usize,
    seed: u64,
    clusters: usize,
    noise: f64,
    out: *mut *mut CirlabStore,
) -> CirlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        let spec = SynthSpec {
            n,
            p,
            d,
            seed,
            cluster_count: (clusters > 0).then_some(clusters),
            noise_scale: noise,
        };
        write_out(out, boxed(synth_embeddings(&spec)?))
    })
}

/// Builds a store from `n * p * d` floats. `ids` may be null, in which case
/// items are named by index; otherwise it holds `n` NUL-terminated strings.
///
/// # Safety
/// `data` must hold `n * p * d` floats; `ids` must be null or hold `n`
/// valid strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_from_f32(
    n: usize,
    p: usize,
    d: usize,
    data: *const f32,
    ids: *const *const c_char,
    out: *mut *mut CirlabStore,
) -> CirlabStatus {
    guard(|| {
        nonnull(out, "out")?;
        nonnull(data, "data")?;
        let len = checked_len(&[n, p, d])?;
        if len == 0 {
            return Err(Fail::Lib(Error::InvalidStore(format!("empty shape {n}x{p}x{d}"))));
        }
        let values = std::slice::from_raw_parts(data, len);
        let names: Vec<String> = if ids.is_null() {
            (0..n).map(|i| i.to_string()).collect()
        } else {
            (0..n)
                .map(|i| {
                    let s = *ids.add(i);
                    nonnull(s, "id")?;
                    Ok(CStr::from_ptr(s).to_string_lossy().into_owned())
                })
                .collect::<Result<_, Fail>>()?
        };
        let matrices = values
            .chunks(p * d)
            .map(|c| TokenMatrix::from_flat(p, d, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        write_out(out, boxed(EmbeddingStore::new(names, matrices)?))
    })
}

/// Releases a store. Null is ignored.
///
/// # Safety
/// `store` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_free(store: *mut CirlabStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Shape of a store.
///
/// # Safety
/// `store` must be a valid handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_shape(
    store: *const CirlabStore,
    n: *mut usize,
    p: *mut usize,
    d: *mut usize,
) -> CirlabStatus {
    guard(|| {
        nonnull(store, "store")?;
        let s = &(*store).inner;
        write_out(n, s.len())?;
        write_out(p, s.tokens())?;
        write_out(d, s.dim())
    })
}

/// Copies item `index`'s id into `buf` with a trailing NUL. `needed`
/// receives the byte count including the NUL.
///
/// # Safety
/// `store` must be valid; `buf` must hold `cap` bytes; `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn cirlab_store_id(
    store: *const CirlabStore,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> CirlabStatus {
    guard(|| {
        nonnull(store, "store")?;
        let s = &(*store).inner;
        if index >= s.len() {
            return Err(Fail::Lib(Error::InvalidStore(format!(
                "index {index} out of {} items",
                s.len()
            ))));
        }
        let id = s.ids()[index].as_bytes();
        write_out(needed, id.len() + 1)?;
        if cap < id.len() + 1 {
            return Err(Fail::Buffer {
                need: id.len() + 1,
                have: cap,
            });
        }
        nonnull(buf, "buf")?;
        ptr::copy_nonoverlapping(id.as_ptr().cast(), buf, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// MaxSim of two token stacks (`pa × d` and `pb × d` floats). Rows are
/// normalized first.
///
/// # Safety
/// `a` and `b` must hold the stated number of floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cirlab_maxsim(
    a: *const f32,
    pa: usize,
    b: *const f32,
    pb: usize,
    d: usize,
    out: *mut f64,
) -> CirlabStatus {
    guard(|| {
        nonnull(a, "a")?;
        nonnull(b, "b")?;
        let ma = TokenMatrix::from_flat(pa, d, std::slice::from_raw_parts(a, checked_len(&[pa, d])?).to_vec())?;
        let mb = TokenMatrix::from_flat(pb, d, std::slice::from_raw_parts(b, checked_len(&[pb, d])?).to_vec())?;
        write_out(out, maxsim(&ma.normalized()?, &mb.normalized()?)?)
    })
}

/// Row-major `rows × cols` MaxSim scores into `out`, which must hold at
/// least `queries.n * candidates.n` values. `threads = 0` uses every core.
///
/// # Safety
/// Handles must be valid; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn cirlab_score_matrix(
    queries: *const CirlabStore,
    candidates: *const CirlabStore,
    threads: usize,
    out: *mut f64,
    cap: usize,
) -> CirlabStatus {
    guard(|| {
        nonnull(queries, "queries")?;
        nonnull(candidates, "candidates")?;
        nonnull(out, "out")?;
        let (q, c) = (&(*queries).inner, &(*candidates).inner);
        let need = checked_len(&[q.len(), c.len()])?;
        if cap < need {
            return Err(Fail::Buffer { need, have: cap });
        }
        let qn = if q.is_normalized() { q.clone() } else { q.normalized()? };
        let cn = if c.is_normalized() { c.clone() } else { c.normalized()? };
        let scores = maxsim_matrix_threads(&qn, &cn, threads)?;
        ptr::copy_nonoverlapping(scores.values().as_ptr(), out, need);
        Ok(())
    })
}

/// MaxSim InfoNCE objective of `n` query/target pairs.
///
/// # Safety
/// `queries` and `targets` must each hold `n * p * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn cirlab_infonce(
    queries: *const f64,
    targets: *const f64,
    n: usize,
    p: usize,
    d: usize,
    tau: f64,
    out: *mut f64,
) -> CirlabStatus {
    guard(|| {
        let b = batch(queries, targets, n, p, d, tau)?;
        write_out(out, loss::infonce_maxsim(&b))
    })
}

/// Gradient of the objective with respect to the raw inputs, written to
/// `grad_queries` and `grad_targets` (`n * p * d` doubles each).
///
/// # Safety
/// All four buffers must hold `n * p * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn cirlab_infonce_grad(
    queries: *const f64,
    targets: *const f64,
    n: usize,
    p: usize,
    d: usize,
    tau: f64,
    grad_queries: *mut f64,
    grad_targets: *mut f64,
) -> CirlabStatus {
    guard(|| {
        nonnull(grad_queries, "grad_queries")?;
        nonnull(grad_targets, "grad_targets")?;
        let raw_q = stacks(queries, n, p, d, "queries")?;
        let raw_t = stacks(targets, n, p, d, "targets")?;
        let b = Batch::new(raw_q.clone(), raw_t.clone(), tau)?;
        let g = loss::infonce_maxsim_grad(&b)?;
        // The library gradient is taken at unit rows; rescale by 1/‖x‖.
        let emit = |raw: &[TokenMatrix<f64>], grads: &[Vec<f64>], dst: *mut f64| {
            let mut k = 0;
            for (m, gm) in raw.iter().zip(grads) {
                for (s, row) in m.rows().enumerate() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for j in 0..d {
                        dst.add(k).write(gm[s * d + j] / norm);
                        k += 1;
                    }
                }
            }
        };
        emit(&raw_q, &g.queries, grad_queries);
        emit(&raw_t, &g.targets, grad_targets);
        Ok(())
    })
}

/// Evaluates both objectives and the bound on one batch.
///
/// # Safety
/// `queries` and `targets` must each hold `n * p * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn cirlab_verify_bounds(
    queries: *const f64,
    targets: *const f64,
    n: usize,
    p: usize,
    d: usize,
    tau: f64,
    out: *mut CirlabBoundReport,
) -> CirlabStatus {
    guard(|| {
        let r = loss::verify_bounds(&batch(queries, targets, n, p, d, tau)?);
        write_out(
            out,
            CirlabBoundReport {
                loss_maxsim: r.loss_maxsim,
                loss_standard: r.loss_standard,
                gap: r.gap,
                p1: r.p1,
                p2: r.p2,
                bound: r.bound,
                log_bound: r.log_bound,
                assumption_holds: r.assumption_holds,
                proposition_ok: r.proposition_ok,
                corollary_ok: r.corollary_ok,
            },
        )
    })
}

/// Runs the collapse lab. The first `min(trace_cap, steps + 1)` objective
/// values are written to `trace` when it is non-null.
///
/// # Safety
/// `cfg` readable, `out` writable, `trace` null or `trace_cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn cirlab_collapse(
    cfg: *const CirlabCollapseConfig,
    trace: *mut f64,
    trace_cap: usize,
    out: *mut CirlabCollapseResult,
) -> CirlabStatus {
    guard(|| {
        nonnull(cfg, "cfg")?;
        nonnull(out, "out")?;
        let c = &*cfg;
        let r = loss::collapse_lab(&CollapseConfig {
            m: c.m,
            p: c.p,
            d: c.d,
            tau: c.tau,
            steps: c.steps,
            step_size: c.step_size,
            seed: c.seed,
            tie_v_to_u: c.tie_v_to_u,
        })?;
        if !trace.is_null() {
            for (k, row) in r.objective_trace.iter().take(trace_cap).enumerate() {
                trace.add(k).write(row.objective);
            }
        }
        write_out(
            out,
            CirlabCollapseResult {
                final_objective: r.final_objective,
                etf_error: r.etf_error,
                alignment_error: r.alignment_error,
                trace_len: r.objective_trace.len(),
            },
        )
    })
}
