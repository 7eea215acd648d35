//! C ABI over the abcdr library: opaque handles, integer status codes and a
//! thread-local last-error message. Every pointer argument is checked; no
//! panic crosses the boundary.

use abcdr::models::ModelConfig;
use abcdr::sampler::{generate_table, rejection_abc, SimulatorSpec};
use abcdr::selection::knn_entropy;
use abcdr::table::{Observation, ReferenceTable, SubsetMask, WeightedSample};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbcdrStatus {
    Ok = 0,
    /// A pointer was null, a length disagreed, or a value was out of domain.
    InvalidArgument = 1,
    /// The underlying computation failed; see abcdr_last_error.
    RuntimeError = 2,
    /// A panic was caught at the boundary.
    Panic = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(msg: impl Into<String>, status: AbcdrStatus) -> AbcdrStatus {
    set_error(msg);
    status
}

/// Copies the thread-local message for the most recent failing call into
/// `buf` (NUL-terminated, truncated to `len`). Returns the full message
/// length in bytes, excluding the terminator. A zero `len` or null `buf`
/// only queries the length.
#[no_mangle]
pub extern "C" fn abcdr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Opaque reference table handle.
pub struct AbcdrTable {
    inner: ReferenceTable,
}

/// Opaque weighted posterior sample handle.
pub struct AbcdrSample {
    inner: WeightedSample,
}

fn guard<F: FnOnce() -> AbcdrStatus>(f: F) -> AbcdrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail("panic caught at the FFI boundary", AbcdrStatus::Panic),
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, AbcdrStatus> {
    if p.is_null() {
        set_error("null string pointer");
        return Err(AbcdrStatus::InvalidArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        AbcdrStatus::InvalidArgument
    })
}

/// Simulates a reference table. `model_json` is the model spec as JSON, e.g.
/// `{"model_id": "gaussian-toy", "k_noise": 4}`.
///
/// # Safety
/// `model_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abcdr_table_generate(
    model_json: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut AbcdrTable,
) -> AbcdrStatus {
    guard(|| {
        if out.is_null() {
            return fail("null output pointer", AbcdrStatus::InvalidArgument);
        }
        let json = match cstr(model_json) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let model: ModelConfig = match serde_json::from_str(json) {
            Ok(m) => m,
            Err(e) => return fail(format!("model spec: {e}"), AbcdrStatus::InvalidArgument),
        };
        let spec = match SimulatorSpec::new(model, seed) {
            Ok(s) => s,
            Err(e) => return fail(e.to_string(), AbcdrStatus::InvalidArgument),
        };
        match generate_table(&spec, n) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(AbcdrTable { inner: t }));
                AbcdrStatus::Ok
            }
            Err(e) => fail(e.to_string(), AbcdrStatus::RuntimeError),
        }
    })
}

/// Loads a table previously written by the library (CSV with the
/// `param_*`/`stat_*` header convention).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abcdr_table_load_csv(
    path: *const c_char,
    out: *mut *mut AbcdrTable,
) -> AbcdrStatus {
    guard(|| {
        if out.is_null() {
            return fail("null output pointer", AbcdrStatus::InvalidArgument);
        }
        let path = match cstr(path) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match ReferenceTable::load_csv(path) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(AbcdrTable { inner: t }));
                AbcdrStatus::Ok
            }
            Err(e) => fail(e.to_string(), AbcdrStatus::RuntimeError),
        }
    })
}

/// Writes the table as CSV.
///
/// # Safety
/// `table` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn abcdr_table_save_csv(
    table: *const AbcdrTable,
    path: *const c_char,
) -> AbcdrStatus {
    guard(|| {
        let Some(t) = table.as_ref() else {
            return fail("null table handle", AbcdrStatus::InvalidArgument);
        };
        let path = match cstr(path) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match t.inner.save_csv(path) {
            Ok(()) => AbcdrStatus::Ok,
            Err(e) => fail(e.to_string(), AbcdrStatus::RuntimeError),
        }
    })
}

/// Reports (rows, parameter dimension, statistic dimension). Null outputs are
/// skipped.
///
/// # Safety
/// `table` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn abcdr_table_shape(
    table: *const AbcdrTable,
    n: *mut usize,
    q: *mut usize,
    p: *mut usize,
) -> AbcdrStatus {
    guard(|| {
        let Some(t) = table.as_ref() else {
            return fail("null table handle", AbcdrStatus::InvalidArgument);
        };
        if !n.is_null() {
            *n = t.inner.n();
        }
        if !q.is_null() {
            *q = t.inner.q();
        }
        if !p.is_null() {
            *p = t.inner.p();
        }
        AbcdrStatus::Ok
    })
}

/// Frees a table handle; null is a no-op.
///
/// # Safety
/// `table` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn abcdr_table_free(table: *mut AbcdrTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Kernel-weighted rejection over all statistics: accepts roughly
/// `acceptance_fraction * n` rows around the observed statistics (length
/// must equal the table's statistic dimension).
///
/// # Safety
/// `table` must be a live handle, `s_obs` must point to `s_obs_len` doubles
/// and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abcdr_rejection(
    table: *const AbcdrTable,
    s_obs: *const f64,
    s_obs_len: usize,
    acceptance_fraction: f64,
    out: *mut *mut AbcdrSample,
) -> AbcdrStatus {
    guard(|| {
        let Some(t) = table.as_ref() else {
            return fail("null table handle", AbcdrStatus::InvalidArgument);
        };
        if out.is_null() || s_obs.is_null() {
            return fail("null pointer argument", AbcdrStatus::InvalidArgument);
        }
        if s_obs_len != t.inner.p() {
            return fail(
                format!("s_obs has {s_obs_len} entries, table has {} statistics", t.inner.p()),
                AbcdrStatus::InvalidArgument,
            );
        }
        let obs = Observation::new(nalgebra_vec(s_obs, s_obs_len));
        let mask = SubsetMask::all(t.inner.p());
        match rejection_abc(&t.inner, &obs, &mask, acceptance_fraction) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(AbcdrSample { inner: s }));
                AbcdrStatus::Ok
            }
            Err(e) => fail(e.to_string(), AbcdrStatus::RuntimeError),
        }
    })
}

unsafe fn nalgebra_vec(p: *const f64, len: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_iterator(len, (0..len).map(|i| *p.add(i)))
}

/// Reports (accepted rows, parameter dimension). Null outputs are skipped.
///
/// # Safety
/// `sample` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn abcdr_sample_shape(
    sample: *const AbcdrSample,
    n_eff: *mut usize,
    q: *mut usize,
) -> AbcdrStatus {
    guard(|| {
        let Some(s) = sample.as_ref() else {
            return fail("null sample handle", AbcdrStatus::InvalidArgument);
        };
        if !n_eff.is_null() {
            *n_eff = s.inner.n_eff();
        }
        if !q.is_null() {
            *q = s.inner.q();
        }
        AbcdrStatus::Ok
    })
}

/// Writes the kernel-weighted posterior mean into `out` (length must equal
/// the parameter dimension).
///
/// # Safety
/// `sample` must be a live handle and `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn abcdr_sample_posterior_mean(
    sample: *const AbcdrSample,
    out: *mut f64,
    out_len: usize,
) -> AbcdrStatus {
    guard(|| {
        let Some(s) = sample.as_ref() else {
            return fail("null sample handle", AbcdrStatus::InvalidArgument);
        };
        if out.is_null() || out_len != s.inner.q() {
            return fail(
                format!("output must hold exactly {} doubles", s.inner.q()),
                AbcdrStatus::InvalidArgument,
            );
        }
        let mean = s.inner.posterior_mean();
        for i in 0..out_len {
            *out.add(i) = mean[i];
        }
        AbcdrStatus::Ok
    })
}

/// Weighted k-nearest-neighbour entropy estimate of the sample.
///
/// # Safety
/// `sample` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abcdr_sample_entropy(
    sample: *const AbcdrSample,
    k: usize,
    out: *mut f64,
) -> AbcdrStatus {
    guard(|| {
        let Some(s) = sample.as_ref() else {
            return fail("null sample handle", AbcdrStatus::InvalidArgument);
        };
        if out.is_null() {
            return fail("null output pointer", AbcdrStatus::InvalidArgument);
        }
        match knn_entropy(&s.inner, k) {
            Ok(v) => {
                *out = v;
                AbcdrStatus::Ok
            }
            Err(e) => fail(e.to_string(), AbcdrStatus::RuntimeError),
        }
    })
}

/// Frees a sample handle; null is a no-op.
///
/// # Safety
/// `sample` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn abcdr_sample_free(sample: *mut AbcdrSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}
