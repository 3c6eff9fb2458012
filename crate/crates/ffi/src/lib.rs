//! C ABI over the projection operator, the privacy accountant and the wire
//! codec.
//!
//! Every fallible function returns a [`FedrpStatus`]. On failure a message is
//! kept per thread and can be copied out with [`fedrp_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fedrp::privacy::{self, FedRpBudget, GaussianBudget};
use fedrp::projection::{ConsensusMap, ProjectionSpec, Projector};
use fedrp::transport::{self, MsgType, WireMessage, HEADER_LEN};
use fedrp::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedrpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Decode = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Fixed-size frame header as seen by C callers.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FedrpFrameHeader {
    pub msg_type: u8,
    pub round: u32,
    pub client_id: u32,
    pub payload_len: u32,
}

/// Opaque projection operator.
pub struct FedrpProjection {
    inner: Projector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: FedrpStatus, msg: impl Into<String>) -> FedrpStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> FedrpStatus {
    let status = match e {
        Error::DimensionMismatch { .. } => FedrpStatus::DimensionMismatch,
        Error::Decode(_) => FedrpStatus::Decode,
        _ => FedrpStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> FedrpStatus) -> FedrpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FedrpStatus::Panic, "internal panic"),
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(p, len))
    }
}

unsafe fn output<'a, T>(p: *mut T, len: usize) -> Option<&'a mut [T]> {
    if len == 0 {
        Some(&mut [])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts_mut(p, len))
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedrp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length without
/// the terminator, or 0 if there is no message.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn fedrp_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && cap > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates the `m x n` projection for `round_seed`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fedrp_projection_new(
    round_seed: u64,
    m: usize,
    n: usize,
    out: *mut *mut FedrpProjection,
) -> FedrpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FedrpStatus::NullPointer, "out is null");
        }
        match ProjectionSpec::new(round_seed, m, n) {
            Ok(spec) => {
                let h = Box::new(FedrpProjection {
                    inner: Projector::new(spec),
                });
                *out = Box::into_raw(h);
                FedrpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or come from [`fedrp_projection_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedrp_projection_free(h: *mut FedrpProjection) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Writes the output and input dimensions of the projection.
///
/// # Safety
/// `h` must be a live handle; `m` and `n` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fedrp_projection_dims(h: *const FedrpProjection, m: *mut usize, n: *mut usize) -> FedrpStatus {
    guarded(|| {
        let Some(h) = h.as_ref() else {
            return fail(FedrpStatus::NullPointer, "handle is null");
        };
        if m.is_null() || n.is_null() {
            return fail(FedrpStatus::NullPointer, "output pointer is null");
        }
        *m = h.inner.output_dim();
        *n = h.inner.input_dim();
        FedrpStatus::Ok
    })
}

unsafe fn apply_map(
    h: *const FedrpProjection,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
    adjoint: bool,
) -> FedrpStatus {
    guarded(|| {
        let Some(h) = h.as_ref() else {
            return fail(FedrpStatus::NullPointer, "handle is null");
        };
        let (want_in, want_out) = if adjoint {
            (h.inner.output_dim(), h.inner.input_dim())
        } else {
            (h.inner.input_dim(), h.inner.output_dim())
        };
        if x_len != want_in {
            return from_error(Error::dims("input", want_in, x_len));
        }
        if out_len != want_out {
            return from_error(Error::dims("output", want_out, out_len));
        }
        let (Some(x), Some(out)) = (input(x, x_len), output(out, out_len)) else {
            return fail(FedrpStatus::NullPointer, "vector pointer is null");
        };
        let y = if adjoint { h.inner.adjoint(x) } else { h.inner.apply(x) };
        out.copy_from_slice(&y);
        FedrpStatus::Ok
    })
}

/// `out = A w`.
///
/// # Safety
/// `w` must be valid for `w_len` reads and `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn fedrp_projection_apply(
    h: *const FedrpProjection,
    w: *const f64,
    w_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FedrpStatus {
    apply_map(h, w, w_len, out, out_len, false)
}

/// `out = Aᵀ v`.
///
/// # Safety
/// `v` must be valid for `v_len` reads and `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn fedrp_projection_adjoint(
    h: *const FedrpProjection,
    v: *const f64,
    v_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FedrpStatus {
    apply_map(h, v, v_len, out, out_len, true)
}

/// Per-round epsilon of the projected protocol.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn fedrp_epsilon_projected(
    delta_sensitivity: f64,
    sigma_min: f64,
    m: usize,
    delta: f64,
    out: *mut f64,
) -> FedrpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FedrpStatus::NullPointer, "out is null");
        }
        let b = FedRpBudget {
            delta_sensitivity,
            sigma_min,
            m,
            delta,
            rounds: 1,
        };
        match privacy::epsilon_fedrp(&b) {
            Ok(e) => {
                *out = e;
                FedrpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Epsilon of the classic Gaussian mechanism.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn fedrp_epsilon_gaussian(
    delta_sensitivity: f64,
    sigma: f64,
    delta: f64,
    out: *mut f64,
) -> FedrpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FedrpStatus::NullPointer, "out is null");
        }
        let b = GaussianBudget {
            delta_sensitivity,
            sigma,
            delta,
        };
        match privacy::epsilon_gaussian(&b) {
            Ok(e) => {
                *out = e;
                FedrpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Frames `values` as a vector message. `written` receives the frame length;
/// if `cap` is too small nothing is copied, `written` still receives the
/// required length and `BufferTooSmall` is returned.
///
/// # Safety
/// `values` must be valid for `len` reads, `buf` for `cap` writes, and
/// `written` for a write.
#[no_mangle]
pub unsafe extern "C" fn fedrp_encode_vector(
    msg_type: u8,
    round: u32,
    client_id: u32,
    values: *const f64,
    len: usize,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> FedrpStatus {
    guarded(|| {
        if written.is_null() {
            return fail(FedrpStatus::NullPointer, "written is null");
        }
        let Some(t) = MsgType::from_byte(msg_type) else {
            return fail(FedrpStatus::InvalidArgument, format!("unknown message type {msg_type}"));
        };
        let Some(values) = input(values, len) else {
            return fail(FedrpStatus::NullPointer, "values is null");
        };
        let frame = match WireMessage::vector(t, round, client_id, values).and_then(|m| transport::encode(&m)) {
            Ok(f) => f,
            Err(e) => return from_error(e),
        };
        *written = frame.len();
        if frame.len() > cap {
            return fail(
                FedrpStatus::BufferTooSmall,
                format!("frame needs {} bytes, buffer has {cap}", frame.len()),
            );
        }
        let Some(out) = output(buf, frame.len()) else {
            return fail(FedrpStatus::NullPointer, "buf is null");
        };
        out.copy_from_slice(&frame);
        FedrpStatus::Ok
    })
}

/// Decodes a frame header without touching the payload.
///
/// # Safety
/// `bytes` must be valid for `len` reads and `header` for a write.
#[no_mangle]
pub unsafe extern "C" fn fedrp_decode_header(bytes: *const u8, len: usize, header: *mut FedrpFrameHeader) -> FedrpStatus {
    guarded(|| {
        if header.is_null() {
            return fail(FedrpStatus::NullPointer, "header is null");
        }
        let Some(bytes) = input(bytes, len) else {
            return fail(FedrpStatus::NullPointer, "bytes is null");
        };
        if bytes.len() < HEADER_LEN {
            return from_error(
                transport::DecodeError::Truncated {
                    needed: HEADER_LEN,
                    available: bytes.len(),
                }
                .into(),
            );
        }
        let le = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        if MsgType::from_byte(bytes[0]).is_none() {
            return from_error(transport::DecodeError::UnknownType(bytes[0]).into());
        }
        *header = FedrpFrameHeader {
            msg_type: bytes[0],
            round: le(1),
            client_id: le(5),
            payload_len: le(9),
        };
        FedrpStatus::Ok
    })
}

/// Decodes a whole vector frame. `count` receives the number of scalars; if
/// `cap` is too small nothing is copied and `BufferTooSmall` is returned.
///
/// # Safety
/// `bytes` must be valid for `len` reads, `values` for `cap` writes, and
/// `header` and `count` for writes.
#[no_mangle]
pub unsafe extern "C" fn fedrp_decode_vector(
    bytes: *const u8,
    len: usize,
    header: *mut FedrpFrameHeader,
    values: *mut f64,
    cap: usize,
    count: *mut usize,
) -> FedrpStatus {
    guarded(|| {
        if header.is_null() || count.is_null() {
            return fail(FedrpStatus::NullPointer, "output pointer is null");
        }
        let Some(bytes) = input(bytes, len) else {
            return fail(FedrpStatus::NullPointer, "bytes is null");
        };
        let msg = match transport::decode(bytes) {
            Ok(m) => m,
            Err(e) => return from_error(e.into()),
        };
        let v = match msg.to_vector() {
            Ok(v) => v,
            Err(e) => return from_error(e.into()),
        };
        *header = FedrpFrameHeader {
            msg_type: msg.msg_type as u8,
            round: msg.round,
            client_id: msg.client_id,
            payload_len: msg.payload.len() as u32,
        };
        *count = v.len();
        if v.len() > cap {
            return fail(
                FedrpStatus::BufferTooSmall,
                format!("frame holds {} scalars, buffer has {cap}", v.len()),
            );
        }
        let Some(out) = output(values, v.len()) else {
            return fail(FedrpStatus::NullPointer, "values is null");
        };
        out.copy_from_slice(&v);
        FedrpStatus::Ok
    })
}
