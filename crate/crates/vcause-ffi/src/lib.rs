//! C ABI over `vcause-core`.
//!
//! Handles are opaque and must be released with their `_free` function.
//! Byte outputs are returned as a [`VcBuffer`] owned by the caller and released
//! with [`vc_buffer_free`]. Every function returns a [`VcStatus`]; on failure
//! [`vc_last_error`] describes the error until the next call on the same
//! thread. Panics are caught and reported as `VC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vcause_core::accumulator::Relation;
use vcause_core::causality::{verify_bundle, CausalityQuery, Direction, ProofBundle};
use vcause_core::hashcore::{PublicKey, SecretKey};
use vcause_core::ingest::parse_line;
use vcause_core::protocol::{batches_from_bytes, batches_to_bytes, Cloud, Endpoint, EndpointConfig};
use vcause_core::provgraph::Mode;
use vcause_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed log line.
    Parse = 3,
    ClockRegression = 4,
    /// Replayed events do not reproduce a signed root.
    RootMismatch = 5,
    UnknownEntity = 6,
    UnknownEndpoint = 7,
    InvalidArgument = 8,
    /// Malformed bundle, batch stream or key.
    Decode = 9,
    /// Well-formed bundle that failed verification.
    Rejected = 10,
    Internal = 11,
    Panic = 12,
}

/// Heap bytes owned by the caller.
#[repr(C)]
pub struct VcBuffer {
    pub data: *mut u8,
    pub len: usize,
}

pub struct VcEndpoint(Endpoint);

pub struct VcCloud(Cloud);

/// Query relation: latest version at or before, or earliest at or after.
pub const VC_RELATION_LE: u8 = 0;
pub const VC_RELATION_GE: u8 = 1;
pub const VC_DIRECTION_BACKWARD: u8 = 0;
pub const VC_DIRECTION_FORWARD: u8 = 1;
pub const VC_DIRECTION_BOTH: u8 = 2;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(VcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Parse { .. } => VcStatus::Parse,
            Error::ClockRegression { .. } => VcStatus::ClockRegression,
            Error::RootMismatch(_) => VcStatus::RootMismatch,
            Error::UnknownEntity(_) => VcStatus::UnknownEntity,
            Error::UnknownEndpoint(_) => VcStatus::UnknownEndpoint,
            Error::Config(_) | Error::InvalidRange { .. } => VcStatus::InvalidArgument,
            Error::Decode(_) | Error::KeyDecode(_) | Error::SignatureDecode(_) => VcStatus::Decode,
            _ => VcStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VcStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic in vcause".into());
            VcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(VcStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(VcStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, name: &str) -> Result<&'a [u8], Fail> {
    if p.is_null() {
        if len == 0 {
            return Ok(&[]);
        }
        return Err(Fail(VcStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(VcStatus::NullArgument, format!("{name} is null")))
}

fn mode(depth: u32) -> Mode {
    if depth == 0 {
        Mode::Unsegmented
    } else {
        Mode::Segmented(depth)
    }
}

fn query(entity: &str, at: u64, relation: u8, direction: u8) -> Result<CausalityQuery, Fail> {
    let rel = match relation {
        VC_RELATION_LE => Relation::Le(at),
        VC_RELATION_GE => Relation::Ge(at),
        r => return Err(Fail(VcStatus::InvalidArgument, format!("relation {r}"))),
    };
    let dir = match direction {
        VC_DIRECTION_BACKWARD => Direction::Backward,
        VC_DIRECTION_FORWARD => Direction::Forward,
        VC_DIRECTION_BOTH => Direction::Both,
        d => return Err(Fail(VcStatus::InvalidArgument, format!("direction {d}"))),
    };
    Ok(CausalityQuery::new(entity, rel, dir))
}

fn into_buffer(v: Vec<u8>, out: &mut VcBuffer) {
    let mut b = v.into_boxed_slice();
    out.len = b.len();
    out.data = b.as_mut_ptr();
    std::mem::forget(b);
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `buf` must be null or a buffer returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn vc_buffer_free(buf: *mut VcBuffer) {
    if let Some(b) = buf.as_mut() {
        if !b.data.is_null() {
            drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
        }
        b.data = ptr::null_mut();
        b.len = 0;
    }
}

/// Creates an endpoint. `depth` 0 selects unsegmented mode. `seed` is the
/// 32-byte signing key seed.
///
/// # Safety
/// `id` must be a NUL-terminated string, `seed` must point to 32 bytes and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_endpoint_new(
    id: *const c_char,
    depth: u32,
    commit_interval: u64,
    seed: *const u8,
    out: *mut *mut VcEndpoint,
) -> VcStatus {
    guard(|| {
        let id = str_arg(id, "id")?;
        let seed: [u8; 32] = bytes_arg(seed, 32, "seed")?.try_into().unwrap();
        let out = mut_arg(out, "out")?;
        let cfg = EndpointConfig { id: id.to_string(), mode: mode(depth), commit_interval };
        let ep = Endpoint::new(cfg, SecretKey::from_seed(seed))?;
        *out = Box::into_raw(Box::new(VcEndpoint(ep)));
        Ok(())
    })
}

/// # Safety
/// `ep` must be null or a handle from `vc_endpoint_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn vc_endpoint_free(ep: *mut VcEndpoint) {
    if !ep.is_null() {
        drop(Box::from_raw(ep));
    }
}

/// Writes the 32-byte verification key.
///
/// # Safety
/// `ep` must be a live handle and `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vc_endpoint_public_key(ep: *const VcEndpoint, out: *mut u8) -> VcStatus {
    guard(|| {
        let ep = ep.as_ref().ok_or_else(|| Fail(VcStatus::NullArgument, "ep is null".into()))?;
        if out.is_null() {
            return Err(Fail(VcStatus::NullArgument, "out is null".into()));
        }
        ptr::copy_nonoverlapping(ep.0.public_key().to_bytes().as_ptr(), out, 32);
        Ok(())
    })
}

/// Records one JSONL log line. Blank lines are ignored. `committed`, if not
/// null, is set to 1 when the line triggered a commitment.
///
/// # Safety
/// `ep` must be a live handle and `line` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vc_endpoint_ingest_jsonl_line(ep: *mut VcEndpoint, line: *const c_char, committed: *mut u8) -> VcStatus {
    guard(|| {
        let ep = mut_arg(ep, "ep")?;
        let line = str_arg(line, "line")?;
        let mut did = false;
        if let Some(ev) = parse_line(line, 1)? {
            did = ep.0.logger_ingest(&ev)?.is_some();
        }
        if let Some(c) = committed.as_mut() {
            *c = did as u8;
        }
        Ok(())
    })
}

/// Forces a commitment and writes its epoch.
///
/// # Safety
/// `ep` must be a live handle; `epoch` may be null.
#[no_mangle]
pub unsafe extern "C" fn vc_endpoint_commit(ep: *mut VcEndpoint, epoch: *mut u64) -> VcStatus {
    guard(|| {
        let ep = mut_arg(ep, "ep")?;
        let c = ep.0.logger_commit()?;
        if let Some(e) = epoch.as_mut() {
            *e = c.epoch;
        }
        Ok(())
    })
}

/// Moves the batches committed since the last call into `out`.
///
/// # Safety
/// `ep` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vc_endpoint_take_batches(ep: *mut VcEndpoint, out: *mut VcBuffer) -> VcStatus {
    guard(|| {
        let ep = mut_arg(ep, "ep")?;
        let out = mut_arg(out, "out")?;
        into_buffer(batches_to_bytes(&ep.0.take_batches()), out);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_cloud_new(out: *mut *mut VcCloud) -> VcStatus {
    guard(|| {
        *mut_arg(out, "out")? = Box::into_raw(Box::new(VcCloud(Cloud::new())));
        Ok(())
    })
}

/// # Safety
/// `cloud` must be null or a handle from `vc_cloud_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn vc_cloud_free(cloud: *mut VcCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Registers an endpoint; `depth` 0 selects unsegmented mode.
///
/// # Safety
/// `cloud` must be a live handle and `id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vc_cloud_register(cloud: *mut VcCloud, id: *const c_char, depth: u32) -> VcStatus {
    guard(|| {
        let cloud = mut_arg(cloud, "cloud")?;
        cloud.0.register(str_arg(id, "id")?, mode(depth))?;
        Ok(())
    })
}

/// Replays a batch stream from `vc_endpoint_take_batches`.
///
/// # Safety
/// `cloud` must be a live handle, `id` a NUL-terminated string and `data`
/// must point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vc_cloud_replay(cloud: *mut VcCloud, id: *const c_char, data: *const u8, len: usize) -> VcStatus {
    guard(|| {
        let cloud = mut_arg(cloud, "cloud")?;
        let batches = batches_from_bytes(bytes_arg(data, len, "data")?)?;
        cloud.0.cloud_replay(str_arg(id, "id")?, &batches)?;
        Ok(())
    })
}

/// Answers a query against the latest commitment and writes the bundle.
///
/// # Safety
/// `cloud` must be a live handle, `id` and `entity` NUL-terminated strings
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vc_cloud_analyze(
    cloud: *const VcCloud,
    id: *const c_char,
    entity: *const c_char,
    at: u64,
    relation: u8,
    direction: u8,
    out: *mut VcBuffer,
) -> VcStatus {
    guard(|| {
        let cloud = cloud.as_ref().ok_or_else(|| Fail(VcStatus::NullArgument, "cloud is null".into()))?;
        let q = query(str_arg(entity, "entity")?, at, relation, direction)?;
        let out = mut_arg(out, "out")?;
        let b = cloud.0.cloud_analyze(str_arg(id, "id")?, &q)?;
        into_buffer(b.to_bytes(), out);
        Ok(())
    })
}

/// Verifies a bundle against a 32-byte verification key and the query the
/// caller asked. Returns `VC_STATUS_OK` on acceptance, `VC_STATUS_REJECTED`
/// with the failing check in `vc_last_error`, or `VC_STATUS_DECODE`.
/// `provably_empty`, if not null, is set to 1 for an accepted empty answer.
///
/// # Safety
/// `vk` must point to 32 bytes, `bundle` to `len` bytes and `entity` must be
/// a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vc_verify_bundle(
    vk: *const u8,
    bundle: *const u8,
    len: usize,
    entity: *const c_char,
    at: u64,
    relation: u8,
    direction: u8,
    provably_empty: *mut u8,
) -> VcStatus {
    guard(|| {
        let vk = PublicKey::from_bytes(bytes_arg(vk, 32, "vk")?)?;
        let q = query(str_arg(entity, "entity")?, at, relation, direction)?;
        let b = ProofBundle::from_bytes(bytes_arg(bundle, len, "bundle")?)?;
        let rep = verify_bundle(&vk, &q, &b);
        if let Some(p) = provably_empty.as_mut() {
            *p = (rep.accepted() && rep.provably_empty) as u8;
        }
        match rep.first_failure {
            None => Ok(()),
            Some(f) => Err(Fail(VcStatus::Rejected, f)),
        }
    })
}
