//! C ABI over the `dima` library.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`DimaStatus`];
//! on failure the message is kept per thread and read back with
//! [`dima_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dima::eval::{evaluate, EvalProtocol, MetricsReport, ProtocolKind};
use dima::model::{dual_inference, Model};
use dima::planner::Trajectory;
use dima::training::Checkpoint;
use dima::world::{load_dataset, Scene, Split, WorldError};
use dima::Error;

/// Waypoints in a planned trajectory; plans are written as `2 * DIMA_HORIZON` doubles.
pub const DIMA_HORIZON: usize = 6;

const _: () = assert!(DIMA_HORIZON == dima::world::HORIZON);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    OutOfRange = 7,
    Diverged = 8,
    Failed = 9,
    Panic = 10,
}

/// A model restored from a checkpoint.
pub struct DimaModel {
    model: Model,
}

/// Scenes loaded from a JSON-lines dataset.
pub struct DimaDataset {
    scenes: Vec<Scene>,
}

/// Aggregate planning metrics. Errors are in meters, `collision_rate` in
/// percent; all are NaN when `count` is 0.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DimaMetrics {
    pub count: usize,
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub ave_123: f64,
    pub ave_all: f64,
    pub collision_rate: f64,
}

impl From<&MetricsReport> for DimaMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            count: r.count,
            l2_1s: r.l2[0],
            l2_2s: r.l2[1],
            l2_3s: r.l2[2],
            ave_123: r.ave_123,
            ave_all: r.ave_all,
            collision_rate: r.collision_rate,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (DimaStatus, String);

fn fail(status: DimaStatus, msg: impl Into<String>) -> Failure {
    (status, msg.into())
}

fn world_status(e: &WorldError) -> DimaStatus {
    match e {
        WorldError::Io { .. } => DimaStatus::Io,
        WorldError::Parse { .. } => DimaStatus::Parse,
        WorldError::UnknownSplit(_) | WorldError::Config(_) => DimaStatus::InvalidArgument,
        _ => DimaStatus::Failed,
    }
}

fn from_error(e: Error) -> Failure {
    let status = match &e {
        Error::Io { .. } => DimaStatus::Io,
        Error::Checkpoint(_) => DimaStatus::Checkpoint,
        Error::Config(_) | Error::Vocabulary(_) => DimaStatus::InvalidArgument,
        Error::Divergence { .. } => DimaStatus::Diverged,
        Error::World(w) => world_status(w),
        _ => DimaStatus::Failed,
    };
    (status, e.to_string())
}

fn from_world(e: WorldError) -> Failure {
    (world_status(&e), e.to_string())
}

/// Runs `f`, recording any failure or panic for `dima_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DimaStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return DimaStatus::Ok,
        Ok(Err(failure)) => failure,
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (DimaStatus::Panic, format!("panic: {detail}"))
        }
    };
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(DimaStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DimaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(DimaStatus::NullArgument, format!("{what} is null")))
}

fn non_null<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(DimaStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn write_plan(traj: &Trajectory, out: *mut f64) {
    for (i, p) in traj.waypoints().iter().enumerate() {
        *out.add(2 * i) = p[0];
        *out.add(2 * i + 1) = p[1];
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dima_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length in
/// bytes, excluding the terminator, so callers can size a second attempt.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dima_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint written by `dima train` and stores a new model handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dima_model_load(path: *const c_char, out: *mut *mut DimaModel) -> DimaStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let model = Checkpoint::load(Path::new(path)).and_then(|c| c.model()).map_err(from_error)?;
        *out = Box::into_raw(Box::new(DimaModel { model }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from `dima_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dima_model_free(model: *mut DimaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Plans one scene given as a JSON object (one dataset line). Writes
/// `2 * DIMA_HORIZON` doubles, x then y per waypoint, ego frame.
///
/// # Safety
/// `scene_json` must be NUL-terminated; `out_xy` must hold `2 * DIMA_HORIZON` doubles.
#[no_mangle]
pub unsafe extern "C" fn dima_model_plan_json(model: *const DimaModel, scene_json: *const c_char, out_xy: *mut f64) -> DimaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        non_null(out_xy, "out_xy")?;
        let text = str_arg(scene_json, "scene_json")?;
        let scene: Scene = serde_json::from_str(text).map_err(|e| fail(DimaStatus::Parse, format!("scene json: {e}")))?;
        let (traj, _) = m.model.plan(&scene).map_err(from_error)?;
        write_plan(&traj, out_xy);
        Ok(())
    })
}

/// Loads a JSON-lines dataset and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dima_dataset_load(path: *const c_char, out: *mut *mut DimaDataset) -> DimaStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let scenes = load_dataset(Path::new(path)).map_err(from_world)?;
        *out = Box::into_raw(Box::new(DimaDataset { scenes }));
        Ok(())
    })
}

/// Releases a dataset handle; null is ignored.
///
/// # Safety
/// `dataset` must come from `dima_dataset_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dima_dataset_free(dataset: *mut DimaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of scenes, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dima_dataset_len(dataset: *const DimaDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.scenes.len())
}

/// Scene id at `index`.
///
/// # Safety
/// `dataset` must be a live handle and `out_id` valid.
#[no_mangle]
pub unsafe extern "C" fn dima_dataset_scene_id(dataset: *const DimaDataset, index: usize, out_id: *mut u64) -> DimaStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        non_null(out_id, "out_id")?;
        let s = d
            .scenes
            .get(index)
            .ok_or_else(|| fail(DimaStatus::OutOfRange, format!("index {index} of {} scenes", d.scenes.len())))?;
        *out_id = s.id;
        Ok(())
    })
}

/// Plans the scene at `index`. With a non-null `mllm` the plan fuses both
/// branches the same way as `dima eval --dual`.
///
/// # Safety
/// Handles must be live (`mllm` may be null); `out_xy` must hold `2 * DIMA_HORIZON` doubles.
#[no_mangle]
pub unsafe extern "C" fn dima_dataset_plan(
    model: *const DimaModel,
    mllm: *const DimaModel,
    dataset: *const DimaDataset,
    index: usize,
    out_xy: *mut f64,
) -> DimaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let d = ref_arg(dataset, "dataset")?;
        non_null(out_xy, "out_xy")?;
        let scene = d
            .scenes
            .get(index)
            .ok_or_else(|| fail(DimaStatus::OutOfRange, format!("index {index} of {} scenes", d.scenes.len())))?;
        let traj = match mllm.as_ref() {
            Some(l) => dual_inference(&m.model, &l.model, scene),
            None => m.model.plan(scene).map(|(t, _)| t),
        }
        .map_err(from_error)?;
        write_plan(&traj, out_xy);
        Ok(())
    })
}

/// Evaluates on a split (`full`, `targeted`, `longtail:<kind>`) under a
/// protocol (`standardized` or `vad`). A null `model` echoes the ground
/// truth, which checks the harness; a non-null `mllm` enables dual fusion.
///
/// # Safety
/// Strings must be NUL-terminated, handles live or null as described, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dima_evaluate(
    model: *const DimaModel,
    mllm: *const DimaModel,
    dataset: *const DimaDataset,
    split: *const c_char,
    protocol: *const c_char,
    out: *mut DimaMetrics,
) -> DimaStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        non_null(out, "out")?;
        let split: Split = str_arg(split, "split")?.parse().map_err(from_world)?;
        let kind: ProtocolKind = str_arg(protocol, "protocol")?
            .parse()
            .map_err(|e: String| fail(DimaStatus::InvalidArgument, e))?;
        let chosen: Vec<&Scene> = d.scenes.iter().filter(|s| split.contains(s)).collect();
        let name = split.to_string();
        let proto = EvalProtocol::preset(kind);
        let report = match (model.as_ref(), mllm.as_ref()) {
            (None, Some(_)) => return Err(fail(DimaStatus::NullArgument, "mllm given without a model")),
            (None, None) => evaluate(&chosen, &name, kind, proto, |s| Trajectory::new(s.ego.gt_traj.clone())),
            (Some(m), None) => evaluate(&chosen, &name, kind, proto, |s| Ok(m.model.plan(s)?.0)),
            (Some(m), Some(l)) => evaluate(&chosen, &name, kind, proto, |s| dual_inference(&m.model, &l.model, s)),
        }
        .map_err(from_error)?;
        *out = DimaMetrics::from(&report);
        Ok(())
    })
}
