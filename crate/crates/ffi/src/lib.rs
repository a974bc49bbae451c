//! C ABI over the airformer library.
//!
//! Every fallible function returns an [`AfStatus`]; on failure the message is
//! kept per thread and can be copied out with [`af_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;
use std::sync::Arc;

use airformer::dartboard::{DartboardProjection, DartboardSpec, Station, StationSet};
use airformer::data::Direction;
use airformer::eval::{mae_rmse, sudden_change_mask, SuddenChangeRule};
use airformer::model::AirFormerModel;
use airformer::numerics::Tensor;
use airformer::pipeline::{load_checkpoint, RunMetadata};
use airformer::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Dimension = 5,
    Validation = 6,
    UndefinedMetric = 7,
    Internal = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> AfStatus {
    match e {
        Error::Io { .. } => AfStatus::Io,
        Error::Checkpoint { .. } => AfStatus::Checkpoint,
        Error::Dimension { .. } => AfStatus::Dimension,
        Error::UndefinedMetric(_) => AfStatus::UndefinedMetric,
        Error::Config(_) | Error::Contract(_) => AfStatus::InvalidArgument,
        _ => AfStatus::Validation,
    }
}

struct Failure(AfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: AfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AfStatus::Internal
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(AfStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(AfStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(AfStatus::NullPointer, format!("{what} is null")));
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn af_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL, or
/// 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn af_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Trained model with its normalization statistics and station layout.
pub struct AfModel {
    model: AirFormerModel,
    meta: RunMetadata,
    projection: Arc<DartboardProjection>,
}

/// Loads a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_model_load(path: *const c_char, out: *mut *mut AfModel) -> AfStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(AfStatus::NullPointer, "path or out is null"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(AfStatus::InvalidArgument, "path is not UTF-8"))?;
        let (model, meta) = load_checkpoint(Path::new(path))?;
        let projection = Arc::new(DartboardProjection::build(&model.config.dartboard, &meta.stations)?);
        *out = Box::into_raw(Box::new(AfModel { model, meta, projection }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`af_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn af_model_free(model: *mut AfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Shape of a forecast call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AfModelDims {
    pub stations: usize,
    pub input_steps: usize,
    pub horizon: usize,
    pub measurements: usize,
    pub outputs: usize,
    pub parameters: usize,
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_model_dims(model: *const AfModel, out: *mut AfModelDims) -> AfStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(AfStatus::NullPointer, "model is null"))?;
        let c = &m.model.config;
        let dims = AfModelDims {
            stations: m.meta.stations.len(),
            input_steps: c.input_steps,
            horizon: c.horizon,
            measurements: c.measurements,
            outputs: c.outputs,
            parameters: m.model.num_parameters(),
        };
        write_out(out, dims, "out")
    })
}

/// Forecasts from one input window in original units.
///
/// `values` and `observed` are `[T, N, D]` row-major with stations in
/// checkpoint order; `observed` may be null when everything is observed,
/// and unobserved values are ignored. `out` receives `[τ, N, D_out]`.
///
/// # Safety
/// Buffers must hold the lengths given; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_model_forecast(
    model: *const AfModel,
    values: *const f64,
    observed: *const u8,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> AfStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(AfStatus::NullPointer, "model is null"))?;
        let c = &m.model.config;
        let (t, n, d, o) = (c.input_steps, m.meta.stations.len(), c.measurements, c.outputs);
        if len != t * n * d || out_len != c.horizon * n * o {
            return Err(fail(
                AfStatus::Dimension,
                format!(
                    "expected {} inputs and {} outputs, got {len} and {out_len}",
                    t * n * d,
                    c.horizon * n * o
                ),
            ));
        }
        let values = slice_in(values, len, "values")?;
        let observed = if observed.is_null() { None } else { Some(slice_in(observed, len, "observed")?) };
        let out = slice_out(out, out_len, "out")?;
        let mut x = Vec::with_capacity(2 * len);
        for row in 0..t * n {
            let seen = |k: usize| observed.is_none_or(|o| o[row * d + k] != 0);
            for k in 0..d {
                let v = values[row * d + k];
                if seen(k) && !v.is_finite() {
                    return Err(fail(AfStatus::Validation, format!("non-finite observed value at index {}", row * d + k)));
                }
                x.push(if seen(k) { m.meta.stats.apply(k, v, Direction::Forward) } else { 0.0 });
            }
            x.extend((0..d).map(|k| if seen(k) { 1.0 } else { 0.0 }));
        }
        let x = Tensor::new(vec![1, t, n, 2 * d], x)?;
        let pred = m.model.predict_batch(&x, &m.projection)?;
        for (i, (dst, &z)) in out.iter_mut().zip(pred.data()).enumerate() {
            *dst = m.meta.stats.apply(i % o, z, Direction::Inverse);
        }
        Ok(())
    })
}

/// Region partition of a station set.
pub struct AfDartboard {
    spec: DartboardSpec,
    projection: DartboardProjection,
}

/// Builds the partition for `n` stations given in degrees.
///
/// # Safety
/// `lat`, `lon` must hold `n` values, `radii_km` `n_radii` values, and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_dartboard_new(
    lat: *const f64,
    lon: *const f64,
    n: usize,
    radii_km: *const f64,
    n_radii: usize,
    n_sectors: usize,
    sector_offset_deg: f64,
    out: *mut *mut AfDartboard,
) -> AfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(AfStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let lat = slice_in(lat, n, "lat")?;
        let lon = slice_in(lon, n, "lon")?;
        let spec = DartboardSpec {
            radii_km: slice_in(radii_km, n_radii, "radii_km")?.to_vec(),
            n_sectors,
            sector_offset_deg,
        };
        let stations = StationSet::new(
            lat.iter()
                .zip(lon)
                .enumerate()
                .map(|(i, (&latitude, &longitude))| Station {
                    id: i.to_string(),
                    latitude,
                    longitude,
                })
                .collect(),
        )?;
        let projection = DartboardProjection::build(&spec, &stations)?;
        *out = Box::into_raw(Box::new(AfDartboard { spec, projection }));
        Ok(())
    })
}

/// # Safety
/// `board` must be null or a handle from [`af_dartboard_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn af_dartboard_free(board: *mut AfDartboard) {
    if !board.is_null() {
        drop(Box::from_raw(board));
    }
}

/// Number of regions `M`, or 0 for a null handle.
///
/// # Safety
/// `board` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_dartboard_num_regions(board: *const AfDartboard) -> usize {
    board.as_ref().map_or(0, |b| b.spec.num_regions())
}

/// Region of `station` relative to `query`; -1 when it lies outside.
///
/// # Safety
/// `board` must be a live handle and `region` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_dartboard_region_of(
    board: *const AfDartboard,
    query: usize,
    station: usize,
    region: *mut i64,
) -> AfStatus {
    guard(|| {
        let b = board
            .as_ref()
            .ok_or_else(|| fail(AfStatus::NullPointer, "board is null"))?;
        let n = b.projection.n_stations();
        if query >= n || station >= n {
            return Err(fail(AfStatus::InvalidArgument, format!("index outside 0..{n}")));
        }
        let r = b.projection.region_of(query, station).map_or(-1, |r| r as i64);
        write_out(region, r, "region")
    })
}

/// MAE and RMSE over entries with a nonzero mask (all entries when `mask` is null).
///
/// # Safety
/// Buffers must hold `len` values; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn af_mae_rmse(
    pred: *const f64,
    truth: *const f64,
    mask: *const u8,
    len: usize,
    mae: *mut f64,
    rmse: *mut f64,
) -> AfStatus {
    guard(|| {
        let pred = slice_in(pred, len, "pred")?;
        let truth = slice_in(truth, len, "truth")?;
        let mask: Vec<bool> = if mask.is_null() {
            vec![true; len]
        } else {
            slice_in(mask, len, "mask")?.iter().map(|&m| m != 0).collect()
        };
        let (a, r) = mae_rmse(pred, truth, &mask)?;
        write_out(mae, a, "mae")?;
        write_out(rmse, r, "rmse")
    })
}

/// Marks steps above `level` whose next step differs by more than `jump`;
/// `observed` may be null.
///
/// # Safety
/// Buffers must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn af_sudden_change_mask(
    series: *const f64,
    observed: *const u8,
    len: usize,
    level: f64,
    jump: f64,
    out: *mut u8,
) -> AfStatus {
    guard(|| {
        let series = slice_in(series, len, "series")?;
        let observed: Option<Vec<bool>> = if observed.is_null() {
            None
        } else {
            Some(slice_in(observed, len, "observed")?.iter().map(|&o| o != 0).collect())
        };
        let out = slice_out(out, len, "out")?;
        let marks = sudden_change_mask(series, observed.as_deref(), SuddenChangeRule { level, jump });
        for (o, m) in out.iter_mut().zip(marks) {
            *o = u8::from(m);
        }
        Ok(())
    })
}
