//! C ABI over `hst-core`.
//!
//! Models and datasets are opaque heap handles created by `*_new`/`*_read`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`HstStatus`]; the message of the most recent failure on the
//! calling thread is available through [`hst_last_error`].
//!
//! Images cross the boundary as `float` buffers of shape `[B, 3, H, W]`
//! with values in `[0, 1]`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hst_core::checkpoint::Checkpoint;
use hst_core::data::{generate, SyntheticSpec};
use hst_core::trainer::{check_hash, evaluate};
use hst_core::{Dataset, HstError, RunConfig, Tensor};

/// Outcome of a call. `HST_OK` is zero; everything else is a failure whose
/// message can be fetched with `hst_last_error`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Layout = 4,
    Config = 5,
    Wiring = 6,
    Contract = 7,
    Format = 8,
    Corrupt = 9,
    NonFinite = 10,
    Audit = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&HstError> for HstStatus {
    fn from(e: &HstError) -> Self {
        match e {
            HstError::Dimension(_) => HstStatus::Dimension,
            HstError::Layout(_) => HstStatus::Layout,
            HstError::Config(_) => HstStatus::Config,
            HstError::Wiring(_) => HstStatus::Wiring,
            HstError::Contract(_) => HstStatus::Contract,
            HstError::Format { .. } => HstStatus::Format,
            HstError::Corrupt { .. } => HstStatus::Corrupt,
            HstError::NonFinite { .. } => HstStatus::NonFinite,
            HstError::Audit(_) => HstStatus::Audit,
            HstError::Io(_) => HstStatus::Io,
        }
    }
}

/// A model with its run configuration.
pub struct HstModel {
    cfg: RunConfig,
    model: hst_core::HstModel<f32>,
}

/// An in-memory image dataset.
pub struct HstDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(HstStatus, String);

impl From<HstError> for Failure {
    fn from(e: HstError) -> Self {
        Failure(HstStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn fail(status: HstStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Outcome) -> HstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HstStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            HstStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(HstStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HstStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(HstStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(HstStatus::NullPointer, format!("{what} is null")))
}

unsafe fn images_arg(images: *const f32, batch: usize, height: usize, width: usize) -> Result<Tensor<f32>, Failure> {
    if images.is_null() {
        return Err(fail(HstStatus::NullPointer, "images is null"));
    }
    let n = batch * 3 * height * width;
    let data = std::slice::from_raw_parts(images, n).to_vec();
    Ok(Tensor::new(vec![batch, 3, height, width], data)?)
}

unsafe fn write_out(src: &[f32], out: *mut f32, out_len: usize) -> Outcome {
    if out.is_null() {
        return Err(fail(HstStatus::NullPointer, "output buffer is null"));
    }
    if out_len < src.len() {
        return Err(fail(
            HstStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn build_model(cfg: RunConfig) -> Result<*mut HstModel, Failure> {
    let mut model = hst_core::HstModel::new(&cfg.model(), cfg.train.seed)?;
    model.apply_freeze_policy();
    Ok(Box::into_raw(Box::new(HstModel { cfg, model })))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn hst_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialised model of the default configuration.
#[no_mangle]
pub unsafe extern "C" fn hst_model_new_default(seed: u64, out: *mut *mut HstModel) -> HstStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        *out = build_model(cfg)?;
        Ok(())
    })
}

/// Freshly initialised model from a TOML run configuration; the seed is
/// `train.seed`.
#[no_mangle]
pub unsafe extern "C" fn hst_model_from_toml(toml: *const c_char, out: *mut *mut HstModel) -> HstStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = RunConfig::from_toml(str_arg(toml, "toml")?)?;
        *out = build_model(cfg)?;
        Ok(())
    })
}

/// Loads a checkpoint written for the configuration at `config_path`.
#[no_mangle]
pub unsafe extern "C" fn hst_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut HstModel,
) -> HstStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = RunConfig::load(Path::new(str_arg(config_path, "config_path")?))?;
        let ck = Checkpoint::read(Path::new(str_arg(checkpoint_path, "checkpoint_path")?))?;
        check_hash(&cfg.model(), &ck)?;
        let raw = build_model(cfg)?;
        if let Err(e) = ck.load_into((*raw).model.params_mut()) {
            drop(Box::from_raw(raw));
            return Err(e.into());
        }
        *out = raw;
        Ok(())
    })
}

/// Writes the model parameters as a checkpoint at step 0.
#[no_mangle]
pub unsafe extern "C" fn hst_model_save(model: *const HstModel, path: *const c_char) -> HstStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ck = Checkpoint::from_params(m.model.config().hash(), 0, m.model.params());
        ck.write(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hst_model_free(model: *mut HstModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn hst_model_num_classes(model: *const HstModel) -> usize {
    model.as_ref().map_or(0, |m| m.cfg.data.num_classes)
}

#[no_mangle]
pub unsafe extern "C" fn hst_model_image_size(model: *const HstModel) -> usize {
    model.as_ref().map_or(0, |m| m.cfg.backbone.image_size)
}

/// Trainable and frozen scalar counts.
#[no_mangle]
pub unsafe extern "C" fn hst_model_param_counts(
    model: *const HstModel,
    trainable: *mut u64,
    frozen: *mut u64,
) -> HstStatus {
    guard(|| {
        let r = handle(model, "model")?.model.param_report();
        *out_ptr(trainable, "trainable")? = r.total_trainable as u64;
        *out_ptr(frozen, "frozen")? = r.total_frozen as u64;
        Ok(())
    })
}

/// Logits `[batch, num_classes]` written row-major into `logits`.
#[no_mangle]
pub unsafe extern "C" fn hst_model_classify(
    model: *const HstModel,
    images: *const f32,
    batch: usize,
    height: usize,
    width: usize,
    logits: *mut f32,
    logits_len: usize,
) -> HstStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let x = images_arg(images, batch, height, width)?;
        let y = m.model.forward_classify(&x)?;
        write_out(y.data(), logits, logits_len)
    })
}

/// Shape `[batch, channels, h, w]` of pyramid level `stage` (0..4) for
/// `height × width` inputs.
#[no_mangle]
pub unsafe extern "C" fn hst_model_pyramid_shape(
    model: *const HstModel,
    stage: usize,
    batch: usize,
    height: usize,
    width: usize,
    shape: *mut usize,
) -> HstStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if stage >= 4 {
            return Err(fail(
                HstStatus::InvalidArgument,
                format!("stage {stage} is not in 0..4"),
            ));
        }
        if shape.is_null() {
            return Err(fail(HstStatus::NullPointer, "shape is null"));
        }
        let stride = 4 << stage;
        let dims = [batch, m.cfg.hsn.stage_dims[stage], height / stride, width / stride];
        ptr::copy_nonoverlapping(dims.as_ptr(), shape, 4);
        Ok(())
    })
}

/// Feature map of pyramid level `stage`, row-major `[B, C, H/s, W/s]`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hst_model_pyramid(
    model: *const HstModel,
    images: *const f32,
    batch: usize,
    height: usize,
    width: usize,
    stage: usize,
    out: *mut f32,
    out_len: usize,
) -> HstStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if stage >= 4 {
            return Err(fail(
                HstStatus::InvalidArgument,
                format!("stage {stage} is not in 0..4"),
            ));
        }
        let x = images_arg(images, batch, height, width)?;
        let maps = m.model.forward_pyramid(&x)?;
        write_out(maps[stage].data(), out, out_len)
    })
}

/// Classification accuracy over a dataset.
#[no_mangle]
pub unsafe extern "C" fn hst_model_evaluate(
    model: *const HstModel,
    dataset: *const HstDataset,
    accuracy: *mut f64,
) -> HstStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(dataset, "dataset")?;
        *out_ptr(accuracy, "accuracy")? = evaluate(&m.model, &d.data, 200)?;
        Ok(())
    })
}

/// Reads an HSTD file.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_read(path: *const c_char, out: *mut *mut HstDataset) -> HstStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = Dataset::read(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(HstDataset { data }));
        Ok(())
    })
}

/// Synthetic shape dataset; sample `i` has label `i % num_classes`.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_generate(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    patch_size: usize,
    noise_std: f64,
    seed: u64,
    out: *mut *mut HstDataset,
) -> HstStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = generate(&SyntheticSpec {
            num_classes,
            samples_per_class,
            image_size,
            patch_size,
            noise_std,
            seed,
        })?;
        *out = Box::into_raw(Box::new(HstDataset { data }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hst_dataset_write(dataset: *const HstDataset, path: *const c_char) -> HstStatus {
    guard(|| {
        handle(dataset, "dataset")?
            .data
            .write(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hst_dataset_len(dataset: *const HstDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// Copies image `index` (`3 × H × W` floats) into `out`.
#[no_mangle]
pub unsafe extern "C" fn hst_dataset_image(
    dataset: *const HstDataset,
    index: usize,
    out: *mut f32,
    out_len: usize,
) -> HstStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        if index >= d.data.len() {
            return Err(fail(
                HstStatus::InvalidArgument,
                format!("index {index} out of {}", d.data.len()),
            ));
        }
        write_out(d.data.image(index), out, out_len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn hst_dataset_label(dataset: *const HstDataset, index: usize, label: *mut u32) -> HstStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let l = d.data.labels().get(index).ok_or_else(|| {
            fail(
                HstStatus::InvalidArgument,
                format!("index {index} out of {}", d.data.len()),
            )
        })?;
        *out_ptr(label, "label")? = *l;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hst_dataset_free(dataset: *mut HstDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}
