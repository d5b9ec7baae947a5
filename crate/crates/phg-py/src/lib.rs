//! Python bindings for the toolkit's main types and operations.
//!
//! The module mirrors the in-process API rather than the CLI: tensors and
//! class maps, the standard modality set, mask enumeration, the shipped
//! class weights and benchmark scoring, temporal consistency, PHGT file
//! round-trips, synthetic scene generation, and model inference.
//!
//! Build with `cargo build -p phg-py --release`, then import the produced
//! `libphg.so` as `phg` (python/smoke_test.py shows the import dance).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phg_core::ensemble::{aggregate, frame_weighted_iou, nrand_predict};
use phg_core::error::PhgError;
use phg_core::metrics::{temporal_consistency, ClassWeights, FlowField, FrameFlows, TemporalParams};
use phg_core::modality::{enumerate_masks, ModalityData, ModalityKind, ModalityRole};
use phg_core::model::{ModelSize, PhgModel};
use phg_core::phgt::{read_phgt, write_phgt, PhgtData};
use phg_core::pipeline::run_pipeline;
use phg_core::synth::{
    gen_scene, load_inference_bundle, simulate_experts, standard_derivations,
    standard_modality_set, SyntheticSceneSpec,
};
use phg_core::tensor;

fn to_py(e: PhgError) -> PyErr {
    match e {
        PhgError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

// --------------------------------------------------------------------------
// tensors and class maps

/// Dense float tensor, channel-major layout.
#[pyclass]
#[derive(Clone)]
struct Tensor {
    inner: tensor::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Tensor { inner: tensor::Tensor::new(dims, data).map_err(to_py)? })
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Element (c, y, x) of a rank-3 tensor.
    fn at3(&self, c: usize, y: usize, x: usize) -> PyResult<f32> {
        let d = self.inner.dims();
        if d.len() != 3 || c >= d[0] || y >= d[1] || x >= d[2] {
            return Err(PyValueError::new_err(format!("at3({c},{y},{x}) out of range for {d:?}")));
        }
        Ok(self.inner.at3(c, y, x))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.inner.dims())
    }
}

/// Per-pixel class indices (u8), rank-2.
#[pyclass]
#[derive(Clone)]
struct ClassMap {
    inner: tensor::ClassMap,
}

#[pymethods]
impl ClassMap {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(ClassMap { inner: tensor::ClassMap::new(height, width, data).map_err(to_py)? })
    }

    /// Constant map, mostly useful for tests.
    #[staticmethod]
    fn filled(height: usize, width: usize, class: u8) -> Self {
        ClassMap { inner: tensor::ClassMap::filled(height, width, class) }
    }

    /// Channel-wise argmax of a [K,H,W] probability or logit tensor.
    #[staticmethod]
    fn from_argmax(t: &Tensor) -> PyResult<Self> {
        if t.inner.dims().len() != 3 {
            return Err(PyValueError::new_err("from_argmax wants a [K,H,W] tensor"));
        }
        Ok(ClassMap { inner: tensor::ClassMap::from_argmax(&t.inner) })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn data(&self) -> Vec<u8> {
        self.inner.data().to_vec()
    }

    fn at(&self, y: usize, x: usize) -> PyResult<u8> {
        if y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err(format!("pixel ({y},{x}) out of range")));
        }
        Ok(self.inner.at(y, x))
    }

    /// Fraction of pixels where the two maps disagree.
    fn disagreement(&self, other: &ClassMap) -> PyResult<f64> {
        self.inner.disagreement(&other.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("ClassMap({}x{})", self.inner.height(), self.inner.width())
    }
}

// --------------------------------------------------------------------------
// modality sets and masks

/// An ordered modality declaration (inputs, intermediates, outputs).
#[pyclass]
struct ModalitySet {
    inner: phg_core::modality::ModalitySet,
}

#[pymethods]
impl ModalitySet {
    /// The 15-modality standard set the synthetic scenes provide.
    #[staticmethod]
    fn standard() -> Self {
        ModalitySet { inner: standard_modality_set() }
    }

    /// All modality names in declaration order.
    fn names(&self) -> Vec<String> {
        self.inner.specs().iter().map(|s| s.name.clone()).collect()
    }

    fn intermediates(&self) -> Vec<String> {
        self.inner.intermediates().map(|s| s.name.clone()).collect()
    }

    /// Channels of the always-visible-inputs + intermediates concat the
    /// model consumes.
    #[getter]
    fn input_channel_count(&self) -> usize {
        self.inner.input_channel_count()
    }

    fn __len__(&self) -> usize {
        self.inner.specs().len()
    }

    fn __repr__(&self) -> String {
        format!("ModalitySet({} modalities)", self.inner.specs().len())
    }
}

/// Bit patterns of every enumerable hyper-edge mask, ascending. One bit
/// per intermediate; inputs are always visible, outputs always masked.
#[pyfunction]
fn enumerate_mask_bits(set: &ModalitySet, allow_all_masked: bool) -> PyResult<Vec<u32>> {
    let masks = enumerate_masks(&set.inner, allow_all_masked).map_err(to_py)?;
    Ok(masks.iter().map(|m| m.bits()).collect())
}

// --------------------------------------------------------------------------
// metrics

/// The shipped 8-class benchmark weights.
#[pyfunction]
fn aerial8_weights() -> Vec<f64> {
    let w = ClassWeights::aerial8();
    (0..w.len()).map(|c| w.get(c)).collect()
}

/// Weighted IoU (benchmark formula, 0..100) of one prediction against a
/// reference map, under the shipped weights.
#[pyfunction]
fn weighted_iou(pred: &ClassMap, gt: &ClassMap) -> PyResult<f64> {
    frame_weighted_iou(&pred.inner, &gt.inner, &ClassWeights::aerial8()).map_err(to_py)
}

/// Temporal consistency of a static-camera sequence (identity flows).
/// Returns (video_score, per-interior-frame scores).
#[pyfunction]
#[pyo3(signature = (maps, fb_tau=Some(1.0)))]
fn temporal_consistency_static(
    maps: Vec<ClassMap>,
    fb_tau: Option<f64>,
) -> PyResult<(f64, Vec<Option<f64>>)> {
    let maps: Vec<tensor::ClassMap> = maps.into_iter().map(|m| m.inner).collect();
    if maps.is_empty() {
        return Err(PyValueError::new_err("no maps"));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    let flows: Vec<FrameFlows> = (0..maps.len())
        .map(|i| FrameFlows {
            to_prev: (i > 0).then(|| FlowField::zeros(h, w)),
            to_next: (i + 1 < maps.len()).then(|| FlowField::zeros(h, w)),
        })
        .collect();
    let report = temporal_consistency(&maps, &flows, &TemporalParams { fb_tau }).map_err(to_py)?;
    Ok((report.video_score, report.frame_scores))
}

// --------------------------------------------------------------------------
// PHGT files

#[pyfunction]
fn write_tensor(path: PathBuf, t: &Tensor) -> PyResult<()> {
    write_phgt(&path, &PhgtData::F32(t.inner.clone())).map_err(to_py)
}

#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<Tensor> {
    match read_phgt(&path).map_err(to_py)? {
        PhgtData::F32(t) => Ok(Tensor { inner: t }),
        PhgtData::U8(_) => Err(PyValueError::new_err(format!(
            "{} holds a class map, not a float tensor",
            path.display()
        ))),
    }
}

#[pyfunction]
fn write_class_map(path: PathBuf, m: &ClassMap) -> PyResult<()> {
    write_phgt(&path, &PhgtData::U8(m.inner.clone())).map_err(to_py)
}

#[pyfunction]
fn read_class_map(path: PathBuf) -> PyResult<ClassMap> {
    match read_phgt(&path).map_err(to_py)? {
        PhgtData::U8(m) => Ok(ClassMap { inner: m }),
        PhgtData::F32(_) => Err(PyValueError::new_err(format!(
            "{} holds a float tensor, not a class map",
            path.display()
        ))),
    }
}

// --------------------------------------------------------------------------
// synthetic scenes

/// Generate one synthetic scene (ground truth, flows, and simulated
/// experts) under `dir`. Returns the number of files written.
#[pyfunction]
#[pyo3(signature = (dir, seed, frames=5, height=64, width=96))]
fn generate_scene(
    dir: PathBuf,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> PyResult<usize> {
    let mut spec = SyntheticSceneSpec::new(seed);
    spec.frames = frames;
    spec.height = height;
    spec.width = width;
    let a = gen_scene(&dir, &spec).map_err(to_py)?;
    let b = simulate_experts(&dir, &spec).map_err(to_py)?;
    Ok(a.files_written + b.files_written)
}

/// Run the standard derivation pipeline on a scene directory. Returns
/// (files written, files skipped as up to date).
#[pyfunction]
fn derive_standard(dir: PathBuf) -> PyResult<(usize, usize)> {
    let report = run_pipeline(&dir, &standard_derivations()).map_err(to_py)?;
    Ok((report.written.len(), report.skipped))
}

// --------------------------------------------------------------------------
// models

/// A trained (or freshly initialized) PHG-MAE model.
#[pyclass]
struct Model {
    inner: PhgModel,
}

#[pymethods]
impl Model {
    /// Fresh model on the standard modality set. `size` is "150k",
    /// "430k", "1m" or "4m".
    #[staticmethod]
    #[pyo3(signature = (size="150k", seed=0))]
    fn create(size: &str, seed: u64) -> PyResult<Self> {
        let size = ModelSize::parse(size).map_err(to_py)?;
        Ok(Model { inner: PhgModel::new(&standard_modality_set(), size, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: PhgModel::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn input_channel_count(&self) -> usize {
        self.inner.set().input_channel_count()
    }

    fn modalities(&self) -> Vec<String> {
        self.inner.set().specs().iter().map(|s| s.name.clone()).collect()
    }

    /// Random-masking ensemble inference on one frame of a scene
    /// directory: n random-mask forwards, mean-aggregated, argmax of the
    /// first categorical output. Reads only input modalities from disk.
    #[pyo3(signature = (scene_dir, frame, n=20, p_visible=0.5, seed=0))]
    fn infer(
        &self,
        scene_dir: PathBuf,
        frame: usize,
        n: usize,
        p_visible: f64,
        seed: u64,
    ) -> PyResult<ClassMap> {
        let output = self
            .inner
            .set()
            .specs()
            .iter()
            .find(|s| {
                s.role == ModalityRole::Output
                    && matches!(s.kind, ModalityKind::Categorical { .. })
            })
            .map(|s| s.name.clone())
            .ok_or_else(|| PyValueError::new_err("model has no categorical output"))?;
        let bundle =
            load_inference_bundle(&scene_dir, self.inner.set(), frame).map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = nrand_predict(&self.inner, &bundle, &format!("{frame:06}"), n, p_visible, &mut rng)
            .map_err(to_py)?;
        let all: Vec<usize> = (0..cands.len()).collect();
        let agg = aggregate(&cands, &all).map_err(to_py)?;
        match &agg[&output] {
            ModalityData::Categorical(m) => Ok(ClassMap { inner: m.clone() }),
            ModalityData::Continuous(_) => {
                Err(PyValueError::new_err("categorical output aggregated to a tensor"))
            }
        }
    }

    fn __repr__(&self) -> String {
        format!("Model({} parameters)", self.inner.param_count())
    }
}

// --------------------------------------------------------------------------

#[pymodule]
fn phg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Tensor>()?;
    m.add_class::<ClassMap>()?;
    m.add_class::<ModalitySet>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(enumerate_mask_bits, m)?)?;
    m.add_function(wrap_pyfunction!(aerial8_weights, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_iou, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_consistency_static, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_class_map, m)?)?;
    m.add_function(wrap_pyfunction!(read_class_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(derive_standard, m)?)?;
    Ok(())
}
