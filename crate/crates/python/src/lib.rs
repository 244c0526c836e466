//! Python bindings: signal and metric helpers, the toy corpus, mixture
//! generation, training entry points and checkpoint inference.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use mused::augment::PlusBank;
use mused::media::{read_frames, read_wav, LabelSequence, ScoreSequence};
use mused::model::Stage;
use mused::signal::{self, Waveform};
use mused::synth::{self, AudioBank, Corpus, CorpusManifest, InterferenceMode, MixOptions};
use mused::train::{self, asd_items, in_domain_bank, RunConfig, TrainOptions};
use mused::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn wave(samples: Vec<f64>) -> PyResult<Waveform> {
    Waveform::from_samples(samples).map_err(err)
}

/// Scale-invariant SDR of `estimate` against `reference`, in dB.
#[pyfunction]
pub fn si_sdr(estimate: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    signal::si_sdr(&wave(estimate)?, &wave(reference)?).map_err(err)
}

/// `target` plus `interferer` scaled to the requested SNR.
#[pyfunction]
pub fn mix_at_snr(target: Vec<f64>, interferer: Vec<f64>, snr_db: f64) -> PyResult<Vec<f64>> {
    let m = signal::mix_at_snr(&wave(target)?, &wave(interferer)?, snr_db).map_err(err)?;
    Ok(m.samples().to_vec())
}

#[pyfunction]
pub fn convolve_rir(dry: Vec<f64>, rir: Vec<f64>) -> PyResult<Vec<f64>> {
    let w = signal::convolve_rir(&wave(dry)?, &wave(rir)?).map_err(err)?;
    Ok(w.samples().to_vec())
}

#[pyfunction]
pub fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    mused::metrics::average_precision(&scores, &labels).map_err(err)
}

/// Returns `(auroc, eer)`.
#[pyfunction]
pub fn roc_metrics(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64)> {
    mused::metrics::roc_metrics(&scores, &labels).map_err(err)
}

/// Pooled AP over `(scores, labels)` tracks.
#[pyfunction]
pub fn mean_average_precision(tracks: Vec<(Vec<f64>, Vec<bool>)>) -> PyResult<f64> {
    let tracks: Vec<_> = tracks.into_iter().map(|(s, l)| (ScoreSequence(s), LabelSequence(l))).collect();
    mused::metrics::mean_average_precision(&tracks).map_err(err)
}

/// Writes the toy corpus and returns the manifest paths.
#[pyfunction]
#[pyo3(signature = (out_dir, num_clips = 8, seed = 7))]
pub fn make_toy_dataset(out_dir: PathBuf, num_clips: usize, seed: u64) -> PyResult<HashMap<String, PathBuf>> {
    let p = mused::toy::make_toy_dataset(&out_dir, num_clips, seed).map_err(err)?;
    Ok(HashMap::from([
        ("root".to_string(), p.root),
        ("manifest".to_string(), p.manifest),
        ("noise_manifest".to_string(), p.noise_manifest),
        ("rir_manifest".to_string(), p.rir_manifest),
    ]))
}

fn corpus(path: &Path) -> PyResult<Corpus> {
    Corpus::load(&CorpusManifest::load(path).map_err(err)?).map_err(err)
}

fn bank(path: Option<&Path>) -> PyResult<Option<AudioBank>> {
    path.map(|p| AudioBank::load(&CorpusManifest::load(p).map_err(err)?).map_err(err)).transpose()
}

fn mode(name: &str) -> PyResult<InterferenceMode> {
    name.parse().map_err(err)
}

/// One mixture as a dict with `mixture`, `clean_target`, `target_id`,
/// `snr_db` and `interferers` (kind, source id, SNR).
#[pyfunction]
#[pyo3(signature = (manifest, mode_name, seed, noise_manifest = None, duration_s = 4.0))]
pub fn generate_mixture<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    mode_name: &str,
    seed: u64,
    noise_manifest: Option<PathBuf>,
    duration_s: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let c = corpus(&manifest)?;
    let noise = bank(noise_manifest.as_deref())?;
    let opts = MixOptions { duration_s, ..MixOptions::default() };
    let s = synth::generate_mixture(&c, noise.as_ref(), mode(mode_name)?, &opts, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mixture", s.mixture.samples().to_vec())?;
    d.set_item("clean_target", s.clean_target.samples().to_vec())?;
    d.set_item("target_id", &s.target_id)?;
    d.set_item("snr_db", s.snr_db_used.clone())?;
    let inter: Vec<(String, String, f64)> =
        s.interferers.iter().map(|i| (format!("{:?}", i.kind), i.source_id.clone(), i.snr_db)).collect();
    d.set_item("interferers", inter)?;
    Ok(d)
}

fn run_config(path: Option<PathBuf>) -> PyResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(&p).map_err(err),
        None => Ok(RunConfig::default()),
    }
}

fn history<'py>(py: Python<'py>, out: &train::TrainOutcome) -> PyResult<Vec<Bound<'py, PyDict>>> {
    out.history
        .iter()
        .map(|h| {
            let d = PyDict::new(py);
            d.set_item("epoch", h.epoch)?;
            d.set_item("train_loss", h.train_loss)?;
            d.set_item("train_si_sdri", h.train_si_sdri)?;
            d.set_item("val_metric", h.val_metric)?;
            Ok(d)
        })
        .collect()
}

/// Pre-trains and writes checkpoints and the log to `out_dir`. Returns the
/// per-epoch history.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config = None, noise_manifest = None))]
pub fn pretrain<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    noise_manifest: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let run = run_config(config)?;
    let c = corpus(&manifest)?;
    let noise = bank(noise_manifest.as_deref())?;
    let opts = TrainOptions { out_dir: Some(out_dir), ..Default::default() };
    let out = train::pretrain(&run, &c, noise.as_ref(), opts).map_err(err)?;
    history(py, &out)
}

/// Fine-tunes on a labeled corpus, optionally from a pre-training
/// checkpoint. Returns the per-epoch history.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config = None, init = None, noise_manifest = None))]
pub fn finetune<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    init: Option<PathBuf>,
    noise_manifest: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let run = run_config(config)?;
    let items = asd_items(&corpus(&manifest)?).map_err(err)?;
    let init = init.map(|p| train::Checkpoint::load(&p).map_err(err)).transpose()?;
    let plus = PlusBank {
        in_domain: in_domain_bank(&items),
        ambient: bank(noise_manifest.as_deref())?.unwrap_or_default(),
        ..PlusBank::default()
    };
    let opts = TrainOptions { out_dir: Some(out_dir), ..Default::default() };
    let out = train::finetune(&run, &items, None, init.as_ref(), plus, opts).map_err(err)?;
    history(py, &out)
}

/// A saved training state.
#[pyclass(name = "Checkpoint", module = "mused_py", frozen)]
pub struct PyCheckpoint {
    inner: train::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: train::Checkpoint::load(&path).map_err(err)? })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    pub fn stage(&self) -> String {
        self.inner.stage.to_string()
    }

    #[getter]
    pub fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    pub fn num_params(&self) -> usize {
        self.inner.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Per-frame speaking probabilities for one WAV and its face frames.
    pub fn predict(&self, audio_path: PathBuf, frames_path: PathBuf) -> PyResult<Vec<f64>> {
        if self.inner.stage != Stage::Finetune {
            return Err(PyValueError::new_err("prediction needs a fine-tuning checkpoint"));
        }
        let audio = read_wav(&audio_path).map_err(err)?;
        let faces = read_frames(&frames_path).map_err(err)?;
        let model = self.inner.model().map_err(err)?;
        Ok(model.forward_asd(&audio, &faces).map_err(err)?.0)
    }

    /// Metric report over a labeled corpus, as a dict of percentages.
    pub fn evaluate(&self, manifest: PathBuf) -> PyResult<HashMap<String, f64>> {
        let items = asd_items(&corpus(&manifest)?).map_err(err)?;
        let r = train::evaluate(&self.inner, &items).map_err(err)?;
        Ok(HashMap::from([
            ("map_pct".to_string(), r.map_pct),
            ("ap_pct".to_string(), r.ap_pct),
            ("auroc_pct".to_string(), r.auroc_pct),
            ("eer_pct".to_string(), r.eer_pct),
            ("f1_pct".to_string(), r.f1_pct),
            ("num_frames".to_string(), r.num_frames as f64),
        ]))
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(stage={}, epoch={})", self.inner.stage, self.inner.epoch)
    }
}

#[pymodule]
fn mused_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(convolve_rir, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(roc_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_class::<PyCheckpoint>()?;
    m.add("SAMPLES_PER_FRAME", signal::SAMPLES_PER_FRAME)?;
    Ok(())
}
