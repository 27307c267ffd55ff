//! Python bindings. Signals are lists of floats, spectrograms are lists of
//! rows (one per frequency bin).

use std::path::PathBuf;

use hpss_core::baseline::{self, MaskMode, MedianConfig};
use hpss_core::dsp::{self, GlobalStats, MagSpec};
use hpss_core::metrics;
use hpss_core::network::{load_checkpoint, save_checkpoint, Checkpoint, NetworkConfig, ParamStore, ThreeWayMDenseNet};
use hpss_core::tensor::Tensor;
use hpss_core::toolkit::{self, RunConfig, StemsLayout, SynthSpec};
use hpss_core::training;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: hpss_core::Error) -> PyErr {
    match e {
        hpss_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(m: &MagSpec) -> Vec<Vec<f64>> {
    (0..m.bins).map(|b| m.row(b).to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<MagSpec> {
    let frames = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != frames) {
        return Err(PyValueError::new_err("ragged spectrogram rows"));
    }
    MagSpec::new(rows.len(), frames, rows.concat()).map_err(to_py)
}

fn median_config(l_harm: usize, l_perc: usize, binary: bool, power: f64) -> MedianConfig {
    let mask_mode = if binary { MaskMode::Binary } else { MaskMode::Soft { power } };
    MedianConfig { l_harm, l_perc, mask_mode, ..Default::default() }
}

/// Complex STFT of a mono signal.
#[pyclass(name = "Spectrogram", frozen)]
struct PySpectrogram(dsp::Spectrogram);

#[pymethods]
impl PySpectrogram {
    #[getter]
    fn n_frames(&self) -> usize {
        self.0.n_frames()
    }

    #[getter]
    fn signal_len(&self) -> usize {
        self.0.signal_len()
    }

    /// Magnitudes of the 512 model bins.
    fn magnitude(&self) -> Vec<Vec<f64>> {
        rows(&self.0.magnitude())
    }

    fn istft(&self) -> Vec<f64> {
        dsp::istft(&self.0)
    }

    /// Returns `(percussive, harmonic)` signals for a pair of masks.
    fn apply_masks(&self, mask_p: Vec<Vec<f64>>, mask_h: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        dsp::apply_masks(&from_rows(mask_p)?, &from_rows(mask_h)?, &self.0).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (signal, sample_rate = dsp::SAMPLE_RATE))]
fn stft(signal: Vec<f64>, sample_rate: u32) -> PyResult<PySpectrogram> {
    dsp::stft(&signal, sample_rate).map(PySpectrogram).map_err(to_py)
}

/// Median-filtering masks `(m_p, m_h)` for a magnitude spectrogram.
#[pyfunction]
#[pyo3(signature = (mag, l_harm = 17, l_perc = 17, binary = false, power = 2.0))]
fn median_masks(mag: Vec<Vec<f64>>, l_harm: usize, l_perc: usize, binary: bool, power: f64) -> PyResult<(Rows, Rows)> {
    let (m_p, m_h) =
        baseline::median_hpss(&from_rows(mag)?, &median_config(l_harm, l_perc, binary, power)).map_err(to_py)?;
    Ok((rows(&m_p), rows(&m_h)))
}

#[pyfunction]
#[pyo3(signature = (signal, sample_rate = dsp::SAMPLE_RATE, l_harm = 17, l_perc = 17, binary = false, power = 2.0))]
fn baseline_separate(
    signal: Vec<f64>,
    sample_rate: u32,
    l_harm: usize,
    l_perc: usize,
    binary: bool,
    power: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    baseline::separate(&signal, sample_rate, &median_config(l_harm, l_perc, binary, power)).map_err(to_py)
}

/// `(sdr, sir, sar)` in dB for `estimate` against the two reference sources.
#[pyfunction]
fn bss_eval(estimate: Vec<f64>, s_true: Vec<f64>, s_other: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let m = metrics::sdr_sir_sar(&metrics::decompose(&estimate, &s_true, &s_other).map_err(to_py)?);
    Ok((m.sdr_db, m.sir_db, m.sar_db))
}

/// Track `track_seed` of a synthetic corpus as `(mixture, drums, harmonic)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, track_seed = 0, duration_s = 10.0))]
fn synth_track(seed: u64, track_seed: u64, duration_s: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let spec = SynthSpec { seed, duration_s, ..Default::default() };
    let t = toolkit::synth_track(&spec, track_seed).map_err(to_py)?;
    Ok((t.mixture.clone(), t.drums().to_vec(), t.harmonic().to_vec()))
}

/// Returns `(samples, sample_rate)`.
#[pyfunction]
#[pyo3(signature = (path, allow_any_rate = false))]
fn read_wav(path: PathBuf, allow_any_rate: bool) -> PyResult<(Vec<f64>, u32)> {
    let a = toolkit::read_wav(&path, allow_any_rate).map_err(to_py)?;
    Ok((a.samples, a.sample_rate))
}

#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = dsp::SAMPLE_RATE))]
fn write_wav(path: PathBuf, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    toolkit::write_wav(&path, &samples, sample_rate).map_err(to_py)
}

/// Trains on a track directory and writes the best checkpoint to `out`.
/// Returns the best validation loss.
#[pyfunction]
#[pyo3(signature = (data_dir, config, out, stems_layout = "synthetic"))]
fn train(py: Python<'_>, data_dir: PathBuf, config: PathBuf, out: PathBuf, stems_layout: &str) -> PyResult<f64> {
    let layout: StemsLayout = stems_layout.parse().map_err(to_py)?;
    py.detach(|| {
        let cfg = RunConfig::load(&config)?;
        let tracks = toolkit::load_training_tracks(&data_dir, layout, false)?;
        training::train(&tracks, &cfg.network, &cfg.training, &out).map(|r| r.best_val_loss)
    })
    .map_err(to_py)
}

/// A network with its parameters and normalization statistics.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    net: ThreeWayMDenseNet,
    params: ParamStore,
    stats: GlobalStats,
}

#[pymethods]
impl PyNetwork {
    /// Freshly initialized network. `small=True` selects the tiny test
    /// configuration; otherwise the keyword sizes apply.
    #[new]
    #[pyo3(signature = (growth_rate = 10, layers_per_block = 5, depth = 4, final_block_layers = 4, seed = 0, small = false))]
    fn new(
        growth_rate: usize,
        layers_per_block: usize,
        depth: usize,
        final_block_layers: usize,
        seed: u64,
        small: bool,
    ) -> PyResult<Self> {
        let config = if small {
            NetworkConfig::small()
        } else {
            NetworkConfig { growth_rate, layers_per_block, depth, final_block_layers, ..Default::default() }
        };
        let net = ThreeWayMDenseNet::new(config).map_err(to_py)?;
        let params = net.init_params(seed);
        Ok(Self { net, params, stats: GlobalStats { min_val: 0.0, max_val: 1.0 } })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(to_py)?;
        let net = ThreeWayMDenseNet::new(ckpt.config).map_err(to_py)?;
        Ok(Self { net, params: ckpt.params, stats: ckpt.stats })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint { config: self.net.config.clone(), stats: self.stats, params: self.params.clone() };
        save_checkpoint(&path, &ckpt).map_err(to_py)
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Masks `(m_p, m_h)` for one normalized 512x128 patch.
    fn infer(&self, py: Python<'_>, patch: Vec<Vec<f64>>) -> PyResult<(Rows, Rows)> {
        let mag = from_rows(patch)?;
        let x = Tensor::new([1, 1, mag.bins, mag.frames], mag.data.clone()).map_err(to_py)?;
        let (p, h) = py.detach(|| self.net.infer(&self.params, &x)).map_err(to_py)?;
        let back = |t: Tensor| MagSpec::new(mag.bins, mag.frames, t.into_data()).map(|m| rows(&m));
        Ok((back(p).map_err(to_py)?, back(h).map_err(to_py)?))
    }

    /// Returns `(percussive, harmonic)` signals.
    #[pyo3(signature = (signal, sample_rate = dsp::SAMPLE_RATE))]
    fn separate(&self, py: Python<'_>, signal: Vec<f64>, sample_rate: u32) -> PyResult<(Vec<f64>, Vec<f64>)> {
        py.detach(|| toolkit::separate_with_model(&self.net, &self.params, &self.stats, &signal, sample_rate))
            .map_err(to_py)
    }
}

#[pymodule]
fn hpss(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", dsp::SAMPLE_RATE)?;
    m.add("N_BINS", dsp::N_BINS)?;
    m.add("PATCH_FRAMES", dsp::PATCH_FRAMES)?;
    m.add_class::<PySpectrogram>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(median_masks, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_separate, m)?)?;
    m.add_function(wrap_pyfunction!(bss_eval, m)?)?;
    m.add_function(wrap_pyfunction!(synth_track, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
