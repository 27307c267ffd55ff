//! Model-based separation of a whole signal.

use crate::dsp::GlobalStats;
use crate::dsp::{self, MagPatch, MagSpec};
use crate::error::Result;
use crate::network::{Checkpoint, ParamStore, ThreeWayMDenseNet};

/// Network masks for every frame of `mag`, computed patch by patch.
pub fn predict_masks(
    net: &ThreeWayMDenseNet,
    params: &ParamStore,
    stats: &GlobalStats,
    mag: &MagSpec,
) -> Result<(MagSpec, MagSpec)> {
    let mut perc = Vec::new();
    let mut harm = Vec::new();
    for patch in dsp::patchify(mag)? {
        let (m_p, m_h) = net.infer(params, &dsp::normalize(&patch, stats)?.to_tensor())?;
        let wrap = |t: crate::tensor::Tensor| MagPatch { data: t.into_data(), ..patch.clone() };
        perc.push(wrap(m_p));
        harm.push(wrap(m_h));
    }
    Ok((dsp::depatchify(&perc, mag.frames)?, dsp::depatchify(&harm, mag.frames)?))
}

/// Returns `(percussive, harmonic)` samples, each as long as `signal`.
pub fn separate_with_model(
    net: &ThreeWayMDenseNet,
    params: &ParamStore,
    stats: &GlobalStats,
    signal: &[f64],
    sample_rate: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = dsp::stft(signal, sample_rate)?;
    let (m_p, m_h) = predict_masks(net, params, stats, &spec.magnitude())?;
    dsp::apply_masks(&m_p, &m_h, &spec)
}

pub fn separate_with_checkpoint(ckpt: &Checkpoint, signal: &[f64], sample_rate: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    let net = ThreeWayMDenseNet::new(ckpt.config.clone())?;
    separate_with_model(&net, &ckpt.params, &ckpt.stats, signal, sample_rate)
}
