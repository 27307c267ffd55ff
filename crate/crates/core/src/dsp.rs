//! Time-frequency front end.
//!
//! Analysis uses a periodic Hann window of 1024 samples with a 512-sample hop.
//! The signal is reflect-padded by one hop on both sides and zero-extended to
//! a whole number of hops, so every original sample is covered by exactly two
//! frames and the synthesis normalizer stays well away from zero.
//!
//! The network sees 512 frequency rows: the Nyquist bin is kept inside
//! [`Spectrogram`] for exact reconstruction but excluded from [`MagSpec`]
//! views. When masks are applied, the Nyquist bin reuses the mask value of
//! the highest network bin.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 44_100;
pub const WIN_LENGTH: usize = 1024;
pub const HOP: usize = WIN_LENGTH / 2;
/// Bins produced by a real FFT of one frame, DC through Nyquist.
pub const RAW_BINS: usize = WIN_LENGTH / 2 + 1;
/// Bins exposed to the network (Nyquist dropped).
pub const N_BINS: usize = WIN_LENGTH / 2;
pub const PATCH_FRAMES: usize = 128;
pub const NORMALIZER_FLOOR: f64 = 1e-8;

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()).collect()
}

/// Complex STFT, stored `[bin][frame]` with all `RAW_BINS` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    n_frames: usize,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Length of the signal this spectrogram was computed from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn win_length(&self) -> usize {
        WIN_LENGTH
    }

    pub fn hop(&self) -> usize {
        HOP
    }

    pub fn bin(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.n_frames + frame]
    }

    /// Magnitudes of the network-facing bins.
    pub fn magnitude(&self) -> MagSpec {
        let data = self.data[..N_BINS * self.n_frames].iter().map(|c| c.norm()).collect();
        MagSpec { bins: N_BINS, frames: self.n_frames, data }
    }

    /// Phase angles of the network-facing bins.
    pub fn phase(&self) -> MagSpec {
        let data = self.data[..N_BINS * self.n_frames].iter().map(|c| c.arg()).collect();
        MagSpec { bins: N_BINS, frames: self.n_frames, data }
    }

    /// Scales every bin by a real gain, keeping the mixture phase.
    pub fn masked(&self, mask: &MagSpec) -> Result<Spectrogram> {
        if mask.bins != N_BINS || mask.frames != self.n_frames {
            return Err(Error::shape(
                "apply_masks",
                format!("mask is {}x{}, spectrogram is {}x{}", mask.bins, mask.frames, N_BINS, self.n_frames),
            ));
        }
        let mut data = self.data.clone();
        for bin in 0..RAW_BINS {
            let src = bin.min(N_BINS - 1);
            for f in 0..self.n_frames {
                data[bin * self.n_frames + f] *= mask.get(src, f);
            }
        }
        Ok(Spectrogram { data, ..self.clone() })
    }
}

/// A real-valued `[bin][frame]` matrix: magnitudes, masks or normalized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MagSpec {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl MagSpec {
    pub fn new(bins: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if bins * frames != data.len() || bins == 0 || frames == 0 {
            return Err(Error::shape("MagSpec", format!("{bins}x{frames} with {} values", data.len())));
        }
        Ok(Self { bins, frames, data })
    }

    pub fn filled(bins: usize, frames: usize, value: f64) -> Self {
        Self { bins, frames, data: vec![value; bins * frames] }
    }

    #[inline]
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, frame: usize, value: f64) {
        self.data[bin * self.frames + frame] = value;
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.data[bin * self.frames..(bin + 1) * self.frames]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|b| self.get(b, frame)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> MagSpec {
        MagSpec { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn fft_pair() -> FftPair {
    let mut planner = FftPlanner::new();
    FftPair { forward: planner.plan_fft_forward(WIN_LENGTH), inverse: planner.plan_fft_inverse(WIN_LENGTH) }
}

/// Reflect-pads by one hop on each side (edge sample not repeated), then
/// zero-extends to a multiple of the hop.
fn pad_signal(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut padded = Vec::with_capacity(n + 3 * HOP);
    padded.extend((1..=HOP).rev().map(|i| signal[i]));
    padded.extend_from_slice(signal);
    padded.extend((1..=HOP).map(|i| signal[n - 1 - i]));
    let rem = padded.len() % HOP;
    if rem != 0 {
        padded.resize(padded.len() + HOP - rem, 0.0);
    }
    padded
}

/// Number of analysis frames for a signal of `len` samples.
pub fn frame_count(len: usize) -> usize {
    let padded = (len + 2 * HOP).div_ceil(HOP) * HOP;
    (padded - WIN_LENGTH) / HOP + 1
}

pub fn stft(signal: &[f64], sample_rate: u32) -> Result<Spectrogram> {
    if signal.len() < WIN_LENGTH {
        return Err(Error::SignalTooShort { len: signal.len(), min: WIN_LENGTH });
    }
    if !signal.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("stft input"));
    }
    let padded = pad_signal(signal);
    let n_frames = (padded.len() - WIN_LENGTH) / HOP + 1;
    debug_assert_eq!(n_frames, frame_count(signal.len()));
    let window = hann_window(WIN_LENGTH);
    let fft = fft_pair();
    let mut buf = vec![Complex64::default(); WIN_LENGTH];
    let mut data = vec![Complex64::default(); RAW_BINS * n_frames];
    for f in 0..n_frames {
        let frame = &padded[f * HOP..f * HOP + WIN_LENGTH];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.forward.process(&mut buf);
        for (bin, v) in buf[..RAW_BINS].iter().enumerate() {
            data[bin * n_frames + f] = *v;
        }
    }
    Ok(Spectrogram { data, n_frames, sample_rate, signal_len: signal.len() })
}

/// Weighted overlap-add inverse, normalized by the summed squared window and
/// trimmed back to the original signal length.
pub fn istft(spec: &Spectrogram) -> Vec<f64> {
    let (out, _) = istft_with_normalizer(spec);
    out
}

/// Like [`istft`], also returning the synthesis normalizer over the output span.
pub fn istft_with_normalizer(spec: &Spectrogram) -> (Vec<f64>, Vec<f64>) {
    let window = hann_window(WIN_LENGTH);
    let fft = fft_pair();
    let total = (spec.n_frames - 1) * HOP + WIN_LENGTH;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::default(); WIN_LENGTH];
    let scale = 1.0 / WIN_LENGTH as f64;
    for f in 0..spec.n_frames {
        for (bin, slot) in buf[..RAW_BINS].iter_mut().enumerate() {
            *slot = spec.bin(bin, f);
        }
        // DC and Nyquist of a real frame have no imaginary part.
        buf[0].im = 0.0;
        buf[N_BINS].im = 0.0;
        for bin in 1..N_BINS {
            buf[WIN_LENGTH - bin] = buf[bin].conj();
        }
        fft.inverse.process(&mut buf);
        let start = f * HOP;
        for (i, &w) in window.iter().enumerate() {
            acc[start + i] += buf[i].re * scale * w;
            norm[start + i] += w * w;
        }
    }
    let span = HOP..HOP + spec.signal_len;
    let out = acc[span.clone()]
        .iter()
        .zip(&norm[span.clone()])
        .map(|(&a, &n)| if n > NORMALIZER_FLOOR { a / n } else { 0.0 })
        .collect();
    (out, norm[span].to_vec())
}

/// Masks the mixture and resynthesizes both estimates with the mixture phase.
///
/// Masks multiply the raw (unnormalized) mixture magnitude. Returns
/// `(percussive, harmonic)` sample vectors of the mixture's length.
pub fn apply_masks(mask_p: &MagSpec, mask_h: &MagSpec, mix: &Spectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
    let perc = istft(&mix.masked(mask_p)?);
    let harm = istft(&mix.masked(mask_h)?);
    Ok((perc, harm))
}

/// One 512x128 network-sized window of a magnitude spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct MagPatch {
    /// `[bin][frame]`, `N_BINS * PATCH_FRAMES` values.
    pub data: Vec<f64>,
    /// First frame of the source spectrogram covered by this patch.
    pub frame_offset: usize,
    /// Trailing zero frames added to fill the patch.
    pub pad: usize,
    pub normalized: bool,
}

impl MagPatch {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != N_BINS * PATCH_FRAMES {
            return Err(Error::shape("MagPatch", format!("{} values", data.len())));
        }
        Ok(Self { data, frame_offset: 0, pad: 0, normalized: false })
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * PATCH_FRAMES + frame]
    }

    /// The patch as a `[1, 512, 128]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, N_BINS, PATCH_FRAMES], self.data.clone()).expect("patch size is fixed")
    }
}

/// Cuts a 512-bin spectrogram into non-overlapping 128-frame patches, zero
/// padding the final one.
pub fn patchify(mag: &MagSpec) -> Result<Vec<MagPatch>> {
    if mag.bins != N_BINS {
        return Err(Error::shape("patchify", format!("expected {N_BINS} bins, got {}", mag.bins)));
    }
    let mut patches = Vec::with_capacity(mag.frames.div_ceil(PATCH_FRAMES));
    let mut offset = 0;
    while offset < mag.frames {
        let width = PATCH_FRAMES.min(mag.frames - offset);
        let mut data = vec![0.0; N_BINS * PATCH_FRAMES];
        for bin in 0..N_BINS {
            data[bin * PATCH_FRAMES..bin * PATCH_FRAMES + width].copy_from_slice(&mag.row(bin)[offset..offset + width]);
        }
        patches.push(MagPatch { data, frame_offset: offset, pad: PATCH_FRAMES - width, normalized: false });
        offset += PATCH_FRAMES;
    }
    Ok(patches)
}

/// Inverse of [`patchify`]: reassembles `frames` columns, dropping padding.
pub fn depatchify(patches: &[MagPatch], frames: usize) -> Result<MagSpec> {
    let mut out = MagSpec::filled(N_BINS, frames, 0.0);
    let mut covered = 0;
    for p in patches {
        let width = PATCH_FRAMES - p.pad;
        if p.frame_offset + width > frames {
            return Err(Error::shape("depatchify", format!("patch at {} overruns {frames} frames", p.frame_offset)));
        }
        for bin in 0..N_BINS {
            out.data[bin * frames + p.frame_offset..][..width].copy_from_slice(&p.data[bin * PATCH_FRAMES..][..width]);
        }
        covered += width;
    }
    if covered != frames {
        return Err(Error::shape("depatchify", format!("patches cover {covered} of {frames} frames")));
    }
    Ok(out)
}

/// Range of `log1p` magnitudes seen over the training corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalStats {
    pub min_val: f64,
    pub max_val: f64,
}

impl GlobalStats {
    fn check(&self) -> Result<()> {
        if self.min_val < self.max_val && self.min_val.is_finite() && self.max_val.is_finite() {
            Ok(())
        } else {
            Err(Error::DegenerateStats { min: self.min_val, max: self.max_val })
        }
    }

    pub fn normalize_value(&self, magnitude: f64) -> f64 {
        ((magnitude.ln_1p() - self.min_val) / (self.max_val - self.min_val)).clamp(0.0, 1.0)
    }
}

pub fn compute_global_stats<'a>(corpus: impl IntoIterator<Item = &'a MagPatch>) -> Result<GlobalStats> {
    let mut stats: Option<GlobalStats> = None;
    for patch in corpus {
        if patch.normalized {
            return Err(Error::InvalidArgument("global stats need raw magnitude patches".into()));
        }
        for &v in &patch.data {
            let l = v.ln_1p();
            let s = stats.get_or_insert(GlobalStats { min_val: l, max_val: l });
            s.min_val = s.min_val.min(l);
            s.max_val = s.max_val.max(l);
        }
    }
    stats.ok_or(Error::Empty("global stats corpus"))
}

/// Min-max normalizes `log1p(mag)` into `[0, 1]`, clamping out-of-range values.
pub fn normalize(patch: &MagPatch, stats: &GlobalStats) -> Result<MagPatch> {
    stats.check()?;
    if patch.normalized {
        return Err(Error::InvalidArgument("patch is already normalized".into()));
    }
    Ok(MagPatch { data: patch.data.iter().map(|&v| stats.normalize_value(v)).collect(), normalized: true, ..*patch })
}
