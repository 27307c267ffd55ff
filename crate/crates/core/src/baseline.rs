//! Median-filtering HPSS: harmonic energy is smooth along time, percussive
//! energy is smooth along frequency.

use crate::dsp::{self, MagSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Wiener-style ratio of enhanced spectrograms raised to `power`.
    Soft { power: f64 },
    /// Hard assignment; ties go to the harmonic source.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MedianConfig {
    /// Median length along time (per frequency row).
    pub l_harm: usize,
    /// Median length along frequency (per time column).
    pub l_perc: usize,
    pub mask_mode: MaskMode,
    pub eps: f64,
}

impl Default for MedianConfig {
    fn default() -> Self {
        Self { l_harm: 17, l_perc: 17, mask_mode: MaskMode::Soft { power: 2.0 }, eps: 1e-12 }
    }
}

impl MedianConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("l_harm", self.l_harm), ("l_perc", self.l_perc)] {
            // length 1 is the identity filter
            if l % 2 == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be odd, got {l}")));
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be non-negative, got {}", self.eps)));
        }
        if let MaskMode::Soft { power } = self.mask_mode {
            if !(power > 0.0 && power.is_finite()) {
                return Err(Error::InvalidArgument(format!("mask power must be positive, got {power}")));
            }
        }
        Ok(())
    }
}

/// Maps any integer index into `0..n` by half-sample symmetric reflection
/// (`x[-1] = x[0]`), repeated as often as needed.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let k = i.rem_euclid(period) as usize;
    if k < n {
        k
    } else {
        2 * n - 1 - k
    }
}

/// Sliding median with reflected edges; the output has the input's length.
pub fn median_filter_1d(values: &[f64], length: usize) -> Result<Vec<f64>> {
    if length.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("median length must be odd, got {length}")));
    }
    let n = values.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = (length / 2) as isize;
    let mut window = vec![0.0; length];
    Ok((0..n as isize)
        .map(|i| {
            for (slot, j) in window.iter_mut().zip(i - half..=i + half) {
                *slot = values[reflect(j, n)];
            }
            *window.select_nth_unstable_by(length / 2, f64::total_cmp).1
        })
        .collect())
}

/// Returns `(harmonic_enhanced, percussive_enhanced)`.
pub fn enhance(x: &MagSpec, cfg: &MedianConfig) -> Result<(MagSpec, MagSpec)> {
    cfg.validate()?;
    let mut h = Vec::with_capacity(x.data.len());
    for bin in 0..x.bins {
        h.extend(median_filter_1d(x.row(bin), cfg.l_harm)?);
    }
    let mut p = MagSpec::filled(x.bins, x.frames, 0.0);
    for frame in 0..x.frames {
        for (bin, v) in median_filter_1d(&x.column(frame), cfg.l_perc)?.into_iter().enumerate() {
            p.set(bin, frame, v);
        }
    }
    Ok((MagSpec::new(x.bins, x.frames, h)?, p))
}

/// Percussive and harmonic masks for magnitude spectrogram `x`.
///
/// Soft masks share one denominator and `m_h = 1 - m_p`, so they sum to one
/// exactly; bins where both enhanced values vanish go to the harmonic source.
pub fn median_hpss(x: &MagSpec, cfg: &MedianConfig) -> Result<(MagSpec, MagSpec)> {
    if x.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("median_hpss needs a finite non-negative spectrogram".into()));
    }
    let (h, p) = enhance(x, cfg)?;
    let m_p: Vec<f64> = h
        .data
        .iter()
        .zip(&p.data)
        .map(|(&hv, &pv)| match cfg.mask_mode {
            MaskMode::Soft { power } => {
                let (pp, hp) = (pv.powf(power), hv.powf(power));
                let den = pp + hp + cfg.eps;
                if den > 0.0 {
                    pp / den
                } else {
                    0.0
                }
            }
            MaskMode::Binary => f64::from(u8::from(pv > hv)),
        })
        .collect();
    let m_h = m_p.iter().map(|m| 1.0 - m).collect();
    Ok((MagSpec::new(x.bins, x.frames, m_p)?, MagSpec::new(x.bins, x.frames, m_h)?))
}

/// Separates a mono signal; returns `(percussive, harmonic)` samples.
pub fn separate(signal: &[f64], sample_rate: u32, cfg: &MedianConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = dsp::stft(signal, sample_rate)?;
    let (m_p, m_h) = median_hpss(&spec.magnitude(), cfg)?;
    dsp::apply_masks(&m_p, &m_h, &spec)
}
