//! Synthetic harmonic + percussive tracks.
//!
//! Harmonic stem: sustained notes built from partials `k·f0` with amplitude
//! `k^-partial_decay`, linear attack and release. Percussive stem: white-noise
//! bursts with exponential decay at Poisson onsets, smoothed by a one-pole
//! low-pass (`band_emphasis`). The mixture is the sum of the gain-weighted
//! stems, peak-normalized to 0.9.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)` and switched to stream `track_seed`, so output is
//! reproducible across platforms.

use std::f64::consts::TAU;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Fields;
use crate::dsp::{SAMPLE_RATE, WIN_LENGTH};
use crate::error::{Error, Result};

pub const PEAK: f64 = 0.9;
pub const DRUMS: &str = "drums";
pub const HARMONIC_REST: &str = "harmonic_rest";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_tracks: usize,
    pub duration_s: f64,
    /// Simultaneous harmonic voices.
    pub voices: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub partials: usize,
    pub partial_decay: f64,
    pub note_min_s: f64,
    pub note_max_s: f64,
    pub attack_s: f64,
    pub release_s: f64,
    pub onset_rate_hz: f64,
    pub burst_decay_ms: f64,
    /// One-pole low-pass coefficient in `[0, 1)`; 0 leaves the noise white.
    pub band_emphasis: f64,
    pub harmonic_gain: f64,
    pub percussive_gain: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tracks: 15,
            duration_s: 10.0,
            voices: 2,
            f0_min: 110.0,
            f0_max: 880.0,
            partials: 8,
            partial_decay: 1.0,
            note_min_s: 0.5,
            note_max_s: 2.0,
            attack_s: 0.05,
            release_s: 0.1,
            onset_rate_hz: 4.0,
            burst_decay_ms: 30.0,
            band_emphasis: 0.3,
            harmonic_gain: 1.0,
            percussive_gain: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        let top = self.f0_max * self.partials as f64;
        if top >= nyquist {
            return bad(format!("highest partial {top} Hz is at or above Nyquist ({nyquist} Hz)"));
        }
        if !(self.f0_min > 0.0 && self.f0_min <= self.f0_max) {
            return bad(format!("need 0 < f0_min <= f0_max, got {} and {}", self.f0_min, self.f0_max));
        }
        for (name, v) in [
            ("duration_s", self.duration_s),
            ("note_min_s", self.note_min_s),
            ("onset_rate_hz", self.onset_rate_hz),
            ("burst_decay_ms", self.burst_decay_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("attack_s", self.attack_s),
            ("release_s", self.release_s),
            ("partial_decay", self.partial_decay),
            ("harmonic_gain", self.harmonic_gain),
            ("percussive_gain", self.percussive_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.note_max_s < self.note_min_s {
            return bad("note_max_s must be >= note_min_s".into());
        }
        if !(0.0..1.0).contains(&self.band_emphasis) {
            return bad(format!("band_emphasis must be in [0, 1), got {}", self.band_emphasis));
        }
        if self.n_tracks == 0 || self.voices == 0 || self.partials == 0 {
            return bad("n_tracks, voices and partials must be at least 1".into());
        }
        if self.n_samples() < WIN_LENGTH {
            return bad(format!("duration_s {} is shorter than one analysis window", self.duration_s));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * f64::from(SAMPLE_RATE)).round() as usize
    }

    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut f = Fields::new(text)?;
        let mut s = SynthSpec::default();
        f.take("seed", &mut s.seed)?;
        f.take("n_tracks", &mut s.n_tracks)?;
        f.take("duration_s", &mut s.duration_s)?;
        f.take("voices", &mut s.voices)?;
        f.take("f0_min", &mut s.f0_min)?;
        f.take("f0_max", &mut s.f0_max)?;
        f.take("partials", &mut s.partials)?;
        f.take("partial_decay", &mut s.partial_decay)?;
        f.take("note_min_s", &mut s.note_min_s)?;
        f.take("note_max_s", &mut s.note_max_s)?;
        f.take("attack_s", &mut s.attack_s)?;
        f.take("release_s", &mut s.release_s)?;
        f.take("onset_rate_hz", &mut s.onset_rate_hz)?;
        f.take("burst_decay_ms", &mut s.burst_decay_ms)?;
        f.take("band_emphasis", &mut s.band_emphasis)?;
        f.take("harmonic_gain", &mut s.harmonic_gain)?;
        f.take("percussive_gain", &mut s.percussive_gain)?;
        f.finish()?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: String,
    pub mixture: Vec<f64>,
    /// `drums` and `harmonic_rest`.
    pub stems: IndexMap<String, Vec<f64>>,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Track {
    pub fn drums(&self) -> &[f64] {
        &self.stems[DRUMS]
    }

    pub fn harmonic(&self) -> &[f64] {
        &self.stems[HARMONIC_REST]
    }
}

pub fn track_id(track_seed: u64) -> String {
    format!("track{track_seed:03}")
}

fn harmonic_stem(spec: &SynthSpec, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let mut out = vec![0.0; n];
    let (ln_lo, ln_hi) = (spec.f0_min.ln(), spec.f0_max.ln());
    for _ in 0..spec.voices {
        let mut start = 0;
        while start < n {
            let len = ((rng.gen_range(spec.note_min_s..=spec.note_max_s) * sr) as usize).max(1);
            let end = (start + len).min(n);
            let f0 = rng.gen_range(ln_lo..=ln_hi).exp();
            let phases: Vec<f64> = (0..spec.partials).map(|_| rng.gen_range(0.0..TAU)).collect();
            let len = end - start;
            let attack = ((spec.attack_s * sr) as usize).min(len / 2).max(1);
            let release = ((spec.release_s * sr) as usize).min(len / 2).max(1);
            for i in 0..len {
                let env = ((i as f64 + 1.0) / attack as f64).min((len - i) as f64 / release as f64).min(1.0);
                let t = i as f64 / sr;
                let tone: f64 = phases
                    .iter()
                    .enumerate()
                    .map(|(k, ph)| {
                        let k = (k + 1) as f64;
                        k.powf(-spec.partial_decay) * (TAU * k * f0 * t + ph).sin()
                    })
                    .sum();
                out[start + i] += env * tone / spec.voices as f64;
            }
            start = end;
        }
    }
    out
}

fn percussive_stem(spec: &SynthSpec, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let decay = spec.burst_decay_ms * 1e-3 * sr;
    let burst_len = (6.0 * decay).ceil() as usize;
    let mut out = vec![0.0; n];
    // exponential inter-onset gaps
    let mut t = -(1.0 - rng.gen::<f64>()).ln() / spec.onset_rate_hz;
    while ((t * sr) as usize) < n {
        let start = (t * sr) as usize;
        let amp = rng.gen_range(0.5..=1.0);
        for i in 0..burst_len.min(n - start) {
            out[start + i] += amp * rng.gen_range(-1.0..=1.0) * (-(i as f64) / decay).exp();
        }
        t += -(1.0 - rng.gen::<f64>()).ln() / spec.onset_rate_hz;
    }
    let a = spec.band_emphasis;
    let mut y = 0.0;
    for v in &mut out {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
    out
}

/// Generates track number `track_seed` of the corpus described by `spec`.
pub fn synth_track(spec: &SynthSpec, track_seed: u64) -> Result<Track> {
    spec.validate()?;
    let n = spec.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(track_seed);
    let harm = harmonic_stem(spec, &mut rng, n);
    let perc = percussive_stem(spec, &mut rng, n);

    let mut drums: Vec<f64> = perc.iter().map(|v| spec.percussive_gain * v).collect();
    let mut rest: Vec<f64> = harm.iter().map(|v| spec.harmonic_gain * v).collect();
    let peak = drums.iter().zip(&rest).map(|(d, h)| (d + h).abs()).fold(0.0, f64::max);
    if peak > 0.0 {
        let scale = PEAK / peak;
        drums.iter_mut().chain(rest.iter_mut()).for_each(|v| *v *= scale);
    }
    let mixture = drums.iter().zip(&rest).map(|(d, h)| d + h).collect();
    let mut stems = IndexMap::new();
    stems.insert(DRUMS.to_string(), drums);
    stems.insert(HARMONIC_REST.to_string(), rest);
    Ok(Track {
        id: track_id(track_seed),
        mixture,
        stems,
        duration_s: n as f64 / f64::from(SAMPLE_RATE),
        sample_rate: SAMPLE_RATE,
    })
}
