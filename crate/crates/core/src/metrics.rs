//! BSS-Eval style SDR / SIR / SAR for two-source separation.
//!
//! This is the zero-delay scalar-projection variant computed over whole
//! tracks. Absolute values are not comparable to filtered, framewise
//! implementations; rankings between methods are what matters.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Ratios are reported in `[-CAP_DB, CAP_DB]`.
pub const CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Splits `estimate` into target, interference and artifact parts relative
/// to `s_true` and the interfering reference `s_other`.
pub fn decompose(estimate: &[f64], s_true: &[f64], s_other: &[f64]) -> Result<Decomposition> {
    let n = estimate.len();
    if s_true.len() != n || s_other.len() != n {
        return Err(Error::shape(
            "decompose",
            format!("estimate {n}, references {} and {}", s_true.len(), s_other.len()),
        ));
    }
    let (g11, g22, g12) = (energy(s_true), energy(s_other), dot(s_true, s_other));
    if g11 == 0.0 || g22 == 0.0 {
        return Err(Error::ZeroReference);
    }
    let det = g11 * g22 - g12 * g12;
    if det <= 1e-12 * g11 * g22 {
        return Err(Error::CollinearReferences);
    }
    let (b1, b2) = (dot(estimate, s_true), dot(estimate, s_other));
    let c1 = (g22 * b1 - g12 * b2) / det;
    let c2 = (g11 * b2 - g12 * b1) / det;
    let a = b1 / g11;

    let s_target: Vec<f64> = s_true.iter().map(|s| a * s).collect();
    let e_interf: Vec<f64> = s_true.iter().zip(s_other).zip(&s_target).map(|((s, o), t)| c1 * s + c2 * o - t).collect();
    let e_artif = estimate.iter().zip(&s_target).zip(&e_interf).map(|((e, t), i)| e - t - i).collect();
    Ok(Decomposition { s_target, e_interf, e_artif })
}

/// `10·log10(num/den)` clamped to `±CAP_DB`; a zero numerator is the lower
/// cap, a zero denominator the upper.
fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        -CAP_DB
    } else if den <= 0.0 {
        CAP_DB
    } else {
        (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceMetrics {
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
}

impl SourceMetrics {
    fn mean(a: &Self, b: &Self) -> Self {
        Self {
            sdr_db: 0.5 * (a.sdr_db + b.sdr_db),
            sir_db: 0.5 * (a.sir_db + b.sir_db),
            sar_db: 0.5 * (a.sar_db + b.sar_db),
        }
    }
}

pub fn sdr_sir_sar(d: &Decomposition) -> SourceMetrics {
    let target = energy(&d.s_target);
    if target == 0.0 {
        log::warn!("estimate has no component along its reference; ratios capped");
    }
    let sum = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    SourceMetrics {
        sdr_db: ratio_db(target, energy(&sum(&d.e_interf, &d.e_artif))),
        sir_db: ratio_db(target, energy(&d.e_interf)),
        sar_db: ratio_db(energy(&sum(&d.s_target, &d.e_interf)), energy(&d.e_artif)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub track: String,
    pub percussive: SourceMetrics,
    pub harmonic: SourceMetrics,
    pub average: SourceMetrics,
}

pub fn evaluate_track(track: &str, est_p: &[f64], est_h: &[f64], ref_p: &[f64], ref_h: &[f64]) -> Result<EvalReport> {
    if est_h.len() != est_p.len() {
        return Err(Error::shape("evaluate_track", format!("estimates {} vs {}", est_p.len(), est_h.len())));
    }
    let percussive = sdr_sir_sar(&decompose(est_p, ref_p, ref_h)?);
    let harmonic = sdr_sir_sar(&decompose(est_h, ref_h, ref_p)?);
    Ok(EvalReport {
        track: track.to_string(),
        percussive,
        harmonic,
        average: SourceMetrics::mean(&percussive, &harmonic),
    })
}

pub const REPORT_HEADER: &str = "track,source,sdr_db,sir_db,sar_db";

/// CSV with one row per source and an `average` row per track.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        for (source, m) in [("percussive", &r.percussive), ("harmonic", &r.harmonic), ("average", &r.average)] {
            let _ = writeln!(out, "{},{source},{},{},{}", r.track, m.sdr_db, m.sir_db, m.sar_db);
        }
    }
    out
}

pub fn write_report(path: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::write(path, report_csv(reports))?;
    Ok(())
}
