//! On-disk track layout: `<dir>/<id>/{mixture,drums,other}.wav` plus a
//! `manifest.tsv` of `id<TAB>duration_s<TAB>seed` rows.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synth::Track;
use super::wav::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::training::TrainingTrack;

pub const MANIFEST: &str = "manifest.tsv";
pub const MIXTURE_WAV: &str = "mixture.wav";
pub const DRUMS_WAV: &str = "drums.wav";
pub const OTHER_WAV: &str = "other.wav";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub duration_s: f64,
    pub seed: u64,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let body: String = rows.iter().map(|r| format!("{}\t{}\t{}\n", r.id, r.duration_s, r.seed)).collect();
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Config { line: i + 1, msg: format!("{}: {msg}", path.display()) };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, duration, seed] = fields[..] else {
            return Err(err("expected 3 tab-separated fields"));
        };
        rows.push(ManifestRow {
            id: id.to_string(),
            duration_s: duration.parse().map_err(|_| err("bad duration"))?,
            seed: seed.parse().map_err(|_| err("bad seed"))?,
        });
    }
    Ok(rows)
}

/// Writes one generated track under `dir/<id>/`.
pub fn write_track(dir: &Path, track: &Track) -> Result<()> {
    let td = dir.join(&track.id);
    std::fs::create_dir_all(&td)?;
    write_wav(&td.join(MIXTURE_WAV), &track.mixture, track.sample_rate)?;
    write_wav(&td.join(DRUMS_WAV), track.drums(), track.sample_rate)?;
    write_wav(&td.join(OTHER_WAV), track.harmonic(), track.sample_rate)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StemsLayout {
    /// Track directories listed in `manifest.tsv`.
    #[default]
    Synthetic,
    /// Every subdirectory holding `mixture.wav` and `drums.wav`; other stems
    /// are ignored.
    MusdbWav,
}

impl FromStr for StemsLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "musdb-wav" => Ok(Self::MusdbWav),
            other => Err(Error::InvalidArgument(format!("unknown stems layout `{other}`"))),
        }
    }
}

impl fmt::Display for StemsLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::MusdbWav => "musdb-wav",
        })
    }
}

/// Sorted subdirectories of `dir` that contain `file`.
pub fn track_dirs_with(dir: &Path, file: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && path.join(file).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_track(dir: &Path, id: &str, allow_any_rate: bool) -> Result<TrainingTrack> {
    let mix = read_wav(&dir.join(MIXTURE_WAV), allow_any_rate)?;
    let drums = read_wav(&dir.join(DRUMS_WAV), allow_any_rate)?;
    if mix.samples.len() != drums.samples.len() || mix.sample_rate != drums.sample_rate {
        return Err(Error::InvalidArgument(format!("track `{id}`: mixture and drums stems are not aligned")));
    }
    Ok(TrainingTrack { id: id.to_string(), mixture: mix.samples, drums: drums.samples, sample_rate: mix.sample_rate })
}

pub fn load_training_tracks(dir: &Path, layout: StemsLayout, allow_any_rate: bool) -> Result<Vec<TrainingTrack>> {
    let tracks = match layout {
        StemsLayout::Synthetic => read_manifest(&dir.join(MANIFEST))?
            .iter()
            .map(|row| load_track(&dir.join(&row.id), &row.id, allow_any_rate))
            .collect::<Result<Vec<_>>>()?,
        StemsLayout::MusdbWav => track_dirs_with(dir, MIXTURE_WAV)?
            .iter()
            .map(|p| {
                let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                load_track(p, &id, allow_any_rate)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if tracks.is_empty() {
        return Err(Error::Empty("track directory"));
    }
    Ok(tracks)
}
