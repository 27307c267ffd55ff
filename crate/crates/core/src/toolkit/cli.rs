//! `hpss` command line. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::RunConfig;
use super::dataset::{self, ManifestRow, StemsLayout, DRUMS_WAV, OTHER_WAV};
use super::pipeline::separate_with_checkpoint;
use super::synth::{synth_track, SynthSpec};
use super::wav::{read_wav, write_wav};
use crate::baseline::{self, MaskMode, MedianConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::network::{load_checkpoint, ThreeWayMDenseNet};
use crate::training;

#[derive(Parser, Debug)]
#[command(name = "hpss", version, about = "Harmonic-percussive source separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; metrics are written to `<out>.metrics.csv`
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `synthetic` (manifest-driven) or `musdb-wav`
        #[arg(long, default_value_t = StemsLayout::Synthetic)]
        stems_layout: StemsLayout,
        #[arg(long)]
        resample_off_ok: bool,
    },
    /// Separate a file with a trained checkpoint
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_perc: PathBuf,
        #[arg(long)]
        out_harm: PathBuf,
        #[arg(long)]
        resample_off_ok: bool,
    },
    /// Separate a file with median filtering
    Baseline {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_perc: PathBuf,
        #[arg(long)]
        out_harm: PathBuf,
        #[arg(long, default_value_t = 17)]
        l_harm: usize,
        #[arg(long, default_value_t = 17)]
        l_perc: usize,
        /// Hard masks instead of soft ones
        #[arg(long)]
        binary: bool,
        #[arg(long)]
        resample_off_ok: bool,
    },
    /// Score estimates (`drums.wav`, `other.wav`) against references
    Eval {
        #[arg(long)]
        est_dir: PathBuf,
        #[arg(long)]
        ref_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        resample_off_ok: bool,
    },
    /// Print the trainable parameter total for a config
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { data, config, out, stems_layout, resample_off_ok } => {
            let cfg = RunConfig::load(&config)?;
            let tracks = dataset::load_training_tracks(&data, stems_layout, resample_off_ok)?;
            let report = training::train(&tracks, &cfg.network, &cfg.training, &out)?;
            for e in &report.epochs {
                println!("epoch {}: train {:.6} val {:.6} lr {:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
            }
            println!("best val loss {:.6}, checkpoint {}", report.best_val_loss, out.display());
            Ok(())
        }
        Command::Separate { ckpt, input, out_perc, out_harm, resample_off_ok } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let audio = read_wav(&input, resample_off_ok)?;
            let (p, h) = separate_with_checkpoint(&ckpt, &audio.samples, audio.sample_rate)?;
            write_wav(&out_perc, &p, audio.sample_rate)?;
            write_wav(&out_harm, &h, audio.sample_rate)
        }
        Command::Baseline { input, out_perc, out_harm, l_harm, l_perc, binary, resample_off_ok } => {
            let cfg = MedianConfig {
                l_harm,
                l_perc,
                mask_mode: if binary { MaskMode::Binary } else { MedianConfig::default().mask_mode },
                ..Default::default()
            };
            let audio = read_wav(&input, resample_off_ok)?;
            let (p, h) = baseline::separate(&audio.samples, audio.sample_rate, &cfg)?;
            write_wav(&out_perc, &p, audio.sample_rate)?;
            write_wav(&out_harm, &h, audio.sample_rate)
        }
        Command::Eval { est_dir, ref_dir, report, resample_off_ok } => {
            let reports = eval_dirs(&est_dir, &ref_dir, resample_off_ok)?;
            metrics::write_report(&report, &reports)?;
            for r in &reports {
                println!("{}: average SDR {:.2} dB", r.track, r.average.sdr_db);
            }
            Ok(())
        }
        Command::ParamCount { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", ThreeWayMDenseNet::new(cfg.network)?.param_count());
            Ok(())
        }
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::load(spec_path)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(spec.n_tracks);
    for seed in 0..spec.n_tracks as u64 {
        let track = synth_track(&spec, seed)?;
        dataset::write_track(out, &track)?;
        rows.push(ManifestRow { id: track.id.clone(), duration_s: track.duration_s, seed });
    }
    dataset::write_manifest(&out.join(dataset::MANIFEST), &rows)?;
    println!("wrote {} tracks to {}", rows.len(), out.display());
    Ok(())
}

/// Track directories under `dir`, or `dir` itself when it holds the stems.
fn eval_tracks(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join(DRUMS_WAV).is_file() {
        return Ok(vec![(name(dir), dir.to_path_buf())]);
    }
    Ok(dataset::track_dirs_with(dir, DRUMS_WAV)?.into_iter().map(|p| (name(&p), p)).collect())
}

fn eval_dirs(est_dir: &Path, ref_dir: &Path, allow_any_rate: bool) -> Result<Vec<EvalReport>> {
    let ests = eval_tracks(est_dir)?;
    if ests.is_empty() {
        return Err(Error::Empty("estimate directory"));
    }
    let flat_ref = ref_dir.join(DRUMS_WAV).is_file();
    let mut reports = Vec::with_capacity(ests.len());
    for (id, est) in ests {
        let refs = if flat_ref { ref_dir.to_path_buf() } else { ref_dir.join(&id) };
        let load = |dir: &Path, file: &str| read_wav(&dir.join(file), allow_any_rate).map(|a| a.samples);
        let (est_p, est_h) = (load(&est, DRUMS_WAV)?, load(&est, OTHER_WAV)?);
        let (ref_p, ref_h) = (load(&refs, DRUMS_WAV)?, load(&refs, OTHER_WAV)?);
        if est_p.len() != ref_p.len() || ref_h.len() != ref_p.len() {
            return Err(Error::shape("eval", format!("track `{id}`: estimate and reference lengths differ")));
        }
        reports.push(metrics::evaluate_track(&id, &est_p, &est_h, &ref_p, &ref_h)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["hpss"]), 2);
        assert_eq!(run(["hpss", "frobnicate"]), 2);
        assert_eq!(run(["hpss", "param-count"]), 2);
        assert_eq!(run(["hpss", "train", "--data", "d", "--config", "c", "--out", "o", "--stems-layout", "x"]), 2);
        assert_eq!(run(["hpss", "--help"]), 0);
    }

    #[test]
    fn runtime_error_exits_1() {
        assert_eq!(run(["hpss", "param-count", "--config", "/nonexistent/x.conf"]), 1);
    }

    #[test]
    fn param_count_small_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("small.conf");
        std::fs::write(&cfg, "growth_rate = 2\nlayers_per_block = 2\ndepth = 2\nfinal_block_layers = 2\n").unwrap();
        assert_eq!(run([OsString::from("hpss"), "param-count".into(), "--config".into(), cfg.into()]), 0);
    }
}
