mod common;

use std::ffi::OsString;
use std::path::Path;

use hpss_core::dsp::GlobalStats;
use hpss_core::network::{save_checkpoint, Checkpoint, NetworkConfig, ThreeWayMDenseNet};
use hpss_core::toolkit::{cli, read_wav};

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> i32 {
    let mut argv: Vec<OsString> = vec!["hpss".into()];
    argv.extend(args.iter().map(|a| a.as_ref().to_os_string()));
    cli::run(argv)
}

fn gen(dir: &Path, spec: &str) {
    let spec_path = dir.join("spec.txt");
    std::fs::write(&spec_path, spec).unwrap();
    assert_eq!(run(&[&"gen-data", &"--spec", &spec_path, &"--out", &dir.join("data")]), 0);
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = "seed = 3\nn_tracks = 2\nduration_s = 0.5\n";
    gen(a.path(), spec);
    gen(b.path(), spec);
    let manifest = std::fs::read_to_string(a.path().join("data/manifest.tsv")).unwrap();
    assert_eq!(manifest, "track000\t0.5\t0\ntrack001\t0.5\t1\n");
    for f in ["track000/mixture.wav", "track001/drums.wav", "track001/other.wav"] {
        assert_eq!(
            std::fs::read(a.path().join("data").join(f)).unwrap(),
            std::fs::read(b.path().join("data").join(f)).unwrap()
        );
    }
}

#[test]
fn separate_then_self_eval_hits_caps() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "n_tracks = 1\nduration_s = 1\n");
    let config = NetworkConfig::small();
    let params = ThreeWayMDenseNet::new(config.clone()).unwrap().init_params(0);
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &Checkpoint { config, stats: GlobalStats { min_val: 0.0, max_val: 4.0 }, params }).unwrap();

    let mixture = dir.path().join("data/track000/mixture.wav");
    let est = dir.path().join("est");
    std::fs::create_dir_all(&est).unwrap();
    let (perc, harm) = (est.join("drums.wav"), est.join("other.wav"));
    assert_eq!(run(&[&"separate", &"--ckpt", &ckpt, &"--in", &mixture, &"--out-perc", &perc, &"--out-harm", &harm]), 0);
    let n = read_wav(&mixture, false).unwrap().samples.len();
    assert_eq!(read_wav(&perc, false).unwrap().samples.len(), n);

    let report = dir.path().join("r.csv");
    assert_eq!(run(&[&"eval", &"--est-dir", &est, &"--ref-dir", &est, &"--report", &report]), 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    for row in csv.lines().skip(1) {
        assert!(row.ends_with(",100,100,100"), "{row}");
    }
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn baseline_command_preserves_length() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "n_tracks = 1\nduration_s = 0.7\n");
    let mixture = dir.path().join("data/track000/mixture.wav");
    let (p, h) = (dir.path().join("p.wav"), dir.path().join("h.wav"));
    assert_eq!(
        run(&[&"baseline", &"--in", &mixture, &"--out-perc", &p, &"--out-harm", &h, &"--l-harm", &"9", &"--binary"]),
        0
    );
    let n = read_wav(&mixture, false).unwrap().samples.len();
    assert_eq!(read_wav(&h, false).unwrap().samples.len(), n);
    assert_eq!(run(&[&"baseline", &"--in", &mixture, &"--out-perc", &p, &"--out-harm", &h, &"--l-harm", &"8"]), 1);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "n_tracks = 2\nduration_s = 0.5\n");
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "growth_rate = 2\nlearning_rate = 0.1\n").unwrap();
    let out = dir.path().join("m.ckpt");
    assert_eq!(run(&[&"train", &"--data", &dir.path().join("data"), &"--config", &cfg, &"--out", &out]), 1);
    assert!(!out.exists());
}
