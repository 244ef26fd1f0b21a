use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use flor_cli::checkpoint;
use flor_cli::commands::{output_dir, CHECKPOINT_FILE, METRICS_FILE, OUTPUT_ROOT_ENV};
use flor_cli::metrics::{read_log, Phase};
use flor_cli::{cmd_eval, cmd_probe, cmd_synth, cmd_train, ProbeKind, RunConfig};
use flor_core::backbone::build_model;
use flor_core::data::{ingest_folder, two_domain_benchmark, Split};
use flor_core::rng::{purpose, SeedStream};

const TINY: &str = r#"
seed = 3

[backbone]
norm_mode = "flor"
channels = [4, 8]

[data]
image_size = 16
base_classes = 4
novel_classes = 5
base_per_class = 6
novel_per_class = 6

[train]
epochs = 2
batch_size = 8

[protocol]
k = 3
n = 1
q = 2
episodes = 4

[eval.finetune]
steps = 2

[probe]
grid = [2, 2]
"#;

fn tiny(dir: &Path, overrides: &[&str]) -> RunConfig {
    let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    o.push(format!("output_dir = {:?}", dir.display().to_string()).replacen(" = ", "=", 1));
    RunConfig::parse(TINY, &o).unwrap()
}

fn parse_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect()).collect();
    (header, rows)
}

fn check_curve(path: &Path, rows: usize) -> Vec<Vec<f64>> {
    let (header, data) = parse_csv(path);
    assert_eq!(header, ["x", "accuracy", "ci95"]);
    assert_eq!(data.len(), rows);
    for r in &data {
        assert!((0.0..=1.0).contains(&r[1]) && r[2].is_finite() && r[2] >= 0.0, "{r:?}");
    }
    data
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.epochs=0"]);
    let path = cmd_train(&cfg).unwrap();
    let (manifest, model) = checkpoint::load(&path).unwrap();
    let init = build_model::<f32>(&cfg.backbone_config(), 4, &mut SeedStream::new(3).split(purpose::INIT).rng()).unwrap();
    assert_eq!(model.store, init.store);
    assert_eq!(manifest.epoch, 0);
    let log = dir.path().join(METRICS_FILE);
    assert!(!log.exists() || read_log(&log).unwrap().is_empty());
    assert_eq!(RunConfig::parse(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap(), &[]).unwrap(), cfg);
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.epochs=1"]);
    let path = cmd_train(&cfg).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (m, model) = checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.flor");
    checkpoint::save(&again, &model, m.epoch, m.rng.seed).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn sam_training_logs_clean_and_perturbed_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["sam.enabled=true", "sam.eta=0.5", "sam.layers=[2]"]);
    cmd_train(&cfg).unwrap();
    let log = read_log(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.len(), 2);
    for (i, r) in log.iter().enumerate() {
        assert_eq!((r.phase, r.timestamp), (Phase::Train, i as u64));
        assert!(r.metrics.contains_key("loss") && r.metrics.contains_key("perturbed_loss"));
    }
}

#[test]
fn eval_and_probes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    cmd_train(&cfg).unwrap();

    let (r, line) = cmd_eval(&cfg, None).unwrap();
    assert!(line.ends_with(&r.display()));
    let (_, again) = cmd_eval(&cfg, None).unwrap();
    assert_eq!(line, again);
    let ft = tiny(dir.path(), &["eval.method=finetune"]);
    let (_, ft_line) = cmd_eval(&ft, None).unwrap();
    assert!(ft_line.starts_with("finetune"));
    let (one, _) = cmd_eval(&tiny(dir.path(), &["protocol.k=1"]), None).unwrap();
    assert_eq!(one.mean_accuracy, 1.0);
    let evals: Vec<_> = read_log(&dir.path().join(METRICS_FILE)).unwrap().into_iter().filter(|r| r.phase == Phase::Eval).collect();
    assert_eq!(evals.len(), 4);
    let methods: Vec<&str> = evals.iter().map(|r| r.tags["method"].as_str()).collect();
    assert_eq!(methods, ["prototype", "prototype", "finetune", "prototype"]);

    let p = cmd_probe(&tiny(dir.path(), &["probe.deltas=[0, 0.5, 1]"]), ProbeKind::DeltaSweep, None).unwrap();
    assert!(p.file_name().unwrap().to_str().unwrap().starts_with("delta_sweep"));
    check_curve(&p, 3);

    let p = cmd_probe(&tiny(dir.path(), &["probe.variances=[0]"]), ProbeKind::Perturb, None).unwrap();
    let rows = check_curve(&p, 1);
    assert_eq!(rows[0][1], r.mean_accuracy);

    let p = cmd_probe(&tiny(dir.path(), &["probe.variances=[0, 0.1]", "probe.space=feature"]), ProbeKind::Perturb, None).unwrap();
    check_curve(&p, 2);

    let g = tiny(dir.path(), &["probe.freeze_depths=[0, 2]", "probe.lr_ratios=[0.1, 0.5, 1]", "protocol.episodes=1"]);
    let p = cmd_probe(&g, ProbeKind::FinetuneGrid, None).unwrap();
    assert!(p.ends_with("finetune_grid_2x3.csv"));
    let (header, rows) = parse_csv(&p);
    assert_eq!(header, ["freeze_depth", "lr_ratio", "accuracy", "ci95"]);
    assert_eq!(rows.len(), 6);

    let p = cmd_probe(&cfg, ProbeKind::RepDistance, None).unwrap();
    let (header, rows) = parse_csv(&p);
    assert_eq!(header[2], "distance");
    assert!(!rows.is_empty() && rows.iter().all(|r| r[2] >= 0.0));
}

#[test]
fn mismatched_or_incompatible_checkpoints_fail() {
    let dir = tempfile::tempdir().unwrap();
    let bn = tiny(dir.path(), &["backbone.norm_mode=bn", "train.epochs=0"]);
    cmd_train(&bn).unwrap();
    let err = cmd_eval(&tiny(dir.path(), &[]), None).unwrap_err();
    assert!(format!("{err:#}").contains("config mismatch"));
    let err = cmd_probe(&bn, ProbeKind::RepDistance, None).unwrap_err();
    assert!(format!("{err:#}").contains("incompatible probe"));
    assert!(cmd_probe(&bn, ProbeKind::DeltaSweep, None).is_err());
}

#[test]
fn sam_sweep_trains_one_model_per_eta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["train.epochs=1", "sam.layers=[1]", "probe.etas=[0, 1]"]);
    let p = cmd_probe(&cfg, ProbeKind::SamSweep, None).unwrap();
    let rows = check_curve(&p, 2);
    assert_eq!((rows[0][0], rows[1][0]), (0.0, 1.0));
}

#[test]
fn synth_writes_a_readable_folder_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["data.base_classes=2", "data.base_per_class=3"]);
    let out = dir.path().join("synth");
    cmd_synth(&cfg, &out).unwrap();
    let classes: Vec<PathBuf> = std::fs::read_dir(out.join("base")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(classes.len(), 2);
    assert!(classes.iter().all(|c| std::fs::read_dir(c).unwrap().count() == 3));

    let b = two_domain_benchmark(&cfg.data.benchmark(), SeedStream::new(3).split(purpose::DATA)).unwrap();
    let back = ingest_folder(&out.join("novel_target"), 16, Split::Novel).unwrap();
    let count = |labels: &[usize]| labels.iter().fold(BTreeMap::new(), |mut m, &l| {
        *m.entry(l).or_insert(0) += 1;
        m
    });
    assert_eq!(count(back.labels()), count(b.novel_target.labels()));
    for i in 0..back.len() {
        let err = back.image(i).iter().zip(b.novel_target.image(i)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
    // folder configs train from the exported tree
    let folder = tiny(
        &dir.path().join("folder_run"),
        &["data.kind=folder", &format!("data.base_dir={:?}", out.join("base").display().to_string()), &format!("data.novel_dir={:?}", out.join("novel_source").display().to_string()), "train.epochs=1", "data.image_size=16"],
    );
    cmd_train(&folder).unwrap();
    assert!(cmd_eval(&folder, None).is_ok());
}

fn flor(args: &[&str], root: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_flor")).args(args).env(OUTPUT_ROOT_ENV, root).output().unwrap()
}

#[test]
fn binary_reruns_are_byte_identical_under_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, format!("output_dir = \"run\"\n{TINY}")).unwrap();
    let c = config.to_str().unwrap();
    let mut outputs = Vec::new();
    for root in ["a", "b"] {
        let root = dir.path().join(root);
        for args in [vec!["train", "--config", c], vec!["eval", "--config", c], vec!["probe", "delta-sweep", "--config", c, "--set", "probe.deltas=[0,1]"]] {
            let o = flor(&args, &root);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            outputs.push(String::from_utf8(o.stdout).unwrap());
        }
        assert!(root.join("run").join(CHECKPOINT_FILE).exists());
    }
    let read = |root: &str, f: &str| std::fs::read(dir.path().join(root).join("run").join(f)).unwrap();
    for f in [CHECKPOINT_FILE, METRICS_FILE, "config.toml", "delta_sweep_2pts.csv"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_eq!(outputs[1], outputs[4]);
    let acc = outputs[1].trim().rsplit("  ").next().unwrap();
    assert!(acc.contains(" ±") && acc.split(" ±").all(|v| v.len() >= 4 && v.contains('.')), "{acc}");
}

#[test]
fn binary_errors_are_one_line_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["train", "--set", "train.epoch=3"], vec!["eval", "--set", "protocol.k=2"]] {
        let o = flor(&args, dir.path());
        assert_eq!(o.status.code(), Some(1));
        let err = String::from_utf8(o.stderr).unwrap();
        assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
    }
    // unset root keeps relative paths relative to the working directory
    let cfg = RunConfig::default();
    if std::env::var_os(OUTPUT_ROOT_ENV).is_none() {
        assert_eq!(output_dir(&cfg), Path::new("runs/default"));
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        cfg.validate().unwrap();
    }
}
