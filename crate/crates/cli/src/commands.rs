use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flor_core::backbone::{build_model, Model, NormLayer, NormMode};
use flor_core::data::{ingest_folder, two_domain_benchmark, write_folder, Dataset, Split};
use flor_core::fewshot::{evaluate, train_base, Calibration, EvalResult, Method};
use flor_core::probes::{delta_sweep, finetune_grid, perturb_sweep, rep_distance, SweepCurve};
use flor_core::rng::{purpose, SeedStream};

use crate::checkpoint;
use crate::config::{DataKind, EvalDomain, RunConfig, SpaceKind};
use crate::metrics::{run_id, MetricsLog, Phase};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FLOR_OUTPUT_ROOT";

pub const CHECKPOINT_FILE: &str = "checkpoint.flor";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => Path::new(&root).join(&cfg.output_dir),
        None => cfg.output_dir.clone(),
    }
}

fn prepare(cfg: &RunConfig) -> Result<(PathBuf, MetricsLog)> {
    let dir = output_dir(cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let log = MetricsLog::open(&dir.join(METRICS_FILE), run_id(cfg))?;
    Ok((dir, log))
}

/// Base training split and the novel split used for evaluation.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.kind {
        DataKind::Synthetic => {
            let b = two_domain_benchmark(&d.benchmark(), SeedStream::new(cfg.seed).split(purpose::DATA))?;
            let novel = match d.eval_domain {
                EvalDomain::Source => b.novel_source,
                EvalDomain::Target => b.novel_target,
            };
            Ok((b.base, novel))
        }
        DataKind::Folder => {
            let (base, novel) = (d.base_dir.as_ref().expect("validated"), d.novel_dir.as_ref().expect("validated"));
            Ok((ingest_folder(base, d.image_size, Split::Base)?, ingest_folder(novel, d.image_size, Split::Novel)?))
        }
    }
}

fn fresh_model(cfg: &RunConfig, classes: usize) -> Result<Model<f32>> {
    Ok(build_model(&cfg.backbone_config(), classes, &mut SeedStream::new(cfg.seed).split(purpose::INIT).rng())?)
}

fn train_model(cfg: &RunConfig, base: &Dataset, log: &mut MetricsLog) -> Result<Model<f32>> {
    let mut model = fresh_model(cfg, base.num_classes())?;
    let seed = SeedStream::new(cfg.seed).split(purpose::TRAIN);
    let mut failure = None;
    train_base(&mut model, base, &cfg.train_config(), seed, |l| {
        let mut m = vec![("epoch", l.epoch as f64), ("loss", l.loss), ("accuracy", l.accuracy)];
        if let Some(p) = l.perturbed_loss {
            m.push(("perturbed_loss", p));
        }
        if let Err(e) = log.append(Phase::Train, m, [], None) {
            failure.get_or_insert(e);
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let (dir, mut log) = prepare(cfg)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).context("writing config snapshot")?;
    let (base, _) = datasets(cfg)?;
    let model = train_model(cfg, &base, &mut log)?;
    let path = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&path, &model, cfg.train.epochs, cfg.seed)?;
    Ok(path)
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Model<f32>> {
    let path = path.map_or_else(|| output_dir(cfg).join(CHECKPOINT_FILE), Path::to_path_buf);
    let (manifest, model) = checkpoint::load(&path)?;
    if manifest.backbone != cfg.backbone_config() {
        bail!(
            "config mismatch: {} was trained with backbone {:?}, the config describes {:?}",
            path.display(),
            manifest.backbone,
            cfg.backbone_config()
        );
    }
    Ok(model)
}

fn method_name(m: &Method) -> &'static str {
    match m {
        Method::Prototype => "prototype",
        Method::Transductive { .. } => "transductive",
        Method::Finetune(_) => "finetune",
    }
}

fn calibration_name(c: Calibration) -> &'static str {
    match c {
        Calibration::None => "none",
        Calibration::Inductive => "inductive",
        Calibration::Transductive => "transductive",
    }
}

/// Evaluate the checkpoint; returns the result and the printed line.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(EvalResult, String)> {
    let model = load_checkpoint(cfg, checkpoint)?;
    let (_, mut log) = prepare(cfg)?;
    let (_, novel) = datasets(cfg)?;
    let method = cfg.eval.method();
    let p = cfg.protocol.protocol();
    let r = evaluate(&model, &novel, &p, &method, cfg.eval.calibration, SeedStream::new(cfg.seed).split(purpose::EVAL))?;
    let line = format!(
        "{:<12} {:<12} {}-way {}-shot  {}",
        method_name(&method),
        calibration_name(cfg.eval.calibration),
        p.k,
        p.n,
        r.display()
    );
    log.append(
        Phase::Eval,
        [("mean_accuracy", r.mean_accuracy), ("ci95", r.ci95), ("episodes", p.episodes as f64)],
        [("method", method_name(&method).to_string()), ("calibration", calibration_name(cfg.eval.calibration).to_string())],
        Some(&cfg.protocol),
    )?;
    Ok((r, line))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeKind {
    Perturb,
    DeltaSweep,
    SamSweep,
    RepDistance,
    FinetuneGrid,
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join("-")
}

/// Run a probe and write its CSV; returns the CSV path.
pub fn cmd_probe(cfg: &RunConfig, kind: ProbeKind, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let (dir, mut log) = prepare(cfg)?;
    let (base, novel) = datasets(cfg)?;
    // episodes match `eval`, so a zero-variance sweep reproduces its accuracy
    let seed = SeedStream::new(cfg.seed).split(purpose::EVAL);
    let p = cfg.protocol.protocol();
    let pr = &cfg.probe;
    let (name, csv) = match kind {
        ProbeKind::Perturb => {
            let model = load_checkpoint(cfg, checkpoint)?;
            let spec = pr.perturbation();
            let space = match pr.space {
                SpaceKind::Pixel => "pixel".to_string(),
                SpaceKind::Feature => match pr.feature_layer {
                    Some(l) => format!("feature{l}"),
                    None => "feature".to_string(),
                },
            };
            let c = perturb_sweep(&model, &novel, &spec, &pr.variances, &p, seed)?;
            let name = format!("perturb_{space}_grid{}x{}_var{}.csv", pr.grid[0], pr.grid[1], fmt_list(&pr.variances));
            (name, c.to_csv())
        }
        ProbeKind::DeltaSweep => {
            let model = load_checkpoint(cfg, checkpoint)?;
            let c = delta_sweep(&model, &novel, &pr.deltas, &p, seed)?;
            (format!("delta_sweep_{}pts.csv", pr.deltas.len()), c.to_csv())
        }
        ProbeKind::SamSweep => {
            if cfg.backbone.norm_mode == NormMode::TwoBranch {
                bail!("incompatible probe: sam_sweep needs a single-stream model");
            }
            if cfg.sam.layers.is_empty() {
                bail!("sam_sweep needs sam.layers");
            }
            let mut curve = SweepCurve { x: Vec::new(), y: Vec::new(), ci: Vec::new() };
            for &eta in &pr.etas {
                let mut c = cfg.clone();
                c.sam.enabled = true;
                c.sam.eta = eta;
                let model = train_model(&c, &base, &mut log)?;
                let r = evaluate(&model, &novel, &p, &Method::Prototype, Calibration::None, seed)?;
                curve.x.push(eta);
                curve.y.push(r.mean_accuracy);
                curve.ci.push(r.ci95);
            }
            let layers = cfg.sam.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-");
            (format!("sam_sweep_layers{layers}_eta{}.csv", fmt_list(&pr.etas)), curve.to_csv())
        }
        ProbeKind::RepDistance => {
            let model = load_checkpoint(cfg, checkpoint)?;
            if !model.config.norm_mode.is_mixed() {
                bail!("incompatible probe: rep_distance needs a flor or two_branch checkpoint");
            }
            let idx: Vec<usize> = (0..novel.len().min(pr.rep_batch)).collect();
            let dist = rep_distance(&model, novel.batch::<f32>(&idx), false)?;
            let names: Vec<&str> =
                model.norms.iter().filter(|n| matches!(n.layer, NormLayer::Flor(_))).map(|n| n.name.as_str()).collect();
            let mut csv = String::from("representation,name,distance\n");
            for (i, d) in dist.iter().enumerate() {
                csv.push_str(&format!("{i},{},{d}\n", names[i]));
            }
            (format!("rep_distance_batch{}.csv", idx.len()), csv)
        }
        ProbeKind::FinetuneGrid => {
            let model = load_checkpoint(cfg, checkpoint)?;
            let g = finetune_grid(&model, &novel, &pr.freeze_depths, &pr.lr_ratios, &cfg.eval.finetune, &p, seed)?;
            (format!("finetune_grid_{}x{}.csv", pr.freeze_depths.len(), pr.lr_ratios.len()), g.to_csv())
        }
    };
    let path = dir.join(&name);
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    log.append(Phase::Probe, [("rows", (csv.lines().count() - 1) as f64)], [("file", name)], Some(&cfg.protocol))?;
    Ok(path)
}

/// Write the synthetic benchmark as image folders under `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let b = two_domain_benchmark(&cfg.data.benchmark(), SeedStream::new(cfg.seed).split(purpose::DATA))?;
    write_folder(&b.base, &out.join("base"))?;
    write_folder(&b.novel_source, &out.join("novel_source"))?;
    write_folder(&b.novel_target, &out.join("novel_target"))?;
    Ok(())
}
