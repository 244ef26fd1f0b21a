//! Run configuration: TOML with one table per section, every key optional,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flor_core::backbone::{BackboneConfig, BackboneKind, NormMode, StageSpec};
use flor_core::data::{BenchmarkSpec, DomainStyle};
use flor_core::fewshot::{Calibration, FinetuneConfig, Method, Protocol, TrainConfig};
use flor_core::norm::{MixMode, MixRatioPolicy};
use flor_core::probes::{PerturbationSpec, SamConfig, Space};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub backbone: BackboneSection,
    pub mix: MixSection,
    pub train: TrainSection,
    pub sam: SamSection,
    pub data: DataSection,
    pub protocol: ProtocolSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            backbone: BackboneSection::default(),
            mix: MixSection::default(),
            train: TrainSection::default(),
            sam: SamSection::default(),
            data: DataSection::default(),
            protocol: ProtocolSection::default(),
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub norm_mode: NormMode,
    /// Output channels of each cnn stage.
    pub channels: Vec<usize>,
    /// Residual blocks per cnn stage.
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let c = BackboneConfig::default();
        Self {
            kind: c.kind,
            norm_mode: c.norm_mode,
            channels: c.stages.iter().map(|s| s.channels).collect(),
            blocks: 1,
            embed_dim: c.embed_dim,
            heads: c.heads,
            depth: c.depth,
            patch: c.patch,
            mlp_ratio: c.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSection {
    pub mode: MixMode,
    pub a: f64,
    pub b: f64,
    pub fixed_value: f64,
}

impl Default for MixSection {
    fn default() -> Self {
        Self { mode: MixMode::BetaSampled, a: 0.01, b: 0.01, fixed_value: 0.5 }
    }
}

impl MixSection {
    pub fn policy(&self) -> MixRatioPolicy {
        match self.mode {
            MixMode::BetaSampled => MixRatioPolicy::beta(self.a, self.b),
            MixMode::Fixed => MixRatioPolicy::fixed(self.fixed_value),
            MixMode::Learnable => MixRatioPolicy::learnable(self.a, self.b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, weight_decay: t.weight_decay }
    }
}

/// Sharpness-aware training on representations, off unless `enabled`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamSection {
    pub enabled: bool,
    pub eta: f64,
    /// Representation ids (0-based tap order).
    pub layers: Vec<usize>,
}

impl Default for SamSection {
    fn default() -> Self {
        Self { enabled: false, eta: 1.0, layers: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Folder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDomain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub image_size: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_per_class: usize,
    pub novel_per_class: usize,
    pub template_seed: u64,
    /// How far the target domain sits from the source, 0 to 1.
    pub domain_shift: f32,
    /// Novel split used by `eval` and `probe` for synthetic data.
    pub eval_domain: EvalDomain,
    /// Class-per-subdirectory trees for `kind = "folder"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let b = BenchmarkSpec::default();
        Self {
            kind: DataKind::Synthetic,
            image_size: b.image_size,
            base_classes: b.base_classes,
            novel_classes: b.novel_classes,
            base_per_class: b.base_per_class,
            novel_per_class: b.novel_per_class,
            template_seed: b.template_seed,
            domain_shift: 1.0,
            eval_domain: EvalDomain::Target,
            base_dir: None,
            novel_dir: None,
        }
    }
}

impl DataSection {
    pub fn benchmark(&self) -> BenchmarkSpec {
        let source = DomainStyle::source();
        let target = DomainStyle::blend(&source, &DomainStyle::target(), self.domain_shift);
        BenchmarkSpec {
            base_classes: self.base_classes,
            novel_classes: self.novel_classes,
            base_per_class: self.base_per_class,
            novel_per_class: self.novel_per_class,
            image_size: self.image_size,
            template_seed: self.template_seed,
            source,
            target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub episodes: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = Protocol::default();
        Self { k: p.k, n: p.n, q: p.q, episodes: p.episodes }
    }
}

impl ProtocolSection {
    pub fn protocol(&self) -> Protocol {
        Protocol { k: self.k, n: self.n, q: self.q, episodes: self.episodes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Prototype,
    Transductive,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub method: MethodKind,
    pub calibration: Calibration,
    /// Refinement rounds and prototype-shift tolerance of the transductive method.
    pub max_iters: usize,
    pub tol: f64,
    pub finetune: FinetuneConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            method: MethodKind::Prototype,
            calibration: Calibration::None,
            max_iters: 10,
            tol: 1e-6,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn method(&self) -> Method {
        match self.method {
            MethodKind::Prototype => Method::Prototype,
            MethodKind::Transductive => Method::Transductive { max_iters: self.max_iters, tol: self.tol },
            MethodKind::Finetune => Method::Finetune(self.finetune.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Pixel,
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub space: SpaceKind,
    /// Representation id for feature-space noise; the last main-path
    /// normalization when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_layer: Option<usize>,
    pub grid: [usize; 2],
    pub variances: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Step sizes of the `sam_sweep` probe; each trains a model from scratch.
    pub etas: Vec<f64>,
    pub freeze_depths: Vec<usize>,
    pub lr_ratios: Vec<f64>,
    /// Samples fed to `rep_distance`.
    pub rep_batch: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            space: SpaceKind::Pixel,
            feature_layer: None,
            grid: [4, 4],
            variances: vec![0.0, 0.01, 0.03, 0.1, 0.3],
            deltas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            etas: vec![0.0, 0.5, 1.0, 2.0],
            freeze_depths: vec![0, 1, 2, 3, 4],
            lr_ratios: vec![0.01, 0.1, 1.0],
            rep_batch: 64,
        }
    }
}

impl ProbeSection {
    pub fn perturbation(&self) -> PerturbationSpec {
        let space = match self.space {
            SpaceKind::Pixel => Space::Pixel,
            SpaceKind::Feature => Space::Feature(self.feature_layer),
        };
        PerturbationSpec { space, grid: (self.grid[0], self.grid[1]), variance: 0.0 }
    }
}

impl RunConfig {
    /// Parse `text`, apply `key=value` overrides, and deserialize.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        let size = self.data.image_size;
        let stages = b
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| StageSpec { channels: c, blocks: b.blocks, stride: if i == 0 { 1 } else { 2 } })
            .collect();
        BackboneConfig {
            kind: b.kind,
            stages: if b.kind == BackboneKind::Cnn { stages } else { Vec::new() },
            norm_mode: b.norm_mode,
            mix_policy: self.mix.policy(),
            input: [3, size, size],
            embed_dim: b.embed_dim,
            heads: b.heads,
            depth: b.depth,
            patch: b.patch,
            mlp_ratio: b.mlp_ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            sam: self.sam.enabled.then(|| SamConfig { eta: self.sam.eta, layers: self.sam.layers.clone() }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        let p = &self.protocol;
        if p.k == 0 || p.n == 0 || p.episodes == 0 {
            bail!("protocol k, n and episodes must be positive");
        }
        if self.data.kind == DataKind::Folder && (self.data.base_dir.is_none() || self.data.novel_dir.is_none()) {
            bail!("data.kind = \"folder\" needs data.base_dir and data.novel_dir");
        }
        if !(0.0..=1.0).contains(&self.data.domain_shift) {
            bail!("data.domain_shift {} outside [0, 1]", self.data.domain_shift);
        }
        self.eval.finetune.validate(self.backbone_config().num_stages())?;
        Ok(())
    }
}

/// Set `a.b.c=value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override {key:?}: {p} is not a section"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
