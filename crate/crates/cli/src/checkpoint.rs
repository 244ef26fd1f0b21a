//! Checkpoint container.
//!
//! ```text
//! FLOR-CHECKPOINT <version>\n
//! <manifest as one line of JSON>\n
//! <parameter arrays, f32 little-endian, in manifest order>
//! ```
//!
//! Array offsets in the manifest count `f32` values from the start of the
//! binary section.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use flor_core::backbone::{build_model, BackboneConfig, Model};
use flor_core::params::{Group, ParamKind};
use flor_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MAGIC: &str = "FLOR-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// `weight`, `buffer` or `mix`.
    pub kind: String,
    /// `stage<i>` or `head`.
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Where training left its random streams: epoch `e` shuffles and draws δ
/// from `SeedStream(seed).split(TRAIN).split(e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub generator: String,
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub epoch: usize,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Buffer => "buffer",
        ParamKind::Mix => "mix",
    }
}

fn group_name(g: Group) -> String {
    match g {
        Group::Stage(s) => format!("stage{s}"),
        Group::Head => "head".into(),
    }
}

pub fn encode(model: &Model<f32>, epoch: usize, seed: u64) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            kind: kind_name(p.kind).into(),
            group: group_name(p.group),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel();
    }
    let manifest = Manifest {
        format_version: VERSION,
        dtype: "f32le".into(),
        backbone: model.config.clone(),
        num_classes: model.heads[0].classes,
        epoch,
        rng: RngState { generator: "chacha8".into(), seed, next_epoch: epoch },
        arrays,
    };
    let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
    out.push(b'\n');
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n').context("truncated checkpoint header")?;
    Ok((&bytes[..i], &bytes[i + 1..]))
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Model<f32>)> {
    let (magic, rest) = split_line(bytes)?;
    let magic = std::str::from_utf8(magic).context("checkpoint header is not text")?;
    let version = magic.strip_prefix(MAGIC).map(str::trim).context("not a checkpoint file")?;
    ensure!(version == VERSION.to_string(), "checkpoint format version {version}, this build reads {VERSION}");
    let (json, body) = split_line(rest)?;
    let manifest: Manifest = serde_json::from_slice(json).context("checkpoint manifest")?;
    ensure!(manifest.dtype == "f32le", "unsupported checkpoint dtype {}", manifest.dtype);
    ensure!(body.len() % 4 == 0, "checkpoint body is not a whole number of f32 values");
    let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    // parameters are rebuilt from the config; their layout must agree exactly
    let mut model = build_model::<f32>(&manifest.backbone, manifest.num_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
    ensure!(
        model.store.len() == manifest.arrays.len(),
        "checkpoint has {} arrays, its backbone config builds {}",
        manifest.arrays.len(),
        model.store.len()
    );
    let ids: Vec<_> = model.store.ids().collect();
    let mut end = 0;
    for (id, entry) in ids.into_iter().zip(&manifest.arrays) {
        let p = model.store.get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() || kind_name(p.kind) != entry.kind {
            bail!("checkpoint array {} {:?} does not match model parameter {} {:?}", entry.name, entry.shape, p.name, p.value.shape());
        }
        let n = p.value.numel();
        let data = values.get(entry.offset..entry.offset + n).with_context(|| format!("array {} runs past the end", entry.name))?;
        *model.store.value_mut(id) = Tensor::new(entry.shape.clone(), data.to_vec())?;
        end = end.max(entry.offset + n);
    }
    ensure!(end == values.len(), "checkpoint has {} trailing values", values.len() - end);
    Ok((manifest, model))
}

pub fn save(path: &Path, model: &Model<f32>, epoch: usize, seed: u64) -> Result<()> {
    std::fs::write(path, encode(model, epoch, seed)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<(Manifest, Model<f32>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading {}", path.display()))
}
