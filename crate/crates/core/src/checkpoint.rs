//! Bundle checkpoints: a JSON manifest next to a little-endian f32 blob of
//! every network's parameters, concatenated in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::PolicyBundle;
use crate::net::{Mlp, NetError, NetSpec};
use crate::sim::{TaskKind, TaskSpec, Workspace};
use crate::skills::SkillId;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("blob holds {got} floats, manifest expects {expected}")]
    BlobSize { expected: usize, got: usize },
    #[error("checkpoint is for {found}, expected {expected}")]
    Mismatch { expected: String, found: String },
    #[error("checkpoint layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetEntry {
    pub name: String,
    pub spec: NetSpec,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub task: TaskKind,
    pub skills: Vec<SkillId>,
    pub obs_dim: usize,
    pub obs_layout_hash: String,
    pub workspace: Workspace,
    pub alpha_skill: f64,
    pub alpha_param: f64,
    pub config_hash: String,
    pub optimizer_steps: Vec<(String, u64)>,
    pub decision_step: u64,
    pub blob: String,
    pub nets: Vec<NetEntry>,
}

fn param_actor_name(s: SkillId) -> String {
    format!("param_actor.{}", s.name().to_lowercase())
}

/// Writes `<stem>.json` and `<stem>.bin` under `dir`; returns the manifest path.
pub fn save_bundle(
    bundle: &PolicyBundle,
    dir: &Path,
    stem: &str,
    config_hash: &str,
    optimizer_steps: Vec<(String, u64)>,
    decision_step: u64,
) -> Result<PathBuf, CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut nets: Vec<(String, &Mlp)> = vec![("critic".into(), &bundle.critic), ("skill_actor".into(), &bundle.skill_actor)];
    for (s, a) in bundle.skills.iter().zip(&bundle.param_actors) {
        if let Some(a) = a {
            nets.push((param_actor_name(*s), a));
        }
    }
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, net) in nets {
        for p in &net.params {
            blob.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        entries.push(NetEntry {
            name,
            spec: net.spec().clone(),
            offset,
            len: net.params.len(),
        });
        offset += net.params.len();
    }
    let blob_name = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        task: bundle.task,
        skills: bundle.skills.clone(),
        obs_dim: bundle.obs_dim,
        obs_layout_hash: bundle.obs_layout_hash.clone(),
        workspace: bundle.workspace,
        alpha_skill: bundle.alpha_skill,
        alpha_param: bundle.alpha_param,
        config_hash: config_hash.to_string(),
        optimizer_steps,
        decision_step,
        blob: blob_name.clone(),
        nets: entries,
    };
    std::fs::write(dir.join(&blob_name), blob)?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let m: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(m.format_version));
    }
    Ok(m)
}

pub fn load_bundle(path: &Path) -> Result<(PolicyBundle, CheckpointManifest), CheckpointError> {
    let m = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let bytes = std::fs::read(dir.join(&m.blob))?;
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let expected: usize = m.nets.iter().map(|n| n.len).sum();
    if floats.len() != expected || bytes.len() % 4 != 0 {
        return Err(CheckpointError::BlobSize {
            expected,
            got: floats.len(),
        });
    }
    let take = |name: &str| -> Result<Mlp, CheckpointError> {
        let e = m
            .nets
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| CheckpointError::Layout(format!("missing net `{name}`")))?;
        let params = floats
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| CheckpointError::Layout(format!("net `{name}` out of blob range")))?;
        Ok(Mlp::from_params(e.spec.clone(), params.to_vec())?)
    };
    let critic = take("critic")?;
    let skill_actor = take("skill_actor")?;
    let mut param_actors = Vec::with_capacity(m.skills.len());
    for s in &m.skills {
        param_actors.push(if s.param_dim() == 0 { None } else { Some(take(&param_actor_name(*s))?) });
    }
    let bundle = PolicyBundle {
        task: m.task,
        skills: m.skills.clone(),
        obs_dim: m.obs_dim,
        obs_layout_hash: m.obs_layout_hash.clone(),
        workspace: m.workspace,
        critic,
        skill_actor,
        param_actors,
        alpha_skill: m.alpha_skill,
        alpha_param: m.alpha_param,
    };
    Ok((bundle, m))
}

/// Loads a bundle and rejects it unless it was trained on `task` with the same observation layout.
pub fn load_bundle_for(path: &Path, task: &TaskSpec) -> Result<PolicyBundle, CheckpointError> {
    let (b, m) = load_bundle(path)?;
    if m.task != task.kind {
        return Err(CheckpointError::Mismatch {
            expected: format!("task {}", task.kind),
            found: format!("task {}", m.task),
        });
    }
    if m.skills != task.available_skills {
        return Err(CheckpointError::Mismatch {
            expected: format!("skills {:?}", task.available_skills),
            found: format!("skills {:?}", m.skills),
        });
    }
    let hash = task.obs_layout_hash();
    if m.obs_layout_hash != hash {
        return Err(CheckpointError::Mismatch {
            expected: format!("obs layout {hash}"),
            found: format!("obs layout {}", m.obs_layout_hash),
        });
    }
    Ok(b)
}
