//! Discrete skill catalog and the fixed-width continuous parameter encoding.
//!
//! Every skill carries a 4-slot parameter vector. Slots a skill does not use
//! are masked to zero so a single critic can consume `(obs, one-hot, params)`
//! for all skills. Actor outputs are unbounded; [`squash_params`] maps them
//! through `tanh` and an affine map onto the skill's bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Workspace;

pub const MAX_PARAM_DIM: usize = 4;

/// Largest push displacement in meters.
pub const PUSH_DELTA_BOUND: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum SkillError {
    #[error("skill {0:?} is not available for this task")]
    Unavailable(SkillId),
    #[error("non-finite parameter at slot {0}")]
    NonFinite(usize),
    #[error("unknown skill name `{0}`")]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillId {
    Reach,
    Pick,
    Place,
    PushX,
    PushY,
    Release,
}

impl SkillId {
    pub const ALL: [SkillId; 6] = [
        SkillId::Reach,
        SkillId::Pick,
        SkillId::Place,
        SkillId::PushX,
        SkillId::PushY,
        SkillId::Release,
    ];

    /// Stable integer code.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SkillId::Reach => "Reach",
            SkillId::Pick => "Pick",
            SkillId::Place => "Place",
            SkillId::PushX => "PushX",
            SkillId::PushY => "PushY",
            SkillId::Release => "Release",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, SkillError> {
        Self::ALL
            .iter()
            .copied()
            .find(|s| s.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| SkillError::UnknownName(name.to_string()))
    }

    /// Number of meaningful parameter slots.
    pub fn param_dim(self) -> usize {
        match self {
            SkillId::Reach | SkillId::Pick | SkillId::Place => 3,
            SkillId::PushX | SkillId::PushY => 4,
            SkillId::Release => 0,
        }
    }

    pub fn has_position(self) -> bool {
        self.param_dim() >= 3
    }

    /// Axis swept by a push skill.
    pub fn push_axis(self) -> Option<usize> {
        match self {
            SkillId::PushX => Some(0),
            SkillId::PushY => Some(1),
            _ => None,
        }
    }

    pub fn mask(self) -> [f64; MAX_PARAM_DIM] {
        let mut m = [0.0; MAX_PARAM_DIM];
        m.iter_mut().take(self.param_dim()).for_each(|v| *v = 1.0);
        m
    }
}

impl std::fmt::Display for SkillId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter dimension and per-coordinate bounds of one skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub skill: SkillId,
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
}

impl ParamLayout {
    pub fn new(skill: SkillId, ws: &Workspace) -> Self {
        let mut bounds = Vec::with_capacity(skill.param_dim());
        if skill.has_position() {
            bounds.push(ws.x_range);
            bounds.push(ws.y_range);
            bounds.push(ws.z_range);
        }
        if skill.push_axis().is_some() {
            bounds.push((-PUSH_DELTA_BOUND, PUSH_DELTA_BOUND));
        }
        Self {
            skill,
            dim: skill.param_dim(),
            bounds,
        }
    }

    fn mid_half(&self, i: usize) -> (f64, f64) {
        let (lo, hi) = self.bounds[i];
        (0.5 * (lo + hi), 0.5 * (hi - lo))
    }

    /// Sum of `ln(half-width)` over the used coordinates; the log-Jacobian
    /// of the affine map from `[-1, 1]` onto the bounds.
    pub fn log_scale(&self) -> f64 {
        (0..self.dim).map(|i| self.mid_half(i).1.ln()).sum()
    }
}

/// The pair `(skill, parameters)` proposed at one decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillAction {
    pub skill: SkillId,
    /// Squashed parameters in `[-1, 1]`, zero on masked slots.
    pub params_raw: [f64; MAX_PARAM_DIM],
    /// Parameters in world units, zero on masked slots.
    pub params_world: [f64; MAX_PARAM_DIM],
    pub mask: [f64; MAX_PARAM_DIM],
}

impl SkillAction {
    /// Builds an action from normalized values already in `[-1, 1]`.
    pub fn from_normalized(skill: SkillId, normalized: &[f64], ws: &Workspace) -> Self {
        let layout = ParamLayout::new(skill, ws);
        let mask = skill.mask();
        let mut params_raw = [0.0; MAX_PARAM_DIM];
        let mut params_world = [0.0; MAX_PARAM_DIM];
        for i in 0..layout.dim {
            let y = normalized[i].clamp(-1.0, 1.0);
            let (mid, half) = layout.mid_half(i);
            params_raw[i] = y;
            params_world[i] = mid + half * y;
        }
        Self {
            skill,
            params_raw,
            params_world,
            mask,
        }
    }

    /// Builds an action from world-unit parameters, clamping into bounds.
    pub fn from_world(skill: SkillId, world: &[f64], ws: &Workspace) -> Self {
        let layout = ParamLayout::new(skill, ws);
        let normalized: Vec<f64> = (0..layout.dim)
            .map(|i| {
                let (mid, half) = layout.mid_half(i);
                (world[i] - mid) / half
            })
            .collect();
        Self::from_normalized(skill, &normalized, ws)
    }

    /// Parameterless action, used for `Release`.
    pub fn bare(skill: SkillId) -> Self {
        Self {
            skill,
            params_raw: [0.0; MAX_PARAM_DIM],
            params_world: [0.0; MAX_PARAM_DIM],
            mask: skill.mask(),
        }
    }

    pub fn position(&self) -> Option<[f64; 3]> {
        self.skill
            .has_position()
            .then(|| [self.params_world[0], self.params_world[1], self.params_world[2]])
    }

    pub fn delta(&self) -> Option<f64> {
        self.skill.push_axis().map(|_| self.params_world[3])
    }

    pub fn world_params(&self) -> &[f64] {
        &self.params_world[..self.skill.param_dim()]
    }
}

/// One-hot vector over the task's ordered skill list.
pub fn encode_one_hot(skill: SkillId, available: &[SkillId]) -> Result<Vec<f64>, SkillError> {
    let idx = available
        .iter()
        .position(|&s| s == skill)
        .ok_or(SkillError::Unavailable(skill))?;
    let mut v = vec![0.0; available.len()];
    v[idx] = 1.0;
    Ok(v)
}

/// Maps unbounded actor outputs onto the skill's bounds via `tanh`.
pub fn squash_params(
    raw: &[f64; MAX_PARAM_DIM],
    skill: SkillId,
    ws: &Workspace,
) -> Result<SkillAction, SkillError> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(SkillError::NonFinite(i));
    }
    let squashed: Vec<f64> = raw.iter().map(|v| v.tanh()).collect();
    Ok(SkillAction::from_normalized(skill, &squashed, ws))
}

/// Inverse of [`squash_params`] on the open box; masked slots map to zero.
pub fn unsquash_params(action: &SkillAction, ws: &Workspace) -> [f64; MAX_PARAM_DIM] {
    let layout = ParamLayout::new(action.skill, ws);
    let mut raw = [0.0; MAX_PARAM_DIM];
    for (i, r) in raw.iter_mut().enumerate().take(layout.dim) {
        let (mid, half) = layout.mid_half(i);
        *r = ((action.params_world[i] - mid) / half).atanh();
    }
    raw
}

/// Row of the exported skill catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: usize,
    pub name: String,
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
}

pub fn skill_catalog(ws: &Workspace) -> Vec<CatalogEntry> {
    SkillId::ALL
        .iter()
        .map(|&s| {
            let layout = ParamLayout::new(s, ws);
            CatalogEntry {
                id: s.code(),
                name: s.name().to_string(),
                dim: layout.dim,
                bounds: layout.bounds,
            }
        })
        .collect()
}
