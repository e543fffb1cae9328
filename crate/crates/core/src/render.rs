//! Top-down scene snapshots and parameter overlays for operator displays.

use serde::{Deserialize, Serialize};

use crate::sim::{ObjectKind, TaskKind, Vec3, Workspace, WorldState};
use crate::skills::{SkillAction, SkillId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub kind: ObjectKind,
    pub position: Vec3,
    pub half_extent: Vec3,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub task: TaskKind,
    pub workspace: Workspace,
    pub objects: Vec<SceneObject>,
    pub gripper: Vec3,
    pub holding: Option<String>,
    pub task_stage: u32,
    pub step_count: u32,
    /// Hex digest of the world state, so clients can tell frames apart.
    pub state_hash: String,
}

impl SceneSnapshot {
    pub fn capture(state: &WorldState, task: TaskKind, workspace: &Workspace) -> Self {
        Self {
            task,
            workspace: *workspace,
            objects: state
                .objects
                .iter()
                .map(|o| SceneObject {
                    id: o.id.clone(),
                    kind: o.kind,
                    position: o.position,
                    half_extent: o.half_extent,
                    held: state.is_held(&o.id),
                })
                .collect(),
            gripper: state.gripper_pos,
            holding: state.holding.clone(),
            task_stage: state.task_stage,
            step_count: state.step_count,
            state_hash: format!("{:016x}", state.state_hash()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrow {
    pub from: [f64; 2],
    /// Normalized displacement in scene coordinates.
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub label: String,
    /// Marker in normalized scene coordinates, origin at the workspace minimum.
    pub marker: Option<[f64; 2]>,
    /// Height as a fraction of the workspace z range.
    pub z_fraction: Option<f64>,
    pub arrow: Option<Arrow>,
}

fn normalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v - lo) / (hi - lo)
}

pub fn project_overlay(action: &SkillAction, ws: &Workspace) -> Overlay {
    let label = action.skill.name().to_string();
    let Some(p) = action.position() else {
        return Overlay {
            label,
            marker: None,
            z_fraction: None,
            arrow: None,
        };
    };
    let marker = [normalize(p[0], ws.x_range), normalize(p[1], ws.y_range)];
    let arrow = match (action.skill, action.delta()) {
        (SkillId::PushX, Some(d)) => Some(Arrow {
            from: marker,
            dx: d / (ws.x_range.1 - ws.x_range.0),
            dy: 0.0,
        }),
        (SkillId::PushY, Some(d)) => Some(Arrow {
            from: marker,
            dx: 0.0,
            dy: d / (ws.y_range.1 - ws.y_range.0),
        }),
        _ => None,
    };
    Overlay {
        label,
        marker: Some(marker),
        z_fraction: Some(normalize(p[2], ws.z_range)),
        arrow,
    }
}
