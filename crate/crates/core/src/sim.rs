//! Deterministic kinematic tabletop.
//!
//! Skills resolve instantly to their postconditions: there is no contact
//! dynamics, only geometric predicates over axis-aligned boxes. All five
//! tasks share one object model and one `execute_skill` entry point.

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skills::{SkillAction, SkillId};

pub type Vec3 = [f64; 3];

const EPS: f64 = 1e-9;
/// Two resting heights closer than this are treated as equal.
const REST_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("skill {0} is not available in task {1}")]
    Rejected(SkillId, TaskKind),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub table_z: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            z_range: (0.0, 0.3),
            table_z: 0.0,
        }
    }
}

impl Workspace {
    pub fn range(&self, axis: usize) -> (f64, f64) {
        match axis {
            0 => self.x_range,
            1 => self.y_range,
            _ => self.z_range,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| {
            let (lo, hi) = self.range(i);
            p[i] >= lo - EPS && p[i] <= hi + EPS
        }) && p[2] >= self.table_z - EPS
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        let mut q = p;
        for (i, v) in q.iter_mut().enumerate() {
            let (lo, hi) = self.range(i);
            *v = v.clamp(lo, hi);
        }
        q[2] = q[2].max(self.table_z);
        q
    }
}

/// Geometric tolerances, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// xy radius within which Pick attaches an object.
    pub r_pick: f64,
    /// Vertical slack between the Pick point and an object center.
    pub z_pick: f64,
    /// Width of the corridor swept by a push.
    pub w_push: f64,
    /// A push passes over objects whose top is more than this below the push height.
    pub push_z: f64,
    /// Affordance radius around task keypoints.
    pub tau_aff: f64,
    pub r_goal: f64,
    pub eps_stack: f64,
    pub eps_drawer: f64,
    /// Footprint overlap depth tolerated before a placement counts as a collision.
    pub collision: f64,
    /// How far below its resting height a Place may command an object.
    pub press: f64,
    /// Height the gripper rises with a freshly grasped object.
    pub lift: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            r_pick: 0.03,
            z_pick: 0.04,
            w_push: 0.04,
            push_z: 0.03,
            tau_aff: 0.10,
            r_goal: 0.05,
            eps_stack: 0.02,
            eps_drawer: 0.01,
            collision: 0.005,
            press: 0.02,
            lift: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Block,
    Broom,
    Toy,
    DustpanZone,
    Drawer,
    Skillet,
    Sausage,
    BunZone,
    StoveZone,
    TargetZone,
}

impl ObjectKind {
    pub fn is_zone(self) -> bool {
        matches!(
            self,
            ObjectKind::DustpanZone | ObjectKind::BunZone | ObjectKind::StoveZone | ObjectKind::TargetZone
        )
    }
}

/// One-dimensional slide joint; the drawer is open by `closed - position[axis]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slide {
    pub axis: usize,
    pub closed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: String,
    pub kind: ObjectKind,
    pub position: Vec3,
    pub half_extent: Vec3,
    pub graspable: bool,
    pub pushable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slide: Option<Slide>,
}

impl ObjectState {
    fn new(id: &str, kind: ObjectKind, position: Vec3, half_extent: Vec3) -> Self {
        Self {
            id: id.to_string(),
            kind,
            position,
            half_extent,
            graspable: false,
            pushable: false,
            slide: None,
        }
    }

    fn graspable(mut self) -> Self {
        self.graspable = true;
        self
    }

    fn pushable(mut self) -> Self {
        self.pushable = true;
        self
    }

    pub fn top(&self) -> f64 {
        self.position[2] + self.half_extent[2]
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        (x - self.position[0]).abs() <= self.half_extent[0] + EPS
            && (y - self.position[1]).abs() <= self.half_extent[1] + EPS
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        (0..3).all(|i| (p[i] - self.position[i]).abs() < self.half_extent[i])
    }

    /// Open offset of a slide object; zero for everything else.
    pub fn open_offset(&self) -> f64 {
        self.slide
            .map(|s| (s.closed - self.position[s.axis]).max(0.0))
            .unwrap_or(0.0)
    }
}

/// Overlap depth of two footprints along x and y; positive on both axes means they intersect.
fn footprint_overlap(a_pos: Vec3, a_half: Vec3, b: &ObjectState) -> (f64, f64) {
    (
        a_half[0] + b.half_extent[0] - (a_pos[0] - b.position[0]).abs(),
        a_half[1] + b.half_extent[1] - (a_pos[1] - b.position[1]).abs(),
    )
}

pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist_xy(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<ObjectState>,
    pub gripper_pos: Vec3,
    pub holding: Option<String>,
    pub task_stage: u32,
    pub step_count: u32,
}

impl WorldState {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    /// Panics if `id` is absent; task code only asks for objects its reset created.
    pub fn object(&self, id: &str) -> &ObjectState {
        &self.objects[self.index_of(id).unwrap_or_else(|| panic!("no object `{id}`"))]
    }

    pub fn object_mut(&mut self, id: &str) -> &mut ObjectState {
        let i = self.index_of(id).unwrap_or_else(|| panic!("no object `{id}`"));
        &mut self.objects[i]
    }

    pub fn is_held(&self, id: &str) -> bool {
        self.holding.as_deref() == Some(id)
    }

    fn held_index(&self) -> Option<usize> {
        self.holding.as_deref().and_then(|id| self.index_of(id))
    }

    fn move_gripper(&mut self, p: Vec3) {
        self.gripper_pos = p;
        if let Some(h) = self.held_index() {
            self.objects[h].position = p;
        }
    }

    /// Height at which an object with `half` extents comes to rest at `xy`,
    /// plus the indices of objects its footprint overlaps.
    fn rest_height(&self, skip: usize, xy: (f64, f64), half: Vec3, table_z: f64) -> (f64, Vec<usize>) {
        let probe = [xy.0, xy.1, 0.0];
        let mut top = table_z;
        let mut under = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if i == skip || o.kind.is_zone() {
                continue;
            }
            let (ox, oy) = footprint_overlap(probe, half, o);
            if ox > EPS && oy > EPS {
                top = top.max(o.top());
                under.push(i);
            }
        }
        (top + half[2], under)
    }

    /// True if `top_idx` sits on `base_idx` (footprints overlap, resting height matches).
    fn rests_on(&self, top_idx: usize, base_idx: usize) -> bool {
        let t = &self.objects[top_idx];
        let b = &self.objects[base_idx];
        if self.is_held(&t.id) || b.kind.is_zone() || top_idx == base_idx {
            return false;
        }
        let (ox, oy) = footprint_overlap(t.position, t.half_extent, b);
        ox > EPS && oy > EPS && (t.position[2] - t.half_extent[2] - b.top()).abs() < REST_EPS
    }

    fn supports_something(&self, idx: usize) -> bool {
        (0..self.objects.len()).any(|j| self.rests_on(j, idx))
    }

    /// Order-sensitive hash of every field, used to check that vetoed steps leave the world untouched.
    pub fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for o in &self.objects {
            o.id.hash(&mut h);
            o.kind.hash(&mut h);
            for v in o.position.iter().chain(o.half_extent.iter()) {
                v.to_bits().hash(&mut h);
            }
            o.graspable.hash(&mut h);
            o.pushable.hash(&mut h);
            if let Some(s) = o.slide {
                s.axis.hash(&mut h);
                s.closed.to_bits().hash(&mut h);
            }
        }
        for v in self.gripper_pos {
            v.to_bits().hash(&mut h);
        }
        self.holding.hash(&mut h);
        self.task_stage.hash(&mut h);
        self.step_count.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reaching,
    Stacking,
    Sweeping,
    CollectingToy,
    CookingHotdog,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Reaching,
        TaskKind::Stacking,
        TaskKind::Sweeping,
        TaskKind::CollectingToy,
        TaskKind::CookingHotdog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reaching => "reaching",
            TaskKind::Stacking => "stacking",
            TaskKind::Sweeping => "sweeping",
            TaskKind::CollectingToy => "collecting_toy",
            TaskKind::CookingHotdog => "cooking_hotdog",
        }
    }

    /// Accepts both `collecting_toy` and `collecting-toy` spellings.
    pub fn parse(s: &str) -> Result<Self, SimError> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == norm)
            .ok_or_else(|| SimError::UnknownTask(s.to_string()))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSlice {
    pub name: &'static str,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub values: Vec<f64>,
    pub layout: Vec<ObsSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub available_skills: Vec<SkillId>,
    /// Observation width for skill-level agents (gripper omitted).
    pub obs_dim: usize,
    pub max_steps: u32,
    pub stage_count: u32,
    pub workspace: Workspace,
    pub tol: Tolerances,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        use SkillId::*;
        let (available_skills, obs_dim, max_steps, stage_count) = match kind {
            TaskKind::Reaching => (vec![Reach, Release], 4, 5, 1),
            TaskKind::Stacking => (vec![Pick, Place], 6, 8, 2),
            TaskKind::Sweeping => (vec![Pick, PushX, PushY], 6, 10, 2),
            TaskKind::CollectingToy => (vec![Pick, Place, PushX, PushY], 6, 12, 2),
            TaskKind::CookingHotdog => (vec![Pick, Place], 11, 16, 4),
        };
        Self {
            kind,
            available_skills,
            obs_dim,
            max_steps,
            stage_count,
            workspace: Workspace::default(),
            tol: Tolerances::default(),
        }
    }

    pub fn with_tolerances(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }

    pub fn skill_index(&self, skill: SkillId) -> Option<usize> {
        self.available_skills.iter().position(|&s| s == skill)
    }

    pub fn obs_layout(&self, include_gripper: bool) -> Vec<ObsSlice> {
        let names: &[(&'static str, usize)] = match self.kind {
            // Reaching keeps the gripper for every agent: it is the whole state.
            TaskKind::Reaching => &[("gripper_pos", 3), ("gripper_closed", 1)],
            TaskKind::Stacking => &[("small_block", 3), ("large_block", 3)],
            TaskKind::Sweeping => &[("broom", 3), ("toy_xy", 2), ("broom_held", 1)],
            TaskKind::CollectingToy => &[
                ("toy", 3),
                ("drawer_offset", 1),
                ("toy_held", 1),
                ("toy_in_drawer", 1),
            ],
            TaskKind::CookingHotdog => &[
                ("sausage", 3),
                ("skillet", 3),
                ("skillet_held", 1),
                ("sausage_held", 1),
                ("stage_1", 1),
                ("stage_2", 1),
                ("stage_3", 1),
            ],
        };
        let mut out = Vec::new();
        let mut start = 0;
        let gripper: &[(&'static str, usize)] = if include_gripper && self.kind != TaskKind::Reaching {
            &[("gripper_pos", 3), ("gripper_closed", 1)]
        } else {
            &[]
        };
        for &(name, len) in names.iter().chain(gripper) {
            out.push(ObsSlice { name, start, len });
            start += len;
        }
        out
    }

    /// Stable fingerprint of the observation layout used for skill agents.
    pub fn obs_layout_hash(&self) -> String {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.kind.name().hash(&mut h);
        for s in self.obs_layout(false) {
            s.name.hash(&mut h);
            s.start.hash(&mut h);
            s.len.hash(&mut h);
        }
        for s in &self.available_skills {
            s.code().hash(&mut h);
        }
        format!("{:016x}", h.finish())
    }

    /// Task-relevant points for `skill`, used by the affordance penalty.
    pub fn keypoints(&self, state: &WorldState, skill: SkillId) -> Vec<Vec3> {
        let free = state
            .objects
            .iter()
            .filter(|o| !state.is_held(&o.id));
        match skill {
            SkillId::Release => Vec::new(),
            SkillId::Reach => free.map(|o| o.position).collect(),
            SkillId::Pick => free.filter(|o| o.graspable).map(|o| o.position).collect(),
            SkillId::Place => {
                let held_half = state
                    .holding
                    .as_deref()
                    .map(|id| state.object(id).half_extent[2])
                    .unwrap_or(0.02);
                free.map(|o| {
                    let base = if o.kind.is_zone() { self.workspace.table_z } else { o.top() };
                    [o.position[0], o.position[1], base + held_half]
                })
                .collect()
            }
            SkillId::PushX | SkillId::PushY => free
                .filter(|o| o.pushable || o.slide.is_some())
                .map(|o| o.position)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyViolation {
    OutOfWorkspace,
    Collision,
    ObjectLost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: WorldState,
    pub env_reward: f64,
    pub affordance_penalty: f64,
    pub success: bool,
    pub safety_violation: Option<SafetyViolation>,
    pub executed: bool,
}

impl StepOutcome {
    /// Outcome of a decision that was not executed: the world is untouched.
    pub fn vetoed(state: &WorldState, task: &TaskSpec, affordance_penalty: f64) -> Self {
        let success = check_success(state, task);
        Self {
            next_state: state.clone(),
            env_reward: if success { 1.0 } else { 0.0 },
            affordance_penalty,
            success,
            safety_violation: None,
            executed: false,
        }
    }
}

// Object identifiers shared by resets, predicates and the stage tables.
pub mod ids {
    pub const TARGET: &str = "target";
    pub const SMALL_BLOCK: &str = "small_block";
    pub const LARGE_BLOCK: &str = "large_block";
    pub const BROOM: &str = "broom";
    pub const TOY: &str = "toy";
    pub const DUSTPAN: &str = "dustpan";
    pub const DRAWER: &str = "drawer";
    pub const SKILLET: &str = "skillet";
    pub const SAUSAGE: &str = "sausage";
    pub const STOVE: &str = "stove";
    pub const BUN: &str = "bun";
}

pub const REACH_TARGET: Vec3 = [0.75, 0.7, 0.15];
const DRAWER_CLOSED_Y: f64 = 0.8;

fn sample_xy(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (f64, f64) {
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn far_from_all(xy: (f64, f64), placed: &[(f64, f64)], min_dist: f64) -> bool {
    placed
        .iter()
        .all(|p| ((xy.0 - p.0).powi(2) + (xy.1 - p.1).powi(2)).sqrt() >= min_dist)
}

/// Rejection-samples `n` xy positions pairwise at least `min_dist` apart.
fn scatter(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, min_dist: f64, taken: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, f64)> = taken.to_vec();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let xy = sample_xy(rng, lo, hi);
        if far_from_all(xy, &all, min_dist) {
            all.push(xy);
            out.push(xy);
        }
    }
    out
}

fn random_gripper(rng: &mut ChaCha8Rng) -> Vec3 {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.1..0.28),
    ]
}

/// Seeded initial state; identical `(task, seed)` pairs give identical states.
pub fn reset(task: &TaskSpec, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((task.kind as u64 + 1) << 56));
    let tz = task.workspace.table_z;
    let on_table = |xy: (f64, f64), half: Vec3| [xy.0, xy.1, tz + half[2]];
    let mut objects = Vec::new();
    let gripper_pos;
    match task.kind {
        TaskKind::Reaching => {
            let half = [0.05, 0.05, 0.05];
            objects.push(ObjectState::new(ids::TARGET, ObjectKind::TargetZone, REACH_TARGET, half));
            gripper_pos = loop {
                let g = random_gripper(&mut rng);
                if dist3(g, REACH_TARGET) > 0.2 {
                    break g;
                }
            };
        }
        TaskKind::Stacking => {
            let small = [0.02, 0.02, 0.02];
            let large = [0.04, 0.04, 0.04];
            let xy = scatter(&mut rng, 2, 0.1, 0.9, 0.15, &[]);
            objects.push(ObjectState::new(ids::SMALL_BLOCK, ObjectKind::Block, on_table(xy[0], small), small).graspable());
            objects.push(ObjectState::new(ids::LARGE_BLOCK, ObjectKind::Block, on_table(xy[1], large), large));
            gripper_pos = random_gripper(&mut rng);
        }
        TaskKind::Sweeping => {
            let toy_half = [0.02, 0.02, 0.02];
            let pan_half = [0.06, 0.06, 0.005];
            let broom_half = [0.015, 0.06, 0.015];
            let toy = (rng.random_range(0.3..0.7), rng.random_range(0.2..0.8));
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let pan = (toy.0 + dir * rng.random_range(0.15..0.25), toy.1 + rng.random_range(-0.02..0.02));
            let broom = scatter(&mut rng, 1, 0.1, 0.9, 0.2, &[toy, pan])[0];
            objects.push(ObjectState::new(ids::BROOM, ObjectKind::Broom, on_table(broom, broom_half), broom_half).graspable());
            objects.push(ObjectState::new(ids::TOY, ObjectKind::Toy, on_table(toy, toy_half), toy_half).pushable());
            objects.push(ObjectState::new(ids::DUSTPAN, ObjectKind::DustpanZone, on_table(pan, pan_half), pan_half));
            gripper_pos = random_gripper(&mut rng);
        }
        TaskKind::CollectingToy => {
            let toy_half = [0.02, 0.02, 0.02];
            let drawer_half = [0.08, 0.06, 0.01];
            let offset = rng.random_range(0.08..0.15);
            let drawer_xy = (rng.random_range(0.3..0.7), DRAWER_CLOSED_Y - offset);
            let toy = loop {
                let xy = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.45));
                if far_from_all(xy, &[drawer_xy], 0.2) {
                    break xy;
                }
            };
            objects.push(ObjectState::new(ids::TOY, ObjectKind::Toy, on_table(toy, toy_half), toy_half).graspable());
            let mut drawer = ObjectState::new(ids::DRAWER, ObjectKind::Drawer, on_table(drawer_xy, drawer_half), drawer_half);
            drawer.slide = Some(Slide { axis: 1, closed: DRAWER_CLOSED_Y });
            objects.push(drawer);
            gripper_pos = random_gripper(&mut rng);
        }
        TaskKind::CookingHotdog => {
            let skillet_half = [0.05, 0.05, 0.015];
            let sausage_half = [0.03, 0.012, 0.012];
            let stove_half = [0.07, 0.07, 0.005];
            let bun_half = [0.05, 0.04, 0.005];
            let xy = scatter(&mut rng, 4, 0.12, 0.88, 0.22, &[]);
            objects.push(ObjectState::new(ids::SKILLET, ObjectKind::Skillet, on_table(xy[0], skillet_half), skillet_half).graspable());
            objects.push(ObjectState::new(ids::SAUSAGE, ObjectKind::Sausage, on_table(xy[1], sausage_half), sausage_half).graspable());
            objects.push(ObjectState::new(ids::STOVE, ObjectKind::StoveZone, on_table(xy[2], stove_half), stove_half));
            objects.push(ObjectState::new(ids::BUN, ObjectKind::BunZone, on_table(xy[3], bun_half), bun_half));
            gripper_pos = random_gripper(&mut rng);
        }
    }
    WorldState {
        objects,
        gripper_pos,
        holding: None,
        task_stage: 0,
        step_count: 0,
    }
}

pub fn observe(state: &WorldState, task: &TaskSpec, include_gripper: bool) -> Observation {
    let layout = task.obs_layout(include_gripper);
    let mut v = Vec::with_capacity(task.obs_dim + 4);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let closed = flag(state.holding.is_some());
    match task.kind {
        TaskKind::Reaching => {
            v.extend_from_slice(&state.gripper_pos);
            v.push(closed);
        }
        TaskKind::Stacking => {
            v.extend_from_slice(&state.object(ids::SMALL_BLOCK).position);
            v.extend_from_slice(&state.object(ids::LARGE_BLOCK).position);
        }
        TaskKind::Sweeping => {
            v.extend_from_slice(&state.object(ids::BROOM).position);
            v.extend_from_slice(&state.object(ids::TOY).position[..2]);
            v.push(flag(state.is_held(ids::BROOM)));
        }
        TaskKind::CollectingToy => {
            v.extend_from_slice(&state.object(ids::TOY).position);
            v.push(state.object(ids::DRAWER).open_offset());
            v.push(flag(state.is_held(ids::TOY)));
            v.push(flag(predicates::toy_in_drawer(state)));
        }
        TaskKind::CookingHotdog => {
            v.extend_from_slice(&state.object(ids::SAUSAGE).position);
            v.extend_from_slice(&state.object(ids::SKILLET).position);
            v.push(flag(state.is_held(ids::SKILLET)));
            v.push(flag(state.is_held(ids::SAUSAGE)));
            for k in 1..=3 {
                v.push(flag(state.task_stage >= k));
            }
        }
    }
    if include_gripper && task.kind != TaskKind::Reaching {
        v.extend_from_slice(&state.gripper_pos);
        v.push(closed);
    }
    Observation { values: v, layout }
}

/// Geometric task predicates.
pub mod predicates {
    use super::*;

    pub fn stacked(state: &WorldState, tol: &Tolerances) -> bool {
        let small = state.object(ids::SMALL_BLOCK);
        let large = state.object(ids::LARGE_BLOCK);
        !state.is_held(ids::SMALL_BLOCK)
            && dist_xy(small.position, large.position) <= tol.eps_stack + EPS
            && (small.position[2] - small.half_extent[2] - large.top()).abs() < REST_EPS
    }

    pub fn toy_in_dustpan(state: &WorldState) -> bool {
        let toy = state.object(ids::TOY);
        state.object(ids::DUSTPAN).contains_xy(toy.position[0], toy.position[1])
    }

    pub fn toy_in_drawer(state: &WorldState) -> bool {
        let toy = state.object(ids::TOY);
        !state.is_held(ids::TOY) && state.object(ids::DRAWER).contains_xy(toy.position[0], toy.position[1])
    }

    pub fn drawer_closed(state: &WorldState, tol: &Tolerances) -> bool {
        state.object(ids::DRAWER).open_offset() <= tol.eps_drawer + EPS
    }

    pub fn skillet_on_stove(state: &WorldState) -> bool {
        let s = state.object(ids::SKILLET);
        !state.is_held(ids::SKILLET) && state.object(ids::STOVE).contains_xy(s.position[0], s.position[1])
    }

    pub fn sausage_on_skillet(state: &WorldState) -> bool {
        let (Some(t), Some(b)) = (state.index_of(ids::SAUSAGE), state.index_of(ids::SKILLET)) else {
            return false;
        };
        let s = &state.objects[t];
        state.rests_on(t, b) && state.objects[b].contains_xy(s.position[0], s.position[1])
    }

    pub fn sausage_in_bun(state: &WorldState, table_z: f64) -> bool {
        let s = state.object(ids::SAUSAGE);
        !state.is_held(ids::SAUSAGE)
            && state.object(ids::BUN).contains_xy(s.position[0], s.position[1])
            && (s.position[2] - s.half_extent[2] - table_z).abs() < REST_EPS
    }
}

/// High-water stage after a step; never below `state.task_stage`.
fn advance_stage(state: &WorldState, task: &TaskSpec) -> u32 {
    use predicates::*;
    let tol = &task.tol;
    let mut stage = state.task_stage;
    loop {
        let next = match (task.kind, stage) {
            (TaskKind::Reaching, 0) if check_success(state, task) => 1,
            (TaskKind::Stacking, 0) if state.is_held(ids::SMALL_BLOCK) || stacked(state, tol) => 1,
            (TaskKind::Stacking, 1) if stacked(state, tol) => 2,
            (TaskKind::Sweeping, 0) if state.is_held(ids::BROOM) => 1,
            (TaskKind::Sweeping, 1) if toy_in_dustpan(state) => 2,
            (TaskKind::CollectingToy, 0) if toy_in_drawer(state) => 1,
            (TaskKind::CollectingToy, 1) if toy_in_drawer(state) && drawer_closed(state, tol) => 2,
            (TaskKind::CookingHotdog, 0) if skillet_on_stove(state) => 1,
            (TaskKind::CookingHotdog, 1) if skillet_on_stove(state) && sausage_on_skillet(state) => 2,
            (TaskKind::CookingHotdog, 2) if state.is_held(ids::SAUSAGE) => 3,
            (TaskKind::CookingHotdog, 3) if sausage_in_bun(state, task.workspace.table_z) => 4,
            _ => break,
        };
        stage = next;
    }
    stage
}

pub fn check_success(state: &WorldState, task: &TaskSpec) -> bool {
    use predicates::*;
    match task.kind {
        TaskKind::Reaching => dist3(state.gripper_pos, state.object(ids::TARGET).position) <= task.tol.r_goal + EPS,
        TaskKind::Stacking => stacked(state, &task.tol),
        TaskKind::Sweeping => toy_in_dustpan(state),
        TaskKind::CollectingToy => toy_in_drawer(state) && drawer_closed(state, &task.tol),
        TaskKind::CookingHotdog => state.task_stage >= task.stage_count,
    }
}

/// `-0.1` when the action's position is farther than `tau_aff` from every keypoint.
pub fn affordance_penalty(state: &WorldState, action: &SkillAction, task: &TaskSpec) -> f64 {
    let Some(p) = action.position() else {
        return 0.0;
    };
    let near = task
        .keypoints(state, action.skill)
        .into_iter()
        .any(|k| dist3(k, p) <= task.tol.tau_aff);
    if near {
        0.0
    } else {
        -0.1
    }
}

fn first(v: &mut Option<SafetyViolation>, kind: SafetyViolation) {
    v.get_or_insert(kind);
}

/// Detaches the held object at `xy`, stacking on whatever lies under its footprint.
fn put_down(
    next: &mut WorldState,
    held: usize,
    target: Vec3,
    check_press: bool,
    task: &TaskSpec,
    violation: &mut Option<SafetyViolation>,
) {
    let half = next.objects[held].half_extent;
    let (rest_z, under) = next.rest_height(held, (target[0], target[1]), half, task.workspace.table_z);
    for &u in &under {
        let o = &next.objects[u];
        let (ox, oy) = footprint_overlap([target[0], target[1], 0.0], half, o);
        let overhang = !o.contains_xy(target[0], target[1]);
        if overhang && ox > task.tol.collision && oy > task.tol.collision {
            first(violation, SafetyViolation::Collision);
        }
    }
    if check_press && target[2] < rest_z - task.tol.press {
        first(violation, SafetyViolation::Collision);
    }
    let rest = task.workspace.clamp([target[0], target[1], rest_z]);
    next.objects[held].position = rest;
    next.holding = None;
}

fn push(
    next: &mut WorldState,
    axis: usize,
    start: Vec3,
    delta: f64,
    task: &TaskSpec,
    violation: &mut Option<SafetyViolation>,
) {
    let ws = &task.workspace;
    let tol = &task.tol;
    let lat = 1 - axis;
    let (lo, hi) = ws.range(axis);
    let mut end = start;
    end[axis] += delta;
    if end[axis] < lo - EPS || end[axis] > hi + EPS {
        first(violation, SafetyViolation::OutOfWorkspace);
        end[axis] = end[axis].clamp(lo, hi);
    }
    let (c_lo, c_hi) = if delta >= 0.0 { (start[axis], start[axis] + delta) } else { (start[axis] + delta, start[axis]) };
    let in_corridor = |o: &ObjectState| {
        (o.position[lat] - start[lat]).abs() <= tol.w_push / 2.0 + EPS
            && o.position[axis] >= c_lo - EPS
            && o.position[axis] <= c_hi + EPS
            && start[2] <= o.top() + tol.push_z + EPS
    };

    let movers: Vec<usize> = if task.kind == TaskKind::Sweeping {
        let toy = next.index_of(ids::TOY);
        match toy {
            Some(t) if next.is_held(ids::BROOM) && in_corridor(&next.objects[t]) => vec![t],
            _ => Vec::new(),
        }
    } else {
        (0..next.objects.len())
            .filter(|&i| {
                let o = &next.objects[i];
                !next.is_held(&o.id) && (o.pushable || o.slide.is_some()) && in_corridor(o)
            })
            .collect()
    };

    for i in movers {
        if let Some(slide) = next.objects[i].slide {
            if slide.axis != axis || delta <= 0.0 {
                continue;
            }
            let step = delta.min(next.objects[i].open_offset());
            let riders: Vec<usize> = (0..next.objects.len()).filter(|&j| next.rests_on(j, i)).collect();
            next.objects[i].position[axis] += step;
            for j in riders {
                next.objects[j].position[axis] += step;
            }
        } else {
            let o = &mut next.objects[i];
            let target = o.position[axis] + delta;
            let h = o.half_extent[axis];
            if target < lo - h || target > hi + h {
                first(violation, SafetyViolation::ObjectLost);
            }
            o.position[axis] = target.clamp(lo, hi);
        }
    }
    next.move_gripper(end);
}

/// Applies one skill. Pure: the input state is never modified.
pub fn execute_skill(state: &WorldState, action: &SkillAction, task: &TaskSpec) -> Result<StepOutcome, SimError> {
    if !task.available_skills.contains(&action.skill) {
        return Err(SimError::Rejected(action.skill, task.kind));
    }
    let ws = &task.workspace;
    let mut next = state.clone();
    let mut violation = None;
    let mut p = action.position().unwrap_or(state.gripper_pos);
    if action.skill.has_position() && !ws.contains(p) {
        violation = Some(SafetyViolation::OutOfWorkspace);
        p = ws.clamp(p);
    }

    match action.skill {
        SkillId::Reach => next.move_gripper(p),
        SkillId::Pick => {
            next.move_gripper(p);
            if next.holding.is_none() {
                let tol = &task.tol;
                let target = next
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| {
                        o.graspable
                            && dist_xy(o.position, p) <= tol.r_pick + EPS
                            && (o.position[2] - p[2]).abs() <= tol.z_pick + EPS
                    })
                    .map(|(i, o)| (i, dist3(o.position, p)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .filter(|&i| !next.supports_something(i));
                let penetrates = next
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(i, o)| Some(i) != target && !o.kind.is_zone() && o.contains_point(p));
                if penetrates {
                    first(&mut violation, SafetyViolation::Collision);
                }
                if let Some(i) = target {
                    next.holding = Some(next.objects[i].id.clone());
                    next.move_gripper([p[0], p[1], p[2] + tol.lift]);
                }
            }
        }
        SkillId::Place => {
            next.move_gripper(p);
            if let Some(h) = next.held_index() {
                put_down(&mut next, h, p, true, task, &mut violation);
            }
        }
        SkillId::Release => {
            if let Some(h) = next.held_index() {
                let g = next.gripper_pos;
                put_down(&mut next, h, g, false, task, &mut violation);
            }
        }
        SkillId::PushX | SkillId::PushY => {
            let axis = action.skill.push_axis().expect("push skill has an axis");
            next.move_gripper(p);
            let delta = action.delta().unwrap_or(0.0);
            push(&mut next, axis, p, delta, task, &mut violation);
        }
    }

    next.gripper_pos = ws.clamp(next.gripper_pos);
    if let Some(h) = next.held_index() {
        next.objects[h].position = next.gripper_pos;
    }
    next.step_count += 1;
    next.task_stage = advance_stage(&next, task);
    let success = check_success(&next, task);
    Ok(StepOutcome {
        affordance_penalty: affordance_penalty(state, action, task),
        env_reward: if success { 1.0 } else { 0.0 },
        success,
        safety_violation: violation,
        executed: true,
        next_state: next,
    })
}

/// Objects are overlap-free at reset.
pub fn footprints_disjoint(state: &WorldState) -> bool {
    let solid: Vec<&ObjectState> = state.objects.iter().filter(|o| !o.kind.is_zone()).collect();
    solid.iter().enumerate().all(|(i, a)| {
        solid[i + 1..].iter().all(|b| {
            let (ox, oy) = footprint_overlap(a.position, a.half_extent, b);
            ox <= 0.0 || oy <= 0.0
        })
    })
}
