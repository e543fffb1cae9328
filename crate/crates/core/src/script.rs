//! Scripted stage tables: for every task, the ordered sub-goals a competent
//! operator would walk through, each with its correct skill, a keypoint
//! selector and a completion predicate.
//!
//! The current entry is the first one whose predicate does not hold, so a
//! table also recovers from regressions (a block dropped on the table sends
//! the walk back to its Pick entry).

use serde::Serialize;

use crate::sim::{dist3, ids, predicates, TaskKind, TaskSpec, Vec3, WorldState};
use crate::skills::{SkillAction, SkillId};

/// Picks the keypoint (and scripted push displacement) for an entry.
pub type KeypointFn = fn(&WorldState, &TaskSpec) -> Target;
pub type DoneFn = fn(&WorldState, &TaskSpec) -> bool;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub point: Vec3,
    /// Scripted push displacement; its sign is the required direction.
    pub delta: Option<f64>,
}

#[derive(Clone)]
pub struct StageEntry {
    pub label: &'static str,
    pub skill: SkillId,
    pub keypoint: KeypointFn,
    pub done: DoneFn,
}

impl std::fmt::Debug for StageEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StageEntry")
            .field("label", &self.label)
            .field("skill", &self.skill)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct StageTable {
    pub task: TaskKind,
    pub entries: Vec<StageEntry>,
}

/// What the table expects at the current state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Expectation {
    pub index: usize,
    pub label: &'static str,
    pub skill: SkillId,
    pub point: Vec3,
    pub delta: Option<f64>,
}

fn at(id: &'static str) -> impl Fn(&WorldState) -> Vec3 {
    move |s| s.object(id).position
}

/// Resting point of the held object centered on top of `base`.
fn on_top_of(s: &WorldState, base: &str, held: &str) -> Vec3 {
    let b = s.object(base);
    let h = s.object(held).half_extent[2];
    [b.position[0], b.position[1], b.top() + h]
}

fn on_zone(s: &WorldState, t: &TaskSpec, zone: &str, held: &str) -> Vec3 {
    let z = s.object(zone).position;
    [z[0], z[1], t.workspace.table_z + s.object(held).half_extent[2]]
}

fn point(p: Vec3) -> Target {
    Target { point: p, delta: None }
}

impl StageTable {
    pub fn for_task(kind: TaskKind) -> Self {
        use SkillId::*;
        let e = |label, skill, keypoint: KeypointFn, done: DoneFn| StageEntry { label, skill, keypoint, done };
        let entries = match kind {
            TaskKind::Reaching => vec![e(
                "reach target",
                Reach,
                |s, _| point(at(ids::TARGET)(s)),
                |s, t| crate::sim::check_success(s, t),
            )],
            TaskKind::Stacking => vec![
                e(
                    "pick small block",
                    Pick,
                    |s, _| point(at(ids::SMALL_BLOCK)(s)),
                    |s, t| s.is_held(ids::SMALL_BLOCK) || predicates::stacked(s, &t.tol),
                ),
                e(
                    "place on large block",
                    Place,
                    |s, _| point(on_top_of(s, ids::LARGE_BLOCK, ids::SMALL_BLOCK)),
                    |s, t| predicates::stacked(s, &t.tol),
                ),
            ],
            TaskKind::Sweeping => vec![
                e(
                    "pick broom",
                    Pick,
                    |s, _| point(at(ids::BROOM)(s)),
                    |s, _| s.is_held(ids::BROOM) || predicates::toy_in_dustpan(s),
                ),
                e(
                    "sweep toy into dustpan",
                    PushX,
                    |s, _| {
                        let toy = at(ids::TOY)(s);
                        let pan = at(ids::DUSTPAN)(s);
                        Target { point: toy, delta: Some(pan[0] - toy[0]) }
                    },
                    |s, _| predicates::toy_in_dustpan(s),
                ),
            ],
            TaskKind::CollectingToy => vec![
                e(
                    "pick toy",
                    Pick,
                    |s, _| point(at(ids::TOY)(s)),
                    |s, _| s.is_held(ids::TOY) || predicates::toy_in_drawer(s),
                ),
                e(
                    "place toy in drawer",
                    Place,
                    |s, _| point(on_top_of(s, ids::DRAWER, ids::TOY)),
                    |s, _| predicates::toy_in_drawer(s),
                ),
                e(
                    "push drawer closed",
                    PushY,
                    |s, _| {
                        let d = s.object(ids::DRAWER);
                        Target { point: d.position, delta: Some(d.open_offset()) }
                    },
                    |s, t| predicates::toy_in_drawer(s) && predicates::drawer_closed(s, &t.tol),
                ),
            ],
            TaskKind::CookingHotdog => vec![
                e(
                    "pick skillet",
                    Pick,
                    |s, _| point(at(ids::SKILLET)(s)),
                    |s, _| s.is_held(ids::SKILLET) || predicates::skillet_on_stove(s),
                ),
                e(
                    "place skillet on stove",
                    Place,
                    |s, t| point(on_zone(s, t, ids::STOVE, ids::SKILLET)),
                    |s, _| predicates::skillet_on_stove(s),
                ),
                e(
                    "pick sausage",
                    Pick,
                    |s, _| point(at(ids::SAUSAGE)(s)),
                    |s, _| s.task_stage >= 2 || s.is_held(ids::SAUSAGE),
                ),
                e(
                    "place sausage on skillet",
                    Place,
                    |s, _| point(on_top_of(s, ids::SKILLET, ids::SAUSAGE)),
                    |s, _| s.task_stage >= 2,
                ),
                e(
                    "pick sausage again",
                    Pick,
                    |s, _| point(at(ids::SAUSAGE)(s)),
                    |s, t| s.is_held(ids::SAUSAGE) || predicates::sausage_in_bun(s, t.workspace.table_z),
                ),
                e(
                    "place sausage in bun",
                    Place,
                    |s, t| point(on_zone(s, t, ids::BUN, ids::SAUSAGE)),
                    |s, t| predicates::sausage_in_bun(s, t.workspace.table_z),
                ),
            ],
        };
        Self { task: kind, entries }
    }

    /// First unfinished entry, or `None` once every entry is done.
    pub fn expectation(&self, state: &WorldState, task: &TaskSpec) -> Option<Expectation> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| !(e.done)(state, task))
            .map(|(index, e)| {
                let target = (e.keypoint)(state, task);
                Expectation {
                    index,
                    label: e.label,
                    skill: e.skill,
                    point: target.point,
                    delta: target.delta,
                }
            })
    }

    /// The scripted action for the current state: the expected skill at the exact keypoint.
    pub fn scripted_action(&self, state: &WorldState, task: &TaskSpec) -> Option<SkillAction> {
        self.expectation(state, task).map(|x| {
            let mut params = x.point.to_vec();
            if let Some(d) = x.delta {
                params.push(d);
            }
            SkillAction::from_world(x.skill, &params, &task.workspace)
        })
    }

    /// Whether `action` is the stage-correct skill within `tau_ok` of the keypoint,
    /// pushing in the scripted direction.
    pub fn approves(&self, state: &WorldState, task: &TaskSpec, action: &SkillAction, tau_ok: f64) -> bool {
        let Some(x) = self.expectation(state, task) else {
            return false;
        };
        if action.skill != x.skill {
            return false;
        }
        let Some(p) = action.position() else {
            return true;
        };
        if dist3(p, x.point) > tau_ok {
            return false;
        }
        match (x.delta, action.delta()) {
            (Some(want), Some(got)) => want.signum() == got.signum() && got != 0.0,
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{execute_skill, reset};

    #[test]
    fn stacking_walk_through() {
        let t = TaskSpec::new(TaskKind::Stacking);
        let table = StageTable::for_task(TaskKind::Stacking);
        let s = reset(&t, 21);
        let x0 = table.expectation(&s, &t).unwrap();
        assert_eq!((x0.index, x0.skill), (0, SkillId::Pick));
        let s1 = execute_skill(&s, &table.scripted_action(&s, &t).unwrap(), &t).unwrap().next_state;
        let x1 = table.expectation(&s1, &t).unwrap();
        assert_eq!((x1.index, x1.skill), (1, SkillId::Place));
        let large = s1.object(ids::LARGE_BLOCK);
        assert_eq!(x1.point, [large.position[0], large.position[1], large.top() + 0.02]);
        // 3 cm above the rest point is still within tau_ok
        let near = SkillAction::from_world(SkillId::Place, &[x1.point[0], x1.point[1], x1.point[2] + 0.03], &t.workspace);
        assert!(table.approves(&s1, &t, &near, 0.04));
        let s2 = execute_skill(&s1, &table.scripted_action(&s1, &t).unwrap(), &t).unwrap().next_state;
        assert!(table.expectation(&s2, &t).is_none());
    }

    #[test]
    fn push_direction_must_match() {
        let t = TaskSpec::new(TaskKind::Sweeping);
        let table = StageTable::for_task(TaskKind::Sweeping);
        let s = reset(&t, 2);
        let s1 = execute_skill(&s, &table.scripted_action(&s, &t).unwrap(), &t).unwrap().next_state;
        let good = table.scripted_action(&s1, &t).unwrap();
        assert!(table.approves(&s1, &t, &good, 0.04));
        let mut wrong = good.world_params().to_vec();
        wrong[3] = -wrong[3];
        let wrong = SkillAction::from_world(SkillId::PushX, &wrong, &t.workspace);
        assert!(!table.approves(&s1, &t, &wrong, 0.04));
    }

    #[test]
    fn dropped_block_returns_to_pick() {
        let t = TaskSpec::new(TaskKind::Stacking);
        let table = StageTable::for_task(TaskKind::Stacking);
        let s = reset(&t, 4);
        let s1 = execute_skill(&s, &table.scripted_action(&s, &t).unwrap(), &t).unwrap().next_state;
        let drop = SkillAction::from_world(SkillId::Place, &[0.5, 0.05, 0.1], &t.workspace);
        let s2 = execute_skill(&s1, &drop, &t).unwrap().next_state;
        assert_eq!(s2.task_stage, 1, "stage is a high-water mark");
        assert_eq!(table.expectation(&s2, &t).unwrap().index, 0);
    }
}
