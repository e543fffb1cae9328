use proptest::prelude::*;

use seed_core::feedback::FeedbackContext;
use seed_core::render::SceneSnapshot;
use seed_core::sim::{observe, reset, TaskKind, TaskSpec};
use seed_core::skills::SkillAction;
use seed_core::train::RunMetrics;
use seed_gateway::wire::{ControlAction, ErrorCode, Hello, StatsPayload};
use seed_gateway::{SessionMode, WireMessage};

fn task() -> impl Strategy<Value = TaskKind> {
    prop::sample::select(TaskKind::ALL.to_vec())
}

fn proposal() -> impl Strategy<Value = WireMessage> {
    (task(), any::<u64>(), 0u64..1_000_000, prop::collection::vec(-1.0f64..1.0, 4), any::<prop::sample::Index>())
        .prop_map(|(kind, seed, step, raw, pick)| {
            let task = TaskSpec::new(kind);
            let state = reset(&task, seed);
            let obs = observe(&state, &task, false).values;
            let skill = task.available_skills[pick.index(task.available_skills.len())];
            let action = SkillAction::from_normalized(skill, &raw, &task.workspace);
            let req = FeedbackContext {
                step_id: step,
                state: &state,
                obs: &obs,
                action: &action,
                task: &task,
            }
            .request();
            WireMessage::proposal(&req)
        })
}

fn scene() -> impl Strategy<Value = WireMessage> {
    (task(), any::<u64>()).prop_map(|(kind, seed)| {
        let task = TaskSpec::new(kind);
        WireMessage::scene(&SceneSnapshot::capture(&reset(&task, seed), kind, &task.workspace))
    })
}

fn stats() -> impl Strategy<Value = WireMessage> {
    (any::<u32>(), any::<u32>(), any::<bool>(), prop::option::of(any::<u64>()), 0.0f64..1.0).prop_map(
        |(steps, viol, paused, outstanding, rate)| {
            let metrics = RunMetrics {
                decision_steps: steps as u64,
                safety_violations: viol as u64,
                eval_curve: vec![(500, rate)],
                ..RunMetrics::default()
            };
            WireMessage::stats(&StatsPayload {
                metrics,
                paused,
                trainer_connected: !paused,
                outstanding_step: outstanding,
            })
        },
    )
}

fn small() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (any::<bool>(), prop::option::of("[a-z0-9]{1,8}")).prop_map(|(train, resume)| WireMessage::hello(&Hello {
            mode: if train { SessionMode::TrainHuman } else { SessionMode::Observe },
            resume,
        })),
        (any::<u64>(), -1i8..=1).prop_map(|(s, v)| WireMessage::feedback(s, v)),
        prop::sample::select(vec![ControlAction::Pause, ControlAction::Resume, ControlAction::Stop])
            .prop_map(WireMessage::control),
        (prop::sample::select(vec![ErrorCode::StaleStep, ErrorCode::BadMessage, ErrorCode::NotTrainer]), ".{0,40}")
            .prop_map(|(c, m)| WireMessage::error(c, m)),
    ]
}

fn any_message() -> impl Strategy<Value = WireMessage> {
    (
        prop_oneof![proposal(), scene(), stats(), small()],
        prop::option::of("s[0-9]{1,4}"),
    )
        .prop_map(|(m, session)| match session {
            Some(s) => m.with_session(s),
            None => m,
        })
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(msg in any_message()) {
        let text = msg.to_json();
        let back = WireMessage::parse(&text).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(back.to_json(), text);
    }
}

#[test]
fn every_kind_is_covered() {
    use proptest::strategy::ValueTree;
    use seed_gateway::MessageKind;
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..400 {
        seen.insert(any_message().new_tree(&mut runner).unwrap().current().kind);
    }
    for k in MessageKind::ALL {
        assert!(seen.contains(&k), "{k:?} never generated");
    }
}
