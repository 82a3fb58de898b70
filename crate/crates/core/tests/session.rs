//! Cross-module behaviour of a training session driven through the public API.

use proptest::prelude::*;
use rnnscope_core::trainer::{ArchEdit, HyperParam};
use rnnscope_core::{compile_epoch_plan, CellKind, NetworkConfig, Phase, Session, Task};

fn config(seed: u64, cell: CellKind, task: Task) -> NetworkConfig {
    NetworkConfig {
        cell_kind: cell,
        task,
        hidden: 5,
        window: 8,
        horizon: 2,
        batch_size: 2,
        batches_per_epoch: 2,
        seed,
        ..NetworkConfig::default()
    }
}

#[derive(Debug, Clone)]
enum Action {
    Epoch,
    Stepped,
    LearningRate(f64),
    Noise(f64),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        3 => Just(Action::Epoch),
        2 => Just(Action::Stepped),
        1 => (1e-4..0.05f64).prop_map(Action::LearningRate),
        1 => (0.0..0.5f64).prop_map(Action::Noise),
    ]
}

fn replay(cfg: &NetworkConfig, actions: &[Action]) -> Session {
    let mut session = Session::new(cfg.clone()).unwrap();
    for a in actions {
        match a {
            Action::Epoch => {
                session.run_epoch().unwrap();
            }
            Action::Stepped => {
                let mut plan = compile_epoch_plan(&session).unwrap();
                plan.run_to_end(&mut session).unwrap();
            }
            Action::LearningRate(v) => session.set_hyperparam(HyperParam::LearningRate, *v).unwrap(),
            Action::Noise(v) => session.set_hyperparam(HyperParam::NoiseAmp, *v).unwrap(),
        }
    }
    session
}

/// Collapses consecutive duplicates so a plan's phases read as a cycle.
fn phase_runs(phases: impl IntoIterator<Item = Phase>) -> Vec<Phase> {
    let mut runs: Vec<Phase> = Vec::new();
    for p in phases {
        if runs.last() != Some(&p) {
            runs.push(p);
        }
    }
    runs
}

#[test]
fn every_epoch_cycles_prediction_validation_training() {
    for cell in [CellKind::Vanilla, CellKind::Lstm] {
        let mut session = Session::new(config(4, cell, Task::Composite)).unwrap();
        for _ in 0..3 {
            let mut plan = compile_epoch_plan(&session).unwrap();
            let mut seen = Vec::new();
            while !plan.is_finished() {
                seen.push(plan.advance(&mut session).unwrap().phase);
            }
            assert_eq!(
                phase_runs(seen),
                [Phase::Prediction, Phase::Validation, Phase::Training]
            );
        }
        assert_eq!(session.epoch, 3);
    }
}

#[test]
fn architecture_edit_after_training_matches_a_fresh_session() {
    let mut session = Session::new(config(6, CellKind::Lstm, Task::Sine)).unwrap();
    for _ in 0..3 {
        session.run_epoch().unwrap();
    }
    session.edit_architecture(ArchEdit::AddLayer { at: 1 }).unwrap();
    let fresh = Session::new(NetworkConfig {
        layer_count: 2,
        ..config(6, CellKind::Lstm, Task::Sine)
    })
    .unwrap();
    assert_eq!(session.params.to_bytes(), fresh.params.to_bytes());
    assert_eq!(session.epoch, 0);
    assert!(session.loss_history.is_empty());
    assert_eq!(session.phase, Phase::Prediction);
}

#[test]
fn text_sessions_train_on_characters() {
    let mut session = Session::new(config(2, CellKind::Lstm, Task::Abab)).unwrap();
    let report = session.run_epoch().unwrap();
    assert!(report.mean_train_loss.is_finite() && report.mean_train_loss >= 0.0);
    let view = session.last_validation.as_ref().unwrap();
    assert!(view.predicted_text.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn command_sequences_replay_bit_for_bit(
        seed in 0u64..1000,
        lstm in any::<bool>(),
        actions in prop::collection::vec(action(), 1..6),
    ) {
        let cell = if lstm { CellKind::Lstm } else { CellKind::Vanilla };
        let cfg = config(seed, cell, Task::Sawtooth);
        let a = replay(&cfg, &actions);
        let b = replay(&cfg, &actions);
        prop_assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let bits = |s: &Session| -> Vec<(usize, u64, u64)> {
            s.loss_history
                .iter()
                .map(|r| (r.epoch, r.train_loss.to_bits(), r.validation_loss.to_bits()))
                .collect()
        };
        prop_assert_eq!(bits(&a), bits(&b));

        let epochs: Vec<usize> = a.loss_history.iter().map(|r| r.epoch).collect();
        prop_assert!(epochs.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.loss_history.iter().all(|r| r.train_loss >= 0.0 && r.validation_loss >= 0.0));
    }
}
