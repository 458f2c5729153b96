//! Synthetic multitask point-mass benchmark.
//!
//! Every task is a small deterministic integrator driven by velocity
//! commands, paired with a scripted proportional expert. Tasks with two
//! behaviour modes latch one per episode, which makes the demonstrations
//! genuinely multimodal at the start state.

mod dataset;
mod env;
mod rollout;
mod suite;

pub use dataset::{
    expert_episode, generate_demos, stack_history, ActionNormalizer, Episode, EpisodeDataset, ATTEMPT_FACTOR,
    DATASET_FORMAT, DATASET_VERSION,
};
pub use env::{Env, EnvSpec, StepOutcome, TaskKind, DT, EXPERT_GAIN, HOLD_STEPS, MAX_SPEED};
pub use rollout::{
    evaluate, rollout, rollout_batch, Agent, EvalOptions, Plan, RolloutContext, RolloutJob, RolloutRecord,
    ScriptedExpert, SuccessTable, TaskSuccess,
};
pub use suite::{make_suite, Suite, CONTINUAL_ANGLES, SUITES};

/// Stable 64-bit stream id of a task name (FNV-1a).
pub(crate) fn task_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn all_tasks() -> Vec<EnvSpec> {
        SUITES
            .iter()
            .flat_map(|s| make_suite(s).unwrap().tasks)
            .collect()
    }

    #[test]
    fn suite_sizes() {
        assert_eq!(make_suite("reach4").unwrap().tasks.len(), 4);
        assert_eq!(make_suite("pick-side").unwrap().tasks.len(), 2);
        assert_eq!(make_suite("continual12").unwrap().tasks.len(), 12);
        let combo = make_suite("reach4+pick-side").unwrap();
        assert_eq!(combo.tasks.len(), 6);
        assert_eq!(combo.tasks[5].task_id, 5);
    }

    #[test]
    fn unknown_suite_lists_known_ones() {
        let err = make_suite("reach5").unwrap_err().to_string();
        for s in SUITES {
            assert!(err.contains(s), "{err}");
        }
        assert!(make_suite("reach4+bimodal1d").is_err());
    }

    #[test]
    fn initial_states_are_not_successful() {
        for spec in all_tasks() {
            let mut rng = Rng::new(4);
            for _ in 0..200 {
                let s = spec.initial_state(&mut rng);
                assert!(!spec.at_goal(&s) && !spec.collided(&s), "{}", spec.name);
            }
        }
    }

    #[test]
    fn expert_solves_every_task() {
        for spec in all_tasks() {
            let wins = (0..100)
                .filter(|&seed| expert_episode(&spec, &mut Rng::new(seed)).unwrap().success)
                .count();
            assert!(wins >= 95, "{}: {wins}/100", spec.name);
        }
    }

    #[test]
    fn pick_side_modes_are_balanced() {
        let suite = make_suite("pick-side").unwrap();
        let spec = &suite.tasks[0];
        let left = (0..1000)
            .filter(|&seed| expert_episode(spec, &mut Rng::new(seed)).unwrap().mode == 0)
            .count();
        assert!((400..=600).contains(&left), "{left}");
    }

    #[test]
    fn expert_actions_respect_bounds_and_rest_at_goal() {
        let mut rng = Rng::new(8);
        for spec in all_tasks() {
            let ep = expert_episode(&spec, &mut rng).unwrap();
            assert!(ep.actions.iter().flatten().all(|a| a.abs() <= MAX_SPEED));
        }
        let reach = &make_suite("reach4").unwrap().tasks[0];
        let at_goal = [0.6, 0.6, 0.6, 0.6, 0.0, 0.0, 0.0];
        assert!(reach.expert_command(&at_goal, 0).iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn pick_side_start_actions_form_two_clusters() {
        let spec = &make_suite("pick-side").unwrap().tasks[0];
        let probe = spec.initial_state(&mut Rng::new(0));
        let mut rng = Rng::new(1);
        let samples: Vec<(usize, Vec<f64>)> = (0..200)
            .map(|_| {
                let m = rng.below(2);
                (m, spec.expert_action(&probe, m, &mut rng))
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| (a[0] - b[0]).hypot(a[1] - b[1]);
        let mut silhouette = 0.0;
        for (m, a) in &samples {
            let mut same = (0.0, 0usize);
            let mut other = (0.0, 0usize);
            for (m2, b) in &samples {
                if m2 == m {
                    same = (same.0 + dist(a, b), same.1 + 1);
                } else {
                    other = (other.0 + dist(a, b), other.1 + 1);
                }
            }
            let (ai, bi) = (same.0 / (same.1 - 1) as f64, other.0 / other.1 as f64);
            silhouette += (bi - ai) / ai.max(bi);
        }
        silhouette /= samples.len() as f64;
        assert!(silhouette > 0.8, "{silhouette}");
    }

    #[test]
    fn demo_generation_contract() {
        let suite = make_suite("reach4").unwrap();
        let a = generate_demos(&suite, 25, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.episodes.iter().all(|e| e.success));
        let b = generate_demos(&suite, 25, 7).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut ba).unwrap();
        b.write_jsonl(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let back = EpisodeDataset::read_jsonl(ba.as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(generate_demos(&suite, 0, 7).is_err());
    }

    #[test]
    fn replay_subset_takes_first_episodes() {
        let ds = generate_demos(&make_suite("reach4").unwrap(), 8, 1).unwrap();
        let r = ds.take_per_task(5).unwrap();
        assert_eq!(r.len(), 20);
        assert_eq!(r.episodes[0], ds.episodes[0]);
        assert_eq!(r.episodes[5], ds.episodes[8]);
    }

    #[test]
    fn rejects_truncated_dataset_file() {
        let ds = generate_demos(&make_suite("bimodal1d").unwrap(), 3, 1).unwrap();
        let mut bytes = Vec::new();
        ds.write_jsonl(&mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let cut: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(EpisodeDataset::read_jsonl(cut.as_bytes()), Err(crate::Error::Format(_))));
    }

    #[test]
    fn expert_evaluation_and_rollout_counts() {
        let suite = make_suite("reach4+pick-side").unwrap();
        let table = evaluate(&ScriptedExpert, &suite, &EvalOptions::default()).unwrap();
        for t in &table.tasks {
            assert!(t.mean >= 0.95, "{}: {}", t.task, t.mean);
            assert_eq!(t.rollouts, 200);
            assert_eq!(t.per_seed.len(), 5);
        }
        let csv = table.to_csv().unwrap();
        assert!(csv.starts_with("task,mean,std_error,rollouts\n"));
        assert_eq!(csv.lines().count(), 8);
    }

    struct Chunked;
    impl Agent for Chunked {
        fn plan_batch(&self, contexts: &mut [&mut RolloutContext]) -> crate::Result<Vec<Plan>> {
            Ok(contexts
                .iter()
                .map(|c| Plan {
                    actions: vec![c.env.spec().expert_command(c.env.state(), c.mode); 3],
                    weights: Some(vec![0.5, 0.5]),
                })
                .collect())
        }
    }

    #[test]
    fn trace_length_matches_replans() {
        let spec = &make_suite("reach4").unwrap().tasks[1];
        for seed in 0..10 {
            let r = rollout(&Chunked, spec, seed, None).unwrap();
            assert_eq!(r.weight_trace.len(), r.steps.div_ceil(3));
            assert_eq!(r.states.len(), r.steps + 1);
        }
        let empty = rollout(&Chunked, spec, 0, Some(0)).unwrap();
        assert!(!empty.success && empty.weight_trace.is_empty() && empty.steps == 0);
    }

    #[test]
    fn batched_and_single_rollouts_agree() {
        let spec = &make_suite("pick-side").unwrap().tasks[1];
        let root = Rng::new(3);
        let jobs: Vec<RolloutJob> = (0..6).map(|e| RolloutJob::from_root(spec, &root, e, None)).collect();
        let batch = rollout_batch(&ScriptedExpert, jobs.clone()).unwrap();
        for (job, rec) in jobs.into_iter().zip(batch) {
            assert_eq!(rollout_batch(&ScriptedExpert, vec![job]).unwrap()[0], rec);
        }
    }

    proptest! {
        #[test]
        fn dynamics_are_deterministic(t in 0usize..20, seed in 0u64..1000, a in prop::collection::vec(-2.0f64..2.0, 2)) {
            let tasks = all_tasks();
            let spec = &tasks[t % tasks.len()];
            let s = spec.initial_state(&mut Rng::new(seed));
            let act = &a[..spec.action_dim()];
            prop_assert_eq!(spec.step(&s, act).unwrap(), spec.step(&s, act).unwrap());
        }

        #[test]
        fn success_stays_latched(seed in 0u64..200) {
            let spec = &make_suite("reach4").unwrap().tasks[(seed % 4) as usize];
            let mut rng = Rng::new(seed);
            let mut env = Env::reset(spec, &mut rng);
            let mut latched = false;
            while !env.done() {
                let a = spec.expert_action(env.state(), 0, &mut rng);
                let out = env.step(&a).unwrap();
                prop_assert!(!latched || out.success);
                latched |= out.success;
            }
        }

        #[test]
        fn normalizer_round_trip(lo in -3.0f64..0.0, span in 0.0f64..4.0, x in 0.0f64..1.0) {
            let n = ActionNormalizer::fit(1, [[lo].as_slice(), [lo + span].as_slice()]).unwrap();
            let a = lo + x * span;
            let back = n.denormalize(&n.normalize(&[a]))[0];
            prop_assert!((back - a).abs() <= 1e-12);
            let z = n.normalize(&[a])[0];
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&z));
        }
    }
}
