//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (bypassing output capture) and then asserts it.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use fdp_core::adaptation::{adapt, continual_adapt, AdaptStrategy, AdaptationConfig, ParamChecksums, UpcycleSource};
use fdp_core::analysis::{probe_set, score_similarity, DEFAULT_PROBES};
use fdp_core::bench::{evaluate, generate_demos, make_suite, EpisodeDataset, EvalOptions, Suite, SuccessTable};
use fdp_core::composition::{joint_loss, sample_composed, EvalCounter, ModelParts, Router, TrainableMask};
use fdp_core::diffusion::{
    component_loss, DenoiserComponent, NoisePredictor, NoiseSchedule, Sampler, ScheduleKind, Solver,
};
use fdp_core::numerics::{Activation, FeedForwardNet, Matrix, Rng};
use fdp_core::policy::{FactorizedPolicy, PolicyAgent, PolicyConfig, TrainOptions};

const DEMO_SEED: u64 = 1;
const INIT_SEED: u64 = 3;
const WIDTH: usize = 128;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} ({name}): {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn policy_config(components: usize, width: usize) -> PolicyConfig {
    PolicyConfig {
        components,
        embed_dim: 64,
        denoiser_hidden: vec![width, width],
        router_hidden: vec![32],
        diffusion_steps: 50,
        temperature: 0.1,
        ..PolicyConfig::default()
    }
}

fn train_options(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 64,
        learning_rate: 2e-3,
        seed: 0,
        ..TrainOptions::default()
    }
}

fn trained(config: PolicyConfig, demos: &EpisodeDataset, epochs: usize) -> FactorizedPolicy {
    let n = config.components;
    let mut p = FactorizedPolicy::for_dataset(config, demos, INIT_SEED).unwrap();
    p.train(demos, &train_options(epochs), &TrainableMask::all(n)).unwrap();
    p
}

fn full_eval() -> EvalOptions {
    EvalOptions {
        episodes: 40,
        seeds: 5,
        seed: 0,
        max_steps: None,
    }
}

fn pooled_se(a: &SuccessTable, b: &SuccessTable) -> f64 {
    (a.average_std_error.powi(2) + b.average_std_error.powi(2)).sqrt()
}

fn similarity_ok(p: &FactorizedPolicy, demos: &EpisodeDataset) -> bool {
    let s = score_similarity(p, &probe_set(p, demos, DEFAULT_PROBES, 0).unwrap()).unwrap();
    s.is_well_formed(1e-9) && s.probes_used > 0
}

/// Policies trained on reach4 + pick-side: N = 2, 3, 4 at equal component
/// width and a single component matched to the N = 4 parameter count.
struct Multitask {
    suite: Suite,
    demos: EpisodeDataset,
    factorized: Vec<(usize, FactorizedPolicy, SuccessTable)>,
    monolithic: (FactorizedPolicy, SuccessTable),
    seconds: f64,
}

const MULTITASK_EPOCHS: usize = 600;

fn multitask() -> &'static Multitask {
    static CELL: OnceLock<Multitask> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let suite = make_suite("reach4+pick-side").unwrap();
        let demos = generate_demos(&suite, 25, DEMO_SEED).unwrap();
        let factorized = [2, 3, 4]
            .into_iter()
            .map(|n| {
                let p = trained(policy_config(n, WIDTH), &demos, MULTITASK_EPOCHS);
                let table = evaluate(&PolicyAgent::new(&p), &suite, &full_eval()).unwrap();
                (n, p, table)
            })
            .collect();
        let four = policy_config(4, WIDTH);
        let target = four.param_count(demos.state_dim, demos.action_dim);
        let matched = four.matched_to(1, target, demos.state_dim, demos.action_dim);
        let mono = trained(matched, &demos, MULTITASK_EPOCHS);
        let table = evaluate(&PolicyAgent::new(&mono), &suite, &full_eval()).unwrap();
        Multitask {
            suite,
            demos,
            factorized,
            monolithic: (mono, table),
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn factorized(n: usize) -> &'static (usize, FactorizedPolicy, SuccessTable) {
    multitask().factorized.iter().find(|f| f.0 == n).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between analytic gradients and central
/// differences of `loss` over the parameters of `net`.
fn fd_check(net: &mut FeedForwardNet, analytic: &[f64], mut loss: impl FnMut(&FeedForwardNet) -> f64) -> f64 {
    let h = 1e-5;
    let base = net.flat_params();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] += h;
        net.set_flat_params(&p).unwrap();
        let up = loss(net);
        p[i] -= 2.0 * h;
        net.set_flat_params(&p).unwrap();
        let down = loss(net);
        worst = worst.max(rel_err(*a, (up - down) / (2.0 * h)));
    }
    net.set_flat_params(&base).unwrap();
    worst
}

#[test]
fn criterion_01_gradient_oracle() {
    let t = Instant::now();
    let mut cfg_rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    let configs = 10;
    for c in 0..configs {
        let obs_dim = 2 + cfg_rng.below(4);
        let embed = 2 + cfg_rng.below(4);
        let action_len = 1 + cfg_rng.below(4);
        let n = 1 + cfg_rng.below(4);
        let hidden = 3 + cfg_rng.below(5);
        let step_dim = 2 * (1 + cfg_rng.below(3));
        let batch = 1 + cfg_rng.below(4);
        let kind = if c % 2 == 0 { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let schedule = NoiseSchedule::new(10 + cfg_rng.below(30), kind).unwrap();
        let mut rng = Rng::new(100 + c as u64);
        let mut encoder = FeedForwardNet::mlp(obs_dim, &[hidden], embed, Activation::Tanh, &mut rng).unwrap();
        let mut router = Router::new(embed, &[hidden], n, &mut rng)
            .unwrap()
            .with_temperature(0.3 + cfg_rng.uniform())
            .unwrap();
        let mut components: Vec<DenoiserComponent> = (0..n)
            .map(|_| DenoiserComponent::new(action_len, embed, step_dim, &[hidden, hidden], &mut rng).unwrap())
            .collect();
        let obs = Matrix::from_rows(&(0..batch).map(|_| rng.gaussian_vec(obs_dim)).collect::<Vec<_>>()).unwrap();
        let act = Matrix::from_rows(&(0..batch).map(|_| rng.gaussian_vec(action_len)).collect::<Vec<_>>()).unwrap();
        let noise_seed = 7 + c as u64;

        // Single-denoiser noise-prediction loss.
        let a0 = rng.gaussian_vec(action_len);
        let cond = rng.gaussian_vec(embed);
        let single = component_loss(&components[0], &schedule, &a0, &cond, &mut Rng::new(noise_seed)).unwrap();
        let mut net = components[0].net().clone();
        let analytic = single.grads.flatten();
        worst = worst.max(fd_check(&mut net, &analytic, |net| {
            let d = DenoiserComponent::from_net(net.clone(), action_len, embed, step_dim).unwrap();
            component_loss(&d, &schedule, &a0, &cond, &mut Rng::new(noise_seed)).unwrap().loss
        }));

        // Joint loss over encoder, router and every component.
        let loss_of = |e: &FeedForwardNet, r: &Router, cs: &[DenoiserComponent]| {
            let parts = ModelParts { encoder: e, router: r, components: cs };
            joint_loss(parts, &schedule, &obs, &act, &mut Rng::new(noise_seed), &TrainableMask::none(n))
                .unwrap()
                .loss
        };
        let parts = ModelParts { encoder: &encoder, router: &router, components: &components };
        let out = joint_loss(parts, &schedule, &obs, &act, &mut Rng::new(noise_seed), &TrainableMask::all(n)).unwrap();
        let g = out.grads;
        let enc_grad = g.encoder.unwrap().flatten();
        let (r0, c0) = (router.clone(), components.clone());
        worst = worst.max(fd_check(&mut encoder, &enc_grad, |e| loss_of(e, &r0, &c0)));
        let router_grad = g.router.unwrap().flatten();
        let mut rnet = router.net().clone();
        let temp = router.temperature();
        worst = worst.max(fd_check(&mut rnet, &router_grad, |net| {
            loss_of(&encoder, &Router::from_net(net.clone(), temp).unwrap(), &c0)
        }));
        router = Router::from_net(rnet, temp).unwrap();
        for i in 0..n {
            let grad = g.components[i].as_ref().unwrap().flatten();
            let mut net = components[i].net().clone();
            let others = components.clone();
            worst = worst.max(fd_check(&mut net, &grad, |net| {
                let mut cs = others.clone();
                cs[i] = DenoiserComponent::from_net(net.clone(), action_len, embed, step_dim).unwrap();
                loss_of(&encoder, &router, &cs)
            }));
            components[i] = DenoiserComponent::from_net(net, action_len, embed, step_dim).unwrap();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "gradient oracle",
        worst <= 1e-4 && secs < 60.0,
        &format!("{configs} configurations, worst relative error {worst:.2e}, {secs:.1}s"),
    );
}

/// Exact noise prediction for `N(mean, std²)` in every coordinate.
struct GaussianScore<'a> {
    schedule: &'a NoiseSchedule,
    mean: f64,
    std: f64,
}

impl NoisePredictor for GaussianScore<'_> {
    fn output_len(&self) -> usize {
        1
    }

    fn predict_batch(&self, noisy: &Matrix, _: &Matrix, k: usize) -> fdp_core::Result<Matrix> {
        let ab = self.schedule.alpha_bar(k);
        let var = ab * self.std * self.std + 1.0 - ab;
        let mut out = noisy.clone();
        for v in out.as_mut_slice() {
            *v = (1.0 - ab).sqrt() * (*v - ab.sqrt() * self.mean) / var;
        }
        Ok(out)
    }
}

#[test]
fn criterion_02_product_of_gaussians() {
    let t = Instant::now();
    let schedule = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
    let left = GaussianScore { schedule: &schedule, mean: -1.0, std: 0.5 };
    let right = GaussianScore { schedule: &schedule, mean: 1.0, std: 0.5 };
    let n = 10_000;
    let weights = Matrix::from_rows(&vec![vec![0.5, 0.5]; n]).unwrap();
    let cond = Matrix::zeros(n, 1);
    let mut rngs: Vec<Rng> = (0..n as u64).map(|i| Rng::new(42).child(i)).collect();
    let sampler = Sampler { solver: Solver::Ddpm, clip_sample: None };
    let x = sample_composed(&schedule, sampler, &[&left, &right], &cond, &weights, None, &mut rngs, None).unwrap();
    let mean = x.as_slice().iter().sum::<f64>() / n as f64;
    let var = x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Weighted product of N(-1, 0.25) and N(1, 0.25) with w = (0.5, 0.5).
    let (target_mean, target_var) = (0.0, 0.25);
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        "product of Gaussians",
        (mean - target_mean).abs() <= 0.05 && ((var - target_var) / target_var).abs() <= 0.05 && secs < 60.0,
        &format!("mean {mean:+.4} (target 0), variance {var:.4} (target 0.25), {n} samples, {secs:.1}s"),
    );
}

/// Fraction of sampled windows heading to the positive goal.
fn positive_mode_mass(p: &FactorizedPolicy, suite: &Suite, samples: usize) -> f64 {
    let spec = &suite.tasks[0];
    let s0 = spec.initial_state(&mut Rng::new(0));
    let obs = p.observation(&[s0], 0, spec.task_id).unwrap();
    let rows = Matrix::from_rows(&vec![obs; samples]).unwrap();
    let mut rngs: Vec<Rng> = (0..samples as u64).map(|i| Rng::new(7).child(i)).collect();
    let out = p.act_batch(&rows, &mut rngs, Default::default(), None).unwrap();
    let positive = out
        .windows
        .iter()
        .filter(|w| w.iter().take(p.config().exec_horizon).map(|a| a[0]).sum::<f64>() > 0.0)
        .count();
    positive as f64 / samples as f64
}

#[test]
fn criterion_03_multimodality() {
    let suite = make_suite("bimodal1d").unwrap();
    let demos = generate_demos(&suite, 25, DEMO_SEED).unwrap();
    let config = PolicyConfig { denoiser_hidden: vec![64, 64], ..policy_config(4, 64) };
    let four = trained(config.clone(), &demos, 1500);
    let target = config.param_count(demos.state_dim, demos.action_dim);
    let single = trained(config.matched_to(1, target, demos.state_dim, demos.action_dim), &demos, 1500);
    let m4 = positive_mode_mass(&four, &suite, 5000);
    let m1 = positive_mode_mass(&single, &suite, 5000);
    let sims = similarity_ok(&four, &demos) && similarity_ok(&single, &demos);
    report(
        3,
        "multimodality capture",
        (0.3..=0.7).contains(&m4) && (0.3..=0.7).contains(&(1.0 - m4)) && sims,
        &format!(
            "N=4 mode masses {:.3}/{:.3}; matched N=1 mode masses {:.3}/{:.3}; 5000 samples",
            m4,
            1.0 - m4,
            m1,
            1.0 - m1
        ),
    );
}

#[test]
fn criterion_04_multitask_trend() {
    let m = multitask();
    let (_, four, t4) = factorized(4);
    let (mono, t1) = &m.monolithic;
    report(
        4,
        "multitask trend",
        t4.average >= t1.average && m.seconds < 1800.0,
        &format!(
            "FDP N=4 {:.3} ± {:.3} ({} params) vs matched N=1 {:.3} ± {:.3} ({} params), 5 seeds x 40 episodes, {:.0}s for all multitask training",
            t4.average,
            t4.average_std_error,
            four.num_params(),
            t1.average,
            t1.average_std_error,
            mono.num_params(),
            m.seconds
        ),
    );
}

#[test]
fn criterion_05_component_sweep() {
    let (_, _, t2) = factorized(2);
    let (_, _, t3) = factorized(3);
    let (_, _, t4) = factorized(4);
    let ok = t3.average >= t2.average - pooled_se(t2, t3)
        && t4.average >= t3.average - pooled_se(t3, t4)
        && t4.average >= t2.average - pooled_se(t2, t4);
    report(
        5,
        "component-count sweep",
        ok,
        &format!(
            "N=2 {:.3} ± {:.3}, N=3 {:.3} ± {:.3}, N=4 {:.3} ± {:.3}",
            t2.average, t2.average_std_error, t3.average, t3.average_std_error, t4.average, t4.average_std_error
        ),
    );
}

/// Pretraining on reach4, then a new module for pick-side with and without
/// a replay buffer.
struct Retention {
    pre_suite: Suite,
    pretrain_demos: EpisodeDataset,
    base: FactorizedPolicy,
    base_table: SuccessTable,
    replay: (FactorizedPolicy, SuccessTable),
    no_replay: (FactorizedPolicy, SuccessTable),
}

fn adaptation_config(replay: usize) -> AdaptationConfig {
    AdaptationConfig {
        strategy: AdaptStrategy::NewModule,
        upcycle: UpcycleSource::HighestWeight,
        replay_per_task: replay,
        demos_per_task: 10,
        train_encoder: false,
        train: train_options(300),
    }
}

fn retention() -> &'static Retention {
    static CELL: OnceLock<Retention> = OnceLock::new();
    CELL.get_or_init(|| {
        let pre_suite = make_suite("reach4").unwrap();
        let pretrain_demos = generate_demos(&pre_suite, 25, DEMO_SEED).unwrap();
        let base = trained(policy_config(4, WIDTH), &pretrain_demos, MULTITASK_EPOCHS);
        let base_table = evaluate(&PolicyAgent::new(&base), &pre_suite, &full_eval()).unwrap();
        let new = generate_demos(&make_suite("pick-side").unwrap(), 10, DEMO_SEED).unwrap();
        let run = |replay: usize| {
            let (p, _) = adapt(&base, &adaptation_config(replay), &new, (replay > 0).then_some(&pretrain_demos)).unwrap();
            let table = evaluate(&PolicyAgent::new(&p), &pre_suite, &full_eval()).unwrap();
            (p, table)
        };
        Retention {
            replay: run(5),
            no_replay: run(0),
            pre_suite,
            pretrain_demos,
            base,
            base_table,
        }
    })
}

#[test]
fn criterion_06_freeze_bit_exactness() {
    let r = retention();
    let before = ParamChecksums::of(&r.base);
    let mut detail = Vec::new();
    let mut ok = true;
    for (label, (p, _)) in [("replay", &r.replay), ("no replay", &r.no_replay)] {
        let after = ParamChecksums::of(p);
        let same = after.components[..4] == before.components[..] && after.encoder == before.encoder;
        ok &= same && p.num_components() == 5;
        detail.push(format!("{label}: {} of 4 pretrained SHA-256 blocks unchanged", (0..4).filter(|i| after.components[*i] == before.components[*i]).count()));
    }
    let mut restored = r.replay.0.clone();
    restored.truncate_components(4, r.base.router().clone()).unwrap();
    let same_eval = evaluate(&PolicyAgent::new(&restored), &r.pre_suite, &full_eval()).unwrap() == r.base_table;
    ok &= same_eval;
    detail.push(format!("cached router restores pretrain results exactly: {same_eval}"));
    report(6, "freeze bit-exactness", ok, &detail.join("; "));
}

#[test]
fn criterion_07_retention() {
    let r = retention();
    let pre = r.base_table.average;
    let with = r.replay.1.average;
    let without = r.no_replay.1.average;
    let sims = similarity_ok(&r.base, &r.pretrain_demos) && similarity_ok(&r.replay.0, &r.pretrain_demos);
    report(
        7,
        "retention with replay",
        with >= 0.85 * pre && with >= without && sims,
        &format!(
            "pretrain-task success before {pre:.3}, after with 5/task replay {with:.3} ({:.1}% of before), without replay {without:.3}",
            100.0 * with / pre.max(1e-12)
        ),
    );
}

#[test]
fn criterion_08_top_k_pruning() {
    let m = multitask();
    let (_, p, full) = factorized(4);
    let all = EvalCounter::new();
    let pruned = EvalCounter::new();
    let t_all = evaluate(&PolicyAgent::new(p).with_counter(&all), &m.suite, &full_eval()).unwrap();
    let t_top2 = evaluate(&PolicyAgent::new(p).with_top_k(Some(2)).with_counter(&pruned), &m.suite, &full_eval()).unwrap();
    let drop = (full.average - t_top2.average) / full.average.max(1e-12);
    let exact_half = pruned.evaluations_per_step() * 2.0 == all.evaluations_per_step() && all.evaluations_per_step() == 4.0;
    report(
        8,
        "top-k pruning",
        exact_half && drop <= 0.25 && t_all == *full,
        &format!(
            "evaluations per denoising step {} -> {}; success {:.3} -> {:.3} ({:.1}% relative drop)",
            all.evaluations_per_step(),
            pruned.evaluations_per_step(),
            full.average,
            t_top2.average,
            100.0 * drop
        ),
    );
}

#[test]
fn criterion_09_continual_structure() {
    let suite = make_suite("continual12").unwrap();
    let demos = generate_demos(&suite, 10, DEMO_SEED).unwrap();
    let names: Vec<String> = suite.tasks[..4].iter().map(|t| t.name.clone()).collect();
    let pre = demos.select_tasks(&names).unwrap();
    let base = trained(policy_config(4, 64), &pre, 200);
    let config = AdaptationConfig {
        replay_per_task: 2,
        train: train_options(100),
        ..adaptation_config(0)
    };
    let eval = EvalOptions { episodes: 10, seeds: 1, seed: 0, max_steps: None };
    let (last, log) = continual_adapt(&base, &suite, 4, &config, &demos, &eval).unwrap();
    let first = ParamChecksums::of(&base).components;
    let mut stable = true;
    let mut prev = first.clone();
    for s in &log.stages {
        stable &= s.checksums_after.components[..prev.len()] == prev[..];
        stable &= s.checksums_after.components[..4] == first[..];
        prev = s.checksums_after.components.clone();
    }
    let counts: Vec<usize> = log.stages.iter().map(|s| s.components).collect();
    let final_tasks = log.stages.last().and_then(|s| s.evaluation.as_ref()).map_or(0, |e| e.tasks.len());
    let averages: Vec<String> = log
        .stages
        .iter()
        .map(|s| format!("{:.2}", s.evaluation.as_ref().unwrap().average))
        .collect();
    let sims = similarity_ok(&last, &demos);
    report(
        9,
        "continual structure",
        last.num_components() == 12 && counts == (5..=12).collect::<Vec<_>>() && stable && final_tasks == 12 && sims,
        &format!(
            "final components {}, earlier components stable {stable}, final evaluation covers {final_tasks} tasks, stage averages [{}]",
            last.num_components(),
            averages.join(", ")
        ),
    );
}

const TINY_CONFIG: &str = r#"
suite = "reach4"
[demos]
per_task = 4
[policy]
components = 3
embed_dim = 16
denoiser_hidden = [32, 32]
router_hidden = [16]
step_embed_dim = 8
diffusion_steps = 10
pred_horizon = 8
exec_horizon = 4
[train]
epochs = 3
batch_size = 32
[eval]
seeds = 2
episodes = 3
[adaptation]
demos_per_task = 2
replay_per_task = 1
[adaptation.train]
epochs = 2
"#;

fn fdp(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fdp"))
        .args(args)
        .current_dir(dir)
        .env_remove("FDP_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY_CONFIG).unwrap();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("gen-demos", vec!["gen-demos", "--config", "tiny.toml", "--seed", "5"]),
        ("train", vec!["train", "--config", "tiny.toml", "--seed", "5"]),
        ("eval", vec!["eval", "--config", "tiny.toml", "--seed", "5", "--checkpoint", "train-a/policy.json"]),
        ("eval top-k", vec!["eval", "--config", "tiny.toml", "--seed", "5", "--top-k", "2", "--checkpoint", "train-a/policy.json"]),
        ("adapt", vec!["adapt", "--config", "tiny.toml", "--seed", "5", "--adapt-suite", "continual12", "--checkpoint", "train-a/policy.json"]),
        ("continual", vec!["continual", "--config", "tiny.toml", "--seed", "5", "--suite", "continual12"]),
        ("analyze", vec!["analyze", "--config", "tiny.toml", "--seed", "5", "--checkpoint", "train-a/policy.json", "--log", "a=train-a/training_log.json"]),
    ];
    let mut identical = Vec::new();
    let mut ok = true;
    for (name, args) in &commands {
        let stem = name.replace(' ', "-");
        let mut outs = Vec::new();
        for run in ["a", "b"] {
            let out = format!("{stem}-{run}");
            let mut full = args.clone();
            full.extend(["--out", &out]);
            let res = fdp(&full, dir);
            ok &= res.status.success();
            if !res.status.success() {
                identical.push(format!("{name} failed: {}", String::from_utf8_lossy(&res.stderr)));
            }
            outs.push(snapshot(&dir.join(&out)));
        }
        let same = !outs[0].is_empty() && outs[0] == outs[1];
        ok &= same;
        identical.push(format!("{name} {}", if same { "identical" } else { "DIFFERS" }));
    }
    // Rerunning from the config written into an output directory reproduces it.
    let res = fdp(&["train", "--config", "train-a/config.toml", "--out", "train-c"], dir);
    let replay = res.status.success() && snapshot(&dir.join("train-a")) == snapshot(&dir.join("train-c"));
    ok &= replay;
    identical.push(format!("train from written config {}", if replay { "identical" } else { "DIFFERS" }));
    // Thread count does not change results.
    let res = fdp(&["eval", "--config", "tiny.toml", "--seed", "5", "--jobs", "1", "--checkpoint", "train-a/policy.json", "--out", "eval-j1"], dir);
    let jobs = res.status.success()
        && std::fs::read(dir.join("eval-j1/success.json")).unwrap() == std::fs::read(dir.join("eval-a/success.json")).unwrap();
    ok &= jobs;
    identical.push(format!("eval with --jobs 1 {}", if jobs { "identical" } else { "DIFFERS" }));
    report(10, "determinism", ok, &identical.join("; "));
}

#[test]
fn criterion_11_similarity_invariants() {
    let m = multitask();
    let mut ok = true;
    for (_, p, _) in &m.factorized {
        ok &= similarity_ok(p, &m.demos);
    }
    ok &= similarity_ok(&m.monolithic.0, &m.demos);
    let (_, four, _) = factorized(4);
    let mut dup = four.clone();
    dup.upcycle_component(1).unwrap();
    let s = score_similarity(&dup, &probe_set(&dup, &m.demos, DEFAULT_PROBES, 0).unwrap()).unwrap();
    let dup_one = (s.get(1, 4) - 1.0).abs() < 1e-12 && (s.get(4, 1) - 1.0).abs() < 1e-12;
    let trained = score_similarity(four, &probe_set(four, &m.demos, DEFAULT_PROBES, 0).unwrap()).unwrap();
    let off = trained.off_diagonal();
    let spread = off.iter().cloned().fold(f64::MIN, f64::max) - off.iter().cloned().fold(f64::MAX, f64::min);
    report(
        11,
        "similarity invariants",
        ok && dup_one && s.is_well_formed(1e-9),
        &format!(
            "all multitask checkpoints symmetric with unit diagonal: {ok}; duplicated component similarity {:.15}; trained N=4 off-diagonal spread {spread:.3}",
            s.get(1, 4)
        ),
    );
}
