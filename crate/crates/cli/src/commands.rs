use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fdp_core::adaptation::{adapt as adapt_policy, continual_adapt, AdaptationLog};
use fdp_core::analysis::{
    convergence_report, probe_set, score_similarity, weight_trace_csv,
};
use fdp_core::bench::{evaluate, generate_demos, make_suite, rollout, EpisodeDataset, Suite, SuccessTable};
use fdp_core::composition::{EvalCounter, TrainableMask};
use fdp_core::policy::{FactorizedPolicy, PolicyAgent, TrainingLog};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_to(out)
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    std::fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_demos(path: &Path) -> Result<EpisodeDataset> {
    EpisodeDataset::load(path).with_context(|| format!("loading demonstrations {}", path.display()))
}

fn load_policy(path: &Path) -> Result<FactorizedPolicy> {
    Ok(FactorizedPolicy::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .0)
}

/// Loads `path`, or generates `per_task` demonstrations of `suite` and
/// saves them as `out/<name>`.
fn demos_or_generate(path: Option<&Path>, suite: &Suite, per_task: usize, seed: u64, out: &Path, name: &str) -> Result<(EpisodeDataset, PathBuf)> {
    match path {
        Some(p) => Ok((load_demos(p)?, p.to_path_buf())),
        None => {
            let ds = generate_demos(suite, per_task, seed)?;
            let p = out.join(name);
            ds.save(&p)?;
            Ok((ds, p))
        }
    }
}

fn provenance(cfg: &RunConfig, command: &str, inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    map.insert("command".into(), command.into());
    map.insert("config".into(), cfg.to_toml()?);
    for (name, path) in inputs {
        map.insert(format!("{name}_sha256"), sha256_file(path)?);
    }
    Ok(map)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    suite: &'a str,
    top_k: Option<usize>,
    evaluations_per_step: f64,
    table: &'a SuccessTable,
}

fn write_table(out: &Path, stem: &str, suite: &str, top_k: Option<usize>, counter: Option<&EvalCounter>, table: &SuccessTable) -> Result<()> {
    write_text(out.join(format!("{stem}.csv")), &table.to_csv()?)?;
    write_json(
        out.join(format!("{stem}.json")),
        &EvalReport {
            suite,
            top_k,
            evaluations_per_step: counter.map_or(f64::NAN, |c| c.evaluations_per_step()),
            table,
        },
    )
}

pub fn gen_demos(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let suite = make_suite(&cfg.suite)?;
    prepare(cfg, out)?;
    let ds = generate_demos(&suite, cfg.demos.per_task, cfg.seed())?;
    ds.save(&out.join("demos.jsonl"))?;
    log::info!("wrote {} episodes for {} tasks", ds.len(), suite.tasks.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, demos: Option<&Path>) -> Result<(), Failure> {
    let suite = make_suite(&cfg.suite)?;
    prepare(cfg, out)?;
    let (ds, demo_path) = demos_or_generate(demos, &suite, cfg.demos.per_task, cfg.seed(), out, "demos.jsonl")?;
    let mut policy = FactorizedPolicy::for_dataset(cfg.policy.clone(), &ds, cfg.seed())?;
    let log = policy.train(&ds, &cfg.train, &TrainableMask::all(cfg.policy.components))?;
    policy.save(&out.join("policy.json"), &provenance(cfg, "train", &[("demos", &demo_path)])?)?;
    write_json(out.join("training_log.json"), &log)?;
    write_text(out.join("convergence.csv"), &convergence_report(&[("train", &log)])?.to_csv()?)?;
    if let Some(last) = log.epochs.last() {
        log::info!(
            "trained {} parameters; final train mse {:.5}, val mse {:?}",
            log.total_params,
            last.train_mse,
            last.val_mse
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let suite = make_suite(&cfg.suite)?;
    let policy = load_policy(checkpoint)?;
    prepare(cfg, out)?;
    let counter = EvalCounter::new();
    let agent = PolicyAgent::new(&policy).with_top_k(cfg.eval.top_k).with_counter(&counter);
    let table = evaluate(&agent, &suite, &cfg.eval_options())?;
    write_table(out, "success", &suite.name, cfg.eval.top_k, Some(&counter), &table)?;
    log::info!(
        "average success {:.3} ± {:.3}; {:.2} denoiser evaluations per step",
        table.average,
        table.average_std_error,
        counter.evaluations_per_step()
    );
    Ok(())
}

fn union(a: &Suite, b: &Suite) -> Result<Suite> {
    if a.name == b.name {
        return Ok(a.clone());
    }
    let tasks = a.tasks.iter().chain(&b.tasks).cloned().collect();
    Ok(Suite::from_tasks(&format!("{}+{}", a.name, b.name), tasks)?)
}

pub fn adapt(cfg: &RunConfig, out: &Path, checkpoint: &Path, demos: Option<&Path>, replay: Option<&Path>) -> Result<(), Failure> {
    let pre_suite = make_suite(&cfg.suite)?;
    let new_suite = make_suite(cfg.adapt_suite.as_deref().unwrap_or(&cfg.suite))?;
    let policy = load_policy(checkpoint)?;
    prepare(cfg, out)?;
    let a = &cfg.adaptation;
    let (new_data, new_path) = demos_or_generate(demos, &new_suite, a.demos_per_task, cfg.seed(), out, "adapt_demos.jsonl")?;
    let replay_data = if a.replay_per_task > 0 {
        Some(demos_or_generate(replay, &pre_suite, cfg.demos.per_task, cfg.seed(), out, "replay_demos.jsonl")?)
    } else {
        if replay.is_some() {
            return Err(Failure::Usage(anyhow::anyhow!("--replay given but adaptation.replay_per_task is 0")));
        }
        None
    };
    let (adapted, mut stage) = adapt_policy(&policy, a, &new_data, replay_data.as_ref().map(|r| &r.0))?;
    let all = union(&pre_suite, &new_suite)?;
    stage.evaluation = Some(evaluate(&PolicyAgent::new(&adapted), &all, &cfg.eval_options())?);

    let mut inputs: Vec<(&str, &Path)> = vec![("checkpoint", checkpoint), ("adapt_demos", &new_path)];
    if let Some((_, p)) = &replay_data {
        inputs.push(("replay_demos", p));
    }
    adapted.save(&out.join("policy.json"), &provenance(cfg, "adapt", &inputs)?)?;
    let table = stage.evaluation.clone().expect("evaluated");
    let log = AdaptationLog {
        config: a.clone(),
        stages: vec![stage],
    };
    write_text(out.join("adaptation_log.json"), &log.to_json()?)?;
    write_table(out, "success", &all.name, None, None, &table)?;
    log::info!("adapted to {} components; average success {:.3}", adapted.num_components(), table.average);
    Ok(())
}

pub fn continual(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let suite = make_suite(&cfg.suite)?;
    let p = cfg.continual.pretrain_tasks;
    if p == 0 || p >= suite.tasks.len() {
        return Err(Failure::Usage(anyhow::anyhow!(
            "continual.pretrain_tasks must lie in 1..{} for suite {}",
            suite.tasks.len(),
            suite.name
        )));
    }
    if cfg.demos.per_task < cfg.adaptation.demos_per_task.max(cfg.adaptation.replay_per_task) {
        return Err(Failure::Usage(anyhow::anyhow!(
            "demos.per_task must cover adaptation.demos_per_task and adaptation.replay_per_task"
        )));
    }
    prepare(cfg, out)?;
    let demos = generate_demos(&suite, cfg.demos.per_task, cfg.seed())?;
    demos.save(&out.join("demos.jsonl"))?;
    let pre_names: Vec<String> = suite.tasks[..p].iter().map(|t| t.name.clone()).collect();
    let policy = match checkpoint {
        Some(c) => load_policy(c)?,
        None => {
            let pre = demos.select_tasks(&pre_names)?;
            let mut policy = FactorizedPolicy::for_dataset(cfg.policy.clone(), &pre, cfg.seed())?;
            let log = policy.train(&pre, &cfg.train, &TrainableMask::all(cfg.policy.components))?;
            write_json(out.join("pretrain_log.json"), &log)?;
            policy.save(&out.join("pretrain.json"), &provenance(cfg, "continual/pretrain", &[])?)?;
            policy
        }
    };
    let opts = cfg.eval_options();
    let pre_table = evaluate(&PolicyAgent::new(&policy), &suite.slice(0..p)?, &opts)?;
    write_table(out, "pretrain_success", &suite.name, None, None, &pre_table)?;
    let (last, log) = continual_adapt(&policy, &suite, p, &cfg.adaptation, &demos, &opts)?;
    last.save(&out.join("policy.json"), &provenance(cfg, "continual", &[])?)?;
    write_text(out.join("adaptation_log.json"), &log.to_json()?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "components", "task", "mean", "std_error"])?;
    for s in &log.stages {
        let table = s.evaluation.as_ref().expect("continual stages are evaluated");
        for t in &table.tasks {
            w.write_record([
                s.stage.to_string(),
                s.components.to_string(),
                t.task.clone(),
                t.mean.to_string(),
                t.std_error.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_text(out.join("stage_success.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    log::info!("continual run finished with {} components", last.num_components());
    Ok(())
}

#[derive(Serialize)]
struct SoloRow {
    component: usize,
    task: String,
    mean: f64,
    std_error: f64,
}

pub fn analyze(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    demos: Option<&Path>,
    probes: usize,
    logs: &[String],
) -> Result<(), Failure> {
    let suite = make_suite(&cfg.suite)?;
    let policy = load_policy(checkpoint)?;
    let mut runs = Vec::new();
    for spec in logs {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Usage(anyhow::anyhow!("--log expects label=path, got `{spec}`")))?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading training log {path}"))?;
        let log: TrainingLog = serde_json::from_str(&text).with_context(|| format!("parsing training log {path}"))?;
        runs.push((label.to_string(), log));
    }
    if probes == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--probes must be positive")));
    }
    prepare(cfg, out)?;
    let (ds, _) = demos_or_generate(demos, &suite, cfg.demos.per_task, cfg.seed(), out, "demos.jsonl")?;

    let sim = score_similarity(&policy, &probe_set(&policy, &ds, probes, cfg.seed())?)?;
    write_text(out.join("similarity.csv"), &sim.to_csv()?)?;
    write_json(out.join("similarity.json"), &sim)?;

    let opts = cfg.eval_options();
    let mut solo = Vec::new();
    for i in 0..policy.num_components() {
        let table = evaluate(&PolicyAgent::new(&policy).solo(i), &suite, &opts)?;
        solo.extend(table.tasks.iter().map(|t| SoloRow {
            component: i,
            task: t.task.clone(),
            mean: t.mean,
            std_error: t.std_error,
        }));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &solo {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_text(out.join("solo_success.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    write_json(out.join("solo_success.json"), &solo)?;

    let traces = out.join("traces");
    std::fs::create_dir_all(&traces)?;
    for spec in &suite.tasks {
        let record = rollout(&PolicyAgent::new(&policy), spec, cfg.seed(), cfg.eval.max_steps)?;
        let file = spec.name.replace('/', "_");
        write_text(traces.join(format!("{file}.csv")), &weight_trace_csv(&record, policy.config().exec_horizon)?)?;
        write_json(traces.join(format!("{file}.json")), &record)?;
    }

    if !runs.is_empty() {
        let refs: Vec<(&str, &TrainingLog)> = runs.iter().map(|(l, g)| (l.as_str(), g)).collect();
        let table = convergence_report(&refs)?;
        write_text(out.join("convergence.csv"), &table.to_csv()?)?;
        write_json(out.join("convergence.json"), &table)?;
    }
    log::info!(
        "similarity over {} probes ({} skipped); off-diagonal {:?}",
        sim.probes_used,
        sim.probes_skipped,
        sim.off_diagonal()
    );
    Ok(())
}
