use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clueseek_core::config::GlobalConfig;
use clueseek_core::datapipe::{
    classify_taxonomy, dataset_stats, judge_from_spec, read_candidates, run_pipeline, sample_for_review,
    CandidateRecord, PipelineOptions, PipelineStage, StageJudges,
};
use clueseek_core::grpo::{dynamic_sampling_filter, group_advantages, surrogate_objective, GroupSample, ObjectiveLevel};
use clueseek_core::manifest::{generate_synthetic, TaskType, TaxonomyProfile};
use clueseek_core::protocol::{parse_trajectory, validate_trajectory_lines, serialize_trajectory, Trajectory};
use clueseek_core::quota::compute_sampling_plan;
use clueseek_core::reward::{score_trajectory, OptionLetterMatcher};
use clueseek_core::rollout::{evaluate, run_suite};
use clueseek_core::tdam::{build_mask, export_mask, should_apply, AnnotatedSequence, MaskFormat};
use clueseek_core::tool::Visibility;
use clueseek_core::{Seconds, TimeInterval};
use clueseek_toolserver::{run_stdio, serve, ToolService};
use serde_json::json;

use crate::io::{self, UsageError};
use crate::*;

fn load_config(spec: &str) -> Result<GlobalConfig> {
    let base = if spec == "default" { GlobalConfig::default() } else { GlobalConfig::load(spec.as_ref())? };
    Ok(base.with_env()?)
}

pub fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Score(a) => score(&cfg, a),
        Command::Mask(c) => mask(c),
        Command::Advantage(a) => advantage(&cfg, a),
        Command::Quota(c) => quota(&cfg, c),
        Command::ValidateTrajectory(a) => validate(a),
        Command::Pipeline(c) => pipeline(c),
        Command::Serve(a) => serve_cmd(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Gen(a) => gen(a),
        Command::DumpConfig => {
            print!("{}", cfg.to_json_pretty());
            Ok(0)
        }
    }
}

fn simulate(cfg: &GlobalConfig, a: SimulateArgs) -> Result<i32> {
    let samples = io::read_samples(&a.samples)?;
    let manifests = io::read_manifests(&a.manifests)?;
    let mut episode = match a.mode {
        Mode::Eval => cfg.episode_config(),
        Mode::Train => cfg.train_episode_config(),
    };
    if let Some(limit) = a.turn_limit {
        episode.turn_limit = limit;
    }
    if let Some(seed) = a.seed {
        episode.seed = seed;
    }
    if a.parallelism == 0 || episode.turn_limit == 0 {
        return Err(UsageError("--parallelism and --turn-limit must be >= 1".into()).into());
    }
    let policy = a.policy.into_spec()?.build();
    let run = run_suite(&samples, &manifests, policy.as_ref(), &episode, a.parallelism)?;
    let mut w = io::create(&a.out)?;
    for r in run.results.iter().flatten() {
        w.write_all(serialize_trajectory(&r.trajectory).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    for failure in run.results.iter().filter_map(|r| r.as_ref().err()) {
        tracing::warn!(sample = %failure.sample_ref, "episode failed: {}", failure.error);
    }
    if let Some(path) = &a.report {
        io::write_doc(path, &run.report)?;
    }
    io::print_line(&run.report)?;
    Ok(0)
}

fn read_trajectories(path: &std::path::Path) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_trajectory(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn score(cfg: &GlobalConfig, a: ScoreArgs) -> Result<i32> {
    let samples = io::read_samples(&a.samples)?;
    let by_id: BTreeMap<&str, _> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for t in read_trajectories(&a.trajectories)? {
        let sample = by_id.get(t.sample_ref.as_str()).with_context(|| format!("unknown sample {}", t.sample_ref))?;
        io::print_line(&score_trajectory(&t, sample, &cfg.reward, &OptionLetterMatcher)?)?;
    }
    Ok(0)
}

fn mask(c: MaskCommand) -> Result<i32> {
    match c {
        MaskCommand::Build { input, format } => {
            let seq: AnnotatedSequence = serde_json::from_reader(io::open(&input)?)
                .with_context(|| format!("parsing {}", input.display()))?;
            let spec = build_mask(&seq)?;
            let format = match format {
                MaskFormatArg::Dense01 => MaskFormat::Dense01,
                MaskFormatArg::BlockedRanges => MaskFormat::BlockedRanges,
            };
            let mut text = export_mask(&spec, format);
            if !text.ends_with('\n') {
                text.push('\n');
            }
            print!("{text}");
        }
        MaskCommand::Select { id, ratio, seed } => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(UsageError("--ratio must be within [0, 1]".into()).into());
            }
            io::print_line(&json!({"sample_id": id, "apply": should_apply(&id, ratio, seed)}))?;
        }
    }
    Ok(0)
}

#[derive(serde::Deserialize)]
struct GroupColumns {
    rewards: Vec<f64>,
    turn_counts: Vec<u32>,
    context_tokens: Vec<u64>,
    #[serde(default)]
    token_ratios: Option<Vec<Vec<f64>>>,
}

/// One line of `advantage` input: an array of samples or parallel columns.
fn group_from_value(doc: serde_json::Value, line: usize) -> Result<Vec<GroupSample>> {
    let context = || format!("groups line {line}");
    if doc.is_array() {
        return serde_json::from_value(doc).with_context(context);
    }
    let GroupColumns { rewards, turn_counts, context_tokens, token_ratios } =
        serde_json::from_value(doc).with_context(context)?;
    let n = rewards.len();
    let ratios = token_ratios.unwrap_or_else(|| vec![Vec::new(); n]);
    if turn_counts.len() != n || context_tokens.len() != n || ratios.len() != n {
        anyhow::bail!("groups line {line}: columns differ in length");
    }
    Ok(rewards
        .into_iter()
        .zip(turn_counts)
        .zip(context_tokens)
        .zip(ratios)
        .map(|(((reward, turn_count), context_tokens), token_ratios)| GroupSample {
            reward,
            turn_count,
            context_tokens,
            token_ratios,
        })
        .collect())
}

fn advantage(cfg: &GlobalConfig, a: AdvantageArgs) -> Result<i32> {
    let lines: Vec<serde_json::Value> = io::read_lines_of(&a.groups)?;
    let groups: Vec<Vec<GroupSample>> =
        lines.into_iter().enumerate().map(|(i, g)| group_from_value(g, i + 1)).collect::<Result<_>>()?;
    for (index, group) in groups.iter().enumerate() {
        let adv = group_advantages(group, &cfg.limits).with_context(|| format!("group {index}"))?;
        let mut line = serde_json::to_value(&adv)?;
        line["group"] = json!(index);
        if let Some(level) = a.objective {
            let level = match level {
                ObjectiveArg::Sequence => ObjectiveLevel::Sequence,
                ObjectiveArg::Token => ObjectiveLevel::Token,
            };
            let value = surrogate_objective(&adv, group, &cfg.limits, level).with_context(|| format!("group {index}"))?;
            line["objective"] = json!(value);
        }
        io::print_line(&line)?;
    }
    if a.dynamic_sampling {
        let rewards: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|s| s.reward).collect()).collect();
        io::print_line(&json!({"kept_groups": dynamic_sampling_filter(&rewards)}))?;
    }
    Ok(0)
}

fn seconds(s: &str, what: &str) -> Result<Seconds> {
    s.parse().map_err(|e| UsageError(format!("{what}: {e}")).into())
}

fn quota(cfg: &GlobalConfig, c: QuotaCommand) -> Result<i32> {
    match c {
        QuotaCommand::Plan { segment, strategy, duration } => {
            let (start, end) = (seconds(&segment[0], "segment start")?, seconds(&segment[1], "segment end")?);
            let iv = TimeInterval::new(start, end).map_err(|e| UsageError(format!("segment: {e}")))?;
            let duration = match duration {
                Some(d) => seconds(&d, "duration")?,
                None => end,
            };
            let d = clueseek_core::protocol::CropDirective::new(iv, strategy);
            io::print_line(&compute_sampling_plan(&d, &cfg.quota, duration)?)?;
        }
        QuotaCommand::Overview { duration } => {
            io::print_line(&cfg.quota.overview_plan(seconds(&duration, "duration")?)?)?;
        }
    }
    Ok(0)
}

fn validate(a: ValidateArgs) -> Result<i32> {
    match validate_trajectory_lines(io::open(&a.input)?) {
        Ok(count) => {
            io::print_line(&json!({"valid": true, "trajectories": count}))?;
            Ok(0)
        }
        Err((line, e)) => {
            io::print_line(&json!({"valid": false, "line": line, "reason": e.reason, "detail": e.detail}))?;
            Ok(1)
        }
    }
}

fn read_records(path: &std::path::Path) -> Result<Vec<CandidateRecord>> {
    let records = read_candidates(io::open(path)?).with_context(|| path.display().to_string())?;
    for r in &records {
        r.sample.validate().with_context(|| path.display().to_string())?;
    }
    Ok(records)
}

fn pipeline(c: PipelineCommand) -> Result<i32> {
    match c {
        PipelineCommand::Run(a) => pipeline_run(a),
        PipelineCommand::Sample { input, percent, seed, out } => {
            if !(0.0..=100.0).contains(&percent) {
                return Err(UsageError("--percent must be within [0, 100]".into()).into());
            }
            let picked = sample_for_review(&read_records(&input)?, percent, seed);
            io::write_lines(&out, &picked)?;
            io::print_line(&json!({"selected": picked.len()}))?;
            Ok(0)
        }
        PipelineCommand::Stats { input } => {
            let samples: Vec<_> = read_records(&input)?.into_iter().map(|r| r.sample).collect();
            io::print_line(&dataset_stats(&samples))?;
            Ok(0)
        }
        PipelineCommand::Classify { input, manifests } => {
            let manifests = io::read_manifests(&manifests)?;
            let mut code = 0;
            for r in read_records(&input)? {
                let s = &r.sample;
                let line = match manifests.get(&s.manifest_ref) {
                    None => {
                        code = 1;
                        json!({"id": s.id, "error": format!("unknown manifest {}", s.manifest_ref)})
                    }
                    Some(m) => match classify_taxonomy(s, m) {
                        Ok(t) => json!({"id": s.id, "task_type": t, "declared": s.task_type, "agrees": t == s.task_type}),
                        Err(e) => {
                            code = 1;
                            json!({"id": s.id, "error": e.to_string()})
                        }
                    },
                };
                io::print_line(&line)?;
            }
            Ok(code)
        }
    }
}

fn pipeline_run(a: PipelineRunArgs) -> Result<i32> {
    let records = read_records(&a.input)?;
    let manifests = io::read_manifests(&a.manifests)?;
    let specs: BTreeMap<String, String> = serde_json::from_reader(io::open(&a.stage_judges)?)
        .with_context(|| format!("parsing {}", a.stage_judges.display()))?;
    let mut judges = StageJudges::new();
    for (stage, spec) in &specs {
        let stage: PipelineStage = stage.parse().map_err(|e| UsageError(format!("{}: {e}", a.stage_judges.display())))?;
        judges.insert(stage, judge_from_spec(spec)?);
    }
    let opts = PipelineOptions {
        checkpoint_dir: a.checkpoint_dir,
        resume: a.resume,
        concurrency: a.concurrency,
        max_retries: a.max_retries,
        backoff: Duration::from_millis(a.backoff_ms),
        ..PipelineOptions::default()
    };
    let outcome = run_pipeline(records, &manifests, &judges, &opts)?;
    io::write_lines(&a.out, &outcome.survivors)?;
    if let Some(path) = &a.rejected {
        io::write_lines(path, &outcome.rejected)?;
    }
    if let Some(path) = &a.report {
        io::write_doc(path, &outcome.report)?;
    }
    io::print_line(&outcome.report)?;
    Ok(0)
}

fn serve_cmd(cfg: &GlobalConfig, a: ServeArgs) -> Result<i32> {
    let manifests = match &a.manifests {
        Some(path) => io::read_manifests(path)?.into_values().collect(),
        None => Vec::new(),
    };
    let visibility = Visibility { subtle_min_tokens_per_frame: cfg.episode.subtle_visibility_tokens };
    let service = ToolService::with_manifests(cfg.quota.clone(), visibility, manifests);
    if a.stdio {
        let stdin = std::io::stdin().lock();
        let stdout = std::io::stdout().lock();
        run_stdio(&service, stdin, stdout)?;
        return Ok(0);
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on {}", listener.local_addr()?);
        serve(listener, Arc::new(service)).await?;
        anyhow::Ok(())
    })?;
    Ok(0)
}

fn eval(cfg: &GlobalConfig, a: EvalArgs) -> Result<i32> {
    let samples = io::read_samples(&a.samples)?;
    let run = evaluate(read_trajectories(&a.trajectories)?, &samples, &cfg.episode_config());
    for failure in run.results.iter().filter_map(|r| r.as_ref().err()) {
        tracing::warn!(sample = %failure.sample_ref, "not scored: {}", failure.error);
    }
    if let Some(path) = &a.report {
        io::write_doc(path, &run.report)?;
    }
    io::print_line(&run.report)?;
    Ok(0)
}

fn gen(a: GenArgs) -> Result<i32> {
    let profile = match &a.task_type {
        None => TaxonomyProfile::uniform(a.samples),
        Some(name) => {
            let task: TaskType = serde_json::from_value(json!(name))
                .map_err(|_| UsageError(format!("unknown task type {name}")))?;
            TaxonomyProfile::only(task, a.samples)
        }
    };
    let (manifest, samples) = generate_synthetic(a.seed, &profile);
    io::write_lines(&a.manifests_out, std::slice::from_ref(&manifest))?;
    io::write_lines(&a.samples_out, &samples)?;
    io::print_line(&json!({"manifest": manifest.id, "samples": samples.len()}))?;
    Ok(0)
}
