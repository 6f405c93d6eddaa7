//! Scripted reward fixtures: episodes built from step lists, scored end to end
//! and compared field by field with the exact oracle.

use clueseek_core::manifest::{parse_manifest, Sample, Tag, TaskType, VideoManifest};
use clueseek_core::protocol::{render_message, CropDirective, ParsedAction, SamplingStrategy, Termination};
use clueseek_core::reward::RewardConfig;
use clueseek_core::rollout::{run_episode, EpisodeConfig, ScriptedPolicy};
use clueseek_core::TimeInterval;
use clueseek_oracles as oracle;

pub const MANIFEST: &str = r#"{"id":"lab","duration_s":120,"events":[
 {"id":"door","interval":{"start":10,"end":16},"label":"door","saliency":"salient","payload":"door opens"},
 {"id":"badge","interval":{"start":30,"end":34},"label":"badge","saliency":"subtle","payload":"badge 4471"},
 {"id":"cup","interval":{"start":60,"end":62},"label":"cup","saliency":"subtle","payload":"blue cup"},
 {"id":"truck","interval":{"start":80,"end":90},"label":"truck","saliency":"salient","payload":"truck leaves"},
 {"id":"tail","interval":{"start":115,"end":120},"label":"tail","saliency":"salient","payload":"lights off"}]}"#;

pub const DURATION_MS: i64 = 120_000;

#[derive(Debug, Clone, Copy)]
pub enum Step {
    Crop(f64, f64, SamplingStrategy),
    Answer(&'static str),
    Malformed,
}

use SamplingStrategy::{Coarse, Fine, Medium};
use Step::{Answer, Crop, Malformed};

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub tag: Tag,
    pub clues: Vec<(f64, f64)>,
    pub k_ref: u32,
    pub steps: Vec<Step>,
    /// Hand-computed total, where one was worked out.
    pub expect: Option<f64>,
}

fn ms(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

pub fn render(step: Step) -> String {
    match step {
        Crop(s, e, g) => render_message(
            "look",
            &ParsedAction::Directive(CropDirective::new(TimeInterval::from_secs(s, e).unwrap(), g)),
        ),
        Answer(a) => render_message("done", &ParsedAction::Answer(a.to_string())),
        Malformed => "I will look again later".to_string(),
    }
}

pub fn sample(case: &Case) -> Sample {
    Sample {
        id: case.name.clone(),
        manifest_ref: "lab".into(),
        question: "What is on the badge?".into(),
        options: Some(vec!["A. 4417".into(), "B. 4471".into(), "C. 7144".into(), "D. 1447".into()]),
        answer_key: "B".into(),
        clue_intervals: case.clues.iter().map(|&(s, e)| TimeInterval::from_secs(s, e).unwrap()).collect(),
        tag: case.tag,
        k_ref: case.k_ref,
        task_type: TaskType::SingleClueTool,
    }
}

fn params(cfg: &RewardConfig) -> oracle::RewardParams {
    oracle::RewardParams {
        b0: oracle::q(cfg.b0),
        w_g: oracle::q(cfg.w_g),
        c_free: oracle::q(cfg.c_free),
        lambda: oracle::q(cfg.lambda_decay),
        gamma_floor: oracle::q(cfg.gamma_floor),
    }
}

pub struct Expected {
    pub reward: oracle::RewardOracle,
    pub k_t: u32,
    pub answered: bool,
}

pub fn expected(case: &Case, cfg: &RewardConfig) -> Expected {
    let (mut turns, mut valid, mut k_t, mut correct, mut answered) = (0, 0, 0, false, false);
    let mut pred = Vec::new();
    for step in &case.steps {
        turns += 1;
        match *step {
            Crop(s, e, _) => {
                let (a, b) = (ms(s).max(0), ms(e).min(DURATION_MS));
                if a < b {
                    valid += 1;
                    k_t += 1;
                    pred.push((a, b));
                }
            }
            Malformed => {}
            Answer(x) => {
                valid += 1;
                correct = x.eq_ignore_ascii_case("B");
                answered = true;
                break;
            }
        }
    }
    let gt: Vec<(i64, i64)> = case.clues.iter().map(|&(s, e)| (ms(s), ms(e))).collect();
    let input = oracle::RewardInput {
        correct,
        turns,
        valid_turns: valid,
        trajectory_guided: case.tag == Tag::TrajectoryGuided,
        pred: &pred,
        gt: &gt,
        k_t,
        k_ref: case.k_ref,
    };
    Expected { reward: oracle::reward(&input, &params(cfg)), k_t, answered }
}

pub fn explicit_cases() -> Vec<Case> {
    let tg = Tag::TrajectoryGuided;
    let case = |name: &str, tag, clues: &[(f64, f64)], k_ref, steps: &[Step], expect| Case {
        name: name.into(),
        tag,
        clues: clues.to_vec(),
        k_ref,
        steps: steps.to_vec(),
        expect,
    };
    vec![
        case("perfect", tg, &[(30.0, 34.0)], 1, &[Crop(30.0, 34.0, Coarse), Answer("B")], Some(3.0)),
        case("wrong_answer", tg, &[(30.0, 34.0)], 1, &[Crop(30.0, 34.0, Coarse), Answer("C")], Some(1.0)),
        case("wrong_half_valid", tg, &[(30.0, 34.0)], 1, &[Malformed, Answer("A")], Some(0.5)),
        case(
            "free_three_of_four",
            Tag::Free,
            &[(10.0, 16.0)],
            2,
            &[Malformed, Crop(10.0, 16.0, Coarse), Crop(80.0, 90.0, Coarse), Answer("B")],
            Some(2.5),
        ),
        // s = (2/3 + 1/2 + 1/2) / 4 = 5/12, beta = 1/2 + 5/24
        case("shifted_window", tg, &[(4.0, 8.0)], 1, &[Crop(2.0, 6.0, Medium), Answer("B")], Some(1.0 + 17.0 / 24.0 + 1.0)),
        // five crops against k_ref 3: gamma 0.9, beta 0.9
        case(
            "two_extra_calls",
            tg,
            &[(30.0, 34.0)],
            3,
            &[
                Crop(30.0, 34.0, Coarse),
                Crop(30.0, 34.0, Coarse),
                Crop(30.0, 34.0, Coarse),
                Crop(30.0, 34.0, Coarse),
                Crop(30.0, 34.0, Coarse),
                Answer("B"),
            ],
            Some(2.9),
        ),
        case("direct_free", Tag::Free, &[(10.0, 16.0)], 0, &[Answer("b")], Some(2.75)),
        case("direct_tg_no_crop", tg, &[(30.0, 34.0)], 1, &[Answer("B")], Some(2.5)),
        case("never_answers", tg, &[(30.0, 34.0)], 1, &[Crop(30.0, 34.0, Fine), Malformed], Some(0.5)),
        case("out_of_range_crop", tg, &[(115.0, 120.0)], 1, &[Crop(130.0, 140.0, Coarse), Answer("B")], Some(2.0)),
        // clamped to [100, 120]: iou 1/4, iop 1/4, iog 1
        case("clamped_crop", tg, &[(115.0, 120.0)], 1, &[Crop(100.0, 130.0, Coarse), Answer("B")], Some(1.0 + 0.5 + 0.5 * 0.4375 + 1.0)),
        // union [30,34] + [60,62] covered exactly by two crops
        case(
            "two_clues_exact",
            tg,
            &[(30.0, 34.0), (60.0, 62.0)],
            2,
            &[Crop(30.0, 34.0, Coarse), Crop(60.0, 62.0, Medium), Answer("B")],
            Some(3.0),
        ),
        case("malformed_only_then_right", tg, &[(30.0, 34.0)], 1, &[Malformed, Malformed, Malformed, Answer("B")], None),
        case("overlapping_crops", tg, &[(30.0, 34.0)], 2, &[Crop(28.0, 33.0, Coarse), Crop(31.0, 36.0, Medium), Answer("B")], None),
    ]
}

pub fn generated_cases() -> Vec<Case> {
    let clue_sets: [&[(f64, f64)]; 5] =
        [&[(30.0, 34.0)], &[(30.0, 34.0), (60.0, 62.0)], &[(10.0, 16.0)], &[(0.0, 5.0)], &[(115.0, 120.0)]];
    let scripts: [(&str, &[Step]); 8] = [
        ("direct", &[Answer("B")]),
        ("hull", &[Crop(30.0, 34.0, Coarse), Answer("B")]),
        ("wide", &[Crop(28.0, 36.0, Coarse), Answer("B")]),
        ("sweep", &[Crop(0.0, 120.0, Coarse), Crop(31.0, 33.0, Medium), Answer("B")]),
        ("retry", &[Malformed, Crop(25.0, 40.0, Coarse), Answer("B")]),
        ("tail", &[Crop(100.0, 130.0, Coarse), Answer("B")]),
        ("three", &[Crop(10.0, 15.0, Coarse), Crop(20.0, 25.0, Coarse), Crop(30.0, 35.0, Coarse), Answer("B")]),
        ("outside", &[Crop(130.0, 140.0, Coarse), Answer("B")]),
    ];
    let mut out = Vec::new();
    for (ci, clues) in clue_sets.iter().enumerate() {
        for (name, steps) in scripts {
            for (tag, k_ref) in [(Tag::TrajectoryGuided, 1), (Tag::Free, 0)] {
                for answer in ["B", "D"] {
                    let steps = steps.iter().map(|s| if matches!(s, Answer(_)) { Answer(answer) } else { *s }).collect();
                    out.push(Case {
                        name: format!("{name}-{ci}-{tag:?}-{answer}"),
                        tag,
                        clues: clues.to_vec(),
                        k_ref,
                        steps,
                        expect: None,
                    });
                }
            }
        }
    }
    out
}

pub fn configs() -> Vec<RewardConfig> {
    vec![
        RewardConfig::default(),
        RewardConfig { b0: 0.3, w_g: 0.7, c_free: 0.25, lambda_decay: 0.1, gamma_floor: 0.2, ..RewardConfig::default() },
    ]
}

pub fn check(case: &Case, manifest: &VideoManifest, reward: &RewardConfig) -> Result<(), String> {
    let s = sample(case);
    let steps = case.steps.iter().map(|s| render(*s)).collect();
    let cfg = EpisodeConfig { reward: reward.clone(), ..EpisodeConfig::eval() };
    let result = run_episode(&s, manifest, &ScriptedPolicy { steps }, &cfg).map_err(|e| format!("{}: {e}", case.name))?;
    let want = expected(case, reward);
    let got = &result.reward;
    let pairs = [
        ("total", got.total, &want.reward.total),
        ("r_f", got.r_f, &want.reward.r_f),
        ("s_clue", got.s_clue, &want.reward.s_clue),
        ("gamma", got.gamma, &want.reward.gamma),
        ("beta", got.beta, &want.reward.beta),
    ];
    for (field, value, exact) in pairs {
        if (value - oracle::f(exact)).abs() > 1e-12 {
            return Err(format!("{}: {field} {value} vs oracle {}", case.name, oracle::f(exact)));
        }
    }
    if got.components.k_t != want.k_t {
        return Err(format!("{}: k_t {} vs {}", case.name, got.components.k_t, want.k_t));
    }
    let answered = result.trajectory.termination == Termination::Answered;
    if answered != want.answered {
        return Err(format!("{}: termination {:?}", case.name, result.trajectory.termination));
    }
    Ok(())
}

pub fn manifest() -> VideoManifest {
    parse_manifest(MANIFEST).expect("fixture manifest")
}

pub fn all_cases() -> Vec<Case> {
    explicit_cases().into_iter().chain(generated_cases()).collect()
}

pub fn run_case(case: &Case, manifest: &VideoManifest, cfg: &EpisodeConfig) -> clueseek_core::reward::RewardBreakdown {
    let steps = case.steps.iter().map(|s| render(*s)).collect();
    run_episode(&sample(case), manifest, &ScriptedPolicy { steps }, cfg).expect("scripted episode").reward
}
