//! Slow, literal reference computations for cross-checking the runtime.
//!
//! Everything here works on plain numbers (milliseconds, token counts,
//! rewards) and exact rationals so it shares no code with `clueseek-core`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub type Q = BigRational;

/// A half-open span in milliseconds.
pub type Span = (i64, i64);

pub fn q(x: f64) -> Q {
    BigRational::from_float(x).expect("finite")
}

pub fn qi(n: i64, d: i64) -> Q {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub fn f(x: &Q) -> f64 {
    x.to_f64().expect("representable")
}

/// Elementary pieces between consecutive endpoints of every span.
fn pieces(spans: &[&[(i64, i64)]]) -> Vec<(i64, i64)> {
    let mut points: Vec<i64> = spans.iter().flat_map(|s| s.iter().flat_map(|&(a, b)| [a, b])).collect();
    points.sort_unstable();
    points.dedup();
    points.windows(2).map(|w| (w[0], w[1])).collect()
}

fn covers(spans: &[(i64, i64)], piece: (i64, i64)) -> bool {
    spans.iter().any(|&(a, b)| a <= piece.0 && piece.1 <= b)
}

/// Measures (pred, gt, intersection, union) of two interval sets, in ms.
pub fn set_measures(pred: &[(i64, i64)], gt: &[(i64, i64)]) -> (i64, i64, i64, i64) {
    let (mut p, mut g, mut i, mut u) = (0, 0, 0, 0);
    for piece in pieces(&[pred, gt]) {
        let len = piece.1 - piece.0;
        let (in_p, in_g) = (covers(pred, piece), covers(gt, piece));
        p += len * i64::from(in_p);
        g += len * i64::from(in_g);
        i += len * i64::from(in_p && in_g);
        u += len * i64::from(in_p || in_g);
    }
    (p, g, i, u)
}

fn ratio(n: i64, d: i64) -> Q {
    if d == 0 {
        Q::zero()
    } else {
        qi(n, d)
    }
}

/// (iou, iop, iog) over the union measure.
pub fn interval_ratios(pred: &[(i64, i64)], gt: &[(i64, i64)]) -> (Q, Q, Q) {
    let (p, g, i, u) = set_measures(pred, gt);
    (ratio(i, u), ratio(i, p), ratio(i, g))
}

#[derive(Debug, Clone)]
pub struct RewardParams {
    pub b0: Q,
    pub w_g: Q,
    pub c_free: Q,
    pub lambda: Q,
    pub gamma_floor: Q,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { b0: qi(1, 2), w_g: qi(1, 2), c_free: qi(1, 2), lambda: qi(1, 20), gamma_floor: Q::zero() }
    }
}

#[derive(Debug, Clone)]
pub struct RewardInput<'a> {
    pub correct: bool,
    pub turns: u32,
    pub valid_turns: u32,
    pub trajectory_guided: bool,
    pub pred: &'a [(i64, i64)],
    pub gt: &'a [(i64, i64)],
    pub k_t: u32,
    pub k_ref: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardOracle {
    pub r_f: Q,
    pub s_clue: Q,
    pub gamma: Q,
    pub beta: Q,
    pub total: Q,
}

pub fn reward(x: &RewardInput<'_>, p: &RewardParams) -> RewardOracle {
    let r_f = if x.turns == 0 { Q::zero() } else { qi(i64::from(x.valid_turns), i64::from(x.turns)) };
    let s_clue = if x.trajectory_guided {
        let (iou, iop, iog) = interval_ratios(x.pred, x.gt);
        (qi(2, 1) * iou + iop + iog) / qi(4, 1)
    } else {
        p.c_free.clone()
    };
    let gamma = if x.k_t <= x.k_ref {
        Q::one()
    } else {
        let raw = Q::one() - p.lambda.clone() * qi(i64::from(x.k_t - x.k_ref), 1);
        if raw < p.gamma_floor {
            p.gamma_floor.clone()
        } else {
            raw
        }
    };
    let beta = (p.b0.clone() + p.w_g.clone() * s_clue.clone()) * gamma.clone();
    let r_a = if x.correct { Q::one() } else { Q::zero() };
    let total = r_a * (Q::one() + beta.clone()) + r_f.clone();
    RewardOracle { r_f, s_clue, gamma, beta, total }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Global,
    Local,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Tool,
    Answer,
}

/// `visible[i][j]`: causal, and not (tool row, local column) or (answer row, global column).
pub fn mask_visible(kinds: &[Kind], stages: &[Option<Stage>]) -> Vec<Vec<bool>> {
    let n = kinds.len();
    let mut out = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let blocked = matches!((stages[i], kinds[j]), (Some(Stage::Tool), Kind::Local) | (Some(Stage::Answer), Kind::Global));
            out[i][j] = j <= i && !blocked;
        }
    }
    out
}

/// Group advantages with population std and an epsilon floor.
pub fn advantages(rewards: &[f64], std_epsilon: f64) -> Vec<f64> {
    let n = qi(rewards.len() as i64, 1);
    let exact: Vec<Q> = rewards.iter().map(|r| q(*r)).collect();
    let mean = exact.iter().fold(Q::zero(), |a, b| a + b) / n.clone();
    let var = exact.iter().map(|r| (r - &mean) * (r - &mean)).fold(Q::zero(), |a, b| a + b) / n;
    let std = f(&var).sqrt().max(std_epsilon);
    exact.iter().map(|r| f(&(r - &mean)) / std).collect()
}

pub fn completion_mask(turns: &[u32], context: &[u64], c_turn: u32, c_context: u64) -> Vec<u8> {
    turns.iter().zip(context).map(|(t, c)| u8::from(*t <= c_turn && *c <= c_context)).collect()
}

fn clip_term(rho: f64, adv: f64, lo: f64, hi: f64) -> f64 {
    let clipped = if rho < lo {
        lo
    } else if rho > hi {
        hi
    } else {
        rho
    };
    let (a, b) = (rho * adv, clipped * adv);
    if a < b {
        a
    } else {
        b
    }
}

/// Masked mean of the clipped surrogate; `None` when every sample is masked.
pub fn surrogate(masked_adv: &[f64], mask: &[u8], ratios: &[Vec<f64>], eps_low: f64, eps_high: f64, token_level: bool) -> Option<f64> {
    let active: Vec<usize> = (0..mask.len()).filter(|i| mask[*i] == 1).collect();
    if active.is_empty() {
        return None;
    }
    let (lo, hi) = (1.0 - eps_low, 1.0 + eps_high);
    let mut sum = 0.0;
    for &i in &active {
        sum += if token_level {
            ratios[i].iter().map(|r| clip_term(*r, masked_adv[i], lo, hi)).sum::<f64>() / ratios[i].len() as f64
        } else {
            clip_term(ratios[i].iter().product(), masked_adv[i], lo, hi)
        };
    }
    Some(sum / active.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuotaParams {
    pub fps_num: i64,
    pub fps_den: i64,
    pub frame_limit: u64,
    pub min_tokens_per_frame: u64,
}

impl Default for QuotaParams {
    fn default() -> Self {
        QuotaParams { fps_num: 2, fps_den: 1, frame_limit: 768, min_tokens_per_frame: 4 }
    }
}

/// (frame_count, tokens_per_frame) for a window of `len_ms` under quota `q`.
pub fn plan(len_ms: i64, quota: u64, p: QuotaParams) -> (u64, u64) {
    let exact = qi(len_ms * p.fps_num, 1000 * p.fps_den);
    let mut frames = exact.ceil().to_integer().to_u64().expect("non-negative").max(1);
    frames = frames.min(p.frame_limit).min(quota / p.min_tokens_per_frame).max(1);
    (frames, quota / frames)
}

/// Exact mean IoU of pairs of single intervals and the share with IoU >= tenths/10.
pub fn grounding(pairs: &[(Span, Span)], tenths: &[i64]) -> (Q, Vec<Q>) {
    if pairs.is_empty() {
        return (Q::zero(), tenths.iter().map(|_| Q::zero()).collect());
    }
    let n = qi(pairs.len() as i64, 1);
    let ious: Vec<Q> = pairs.iter().map(|(p, g)| interval_ratios(&[*p], &[*g]).0).collect();
    let miou = ious.iter().fold(Q::zero(), |a, b| a + b) / n.clone();
    let recalls = tenths
        .iter()
        .map(|t| qi(ious.iter().filter(|iou| **iou >= qi(*t, 10)).count() as i64, 1) / n.clone())
        .collect();
    (miou, recalls)
}

/// Relative closeness with an absolute floor for values near zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= rel * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_by_hand() {
        assert_eq!(set_measures(&[(2000, 6000)], &[(4000, 8000)]), (4000, 4000, 2000, 6000));
        let (iou, iop, iog) = interval_ratios(&[(2000, 6000)], &[(4000, 8000)]);
        assert_eq!((iou, iop, iog), (qi(1, 3), qi(1, 2), qi(1, 2)));
        assert_eq!(set_measures(&[(0, 10), (5, 20)], &[]), (20, 0, 0, 20));
    }

    #[test]
    fn reward_by_hand() {
        let gt = [(30_000, 34_000)];
        let perfect = RewardInput { correct: true, turns: 2, valid_turns: 2, trajectory_guided: true, pred: &gt, gt: &gt, k_t: 1, k_ref: 1 };
        assert_eq!(reward(&perfect, &RewardParams::default()).total, qi(3, 1));
        let free = RewardInput { trajectory_guided: false, turns: 4, valid_turns: 3, k_t: 0, k_ref: 0, ..perfect.clone() };
        assert_eq!(reward(&free, &RewardParams::default()).total, qi(5, 2));
        let decayed = RewardInput { k_t: 30, k_ref: 3, ..perfect };
        assert_eq!(reward(&decayed, &RewardParams::default()).gamma, Q::zero());
    }

    #[test]
    fn plan_by_hand() {
        assert_eq!(plan(8000, 4096, QuotaParams::default()), (16, 256));
        assert_eq!(plan(8000, 2048, QuotaParams::default()), (16, 128));
        assert_eq!(plan(500_000, 2048, QuotaParams::default()), (512, 4));
    }

    #[test]
    fn mask_and_grpo_by_hand() {
        let kinds = [Kind::Global, Kind::Local, Kind::Text];
        let v = mask_visible(&kinds, &[None, None, Some(Stage::Answer)]);
        assert_eq!(v[2], vec![false, true, true]);
        assert_eq!(advantages(&[3.0, 1.0], 1e-6), vec![1.0, -1.0]);
        assert_eq!(surrogate(&[1.0], &[1], &[vec![2.0]], 0.2, 0.2, false), Some(1.2));
    }
}
