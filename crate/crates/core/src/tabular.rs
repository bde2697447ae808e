//! Exact computations on finite POMDPs: reward-sequence distributions,
//! characteristic functions, T-level partitions, optimal values and the
//! value-gap bound for partition-measurable policies.
//!
//! The observation layer is bypassed: everything is indexed by latent state.
//! Rewards are drawn from `p(r | s, a)` independently of the next state.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::spectral::discounted_inner;

const ROW_TOL: f64 = 1e-12;
/// Distributions closer than this in total variation count as equal.
pub const TV_TOL: f64 = 1e-10;
/// Largest number of enumerated sequences or policies (2^20).
const ENUM_BUDGET_LOG2: f64 = 20.0;

/// Finite model with reward support, reward and transition tables and a
/// per-environment distractor chain.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPOMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// Distinct reward values.
    pub reward_support: Vec<f64>,
    /// `reward_probs[s][a][k] = p(reward_support[k] | s, a)`.
    pub reward_probs: Vec<Vec<Vec<f64>>>,
    /// `transitions[s][a][s'] = P(s' | s, a)`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `distractor_chain[x][x'] = q(x' | x)`.
    pub distractor_chain: Vec<Vec<f64>>,
    pub gamma: f64,
    pub reward_bound: f64,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
        return Err(invalid(format!("{what}: entries must lie in [0, 1]")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(invalid(format!("{what}: row sums to {s}")));
    }
    Ok(())
}

impl TabularPOMDP {
    /// Validates shapes, stochasticity, discount and reward bound.
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.reward_support.is_empty() {
            return Err(invalid("model needs at least one state, action and reward value"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        for (i, r) in self.reward_support.iter().enumerate() {
            if r.abs() > self.reward_bound {
                return Err(invalid(format!("reward {r} exceeds bound {}", self.reward_bound)));
            }
            if self.reward_support[..i].contains(r) {
                return Err(invalid(format!("reward value {r} listed twice")));
            }
        }
        let nr = self.reward_support.len();
        if self.reward_probs.len() != self.n_states || self.transitions.len() != self.n_states {
            return Err(invalid("reward/transition tables must have one entry per state"));
        }
        for s in 0..self.n_states {
            if self.reward_probs[s].len() != self.n_actions || self.transitions[s].len() != self.n_actions {
                return Err(invalid(format!("state {s}: tables must have one row per action")));
            }
            for a in 0..self.n_actions {
                if self.reward_probs[s][a].len() != nr {
                    return Err(invalid(format!("p(r|{s},{a}) has wrong length")));
                }
                if self.transitions[s][a].len() != self.n_states {
                    return Err(invalid(format!("P(.|{s},{a}) has wrong length")));
                }
                check_row(&self.reward_probs[s][a], &format!("p(r|{s},{a})"))?;
                check_row(&self.transitions[s][a], &format!("P(.|{s},{a})"))?;
            }
        }
        for (x, row) in self.distractor_chain.iter().enumerate() {
            if row.len() != self.distractor_chain.len() {
                return Err(invalid("distractor chain must be square"));
            }
            check_row(row, &format!("q(.|{x})"))?;
        }
        Ok(())
    }

    /// Expected one-step reward `E[r | s, a]`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.reward_probs[s][a]
            .iter()
            .zip(&self.reward_support)
            .map(|(p, r)| p * r)
            .sum()
    }

    pub fn sample_reward(&self, s: usize, a: usize, rng: &mut impl Rng) -> f64 {
        self.reward_support[sample_index(&self.reward_probs[s][a], rng)]
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut impl Rng) -> usize {
        sample_index(&self.transitions[s][a], rng)
    }

    pub fn sample_distractor_next(&self, x: usize, rng: &mut impl Rng) -> usize {
        sample_index(&self.distractor_chain[x], rng)
    }

    /// Random instance. See [`RandomSpec`] for the structure imposed.
    pub fn random(spec: &RandomSpec, rng: &mut impl Rng) -> Result<Self> {
        let (ns, na, nr) = (spec.n_states, spec.n_actions, spec.n_rewards);
        if ns == 0 || na == 0 || nr == 0 {
            return Err(invalid("random model needs positive sizes"));
        }
        let mut support: Vec<f64> = Vec::with_capacity(nr);
        while support.len() < nr {
            let v = (rng.random_range(-1.0..1.0f64) * 1000.0).round() / 1000.0;
            if !support.contains(&v) {
                support.push(v);
            }
        }
        support.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let reward_bound = support.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1e-3);

        // States share reward rows through a small set of profiles so that
        // short horizons cannot tell some of them apart.
        let n_profiles = spec.n_profiles.clamp(1, ns);
        let profiles: Vec<Vec<Vec<f64>>> = (0..n_profiles)
            .map(|_| {
                (0..na)
                    .map(|_| {
                        if spec.stochastic_rewards {
                            random_row(nr, rng)
                        } else {
                            one_hot(nr, rng.random_range(0..nr))
                        }
                    })
                    .collect()
            })
            .collect();
        let mut profile_of: Vec<usize> = (0..ns).map(|s| s % n_profiles).collect();
        for i in (1..ns).rev() {
            let j = rng.random_range(0..=i);
            profile_of.swap(i, j);
        }
        let reward_probs = profile_of.iter().map(|&p| profiles[p].clone()).collect();
        let transitions = (0..ns)
            .map(|_| (0..na).map(|_| random_row(ns, rng)).collect())
            .collect();
        let nx = 3;
        let distractor_chain = (0..nx).map(|_| random_row(nx, rng)).collect();
        let m = Self {
            n_states: ns,
            n_actions: na,
            reward_support: support,
            reward_probs,
            transitions,
            distractor_chain,
            gamma: spec.gamma,
            reward_bound,
        };
        m.validate()?;
        Ok(m)
    }

    /// Two parallel chains that first differ in their reward at step
    /// `depth`: from state 0 and state `depth`, every reward sequence of
    /// length `< depth` is identical, but the `depth`-th reward is 0 on one
    /// chain and 1 on the other. Both chains end in an absorbing state.
    pub fn delayed_split_chain(depth: usize, gamma: f64) -> Result<Self> {
        if depth == 0 {
            return Err(invalid("depth must be at least 1"));
        }
        let ns = 2 * depth + 1;
        let sink = 2 * depth;
        let mut transitions = vec![vec![vec![0.0; ns]]; ns];
        let mut reward_probs = vec![vec![vec![1.0, 0.0]]; ns];
        for chain in 0..2 {
            for i in 0..depth {
                let s = chain * depth + i;
                let next = if i + 1 < depth { s + 1 } else { sink };
                transitions[s][0][next] = 1.0;
            }
        }
        transitions[sink][0][sink] = 1.0;
        reward_probs[2 * depth - 1][0] = vec![0.0, 1.0];
        let m = Self {
            n_states: ns,
            n_actions: 1,
            reward_support: vec![0.0, 1.0],
            reward_probs,
            transitions,
            distractor_chain: vec![vec![1.0]],
            gamma,
            reward_bound: 1.0,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Parameters for [`TabularPOMDP::random`].
#[derive(Clone, Debug)]
pub struct RandomSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_rewards: usize,
    pub gamma: f64,
    /// Number of distinct reward rows shared among the states.
    pub n_profiles: usize,
    pub stochastic_rewards: bool,
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Random probability row with some exact zeros.
fn random_row(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.05..1.0f64)
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        let k = rng.random_range(0..n);
        w[k] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    // Push rounding residue onto the largest entry so the row sums to 1.
    let resid = 1.0 - w.iter().sum::<f64>();
    let imax = (0..n)
        .max_by(|&i, &j| w[i].partial_cmp(&w[j]).expect("finite"))
        .expect("nonempty");
    w[imax] += resid;
    w
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Distribution over reward sequences of a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSeqDistribution {
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl RewardSeqDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn check_budget(count_log2: f64, what: &str) -> Result<()> {
    if count_log2 > ENUM_BUDGET_LOG2 {
        return Err(Error::Budget(format!(
            "{what} needs 2^{count_log2:.1} entries (limit 2^{ENUM_BUDGET_LOG2}); use a shorter horizon or fewer values"
        )));
    }
    Ok(())
}

fn check_state_actions(m: &TabularPOMDP, s: usize, aseq: &[usize]) -> Result<()> {
    if s >= m.n_states {
        return Err(invalid(format!("state {s} out of range {}", m.n_states)));
    }
    if aseq.is_empty() {
        return Err(invalid("action sequence must be non-empty"));
    }
    if let Some(a) = aseq.iter().find(|&&a| a >= m.n_actions) {
        return Err(invalid(format!("action {a} out of range {}", m.n_actions)));
    }
    Ok(())
}

/// Reward-index sequences with their probabilities, keyed in lexicographic
/// order. Sequences with exactly zero probability are dropped.
fn rsd_indexed(m: &TabularPOMDP, s: usize, aseq: &[usize]) -> Result<BTreeMap<Vec<usize>, f64>> {
    check_state_actions(m, s, aseq)?;
    let nr = m.reward_support.len();
    check_budget(aseq.len() as f64 * (nr as f64).log2(), "reward-sequence enumeration")?;
    let mut start = vec![0.0; m.n_states];
    start[s] = 1.0;
    // Each entry: partial reward-index sequence -> joint mass over current state.
    let mut frontier: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), start)];
    for &a in aseq {
        let mut next_frontier = Vec::with_capacity(frontier.len() * nr);
        for (seq, mass) in &frontier {
            for k in 0..nr {
                let mut next = vec![0.0; m.n_states];
                let mut any = false;
                for (st, &w) in mass.iter().enumerate() {
                    let pr = m.reward_probs[st][a][k];
                    if w == 0.0 || pr == 0.0 {
                        continue;
                    }
                    any = true;
                    let wk = w * pr;
                    for (sn, &pt) in m.transitions[st][a].iter().enumerate() {
                        if pt != 0.0 {
                            next[sn] += wk * pt;
                        }
                    }
                }
                if any {
                    let mut sq = seq.clone();
                    sq.push(k);
                    next_frontier.push((sq, next));
                }
            }
        }
        frontier = next_frontier;
    }
    Ok(frontier
        .into_iter()
        .map(|(seq, mass)| (seq, mass.iter().sum::<f64>()))
        .filter(|(_, p)| *p > 0.0)
        .collect())
}

/// Exact distribution of `(r_1, ..., r_T)` from state `s` under the open-loop
/// action sequence `aseq`.
pub fn exact_rsd(m: &TabularPOMDP, s: usize, aseq: &[usize]) -> Result<RewardSeqDistribution> {
    let map = rsd_indexed(m, s, aseq)?;
    let mut support = Vec::with_capacity(map.len());
    let mut probs = Vec::with_capacity(map.len());
    for (seq, p) in map {
        support.push(seq.iter().map(|&k| m.reward_support[k]).collect());
        probs.push(p);
    }
    Ok(RewardSeqDistribution { support, probs })
}

/// Characteristic function of the reward-sequence distribution at `omega`.
pub fn exact_cf(m: &TabularPOMDP, s: usize, aseq: &[usize], omega: &[f64]) -> Result<Complex64> {
    let d = exact_rsd(m, s, aseq)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for (seq, p) in d.support.iter().zip(&d.probs) {
        let phase = discounted_inner(omega, seq, m.gamma)?;
        acc += Complex64::from_polar(*p, phase);
    }
    Ok(acc)
}

fn total_variation(a: &BTreeMap<Vec<usize>, f64>, b: &BTreeMap<Vec<usize>, f64>) -> f64 {
    let mut tv = 0.0;
    for (k, pa) in a {
        tv += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, pb) in b {
        if !a.contains_key(k) {
            tv += pb.abs();
        }
    }
    0.5 * tv
}

/// Assignment of states to blocks of equal reward-sequence behaviour.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatePartition {
    pub block_of: Vec<usize>,
    /// Horizon that induced the partition.
    pub horizon: usize,
}

impl StatePartition {
    pub fn n_blocks(&self) -> usize {
        self.block_of.iter().max().map_or(0, |m| m + 1)
    }

    /// Every state in its own block.
    pub fn singletons(n_states: usize) -> Self {
        Self {
            block_of: (0..n_states).collect(),
            horizon: 0,
        }
    }

    /// One block holding every state.
    pub fn single_block(n_states: usize) -> Self {
        Self {
            block_of: vec![0; n_states],
            horizon: 0,
        }
    }

    /// True when every block of `self` lies inside a block of `coarser`.
    pub fn refines(&self, coarser: &StatePartition) -> bool {
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        for (s, &b) in self.block_of.iter().enumerate() {
            let c = coarser.block_of[s];
            if *map.entry(b).or_insert(c) != c {
                return false;
            }
        }
        true
    }
}

/// All action sequences of length `t` over `n` actions, lexicographic.
fn action_sequences(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

/// Groups states whose reward-sequence distributions agree (total variation
/// below [`TV_TOL`]) for every action sequence of length `horizon`.
pub fn t_level_partition(m: &TabularPOMDP, horizon: usize) -> Result<StatePartition> {
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    check_budget(
        horizon as f64 * (m.n_actions as f64).log2(),
        "action-sequence enumeration",
    )?;
    let seqs = action_sequences(m.n_actions, horizon);
    let table: Vec<Vec<BTreeMap<Vec<usize>, f64>>> = (0..m.n_states)
        .map(|s| seqs.iter().map(|a| rsd_indexed(m, s, a)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut block_of = vec![usize::MAX; m.n_states];
    let mut reps: Vec<usize> = Vec::new();
    for s in 0..m.n_states {
        let found = reps.iter().position(|&r| {
            table[s]
                .iter()
                .zip(&table[r])
                .all(|(a, b)| total_variation(a, b) < TV_TOL)
        });
        block_of[s] = match found {
            Some(b) => b,
            None => {
                reps.push(s);
                reps.len() - 1
            }
        };
    }
    Ok(StatePartition { block_of, horizon })
}

/// Tolerance on the sup-norm Bellman residual.
pub const VI_TOL: f64 = 1e-10;

/// Optimal state values by value iteration.
pub fn value_iteration(m: &TabularPOMDP) -> Vec<f64> {
    let r: Vec<Vec<f64>> = (0..m.n_states)
        .map(|s| (0..m.n_actions).map(|a| m.expected_reward(s, a)).collect())
        .collect();
    let mut v = vec![0.0; m.n_states];
    loop {
        let next: Vec<f64> = (0..m.n_states)
            .map(|s| {
                (0..m.n_actions)
                    .map(|a| r[s][a] + m.gamma * dot(&m.transitions[s][a], &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let resid = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        // A residual of δ between iterates bounds the Bellman residual of the
        // new iterate by γδ.
        if resid * m.gamma.max(f64::EPSILON) < VI_TOL || resid == 0.0 {
            return v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sup-norm Bellman optimality residual of `v`.
pub fn bellman_residual(m: &TabularPOMDP, v: &[f64]) -> f64 {
    (0..m.n_states)
        .map(|s| {
            let best = (0..m.n_actions)
                .map(|a| m.expected_reward(s, a) + m.gamma * dot(&m.transitions[s][a], v))
                .fold(f64::NEG_INFINITY, f64::max);
            (best - v[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// Exact value of a deterministic stationary policy (`policy[s]` = action)
/// by solving `(I - γ P_π) v = r_π`.
pub fn policy_value(m: &TabularPOMDP, policy: &[usize]) -> Result<Vec<f64>> {
    let n = m.n_states;
    if policy.len() != n {
        return Err(Error::Length {
            what: "policy vs states",
            left: policy.len(),
            right: n,
        });
    }
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        let act = policy[s];
        if act >= m.n_actions {
            return Err(invalid(format!("policy action {act} out of range")));
        }
        b[s] = m.expected_reward(s, act);
        for (sn, p) in m.transitions[s][act].iter().enumerate() {
            a[(s, sn)] -= m.gamma * p;
        }
    }
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| invalid("policy evaluation system is singular"))?;
    Ok(x.iter().copied().collect())
}

/// Best value reachable from each state by a deterministic stationary policy
/// that picks the same action in every state of a block.
///
/// All `|A|^blocks` block-constant policies are evaluated exactly and the
/// pointwise maximum is returned, so the result is at most `V*` everywhere
/// and equals `V*` when the partition is fine enough for an optimal policy
/// to be block-constant.
pub fn aggregated_value(m: &TabularPOMDP, part: &StatePartition) -> Result<Vec<f64>> {
    if part.block_of.len() != m.n_states {
        return Err(Error::Length {
            what: "partition vs states",
            left: part.block_of.len(),
            right: m.n_states,
        });
    }
    let nb = part.n_blocks();
    let mut seen = vec![false; nb];
    for &b in &part.block_of {
        seen[b] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(invalid("partition block ids must be contiguous from 0"));
    }
    check_budget(nb as f64 * (m.n_actions as f64).log2(), "block-policy enumeration")?;
    let mut best = vec![f64::NEG_INFINITY; m.n_states];
    let mut choice = vec![0usize; nb];
    loop {
        let policy: Vec<usize> = part.block_of.iter().map(|&b| choice[b]).collect();
        let v = policy_value(m, &policy)?;
        for (bst, x) in best.iter_mut().zip(&v) {
            *bst = bst.max(*x);
        }
        // Odometer increment over block choices.
        let mut i = 0;
        loop {
            if i == nb {
                return Ok(best);
            }
            choice[i] += 1;
            if choice[i] < m.n_actions {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

/// Outcome of comparing `V*` against the partition-restricted value.
#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub horizon: usize,
    pub max_gap: f64,
    pub min_gap: f64,
    /// `2 γ^T r̄ / (1 - γ)`.
    pub bound: f64,
    pub n_blocks: usize,
    pub pass: bool,
}

/// Slack allowed on both sides of the sandwich `0 ≤ gap ≤ bound`.
pub const GAP_SLACK: f64 = 1e-8;

pub fn gap_bound(gamma: f64, horizon: usize, reward_bound: f64) -> f64 {
    2.0 * gamma.powi(horizon as i32) * reward_bound / (1.0 - gamma)
}

/// Computes `V* - V̄*∘Φ` over all states for the horizon-`T` partition.
pub fn theorem1_gap(m: &TabularPOMDP, horizon: usize) -> Result<GapReport> {
    let part = t_level_partition(m, horizon)?;
    let v_star = value_iteration(m);
    let v_bar = aggregated_value(m, &part)?;
    let gaps: Vec<f64> = v_star.iter().zip(&v_bar).map(|(a, b)| a - b).collect();
    let max_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let bound = gap_bound(m.gamma, horizon, m.reward_bound);
    Ok(GapReport {
        horizon,
        max_gap,
        min_gap,
        bound,
        n_blocks: part.n_blocks(),
        pass: min_gap >= -GAP_SLACK && max_gap <= bound + GAP_SLACK,
    })
}
