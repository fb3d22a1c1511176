//! Mountain-car simulator, the energy-pumping data policy, offline
//! transition datasets and Monte-Carlo ground-truth values.
//!
//! Dynamics follow the classic textbook formulation: force 0.001, gravity
//! 0.0025·cos(3p), position in [−1.2, 0.6], speed capped at 0.07, reward −1
//! per step, goal at p ≥ 0.5.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, FrmError, Result};

pub const POS_MIN: f64 = -1.2;
pub const POS_MAX: f64 = 0.6;
pub const VEL_MAX: f64 = 0.07;
pub const GOAL: f64 = 0.5;
pub const FORCE: f64 = 0.001;
pub const GRAVITY: f64 = 0.0025;
pub const EPISODE_CAP: usize = 1000;
/// Energy-policy steps from the valley floor `(−0.5, 0)` to the goal,
/// pinned at first run.
pub const VALLEY_STEPS_TO_GOAL: usize = 124;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McState {
    pub position: f64,
    pub velocity: f64,
}

impl McState {
    pub fn new(position: f64, velocity: f64) -> Self {
        McState { position, velocity }
    }

    /// Affine map of both coordinates onto `[0, 1]`.
    pub fn normalized(&self) -> [f64; 2] {
        [
            (self.position - POS_MIN) / (POS_MAX - POS_MIN),
            (self.velocity + VEL_MAX) / (2.0 * VEL_MAX),
        ]
    }

    pub fn in_bounds(&self) -> bool {
        (POS_MIN..=POS_MAX).contains(&self.position) && (-VEL_MAX..=VEL_MAX).contains(&self.velocity)
    }

    pub fn at_goal(&self) -> bool {
        self.position >= GOAL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Reverse,
    Coast,
    Forward,
}

impl Action {
    pub fn as_f64(self) -> f64 {
        match self {
            Action::Reverse => -1.0,
            Action::Coast => 0.0,
            Action::Forward => 1.0,
        }
    }

    pub fn from_f64(a: f64) -> Result<Self> {
        match a {
            x if x == -1.0 => Ok(Action::Reverse),
            x if x == 0.0 => Ok(Action::Coast),
            x if x == 1.0 => Ok(Action::Forward),
            other => Err(contract(format!("action must be -1, 0 or +1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: McState,
    pub a: Action,
    pub r: f64,
    pub next: McState,
    pub terminal: bool,
}

pub fn step(s: McState, a: Action) -> (McState, f64, bool) {
    let mut v = s.velocity + FORCE * a.as_f64() - GRAVITY * (3.0 * s.position).cos();
    v = v.clamp(-VEL_MAX, VEL_MAX);
    let p = (s.position + v).clamp(POS_MIN, POS_MAX);
    if p <= POS_MIN {
        v = 0.0;
    }
    let next = McState::new(p, v);
    (next, -1.0, next.at_goal())
}

/// Accelerate along the current velocity; `+1` when at rest.
pub fn energy_policy(s: &McState) -> Action {
    if s.velocity < 0.0 {
        Action::Reverse
    } else {
        Action::Forward
    }
}

/// Start positions are uniform on `[lo, hi]` with zero velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartDistribution {
    pub lo: f64,
    pub hi: f64,
}

impl Default for StartDistribution {
    fn default() -> Self {
        StartDistribution { lo: -0.6, hi: -0.4 }
    }
}

/// Runs whole episodes (to the goal or the step cap) until `n`
/// transitions are collected; the last episode is cut at `n`.
pub fn collect_transitions<P: Fn(&McState) -> Action>(
    policy: P,
    n: usize,
    start: StartDistribution,
    seed: u64,
) -> Result<Vec<Transition>> {
    if n == 0 {
        return Err(contract("need at least one transition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut s = McState::new(rng.random_range(start.lo..=start.hi), 0.0);
        for _ in 0..EPISODE_CAP {
            let a = policy(&s);
            let (next, r, terminal) = step(s, a);
            out.push(Transition {
                s,
                a,
                r,
                next,
                terminal,
            });
            s = next;
            if terminal || out.len() == n {
                break;
            }
        }
    }
    Ok(out)
}

/// Lengths of the episodes [`collect_transitions`] would run, and whether
/// each reached the goal before the cap.
pub fn episode_lengths<P: Fn(&McState) -> Action>(policy: P, episodes: usize, start: StartDistribution, seed: u64) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| {
            let mut s = McState::new(rng.random_range(start.lo..=start.hi), 0.0);
            for t in 1..=EPISODE_CAP {
                let (next, _, terminal) = step(s, policy(&s));
                if terminal {
                    return (t, true);
                }
                s = next;
            }
            (EPISODE_CAP, false)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub values: Vec<f64>,
    /// Rollouts that hit the step cap before the goal.
    pub truncated: Vec<bool>,
}

/// Discounted return of following `policy` from each state.
///
/// The dynamics are deterministic, so every rollout from a state is
/// identical; `n_rollouts` is kept for interface symmetry and averaged over.
pub fn ground_truth_values<P: Fn(&McState) -> Action>(
    states: &[McState],
    policy: P,
    gamma: f64,
    n_rollouts: usize,
    _seed: u64,
) -> Result<GroundTruth> {
    if n_rollouts == 0 {
        return Err(contract("need at least one rollout"));
    }
    let mut values = Vec::with_capacity(states.len());
    let mut truncated = Vec::with_capacity(states.len());
    for s0 in states {
        let mut total = 0.0;
        let mut trunc = false;
        for _ in 0..n_rollouts {
            let (ret, t) = rollout_return(*s0, &policy, gamma);
            total += ret;
            trunc |= t;
        }
        values.push(total / n_rollouts as f64);
        truncated.push(trunc);
    }
    Ok(GroundTruth { values, truncated })
}

fn rollout_return<P: Fn(&McState) -> Action>(s0: McState, policy: &P, gamma: f64) -> (f64, bool) {
    if s0.at_goal() {
        return (0.0, false);
    }
    let mut s = s0;
    let mut ret = 0.0;
    let mut discount = 1.0;
    for _ in 0..EPISODE_CAP {
        let (next, r, terminal) = step(s, policy(&s));
        ret += discount * r;
        if terminal {
            return (ret, false);
        }
        discount *= gamma;
        s = next;
    }
    (ret, true)
}

/// Number of steps the energy policy needs to reach the goal from `s`.
pub fn steps_to_goal(s: McState) -> Option<usize> {
    let mut s = s;
    for t in 1..=EPISODE_CAP {
        let (next, _, terminal) = step(s, energy_policy(&s));
        if terminal {
            return Some(t);
        }
        s = next;
    }
    None
}

/// States sampled without replacement from on-policy visitation.
pub fn sample_visited_states(n: usize, seed: u64) -> Result<Vec<McState>> {
    let pool = collect_transitions(energy_policy, (4 * n).max(1), StartDistribution::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut idx = sample(&mut rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].s).collect())
}

const TRANSITION_HEADER: [&str; 7] = ["pos", "vel", "action", "reward", "pos'", "vel'", "terminal"];

pub fn write_transitions_csv<W: Write>(transitions: &[Transition], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TRANSITION_HEADER)?;
    for t in transitions {
        wr.write_record([
            t.s.position.to_string(),
            t.s.velocity.to_string(),
            t.a.as_f64().to_string(),
            t.r.to_string(),
            t.next.position.to_string(),
            t.next.velocity.to_string(),
            u8::from(t.terminal).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_transitions_csv<R: Read>(r: R) -> Result<Vec<Transition>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != TRANSITION_HEADER {
        return Err(FrmError::Io(format!("unexpected transition header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| FrmError::Io(format!("bad field `{}`: {e}", &rec[i])))
        };
        out.push(Transition {
            s: McState::new(f(0)?, f(1)?),
            a: Action::from_f64(f(2)?)?,
            r: f(3)?,
            next: McState::new(f(4)?, f(5)?),
            terminal: f(6)? != 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_from_the_valley() {
        let (next, r, terminal) = step(McState::new(-0.5, 0.0), Action::Forward);
        let v = 0.001 - 0.0025 * (-1.5f64).cos();
        assert!((next.velocity - v).abs() < 1e-15);
        assert!((next.velocity - 0.000823).abs() < 1e-6);
        assert!((next.position - (-0.5 + v)).abs() < 1e-15);
        assert_eq!(r, -1.0);
        assert!(!terminal);
    }

    #[test]
    fn reaching_the_goal_terminates() {
        let (next, _, terminal) = step(McState::new(0.49, 0.07), Action::Forward);
        assert!(terminal && next.position >= 0.5);
    }

    #[test]
    fn valley_bottom_is_an_equilibrium() {
        let p = -std::f64::consts::PI / 6.0;
        let (next, _, _) = step(McState::new(p, 0.0), Action::Coast);
        assert!(next.velocity.abs() < 1e-6);
        assert!((next.position - p).abs() < 1e-6);
    }

    #[test]
    fn left_wall_stops_the_car() {
        let (next, _, _) = step(McState::new(-1.19, -0.07), Action::Reverse);
        assert_eq!(next.position, POS_MIN);
        assert_eq!(next.velocity, 0.0);
    }

    #[test]
    fn policy_follows_velocity() {
        assert_eq!(energy_policy(&McState::new(0.0, 0.01)), Action::Forward);
        assert_eq!(energy_policy(&McState::new(0.0, -0.02)), Action::Reverse);
        assert_eq!(energy_policy(&McState::new(0.0, 0.0)), Action::Forward);
    }

    #[test]
    fn single_transition() {
        let t = collect_transitions(energy_policy, 1, StartDistribution::default(), 3).unwrap();
        assert_eq!(t.len(), 1);
        let (next, r, terminal) = step(t[0].s, t[0].a);
        assert_eq!((next, r, terminal), (t[0].next, t[0].r, t[0].terminal));
        assert!(collect_transitions(energy_policy, 0, StartDistribution::default(), 3).is_err());
    }

    #[test]
    fn values_at_and_near_the_goal() {
        let gt = ground_truth_values(
            &[McState::new(0.55, 0.0), McState::new(0.49, 0.07)],
            energy_policy,
            0.99,
            1,
            0,
        )
        .unwrap();
        assert_eq!(gt.values, vec![0.0, -1.0]);
        assert_eq!(gt.truncated, vec![false, false]);
    }

    #[test]
    fn valley_steps_are_pinned() {
        assert_eq!(steps_to_goal(McState::new(-0.5, 0.0)), Some(VALLEY_STEPS_TO_GOAL));
    }

    #[test]
    fn value_from_valley_matches_steps_to_goal() {
        let s = McState::new(-0.5, 0.0);
        let t = steps_to_goal(s).unwrap();
        let expected: f64 = -(0..t).map(|k| 0.99f64.powi(k as i32)).sum::<f64>();
        let gt = ground_truth_values(&[s], energy_policy, 0.99, 3, 0).unwrap();
        assert!((gt.values[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn transitions_csv_round_trip() {
        let t = collect_transitions(energy_policy, 50, StartDistribution::default(), 9).unwrap();
        let mut buf = Vec::new();
        write_transitions_csv(&t, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("pos,vel,action,reward,pos',vel',terminal\n"));
        assert_eq!(read_transitions_csv(buf.as_slice()).unwrap(), t);
    }
}
