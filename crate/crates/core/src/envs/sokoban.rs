//! Single-box pushing puzzle on an n×n board with implicit border walls.
//!
//! The agent walks the board and pushes the box by stepping into it; pushes
//! off the board are blocked (the whole move becomes a no-op, the step cost
//! still applies). The episode succeeds when the box lands on the target.
//! Reset rejection-samples layouts until a breadth-first solver certifies
//! the instance solvable within the step budget, so every episode the
//! trainer sees has a reachable goal.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::EnvConfig;
use crate::hashing::StableHasher;

pub const ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

/// Row/column deltas matching [`ACTIONS`].
const DELTAS: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

const STEP_PENALTY: f64 = -0.01;
const SUCCESS_REWARD: f64 = 1.0;

/// Board positions are row-major cell indices on the n×n grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SokobanState {
    pub agent: u8,
    pub box_pos: u8,
    pub target: u8,
}

fn to_rc(pos: u8, n: u8) -> (i32, i32) {
    (i32::from(pos / n), i32::from(pos % n))
}

fn to_pos(r: i32, c: i32, n: u8) -> u8 {
    (r * i32::from(n) + c) as u8
}

fn in_bounds(r: i32, c: i32, n: u8) -> bool {
    r >= 0 && c >= 0 && r < i32::from(n) && c < i32::from(n)
}

/// Applies one move to (agent, box) positions. Returns the new pair;
/// blocked moves return the input unchanged.
fn apply_move(agent: u8, box_pos: u8, action: usize, n: u8) -> (u8, u8) {
    let (dr, dc) = DELTAS[action];
    let (ar, ac) = to_rc(agent, n);
    let (nr, nc) = (ar + dr, ac + dc);
    if !in_bounds(nr, nc, n) {
        return (agent, box_pos);
    }
    let next = to_pos(nr, nc, n);
    if next == box_pos {
        let (br, bc) = to_rc(box_pos, n);
        let (pr, pc) = (br + dr, bc + dc);
        if !in_bounds(pr, pc, n) {
            return (agent, box_pos);
        }
        (next, to_pos(pr, pc, n))
    } else {
        (next, box_pos)
    }
}

pub fn step(cfg: &EnvConfig, s: &mut SokobanState, action: Option<usize>) -> (f64, bool) {
    if let Some(a) = action {
        let (agent, box_pos) = apply_move(s.agent, s.box_pos, a, cfg.grid_size);
        s.agent = agent;
        s.box_pos = box_pos;
    }
    let solved = s.box_pos == s.target;
    let reward = if solved { SUCCESS_REWARD + STEP_PENALTY } else { STEP_PENALTY };
    (reward, solved)
}

pub fn observe(cfg: &EnvConfig, s: &SokobanState) -> Vec<u32> {
    let n = u32::from(cfg.grid_size);
    let cells = n * n;
    let delta = |from: u8, to: u8| {
        let (fr, fc) = to_rc(from, cfg.grid_size);
        let (tr, tc) = to_rc(to, cfg.grid_size);
        // Shift deltas into [0, 2n): a compact nonnegative code per offset.
        let dr = (tr - fr + i32::from(cfg.grid_size)) as u32;
        let dc = (tc - fc + i32::from(cfg.grid_size)) as u32;
        dr * 2 * n + dc
    };
    // Absolute positions, the two relative offsets that determine pushing
    // geometry, and one joint code that makes small boards fully tabular.
    vec![
        1_000 + u32::from(s.agent),
        2_000 + u32::from(s.box_pos),
        3_000 + u32::from(s.target),
        4_000 + delta(s.agent, s.box_pos),
        5_000 + delta(s.box_pos, s.target),
        6_000 + (u32::from(s.agent) * cells + u32::from(s.box_pos)) * cells + u32::from(s.target),
    ]
}

pub fn fingerprint(h: StableHasher, s: &SokobanState) -> u64 {
    h.u32(u32::from(s.agent)).u32(u32::from(s.box_pos)).u32(u32::from(s.target)).finish()
}

/// Draws solvable layouts: distinct agent/box/target cells, box off target,
/// and a solver certificate within the step budget.
pub fn reset(cfg: &EnvConfig, rng: &mut ChaCha12Rng) -> SokobanState {
    let n = cfg.grid_size;
    let cells = u32::from(n) * u32::from(n);
    loop {
        let agent = rng.gen_range(0..cells) as u8;
        let box_pos = rng.gen_range(0..cells) as u8;
        let target = rng.gen_range(0..cells) as u8;
        if agent == box_pos || box_pos == target || agent == target {
            continue;
        }
        let s = SokobanState { agent, box_pos, target };
        if solve(cfg, &s, cfg.max_steps).is_some() {
            return s;
        }
    }
}

/// Breadth-first search over (agent, box) pairs; returns a shortest action
/// plan reaching box-on-target, or `None` if the budget is too small or the
/// layout is dead (box in an unpushable corner).
pub fn solve(cfg: &EnvConfig, s: &SokobanState, budget: u32) -> Option<Vec<usize>> {
    if s.box_pos == s.target {
        return Some(vec![]);
    }
    let n = cfg.grid_size;
    let cells = usize::from(n) * usize::from(n);
    let key = |agent: u8, box_pos: u8| usize::from(agent) * cells + usize::from(box_pos);
    // parent[state] = (previous state key, action), for plan reconstruction.
    let mut parent: Vec<Option<(usize, u8)>> = vec![None; cells * cells];
    let mut seen = vec![false; cells * cells];
    let start = key(s.agent, s.box_pos);
    seen[start] = true;
    let mut frontier = VecDeque::from([(s.agent, s.box_pos, 0u32)]);
    while let Some((agent, box_pos, depth)) = frontier.pop_front() {
        if depth >= budget {
            continue;
        }
        for action in 0..ACTIONS.len() {
            let (na, nb) = apply_move(agent, box_pos, action, n);
            if na == agent && nb == box_pos {
                continue;
            }
            let k = key(na, nb);
            if seen[k] {
                continue;
            }
            seen[k] = true;
            parent[k] = Some((key(agent, box_pos), action as u8));
            if nb == s.target {
                let mut plan = Vec::new();
                let mut cur = k;
                while cur != start {
                    let (prev, a) = parent[cur].expect("chain reaches start");
                    plan.push(usize::from(a));
                    cur = prev;
                }
                plan.reverse();
                return Some(plan);
            }
            frontier.push_back((na, nb, depth + 1));
        }
    }
    None
}
