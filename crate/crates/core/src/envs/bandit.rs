//! Deterministic two-armed bandit, optionally chained.
//!
//! One arm always pays, the other never does. With chain length L the agent
//! must pick the paying arm L times in a row; the first wrong pick ends the
//! episode with nothing. Length 1 is the smallest possible credit-assignment
//! problem and the fastest smoke test for a training loop.

use crate::config::EnvConfig;
use crate::hashing::StableHasher;

pub const ARMS: usize = 2;
pub const GOOD_ARM: usize = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BanditState {
    /// How many correct picks so far (position along the chain).
    pub position: u32,
    pub failed: bool,
}

pub fn reset() -> BanditState {
    BanditState::default()
}

pub fn step(cfg: &EnvConfig, s: &mut BanditState, action: Option<usize>) -> (f64, bool) {
    match action {
        Some(GOOD_ARM) if !s.failed => {
            s.position += 1;
            if s.position >= cfg.chain_length {
                (1.0, true)
            } else {
                (0.0, false)
            }
        }
        _ => {
            s.failed = true;
            (0.0, false)
        }
    }
}

pub fn observe(s: &BanditState) -> Vec<u32> {
    vec![400 + s.position, 500 + u32::from(s.failed)]
}

pub fn fingerprint(h: StableHasher, s: &BanditState) -> u64 {
    h.u32(s.position).u32(u32::from(s.failed)).finish()
}

pub fn plan(cfg: &EnvConfig, s: &BanditState) -> Vec<usize> {
    if s.failed {
        return vec![];
    }
    let remaining = cfg.chain_length.saturating_sub(s.position) as usize;
    vec![GOOD_ARM; remaining]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvId;

    fn cfg(chain: u32) -> EnvConfig {
        EnvConfig { id: EnvId::BanditChain, grid_size: 3, max_steps: 10, format_penalty: 0.1, chain_length: chain }
    }

    #[test]
    fn reset_starts_at_the_chain_head() {
        assert_eq!(reset(), BanditState { position: 0, failed: false });
    }

    #[test]
    fn good_arm_pays_immediately_on_length_one() {
        let mut s = reset();
        assert_eq!(step(&cfg(1), &mut s, Some(GOOD_ARM)), (1.0, true));
    }

    #[test]
    fn bad_arm_never_pays() {
        let mut s = reset();
        assert_eq!(step(&cfg(1), &mut s, Some(0)), (0.0, false));
        assert!(s.failed);
        // A later good pick cannot recover the episode.
        assert_eq!(step(&cfg(1), &mut s, Some(GOOD_ARM)), (0.0, false));
    }

    #[test]
    fn chain_requires_every_pick() {
        let c = cfg(3);
        let mut s = reset();
        assert_eq!(step(&c, &mut s, Some(GOOD_ARM)), (0.0, false));
        assert_eq!(step(&c, &mut s, Some(GOOD_ARM)), (0.0, false));
        assert_eq!(step(&c, &mut s, Some(GOOD_ARM)), (1.0, true));
        assert_eq!(plan(&c, &reset()), vec![GOOD_ARM; 3]);
    }
}
