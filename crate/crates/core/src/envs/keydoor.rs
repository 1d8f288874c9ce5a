//! Two-stage pickup task: grab the key, then open the door.
//!
//! Opening without the key is a silent failure (no reward, episode keeps
//! going), which makes the task a minimal test of ordering across turns.

use crate::hashing::StableHasher;

pub const ACTIONS: [&str; 2] = ["grab", "open"];

const GRAB: usize = 0;
const OPEN: usize = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct KeyDoorState {
    pub has_key: bool,
    pub door_open: bool,
}

pub fn reset() -> KeyDoorState {
    KeyDoorState::default()
}

pub fn step(s: &mut KeyDoorState, action: Option<usize>) -> (f64, bool) {
    match action {
        Some(GRAB) => {
            s.has_key = true;
            (0.0, false)
        }
        Some(OPEN) if s.has_key => {
            s.door_open = true;
            (1.0, true)
        }
        _ => (0.0, false),
    }
}

pub fn observe(s: &KeyDoorState) -> Vec<u32> {
    vec![
        100 + u32::from(s.has_key),
        200 + u32::from(s.door_open),
        300 + u32::from(s.has_key) * 2 + u32::from(s.door_open),
    ]
}

pub fn fingerprint(h: StableHasher, s: &KeyDoorState) -> u64 {
    h.u32(u32::from(s.has_key)).u32(u32::from(s.door_open)).finish()
}

pub fn expert_action(s: &KeyDoorState) -> usize {
    if s.has_key {
        OPEN
    } else {
        GRAB
    }
}

pub fn plan(s: &KeyDoorState) -> Vec<usize> {
    if s.door_open {
        vec![]
    } else if s.has_key {
        vec![OPEN]
    } else {
        vec![GRAB, OPEN]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_starts_empty_handed() {
        let s = reset();
        assert!(!s.has_key && !s.door_open);
        assert_eq!(observe(&s), vec![100, 200, 300]);
    }

    #[test]
    fn opening_without_the_key_does_nothing() {
        let mut s = reset();
        let (reward, done) = step(&mut s, Some(OPEN));
        assert_eq!((reward, done), (0.0, false));
        assert!(!s.door_open);
    }

    #[test]
    fn grab_then_open_succeeds() {
        let mut s = reset();
        assert_eq!(step(&mut s, Some(GRAB)), (0.0, false));
        assert_eq!(step(&mut s, Some(OPEN)), (1.0, true));
        assert!(s.door_open);
    }

    #[test]
    fn expert_follows_the_two_step_script() {
        let mut s = reset();
        assert_eq!(expert_action(&s), GRAB);
        step(&mut s, Some(GRAB));
        assert_eq!(expert_action(&s), OPEN);
        assert_eq!(plan(&reset()), vec![GRAB, OPEN]);
    }
}
