//! Gate patterns of the piecewise-linear ops (`relu`, `abs`).
//!
//! Finite differences across a kink measure neither one-sided slope. During
//! a gradient check the patterns seen at the base point are recorded and then
//! replayed for every perturbed pass, so each pass evaluates the same linear
//! piece whose slope backward computes. Crossings are still counted.

use std::cell::RefCell;

enum Mode {
    Off,
    Record(Vec<Vec<bool>>),
    Replay { gates: Vec<Vec<bool>>, next: usize, crossed: usize, mismatch: bool },
}

thread_local! {
    static MODE: RefCell<Mode> = const { RefCell::new(Mode::Off) };
}

/// Applies a gated op: `on(v)` where the gate is open, `off(v)` elsewhere.
/// `open(v)` decides the gate from the input unless a pattern is replayed.
pub(crate) fn apply(input: &[f64], open: fn(f64) -> bool, on: fn(f64) -> f64, off: fn(f64) -> f64) -> Vec<f64> {
    MODE.with(|m| {
        let mut m = m.borrow_mut();
        match &mut *m {
            Mode::Off => input.iter().map(|&v| if open(v) { on(v) } else { off(v) }).collect(),
            Mode::Record(gates) => {
                let pattern: Vec<bool> = input.iter().map(|&v| open(v)).collect();
                let out = input.iter().zip(&pattern).map(|(&v, &g)| if g { on(v) } else { off(v) }).collect();
                gates.push(pattern);
                out
            }
            Mode::Replay { gates, next, crossed, mismatch } => {
                let Some(pattern) = gates.get(*next).filter(|p| p.len() == input.len()) else {
                    *mismatch = true;
                    return input.iter().map(|&v| if open(v) { on(v) } else { off(v) }).collect();
                };
                *next += 1;
                input
                    .iter()
                    .zip(pattern)
                    .map(|(&v, &g)| {
                        if g != open(v) {
                            *crossed += 1;
                        }
                        if g {
                            on(v)
                        } else {
                            off(v)
                        }
                    })
                    .collect()
            }
        }
    })
}

/// Resets the mode when dropped, so an early return cannot leak it.
pub(crate) struct Session;

impl Session {
    pub(crate) fn record() -> Self {
        MODE.with(|m| *m.borrow_mut() = Mode::Record(Vec::new()));
        Session
    }

    /// Ends recording and starts replaying what was recorded.
    pub(crate) fn start_replay(&self) {
        MODE.with(|m| {
            let mut m = m.borrow_mut();
            let gates = match std::mem::replace(&mut *m, Mode::Off) {
                Mode::Record(g) => g,
                Mode::Replay { gates, .. } => gates,
                Mode::Off => Vec::new(),
            };
            *m = Mode::Replay {
                gates,
                next: 0,
                crossed: 0,
                mismatch: false,
            };
        });
    }

    /// Rewinds the replay cursor; returns the gates crossed since the last
    /// rewind and whether the pass used the same gated ops as the base pass.
    pub(crate) fn rewind(&self) -> (usize, bool) {
        MODE.with(|m| match &mut *m.borrow_mut() {
            Mode::Replay { gates, next, crossed, mismatch } => {
                let same = !*mismatch && *next == gates.len();
                let c = *crossed;
                *next = 0;
                *crossed = 0;
                *mismatch = false;
                (c, same)
            }
            _ => (0, true),
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        MODE.with(|m| *m.borrow_mut() = Mode::Off);
    }
}
