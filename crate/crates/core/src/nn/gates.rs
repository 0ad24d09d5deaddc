//! Recording and replay of leaky-ReLU gate patterns on the current thread.
//!
//! Replaying the pattern recorded at a parameter point turns the network into
//! the smooth function whose derivative backpropagation computes there, which
//! is what a finite-difference check needs to compare against.

use std::cell::RefCell;

enum Mode {
    Off,
    Record(Vec<Vec<bool>>),
    Replay { gates: Vec<Vec<bool>>, next: usize },
}

thread_local! {
    static MODE: RefCell<Mode> = const { RefCell::new(Mode::Off) };
}

/// Gate pattern: one entry per activation call, `true` where the input was
/// non-negative.
pub type GatePattern = Vec<Vec<bool>>;

/// Runs `f`, returning the gate pattern of every activation it evaluated.
pub fn record<R>(f: impl FnOnce() -> R) -> (R, GatePattern) {
    MODE.with(|m| *m.borrow_mut() = Mode::Record(Vec::new()));
    let out = f();
    let gates = MODE.with(|m| match std::mem::replace(&mut *m.borrow_mut(), Mode::Off) {
        Mode::Record(g) => g,
        _ => Vec::new(),
    });
    (out, gates)
}

/// Runs `f` with activations gated by `pattern` instead of by sign.
///
/// Panics if `f` evaluates activations that do not line up with the pattern.
pub fn replay<R>(pattern: &GatePattern, f: impl FnOnce() -> R) -> R {
    MODE.with(|m| {
        *m.borrow_mut() = Mode::Replay {
            gates: pattern.clone(),
            next: 0,
        }
    });
    let out = f();
    MODE.with(|m| *m.borrow_mut() = Mode::Off);
    out
}

/// Gates for an activation over `x`; `None` means gate by sign.
pub(crate) fn gates_for<T: PartialOrd + Default>(x: &[T]) -> Option<Vec<bool>> {
    MODE.with(|m| match &mut *m.borrow_mut() {
        Mode::Off => None,
        Mode::Record(rec) => {
            rec.push(x.iter().map(|v| *v >= T::default()).collect());
            None
        }
        Mode::Replay { gates, next } => {
            let g = gates
                .get(*next)
                .filter(|g| g.len() == x.len())
                .cloned()
                .expect("replayed activation does not match the recorded pattern");
            *next += 1;
            Some(g)
        }
    })
}
