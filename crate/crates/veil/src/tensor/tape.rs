//! Per-thread gradient tape.
//!
//! Operations append entries in execution order; [`backward`] walks them in
//! reverse from the root's entry, which is a valid reverse topological order
//! for any graph recorded by forward execution. The tape is implicit and
//! thread-local; entries hold strong handles to their operands, so recorded
//! tensors stay alive until [`clear`].

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) struct Entry<S: Scalar> {
    pub output: Tensor<S>,
    pub inputs: Vec<Tensor<S>>,
    /// maps the output gradient to one gradient per input, each already
    /// reduced to the input's shape
    pub back: Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>,
}

pub struct Tape<S: Scalar> {
    epoch: u64,
    entries: Vec<Rc<Entry<S>>>,
}

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            epoch: NEXT_EPOCH.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.entries.clear();
        self.epoch = NEXT_EPOCH.fetch_add(1, Ordering::Relaxed);
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static PASS_EPOCH: Cell<u64> = const { Cell::new(0) };
}

/// Whether operations currently record backward rules on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables recording for the guard's lifetime. Nests.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = grad_enabled();
        GRAD_ENABLED.with(|g| g.set(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with gradient recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// Drop all recorded entries on this thread and start a new tape epoch.
pub fn clear<S: Scalar>() {
    S::with_tape(|t| t.borrow_mut().reset());
}

/// Number of entries currently recorded on this thread's tape.
pub fn len<S: Scalar>() -> usize {
    S::with_tape(|t| t.borrow().entries.len())
}

/// Begin a new forward pass on this thread; returns the new pass epoch.
/// Tensors created by ops from here on are "computed this pass".
pub(crate) fn advance_pass() -> u64 {
    PASS_EPOCH.with(|p| {
        let next = p.get() + 1;
        p.set(next);
        next
    })
}

pub(crate) fn current_pass() -> u64 {
    PASS_EPOCH.with(|p| p.get())
}

/// Append a backward rule for `output`. Only called by ops that already
/// decided recording applies (grad enabled, some input requires grad).
pub(crate) fn record<S: Scalar>(
    output: &Tensor<S>,
    inputs: Vec<Tensor<S>>,
    back: impl Fn(&Tensor<S>) -> Vec<Tensor<S>> + 'static,
) {
    S::with_tape(|t| {
        let mut tape = t.borrow_mut();
        let index = tape.entries.len();
        output.set_node(tape.epoch, index);
        tape.entries.push(Rc::new(Entry {
            output: output.clone(),
            inputs,
            back: Box::new(back),
        }));
    });
}

/// Reverse-mode sweep from a scalar `root`.
///
/// Every tensor reachable from the root that requires gradients gets its
/// `grad` slot accumulated (added to, never overwritten). Calling twice
/// without clearing grads therefore doubles them. The tape is left intact.
pub(crate) fn backward<S: Scalar>(root: &Tensor<S>) -> Result<()> {
    if !root.is_scalar() {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let (epoch, root_index) = root.node().ok_or(Error::DetachedRoot)?;
    let entries: Vec<Rc<Entry<S>>> = S::with_tape(|t| {
        let tape = t.borrow();
        if tape.epoch != epoch {
            return Err(Error::DetachedRoot);
        }
        Ok(tape.entries[..=root_index].to_vec())
    })?;

    // Backward rules run ops themselves; keep them off the tape.
    let _guard = NoGradGuard::new();

    let mut pending: HashMap<u64, Vec<S>> = HashMap::new();
    let mut holders: HashMap<u64, Tensor<S>> = HashMap::new();
    pending.insert(root.id(), vec![S::one(); root.len()]);
    holders.insert(root.id(), root.clone());

    for entry in entries.iter().rev() {
        let Some(gout) = pending.get(&entry.output.id()) else {
            continue;
        };
        let gout = Tensor::from_vec(entry.output.shape().to_vec(), gout.clone());
        let gins = (entry.back)(&gout);
        debug_assert_eq!(gins.len(), entry.inputs.len());
        for (input, gin) in entry.inputs.iter().zip(gins) {
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(gin.shape(), input.shape(), "backward rule shape drift");
            let slot = pending.entry(input.id()).or_insert_with(|| vec![S::zero(); input.len()]);
            gin.with_data(|g| {
                for (acc, v) in slot.iter_mut().zip(g) {
                    *acc = *acc + *v;
                }
            });
            holders.entry(input.id()).or_insert_with(|| input.clone());
        }
    }

    for (id, grad) in pending {
        let t = &holders[&id];
        if t.requires_grad() {
            t.accumulate_grad(&grad);
        }
    }
    Ok(())
}
