use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// A learnable tensor, or a non-trainable buffer such as a batch-norm running mean.
///
/// Each instance carries a process-unique id so the tape can route gradients
/// back to it; cloning yields a new id.
#[derive(Debug)]
pub struct Param {
    uid: u64,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { uid: fresh_uid(), value, trainable: true }
    }

    pub fn buffer(value: Tensor) -> Self {
        Self { uid: fresh_uid(), value, trainable: false }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self { uid: fresh_uid(), value: self.value.clone(), trainable: self.trainable }
    }
}

/// Anything that owns parameters.
pub trait Module {
    /// Visits every parameter and buffer with its dotted path.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Learnable scalar count; buffers excluded.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }

    /// Copies running-statistic updates recorded during a training forward pass.
    fn apply_buffer_updates(&mut self, tape: &crate::Tape) {
        self.visit_mut("", &mut |_, p| {
            if let Some(v) = tape.take_buffer_update(p.uid()) {
                p.value = v;
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
