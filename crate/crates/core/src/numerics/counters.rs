//! Per-thread operation counters.
//!
//! Every forward kernel reports the multiply-accumulates it performs, so the
//! analytic cost model can be checked against what actually executed.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-accumulates inside matrix products.
    pub matmul_macs: u64,
    /// Multiply-accumulates inside dense and depthwise convolutions.
    pub conv_macs: u64,
    /// Input elements accumulated by pooling windows.
    pub pool_reads: u64,
    /// Elements scaled by layer normalization.
    pub norm_elems: u64,
}

impl OpCounts {
    pub fn macs(&self) -> u64 {
        self.matmul_macs + self.conv_macs
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = Cell::new(OpCounts::default());
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

fn update(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn add_matmul(n: u64) {
    update(|c| c.matmul_macs += n);
}

pub(crate) fn add_conv(n: u64) {
    update(|c| c.conv_macs += n);
}

pub(crate) fn add_pool(n: u64) {
    update(|c| c.pool_reads += n);
}

pub(crate) fn add_norm(n: u64) {
    update(|c| c.norm_elems += n);
}
