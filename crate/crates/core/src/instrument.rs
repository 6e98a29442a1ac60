//! Thread-local instrumentation: exp/log map call sites and attention
//! multiply-add counters.
//!
//! Counters are per thread, so concurrently running forward passes do not
//! observe each other. Call [`reset`] before a measured region and
//! [`snapshot`] after it.

use std::cell::{Cell, RefCell};

/// Where an origin map is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Unscoped,
    Embedding,
    HkpsaQuery,
    HkpsaKey,
    Diagnostic,
}

impl Site {
    pub const ALL: [Site; 5] = [
        Site::Unscoped,
        Site::Embedding,
        Site::HkpsaQuery,
        Site::HkpsaKey,
        Site::Diagnostic,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Snapshot of every counter on the current thread.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    /// exp_origin evaluations (one per vector) indexed by [`Site`].
    pub exp_calls: [u64; 5],
    /// log_origin evaluations (one per vector) indexed by [`Site`].
    pub log_calls: [u64; 5],
    /// Multiply-adds spent in banded temporal attention.
    pub band_macs: u64,
    /// Multiply-adds spent in dense temporal attention.
    pub dense_macs: u64,
}

impl Counters {
    pub fn exp_at(&self, site: Site) -> u64 {
        self.exp_calls[site.index()]
    }

    pub fn log_at(&self, site: Site) -> u64 {
        self.log_calls[site.index()]
    }

    pub fn total_exp(&self) -> u64 {
        self.exp_calls.iter().sum()
    }

    pub fn total_log(&self) -> u64 {
        self.log_calls.iter().sum()
    }
}

thread_local! {
    static CURRENT: Cell<Site> = const { Cell::new(Site::Unscoped) };
    static COUNTERS: RefCell<Counters> = RefCell::new(Counters::default());
}

/// Restores the previous site when dropped.
#[must_use]
pub struct SiteGuard {
    prev: Site,
}

impl Drop for SiteGuard {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(self.prev));
    }
}

/// Tags every origin-map call made on this thread until the guard drops.
pub fn enter(site: Site) -> SiteGuard {
    let prev = CURRENT.with(|c| c.replace(site));
    SiteGuard { prev }
}

pub fn current_site() -> Site {
    CURRENT.with(|c| c.get())
}

pub fn reset() {
    COUNTERS.with(|c| *c.borrow_mut() = Counters::default());
}

pub fn snapshot() -> Counters {
    COUNTERS.with(|c| c.borrow().clone())
}

pub(crate) fn record_exp() {
    let site = current_site();
    COUNTERS.with(|c| c.borrow_mut().exp_calls[site.index()] += 1);
}

pub(crate) fn record_log() {
    let site = current_site();
    COUNTERS.with(|c| c.borrow_mut().log_calls[site.index()] += 1);
}

pub(crate) fn add_band_macs(n: u64) {
    COUNTERS.with(|c| c.borrow_mut().band_macs += n);
}

pub(crate) fn add_dense_macs(n: u64) {
    COUNTERS.with(|c| c.borrow_mut().dense_macs += n);
}
