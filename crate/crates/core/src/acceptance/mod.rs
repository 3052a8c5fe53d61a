//! Verification suite: one function per criterion, each returning a
//! pass/fail record with measured numbers. Expensive artifacts (datasets,
//! trained models, evaluation runs) are built once per process and shared
//! across criteria.

mod artifacts;
mod criteria;

pub use artifacts::{global_artifacts, Artifacts};

use crate::error::Result;

pub const ACCEPT_SEED: u64 = 1042;

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:2} ({}): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.details
        )
    }
}

/// A single pass/fail check with accumulated detail text.
#[derive(Default)]
pub struct Checks {
    pub pass: bool,
    parts: Vec<String>,
}

impl Checks {
    pub fn new() -> Self {
        Self { pass: true, parts: Vec::new() }
    }

    pub fn require(&mut self, ok: bool, detail: impl Into<String>) {
        let detail = detail.into();
        if !ok {
            self.pass = false;
            self.parts.push(format!("FAILED: {detail}"));
        } else {
            self.parts.push(detail);
        }
    }

    pub fn details(&self) -> String {
        self.parts.join("; ")
    }
}

pub fn criterion_name(id: usize) -> &'static str {
    match id {
        1 => "autodiff correctness",
        2 => "loss and optimizer identities",
        3 => "environment oracles",
        4 => "source-algorithm sanity",
        5 => "bandit distribution shift",
        6 => "in-context emergence (dark_room)",
        7 => "data efficiency vs source",
        8 => "context-size ablation",
        9 => "demonstration prompting",
        10 => "architecture comparison (key-to-door)",
        11 => "infrastructure round-trips",
        _ => "unknown",
    }
}

/// Run one criterion against the process-wide artifact cache.
pub fn run_criterion(id: usize) -> Result<CriterionResult> {
    let artifacts = global_artifacts();
    let t0 = std::time::Instant::now();
    let checks = match id {
        1 => criteria::autodiff(),
        2 => criteria::identities(),
        3 => criteria::env_oracles(),
        4 => criteria::source_sanity(artifacts),
        5 => criteria::bandit_shift(artifacts),
        6 => criteria::in_context_emergence(artifacts),
        7 => criteria::data_efficiency(artifacts),
        8 => criteria::context_ablation(artifacts),
        9 => criteria::prompting(artifacts),
        10 => criteria::architecture_comparison(artifacts),
        11 => criteria::infrastructure(),
        other => return Err(crate::error::contract(format!("no criterion {other}"))),
    }?;
    Ok(CriterionResult {
        id,
        name: criterion_name(id),
        pass: checks.pass,
        details: checks.details(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Run a list of criteria in order, returning all results.
pub fn run_criteria(ids: &[usize]) -> Result<Vec<CriterionResult>> {
    ids.iter().map(|&id| run_criterion(id)).collect()
}
