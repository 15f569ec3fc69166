//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `ACCEPTANCE_ONLY=1,4,8` restricts the run to a subset of criteria.

mod assignment;
mod compositing;
mod consistency;
mod distill;
mod editing;
mod gradients;
mod serialization;
mod toy_scene;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Check = Box<dyn FnOnce() -> Outcome>;

fn run(id: &str, name: &str, budget: Duration, check: Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Outcome::new(false, format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let in_budget = elapsed <= budget;
    let pass = outcome.pass && in_budget;
    let budget_note = if in_budget { String::new() } else { format!(" (over budget {:.0}s)", budget.as_secs_f64()) };
    println!(
        "{} criterion {id} {name}: {} [{:.1}s{budget_note}]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|s| s == id));
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    let mut go = |id: &str, name: &str, budget: Duration, check: Check| {
        if wanted(id) {
            results.push(run(id, name, budget, check));
        }
    };

    go("1", "compositing identities", secs(10), Box::new(compositing::check));
    go("2", "finite-difference gradients", secs(300), Box::new(gradients::check));
    go("3", "grid assignment and spawning", secs(30), Box::new(assignment::check));
    go("4", "rasterizer/renderer consistency", secs(120), Box::new(consistency::check));
    go("5", "distillation fixed points", secs(10), Box::new(distill::check));
    go("8", "editing equivariance", secs(120), Box::new(editing::check));
    go("10", "serialization and mesh export", secs(120), Box::new(serialization::check));

    if ["6", "7", "9"].iter().any(|id| wanted(id)) {
        let runs = toy_scene::ToyRuns::new();
        go("6", "toy scene convergence", secs(30 * 60), Box::new({
            let r = runs.clone();
            move || r.convergence()
        }));
        go("9", "off-trajectory semantic agreement", secs(30 * 60), Box::new({
            let r = runs.clone();
            move || r.off_trajectory()
        }));
        go("7", "ablations end worse", secs(60 * 60), Box::new(move || runs.ablations()));
    }

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
