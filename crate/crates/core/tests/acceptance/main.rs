//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! ```text
//! cargo test -p microdiff --test acceptance                 # all criteria
//! cargo test -p microdiff --test acceptance -- 2 3 8        # a subset
//! cargo test -p microdiff --test acceptance -- --quick      # skip 5-7 (training)
//! cargo test -p microdiff --test acceptance -- --strict     # exit 1 on any FAIL
//! ```
//!
//! `MICRODIFF_LAB_STEPS` overrides the training length of criteria 5-7.

#[path = "../common/mod.rs"]
mod common;

mod checks;
mod lab;
mod stats;

use std::time::{Duration, Instant};

/// `Ok((pass, detail))`, or `Err` if the check could not run.
pub type Verdict = Result<(bool, String), String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    trains: bool,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "bucket golden table", budget: Duration::from_secs(1), trains: false },
    Criterion { id: 2, name: "Gaussian sampler oracle", budget: Duration::from_secs(60), trains: false },
    Criterion { id: 3, name: "CFG algebra", budget: Duration::from_secs(1), trains: false },
    Criterion { id: 4, name: "gradient suite", budget: Duration::from_secs(120), trains: false },
    Criterion { id: 5, name: "micro-conditioning effects", budget: Duration::from_secs(30 * 60), trains: true },
    Criterion { id: 6, name: "size-cond Frechet ordering", budget: Duration::from_secs(2 * 3600), trains: true },
    Criterion { id: 7, name: "refinement no-op and improvement", budget: Duration::from_secs(30 * 60), trains: true },
    Criterion { id: 8, name: "Frechet closed forms", budget: Duration::from_secs(1), trains: false },
    Criterion { id: 9, name: "determinism", budget: Duration::from_secs(600), trains: false },
    Criterion { id: 10, name: "conditioning statistics", budget: Duration::from_secs(60), trains: false },
];

fn run(id: u32, lab: &mut lab::Lab) -> Verdict {
    match id {
        1 => checks::bucket_table(),
        2 => checks::gaussian_samplers(),
        3 => checks::cfg_algebra(),
        4 => checks::gradients(),
        5 => lab::microcond_effects(lab),
        6 => lab::size_cond_ordering(lab),
        7 => lab::refinement(lab),
        8 => checks::frechet_closed_forms(),
        9 => checks::determinism(),
        10 => checks::conditioning_statistics(),
        _ => unreachable!(),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let strict = args.iter().any(|a| a == "--strict");
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();

    let mut lab = lab::Lab::new();
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for c in &CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&c.id) {
            continue;
        }
        if quick && c.trains {
            println!("SKIP [{:>2}] {} (--quick)", c.id, c.name);
            skipped += 1;
            continue;
        }
        let t = Instant::now();
        let verdict = run(c.id, &mut lab);
        let took = t.elapsed();
        let over = if took > c.budget {
            format!(" over budget {:?}", c.budget)
        } else {
            String::new()
        };
        match verdict {
            Ok((true, detail)) if over.is_empty() => {
                passed += 1;
                println!("PASS [{:>2}] {}: {detail} ({took:.1?})", c.id, c.name);
            }
            Ok((_, detail)) => {
                failed += 1;
                println!("FAIL [{:>2}] {}: {detail} ({took:.1?}{over})", c.id, c.name);
            }
            Err(e) => {
                failed += 1;
                println!("FAIL [{:>2}] {}: error: {e} ({took:.1?})", c.id, c.name);
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
