//! `gradcheck`: finite-difference checks of every op kind and the composites.

use brau_net::gradcheck::composite_suite;
use brau_tensor::gradcheck::{op_suite, scaled_square_check};
use brau_tensor::GradCheckReport;
use clap::Args;

use crate::{CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Adds a deliberately wrong backward rule; the run must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

pub fn reports(seed: u64, inject_fault: bool) -> Result<Vec<GradCheckReport>> {
    let mut out = op_suite(seed)?;
    out.extend(composite_suite(seed)?);
    if inject_fault {
        out.push(scaled_square_check(1.5, seed)?);
    }
    Ok(out)
}

/// Prints one line per check and fails naming the worst offender.
pub fn gradcheck(args: &GradCheckArgs) -> Result<()> {
    let reports = reports(args.seed, args.inject_fault)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&GradCheckReport> = reports.iter().filter(|r| !r.passed()).collect();
    println!("{} checks, {} failed", reports.len(), failed.len());
    match failed
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    {
        Some(worst) => Err(CliError::GradCheck(format!(
            "{} of {} checks, worst {} at rel err {:.3e}",
            failed.len(),
            reports.len(),
            worst.op,
            worst.max_rel_err
        ))),
        None => Ok(()),
    }
}
