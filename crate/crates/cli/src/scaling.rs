//! `bench-scaling`: analytic attention cost against the number of tokens.

use std::fmt::Write as _;

use brau_net::bra::{attention_flops, PartitionSpec};
use clap::Args;
use serde_json::{json, Value};

use crate::{CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct ScalingArgs {
    /// Square feature-map sides.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    pub resolutions: Vec<usize>,
    #[arg(long, default_value_t = 96)]
    pub channels: usize,
    /// Routed regions per query region.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub side: usize,
    pub tokens: usize,
    /// Cheapest grid among the divisors of `side` with at least `k` regions.
    pub best_s: usize,
    pub bra: u64,
    pub full: u64,
}

pub fn rows(sides: &[usize], c: usize, k: usize) -> Result<Vec<Row>> {
    sides
        .iter()
        .map(|&n| {
            let cost = |s: usize, k: usize| {
                Ok::<_, CliError>(attention_flops(&PartitionSpec::new(n, n, s)?, c, k).total)
            };
            let mut best: Option<(u64, usize)> = None;
            for s in (1..=n).filter(|s| n % s == 0 && s * s >= k) {
                let f = cost(s, k)?;
                if best.is_none_or(|(b, _)| f < b) {
                    best = Some((f, s));
                }
            }
            let (bra, best_s) = best
                .ok_or_else(|| CliError::Usage(format!("no grid on side {n} holds {k} regions")))?;
            Ok(Row {
                side: n,
                tokens: n * n,
                best_s,
                bra,
                full: cost(1, 1)?,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Exponents of the BRA minimum and of full attention in the token count.
pub fn exponents(rows: &[Row]) -> (f64, f64) {
    let n: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
    let bra: Vec<f64> = rows.iter().map(|r| r.bra as f64).collect();
    let full: Vec<f64> = rows.iter().map(|r| r.full as f64).collect();
    (loglog_slope(&n, &bra), loglog_slope(&n, &full))
}

pub fn scaling(args: &ScalingArgs) -> Result<String> {
    if args.resolutions.len() < 3 {
        return Err(CliError::Usage(
            "need at least three resolutions for a fit".into(),
        ));
    }
    let rows = rows(&args.resolutions, args.channels, args.k)?;
    let (eb, ef) = exponents(&rows);
    if args.json {
        let v: Value = json!({
            "channels": args.channels,
            "k": args.k,
            "rows": rows.iter().map(|r| json!({
                "side": r.side, "tokens": r.tokens, "best_s": r.best_s, "bra_macs": r.bra, "full_macs": r.full,
            })).collect::<Vec<_>>(),
            "bra_exponent": eb,
            "full_exponent": ef,
        });
        return Ok(format!("{v:#}\n"));
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>8} {:>4} {:>16} {:>18}",
        "side", "tokens", "S", "bra_min", "full"
    );
    for r in &rows {
        let _ = writeln!(
            s,
            "{:>6} {:>8} {:>4} {:>16} {:>18}",
            r.side, r.tokens, r.best_s, r.bra, r.full
        );
    }
    let _ = writeln!(s, "\nexponent bra_min {eb:.3}  full {ef:.3}");
    Ok(s)
}
