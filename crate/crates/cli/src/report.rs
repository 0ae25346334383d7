//! `report`: parameter and MAC accounting against the published sizes.

use std::fmt::Write as _;
use std::path::PathBuf;

use brau_net::config::ModelConfig;
use brau_net::model::{totals, ModuleCount, Network};
use brau_net::params::ParamStore;
use clap::Args;
use serde_json::{json, Value};

use crate::Result;

/// Published totals in millions: full model, without gated skip fusion, tiny.
pub const PARAMS_M: [f64; 3] = [50.76, 31.40, 22.64];
pub const PARAM_TOL: f64 = 0.05;
/// Published MACs at 256×256, in G.
pub const MACS_256_G: f64 = 22.45;
pub const MAC_TOL: f64 = 0.20;

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Input side for the MAC column; defaults to `input_hw`.
    #[arg(long)]
    pub hw: Option<usize>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub target: f64,
    pub tol: f64,
}

impl Check {
    pub fn rel(&self) -> f64 {
        (self.measured - self.target) / self.target
    }

    pub fn passed(&self) -> bool {
        self.rel().abs() <= self.tol
    }

    fn line(&self, unit: &str) -> String {
        format!(
            "{:<24} {:>9.2}{unit} vs {:>6.2}{unit}  {:+6.1}%  {}",
            self.name,
            self.measured,
            self.target,
            100.0 * self.rel(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }

    fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "measured": self.measured,
            "target": self.target,
            "rel": self.rel(),
            "pass": self.passed(),
        })
    }
}

/// Rows of the per-module report; weights are built but never run.
pub fn module_rows(cfg: &ModelConfig, hw: usize) -> Result<Vec<ModuleCount>> {
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    let net = Network::build(cfg, &mut store);
    Ok(net.report(hw, hw)?)
}

pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(totals(&module_rows(cfg, cfg.input_hw)?).0)
}

/// The full model, its plain-fusion twin and the 64-channel variant of `cfg`.
pub fn variants(cfg: &ModelConfig) -> [(&'static str, ModelConfig); 3] {
    [
        ("params", cfg.clone()),
        (
            "params_no_sccsa",
            ModelConfig {
                sccsa_enabled: false,
                ..cfg.clone()
            },
        ),
        (
            "params_tiny",
            ModelConfig {
                base_channels: 64,
                ..cfg.clone()
            },
        ),
    ]
}

pub fn param_checks(cfg: &ModelConfig) -> Result<Vec<Check>> {
    variants(cfg)
        .into_iter()
        .zip(PARAMS_M)
        .map(|((name, c), target)| {
            Ok(Check {
                name: name.into(),
                measured: param_count(&c)? as f64 / 1e6,
                target,
                tol: PARAM_TOL,
            })
        })
        .collect()
}

/// MACs of `cfg` on a 256×256 input with an 8×8 region grid.
pub fn mac_check(cfg: &ModelConfig) -> Result<Check> {
    let c = ModelConfig {
        input_hw: 256,
        partition: 8,
        ..cfg.clone()
    };
    Ok(Check {
        name: "macs_256".into(),
        measured: totals(&module_rows(&c, 256)?).1 as f64 / 1e9,
        target: MACS_256_G,
        tol: MAC_TOL,
    })
}

/// Parameter totals with no bottleneck blocks, in millions.
pub fn shallow_bottleneck(cfg: &ModelConfig) -> Result<Vec<(&'static str, f64)>> {
    let mut c = cfg.clone();
    c.stage_depths[3] = 0;
    variants(&c)
        .into_iter()
        .map(|(name, v)| Ok((name, param_count(&v)? as f64 / 1e6)))
        .collect()
}

pub struct Report {
    pub hw: usize,
    pub rows: Vec<ModuleCount>,
    pub checks: Vec<Check>,
    pub shallow: Vec<(&'static str, f64)>,
}

pub fn build(cfg: &ModelConfig, hw: usize) -> Result<Report> {
    let rows = module_rows(cfg, hw)?;
    let mut checks = param_checks(cfg)?;
    checks.push(mac_check(cfg)?);
    Ok(Report {
        hw,
        rows,
        checks,
        shallow: shallow_bottleneck(cfg)?,
    })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>12} {:>16}",
            "module",
            "params",
            format!("MACs@{}", self.hw)
        );
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>12} {:>16}", r.name, r.params, r.macs);
        }
        let (p, m) = totals(&self.rows);
        let _ = writeln!(s, "{:<24} {:>12} {:>16}", "total", p, m);
        let _ = writeln!(
            s,
            "\n{:.2}M params, {:.2}G MACs ({:.2}G FLOPs at 2 per MAC)\n",
            p as f64 / 1e6,
            m as f64 / 1e9,
            2.0 * m as f64 / 1e9
        );
        for c in &self.checks {
            let unit = if c.name.starts_with("macs") { "G" } else { "M" };
            let _ = writeln!(s, "{}", c.line(unit));
        }
        let _ = writeln!(s, "\nwithout bottleneck blocks:");
        for (name, v) in &self.shallow {
            let _ = writeln!(s, "{name:<24} {v:>9.2}M");
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let (p, m) = totals(&self.rows);
        json!({
            "hw": self.hw,
            "modules": self.rows.iter().map(|r| json!({"name": r.name, "params": r.params, "macs": r.macs})).collect::<Vec<_>>(),
            "params": p,
            "macs": m,
            "checks": self.checks.iter().map(Check::to_json).collect::<Vec<_>>(),
            "no_bottleneck_blocks": self.shallow.iter().map(|(n, v)| json!({"name": n, "params_m": v})).collect::<Vec<_>>(),
        })
    }
}

pub fn report(args: &ReportArgs) -> Result<String> {
    let cfg = crate::load_config(args.config.as_deref(), &args.sets)?;
    let r = build(&cfg.model, args.hw.unwrap_or(cfg.model.input_hw))?;
    Ok(if args.json {
        format!("{:#}\n", r.to_json())
    } else {
        r.to_text()
    })
}
