//! `dump-attention`: routed regions and token attention for one query pixel.

use std::fmt::Write as _;
use std::path::PathBuf;

use brau_net::config::ModelConfig;
use brau_net::nn::Ctx;
use brau_net::pnm::{self, Image};
use brau_net::Model;
use brau_tensor::{Tape, Tensor};
use clap::Args;
use serde_json::json;

use crate::run::{load_input, load_model};
use crate::{create_dir, write_file, CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Network stage, 1 to 7 from the first encoder stage to the last decoder stage.
    #[arg(long, default_value_t = 3)]
    pub stage: usize,
    /// Block index within the stage, or `last`.
    #[arg(long, default_value = "last")]
    pub block: String,
    /// Query pixel in input coordinates; defaults to the centre.
    #[arg(long)]
    pub row: Option<usize>,
    #[arg(long)]
    pub col: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Head-averaged attention of one query token over its stage's feature map.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub h: usize,
    pub w: usize,
    pub s: usize,
    pub query: (usize, usize),
    pub query_region: usize,
    pub routed: Vec<usize>,
    /// Row-major `h`×`w`; zero outside the routed regions.
    pub weights: Vec<f64>,
}

impl AttentionDump {
    pub fn region_of(&self, y: usize, x: usize) -> usize {
        (y / (self.h / self.s)) * self.s + x / (self.w / self.s)
    }
}

fn block_index(cfg: &ModelConfig, stage: usize, block: &str) -> Result<usize> {
    let depth = cfg.stage_depths[stage];
    if depth == 0 {
        return Err(CliError::Usage(format!(
            "stage {} has no blocks",
            stage + 1
        )));
    }
    let b = match block {
        "last" => depth - 1,
        s => s.parse().map_err(|_| {
            CliError::Usage(format!("--block expects an index or `last`, got `{s}`"))
        })?,
    };
    if b >= depth {
        return Err(CliError::Usage(format!(
            "stage {} has {depth} blocks",
            stage + 1
        )));
    }
    Ok(b)
}

/// Runs `model` on `x` (`[1,H,W,C]`) and collects attention for the query
/// at input pixel `(row, col)` in block `block` of stage `stage` (0-based).
pub fn capture(
    model: &Model<f32>,
    x: &Tensor<f32>,
    stage: usize,
    block: usize,
    row: usize,
    col: usize,
) -> Result<AttentionDump> {
    let (hh, ww) = (x.dim(1), x.dim(2));
    if row >= hh || col >= ww {
        return Err(CliError::Usage(format!(
            "query ({row}, {col}) outside a {hh}x{ww} image"
        )));
    }
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &model.params, false).with_capture(stage, block);
    model.net.forward(&ctx, &tape.constant(x.clone()))?;
    let cap = ctx.take_capture().ok_or_else(|| {
        CliError::Usage(format!(
            "no attention captured at stage {} block {block}",
            stage + 1
        ))
    })?;
    let spec = cap.spec;
    let stride = ModelConfig::stage_strides()[stage];
    let (fy, fx) = (row / stride, col / stride);
    let (r, t) = spec.locate(fy, fx);
    let (k, tokens, heads) = (cap.k, spec.tokens(), cap.heads);
    let routed = cap.index[r * k..(r + 1) * k].to_vec();
    let (rh, rw) = (spec.region_h(), spec.region_w());
    let mut weights = vec![0.0; spec.h * spec.w];
    for (j, &g) in routed.iter().enumerate() {
        for u in 0..tokens {
            let mean = (0..heads)
                .map(|h| cap.attn.at(&[r, h, t, j * tokens + u]) as f64)
                .sum::<f64>()
                / heads as f64;
            let y = (g / spec.s) * rh + u / rw;
            let x = (g % spec.s) * rw + u % rw;
            weights[y * spec.w + x] += mean;
        }
    }
    Ok(AttentionDump {
        h: spec.h,
        w: spec.w,
        s: spec.s,
        query: (fy, fx),
        query_region: r,
        routed,
        weights,
    })
}

/// Writes regions.pgm, heatmap.pgm, attention.txt and routing.json.
pub fn dump(args: &DumpArgs) -> Result<AttentionDump> {
    let (_, model) = load_model(&args.checkpoint)?;
    let x = load_input(&args.image, &model)?;
    if !(1..=7).contains(&args.stage) {
        return Err(CliError::Usage("--stage must lie in 1..=7".into()));
    }
    let stage = args.stage - 1;
    let block = block_index(model.cfg(), stage, &args.block)?;
    let row = args.row.unwrap_or(x.dim(1) / 2);
    let col = args.col.unwrap_or(x.dim(2) / 2);
    let d = capture(&model, &x, stage, block, row, col)?;

    create_dir(&args.out)?;
    let regions = (0..d.h * d.w)
        .map(|i| {
            if d.routed.contains(&d.region_of(i / d.w, i % d.w)) {
                255
            } else {
                0
            }
        })
        .collect();
    pnm::write(
        &args.out.join("regions.pgm"),
        &Image::gray(d.w, d.h, regions),
    )?;
    let peak = d.weights.iter().cloned().fold(0.0, f64::max);
    let heat = d
        .weights
        .iter()
        .map(|&v| {
            if peak > 0.0 {
                (v / peak * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    pnm::write(&args.out.join("heatmap.pgm"), &Image::gray(d.w, d.h, heat))?;
    let mut txt = String::new();
    for row in d.weights.chunks(d.w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(txt, "{}", line.join(" "));
    }
    write_file(&args.out.join("attention.txt"), txt)?;
    let meta = json!({
        "stage": args.stage,
        "block": block,
        "query_pixel": [row, col],
        "query_token": [d.query.0, d.query.1],
        "map": [d.h, d.w],
        "S": d.s,
        "query_region": d.query_region,
        "routed": d.routed,
    });
    write_file(&args.out.join("routing.json"), format!("{meta:#}\n"))?;
    Ok(d)
}
