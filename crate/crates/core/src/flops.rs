//! Analytic floating-point operation accountant for one model forward pass.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs; exp, log, div, and sqrt
//! are 4 each; comparisons, permutations (pixel shuffle, gathers, scatters)
//! and the selection sort are 0. The `block.scan` component covers the
//! selected token stream of the direction stages only (projections,
//! modulation, discretization, recurrence, position add) and is strictly
//! proportional to the selected token count. The always-full-coverage
//! stages report under `block.scan_full`, and planning costs over the full
//! patch grid under `block.plan` / `block.plan_full`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::arch::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Default benchmark input side: an 80x80 input with 4-pixel patches gives
/// a 20x20 grid, so quarter selection is exactly 100 patches.
pub const BENCH_SIDE: usize = 80;

const DIV: u128 = 4;
const EXP: u128 = 4;
const SQRT: u128 = 4;
const SIGMOID: u128 = EXP + 1 + DIV;
const SOFTPLUS: u128 = EXP + 1 + EXP + 1; // exp, +1, ln, guard add
const SILU: u128 = SIGMOID + 1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub h: usize,
    pub w: usize,
    pub components: BTreeMap<String, u128>,
}

impl FlopsReport {
    pub fn get(&self, key: &str) -> u128 {
        self.components.get(key).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u128 {
        self.components.values().sum()
    }

    fn add(&mut self, key: &str, n: u128) {
        *self.components.entry(key.to_string()).or_insert(0) += n;
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = String::from("component,flops\n");
        for (k, v) in &self.components {
            buf.push_str(&format!("{k},{v}\n"));
        }
        buf.push_str(&format!("total,{}\n", self.total()));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// 2 * (cin/groups) * kh * kw per output element, plus one add per output
/// element when biased.
fn conv2d_flops(
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    bias: bool,
) -> u128 {
    let per_out = 2 * (cin / groups) as u128 * kh as u128 * kw as u128 + u128::from(bias);
    per_out * cout as u128 * oh as u128 * ow as u128
}

fn linear_flops(rows: usize, din: usize, dout: usize, bias: bool) -> u128 {
    rows as u128 * dout as u128 * (2 * din as u128 + u128::from(bias))
}

/// Per row of width d: mean, centered variance, rsqrt, then a fused
/// scale-and-shift per element.
fn layer_norm_flops(rows: usize, d: usize) -> u128 {
    rows as u128 * (8 * d as u128 + 2 * DIV + SQRT + 2)
}

fn ssm_block_flops(
    r: &mut FlopsReport,
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    top_p: Scalar,
    scan_key: &str,
    plan_key: &str,
) {
    let d = cfg.d_model;
    let n = cfg.n_state;
    let pe = cfg.patch_extent;
    let dhw = (d * h * w) as u128;

    r.add("block.in_proj", conv2d_flops(d, d, 1, 1, h, w, 1, true));
    r.add("block.dw_conv", conv2d_flops(d, d, 3, 3, h, w, d, false));
    r.add("block.silu", SILU * dhw);

    let (hp, wp) = (h.div_ceil(pe) * pe, w.div_ceil(pe) * pe);
    let n_patches = (hp / pe) * (wp / pe);
    let sel = crate::texture::selected_count(top_p, n_patches);
    let l = sel * pe * pe;

    // Per patch: accumulate mean over d*pe^2 values, then squared
    // deviations, then one division each for mean and variance; per
    // selected patch one normalizing division plus its share of the mean.
    let patch_elems = (d * pe * pe) as u128;
    r.add(
        plan_key,
        n_patches as u128 * (4 * patch_elems + 2 * DIV) + sel as u128 * (1 + DIV) + DIV + 1,
    );

    // Strictly linear in the selected token count L:
    //   B/C/Delta projections, variance gating, softplus, discretization
    //   of a-bar and b-bar, the state recurrence, and the position add.
    let per_token = (4 * d as u128 * n as u128 + 2 * n as u128)   // B, C projections
        + (2 * d as u128 + 1)                                     // Delta projection
        + n as u128 + 2 + SOFTPLUS                                // gating + bias + softplus
        + (1 + EXP) * n as u128                                   // a-bar
        + (2 + EXP + DIV + 1) * n as u128                         // b-bar
        + (6 * d as u128 * n as u128 + 2 * d as u128)             // recurrence + skip
        + d as u128; // position embedding add
    r.add(scan_key, l as u128 * per_token);

    r.add("block.layer_norm", layer_norm_flops(h * w, d));
    r.add("block.out_proj", linear_flops(h * w, d, d, true));
    r.add("block.residual", dhw);
}

fn channel_attention_flops(r: &mut FlopsReport, d: usize, reduction: usize, h: usize, w: usize) {
    let dr = d / reduction;
    let mut f = (d * h * w) as u128 + d as u128 * DIV; // global average pool
    f += linear_flops(1, d, dr, false) + dr as u128; // hidden + relu
    f += linear_flops(1, dr, d, false) + d as u128 * SIGMOID;
    f += (d * h * w) as u128; // gate multiply
    r.add("group.channel_attention", f);
}

/// FLOPs for one forward pass of the model on a [3, h, w] input.
pub fn model_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("model_flops: empty input".into()));
    }
    let pe = cfg.patch_extent;
    if h.div_ceil(pe) > cfg.max_grid || w.div_ceil(pe) > cfg.max_grid {
        return Err(Error::Config(format!(
            "model_flops: {h}x{w} input exceeds position table capacity {}",
            cfg.max_grid
        )));
    }
    let d = cfg.d_model;
    let mut r = FlopsReport {
        h,
        w,
        components: BTreeMap::new(),
    };
    r.add("head.conv", conv2d_flops(3, d, 3, 3, h, w, 1, false));

    for _ in 0..cfg.n_groups {
        r.add("group.branch_conv", conv2d_flops(d, d, 3, 3, h, w, 1, false));
        channel_attention_flops(&mut r, d, cfg.ca_reduction, h, w);
        r.add("group.layer_norm", layer_norm_flops(h * w, d));

        let mut remaining = cfg.depth;
        while remaining > 0 {
            let take = remaining.min(4);
            for _ in 0..take {
                ssm_block_flops(&mut r, cfg, h, w, cfg.top_p, "block.scan", "block.plan");
            }
            ssm_block_flops(&mut r, cfg, h, w, 1.0, "block.scan_full", "block.plan_full");
            r.add("block.flat_conv", conv2d_flops(d, d, 3, 3, h, w, 1, false));
            r.add("block.residual", (d * h * w) as u128);
            remaining -= take;
        }
        r.add("group.fuse", (d * h * w) as u128);
    }
    r.add("model.global_residual", (d * h * w) as u128);
    r.add("body.conv", conv2d_flops(d, d, 3, 3, h, w, 1, false));

    match cfg.scale {
        1 => r.add("up.conv", conv2d_flops(d, 3, 3, 3, h, w, 1, false)),
        2 => r.add("up.conv", conv2d_flops(d, 12, 3, 3, h, w, 1, false)),
        3 => r.add("up.conv", conv2d_flops(d, 27, 3, 3, h, w, 1, false)),
        4 => {
            r.add("up.conv", conv2d_flops(d, 4 * d, 3, 3, h, w, 1, false));
            r.add(
                "up.conv",
                conv2d_flops(d, 12, 3, 3, 2 * h, 2 * w, 1, false),
            );
        }
        _ => unreachable!("validated"),
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(top_p: Scalar) -> ModelConfig {
        ModelConfig {
            top_p,
            ..ModelConfig::standard()
        }
    }

    #[test]
    fn conv_and_linear_formulas() {
        // 3->2 channels, 3x3 kernel, 4x4 output: 2*3*9 = 54 per output
        // element, 32 output elements.
        assert_eq!(conv2d_flops(3, 2, 3, 3, 4, 4, 1, false), 54 * 32);
        assert_eq!(conv2d_flops(3, 2, 3, 3, 4, 4, 1, true), 55 * 32);
        // Depthwise: cin/groups = 1.
        assert_eq!(conv2d_flops(8, 8, 3, 3, 2, 2, 8, false), 18 * 8 * 4);
        assert_eq!(linear_flops(5, 4, 3, true), 5 * 3 * 9);
    }

    #[test]
    fn head_conv_matches_hand_count() {
        let c = cfg(0.5);
        let r = model_flops(&c, 16, 16).unwrap();
        assert_eq!(r.get("head.conv"), 2 * 3 * 9 * 32 * 16 * 16);
    }

    #[test]
    fn scan_cost_is_exactly_linear_in_selection() {
        let full = model_flops(&cfg(1.0), BENCH_SIDE, BENCH_SIDE).unwrap();
        let quarter = model_flops(&cfg(0.25), BENCH_SIDE, BENCH_SIDE).unwrap();
        let ratio = full.get("block.scan") as f64 / quarter.get("block.scan") as f64;
        assert_eq!(ratio, 4.0);

        // Per-token cost is the same constant at every selection level, and
        // the full-coverage stages are untouched by top_p.
        let n_patches = (BENCH_SIDE / 4) * (BENCH_SIDE / 4);
        let mut per_token = None;
        let mut full_cost = None;
        for p in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let r = model_flops(&cfg(p), BENCH_SIDE, BENCH_SIDE).unwrap();
            let l = crate::texture::selected_count(p, n_patches) * 16;
            let blocks = 7 * 7; // groups * directional stages
            let per = r.get("block.scan") / (l as u128 * blocks as u128);
            match per_token {
                None => per_token = Some(per),
                Some(prev) => assert_eq!(per, prev),
            }
            assert_eq!(r.get("block.scan") % (l as u128 * blocks as u128), 0);
            match full_cost {
                None => full_cost = Some(r.get("block.scan_full")),
                Some(prev) => assert_eq!(r.get("block.scan_full"), prev),
            }
        }
    }

    #[test]
    fn planning_cost_is_dominated_by_the_fixed_grid() {
        let full = model_flops(&cfg(1.0), BENCH_SIDE, BENCH_SIDE).unwrap();
        let quarter = model_flops(&cfg(0.25), BENCH_SIDE, BENCH_SIDE).unwrap();
        assert!(full.get("block.plan") > quarter.get("block.plan"));
        let ratio = full.get("block.plan") as f64 / quarter.get("block.plan") as f64;
        assert!(ratio < 1.01, "plan should be nearly selection-free: {ratio}");
    }

    #[test]
    fn totals_and_geometry_checks() {
        let c = cfg(0.5);
        let r = model_flops(&c, 64, 64).unwrap();
        assert_eq!(r.total(), r.components.values().sum::<u128>());
        assert!(r.get("block.scan") > 0);
        assert!(model_flops(&c, 0, 4).is_err());
        // 20 * 4 = 80 is the largest side the standard table accepts.
        assert!(model_flops(&c, 84, 84).is_err());
        let bad = ModelConfig {
            top_p: 0.0,
            ..ModelConfig::standard()
        };
        assert!(model_flops(&bad, 16, 16).is_err());
    }

    #[test]
    fn csv_lists_components_and_total() {
        let r = model_flops(&cfg(0.5), 16, 16).unwrap();
        let path = std::env::temp_dir().join(format!("tamb-flops-{}.csv", std::process::id()));
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("component,flops\n"));
        assert!(text.contains("block.scan,"));
        let last = text.lines().last().unwrap();
        assert!(last.starts_with(&format!("total,{}", r.total())));
        std::fs::remove_file(&path).ok();
    }
}
