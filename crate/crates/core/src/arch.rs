//! Model assembly: directional token ordering, channel attention, the
//! texture-aware scan block, multi-direction blocks, residual groups, and the
//! full restoration model with its pixel-shuffle upsampler.

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamStore};
use crate::scan::{ta_ssm_apply, SsmParamRefs};
use crate::tape::{PadMode, TensorRef};
use crate::tensor::{Scalar, Tensor};
use crate::texture::build_patch_plan;

/// Architecture and scan hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_groups: usize,
    pub depth: usize,
    pub d_model: usize,
    pub n_state: usize,
    pub patch_extent: usize,
    pub top_p: Scalar,
    pub scale: usize,
    pub pad_mode: PadMode,
    /// Channel-attention bottleneck ratio; must divide d_model.
    pub ca_reduction: usize,
    /// Position-table capacity per grid axis; features whose patch grid
    /// exceeds this are rejected.
    pub max_grid: usize,
    pub ln_eps: Scalar,
}

impl ModelConfig {
    /// Reference preset: 7 groups of depth 7.
    pub fn standard() -> Self {
        ModelConfig {
            n_groups: 7,
            depth: 7,
            d_model: 32,
            n_state: 8,
            patch_extent: 4,
            top_p: 0.5,
            scale: 2,
            pad_mode: PadMode::Reflect,
            ca_reduction: 4,
            max_grid: 20,
            ln_eps: 1e-6,
        }
    }

    /// Smaller preset: 6 groups of depth 6.
    pub fn small() -> Self {
        ModelConfig {
            n_groups: 6,
            depth: 6,
            ..Self::standard()
        }
    }

    /// Desk-scale preset that trains in minutes on a CPU.
    pub fn micro() -> Self {
        ModelConfig {
            n_groups: 2,
            depth: 2,
            d_model: 16,
            max_grid: 16,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_groups >= 1
            && self.depth >= 1
            && self.d_model >= 1
            && self.n_state >= 1
            && self.patch_extent >= 1
            && self.max_grid >= 1
            && self.top_p > 0.0
            && self.top_p <= 1.0
            && matches!(self.scale, 1 | 2 | 3 | 4)
            && self.ca_reduction >= 1
            && self.d_model % self.ca_reduction == 0
            && self.ln_eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid model config: {self:?}")));
        }
        Ok(())
    }
}

/// Traversal order for tokens within a rectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    TlHorizontal,
    BrHorizontal,
    TlVertical,
    BrVertical,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::TlHorizontal,
        ScanDirection::BrHorizontal,
        ScanDirection::TlVertical,
        ScanDirection::BrVertical,
    ];
}

/// Visiting order over a rows x cols grid as indices into row-major storage.
pub fn direction_order(rows: usize, cols: usize, dir: ScanDirection) -> Vec<usize> {
    let mut order: Vec<usize> = match dir {
        ScanDirection::TlHorizontal | ScanDirection::BrHorizontal => (0..rows * cols).collect(),
        ScanDirection::TlVertical | ScanDirection::BrVertical => {
            let mut v = Vec::with_capacity(rows * cols);
            for x in 0..cols {
                for y in 0..rows {
                    v.push(y * cols + x);
                }
            }
            v
        }
    };
    if matches!(dir, ScanDirection::BrHorizontal | ScanDirection::BrVertical) {
        order.reverse();
    }
    order
}

/// Inverse permutation: inverse[order[i]] = i.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

fn all_positions(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            v.push((y, x));
        }
    }
    v
}

fn uniform(fan_in: usize) -> Init {
    Init::Uniform {
        bound: 1.0 / (fan_in as Scalar).sqrt(),
    }
}

/// Step-size bias initial value: softplus(bias) = 0.1.
fn delta_bias_init() -> Scalar {
    ((0.1 as Scalar).exp() - 1.0).ln()
}

/// Per-channel sigmoid gate from globally pooled features:
/// out = sigmoid(W2 relu(W1 GAP(x))) broadcast over x.
pub fn channel_attention(
    ctx: &mut Ctx,
    prefix: &str,
    d: usize,
    reduction: usize,
    x: TensorRef,
) -> Result<TensorRef> {
    let dr = d / reduction;
    let w1 = ctx.param(&format!("{prefix}.w1"), &[d, dr], uniform(d))?;
    let w2 = ctx.param(&format!("{prefix}.w2"), &[dr, d], uniform(dr))?;
    let pooled = ctx.tape.global_avg_pool(x)?;
    let h = ctx.tape.linear(pooled, w1, None)?;
    let h = ctx.tape.relu(h)?;
    let o = ctx.tape.linear(h, w2, None)?;
    let gate = ctx.tape.sigmoid(o)?;
    ctx.tape.channel_scale(x, gate)
}

/// The texture-aware scan over one feature map: patch-variance planning,
/// top-p selection, position embedding, directional in-patch traversal, the
/// modulated selective scan, and scatter-back. Unselected patches pass
/// through untouched.
pub fn texture_scan_stage(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorRef,
    dir: ScanDirection,
    top_p: Scalar,
) -> Result<TensorRef> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != cfg.d_model {
        return Err(Error::Shape(format!(
            "scan stage: feature {:?} should be [{}, H, W]",
            shape, cfg.d_model
        )));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let pe = cfg.patch_extent;
    let (nh, nw) = (h.div_ceil(pe) * pe, w.div_ceil(pe) * pe);
    let padded = if (nh, nw) == (h, w) {
        x
    } else {
        ctx.tape.pad_reflect_br(x, nh - h, nw - w)?
    };
    let (gh, gw) = (nh / pe, nw / pe);
    if gh > cfg.max_grid || gw > cfg.max_grid {
        return Err(Error::Config(format!(
            "scan stage: patch grid {gh}x{gw} exceeds position table capacity {}",
            cfg.max_grid
        )));
    }

    let vars = ctx.tape.patch_variances(padded, pe, pe)?;
    let plan = build_patch_plan(
        ctx.tape.value(vars).to_vec(),
        (gh, gw),
        (pe, pe),
        top_p,
    )?;
    let sel: Vec<usize> = plan.selected().to_vec();

    // Normalized per-patch variance: Var / (mean selected Var + 1e-6),
    // differentiated through (selection itself is held fixed).
    let sel_vars = ctx.tape.gather_rows(vars, sel.clone())?;
    let mean_sel = ctx.tape.mean_all(sel_vars)?;
    let denom = ctx.tape.add_const(mean_sel, 1e-6)?;
    let vn_patch = ctx.tape.div(sel_vars, denom)?;

    // Token order: selected patches by descending variance, pixels within a
    // patch along the stage direction.
    let in_patch = direction_order(pe, pe, dir);
    let mut pos = Vec::with_capacity(sel.len() * pe * pe);
    let mut tok_sel = Vec::with_capacity(pos.capacity());
    let mut tok_row = Vec::with_capacity(pos.capacity());
    for (si, &pi) in sel.iter().enumerate() {
        let (gy, gx) = (pi / gw, pi % gw);
        for &j in &in_patch {
            let (dy, dx) = (j / pe, j % pe);
            pos.push((gy * pe + dy, gx * pe + dx));
            tok_sel.push(si);
            // Embedding row is keyed by the original grid slot, not the rank.
            tok_row.push(gy * cfg.max_grid + gx);
        }
    }

    let tokens = ctx.tape.image_to_tokens(padded, pos.clone())?;
    let table = ctx.param(
        &format!("{prefix}.pos"),
        &[cfg.max_grid * cfg.max_grid, d],
        Init::Zeros,
    )?;
    let emb = ctx.tape.gather_rows(table, tok_row)?;
    let tokens = ctx.tape.add(tokens, emb)?;
    let vn_tok = ctx.tape.gather_rows(vn_patch, tok_sel)?;

    let n = cfg.n_state;
    let refs = SsmParamRefs {
        b_w: ctx.param(&format!("{prefix}.b_proj.w"), &[d, n], uniform(d))?,
        b_b: ctx.param(&format!("{prefix}.b_proj.b"), &[n], uniform(d))?,
        c_w: ctx.param(&format!("{prefix}.c_proj.w"), &[d, n], uniform(d))?,
        c_b: ctx.param(&format!("{prefix}.c_proj.b"), &[n], uniform(d))?,
        delta_w: ctx.param(&format!("{prefix}.d_proj.w"), &[d, 1], uniform(d))?,
        delta_bias: ctx.param(
            &format!("{prefix}.d_bias"),
            &[1],
            Init::Const(delta_bias_init()),
        )?,
        a: ctx.param(&format!("{prefix}.a"), &[n], Init::StateDecay)?,
        d: ctx.param(&format!("{prefix}.skip"), &[d], Init::Const(1.0))?,
    };
    let scanned = ta_ssm_apply(&mut ctx.tape, tokens, vn_tok, &refs)?;
    let merged = ctx.tape.scatter_tokens(padded, scanned, pos)?;
    if (nh, nw) == (h, w) {
        Ok(merged)
    } else {
        ctx.tape.crop_tl(merged, h, w)
    }
}

/// One residual scan block: channel projection, depthwise conv, SiLU, the
/// texture-aware scan, LayerNorm, output projection, plus the skip.
pub fn ssm_block(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorRef,
    dir: ScanDirection,
    top_p: Scalar,
) -> Result<TensorRef> {
    let d = cfg.d_model;
    let shape = ctx.tape.shape(x).to_vec();
    let (h, w) = (shape[1], shape[2]);

    let in_k = ctx.param(&format!("{prefix}.in.k"), &[d, d, 1, 1], uniform(d))?;
    let in_b = ctx.param(&format!("{prefix}.in.b"), &[d], uniform(d))?;
    let cur = ctx.tape.conv2d(x, in_k, 1, 0, cfg.pad_mode, 1)?;
    let cur = ctx.tape.channel_bias(cur, in_b)?;

    let dw_k = ctx.param(&format!("{prefix}.dw.k"), &[d, 1, 3, 3], uniform(9))?;
    let cur = ctx.tape.conv2d(cur, dw_k, 1, 1, cfg.pad_mode, d)?;
    let cur = ctx.tape.silu(cur)?;

    let cur = texture_scan_stage(ctx, cfg, prefix, cur, dir, top_p)?;

    let toks = ctx.tape.image_to_tokens(cur, all_positions(h, w))?;
    let ln_g = ctx.param(&format!("{prefix}.ln.g"), &[d], Init::Const(1.0))?;
    let ln_b = ctx.param(&format!("{prefix}.ln.b"), &[d], Init::Zeros)?;
    let toks = ctx.tape.layer_norm(toks, ln_g, ln_b, cfg.ln_eps)?;

    let out_w = ctx.param(&format!("{prefix}.out.w"), &[d, d], uniform(d))?;
    let out_b = ctx.param(&format!("{prefix}.out.b"), &[d], uniform(d))?;
    let toks = ctx.tape.linear(toks, out_w, Some(out_b))?;

    let zeros = ctx.tape.constant(vec![d, h, w], vec![0.0; d * h * w])?;
    let img = ctx.tape.scatter_tokens(zeros, toks, all_positions(h, w))?;
    ctx.tape.add(x, img)
}

/// Sequential chain of up to four directional scan blocks, a full-coverage
/// scan block (top-p forced to 1), and a 3x3 conv for flat-region mixing,
/// wrapped in one residual.
pub fn multi_dir_block(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorRef,
    n_dir_stages: usize,
) -> Result<TensorRef> {
    if n_dir_stages == 0 || n_dir_stages > 4 {
        return Err(Error::Config(format!(
            "multi_dir_block: {n_dir_stages} directional stages outside 1..=4"
        )));
    }
    let mut cur = x;
    for si in 0..n_dir_stages {
        let dir = ScanDirection::ALL[si % 4];
        cur = ssm_block(ctx, cfg, &format!("{prefix}.s{si}"), cur, dir, cfg.top_p)?;
    }
    cur = ssm_block(
        ctx,
        cfg,
        &format!("{prefix}.full"),
        cur,
        ScanDirection::TlHorizontal,
        1.0,
    )?;
    let d = cfg.d_model;
    let flat_k = ctx.param(&format!("{prefix}.flat.k"), &[d, d, 3, 3], uniform(9 * d))?;
    cur = ctx.tape.conv2d(cur, flat_k, 1, 1, cfg.pad_mode, 1)?;
    ctx.tape.add(x, cur)
}

/// Two-branch residual group: conv + channel attention fused with a
/// LayerNorm-fronted stack of scan blocks packed into multi-direction blocks.
/// The group itself has no outer residual; skips live inside the blocks.
pub fn ssm_group(ctx: &mut Ctx, cfg: &ModelConfig, prefix: &str, x: TensorRef) -> Result<TensorRef> {
    let d = cfg.d_model;
    let shape = ctx.tape.shape(x).to_vec();
    let (h, w) = (shape[1], shape[2]);

    let conv_k = ctx.param(&format!("{prefix}.br.conv.k"), &[d, d, 3, 3], uniform(9 * d))?;
    let b1 = ctx.tape.conv2d(x, conv_k, 1, 1, cfg.pad_mode, 1)?;
    let b1 = channel_attention(ctx, &format!("{prefix}.br.ca"), d, cfg.ca_reduction, b1)?;

    let toks = ctx.tape.image_to_tokens(x, all_positions(h, w))?;
    let ln_g = ctx.param(&format!("{prefix}.ln.g"), &[d], Init::Const(1.0))?;
    let ln_b = ctx.param(&format!("{prefix}.ln.b"), &[d], Init::Zeros)?;
    let toks = ctx.tape.layer_norm(toks, ln_g, ln_b, cfg.ln_eps)?;
    let zeros = ctx.tape.constant(vec![d, h, w], vec![0.0; d * h * w])?;
    let mut b2 = ctx.tape.scatter_tokens(zeros, toks, all_positions(h, w))?;

    let mut remaining = cfg.depth;
    let mut mi = 0;
    while remaining > 0 {
        let take = remaining.min(4);
        b2 = multi_dir_block(ctx, cfg, &format!("{prefix}.m{mi}"), b2, take)?;
        remaining -= take;
        mi += 1;
    }
    ctx.tape.add(b1, b2)
}

/// Full model: 3x3 feature extractor, groups with a global residual back to
/// the extracted features, a body conv, and a pixel-shuffle upsampler.
pub fn model_forward(ctx: &mut Ctx, cfg: &ModelConfig, img: TensorRef) -> Result<TensorRef> {
    cfg.validate()?;
    let shape = ctx.tape.shape(img).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "model_forward: input {:?} should be [3, H, W]",
            shape
        )));
    }
    let d = cfg.d_model;
    let head_k = ctx.param("head.k", &[d, 3, 3, 3], uniform(27))?;
    let f0 = ctx.tape.conv2d(img, head_k, 1, 1, cfg.pad_mode, 1)?;

    let mut cur = f0;
    for gi in 0..cfg.n_groups {
        cur = ssm_group(ctx, cfg, &format!("g{gi}"), cur)?;
    }
    let fused = ctx.tape.add(f0, cur)?;

    let body_k = ctx.param("body.k", &[d, d, 3, 3], uniform(9 * d))?;
    let body = ctx.tape.conv2d(fused, body_k, 1, 1, cfg.pad_mode, 1)?;

    match cfg.scale {
        1 => {
            let k = ctx.param("up.k", &[3, d, 3, 3], uniform(9 * d))?;
            ctx.tape.conv2d(body, k, 1, 1, cfg.pad_mode, 1)
        }
        2 => {
            let k = ctx.param("up.k", &[12, d, 3, 3], uniform(9 * d))?;
            let y = ctx.tape.conv2d(body, k, 1, 1, cfg.pad_mode, 1)?;
            ctx.tape.pixel_shuffle(y, 2)
        }
        3 => {
            let k = ctx.param("up.k", &[27, d, 3, 3], uniform(9 * d))?;
            let y = ctx.tape.conv2d(body, k, 1, 1, cfg.pad_mode, 1)?;
            ctx.tape.pixel_shuffle(y, 3)
        }
        4 => {
            let k0 = ctx.param("up0.k", &[4 * d, d, 3, 3], uniform(9 * d))?;
            let y = ctx.tape.conv2d(body, k0, 1, 1, cfg.pad_mode, 1)?;
            let y = ctx.tape.pixel_shuffle(y, 2)?;
            let k1 = ctx.param("up1.k", &[12, d, 3, 3], uniform(9 * d))?;
            let y = ctx.tape.conv2d(y, k1, 1, 1, cfg.pad_mode, 1)?;
            ctx.tape.pixel_shuffle(y, 2)
        }
        s => Err(Error::Config(format!("unsupported scale {s}"))),
    }
}

/// Runs the model without gradient tracking and clamps the output into [0, 1].
pub fn model_infer(store: &mut ParamStore, cfg: &ModelConfig, img: &Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::new(store, false);
    let input = ctx.tape.leaf(img)?;
    let out = model_forward(&mut ctx, cfg, input)?;
    let mut t = ctx.tape.tensor(out);
    t.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(t)
}

/// Materializes every parameter the config implies by running one throwaway
/// forward pass on a tiny zero image. Needed before checkpoint load and
/// before optimizer-state allocation.
pub fn ensure_init(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let side = cfg.patch_extent * cfg.max_grid.min(2);
    let img = Tensor::zeros(vec![3, side, side]);
    let mut ctx = Ctx::new(store, false);
    let input = ctx.tape.leaf(&img)?;
    model_forward(&mut ctx, cfg, input)?;
    Ok(())
}

/// Suffixes of the parameters that close each residual block. Zeroing them
/// makes every scan block and multi-direction block the exact identity.
pub const OUTPUT_PROJECTION_SUFFIXES: [&str; 3] = [".out.w", ".out.b", ".flat.k"];

pub fn zero_output_projections(store: &mut ParamStore) -> usize {
    store.zero_matching(&OUTPUT_PROJECTION_SUFFIXES)
}
