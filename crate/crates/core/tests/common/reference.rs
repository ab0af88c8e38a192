//! Straight-line reimplementation of the model forward pass in plain loops,
//! reading weights from the parameter store by name. No tape, no shared
//! numeric code: this is the oracle the graph-built forward is checked
//! against.

use tamir_core::arch::{ModelConfig, ScanDirection};
use tamir_core::params::ParamStore;
use tamir_core::tensor::{Scalar, Tensor};

fn p<'s>(store: &'s ParamStore, name: &str) -> &'s Tensor {
    store
        .get(name)
        .unwrap_or_else(|| panic!("reference: parameter `{name}` missing"))
}

fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: Scalar) -> Scalar {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    i as usize
}

/// Grouped 2D convolution, stride 1, optional reflect-101 padding.
fn conv2d(
    x: &[Scalar],
    (c_in, h, w): (usize, usize, usize),
    k: &[Scalar],
    (c_out, ck, kh, kw): (usize, usize, usize, usize),
    pad: usize,
    reflect: bool,
    groups: usize,
) -> Vec<Scalar> {
    assert_eq!(c_in / groups, ck);
    let per_out = c_out / groups;
    let mut out = vec![0.0; c_out * h * w];
    for g in 0..groups {
        for co in 0..per_out {
            let oc = g * per_out + co;
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..ck {
                        let ic = g * ck + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                let v = if reflect {
                                    x[(ic * h + reflect101(sy, h)) * w + reflect101(sx, w)]
                                } else if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    0.0
                                } else {
                                    x[(ic * h + sy as usize) * w + sx as usize]
                                };
                                s += v * k[((oc * ck + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(oc * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

/// y = x W + b with W stored [d_in, d_out].
fn linear(x: &[Scalar], rows: usize, d_in: usize, w: &[Scalar], d_out: usize, b: Option<&[Scalar]>) -> Vec<Scalar> {
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..d_in {
                s += x[r * d_in + i] * w[i * d_out + o];
            }
            out[r * d_out + o] = s;
        }
    }
    out
}

fn layer_norm(x: &[Scalar], rows: usize, d: usize, g: &[Scalar], b: &[Scalar], eps: Scalar) -> Vec<Scalar> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<Scalar>() / d as Scalar;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * inv * g[i] + b[i];
        }
    }
    out
}

fn in_patch_order(pe: usize, dir: ScanDirection) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = match dir {
        ScanDirection::TlHorizontal | ScanDirection::BrHorizontal => {
            (0..pe * pe).map(|i| (i / pe, i % pe)).collect()
        }
        ScanDirection::TlVertical | ScanDirection::BrVertical => {
            (0..pe * pe).map(|i| (i % pe, i / pe)).collect()
        }
    };
    if matches!(dir, ScanDirection::BrHorizontal | ScanDirection::BrVertical) {
        order.reverse();
    }
    order
}

/// The texture-aware scan stage: plan, select, embed, scan, scatter.
fn scan_stage(
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: &[Scalar],
    (d, h, w): (usize, usize, usize),
    dir: ScanDirection,
    top_p: Scalar,
) -> Vec<Scalar> {
    let pe = cfg.patch_extent;
    let (hp, wp) = (h.div_ceil(pe) * pe, w.div_ceil(pe) * pe);
    let sample = |c: usize, y: usize, xx: usize| -> Scalar {
        x[(c * h + reflect101(y as isize, h)) * w + reflect101(xx as isize, w)]
    };
    let mut padded = vec![0.0; d * hp * wp];
    for c in 0..d {
        for y in 0..hp {
            for xx in 0..wp {
                padded[(c * hp + y) * wp + xx] = sample(c, y, xx);
            }
        }
    }
    let (gh, gw) = (hp / pe, wp / pe);
    let n_patches = gh * gw;

    let mut vars = vec![0.0; n_patches];
    for pi in 0..n_patches {
        let (gy, gx) = (pi / gw, pi % gw);
        let mut vals = Vec::with_capacity(d * pe * pe);
        for c in 0..d {
            for dy in 0..pe {
                for dx in 0..pe {
                    vals.push(padded[(c * hp + gy * pe + dy) * wp + gx * pe + dx]);
                }
            }
        }
        let mean = vals.iter().sum::<Scalar>() / vals.len() as Scalar;
        vars[pi] = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>()
            / vals.len() as Scalar;
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.sort_by(|&i, &j| {
        vars[j]
            .partial_cmp(&vars[i])
            .expect("finite variances")
            .then(i.cmp(&j))
    });
    let n_sel = ((top_p * n_patches as Scalar).ceil() as usize).clamp(1, n_patches);
    let sel = &order[..n_sel];
    let mean_sel = sel.iter().map(|&i| vars[i]).sum::<Scalar>() / n_sel as Scalar;
    let vn: Vec<Scalar> = sel.iter().map(|&i| vars[i] / (mean_sel + 1e-6)).collect();

    let table = p(store, &format!("{prefix}.pos"));
    let bw = p(store, &format!("{prefix}.b_proj.w"));
    let bb = p(store, &format!("{prefix}.b_proj.b"));
    let cw = p(store, &format!("{prefix}.c_proj.w"));
    let cb = p(store, &format!("{prefix}.c_proj.b"));
    let dw = p(store, &format!("{prefix}.d_proj.w"));
    let dbias = p(store, &format!("{prefix}.d_bias")).data[0];
    let a = p(store, &format!("{prefix}.a"));
    let skip = p(store, &format!("{prefix}.skip"));
    let n = cfg.n_state;

    // Token stream: selected patches in plan order, pixels along the
    // direction, each token offset by its grid slot's embedding row.
    let offsets = in_patch_order(pe, dir);
    let mut tokens: Vec<Vec<Scalar>> = Vec::new();
    let mut positions: Vec<(usize, usize)> = Vec::new();
    let mut tok_vn: Vec<Scalar> = Vec::new();
    for (si, &pi) in sel.iter().enumerate() {
        let (gy, gx) = (pi / gw, pi % gw);
        let row = (gy * cfg.max_grid + gx) * d;
        for &(dy, dx) in &offsets {
            let (y, xx) = (gy * pe + dy, gx * pe + dx);
            let tok: Vec<Scalar> = (0..d)
                .map(|c| padded[(c * hp + y) * wp + xx] + table.data[row + c])
                .collect();
            tokens.push(tok);
            positions.push((y, xx));
            tok_vn.push(vn[si]);
        }
    }

    // Per-token SSM inputs, then the shared-state recurrence per channel.
    let l = tokens.len();
    let mut out_tokens = vec![vec![0.0; d]; l];
    let mut hstate = vec![vec![0.0; n]; d];
    for k in 0..l {
        let tok = &tokens[k];
        let vnk = tok_vn[k];
        let bvec: Vec<Scalar> = (0..n)
            .map(|s| {
                let mut acc = bb.data[s];
                for c in 0..d {
                    acc += tok[c] * bw.data[c * n + s];
                }
                vnk * acc
            })
            .collect();
        let cvec: Vec<Scalar> = (0..n)
            .map(|s| {
                let mut acc = cb.data[s];
                for c in 0..d {
                    acc += tok[c] * cw.data[c * n + s];
                }
                acc
            })
            .collect();
        let mut draw = 0.0;
        for c in 0..d {
            draw += tok[c] * dw.data[c];
        }
        let delta = softplus(vnk * draw + dbias);
        for c in 0..d {
            let mut y = skip.data[c] * tok[c];
            for s in 0..n {
                let da = delta * a.data[s];
                let abar = da.exp();
                let bbar = if a.data[s].abs() <= 1e-8 {
                    delta * bvec[s] * (1.0 + da / 2.0)
                } else {
                    (abar - 1.0) / a.data[s] * bvec[s]
                };
                hstate[c][s] = abar * hstate[c][s] + bbar * tok[c];
                y += cvec[s] * hstate[c][s];
            }
            out_tokens[k][c] = y;
        }
    }

    let mut merged = padded;
    for (k, &(y, xx)) in positions.iter().enumerate() {
        for c in 0..d {
            merged[(c * hp + y) * wp + xx] = out_tokens[k][c];
        }
    }
    if (hp, wp) == (h, w) {
        merged
    } else {
        let mut out = vec![0.0; d * h * w];
        for c in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    out[(c * h + y) * w + xx] = merged[(c * hp + y) * wp + xx];
                }
            }
        }
        out
    }
}

pub fn ssm_block(
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: &[Scalar],
    (d, h, w): (usize, usize, usize),
    dir: ScanDirection,
    top_p: Scalar,
) -> Vec<Scalar> {
    let reflect = matches!(cfg.pad_mode, tamir_core::tape::PadMode::Reflect);
    let ink = p(store, &format!("{prefix}.in.k"));
    let inb = p(store, &format!("{prefix}.in.b"));
    let mut cur = conv2d(x, (d, h, w), &ink.data, (d, d, 1, 1), 0, reflect, 1);
    for c in 0..d {
        for i in 0..h * w {
            cur[c * h * w + i] += inb.data[c];
        }
    }
    let dwk = p(store, &format!("{prefix}.dw.k"));
    let cur = conv2d(&cur, (d, h, w), &dwk.data, (d, 1, 3, 3), 1, reflect, d);
    let cur: Vec<Scalar> = cur.iter().map(|&v| v * sigmoid(v)).collect();

    let cur = scan_stage(store, cfg, prefix, &cur, (d, h, w), dir, top_p);

    // Tokens in row-major order, LayerNorm, output projection.
    let mut toks = vec![0.0; h * w * d];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..d {
                toks[(y * w + xx) * d + c] = cur[(c * h + y) * w + xx];
            }
        }
    }
    let lg = p(store, &format!("{prefix}.ln.g"));
    let lb = p(store, &format!("{prefix}.ln.b"));
    let toks = layer_norm(&toks, h * w, d, &lg.data, &lb.data, cfg.ln_eps);
    let ow = p(store, &format!("{prefix}.out.w"));
    let ob = p(store, &format!("{prefix}.out.b"));
    let toks = linear(&toks, h * w, d, &ow.data, d, Some(&ob.data));

    let mut out = vec![0.0; d * h * w];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..d {
                out[(c * h + y) * w + xx] = x[(c * h + y) * w + xx] + toks[(y * w + xx) * d + c];
            }
        }
    }
    out
}

pub fn multi_dir_block(
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: &[Scalar],
    dims: (usize, usize, usize),
    n_dir: usize,
) -> Vec<Scalar> {
    const DIRS: [ScanDirection; 4] = [
        ScanDirection::TlHorizontal,
        ScanDirection::BrHorizontal,
        ScanDirection::TlVertical,
        ScanDirection::BrVertical,
    ];
    let reflect = matches!(cfg.pad_mode, tamir_core::tape::PadMode::Reflect);
    let (d, h, w) = dims;
    let mut cur = x.to_vec();
    for si in 0..n_dir {
        cur = ssm_block(
            store,
            cfg,
            &format!("{prefix}.s{si}"),
            &cur,
            dims,
            DIRS[si % 4],
            cfg.top_p,
        );
    }
    cur = ssm_block(
        store,
        cfg,
        &format!("{prefix}.full"),
        &cur,
        dims,
        ScanDirection::TlHorizontal,
        1.0,
    );
    let fk = p(store, &format!("{prefix}.flat.k"));
    let cur = conv2d(&cur, (d, h, w), &fk.data, (d, d, 3, 3), 1, reflect, 1);
    cur.iter().zip(x).map(|(a, b)| a + b).collect()
}

fn channel_attention(
    store: &ParamStore,
    prefix: &str,
    x: &[Scalar],
    (d, h, w): (usize, usize, usize),
    reduction: usize,
) -> Vec<Scalar> {
    let dr = d / reduction;
    let w1 = p(store, &format!("{prefix}.w1"));
    let w2 = p(store, &format!("{prefix}.w2"));
    let gap: Vec<Scalar> = (0..d)
        .map(|c| x[c * h * w..(c + 1) * h * w].iter().sum::<Scalar>() / (h * w) as Scalar)
        .collect();
    let hid = linear(&gap, 1, d, &w1.data, dr, None);
    let hid: Vec<Scalar> = hid.iter().map(|&v| v.max(0.0)).collect();
    let gate = linear(&hid, 1, dr, &w2.data, d, None);
    let mut out = x.to_vec();
    for c in 0..d {
        let g = sigmoid(gate[c]);
        for v in out[c * h * w..(c + 1) * h * w].iter_mut() {
            *v *= g;
        }
    }
    out
}

pub fn ssm_group(
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: &[Scalar],
    dims: (usize, usize, usize),
) -> Vec<Scalar> {
    let reflect = matches!(cfg.pad_mode, tamir_core::tape::PadMode::Reflect);
    let (d, h, w) = dims;
    let ck = p(store, &format!("{prefix}.br.conv.k"));
    let b1 = conv2d(x, dims, &ck.data, (d, d, 3, 3), 1, reflect, 1);
    let b1 = channel_attention(store, &format!("{prefix}.br.ca"), &b1, dims, cfg.ca_reduction);

    let mut toks = vec![0.0; h * w * d];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..d {
                toks[(y * w + xx) * d + c] = x[(c * h + y) * w + xx];
            }
        }
    }
    let lg = p(store, &format!("{prefix}.ln.g"));
    let lb = p(store, &format!("{prefix}.ln.b"));
    let toks = layer_norm(&toks, h * w, d, &lg.data, &lb.data, cfg.ln_eps);
    let mut b2 = vec![0.0; d * h * w];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..d {
                b2[(c * h + y) * w + xx] = toks[(y * w + xx) * d + c];
            }
        }
    }

    let mut remaining = cfg.depth;
    let mut mi = 0;
    while remaining > 0 {
        let take = remaining.min(4);
        b2 = multi_dir_block(store, cfg, &format!("{prefix}.m{mi}"), &b2, dims, take);
        remaining -= take;
        mi += 1;
    }
    b1.iter().zip(&b2).map(|(a, b)| a + b).collect()
}

fn pixel_shuffle(x: &[Scalar], (c, h, w): (usize, usize, usize), r: usize) -> Vec<Scalar> {
    let co = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let ic = oc * r * r + (y % r) * r + (xx % r);
                out[(oc * oh + y) * ow + xx] = x[(ic * h + y / r) * w + xx / r];
            }
        }
    }
    out
}

pub fn model_forward(store: &ParamStore, cfg: &ModelConfig, img: &Tensor) -> Tensor {
    let reflect = matches!(cfg.pad_mode, tamir_core::tape::PadMode::Reflect);
    let (h, w) = (img.shape[1], img.shape[2]);
    let d = cfg.d_model;
    let hk = p(store, "head.k");
    let f0 = conv2d(&img.data, (3, h, w), &hk.data, (d, 3, 3, 3), 1, reflect, 1);

    let dims = (d, h, w);
    let mut cur = f0.clone();
    for gi in 0..cfg.n_groups {
        cur = ssm_group(store, cfg, &format!("g{gi}"), &cur, dims);
    }
    let fused: Vec<Scalar> = f0.iter().zip(&cur).map(|(a, b)| a + b).collect();
    let bk = p(store, "body.k");
    let body = conv2d(&fused, dims, &bk.data, (d, d, 3, 3), 1, reflect, 1);

    let (data, oh, ow) = match cfg.scale {
        1 => {
            let k = p(store, "up.k");
            (conv2d(&body, dims, &k.data, (3, d, 3, 3), 1, reflect, 1), h, w)
        }
        2 | 3 => {
            let r = cfg.scale;
            let k = p(store, "up.k");
            let y = conv2d(&body, dims, &k.data, (3 * r * r, d, 3, 3), 1, reflect, 1);
            (pixel_shuffle(&y, (3 * r * r, h, w), r), h * r, w * r)
        }
        4 => {
            let k0 = p(store, "up0.k");
            let y = conv2d(&body, dims, &k0.data, (4 * d, d, 3, 3), 1, reflect, 1);
            let y = pixel_shuffle(&y, (4 * d, h, w), 2);
            let k1 = p(store, "up1.k");
            let y = conv2d(&y, (d, 2 * h, 2 * w), &k1.data, (12, d, 3, 3), 1, reflect, 1);
            (pixel_shuffle(&y, (12, 2 * h, 2 * w), 2), 4 * h, 4 * w)
        }
        s => panic!("reference: unsupported scale {s}"),
    };
    Tensor::from_vec(vec![3, oh, ow], data).expect("reference output is finite")
}
