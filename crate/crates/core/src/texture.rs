//! Patch-level texture planning: patchification with reflect padding,
//! per-patch variance, descending-variance ordering, top-p selection,
//! position embedding, and scatter-back.

use crate::error::{Error, Result};
use crate::tensor::{idx3, Scalar, Tensor};

/// Sorted, truncated ordering of feature patches by texture score. `perm`
/// lists all patch indices, highest variance first; the first
/// `selected_count` entries are the processed set.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub grid: (usize, usize),
    pub patch_extent: (usize, usize),
    pub variances: Vec<Scalar>,
    pub perm: Vec<usize>,
    pub selected_count: usize,
    pub p: Scalar,
}

impl PatchPlan {
    pub fn n_patches(&self) -> usize {
        self.variances.len()
    }

    /// Selected patch indices, highest variance first.
    pub fn selected(&self) -> &[usize] {
        &self.perm[..self.selected_count]
    }
}

/// Number of patches kept by top-p selection: ceil(p * n).
pub fn selected_count(p: Scalar, n: usize) -> usize {
    (p * n as Scalar).ceil() as usize
}

/// Sorts patches by descending variance (ties broken by ascending original
/// index) and truncates to the top-p fraction.
pub fn build_patch_plan(
    variances: Vec<Scalar>,
    grid: (usize, usize),
    patch_extent: (usize, usize),
    p: Scalar,
) -> Result<PatchPlan> {
    let n = variances.len();
    if n == 0 || grid.0 * grid.1 != n {
        return Err(Error::Geometry(format!(
            "patch plan: grid {:?} does not hold {n} variances",
            grid
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("patch plan: p {p} outside (0, 1]")));
    }
    if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Data("patch plan: variances must be finite and >= 0".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&i, &j| {
        variances[j]
            .partial_cmp(&variances[i])
            .expect("finite variances")
            .then(i.cmp(&j))
    });
    let count = selected_count(p, n).clamp(1, n);
    Ok(PatchPlan {
        grid,
        patch_extent,
        variances,
        perm,
        selected_count: count,
        p,
    })
}

/// Texture score used to rank patches. Variance is the reference measure;
/// Shannon entropy over an 8-bin histogram is the alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TextureMeasure {
    #[default]
    Variance,
    Entropy,
}

impl TextureMeasure {
    pub fn score(&self, values: &[Scalar]) -> Scalar {
        match self {
            TextureMeasure::Variance => population_variance(values),
            TextureMeasure::Entropy => shannon_entropy_8bin(values),
        }
    }
}

/// Population variance over all elements of a patch.
pub fn patch_variance(patch: &Tensor) -> Scalar {
    population_variance(&patch.data)
}

fn population_variance(values: &[Scalar]) -> Scalar {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as Scalar;
    let mean = values.iter().sum::<Scalar>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() / n;
    var.max(0.0)
}

fn shannon_entropy_8bin(values: &[Scalar]) -> Scalar {
    if values.is_empty() {
        return 0.0;
    }
    let lo = values.iter().cloned().fold(Scalar::INFINITY, Scalar::min);
    let hi = values.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    if hi <= lo {
        return 0.0;
    }
    let mut hist = [0usize; 8];
    for &v in values {
        let bin = (((v - lo) / (hi - lo)) * 8.0).floor().min(7.0) as usize;
        hist[bin] += 1;
    }
    let n = values.len() as Scalar;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as Scalar / n;
            p * p.ln()
        })
        .sum::<Scalar>()
}

/// Extents and padding bookkeeping for a patchified feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchifyInfo {
    pub grid: (usize, usize),
    pub original: (usize, usize),
    pub padded: (usize, usize),
}

/// Splits [C, H, W] into a row-major grid of ph x pw patches, reflect-padding
/// the bottom/right edges up to the next multiple first.
pub fn patchify(f: &Tensor, ph: usize, pw: usize) -> Result<(Vec<Tensor>, PatchifyInfo)> {
    if f.shape.len() != 3 {
        return Err(Error::Shape(format!("patchify: {:?} must be rank 3", f.shape)));
    }
    if ph == 0 || pw == 0 {
        return Err(Error::Geometry("patchify: zero patch extent".into()));
    }
    let (c, h, w) = (f.shape[0], f.shape[1], f.shape[2]);
    let nh = h.div_ceil(ph) * ph;
    let nw = w.div_ceil(pw) * pw;
    if nh - h > h.saturating_sub(1) || nw - w > w.saturating_sub(1) {
        return Err(Error::Geometry(format!(
            "patchify: cannot reflect-pad {h}x{w} to {nh}x{nw}"
        )));
    }
    let src = |t: usize, n: usize| if t < n { t } else { 2 * n - 2 - t };
    let padded_at = |cc: usize, y: usize, x: usize| f.data[idx3(cc, src(y, h), src(x, w), h, w)];
    let (gh, gw) = (nh / ph, nw / pw);
    let mut patches = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut data = Vec::with_capacity(c * ph * pw);
            for cc in 0..c {
                for py in 0..ph {
                    for px in 0..pw {
                        data.push(padded_at(cc, gy * ph + py, gx * pw + px));
                    }
                }
            }
            patches.push(Tensor::from_vec(vec![c, ph, pw], data)?);
        }
    }
    Ok((
        patches,
        PatchifyInfo {
            grid: (gh, gw),
            original: (h, w),
            padded: (nh, nw),
        },
    ))
}

/// Reassembles patches produced by `patchify`, cropping away the padding.
pub fn unpatchify(patches: &[Tensor], info: &PatchifyInfo) -> Result<Tensor> {
    let (gh, gw) = info.grid;
    if patches.len() != gh * gw {
        return Err(Error::Shape(format!(
            "unpatchify: {} patches for a {gh}x{gw} grid",
            patches.len()
        )));
    }
    let first = &patches[0].shape;
    if first.len() != 3 {
        return Err(Error::Shape("unpatchify: patches must be rank 3".into()));
    }
    let (c, ph, pw) = (first[0], first[1], first[2]);
    let (nh, nw) = info.padded;
    let (h, w) = info.original;
    let mut full = vec![0.0; c * nh * nw];
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = &patches[gy * gw + gx];
            if patch.shape != *first {
                return Err(Error::Shape("unpatchify: mixed patch shapes".into()));
            }
            for cc in 0..c {
                for py in 0..ph {
                    for px in 0..pw {
                        full[idx3(cc, gy * ph + py, gx * pw + px, nh, nw)] =
                            patch.data[idx3(cc, py, px, ph, pw)];
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(c * h * w);
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(full[idx3(cc, y, x, nh, nw)]);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Adds the original-grid-position embedding row to every token of each
/// selected patch. `patch_tokens[i]` holds the tokens of selected patch i as
/// a flat (token, feature) run of width `d_model`.
pub fn add_position_embedding(
    patch_tokens: &mut [Vec<Scalar>],
    d_model: usize,
    orig_grid_indices: &[usize],
    table: &Tensor,
) -> Result<()> {
    if table.shape.len() != 2 || table.shape[1] != d_model {
        return Err(Error::Shape(format!(
            "position table {:?} should be [rows, {d_model}]",
            table.shape
        )));
    }
    if patch_tokens.len() != orig_grid_indices.len() {
        return Err(Error::Shape(format!(
            "{} token groups for {} grid indices",
            patch_tokens.len(),
            orig_grid_indices.len()
        )));
    }
    let rows = table.shape[0];
    for (tokens, &gi) in patch_tokens.iter_mut().zip(orig_grid_indices) {
        if gi >= rows {
            return Err(Error::Geometry(format!(
                "grid index {gi} outside position table with {rows} rows"
            )));
        }
        let row = &table.data[gi * d_model..(gi + 1) * d_model];
        for (j, v) in tokens.iter_mut().enumerate() {
            *v += row[j % d_model];
        }
    }
    Ok(())
}

/// Writes processed patches back into their original grid slots; skipped
/// patches keep the original content. `processed[i]` corresponds to
/// `plan.selected()[i]`.
pub fn scatter_back(processed: &[Tensor], original: &Tensor, plan: &PatchPlan) -> Result<Tensor> {
    if processed.len() != plan.selected_count {
        return Err(Error::Shape(format!(
            "scatter_back: {} processed patches, plan selects {}",
            processed.len(),
            plan.selected_count
        )));
    }
    let (ph, pw) = plan.patch_extent;
    let (gh, gw) = plan.grid;
    let (c, h, w) = (original.shape[0], original.shape[1], original.shape[2]);
    if gh * ph != h || gw * pw != w {
        return Err(Error::Geometry(format!(
            "scatter_back: plan grid {:?} x extent {:?} does not tile {h}x{w}",
            plan.grid, plan.patch_extent
        )));
    }
    let mut out = original.data.clone();
    for (patch, &pi) in processed.iter().zip(plan.selected()) {
        if patch.shape != [c, ph, pw] {
            return Err(Error::Shape(format!(
                "scatter_back: patch {:?} should be [{c}, {ph}, {pw}]",
                patch.shape
            )));
        }
        let (gy, gx) = (pi / gw, pi % gw);
        for cc in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    out[idx3(cc, gy * ph + py, gx * pw + px, h, w)] =
                        patch.data[idx3(cc, py, px, ph, pw)];
                }
            }
        }
    }
    Tensor::from_vec(original.shape.clone(), out)
}


#[cfg(all(test, not(feature = "f32")))]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn plan_invariants_hold(
            vars in proptest::collection::vec(0.0f64..1e6, 1..64),
            p in 0.001f64..1.0,
        ) {
            let n = vars.len();
            let plan = build_patch_plan(vars.clone(), (1, n), (1, 1), p).unwrap();
            // Selected-count contract: ceil(p n), at least 1, at most n.
            prop_assert_eq!(plan.selected_count, ((p * n as f64).ceil() as usize).clamp(1, n));
            // perm is a bijection.
            let mut seen = vec![false; n];
            for &i in &plan.perm {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
            // Non-increasing variance along perm, ties by ascending index.
            for w in plan.perm.windows(2) {
                let (i, j) = (w[0], w[1]);
                prop_assert!(vars[i] > vars[j] || (vars[i] == vars[j] && i < j));
            }
        }

        #[test]
        fn selection_set_invariant_under_permutation(
            mut vars in proptest::collection::vec(0.0f64..1e6, 2..32),
            p in 0.001f64..1.0,
            rot in 1usize..31,
        ) {
            // Force distinct variances so set semantics are well defined.
            vars.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vars.dedup();
            let n = vars.len();
            prop_assume!(n >= 2);
            let plan = build_patch_plan(vars.clone(), (1, n), (1, 1), p).unwrap();
            let mut rotated = vars.clone();
            rotated.rotate_left(rot % n);
            let plan_rot = build_patch_plan(rotated.clone(), (1, n), (1, 1), p).unwrap();
            let set_a: std::collections::BTreeSet<u64> = plan
                .selected()
                .iter()
                .map(|&i| vars[i].to_bits())
                .collect();
            let set_b: std::collections::BTreeSet<u64> = plan_rot
                .selected()
                .iter()
                .map(|&i| rotated[i].to_bits())
                .collect();
            prop_assert_eq!(set_a, set_b);
        }

        #[test]
        fn patchify_round_trips(
            c in 1usize..3,
            h in 1usize..9,
            w in 1usize..9,
            ph in 1usize..4,
            pw in 1usize..4,
            seed in 0u64..1000,
        ) {
            // Reflect padding needs pad <= extent - 1.
            let pad_h = h.div_ceil(ph) * ph - h;
            let pad_w = w.div_ceil(pw) * pw - w;
            prop_assume!(pad_h <= h.saturating_sub(1) && pad_w <= w.saturating_sub(1));
            let data: Vec<Scalar> = (0..c * h * w)
                .map(|i| (((i as u64 + 1) * (seed + 7)) % 1000) as Scalar / 999.0)
                .collect();
            let f = Tensor::from_vec(vec![c, h, w], data.clone()).unwrap();
            let (patches, info) = patchify(&f, ph, pw).unwrap();
            let back = unpatchify(&patches, &info).unwrap();
            prop_assert_eq!(back.data, data);
        }
    }
}
