//! Neural-network layer ops: linear, convolution, normalization, shuffling,
//! pooling, channel gating, and the 2-D DFT.

use super::{GradStore, Op, Tape, TensorRef};
use crate::error::{Error, Result};
use crate::tensor::{idx3, Scalar};

/// Boundary handling for convolution padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Mirror-without-repeat reflection of an out-of-range coordinate.
fn reflect101(t: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * (n - 1)) as isize;
    let u = t.rem_euclid(period) as usize;
    if u >= n {
        period as usize - u
    } else {
        u
    }
}

/// Maps a padded coordinate back to a source coordinate. `None` means the tap
/// reads a zero (zero padding outside the image).
#[inline]
fn map_src(t: usize, pad: usize, n: usize, mode: PadMode) -> Option<usize> {
    let s = t as isize - pad as isize;
    match mode {
        PadMode::Zero => {
            if s >= 0 && (s as usize) < n {
                Some(s as usize)
            } else {
                None
            }
        }
        PadMode::Reflect => Some(reflect101(s, n)),
    }
}

impl Tape {
    /// y = x W (+ b) over the last axis; x is [..., d_in], W is [d_in, d_out].
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: Option<TensorRef>) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::Shape(format!(
                "linear: x {:?} incompatible with w {:?}",
                xs, ws
            )));
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} should be [{d_out}]",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).len() / d_in;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b).to_vec());
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            for o in 0..d_out {
                let mut acc = match &bv {
                    Some(bv) => bv[o],
                    None => 0.0,
                };
                for i in 0..d_in {
                    acc += xv[r * d_in + i] * wv[i * d_out + o];
                }
                out[r * d_out + o] = acc;
            }
        }
        let mut oshape = xs;
        *oshape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        self.push("linear", oshape, out, Op::Linear { x, w, b }, rg)
    }

    pub(super) fn backward_linear(
        &self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        let ws = self.shape(w);
        let (d_in, d_out) = (ws[0], ws[1]);
        let rows = self.value(x).len() / d_in;
        let xv = self.value(x);
        let wv = self.value(w);
        if self.rg(x) {
            let mut dx = vec![0.0; xv.len()];
            for r in 0..rows {
                for o in 0..d_out {
                    let gi = g[r * d_out + o];
                    for i in 0..d_in {
                        dx[r * d_in + i] += gi * wv[i * d_out + o];
                    }
                }
            }
            store.accum(x, dx);
        }
        if self.rg(w) {
            let mut dw = vec![0.0; wv.len()];
            for r in 0..rows {
                for o in 0..d_out {
                    let gi = g[r * d_out + o];
                    for i in 0..d_in {
                        dw[i * d_out + o] += gi * xv[r * d_in + i];
                    }
                }
            }
            store.accum(w, dw);
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; d_out];
                for r in 0..rows {
                    for o in 0..d_out {
                        db[o] += g[r * d_out + o];
                    }
                }
                store.accum(b, db);
            }
        }
    }

    /// Cross-correlation of [C_in, H, W] with kernels [C_out, C_in/groups, kh, kw].
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        k: TensorRef,
        stride: usize,
        pad: usize,
        mode: PadMode,
        groups: usize,
    ) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: x {:?} must be rank 3, k {:?} rank 4",
                xs, ks
            )));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, ck, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || ck != cin / groups {
            return Err(Error::Geometry(format!(
                "conv2d: {cin} in / {cout} out channels incompatible with {groups} groups (kernel depth {ck})"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Geometry(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} does not fit {h}x{w} with pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xv = self.value(x);
        let kv = self.value(k);
        let cpg_in = cin / groups;
        let cpg_out = cout / groups;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let gi = co / cpg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for cl in 0..cpg_in {
                        let ci = gi * cpg_in + cl;
                        for dy in 0..kh {
                            let Some(sy) = map_src(oy * stride + dy, pad, h, mode) else {
                                continue;
                            };
                            for dx in 0..kw {
                                let Some(sx) = map_src(ox * stride + dx, pad, w, mode) else {
                                    continue;
                                };
                                acc += kv[((co * cpg_in + cl) * kh + dy) * kw + dx]
                                    * xv[idx3(ci, sy, sx, h, w)];
                            }
                        }
                    }
                    out[idx3(co, oy, ox, oh, ow)] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        self.push(
            "conv2d",
            vec![cout, oh, ow],
            out,
            Op::Conv2d {
                x,
                k,
                stride,
                pad,
                mode,
                groups,
            },
            rg,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn backward_conv2d(
        &self,
        x: TensorRef,
        k: TensorRef,
        stride: usize,
        pad: usize,
        mode: PadMode,
        groups: usize,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        let xs = self.shape(x);
        let ks = self.shape(k);
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xv = self.value(x);
        let kv = self.value(k);
        let cpg_in = cin / groups;
        let cpg_out = cout / groups;
        let (need_x, need_k) = (self.rg(x), self.rg(k));
        let mut dx = vec![0.0; xv.len()];
        let mut dk = vec![0.0; kv.len()];
        for co in 0..cout {
            let gi = co / cpg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[idx3(co, oy, ox, oh, ow)];
                    if go == 0.0 {
                        continue;
                    }
                    for cl in 0..cpg_in {
                        let ci = gi * cpg_in + cl;
                        for dy in 0..kh {
                            let Some(sy) = map_src(oy * stride + dy, pad, h, mode) else {
                                continue;
                            };
                            for dx_t in 0..kw {
                                let Some(sx) = map_src(ox * stride + dx_t, pad, w, mode) else {
                                    continue;
                                };
                                let ki = ((co * cpg_in + cl) * kh + dy) * kw + dx_t;
                                let xi = idx3(ci, sy, sx, h, w);
                                if need_x {
                                    dx[xi] += go * kv[ki];
                                }
                                if need_k {
                                    dk[ki] += go * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            store.accum(x, dx);
        }
        if need_k {
            store.accum(k, dk);
        }
    }

    /// Standardizes over the last axis, then applies per-feature affine.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: Scalar,
    ) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Shape("layer_norm: rank 0".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} should be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm: eps {eps} must be > 0")));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = gv[j] * (row[j] - mean) * inv + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            xs,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        )
    }

    pub(super) fn backward_layer_norm(
        &self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: Scalar,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        let d = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let rows = xv.len() / d;
        let mut dx = vec![0.0; xv.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                let dxhat = grow[j] * gv[j];
                dgamma[j] += grow[j] * xhat;
                dbeta[j] += grow[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                let dxhat = grow[j] * gv[j];
                dx[r * d + j] = inv
                    * (dxhat - sum_dxhat / d as Scalar - xhat * sum_dxhat_xhat / d as Scalar);
            }
        }
        if self.rg(x) {
            store.accum(x, dx);
        }
        if self.rg(gamma) {
            store.accum(gamma, dgamma);
        }
        if self.rg(beta) {
            store.accum(beta, dbeta);
        }
    }

    /// Rearranges [C r^2, H, W] into [C, rH, rW]:
    /// out[c, y r + dy, x r + dx] = in[c r^2 + dy r + dx, y, x].
    pub fn pixel_shuffle(&mut self, x: TensorRef, r: usize) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("pixel_shuffle: rank {} != 3", xs.len())));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        if r == 0 || c_in % (r * r) != 0 {
            return Err(Error::Geometry(format!(
                "pixel_shuffle: {c_in} channels not divisible by {r}^2"
            )));
        }
        let c = c_in / (r * r);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for cc in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for dy in 0..r {
                        for dx in 0..r {
                            out[idx3(cc, y * r + dy, xx * r + dx, h * r, w * r)] =
                                xv[idx3(cc * r * r + dy * r + dx, y, xx, h, w)];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            "pixel_shuffle",
            vec![c, h * r, w * r],
            out,
            Op::PixelShuffle { x, r },
            rg,
        )
    }

    pub(super) fn backward_pixel_shuffle(
        &self,
        x: TensorRef,
        r: usize,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        if !self.rg(x) {
            return;
        }
        let xs = self.shape(x);
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let c = c_in / (r * r);
        let mut dx = vec![0.0; self.value(x).len()];
        for cc in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for dy in 0..r {
                        for dx_t in 0..r {
                            dx[idx3(cc * r * r + dy * r + dx_t, y, xx, h, w)] =
                                g[idx3(cc, y * r + dy, xx * r + dx_t, h * r, w * r)];
                        }
                    }
                }
            }
        }
        store.accum(x, dx);
    }

    /// Per-channel spatial mean: [C, H, W] -> [C].
    pub fn global_avg_pool(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] * xs[2] == 0 {
            return Err(Error::Shape(format!("global_avg_pool: bad shape {:?}", xs)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let area = (h * w) as Scalar;
        let out = (0..c)
            .map(|cc| xv[cc * h * w..(cc + 1) * h * w].iter().sum::<Scalar>() / area)
            .collect();
        let rg = self.rg(x);
        self.push("global_avg_pool", vec![c], out, Op::GlobalAvgPool(x), rg)
    }

    pub(super) fn backward_global_avg_pool(
        &self,
        x: TensorRef,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        if !self.rg(x) {
            return;
        }
        let xs = self.shape(x);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let area = (h * w) as Scalar;
        let mut dx = vec![0.0; self.value(x).len()];
        for cc in 0..c {
            let gi = g[cc] / area;
            for v in &mut dx[cc * h * w..(cc + 1) * h * w] {
                *v = gi;
            }
        }
        store.accum(x, dx);
    }

    /// Multiplies each channel plane of [C, H, W] by the matching entry of s [C].
    pub fn channel_scale(&mut self, x: TensorRef, s: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(s) != [xs[0]] {
            return Err(Error::Shape(format!(
                "channel_scale: x {:?} vs s {:?}",
                xs,
                self.shape(s)
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let sv = self.value(s);
        let mut out = vec![0.0; xv.len()];
        for cc in 0..c {
            for i in cc * h * w..(cc + 1) * h * w {
                out[i] = xv[i] * sv[cc];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push("channel_scale", xs, out, Op::ChannelScale { x, s }, rg)
    }

    pub(super) fn backward_channel_scale(
        &self,
        x: TensorRef,
        s: TensorRef,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        let xs = self.shape(x);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let sv = self.value(s);
        if self.rg(x) {
            let mut dx = vec![0.0; xv.len()];
            for cc in 0..c {
                for i in cc * h * w..(cc + 1) * h * w {
                    dx[i] = g[i] * sv[cc];
                }
            }
            store.accum(x, dx);
        }
        if self.rg(s) {
            let mut ds = vec![0.0; c];
            for cc in 0..c {
                for i in cc * h * w..(cc + 1) * h * w {
                    ds[cc] += g[i] * xv[i];
                }
            }
            store.accum(s, ds);
        }
    }

    /// Adds a per-channel bias to [C, H, W].
    pub fn channel_bias(&mut self, x: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(b) != [xs[0]] {
            return Err(Error::Shape(format!(
                "channel_bias: x {:?} vs b {:?}",
                xs,
                self.shape(b)
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let bv = self.value(b);
        let mut out = vec![0.0; xv.len()];
        for cc in 0..c {
            for i in cc * h * w..(cc + 1) * h * w {
                out[i] = xv[i] + bv[cc];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("channel_bias", xs, out, Op::ChannelBias { x, b }, rg)
    }

    pub(super) fn backward_channel_bias(
        &self,
        x: TensorRef,
        b: TensorRef,
        g: &[Scalar],
        store: &mut GradStore,
    ) {
        let xs = self.shape(x);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if self.rg(x) {
            store.accum(x, g.to_vec());
        }
        if self.rg(b) {
            let mut db = vec![0.0; c];
            for cc in 0..c {
                for i in cc * h * w..(cc + 1) * h * w {
                    db[cc] += g[i];
                }
            }
            store.accum(b, db);
        }
    }

    /// Unnormalized 2-D DFT of a real [H, W] input, returned as (Re, Im):
    /// X[u,v] = sum_{y,x} x[y,x] e^{-2 pi i (u y / H + v x / W)}.
    /// Computed row-column separably; cost O(H W (H + W)).
    pub fn fft2(&mut self, x: TensorRef) -> Result<(TensorRef, TensorRef)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] == 0 || xs[1] == 0 {
            return Err(Error::Shape(format!("fft2: need nonempty [H, W], got {:?}", xs)));
        }
        let (h, w) = (xs[0], xs[1]);
        let xv = self.value(x);
        let (cw, sw) = twiddles(w);
        let (ch, sh) = twiddles(h);
        // Row pass: complex DFT of each row.
        let mut tr_re = vec![0.0; h * w];
        let mut tr_im = vec![0.0; h * w];
        for y in 0..h {
            for v in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for j in 0..w {
                    let t = (j * v) % w;
                    let xval = xv[y * w + j];
                    re += xval * cw[t];
                    im -= xval * sw[t];
                }
                tr_re[y * w + v] = re;
                tr_im[y * w + v] = im;
            }
        }
        // Column pass.
        let mut out = vec![0.0; 2 * h * w];
        for u in 0..h {
            for v in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..h {
                    let t = (y * u) % h;
                    let (a, b) = (tr_re[y * w + v], tr_im[y * w + v]);
                    re += a * ch[t] + b * sh[t];
                    im += b * ch[t] - a * sh[t];
                }
                out[u * w + v] = re;
                out[h * w + u * w + v] = im;
            }
        }
        let rg = self.rg(x);
        let packed = self.push("fft2", vec![2, h, w], out, Op::Fft2(x), rg)?;
        let re = self.slice_outer(packed, 0)?;
        let im = self.slice_outer(packed, 1)?;
        Ok((re, im))
    }

    pub(super) fn backward_fft2(&self, x: TensorRef, g: &[Scalar], store: &mut GradStore) {
        if !self.rg(x) {
            return;
        }
        let xs = self.shape(x);
        let (h, w) = (xs[0], xs[1]);
        let gre = &g[..h * w];
        let gim = &g[h * w..];
        let (cw, sw) = twiddles(w);
        let (ch, sh) = twiddles(h);
        // dx[y,x] = Re sum_{u,v} (gre + i gim)[u,v] e^{+2 pi i (u y / H + v x / W)},
        // evaluated separably: columns of G first, then rows.
        let mut t_re = vec![0.0; h * w];
        let mut t_im = vec![0.0; h * w];
        for u in 0..h {
            for xx in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for v in 0..w {
                    let t = (v * xx) % w;
                    let (a, b) = (gre[u * w + v], gim[u * w + v]);
                    re += a * cw[t] - b * sw[t];
                    im += a * sw[t] + b * cw[t];
                }
                t_re[u * w + xx] = re;
                t_im[u * w + xx] = im;
            }
        }
        let mut dx = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    let t = (u * y) % h;
                    acc += t_re[u * w + xx] * ch[t] - t_im[u * w + xx] * sh[t];
                }
                dx[y * w + xx] = acc;
            }
        }
        store.accum(x, dx);
    }
}

/// cos/sin tables for e^{-2 pi i t / n}, indexed modulo n.
fn twiddles(n: usize) -> (Vec<Scalar>, Vec<Scalar>) {
    let mut c = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for t in 0..n {
        let ang = 2.0 * std::f64::consts::PI * t as f64 / n as f64;
        c.push(ang.cos() as Scalar);
        s.push(ang.sin() as Scalar);
    }
    (c, s)
}
