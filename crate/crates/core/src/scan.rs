//! Selective state-space scan: zero-order-hold discretization, texture-aware
//! modulation of the input matrix and step size, and the full token pipeline
//! applied over the autodiff tape.

use crate::error::{Error, Result};
use crate::tape::{softplus, Tape, TensorRef};
use crate::tensor::Scalar;

/// Continuous-time scan parameters for a single channel.
/// a_diag is per-state, b_seq/c_seq are per-token rows, delta_seq is the
/// per-token step size.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    pub a_diag: Vec<Scalar>,
    pub b_seq: Vec<Scalar>,
    pub c_seq: Vec<Scalar>,
    pub d_skip: Scalar,
    pub delta_seq: Vec<Scalar>,
}

impl ScanParams {
    pub fn seq_len(&self) -> usize {
        self.delta_seq.len()
    }

    pub fn n_state(&self) -> usize {
        self.a_diag.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, n) = (self.seq_len(), self.n_state());
        if self.b_seq.len() != l * n || self.c_seq.len() != l * n {
            return Err(Error::Shape(format!(
                "scan params: b/c rows {} / {} do not match L={l}, N={n}",
                self.b_seq.len(),
                self.c_seq.len()
            )));
        }
        if self.delta_seq.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Data("scan params: all delta entries must be > 0".into()));
        }
        Ok(())
    }

    /// Stability assertion used after initialization: every state decays.
    pub fn assert_stable_decay(&self) -> Result<()> {
        if self.a_diag.iter().any(|&a| !(a < 0.0)) {
            return Err(Error::Data("scan params: a_diag entries must be < 0".into()));
        }
        Ok(())
    }
}

/// ZOH-discretized scan factors; rows follow the token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedParams {
    pub abar_seq: Vec<Scalar>,
    pub bbar_seq: Vec<Scalar>,
    pub seq_len: usize,
    pub n_state: usize,
}

/// Scalar zero-order hold: abar = exp(da), bbar = ((exp(da) - 1)/a) b with a
/// series fallback when a is within 1e-8 of zero.
pub fn discretize_zoh_scalar(a: Scalar, b: Scalar, delta: Scalar) -> (Scalar, Scalar) {
    let abar = (delta * a).exp();
    let bbar = if a.abs() > crate::tape::A_SERIES_EPS {
        ((delta * a).exp() - 1.0) / a * b
    } else {
        delta * b * (1.0 + delta * a / 2.0)
    };
    (abar, bbar)
}

/// Discretizes a full parameter set token by token.
pub fn discretize_zoh(params: &ScanParams) -> Result<DiscretizedParams> {
    params.validate()?;
    let (l, n) = (params.seq_len(), params.n_state());
    let mut abar = vec![0.0; l * n];
    let mut bbar = vec![0.0; l * n];
    for k in 0..l {
        for ni in 0..n {
            let (ab, bb) = discretize_zoh_scalar(
                params.a_diag[ni],
                params.b_seq[k * n + ni],
                params.delta_seq[k],
            );
            abar[k * n + ni] = ab;
            bbar[k * n + ni] = bb;
        }
    }
    Ok(DiscretizedParams {
        abar_seq: abar,
        bbar_seq: bbar,
        seq_len: l,
        n_state: n,
    })
}

/// Single-channel selective scan over discretized factors with h_0 = 0:
/// h_k = abar_k * h_{k-1} + bbar_k x_k, y_k = c_k . h_k + d x_k.
pub fn selective_scan(
    disc: &DiscretizedParams,
    c_seq: &[Scalar],
    d_skip: Scalar,
    x_seq: &[Scalar],
) -> Result<Vec<Scalar>> {
    let (l, n) = (disc.seq_len, disc.n_state);
    if disc.abar_seq.len() != l * n || disc.bbar_seq.len() != l * n {
        return Err(Error::Shape("selective_scan: discretized rows disagree".into()));
    }
    if c_seq.len() != l * n || x_seq.len() != l {
        return Err(Error::Shape(format!(
            "selective_scan: c len {} / x len {} do not match L={l}, N={n}",
            c_seq.len(),
            x_seq.len()
        )));
    }
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(l);
    for k in 0..l {
        let mut yk = d_skip * x_seq[k];
        for ni in 0..n {
            h[ni] = disc.abar_seq[k * n + ni] * h[ni] + disc.bbar_seq[k * n + ni] * x_seq[k];
            yk += c_seq[k * n + ni] * h[ni];
        }
        y.push(yk);
    }
    Ok(y)
}

/// Texture modulation of one token: B_var = var_norm * (W_b x + b_b) and
/// Delta_var = softplus(var_norm * (W_d x) + bias_d).
pub fn texture_modulate(
    x_tok: &[Scalar],
    var_norm: Scalar,
    proj_b_w: &[Scalar],
    proj_b_bias: &[Scalar],
    proj_delta_w: &[Scalar],
    bias_delta: Scalar,
    n_state: usize,
) -> Result<(Vec<Scalar>, Scalar)> {
    let d_model = x_tok.len();
    if proj_b_w.len() != d_model * n_state
        || proj_b_bias.len() != n_state
        || proj_delta_w.len() != d_model
    {
        return Err(Error::Shape(format!(
            "texture_modulate: projections do not match d_model={d_model}, n_state={n_state}"
        )));
    }
    if !(var_norm >= 0.0) {
        return Err(Error::Data(format!("texture_modulate: var_norm {var_norm} < 0")));
    }
    let mut b_var = vec![0.0; n_state];
    for ni in 0..n_state {
        let mut acc = proj_b_bias[ni];
        for i in 0..d_model {
            acc += x_tok[i] * proj_b_w[i * n_state + ni];
        }
        b_var[ni] = var_norm * acc;
    }
    let mut d_lin = 0.0;
    for i in 0..d_model {
        d_lin += x_tok[i] * proj_delta_w[i];
    }
    let delta_var = softplus(var_norm * d_lin + bias_delta);
    Ok((b_var, delta_var))
}

/// Tape references for one scan stage's learnable parameters.
#[derive(Debug, Clone, Copy)]
pub struct SsmParamRefs {
    /// Input-matrix projection [d_model, n_state] and bias [n_state].
    pub b_w: TensorRef,
    pub b_b: TensorRef,
    /// Output-matrix projection [d_model, n_state] and bias [n_state].
    pub c_w: TensorRef,
    pub c_b: TensorRef,
    /// Step-size projection [d_model, 1]; positivity comes from
    /// softplus(. + delta_bias), so this linear carries no internal bias.
    pub delta_w: TensorRef,
    pub delta_bias: TensorRef,
    /// State decay diagonal [n_state] and per-channel passthrough [d_model].
    pub a: TensorRef,
    pub d: TensorRef,
}

/// Applies the texture-aware scan to an ordered token sequence [L, d_model]
/// with per-token normalized variances [L] (or [L, 1]). Tokens must already
/// be in plan order with position embeddings added. Returns [L, d_model].
pub fn ta_ssm_apply(
    tape: &mut Tape,
    tokens: TensorRef,
    var_norms: TensorRef,
    p: &SsmParamRefs,
) -> Result<TensorRef> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "ta_ssm_apply: tokens {:?} must be [L, d_model]",
            shape
        )));
    }
    let l = shape[0];
    let vs = tape.shape(var_norms);
    if !(vs == [l] || vs == [l, 1]) {
        return Err(Error::Shape(format!(
            "ta_ssm_apply: var_norms {:?} must be [{l}] or [{l}, 1]",
            vs
        )));
    }
    // Empty selection: nothing to scan, the sequence passes through.
    if l == 0 {
        return Ok(tokens);
    }
    let b_lin = tape.linear(tokens, p.b_w, Some(p.b_b))?;
    let b_var = tape.row_scale(b_lin, var_norms)?;
    let c_seq = tape.linear(tokens, p.c_w, Some(p.c_b))?;
    let d_lin = tape.linear(tokens, p.delta_w, None)?;
    let d_scaled = tape.row_scale(d_lin, var_norms)?;
    let d_pre = tape.add(d_scaled, p.delta_bias)?;
    let delta2 = tape.softplus(d_pre)?;
    let delta = tape.reshape(delta2, vec![l])?;
    let abar = tape.zoh_abar(p.a, delta)?;
    let bbar = tape.zoh_bbar(p.a, delta, b_var)?;
    tape.selective_scan(abar, bbar, c_seq, p.d, tokens)
}
