//! Context-aware fusion unit.
//!
//! For each item `n` with modality representations `x_n ∈ R^{D×M}`:
//!
//! ```text
//! z_n   = mean over D of x_n                 ∈ R^M
//! z_n^c = concat(z_n, C)                     ∈ R^{M+J}
//! s_n   = softmax(relu(z_n^c · W1) · W2)     ∈ R^M
//! b_n   = Σ_m s_nm · x_nm                    ∈ R^D
//! ```
//!
//! Weights are stored input-major (`W1: [(M+J) × (M+J)/r]`, `W2: [(M+J)/r × M]`),
//! i.e. the transposes of the column-vector convention. There are no biases.

use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::params::{glorot, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CafuConfig {
    pub modalities: usize,
    pub context_dim: usize,
    pub reduction: usize,
    pub w1: String,
    pub w2: String,
}

impl CafuConfig {
    pub fn new(prefix: &str, modalities: usize, context_dim: usize, reduction: usize) -> Self {
        CafuConfig {
            modalities,
            context_dim,
            reduction,
            w1: format!("{prefix}/w1"),
            w2: format!("{prefix}/w2"),
        }
    }

    pub fn hidden(&self) -> usize {
        (self.modalities + self.context_dim) / self.reduction
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let total = self.modalities + self.context_dim;
        if self.modalities == 0 || self.reduction == 0 || total % self.reduction != 0 {
            return Err(ModelError::Config(format!(
                "M + J = {total} must be divisible by r = {}",
                self.reduction
            )));
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<(), ModelError> {
        self.validate()?;
        let total = self.modalities + self.context_dim;
        store.insert(&self.w1, glorot(seed, &self.w1, total, self.hidden()), false);
        store.insert(
            &self.w2,
            glorot(seed, &self.w2, self.hidden(), self.modalities),
            false,
        );
        Ok(())
    }
}

/// Stacks `M` same-shaped `[N × D]` representations into `[N × D × M]`.
pub fn stack_modalities(g: &mut Graph, parts: &[Var]) -> Result<Var, ModelError> {
    let mut expanded = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = g.value(p).shape().to_vec();
        expanded.push(g.reshape(p, &[s[0], s[1], 1])?);
    }
    Ok(g.concat(&expanded, 2)?)
}

/// Repeats a context vector `[J]` into `[N × J]`.
pub fn broadcast_rows(g: &mut Graph, v: Var, n: usize) -> Result<Var, ModelError> {
    let j = g.value(v).len();
    let row = g.reshape(v, &[1, j])?;
    Ok(g.gather_rows(row, &vec![0; n])?)
}

/// Returns the fused representation `[N × D]` and the weights `[N × M]`.
pub fn cafu(
    g: &mut Graph,
    x: Var,
    context: Var,
    cfg: &CafuConfig,
) -> Result<(Var, Var), ModelError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.modalities || g.value(context).len() != cfg.context_dim
    {
        return Err(ModelError::Tensor(crate::error::TensorError::ShapeMismatch {
            op: "cafu",
            left: shape,
            right: g.value(context).shape().to_vec(),
        }));
    }
    let n = shape[0];
    let z = g.mean_axis(x, 1)?;
    let c = broadcast_rows(g, context, n)?;
    let zc = g.concat(&[z, c], 1)?;
    let w1 = g.param_by_name(&cfg.w1)?;
    let w2 = g.param_by_name(&cfg.w2)?;
    let h = g.matmul(zc, w1)?;
    let h = g.relu(h);
    let logits = g.matmul(h, w2)?;
    let s = g.softmax_rows(logits);
    let b = g.modal_sum(x, s)?;
    Ok((b, s))
}
