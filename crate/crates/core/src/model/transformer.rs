//! Post-norm transformer encoder over the candidate list.
//!
//! Input `[N × w]` is projected to `heads × head_dim`, passed through the
//! configured number of layers (multi-head scaled dot-product self-attention,
//! residual, layer norm, ReLU feed-forward, residual, layer norm) and projected
//! back to `w`. No positional encoding: the output is permutation-equivariant
//! in the rows.

use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::model::config::EncoderConfig;
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn p(prefix: &str, name: &str) -> String {
    format!("{prefix}/{name}")
}

fn lp(prefix: &str, layer: usize, name: &str) -> String {
    format!("{prefix}/l{layer}/{name}")
}

fn insert_linear(store: &mut ParamStore, seed: u64, w: &str, b: &str, fan_in: usize, fan_out: usize) {
    store.insert(w, glorot(seed, w, fan_in, fan_out), false);
    store.insert(b, Tensor::zeros(&[fan_out]), false);
}

/// Registers the parameters of one encoder stack under `prefix`.
pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, width: usize, seed: u64) {
    let inner = cfg.width();
    let ffn = cfg.ffn_mult * inner;
    insert_linear(store, seed, &p(prefix, "in_w"), &p(prefix, "in_b"), width, inner);
    for l in 0..cfg.layers {
        for proj in ["q", "k", "v", "o"] {
            let w = lp(prefix, l, &format!("w{proj}"));
            let b = lp(prefix, l, &format!("b{proj}"));
            insert_linear(store, seed, &w, &b, inner, inner);
        }
        insert_linear(store, seed, &lp(prefix, l, "ff1_w"), &lp(prefix, l, "ff1_b"), inner, ffn);
        insert_linear(store, seed, &lp(prefix, l, "ff2_w"), &lp(prefix, l, "ff2_b"), ffn, inner);
        for norm in ["ln1", "ln2"] {
            store.insert(&lp(prefix, l, &format!("{norm}_g")), Tensor::filled(&[inner], 1.0), false);
            store.insert(&lp(prefix, l, &format!("{norm}_b")), Tensor::zeros(&[inner]), false);
        }
    }
    insert_linear(store, seed, &p(prefix, "out_w"), &p(prefix, "out_b"), inner, width);
}

fn linear(g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
    let w = g.param_by_name(w)?;
    let b = g.param_by_name(b)?;
    Ok(g.linear(x, w, b)?)
}

fn norm(g: &mut Graph, x: Var, prefix: &str, layer: usize, which: &str) -> Result<Var, ModelError> {
    let n = g.layer_norm(x, LAYER_NORM_EPS);
    let gain = g.param_by_name(&lp(prefix, layer, &format!("{which}_g")))?;
    let bias = g.param_by_name(&lp(prefix, layer, &format!("{which}_b")))?;
    let n = g.mul_row(n, gain)?;
    Ok(g.add_row(n, bias)?)
}

/// Multi-head self-attention; returns the output and each head's `[N × N]`
/// probability matrix.
fn self_attention(
    g: &mut Graph,
    h: Var,
    prefix: &str,
    layer: usize,
    cfg: &EncoderConfig,
) -> Result<(Var, Vec<Var>), ModelError> {
    let q = linear(g, h, &lp(prefix, layer, "wq"), &lp(prefix, layer, "bq"))?;
    let k = linear(g, h, &lp(prefix, layer, "wk"), &lp(prefix, layer, "bk"))?;
    let v = linear(g, h, &lp(prefix, layer, "wv"), &lp(prefix, layer, "bv"))?;
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let start = head * cfg.head_dim;
        let qh = g.slice_cols(q, start, cfg.head_dim)?;
        let kh = g.slice_cols(k, start, cfg.head_dim)?;
        let vh = g.slice_cols(v, start, cfg.head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        probs.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let joined = g.concat(&heads, 1)?;
    let out = linear(g, joined, &lp(prefix, layer, "wo"), &lp(prefix, layer, "bo"))?;
    Ok((out, probs))
}

/// Runs the encoder stack registered under `prefix` on `x: [N × w]`.
pub fn encoder_stack(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<(Var, Vec<Var>), ModelError> {
    let mut h = linear(g, x, &p(prefix, "in_w"), &p(prefix, "in_b"))?;
    let mut all_probs = Vec::new();
    for l in 0..cfg.layers {
        let (attn, probs) = self_attention(g, h, prefix, l, cfg)?;
        all_probs.extend(probs);
        let res = g.add(h, attn)?;
        h = norm(g, res, prefix, l, "ln1")?;
        let ff = linear(g, h, &lp(prefix, l, "ff1_w"), &lp(prefix, l, "ff1_b"))?;
        let ff = g.relu(ff);
        let ff = linear(g, ff, &lp(prefix, l, "ff2_w"), &lp(prefix, l, "ff2_b"))?;
        let res = g.add(h, ff)?;
        h = norm(g, res, prefix, l, "ln2")?;
    }
    let out = linear(g, h, &p(prefix, "out_w"), &p(prefix, "out_b"))?;
    Ok((out, all_probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize) -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig {
            layers: 2,
            heads: 3,
            head_dim: 4,
            ffn_mult: 2,
        };
        let mut store = ParamStore::new();
        init_encoder(&mut store, "enc", &cfg, width, 11);
        (store, cfg)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn single_item_attends_to_itself() {
        let (store, cfg) = setup(5);
        let mut g = Graph::new(&store);
        let x = g.constant(random(1, 5, 1));
        let (out, probs) = encoder_stack(&mut g, x, "enc", &cfg).unwrap();
        assert_eq!(probs.len(), cfg.layers * cfg.heads);
        for p in probs {
            assert_eq!(g.value(p).data(), &[1.0]);
        }
        assert!(g.value(out).all_finite());
    }

    #[test]
    fn permutation_equivariant() {
        let (store, cfg) = setup(6);
        let x = random(7, 6, 2);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let (out, probs) = encoder_stack(&mut g, xv, "enc", &cfg).unwrap();
        let xp = g.gather_rows(xv, &perm).unwrap();
        let (out_p, _) = encoder_stack(&mut g, xp, "enc", &cfg).unwrap();
        let expected = g.gather_rows(out, &perm).unwrap();
        assert!(g.value(out_p).max_abs_diff(g.value(expected)) < 1e-9);
        for p in probs {
            for r in 0..7 {
                let s: f64 = g.value(p).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
