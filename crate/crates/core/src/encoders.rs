//! Per-candidate representations: embedding lookups, title text encoding and
//! target attention over the user's behavior history.
//!
//! Target attention scores each (candidate, event) pair with a one-hidden-layer
//! ReLU network over `[q; k; q − k; q ⊙ k; side]`, normalizes the scores with a
//! softmax over events, and returns the weighted sum of projected event values.
//! The first layer is evaluated blockwise (`q·W_q + k·W_k + (q − k)·W_d +
//! (q ⊙ k)·W_p + side·W_s`), which equals multiplying the concatenated input
//! by the stacked weight matrix.

use crate::data::{filter_history, Action, BehaviorEvent, Item, SessionExample};
use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::model::config::{ModelConfig, EVENT_SCALAR_FEATURES};
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;

pub const RECENCY_SCALE_DAYS: f64 = 30.0;

/// Handle to an embedding table stored in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

impl EmbeddingTable {
    /// Registers a Glorot-initialized table under `name`.
    pub fn create(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        frozen: bool,
        seed: u64,
    ) -> Self {
        store.insert(name, glorot(seed, name, rows, cols), frozen);
        EmbeddingTable {
            name: name.to_string(),
            rows,
            cols,
            frozen,
        }
    }

    /// Registers a table with the given rows, e.g. frozen pre-trained vectors.
    pub fn from_rows(
        store: &mut ParamStore,
        name: &str,
        rows: Tensor,
        frozen: bool,
    ) -> Result<Self, ModelError> {
        let (r, c) = match rows.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(ModelError::Config(format!(
                    "embedding table needs a matrix, got {s:?}"
                )))
            }
        };
        store.insert(name, rows, frozen);
        Ok(EmbeddingTable {
            name: name.to_string(),
            rows: r,
            cols: c,
            frozen,
        })
    }

    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, ModelError> {
        embed_lookup(g, &self.name, ids)
    }
}

/// Gathers rows of the named table. Index 0 is the reserved unknown row.
pub fn embed_lookup(g: &mut Graph, table: &str, ids: &[usize]) -> Result<Var, ModelError> {
    let t = g.param_by_name(table)?;
    Ok(g.gather_rows(t, ids)?)
}

/// Parameter names of one target-attention block.
#[derive(Debug, Clone)]
pub struct AttentionNames {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
    pub wv: String,
    pub bv: String,
}

impl AttentionNames {
    pub fn new(prefix: &str) -> Self {
        AttentionNames {
            w1: format!("{prefix}/w1"),
            b1: format!("{prefix}/b1"),
            w2: format!("{prefix}/w2"),
            b2: format!("{prefix}/b2"),
            wv: format!("{prefix}/wv"),
            bv: format!("{prefix}/bv"),
        }
    }

    /// Registers the block for queries/keys of width `key_dim`.
    pub fn init(&self, store: &mut ParamStore, cfg: &ModelConfig, key_dim: usize, seed: u64) {
        let input = 4 * key_dim + cfg.event_side_dim();
        let h = cfg.din_hidden;
        store.insert(&self.w1, glorot(seed, &self.w1, input, h), false);
        store.insert(&self.b1, Tensor::zeros(&[h]), false);
        store.insert(&self.w2, glorot(seed, &self.w2, h, 1), false);
        store.insert(&self.b2, Tensor::zeros(&[1]), false);
        store.insert(&self.wv, glorot(seed, &self.wv, key_dim, cfg.dim), false);
        store.insert(&self.bv, Tensor::zeros(&[cfg.dim]), false);
    }
}

/// Output of [`target_attention`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[N × dim]`; zero rows when the history is empty.
    pub output: Var,
    /// `[N × L]` softmax weights, absent for an empty history.
    pub weights: Option<Var>,
}

/// Attends from each query row `[N × q]` over event keys `[L × q]` with
/// per-event side features `[L × s]`.
pub fn target_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    side: Var,
    names: &AttentionNames,
    out_dim: usize,
) -> Result<Attended, ModelError> {
    let n = g.value(queries).rows();
    let q_dim = g.value(queries).cols();
    let (l, k_dim) = (g.value(keys).rows(), g.value(keys).cols());
    if g.value(keys).rank() == 2 && l == 0 {
        let output = g.constant(Tensor::zeros(&[n, out_dim]));
        return Ok(Attended {
            output,
            weights: None,
        });
    }
    if q_dim != k_dim {
        return Err(ModelError::Tensor(crate::error::TensorError::ShapeMismatch {
            op: "target_attention",
            left: g.value(queries).shape().to_vec(),
            right: g.value(keys).shape().to_vec(),
        }));
    }
    let s_dim = g.value(side).cols();

    let w1 = g.param_by_name(&names.w1)?;
    let w_q = g.slice_rows(w1, 0, q_dim)?;
    let w_k = g.slice_rows(w1, q_dim, q_dim)?;
    let w_d = g.slice_rows(w1, 2 * q_dim, q_dim)?;
    let w_p = g.slice_rows(w1, 3 * q_dim, q_dim)?;
    let w_s = g.slice_rows(w1, 4 * q_dim, s_dim)?;

    // Per-candidate and per-event halves of the first layer.
    let q_w = g.add(w_q, w_d)?;
    let q_part = g.matmul(queries, q_w)?;
    let k_w = g.sub(w_k, w_d)?;
    let k_part = g.matmul(keys, k_w)?;
    let s_part = g.matmul(side, w_s)?;
    let e_part = g.add(k_part, s_part)?;

    let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, l)).collect();
    let tile: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
    let q_rep = g.gather_rows(queries, &repeat)?;
    let k_tile = g.gather_rows(keys, &tile)?;
    let qk = g.mul(q_rep, k_tile)?;
    let pair = g.matmul(qk, w_p)?;
    let q_pairs = g.gather_rows(q_part, &repeat)?;
    let e_pairs = g.gather_rows(e_part, &tile)?;
    let pre = g.add(q_pairs, e_pairs)?;
    let pre = g.add(pre, pair)?;
    let b1 = g.param_by_name(&names.b1)?;
    let pre = g.add_row(pre, b1)?;
    let hidden = g.relu(pre);
    let w2 = g.param_by_name(&names.w2)?;
    let b2 = g.param_by_name(&names.b2)?;
    let scores = g.linear(hidden, w2, b2)?;
    let scores = g.reshape(scores, &[n, l])?;
    let weights = g.softmax_rows(scores);

    let wv = g.param_by_name(&names.wv)?;
    let bv = g.param_by_name(&names.bv)?;
    let values = g.linear(keys, wv, bv)?;
    let output = g.matmul(weights, values)?;
    Ok(Attended {
        output,
        weights: Some(weights),
    })
}

/// Scalar side features of one event.
pub fn event_scalars(e: &BehaviorEvent) -> [f64; EVENT_SCALAR_FEATURES] {
    let (click, order) = match e.action {
        Action::Click => (1.0, 0.0),
        Action::Order => (0.0, 1.0),
    };
    [
        click,
        order,
        (e.frequency as f64).ln_1p(),
        (-e.recency / RECENCY_SCALE_DAYS).exp(),
    ]
}

/// `[L × (4 + 2·dim)]` side features: scalars plus the user's age and gender embeddings.
pub fn event_side_features(
    g: &mut Graph,
    events: &[BehaviorEvent],
    session: &SessionExample,
) -> Result<Var, ModelError> {
    let l = events.len();
    let scalars: Vec<f64> = events.iter().flat_map(event_scalars).collect();
    let scalars = g.constant(Tensor::new(vec![l, EVENT_SCALAR_FEATURES], scalars)?);
    let age = embed_lookup(g, names::AGE, &vec![session.user.age_bucket; l])?;
    let gender = embed_lookup(g, names::GENDER, &vec![session.user.gender; l])?;
    Ok(g.concat(&[scalars, age, gender], 1)?)
}

/// Concatenated item, shop and brand embeddings, `[len × 3·dim]`.
pub fn id_representation(g: &mut Graph, items: &[&Item]) -> Result<Var, ModelError> {
    let ids: Vec<usize> = items.iter().map(|i| i.item_id).collect();
    let shops: Vec<usize> = items.iter().map(|i| i.shop_id).collect();
    let brands: Vec<usize> = items.iter().map(|i| i.brand_id).collect();
    let a = embed_lookup(g, names::ITEM, &ids)?;
    let b = embed_lookup(g, names::SHOP, &shops)?;
    let c = embed_lookup(g, names::BRAND, &brands)?;
    Ok(g.concat(&[a, b, c], 1)?)
}

/// Mean of each token list's embeddings, `[lists × dim]`. Empty lists map to
/// the unknown token.
pub fn mean_token_embedding(g: &mut Graph, lists: &[&[usize]]) -> Result<Var, ModelError> {
    let mut flat = Vec::new();
    let mut spans = Vec::with_capacity(lists.len());
    for tokens in lists {
        let start = flat.len();
        if tokens.is_empty() {
            flat.push(0);
        } else {
            flat.extend_from_slice(tokens);
        }
        spans.push((start, flat.len()));
    }
    let mut averaging = Tensor::zeros(&[lists.len(), flat.len()]);
    for (r, &(start, end)) in spans.iter().enumerate() {
        let w = 1.0 / (end - start) as f64;
        let cols = flat.len();
        averaging.data_mut()[r * cols + start..r * cols + end].fill(w);
    }
    let avg = g.constant(averaging);
    let emb = embed_lookup(g, names::TOKEN, &flat)?;
    Ok(g.matmul(avg, emb)?)
}

/// Title representation: mean token embedding, then a linear projection.
pub fn text_representation(g: &mut Graph, items: &[&Item]) -> Result<Var, ModelError> {
    let lists: Vec<&[usize]> = items.iter().map(|i| i.text_feature_ids.as_slice()).collect();
    let mean = mean_token_embedding(g, &lists)?;
    let w = g.param_by_name(names::TEXT_W)?;
    let b = g.param_by_name(names::TEXT_B)?;
    Ok(g.linear(mean, w, b)?)
}

/// The frozen image vectors as a constant `[len × image_dim]`.
pub fn image_representation(
    g: &mut Graph,
    items: &[&Item],
    dim: usize,
) -> Result<Var, ModelError> {
    let mut data = Vec::with_capacity(items.len() * dim);
    for item in items {
        if item.image_embedding.len() != dim {
            return Err(ModelError::Input(format!(
                "item {} has a {}-dim image embedding, model expects {dim}",
                item.item_id,
                item.image_embedding.len()
            )));
        }
        data.extend_from_slice(&item.image_embedding);
    }
    Ok(g.constant(Tensor::new(vec![items.len(), dim], data)?))
}

/// The five per-candidate representations, each `[N × dim]`.
#[derive(Debug, Clone)]
pub struct PersonalizedReprs {
    pub p_id: Var,
    pub p_img: Var,
    pub p_text: Var,
    pub i_img: Var,
    pub i_text: Var,
    /// Target-attention weight matrices (`[N × L]`), for non-empty histories.
    pub attention: Vec<Var>,
}

pub mod names {
    pub const ITEM: &str = "emb/item";
    pub const SHOP: &str = "emb/shop";
    pub const BRAND: &str = "emb/brand";
    pub const TOKEN: &str = "emb/token";
    pub const AGE: &str = "emb/age";
    pub const GENDER: &str = "emb/gender";
    pub const TEXT_W: &str = "text/w";
    pub const TEXT_B: &str = "text/b";
    pub const DIN_ID: &str = "din_id";
    pub const DIN_IMG: &str = "din_img";
    pub const DIN_TEXT: &str = "din_text";
}

/// Registers every encoder parameter. `with_image` controls the image
/// attention block.
pub fn init_encoder_params(store: &mut ParamStore, cfg: &ModelConfig, with_image: bool, seed: u64) {
    let v = &cfg.vocab;
    let d = cfg.dim;
    EmbeddingTable::create(store, names::ITEM, v.items, d, false, seed);
    EmbeddingTable::create(store, names::SHOP, v.shops, d, false, seed);
    EmbeddingTable::create(store, names::BRAND, v.brands, d, false, seed);
    EmbeddingTable::create(store, names::TOKEN, v.tokens, d, false, seed);
    EmbeddingTable::create(store, names::AGE, v.ages, d, false, seed);
    EmbeddingTable::create(store, names::GENDER, v.genders, d, false, seed);
    store.insert(names::TEXT_W, glorot(seed, names::TEXT_W, d, d), false);
    store.insert(names::TEXT_B, Tensor::zeros(&[d]), false);
    AttentionNames::new(names::DIN_ID).init(store, cfg, 3 * d, seed);
    if with_image {
        AttentionNames::new(names::DIN_IMG).init(store, cfg, d, seed);
    }
    AttentionNames::new(names::DIN_TEXT).init(store, cfg, d, seed);
}

/// Builds all per-candidate representations. The ID branch attends over the
/// full history; the image and text branches attend over the events in the
/// query's category only. With `with_image == false` the image fields are
/// zero constants and the image attention block is not evaluated.
pub fn build_reprs(
    g: &mut Graph,
    session: &SessionExample,
    cfg: &ModelConfig,
    with_image: bool,
) -> Result<PersonalizedReprs, ModelError> {
    let d = cfg.dim;
    let candidates: Vec<&Item> = session.candidates.iter().map(|a| a.as_ref()).collect();
    let n = candidates.len();
    let mut attention = Vec::new();

    let full_items: Vec<&Item> = session.history.iter().map(|e| e.item.as_ref()).collect();
    let id_q = id_representation(g, &candidates)?;
    let id_k = id_representation(g, &full_items)?;
    let full_side = event_side_features(g, &session.history, session)?;
    let p_id = target_attention(g, id_q, id_k, full_side, &AttentionNames::new(names::DIN_ID), d)?;
    attention.extend(p_id.weights);

    let filtered = filter_history(&session.history, session.query.category_id);
    let filtered_items: Vec<&Item> = filtered.iter().map(|e| e.item.as_ref()).collect();
    let side = event_side_features(g, &filtered, session)?;

    let i_text = text_representation(g, &candidates)?;
    let h_text = text_representation(g, &filtered_items)?;
    let p_text = target_attention(g, i_text, h_text, side, &AttentionNames::new(names::DIN_TEXT), d)?;
    attention.extend(p_text.weights);

    let (i_img, p_img) = if with_image {
        let i_img = image_representation(g, &candidates, d)?;
        let h_img = image_representation(g, &filtered_items, d)?;
        let p = target_attention(g, i_img, h_img, side, &AttentionNames::new(names::DIN_IMG), d)?;
        attention.extend(p.weights);
        (i_img, p.output)
    } else {
        let zeros = g.constant(Tensor::zeros(&[n, d]));
        (zeros, zeros)
    };

    Ok(PersonalizedReprs {
        p_id: p_id.output,
        p_img,
        p_text: p_text.output,
        i_img,
        i_text,
        attention,
    })
}
