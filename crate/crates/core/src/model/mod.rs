//! The re-ranking network.
//!
//! Per session:
//!
//! 1. Per-candidate representations come from [`crate::encoders::build_reprs`].
//! 2. Context `C` = query mean-token, age and gender embeddings (`J = 3·dim`).
//! 3. Item and personalized modality pairs are fused by two separate
//!    [`cafu`](cafu::cafu) units into `I_mo` and `P_mo`.
//! 4. `M_mo = MLP([I_mo, P_mo, C])`, `A_mo = Encoder(M_mo)`.
//! 5. Price and sales fields get their own encoders.
//! 6. `M_main = MLP([A_mo, A_price, A_sales, P_id])`, `A_main = Encoder(M_main)`.
//! 7. `ŷ = softmax(MLP(A_main))` over the list; `ŷ_ctr = sigmoid(MLP(A_mo))`.

pub mod cafu;
pub mod config;
pub mod transformer;

use serde::{Deserialize, Serialize};

use crate::data::{Item, SessionExample};
use crate::encoders::{self, build_reprs, embed_lookup, PersonalizedReprs};
use crate::error::{ModelError, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;

use self::cafu::{broadcast_rows, stack_modalities, CafuConfig};
pub use self::config::{EncoderConfig, ModelConfig, Variant, MODALITIES};
use self::transformer::{encoder_stack, init_encoder};

mod names {
    pub const CAFU_ITEM: &str = "cafu_item";
    pub const CAFU_PERSONAL: &str = "cafu_personal";
    pub const CONCAT_ITEM: &str = "concat_item";
    pub const CONCAT_PERSONAL: &str = "concat_personal";
    pub const MO_MLP: &str = "mo_mlp";
    pub const MAIN_MLP: &str = "main_mlp";
    pub const ENC_MO: &str = "enc_mo";
    pub const ENC_PRICE: &str = "enc_price";
    pub const ENC_SALES: &str = "enc_sales";
    pub const ENC_MAIN: &str = "enc_main";
    pub const PRICE: &str = "price";
    pub const SALES: &str = "sales";
    pub const CVR_HEAD: &str = "cvr_head";
    pub const CTR_HEAD: &str = "ctr_head";
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N]` listwise conversion scores.
    pub y_hat: Var,
    /// `[N]` click probabilities.
    pub y_hat_ctr: Var,
    /// `[N × 2]` item-side fusion weights (image, text); fusion variants only.
    pub item_fusion: Option<Var>,
    /// `[N × 2]` personalized-side fusion weights (image, text).
    pub personal_fusion: Option<Var>,
    /// Every attention-probability matrix computed on the way.
    pub attention: Vec<Var>,
}

/// Concrete values of a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub y_hat: Tensor,
    pub y_hat_ctr: Tensor,
    pub item_fusion: Option<Tensor>,
    pub personal_fusion: Option<Tensor>,
    pub attention: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn trace(&self, g: &Graph) -> ForwardTrace {
        ForwardTrace {
            y_hat: g.value(self.y_hat).clone(),
            y_hat_ctr: g.value(self.y_hat_ctr).clone(),
            item_fusion: self.item_fusion.map(|v| g.value(v).clone()),
            personal_fusion: self.personal_fusion.map(|v| g.value(v).clone()),
            attention: self.attention.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

fn cafu_configs(cfg: &ModelConfig) -> [CafuConfig; 2] {
    let j = cfg.context_dim();
    [
        CafuConfig::new(names::CAFU_ITEM, MODALITIES, j, cfg.cafu_reduction),
        CafuConfig::new(names::CAFU_PERSONAL, MODALITIES, j, cfg.cafu_reduction),
    ]
}

fn insert_linear(store: &mut ParamStore, seed: u64, prefix: &str, suffix: &str, fan_in: usize, fan_out: usize) {
    let w = format!("{prefix}/w{suffix}");
    let b = format!("{prefix}/b{suffix}");
    store.insert(&w, glorot(seed, &w, fan_in, fan_out), false);
    store.insert(&b, Tensor::zeros(&[fan_out]), false);
}

/// Initializes every parameter `variant` needs. Parameters shared between
/// variants get identical initial values for the same seed.
pub fn init_params(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.dim;
    let j = cfg.context_dim();
    let hidden = cfg.mlp_width;
    let f = cfg.field_width;

    encoders::init_encoder_params(&mut store, cfg, variant.uses_image(), seed);
    if variant.uses_cafu() {
        for c in cafu_configs(cfg) {
            c.init(&mut store, seed)?;
        }
    } else if variant.uses_image() {
        insert_linear(&mut store, seed, names::CONCAT_ITEM, "", 2 * d, d);
        insert_linear(&mut store, seed, names::CONCAT_PERSONAL, "", 2 * d, d);
    }
    insert_linear(&mut store, seed, names::MO_MLP, "1", 2 * d + j, hidden);
    insert_linear(&mut store, seed, names::MO_MLP, "2", hidden, hidden);
    init_encoder(&mut store, names::ENC_MO, &cfg.encoder, hidden, seed);

    for field in [names::PRICE, names::SALES] {
        let table = format!("{field}/buckets");
        store.insert(&table, glorot(seed, &table, cfg.price_buckets, f), false);
        let scale = format!("{field}/scale");
        store.insert(&scale, glorot(seed, &scale, 1, f), false);
    }
    init_encoder(&mut store, names::ENC_PRICE, &cfg.encoder, f, seed);
    init_encoder(&mut store, names::ENC_SALES, &cfg.encoder, f, seed);

    insert_linear(&mut store, seed, names::MAIN_MLP, "1", hidden + 2 * f + d, hidden);
    insert_linear(&mut store, seed, names::MAIN_MLP, "2", hidden, hidden);
    init_encoder(&mut store, names::ENC_MAIN, &cfg.encoder, hidden, seed);

    for head in [names::CVR_HEAD, names::CTR_HEAD] {
        insert_linear(&mut store, seed, head, "1", hidden, hidden);
        insert_linear(&mut store, seed, head, "2", hidden, 1);
    }
    Ok(store)
}

fn two_layer(g: &mut Graph, x: Var, prefix: &str) -> Result<Var, ModelError> {
    let w1 = g.param_by_name(&format!("{prefix}/w1"))?;
    let b1 = g.param_by_name(&format!("{prefix}/b1"))?;
    let w2 = g.param_by_name(&format!("{prefix}/w2"))?;
    let b2 = g.param_by_name(&format!("{prefix}/b2"))?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    Ok(g.linear(h, w2, b2)?)
}

/// Context vector `C = [mean query token; age; gender]`, shape `[3·dim]`.
pub fn context_vector(g: &mut Graph, session: &SessionExample) -> Result<Var, ModelError> {
    let q = encoders::mean_token_embedding(g, &[session.query.token_ids.as_slice()])?;
    let age = embed_lookup(g, encoders::names::AGE, &[session.user.age_bucket])?;
    let gender = embed_lookup(g, encoders::names::GENDER, &[session.user.gender])?;
    let c = g.concat(&[q, age, gender], 1)?;
    let j = g.value(c).len();
    Ok(g.reshape(c, &[j])?)
}

pub fn price_bucket(z: f64, buckets: usize) -> usize {
    let pos = ((z + 3.0) / 6.0 * buckets as f64).floor();
    pos.clamp(0.0, (buckets - 1) as f64) as usize
}

/// Field embedding `bucket_emb[bucket(z)] + z · scale`, `[N × field_width]`.
fn numeric_field(g: &mut Graph, values: &[f64], prefix: &str, buckets: usize) -> Result<Var, ModelError> {
    let ids: Vec<usize> = values.iter().map(|&z| price_bucket(z, buckets)).collect();
    let emb = embed_lookup(g, &format!("{prefix}/buckets"), &ids)?;
    let z = g.constant(Tensor::new(vec![values.len(), 1], values.to_vec())?);
    let scale = g.param_by_name(&format!("{prefix}/scale"))?;
    let scaled = g.matmul(z, scale)?;
    Ok(g.add(emb, scaled)?)
}

fn mismatch(variant: Variant) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Tensor(TensorError::UnknownParameter(param)) => ModelError::VariantMismatch {
            variant: variant.to_string(),
            param,
        },
        other => other,
    }
}

/// Scores one session given its representations. `reprs` must come from the
/// same session and graph.
pub fn forward_session(
    g: &mut Graph,
    session: &SessionExample,
    reprs: &PersonalizedReprs,
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<ForwardOutput, ModelError> {
    forward_inner(g, session, reprs, cfg, variant).map_err(mismatch(variant))
}

fn forward_inner(
    g: &mut Graph,
    session: &SessionExample,
    reprs: &PersonalizedReprs,
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<ForwardOutput, ModelError> {
    let n = session.candidates.len();
    let context = context_vector(g, session)?;
    let mut attention = reprs.attention.clone();

    let (i_mo, p_mo, item_fusion, personal_fusion) = match variant {
        Variant::Full | Variant::NoAux => {
            let [item_cfg, personal_cfg] = cafu_configs(cfg);
            let xi = stack_modalities(g, &[reprs.i_img, reprs.i_text])?;
            let (i_mo, si) = cafu::cafu(g, xi, context, &item_cfg)?;
            let xp = stack_modalities(g, &[reprs.p_img, reprs.p_text])?;
            let (p_mo, sp) = cafu::cafu(g, xp, context, &personal_cfg)?;
            (i_mo, p_mo, Some(si), Some(sp))
        }
        Variant::NoCafuNoAux => {
            let xi = g.concat(&[reprs.i_img, reprs.i_text], 1)?;
            let i_mo = linear_named(g, xi, names::CONCAT_ITEM)?;
            let xp = g.concat(&[reprs.p_img, reprs.p_text], 1)?;
            let p_mo = linear_named(g, xp, names::CONCAT_PERSONAL)?;
            (i_mo, p_mo, None, None)
        }
        Variant::NoImage => (reprs.i_text, reprs.p_text, None, None),
    };

    let c_rows = broadcast_rows(g, context, n)?;
    let mo_in = g.concat(&[i_mo, p_mo, c_rows], 1)?;
    let m_mo = two_layer(g, mo_in, names::MO_MLP)?;
    let (a_mo, probs) = encoder_stack(g, m_mo, names::ENC_MO, &cfg.encoder)?;
    attention.extend(probs);

    let prices: Vec<f64> = session.candidates.iter().map(|i| i.price_z).collect();
    let sales: Vec<f64> = session.candidates.iter().map(|i| i.sales_z).collect();
    let price_field = numeric_field(g, &prices, names::PRICE, cfg.price_buckets)?;
    let (a_price, probs) = encoder_stack(g, price_field, names::ENC_PRICE, &cfg.encoder)?;
    attention.extend(probs);
    let sales_field = numeric_field(g, &sales, names::SALES, cfg.price_buckets)?;
    let (a_sales, probs) = encoder_stack(g, sales_field, names::ENC_SALES, &cfg.encoder)?;
    attention.extend(probs);

    let main_in = g.concat(&[a_mo, a_price, a_sales, reprs.p_id], 1)?;
    let m_main = two_layer(g, main_in, names::MAIN_MLP)?;
    let (a_main, probs) = encoder_stack(g, m_main, names::ENC_MAIN, &cfg.encoder)?;
    attention.extend(probs);

    let logits = two_layer(g, a_main, names::CVR_HEAD)?;
    let logits = g.reshape(logits, &[1, n])?;
    let y_hat = g.softmax_rows(logits);
    let y_hat = g.reshape(y_hat, &[n])?;

    let ctr_logits = two_layer(g, a_mo, names::CTR_HEAD)?;
    let ctr_logits = g.reshape(ctr_logits, &[n])?;
    let y_hat_ctr = g.sigmoid(ctr_logits);

    Ok(ForwardOutput {
        y_hat,
        y_hat_ctr,
        item_fusion,
        personal_fusion,
        attention,
    })
}

fn linear_named(g: &mut Graph, x: Var, prefix: &str) -> Result<Var, ModelError> {
    let w = g.param_by_name(&format!("{prefix}/w"))?;
    let b = g.param_by_name(&format!("{prefix}/b"))?;
    Ok(g.linear(x, w, b)?)
}

/// A model: structure, variant and learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Armmt {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
}

impl Armmt {
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, variant, seed)?;
        Ok(Armmt {
            config,
            variant,
            params,
        })
    }

    /// Builds representations and the forward pass into `g`, which must be
    /// backed by `self.params`.
    pub fn forward(&self, g: &mut Graph, session: &SessionExample) -> Result<ForwardOutput, ModelError> {
        self.forward_as(g, session, self.variant)
    }

    /// Forward pass wired as `variant`, which may differ from the variant the
    /// parameters were built for.
    pub fn forward_as(
        &self,
        g: &mut Graph,
        session: &SessionExample,
        variant: Variant,
    ) -> Result<ForwardOutput, ModelError> {
        if session.candidates.is_empty() {
            return Err(ModelError::Input("session has no candidates".into()));
        }
        let reprs = build_reprs(g, session, &self.config, variant.uses_image())
            .map_err(mismatch(variant))?;
        forward_session(g, session, &reprs, &self.config, variant)
    }

    pub fn trace(&self, session: &SessionExample) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, session)?;
        Ok(out.trace(&g))
    }

    /// Conversion scores `ŷ` for one session.
    pub fn score(&self, session: &SessionExample) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, session)?;
        Ok(g.value(out.y_hat).data().to_vec())
    }
}

/// Candidate indices ordered by descending score (stable for ties).
pub fn rerank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Items re-ordered by descending score, paired with their scores.
pub fn rerank<'a>(items: &'a [std::sync::Arc<Item>], scores: &[f64]) -> Vec<(&'a Item, f64)> {
    rerank_order(scores)
        .into_iter()
        .map(|i| (items[i].as_ref(), scores[i]))
        .collect()
}
