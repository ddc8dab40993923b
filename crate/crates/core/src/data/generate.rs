//! Seeded synthetic catalog and session generator.
//!
//! Each category has a few visual styles (Gaussian clusters of unit image
//! vectors) and a pool of title attribute tokens. Every user prefers one
//! style per category and browses accordingly, so the category-filtered
//! history reveals the preference. A session's conversion is drawn from a
//! latent utility mixing image affinity to the preferred style, query/title
//! attribute overlap and cheapness, with the dominant driver sampled per
//! session from the configured modality mix. The query carries an intent
//! token that (noisily) names the driver. Clicks follow visual appeal.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    Action, BehaviorEvent, Dataset, DatasetMeta, Item, Query, SessionExample, UserProfile,
    VocabSizes, CANDIDATES_PER_SESSION, DEFAULT_MAX_HISTORY,
};
use crate::error::DataError;
use crate::tensor::sigmoid;

/// First of the three intent tokens (image, text, price), in that order.
pub const TOKEN_INTENT_BASE: usize = 1;
const TOKEN_CATEGORY_BASE: usize = 4;

const ITEM_ATTRIBUTES: usize = 3;
const QUERY_ATTRIBUTES: usize = 2;
const IN_CATEGORY_CANDIDATES: usize = 24;

/// Fractions of sessions whose conversion is driven by each signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityMix {
    pub image: f64,
    pub text: f64,
    pub price: f64,
}

impl ModalityMix {
    pub const IMAGE_DOMINANT: ModalityMix = ModalityMix {
        image: 0.6,
        text: 0.25,
        price: 0.15,
    };

    fn validate(&self) -> Result<(), DataError> {
        let parts = [self.image, self.text, self.price];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DataError::InvalidConfig(
                "mix weights must be non-negative".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!(
                "mix weights sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        if u < self.image {
            0
        } else if u < self.image + self.text {
            1
        } else {
            2
        }
    }
}

impl std::str::FromStr for ModalityMix {
    type Err = String;

    /// Parses `image,text,price`, e.g. `0.6,0.25,0.15`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [image, text, price] => Ok(ModalityMix { image, text, price }),
            _ => Err(format!("expected three comma-separated weights, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub sessions: usize,
    pub catalog_size: usize,
    pub categories: usize,
    pub styles_per_category: usize,
    pub attributes_per_category: usize,
    pub shops: usize,
    pub brands: usize,
    pub users: usize,
    pub age_buckets: usize,
    pub genders: usize,
    pub image_dim: usize,
    pub min_history: usize,
    pub max_history: usize,
    pub mix: ModalityMix,
    /// Probability that the query's intent token is drawn at random rather
    /// than naming the session's actual driver.
    pub intent_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            sessions: 1000,
            catalog_size: 2000,
            categories: 8,
            styles_per_category: 4,
            attributes_per_category: 12,
            shops: 200,
            brands: 100,
            users: 400,
            age_buckets: 6,
            genders: 2,
            image_dim: 32,
            min_history: 5,
            max_history: DEFAULT_MAX_HISTORY,
            mix: ModalityMix::IMAGE_DOMINANT,
            intent_noise: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn vocab(&self) -> VocabSizes {
        VocabSizes {
            items: self.catalog_size + 1,
            shops: self.shops + 1,
            brands: self.brands + 1,
            categories: self.categories + 1,
            tokens: TOKEN_CATEGORY_BASE
                + self.categories
                + self.categories * self.attributes_per_category,
            ages: self.age_buckets + 1,
            genders: self.genders + 1,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.catalog_size == 0 {
            return bad("catalog_size must be positive");
        }
        if self.catalog_size < CANDIDATES_PER_SESSION {
            return bad("catalog must hold at least 30 items");
        }
        if self.categories < 2 {
            return bad("need at least two categories");
        }
        if self.styles_per_category == 0
            || self.shops == 0
            || self.brands == 0
            || self.users == 0
            || self.age_buckets == 0
            || self.genders == 0
            || self.image_dim == 0
        {
            return bad("all cardinalities must be positive");
        }
        if self.attributes_per_category < ITEM_ATTRIBUTES.max(QUERY_ATTRIBUTES) {
            return bad("attributes_per_category must be at least 3");
        }
        if self.min_history > self.max_history {
            return bad("min_history exceeds max_history");
        }
        if !(0.0..=1.0).contains(&self.intent_noise) {
            return bad("intent_noise must lie in [0, 1]");
        }
        self.mix.validate()
    }

    fn attribute_token(&self, category: usize, attribute: usize) -> usize {
        TOKEN_CATEGORY_BASE + self.categories + category * self.attributes_per_category + attribute
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0);
    -(-u.ln()).ln()
}

/// Sample an index with probability proportional to `weights`.
fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

struct Latents {
    /// `styles[category][style]` unit centers.
    styles: Vec<Vec<Vec<f64>>>,
    /// Category -> catalog indices.
    by_category: Vec<Vec<usize>>,
}

struct User {
    profile: UserProfile,
    preferred_style: Vec<usize>,
}

fn build_catalog(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<Arc<Item>>, Latents) {
    let dim = config.image_dim;
    let mut styles = Vec::with_capacity(config.categories);
    for _ in 0..config.categories {
        let center = random_unit(rng, dim);
        let cat_styles = (0..config.styles_per_category)
            .map(|_| {
                let offset = random_unit(rng, dim);
                normalize(center.iter().zip(&offset).map(|(c, o)| c + 0.9 * o).collect())
            })
            .collect::<Vec<_>>();
        styles.push(cat_styles);
    }
    let price_base: Vec<f64> = (0..config.categories)
        .map(|_| 3.0 + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let noise = Normal::new(0.0, 0.35 / (dim as f64).sqrt()).expect("valid sigma");
    let mut raw = Vec::with_capacity(config.catalog_size);
    let mut by_category = vec![Vec::new(); config.categories];
    for idx in 0..config.catalog_size {
        let category = rng.random_range(0..config.categories);
        let style = rng.random_range(0..config.styles_per_category);
        let image = normalize(
            styles[category][style]
                .iter()
                .map(|c| c + noise.sample(rng))
                .collect(),
        );
        let mut attrs: Vec<usize> = (0..config.attributes_per_category).collect();
        attrs.shuffle(rng);
        let mut text = vec![TOKEN_CATEGORY_BASE + category];
        text.extend(
            attrs[..ITEM_ATTRIBUTES]
                .iter()
                .map(|&a| config.attribute_token(category, a)),
        );
        let log_price = price_base[category] + 0.5 * rng.sample::<f64, _>(StandardNormal);
        let sales = (3.0 + rng.sample::<f64, _>(StandardNormal)).exp().floor();
        raw.push(Item {
            item_id: idx + 1,
            shop_id: rng.random_range(1..=config.shops),
            brand_id: rng.random_range(1..=config.brands),
            category_id: category + 1,
            text_feature_ids: text,
            image_embedding: image,
            price: log_price.exp(),
            sales,
            price_z: 0.0,
            sales_z: 0.0,
        });
        by_category[category].push(idx);
    }

    let standardize = |values: Vec<f64>| -> Vec<f64> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        values.into_iter().map(|v| (v - mean) / sd).collect()
    };
    let pz = standardize(raw.iter().map(|i| i.price.ln()).collect());
    let sz = standardize(raw.iter().map(|i| i.sales.ln_1p()).collect());
    let catalog = raw
        .into_iter()
        .zip(pz.into_iter().zip(sz))
        .map(|(mut item, (p, s))| {
            item.price_z = p;
            item.sales_z = s;
            Arc::new(item)
        })
        .collect();
    (
        catalog,
        Latents {
            styles,
            by_category,
        },
    )
}

fn build_users(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<User> {
    // The first style of every category is the trending one.
    let popularity: Vec<f64> = (0..config.styles_per_category)
        .map(|s| if s == 0 { 3.0 } else { 1.0 })
        .collect();
    (0..config.users)
        .map(|_| User {
            profile: UserProfile {
                age_bucket: rng.random_range(1..=config.age_buckets),
                gender: rng.random_range(1..=config.genders),
            },
            preferred_style: (0..config.categories)
                .map(|_| sample_weighted(rng, &popularity))
                .collect(),
        })
        .collect()
}

/// Cosine between an item's image and the user's preferred style center.
fn image_affinity(item: &Item, latents: &Latents, user: &User) -> f64 {
    let cat = item.category_id - 1;
    dot(
        &item.image_embedding,
        &latents.styles[cat][user.preferred_style[cat]],
    )
}

fn build_history(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    catalog: &[Arc<Item>],
    latents: &Latents,
    user: &User,
    query_category: usize,
) -> Vec<BehaviorEvent> {
    let len = rng.random_range(config.min_history..=config.max_history);
    let mut events = Vec::with_capacity(len);
    for _ in 0..len {
        let category = if rng.random::<f64>() < 0.4 {
            query_category
        } else {
            rng.random_range(0..config.categories)
        };
        let pool = &latents.by_category[category];
        if pool.is_empty() {
            continue;
        }
        let weights: Vec<f64> = pool
            .iter()
            .map(|&i| (4.0 * image_affinity(&catalog[i], latents, user)).exp())
            .collect();
        let item = catalog[pool[sample_weighted(rng, &weights)]].clone();
        let action = if rng.random::<f64>() < 0.2 {
            Action::Order
        } else {
            Action::Click
        };
        let mut frequency = 1;
        while frequency < 20 && rng.random::<f64>() < 0.35 {
            frequency += 1;
        }
        let recency = rng.random_range(0.0..90.0);
        events.push(BehaviorEvent {
            category_id: item.category_id,
            item,
            action,
            frequency,
            recency,
        });
    }
    // Oldest first; truncate the oldest beyond the cap.
    events.sort_by(|a, b| b.recency.total_cmp(&a.recency));
    if events.len() > config.max_history {
        events.drain(..events.len() - config.max_history);
    }
    events
}

fn pick_candidates(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    latents: &Latents,
    query_category: usize,
) -> Vec<usize> {
    let mut in_cat = latents.by_category[query_category].clone();
    in_cat.shuffle(rng);
    in_cat.truncate(IN_CATEGORY_CANDIDATES);
    let mut chosen = in_cat;
    while chosen.len() < CANDIDATES_PER_SESSION {
        let i = rng.random_range(0..config.catalog_size);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen.shuffle(rng);
    chosen
}

/// Generates a catalog and `config.sessions` sessions; a pure function of
/// `(config, seed)`.
pub fn gen_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (catalog, latents) = build_catalog(config, &mut rng);
    let users = build_users(config, &mut rng);

    let mut sessions = Vec::with_capacity(config.sessions);
    for _ in 0..config.sessions {
        let user = &users[rng.random_range(0..users.len())];
        let category = rng.random_range(0..config.categories);
        let driver = config.mix.sample(&mut rng);
        let intent = if rng.random::<f64>() < config.intent_noise {
            rng.random_range(0..3)
        } else {
            driver
        };
        let mut attrs: Vec<usize> = (0..config.attributes_per_category).collect();
        attrs.shuffle(&mut rng);
        let query_attrs: Vec<usize> = attrs[..QUERY_ATTRIBUTES]
            .iter()
            .map(|&a| config.attribute_token(category, a))
            .collect();
        let mut token_ids = vec![TOKEN_INTENT_BASE + intent, TOKEN_CATEGORY_BASE + category];
        token_ids.extend(&query_attrs);

        let history = build_history(config, &mut rng, &catalog, &latents, user, category);
        let picked = pick_candidates(config, &mut rng, &latents, category);

        let weights = match driver {
            0 => [1.0, 0.15, 0.15],
            1 => [0.15, 1.0, 0.15],
            _ => [0.15, 0.15, 1.0],
        };
        let mut best = (f64::NEG_INFINITY, 0);
        let mut appeal = Vec::with_capacity(picked.len());
        for (pos, &idx) in picked.iter().enumerate() {
            let item = &catalog[idx];
            let in_category = item.category_id == category + 1;
            let image = image_affinity(item, &latents, user);
            let overlap = item
                .text_feature_ids
                .iter()
                .filter(|t| query_attrs.contains(t))
                .count() as f64;
            let utility = weights[0] * 6.0 * image
                + weights[1] * 1.8 * overlap
                + weights[2] * -2.5 * item.price_z
                + if in_category { 0.0 } else { -6.0 }
                + gumbel(&mut rng);
            if utility > best.0 {
                best = (utility, pos);
            }
            appeal.push(if in_category {
                sigmoid(-3.0 + 5.0 * (image - 0.6) + 0.7 * overlap)
            } else {
                0.02
            });
        }
        let mut conversion_labels = vec![0u8; picked.len()];
        conversion_labels[best.1] = 1;
        let click_labels = appeal
            .iter()
            .enumerate()
            .map(|(pos, &p)| u8::from(pos == best.1 || rng.random::<f64>() < p))
            .collect();

        sessions.push(SessionExample {
            query: Query {
                token_ids,
                category_id: category + 1,
            },
            user: user.profile,
            history,
            candidates: picked.iter().map(|&i| catalog[i].clone()).collect(),
            click_labels,
            conversion_labels,
        });
    }

    Ok(Dataset {
        meta: DatasetMeta {
            format_version: super::FORMAT_VERSION,
            seed,
            config: config.clone(),
            vocab: config.vocab(),
            image_dim: config.image_dim,
        },
        catalog,
        sessions,
    })
}
