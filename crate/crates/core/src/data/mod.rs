//! Search-session data model: catalog items, behavior events, sessions.
//!
//! Vocabulary index 0 is reserved for "unknown" in every id space.

use std::sync::Arc;

use serde::{Deserialize, Serialize};


mod generate;
mod io;

pub use generate::{gen_dataset, GeneratorConfig, ModalityMix, TOKEN_INTENT_BASE};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION};

pub const CANDIDATES_PER_SESSION: usize = 30;
pub const DEFAULT_MAX_HISTORY: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub shop_id: usize,
    pub brand_id: usize,
    pub category_id: usize,
    /// Title token ids.
    pub text_feature_ids: Vec<usize>,
    /// Frozen, unit-norm image vector.
    pub image_embedding: Vec<f64>,
    pub price: f64,
    pub sales: f64,
    /// Standardized `ln(price)`.
    pub price_z: f64,
    /// Standardized `ln(1 + sales)`.
    pub sales_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Click,
    Order,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEvent {
    pub item: Arc<Item>,
    pub action: Action,
    pub frequency: u32,
    /// Days since the action.
    pub recency: f64,
    pub category_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub age_bucket: usize,
    pub gender: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub token_ids: Vec<usize>,
    pub category_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionExample {
    pub query: Query,
    pub user: UserProfile,
    /// Behavior history, oldest first.
    pub history: Vec<BehaviorEvent>,
    pub candidates: Vec<Arc<Item>>,
    pub click_labels: Vec<u8>,
    pub conversion_labels: Vec<u8>,
}

/// Vocabulary cardinalities, each including the reserved index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub items: usize,
    pub shops: usize,
    pub brands: usize,
    pub categories: usize,
    pub tokens: usize,
    pub ages: usize,
    pub genders: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub config: GeneratorConfig,
    pub vocab: VocabSizes,
    pub image_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub catalog: Vec<Arc<Item>>,
    pub sessions: Vec<SessionExample>,
}

impl Dataset {
    /// Index where the held-out tail begins: the final 10% of sessions.
    pub fn test_start(&self) -> usize {
        self.sessions.len() - self.sessions.len() / 10
    }

    pub fn train_sessions(&self) -> &[SessionExample] {
        &self.sessions[..self.test_start()]
    }

    pub fn test_sessions(&self) -> &[SessionExample] {
        &self.sessions[self.test_start()..]
    }
}

fn check_index(what: &str, index: usize, size: usize) -> Result<(), String> {
    if index >= size {
        return Err(format!("{what} {index} >= vocabulary size {size}"));
    }
    Ok(())
}

impl Item {
    pub fn validate(&self, vocab: &VocabSizes, image_dim: usize) -> Result<(), String> {
        check_index("item_id", self.item_id, vocab.items)?;
        check_index("shop_id", self.shop_id, vocab.shops)?;
        check_index("brand_id", self.brand_id, vocab.brands)?;
        check_index("category_id", self.category_id, vocab.categories)?;
        for &t in &self.text_feature_ids {
            check_index("text token", t, vocab.tokens)?;
        }
        if self.image_embedding.len() != image_dim {
            return Err(format!(
                "image embedding has {} dims, expected {image_dim}",
                self.image_embedding.len()
            ));
        }
        if !(self.price > 0.0 && self.price.is_finite()) {
            return Err(format!("price {} is not positive", self.price));
        }
        if !(self.sales >= 0.0 && self.sales.is_finite()) {
            return Err(format!("sales {} is negative", self.sales));
        }
        Ok(())
    }
}

impl SessionExample {
    /// Checks the structural session invariants: 30 candidates, exactly one
    /// conversion, and every conversion also clicked.
    pub fn check_labels(&self) -> Result<(), String> {
        let n = self.candidates.len();
        if n != CANDIDATES_PER_SESSION {
            return Err(format!("candidates != {CANDIDATES_PER_SESSION} (found {n})"));
        }
        if self.click_labels.len() != n || self.conversion_labels.len() != n {
            return Err("label vectors must have one entry per candidate".into());
        }
        if self
            .click_labels
            .iter()
            .chain(&self.conversion_labels)
            .any(|&y| y > 1)
        {
            return Err("labels must be 0 or 1".into());
        }
        let conversions: usize = self.conversion_labels.iter().map(|&y| y as usize).sum();
        if conversions != 1 {
            return Err(format!("expected exactly one conversion, found {conversions}"));
        }
        let converted_not_clicked = self
            .conversion_labels
            .iter()
            .zip(&self.click_labels)
            .any(|(&y, &c)| y == 1 && c == 0);
        if converted_not_clicked {
            return Err("converted item is not clicked".into());
        }
        Ok(())
    }

    pub fn validate(&self, meta: &DatasetMeta) -> Result<(), String> {
        self.check_labels()?;
        let vocab = &meta.vocab;
        check_index("query category", self.query.category_id, vocab.categories)?;
        for &t in &self.query.token_ids {
            check_index("query token", t, vocab.tokens)?;
        }
        check_index("age bucket", self.user.age_bucket, vocab.ages)?;
        check_index("gender", self.user.gender, vocab.genders)?;
        if self.history.len() > meta.config.max_history {
            return Err(format!(
                "history length {} exceeds {}",
                self.history.len(),
                meta.config.max_history
            ));
        }
        for e in &self.history {
            if e.frequency < 1 {
                return Err("event frequency must be >= 1".into());
            }
            if !(e.recency.is_finite() && e.recency >= 0.0) {
                return Err(format!("event recency {} is invalid", e.recency));
            }
            check_index("event category", e.category_id, vocab.categories)?;
        }
        for item in &self.candidates {
            item.validate(vocab, meta.image_dim)?;
        }
        Ok(())
    }

    /// Index of the converted candidate.
    pub fn converted_index(&self) -> Option<usize> {
        self.conversion_labels.iter().position(|&y| y == 1)
    }
}

/// Keeps the events whose category matches the query category, in order.
pub fn filter_history(history: &[BehaviorEvent], query_category: usize) -> Vec<BehaviorEvent> {
    history
        .iter()
        .filter(|e| e.category_id == query_category)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(cat: usize) -> BehaviorEvent {
        BehaviorEvent {
            item: Arc::new(Item {
                item_id: cat,
                shop_id: 1,
                brand_id: 1,
                category_id: cat,
                text_feature_ids: vec![],
                image_embedding: vec![1.0],
                price: 1.0,
                sales: 0.0,
                price_z: 0.0,
                sales_z: 0.0,
            }),
            action: Action::Click,
            frequency: 1,
            recency: cat as f64,
            category_id: cat,
        }
    }

    #[test]
    fn filter_keeps_matching_in_order() {
        let h = vec![event(1), event(2), event(1)];
        let f = filter_history(&h, 1);
        assert_eq!(f, vec![h[0].clone(), h[2].clone()]);
        assert!(filter_history(&h, 3).is_empty());
        let all = vec![event(2), event(2)];
        assert_eq!(filter_history(&all, 2), all);
    }

    #[test]
    fn split_is_final_tenth() {
        let n = 25;
        let test_start = n - n / 10;
        assert_eq!(test_start, 23);
    }
}
