#![allow(dead_code)]

use std::sync::Arc;

use armmt::data::{gen_dataset, Dataset, GeneratorConfig, SessionExample};
use armmt::model::{Armmt, ModelConfig, Variant};

/// A small generator setup whose image width matches the `tiny` model.
pub fn tiny_generator(sessions: usize) -> GeneratorConfig {
    GeneratorConfig {
        sessions,
        catalog_size: 60,
        categories: 2,
        styles_per_category: 2,
        attributes_per_category: 4,
        shops: 6,
        brands: 5,
        users: 5,
        age_buckets: 2,
        genders: 2,
        image_dim: 8,
        min_history: 2,
        max_history: 6,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_dataset(sessions: usize, seed: u64) -> Dataset {
    gen_dataset(&tiny_generator(sessions), seed).expect("valid generator config")
}

/// Default-sized generator with a shorter history cap.
pub fn small_dataset(sessions: usize, max_history: usize, seed: u64) -> Dataset {
    let cfg = GeneratorConfig {
        sessions,
        max_history,
        min_history: 2.min(max_history),
        ..GeneratorConfig::default()
    };
    gen_dataset(&cfg, seed).expect("valid generator config")
}

/// Keeps the converted candidate plus the first `n − 1` others, preserving order.
pub fn shrink(session: &SessionExample, n: usize) -> SessionExample {
    let conv = session.converted_index().expect("one conversion");
    let mut keep: Vec<usize> = (0..session.candidates.len())
        .filter(|&i| i != conv)
        .take(n - 1)
        .collect();
    keep.push(conv);
    keep.sort_unstable();
    SessionExample {
        candidates: keep.iter().map(|&i| Arc::clone(&session.candidates[i])).collect(),
        click_labels: keep.iter().map(|&i| session.click_labels[i]).collect(),
        conversion_labels: keep.iter().map(|&i| session.conversion_labels[i]).collect(),
        ..session.clone()
    }
}

pub fn tiny_model(ds: &Dataset, variant: Variant, seed: u64) -> Armmt {
    Armmt::new(ModelConfig::tiny(ds.meta.vocab), variant, seed).expect("valid model config")
}

pub fn rows_sum_to_one(t: &armmt::Tensor, tol: f64) -> bool {
    (0..t.rows()).all(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs() <= tol)
}
