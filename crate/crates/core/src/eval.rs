//! AUC, the variant ablation runner and fusion-weight dumps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SessionExample};
use crate::error::{EvalError, ModelError};
use crate::graph::Graph;
use crate::model::{Armmt, ModelConfig, Variant};
use crate::train::{train_with, EpochLoss, TrainConfig};

/// Half-units of the Mann-Whitney U statistic and the pair count `P·N`.
fn u_statistic_x2(scores: &[f64], labels: &[u8]) -> Result<(u64, u64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l != 0).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives; a tie group over sorted positions
    // i..j (0-based, exclusive end) shares the rank (i + 1 + j) / 2.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        rank_sum_x2 += pos_in_group * (i as u64 + 1 + j as u64);
        i = j;
    }
    Ok((rank_sum_x2 - positives * (positives + 1), positives * negatives))
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `O(n log n)` by rank sum.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (u2, pairs) = u_statistic_x2(scores, labels)?;
    Ok(u2 as f64 / (2 * pairs) as f64)
}

/// Quadratic pairwise-count AUC, used as a cross-check.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut wins_x2: u64 = 0;
    let mut pairs: u64 = 0;
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            wins_x2 += match scores[i].total_cmp(&scores[j]) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    if pairs == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    Ok(wins_x2 as f64 / (2 * pairs) as f64)
}

/// How conversion AUC is aggregated over sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    /// One AUC over all (score, label) pairs of all sessions.
    #[default]
    Pooled,
    /// Mean of per-session AUCs, skipping sessions where it is undefined.
    PerSession,
}

/// Model outputs for a set of sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub y_hat: Vec<Vec<f64>>,
    pub y_hat_ctr: Vec<Vec<f64>>,
}

pub fn score_sessions(model: &Armmt, sessions: &[SessionExample]) -> Result<Scored, EvalError> {
    let mut y_hat = Vec::with_capacity(sessions.len());
    let mut y_hat_ctr = Vec::with_capacity(sessions.len());
    for s in sessions {
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, s)?;
        y_hat.push(g.value(out.y_hat).data().to_vec());
        y_hat_ctr.push(g.value(out.y_hat_ctr).data().to_vec());
    }
    Ok(Scored { y_hat, y_hat_ctr })
}

fn aggregate_auc(
    scores: &[Vec<f64>],
    labels: &[&[u8]],
    mode: AucMode,
) -> Result<f64, EvalError> {
    match mode {
        AucMode::Pooled => {
            let s: Vec<f64> = scores.iter().flatten().copied().collect();
            let l: Vec<u8> = labels.iter().flat_map(|l| l.iter().copied()).collect();
            auc(&s, &l)
        }
        AucMode::PerSession => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (s, l) in scores.iter().zip(labels) {
                match auc(s, l) {
                    Ok(a) => {
                        sum += a;
                        count += 1;
                    }
                    Err(EvalError::UndefinedAuc) => {}
                    Err(e) => return Err(e),
                }
            }
            if count == 0 {
                return Err(EvalError::UndefinedAuc);
            }
            Ok(sum / count as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Conversion AUC of `ŷ`.
    pub auc: f64,
    /// Click AUC of `ŷ_ctr`, if defined.
    pub ctr_auc: Option<f64>,
    pub sessions: usize,
}

pub fn evaluate(model: &Armmt, sessions: &[SessionExample], mode: AucMode) -> Result<Evaluation, EvalError> {
    if sessions.is_empty() {
        return Err(EvalError::Empty);
    }
    let scored = score_sessions(model, sessions)?;
    let conv: Vec<&[u8]> = sessions.iter().map(|s| s.conversion_labels.as_slice()).collect();
    let clicks: Vec<&[u8]> = sessions.iter().map(|s| s.click_labels.as_slice()).collect();
    let auc = aggregate_auc(&scored.y_hat, &conv, mode)?;
    let ctr_auc = aggregate_auc(&scored.y_hat_ctr, &clicks, mode).ok();
    Ok(Evaluation {
        auc,
        ctr_auc,
        sessions: sessions.len(),
    })
}

/// One evaluation run, serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ctr_auc: Option<f64>,
    pub sessions: usize,
    pub seed: u64,
    /// `auc − auc(full)` for the same seed, in ablation reports.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_vs_full: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_train_loss: Option<f64>,
}

impl EvalReport {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn write_reports<W: Write>(mut w: W, reports: &[EvalReport]) -> std::io::Result<()> {
    for r in reports {
        writeln!(w, "{}", r.json_line())?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub auc_mode: AucMode,
}

/// Progress events emitted by [`run_ablation`].
#[derive(Debug, Clone, Copy)]
pub enum AblationEvent<'a> {
    Epoch {
        variant: Variant,
        seed: u64,
        loss: &'a EpochLoss,
    },
    Finished(&'a EvalReport),
}

/// Trains every variant for every seed on the training split and evaluates
/// on the test split. For a given seed all variants start from the same
/// values for every parameter they share and see the same batch order.
pub fn run_ablation<F: FnMut(AblationEvent<'_>)>(
    dataset: &Dataset,
    cfg: &AblationConfig,
    mut progress: F,
) -> Result<Vec<EvalReport>, EvalError> {
    let train_set = dataset.train_sessions();
    let test_set = dataset.test_sessions();
    if train_set.is_empty() || test_set.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut reports = Vec::with_capacity(cfg.seeds.len() * Variant::ALL.len());
    for &seed in &cfg.seeds {
        let first = reports.len();
        for variant in Variant::ALL {
            let mut model = Armmt::new(cfg.model, variant, seed)?;
            let tc = TrainConfig { seed, ..cfg.train };
            let outcome = train_with(&mut model, train_set, &tc, 0, |loss| {
                progress(AblationEvent::Epoch {
                    variant,
                    seed,
                    loss,
                })
            })?;
            let eval = evaluate(&model, test_set, cfg.auc_mode)?;
            let report = EvalReport {
                variant,
                auc: eval.auc,
                ctr_auc: eval.ctr_auc,
                sessions: eval.sessions,
                seed,
                delta_vs_full: None,
                final_train_loss: outcome.epochs.last().map(|e| e.loss),
            };
            progress(AblationEvent::Finished(&report));
            reports.push(report);
        }
        let full = reports[first..]
            .iter()
            .find(|r| r.variant == Variant::Full)
            .map(|r| r.auc);
        for r in &mut reports[first..] {
            r.delta_vs_full = full.map(|f| r.auc - f);
        }
    }
    Ok(reports)
}

/// Mean AUC per variant, in [`Variant::ALL`] order, skipping absent variants.
pub fn mean_auc_by_variant(reports: &[EvalReport]) -> Vec<(Variant, f64)> {
    Variant::ALL
        .iter()
        .filter_map(|&v| {
            let aucs: Vec<f64> = reports.iter().filter(|r| r.variant == v).map(|r| r.auc).collect();
            (!aucs.is_empty()).then(|| (v, aucs.iter().sum::<f64>() / aucs.len() as f64))
        })
        .collect()
}

/// Fusion weights of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub session: usize,
    pub item_id: usize,
    pub item_img: f64,
    pub item_text: f64,
    pub personal_img: f64,
    pub personal_text: f64,
}

pub const FUSION_HEADER: &str = "session,item_id,s_item_img,s_item_text,s_pers_img,s_pers_text";

/// Fusion weights for every candidate of every session, numbered from
/// `first_session`.
pub fn fusion_weights(
    model: &Armmt,
    sessions: &[SessionExample],
    first_session: usize,
) -> Result<Vec<FusionRow>, EvalError> {
    if !model.variant.uses_cafu() {
        return Err(EvalError::Model(ModelError::Config(format!(
            "variant {} has no fusion units",
            model.variant
        ))));
    }
    let mut rows = Vec::with_capacity(sessions.len() * crate::data::CANDIDATES_PER_SESSION);
    for (k, s) in sessions.iter().enumerate() {
        let trace = model.trace(s)?;
        let (item, pers) = match (&trace.item_fusion, &trace.personal_fusion) {
            (Some(i), Some(p)) => (i, p),
            _ => unreachable!("fusion variants always produce weights"),
        };
        for (n, cand) in s.candidates.iter().enumerate() {
            rows.push(FusionRow {
                session: first_session + k,
                item_id: cand.item_id,
                item_img: item.row(n)[0],
                item_text: item.row(n)[1],
                personal_img: pers.row(n)[0],
                personal_text: pers.row(n)[1],
            });
        }
    }
    Ok(rows)
}

pub fn write_fusion_dump<W: Write>(mut w: W, rows: &[FusionRow]) -> std::io::Result<()> {
    writeln!(w, "{FUSION_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.session, r.item_id, r.item_img, r.item_text, r.personal_img, r.personal_text
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::UndefinedAuc)));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 0]), Err(EvalError::UndefinedAuc)));
        assert!(matches!(auc(&[0.1], &[0, 1]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn auc_with_ties_matches_pairwise() {
        let s = [0.3, 0.3, 0.7, 0.1, 0.7, 0.3];
        let l = [1, 0, 1, 0, 0, 1];
        assert_eq!(auc(&s, &l).unwrap(), auc_pairwise(&s, &l).unwrap());
    }

    #[test]
    fn per_session_mode_averages() {
        let scores = vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![0.5, 0.5]];
        let l1: &[u8] = &[1, 0];
        let l3: &[u8] = &[1, 1];
        let labels = [l1, l1, l3];
        let a = aggregate_auc(&scores, &labels, AucMode::PerSession).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn mean_by_variant() {
        let r = |variant, auc| EvalReport {
            variant,
            auc,
            ctr_auc: None,
            sessions: 1,
            seed: 0,
            delta_vs_full: None,
            final_train_loss: None,
        };
        let means = mean_auc_by_variant(&[r(Variant::Full, 0.75), r(Variant::Full, 0.25), r(Variant::NoImage, 0.5)]);
        assert_eq!(means, vec![(Variant::NoImage, 0.5), (Variant::Full, 0.5)]);
    }
}
