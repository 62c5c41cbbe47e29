//! Clean-model softmax heuristic for ranking candidate triggers: the score
//! of a trigger for a pair (s, t) is the trigger-set average of
//! 2*softmax(F(x))_t - softmax(F(x))_s. A trigger whose presence already
//! nudges the clean model toward the target class while obscuring the
//! source class is the easier one to exploit.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ImageSample, PoisonPair};
use crate::error::{Error, Result};
use crate::modelharness::{pixels_to_f64, softmax, ClassifierModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerScore {
    pub trigger_id: String,
    pub score: f64,
    pub n_samples: usize,
}

/// Ranking direction. The displayed selection formula minimizes the score,
/// while its stated rationale (align with target features, obscure source
/// features) maximizes it; both are exposed and `ProseArgmax` is the
/// default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDirection {
    PaperArgmin,
    ProseArgmax,
}

/// Score from precomputed probability rows.
pub fn score_from_probs(probs: &[Array1<f64>], pair: PoisonPair) -> f64 {
    let total: f64 = probs
        .iter()
        .map(|p| 2.0 * p[pair.target] - p[pair.source])
        .sum();
    total / probs.len() as f64
}

pub fn score_trigger(
    model: &ClassifierModel,
    trigger_id: &str,
    samples: &[&ImageSample],
    pair: PoisonPair,
) -> Result<TriggerScore> {
    if samples.is_empty() {
        return Err(Error::precondition(format!(
            "empty trigger set for {trigger_id}"
        )));
    }
    let probs: Vec<Array1<f64>> = samples
        .par_iter()
        .map(|s| softmax(&model.logits(&pixels_to_f64(&s.pixels)).view()))
        .collect();
    Ok(TriggerScore {
        trigger_id: trigger_id.to_string(),
        score: score_from_probs(&probs, pair),
        n_samples: samples.len(),
    })
}

/// Rank trigger sets for a pair. Deterministic: ties break by trigger id.
pub fn rank_triggers(
    model: &ClassifierModel,
    sets: &BTreeMap<String, Vec<&ImageSample>>,
    pair: PoisonPair,
    direction: RankDirection,
) -> Result<Vec<TriggerScore>> {
    if sets.is_empty() {
        return Err(Error::precondition("no trigger sets to rank"));
    }
    let mut scores = Vec::with_capacity(sets.len());
    for (id, samples) in sets {
        scores.push(score_trigger(model, id, samples, pair)?);
    }
    scores.sort_by(|a, b| {
        let ord = a
            .score
            .partial_cmp(&b.score)
            .unwrap_or(std::cmp::Ordering::Equal);
        let ord = match direction {
            RankDirection::ProseArgmax => ord.reverse(),
            RankDirection::PaperArgmin => ord,
        };
        ord.then_with(|| a.trigger_id.cmp(&b.trigger_id))
    });
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> PoisonPair {
        PoisonPair {
            source: 0,
            target: 1,
        }
    }

    #[test]
    fn score_simplex_extremes() {
        let k = 10;
        let uniform = vec![Array1::from_elem(k, 1.0 / k as f64)];
        assert!((score_from_probs(&uniform, pair()) - 0.1).abs() < 1e-12);

        let mut all_target = Array1::zeros(k);
        all_target[1] = 1.0;
        assert!((score_from_probs(&[all_target], pair()) - 2.0).abs() < 1e-12);

        let mut all_source = Array1::zeros(k);
        all_source[0] = 1.0;
        assert!((score_from_probs(&[all_source], pair()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_invariant_under_logit_shift() {
        let logits = Array1::from_vec(vec![0.5, -0.2, 1.3, 0.0]);
        let shifted = logits.mapv(|z| z + 17.0);
        let a = score_from_probs(&[softmax(&logits.view())], pair());
        let b = score_from_probs(&[softmax(&shifted.view())], pair());
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn directions_order_hand_fixed_scores() {
        // two triggers with scores 0.4 and -0.2 built from explicit probs
        let probs_a = vec![Array1::from_vec(vec![0.2, 0.3, 0.5])]; // 2*0.3-0.2 = 0.4
        let probs_b = vec![Array1::from_vec(vec![0.6, 0.2, 0.2])]; // 2*0.2-0.6 = -0.2
        let sa = score_from_probs(&probs_a, pair());
        let sb = score_from_probs(&probs_b, pair());
        assert!((sa - 0.4).abs() < 1e-12);
        assert!((sb + 0.2).abs() < 1e-12);

        let mut scores = vec![
            TriggerScore {
                trigger_id: "a".into(),
                score: sa,
                n_samples: 1,
            },
            TriggerScore {
                trigger_id: "b".into(),
                score: sb,
                n_samples: 1,
            },
        ];
        scores.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap());
        assert_eq!(scores[0].trigger_id, "a"); // prose_argmax puts 0.4 first
        scores.sort_by(|x, y| x.score.partial_cmp(&y.score).unwrap());
        assert_eq!(scores[0].trigger_id, "b"); // paper_argmin puts -0.2 first
    }

    #[test]
    fn single_trigger_is_rank_one_either_direction() {
        use crate::datamodel::NormalizationStats;
        use crate::modelharness::build_model;
        use ndarray::Array3;

        let model = build_model("tiny_cnn", 3, NormalizationStats::identity(3), 1, None).unwrap();
        let s = ImageSample::new("x", 0, Some("tg".into()), Array3::from_elem((12, 12, 3), 0.5))
            .unwrap();
        let mut sets: BTreeMap<String, Vec<&ImageSample>> = BTreeMap::new();
        sets.insert("tg".into(), vec![&s]);
        let p = PoisonPair::new(0, 1, 3).unwrap();
        for dir in [RankDirection::PaperArgmin, RankDirection::ProseArgmax] {
            let ranked = rank_triggers(&model, &sets, p, dir).unwrap();
            assert_eq!(ranked.len(), 1);
            assert_eq!(ranked[0].trigger_id, "tg");
            assert_eq!(ranked[0].n_samples, 1);
        }
    }

    #[test]
    fn ranking_is_a_permutation_and_deterministic() {
        use crate::datamodel::NormalizationStats;
        use crate::modelharness::build_model;
        use ndarray::Array3;

        let model = build_model("tiny_cnn", 3, NormalizationStats::identity(3), 5, None).unwrap();
        let mk = |id: &str, v: f32| {
            ImageSample::new(id, 0, Some(id.into()), Array3::from_elem((12, 12, 3), v)).unwrap()
        };
        let a = mk("ta", 0.2);
        let b = mk("tb", 0.5);
        let c = mk("tc", 0.8);
        let mut sets: BTreeMap<String, Vec<&ImageSample>> = BTreeMap::new();
        sets.insert("ta".into(), vec![&a]);
        sets.insert("tb".into(), vec![&b]);
        sets.insert("tc".into(), vec![&c]);
        let p = PoisonPair::new(0, 2, 3).unwrap();
        let r1 = rank_triggers(&model, &sets, p, RankDirection::ProseArgmax).unwrap();
        let r2 = rank_triggers(&model, &sets, p, RankDirection::ProseArgmax).unwrap();
        let ids1: Vec<&str> = r1.iter().map(|t| t.trigger_id.as_str()).collect();
        let ids2: Vec<&str> = r2.iter().map(|t| t.trigger_id.as_str()).collect();
        assert_eq!(ids1, ids2);
        let mut sorted = ids1.clone();
        sorted.sort();
        assert_eq!(sorted, vec!["ta", "tb", "tc"]);
    }
}
