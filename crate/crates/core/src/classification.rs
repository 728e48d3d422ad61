//! Open-vocabulary classification against a prompt table, confidence-weighted
//! test-time augmentation, and accuracy reporting per mask condition.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::dataio::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_temp, Vec64};
use crate::training::logits_against;

/// Which mask guided an image embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    GtMask,
    AllBlack,
    PredMask,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::GtMask, Condition::AllBlack, Condition::PredMask];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::GtMask => "gt_mask",
            Condition::AllBlack => "all_black",
            Condition::PredMask => "pred_mask",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown condition '{s}' (expected gt_mask, all_black or pred_mask)"
                ))
            })
    }
}

/// Ordered class names with their pre-adapter prompt features.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    names: Vec<String>,
    features: Vec<Vec64>,
    index: HashMap<String, usize>,
}

impl PromptTable {
    pub fn new(entries: Vec<(String, Vec64)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut features = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (name, feature) in entries {
            if let Some(&first) = features.first().map(|f: &Vec64| f.len()).as_ref() {
                if feature.len() != first {
                    return Err(Error::shape(format!(
                        "prompt '{name}' has dim {}, earlier prompts have {first}",
                        feature.len()
                    )));
                }
            }
            if !feature.is_finite() {
                return Err(Error::Data(format!("prompt '{name}' has non-finite values")));
            }
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(Error::Data(format!("duplicate class '{name}' in prompt table")));
            }
            names.push(name);
            features.push(feature);
        }
        Ok(PromptTable {
            names,
            features,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Feature dimension, or `None` for an empty table.
    pub fn dim(&self) -> Option<usize> {
        self.features.first().map(|f| f.len())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn features(&self) -> &[Vec64] {
        &self.features
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Vec64)> {
        self.names.iter().map(String::as_str).zip(&self.features)
    }
}

/// All views of one record under one condition; `views[0]` is the canonical view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub id: String,
    pub condition: Condition,
    pub true_class: String,
    pub views: Vec<Vec64>,
}

/// Groups records by `(id, condition)`, ordering views by view index.
/// Sets come out sorted by id, then condition.
pub fn group_views(records: &[EmbeddingRecord]) -> Result<Vec<ViewSet>> {
    let mut groups: BTreeMap<(&str, Condition), Vec<&EmbeddingRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry((&rec.id, rec.condition)).or_default().push(rec);
    }
    groups
        .into_iter()
        .map(|((id, condition), mut recs)| {
            recs.sort_by_key(|r| r.view);
            let true_class = recs[0].class.clone();
            if let Some(bad) = recs.iter().find(|r| r.class != true_class) {
                return Err(Error::Data(format!(
                    "record '{id}' ({condition}) has views labelled '{true_class}' and '{}'",
                    bad.class
                )));
            }
            Ok(ViewSet {
                id: id.to_string(),
                condition,
                true_class,
                views: recs.into_iter().map(|r| r.embedding.clone()).collect(),
            })
        })
        .collect()
}

/// Prompt features after the adapter (or unchanged for the frozen baseline),
/// computed once and reused for every image.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    prompts: &'a PromptTable,
    features: Vec<Vec64>,
}

impl<'a> Scorer<'a> {
    pub fn adapted(p: &AdapterParams, prompts: &'a PromptTable) -> Result<Self> {
        let features = prompts
            .features()
            .iter()
            .map(|z| p.forward(z).map(|t| t.y))
            .collect::<Result<_>>()?;
        Ok(Scorer { prompts, features })
    }

    /// Frozen baseline: prompt features are used as-is.
    pub fn frozen(prompts: &'a PromptTable) -> Self {
        Scorer {
            prompts,
            features: prompts.features().to_vec(),
        }
    }

    pub fn prompts(&self) -> &PromptTable {
        self.prompts
    }

    /// `cos(img, y_c) / tau` for every class.
    pub fn logits(&self, img: &[f64], tau: f64) -> Result<Vec64> {
        logits_against(img, &self.features, tau)
    }

    pub fn classify(&self, img: &[f64], tau: f64) -> Result<(Vec64, usize)> {
        let logits = self.logits(img, tau)?;
        let probs = softmax_temp(&logits, 1.0)?;
        let pred = argmax(&probs);
        Ok((probs, pred))
    }
}

/// Class probabilities for `img` and the top-1 index (lowest index on ties).
pub fn classify(
    p: &AdapterParams,
    prompts: &PromptTable,
    img: &[f64],
    tau: f64,
) -> Result<(Vec64, usize)> {
    Scorer::adapted(p, prompts)?.classify(img, tau)
}

/// How the per-view confidence weight is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaWeight {
    /// `w_i = max softmax(z_i / tau)`, the same temperature as the votes.
    #[default]
    Scaled,
    /// `w_i = max softmax(z_i)`.
    Raw,
}

/// Confidence-weighted vote over views, aggregated in the given order.
///
/// `view_logits` are unscaled scores (cosines); each view votes with
/// `softmax(z_i / tau)` weighted by its own confidence.
pub fn tta_aggregate(view_logits: &[Vec64], tau: f64) -> Result<Vec64> {
    tta_aggregate_with(view_logits, tau, TtaWeight::Scaled)
}

pub fn tta_aggregate_with(view_logits: &[Vec64], tau: f64, weight: TtaWeight) -> Result<Vec64> {
    let Some(first) = view_logits.first() else {
        return Err(Error::domain("test-time aggregation needs at least one view"));
    };
    if let Some(bad) = view_logits.iter().find(|v| v.len() != first.len()) {
        return Err(Error::shape(format!(
            "view logits have lengths {} and {}",
            first.len(),
            bad.len()
        )));
    }
    let mut votes = Vec::with_capacity(view_logits.len());
    let mut weights = Vec::with_capacity(view_logits.len());
    for z in view_logits {
        let probs = softmax_temp(z, tau)?;
        let w = match weight {
            TtaWeight::Scaled => probs.iter().copied().fold(0.0, f64::max),
            TtaWeight::Raw => softmax_temp(z, 1.0)?.iter().copied().fold(0.0, f64::max),
        };
        votes.push(probs);
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (probs, w) in votes.iter().zip(&weights) {
        let alpha = w / total;
        for (o, p) in out.iter_mut().zip(probs.iter()) {
            *o += alpha * p;
        }
    }
    Ok(Vec64::new(out))
}

/// [`tta_aggregate`] after sorting views into a canonical order, so the result
/// does not depend on the order the views were supplied in.
pub fn tta_aggregate_canonical(view_logits: &[Vec64], tau: f64, weight: TtaWeight) -> Result<Vec64> {
    let mut sorted: Vec<Vec64> = view_logits.to_vec();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(a.len().cmp(&b.len()))
    });
    tta_aggregate_with(&sorted, tau, weight)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub condition: Condition,
    pub pred_class: String,
    pub prob_top1: f64,
    pub true_class: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub condition: Option<Condition>,
    pub tta: bool,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Classes with at least one record, in prompt-table order.
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[t][p]` counts records of true class `t` predicted as `p`
    /// (prompt-table indices).
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub condition: Option<Condition>,
    pub tta: bool,
    pub tau: f64,
    pub weight: TtaWeight,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            condition: None,
            tta: false,
            tau: 0.01,
            weight: TtaWeight::Scaled,
        }
    }
}

/// Top-1 accuracy over `dataset`, optionally restricted to one condition.
pub fn evaluate_accuracy(
    scorer: &Scorer<'_>,
    dataset: &[ViewSet],
    opts: &EvalOptions,
) -> Result<AccuracyReport> {
    let prompts = scorer.prompts();
    let selected: Vec<&ViewSet> = dataset
        .iter()
        .filter(|v| opts.condition.is_none_or(|c| v.condition == c))
        .collect();
    if selected.is_empty() {
        let what = opts
            .condition
            .map_or("any condition".to_string(), |c| format!("condition '{c}'"));
        return Err(Error::Data(format!("no records for {what}")));
    }

    let k = prompts.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(selected.len());
    for vs in selected {
        let truth = prompts.index_of(&vs.true_class).ok_or_else(|| {
            Error::Data(format!(
                "record '{}' has unknown class '{}'",
                vs.id, vs.true_class
            ))
        })?;
        let probs = if opts.tta {
            let per_view = vs
                .views
                .iter()
                .map(|v| scorer.logits(v, 1.0))
                .collect::<Result<Vec<_>>>()?;
            tta_aggregate_with(&per_view, opts.tau, opts.weight)?
        } else {
            let canonical = vs
                .views
                .first()
                .ok_or_else(|| Error::Data(format!("record '{}' has no views", vs.id)))?;
            scorer.classify(canonical, opts.tau)?.0
        };
        let pred = argmax(&probs);
        confusion[truth][pred] += 1;
        predictions.push(Prediction {
            id: vs.id.clone(),
            condition: vs.condition,
            pred_class: prompts.names()[pred].clone(),
            prob_top1: probs[pred],
            true_class: vs.true_class.clone(),
            correct: pred == truth,
        });
    }

    let total = predictions.len();
    let correct = predictions.iter().filter(|p| p.correct).count();
    let per_class = confusion
        .iter()
        .enumerate()
        .filter_map(|(t, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| ClassAccuracy {
                class: prompts.names()[t].clone(),
                total: n,
                correct: row[t],
                accuracy: row[t] as f64 / n as f64,
            })
        })
        .collect();
    Ok(AccuracyReport {
        condition: opts.condition,
        tta: opts.tta,
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        per_class,
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, Rng};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vec64 {
        Vec64::new(x.to_vec())
    }

    fn two_class() -> PromptTable {
        PromptTable::new(vec![
            ("cat".into(), v(&[1.0, 0.0])),
            ("dog".into(), v(&[0.0, 1.0])),
        ])
        .unwrap()
    }

    #[test]
    fn condition_tags_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
        assert!("truth".parse::<Condition>().is_err());
    }

    #[test]
    fn prompt_table_rejects_duplicates_and_mixed_dims() {
        let err = PromptTable::new(vec![("a".into(), v(&[1.0])), ("a".into(), v(&[2.0]))]);
        assert!(matches!(err, Err(Error::Data(m)) if m.contains("'a'")));
        let err = PromptTable::new(vec![("a".into(), v(&[1.0])), ("b".into(), v(&[2.0, 0.0]))]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn classify_examples() {
        let p = AdapterParams::zeros(2, 1, 0.15).unwrap();
        let (probs, pred) = classify(&p, &two_class(), &[1.0, 0.0], 0.01).unwrap();
        assert_eq!(pred, 0);
        assert_eq!(probs[0], 1.0);
        assert!((probs[1] / 3.720075976020836e-44 - 1.0).abs() < 1e-9, "{}", probs[1]);

        let same = PromptTable::new(vec![
            ("a".into(), v(&[0.5, 0.5])),
            ("b".into(), v(&[0.5, 0.5])),
        ])
        .unwrap();
        let (probs, pred) = classify(&p, &same, &[1.0, 0.0], 0.01).unwrap();
        assert_eq!(pred, 0);
        assert_eq!(probs.as_ref(), &[0.5, 0.5]);
    }

    #[test]
    fn tta_examples() {
        let z = v(&[0.3, -0.2, 0.9]);
        let single = tta_aggregate(std::slice::from_ref(&z), 0.1).unwrap();
        assert_eq!(single, softmax_temp(&z, 0.1).unwrap());

        let many = tta_aggregate(&vec![z.clone(); 5], 0.1).unwrap();
        for (a, b) in many.iter().zip(single.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }

        let sym = tta_aggregate(&[v(&[2.0, 0.0]), v(&[0.0, 2.0])], 1.0).unwrap();
        assert!((sym[0] - 0.5).abs() <= 1e-9 && (sym[1] - 0.5).abs() <= 1e-9);

        assert!(matches!(tta_aggregate(&[], 1.0), Err(Error::Domain(_))));
        assert!(matches!(
            tta_aggregate(&[v(&[1.0]), v(&[1.0, 2.0])], 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn raw_weights_differ_from_scaled() {
        let views = [v(&[0.9, 0.1]), v(&[0.2, 0.3])];
        let a = tta_aggregate_with(&views, 0.05, TtaWeight::Scaled).unwrap();
        let b = tta_aggregate_with(&views, 0.05, TtaWeight::Raw).unwrap();
        assert_ne!(a, b);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn random_views(seed: u64, n: usize, k: usize) -> Vec<Vec64> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| gaussian_sample(&mut rng, 0.0, 1.0, k).unwrap())
            .collect()
    }

    proptest! {
        #[test]
        fn tta_is_a_convex_combination(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, tau in 0.05f64..2.0) {
            let views = random_views(seed, n, k);
            let out = tta_aggregate(&views, tau).unwrap();
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let per: Vec<Vec64> = views.iter().map(|z| softmax_temp(z, tau).unwrap()).collect();
            for j in 0..k {
                let lo = per.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
                let hi = per.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[j] >= lo - 1e-15 && out[j] <= hi + 1e-15);
            }
        }

        #[test]
        fn canonical_tta_ignores_view_order(seed in any::<u64>(), n in 1usize..6, shuffle_seed in any::<u64>()) {
            let views = random_views(seed, n, 4);
            let mut shuffled = views.clone();
            Rng::new(shuffle_seed).shuffle(&mut shuffled);
            let a = tta_aggregate_canonical(&views, 0.3, TtaWeight::Scaled).unwrap();
            let b = tta_aggregate_canonical(&shuffled, 0.3, TtaWeight::Scaled).unwrap();
            prop_assert_eq!(&a, &b);
            let c = tta_aggregate(&shuffled, 0.3).unwrap();
            for (x, y) in a.iter().zip(c.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn prediction_ignores_positive_rescaling(seed in any::<u64>(), lam in 0.01f64..100.0, mu in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let feats: Vec<(String, Vec64)> = (0..4)
                .map(|i| (format!("c{i}"), gaussian_sample(&mut rng, 0.0, 1.0, 6).unwrap()))
                .collect();
            let scaled: Vec<(String, Vec64)> = feats
                .iter()
                .map(|(n, f)| (n.clone(), f.iter().map(|x| x * lam).collect()))
                .collect();
            let img = gaussian_sample(&mut rng, 0.0, 1.0, 6).unwrap();
            let img2: Vec64 = img.iter().map(|x| x * mu).collect();
            let a = Scorer::frozen(&PromptTable::new(feats).unwrap().clone()).classify(&img, 0.01).unwrap().1;
            let table2 = PromptTable::new(scaled).unwrap();
            let b = Scorer::frozen(&table2).classify(&img2, 0.01).unwrap().1;
            prop_assert_eq!(a, b);
        }
    }

    fn record(id: &str, class: &str, cond: Condition, view: usize, e: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            class: class.into(),
            condition: cond,
            view,
            embedding: v(e),
        }
    }

    #[test]
    fn accuracy_oracle_and_adversarial_labels() {
        let prompts = two_class();
        let recs = vec![
            record("a", "cat", Condition::GtMask, 0, &[1.0, 0.0]),
            record("b", "dog", Condition::GtMask, 0, &[0.0, 1.0]),
            record("c", "cat", Condition::GtMask, 0, &[0.9, 0.1]),
        ];
        let sets = group_views(&recs).unwrap();
        let scorer = Scorer::frozen(&prompts);
        let rep = evaluate_accuracy(&scorer, &sets, &EvalOptions::default()).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.confusion, vec![vec![2, 0], vec![0, 1]]);

        let flipped: Vec<EmbeddingRecord> = recs
            .iter()
            .map(|r| EmbeddingRecord {
                class: if r.class == "cat" { "dog".into() } else { "cat".into() },
                ..r.clone()
            })
            .collect();
        let rep = evaluate_accuracy(&scorer, &group_views(&flipped).unwrap(), &EvalOptions::default())
            .unwrap();
        assert_eq!(rep.accuracy, 0.0);
        assert_eq!(rep.per_class.len(), 2);
    }

    #[test]
    fn empty_condition_filter_is_a_data_error() {
        let prompts = two_class();
        let sets = group_views(&[record("a", "cat", Condition::GtMask, 0, &[1.0, 0.0])]).unwrap();
        let opts = EvalOptions {
            condition: Some(Condition::AllBlack),
            ..EvalOptions::default()
        };
        match evaluate_accuracy(&Scorer::frozen(&prompts), &sets, &opts) {
            Err(Error::Data(m)) => assert!(m.contains("all_black"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tta_uses_all_views() {
        let prompts = two_class();
        // The canonical view leans dog; two confident extra views say cat.
        let recs = vec![
            record("a", "cat", Condition::AllBlack, 0, &[0.69, 0.72]),
            record("a", "cat", Condition::AllBlack, 2, &[0.99, 0.1]),
            record("a", "cat", Condition::AllBlack, 1, &[0.98, 0.2]),
        ];
        let sets = group_views(&recs).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].views[0].as_ref(), &[0.69, 0.72]);
        let scorer = Scorer::frozen(&prompts);
        let plain = evaluate_accuracy(&scorer, &sets, &EvalOptions::default()).unwrap();
        let tta = evaluate_accuracy(
            &scorer,
            &sets,
            &EvalOptions {
                tta: true,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain.accuracy, 0.0);
        assert_eq!(tta.accuracy, 1.0);
    }

    #[test]
    fn inconsistent_view_labels_are_rejected() {
        let recs = vec![
            record("a", "cat", Condition::GtMask, 0, &[1.0, 0.0]),
            record("a", "dog", Condition::GtMask, 1, &[1.0, 0.0]),
        ];
        assert!(matches!(group_views(&recs), Err(Error::Data(_))));
    }
}
