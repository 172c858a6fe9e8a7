//! Scalar reward functions: phase accuracy, output format, entity recall,
//! IoU, center distance, and their weighted sum.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize_text, BoundingBox, RewardBreakdown, SurgicalPhase};

pub const DEFAULT_TAU: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardConfigError {
    #[error("tau must be positive and finite, got {0}")]
    Tau(f64),
    #[error("weight {name} must be non-negative and finite, got {value}")]
    Weight { name: &'static str, value: f64 },
    #[error("at least one reward weight must be positive")]
    AllZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub acc: f64,
    pub format: f64,
    pub reason: f64,
    pub iou: f64,
    pub dist: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            acc: 1.0,
            format: 1.0,
            reason: 1.0,
            iou: 1.0,
            dist: 1.0,
        }
    }
}

impl RewardWeights {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("acc", self.acc),
            ("format", self.format),
            ("reason", self.reason),
            ("iou", self.iou),
            ("dist", self.dist),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Distance scale of the center reward, in grid units.
    pub tau: f64,
    pub weights: RewardWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            weights: RewardWeights::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(RewardConfigError::Tau(self.tau));
        }
        for (name, value) in self.weights.named() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(RewardConfigError::Weight { name, value });
            }
        }
        if self.weights.named().iter().all(|(_, w)| *w == 0.0) {
            return Err(RewardConfigError::AllZero);
        }
        Ok(())
    }
}

/// 1 when the predicted phase matches the truth, else 0.
pub fn reward_accuracy(predicted: Option<SurgicalPhase>, truth: SurgicalPhase) -> f64 {
    if predicted == Some(truth) {
        1.0
    } else {
        0.0
    }
}

fn tokens(text: &str) -> Vec<String> {
    normalize_text(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Fraction of entities that appear in `prediction_text`.
///
/// Both sides are normalized (lowercase, punctuation to spaces); an entity
/// counts as present when its token sequence occurs contiguously in the
/// prediction's token sequence. Duplicate entities count once. An empty
/// entity set scores 0.
pub fn reward_reason<S: AsRef<str>>(entity_set: &[S], prediction_text: &str) -> f64 {
    let mut entities: Vec<Vec<String>> = Vec::new();
    for e in entity_set {
        let t = tokens(e.as_ref());
        if !t.is_empty() && !entities.contains(&t) {
            entities.push(t);
        }
    }
    if entities.is_empty() {
        return 0.0;
    }
    let text = tokens(prediction_text);
    let present = entities
        .iter()
        .filter(|e| text.windows(e.len()).any(|w| w == e.as_slice()))
        .count();
    present as f64 / entities.len() as f64
}

/// Intersection over union in the integer grid.
pub fn reward_iou(pred: &BoundingBox, truth: &BoundingBox) -> f64 {
    let inter = pred.intersection_area(truth);
    let union = pred.area() + truth.area() - inter;
    inter as f64 / union as f64
}

/// Euclidean distance between box centers in grid units.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// `exp(-d / tau)` where `d` is the center distance.
pub fn reward_dist(pred: &BoundingBox, truth: &BoundingBox, tau: f64) -> f64 {
    (-center_distance(pred, truth) / tau).exp()
}

/// Weighted reward total together with the components that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeReward {
    pub components: RewardBreakdown,
    pub total: f64,
}

pub fn composite_reward(components: &RewardBreakdown, config: &RewardConfig) -> CompositeReward {
    let w = &config.weights;
    let total = w.acc * components.acc
        + w.format * components.format
        + w.reason * components.reason
        + w.iou * components.iou
        + w.dist * components.dist;
    CompositeReward {
        components: *components,
        total,
    }
}

/// Longest-match entity extractor over a fixed term list.
///
/// Stands in for an external biomedical NER pipeline when a dataset ships
/// without precomputed entity sets.
#[derive(Debug, Clone)]
pub struct EntityLexicon {
    terms: Vec<Vec<String>>,
    max_len: usize,
}

const BUNDLED_TERMS: &str = include_str!("../data/surgical_terms.txt");

impl EntityLexicon {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut list = Vec::new();
        for t in terms {
            let tok = tokens(t.as_ref());
            if !tok.is_empty() && seen.insert(tok.clone()) {
                list.push(tok);
            }
        }
        let max_len = list.iter().map(Vec::len).max().unwrap_or(0);
        Self { terms: list, max_len }
    }

    /// Parse a term list: one term per line, `#` comments allowed.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TERMS)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Scan left to right, taking the longest term starting at each position.
    /// Returns normalized, deduplicated entities in first-seen order.
    pub fn extract(&self, text: &str) -> Vec<String> {
        let toks = tokens(text);
        let set: HashSet<&[String]> = self.terms.iter().map(Vec::as_slice).collect();
        let mut out: Vec<String> = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let longest = (1..=self.max_len.min(toks.len() - i))
                .rev()
                .find(|&n| set.contains(&toks[i..i + n]));
            match longest {
                Some(n) => {
                    let entity = toks[i..i + n].join(" ");
                    if !out.contains(&entity) {
                        out.push(entity);
                    }
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent scanner: build every n-gram of the normalized text and
    /// look entities up in that set.
    fn ngram_oracle(entities: &[&str], text: &str) -> f64 {
        let norm = |s: &str| -> Vec<String> {
            let mut words = Vec::new();
            let mut cur = String::new();
            for ch in s.chars() {
                if ch.is_alphanumeric() {
                    cur.extend(ch.to_lowercase());
                } else if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            }
            if !cur.is_empty() {
                words.push(cur);
            }
            words
        };
        let words = norm(text);
        let mut grams = HashSet::new();
        for i in 0..words.len() {
            for j in i + 1..=words.len() {
                grams.insert(words[i..j].join(" "));
            }
        }
        let ents: HashSet<String> = entities.iter().map(|e| norm(e).join(" ")).filter(|e| !e.is_empty()).collect();
        if ents.is_empty() {
            return 0.0;
        }
        ents.iter().filter(|e| grams.contains(*e)).count() as f64 / ents.len() as f64
    }

    #[test]
    fn accuracy() {
        use SurgicalPhase::*;
        assert_eq!(reward_accuracy(Some(DissectionOfCalotsTriangle), DissectionOfCalotsTriangle), 1.0);
        assert_eq!(reward_accuracy(Some(PreparationOfGoZone), DissectionOfCalotsTriangle), 0.0);
        assert_eq!(reward_accuracy(None, DissectionOfCalotsTriangle), 0.0);
    }

    #[test]
    fn reason_examples() {
        let k = ["cystic duct", "traction", "common bile duct"];
        let text = "Next, apply gentle traction to expose the cystic duct.";
        assert_eq!(reward_reason(&k, text), 2.0 / 3.0);
        assert_eq!(ngram_oracle(&k, text), 2.0 / 3.0);
        let empty: [&str; 0] = [];
        assert_eq!(reward_reason(&empty, text), 0.0);
        assert_eq!(reward_reason(&["calot"], "Calot's triangle is exposed"), 1.0);
        assert_eq!(ngram_oracle(&["calot"], "Calot's triangle is exposed"), 1.0);
    }

    #[test]
    fn reason_partial_words_do_not_match() {
        assert_eq!(reward_reason(&["duct"], "the ductus is seen"), 0.0);
        assert_eq!(reward_reason(&["bile duct"], "bile, duct"), 1.0);
        assert_eq!(reward_reason(&["Duct", "duct"], "duct"), 1.0);
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 100, 100).unwrap();
        let b = BoundingBox::new(500, 500, 600, 600).unwrap();
        let c = BoundingBox::new(50, 0, 150, 100).unwrap();
        assert_eq!(reward_iou(&a, &a), 1.0);
        assert_eq!(reward_iou(&a, &b), 0.0);
        assert_eq!(reward_iou(&a, &c), 1.0 / 3.0);
    }

    #[test]
    fn dist_examples() {
        let a = BoundingBox::new(0, 0, 100, 100).unwrap();
        assert_eq!(reward_dist(&a, &a, 100.0), 1.0);
        let b = BoundingBox::new(100, 0, 200, 100).unwrap();
        assert!((reward_dist(&a, &b, 100.0) - (-1.0f64).exp()).abs() < 1e-12);
        let tl = BoundingBox::new(0, 0, 2, 2).unwrap();
        let br = BoundingBox::new(998, 998, 1000, 1000).unwrap();
        // centers (1,1) and (999,999)
        let far = reward_dist(&tl, &br, 100.0);
        assert!(far > 0.0);
        assert!((far - (-998.0 * 2f64.sqrt() / 100.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn composite_examples() {
        let cfg = RewardConfig::default();
        let ones = RewardBreakdown { acc: 1.0, format: 1.0, reason: 1.0, iou: 1.0, dist: 1.0 };
        assert_eq!(composite_reward(&ones, &cfg).total, 5.0);
        assert_eq!(composite_reward(&RewardBreakdown::default(), &cfg).total, 0.0);
        let mixed = RewardBreakdown {
            acc: 1.0,
            format: 1.0,
            reason: 2.0 / 3.0,
            iou: 1.0 / 3.0,
            dist: (-1.0f64).exp(),
        };
        let r = composite_reward(&mixed, &cfg);
        assert!((r.total - (3.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(r.components, mixed);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let mut c = RewardConfig { tau: 0.0, ..Default::default() };
        assert_eq!(c.validate(), Err(RewardConfigError::Tau(0.0)));
        c.tau = 100.0;
        c.weights.iou = -1.0;
        assert!(matches!(c.validate(), Err(RewardConfigError::Weight { name: "iou", .. })));
        c.weights = RewardWeights { acc: 0.0, format: 0.0, reason: 0.0, iou: 0.0, dist: 0.0 };
        assert_eq!(c.validate(), Err(RewardConfigError::AllZero));
        let parsed: RewardConfig = serde_json::from_str(r#"{"weights":{"dist":0.5}}"#).unwrap();
        assert_eq!(parsed.tau, 100.0);
        assert_eq!(parsed.weights.dist, 0.5);
        assert_eq!(parsed.weights.acc, 1.0);
    }

    #[test]
    fn lexicon_longest_match() {
        let lex = EntityLexicon::new(["bile duct", "common bile duct", "duct", "traction"]);
        assert_eq!(
            lex.extract("Traction on the common bile duct, then the duct."),
            vec!["traction", "common bile duct", "duct"]
        );
        let bundled = EntityLexicon::bundled();
        assert!(!bundled.is_empty());
        let found = bundled.extract("Apply traction to expose the cystic duct near Calot's triangle.");
        assert!(found.contains(&"cystic duct".to_string()));
        assert!(found.contains(&"calot s triangle".to_string()));
    }

    fn grid_box() -> impl Strategy<Value = BoundingBox> {
        (0i64..1000, 0i64..1000, 1i64..=1000, 1i64..=1000).prop_map(|(x, y, w, h)| {
            let x1 = (x + w).min(1000);
            let y1 = (y + h).min(1000);
            BoundingBox::new(x, y, x1, y1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in grid_box(), b in grid_box()) {
            let ab = reward_iou(&a, &b);
            prop_assert_eq!(ab, reward_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn dist_in_range(a in grid_box(), b in grid_box(), tau in 1.0f64..1000.0) {
            let d = reward_dist(&a, &b, tau);
            prop_assert!(d > 0.0 && d <= 1.0);
        }

        #[test]
        fn dist_ignores_symmetric_dilation(
            cx in 200i64..800, cy in 200i64..800, dx in -50i64..50, dy in -50i64..50,
            w in 1i64..50, h in 1i64..50, grow in 1i64..50,
        ) {
            let mk = |x: i64, y: i64, hw: i64, hh: i64| BoundingBox::new(x - hw, y - hh, x + hw, y + hh).unwrap();
            let a = mk(cx, cy, w, h);
            let b = mk(cx + dx, cy + dy, h, w);
            let a2 = mk(cx, cy, w + grow, h + grow);
            let b2 = mk(cx + dx, cy + dy, h + grow, w + grow);
            prop_assert_eq!(reward_dist(&a, &b, 100.0), reward_dist(&a2, &b2, 100.0));
        }

        #[test]
        fn reason_matches_oracle(
            ents in proptest::collection::vec("[a-c]{1,2}( [a-c]{1,2}){0,2}", 0..5),
            text in "[a-c ,.']{0,40}",
        ) {
            let refs: Vec<&str> = ents.iter().map(String::as_str).collect();
            prop_assert_eq!(reward_reason(&refs, &text), ngram_oracle(&refs, &text));
        }
    }
}
