//! Hallucination metrics: scene-description scoring, CHAIR and POPE.

mod chair;
mod coco;
mod pope;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scenegen::{GroundTruth, ObjectLabel};
use crate::tokenmap::{OutputFormat, ParsedDescription};

pub use chair::{chair_scores, read_captions, Caption, CaptionDetail, ChairResult, SynonymMap};
pub use coco::CocoAnnotations;
pub use pope::{build_pope_questions, parse_yes_no, pope_evaluate, read_qa_records, PopeQuestion, PopeQuestionSet, PopeResult, PopeSubset, QaRecord};

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset match counts between predicted and true labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptionScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `TP / (TP + FP + FN)`.
    pub accuracy: f64,
}

impl DescriptionScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self { tp, fp, fn_, precision, recall, f1: f1(precision, recall), accuracy: ratio(tp, tp + fp + fn_) }
    }

    /// Sums the counts of several scores.
    pub fn pooled<'a>(scores: impl IntoIterator<Item = &'a DescriptionScore>) -> Self {
        let (tp, fp, fn_) = scores.into_iter().fold((0, 0, 0), |a, s| (a.0 + s.tp, a.1 + s.fp, a.2 + s.fn_));
        Self::from_counts(tp, fp, fn_)
    }
}

/// `(|pred ∩ gt|, |pred − gt|, |gt − pred|)` as multisets.
pub fn multiset_counts(pred: &[ObjectLabel], gt: &[ObjectLabel]) -> (usize, usize, usize) {
    let mut want: BTreeMap<ObjectLabel, usize> = BTreeMap::new();
    for l in gt {
        *want.entry(*l).or_default() += 1;
    }
    let mut tp = 0;
    for l in pred {
        if let Some(n) = want.get_mut(l).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    (tp, pred.len() - tp, gt.len() - tp)
}

/// Scores a parsed description against the scene. In row mode labels are
/// matched within each row; in flat mode over the whole scene. Segments that
/// are not vocabulary labels count as false positives.
pub fn score_scene_description(parsed: &ParsedDescription, gt: &GroundTruth, mode: OutputFormat) -> DescriptionScore {
    let (mut tp, mut fp, mut fn_) = (0, parsed.invalid.len(), 0);
    match mode {
        OutputFormat::Flat => {
            let truth: Vec<ObjectLabel> = gt.objects.iter().map(|o| o.label()).collect();
            let (a, b, c) = multiset_counts(&parsed.labels(), &truth);
            tp += a;
            fp += b;
            fn_ += c;
        }
        OutputFormat::Rows => {
            let truth = gt.labels_by_partition();
            for (key, labels) in &truth {
                let pred = parsed.row(key).map(|r| r.labels.as_slice()).unwrap_or(&[]);
                let (a, b, c) = multiset_counts(pred, labels);
                tp += a;
                fp += b;
                fn_ += c;
            }
            for r in parsed.rows.iter().filter(|r| !truth.contains_key(&r.key)) {
                fp += r.labels.len();
            }
        }
    }
    DescriptionScore::from_counts(tp, fp, fn_)
}
