use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{f1, ratio, CocoAnnotations};
use crate::scaffold::{build_prompt, TemplateId};
use crate::scenegen::derive_seed;
use crate::{GlabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSubset {
    Random,
    Popular,
    Adversarial,
}

impl PopeSubset {
    pub const ALL: [PopeSubset; 3] = [PopeSubset::Random, PopeSubset::Popular, PopeSubset::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            PopeSubset::Random => "random",
            PopeSubset::Popular => "popular",
            PopeSubset::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for PopeSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PopeSubset {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        PopeSubset::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GlabError::Parse(format!("unknown POPE subset `{s}`")))
    }
}

/// One answered presence question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub image_id: u64,
    pub object: String,
    pub subset: PopeSubset,
    /// Gold answer: the object is present.
    pub label: bool,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeResult {
    pub subset: PopeSubset,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_rate: f64,
    /// Answers without a leading yes/no, scored as "no".
    pub unparsed: usize,
}

impl PopeResult {
    pub fn from_counts(subset: PopeSubset, tp: usize, fp: usize, tn: usize, fn_: usize, unparsed: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            subset,
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, n),
            precision,
            recall,
            f1: f1(precision, recall),
            yes_rate: ratio(tp + fp, n),
            unparsed,
        }
    }
}

/// Leading yes/no of an answer, ignoring case and punctuation.
pub fn parse_yes_no(answer: &str) -> Option<bool> {
    let first = answer.split(|c: char| !c.is_alphanumeric()).find(|w| !w.is_empty())?;
    match first.to_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Confusion counts and metrics per subset present in `records`.
pub fn pope_evaluate(records: &[QaRecord]) -> Vec<PopeResult> {
    let mut counts: BTreeMap<PopeSubset, [usize; 5]> = BTreeMap::new();
    for r in records {
        let parsed = parse_yes_no(&r.answer);
        if parsed.is_none() {
            log::debug!("unparseable POPE answer for image {} ({}): {:?}", r.image_id, r.object, r.answer);
        }
        let said_yes = parsed.unwrap_or(false);
        let c = counts.entry(r.subset).or_default();
        let slot = match (r.label, said_yes) {
            (true, true) => 0,
            (false, true) => 1,
            (false, false) => 2,
            (true, false) => 3,
        };
        c[slot] += 1;
        c[4] += parsed.is_none() as usize;
    }
    counts
        .into_iter()
        .map(|(s, [tp, fp, tn, fn_, un])| PopeResult::from_counts(s, tp, fp, tn, fn_, un))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image_id: u64,
    pub object: String,
    pub subset: PopeSubset,
    pub label: bool,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestionSet {
    pub subset: PopeSubset,
    pub per_image: usize,
    pub questions: Vec<PopeQuestion>,
    /// Images that received fewer questions than requested, with the reason.
    pub flagged: Vec<(u64, String)>,
}

fn question(object: &str) -> Result<String> {
    build_prompt(TemplateId::PopeBinary, None, &BTreeMap::from([("object".to_string(), object.to_string())]))
}

/// Presence questions for every annotated image: half (rounded up) about
/// present categories, cycling when an image has fewer, and half about absent
/// categories chosen by the subset policy.
pub fn build_pope_questions(ann: &CocoAnnotations, subset: PopeSubset, per_image: usize, seed: u64) -> Result<PopeQuestionSet> {
    let mut set = PopeQuestionSet { subset, per_image, questions: Vec::new(), flagged: Vec::new() };
    if per_image == 0 {
        return Ok(set);
    }
    let n_absent = per_image / 2;
    let n_present = per_image - n_absent;
    let freq = ann.frequency();
    let cooc = ann.cooccurrence();
    let subset_tag = PopeSubset::ALL.iter().position(|s| *s == subset).unwrap_or(0) as u64;
    for (&image_id, present) in &ann.images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[image_id, subset_tag]));
        let mut pos: Vec<&String> = present.iter().collect();
        pos.shuffle(&mut rng);
        if pos.is_empty() {
            set.flagged.push((image_id, "no annotated objects for present questions".into()));
        } else {
            for i in 0..n_present {
                let obj = pos[i % pos.len()];
                set.questions.push(PopeQuestion { image_id, object: obj.clone(), subset, label: true, question: question(obj)? });
            }
        }
        let absent: Vec<&String> = ann.categories.iter().filter(|c| !present.contains(*c)).collect();
        let chosen: Vec<&String> = match subset {
            PopeSubset::Random => {
                let mut a = absent.clone();
                a.shuffle(&mut rng);
                a.into_iter().take(n_absent).collect()
            }
            PopeSubset::Popular => {
                let mut a = absent.clone();
                a.sort_by(|x, y| freq[*y].cmp(&freq[*x]).then(x.cmp(y)));
                a.into_iter().take(n_absent).collect()
            }
            PopeSubset::Adversarial => {
                let score = |c: &String| -> usize {
                    present.iter().map(|p| cooc.get(&(p.clone(), c.clone())).copied().unwrap_or(0)).sum()
                };
                let mut a: Vec<(usize, &String)> = absent.iter().map(|c| (score(c), *c)).collect();
                a.sort_by(|x, y| y.0.cmp(&x.0).then(freq[y.1].cmp(&freq[x.1])).then(x.1.cmp(y.1)));
                a.into_iter().take(n_absent).map(|(_, c)| c).collect()
            }
        };
        if chosen.len() < n_absent {
            set.flagged.push((image_id, format!("only {} absent categories available, {n_absent} requested", chosen.len())));
        }
        for obj in chosen {
            set.questions.push(PopeQuestion { image_id, object: obj.clone(), subset, label: false, question: question(obj)? });
        }
    }
    Ok(set)
}

#[derive(Deserialize)]
struct QaRow {
    image_id: u64,
    object: String,
    subset: String,
    label: String,
    answer: String,
}

/// Reads `image_id,object,subset,label,answer` records (comma or tab
/// separated, with a header) or a JSON array of the same objects.
pub fn read_qa_records(path: &Path) -> Result<Vec<QaRecord>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<QaRow> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        let delim = if path.extension().is_some_and(|e| e == "tsv") { b'\t' } else { b',' };
        csv::ReaderBuilder::new()
            .delimiter(delim)
            .from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<_, _>>()?
    };
    rows.into_iter()
        .map(|r| {
            let label = parse_yes_no(&r.label)
                .ok_or_else(|| GlabError::Parse(format!("gold label `{}` for image {} is not yes/no", r.label, r.image_id)))?;
            Ok(QaRecord { image_id: r.image_id, object: r.object, subset: r.subset.parse()?, label, answer: r.answer })
        })
        .collect()
}
