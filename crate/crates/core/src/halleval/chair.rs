use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ratio, CocoAnnotations};
use crate::{GlabError, Result};

const DEFAULT_SYNONYMS: &str = include_str!("../../resources/coco_synonyms.txt");

/// Phrase to category lookup with longest-match extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymMap {
    phrases: HashMap<String, String>,
    max_words: usize,
}

fn plural_forms(word: &str) -> Vec<String> {
    let mut out = vec![format!("{word}s"), format!("{word}es")];
    if let Some(stem) = word.strip_suffix('y') {
        if !stem.ends_with(['a', 'e', 'i', 'o', 'u']) {
            out.push(format!("{stem}ies"));
        }
    }
    if let Some(stem) = word.strip_suffix("fe").or_else(|| word.strip_suffix('f')) {
        out.push(format!("{stem}ves"));
    }
    out
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

impl SynonymMap {
    /// Parses `category: phrase, phrase, ...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (cat, rest) =
                line.split_once(':').ok_or_else(|| GlabError::Parse(format!("synonym line {} lacks `category:`", n + 1)))?;
            let cat = cat.trim().to_string();
            if cat.is_empty() {
                return Err(GlabError::Parse(format!("synonym line {} has an empty category", n + 1)));
            }
            entries.push((cat.clone(), cat.clone()));
            for p in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                entries.push((p.to_string(), cat.clone()));
            }
        }
        let mut phrases = HashMap::new();
        // exact phrases win over generated plurals
        for (p, cat) in &entries {
            let w = words(p);
            let Some((last, head)) = w.split_last() else { continue };
            for form in plural_forms(last) {
                let mut v = head.to_vec();
                v.push(form);
                phrases.entry(v.join(" ")).or_insert_with(|| cat.clone());
            }
        }
        for (p, cat) in &entries {
            phrases.insert(words(p).join(" "), cat.clone());
        }
        let max_words = phrases.keys().map(|k| k.split(' ').count()).max().unwrap_or(1);
        Ok(Self { phrases, max_words })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.phrases.values().cloned().collect()
    }

    /// `(phrase, category)` for each mention, scanning left to right and
    /// preferring the longest phrase at each position.
    pub fn extract(&self, text: &str) -> Vec<(String, String)> {
        let w = words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < w.len() {
            let mut hit = None;
            for len in (1..=self.max_words.min(w.len() - i)).rev() {
                let phrase = w[i..i + len].join(" ");
                if let Some(cat) = self.phrases.get(&phrase) {
                    hit = Some((len, phrase, cat.clone()));
                    break;
                }
            }
            match hit {
                Some((len, phrase, cat)) => {
                    out.push((phrase, cat));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

impl Default for SynonymMap {
    fn default() -> Self {
        Self::parse(DEFAULT_SYNONYMS).expect("bundled synonym list parses")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionDetail {
    pub image_id: u64,
    /// Distinct categories mentioned.
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
    pub sentences: usize,
    pub sentences_hallucinated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub captions: usize,
    pub skipped: usize,
    pub mentioned: usize,
    pub hallucinated: usize,
    pub captions_hallucinated: usize,
    pub sentences: usize,
    pub sentences_hallucinated: usize,
    /// Hallucinated over mentioned objects, pooled over the corpus.
    pub chair_i: f64,
    /// Captions with a hallucination over captions.
    pub chair_s: f64,
    /// Sentences with a hallucination over sentences.
    pub chair_s_sentence: f64,
    pub details: Vec<CaptionDetail>,
    pub diagnostics: Vec<String>,
}

fn sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?']).filter(|s| s.chars().any(char::is_alphanumeric)).collect()
}

/// CHAIR over `captions`; each caption's distinct mentioned categories are
/// checked against its image's annotation set.
pub fn chair_scores(captions: &[Caption], ann: &CocoAnnotations, synonyms: &SynonymMap) -> ChairResult {
    let mut details = Vec::new();
    let mut diagnostics = Vec::new();
    for c in captions {
        let Some(truth) = ann.images.get(&c.image_id) else {
            diagnostics.push(format!("image {} has no annotations; caption skipped", c.image_id));
            continue;
        };
        let mentioned: BTreeSet<String> = synonyms.extract(&c.text).into_iter().map(|(_, cat)| cat).collect();
        let hallucinated: Vec<String> = mentioned.iter().filter(|m| !truth.contains(*m)).cloned().collect();
        let sents = sentences(&c.text);
        let bad_sents = sents
            .iter()
            .filter(|s| synonyms.extract(s).iter().any(|(_, cat)| !truth.contains(cat)))
            .count();
        details.push(CaptionDetail {
            image_id: c.image_id,
            mentioned: mentioned.into_iter().collect(),
            hallucinated,
            sentences: sents.len(),
            sentences_hallucinated: bad_sents,
        });
    }
    let mentioned: usize = details.iter().map(|d| d.mentioned.len()).sum();
    let hallucinated: usize = details.iter().map(|d| d.hallucinated.len()).sum();
    let captions_hallucinated = details.iter().filter(|d| !d.hallucinated.is_empty()).count();
    let sentences: usize = details.iter().map(|d| d.sentences).sum();
    let sentences_hallucinated: usize = details.iter().map(|d| d.sentences_hallucinated).sum();
    ChairResult {
        captions: details.len(),
        skipped: captions.len() - details.len(),
        mentioned,
        hallucinated,
        captions_hallucinated,
        sentences,
        sentences_hallucinated,
        chair_i: ratio(hallucinated, mentioned),
        chair_s: ratio(captions_hallucinated, details.len()),
        chair_s_sentence: ratio(sentences_hallucinated, sentences),
        details,
        diagnostics,
    }
}

#[derive(Deserialize)]
struct CaptionRow {
    image_id: u64,
    #[serde(alias = "text")]
    caption: String,
}

/// Reads `image_id,caption` records (comma or tab separated with a header),
/// or a JSON array of `{image_id, caption}` objects.
pub fn read_captions(path: &Path) -> Result<Vec<Caption>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<CaptionRow> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        let delim = if path.extension().is_some_and(|e| e == "tsv") { b'\t' } else { b',' };
        csv::ReaderBuilder::new()
            .delimiter(delim)
            .from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<_, _>>()?
    };
    Ok(rows.into_iter().map(|r| Caption { image_id: r.image_id, text: r.caption }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(entries: &[(u64, &[&str])]) -> CocoAnnotations {
        CocoAnnotations::from_sets(
            Vec::new(),
            entries.iter().map(|(id, cats)| (*id, cats.iter().map(|c| c.to_string()).collect())).collect::<std::collections::BTreeMap<_, _>>(),
        )
    }

    fn cap(id: u64, t: &str) -> Caption {
        Caption { image_id: id, text: t.into() }
    }

    #[test]
    fn dog_and_cat() {
        let r = chair_scores(&[cap(1, "a dog and a cat")], &ann(&[(1, &["dog"])]), &SynonymMap::default());
        assert_eq!((r.chair_i, r.chair_s), (0.5, 1.0));
    }

    #[test]
    fn synonym_is_grounded() {
        let r = chair_scores(&[cap(1, "A puppy sleeps.")], &ann(&[(1, &["dog"])]), &SynonymMap::default());
        assert_eq!((r.mentioned, r.hallucinated), (1, 0));
    }

    #[test]
    fn longest_match_wins() {
        let s = SynonymMap::default();
        let m = s.extract("a hot dog next to two teddy bears and a traffic light");
        let cats: Vec<&str> = m.iter().map(|(_, c)| c.as_str()).collect();
        assert_eq!(cats, vec!["hot dog", "teddy bear", "traffic light"]);
    }

    #[test]
    fn zero_mentions_count_as_clean_caption() {
        let r = chair_scores(&[cap(1, "Nothing to see here."), cap(1, "a cat")], &ann(&[(1, &["dog"])]), &SynonymMap::default());
        assert_eq!((r.mentioned, r.hallucinated), (1, 1));
        assert_eq!(r.chair_s, 0.5);
    }

    #[test]
    fn missing_image_is_skipped() {
        let r = chair_scores(&[cap(9, "a cat")], &ann(&[(1, &["dog"])]), &SynonymMap::default());
        assert_eq!((r.captions, r.skipped, r.diagnostics.len()), (0, 1, 1));
        assert_eq!(r.chair_i, 0.0);
    }

    #[test]
    fn sentence_level_variant() {
        let r = chair_scores(&[cap(1, "A dog runs. A cat sits. Grass.")], &ann(&[(1, &["dog"])]), &SynonymMap::default());
        assert_eq!((r.sentences, r.sentences_hallucinated), (3, 1));
        assert!((r.chair_s_sentence - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn plurals_and_irregulars() {
        let s = SynonymMap::default();
        let cats: Vec<String> = s.extract("three knives, two people and some buses").into_iter().map(|(_, c)| c).collect();
        assert_eq!(cats, vec!["knife", "person", "bus"]);
    }
}
