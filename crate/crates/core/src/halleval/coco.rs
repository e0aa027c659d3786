use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{GlabError, Result};

#[derive(Deserialize)]
struct RawInstances {
    #[serde(default)]
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

/// Object categories present in each image of a COCO-style instances file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoAnnotations {
    pub categories: BTreeSet<String>,
    pub images: BTreeMap<u64, BTreeSet<String>>,
}

impl CocoAnnotations {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawInstances =
            serde_json::from_str(text).map_err(|e| GlabError::Parse(format!("not a COCO instances file: {e}")))?;
        let names: BTreeMap<u64, String> = raw.categories.into_iter().map(|c| (c.id, c.name)).collect();
        let mut images: BTreeMap<u64, BTreeSet<String>> = raw.images.into_iter().map(|i| (i.id, BTreeSet::new())).collect();
        for a in raw.annotations {
            let name = names
                .get(&a.category_id)
                .ok_or_else(|| GlabError::Parse(format!("annotation refers to unknown category {}", a.category_id)))?;
            images.entry(a.image_id).or_default().insert(name.clone());
        }
        Ok(Self { categories: names.into_values().collect(), images })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_sets(categories: impl IntoIterator<Item = String>, images: BTreeMap<u64, BTreeSet<String>>) -> Self {
        let mut categories: BTreeSet<String> = categories.into_iter().collect();
        for set in images.values() {
            categories.extend(set.iter().cloned());
        }
        Self { categories, images }
    }

    /// Number of images containing each category.
    pub fn frequency(&self) -> BTreeMap<String, usize> {
        let mut f: BTreeMap<String, usize> = self.categories.iter().map(|c| (c.clone(), 0)).collect();
        for set in self.images.values() {
            for c in set {
                *f.entry(c.clone()).or_default() += 1;
            }
        }
        f
    }

    /// Number of images containing both categories, keyed by ordered pair.
    pub fn cooccurrence(&self) -> BTreeMap<(String, String), usize> {
        let mut m = BTreeMap::new();
        for set in self.images.values() {
            for a in set {
                for b in set {
                    if a != b {
                        *m.entry((a.clone(), b.clone())).or_default() += 1;
                    }
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_instances() {
        let text = r#"{"images":[{"id":1},{"id":2},{"id":3}],
            "annotations":[{"image_id":1,"category_id":18},{"image_id":1,"category_id":18},{"image_id":2,"category_id":17}],
            "categories":[{"id":17,"name":"cat"},{"id":18,"name":"dog"}]}"#;
        let a = CocoAnnotations::from_json(text).unwrap();
        assert_eq!(a.images[&1], BTreeSet::from(["dog".to_string()]));
        assert!(a.images[&3].is_empty());
        assert_eq!(a.frequency()["dog"], 1);
    }
}
