//! Manifest records paired with their loaded feature maps.

use std::path::Path;

use super::featfile::{read_feature_file, write_feature_file};
use super::manifest::{to_jsonl, Manifest, ManifestRecord, Role, Split};
use crate::error::{Error, Result};
use crate::pyramid::{extract_pyramid, FeatureMap, PyramidConfig, PyramidFeatures};
use crate::retrieval::{Item, QueryAttributes};
use crate::scalar::{DType, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    records: Vec<ManifestRecord>,
    maps: Vec<FeatureMap<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// All maps must share one channel count.
    pub fn new(records: Vec<ManifestRecord>, maps: Vec<FeatureMap<T>>) -> Result<Self> {
        if records.len() != maps.len() {
            return Err(Error::dimension("dataset", &[records.len()], &[maps.len()]));
        }
        if let Some(first) = maps.first() {
            if let Some((r, m)) = records
                .iter()
                .zip(&maps)
                .find(|(_, m)| m.channels() != first.channels())
            {
                return Err(Error::Data(format!(
                    "item `{}` has {} channels, expected {}",
                    r.id,
                    m.channels(),
                    first.channels()
                )));
            }
        }
        Ok(Dataset { records, maps })
    }

    /// Loads every feature file of a validated manifest.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        manifest.validate(false)?;
        let mut maps = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let path = manifest.resolve(r);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "feature file for `{}` not found at {}",
                    r.id,
                    path.display()
                )));
            }
            maps.push(read_feature_file::<T>(&path)?.0);
        }
        Self::new(manifest.records.clone(), maps)
    }

    /// Writes `features/<id>.spyr` files and `manifest.jsonl` under `dir`.
    /// Record paths are rewritten relative to `dir`.
    pub fn save(&self, dir: &Path, dtype: DType, header: &str) -> Result<Manifest> {
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut records = self.records.clone();
        for (r, m) in records.iter_mut().zip(&self.maps) {
            r.path = Path::new("features").join(format!("{}.spyr", r.id));
            write_feature_file(&dir.join(&r.path), m, dtype)?;
        }
        let mut text = String::new();
        for line in header.lines() {
            text.push_str("# ");
            text.push_str(line.trim_start_matches("# "));
            text.push('\n');
        }
        text.push_str(&to_jsonl(&records));
        let path = dir.join("manifest.jsonl");
        super::write_atomic(&path, text.as_bytes())?;
        Ok(Manifest::new(records, dir))
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn maps(&self) -> &[FeatureMap<T>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.maps.first().map(FeatureMap::channels)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            records: self.records.clone(),
            maps: self.maps.iter().map(FeatureMap::cast).collect(),
        }
    }

    /// Window features of every item, in item order.
    pub fn pyramids(&self, cfg: PyramidConfig) -> Result<Vec<PyramidFeatures<T>>> {
        self.maps.iter().map(|m| extract_pyramid(m, &cfg)).collect()
    }

    /// Queries (optionally restricted to `category`), the full gallery of
    /// `split` and the query attributes.
    pub fn retrieval_sets_in(
        &self,
        split: Split,
        category: Option<&str>,
    ) -> (Vec<Item<'_, T>>, Vec<Item<'_, T>>, Vec<QueryAttributes>) {
        let mut queries = Vec::new();
        let mut gallery = Vec::new();
        let mut attrs = Vec::new();
        for (r, m) in self.records.iter().zip(&self.maps) {
            if r.split != split {
                continue;
            }
            if category.is_some() && r.category.as_deref() != category {
                continue;
            }
            let item = Item {
                id: &r.id,
                identity: &r.identity,
                map: m,
            };
            match r.role {
                Role::Query => {
                    queries.push(item);
                    attrs.push(r.attributes());
                }
                Role::Gallery => gallery.push(item),
            }
        }
        (queries, gallery, attrs)
    }

    pub fn retrieval_sets(
        &self,
        split: Split,
    ) -> (Vec<Item<'_, T>>, Vec<Item<'_, T>>, Vec<QueryAttributes>) {
        self.retrieval_sets_in(split, None)
    }
}
