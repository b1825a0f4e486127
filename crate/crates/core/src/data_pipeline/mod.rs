//! Interaction records, feature schemas, dataset loaders, and the cold-start
//! split (old items versus new items with warm-a/b/c/test groups).

mod movielens;
mod split;
mod tabular;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::freq_bucket;
use crate::error::{Error, Result};

pub use movielens::load_movielens_1m;
pub use split::{export_split, make_cold_start_split, ColdStartSplit, SplitManifest};
pub use tabular::{load_tabular, TabularConfig, TabularItemColumn};

/// One labeled user-item event. Field values are vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub item_id: usize,
    /// One value per user field of the schema.
    pub user_fields: Vec<usize>,
    /// One nonempty value set per item field; single-valued fields hold one id.
    pub item_fields: Vec<Vec<usize>>,
    pub label: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub vocab_size: usize,
    pub multi_valued: bool,
}

impl FieldDescriptor {
    pub fn single(name: impl Into<String>, vocab_size: usize) -> Self {
        FieldDescriptor {
            name: name.into(),
            vocab_size,
            multi_valued: false,
        }
    }

    pub fn multi(name: impl Into<String>, vocab_size: usize) -> Self {
        FieldDescriptor {
            name: name.into(),
            vocab_size,
            multi_valued: true,
        }
    }
}

/// Field layout shared by every record of a dataset.
///
/// The full ordered field list is `user_id, user_fields.., item_id,
/// item_fields..`; `side_info` names the item fields used to warm item
/// embeddings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub user_id: FieldDescriptor,
    pub user_fields: Vec<FieldDescriptor>,
    pub item_id: FieldDescriptor,
    pub item_fields: Vec<FieldDescriptor>,
    pub side_info: Vec<String>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        for name in &self.side_info {
            if !self.item_fields.iter().any(|f| &f.name == name) {
                return Err(Error::Schema(format!("side-info field `{name}` is not an item field")));
            }
        }
        if self.side_info.is_empty() {
            return Err(Error::Schema("at least one side-info field is required".into()));
        }
        let mut names: Vec<&str> = self.fields().iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schema("duplicate field names".into()));
        }
        if self.user_fields.iter().any(|f| f.multi_valued) {
            return Err(Error::Schema("user fields must be single-valued".into()));
        }
        Ok(())
    }

    pub fn fields(&self) -> Vec<&FieldDescriptor> {
        let mut out = vec![&self.user_id];
        out.extend(&self.user_fields);
        out.push(&self.item_id);
        out.extend(&self.item_fields);
        out
    }

    /// Position of the item-id field in [`FeatureSchema::fields`].
    pub fn item_slot(&self) -> usize {
        1 + self.user_fields.len()
    }

    /// Indices into `item_fields` of the side-info fields, in declaration order.
    pub fn side_info_indices(&self) -> Vec<usize> {
        self.side_info
            .iter()
            .filter_map(|n| self.item_fields.iter().position(|f| &f.name == n))
            .collect()
    }

    /// Check a record against the declared vocabularies.
    pub fn check_record(&self, r: &InteractionRecord) -> Result<()> {
        let oov = |f: &FieldDescriptor, id: usize| Error::OutOfVocabulary {
            field: f.name.clone(),
            id,
            vocab: f.vocab_size,
        };
        if r.label > 1 {
            return Err(Error::Schema(format!("label {} is not binary", r.label)));
        }
        if r.user_id >= self.user_id.vocab_size {
            return Err(oov(&self.user_id, r.user_id));
        }
        if r.item_id >= self.item_id.vocab_size {
            return Err(oov(&self.item_id, r.item_id));
        }
        if r.user_fields.len() != self.user_fields.len() || r.item_fields.len() != self.item_fields.len() {
            return Err(Error::Schema("record field count differs from schema".into()));
        }
        for (f, &v) in self.user_fields.iter().zip(&r.user_fields) {
            if v >= f.vocab_size {
                return Err(oov(f, v));
            }
        }
        for (f, vs) in self.item_fields.iter().zip(&r.item_fields) {
            if vs.is_empty() || (!f.multi_valued && vs.len() != 1) {
                return Err(Error::Schema(format!("field `{}` has {} values", f.name, vs.len())));
            }
            if let Some(&v) = vs.iter().find(|&&v| v >= f.vocab_size) {
                return Err(oov(f, v));
            }
        }
        Ok(())
    }
}

/// Maps raw string keys to dense ids in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn id(&mut self, key: &str) -> usize {
        let next = self.index.len();
        *self.index.entry(key.to_string()).or_insert(next)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Observed interaction counts per item, bucketized for the decoder condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    buckets: usize,
}

impl FrequencyTable {
    pub fn new(num_items: usize, buckets: usize) -> Self {
        assert!(buckets >= 1, "bucket count must be positive");
        FrequencyTable {
            counts: vec![0; num_items],
            buckets,
        }
    }

    pub fn from_records<'a>(num_items: usize, buckets: usize, records: impl IntoIterator<Item = &'a InteractionRecord>) -> Self {
        let mut t = FrequencyTable::new(num_items, buckets);
        t.observe(records);
        t
    }

    pub fn observe<'a>(&mut self, records: impl IntoIterator<Item = &'a InteractionRecord>) {
        for r in records {
            self.counts[r.item_id] += 1;
        }
    }

    pub fn count(&self, item: usize) -> u64 {
        self.counts[item]
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets
    }

    pub fn bucket(&self, item: usize) -> usize {
        freq_bucket(self.counts[item], self.buckets)
    }
}

/// Item side information looked up by item id, collected from records.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    fields: Vec<Option<Vec<Vec<usize>>>>,
}

impl ItemCatalog {
    pub fn from_records<'a>(num_items: usize, records: impl IntoIterator<Item = &'a InteractionRecord>) -> Self {
        let mut fields = vec![None; num_items];
        for r in records {
            if fields[r.item_id].is_none() {
                fields[r.item_id] = Some(r.item_fields.clone());
            }
        }
        ItemCatalog { fields }
    }

    pub fn item_fields(&self, item: usize) -> Result<&[Vec<usize>]> {
        self.fields
            .get(item)
            .and_then(Option::as_deref)
            .ok_or_else(|| Error::OutOfVocabulary {
                field: "item_id".into(),
                id: item,
                vocab: self.fields.len(),
            })
    }
}

/// Deterministic shuffled index batches; the final partial batch is kept.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Record batches in a seed-determined order.
pub fn batch_iter(records: &[InteractionRecord], batch_size: usize, seed: u64) -> impl Iterator<Item = Vec<&InteractionRecord>> {
    batch_indices(records.len(), batch_size, seed)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &records[i]).collect())
}
