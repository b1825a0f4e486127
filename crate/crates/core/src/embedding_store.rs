//! Categorical embedding tables for every schema field, and the log-bucket
//! frequency embedding used as the decoder condition.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_pipeline::FeatureSchema;
use crate::error::{Error, Result};
use crate::nn::{uniform, Bound, ParamId, ParamStore};
use crate::seed;

pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_BUCKETS: usize = 10;

/// `min(floor(log2(count + 1)), buckets - 1)`.
pub fn freq_bucket(count: u64, buckets: usize) -> usize {
    assert!(buckets >= 1, "bucket count must be positive");
    let b = (u64::BITS - 1 - (count + 1).leading_zeros()) as usize;
    b.min(buckets - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Single,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
    pub pooling: Pooling,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreMeta {
    dim: usize,
    fields: Vec<FieldSpec>,
    schema: FeatureSchema,
}

/// One `vocab x dim` table per schema field, in [`FeatureSchema::fields`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    specs: Vec<FieldSpec>,
    schema: FeatureSchema,
    params: ParamStore,
    tables: Vec<ParamId>,
}

impl EmbeddingStore {
    /// Entries drawn uniformly from `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn new(schema: &FeatureSchema, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        schema.validate()?;
        let mut rng = seed::rng(seed, "embedding-store");
        let bound = 1.0 / (dim as f64).sqrt();
        let mut params = ParamStore::new();
        let mut specs = Vec::new();
        let mut tables = Vec::new();
        for f in schema.fields() {
            let spec = FieldSpec {
                name: f.name.clone(),
                vocab_size: f.vocab_size,
                pooling: if f.multi_valued { Pooling::MeanPool } else { Pooling::Single },
                trainable: true,
            };
            tables.push(params.add_sparse(f.name.clone(), uniform(&mut rng, f.vocab_size.max(1), dim, bound)));
            specs.push(spec);
        }
        Ok(EmbeddingStore {
            dim,
            specs,
            schema: schema.clone(),
            params,
            tables,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn specs(&self) -> &[FieldSpec] {
        &self.specs
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn table_id(&self, field: usize) -> ParamId {
        self.tables[field]
    }

    pub fn field_index(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown embedding field `{name}`")))
    }

    pub fn item_field(&self) -> usize {
        self.schema.item_slot()
    }

    fn check_id(&self, field: usize, id: usize) -> Result<()> {
        let spec = &self.specs[field];
        if id >= spec.vocab_size {
            return Err(Error::OutOfVocabulary {
                field: spec.name.clone(),
                id,
                vocab: spec.vocab_size,
            });
        }
        Ok(())
    }

    pub fn row(&self, field: usize, id: usize) -> Result<&[f64]> {
        self.check_id(field, id)?;
        Ok(self.params.get(self.tables[field]).row_slice(id))
    }

    pub fn set_row(&mut self, field: usize, id: usize, values: &[f64]) -> Result<()> {
        self.check_id(field, id)?;
        if values.len() != self.dim {
            return Err(Error::Dimension(format!("row of length {} for dim {}", values.len(), self.dim)));
        }
        let t = self.tables[field];
        self.params.get_mut(t).row_slice_mut(id).copy_from_slice(values);
        Ok(())
    }

    /// Copies of the named rows.
    pub fn lookup(&self, field: &str, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        let f = self.field_index(field)?;
        ids.iter().map(|&id| self.row(f, id).map(<[f64]>::to_vec)).collect()
    }

    /// Arithmetic mean of the member rows.
    pub fn pool_multivalue(&self, field: &str, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Schema(format!("empty value set for field `{field}`")));
        }
        let rows = self.lookup(field, ids)?;
        let mut out = vec![0.0; self.dim];
        for r in &rows {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        let n = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Mean-pooled embeddings of `bags` from field `field`, one row per bag.
    pub fn embed(&self, g: &mut Graph, bound: &Bound, field: usize, bags: Vec<Vec<usize>>) -> Result<Var> {
        for bag in &bags {
            if bag.is_empty() {
                return Err(Error::Schema(format!("empty value set for field `{}`", self.specs[field].name)));
            }
            for &id in bag {
                self.check_id(field, id)?;
            }
        }
        Ok(g.embed_bag(bound.var(self.tables[field]), bags))
    }

    /// Writes `embeddings.bin` and `embeddings.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("embeddings.bin"))?;
        let meta = StoreMeta {
            dim: self.dim,
            fields: self.specs.clone(),
            schema: self.schema.clone(),
        };
        let p = dir.join("embeddings.json");
        fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("embeddings.json");
        let meta: StoreMeta = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let params = ParamStore::load(&dir.join("embeddings.bin"))?;
        let tables = meta
            .fields
            .iter()
            .map(|f| {
                params
                    .find(&f.name)
                    .ok_or_else(|| Error::Schema(format!("checkpoint lacks table `{}`", f.name)))
            })
            .collect::<Result<_>>()?;
        Ok(EmbeddingStore {
            dim: meta.dim,
            specs: meta.fields,
            schema: meta.schema,
            params,
            tables,
        })
    }
}

/// Learned `buckets x dim` table embedding [`freq_bucket`] ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyEmbedding {
    pub buckets: usize,
    pub table: ParamId,
}

impl FrequencyEmbedding {
    pub fn new(params: &mut ParamStore, buckets: usize, dim: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let table = params.add_sparse("freq_bucket", uniform(rng, buckets, dim, bound));
        FrequencyEmbedding { buckets, table }
    }

    pub fn embed(&self, g: &mut Graph, bound: &Bound, bucket_ids: &[usize]) -> Var {
        assert!(bucket_ids.iter().all(|&b| b < self.buckets), "bucket id out of range");
        g.gather_rows(bound.var(self.table), bucket_ids.to_vec())
    }

    pub fn row<'a>(&self, params: &'a ParamStore, bucket: usize) -> &'a [f64] {
        params.get(self.table).row_slice(bucket)
    }
}
