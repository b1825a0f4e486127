//! CTR backbones (DeepFM and Wide&Deep) over per-field embeddings and
//! first-order weights, plus the binary cross-entropy objective.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data_pipeline::{FeatureSchema, FieldDescriptor, InteractionRecord};
use crate::embedding_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::seed;

pub const LOGIT_CLAMP: f64 = 15.0;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "deepfm")]
    DeepFm,
    #[serde(rename = "widedeep")]
    WideDeep,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepfm" => Ok(BackboneKind::DeepFm),
            "widedeep" => Ok(BackboneKind::WideDeep),
            _ => Err(Error::Config(format!("unknown backbone `{s}` (expected deepfm or widedeep)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub mlp: Vec<usize>,
    pub embed_dim: usize,
    pub fields: Vec<FieldDescriptor>,
}

impl BackboneConfig {
    pub fn for_schema(kind: BackboneKind, schema: &FeatureSchema, embed_dim: usize) -> Self {
        BackboneConfig {
            kind,
            mlp: vec![64, 32],
            embed_dim,
            fields: schema.fields().into_iter().cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.fields.is_empty() {
            return Err(Error::Config("backbone needs at least one field".into()));
        }
        Ok(())
    }

    /// Fails unless the field list is exactly the schema's.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        let fields: Vec<FieldDescriptor> = schema.fields().into_iter().cloned().collect();
        if fields != self.fields {
            return Err(Error::Schema("backbone field list does not match the feature schema".into()));
        }
        Ok(())
    }
}

/// Probabilities and labels of one evaluated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probabilities: Vec<f64>,
    labels: Vec<u8>,
}

impl PredictionBatch {
    pub fn new(probabilities: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if probabilities.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} probabilities for {} labels",
                probabilities.len(),
                labels.len()
            )));
        }
        Ok(PredictionBatch { probabilities, labels })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(batch: &PredictionBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty prediction batch".into()));
    }
    let total: f64 = batch
        .probabilities
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Graph form of [`bce_loss`] on clamped logits.
pub fn tape_bce(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let y = g.constant(Tensor::column(&labels.iter().map(|&l| l as f64).collect::<Vec<_>>()));
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = g.ln(p);
    let one_minus = g.neg(p);
    let one_minus = g.offset(one_minus, 1.0);
    let lq = g.ln(one_minus);
    let pos = g.mul(y, lp);
    let not_y = g.neg(y);
    let not_y = g.offset(not_y, 1.0);
    let neg = g.mul(not_y, lq);
    let ll = g.add(pos, neg);
    let m = g.mean(ll);
    g.neg(m)
}

/// Value-level inputs of a batch: one `B x d` embedding matrix and one
/// `B x 1` first-order column per field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch {
    pub items: Vec<usize>,
    pub item_slot: usize,
    pub embeddings: Vec<Tensor>,
    pub wide: Vec<Tensor>,
    pub labels: Vec<u8>,
}

/// Replace the item-ID slot of every sample with the warm vector of its item.
pub fn swap_item_embedding(batch: &FieldBatch, warm: &BTreeMap<usize, Vec<f64>>) -> Result<FieldBatch> {
    let mut out = batch.clone();
    let slot = &mut out.embeddings[batch.item_slot];
    for (b, item) in batch.items.iter().enumerate() {
        let v = warm
            .get(item)
            .ok_or_else(|| Error::Config(format!("no warm embedding for item {item}")))?;
        if v.len() != slot.cols() {
            return Err(Error::Dimension(format!("warm embedding of item {item} has width {}", v.len())));
        }
        slot.row_slice_mut(b).copy_from_slice(v);
    }
    Ok(out)
}

/// Per-field value sets of a record, in [`FeatureSchema::fields`] order.
pub fn record_bags(r: &InteractionRecord) -> Vec<Vec<usize>> {
    let mut out = vec![vec![r.user_id]];
    out.extend(r.user_fields.iter().map(|&v| vec![v]));
    out.push(vec![r.item_id]);
    out.extend(r.item_fields.iter().cloned());
    out
}

fn transpose_bags(records: &[&InteractionRecord], n_fields: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut per_field = vec![Vec::with_capacity(records.len()); n_fields];
    for r in records {
        let bags = record_bags(r);
        if bags.len() != n_fields {
            return Err(Error::Schema(format!("record has {} fields, expected {n_fields}", bags.len())));
        }
        for (f, bag) in bags.into_iter().enumerate() {
            per_field[f].push(bag);
        }
    }
    Ok(per_field)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    bias: ParamId,
    first_order: Vec<ParamId>,
    mlp: Mlp,
}

impl Backbone {
    /// First-order weights and the global bias start at zero.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let bias = params.add("bias", Tensor::zeros(1, 1));
        let first_order = config
            .fields
            .iter()
            .map(|f| params.add_sparse(format!("first_order.{}", f.name), Tensor::zeros(f.vocab_size.max(1), 1)))
            .collect();
        let mut widths = vec![config.fields.len() * config.embed_dim];
        widths.extend_from_slice(&config.mlp);
        widths.push(1);
        let mlp = Mlp::new(&mut params, "deep", &widths, Activation::Relu, &mut seed::rng(seed, "backbone-mlp"));
        Ok(Backbone {
            config,
            params,
            bias,
            first_order,
            mlp,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Clamped logits, `B x 1`.
    pub fn logits(&self, g: &mut Graph, bound: &Bound, embs: &[Var], wide: &[Var]) -> Var {
        self.logits_as(self.config.kind, g, bound, embs, wide)
    }

    fn logits_as(&self, kind: BackboneKind, g: &mut Graph, bound: &Bound, embs: &[Var], wide: &[Var]) -> Var {
        let mut linear = bound.var(self.bias);
        for &w in wide {
            linear = g.add(w, linear);
        }
        let x = g.concat_cols(embs);
        let deep = self.mlp.forward(g, bound, x);
        let mut logit = g.add(linear, deep);
        if kind == BackboneKind::DeepFm {
            let fm = fm_pairwise(g, embs);
            logit = g.add(logit, fm);
        }
        g.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    }

    /// Graph inputs for `records`: embeddings from `store`, first-order columns
    /// from this backbone.
    pub fn inputs(
        &self,
        g: &mut Graph,
        bound: &Bound,
        store: &EmbeddingStore,
        store_bound: &Bound,
        records: &[&InteractionRecord],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let per_field = transpose_bags(records, self.config.fields.len())?;
        let mut embs = Vec::with_capacity(per_field.len());
        let mut wide = Vec::with_capacity(per_field.len());
        for (f, bags) in per_field.into_iter().enumerate() {
            embs.push(store.embed(g, store_bound, f, bags.clone())?);
            wide.push(g.embed_bag(bound.var(self.first_order[f]), bags));
        }
        Ok((embs, wide))
    }

    /// Value-level [`Backbone::inputs`].
    pub fn gather(&self, store: &EmbeddingStore, records: &[&InteractionRecord]) -> Result<FieldBatch> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let sb = store.bind(&mut g, false);
        let (embs, wide) = self.inputs(&mut g, &b, store, &sb, records)?;
        Ok(FieldBatch {
            items: records.iter().map(|r| r.item_id).collect(),
            item_slot: store.item_field(),
            embeddings: embs.iter().map(|&v| g.value(v).clone()).collect(),
            wide: wide.iter().map(|&v| g.value(v).clone()).collect(),
            labels: records.iter().map(|r| r.label).collect(),
        })
    }

    fn eval(&self, kind: BackboneKind, batch: &FieldBatch) -> Result<Vec<f64>> {
        if batch.embeddings.len() != self.config.fields.len() || batch.wide.len() != self.config.fields.len() {
            return Err(Error::Dimension("field count differs from the backbone config".into()));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let embs: Vec<Var> = batch.embeddings.iter().map(|t| g.constant(t.clone())).collect();
        let wide: Vec<Var> = batch.wide.iter().map(|t| g.constant(t.clone())).collect();
        let z = self.logits_as(kind, &mut g, &b, &embs, &wide);
        let logits = g.value(z).data();
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite backbone logits".into()));
        }
        Ok(logits.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn predict(&self, batch: &FieldBatch) -> Result<PredictionBatch> {
        PredictionBatch::new(self.eval(self.config.kind, batch)?, batch.labels.clone())
    }

    fn single(field_embeddings: &[Vec<f64>], wide_inputs: &[f64], d: usize) -> Result<FieldBatch> {
        if field_embeddings.len() != wide_inputs.len() || field_embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::Dimension("field embeddings and first-order inputs disagree".into()));
        }
        Ok(FieldBatch {
            items: vec![0],
            item_slot: 0,
            embeddings: field_embeddings.iter().map(|e| Tensor::row(e)).collect(),
            wide: wide_inputs.iter().map(|&w| Tensor::scalar(w)).collect(),
            labels: vec![0],
        })
    }

    /// `sigmoid(bias + sum wide + FM pairwise + MLP)` for one sample.
    pub fn forward_deepfm(&self, field_embeddings: &[Vec<f64>], wide_inputs: &[f64]) -> Result<f64> {
        let batch = Self::single(field_embeddings, wide_inputs, self.config.embed_dim)?;
        Ok(self.eval(BackboneKind::DeepFm, &batch)?[0])
    }

    /// `sigmoid(bias + sum wide + MLP)` for one sample.
    pub fn forward_widedeep(&self, field_embeddings: &[Vec<f64>], wide_inputs: &[f64]) -> Result<f64> {
        let batch = Self::single(field_embeddings, wide_inputs, self.config.embed_dim)?;
        Ok(self.eval(BackboneKind::WideDeep, &batch)?[0])
    }

    /// Writes `backbone.bin` and `backbone.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("backbone.bin"))?;
        let p = dir.join("backbone.json");
        fs::write(&p, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("backbone.json");
        let config: BackboneConfig = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let params = ParamStore::load(&dir.join("backbone.bin"))?;
        let mut model = Backbone::new(config, 0)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id);
            match params.find(name) {
                Some(found) if found == id && params.get(found).shape() == model.params.get(id).shape() => {}
                _ => return Err(Error::Schema(format!("backbone checkpoint mismatch at `{name}`"))),
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::Schema("backbone checkpoint has extra parameters".into()));
        }
        model.params = params;
        Ok(model)
    }
}

/// `1/2 (||sum_f e_f||^2 - sum_f ||e_f||^2)` per row.
pub fn fm_pairwise(g: &mut Graph, embs: &[Var]) -> Var {
    let mut sum = embs[0];
    let first = g.square(embs[0]);
    let mut sq = g.sum_cols(first);
    for &e in &embs[1..] {
        sum = g.add(sum, e);
        let s = g.square(e);
        let s = g.sum_cols(s);
        sq = g.add(sq, s);
    }
    let total = g.square(sum);
    let total = g.sum_cols(total);
    let diff = g.sub(total, sq);
    g.scale(diff, 0.5)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
