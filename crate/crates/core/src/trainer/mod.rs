//! Experiment orchestration: pretrain the backbone on old items, train the
//! warm model, then evaluate the cold phase and three warm phases on the
//! new-item test set.

mod config;
mod metrics;
mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::backbone::{tape_bce, Backbone, BackboneConfig};
use crate::cvae_ensemble::{self, side_vector, CvaeEnsemble, EnsembleConfig};
use crate::data_pipeline::{
    batch_iter, load_movielens_1m, load_tabular, make_cold_start_split, ColdStartSplit, FeatureSchema, FrequencyTable,
    InteractionRecord, ItemCatalog, TabularConfig,
};
use crate::embedding_store::{EmbeddingStore, DEFAULT_BUCKETS};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamId};
use crate::uncertainty::{self, PointCloud};
use crate::{seed, synthetic};

pub use config::{DatasetKind, ExperimentConfig, Variant};
pub use metrics::{compute_acc, compute_auc};
pub use report::{emit_ablation, emit_report, load_report, svg_line_chart, Series};

const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cold,
    WarmA,
    WarmB,
    WarmC,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Cold, Phase::WarmA, Phase::WarmB, Phase::WarmC];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Cold => "cold",
            Phase::WarmA => "warm_a",
            Phase::WarmB => "warm_b",
            Phase::WarmC => "warm_c",
        }
    }
}

/// Test-set metrics after one phase, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub acc: f64,
    pub auc: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EuPoint {
    pub iteration: usize,
    pub value: f64,
}

/// Epistemic-uncertainty value per warm-model training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuTrace {
    pub variant: Variant,
    pub points: Vec<EuPoint>,
}

impl EuTrace {
    pub fn new(variant: Variant) -> Self {
        EuTrace {
            variant,
            points: Vec::new(),
        }
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.value)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pretrain_secs: f64,
    pub warm_model_secs: f64,
    pub protocol_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub phases: Vec<PhaseReport>,
    pub eu_trace: EuTrace,
    pub timings: Timings,
}

impl RunReport {
    pub fn phase(&self, phase: Phase) -> &PhaseReport {
        self.phases
            .iter()
            .find(|p| p.phase == phase)
            .expect("a run report holds every phase")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunReport>,
}

impl AblationReport {
    pub fn run(&self, variant: Variant) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.config.variant == variant)
    }
}

/// Dataset after splitting, with side information for every item.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: FeatureSchema,
    pub split: ColdStartSplit,
    pub catalog: ItemCatalog,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<(Vec<InteractionRecord>, FeatureSchema)> {
    let dir = || {
        config
            .data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("a data directory is required for this dataset".into()))
    };
    match config.dataset {
        DatasetKind::MovieLens1m => load_movielens_1m(dir()?),
        DatasetKind::Synthetic => synthetic::generate(&config.synthetic),
        DatasetKind::Tabular => {
            let path = dir()?;
            let file = if path.is_dir() { path.join("interactions.csv") } else { path.to_path_buf() };
            let tabular = match &config.tabular {
                Some(t) => t.clone(),
                None => {
                    let p = file.with_file_name("tabular.json");
                    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingFile(p.clone()))?;
                    serde_json::from_str::<TabularConfig>(&text)?
                }
            };
            load_tabular(&file, &tabular)
        }
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (records, schema) = load_dataset(config)?;
    prepare_records(&records, schema, config)
}

pub fn prepare_records(records: &[InteractionRecord], schema: FeatureSchema, config: &ExperimentConfig) -> Result<Prepared> {
    let split = make_cold_start_split(records, config.old_fraction, config.k_shot)?;
    let catalog = ItemCatalog::from_records(schema.item_id.vocab_size, records);
    Ok(Prepared { schema, split, catalog })
}

/// Backbone and embeddings after training on old items.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub store: EmbeddingStore,
    pub first_batch_loss: f64,
    pub epoch_losses: Vec<f64>,
}

fn check_loss(stage: &str, iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{stage}: non-finite loss {loss} at iteration {iteration}")))
    }
}

/// Train backbone and all embedding tables with BCE on `old_train`.
pub fn pretrain_backbone(old_train: &[InteractionRecord], schema: &FeatureSchema, config: &ExperimentConfig) -> Result<Pretrained> {
    if old_train.is_empty() {
        return Err(Error::EmptySplit("old_train is empty".into()));
    }
    let mut store = EmbeddingStore::new(schema, config.embed_dim, seed::derive(config.seed, "store"))?;
    let bcfg = BackboneConfig::for_schema(config.backbone, schema, config.embed_dim);
    let mut backbone = Backbone::new(bcfg, seed::derive(config.seed, "backbone"))?;
    let (mut adam_b, mut adam_s) = (Adam::new(config.lr), Adam::new(config.lr));
    let b_ids: Vec<ParamId> = backbone.params().ids().collect();
    let s_ids: Vec<ParamId> = store.params().ids().collect();
    let mut first_batch_loss = None;
    let mut epoch_losses = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.pretrain_epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for batch in batch_iter(old_train, config.batch_size, seed::derive(config.seed, &format!("pretrain-{epoch}"))) {
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g, true);
            let sb = store.bind(&mut g, true);
            let (embs, wide) = backbone.inputs(&mut g, &bb, &store, &sb, &batch)?;
            let logits = backbone.logits(&mut g, &bb, &embs, &wide);
            let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
            let loss = tape_bce(&mut g, logits, &labels);
            let value = g.scalar_value(loss);
            check_loss("pretrain", iteration, value)?;
            let grads = g.backward(loss);
            adam_b.step(backbone.params_mut(), &bb, &grads, b_ids.iter().copied());
            adam_s.step(store.params_mut(), &sb, &grads, s_ids.iter().copied());
            first_batch_loss.get_or_insert(value);
            total += value;
            batches += 1;
            iteration += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    if let Some(name) = backbone.params().first_non_finite().or(store.params().first_non_finite()) {
        return Err(Error::Numerical(format!("pretrain: non-finite parameter `{name}`")));
    }
    Ok(Pretrained {
        backbone,
        store,
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
        epoch_losses,
    })
}

/// Concatenated side-information embeddings for every cataloged item.
#[derive(Debug, Clone)]
struct SideTable {
    rows: Vec<Option<Vec<f64>>>,
}

impl SideTable {
    fn new(store: &EmbeddingStore, catalog: &ItemCatalog, num_items: usize) -> Result<Self> {
        let rows = (0..num_items)
            .map(|item| match catalog.item_fields(item) {
                Ok(_) => side_vector(store, catalog, item).map(Some),
                Err(_) => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(SideTable { rows })
    }

    fn get(&self, item: usize) -> Result<&[f64]> {
        self.rows
            .get(item)
            .and_then(Option::as_deref)
            .ok_or_else(|| Error::Config(format!("no side information for item {item}")))
    }
}

/// Trained warm model and its uncertainty trace.
#[derive(Debug, Clone)]
pub struct WarmTraining {
    pub ensemble: CvaeEnsemble,
    pub trace: EuTrace,
    pub losses: Vec<f64>,
}

/// Minimize `bce(warm-swapped forward) + alpha * reconstruction + alignment +
/// lambda * epistemic` over the ensemble parameters with the backbone and
/// embeddings frozen.
pub fn train_warm_model(
    old_train: &[InteractionRecord],
    pretrained: &Pretrained,
    catalog: &ItemCatalog,
    config: &ExperimentConfig,
) -> Result<WarmTraining> {
    let side = SideTable::new(&pretrained.store, catalog, pretrained.store.schema().item_id.vocab_size)?;
    train_warm_inner(old_train, pretrained, &side, config, seed::derive(config.seed, "warm-model"), None)
}

fn train_warm_inner(
    old_train: &[InteractionRecord],
    pretrained: &Pretrained,
    side: &SideTable,
    config: &ExperimentConfig,
    init_seed: u64,
    mut probe: Option<&mut Vec<Tensor>>,
) -> Result<WarmTraining> {
    if old_train.is_empty() {
        return Err(Error::EmptySplit("old_train is empty".into()));
    }
    let store = &pretrained.store;
    let backbone = &pretrained.backbone;
    let schema = store.schema();
    let ecfg = EnsembleConfig::new(config.n_components, config.embed_dim, schema.side_info.len());
    let mut ensemble = CvaeEnsemble::new(ecfg, init_seed)?;
    let freq = FrequencyTable::from_records(schema.item_id.vocab_size, DEFAULT_BUCKETS, old_train);
    let item_field = store.item_field();
    let backend = config.distance_backend();
    let ids: Vec<ParamId> = ensemble.params().ids().collect();
    let mut adam = Adam::new(config.lr);
    let mut noise = seed::rng(config.seed, "warm-noise");
    let mut trace = EuTrace::new(config.variant);
    let mut losses = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.warm_epochs {
        for batch in batch_iter(old_train, config.batch_size, seed::derive(config.seed, &format!("warm-{epoch}"))) {
            let mut items: Vec<usize> = batch.iter().map(|r| r.item_id).collect();
            items.sort_unstable();
            items.dedup();
            let index: Vec<usize> = batch
                .iter()
                .map(|r| items.binary_search(&r.item_id).expect("item collected above"))
                .collect();
            let side_rows = items.iter().map(|&i| side.get(i).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
            let id_rows = items
                .iter()
                .map(|&i| store.row(item_field, i).map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>>>()?;
            let buckets: Vec<usize> = items.iter().map(|&i| freq.bucket(i)).collect();

            let mut g = Graph::new();
            let eb = ensemble.params().bind(&mut g, true);
            let bb = backbone.bind(&mut g, false);
            let sb = store.bind(&mut g, false);
            let s = g.constant(Tensor::from_rows(&side_rows));
            let v = g.constant(Tensor::from_rows(&id_rows));
            let out = ensemble.forward(&mut g, &eb, s, v, &buckets, Some(&mut noise as &mut dyn RngCore));
            let (mut embs, wide) = backbone.inputs(&mut g, &bb, store, &sb, &batch)?;
            embs[item_field] = g.gather_rows(out.combined, index);
            let logits = backbone.logits(&mut g, &bb, &embs, &wide);
            let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
            let bce = tape_bce(&mut g, logits, &labels);
            let recon = cvae_ensemble::tape::reconstruction_loss(&mut g, &out.id_decoded, v);
            let align = cvae_ensemble::tape::alignment_loss(&mut g, &out);
            let eu = if config.n_components > 1 {
                Some(uncertainty::tape::epistemic_loss(&mut g, &out.side_decoded, out.pi, backend))
            } else {
                None
            };
            let r = g.scale(recon, config.alpha);
            let mut loss = g.add(bce, r);
            loss = g.add(loss, align);
            if let (Some(e), true) = (eu, config.lambda_eu > 0.0) {
                let e = g.scale(e, config.lambda_eu);
                loss = g.add(loss, e);
            }
            let value = g.scalar_value(loss);
            check_loss("warm model", iteration, value)?;
            let eu_value = eu.map_or(0.0, |e| g.scalar_value(e));
            if !eu_value.is_finite() {
                return Err(Error::Numerical(format!("warm model: non-finite uncertainty at iteration {iteration}")));
            }
            if let Some(p) = probe.as_deref_mut() {
                p.push(g.value(out.combined).clone());
            }
            let grads = g.backward(loss);
            adam.step(ensemble.params_mut(), &eb, &grads, ids.iter().copied());
            trace.points.push(EuPoint {
                iteration,
                value: eu_value,
            });
            losses.push(value);
            iteration += 1;
        }
    }
    ensemble.check_parameters()?;
    Ok(WarmTraining { ensemble, trace, losses })
}

/// Test-set `(acc, auc)` as fractions.
pub fn evaluate(backbone: &Backbone, store: &EmbeddingStore, records: &[InteractionRecord]) -> Result<(f64, f64)> {
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let refs: Vec<&InteractionRecord> = chunk.iter().collect();
        let batch = backbone.gather(store, &refs)?;
        let pred = backbone.predict(&batch)?;
        scores.extend_from_slice(pred.probabilities());
        labels.extend_from_slice(pred.labels());
    }
    Ok((compute_acc(&scores, &labels, 0.5)?, compute_auc(&scores, &labels)?))
}

/// BCE fine-tuning of the item-ID rows touched by `records`; everything else
/// stays frozen.
fn finetune_item_rows(
    backbone: &Backbone,
    store: &mut EmbeddingStore,
    records: &[InteractionRecord],
    config: &ExperimentConfig,
    tag: &str,
) -> Result<()> {
    let table = store.table_id(store.item_field());
    let mut adam = Adam::new(config.lr);
    let mut iteration = 0;
    for epoch in 0..config.finetune_epochs {
        for batch in batch_iter(records, config.batch_size, seed::derive(config.seed, &format!("{tag}-{epoch}"))) {
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g, false);
            let sb = store.bind(&mut g, true);
            let (embs, wide) = backbone.inputs(&mut g, &bb, store, &sb, &batch)?;
            let logits = backbone.logits(&mut g, &bb, &embs, &wide);
            let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
            let loss = tape_bce(&mut g, logits, &labels);
            check_loss(tag, iteration, g.scalar_value(loss))?;
            let grads = g.backward(loss);
            adam.step(store.params_mut(), &sb, &grads, [table]);
            iteration += 1;
        }
    }
    Ok(())
}

/// Cold phase plus three warm phases over `split.test`. With a warm model,
/// new-item rows start at the warm embedding; after each fine-tune round the
/// previous warm embedding is swapped for one re-inferred with the updated
/// counts, keeping the fine-tuned residual. Without one, new-item rows keep
/// their random initialization.
pub fn run_cold_start_protocol(
    split: &ColdStartSplit,
    pretrained: &Pretrained,
    catalog: &ItemCatalog,
    warm: Option<&CvaeEnsemble>,
    config: &ExperimentConfig,
) -> Result<(Vec<PhaseReport>, EmbeddingStore)> {
    if split.test.is_empty() {
        return Err(Error::EmptySplit("the test partition is empty".into()));
    }
    for (name, part) in split.warm_groups() {
        if part.is_empty() {
            return Err(Error::EmptySplit(format!("the {name} partition is empty")));
        }
    }
    let backbone = &pretrained.backbone;
    let mut store = pretrained.store.clone();
    let item_field = store.item_field();
    let mut freq = FrequencyTable::from_records(store.schema().item_id.vocab_size, DEFAULT_BUCKETS, &split.old_train);
    let side = SideTable::new(&pretrained.store, catalog, store.schema().item_id.vocab_size)?;
    let infer = |model: &CvaeEnsemble, freq: &FrequencyTable| -> Result<BTreeMap<usize, Vec<f64>>> {
        split
            .new_item_ids
            .iter()
            .map(|&i| Ok((i, model.warm_embedding(side.get(i)?, freq.count(i))?)))
            .collect()
    };
    let mut current = match warm {
        Some(model) => {
            let v = infer(model, &freq)?;
            for (&item, row) in &v {
                store.set_row(item_field, item, row)?;
            }
            Some(v)
        }
        None => None,
    };
    let report = |phase: Phase, store: &EmbeddingStore| -> Result<PhaseReport> {
        let (acc, auc) = evaluate(backbone, store, &split.test)?;
        Ok(PhaseReport {
            phase,
            acc: 100.0 * acc,
            auc: 100.0 * auc,
            samples: split.test.len(),
        })
    };
    let mut phases = vec![report(Phase::Cold, &store)?];
    for (phase, (name, records)) in Phase::ALL[1..].iter().zip(split.warm_groups()) {
        finetune_item_rows(backbone, &mut store, records, config, name)?;
        freq.observe(records);
        if let (Some(model), Some(prev)) = (warm, current.as_mut()) {
            let next = infer(model, &freq)?;
            for (&item, v) in &next {
                let row: Vec<f64> = store
                    .row(item_field, item)?
                    .iter()
                    .zip(&prev[&item])
                    .zip(v)
                    .map(|((r, p), n)| r - p + n)
                    .collect();
                store.set_row(item_field, item, &row)?;
            }
            *prev = next;
        }
        phases.push(report(*phase, &store)?);
    }
    Ok((phases, store))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub backbone: Backbone,
    /// Embeddings after the last warm phase.
    pub store: EmbeddingStore,
    pub ensemble: Option<CvaeEnsemble>,
}

impl RunArtifacts {
    /// Writes `backbone/`, `embeddings/` and, with a warm model, `ensemble/`.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        self.backbone.save(&dir.join("backbone"))?;
        self.store.save(&dir.join("embeddings"))?;
        if let Some(e) = &self.ensemble {
            e.save(&dir.join("ensemble"))?;
        }
        Ok(())
    }
}

/// Uncertainty of `R` single-CVAE runs that differ only in parameter seed,
/// computed across the runs' warm embeddings at each iteration.
fn repeated_single_trace(
    prepared: &Prepared,
    pretrained: &Pretrained,
    side: &SideTable,
    config: &ExperimentConfig,
) -> Result<WarmTraining> {
    let mut probes: Vec<Vec<Tensor>> = Vec::with_capacity(config.eu_repeats);
    let mut first = None;
    for r in 0..config.eu_repeats {
        let init = if r == 0 {
            seed::derive(config.seed, "warm-model")
        } else {
            seed::derive(config.seed, &format!("warm-model-repeat-{r}"))
        };
        let mut probe = Vec::new();
        let run = train_warm_inner(&prepared.split.old_train, pretrained, side, config, init, Some(&mut probe))?;
        probes.push(probe);
        first.get_or_insert(run);
    }
    let mut run = first.expect("at least one repeat");
    let weights = vec![1.0 / probes.len() as f64; probes.len()];
    for (t, point) in run.trace.points.iter_mut().enumerate() {
        let clouds = probes
            .iter()
            .map(|p| PointCloud::new(p[t].clone()))
            .collect::<Result<Vec<_>>>()?;
        point.value = uncertainty::epistemic_loss(&clouds, &weights, config.distance_backend())?;
    }
    Ok(run)
}

/// Train and evaluate one variant on a prepared split and pretrained backbone.
pub fn run_variant(prepared: &Prepared, pretrained: &Pretrained, config: &ExperimentConfig, pretrain_secs: f64) -> Result<RunArtifacts> {
    let config = config.effective();
    config.validate()?;
    let start = Instant::now();
    let side = SideTable::new(&pretrained.store, &prepared.catalog, prepared.schema.item_id.vocab_size)?;
    let warm = match config.variant {
        Variant::BackboneOnly => None,
        Variant::SingleCvae => Some(repeated_single_trace(prepared, pretrained, &side, &config)?),
        Variant::EnsembleNoEu | Variant::Creu => Some(train_warm_inner(
            &prepared.split.old_train,
            pretrained,
            &side,
            &config,
            seed::derive(config.seed, "warm-model"),
            None,
        )?),
    };
    let warm_model_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (phases, store) = run_cold_start_protocol(
        &prepared.split,
        pretrained,
        &prepared.catalog,
        warm.as_ref().map(|w| &w.ensemble),
        &config,
    )?;
    let protocol_secs = start.elapsed().as_secs_f64();
    let (ensemble, eu_trace) = match warm {
        Some(w) => (Some(w.ensemble), w.trace),
        None => (None, EuTrace::new(config.variant)),
    };
    Ok(RunArtifacts {
        report: RunReport {
            seed: config.seed,
            config,
            phases,
            eu_trace,
            timings: Timings {
                pretrain_secs,
                warm_model_secs,
                protocol_secs,
            },
        },
        backbone: pretrained.backbone.clone(),
        store,
        ensemble,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let prepared = prepare(config)?;
    let start = Instant::now();
    let pretrained = pretrain_backbone(&prepared.split.old_train, &prepared.schema, config)?;
    run_variant(&prepared, &pretrained, config, start.elapsed().as_secs_f64())
}

/// All four variants on one split, one pretrained backbone and one seed.
pub fn ablation_suite(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let prepared = prepare(config)?;
    ablation_on(&prepared, config)
}

pub fn ablation_on(prepared: &Prepared, config: &ExperimentConfig) -> Result<AblationReport> {
    let start = Instant::now();
    let pretrained = pretrain_backbone(&prepared.split.old_train, &prepared.schema, config)?;
    let pretrain_secs = start.elapsed().as_secs_f64();
    let runs = Variant::ALL
        .into_iter()
        .map(|v| run_variant(prepared, &pretrained, &config.with_variant(v), pretrain_secs).map(|a| a.report))
        .collect::<Result<_>>()?;
    Ok(AblationReport { runs })
}
