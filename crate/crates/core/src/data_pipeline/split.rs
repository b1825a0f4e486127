use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureSchema, InteractionRecord};
use crate::error::{Error, Result};

/// Old/new item partition with the warm-up groups of every retained new item.
#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartSplit {
    pub old_train: Vec<InteractionRecord>,
    pub warm_a: Vec<InteractionRecord>,
    pub warm_b: Vec<InteractionRecord>,
    pub warm_c: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub new_item_ids: BTreeSet<usize>,
    /// Records of new items below the `3K + 1` floor.
    pub dropped: Vec<InteractionRecord>,
    pub dropped_items: usize,
    pub old_fraction: f64,
    pub k: usize,
}

impl ColdStartSplit {
    /// Warm groups in protocol order.
    pub fn warm_groups(&self) -> [(&'static str, &[InteractionRecord]); 3] {
        [("warm_a", &self.warm_a), ("warm_b", &self.warm_b), ("warm_c", &self.warm_c)]
    }

    pub fn partitions(&self) -> [(&'static str, &[InteractionRecord]); 6] {
        [
            ("old_train", &self.old_train),
            ("warm_a", &self.warm_a),
            ("warm_b", &self.warm_b),
            ("warm_c", &self.warm_c),
            ("test", &self.test),
            ("dropped", &self.dropped),
        ]
    }
}

/// Rank items by interaction count (descending, ties by ascending id), keep the
/// top `old_fraction` as old items, and cut each new item's time-ordered
/// history into `k` / `k` / `k` / remainder.
pub fn make_cold_start_split(records: &[InteractionRecord], old_fraction: f64, k: usize) -> Result<ColdStartSplit> {
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty record list".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&old_fraction) {
        return Err(Error::Config(format!("old_fraction {old_fraction} must lie in [0, 1)")));
    }
    let mut per_item: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        per_item.entry(r.item_id).or_default().push(i);
    }
    let mut ranked: Vec<(usize, usize)> = per_item.iter().map(|(&item, idx)| (item, idx.len())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    // The small offset keeps e.g. 0.8 * 10 from rounding up to 9.
    let n_old = ((old_fraction * ranked.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let old_items: BTreeSet<usize> = ranked[..n_old].iter().map(|&(i, _)| i).collect();

    let floor = 3 * k + 1;
    let mut split = ColdStartSplit {
        old_train: records.iter().filter(|r| old_items.contains(&r.item_id)).cloned().collect(),
        warm_a: Vec::new(),
        warm_b: Vec::new(),
        warm_c: Vec::new(),
        test: Vec::new(),
        new_item_ids: BTreeSet::new(),
        dropped: Vec::new(),
        dropped_items: 0,
        old_fraction,
        k,
    };
    for (&item, idx) in per_item.iter().filter(|(i, _)| !old_items.contains(i)) {
        let mut ordered = idx.clone();
        ordered.sort_by_key(|&i| (records[i].timestamp, i));
        let history = ordered.iter().map(|&i| records[i].clone());
        if ordered.len() < floor {
            split.dropped.extend(history);
            split.dropped_items += 1;
            continue;
        }
        split.new_item_ids.insert(item);
        for (pos, r) in history.enumerate() {
            match pos / k {
                0 => split.warm_a.push(r),
                1 => split.warm_b.push(r),
                2 => split.warm_c.push(r),
                _ => split.test.push(r),
            }
        }
    }
    if split.new_item_ids.is_empty() {
        return Err(Error::EmptySplit(format!(
            "no new item has at least 3K+1 = {floor} interactions; try a smaller K"
        )));
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub old_fraction: f64,
    pub k: usize,
    pub dropped_items: usize,
    pub dropped_records: usize,
    pub new_items: usize,
    pub partition_sizes: BTreeMap<String, usize>,
    pub vocabulary_sizes: BTreeMap<String, usize>,
}

fn join_values(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join("|")
}

/// Write one CSV per partition plus `manifest.json`.
pub fn export_split(split: &ColdStartSplit, schema: &FeatureSchema, out_dir: &Path) -> Result<SplitManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut header = vec!["user_id".to_string(), "item_id".into(), "label".into(), "timestamp".into()];
    header.extend(schema.user_fields.iter().map(|f| f.name.clone()));
    header.extend(schema.item_fields.iter().map(|f| f.name.clone()));
    let mut partition_sizes = BTreeMap::new();
    for (name, part) in split.partitions() {
        let path = out_dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&header)?;
        for r in part {
            let mut row = vec![
                r.user_id.to_string(),
                r.item_id.to_string(),
                r.label.to_string(),
                r.timestamp.to_string(),
            ];
            row.extend(r.user_fields.iter().map(usize::to_string));
            row.extend(r.item_fields.iter().map(|v| join_values(v)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        partition_sizes.insert(name.to_string(), part.len());
    }
    let manifest = SplitManifest {
        old_fraction: split.old_fraction,
        k: split.k,
        dropped_items: split.dropped_items,
        dropped_records: split.dropped.len(),
        new_items: split.new_item_ids.len(),
        partition_sizes,
        vocabulary_sizes: schema.fields().iter().map(|f| (f.name.clone(), f.vocab_size)).collect(),
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
