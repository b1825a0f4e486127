//! Synthetic click log with MovieLens-like fields, for quick end-to-end runs.
//!
//! Users carry gender, age and occupation; items carry one to three genres
//! and a decade. Click propensity is a logistic function of a user factor
//! and an item factor, where the item factor is mostly determined by the
//! item's side information, so side information predicts clicks on items
//! with little history.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::{FeatureSchema, FieldDescriptor, InteractionRecord};
use crate::error::{Error, Result};
use crate::seed;

const GENDERS: usize = 2;
const AGES: usize = 7;
const OCCUPATIONS: usize = 21;
const GENRES: usize = 18;
const DECADES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Every item gets at least this many interactions.
    pub min_item_count: usize,
    pub latent_dim: usize,
    /// Scale of the item-specific part of the item factor.
    pub item_noise: f64,
    pub signal: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 1000,
            items: 500,
            interactions: 50_000,
            min_item_count: 50,
            latent_dim: 8,
            item_noise: 0.3,
            signal: 1.5,
            seed: 7,
        }
    }
}

pub fn schema(config: &SyntheticConfig) -> FeatureSchema {
    FeatureSchema {
        user_id: FieldDescriptor::single("user_id", config.users),
        user_fields: vec![
            FieldDescriptor::single("gender", GENDERS),
            FieldDescriptor::single("age", AGES),
            FieldDescriptor::single("occupation", OCCUPATIONS),
        ],
        item_id: FieldDescriptor::single("item_id", config.items),
        item_fields: vec![FieldDescriptor::multi("genres", GENRES), FieldDescriptor::single("decade", DECADES)],
        side_info: vec!["genres".into(), "decade".into()],
    }
}

fn gaussian_rows(rng: &mut impl Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn add_scaled(acc: &mut [f64], v: &[f64], k: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += k * x;
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<(Vec<InteractionRecord>, FeatureSchema)> {
    let SyntheticConfig {
        users,
        items,
        interactions,
        min_item_count,
        latent_dim: h,
        ..
    } = *config;
    if users == 0 || items == 0 || h == 0 {
        return Err(Error::Config("synthetic users, items and latent_dim must be positive".into()));
    }
    if min_item_count * items > interactions {
        return Err(Error::Config(format!(
            "{interactions} interactions cannot give {items} items {min_item_count} each"
        )));
    }
    let mut rng = seed::rng(config.seed, "synthetic");
    let inv = 1.0 / (h as f64).sqrt();
    let genre_vecs = gaussian_rows(&mut rng, GENRES, h, inv);
    let decade_vecs = gaussian_rows(&mut rng, DECADES, h, inv);
    let age_vecs = gaussian_rows(&mut rng, AGES, h, 0.5 * inv);
    let gender_vecs = gaussian_rows(&mut rng, GENDERS, h, 0.5 * inv);
    let genre_bias: Vec<f64> = (0..GENRES).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let decade_bias: Vec<f64> = (0..DECADES).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();

    let user_fields: Vec<Vec<usize>> = (0..users)
        .map(|_| vec![rng.random_range(0..GENDERS), rng.random_range(0..AGES), rng.random_range(0..OCCUPATIONS)])
        .collect();
    let user_vecs: Vec<Vec<f64>> = user_fields
        .iter()
        .map(|f| {
            let mut p: Vec<f64> = (0..h).map(|_| inv * rng.sample::<f64, _>(StandardNormal)).collect();
            add_scaled(&mut p, &gender_vecs[f[0]], 1.0);
            add_scaled(&mut p, &age_vecs[f[1]], 1.0);
            p
        })
        .collect();

    let genre_ids: Vec<usize> = (0..GENRES).collect();
    let noise = Normal::new(0.0, config.item_noise * inv).map_err(|e| Error::Config(e.to_string()))?;
    let mut item_fields = Vec::with_capacity(items);
    let mut item_vecs = Vec::with_capacity(items);
    let mut item_bias = Vec::with_capacity(items);
    for _ in 0..items {
        let n_genres = rng.random_range(1..=3);
        let mut genres: Vec<usize> = genre_ids.choose_multiple(&mut rng, n_genres).copied().collect();
        genres.sort_unstable();
        let decade = rng.random_range(0..DECADES);
        let mut q: Vec<f64> = (0..h).map(|_| noise.sample(&mut rng)).collect();
        for &g in &genres {
            add_scaled(&mut q, &genre_vecs[g], 1.0 / genres.len() as f64);
        }
        add_scaled(&mut q, &decade_vecs[decade], 0.5);
        let b = genres.iter().map(|&g| genre_bias[g]).sum::<f64>() / genres.len() as f64 + decade_bias[decade];
        item_fields.push(vec![genres, vec![decade]]);
        item_vecs.push(q);
        item_bias.push(b);
    }

    // Minimum count plus a Zipf-like share of the remainder over a random
    // popularity order.
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut rng);
    let weights: Vec<f64> = (0..items).map(|r| 1.0 / (r as f64 + 10.0)).collect();
    let total: f64 = weights.iter().sum();
    let extra = interactions - min_item_count * items;
    let mut counts = vec![min_item_count; items];
    let mut assigned = 0;
    for (r, &item) in order.iter().enumerate() {
        let c = (extra as f64 * weights[r] / total).floor() as usize;
        counts[item] += c;
        assigned += c;
    }
    for &item in order.iter().take(extra - assigned) {
        counts[item] += 1;
    }

    let mut timestamps: Vec<i64> = (0..interactions as i64).collect();
    timestamps.shuffle(&mut rng);
    let mut ts = timestamps.into_iter();
    let mut records = Vec::with_capacity(interactions);
    for item in 0..items {
        for _ in 0..counts[item] {
            let u = rng.random_range(0..users);
            let dot: f64 = user_vecs[u].iter().zip(&item_vecs[item]).map(|(a, b)| a * b).sum();
            let z = config.signal * (dot * (h as f64).sqrt() + item_bias[item]);
            let p = 1.0 / (1.0 + (-z).exp());
            records.push(InteractionRecord {
                user_id: u,
                item_id: item,
                user_fields: user_fields[u].clone(),
                item_fields: item_fields[item].clone(),
                label: u8::from(rng.random::<f64>() < p),
                timestamp: ts.next().expect("one timestamp per interaction"),
            });
        }
    }
    records.sort_by_key(|r| r.timestamp);
    Ok((records, schema(config)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_schema() {
        let cfg = SyntheticConfig {
            users: 50,
            items: 20,
            interactions: 2000,
            min_item_count: 40,
            ..SyntheticConfig::default()
        };
        let (records, schema) = generate(&cfg).unwrap();
        assert_eq!(records.len(), 2000);
        for r in &records {
            schema.check_record(r).unwrap();
        }
        let mut counts = [0; 20];
        for r in &records {
            counts[r.item_id] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 40));
        let pos = records.iter().filter(|r| r.label == 1).count();
        assert!(pos > 200 && pos < 1800, "{pos}");
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SyntheticConfig {
            users: 30,
            items: 10,
            interactions: 600,
            ..SyntheticConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap().0, generate(&cfg).unwrap().0);
        let other = SyntheticConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn too_few_interactions_rejected() {
        let cfg = SyntheticConfig {
            items: 10,
            interactions: 100,
            min_item_count: 50,
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
