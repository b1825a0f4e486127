//! The warm model: `N` independently initialized conditional VAEs that map
//! item side information to warmed item-ID embeddings.
//!
//! Each component has a side-information encoder and an item-ID encoder with
//! the same output latent size, plus one decoder shared by both paths and
//! conditioned on the item's frequency-bucket embedding. Training aligns the
//! side-path latent Gaussian with the ID-path latent Gaussian (closed-form
//! squared 2-Wasserstein) and reconstructs the frozen ID embedding from the
//! ID path. The decoded side-path embeddings are mixed with simplex weights
//! `pi`, the same weights that scale the alignment term and the epistemic
//! estimator.

mod gaussian;

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data_pipeline::ItemCatalog;
use crate::embedding_store::{EmbeddingStore, FrequencyEmbedding, DEFAULT_BUCKETS};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::seed;

pub use gaussian::{w2_diag_gauss, DiagonalGaussian};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_components: usize,
    /// Item embedding dimension `d`.
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Width of the concatenated side-information embeddings.
    pub side_input_dim: usize,
    pub freq_buckets: usize,
}

impl EnsembleConfig {
    /// Two hidden layers of 64 and `d_z = d`.
    pub fn new(n_components: usize, embed_dim: usize, side_fields: usize) -> Self {
        EnsembleConfig {
            n_components,
            embed_dim,
            latent_dim: embed_dim,
            hidden: vec![64, 64],
            side_input_dim: embed_dim * side_fields,
            freq_buckets: DEFAULT_BUCKETS,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::Config("the ensemble needs at least one component".into()));
        }
        if self.embed_dim == 0 || self.latent_dim == 0 || self.side_input_dim == 0 {
            return Err(Error::Config("ensemble dimensions must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable mixture weights; `pi = softmax(logits)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    logits: Vec<f64>,
}

impl EnsembleWeights {
    pub fn uniform(n: usize) -> Self {
        EnsembleWeights { logits: vec![0.0; n] }
    }

    pub fn from_logits(logits: Vec<f64>) -> Self {
        assert!(!logits.is_empty(), "weights need at least one component");
        EnsembleWeights { logits }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut logits = vec![-1e3; n];
        logits[k] = 0.0;
        EnsembleWeights { logits }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn pi(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

/// Parameters of one CVAE: side encoder, ID encoder, shared decoder.
/// Encoders emit `[mean | log-variance]` side by side.
#[derive(Debug, Clone)]
pub struct CvaeComponent {
    pub side_encoder: Mlp,
    pub id_encoder: Mlp,
    pub decoder: Mlp,
}

/// Per-component outputs of one forward pass over `U` items.
#[derive(Debug, Clone)]
pub struct WarmupOutput {
    /// `(mean, log_var)` rows, `U x d_z` each.
    pub side: Vec<(Var, Var)>,
    pub id: Vec<(Var, Var)>,
    /// Decoded side-path embeddings, `U x d` each.
    pub side_decoded: Vec<Var>,
    pub id_decoded: Vec<Var>,
    /// `sum_k pi_k side_decoded_k`.
    pub combined: Var,
    /// `1 x N` mixing weights.
    pub pi: Var,
}

/// Trainable ensemble state.
#[derive(Debug, Clone)]
pub struct CvaeEnsemble {
    config: EnsembleConfig,
    params: ParamStore,
    components: Vec<CvaeComponent>,
    logits: ParamId,
    freq: FrequencyEmbedding,
}

fn mlp_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// `z = mu + sigma * noise`.
pub fn reparameterize(g: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::Dimension(format!("{} noise draws for dimension {}", noise.len(), g.dim())));
    }
    Ok(g.mean().iter().zip(g.std()).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// `sum_k pi_k W2(side_k, id_k)`.
pub fn alignment_loss(weights: &EnsembleWeights, pairs: &[(DiagonalGaussian, DiagonalGaussian)]) -> Result<f64> {
    if pairs.len() != weights.len() {
        return Err(Error::Dimension(format!("{} pairs for {} weights", pairs.len(), weights.len())));
    }
    let pi = weights.pi();
    pairs
        .iter()
        .zip(&pi)
        .try_fold(0.0, |acc, ((s, i), w)| Ok(acc + w * w2_diag_gauss(s, i)?))
}

/// Mean squared error of `decoded[k][b]` against `target[b]`, averaged over
/// components, batch, and dimensions.
pub fn reconstruction_loss(decoded: &[Vec<Vec<f64>>], target: &[Vec<f64>]) -> Result<f64> {
    if decoded.is_empty() || target.is_empty() {
        return Err(Error::Dimension("reconstruction of an empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for comp in decoded {
        if comp.len() != target.len() {
            return Err(Error::Dimension("decoded batch and target differ in length".into()));
        }
        for (row, t) in comp.iter().zip(target) {
            if row.len() != t.len() {
                return Err(Error::Dimension("decoded and target dimensions differ".into()));
            }
            total += row.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += t.len();
        }
    }
    Ok(total / count as f64)
}

/// `sum_k pi_k v_k`.
pub fn combine(weights: &EnsembleWeights, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.len() != weights.len() || embeddings.is_empty() {
        return Err(Error::Dimension(format!("{} embeddings for {} weights", embeddings.len(), weights.len())));
    }
    let d = embeddings[0].len();
    let mut out = vec![0.0; d];
    for (e, w) in embeddings.iter().zip(weights.pi()) {
        if e.len() != d {
            return Err(Error::Dimension("component embeddings differ in dimension".into()));
        }
        for (o, x) in out.iter_mut().zip(e) {
            *o += w * x;
        }
    }
    Ok(out)
}

fn check_finite(values: &[f64], k: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("component {k}: non-finite {what}")))
    }
}

/// Graph-level losses over a [`WarmupOutput`].
pub mod tape {
    use super::*;

    /// Row softmax of `1 x N` logits.
    pub fn softmax(g: &mut Graph, logits: Var) -> Var {
        let max = g.value(logits).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted = g.offset(logits, -max);
        let e = g.exp(shifted);
        let s = g.sum_cols(e);
        g.div(e, s)
    }

    /// Per-item squared W2 between two diagonal Gaussians given as
    /// `(mean, log_var)` rows, averaged over items.
    pub fn mean_w2(g: &mut Graph, a: (Var, Var), b: (Var, Var)) -> Var {
        let dm = g.sub(a.0, b.0);
        let dm2 = g.square(dm);
        let ha = g.scale(a.1, 0.5);
        let sa = g.exp(ha);
        let hb = g.scale(b.1, 0.5);
        let sb = g.exp(hb);
        let ds = g.sub(sa, sb);
        let ds2 = g.square(ds);
        let t = g.add(dm2, ds2);
        let per_item = g.sum_cols(t);
        g.mean(per_item)
    }

    /// `sum_k pi_k mean_items W2(side_k, id_k)`.
    pub fn alignment_loss(g: &mut Graph, out: &WarmupOutput) -> Var {
        let mut total = None;
        for (k, (&s, &i)) in out.side.iter().zip(&out.id).enumerate() {
            let w = mean_w2(g, s, i);
            let pk = g.slice_cols(out.pi, k, 1);
            let t = g.mul(pk, w);
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t),
            });
        }
        total.expect("at least one component")
    }

    /// MSE of each ID-path reconstruction against `target`, averaged over components.
    pub fn reconstruction_loss(g: &mut Graph, decoded: &[Var], target: Var) -> Var {
        let mut total = None;
        for &d in decoded {
            let diff = g.sub(d, target);
            let sq = g.square(diff);
            let m = g.mean(sq);
            total = Some(match total {
                None => m,
                Some(acc) => g.add(acc, m),
            });
        }
        let total = total.expect("at least one component");
        g.scale(total, 1.0 / decoded.len() as f64)
    }

    /// `sum_k pi_k v_k` with `v_k` of shape `U x d`.
    pub fn combine(g: &mut Graph, pi: Var, embeddings: &[Var]) -> Var {
        let mut total = None;
        for (k, &e) in embeddings.iter().enumerate() {
            let pk = g.slice_cols(pi, k, 1);
            let t = g.mul(e, pk);
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t),
            });
        }
        total.expect("at least one component")
    }
}

impl CvaeEnsemble {
    /// Components are initialized from independent streams of `seed`.
    pub fn new(config: EnsembleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let two_z = 2 * config.latent_dim;
        let components = (0..config.n_components)
            .map(|k| {
                let mut rng = seed::rng(seed, &format!("cvae-component-{k}"));
                CvaeComponent {
                    side_encoder: Mlp::new(
                        &mut params,
                        &format!("cvae{k}.side_encoder"),
                        &mlp_widths(config.side_input_dim, &config.hidden, two_z),
                        Activation::Tanh,
                        &mut rng,
                    ),
                    id_encoder: Mlp::new(
                        &mut params,
                        &format!("cvae{k}.id_encoder"),
                        &mlp_widths(config.embed_dim, &config.hidden, two_z),
                        Activation::Tanh,
                        &mut rng,
                    ),
                    decoder: Mlp::new(
                        &mut params,
                        &format!("cvae{k}.decoder"),
                        &mlp_widths(config.latent_dim + config.embed_dim, &config.hidden, config.embed_dim),
                        Activation::Tanh,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let logits = params.add("pi_logits", Tensor::zeros(1, config.n_components));
        let freq = FrequencyEmbedding::new(
            &mut params,
            config.freq_buckets,
            config.embed_dim,
            &mut seed::rng(seed, "cvae-freq-embedding"),
        );
        Ok(CvaeEnsemble {
            config,
            params,
            components,
            logits,
            freq,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn weights(&self) -> EnsembleWeights {
        EnsembleWeights::from_logits(self.params.get(self.logits).data().to_vec())
    }

    pub fn logits_id(&self) -> ParamId {
        self.logits
    }

    pub fn set_weights(&mut self, w: &EnsembleWeights) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::Dimension("weight count differs from component count".into()));
        }
        *self.params.get_mut(self.logits) = Tensor::row(w.logits());
        Ok(())
    }

    pub fn freq_embedding(&self) -> &FrequencyEmbedding {
        &self.freq
    }

    fn check_component(&self, k: usize) -> Result<&CvaeComponent> {
        self.components
            .get(k)
            .ok_or_else(|| Error::Config(format!("component {k} of {}", self.len())))
    }

    fn encode_with(&self, k: usize, input: &[f64], expected: usize, side: bool) -> Result<DiagonalGaussian> {
        let comp = self.check_component(k)?;
        if input.len() != expected {
            return Err(Error::Dimension(format!("encoder input of width {} (expected {expected})", input.len())));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::row(input));
        let enc = if side { &comp.side_encoder } else { &comp.id_encoder };
        let h = enc.forward(&mut g, &b, x);
        let out = g.value(h).data();
        check_finite(out, k, "encoder output")?;
        let dz = self.config.latent_dim;
        DiagonalGaussian::from_log_variance(out[..dz].to_vec(), &out[dz..])
            .map_err(|e| Error::Numerical(format!("component {k}: {e}")))
    }

    /// Latent Gaussian from concatenated side-information embeddings.
    pub fn encode_side(&self, side_vectors: &[f64], k: usize) -> Result<DiagonalGaussian> {
        self.encode_with(k, side_vectors, self.config.side_input_dim, true)
    }

    /// Latent Gaussian from an item-ID embedding.
    pub fn encode_id(&self, item_embedding: &[f64], k: usize) -> Result<DiagonalGaussian> {
        self.encode_with(k, item_embedding, self.config.embed_dim, false)
    }

    /// Decoder on `[z ; freq_embedding]`.
    pub fn decode(&self, z: &[f64], freq_embedding: &[f64], k: usize) -> Result<Vec<f64>> {
        let comp = self.check_component(k)?;
        if z.len() != self.config.latent_dim || freq_embedding.len() != self.config.embed_dim {
            return Err(Error::Dimension("decoder input widths".into()));
        }
        check_finite(z, k, "latent code")?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let zin = g.constant(Tensor::row(z));
        let fin = g.constant(Tensor::row(freq_embedding));
        let x = g.concat_cols(&[zin, fin]);
        let h = comp.decoder.forward(&mut g, &b, x);
        let out = g.value(h).data().to_vec();
        check_finite(&out, k, "decoder output")?;
        Ok(out)
    }

    /// Deterministic warm embedding from concatenated side vectors and a raw
    /// interaction count: `z = mu` per component, decode, combine with `pi`.
    pub fn warm_embedding(&self, side_vectors: &[f64], count: u64) -> Result<Vec<f64>> {
        let bucket = crate::embedding_store::freq_bucket(count, self.freq.buckets);
        let fe = self.freq.row(&self.params, bucket).to_vec();
        let decoded = (0..self.len())
            .map(|k| {
                let gauss = self.encode_side(side_vectors, k)?;
                self.decode(gauss.mean(), &fe, k)
            })
            .collect::<Result<Vec<_>>>()?;
        combine(&self.weights(), &decoded)
    }

    /// [`CvaeEnsemble::warm_embedding`] with side information looked up for `item`.
    pub fn infer_warm_embedding(&self, store: &EmbeddingStore, catalog: &ItemCatalog, item: usize, count: u64) -> Result<Vec<f64>> {
        let side = side_vector(store, catalog, item)?;
        self.warm_embedding(&side, count)
    }

    /// Forward pass over `U` items. `noise` draws the reparameterization
    /// noise; `None` uses the means.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        side_input: Var,
        id_input: Var,
        buckets: &[usize],
        mut noise: Option<&mut dyn rand::RngCore>,
    ) -> WarmupOutput {
        let dz = self.config.latent_dim;
        let u = g.value(side_input).rows();
        let fe = self.freq.embed(g, bound, buckets);
        let pi_logits = bound.var(self.logits);
        let pi = tape::softmax(g, pi_logits);
        let mut out = WarmupOutput {
            side: Vec::new(),
            id: Vec::new(),
            side_decoded: Vec::new(),
            id_decoded: Vec::new(),
            combined: pi,
            pi,
        };
        for comp in &self.components {
            let mut sample = |g: &mut Graph, mean: Var, log_var: Var| -> Var {
                match noise.as_deref_mut() {
                    None => mean,
                    Some(rng) => {
                        let eps: Vec<f64> = (0..u * dz).map(|_| rng.sample(StandardNormal)).collect();
                        let e = g.constant(Tensor::new(u, dz, eps));
                        let half = g.scale(log_var, 0.5);
                        let std = g.exp(half);
                        let scaled = g.mul(std, e);
                        g.add(mean, scaled)
                    }
                }
            };
            let hs = comp.side_encoder.forward(g, bound, side_input);
            let (ms, ls) = (g.slice_cols(hs, 0, dz), g.slice_cols(hs, dz, dz));
            let zs = sample(g, ms, ls);
            let hi = comp.id_encoder.forward(g, bound, id_input);
            let (mi, li) = (g.slice_cols(hi, 0, dz), g.slice_cols(hi, dz, dz));
            let zi = sample(g, mi, li);
            let xs = g.concat_cols(&[zs, fe]);
            let xi = g.concat_cols(&[zi, fe]);
            out.side_decoded.push(comp.decoder.forward(g, bound, xs));
            out.id_decoded.push(comp.decoder.forward(g, bound, xi));
            out.side.push((ms, ls));
            out.id.push((mi, li));
        }
        out.combined = tape::combine(g, pi, &out.side_decoded);
        out
    }

    /// Fails if any parameter is non-finite.
    pub fn check_parameters(&self) -> Result<()> {
        match self.params.first_non_finite() {
            None => Ok(()),
            Some(name) => Err(Error::Numerical(format!("non-finite warm-model parameter `{name}`"))),
        }
    }

    /// Writes `ensemble.bin` and `ensemble.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("ensemble.bin"))?;
        let p = dir.join("ensemble.json");
        fs::write(&p, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("ensemble.json");
        let config: EnsembleConfig = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let params = ParamStore::load(&dir.join("ensemble.bin"))?;
        let mut model = CvaeEnsemble::new(config, 0)?;
        if params.len() != model.params.len() || model.params.ids().any(|id| params.find(model.params.name(id)) != Some(id)) {
            return Err(Error::Schema("ensemble checkpoint does not match its config".into()));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            if params.get(id).shape() != model.params.get(id).shape() {
                return Err(Error::Schema(format!("shape mismatch for `{}`", model.params.name(id))));
            }
        }
        model.params = params;
        Ok(model)
    }
}

/// Concatenated side-information embeddings of `item`, in schema order.
pub fn side_vector(store: &EmbeddingStore, catalog: &ItemCatalog, item: usize) -> Result<Vec<f64>> {
    let fields = catalog.item_fields(item)?;
    let schema = store.schema();
    let mut out = Vec::new();
    for idx in schema.side_info_indices() {
        let name = &schema.item_fields[idx].name;
        out.extend(store.pool_multivalue(name, &fields[idx])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ensemble(n: usize, seed: u64) -> CvaeEnsemble {
        CvaeEnsemble::new(EnsembleConfig::new(n, 4, 2), seed).unwrap()
    }

    fn input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn encoders_are_deterministic_with_positive_std() {
        let e = ensemble(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let side = input(&mut rng, 8);
        let a = e.encode_side(&side, 0).unwrap();
        assert_eq!(a, e.encode_side(&side, 0).unwrap());
        assert!(a.std().iter().all(|&s| s > 0.0));
        let id = input(&mut rng, 4);
        let b = e.encode_id(&id, 1).unwrap();
        assert_eq!(b, e.encode_id(&id, 1).unwrap());
        assert_eq!(b.dim(), 4);
        assert!(e.encode_side(&side[..3], 0).is_err());
        assert!(e.encode_side(&side, 2).is_err());
    }

    fn mean_pairwise_mu_distance(encode: impl Fn(&CvaeEnsemble, &[f64], usize) -> DiagonalGaussian, width: usize) -> f64 {
        let mut total = 0.0;
        for seed in 0..10 {
            let e = ensemble(2, seed);
            let x = input(&mut ChaCha8Rng::seed_from_u64(100 + seed), width);
            let (a, b) = (encode(&e, &x, 0), encode(&e, &x, 1));
            total += a.mean().iter().zip(b.mean()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        }
        total / 10.0
    }

    #[test]
    fn components_differ_under_random_init() {
        assert!(mean_pairwise_mu_distance(|e, x, k| e.encode_side(x, k).unwrap(), 8) > 1e-3);
        assert!(mean_pairwise_mu_distance(|e, x, k| e.encode_id(x, k).unwrap(), 4) > 1e-3);
    }

    #[test]
    fn reparameterize_identity_and_moments() {
        let g = DiagonalGaussian::new(vec![1.5, -2.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), g.mean());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparameterize(&g, &noise).unwrap();
            for i in 0..2 {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            assert!((mean - g.mean()[i]).abs() < 3.0 * g.std()[i] / (n as f64).sqrt());
            assert!((std / g.std()[i] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn decoder_is_conditioned_on_frequency() {
        let e = ensemble(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = input(&mut rng, 4);
        let (f1, f2) = (input(&mut rng, 4), input(&mut rng, 4));
        for k in 0..2 {
            let a = e.decode(&z, &f1, k).unwrap();
            assert_eq!(a, e.decode(&z, &f1, k).unwrap());
            assert_eq!(a.len(), 4);
            let b = e.decode(&z, &f2, k).unwrap();
            assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1e-6);
        }
    }

    #[test]
    fn alignment_loss_examples() {
        let g = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let h = DiagonalGaussian::new(vec![3.0], vec![1.0]).unwrap();
        let w = EnsembleWeights::uniform(2);
        assert_eq!(alignment_loss(&w, &[(g.clone(), g.clone()), (h.clone(), h.clone())]).unwrap(), 0.0);
        assert_eq!(alignment_loss(&EnsembleWeights::uniform(1), &[(g.clone(), h.clone())]).unwrap(), 9.0);
        let w = EnsembleWeights::from_logits(vec![0.3, -0.2]);
        let far = DiagonalGaussian::new(vec![6.0], vec![1.0]).unwrap();
        let one = alignment_loss(&w, &[(g.clone(), h.clone()), (g.clone(), g.clone())]).unwrap();
        let two = alignment_loss(&w, &[(g.clone(), far), (g.clone(), g.clone())]).unwrap();
        // W2 goes from 9 to 36 while the other term stays 0.
        assert!((two - 4.0 * one).abs() < 1e-12);
        assert!((one - 9.0 * w.pi()[0]).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let target = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        assert_eq!(reconstruction_loss(std::slice::from_ref(&target), &target).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = target.iter().map(|r| r.iter().map(|x| x + 0.3).collect()).collect();
        assert!((reconstruction_loss(&[shifted.clone(), shifted.clone()], &target).unwrap() - 0.09).abs() < 1e-12);
        let mut rev_s = shifted.clone();
        rev_s.reverse();
        let mut rev_t = target.clone();
        rev_t.reverse();
        assert_eq!(
            reconstruction_loss(&[shifted], &target).unwrap(),
            reconstruction_loss(&[rev_s], &rev_t).unwrap()
        );
    }

    #[test]
    fn combine_examples() {
        let embs = vec![vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 4.0]];
        assert_eq!(combine(&EnsembleWeights::one_hot(3, 1), &embs).unwrap(), embs[1]);
        let same = vec![vec![0.25, 0.75]; 3];
        let c = combine(&EnsembleWeights::from_logits(vec![0.1, 0.9, -0.4]), &same).unwrap();
        assert!(c.iter().zip(&same[0]).all(|(a, b)| (a - b).abs() < 1e-12));
        let c = combine(&EnsembleWeights::from_logits(vec![0.1, 0.9, -0.4]), &embs).unwrap();
        for (i, v) in c.iter().enumerate() {
            let lo = embs.iter().map(|e| e[i]).fold(f64::INFINITY, f64::min);
            let hi = embs.iter().map(|e| e[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn pi_is_on_simplex() {
        let w = EnsembleWeights::from_logits(vec![5.0, -3.0, 0.2]);
        let pi = w.pi();
        assert!(pi.iter().all(|&p| p > 0.0));
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inference_matches_training_path_without_noise() {
        let e = ensemble(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let side = input(&mut rng, 8);
        let count = 12;
        let v = e.warm_embedding(&side, count).unwrap();
        assert_eq!(v, e.warm_embedding(&side, count).unwrap());

        let mut g = Graph::new();
        let b = e.params().bind(&mut g, false);
        let s = g.constant(Tensor::row(&side));
        let i = g.constant(Tensor::zeros(1, 4));
        let bucket = crate::embedding_store::freq_bucket(count, 10);
        let out = e.forward(&mut g, &b, s, i, &[bucket], None);
        let path = g.value(out.combined).data();
        assert!(v.iter().zip(path).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_component_inference_is_its_decode() {
        let e = ensemble(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let side = input(&mut rng, 8);
        let mu = e.encode_side(&side, 0).unwrap();
        let fe = e.freq_embedding().row(e.params(), 0).to_vec();
        let direct = e.decode(mu.mean(), &fe, 0).unwrap();
        let inferred = e.warm_embedding(&side, 0).unwrap();
        assert!(direct.iter().zip(&inferred).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn tape_losses_match_value_functions() {
        let e = ensemble(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sides: Vec<Vec<f64>> = (0..3).map(|_| input(&mut rng, 8)).collect();
        let ids: Vec<Vec<f64>> = (0..3).map(|_| input(&mut rng, 4)).collect();
        let mut g = Graph::new();
        let b = e.params().bind(&mut g, false);
        let s = g.constant(Tensor::from_rows(&sides));
        let i = g.constant(Tensor::from_rows(&ids));
        let out = e.forward(&mut g, &b, s, i, &[0, 0, 0], None);
        let align = tape::alignment_loss(&mut g, &out);
        let target = g.constant(Tensor::from_rows(&ids));
        let recon = tape::reconstruction_loss(&mut g, &out.id_decoded, target);

        let mut per_comp = [0.0; 2];
        let mut decoded = vec![Vec::new(); 2];
        let fe = e.freq_embedding().row(e.params(), 0).to_vec();
        for (s, i) in sides.iter().zip(&ids) {
            for k in 0..2 {
                let (gs, gi) = (e.encode_side(s, k).unwrap(), e.encode_id(i, k).unwrap());
                per_comp[k] += w2_diag_gauss(&gs, &gi).unwrap() / 3.0;
                decoded[k].push(e.decode(gi.mean(), &fe, k).unwrap());
            }
        }
        let pi = e.weights().pi();
        let expect_align = pi[0] * per_comp[0] + pi[1] * per_comp[1];
        assert!((g.scalar_value(align) - expect_align).abs() < 1e-12);
        let expect_recon = reconstruction_loss(&decoded, &ids).unwrap();
        assert!((g.scalar_value(recon) - expect_recon).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = ensemble(3, 12);
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        let back = CvaeEnsemble::load(dir.path()).unwrap();
        assert_eq!(back.params(), e.params());
        assert_eq!(back.config(), e.config());
    }
}
