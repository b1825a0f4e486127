//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test -p creu-core --test acceptance`.
//!
//! The full MovieLens-1M check runs only when `CREU_ML1M_DIR` points at the
//! extracted `ml-1m` directory.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use creu::autograd::{Graph, Tensor, Var};
use creu::backbone::{tape_bce, Backbone, BackboneConfig, BackboneKind};
use creu::cvae_ensemble::{self, w2_diag_gauss, CvaeEnsemble, DiagonalGaussian, EnsembleConfig};
use creu::data_pipeline::FieldDescriptor;
use creu::nn::ParamStore;
use creu::synthetic::SyntheticConfig;
use creu::trainer::{self, DatasetKind, ExperimentConfig, Phase, RunReport, Variant};
use creu::uncertainty::{
    self, bhattacharyya_diag_gauss, kl_diag_gauss, mc_epistemic_oracle, paide_epistemic, paide_gaussian,
    sinkhorn_divergence, weight_entropy, DistanceBackend, PairwiseDistanceMatrix, PointCloud,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;
type LossFn<'a> = dyn Fn(&ParamStore, bool) -> (f64, Option<Vec<Tensor>>) + 'a;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, m: usize, d: usize, shift: f64) -> PointCloud {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    PointCloud::from_rows(&rows).unwrap()
}

fn paide_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for &n in &[2usize, 3, 5] {
        for _ in 0..334 {
            let pi = random_simplex(&mut rng, n);
            let scale = 10f64.powf(rng.random_range(-3.0..1.5));
            let mut values = vec![0.0; n * n];
            for m in 0..n {
                for k in 0..n {
                    if m != k {
                        values[m * n + k] = scale * rng.random::<f64>();
                    }
                }
            }
            let d = PairwiseDistanceMatrix::new(n, values.clone()).unwrap();
            let i = paide_epistemic(&d, &pi).unwrap();
            let h = weight_entropy(&pi);
            ensure(i >= 0.0 && i <= h + 1e-12, || format!("I = {i} outside [0, {h}]"))?;
            let (m, k) = loop {
                let (m, k) = (rng.random_range(0..n), rng.random_range(0..n));
                if m != k {
                    break (m, k);
                }
            };
            values[m * n + k] += rng.random_range(0.0..2.0) * scale;
            let j = paide_epistemic(&PairwiseDistanceMatrix::new(n, values).unwrap(), &pi).unwrap();
            ensure(j >= i - 1e-15, || format!("increasing D[{m}][{k}] lowered I from {i} to {j}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} instances"))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn oracle_rank_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut est, mut oracle) = (Vec::new(), Vec::new());
    for t in 0..30 {
        let spread = 10f64.powf(rng.random_range(-1.0..0.7));
        let comps: Vec<DiagonalGaussian> = (0..3)
            .map(|_| {
                let mean = (0..4).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
                let std = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
                DiagonalGaussian::new(mean, std).unwrap()
            })
            .collect();
        let pi = random_simplex(&mut rng, 3);
        est.push(paide_gaussian(&comps, &pi, kl_diag_gauss).unwrap());
        oracle.push(mc_epistemic_oracle(&comps, &pi, 200_000, t).unwrap());
    }
    let rho = spearman(&est, &oracle);
    ensure(rho >= 0.9, || format!("Spearman {rho:.4} < 0.9"))?;
    Ok(format!("Spearman {rho:.4}"))
}

fn sinkhorn_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_self, mut worst_sym) = (0f64, 0f64);
    for _ in 0..100 {
        let (m, k, d) = (rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..5));
        let x = random_cloud(&mut rng, m, d, 0.0);
        let shift = rng.random_range(-1.0..1.0);
        let y = random_cloud(&mut rng, k, d, shift);
        worst_self = worst_self.max(sinkhorn_divergence(&x, &x, 0.15, 10).unwrap());
        let diff = sinkhorn_divergence(&x, &y, 0.15, 10).unwrap() - sinkhorn_divergence(&y, &x, 0.15, 10).unwrap();
        worst_sym = worst_sym.max(diff.abs());
    }
    ensure(worst_self <= 1e-6, || format!("S(X,X) = {worst_self}"))?;
    ensure(worst_sym <= 1e-6, || format!("asymmetry {worst_sym}"))?;

    let a = PointCloud::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let b = PointCloud::from_rows(&[vec![3.0, 4.0]]).unwrap();
    let single = sinkhorn_divergence(&a, &b, 0.15, 10).unwrap();
    ensure((single - 25.0).abs() <= 1e-6, || format!("singleton divergence {single}"))?;

    // N(0, I) against N((3, 0), I): W2^2 = 9.
    let p = DiagonalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let q = DiagonalGaussian::new(vec![3.0, 0.0], vec![1.0, 1.0]).unwrap();
    let x = uncertainty::sample_cloud(&p, 512, &mut rng).unwrap();
    let y = uncertainty::sample_cloud(&q, 512, &mut rng).unwrap();
    let s = sinkhorn_divergence(&x, &y, 0.05, 500).unwrap();
    ensure((s - 9.0).abs() <= 0.9, || format!("512-sample divergence {s} vs 9"))?;
    Ok(format!(
        "max S(X,X) {worst_self:.1e}, max asymmetry {worst_sym:.1e}, singleton {single:.9}, gaussian {s:.4}"
    ))
}

fn w2_quantile_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let n = 200_000;
    let std = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let z = std.inverse_cdf((i as f64 + 0.5) / n as f64);
            ((a.0 + a.1 * z) - (b.0 + b.1 * z)).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

fn log_pdf(x: f64, (m, s): (f64, f64)) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Stratified Monte-Carlo estimate of `E_a[ln a(x) - ln b(x)]`.
fn kl_log_ratio_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let n = 200_000;
    let std = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let x = a.0 + a.1 * std.inverse_cdf((i as f64 + 0.5) / n as f64);
            log_pdf(x, a) - log_pdf(x, b)
        })
        .sum::<f64>()
        / n as f64
}

fn bhattacharyya_quadrature(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = (a.0 - 12.0 * a.1).min(b.0 - 12.0 * b.1);
    let hi = (a.0 + 12.0 * a.1).max(b.0 + 12.0 * b.1);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let integral: f64 = (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            (0.5 * (log_pdf(x, a) + log_pdf(x, b))).exp()
        })
        .sum::<f64>()
        * h;
    -integral.ln()
}

fn closed_form_distances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut w2_err, mut kl_rel, mut bc_rel) = (0f64, 0f64, 0f64);
    for _ in 0..50 {
        let a = (rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0));
        let b = (rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0));
        let (ga, gb) = (
            DiagonalGaussian::new(vec![a.0], vec![a.1]).unwrap(),
            DiagonalGaussian::new(vec![b.0], vec![b.1]).unwrap(),
        );
        w2_err = w2_err.max((w2_diag_gauss(&ga, &gb).unwrap() - w2_quantile_oracle(a, b)).abs());
        let (kl, kl_o) = (kl_diag_gauss(&ga, &gb).unwrap(), kl_log_ratio_oracle(a, b));
        kl_rel = kl_rel.max((kl - kl_o).abs() / kl_o.abs());
        let (bc, bc_o) = (bhattacharyya_diag_gauss(&ga, &gb).unwrap(), bhattacharyya_quadrature(a, b));
        bc_rel = bc_rel.max((bc - bc_o).abs() / bc_o.abs());
    }
    ensure(w2_err <= 1e-3, || format!("W2 error {w2_err}"))?;
    ensure(kl_rel <= 0.02, || format!("KL relative error {kl_rel}"))?;
    ensure(bc_rel <= 0.02, || format!("Bhattacharyya relative error {bc_rel}"))?;
    Ok(format!("W2 abs {w2_err:.1e}, KL rel {kl_rel:.1e}, Bhattacharyya rel {bc_rel:.1e}"))
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Central differences over `coords` of the parameter store against the
/// analytic gradient of `loss`.
fn check_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    picks: usize,
    loss: &LossFn,
) -> f64 {
    let (_, grads) = loss(store, true);
    let grads = grads.unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0f64;
    for _ in 0..picks {
        let id = ids[rng.random_range(0..ids.len())];
        let len = store.get(id).data().len();
        let i = rng.random_range(0..len);
        let h = 1e-5;
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let up = loss(store, false).0;
        store.get_mut(id).data_mut()[i] = orig - h;
        let down = loss(store, false).0;
        store.get_mut(id).data_mut()[i] = orig;
        let analytic = grads[ids.iter().position(|&x| x == id).unwrap()].data()[i];
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * h)));
    }
    worst
}

fn collect_grads(g: &Graph, bound: &creu::nn::Bound, store: &ParamStore, loss: Var) -> Vec<Tensor> {
    let grads = g.backward(loss);
    store
        .ids()
        .map(|id| {
            grads
                .get(bound.var(id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(id).rows(), store.get(id).cols()))
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn differentiability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0f64; 4];

    for t in 0..10 {
        let kind = if t % 2 == 0 { BackboneKind::DeepFm } else { BackboneKind::WideDeep };
        let cfg = BackboneConfig {
            kind,
            mlp: vec![16, 8],
            embed_dim: 4,
            fields: (0..4).map(|i| FieldDescriptor::single(format!("f{i}"), 7)).collect(),
        };
        let mut bb = Backbone::new(cfg, t).unwrap();
        for id in bb.params().ids().collect::<Vec<_>>() {
            let (r, c) = bb.params().get(id).shape();
            *bb.params_mut().get_mut(id) = random_tensor(&mut rng, r, c, 0.3);
        }
        let embs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, 6, 4, 0.5)).collect();
        let wide: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, 6, 1, 0.2)).collect();
        let labels: Vec<u8> = (0..6).map(|_| rng.random_range(0..2)).collect();
        let shadow = bb.clone();
        let loss = |store: &ParamStore, grad: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let e: Vec<Var> = embs.iter().map(|x| g.constant(x.clone())).collect();
            let w: Vec<Var> = wide.iter().map(|x| g.constant(x.clone())).collect();
            let mut model = shadow.clone();
            *model.params_mut() = store.clone();
            let z = model.logits(&mut g, &p, &e, &w);
            let l = tape_bce(&mut g, z, &labels);
            (g.scalar_value(l), grad.then(|| collect_grads(&g, &p, store, l)))
        };
        let mut store = bb.params().clone();
        worst[0] = worst[0].max(check_params(&mut store, &mut rng, 10, &loss));
    }

    for t in 0..10 {
        let ens = CvaeEnsemble::new(EnsembleConfig::new(3, 4, 2), 100 + t).unwrap();
        let side = random_tensor(&mut rng, 5, 8, 0.5);
        let ids = random_tensor(&mut rng, 5, 4, 0.5);
        let buckets: Vec<usize> = (0..5).map(|_| rng.random_range(0..10)).collect();
        for (slot, which) in [(1usize, "alignment"), (2, "reconstruction")] {
            let loss = |store: &ParamStore, grad: bool| {
                let mut model = ens.clone();
                *model.params_mut() = store.clone();
                let mut g = Graph::new();
                let p = store.bind(&mut g, true);
                let s = g.constant(side.clone());
                let v = g.constant(ids.clone());
                let out = model.forward(&mut g, &p, s, v, &buckets, None);
                let l = match which {
                    "alignment" => cvae_ensemble::tape::alignment_loss(&mut g, &out),
                    _ => cvae_ensemble::tape::reconstruction_loss(&mut g, &out.id_decoded, v),
                };
                (g.scalar_value(l), grad.then(|| collect_grads(&g, &p, store, l)))
            };
            let mut store = ens.params().clone();
            worst[slot] = worst[slot].max(check_params(&mut store, &mut rng, 10, &loss));
        }
    }

    let backends = [
        DistanceBackend::default(),
        DistanceBackend::Kl,
        DistanceBackend::Bhattacharyya,
    ];
    for t in 0..10 {
        let backend = backends[t % 3];
        let clouds: Vec<Tensor> = (0..3).map(|k| {
            let mut c = random_tensor(&mut rng, 6, 3, 0.6);
            c.data_mut().iter_mut().for_each(|x| *x += 0.3 * k as f64);
            c
        }).collect();
        let pi = Tensor::row(&random_simplex(&mut rng, 3));
        let eval = |clouds: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = clouds.iter().map(|c| g.param(c.clone())).collect();
            let w = g.constant(pi.clone());
            let l = uncertainty::tape::epistemic_loss(&mut g, &vars, w, backend);
            (g.scalar_value(l), g.backward(l), vars)
        };
        let (_, grads, vars) = eval(&clouds);
        for _ in 0..10 {
            let (k, i) = (rng.random_range(0..3), rng.random_range(0..18));
            let h = 1e-5;
            let mut up = clouds.clone();
            up[k].data_mut()[i] += h;
            let mut down = clouds.clone();
            down[k].data_mut()[i] -= h;
            let num = (eval(&up).0 - eval(&down).0) / (2.0 * h);
            let analytic = grads.get(vars[k]).unwrap().data()[i];
            worst[3] = worst[3].max(relative_error(analytic, num));
        }
    }
    let names = ["bce∘forward", "alignment", "reconstruction", "epistemic"];
    for (name, w) in names.iter().zip(&worst) {
        ensure(*w <= 1e-3, || format!("{name}: relative error {w:.2e}"))?;
    }
    Ok(names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", "))
}

fn desk_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        synthetic: SyntheticConfig::default(),
        embed_dim: 8,
        n_components: 3,
        epsilon: 0.15,
        sinkhorn_iters: 10,
        lr: 0.001,
        k_shot: 10,
        eu_repeats: 1,
        seed,
        ..ExperimentConfig::default()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_scale() -> Outcome {
    let seeds = [1u64, 2, 3];
    let prepared = trainer::prepare(&desk_config(seeds[0])).map_err(|e| e.to_string())?;
    let mut creu_runs: Vec<RunReport> = Vec::new();
    let mut single_runs: Vec<RunReport> = Vec::new();
    let mut no_eu_runs: Vec<RunReport> = Vec::new();
    for &seed in &seeds {
        let cfg = desk_config(seed);
        let pre = trainer::pretrain_backbone(&prepared.split.old_train, &prepared.schema, &cfg).map_err(|e| e.to_string())?;
        for (variant, sink) in [
            (Variant::Creu, &mut creu_runs),
            (Variant::SingleCvae, &mut single_runs),
            (Variant::EnsembleNoEu, &mut no_eu_runs),
        ] {
            let run = trainer::run_variant(&prepared, &pre, &cfg.with_variant(variant), 0.0).map_err(|e| e.to_string())?;
            sink.push(run.report);
        }
    }
    let cold = |runs: &[RunReport]| mean(runs.iter().map(|r| r.phase(Phase::Cold).auc));
    let (c_auc, s_auc) = (cold(&creu_runs), cold(&single_runs));
    let per_seed: Vec<String> = creu_runs
        .iter()
        .zip(&single_runs)
        .map(|(c, s)| format!("{:.3}/{:.3}", c.phase(Phase::Cold).auc, s.phase(Phase::Cold).auc))
        .collect();
    let first = mean(creu_runs.iter().map(|r| r.eu_trace.first().unwrap()));
    let last = mean(creu_runs.iter().map(|r| r.eu_trace.last().unwrap()));
    let no_eu_last = mean(no_eu_runs.iter().map(|r| r.eu_trace.last().unwrap()));
    let per_phase = |f: fn(&trainer::PhaseReport) -> f64| -> Vec<f64> {
        Phase::ALL.iter().map(|&p| mean(creu_runs.iter().map(|r| f(r.phase(p))))).collect()
    };
    let (acc, auc) = (per_phase(|p| p.acc), per_phase(|p| p.auc));
    let dips = |s: &[f64]| s.windows(2).all(|w| w[1] >= w[0] - 1.0);

    let checks = [
        (
            c_auc >= s_auc,
            format!("(a) cold AUC creu {c_auc:.3} vs single-cvae {s_auc:.3}, per seed creu/single {per_seed:?}"),
        ),
        (last <= 0.5 * first, format!("(b) creu EU {first:.2e} -> {last:.2e}, ensemble-no-eu final {no_eu_last:.2e}")),
        (dips(&acc) && dips(&auc), format!("(c) ACC by phase {acc:.3?}, AUC by phase {auc:.3?}")),
    ];
    let summary = checks
        .iter()
        .map(|(ok, msg)| format!("{} {msg}", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    if checks.iter().all(|(ok, _)| *ok) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn movielens_full() -> Outcome {
    let Some(dir) = std::env::var_os("CREU_ML1M_DIR") else {
        return Ok("SKIP: set CREU_ML1M_DIR to the ml-1m directory".into());
    };
    let cfg = ExperimentConfig {
        dataset: DatasetKind::MovieLens1m,
        data_dir: Some(dir.into()),
        backbone: BackboneKind::DeepFm,
        ..ExperimentConfig::default()
    };
    let prepared = trainer::prepare(&cfg).map_err(|e| e.to_string())?;
    let pre = trainer::pretrain_backbone(&prepared.split.old_train, &prepared.schema, &cfg).map_err(|e| e.to_string())?;
    let auc = |v: Variant| -> Result<f64, String> {
        let run = trainer::run_variant(&prepared, &pre, &cfg.with_variant(v), 0.0).map_err(|e| e.to_string())?;
        Ok(run.report.phase(Phase::Cold).auc)
    };
    let (base, creu) = (auc(Variant::BackboneOnly)?, auc(Variant::Creu)?);
    ensure(creu - base >= 1.0, || format!("cold AUC creu {creu:.3} vs backbone-only {base:.3}"))?;
    Ok(format!("cold AUC creu {creu:.3} vs backbone-only {base:.3}"))
}

fn protocol_determinism() -> Outcome {
    let cfg = ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        synthetic: SyntheticConfig {
            users: 200,
            items: 100,
            interactions: 6000,
            min_item_count: 40,
            ..SyntheticConfig::default()
        },
        embed_dim: 8,
        k_shot: 10,
        seed: 11,
        ..ExperimentConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = trainer::run_experiment(&cfg).map_err(|e| e.to_string())?;
        trainer::emit_report(&run.report, d.path()).map_err(|e| e.to_string())?;
    }
    for f in ["phases.csv", "eu_trace.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok("phases.csv and eu_trace.csv byte-identical".into())
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "PaiDEs bounds and monotonicity", budget: Duration::from_secs(5), run: paide_bounds },
        Criterion { id: 2, name: "oracle rank agreement", budget: Duration::from_secs(120), run: oracle_rank_agreement },
        Criterion { id: 3, name: "Sinkhorn correctness", budget: Duration::from_secs(60), run: sinkhorn_correctness },
        Criterion { id: 4, name: "closed-form distances", budget: Duration::from_secs(60), run: closed_form_distances },
        Criterion { id: 5, name: "differentiability", budget: Duration::from_secs(60), run: differentiability },
        Criterion { id: 6, name: "desk-scale end-to-end", budget: Duration::from_secs(600), run: desk_scale },
        Criterion { id: 7, name: "full MovieLens-1M directional", budget: Duration::from_secs(24 * 3600), run: movielens_full },
        Criterion { id: 8, name: "protocol determinism", budget: Duration::from_secs(600), run: protocol_determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.id.to_string() == *f) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > c.budget => Err(format!("{msg}; took {elapsed:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(msg) if msg.starts_with("SKIP") => println!("SKIP [{}] {}: {}", c.id, c.name, &msg[6..]),
            Ok(msg) => println!("PASS [{}] {} ({:.2?}): {msg}", c.id, c.name, elapsed),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{}] {} ({:.2?}): {msg}", c.id, c.name, elapsed);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
