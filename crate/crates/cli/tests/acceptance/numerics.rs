//! Criteria checked in-process against closed forms and reference code.

use anyhow::Result;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylebook_core::attention::{mha_forward_with_weights, MultiHeadAttention};
use stylebook_core::diffusion::{
    cfg_score, forward_perturb, reverse_sde, standard_normal, ConditionalScore, DiffusionSchedule, NetworkScore,
};
use stylebook_core::gradcheck::{grad_check_with, GradCheckOptions};
use stylebook_core::knn::{knn_match, TargetBank};
use stylebook_core::memory::{memory_model, memory_table, Method};
use stylebook_core::model::{tiny_config, LossDraws, Model, TrainExample};
use stylebook_core::nn::Linear;
use stylebook_core::stylebook::{build_stylebook, DualAttention, StyleConfig, StyleEncoder};
use stylebook_core::{ParamStore, Tape, Var};

use crate::oracles::{covariance, full_sort_knn, max_abs_diff, reference_mha, relative_error, GaussianOracle};
use crate::Outcome;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn memory(_: &crate::Context) -> Result<Outcome> {
    // Published storage figures in KiB.
    let published = |m: Method, s: f64| match m {
        Method::Yourtts => 2.0,
        Method::Freevc => 1.0,
        Method::Diffvc => 1.5,
        Method::Proposed => 32.0,
        Method::Knnvc => match s as u32 {
            10 => 2_000.0,
            60 => 12_000.0,
            _ => 60_000.0,
        },
    };
    // Arithmetic: 128 entries of 64 floats, or 50 frames/s of 1024 floats.
    let arithmetic = |m: Method, s: f64| match m {
        Method::Proposed => Some(128.0 * 64.0 * 4.0 / 1024.0),
        Method::Knnvc => Some(s * 50.0 * 1024.0 * 4.0 / 1024.0),
        _ => None,
    };
    let seconds = [10.0, 60.0, 300.0];
    let table = memory_table(&seconds)?;
    let mut mismatches = Vec::new();
    for row in &table {
        let want = published(row.method, row.seconds);
        let agrees = row.kib == want && arithmetic(row.method, row.seconds).is_none_or(|a| a == want);
        if !agrees {
            mismatches.push(format!("{} at {} s: {} KiB", row.method, row.seconds, row.kib));
        }
    }
    let complete = table.len() == 15;
    let rejects = memory_model(Method::Knnvc, 0.0).is_err() && "wavenet".parse::<Method>().is_err();
    Ok(Outcome::new(
        mismatches.is_empty() && complete && rejects,
        if mismatches.is_empty() {
            format!("{} rows exact (proposed 32 KiB, kNN-VC 2000/12000/60000 KiB)", table.len())
        } else {
            format!("mismatched rows: {}", mismatches.join(", "))
        },
    ))
}

pub fn attention(_: &crate::Context) -> Result<Outcome> {
    let mut r = rng(100);
    let (mut worst, mut worst_row_sum) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let heads = r.random_range(1..=3);
        let model_dim = heads * r.random_range(1..=4);
        let dims = [r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=6)];
        let out_dim = r.random_range(1..=5);
        let (rows, keys) = (r.random_range(1..=6), r.random_range(1..=7));
        let mut store = ParamStore::<f64>::new();
        let layer = MultiHeadAttention::new(&mut store, "m", dims, model_dim, heads, out_dim, &mut r);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") {
                *store.value_mut(id) = standard_normal(store.value(id).dim(), &mut r);
            }
        }
        let q = standard_normal((rows, dims[0]), &mut r);
        let k = standard_normal((keys, dims[1]), &mut r);
        let v = standard_normal((keys, dims[2]), &mut r);
        let (got, weights) = mha_forward_with_weights(&store, &layer, &q, &k, &v)?;
        worst = worst.max(max_abs_diff(&got, &reference_mha(&store, &layer, &q, &k, &v)));
        for w in &weights {
            for row in w.rows() {
                worst_row_sum = worst_row_sum.max((row.sum() - 1.0).abs());
            }
        }
    }

    let cfg = StyleConfig {
        mel_hidden: 8,
        style_channels: 8,
        kernel: 3,
        num_queries: 4,
        query_dim: 6,
        attn_dim: 8,
        attn_heads: 2,
        style_dim: 5,
    };
    let mut store = ParamStore::<f64>::new();
    let dual = DualAttention::new(&mut store, 7, 8, &cfg, &mut r);
    let c = standard_normal((30, 7), &mut r);
    let s = standard_normal((30, 8), &mut r);
    let base = build_stylebook(&store, &dual, &c, &s)?;
    let mut worst_perm = 0.0f64;
    for seed in 0..5 {
        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut rng(seed));
        let pc = Array2::from_shape_fn(c.dim(), |(i, j)| c[[perm[i], j]]);
        let ps = Array2::from_shape_fn(s.dim(), |(i, j)| s[[perm[i], j]]);
        worst_perm = worst_perm.max(max_abs_diff(&base, &build_stylebook(&store, &dual, &pc, &ps)?));
    }
    Ok(Outcome::all(vec![
        Outcome::new(worst < 1e-10, format!("max error vs reference {worst:.2e} on 50 shapes")),
        Outcome::new(worst_row_sum <= 1e-6, format!("row sums within {worst_row_sum:.1e} of 1")),
        Outcome::new(worst_perm < 1e-12, format!("permutation change {worst_perm:.1e}")),
    ]))
}

fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Var {
    let w = tape.constant(standard_normal(tape.shape(y), &mut rng(seed)));
    let p = tape.mul(y, w);
    tape.mean(p)
}

pub fn gradients(_: &crate::Context) -> Result<Outcome> {
    let opts = GradCheckOptions { epsilon: 1e-5, ..Default::default() };
    let mut results = Vec::new();

    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "l", 4, 3, &mut r);
    let x = standard_normal((5, 4), &mut r);
    let rep = grad_check_with(&store, &[x], &opts, |t, v| {
        let y = lin.forward(t, v[0]);
        weighted_sum(t, y, 2)
    })?;
    results.push(("linear", rep.max_relative_error));

    let store = ParamStore::<f64>::new();
    let logits = standard_normal::<f64, _>((6, 5), &mut r) * 2.0;
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let rep = grad_check_with(&store, &[logits], &opts, |t, v| t.softmax_cross_entropy(v[0], &labels))?;
    results.push(("softmax-CE", rep.max_relative_error));

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "m", [8, 8, 8], 8, 2, 8, &mut r);
    let q = standard_normal((3, 8), &mut r);
    let kv = standard_normal((5, 8), &mut r);
    let rep = grad_check_with(&store, &[q, kv.clone(), kv], &opts, |t, v| {
        let y = mha.forward(t, v[0], v[1], v[2]).output;
        weighted_sum(t, y, 5)
    })?;
    results.push(("MHA", rep.max_relative_error));

    let mut store = ParamStore::<f64>::new();
    let cfg = StyleConfig { mel_hidden: 6, style_channels: 5, ..StyleConfig::default() };
    let enc = StyleEncoder::new(&mut store, 4, 3, &cfg, &mut r);
    let mel = standard_normal((7, 4), &mut r);
    let content = standard_normal((7, 3), &mut r);
    let rep = grad_check_with(&store, &[mel, content], &opts, |t, v| {
        let y = enc.forward(t, v[0], v[1]);
        weighted_sum(t, y, 11)
    })?;
    results.push(("style encoder", rep.max_relative_error));

    let model = Model::<f64>::new(&tiny_config(3, 5), 11)?;
    let batch: Vec<TrainExample<f64>> = [5usize, 8]
        .iter()
        .map(|&t| TrainExample {
            units: (0..t).map(|_| r.random_range(0..5)).collect(),
            mel: standard_normal((t, 3), &mut r),
        })
        .collect();
    let sched = DiffusionSchedule::default();
    let mut draws = LossDraws::sample(&batch, &sched, &mut r);
    // Conditioned and unconditioned elements exercise both style paths.
    draws.drop = vec![false, true];
    draws.t = vec![0.3, 0.7];
    let loss_opts = GradCheckOptions { max_coords_per_tensor: Some(6), ..opts };
    let rep = grad_check_with(&model.params, &[], &loss_opts, |t, _| model.net.loss(t, &batch, &draws, &sched).total)?;
    results.push(("full loss", rep.max_relative_error));

    Ok(Outcome::all(
        results.into_iter().map(|(name, e)| Outcome::new(e < 1e-4, format!("{name} {e:.1e}"))).collect(),
    ))
}

const DRAWS: usize = 10_000;

pub fn diffusion(_: &crate::Context) -> Result<Outcome> {
    let sched = DiffusionSchedule::default();
    let mut parts = Vec::new();

    let dim = 16;
    let mut r = rng(1);
    let x0_row = Array1::from_shape_fn(dim, |j| 1.0 + 0.1 * j as f64);
    let mu_row = Array1::from_shape_fn(dim, |j| 2.0 - 0.05 * j as f64);
    let x0 = x0_row.broadcast((DRAWS, dim)).expect("row broadcast").to_owned();
    let mu = mu_row.broadcast((DRAWS, dim)).expect("row broadcast").to_owned();
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for t in [0.1, 0.5, 0.9] {
        let z = standard_normal((DRAWS, dim), &mut r);
        let xt = forward_perturb(&x0, &mu, t, &z, &sched)?;
        let want_mean = &mu_row + &((&x0_row - &mu_row) * sched.decay(t));
        mean_err = mean_err.max(relative_error(&xt.mean_axis(Axis(0)).expect("draws"), &want_mean));
        let var = xt.var_axis(Axis(0), 1.0).mean().expect("dims");
        var_err = var_err.max((var - sched.variance(t)).abs() / sched.variance(t));
    }
    parts.push(Outcome::new(
        mean_err < 0.03 && var_err < 0.03,
        format!("forward marginals: mean {:.2}%, variance {:.2}%", 100.0 * mean_err, 100.0 * var_err),
    ));

    let cfg = tiny_config(3, 5);
    let model = Model::<f64>::new(&cfg, 6)?;
    let mut r = rng(6);
    let [mu, x, style, uncond]: [Array2<f64>; 4] = std::array::from_fn(|_| standard_normal((9, 3), &mut r));
    let net = NetworkScore { store: &model.params, decoder: &model.net.decoder, mu: &mu, schedule: &sched };
    let plain = net.score(&x, 0.4, &style);
    let zero = DiffusionSchedule { guidance_scale_style: 0.0, ..sched.clone() };
    let mut identities = cfg_score(&net, &x, 0.4, &style, &uncond, &zero)? == plain;
    for gamma in [0.5, 2.0, -1.0] {
        let s = DiffusionSchedule { guidance_scale_style: gamma, ..sched.clone() };
        identities &= cfg_score(&net, &x, 0.4, &style, &style, &s)? == plain;
    }
    parts.push(Outcome::new(identities, format!("cfg identities exact: {identities}")));

    let o = GaussianOracle::standard();
    let start = o.mu.broadcast((DRAWS, 2)).expect("row broadcast").to_owned();
    let y = reverse_sde(|x: &Array2<f64>, t| Ok(o.score(x, t)), &start, &sched, &mut rng(3))?;
    let m_err = relative_error(&y.mean_axis(Axis(0)).expect("draws"), &o.m);
    let c_err = relative_error(&covariance(&y), &o.cov);
    parts.push(Outcome::new(
        m_err < 0.05 && c_err < 0.05,
        format!("Gaussian sampling at N={}: mean {:.2}%, cov {:.2}%", sched.steps, 100.0 * m_err, 100.0 * c_err),
    ));
    Ok(Outcome::all(parts))
}

pub fn knn(_: &crate::Context) -> Result<Outcome> {
    let mut r = rng(42);
    let random = |rows: usize, cols: usize, r: &mut ChaCha8Rng| {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0f32..1.0))
    };
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = r.random_range(1..=8);
        let t = r.random_range(1..=40);
        let k = r.random_range(1..=t);
        let mut bank = random(t, d, &mut r);
        if t > 2 && case % 3 == 0 {
            let first = bank.row(0).to_owned();
            bank.row_mut(t - 1).assign(&first);
        }
        let src = random(r.random_range(1..=10), d, &mut r);
        let got = knn_match(&TargetBank::new(bank.clone()), &src, k)?;
        let want = full_sort_knn(&bank, &src, k);
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max));
    }
    let mut mean_exact = true;
    for t in [1, 7, 50] {
        let bank = random(t, 5, &mut r);
        let src = random(6, 5, &mut r);
        let got = knn_match(&TargetBank::new(bank.clone()), &src, t)?;
        let mean: Vec<f32> =
            (0..5).map(|c| ((0..t).map(|j| bank[[j, c]] as f64).sum::<f64>() / t as f64) as f32).collect();
        mean_exact &= got.rows().into_iter().all(|row| row.to_vec() == mean);
    }
    Ok(Outcome::all(vec![
        Outcome::new(worst <= 1e-12, format!("max error vs full sort {worst:.1e} on 100 instances")),
        Outcome::new(mean_exact, format!("k=T gives the bank mean exactly: {mean_exact}")),
    ]))
}
