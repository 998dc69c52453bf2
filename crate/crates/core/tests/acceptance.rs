//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero when
//! any criterion fails.

mod common;

use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;

use common::{assert_schema_valid, toy_config};
use tabgen_core::config::RunConfig;
use tabgen_core::data::{fit_preprocess, inverse_transform, make_splits, transform, write_csv};
use tabgen_core::decoder::{
    decoder_inputs, decoder_loss, decoder_loss_and_grad, decoder_train_step, DecoderConfig, DecoderTransformer,
    Detokenizer, LatentSource,
};
use tabgen_core::diffusion::*;
use tabgen_core::encoder::{compute_stats, denormalize, normalize};
use tabgen_core::eval::{authenticity, dcr, nearest, nearest_brute, shape_score, trend_score, MixedPoints};
use tabgen_core::nn::Params;
use tabgen_core::optim::{Optimizer, Plateau, TrainState};
use tabgen_core::pipeline::*;
use tabgen_core::{rng, toy};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn c1_preconditioning() -> Outcome {
    let p = Preconditioner::default();
    let sd = p.sigma_data;
    let mut worst = 0.0f64;
    for sigma in [1e-8, 0.002, 1.0, 80.0] {
        let c = p.coefficients(sigma).unwrap();
        let denom = sigma * sigma + sd * sd;
        let expect = [sd * sd / denom, sigma * sd / denom.sqrt(), 1.0 / denom.sqrt(), sigma.ln() / 4.0];
        for (got, want) in [c.c_skip, c.c_out, c.c_in, c.c_noise].into_iter().zip(expect) {
            worst = worst.max(if want == 0.0 { got.abs() } else { rel(got, want) });
        }
    }
    let one = p.coefficients(1.0).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let exact = one.c_skip == 0.5 && one.c_out == h && one.c_in == h && one.c_noise == 0.0;
    outcome(
        worst <= 1e-9 && exact,
        format!("max relative error {worst:.1e}; sigma=1 gives ({}, {}, {}, {})", one.c_skip, one.c_out, one.c_in, one.c_noise),
    )
}

fn c2_karras() -> Outcome {
    let s = NoiseSchedule::default();
    let got = karras_schedule(&s).unwrap();
    let t = s.n_steps as f64;
    let oracle: Vec<f64> = (1..=s.n_steps)
        .map(|i| (s.sigma_max.powf(1.0 / s.rho) + (i as f64 - 1.0) / (t - 1.0) * (s.sigma_min.powf(1.0 / s.rho) - s.sigma_max.powf(1.0 / s.rho))).powf(s.rho))
        .collect();
    let endpoints = (got[0] - 80.0).abs() <= 1e-9 && (got[got.len() - 1] - 0.002).abs() <= 1e-9;
    let decreasing = got.windows(2).all(|w| w[0] > w[1]);
    let worst = got.iter().zip(&oracle).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    outcome(
        endpoints && decreasing && worst <= 1e-9,
        format!("endpoints ({}, {}), decreasing {decreasing}, max relative error vs oracle {worst:.1e}", got[0], got[got.len() - 1]),
    )
}

struct FixedTarget(Array3<f64>);

impl Denoise for FixedTarget {
    fn denoise(&self, z: &Array3<f64>, _: &[f64]) -> tabgen_core::Result<Array3<f64>> {
        Ok(self.0.slice(ndarray::s![..z.dim().0, .., ..]).to_owned())
    }
}

fn c3_oracle_sampler() -> Outcome {
    let mut r = rng::rng_from(3, &[]);
    let (n, t, k) = (64, 3, 5);
    let target = Array3::from_shape_vec((n, t, k), rng::normal_vec(&mut r, n * t * k)).unwrap() * 2.0;
    let mut worst = 0.0f64;
    for steps in [2, 3, 5, 10, 18, 50, 200] {
        let sched = NoiseSchedule { n_steps: steps, ..Default::default() };
        let mut a = rng::rng_from(steps as u64, &[]);
        let mut b = a.clone();
        let out = reverse_sample(&FixedTarget(target.clone()), &sched, n, t, k, &mut a).unwrap();
        let init = Array3::from_shape_vec((n, t, k), rng::normal_vec(&mut b, n * t * k)).unwrap() * sched.sigma_max;
        let e = (&init - &target) / sched.sigma_max;
        let expect = &target + &(e * sched.sigma_min);
        worst = worst.max(out.iter().zip(expect.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    outcome(worst <= 1e-6, format!("max abs deviation from Z0* + sigma_T E over T in 2..200: {worst:.1e}"))
}

fn randomize<P: Params>(mut p: P, seed: u64) -> P {
    let mut r = rng::rng_from(seed, &[0xa11]);
    for v in p.params_mut() {
        for x in v.data.iter_mut() {
            *x += 0.3 * rng::normal(&mut r);
        }
    }
    p
}

/// Checks every parameter of `n_tensors` tensors; returns the worst
/// relative disagreement.
fn check_all(analytic: &[Vec<f64>], f: &dyn Fn(usize, usize, f64) -> f64) -> (f64, usize) {
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (ti, g) in analytic.iter().enumerate() {
        for (idx, &a) in g.iter().enumerate() {
            let num = (f(ti, idx, h) - f(ti, idx, -h)) / (2.0 * h);
            let scale = num.abs().max(a.abs()).max(1e-4);
            worst = worst.max((num - a).abs() / scale);
            count += 1;
        }
    }
    (worst, count)
}

fn c4_gradients() -> Outcome {
    let precond = Preconditioner::default();
    let net = randomize(DenoiserNetwork::new(DenoiserConfig { n_layers: 1, n_heads: 2, latent_dim: 4 }, 1).unwrap(), 1);
    let mut r = rng::rng_from(4, &[]);
    let z0 = Array3::from_shape_vec((3, 2, 4), rng::normal_vec(&mut r, 24)).unwrap();
    let noise = Array3::from_shape_vec((3, 2, 4), rng::normal_vec(&mut r, 24)).unwrap();
    let sigmas = [0.2, 1.0, 3.0];
    let (_, g) = diffusion_loss_and_grad(&net, precond, &z0, &sigmas, &noise).unwrap();
    let analytic: Vec<Vec<f64>> = g.params().iter().map(|p| p.data.to_vec()).collect();
    let (w1, n1) = check_all(&analytic, &|ti, idx, h| {
        let mut n = net.clone();
        n.params_mut()[ti].data[idx] += h;
        diffusion_loss(&n, precond, &z0, &sigmas, &noise).unwrap()
    });

    let schema = common::cards_2_5(4).schema;
    let dec = randomize(DecoderTransformer::new(DecoderConfig { n_layers: 1, n_heads: 2, latent_dim: 4 }, 2).unwrap(), 2);
    let det = randomize(Detokenizer::new(&schema, 4, 3), 3);
    let hh = Array3::from_shape_vec((4, 3, 4), rng::normal_vec(&mut r, 48)).unwrap();
    let target = Array2::from_shape_vec((4, 3), vec![0.5, 0.0, 4.0, -1.0, 1.0, 2.0, 0.1, 1.0, 0.0, 2.0, 0.0, 3.0]).unwrap();
    let (_, gdec, gdet) = decoder_loss_and_grad(&dec, &det, &hh, &target).unwrap();
    let n_dec = gdec.params().len();
    let mut analytic: Vec<Vec<f64>> = gdec.params().iter().map(|p| p.data.to_vec()).collect();
    analytic.extend(gdet.params().iter().map(|p| p.data.to_vec()));
    let (w2, n2) = check_all(&analytic, &|ti, idx, h| {
        let (mut d, mut t) = (dec.clone(), det.clone());
        if ti < n_dec {
            d.params_mut()[ti].data[idx] += h;
        } else {
            t.params_mut()[ti - n_dec].data[idx] += h;
        }
        decoder_loss(&d, &t, &hh, &target).unwrap()
    });
    outcome(
        w1 <= 1e-3 && w2 <= 1e-3,
        format!("diffusion loss: {n1} params, worst rel {w1:.1e}; reconstruction loss: {n2} params, worst rel {w2:.1e}"),
    )
}

/// Returns (max |mean - m|, max |var/v - 1|) for one seed at each step count.
fn gaussian_recovery(seed: u64, steps_list: &[usize]) -> Vec<(f64, f64)> {
    let (n, t, k) = (4096, 2, 4);
    let mut r = rng::rng_from(seed, &[0x6a55]);
    let m: Vec<f64> = (0..t * k).map(|_| r.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..t * k).map(|_| r.random_range(0.25..2.0)).collect();
    let mut h = Array3::zeros((n, t, k));
    for i in 0..n {
        for c in 0..t * k {
            h[[i, c / k, c % k]] = m[c] + v[c].sqrt() * rng::normal(&mut r);
        }
    }
    let (mu, sd) = compute_stats(&h);
    let z0 = normalize(&h, &mu, &sd);
    let mut net = DenoiserNetwork::new(DenoiserConfig { n_layers: 4, n_heads: 2, latent_dim: k }, seed).unwrap();
    let precond = Preconditioner::default();
    let schedule = NoiseSchedule::default();
    let mut st = TrainState::new(Optimizer::adamw(1e-3, 1e-5), Plateau::new(0.5, 50), 1.0);
    for _ in 0..2000 {
        let rows = sample_batch_rows(n, 256, &mut r);
        train_step(&mut st, &mut net, precond, &schedule, &z0.select(Axis(0), &rows), &mut r).unwrap();
    }
    let den = EdmDenoiser::new(&net, precond);
    steps_list
        .iter()
        .map(|&steps| {
            let sched = NoiseSchedule { n_steps: steps, ..Default::default() };
            let z = reverse_sample(&den, &sched, n, t, k, &mut rng::rng_from(seed, &[0x5a, steps as u64])).unwrap();
            let out = denormalize(&z, &mu, &sd);
            let (mut dm, mut dv) = (0.0f64, 0.0f64);
            for c in 0..t * k {
                let col: Vec<f64> = (0..n).map(|i| out[[i, c / k, c % k]]).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                dm = dm.max((mean - m[c]).abs());
                dv = dv.max((var / v[c] - 1.0).abs());
            }
            (dm, dv)
        })
        .collect()
}

fn c5_gaussian_recovery() -> Outcome {
    let steps = [100, 10];
    let results: Vec<Vec<(f64, f64)>> = (0..5).map(|s| gaussian_recovery(s, &steps)).collect();
    let ok = |i: usize| results.iter().filter(|r| r[i].0 <= 0.1 && r[i].1 <= 0.25).count();
    let worst = |i: usize| {
        results
            .iter()
            .map(|r| format!("{:.3}/{:.2}", r[i].0, r[i].1))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        ok(0) >= 4,
        format!(
            "T=100 reverse steps: {}/5 seeds within tolerance (max |dmean|/max |dvar| per seed: {}); at the default T=10: {}/5 ({})",
            ok(0),
            worst(0),
            ok(1),
            worst(1)
        ),
    )
}

fn e2e_config() -> RunConfig {
    RunConfig { batch_size: 256, ..toy_config(2, 200) }
}

struct E2eRun {
    shape: f64,
    /// Same pretrained weights, decoder fitted at the decoder pretraining lr.
    shape_alt: f64,
    valid: bool,
    encoder_calls: usize,
    front: FrozenFrontEnd,
    bundle: GeneratorBundle,
    unseen: PreparedDataset,
}

fn e2e_seed(seed: u64) -> E2eRun {
    let cfg = e2e_config();
    let front = FrozenFrontEnd::from_config(&cfg).unwrap();
    let raw = vec![
        ("toy-a".to_string(), toy::mixed_table(500, 0, 100 + seed)),
        ("toy-b".to_string(), toy::mixed_table(500, 1, 200 + seed)),
    ];
    let prep = prepare_datasets(&raw, &cfg, &front, None).unwrap();
    let weights = pretrain(&prep, &cfg, seed, None).unwrap().weights();
    let unseen_raw = toy::mixed_table(500, 2, 300 + seed);
    let (bundle, _) = fit(&unseen_raw, &weights, &cfg, &front, seed, None).unwrap();
    let before = front.encoder.forward_passes();
    let synth = generate(&bundle, 1000, seed).unwrap();
    let encoder_calls = front.encoder.forward_passes() - before;
    let valid = std::panic::catch_unwind(|| assert_schema_valid(&synth)).is_ok() && synth.n_rows() == 1000;
    let shape = shape_score(&unseen_raw, &synth).unwrap().0;
    let alt_cfg = RunConfig {
        fit_decoder_learning_rate: Some(cfg.decoder_learning_rate),
        ..cfg.clone()
    };
    let (alt, _) = fit(&unseen_raw, &weights, &alt_cfg, &front, seed, None).unwrap();
    let shape_alt = shape_score(&unseen_raw, &generate(&alt, 1000, seed).unwrap()).unwrap().0;
    let unseen = prepare_dataset("toy-c", &unseen_raw, &cfg, &front, None).unwrap();
    E2eRun {
        shape,
        shape_alt,
        valid,
        encoder_calls,
        front,
        bundle,
        unseen,
    }
}

fn c6_end_to_end(runs: &[E2eRun]) -> Outcome {
    let passing = runs.iter().filter(|r| r.shape >= 0.7).count();
    let valid = runs.iter().all(|r| r.valid);
    let calls: usize = runs.iter().map(|r| r.encoder_calls).sum();
    let shapes: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.shape)).collect();
    let alt: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.shape_alt)).collect();
    let alt_passing = runs.iter().filter(|r| r.shape_alt >= 0.7).count();
    outcome(
        valid && calls == 0 && passing >= 4,
        format!(
            "schema-valid {valid}, encoder calls during generation {calls}, Shape per seed [{}], {passing}/5 >= 0.7 \
             (fit lr 1e-6 for both stages); info: decoder fitted at lr {} instead gives [{}], {alt_passing}/5",
            shapes.join(", "),
            runs[0].bundle.config.decoder_learning_rate,
            alt.join(", ")
        ),
    )
}

fn c7_denoised_vs_clean(runs: &[E2eRun]) -> Outcome {
    let mut deltas = Vec::new();
    for (seed, run) in runs.iter().enumerate() {
        let cfg = &run.bundle.config;
        let d = &run.unseen;
        let den = EdmDenoiser::new(&run.bundle.denoiser, cfg.preconditioner());
        let schedule = cfg.schedule();
        let n = d.n_rows();
        let det0 = Detokenizer::new(d.schema(), cfg.latent_dim, rng::derive_seed(seed as u64, &[0xc7]));
        let train = |source: LatentSource| {
            let mut dec = run.bundle.decoder.clone();
            let mut det = det0.clone();
            let mut st = TrainState::new(Optimizer::sgd(cfg.decoder_learning_rate, cfg.decoder_weight_decay), Plateau::new(0.5, 50), 1.0);
            let mut r = rng::rng_from(seed as u64, &[0xc7, 1]);
            for _ in 0..200 {
                let rows = sample_batch_rows(n, 256, &mut r);
                let target = d.x.select(Axis(0), &rows);
                decoder_train_step(&mut st, &mut dec, &mut det, &den, &schedule, &d.cache, &rows, &target, source, &mut r).unwrap();
            }
            (dec, det)
        };
        let (dec_a, det_a) = train(LatentSource::Denoised);
        let (dec_b, det_b) = train(LatentSource::Clean);
        let all: Vec<usize> = (0..n).collect();
        let mut er = rng::rng_from(seed as u64, &[0xc7, 2]);
        let h = decoder_inputs(&den, &schedule, &d.cache, &all, LatentSource::Denoised, &mut er).unwrap();
        let la = decoder_loss(&dec_a, &det_a, &h, &d.x).unwrap();
        let lb = decoder_loss(&dec_b, &det_b, &h, &d.x).unwrap();
        deltas.push((la, lb));
    }
    let mut diffs: Vec<f64> = deltas.iter().map(|(a, b)| a - b).collect();
    diffs.sort_by(f64::total_cmp);
    let median = diffs[diffs.len() / 2];
    let pairs: Vec<String> = deltas.iter().map(|(a, b)| format!("{a:.3}<={b:.3}")).collect();
    outcome(
        median <= 0.0,
        format!("loss on denoised embeddings, denoised-trained vs clean-trained per seed [{}], median difference {median:.4}", pairs.join(", ")),
    )
}

fn c8_data_metrics() -> Outcome {
    let mut r = rng::rng_from(8, &[]);
    let mut split_ok = 0;
    for _ in 0..1000 {
        let n = r.random_range(10..400usize);
        let seed: u64 = r.random();
        let ds = toy::numeric_table(n, 1, seed);
        let plan = make_splits(&ds, 1, seed, r.random_bool(0.5)).unwrap();
        let rep = &plan.repeats[0];
        let mut all: Vec<usize> = rep.parts().iter().flat_map(|p| p.iter().copied()).collect();
        all.sort_unstable();
        if all == (0..n).collect::<Vec<_>>() {
            split_ok += 1;
        }
    }
    let table = toy::mixed_table(400, 3, 8);
    let state = fit_preprocess(&table).unwrap();
    let back = inverse_transform(&transform(&table, &state).unwrap(), &state).unwrap();
    let round_trip = table.values.iter().zip(back.values.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let shape = shape_score(&table, &table).unwrap().0;
    let trend = trend_score(&table, &table).unwrap().0;
    let (dcr_raw, dcr_score, _) = dcr(&table, &table, &state, None).unwrap();
    let auth = authenticity(&table, &table, &state).unwrap();
    let big = toy::mixed_table(2000, 4, 9);
    let bstate = fit_preprocess(&big).unwrap();
    let pts = MixedPoints::new(&big, &bstate).unwrap();
    let q = MixedPoints::new(&toy::mixed_table(2000, 5, 10), &bstate).unwrap();
    let nn_equal = nearest(&q, &pts, false) == nearest_brute(&q, &pts, false) && nearest(&pts, &pts, true) == nearest_brute(&pts, &pts, true);
    outcome(
        split_ok == 1000 && round_trip <= 1e-9 && shape == 1.0 && trend == 1.0 && dcr_raw == 0.0 && dcr_score == 0.0 && auth == 0.0 && nn_equal,
        format!(
            "splits partition {split_ok}/1000; preprocess round-trip max error {round_trip:.1e}; identical tables Shape {shape} Trend {trend}; train copy DCR {dcr_raw}/{dcr_score} Authenticity {auth}; NN oracle at 2000 rows equal {nn_equal}"
        ),
    )
}

fn full_run(dir: &std::path::Path) -> Vec<u8> {
    let cfg = RunConfig { fit_diffusion_steps: 50, fit_decoder_steps: 50, ..toy_config(2, 50) };
    let front = FrozenFrontEnd::from_config(&cfg).unwrap();
    let raw = vec![("a".to_string(), toy::mixed_table(300, 0, 1)), ("b".to_string(), toy::numeric_table(300, 4, 2))];
    let cache = dir.join("cache");
    let prep = prepare_datasets(&raw, &cfg, &front, Some(&cache)).unwrap();
    let weights = pretrain(&prep, &cfg, 42, Some(&dir.join("pretrain.ckpt"))).unwrap().weights();
    let wpath = dir.join("pretrained.tensors");
    weights.save(&wpath).unwrap();
    let weights = PretrainedWeights::load(&wpath).unwrap();
    let (bundle, _) = fit(&toy::mixed_table(250, 6, 3), &weights, &cfg, &front, 42, Some(&cache)).unwrap();
    save_bundle(&bundle, &dir.join("bundle")).unwrap();
    let loaded = load_bundle(&dir.join("bundle")).unwrap();
    let table = generate(&loaded, 500, 7).unwrap();
    let out = dir.join("synth.csv");
    write_csv(&out, &table).unwrap();
    std::fs::read(out).unwrap()
}

fn c9_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = full_run(a.path());
    let y = full_run(b.path());
    let bundle_a = std::fs::read(a.path().join("bundle/manifest.json")).unwrap();
    let bundle_b = std::fs::read(b.path().join("bundle/manifest.json")).unwrap();
    outcome(
        x == y && bundle_a == bundle_b && !x.is_empty(),
        format!("generated CSV {} bytes, identical {}; bundle manifests identical {}", x.len(), x == y, bundle_a == bundle_b),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome, failures: &mut usize) {
    let start = Instant::now();
    let o = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    };
    if !o.pass {
        *failures += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    println!("[{}] criterion {id} {name} ({secs:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    // accept and ignore libtest flags such as --nocapture
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: usize| filter.is_empty() || filter.iter().any(|f| f == &id.to_string());
    let mut failures = 0;
    let total = Instant::now();
    if selected(1) {
        report(1, "preconditioning identities", c1_preconditioning, &mut failures);
    }
    if selected(2) {
        report(2, "noise schedule", c2_karras, &mut failures);
    }
    if selected(3) {
        report(3, "oracle sampler exactness", c3_oracle_sampler, &mut failures);
    }
    if selected(4) {
        report(4, "gradient checks", c4_gradients, &mut failures);
    }
    if selected(5) {
        report(5, "Gaussian recovery", c5_gaussian_recovery, &mut failures);
    }
    if selected(6) || selected(7) {
        let start = Instant::now();
        let runs: Vec<E2eRun> = (0..5).map(e2e_seed).collect();
        let shared = start.elapsed();
        if selected(6) {
            report(6, "end-to-end toy pipeline", || c6_end_to_end(&runs), &mut failures);
        }
        if selected(7) {
            report(7, "denoised vs clean decoder training", || c7_denoised_vs_clean(&runs), &mut failures);
        }
        println!("         (criteria 6-7 shared pretrain/fit/generate runs: {:.1}s)", shared.as_secs_f64());
        drop(runs.into_iter().map(|r| r.front).collect::<Vec<_>>());
    }
    if selected(8) {
        report(8, "data and metric suites", c8_data_metrics, &mut failures);
    }
    if selected(9) {
        report(9, "determinism and persistence", c9_determinism, &mut failures);
    }
    println!("acceptance: {failures} failing criteria ({:.1}s)", total.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
