mod common;

use common::*;
use tabgen_core::data::make_splits;
use tabgen_core::error::Error;
use tabgen_core::nn::Params;
use tabgen_core::pipeline::*;
use tabgen_core::toy;

#[test]
fn step_counts_per_round() {
    let cfg = toy_config(2, 10);
    let (_, prep) = prepared(&cfg, vec![("one", toy::mixed_table(120, 0, 1))]);
    let p = pretrain(&prep, &cfg, 0, None).unwrap();
    assert_eq!((p.diffusion.step, p.decoding.step), (20, 20));
    assert_eq!(p.rounds_done, 2);
    assert_eq!(p.detokenizers.len(), 1);
}

#[test]
fn shared_weights_learn_from_datasets_of_different_width() {
    let cfg = toy_config(1, 5);
    let (_, both) = prepared(&cfg, two_toys());
    let (_, only_first) = prepared(&cfg, two_toys()[..1].to_vec());
    let a = pretrain(&both, &cfg, 3, None).unwrap();
    let b = pretrain(&only_first, &cfg, 3, None).unwrap();
    assert_eq!(a.detokenizers.len(), 2);
    assert_ne!(a.denoiser.content_hash(), b.denoiser.content_hash());
    assert_ne!(a.decoder.content_hash(), b.decoder.content_hash());
    let names = |p: &Pretrainer| p.denoiser.params().into_iter().map(|v| (v.name, v.shape)).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("state.ckpt");
    let cfg = toy_config(3, 6);
    let (_, prep) = prepared(&cfg, two_toys());
    let full = pretrain(&prep, &cfg, 9, None).unwrap();

    let mut partial = Pretrainer::new(&cfg, 9, &prep).unwrap();
    partial.run_round(&prep).unwrap();
    partial.save_checkpoint(&ckpt).unwrap();
    drop(partial);
    let resumed = pretrain(&prep, &cfg, 9, Some(&ckpt)).unwrap();
    assert_eq!(resumed.denoiser, full.denoiser);
    assert_eq!(resumed.decoder, full.decoder);
    assert_eq!(resumed.diffusion, full.diffusion);
    assert_eq!(resumed.decoding, full.decoding);
    assert!(matches!(pretrain(&prep, &cfg, 10, Some(&ckpt)), Err(Error::Config(_))));
}

#[test]
fn cache_failure_names_the_dataset() {
    let cfg = toy_config(1, 1);
    let front = FrozenFrontEnd::from_config(&cfg).unwrap();
    let raw = vec![("ok".to_string(), toy::mixed_table(50, 0, 1)), ("tiny".to_string(), toy::mixed_table(3, 0, 1))];
    match prepare_datasets(&raw, &cfg, &front, None) {
        Err(Error::Pretrain { dataset, .. }) => assert_eq!(dataset, "tiny"),
        other => panic!("expected pretraining error, got {:?}", other.err()),
    }
}

#[test]
fn fit_stages_and_heads() {
    let cfg = toy_config(1, 5);
    let (front, prep) = prepared(&cfg, two_toys());
    let weights = pretrain(&prep, &cfg, 0, None).unwrap().weights();
    let unseen = cards_2_5(60);
    let (bundle, report) = fit(&unseen, &weights, &cfg, &front, 1, None).unwrap();
    assert_ne!(report.denoiser_hash_initial, report.denoiser_hash_after_diffusion);
    assert_eq!(report.denoiser_hash_after_diffusion, report.denoiser_hash_after_decoder);
    assert_eq!(report.diffusion_losses.len(), 100);
    assert_eq!(report.decoder_losses.len(), 100);
    let k = cfg.latent_dim;
    assert_eq!(bundle.detokenizer.weights[1].dim(), (2, k));
    assert_eq!(bundle.detokenizer.weights[2].dim(), (5, k));
    assert_eq!(bundle.detokenizer.weights[0].dim(), (1, k));
}

#[test]
fn fit_lowers_both_losses() {
    let cfg = toy_config(1, 20);
    let (front, prep) = prepared(&cfg, two_toys());
    let weights = pretrain(&prep, &cfg, 0, None).unwrap().weights();
    let unseen = toy::mixed_table(200, 7, 5);
    let mut diff = Vec::new();
    let mut dec = Vec::new();
    for seed in 0..5 {
        let (_, r) = fit(&unseen, &weights, &cfg, &front, seed, None).unwrap();
        diff.push(r.diffusion_eval.1 - r.diffusion_eval.0);
        dec.push(r.decoder_eval.1 - r.decoder_eval.0);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[2]
    };
    assert!(median(&mut diff) < 0.0, "diffusion deltas {diff:?}");
    assert!(median(&mut dec) < 0.0, "decoder deltas {dec:?}");
}

#[test]
fn fit_rejects_tables_without_features() {
    let cfg = toy_config(1, 1);
    let (front, _) = prepared(&cfg, vec![]);
    let weights = PretrainedWeights::init(&cfg, 0).unwrap();
    let mut t = toy::mixed_table(40, 0, 0);
    t.values = t.values.slice(ndarray::s![.., 5..]).to_owned();
    t.schema.drain(..5);
    assert!(matches!(fit(&t, &weights, &cfg, &front, 0, None), Err(Error::Fit(_))));
}

#[test]
fn split_fit_uses_only_training_rows() {
    let cfg = RunConfig { fit_diffusion_steps: 2, fit_decoder_steps: 2, ..toy_config(1, 1) };
    let (front, _) = prepared(&cfg, vec![]);
    let weights = PretrainedWeights::init(&cfg, 0).unwrap();
    let ds = toy::mixed_table(100, 2, 3);
    let plan = make_splits(&ds, 2, 4, true).unwrap();
    let (_, report) = fit_on_split(&ds, &plan, 1, &weights, &cfg, &front, 0, None).unwrap();
    let rep = &plan.repeats[1];
    assert_eq!(report.train_rows, rep.train);
    for other in [&rep.val, &rep.test, &rep.holdout] {
        assert!(report.train_rows.iter().all(|i| !other.contains(i)));
    }
}

use tabgen_core::config::RunConfig;

fn small_bundle(seed: u64) -> (GeneratorBundle, FrozenFrontEnd) {
    let cfg = RunConfig { fit_diffusion_steps: 10, fit_decoder_steps: 10, ..toy_config(1, 10) };
    let (front, prep) = prepared(&cfg, two_toys());
    let weights = pretrain(&prep, &cfg, seed, None).unwrap().weights();
    let (bundle, _) = fit(&toy::mixed_table(150, 4, 2), &weights, &cfg, &front, seed, None).unwrap();
    (bundle, front)
}

#[test]
fn generation_contract() {
    let (bundle, front) = small_bundle(0);
    let passes = front.encoder.forward_passes();
    let t = generate(&bundle, 1000, 5).unwrap();
    assert_eq!(front.encoder.forward_passes(), passes);
    assert_eq!(t.n_rows(), 1000);
    assert_eq!(t.schema, bundle.schema());
    assert_schema_valid(&t);
    assert_eq!(t, generate(&bundle, 1000, 5).unwrap());
    assert_ne!(t, generate(&bundle, 1000, 6).unwrap());
    assert!(matches!(generate(&bundle, 0, 5), Err(Error::Argument(_))));
}

#[test]
fn bundle_round_trip_and_failures() {
    let (bundle, _) = small_bundle(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle");
    save_bundle(&bundle, &path).unwrap();
    let back = load_bundle(&path).unwrap();
    assert_eq!(back.preprocess, bundle.preprocess);
    assert_eq!(back.config, bundle.config);
    assert_eq!(back.mu, bundle.mu);
    assert_eq!(back.sd, bundle.sd);
    assert_eq!(back.tokenizer, bundle.tokenizer);
    assert_eq!(back.denoiser, bundle.denoiser);
    assert_eq!(back.decoder, bundle.decoder);
    assert_eq!(back.detokenizer, bundle.detokenizer);
    assert_eq!(back, bundle);
    assert_eq!(generate(&back, 200, 7).unwrap(), generate(&bundle, 200, 7).unwrap());
    assert_eq!(generate(&back, 200, 7).unwrap(), generate(&back, 200, 7).unwrap());

    // binding: a 6-column bundle refuses an 8-column request
    let wide = toy::numeric_table(10, 7, 0);
    assert!(matches!(generate_for_schema(&back, &wide.schema, 10, 0), Err(Error::Binding(_))));
    assert!(generate_for_schema(&back, bundle.schema(), 10, 0).is_ok());

    // truncation
    let trunc = dir.path().join("trunc");
    save_bundle(&bundle, &trunc).unwrap();
    let f = trunc.join("denoiser.tensors");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_bundle(&trunc), Err(Error::Corrupt { .. })));

    // version
    let ver = dir.path().join("ver");
    save_bundle(&bundle, &ver).unwrap();
    let m = ver.join("manifest.json");
    let text = std::fs::read_to_string(&m).unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
    std::fs::write(&m, text).unwrap();
    assert!(matches!(load_bundle(&ver), Err(Error::Version { .. })));

    // truncated manifest
    let tm = dir.path().join("tm");
    save_bundle(&bundle, &tm).unwrap();
    std::fs::write(tm.join("manifest.json"), b"{\"vers").unwrap();
    assert!(matches!(load_bundle(&tm), Err(Error::Corrupt { .. })));
}

#[test]
fn weights_file_round_trip() {
    let cfg = toy_config(1, 2);
    let (_, prep) = prepared(&cfg, two_toys());
    let w = pretrain(&prep, &cfg, 0, None).unwrap().weights();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.tensors");
    w.save(&path).unwrap();
    assert_eq!(PretrainedWeights::load(&path).unwrap(), w);
}
