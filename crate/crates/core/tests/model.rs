use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timesaf::blocks::Tracer;
use timesaf::model::{
    evaluate, train, Branch, Forecaster, LinearBaseline, ModelConfig, ModelError, PromptSource, TimeSaf, TrainConfig,
    Variant, WiringEvent,
};
use timesaf::numerics::{gradcheck, AdamConfig, NumericsError, Params, Tape, Tensor};
use timesaf::preprocess::{build_windows, PatchConfig, Series, Split, SplitRatios, WindowOptions};
use timesaf::prompts::{EmbeddingProvider, PromptTemplateSpec};

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn wiring_of(cfg: ModelConfig) -> Vec<WiringEvent> {
    let model = TimeSaf::new(cfg.clone(), AdamConfig::default()).unwrap();
    let tape = Tape::new();
    let p = model.store().bind(&tape);
    let x = tape.constant(random(&[1, cfg.patch.lookback, cfg.n_vars], 1, 1.0));
    let e = tape.constant(random(&[1, cfg.d_llm, cfg.n_vars], 2, 1.0));
    model.forward(&p, &x, &e, &Tracer::disabled()).unwrap().wiring
}

fn both(layer: usize, refine: Option<usize>) -> [WiringEvent; 2] {
    match refine {
        None => [Branch::Time, Branch::Text].map(|branch| WiringEvent::Unimodal { branch, layer }),
        Some(stage) => [Branch::Time, Branch::Text].map(|branch| WiringEvent::Refine { branch, layer, stage }),
    }
}

#[test]
fn wiring_single_stage_two_layers() {
    let mut expect = Vec::new();
    expect.extend(both(1, None));
    expect.push(WiringEvent::Fusion {
        stage: 1,
        after_layer: 1,
    });
    expect.extend(both(2, Some(1)));
    expect.push(WiringEvent::Head);
    assert_eq!(wiring_of(ModelConfig::micro()), expect);
}

#[test]
fn wiring_two_stages_four_layers() {
    let cfg = ModelConfig {
        depth: 4,
        stages: 2,
        fusion_layers: Some(vec![2, 3]),
        refine_layers: Some(vec![2, 3, 4]),
        ..ModelConfig::micro()
    };
    // layer 2 is in R but no memory exists yet, so it stays unimodal
    let mut expect = Vec::new();
    expect.extend(both(1, None));
    expect.extend(both(2, None));
    expect.push(WiringEvent::Fusion {
        stage: 1,
        after_layer: 2,
    });
    expect.extend(both(3, Some(1)));
    expect.push(WiringEvent::Fusion {
        stage: 2,
        after_layer: 3,
    });
    expect.extend(both(4, Some(2)));
    expect.push(WiringEvent::Head);
    assert_eq!(wiring_of(cfg), expect);
}

#[test]
fn fusion_count_is_stage_count_or_depth() {
    for (dp, s) in [(2, 1), (2, 2), (4, 1), (4, 2)] {
        for (variant, expect) in [(Variant::Full, s), (Variant::SyncRefine, dp), (Variant::NoTrunk, 0)] {
            let cfg = ModelConfig {
                depth: dp,
                stages: s,
                variant,
                ..ModelConfig::micro()
            };
            let n = wiring_of(cfg)
                .iter()
                .filter(|e| matches!(e, WiringEvent::Fusion { .. }))
                .count();
            assert_eq!(n, expect, "dp={dp} S={s} {variant}");
        }
    }
}

#[test]
fn sync_refine_consumes_every_memory() {
    let cfg = ModelConfig {
        depth: 4,
        variant: Variant::SyncRefine,
        ..ModelConfig::micro()
    };
    let w = wiring_of(cfg);
    for layer in 1..=4 {
        assert!(w.contains(&WiringEvent::Fusion {
            stage: layer,
            after_layer: layer - 1
        }));
        assert!(w.contains(&WiringEvent::Refine {
            branch: Branch::Time,
            layer,
            stage: layer
        }));
    }
}

#[test]
fn output_shapes_for_every_variant() {
    let base = ModelConfig {
        n_vars: 7,
        horizon: 96,
        patch: PatchConfig {
            lookback: 32,
            patch_len: 8,
            stride: 4,
        },
        ..ModelConfig::micro()
    };
    for variant in Variant::ALL {
        let model = TimeSaf::new(
            ModelConfig {
                variant,
                ..base.clone()
            },
            AdamConfig::default(),
        )
        .unwrap();
        let tape = Tape::new();
        let p = model.store().bind(&tape);
        let x = tape.constant(random(&[2, 32, 7], 3, 5.0));
        let e = tape.constant(random(&[2, 16, 7], 4, 1.0));
        let out = model.forward(&p, &x, &e, &Tracer::disabled()).unwrap();
        assert_eq!(out.forecast.shape(), &[2, 96, 7], "{variant}");
    }
}

#[test]
fn closed_gates_match_no_trunk() {
    let cfg = ModelConfig {
        depth: 4,
        stages: 2,
        ..ModelConfig::micro()
    };
    let mut full = TimeSaf::new(cfg.clone(), AdamConfig::default()).unwrap();
    for layer in full.schedule().refine.clone() {
        full.store_mut()
            .set(&format!("gate.layer{layer}"), Tensor::scalar(-30.0))
            .unwrap();
    }
    let mut plain = TimeSaf::new(
        ModelConfig {
            variant: Variant::NoTrunk,
            seed: 99,
            ..cfg.clone()
        },
        AdamConfig::default(),
    )
    .unwrap();
    let copied = plain.copy_shared_from(full.store()).unwrap();
    assert_eq!(copied, plain.store().len());
    for seed in 0..5 {
        let x = random(&[3, 16, 2], 10 + seed, 4.0);
        let e = random(&[3, 16, 2], 20 + seed, 1.0);
        let run = |m: &TimeSaf| {
            let tape = Tape::new();
            let p = m.store().bind(&tape);
            let out = m
                .forward(
                    &p,
                    &tape.constant(x.clone()),
                    &tape.constant(e.clone()),
                    &Tracer::disabled(),
                )
                .unwrap();
            out.forecast.value().clone()
        };
        assert!(run(&full).max_abs_diff(&run(&plain)) < 1e-7);
    }
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    for variant in [Variant::Full, Variant::NoQuery, Variant::TrunkDecoder] {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::micro()
        };
        let mut model = TimeSaf::new(cfg.clone(), AdamConfig::default()).unwrap();
        // move off init so gates, queries and biases all carry signal
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = model.store().names().map(str::to_string).collect();
        for n in &names {
            for v in model.store_mut().value_mut(n).unwrap().data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        assert_eq!(cfg.num_patches(), 4);
        let x = random(&[2, 16, 2], 6, 3.0);
        let y = random(&[2, 4, 2], 7, 3.0);
        let e = random(&[2, 16, 2], 8, 1.0);
        let m = model.clone();
        let report = gradcheck::check(
            model.store_mut(),
            1e-5,
            |_| true,
            |tape, p: &Params<'_>| {
                let err = |e: ModelError| NumericsError::Contract(e.to_string());
                let out = m
                    .forward(
                        p,
                        &tape.constant(x.clone()),
                        &tape.constant(e.clone()),
                        &Tracer::disabled(),
                    )
                    .map_err(err)?;
                timesaf::model::data_loss(&out.forecast, &tape.constant(y.clone())).map_err(err)
            },
        )
        .unwrap();
        assert_eq!(report.checks.len(), names.len());
        let worst = report.worst().unwrap();
        assert!(worst.rel_err < 1e-4, "{variant}: {} {}", worst.name, worst.rel_err);
    }
}

#[test]
fn revin_inverts_exact_normalized_targets() {
    let x = random(&[4, 16, 2], 30, 50.0);
    let tape = Tape::new();
    let mut revin = timesaf::preprocess::Revin::default();
    let _ = revin.normalize(&tape.constant(x.clone()), None).unwrap();
    let st = revin.state().unwrap().clone();
    let y = random(&[4, 4, 2], 31, 50.0);
    let mut yn = y.clone();
    for b in 0..4 {
        for t in 0..4 {
            for c in 0..2 {
                let i = (b * 4 + t) * 2 + c;
                yn.data_mut()[i] = (y.data()[i] - st.mean.data()[b * 2 + c]) / st.std.data()[b * 2 + c];
            }
        }
    }
    let back = revin.denormalize(&tape.constant(yn), None).unwrap();
    assert!(back.value().max_abs_diff(&y) < 1e-6);
}

#[test]
fn checkpoint_restores_identical_forecasts() {
    let model = TimeSaf::new(ModelConfig::micro(), AdamConfig::default()).unwrap();
    let mut buf = Vec::new();
    model.checkpoint().write(&mut buf).unwrap();
    let ckpt = timesaf::numerics::Checkpoint::read(buf.as_slice()).unwrap();
    let back = TimeSaf::from_checkpoint(&ckpt, AdamConfig::default()).unwrap();
    assert_eq!(back.config(), model.config());
    for (name, t) in model.store().iter() {
        assert_eq!(back.store().get(name).unwrap(), t);
    }
}

fn sine_dataset(lookback: usize, horizon: usize) -> timesaf::preprocess::WindowedDataset {
    let n = 400;
    let ts = (0..n).map(|t| t.to_string()).collect();
    let ch0 = (0..n).map(|t| (t as f64 * 0.3).sin()).collect();
    let ch1 = (0..n).map(|t| 2.0 * (t as f64 * 0.17 + 1.0).cos()).collect();
    let series = Series::new(ts, vec!["a".into(), "b".into()], vec![ch0, ch1]).unwrap();
    build_windows(
        &series,
        &WindowOptions {
            lookback,
            horizon,
            ratios: SplitRatios::STANDARD,
            few_shot_fraction: None,
            zscore: true,
        },
    )
    .unwrap()
}

fn stub_prompts() -> PromptSource {
    PromptSource {
        spec: PromptTemplateSpec {
            frequency: "1 step".into(),
            ..Default::default()
        },
        provider: EmbeddingProvider::stub(2024, 16),
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let ds = sine_dataset(16, 4);
    let mut model = TimeSaf::new(ModelConfig::micro(), AdamConfig::default()).unwrap();
    let before = model.store().clone();
    let tc = TrainConfig {
        lr: 0.0,
        max_epochs: 1,
        max_steps: Some(3),
        ..Default::default()
    };
    let h = train(&mut model, &ds, Some(&stub_prompts()), &tc).unwrap();
    assert_eq!(h.steps, 3);
    for (name, t) in before.iter() {
        assert_eq!(model.store().get(name).unwrap(), t);
    }
}

#[test]
fn training_is_deterministic() {
    let ds = sine_dataset(16, 4);
    let tc = TrainConfig {
        max_epochs: 2,
        max_steps: Some(6),
        batch_size: 16,
        ..Default::default()
    };
    let cfg = ModelConfig {
        dropout: 0.1,
        ..ModelConfig::micro()
    };
    let run = || {
        let mut model = TimeSaf::new(cfg.clone(), AdamConfig::default()).unwrap();
        let h = train(&mut model, &ds, Some(&stub_prompts()), &tc).unwrap();
        (h, model)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1, h2);
    for (name, t) in m1.store().iter() {
        assert_eq!(m2.store().get(name).unwrap(), t);
    }
}

#[test]
fn prompt_width_mismatch_rejected() {
    let ds = sine_dataset(16, 4);
    let mut model = TimeSaf::new(ModelConfig::micro(), AdamConfig::default()).unwrap();
    let ps = PromptSource {
        provider: EmbeddingProvider::stub(1, 32),
        ..stub_prompts()
    };
    assert!(matches!(
        train(&mut model, &ds, Some(&ps), &TrainConfig::default()),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn linear_oracle_fits_sines() {
    let ds = sine_dataset(16, 4);
    let mut lin = LinearBaseline::new(16, 4, 2, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-2,
        batch_size: 16,
        max_steps: Some(500),
        ..Default::default()
    };
    train(&mut lin, &ds, None, &tc).unwrap();
    let m = evaluate(&lin, &ds, Split::Train, None, 256).unwrap();
    assert!(m.mse < 0.05, "{m:?}");
    assert_eq!(lin.prompt_dim(), None);
}

#[test]
fn micro_model_overfits_sines() {
    let ds = sine_dataset(16, 4);
    let mut model = TimeSaf::new(ModelConfig::micro(), AdamConfig::default()).unwrap();
    let tc = TrainConfig {
        lr: 5e-3,
        batch_size: 16,
        max_steps: Some(500),
        patience: 50,
        ..Default::default()
    };
    let h = train(&mut model, &ds, Some(&stub_prompts()), &tc).unwrap();
    assert!(h.steps <= 500);
    let m = evaluate(&model, &ds, Split::Train, Some(&stub_prompts()), 256).unwrap();
    assert!(m.mse < 0.01, "{m:?}");
}
