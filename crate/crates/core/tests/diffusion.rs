mod common;

use common::oracles::*;
use std::f64::consts::PI;

use gcdlab::autodiff::{finite_diff_check, Tape, Tensor};
use gcdlab::diffusion::{
    ancestral_step, channels, decode_pair, encode_pair, q_sample, sample_cascade_with, stage_examples, train_stage,
    training_loss, Cascade, DenoiseRequest, Denoiser, NoiseSchedule, StageConfig, StageDenoiser, StageExample,
    StageModel, TrainConfig,
};
use gcdlab::embed::{FeatureConfig, ManualDescriptor};
use gcdlab::graphcond::GraphEncoderConfig;
use gcdlab::maskgraph::{build_graph, TissueGraph};
use gcdlab::rng;
use gcdlab::synthdata::{generate_samples, SynthConfig};
use gcdlab::Error;
use rand::Rng as _;

#[test]
fn schedule_is_variance_preserving_and_monotone() {
    let s = NoiseSchedule::default();
    let mut r = rng::rng(1);
    for _ in 0..1000 {
        let p = s.at(r.random_range(0.0..1.0));
        assert!((p.alpha * p.alpha + p.sigma * p.sigma - 1.0).abs() < 1e-12);
    }
    let lambdas: Vec<f64> = s.grid(999).iter().rev().map(|&t| s.at(t).lambda).collect();
    assert!(lambdas.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn forward_process_endpoints() {
    let s = NoiseSchedule::default();
    let x0 = [0.4, -0.9, 1.0];
    let eps = [1.5, -0.3, 0.8];
    let near = q_sample(&s, &x0, 0.0, &eps).unwrap();
    let sig = s.at(0.0).sigma;
    for i in 0..3 {
        assert!((near[i] - x0[i]).abs() <= sig * eps[i].abs() + (1.0 - s.at(0.0).alpha) * x0[i].abs() + 1e-15);
    }
    let far = q_sample(&s, &x0, 1.0, &eps).unwrap();
    for i in 0..3 {
        assert!((far[i] - eps[i]).abs() < 5e-3);
    }
    assert!(matches!(q_sample(&s, &x0, 0.5, &eps[..2]), Err(Error::Shape { .. })));
}

#[test]
fn forward_process_moments_at_midpoint() {
    let s = NoiseSchedule::default();
    let p = s.at(0.5);
    let x0 = 0.6;
    let mut r = rng::rng(2);
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| q_sample(&s, &[x0], 0.5, &[rng::normal(&mut r)]).unwrap()[0]).collect();
    let (m, v) = mean_var(&draws);
    let var = p.sigma * p.sigma;
    assert!((m - p.alpha * x0).abs() < 3.0 * (var / n as f64).sqrt());
    assert!((v - var).abs() < 3.0 * var * (2.0 / (n as f64 - 1.0)).sqrt());
}

#[test]
fn scalar_step_matches_hand_computation() {
    let s = NoiseSchedule::default();
    let (t, sv, xt, xh, gamma) = (0.8f64, 0.6f64, 1.0, 0.5, 0.3);
    let e = rng::normal(&mut rng::rng(3));
    let got = ancestral_step(&s, &[xt], t, sv, &[xh], gamma, &mut rng::rng(3)).unwrap()[0];
    assert!((got - hand_step(t, sv, xt, xh, gamma, e)).abs() < 1e-12);

    let (at, st) = ((PI * t / 2.0).cos(), (PI * t / 2.0).sin());
    let (as_, ss) = ((PI * sv / 2.0).cos(), (PI * sv / 2.0).sin());
    let r = ((at * at / (st * st)).ln() - (as_ * as_ / (ss * ss)).ln()).exp();
    let (v_post, v_fwd) = ((1.0 - r) * ss * ss, (1.0 - r) * st * st);
    let k = gcdlab::diffusion::step_coefficients(&s, t, sv).unwrap();
    assert!((k.std(0.0) - v_post.sqrt()).abs() < 1e-15);
    assert!((k.std(1.0) - v_fwd.sqrt()).abs() < 1e-15);
    assert!(k.std(0.0) <= k.std(1.0));
    assert!(ancestral_step(&s, &[xt], sv, t, &[xh], gamma, &mut rng::rng(3)).is_err());
}

#[test]
fn final_step_is_noiseless_and_lands_near_estimate() {
    let s = NoiseSchedule::default();
    let mut r = rng::rng(4);
    let a = ancestral_step(&s, &[0.3], 0.01, s.eps, &[0.7], 0.3, &mut r).unwrap();
    let b = ancestral_step(&s, &[0.3], 0.01, s.eps, &[0.7], 0.3, &mut rng::rng(99)).unwrap();
    assert_eq!(a, b);
    assert!((a[0] - 0.7).abs() < 0.01);
}

#[test]
fn composed_steps_reproduce_forward_marginal() {
    let s = NoiseSchedule::default();
    let x0 = 0.7;
    let (t0, s_end) = (0.8, 0.3);
    let times: Vec<f64> = (0..=5).map(|i| t0 - (t0 - s_end) * i as f64 / 5.0).collect();
    let mut r = rng::rng(5);
    let n = 10_000;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = q_sample(&s, &[x0], t0, &[rng::normal(&mut r)]).unwrap();
        for w in times.windows(2) {
            x = ancestral_step(&s, &x, w[0], w[1], &[x0], 0.0, &mut r).unwrap();
        }
        out.push(x[0]);
    }
    let p = s.at(s_end);
    let (m, v) = mean_var(&out);
    let var = p.sigma * p.sigma;
    assert!((m - p.alpha * x0).abs() < 3.0 * (var / n as f64).sqrt(), "mean {m}");
    assert!((v / var - 1.0).abs() < 0.05, "variance {v} vs {var}");
}

/// Returns the examples' own clean targets (perfect prediction).
struct Perfect<'a>(&'a [StageExample]);

impl Denoiser for Perfect<'_> {
    fn resolution(&self) -> usize {
        8
    }
    fn channels(&self) -> usize {
        6
    }
    fn predict(&self, req: &DenoiseRequest) -> gcdlab::Result<Vec<Vec<f64>>> {
        assert_eq!(req.x_t.len(), self.0.len());
        Ok(self.0.iter().map(|e| e.x0.clone()).collect())
    }
}

fn small_pairs(n: usize, seed: u64) -> Vec<(Vec<f64>, TissueGraph)> {
    generate_samples(&SynthConfig::default(), n, seed)
        .unwrap()
        .iter()
        .map(|(img, m)| {
            (encode_pair(img, m, 3).unwrap(), build_graph(m, Some((img, &ManualDescriptor { dim: 16 })), 16, 0).unwrap())
        })
        .collect()
}

#[test]
fn oracle_denoisers_give_closed_form_losses() {
    let pairs = small_pairs(6, 6);
    let ex = stage_examples(&pairs, 32, &StageConfig::new(8, None), 3).unwrap();
    let s = NoiseSchedule::default();
    assert_eq!(training_loss(&Perfect(&ex), &s, &ex, 1).unwrap(), 0.0);
    let zero = Fixed { res: 8, ch: 6, x: vec![0.0; 8 * 8 * 6] };
    let want = ex.iter().map(|e| e.x0.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / ex.len() as f64;
    assert!((training_loss(&zero, &s, &ex, 1).unwrap() - want).abs() < 1e-9);
}

#[test]
fn oracle_cascade_returns_fixed_target_at_every_stage() {
    let mut r = rng::rng(7);
    let ch = channels(3);
    let targets: Vec<Vec<f64>> = [8usize, 16, 32]
        .iter()
        .map(|&res| (0..res * res * ch).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let dens: Vec<Fixed> = [8usize, 16, 32].iter().zip(&targets).map(|(&res, x)| Fixed { res, ch, x: x.clone() }).collect();
    let refs: Vec<&dyn Denoiser> = dens.iter().map(|d| d as &dyn Denoiser).collect();
    let s = NoiseSchedule::default();
    let out = sample_cascade_with(&refs, &s, &[None, None], &[10, 7, 5], &[0.3, 0.0, 1.0], &[1, 2]).unwrap();
    for (stage, target) in out.iter().zip(&targets) {
        for sample in stage {
            assert_eq!(sample, target);
        }
    }
    let (img, mask) = decode_pair(&out[2][0], 32, 3).unwrap();
    assert_eq!((img.height(), img.width(), mask.height(), mask.width()), (32, 32, 32, 32));
}

fn tiny_features() -> FeatureConfig {
    FeatureConfig { embed_dim: 16, ..FeatureConfig::default() }
}

fn tiny_stage(res: usize, lowres: Option<usize>) -> StageConfig {
    StageConfig { hidden: 24, ff_hidden: 32, blocks: 1, d_attn: 8, steps: 8, ..StageConfig::new(res, lowres) }
}

fn tiny_encoder() -> GraphEncoderConfig {
    GraphEncoderConfig { d_model: 16, d_k: 16, ff_hidden: 16, layers: 1, ..GraphEncoderConfig::default() }
}

#[test]
fn denoiser_loss_gradients_match_finite_differences() {
    let cfg = StageConfig { hidden: 5, ff_hidden: 6, blocks: 1, d_attn: 3, d_pos: 4, ..StageConfig::new(8, None) };
    let enc = GraphEncoderConfig { d_model: 4, d_k: 3, ff_hidden: 5, layers: 1, ..GraphEncoderConfig::default() };
    let model = StageModel::new(cfg, tiny_features(), enc, 8).unwrap();
    let pairs = small_pairs(2, 8);
    let ex = stage_examples(&pairs, 32, &model.config, 3).unwrap();
    let s = NoiseSchedule::default();
    let mut r = rng::rng(9);
    let xt: Vec<Vec<f64>> = ex.iter().map(|e| q_sample(&s, &e.x0, 0.4, &rng::normals(&mut r, e.x0.len())).unwrap()).collect();
    let xs: Vec<&[f64]> = xt.iter().map(|v| v.as_slice()).collect();
    let graphs: Vec<Option<&TissueGraph>> = ex.iter().map(|e| Some(&e.graph)).collect();
    let px = vec![vec![0, 9, 27, 63], vec![5, 18, 36]];
    let batch = model.prepare(&s, &xs, None, &[0.4, 0.7], &graphs, Some(&px)).unwrap();
    let mut tape = Tape::new();
    let y = model.forward(&mut tape, &batch).unwrap();
    let target = tape.input(Tensor::randn(7, 6, 1.0, &mut r)).unwrap();
    let loss = tape.mse(y, target).unwrap();
    let err = finite_diff_check(&mut tape, &[], loss, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn training_is_deterministic_and_lr_zero_is_inert() {
    let pairs = small_pairs(8, 10);
    let cfg = tiny_stage(8, None);
    let ex = stage_examples(&pairs, 32, &cfg, 3).unwrap();
    let s = NoiseSchedule::default();
    let tc = TrainConfig { steps: 20, batch: 4, pixels_per_sample: 32, ..TrainConfig::default() };
    let mut a = StageModel::new(cfg.clone(), tiny_features(), tiny_encoder(), 1).unwrap();
    let mut b = a.clone();
    let ha = train_stage(&mut a, &s, &ex, &tc, 3, None).unwrap();
    let hb = train_stage(&mut b, &s, &ex, &tc, 3, None).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.store, b.store);

    let mut c = StageModel::new(cfg, tiny_features(), tiny_encoder(), 1).unwrap();
    let before = c.store.clone();
    train_stage(&mut c, &s, &ex, &TrainConfig { lr: 0.0, ..tc }, 3, None).unwrap();
    assert_eq!(c.store, before);

    let den = StageDenoiser { model: &a, schedule: &s };
    assert_eq!(training_loss(&den, &s, &ex, 11).unwrap(), training_loss(&den, &s, &ex, 11).unwrap());
}

#[test]
fn overfits_a_single_batch() {
    let pairs = small_pairs(8, 12);
    let cfg = StageConfig::new(8, None);
    let ex = stage_examples(&pairs, 32, &cfg, 3).unwrap();
    let s = NoiseSchedule::default();
    let mut m = StageModel::new(cfg, FeatureConfig::default(), GraphEncoderConfig::default(), 2).unwrap();
    let initial = training_loss(&StageDenoiser { model: &m, schedule: &s }, &s, &ex, 5).unwrap();
    let tc = TrainConfig { steps: 500, batch: 8, pixels_per_sample: 64, cond_dropout: 0.0, ..TrainConfig::default() };
    train_stage(&mut m, &s, &ex, &tc, 4, None).unwrap();
    let fin = training_loss(&StageDenoiser { model: &m, schedule: &s }, &s, &ex, 5).unwrap();
    assert!(fin < 0.1 * initial, "{initial} -> {fin}");
}

#[test]
fn divergence_aborts_training() {
    let pairs = small_pairs(4, 13);
    let cfg = tiny_stage(8, None);
    let ex = stage_examples(&pairs, 32, &cfg, 3).unwrap();
    let mut m = StageModel::new(cfg, tiny_features(), tiny_encoder(), 3).unwrap();
    let tc = TrainConfig { steps: 200, batch: 4, lr: 1e4, pixels_per_sample: 16, ..TrainConfig::default() };
    match train_stage(&mut m, &NoiseSchedule::default(), &ex, &tc, 1, None) {
        Err(Error::NumericOverflow { context, .. }) => assert!(!context.is_empty()),
        other => panic!("expected divergence error, got {other:?}"),
    }
}

fn tiny_cascade(seed: u64) -> (Cascade, Vec<(Vec<f64>, TissueGraph)>) {
    let pairs = small_pairs(12, seed);
    let stages = vec![tiny_stage(8, None), tiny_stage(16, Some(8)), tiny_stage(32, Some(16))];
    let mut c = Cascade::new(stages, tiny_features(), tiny_encoder(), NoiseSchedule::default(), seed).unwrap();
    let tc = TrainConfig { steps: 40, batch: 4, pixels_per_sample: 48, cond_dropout: 0.0, ..TrainConfig::default() };
    let sched = c.schedule;
    for st in c.stages.iter_mut() {
        let ex = stage_examples(&pairs, 32, &st.config, 3).unwrap();
        train_stage(st, &sched, &ex, &tc, seed, None).unwrap();
    }
    (c, pairs)
}

#[test]
fn untrained_cascade_refuses_to_sample() {
    let stages = vec![tiny_stage(8, None), tiny_stage(16, Some(8)), tiny_stage(32, Some(16))];
    let c = Cascade::new(stages, tiny_features(), tiny_encoder(), NoiseSchedule::default(), 1).unwrap();
    assert!(matches!(c.sample(&[None], &[0]), Err(Error::InvalidInput(_))));
}

#[test]
fn cascade_sampling_contract() {
    let (c, pairs) = tiny_cascade(14);
    let g = &pairs[0].1;
    let a = c.sample(&[Some(g), Some(g)], &[5, 6]).unwrap();
    let b = c.sample(&[Some(g)], &[5]).unwrap();
    assert_eq!(a[0].0, b[0].0);
    assert_eq!(a[0].1, b[0].1);
    assert_ne!(a[0].0, a[1].0);
    assert_eq!((a[0].0.height(), a[0].0.width(), a[0].1.height(), a[0].1.width()), (32, 32, 32, 32));
    assert!(a[0].0.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // dropping the conditioning changes the output
    let u = c.sample(&[None], &[5]).unwrap();
    let diff = a[0].0.data().iter().zip(u[0].0.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cascade.ckpt.json");
    c.save(&path).unwrap();
    let back = Cascade::load(&path).unwrap();
    let again = back.sample(&[Some(g)], &[5]).unwrap();
    assert_eq!(again[0].0, b[0].0);
    assert!(matches!(Cascade::load(&dir.path().join("missing.json")), Err(Error::MissingArtifact { .. })));
}
