mod common;

use common::{condition, jacobian, log_abs_det, perturb, rel_err, to_f64};
use flowlens_core::flow::{bounded_scale_value, FlowStep};
use flowlens_core::model::Stage;
use flowlens_core::{Condition, EnhancerModel, Error, ModelConfig, Rng, Tensor};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

fn tiny() -> ModelConfig {
    ModelConfig {
        size: 4,
        scales: 1,
        steps: 2,
        flow1_steps: 1,
        hidden: 4,
        cond_width: 4,
        cond_features: 2,
        residual_blocks: 2,
        ..ModelConfig::desk()
    }
}

fn image<T: flowlens_core::Real>(rng: &mut Rng, n: usize) -> Tensor<T> {
    rng.uniform_tensor(&[1, n, n], 0.0, 1.0)
}

/// Pinned space-to-depth written as a plain loop.
fn squeeze_oracle(x: &[f64], c: usize, h: usize) -> Vec<f64> {
    let o = h / 2;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for i in 0..o {
                for j in 0..o {
                    out[((4 * ch + q) * o + i) * o + j] = x[(ch * h + 2 * i + dy) * h + 2 * j + dx];
                }
            }
        }
    }
    out
}

#[test]
fn latent_count_is_conserved_for_every_config() {
    for size in [4usize, 8, 16, 32, 64] {
        let max_scales = size.trailing_zeros() as usize;
        for scales in 0..=max_scales {
            let cfg = ModelConfig {
                size,
                scales,
                ..ModelConfig::desk()
            };
            let total: usize = cfg
                .latent_shapes()
                .iter()
                .map(|s| s.iter().product::<usize>())
                .sum();
            assert_eq!(total, size * size, "size {size} scales {scales}");
        }
    }
    let desk = EnhancerModel::<f32>::new(ModelConfig::desk(), 0).unwrap();
    assert_eq!(desk.latent_len(), 1024);
    assert_eq!(desk.latent_shapes(), vec![vec![2, 16, 16], vec![8, 8, 8]]);
    assert_eq!(
        ModelConfig::full()
            .latent_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum::<usize>(),
        4096
    );
}

#[test]
fn forward_latents_have_the_declared_shapes() {
    let model = EnhancerModel::<f32>::new(ModelConfig::desk(), 0).unwrap();
    let mut rng = Rng::seed(1);
    let fw = model
        .forward(&image(&mut rng, 32), &condition(&mut rng, 32))
        .unwrap();
    let shapes: Vec<Vec<usize>> = fw.latents.iter().map(|z| z.shape().to_vec()).collect();
    assert_eq!(shapes, model.latent_shapes());
    assert_eq!(fw.latents.iter().map(Tensor::len).sum::<usize>(), 1024);
}

#[test]
fn bad_architectures_are_rejected() {
    let odd = ModelConfig {
        size: 30,
        scales: 2,
        ..ModelConfig::desk()
    };
    assert!(matches!(
        EnhancerModel::<f32>::new(odd, 0),
        Err(Error::Architecture(_))
    ));
}

#[test]
fn identity_initialized_flow_is_a_known_affine_map() {
    let mut model = EnhancerModel::<f64>::new(ModelConfig::desk(), 3).unwrap();
    // invertible 1x1 convolutions to identity
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().name(id).contains("invconv") {
            let c = model.params().get(id).shape()[0];
            let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
            model.params_mut().set(id, eye).unwrap();
        }
    }
    let mut rng = Rng::seed(4);
    let x: Tensor<f64> = image(&mut rng, 32);
    let fw = model.forward(&x, &condition(&mut rng, 32)).unwrap();

    let s0 = bounded_scale_value(0.0);
    let mut act: Vec<f64> = x.data().iter().map(|v| v * s0 * s0).collect();
    let mut logdet = 2.0 * 1024.0 * s0.ln();
    let (mut c, mut h) = (1, 32);
    let mut latents = Vec::new();
    for scale in 1..=2 {
        act = squeeze_oracle(&act, c, h);
        c *= 4;
        h /= 2;
        let plane = h * h;
        let passive = c.div_ceil(2);
        for _ in 0..4 {
            for v in act.iter_mut() {
                *v *= s0;
            }
            for v in act[passive * plane..].iter_mut() {
                *v *= s0;
            }
            logdet += (c * plane) as f64 * s0.ln() + ((c - passive) * plane) as f64 * s0.ln();
        }
        if scale < 2 {
            latents.push(act[c / 2 * plane..].to_vec());
            act.truncate(c / 2 * plane);
            c /= 2;
        }
    }
    latents.push(act);
    for (got, want) in fw.latents.iter().zip(&latents) {
        let err = got
            .data()
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
    assert!((fw.logdet - logdet).abs() < 1e-9);
    let sum: f64 = fw.stage_logdets.iter().sum();
    assert!((sum - fw.logdet).abs() < 1e-9);
}

#[test]
fn two_sided_round_trips() {
    let mut rng = Rng::seed(5);
    let mut model = EnhancerModel::<f64>::new(ModelConfig::desk(), 5).unwrap();
    perturb(model.params_mut(), &mut rng, 0.05);
    let x = image(&mut rng, 32);
    let c = condition(&mut rng, 32);
    let fw = model.forward(&x, &c).unwrap();
    let (back, inv_ld) = model.inverse_with_logdet(&fw.latents, &c).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-9);
    assert!((fw.logdet + inv_ld).abs() < 1e-6);

    let z = model.draw_noise(&mut rng);
    let img = model.inverse(&z, &c).unwrap();
    let again = model.forward(&img, &c).unwrap();
    for (a, b) in again.latents.iter().zip(&z) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
    assert_eq!(model.inverse(&z, &c).unwrap(), img);
}

#[test]
fn single_precision_round_trip() {
    let mut rng = Rng::seed(6);
    let mut model = EnhancerModel::<f32>::new(ModelConfig::desk(), 6).unwrap();
    perturb(model.params_mut(), &mut rng, 0.05);
    let x = image::<f32>(&mut rng, 32);
    let c = condition::<f32>(&mut rng, 32);
    let fw = model.forward(&x, &c).unwrap();
    assert!(model.inverse(&fw.latents, &c).unwrap().max_abs_diff(&x) < 1e-4);
}

#[test]
fn composed_logdet_matches_numerical_jacobian() {
    let mut rng = Rng::seed(7);
    let mut model = EnhancerModel::<f64>::new(tiny(), 7).unwrap();
    perturb(model.params_mut(), &mut rng, 0.3);
    let x: Tensor<f64> = image(&mut rng, 4);
    let c = condition(&mut rng, 4);
    let fw = model.forward(&x, &c).unwrap();
    let (m, jac) = jacobian(
        |p| {
            let t = Tensor::new(&[1, 4, 4], p.to_vec()).unwrap();
            model
                .forward(&t, &c)
                .unwrap()
                .latents
                .iter()
                .flat_map(to_f64)
                .collect()
        },
        x.data(),
        1e-5,
    );
    assert_eq!(m, 16);
    let oracle = log_abs_det(16, &jac);
    assert!(
        (fw.logdet - oracle).abs() < 1e-3,
        "{} vs {oracle}",
        fw.logdet
    );
}

#[test]
fn actnorm_only_closed_form_nll() {
    let mut model = EnhancerModel::<f64>::new(ModelConfig::actnorm_only(2), 0).unwrap();
    assert!(matches!(
        model.stages(),
        [Stage::Step {
            step: FlowStep::ActNorm(_),
            ..
        }]
    ));
    let zero = Tensor::zeros(&[1, 2, 2]);
    let c = Condition::new(zero.clone(), zero.clone(), zero.clone()).unwrap();
    let r = model.nll(&zero, &c).unwrap();
    assert!((r.nll - 2.0 * LOG_2PI).abs() < 1e-8);
    assert!((r.nll - 3.6758).abs() < 1e-4);
    assert!((r.per_pixel - r.nll / 4.0).abs() < 1e-15);

    let id = model.params().id("flow.f1.0.actnorm.scale").unwrap();
    model.params_mut().set(id, Tensor::full(&[1], 2.0)).unwrap();
    let r2 = model.nll(&zero, &c).unwrap();
    assert!((r2.nll - (2.0 * LOG_2PI - 4.0 * 2f64.ln())).abs() < 1e-8);
    assert!((r.nll - r2.nll - 4.0 * 2f64.ln()).abs() < 1e-8);
}

#[test]
fn nll_decomposes_into_finite_terms() {
    let mut rng = Rng::seed(8);
    let mut model = EnhancerModel::<f64>::new(ModelConfig::desk(), 8).unwrap();
    perturb(model.params_mut(), &mut rng, 0.05);
    let x = image(&mut rng, 32);
    let c = condition(&mut rng, 32);
    let r = model.nll(&x, &c).unwrap();
    assert!(r.log_prob.is_finite() && r.logdet.is_finite());
    assert!((r.nll - (-r.log_prob - r.logdet)).abs() < 1e-9);
    let fw = model.forward(&x, &c).unwrap();
    let lp = model.base(&c).unwrap().log_prob(&fw.latents).unwrap();
    assert!(rel_err(lp, r.log_prob) < 1e-12);
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = Rng::seed(9);
    let mut model = EnhancerModel::<f64>::new(tiny(), 9).unwrap();
    perturb(model.params_mut(), &mut rng, 0.3);
    let x: Tensor<f64> = image(&mut rng, 4);
    let c = condition(&mut rng, 4);
    let id = model
        .params()
        .id("flow.s1.1.coupling.net.hidden.weight")
        .unwrap();

    let mut tape = flowlens_core::Tape::new();
    let bind = model.params().bind(&mut tape, true);
    let enc = model.encode(&mut tape, &bind, &c).unwrap();
    let xv = tape.constant(x.clone());
    let (z, ld, _) = model.forward_graph(&mut tape, &bind, xv, &enc).unwrap();
    let lp = model.log_prob_graph(&mut tape, &z, &enc).unwrap();
    let s = tape.add(lp, ld).unwrap();
    let nll = tape.neg(s).unwrap();
    let grads = tape.backward(nll).unwrap();
    let g = grads.get(bind.var(id)).unwrap().clone();

    for k in [0usize, 7, 31, 50] {
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut w = m.params().get(id).clone();
            w.data_mut()[k] += delta;
            m.params_mut().set(id, w).unwrap();
            m.nll(&x, &c).unwrap().nll
        };
        let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        assert!(
            rel_err(g.data()[k], fd) < 1e-4,
            "k={k}: {} vs {fd}",
            g.data()[k]
        );
    }
}

#[test]
fn enhance_requires_initialized_actnorm() {
    let model = EnhancerModel::<f32>::new(ModelConfig::desk(), 0).unwrap();
    let c = condition(&mut Rng::seed(1), 32);
    assert!(matches!(
        model.enhance(&c, 0.0, &mut Rng::seed(0)),
        Err(Error::Uninitialized)
    ));
}

fn initialized(seed: u64) -> (EnhancerModel<f64>, Vec<(Tensor<f64>, Condition<f64>)>) {
    let mut rng = Rng::seed(seed);
    let mut model = EnhancerModel::<f64>::new(ModelConfig::desk(), seed).unwrap();
    perturb(model.params_mut(), &mut rng, 0.05);
    let batch: Vec<_> = (0..3)
        .map(|_| (image(&mut rng, 32), condition(&mut rng, 32)))
        .collect();
    model.initialize_actnorm(&batch).unwrap();
    (model, batch)
}

#[test]
fn actnorm_initialization_runs_once() {
    let (mut model, batch) = initialized(10);
    assert!(model.is_initialized());
    let id = model.params().id("flow.f1.0.actnorm.scale").unwrap();
    assert_ne!(model.params().get(id).data()[0], 1.0);
    let before = model.params().clone();
    let other: Vec<_> = batch
        .iter()
        .map(|(x, c)| (x.map(|v| 3.0 * v), c.clone()))
        .collect();
    model.initialize_actnorm(&other).unwrap();
    assert_eq!(model.params(), &before);
}

#[test]
fn actnorm_initialization_normalizes_the_first_step() {
    let (model, batch) = initialized(11);
    // the first stage output over the batch has zero mean and unit std
    let id_b = model.params().id("flow.f1.0.actnorm.bias").unwrap();
    let id_s = model.params().id("flow.f1.0.actnorm.scale").unwrap();
    let (b, s) = (
        model.params().get(id_b).data()[0],
        model.params().get(id_s).data()[0],
    );
    let vals: Vec<f64> = batch
        .iter()
        .flat_map(|(x, _)| x.data().iter().map(|v| s * (v + b)).collect::<Vec<_>>())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!(mean.abs() < 1e-4 && (std - 1.0).abs() < 1e-4);
}

#[test]
fn enhance_at_zero_temperature_inverts_the_mean() {
    let (model, batch) = initialized(12);
    let c = &batch[0].1;
    let a = model.enhance(c, 0.0, &mut Rng::seed(1)).unwrap();
    let b = model.enhance(c, 0.0, &mut Rng::seed(2)).unwrap();
    assert_eq!(a, b);
    let mu: Vec<_> = model
        .base(c)
        .unwrap()
        .levels
        .into_iter()
        .map(|l| l.mean)
        .collect();
    assert_eq!(model.inverse(&mu, c).unwrap(), a);
    let s1 = model.enhance(c, 0.8, &mut Rng::seed(1)).unwrap();
    let s2 = model.enhance(c, 0.8, &mut Rng::seed(2)).unwrap();
    assert!(s1.max_abs_diff(&s2) > 0.0);
    assert_eq!(s1, model.enhance(c, 0.8, &mut Rng::seed(1)).unwrap());
}

#[test]
fn uncertainty_maps() {
    let (model, batch) = initialized(13);
    let c = &batch[0].1;
    let (mean0, std0) = model.uncertainty(c, 0.0, 4, 1).unwrap();
    assert!(std0.max_abs() < 1e-6);
    assert!(mean0.max_abs_diff(&model.enhance(c, 0.0, &mut Rng::seed(0)).unwrap()) < 1e-12);
    let (_, std) = model.uncertainty(c, 0.8, 6, 1).unwrap();
    assert!(std.data().iter().all(|&v| v >= 0.0));
    assert!(std.mean() > 0.0);
    assert_eq!(model.uncertainty(c, 0.8, 6, 1).unwrap().1, std);
    assert!(matches!(
        model.uncertainty(c, 0.8, 1, 1),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn step_errors_carry_the_stage_index() {
    let mut model = EnhancerModel::<f64>::new(ModelConfig::desk(), 0).unwrap();
    let id = model.params().id("flow.s1.0.actnorm.scale").unwrap();
    model.params_mut().set(id, Tensor::zeros(&[4])).unwrap();
    let mut rng = Rng::seed(1);
    let err = model
        .forward(&image(&mut rng, 32), &condition(&mut rng, 32))
        .unwrap_err();
    match err {
        Error::Step {
            index,
            kind,
            source,
        } => {
            assert_eq!(index, 5);
            assert_eq!(kind, "actnorm");
            assert!(matches!(*source, Error::ZeroScale { channel: 0 }));
        }
        other => panic!("unexpected {other:?}"),
    }
}
