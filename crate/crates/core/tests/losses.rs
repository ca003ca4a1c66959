mod common;

use common::{condition, perturb, rel_err};
use flowlens_core::kspace::KSpaceOperator;
use flowlens_core::kspace::{degrade, zero_fill_upsample};
use flowlens_core::losses::{
    auto_levels, dc_loss_value, guide_loss, level_weights, ms_ssim, ms_ssim_value, objective_graph,
    pixel_l1_value, psnr, ssim, total_loss, LossReport, LossWeights, Measurement, ObjectiveInput,
};
use flowlens_core::{EnhancerModel, Error, ModelConfig, Rng, Tape, Tensor};

fn img(rng: &mut Rng, n: usize) -> Tensor<f64> {
    rng.uniform_tensor(&[1, n, n], 0.0, 1.0)
}

fn smooth(rng: &mut Rng, n: usize) -> Tensor<f64> {
    let (a, b, c) = (rng.uniform(), rng.uniform(), rng.uniform());
    Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
        0.5 + 0.3 * (6.0 * x * a + 4.0 * y * b).sin() * (3.0 * y + c).cos()
    })
}

#[test]
fn pixel_l1_values() {
    let mut rng = Rng::seed(1);
    let a = img(&mut rng, 8);
    assert_eq!(pixel_l1_value(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v - 0.5);
    assert!((pixel_l1_value(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    let c = img(&mut rng, 8);
    let mut oracle = 0.0;
    for i in 0..64 {
        oracle += (a.data()[i] - c.data()[i]).abs();
    }
    assert!((pixel_l1_value(&a, &c).unwrap() - oracle / 64.0).abs() < 1e-12);
    assert!(matches!(
        pixel_l1_value(&a, &Tensor::zeros(&[1, 4, 4])),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn level_selection() {
    assert_eq!(auto_levels(32), 2);
    assert_eq!(auto_levels(64), 3);
    assert_eq!(auto_levels(16), 1);
    assert_eq!(auto_levels(10), 0);
    assert_eq!(auto_levels(1000), 5);
    let w = level_weights(2);
    assert!((w[0] - 0.0448 / 0.3304).abs() < 1e-12 && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn ms_ssim_identity_and_symmetry() {
    let mut rng = Rng::seed(2);
    let a = img(&mut rng, 32);
    assert_eq!(ms_ssim_value(&a, &a).unwrap(), 1.0);
    let b = smooth(&mut rng, 32);
    let ab = ms_ssim_value(&a, &b).unwrap();
    let ba = ms_ssim_value(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-12);
    assert!(ab > 0.0 && ab < 1.0);
}

#[test]
fn ms_ssim_rejects_small_images() {
    let a = Tensor::<f64>::zeros(&[1, 8, 8]);
    let mut tape = Tape::new();
    let v = tape.constant(a);
    assert!(matches!(
        ms_ssim(&mut tape, v, v, None),
        Err(Error::InvalidArgument { .. })
    ));
    let b = Tensor::<f64>::zeros(&[1, 32, 32]);
    let v = tape.constant(b);
    assert!(matches!(
        ms_ssim(&mut tape, v, v, Some(3)),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn ms_ssim_gradient_matches_finite_differences() {
    let mut rng = Rng::seed(3);
    let a = smooth(&mut rng, 32);
    let b = img(&mut rng, 32).map(|v| 0.3 * v + 0.35);
    let mut tape = Tape::new();
    let av = tape.variable(a.clone());
    let bv = tape.constant(b.clone());
    let m = ms_ssim(&mut tape, av, bv, None).unwrap();
    let g = tape.backward(m).unwrap().get(av).unwrap().clone();
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    let mut p = a.clone();
    for i in 0..a.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let fp = ms_ssim_value(&p, &b).unwrap();
        p.data_mut()[i] = orig - h;
        let fm = ms_ssim_value(&p, &b).unwrap();
        p.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        num += (fd - g.data()[i]).powi(2);
        den += fd * fd;
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-3, "relative error {rel}");
}

#[test]
fn guide_loss_limits() {
    let mut rng = Rng::seed(4);
    let a = smooth(&mut rng, 32);
    let b = img(&mut rng, 32);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let same = guide_loss(&mut tape, av, av, 0.84).unwrap();
    assert_eq!(tape.value(same.total).item(), 0.0);
    let g0 = guide_loss(&mut tape, av, bv, 0.0).unwrap();
    assert!((tape.value(g0.total).item() - pixel_l1_value(&a, &b).unwrap()).abs() < 1e-12);
    let g1 = guide_loss(&mut tape, av, bv, 1.0).unwrap();
    assert!((tape.value(g1.total).item() - (1.0 - ms_ssim_value(&a, &b).unwrap())).abs() < 1e-12);
    assert!(matches!(
        guide_loss(&mut tape, av, bv, 1.5),
        Err(Error::InvalidArgument { .. })
    ));
}

#[test]
fn guide_loss_is_minimal_at_the_target() {
    let mut rng = Rng::seed(5);
    let a = smooth(&mut rng, 32);
    let guide = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (av, xv) = (tape.constant(a.clone()), tape.constant(x.clone()));
        let g = guide_loss(&mut tape, av, xv, 0.84).unwrap();
        tape.value(g.total).item()
    };
    for _ in 0..100 {
        let p = a.map(|v| v + 0.01 * rng.normal());
        assert!(guide(&p) > 0.0);
    }
}

#[test]
fn dc_loss_vanishes_on_zero_fill() {
    let mut rng = Rng::seed(6);
    let i = img(&mut rng, 32);
    let low = degrade(&i, 8).unwrap();
    let h = zero_fill_upsample(&low, 32).unwrap();
    assert!(dc_loss_value(&low, &h).unwrap() < 1e-10);
}

#[test]
fn dc_loss_ignores_out_of_band_perturbations() {
    let mut rng = Rng::seed(7);
    let i = img(&mut rng, 32);
    let low = degrade(&i, 8).unwrap();
    let enhanced = img(&mut rng, 32);
    // random noise with frequencies -4..=4 removed; the band is closed under
    // negation, so the real part stays out of band
    let noise = img(&mut rng, 32);
    let spec = flowlens_core::kspace::dft2(&noise).unwrap();
    let mut outer = spec.clone();
    for y in 12..=20 {
        for x in 12..=20 {
            outer.re.data_mut()[y * 32 + x] = 0.0;
            outer.im.data_mut()[y * 32 + x] = 0.0;
        }
    }
    let hf = flowlens_core::kspace::idft2(&outer).unwrap().real_image();
    let perturbed = enhanced.zip_map(&hf, |a, b| a + b).unwrap();
    let before = dc_loss_value(&low, &enhanced).unwrap();
    let after = dc_loss_value(&low, &perturbed).unwrap();
    assert!((before - after).abs() < 1e-10, "{before} vs {after}");
}

#[test]
fn dc_loss_against_direct_dft() {
    let mut rng = Rng::seed(8);
    let (big, n) = (16usize, 4usize);
    let h = img(&mut rng, big);
    let low = Tensor::zeros(&[1, n, n]);
    let mut oracle = 0.0;
    for ky in 0..n {
        for kx in 0..n {
            let (fy, fx) = (ky as f64 - (n / 2) as f64, kx as f64 - (n / 2) as f64);
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..big {
                for x in 0..big {
                    let ph =
                        -2.0 * std::f64::consts::PI * (fy * y as f64 + fx * x as f64) / big as f64;
                    re += h.data()[y * big + x] * ph.cos();
                    im += h.data()[y * big + x] * ph.sin();
                }
            }
            let scale = (n as f64 / big as f64) / big as f64;
            oracle += (re * re + im * im).sqrt() * scale;
        }
    }
    oracle /= (n * n) as f64;
    let got = dc_loss_value(&low, &h).unwrap();
    assert!((got - oracle).abs() < 1e-7, "{got} vs {oracle}");
}

#[test]
fn report_total_recomputes() {
    let r = LossReport {
        nll: 2.0,
        guide: 0.1,
        pixel_l1: 0.0,
        structural: 0.0,
        dc: 0.05,
        total: 3.5,
        weights: LossWeights {
            alpha: 0.84,
            guide: 10.0,
            dc: 10.0,
        },
        dc_temperature: 0.5,
    };
    assert!((r.recompute_total() - 3.5).abs() < 1e-12);
}

#[test]
fn metric_values() {
    let mut rng = Rng::seed(9);
    let a = img(&mut rng, 16);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    for _ in 0..5 {
        let c = img(&mut rng, 16);
        let (x, y) = (ssim(&a, &c).unwrap(), ssim(&c, &a).unwrap());
        assert!((x - y).abs() < 1e-12 && x <= 1.0);
    }
}

fn small_model(seed: u64) -> EnhancerModel<f64> {
    let cfg = ModelConfig {
        size: 16,
        scales: 2,
        steps: 1,
        flow1_steps: 1,
        hidden: 4,
        cond_width: 4,
        cond_features: 2,
        ..ModelConfig::desk()
    };
    let mut model = EnhancerModel::new(cfg, seed).unwrap();
    perturb(model.params_mut(), &mut Rng::seed(seed), 0.1);
    model
}

struct Example {
    target: Tensor<f64>,
    measured: Measurement<f64>,
    cond: flowlens_core::Condition<f64>,
}

fn example(rng: &mut Rng) -> Example {
    let target = smooth(rng, 16);
    let low = degrade(&target, 4).unwrap();
    let mut cond = condition(rng, 16);
    cond.sr = zero_fill_upsample(&low, 16).unwrap();
    Example {
        target,
        measured: Measurement::from_low(&low).unwrap(),
        cond,
    }
}

impl Example {
    fn input(&self) -> ObjectiveInput<'_, f64> {
        ObjectiveInput {
            target: &self.target,
            measured: &self.measured,
            cond: &self.cond,
        }
    }
}

#[test]
fn total_loss_terms_and_ablation() {
    let model = small_model(10);
    let ex = example(&mut Rng::seed(11));
    let full = total_loss(
        &model,
        &ex.input(),
        LossWeights::default(),
        &mut Rng::seed(3),
    )
    .unwrap();
    assert!(full.guide >= 0.0 && full.dc >= 0.0 && full.nll.is_finite());
    assert!((full.total - full.recompute_total()).abs() < 1e-10);
    let again = total_loss(
        &model,
        &ex.input(),
        LossWeights::default(),
        &mut Rng::seed(3),
    )
    .unwrap();
    assert_eq!(full, again);
    let other = total_loss(
        &model,
        &ex.input(),
        LossWeights::default(),
        &mut Rng::seed(4),
    )
    .unwrap();
    assert_ne!(full.dc_temperature, other.dc_temperature);

    let none = LossWeights {
        guide: 0.0,
        dc: 0.0,
        ..LossWeights::default()
    };
    let r = total_loss(&model, &ex.input(), none, &mut Rng::seed(3)).unwrap();
    assert_eq!(r.total, r.nll);
    assert!(r.dc > 0.0);
    assert!((r.nll - model.nll(&ex.target, &ex.cond).unwrap().per_pixel).abs() < 1e-12);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let model = small_model(12);
    let ex = example(&mut Rng::seed(13));
    let op = KSpaceOperator::new(16, 4).unwrap();
    let mut rng = Rng::seed(14);
    let tau = rng.uniform();
    let noise = model.draw_noise(&mut rng);
    let w = LossWeights::default();
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, true);
    let (loss, _) =
        objective_graph(&model, &mut tape, &bind, &op, &ex.input(), w, tau, &noise).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let all = bind.collect(&mut grads, model.params());
    let eval = |m: &EnhancerModel<f64>| {
        let mut tape = Tape::new();
        let bind = m.params().bind(&mut tape, false);
        let (l, _) =
            objective_graph(m, &mut tape, &bind, &op, &ex.input(), w, tau, &noise).unwrap();
        tape.value(l).item()
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut pick = Rng::seed(15);
    for _ in 0..12 {
        let id = ids[pick.below(ids.len())];
        let k = pick.below(model.params().get(id).len());
        let fd = {
            let h = 1e-6;
            let mut m = model.clone();
            let mut t = m.params().get(id).clone();
            t.data_mut()[k] += h;
            m.params_mut().set(id, t.clone()).unwrap();
            let fp = eval(&m);
            t.data_mut()[k] -= 2.0 * h;
            m.params_mut().set(id, t).unwrap();
            let fm = eval(&m);
            (fp - fm) / (2.0 * h)
        };
        let g = all[id.index()].data()[k];
        let name = model.params().name(id);
        assert!(rel_err(g, fd) < 1e-4, "{name}[{k}]: {g} vs {fd}");
    }
}
