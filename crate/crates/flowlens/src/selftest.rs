//! Built-in oracle checks run by `flowlens selftest`.

use std::time::Instant;

use flowlens_core::autodiff::Tape;
use flowlens_core::kspace::{degrade, dft2, idft2, KSpaceOperator};
use flowlens_core::losses::{objective_graph, LossWeights, Measurement, ObjectiveInput};
use flowlens_core::model::ModelConfig;
use flowlens_core::{Condition, EnhancerModel, ParamStore, Precision, Real, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn tiny_config() -> ModelConfig {
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

fn small_config() -> ModelConfig {
    ModelConfig {
        size: 16,
        scales: 2,
        steps: 1,
        flow1_steps: 1,
        hidden: 4,
        cond_width: 4,
        cond_features: 2,
        ..ModelConfig::desk()
    }
}

/// Moves every parameter off its initial value; actnorm scales stay positive.
pub fn perturb<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, amp: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let scale = store.name(id).ends_with(".scale");
        let v = store.get(id).map(|v| {
            let n = rng.normal();
            if scale {
                T::c(v.f64() * (amp * n).exp())
            } else {
                T::c(v.f64() + amp * n)
            }
        });
        store.set(id, v).expect("same shape");
    }
}

fn random_condition<T: Real>(rng: &mut Rng, n: usize) -> Condition<T> {
    let s = [1, n, n];
    Condition::new(
        rng.uniform_tensor(&s, 0.0, 1.0),
        rng.uniform_tensor(&s, 0.0, 1.0),
        rng.uniform_tensor(&s, 0.0, 1.0),
    )
    .expect("matching shapes")
}

fn perturbed_model<T: Real>(
    config: ModelConfig,
    seed: u64,
    amp: f64,
) -> flowlens_core::Result<EnhancerModel<T>> {
    let mut model = EnhancerModel::new(config, seed)?;
    perturb(model.params_mut(), &mut Rng::seed(seed ^ 0x5eed), amp);
    model.set_initialized(true);
    Ok(model)
}

type Outcome = Result<(bool, String), String>;

fn dft_roundtrip() -> Outcome {
    let mut rng = Rng::seed(1);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 16, 16]);
    let k = dft2(&x).map_err(|e| e.to_string())?;
    let back = idft2(&k).map_err(|e| e.to_string())?.real_image();
    let err = back.max_abs_diff(&x);
    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    let parseval = (k.energy() - energy).abs() / energy;
    Ok((
        err < 1e-10 && parseval < 1e-10,
        format!("round trip {err:.2e}, Parseval {parseval:.2e}"),
    ))
}

fn invertibility<T: Real>() -> Outcome {
    let tol = match T::PRECISION {
        Precision::F32 => 1e-4,
        Precision::F64 => 1e-9,
    };
    let config = ModelConfig::desk();
    let model = perturbed_model::<T>(config.clone(), 2, 0.05).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed(3);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let x: Tensor<T> = rng.uniform_tensor(&[1, config.size, config.size], 0.0, 1.0);
        let c = random_condition(&mut rng, config.size);
        let z = model.forward(&x, &c).map_err(|e| e.to_string())?.latents;
        let back = model.inverse(&z, &c).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&x).f64());
    }
    Ok((
        worst < tol,
        format!("max |x - inverse(forward(x))| = {worst:.2e} (tolerance {tol:.0e})"),
    ))
}

fn flatten(z: &[Tensor<f64>]) -> Vec<f64> {
    z.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Log |det| by Gaussian elimination with partial pivoting.
fn log_abs_det(n: usize, mut m: Vec<f64>) -> f64 {
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))
            .unwrap_or(k);
        if p != k {
            for c in 0..n {
                m.swap(k * n + c, p * n + c);
            }
        }
        let piv = m[k * n + k];
        acc += piv.abs().ln();
        for r in k + 1..n {
            let f = m[r * n + k] / piv;
            for c in k..n {
                m[r * n + c] -= f * m[k * n + c];
            }
        }
    }
    acc
}

fn jacobian_logdet() -> Outcome {
    let config = tiny_config();
    let model = perturbed_model::<f64>(config.clone(), 4, 0.1).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed(5);
    let n = config.size;
    let x: Tensor<f64> = rng.uniform_tensor(&[1, n, n], 0.0, 1.0);
    let c = random_condition(&mut rng, n);
    let run = |v: &[f64]| -> flowlens_core::Result<Vec<f64>> {
        let t = Tensor::new(&[1, n, n], v.to_vec())?;
        Ok(flatten(&model.forward(&t, &c)?.latents))
    };
    let reported = model.forward(&x, &c).map_err(|e| e.to_string())?.logdet;
    let d = n * n;
    let h = 1e-5;
    let mut jac = vec![0.0; d * d];
    let mut p = x.data().to_vec();
    for j in 0..d {
        let orig = p[j];
        p[j] = orig + h;
        let fp = run(&p).map_err(|e| e.to_string())?;
        p[j] = orig - h;
        let fm = run(&p).map_err(|e| e.to_string())?;
        p[j] = orig;
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let numeric = log_abs_det(d, jac);
    let err = (reported - numeric).abs();
    Ok((
        err < 1e-3,
        format!("reported {reported:.6}, numeric {numeric:.6}, |diff| {err:.2e}"),
    ))
}

fn gradient() -> Outcome {
    let config = small_config();
    let n = config.size;
    let model = perturbed_model::<f64>(config, 6, 0.1).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed(7);
    let target: Tensor<f64> = rng.uniform_tensor(&[1, n, n], 0.0, 1.0);
    let low = degrade(&target, n / 4).map_err(|e| e.to_string())?;
    let measured = Measurement::from_low(&low).map_err(|e| e.to_string())?;
    let cond = random_condition(&mut rng, n);
    let op = KSpaceOperator::new(n, n / 4).map_err(|e| e.to_string())?;
    let tau = rng.uniform();
    let noise = model.draw_noise(&mut rng);
    let input = ObjectiveInput {
        target: &target,
        measured: &measured,
        cond: &cond,
    };
    let w = LossWeights::default();
    let eval = |m: &EnhancerModel<f64>, trainable: bool| {
        let mut tape = Tape::new();
        let bind = m.params().bind(&mut tape, trainable);
        let (l, _) = objective_graph(m, &mut tape, &bind, &op, &input, w, tau, &noise)?;
        Ok::<_, flowlens_core::Error>((tape, bind, l))
    };
    let (tape, bind, loss) = eval(&model, true).map_err(|e| e.to_string())?;
    let mut grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic = bind.collect(&mut grads, model.params());
    let ids: Vec<_> = model.params().ids().collect();
    let mut pick = Rng::seed(8);
    let mut worst = 0.0f64;
    for _ in 0..12 {
        let id = ids[pick.below(ids.len())];
        let k = pick.below(model.params().get(id).len());
        let h = 1e-6;
        let mut m = model.clone();
        let mut at = |delta: f64| -> Result<f64, String> {
            let mut t = model.params().get(id).clone();
            t.data_mut()[k] += delta;
            m.params_mut().set(id, t).map_err(|e| e.to_string())?;
            let (tape, _, l) = eval(&m, false).map_err(|e| e.to_string())?;
            Ok(tape.value(l).item())
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        let g = analytic[id.index()].data()[k];
        let denom = g.abs().max(fd.abs());
        let rel = if denom < 1e-12 {
            (g - fd).abs()
        } else {
            (g - fd).abs() / denom
        };
        worst = worst.max(rel);
    }
    Ok((
        worst < 1e-4,
        format!("worst relative error over 12 parameters {worst:.2e}"),
    ))
}

/// Drives every coupling and injector to the most negative raw scale; the
/// scale floor must keep the flow invertible with a finite log-determinant.
fn scale_floor() -> Outcome {
    let config = tiny_config();
    let mut model = perturbed_model::<f64>(config.clone(), 9, 0.1).map_err(|e| e.to_string())?;
    for id in model.params().ids().collect::<Vec<_>>() {
        if model.params().name(id).ends_with(".net.out.bias") {
            let mut b = model.params().get(id).clone();
            let half = b.len() / 2;
            b.data_mut()[..half].iter_mut().for_each(|v| *v = -1000.0);
            model.params_mut().set(id, b).map_err(|e| e.to_string())?;
        }
    }
    let mut rng = Rng::seed(10);
    let n = config.size;
    let x: Tensor<f64> = rng.uniform_tensor(&[1, n, n], 0.0, 1.0);
    let c = random_condition(&mut rng, n);
    let fwd = model.forward(&x, &c).map_err(|e| e.to_string())?;
    let back = model.inverse(&fwd.latents, &c).map_err(|e| e.to_string())?;
    let err = back.max_abs_diff(&x);
    let ok = fwd.logdet.is_finite() && err < 1e-9;
    Ok((
        ok,
        format!("logdet {:.3}, round trip {err:.2e}", fwd.logdet),
    ))
}

fn run_check(name: &'static str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check; invertibility runs at `precision`, the oracles at 64-bit.
pub fn run(precision: Precision) -> Vec<CheckResult> {
    vec![
        run_check("dft round trip", dft_roundtrip),
        match precision {
            Precision::F32 => run_check("invertibility", invertibility::<f32>),
            Precision::F64 => run_check("invertibility", invertibility::<f64>),
        },
        run_check("jacobian log-determinant", jacobian_logdet),
        run_check("gradient", gradient),
        run_check("scale floor", scale_floor),
    ]
}
