//! Central finite differences against the analytic backward pass.

use imago_nnet::layers::{Dropout, Mode};
use imago_nnet::{ArchSpec, Conv1d, CorrForm, EncoderDecoder, Loss, LossWeights, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor3 {
    let n = shape.iter().product();
    Tensor3::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute difference when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric(values: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + H;
            let up = f(values);
            values[i] = orig - H;
            let down = f(values);
            values[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn check_model(weights: LossWeights, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec {
        widths: vec![5, 3],
        kernel_size: 7,
        dropout: 0.0,
    };
    let mut model = EncoderDecoder::new(4, &arch, &mut rng).unwrap();
    let x = rand_tensor([1, 4, 16], &mut rng);
    let y = rand_tensor([1, 4, 16], &mut rng);
    let mut loss = Loss::new(weights).unwrap();

    model.zero_grad();
    let pred = model.forward(&x, Mode::Train, &mut rng).unwrap();
    let (_, g) = loss.terms_and_grad(&pred, &y).unwrap();
    let dx = model.backward(&g).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone().unwrap()).collect();

    let snapshot = model.snapshot();
    for (k, a) in analytic.iter().enumerate() {
        let mut vals = snapshot[k].clone();
        let num = numeric(&mut vals, |v| {
            let mut snap = snapshot.clone();
            snap[k] = v.to_vec();
            let mut m = model.clone();
            m.restore(&snap).unwrap();
            loss.terms(&m.predict(&x).unwrap(), &y).unwrap().total
        });
        let e = rel_err(a, &num);
        assert!(e < TOL, "seed {seed} param {k}: rel err {e:e}");
    }

    let mut xv = x.data.clone();
    let num = numeric(&mut xv, |v| {
        let xi = Tensor3::from_vec(x.shape(), v.to_vec()).unwrap();
        loss.terms(&model.predict(&xi).unwrap(), &y).unwrap().total
    });
    assert!(rel_err(&dx.data, &num) < TOL);
}

#[test]
fn model_parameters_under_each_loss_term() {
    let only = |alpha: f64, beta: f64, gamma: f64| LossWeights {
        alpha,
        beta,
        gamma,
        ..LossWeights::default()
    };
    for seed in 0..4 {
        check_model(only(0.0, 0.0, 0.0), seed);
        check_model(only(1.0, 0.0, 0.0), seed);
        check_model(only(0.0, 1.0, 0.0), seed);
        check_model(only(0.0, 0.0, 1.0), seed);
        check_model(LossWeights::default(), seed);
    }
}

fn check_loss(weights: LossWeights, shape: [usize; 3], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_tensor(shape, &mut rng);
    let y = rand_tensor(shape, &mut rng);
    let mut loss = Loss::new(weights).unwrap();
    let (_, g) = loss.terms_and_grad(&p, &y).unwrap();
    let mut pv = p.data.clone();
    let num = numeric(&mut pv, |v| {
        loss.terms(&Tensor3::from_vec(shape, v.to_vec()).unwrap(), &y).unwrap().total
    });
    let e = rel_err(&g.data, &num);
    assert!(e < TOL, "{weights:?} {shape:?}: {e:e}");
}

#[test]
fn spectral_gradient_on_small_tensor() {
    let w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 1.0,
        ..LossWeights::default()
    };
    for seed in 0..10 {
        check_loss(w, [1, 2, 8], seed);
        check_loss(w, [1, 2, 9], seed);
    }
}

#[test]
fn printed_correlation_form_gradient() {
    let w = LossWeights {
        corr_form: CorrForm::SquaredNorms,
        ..LossWeights::default()
    };
    for seed in 0..10 {
        check_loss(w, [2, 3, 11], seed);
    }
}

#[test]
fn single_conv_including_even_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(ic, oc, k) in &[(4, 4, 7), (3, 2, 4), (2, 5, 1), (1, 1, 3)] {
        let mut conv = Conv1d::new(ic, oc, k, &mut rng);
        let x = rand_tensor([2, ic, 12], &mut rng);
        let r = rand_tensor([2, oc, 12], &mut rng);
        // L = Σ r ⊙ conv(x)
        conv.forward(&x, true).unwrap();
        let dx = conv.backward(&r).unwrap();
        let objective = |c: &Conv1d, x: &Tensor3| -> f64 {
            c.apply(x).unwrap().data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let mut w = conv.weight.data.clone();
        let num_w = numeric(&mut w, |v| {
            let mut c = conv.clone();
            c.weight.data.copy_from_slice(v);
            objective(&c, &x)
        });
        assert!(rel_err(conv.weight.grad.as_ref().unwrap(), &num_w) < TOL);
        let mut b = conv.bias.data.clone();
        let num_b = numeric(&mut b, |v| {
            let mut c = conv.clone();
            c.bias.data.copy_from_slice(v);
            objective(&c, &x)
        });
        assert!(rel_err(conv.bias.grad.as_ref().unwrap(), &num_b) < TOL);
        let mut xv = x.data.clone();
        let num_x = numeric(&mut xv, |v| objective(&conv, &Tensor3::from_vec(x.shape(), v.to_vec()).unwrap()));
        assert!(rel_err(&dx.data, &num_x) < TOL);
    }
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut d = Dropout::new(0.3).unwrap();
    let x = rand_tensor([1, 4, 16], &mut rng);
    let r = rand_tensor([1, 4, 16], &mut rng);
    d.forward(&x, Mode::Train, &mut rng);
    let mut xv = x.data.clone();
    let num = numeric(&mut xv, |v| {
        let y = d.forward_fixed(&Tensor3::from_vec(x.shape(), v.to_vec()).unwrap()).unwrap();
        y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
    });
    let g = d.backward(&r).unwrap();
    assert!(rel_err(&g.data, &num) < TOL);
}
