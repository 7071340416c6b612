//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

use psrtr::models::Family;
use psrtr::nn::{mse_loss, LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------- PSR

/// Cell of `v` found by counting the interior grid lines at or below it.
fn oracle_cell(v: f64, n: usize) -> usize {
    let r = 2.0 / n as f64;
    (1..n).filter(|&k| v >= -1.0 + k as f64 * r).count()
}

/// Brute-force occupancy counts of the delay embedding of `x`.
pub fn psr_counts(x: &[f64], tau: usize, n: usize) -> Vec<u32> {
    let q = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut counts = vec![0u32; n * n];
    for i in 0..x.len() - tau {
        let (a, b) = (x[i] / q, x[i + tau] / q);
        counts[oracle_cell(a, n) * n + oracle_cell(b, n)] += 1;
    }
    counts
}

// ------------------------------------------------------------- shapes

/// One layer row: layer kind, channel exponent offset, spatial exponent
/// offset, so the output is `2^(n + c) x 2^(s - n) x 2^(s - n)`.
type Row = (&'static str, i32, i32);

const BASIC: &[Row] = &[("conv2d", 4, 6), ("batch_norm", 4, 6), ("relu", 4, 6), ("max_pool2d", 4, 5)];

const COMPLEX: &[Row] = &[
    ("conv2d", 2, 6),
    ("batch_norm", 2, 6),
    ("relu", 2, 6),
    ("conv2d", 2, 6),
    ("batch_norm", 2, 6),
    ("relu", 2, 6),
    ("skip_add", 2, 6),
    ("conv2d", 3, 5),
    ("batch_norm", 3, 5),
    ("relu", 3, 5),
];

const DEEP: &[Row] = &[
    ("conv2d", 2, 6),
    ("batch_norm", 2, 6),
    ("relu", 2, 6),
    ("conv2d", 2, 6),
    ("batch_norm", 2, 6),
    ("relu", 2, 6),
    ("skip_add", 2, 6),
    ("conv2d", 2, 6),
    ("batch_norm", 2, 6),
    ("relu", 2, 6),
    ("conv2d", 2, 6),
    ("batch_norm", 2, 6),
    ("relu", 2, 6),
    ("skip_add", 2, 6),
    ("conv2d", 3, 5),
    ("batch_norm", 3, 5),
    ("relu", 3, 5),
];

/// Kernel/stride columns of the convolution rows, as `(k_offset, stride)`
/// with kernel `k_offset - n`.
pub fn expected_kernels(family: Family) -> Vec<(usize, usize)> {
    match family {
        Family::Mlp => vec![],
        Family::BasicCnn => vec![(7, 1)],
        Family::ComplexCnn => vec![(6, 1), (6, 1), (7, 2)],
        Family::DeepCnn => vec![(6, 1), (6, 1), (6, 1), (6, 1), (7, 2)],
    }
}

/// Expected `(kind, output size)` of every layer of a 32x32 model,
/// including the flatten step and the regression block.
pub fn expected_shapes(family: Family, depth: usize) -> Vec<(&'static str, Vec<usize>)> {
    let mut out: Vec<(&'static str, Vec<usize>)> = Vec::new();
    let regression = [("dense", 256), ("batch_norm", 256), ("relu", 256), ("dense", 64), ("batch_norm", 64), ("relu", 64), ("dense", 1)];
    if family == Family::Mlp {
        out.push(("flatten", vec![1024]));
        for _ in 0..depth {
            out.extend([("dense", vec![1024]), ("batch_norm", vec![1024]), ("relu", vec![1024])]);
        }
    } else {
        let rows = match family {
            Family::BasicCnn => BASIC,
            Family::ComplexCnn => COMPLEX,
            Family::DeepCnn => DEEP,
            Family::Mlp => unreachable!(),
        };
        for n in 1..=depth as i32 {
            for &(kind, c, s) in rows {
                let side = 1usize << (s - n);
                out.push((kind, vec![1 << (n + c), side, side]));
            }
        }
        let last = out.last().expect("rows").1.iter().product();
        out.push(("flatten", vec![last]));
    }
    out.extend(regression.iter().map(|&(k, u)| (k, vec![u])));
    out
}

// ---------------------------------------------------------- gradients

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradError {
    pub rel: f64,
    pub abs: f64,
}

/// Compares analytic and central-difference gradients of `loss` over
/// sampled parameters and inputs.
pub fn grad_check_with(
    specs: &[LayerSpec],
    input: &[usize],
    batch: usize,
    seed: u64,
    loss: &dyn Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
) -> GradError {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::build(input, specs, seed).expect("network builds");
    let mut shape = vec![batch];
    shape.extend_from_slice(input);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, random_vec(n, &mut rng));

    net.zero_grad();
    let y = net.forward_train(&x).expect("forward");
    let (_, dy) = loss(&y);
    let dx = net.backward(&dy);
    let analytic: Vec<Vec<f64>> = net.params_mut().into_iter().map(|(_, g)| g.to_vec()).collect();

    let eval = |net: &mut Network<f64>, x: &Tensor<f64>| loss(&net.forward_train(x).expect("forward")).0;
    let h = 1e-6;
    let mut worst = GradError::default();
    let mut record = |a: f64, b: f64| {
        worst.abs = worst.abs.max((a - b).abs());
        worst.rel = worst.rel.max((a - b).abs() / (a.abs() + b.abs()).max(1e-3));
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let len = grads.len();
        for k in 0..len.min(12) {
            let i = (k * 7919 + pi) % len;
            let orig = net.params_mut()[pi].0[i];
            net.params_mut()[pi].0[i] = orig + h;
            let up = eval(&mut net, &x);
            net.params_mut()[pi].0[i] = orig - h;
            let down = eval(&mut net, &x);
            net.params_mut()[pi].0[i] = orig;
            record(grads[i], (up - down) / (2.0 * h));
        }
    }
    for i in (0..n).step_by((n / 20).max(1)) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = eval(&mut net, &xp);
        xp.data_mut()[i] -= 2.0 * h;
        let down = eval(&mut net, &xp);
        record(dx.data()[i], (up - down) / (2.0 * h));
    }
    worst
}

/// [`grad_check_with`] under the loss `sum(out * w)` for fixed random `w`.
pub fn grad_check(specs: &[LayerSpec], input: &[usize], batch: usize, seed: u64) -> GradError {
    let out: usize = Network::<f64>::build(input, specs, seed).unwrap().output_shape().unwrap().iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = random_vec(batch * out, &mut rng);
    grad_check_with(specs, input, batch, seed, &|y: &Tensor<f64>| {
        let l = y.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        (l, Tensor::new(y.shape().to_vec(), w.clone()))
    })
}

/// [`grad_check_with`] under the mean-squared-error training loss.
pub fn grad_check_mse(specs: &[LayerSpec], input: &[usize], batch: usize, seed: u64) -> GradError {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
    let targets = random_vec(batch, &mut rng);
    grad_check_with(specs, input, batch, seed, &|y: &Tensor<f64>| mse_loss(y, &targets))
}

// ------------------------------------------------------------- signals

pub fn sine(n: usize, fs: f64, hz: f64, amp: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / fs).sin()).collect()
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Periodogram power of `x` summed over DFT bins with frequency in
/// `[lo, hi]` Hz, by direct evaluation of each bin.
pub fn band_power(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for k in 0..=n / 2 {
        let f = k as f64 * fs / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let w = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let (s, c) = (w * i as f64).sin_cos();
            re += v * c;
            im += v * s;
        }
        total += (re * re + im * im) / n as f64;
    }
    total
}

// ------------------------------------------------------------ screening

/// First index `i` with both `m[i]` and `m[i + 1]` present and above
/// `threshold`.
pub fn fail_index(m: &[Option<f64>], threshold: f64) -> Option<usize> {
    let high = |v: Option<f64>| matches!(v, Some(x) if x > threshold);
    (0..m.len().saturating_sub(1)).find(|&i| high(m[i]) && high(m[i + 1]))
}
