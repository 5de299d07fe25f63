//! Independent oracles shared by the integration suites. Nothing here calls
//! into the library's numerics.

#![allow(dead_code)]

use latentuq::eval::{ScoredSample, ScoredSet};
use latentuq::nn::{init_network, Gradients, LayerSpec, Masks, Network};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Jordan inverse with partial pivoting, plus the determinant.
pub fn inverse_and_det(a: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs()))
            .unwrap();
        if p != c {
            for j in 0..n {
                m.swap([p, j], [c, j]);
                inv.swap([p, j], [c, j]);
            }
            det = -det;
        }
        let pivot = m[[c, c]];
        det *= pivot;
        for j in 0..n {
            m[[c, j]] /= pivot;
            inv[[c, j]] /= pivot;
        }
        for i in 0..n {
            if i != c {
                let f = m[[i, c]];
                for j in 0..n {
                    m[[i, j]] -= f * m[[c, j]];
                    inv[[i, j]] -= f * inv[[c, j]];
                }
            }
        }
    }
    (inv, det)
}

/// Normal log-density through an explicit inverse and determinant.
pub fn log_density_oracle(mean: &Array1<f64>, cov: &Array2<f64>, x: &Array1<f64>) -> f64 {
    let d = mean.len() as f64;
    let (inv, det) = inverse_and_det(cov);
    let diff = x - mean;
    let quad = diff.dot(&inv.dot(&diff));
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
}

/// `B Bᵀ + shift·I` from a flat row-major `B`.
pub fn spd_from(entries: &[f64], d: usize, shift: f64) -> Array2<f64> {
    let b = Array2::from_shape_vec((d, d), entries[..d * d].to_vec()).unwrap();
    b.dot(&b.t()) + Array2::<f64>::eye(d) * shift
}

/// Central finite differences of the batch loss for every parameter.
pub fn numeric_gradients(net: &Network, x: &Array2<f64>, y: &[usize], masks: Option<&Masks>, h: f64) -> Gradients {
    let loss = |n: &Network| n.loss_and_gradients(x.view(), y, masks).unwrap().0;
    let mut probe = net.clone();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..net.layers().len() {
        let mut gw = Array2::zeros(net.layers()[l].weights.raw_dim());
        for idx in ndarray::indices(gw.raw_dim()) {
            let orig = probe.layers()[l].weights[idx];
            probe.layers_mut()[l].weights[idx] = orig + h;
            let up = loss(&probe);
            probe.layers_mut()[l].weights[idx] = orig - h;
            let down = loss(&probe);
            probe.layers_mut()[l].weights[idx] = orig;
            gw[idx] = (up - down) / (2.0 * h);
        }
        let mut gb = Array1::zeros(net.layers()[l].bias.len());
        for i in 0..gb.len() {
            let orig = probe.layers()[l].bias[i];
            probe.layers_mut()[l].bias[i] = orig + h;
            let up = loss(&probe);
            probe.layers_mut()[l].bias[i] = orig - h;
            let down = loss(&probe);
            probe.layers_mut()[l].bias[i] = orig;
            gb[i] = (up - down) / (2.0 * h);
        }
        weights.push(gw);
        biases.push(gb);
    }
    Gradients { weights, biases }
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all parameters.
pub fn max_relative_error(a: &Gradients, n: &Gradients, floor: f64) -> f64 {
    let pairs = a
        .weights
        .iter()
        .zip(&n.weights)
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .chain(a.biases.iter().zip(&n.biases).flat_map(|(x, y)| x.iter().zip(y.iter())));
    pairs
        .map(|(&u, &v)| (u - v).abs() / u.abs().max(v.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random mix of well-classified, misclassified and OOD samples.
pub fn random_scored(seed: u64, n: usize) -> ScoredSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let c: f64 = rng.gen();
            match rng.gen_range(0..3) {
                0 => ScoredSample::in_dist(1, 1, c),
                1 => ScoredSample::in_dist(1, 2, c),
                _ => ScoredSample::ood(None, 0, c),
            }
        })
        .collect();
    ScoredSet::new(samples).unwrap()
}

/// Random 4-2-3 network and batch whose hidden pre-activations stay clear of
/// the ReLU kink, so finite differences see a smooth loss.
pub fn smooth_case(seed: u64, dropout: f64) -> Option<(Network, Array2<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = init_network(4, &[LayerSpec::hidden(2, dropout)], 3, seed).ok()?;
    for l in net.layers_mut() {
        l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
    let y: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    let hidden = &net.layers()[0];
    let pre = x.dot(&hidden.weights.t()) + &hidden.bias;
    pre.iter().all(|z| z.abs() > 1e-3).then_some((net, x, y))
}
