//! Latent-space confidence for a trained classifier.
//!
//! Preparation:
//! 1. forward every training point; keep those predicted correctly
//!    ([`build_confidence_sets`]);
//! 2. fit one Gaussian per (hidden layer, class) to the kept latents;
//! 3. take the `alpha`/`beta` percentiles of each set's own log-densities
//!    ([`fit_uq_model`]).
//!
//! Evaluation ([`score`]): predict `k`, evaluate each hidden latent under the
//! `(l, k)` Gaussian, map through [`smoothstep`] and multiply across layers.
//! A prediction is kept when the product reaches the acceptance threshold
//! ([`accept`]).

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{fit_gaussian, percentile_of_sorted, GaussianDensity, Matrix, Vector};
use crate::nn::{self, ByteReader, Network};

/// Latents of correctly classified training points, grouped by hidden layer
/// and class.
#[derive(Debug, Clone)]
pub struct ConfidenceSets {
    /// `latents[l][k]` holds one row per kept sample of class `k`.
    latents: Vec<Vec<Matrix>>,
    kept: Vec<usize>,
    total: usize,
}

impl ConfidenceSets {
    pub fn num_layers(&self) -> usize {
        self.latents.len()
    }

    pub fn num_classes(&self) -> usize {
        self.kept.len()
    }

    pub fn set(&self, layer: usize, class: usize) -> &Matrix {
        &self.latents[layer][class]
    }

    /// Kept samples per class; identical across layers.
    pub fn kept_counts(&self) -> &[usize] {
        &self.kept
    }

    /// Number of training points inspected, including the pruned ones.
    pub fn total_inspected(&self) -> usize {
        self.total
    }
}

/// Forwards `train` deterministically and keeps the latents of every point
/// whose prediction matches its label.
pub fn build_confidence_sets(net: &Network, train: &Dataset) -> Result<ConfidenceSets> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = net.num_classes();
    if train.num_classes() > k {
        return Err(Error::BadParameter(format!(
            "dataset has {} classes but the network has {k} outputs",
            train.num_classes()
        )));
    }
    let (hidden, pred) = nn::latents_and_predictions(net, train.features().view())?;
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (&p, &y)) in pred.iter().zip(train.labels()).enumerate() {
        if p == y {
            rows[y].push(i);
        }
    }
    if let Some(empty) = rows.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(empty));
    }
    let latents = hidden
        .iter()
        .map(|h| rows.iter().map(|r| h.select(Axis(0), r)).collect())
        .collect();
    Ok(ConfidenceSets {
        latents,
        kept: rows.iter().map(Vec::len).collect(),
        total: train.len(),
    })
}

/// Per-(layer, class) Gaussians plus the log-densities of each confidence
/// set under its own Gaussian. Percentile calibration is separate so several
/// `(alpha, beta)` pairs can share one fit.
#[derive(Debug, Clone)]
pub struct LatentDensities {
    /// `densities[l][k]`
    densities: Vec<Vec<GaussianDensity>>,
    /// Ascending self log-densities, `self_log_probs[l][k]`.
    self_log_probs: Vec<Vec<Vec<f64>>>,
}

impl LatentDensities {
    pub fn fit(sets: &ConfidenceSets, ridge_scale: f64) -> Result<Self> {
        let (nl, nk) = (sets.num_layers(), sets.num_classes());
        let cells: Vec<(usize, usize)> = (0..nl).flat_map(|l| (0..nk).map(move |k| (l, k))).collect();
        let fitted = cells
            .par_iter()
            .map(|&(l, k)| {
                let set = sets.set(l, k);
                let g = fit_gaussian(set.view(), ridge_scale)?;
                let mut lp = g.log_density_rows(set.view())?.to_vec();
                lp.sort_by(f64::total_cmp);
                Ok((g, lp))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut densities: Vec<Vec<GaussianDensity>> = vec![Vec::with_capacity(nk); nl];
        let mut self_log_probs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(nk); nl];
        for ((l, _), (g, lp)) in cells.into_iter().zip(fitted) {
            densities[l].push(g);
            self_log_probs[l].push(lp);
        }
        Ok(Self {
            densities,
            self_log_probs,
        })
    }

    pub fn density(&self, layer: usize, class: usize) -> &GaussianDensity {
        &self.densities[layer][class]
    }

    /// Ascending log-densities of the `(layer, class)` confidence set.
    pub fn self_log_probs(&self, layer: usize, class: usize) -> &[f64] {
        &self.self_log_probs[layer][class]
    }

    pub fn num_layers(&self) -> usize {
        self.densities.len()
    }

    pub fn num_classes(&self) -> usize {
        self.densities.first().map_or(0, Vec::len)
    }

    /// Log-density of each hidden latent under the Gaussian of `class`.
    pub fn log_probs(&self, latents: &[ArrayView1<f64>], class: usize) -> Result<Vec<f64>> {
        if latents.len() != self.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: self.num_layers(),
                actual: latents.len(),
            });
        }
        latents
            .iter()
            .enumerate()
            .map(|(l, x)| self.densities[l][class].log_density(*x))
            .collect()
    }

    /// Calibrates percentile thresholds for one `(alpha, beta)` pair.
    pub fn calibrate(&self, alpha: f64, beta: f64, fingerprint: [u8; 32]) -> Result<UqModel> {
        check_percentiles(alpha, beta)?;
        let cells = self
            .densities
            .iter()
            .zip(&self.self_log_probs)
            .map(|(gs, lps)| {
                gs.iter()
                    .zip(lps)
                    .map(|(g, lp)| {
                        if lp.is_empty() {
                            return Err(Error::EmptyInput);
                        }
                        Ok(UqCell {
                            density: g.clone(),
                            q_alpha: percentile_of_sorted(lp, alpha),
                            q_beta: percentile_of_sorted(lp, beta),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UqModel {
            alpha,
            beta,
            cells,
            fingerprint,
            form: SmoothstepForm::default(),
        })
    }
}

fn check_percentiles(alpha: f64, beta: f64) -> Result<()> {
    if !(0.0 <= alpha && alpha <= beta && beta <= 100.0) {
        return Err(Error::BadPercentiles { alpha, beta });
    }
    Ok(())
}

/// Which tanh argument the smoothstep uses inside `(q_alpha, q_beta)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothstepForm {
    /// `(2x - 1) / (2 sqrt(x (1 - x)))`: runs from 0 to 1 across the interval.
    #[default]
    Corrected,
    /// `(x - 1) / (2 sqrt(x (1 - x)))`: tends to 1/2 at the upper end.
    Literal,
}

/// Maps a log-density onto `[0, 1]`: 0 at or below `q_alpha`, 1 at or above
/// `q_beta`, a tanh ramp in between. Equal thresholds give a hard step.
pub fn smoothstep(log_prob: f64, q_alpha: f64, q_beta: f64) -> Result<f64> {
    smoothstep_with(SmoothstepForm::Corrected, log_prob, q_alpha, q_beta)
}

pub fn smoothstep_with(form: SmoothstepForm, log_prob: f64, q_alpha: f64, q_beta: f64) -> Result<f64> {
    if q_alpha > q_beta || q_alpha.is_nan() || q_beta.is_nan() {
        return Err(Error::BadThresholds { q_alpha, q_beta });
    }
    if log_prob >= q_beta {
        return Ok(1.0);
    }
    if log_prob <= q_alpha {
        return Ok(0.0);
    }
    let x = (log_prob - q_alpha) / (q_beta - q_alpha);
    let numerator = match form {
        SmoothstepForm::Corrected => 2.0 * x - 1.0,
        SmoothstepForm::Literal => x - 1.0,
    };
    let arg = numerator / (2.0 * (x * (1.0 - x)).sqrt());
    // (tanh(a) + 1) / 2 written as a logistic; it would otherwise round to
    // exactly 0 or 1 well inside the interval, where only the thresholds
    // themselves may map to 0 and 1.
    let s = 1.0 / (1.0 + (-2.0 * arg).exp());
    Ok(s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Gaussian and calibrated thresholds for one (layer, class).
#[derive(Debug, Clone, PartialEq)]
pub struct UqCell {
    pub density: GaussianDensity,
    pub q_alpha: f64,
    pub q_beta: f64,
}

/// Fitted latent confidence model for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct UqModel {
    alpha: f64,
    beta: f64,
    /// `cells[l][k]`
    cells: Vec<Vec<UqCell>>,
    fingerprint: [u8; 32],
    form: SmoothstepForm,
}

/// Fits the Gaussians and calibrates one `(alpha, beta)` pair.
pub fn fit_uq_model(
    net: &Network,
    sets: &ConfidenceSets,
    alpha: f64,
    beta: f64,
    ridge_scale: f64,
) -> Result<UqModel> {
    check_percentiles(alpha, beta)?;
    LatentDensities::fit(sets, ridge_scale)?.calibrate(alpha, beta, net.fingerprint())
}

impl UqModel {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn cell(&self, layer: usize, class: usize) -> &UqCell {
        &self.cells[layer][class]
    }

    pub fn num_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn num_classes(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn smoothstep_form(&self) -> SmoothstepForm {
        self.form
    }

    pub fn with_smoothstep_form(mut self, form: SmoothstepForm) -> Self {
        self.form = form;
        self
    }

    /// Builds a report from precomputed per-layer log-densities under the
    /// Gaussians of `predicted`.
    pub fn report_from_log_probs(&self, predicted: usize, log_probs: Vec<f64>) -> Result<ConfidenceReport> {
        if log_probs.len() != self.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: self.num_layers(),
                actual: log_probs.len(),
            });
        }
        if predicted >= self.num_classes() {
            return Err(Error::BadParameter(format!("class {predicted} out of range")));
        }
        let layer_confidence = log_probs
            .iter()
            .zip(&self.cells)
            .map(|(&lp, row)| {
                let c = &row[predicted];
                smoothstep_with(self.form, lp, c.q_alpha, c.q_beta)
            })
            .collect::<Result<Vec<_>>>()?;
        let confidence = layer_confidence.iter().product();
        Ok(ConfidenceReport {
            predicted_label: predicted,
            log_probs,
            layer_confidence,
            confidence,
            accepted: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(UQ_MAGIC);
        b.extend_from_slice(&UQ_VERSION.to_le_bytes());
        b.extend_from_slice(&self.alpha.to_le_bytes());
        b.extend_from_slice(&self.beta.to_le_bytes());
        b.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        b.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        let f64s = |b: &mut Vec<u8>, vs: &mut dyn Iterator<Item = f64>| {
            for v in vs {
                b.extend_from_slice(&v.to_le_bytes());
            }
        };
        for cell in self.cells.iter().flatten() {
            let g = &cell.density;
            let d = g.dim();
            b.extend_from_slice(&(d as u32).to_le_bytes());
            f64s(&mut b, &mut g.mean().iter().copied());
            // Lower triangle, row by row.
            let l = g.chol_lower();
            f64s(&mut b, &mut (0..d).flat_map(|i| (0..=i).map(move |j| l[[i, j]])));
            f64s(
                &mut b,
                &mut [g.log_det(), g.reg_lambda(), cell.q_alpha, cell.q_beta].into_iter(),
            );
        }
        b.extend_from_slice(&self.fingerprint);
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != UQ_MAGIC {
            return Err(Error::BadFormat("not a UQ model file (bad magic)".into()));
        }
        let mut r = ByteReader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != UQ_VERSION {
            return Err(Error::VersionMismatch {
                expected: UQ_VERSION,
                found: version,
            });
        }
        nn::check_crc(bytes)?;
        let alpha = r.f64()?;
        let beta = r.f64()?;
        check_percentiles(alpha, beta).map_err(|e| Error::BadFormat(e.to_string()))?;
        let nl = r.u32()? as usize;
        let nk = r.u32()? as usize;
        let mut cells = Vec::with_capacity(nl);
        for _ in 0..nl {
            let mut row = Vec::with_capacity(nk);
            for _ in 0..nk {
                let d = r.u32()? as usize;
                let mean = Array1::from(r.f64s(d)?);
                let packed = r.f64s(d * (d + 1) / 2)?;
                let mut l = Array2::zeros((d, d));
                let mut it = packed.into_iter();
                for i in 0..d {
                    for j in 0..=i {
                        l[[i, j]] = it.next().expect("packed length");
                    }
                }
                let _log_det = r.f64()?;
                let reg_lambda = r.f64()?;
                let q_alpha = r.f64()?;
                let q_beta = r.f64()?;
                if q_alpha > q_beta {
                    return Err(Error::BadFormat("q_alpha exceeds q_beta".into()));
                }
                let density = GaussianDensity::from_parts(mean, l, reg_lambda)
                    .map_err(|e| Error::BadFormat(e.to_string()))?;
                row.push(UqCell {
                    density,
                    q_alpha,
                    q_beta,
                });
            }
            cells.push(row);
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if r.remaining() != 4 {
            return Err(Error::BadFormat("unexpected trailing bytes".into()));
        }
        Ok(Self {
            alpha,
            beta,
            cells,
            fingerprint,
            form: SmoothstepForm::default(),
        })
    }
}

const UQ_MAGIC: &[u8; 4] = b"LUQ1";
const UQ_VERSION: u32 = 1;

pub fn save_uq_model<W: Write>(model: &UqModel, mut sink: W) -> Result<()> {
    sink.write_all(&model.to_bytes())?;
    Ok(())
}

pub fn load_uq_model<R: Read>(mut source: R) -> Result<UqModel> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    UqModel::from_bytes(&bytes)
}

/// Outcome of scoring one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceReport {
    pub predicted_label: usize,
    /// Log-density of each hidden latent under the predicted class.
    pub log_probs: Vec<f64>,
    /// Smoothstep value per hidden layer.
    pub layer_confidence: Vec<f64>,
    /// Product of `layer_confidence`.
    pub confidence: f64,
    /// Set by [`accept`].
    pub accepted: Option<bool>,
}

/// Scores one input: deterministic prediction, per-layer smoothstep of the
/// latent log-density, product across layers.
pub fn score(model: &UqModel, net: &Network, x: ArrayView1<f64>) -> Result<ConfidenceReport> {
    if &net.fingerprint() != model.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    score_unchecked(model, net, x)
}

/// [`score`] without recomputing the network fingerprint; for hot loops where
/// the caller has already checked it once.
pub fn score_unchecked(model: &UqModel, net: &Network, x: ArrayView1<f64>) -> Result<ConfidenceReport> {
    if net.hidden_layers().len() != model.num_layers() || net.num_classes() != model.num_classes() {
        return Err(Error::FingerprintMismatch);
    }
    let trace = net.forward(x, nn::ForwardMode::Deterministic)?;
    let k = nn::argmax(trace.probs.view());
    let log_probs = trace
        .hidden
        .iter()
        .enumerate()
        .map(|(l, h)| model.cells[l][k].density.log_density(h.view()))
        .collect::<Result<Vec<_>>>()?;
    model.report_from_log_probs(k, log_probs)
}

/// Scores every row of `x` (latents computed in batches, densities in parallel).
pub fn score_batch(model: &UqModel, net: &Network, x: &Matrix) -> Result<Vec<ConfidenceReport>> {
    if &net.fingerprint() != model.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    let scored = BatchLogProbs::compute(net, x, |l, k| &model.cells[l][k].density)?;
    scored
        .predicted
        .iter()
        .zip(scored.log_probs)
        .map(|(&k, lp)| model.report_from_log_probs(k, lp))
        .collect()
}

/// Predictions and per-layer log-densities under the predicted class for a
/// batch of inputs.
pub struct BatchLogProbs {
    pub predicted: Vec<usize>,
    /// `log_probs[i][l]`
    pub log_probs: Vec<Vec<f64>>,
}

impl BatchLogProbs {
    pub fn compute<'a>(
        net: &Network,
        x: &Matrix,
        density: impl Fn(usize, usize) -> &'a GaussianDensity + Sync,
    ) -> Result<Self> {
        let (hidden, predicted) = nn::latents_and_predictions(net, x.view())?;
        let log_probs = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let k = predicted[i];
                hidden
                    .iter()
                    .enumerate()
                    .map(|(l, h)| density(l, k).log_density(h.row(i)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { predicted, log_probs })
    }

    pub fn from_densities(net: &Network, x: &Matrix, densities: &LatentDensities) -> Result<Self> {
        Self::compute(net, x, |l, k| densities.density(l, k))
    }
}

/// Accepts the prediction when its confidence is at least `threshold`, and
/// records the decision in the report.
pub fn accept(report: &mut ConfidenceReport, threshold: f64) -> bool {
    let ok = report.confidence >= threshold;
    report.accepted = Some(ok);
    ok
}

/// Per-layer fractions of a confidence set's own points whose smoothstep is
/// exactly 0 and exactly 1, pooled over classes.
pub fn self_calibration(model: &UqModel, densities: &LatentDensities) -> Vec<(f64, f64)> {
    (0..model.num_layers())
        .map(|l| {
            let (mut zeros, mut ones, mut total) = (0usize, 0usize, 0usize);
            for k in 0..model.num_classes() {
                let cell = model.cell(l, k);
                for &lp in densities.self_log_probs(l, k) {
                    let s = smoothstep_with(model.form, lp, cell.q_alpha, cell.q_beta)
                        .expect("calibrated thresholds are ordered");
                    zeros += usize::from(s == 0.0);
                    ones += usize::from(s == 1.0);
                    total += 1;
                }
            }
            (zeros as f64 / total as f64, ones as f64 / total as f64)
        })
        .collect()
}

/// Convenience for scoring a precomputed latent list (one vector per layer).
pub fn score_latents(model: &UqModel, predicted: usize, latents: &[Vector]) -> Result<ConfidenceReport> {
    let log_probs = latents
        .iter()
        .enumerate()
        .map(|(l, h)| model.cell(l, predicted).density.log_density(h.view()))
        .collect::<Result<Vec<_>>>()?;
    model.report_from_log_probs(predicted, log_probs)
}
