//! Dense feed-forward classifier with latent capture, inverted dropout and
//! Adam training.
//!
//! Samples are rows. Layer `l` maps `a_{l-1}` (n x in) to
//! `sigma(a_{l-1} W_l^T + b_l)` (n x out); the last layer is linear and
//! produces logits. Hidden-layer outputs are the latents used by
//! [`crate::latent_uq`].

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Rows per chunk when forwarding whole datasets.
const FORWARD_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            other => Err(Error::BadFormat(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    /// ReLU hidden layer.
    pub fn hidden(width: usize, dropout_rate: f64) -> Self {
        Self {
            width,
            activation: Activation::Relu,
            dropout_rate,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.width == 0 {
            return Err(Error::BadArchitecture(format!("layer {index} has zero width")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::BadArchitecture(format!(
                "layer {index} dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `width x fan_in`
    pub weights: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    seed: u64,
}

/// Scaled-uniform initialization with zero biases. `hidden` lists the hidden
/// layers; a linear output layer of width `num_classes` is appended.
pub fn init_network(input_dim: usize, hidden: &[LayerSpec], num_classes: usize, seed: u64) -> Result<Network> {
    if input_dim == 0 {
        return Err(Error::BadArchitecture("input dimension must be positive".into()));
    }
    if hidden.is_empty() {
        return Err(Error::BadArchitecture("at least one hidden layer is required".into()));
    }
    if num_classes < 2 {
        return Err(Error::BadArchitecture(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    for (i, spec) in hidden.iter().enumerate() {
        spec.validate(i)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let output = LayerSpec {
        width: num_classes,
        activation: Activation::Identity,
        dropout_rate: 0.0,
    };
    let mut fan_in = input_dim;
    let layers = hidden
        .iter()
        .chain(std::iter::once(&output))
        .map(|spec| {
            let bound = (6.0 / (fan_in + spec.width) as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((spec.width, fan_in), || rng.gen_range(-bound..bound));
            fan_in = spec.width;
            Layer {
                spec: *spec,
                weights,
                bias: Array1::zeros(spec.width),
            }
        })
        .collect();
    Ok(Network {
        input_dim,
        layers,
        seed,
    })
}

/// How hidden units are treated during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Deterministic,
    /// Inverted dropout with masks drawn from ChaCha stream `stream` of `seed`.
    Dropout { seed: u64, stream: u64 },
}

/// Latents, logits and class probabilities for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    /// Post-activation outputs of the hidden layers, in order.
    pub hidden: Vec<Vector>,
    pub logits: Vector,
    pub probs: Vector,
}

/// [`LatentTrace`] for a batch; one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub hidden: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Per-layer multiplicative masks (`0` or `1/(1-rate)`), `None` where the
/// layer has no dropout. Indexed like the hidden layers.
pub type Masks = Vec<Option<Matrix>>;

/// Gradients of the mean cross-entropy, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("network has layers").spec.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_layers(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden_layers().iter().map(|l| l.spec.width).collect()
    }

    pub fn has_dropout(&self) -> bool {
        self.hidden_layers().iter().any(|l| l.spec.dropout_rate > 0.0)
    }

    /// Compact architecture label such as `2x[1024]` or `[64,32]`.
    pub fn architecture_label(&self) -> String {
        architecture_label(&self.hidden_widths())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: d,
            });
        }
        Ok(())
    }

    /// Draws inverted-dropout masks for `rows` samples, row by row, layer by
    /// layer, unit by unit.
    pub fn sample_masks<R: Rng>(&self, rows: usize, rng: &mut R) -> Masks {
        let mut masks = self.empty_masks(rows);
        for r in 0..rows {
            self.fill_mask_row(&mut masks, r, rng);
        }
        masks
    }

    /// Zeroed mask buffers for `rows` samples.
    pub fn empty_masks(&self, rows: usize) -> Masks {
        self.hidden_layers()
            .iter()
            .map(|l| (l.spec.dropout_rate > 0.0).then(|| Array2::zeros((rows, l.spec.width))))
            .collect()
    }

    /// Draws the masks of one sample into row `row` of `masks`.
    pub fn fill_mask_row<R: Rng>(&self, masks: &mut Masks, row: usize, rng: &mut R) {
        for (layer, mask) in self.hidden_layers().iter().zip(masks.iter_mut()) {
            let Some(mask) = mask else { continue };
            let rate = layer.spec.dropout_rate;
            let keep = 1.0 / (1.0 - rate);
            for v in mask.row_mut(row).iter_mut() {
                *v = if rng.gen::<f64>() < rate { 0.0 } else { keep };
            }
        }
    }

    /// Forward pass over a batch. `masks` must come from [`Self::sample_masks`]
    /// with the same row count.
    pub fn forward_batch_masked(&self, x: ArrayView2<f64>, masks: Option<&Masks>) -> Result<BatchTrace> {
        self.check_dim(x.ncols())?;
        let cache = self.forward_cache(x, masks);
        let logits = cache.outputs.last().expect("output layer").clone();
        let probs = softmax_rows(&logits);
        let hidden = cache.outputs[..cache.outputs.len() - 1].to_vec();
        Ok(BatchTrace { hidden, logits, probs })
    }

    /// Deterministic forward pass over a batch.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<BatchTrace> {
        self.forward_batch_masked(x, None)
    }

    pub fn forward(&self, x: ArrayView1<f64>, mode: ForwardMode) -> Result<LatentTrace> {
        self.check_dim(x.len())?;
        let row = x.insert_axis(Axis(0));
        let masks = match mode {
            ForwardMode::Deterministic => None,
            ForwardMode::Dropout { seed, stream } => {
                let mut rng = dropout_rng(seed, stream);
                Some(self.sample_masks(1, &mut rng))
            }
        };
        let t = self.forward_batch_masked(row, masks.as_ref())?;
        Ok(LatentTrace {
            hidden: t.hidden.into_iter().map(|h| h.row(0).to_owned()).collect(),
            logits: t.logits.row(0).to_owned(),
            probs: t.probs.row(0).to_owned(),
        })
    }

    /// Deterministic class prediction; ties go to the lowest label.
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize> {
        let t = self.forward(x, ForwardMode::Deterministic)?;
        Ok(argmax(t.probs.view()))
    }

    /// Deterministic predictions for every row, computed in chunks.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.check_dim(x.ncols())?;
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), FORWARD_CHUNK) {
            let cache = self.forward_cache(chunk, None);
            let logits = cache.outputs.last().expect("output layer");
            out.extend(softmax_rows(logits).axis_iter(Axis(0)).map(argmax));
        }
        Ok(out)
    }

    /// Fraction of `data` classified correctly in deterministic mode.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pred = self.predict_batch(data.features().view())?;
        let correct = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / data.len() as f64)
    }

    fn forward_cache(&self, x: ArrayView2<f64>, masks: Option<&Masks>) -> ForwardCache {
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut outputs: Vec<Matrix> = Vec::with_capacity(n_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = if l == 0 {
                x.dot(&layer.weights.t())
            } else {
                outputs[l - 1].dot(&layer.weights.t())
            };
            z += &layer.bias;
            let mut a = match layer.spec.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            if l + 1 < n_layers {
                if let Some(Some(mask)) = masks.map(|m| &m[l]) {
                    a *= mask;
                }
            }
            pre.push(z);
            outputs.push(a);
        }
        ForwardCache { pre, outputs }
    }

    /// Mean softmax cross-entropy of a batch and its gradients.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        masks: Option<&Masks>,
    ) -> Result<(f64, Gradients)> {
        self.check_dim(x.ncols())?;
        let n = x.nrows();
        if n == 0 || labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::BadParameter(format!("label {bad} out of range for {k} outputs")));
        }
        let cache = self.forward_cache(x, masks);
        let logits = cache.outputs.last().expect("output layer");
        let (loss, mut delta) = cross_entropy_and_delta(logits, labels);

        let n_layers = self.layers.len();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            gw[l] = if l == 0 {
                delta.t().dot(&x)
            } else {
                delta.t().dot(&cache.outputs[l - 1])
            };
            gb[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut da = delta.dot(&self.layers[l].weights);
            if let Some(Some(mask)) = masks.map(|m| &m[l - 1]) {
                da *= mask;
            }
            if self.layers[l - 1].spec.activation == Activation::Relu {
                Zip::from(&mut da)
                    .and(&cache.pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            delta = da;
        }
        Ok((loss, Gradients { weights: gw, biases: gb }))
    }

    /// Mean cross-entropy in deterministic mode.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        self.check_dim(x.ncols())?;
        let cache = self.forward_cache(x, None);
        Ok(cross_entropy_and_delta(cache.outputs.last().expect("output layer"), labels).0)
    }

    /// Little-endian binary model file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            b.extend_from_slice(&(layer.spec.width as u32).to_le_bytes());
            b.push(layer.spec.activation.code());
            b.extend_from_slice(&layer.spec.dropout_rate.to_le_bytes());
            for v in layer.weights.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.bias.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&self.seed.to_le_bytes());
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::BadFormat("not a network file (bad magic)".into()));
        }
        let mut r = ByteReader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        check_crc(bytes)?;
        let input_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        if n_layers < 2 {
            return Err(Error::BadFormat(format!("network has {n_layers} layers")));
        }
        let mut fan_in = input_dim;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let width = r.u32()? as usize;
            let activation = Activation::from_code(r.u8()?)?;
            let dropout_rate = r.f64()?;
            let weights = Array2::from_shape_vec((width, fan_in), r.f64s(width * fan_in)?)
                .expect("length matches shape");
            let bias = Array1::from(r.f64s(width)?);
            layers.push(Layer {
                spec: LayerSpec {
                    width,
                    activation,
                    dropout_rate,
                },
                weights,
                bias,
            });
            fan_in = width;
        }
        let seed = r.u64()?;
        if r.remaining() != 4 {
            return Err(Error::BadFormat("unexpected trailing bytes".into()));
        }
        let net = Network {
            input_dim,
            layers,
            seed,
        };
        for (i, l) in net.layers.iter().enumerate() {
            l.spec.validate(i).map_err(|e| Error::BadFormat(e.to_string()))?;
        }
        if net.layers.last().expect("n_layers >= 2").spec.activation != Activation::Identity {
            return Err(Error::BadFormat("output layer must be linear".into()));
        }
        Ok(net)
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

pub(crate) const MODEL_MAGIC: &[u8; 4] = b"LCN1";
pub(crate) const MODEL_VERSION: u32 = 1;

pub fn save_network<W: Write>(net: &Network, mut sink: W) -> Result<()> {
    sink.write_all(&net.to_bytes())?;
    Ok(())
}

pub fn load_network<R: Read>(mut source: R) -> Result<Network> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    Network::from_bytes(&bytes)
}

pub fn architecture_label(widths: &[usize]) -> String {
    match widths {
        [first, rest @ ..] if rest.iter().all(|w| w == first) => format!("{}x[{}]", widths.len(), first),
        _ => format!(
            "[{}]",
            widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        ),
    }
}

/// ChaCha stream used for dropout masks.
pub fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct ForwardCache {
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: ArrayView1<f64>) -> Vector {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = softmax(row.view());
        row.assign(&p);
    }
    out
}

/// Mean cross-entropy and `d loss / d logits`.
fn cross_entropy_and_delta(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.nrows() as f64;
    let mut delta = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp() / n);
        row[y] -= 1.0 / n;
    }
    (loss / n, delta)
}

pub(crate) fn check_crc(bytes: &[u8]) -> Result<()> {
    if bytes.len() < 8 {
        return Err(Error::BadFormat("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::BadFormat("CRC32 mismatch".into()));
    }
    Ok(())
}

pub(crate) use self::bytes::ByteReader;

mod bytes {
    use crate::error::{Error, Result};

    pub(crate) struct ByteReader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> ByteReader<'a> {
        pub(crate) fn new(buf: &'a [u8]) -> Self {
            Self { buf, pos: 0 }
        }

        pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.buf.len())
                .ok_or_else(|| Error::BadFormat("unexpected end of file".into()))?;
            let s = &self.buf[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        pub(crate) fn remaining(&self) -> usize {
            self.buf.len() - self.pos
        }

        pub(crate) fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        pub(crate) fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        pub(crate) fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        pub(crate) fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::BadFormat("size overflow".into()))?)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches (dropout active).
    pub loss: f64,
    /// Deterministic-mode training-set accuracy after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    pub history: Vec<EpochRecord>,
}

impl Trained {
    pub fn stopped_early(&self, hp: &TrainParams) -> bool {
        self.history
            .last()
            .is_some_and(|r| r.accuracy >= hp.early_stop_accuracy)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter.
pub struct Adam {
    lr: f64,
    step: i32,
    m_w: Vec<Matrix>,
    v_w: Vec<Matrix>,
    m_b: Vec<Vector>,
    v_b: Vec<Vector>,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        let zw = |l: &Layer| Array2::zeros(l.weights.raw_dim());
        let zb = |l: &Layer| Array1::zeros(l.bias.len());
        Self {
            lr,
            step: 0,
            m_w: net.layers.iter().map(zw).collect(),
            v_w: net.layers.iter().map(zw).collect(),
            m_b: net.layers.iter().map(zb).collect(),
            v_b: net.layers.iter().map(zb).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.weights)
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

/// Minibatch Adam on softmax cross-entropy with dropout on hidden outputs.
/// Stops once deterministic training accuracy reaches
/// `early_stop_accuracy`, or after `max_epochs`.
pub fn train(mut net: Network, data: &Dataset, hp: &TrainParams) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.check_dim(data.dim())?;
    if hp.batch_size == 0 {
        return Err(Error::BadParameter("batch_size must be at least 1".into()));
    }
    if !(hp.learning_rate > 0.0) {
        return Err(Error::BadParameter("learning_rate must be positive".into()));
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::BadParameter(format!(
            "dataset has {} classes but the network has {} outputs",
            data.num_classes(),
            net.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = Adam::new(&net, hp.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let x = data.features().select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let masks = net.sample_masks(batch.len(), &mut rng);
            let (loss, grads) = net.loss_and_gradients(x.view(), &y, Some(&masks))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut net, &grads);
        }
        let loss = total / data.len() as f64;
        let accuracy = net.accuracy(data)?;
        log::info!("epoch {epoch}: loss {loss:.5}, train accuracy {accuracy:.4}");
        history.push(EpochRecord { epoch, loss, accuracy });
        if accuracy >= hp.early_stop_accuracy {
            break;
        }
    }
    Ok(Trained { network: net, history })
}

/// Hidden-layer latents of every row in deterministic mode, plus predictions.
pub fn latents_and_predictions(net: &Network, x: ArrayView2<f64>) -> Result<(Vec<Matrix>, Vec<usize>)> {
    net.check_dim(x.ncols())?;
    let n = x.nrows();
    let mut hidden: Vec<Matrix> = net
        .hidden_widths()
        .iter()
        .map(|&w| Array2::zeros((n, w)))
        .collect();
    let mut pred = Vec::with_capacity(n);
    for (c, chunk) in x.axis_chunks_iter(Axis(0), FORWARD_CHUNK).enumerate() {
        let start = c * FORWARD_CHUNK;
        let cache = net.forward_cache(chunk, None);
        for (dst, src) in hidden.iter_mut().zip(&cache.outputs) {
            dst.slice_mut(s![start..start + chunk.nrows(), ..]).assign(src);
        }
        let logits = cache.outputs.last().expect("output layer");
        pred.extend(softmax_rows(logits).axis_iter(Axis(0)).map(argmax));
    }
    Ok((hidden, pred))
}
