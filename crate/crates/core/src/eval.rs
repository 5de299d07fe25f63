//! Acceptance metrics (TP / TN / TN-OOD), confidence histograms and the
//! leave-one-label-out experiment driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Ensemble, VoteResult};
use crate::config::{DataSource, RunConfig};
use crate::dataio::{self, Dataset, OodSplit, SplitCounts};
use crate::error::{Error, Result};
use crate::latent_uq::{build_confidence_sets, BatchLogProbs, LatentDensities};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "in")]
    InDistribution,
    #[serde(rename = "ood")]
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    /// Required for in-distribution samples; optional for OOD samples.
    pub true_label: Option<usize>,
    pub predicted_label: usize,
    pub confidence: f64,
    pub group: Group,
}

impl ScoredSample {
    pub fn in_dist(true_label: usize, predicted_label: usize, confidence: f64) -> Self {
        Self {
            true_label: Some(true_label),
            predicted_label,
            confidence,
            group: Group::InDistribution,
        }
    }

    pub fn ood(true_label: Option<usize>, predicted_label: usize, confidence: f64) -> Self {
        Self {
            true_label,
            predicted_label,
            confidence,
            group: Group::Ood,
        }
    }

    fn category(&self) -> Category {
        match self.group {
            Group::Ood => Category::Ood,
            Group::InDistribution if self.true_label == Some(self.predicted_label) => Category::Well,
            Group::InDistribution => Category::Mis,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Well,
    Mis,
    Ood,
}

/// Scored predictions; every confidence is finite and in `[0, 1]` and every
/// in-distribution sample carries its true label.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoredSet {
    samples: Vec<ScoredSample>,
}

impl ScoredSet {
    pub fn new(samples: Vec<ScoredSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.confidence) {
                return Err(Error::BadParameter(format!(
                    "sample {i}: confidence {} outside [0, 1]",
                    s.confidence
                )));
            }
            if s.group == Group::InDistribution && s.true_label.is_none() {
                return Err(Error::BadParameter(format!(
                    "sample {i}: in-distribution samples need a true label"
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[ScoredSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: ScoredSet) {
        self.samples.extend(other.samples);
    }

    /// CSV with header `true_label,predicted_label,confidence,group`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        for s in &self.samples {
            w.serialize(s).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(source);
        let samples = r
            .deserialize()
            .collect::<std::result::Result<Vec<ScoredSample>, _>>()
            .map_err(csv_err)?;
        Self::new(samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::BadFormat(format!("csv: {e}"))
}

/// Rates at one threshold. A rate is `None` when its group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub threshold: f64,
    pub tp_rate: Option<f64>,
    pub tn_rate: Option<f64>,
    pub tn_ood_rate: Option<f64>,
    pub well_classified: usize,
    pub misclassified: usize,
    pub ood: usize,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub true_negatives_ood: usize,
}

fn rate(count: usize, of: usize) -> Option<f64> {
    (of > 0).then(|| count as f64 / of as f64)
}

/// TP: well-classified in-distribution samples with confidence >= `threshold`.
/// TN: misclassified in-distribution samples with confidence < `threshold`.
/// TN-OOD: OOD samples with confidence < `threshold`.
pub fn evaluate(scored: &ScoredSet, threshold: f64) -> Result<Metrics> {
    if scored.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::BadParameter(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut m = Metrics {
        threshold,
        tp_rate: None,
        tn_rate: None,
        tn_ood_rate: None,
        well_classified: 0,
        misclassified: 0,
        ood: 0,
        true_positives: 0,
        true_negatives: 0,
        true_negatives_ood: 0,
    };
    for s in &scored.samples {
        let accepted = s.confidence >= threshold;
        match s.category() {
            Category::Well => {
                m.well_classified += 1;
                m.true_positives += usize::from(accepted);
            }
            Category::Mis => {
                m.misclassified += 1;
                m.true_negatives += usize::from(!accepted);
            }
            Category::Ood => {
                m.ood += 1;
                m.true_negatives_ood += usize::from(!accepted);
            }
        }
    }
    m.tp_rate = rate(m.true_positives, m.well_classified);
    m.tn_rate = rate(m.true_negatives, m.misclassified);
    m.tn_ood_rate = rate(m.true_negatives_ood, m.ood);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramTable {
    pub edges: Vec<f64>,
    pub well_classified: Vec<usize>,
    pub misclassified: Vec<usize>,
    pub ood: Vec<usize>,
}

/// Counts per uniform bin on `[0, 1]`; bins are `[lo, hi)` except the last,
/// which also holds 1.0.
pub fn export_histogram(scored: &ScoredSet, bins: usize) -> HistogramTable {
    let bins = bins.max(1);
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut t = HistogramTable {
        edges,
        well_classified: vec![0; bins],
        misclassified: vec![0; bins],
        ood: vec![0; bins],
    };
    for s in &scored.samples {
        let b = ((s.confidence * bins as f64).floor() as usize).min(bins - 1);
        match s.category() {
            Category::Well => t.well_classified[b] += 1,
            Category::Mis => t.misclassified[b] += 1,
            Category::Ood => t.ood[b] += 1,
        }
    }
    t
}

impl HistogramTable {
    pub fn bins(&self) -> usize {
        self.well_classified.len()
    }

    /// CSV with header `bin_low,bin_high,well_classified,misclassified,ood`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,well_classified,misclassified,ood\n");
        for b in 0..self.bins() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.edges[b],
                self.edges[b + 1],
                self.well_classified[b],
                self.misclassified[b],
                self.ood[b]
            ));
        }
        out
    }
}

/// Mean and sample standard deviation over the held-out-label runs where a
/// rate was defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                runs: 0,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self {
            mean: Some(mean),
            std,
            runs: n,
        }
    }
}

/// One method/configuration evaluated in the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// `inference-<pair>`, `mc-dropout` or `ensemble`.
    pub name: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub final_train_accuracy: f64,
    pub reached_early_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRun {
    pub held_out_label: usize,
    pub counts: SplitCounts,
    pub training: TrainingSummary,
    pub ensemble_training: Vec<TrainingSummary>,
    /// Metrics per method, in the order of [`ExperimentResult::methods`].
    pub metrics: Vec<Metrics>,
    #[serde(skip)]
    pub scores: Vec<ScoredSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: MethodSpec,
    pub tp: Summary,
    pub tn: Summary,
    pub tn_ood: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub architecture: String,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub activation: nn::Activation,
    pub training: nn::TrainParams,
    pub early_stop_measured_on: &'static str,
    pub latents: &'static str,
    pub config: RunConfig,
    pub split_counts: Vec<SplitCounts>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub methods: Vec<MethodSpec>,
    pub runs: Vec<LabelRun>,
    pub aggregates: Vec<Aggregate>,
    pub metadata: RunMetadata,
}

impl ExperimentResult {
    /// Results without wall-clock timing, for reproducibility checks.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.methods == other.methods && self.runs == other.runs && self.aggregates == other.aggregates
    }

    pub fn aggregate(&self, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method.name == method)
    }

    /// Scores of one method pooled over all held-out labels.
    pub fn pooled_scores(&self, method_index: usize) -> ScoredSet {
        let mut out = ScoredSet::default();
        for run in &self.runs {
            out.extend(run.scores[method_index].clone());
        }
        out
    }

    /// One row per method:
    /// `method,architecture,dropout,alpha,beta,threshold,tp_mean,tp_std,tn_mean,tn_std,tnood_mean,tnood_std`.
    pub fn results_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from(
            "method,architecture,dropout,alpha,beta,threshold,tp_mean,tp_std,tn_mean,tn_std,tnood_mean,tnood_std\n",
        );
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                a.method.name,
                self.metadata.architecture,
                self.metadata.dropout,
                opt(a.method.alpha),
                opt(a.method.beta),
                a.method.threshold,
                opt(a.tp.mean),
                opt(a.tp.std),
                opt(a.tn.mean),
                opt(a.tn.std),
                opt(a.tn_ood.mean),
                opt(a.tn_ood.std),
            ));
        }
        out
    }

    /// Writes `results.csv`, `metadata.json`, `per_label.json`,
    /// `histograms/<method>.csv` and `scores/label<h>_<method>.csv` into `dir`.
    pub fn write_outputs(&self, dir: &Path, bins: usize) -> Result<()> {
        let write = |path: &Path, bytes: &[u8]| fs::write(path, bytes).map_err(|e| Error::io(path, e));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("results.csv"), self.results_csv().as_bytes())?;
        write(&dir.join("metadata.json"), &serde_json::to_vec_pretty(&self.metadata)?)?;
        let per_label = serde_json::json!({
            "methods": self.methods,
            "runs": self.runs,
            "aggregates": self.aggregates,
        });
        write(&dir.join("per_label.json"), &serde_json::to_vec_pretty(&per_label)?)?;
        let hist_dir = dir.join("histograms");
        let score_dir = dir.join("scores");
        fs::create_dir_all(&hist_dir).map_err(|e| Error::io(&hist_dir, e))?;
        fs::create_dir_all(&score_dir).map_err(|e| Error::io(&score_dir, e))?;
        for (i, m) in self.methods.iter().enumerate() {
            let pooled = self.pooled_scores(i);
            let table = export_histogram(&pooled, bins);
            write(&hist_dir.join(format!("{}.csv", m.name)), table.to_csv().as_bytes())?;
            for run in &self.runs {
                let path = score_dir.join(format!("label{}_{}.csv", run.held_out_label, m.name));
                run.scores[i].save(&path)?;
            }
        }
        Ok(())
    }
}

/// Loads the train/test pair described by `cfg.data`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Idx => {
            let p = |v: &Option<std::path::PathBuf>| v.clone().expect("validated");
            let train = Dataset::from_idx_files(p(&d.train_images), p(&d.train_labels))?;
            let test = Dataset::from_idx_files(p(&d.test_images), p(&d.test_labels))?;
            let k = train.num_classes().max(test.num_classes());
            let widen = |ds: Dataset| Dataset::new(ds.features().clone(), ds.labels().to_vec(), k);
            Ok((widen(train)?, widen(test)?))
        }
        DataSource::Blobs => dataio::synth_blobs_split(
            d.num_classes.expect("validated"),
            d.dim.expect("validated"),
            d.train_per_class.expect("validated"),
            d.test_per_class.expect("validated"),
            d.separation.expect("validated"),
            d.seed.expect("validated"),
        ),
    }
}

/// Methods requested by `cfg`, in reporting order.
pub fn method_specs(cfg: &RunConfig) -> Vec<MethodSpec> {
    let mut out = Vec::new();
    if let Some(inf) = &cfg.inference {
        for (i, p) in inf.percentiles.iter().enumerate() {
            out.push(MethodSpec {
                name: format!("inference-{}", inf.pair_name(i)),
                alpha: Some(p.alpha),
                beta: Some(p.beta),
                threshold: inf.threshold,
            });
        }
    }
    if let Some(mc) = &cfg.mc_dropout {
        out.push(MethodSpec {
            name: "mc-dropout".into(),
            alpha: None,
            beta: None,
            threshold: mc.threshold,
        });
    }
    if let Some(ens) = &cfg.ensemble {
        out.push(MethodSpec {
            name: "ensemble".into(),
            alpha: None,
            beta: None,
            threshold: ens.threshold,
        });
    }
    out
}

/// Loads the configured data and runs every held-out label.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    let (train, test) = load_data(cfg)?;
    run_experiment_on(cfg, &train, &test)
}

/// Runs the leave-one-label-out protocol on in-memory data.
pub fn run_experiment_on(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let labels: Vec<usize> = cfg
        .data
        .held_out_labels
        .clone()
        .unwrap_or_else(|| (0..train.num_classes()).collect());
    let methods = method_specs(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::BadParameter(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        labels
            .par_iter()
            .map(|&h| run_label(cfg, train, test, h))
            .collect::<Result<Vec<_>>>()
    })?;

    let aggregates = methods
        .iter()
        .enumerate()
        .map(|(i, m)| Aggregate {
            method: m.clone(),
            tp: Summary::of(runs.iter().map(|r| r.metrics[i].tp_rate)),
            tn: Summary::of(runs.iter().map(|r| r.metrics[i].tn_rate)),
            tn_ood: Summary::of(runs.iter().map(|r| r.metrics[i].tn_ood_rate)),
        })
        .collect();
    let metadata = RunMetadata {
        architecture: nn::architecture_label(&cfg.network.hidden),
        hidden: cfg.network.hidden.clone(),
        dropout: cfg.network.dropout,
        activation: cfg.network.activation,
        training: cfg.training.params(),
        early_stop_measured_on: "training set (deterministic forward pass)",
        latents: "post-activation hidden-layer outputs",
        config: cfg.clone(),
        split_counts: runs.iter().map(|r| r.counts.clone()).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentResult {
        methods,
        runs,
        aggregates,
        metadata,
    })
}

fn summarize(t: &nn::Trained, hp: &nn::TrainParams) -> TrainingSummary {
    TrainingSummary {
        epochs: t.history.len(),
        final_train_accuracy: t.history.last().map_or(0.0, |r| r.accuracy),
        reached_early_stop: t.stopped_early(hp),
    }
}

fn votes_to_scored(split: &OodSplit, in_votes: &[VoteResult], ood_votes: &[VoteResult]) -> Result<ScoredSet> {
    let mut samples: Vec<ScoredSample> = split
        .test_in
        .labels()
        .iter()
        .zip(in_votes)
        .map(|(&y, v)| ScoredSample::in_dist(y, v.predicted_label, v.confidence))
        .collect();
    samples.extend(
        split
            .test_ood
            .labels()
            .iter()
            .zip(ood_votes)
            .map(|(&y, v)| ScoredSample::ood(Some(y), v.predicted_label, v.confidence)),
    );
    ScoredSet::new(samples)
}

fn run_label(cfg: &RunConfig, train: &Dataset, test: &Dataset, held_out: usize) -> Result<LabelRun> {
    let ctx = |method: &str| {
        let method = method.to_string();
        move |e: Error| Error::Run {
            label: held_out,
            method: method.clone(),
            source: Box::new(e),
        }
    };
    let split = dataio::make_ood_split(train, test, held_out).map_err(ctx("split"))?;
    let k = split.train.num_classes();
    let specs = cfg.network.layer_specs();
    let hp = cfg.training.params();
    log::info!(
        "held-out label {held_out}: training {} on {} samples",
        nn::architecture_label(&cfg.network.hidden),
        split.train.len()
    );
    let trained = baselines::train_member(split.train.dim(), &specs, k, &split.train, &hp, hp.seed)
        .map_err(ctx("training"))?;
    let training = summarize(&trained, &hp);
    let net = trained.network;
    let out_dir = cfg.run.output_dir.join("models").join(format!("label{held_out}"));
    if cfg.run.save_models {
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let path = out_dir.join("network.lcn");
        fs::write(&path, net.to_bytes()).map_err(|e| Error::io(&path, e))?;
    }

    let mut metrics = Vec::new();
    let mut scores = Vec::new();

    if let Some(inf) = &cfg.inference {
        let e = ctx("inference");
        let sets = build_confidence_sets(&net, &split.train).map_err(&e)?;
        let dens = LatentDensities::fit(&sets, inf.ridge_scale).map_err(&e)?;
        drop(sets);
        let in_lp = BatchLogProbs::from_densities(&net, split.test_in.features(), &dens).map_err(&e)?;
        let ood_lp = BatchLogProbs::from_densities(&net, split.test_ood.features(), &dens).map_err(&e)?;
        let fp = net.fingerprint();
        for (i, p) in inf.percentiles.iter().enumerate() {
            let model = dens
                .calibrate(p.alpha, p.beta, fp)
                .map_err(&e)?
                .with_smoothstep_form(inf.smoothstep);
            if cfg.run.save_models {
                let path = out_dir.join(format!("uq-{}.luq", inf.pair_name(i)));
                fs::write(&path, model.to_bytes()).map_err(|err| Error::io(&path, err))?;
            }
            let mut samples = Vec::with_capacity(split.test_in.len() + split.test_ood.len());
            for ((&y, &pred), lp) in split.test_in.labels().iter().zip(&in_lp.predicted).zip(&in_lp.log_probs) {
                let r = model.report_from_log_probs(pred, lp.clone()).map_err(&e)?;
                samples.push(ScoredSample::in_dist(y, pred, r.confidence));
            }
            for ((&y, &pred), lp) in split.test_ood.labels().iter().zip(&ood_lp.predicted).zip(&ood_lp.log_probs) {
                let r = model.report_from_log_probs(pred, lp.clone()).map_err(&e)?;
                samples.push(ScoredSample::ood(Some(y), pred, r.confidence));
            }
            let set = ScoredSet::new(samples).map_err(&e)?;
            metrics.push(evaluate(&set, inf.threshold).map_err(&e)?);
            scores.push(set);
        }
    }

    if let Some(mc) = &cfg.mc_dropout {
        let e = ctx("mc-dropout");
        log::info!("held-out label {held_out}: {} MC-dropout passes", mc.passes);
        let in_votes = baselines::mc_dropout_score_batch(&net, split.test_in.features(), mc.passes, mc.seed)
            .map_err(&e)?;
        let ood_votes = baselines::mc_dropout_score_batch(
            &net,
            split.test_ood.features(),
            mc.passes,
            mc.seed ^ 0x5EED_0000_0000_0001,
        )
        .map_err(&e)?;
        let set = votes_to_scored(&split, &in_votes, &ood_votes).map_err(&e)?;
        metrics.push(evaluate(&set, mc.threshold).map_err(&e)?);
        scores.push(set);
    }

    let mut ensemble_training = Vec::new();
    if let Some(ens_cfg) = &cfg.ensemble {
        let e = ctx("ensemble");
        let mut members = Vec::with_capacity(ens_cfg.members);
        for i in 0..ens_cfg.members {
            let seed = ens_cfg.base_seed + i as u64;
            // A member with the primary network's seed would be retrained identically.
            if seed == hp.seed {
                members.push(net.clone());
                ensemble_training.push(training.clone());
                continue;
            }
            log::info!("held-out label {held_out}: ensemble member {i} (seed {seed})");
            let t = baselines::train_member(split.train.dim(), &specs, k, &split.train, &hp, seed)
                .map_err(|err| Error::Member {
                    member: i,
                    source: Box::new(err),
                })
                .map_err(&e)?;
            ensemble_training.push(summarize(&t, &hp));
            members.push(t.network);
        }
        let ens = Ensemble::from_members(members).map_err(&e)?;
        if cfg.run.save_models {
            ens.save_dir(&out_dir.join("ensemble")).map_err(&e)?;
        }
        let in_votes = baselines::ensemble_score_batch(&ens, split.test_in.features()).map_err(&e)?;
        let ood_votes = baselines::ensemble_score_batch(&ens, split.test_ood.features()).map_err(&e)?;
        let set = votes_to_scored(&split, &in_votes, &ood_votes).map_err(&e)?;
        metrics.push(evaluate(&set, ens_cfg.threshold).map_err(&e)?);
        scores.push(set);
    }

    Ok(LabelRun {
        held_out_label: held_out,
        counts: split.counts(),
        training,
        ensemble_training,
        metrics,
        scores,
    })
}

/// Per-label metric table, keyed by method name, for quick inspection.
pub fn metrics_by_method(result: &ExperimentResult) -> BTreeMap<String, Vec<Metrics>> {
    result
        .methods
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.clone(), result.runs.iter().map(|r| r.metrics[i].clone()).collect()))
        .collect()
}
