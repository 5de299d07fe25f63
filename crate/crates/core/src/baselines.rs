//! MC-dropout and deep-ensemble baselines. Both report the modal predicted
//! label and the fraction of votes it received.

use std::fs;
use std::path::Path;

use ndarray::{ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, init_network, ForwardMode, LayerSpec, Network, TrainParams};

const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteResult {
    pub predicted_label: usize,
    /// Votes for the modal label over all votes.
    pub confidence: f64,
    pub histogram: Vec<usize>,
}

impl VoteResult {
    /// Modal label (lowest index on ties) and its vote fraction.
    pub fn from_histogram(histogram: Vec<usize>) -> Self {
        let total: usize = histogram.iter().sum();
        let mut best = 0;
        for (i, &c) in histogram.iter().enumerate() {
            if c > histogram[best] {
                best = i;
            }
        }
        let confidence = if total == 0 {
            0.0
        } else {
            histogram[best] as f64 / total as f64
        };
        Self {
            predicted_label: best,
            confidence,
            histogram,
        }
    }

    pub fn from_votes(votes: impl IntoIterator<Item = usize>, num_classes: usize) -> Self {
        let mut histogram = vec![0; num_classes];
        for v in votes {
            histogram[v] += 1;
        }
        Self::from_histogram(histogram)
    }

    pub fn total_votes(&self) -> usize {
        self.histogram.iter().sum()
    }
}

/// `passes` stochastic forward passes; pass `t` draws its masks from ChaCha
/// stream `t` of `seed`.
pub fn mc_dropout_score(net: &Network, x: ArrayView1<f64>, passes: usize, seed: u64) -> Result<VoteResult> {
    if passes == 0 {
        return Err(Error::BadParameter("passes must be at least 1".into()));
    }
    let votes = (0..passes)
        .map(|t| {
            let trace = net.forward(x, ForwardMode::Dropout { seed, stream: t as u64 })?;
            Ok(nn::argmax(trace.probs.view()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoteResult::from_votes(votes, net.num_classes()))
}

/// Seed used for row `index` by [`mc_dropout_score_batch`].
pub fn row_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// MC-dropout votes for every row of `x`. Row `i` uses the masks that
/// [`mc_dropout_score`] would draw with seed `row_seed(seed, i)`, so results
/// do not depend on chunking or thread count.
pub fn mc_dropout_score_batch(net: &Network, x: &Matrix, passes: usize, seed: u64) -> Result<Vec<VoteResult>> {
    if passes == 0 {
        return Err(Error::BadParameter("passes must be at least 1".into()));
    }
    if x.ncols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            actual: x.ncols(),
        });
    }
    let k = net.num_classes();
    let chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).enumerate().collect();
    let results = chunks
        .into_par_iter()
        .map(|(c, chunk)| {
            let rows = chunk.nrows();
            let mut hist = vec![vec![0usize; k]; rows];
            for t in 0..passes {
                let mut masks = net.empty_masks(rows);
                for r in 0..rows {
                    let mut rng = nn::dropout_rng(row_seed(seed, c * CHUNK + r), t as u64);
                    net.fill_mask_row(&mut masks, r, &mut rng);
                }
                let trace = net.forward_batch_masked(chunk, Some(&masks))?;
                for (r, p) in trace.probs.axis_iter(Axis(0)).enumerate() {
                    hist[r][nn::argmax(p)] += 1;
                }
            }
            Ok(hist.into_iter().map(VoteResult::from_histogram).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Identically configured networks trained from distinct seeds.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Network>,
    seeds: Vec<u64>,
}

impl Ensemble {
    pub fn from_members(members: Vec<Network>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::BadParameter(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let first = &members[0];
        for (i, m) in members.iter().enumerate().skip(1) {
            let same_shape = m.input_dim() == first.input_dim()
                && m.num_classes() == first.num_classes()
                && m.hidden_widths() == first.hidden_widths();
            if !same_shape {
                return Err(Error::BadArchitecture(format!(
                    "member {i} does not share the architecture of member 0"
                )));
            }
        }
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                if members[i].seed() == members[j].seed() || members[i] == members[j] {
                    return Err(Error::BadSeeds {
                        first: i,
                        second: j,
                        seed: members[i].seed(),
                    });
                }
            }
        }
        let seeds = members.iter().map(Network::seed).collect();
        Ok(Self { members, seeds })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Writes `member_NN.lcn` files and `manifest.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member_{i:02}.lcn");
            let path = dir.join(&file);
            fs::write(&path, m.to_bytes()).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                file,
                seed: m.seed(),
                fingerprint: hex(&m.fingerprint()),
            });
        }
        let manifest = EnsembleManifest {
            member_count: entries.len(),
            members: entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: EnsembleManifest = serde_json::from_slice(&text)?;
        if manifest.member_count != manifest.members.len() {
            return Err(Error::BadFormat("manifest member count disagrees with entries".into()));
        }
        let members = manifest
            .members
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
                let net = Network::from_bytes(&bytes)?;
                if net.seed() != e.seed || hex(&net.fingerprint()) != e.fingerprint {
                    return Err(Error::BadFormat(format!("{} does not match the manifest", e.file)));
                }
                Ok(net)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleManifest {
    member_count: usize,
    members: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
    fingerprint: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Initializes and trains one member: both the weight initialization and
/// the minibatch/dropout stream use `seed`.
pub fn train_member(
    input_dim: usize,
    hidden: &[LayerSpec],
    num_classes: usize,
    data: &Dataset,
    hp: &TrainParams,
    seed: u64,
) -> Result<nn::Trained> {
    let net = init_network(input_dim, hidden, num_classes, seed)?;
    nn::train(net, data, &TrainParams { seed, ..*hp })
}

/// Trains `members` networks with seeds `base_seed..base_seed + members`.
pub fn train_ensemble(
    input_dim: usize,
    hidden: &[LayerSpec],
    num_classes: usize,
    data: &Dataset,
    hp: &TrainParams,
    members: usize,
    base_seed: u64,
) -> Result<Ensemble> {
    if members < 2 {
        return Err(Error::BadParameter(format!(
            "an ensemble needs at least 2 members, got {members}"
        )));
    }
    let nets = (0..members)
        .into_par_iter()
        .map(|i| {
            train_member(input_dim, hidden, num_classes, data, hp, base_seed.wrapping_add(i as u64))
                .map(|t| t.network)
                .map_err(|e| Error::Member {
                    member: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_members(nets)
}

/// One deterministic vote per member.
pub fn ensemble_score(ens: &Ensemble, x: ArrayView1<f64>) -> Result<VoteResult> {
    let votes = ens
        .members
        .iter()
        .map(|m| m.predict(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(VoteResult::from_votes(votes, ens.members[0].num_classes()))
}

pub fn ensemble_score_batch(ens: &Ensemble, x: &Matrix) -> Result<Vec<VoteResult>> {
    let preds = ens
        .members
        .par_iter()
        .map(|m| m.predict_batch(x.view()))
        .collect::<Result<Vec<_>>>()?;
    let k = ens.members[0].num_classes();
    Ok((0..x.nrows())
        .map(|i| VoteResult::from_votes(preds.iter().map(|p| p[i]), k))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn vote_fraction_and_tie_break() {
        let v = VoteResult::from_votes([1, 1, 1, 1, 1, 1, 0, 0, 0, 0], 3);
        assert_eq!(v.predicted_label, 1);
        assert_eq!(v.confidence, 0.6);
        let v = VoteResult::from_votes([7, 2, 7, 2, 7, 2, 7, 2, 7, 2], 10);
        assert_eq!(v.predicted_label, 2);
        assert_eq!(v.confidence, 0.5);
        assert_eq!(v.total_votes(), 10);
    }

    #[test]
    fn mc_dropout_without_dropout_is_unanimous() {
        let net = init_network(3, &[LayerSpec::hidden(8, 0.0)], 4, 1).unwrap();
        let v = mc_dropout_score(&net, array![0.1, 0.5, 0.9].view(), 25, 3).unwrap();
        assert_eq!(v.confidence, 1.0);
        assert_eq!(v.total_votes(), 25);
    }

    #[test]
    fn mc_dropout_is_seeded_and_granular() {
        let net = init_network(3, &[LayerSpec::hidden(16, 0.5), LayerSpec::hidden(16, 0.5)], 4, 1).unwrap();
        let x = array![0.1, 0.5, 0.9];
        let a = mc_dropout_score(&net, x.view(), 100, 9).unwrap();
        let b = mc_dropout_score(&net, x.view(), 100, 9).unwrap();
        assert_eq!(a, b);
        let scaled = a.confidence * 100.0;
        assert_eq!(scaled, scaled.round());
        let single = mc_dropout_score(&net, x.view(), 1, 4).unwrap();
        assert_eq!(single.confidence, 1.0);
    }

    #[test]
    fn mc_batch_matches_per_row_seeds() {
        let net = init_network(3, &[LayerSpec::hidden(12, 0.4)], 3, 2).unwrap();
        let data = crate::dataio::synth_blobs(3, 3, 5, 2.0, 0).unwrap();
        let batch = mc_dropout_score_batch(&net, data.features(), 20, 77).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let single = mc_dropout_score(&net, data.sample(i), 20, row_seed(77, i)).unwrap();
            assert_eq!(&single, b);
        }
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let a = init_network(3, &[LayerSpec::hidden(4, 0.0)], 2, 5).unwrap();
        assert!(matches!(
            Ensemble::from_members(vec![a.clone(), a.clone()]),
            Err(Error::BadSeeds { first: 0, second: 1, seed: 5 })
        ));
        assert!(Ensemble::from_members(vec![a]).is_err());
    }

    #[test]
    fn ensemble_votes_and_order_invariance() {
        let data = crate::dataio::synth_blobs(3, 3, 10, 6.0, 0).unwrap();
        let hp = TrainParams {
            batch_size: 8,
            learning_rate: 1e-2,
            max_epochs: 3,
            early_stop_accuracy: 1.1,
            seed: 0,
        };
        let spec = [LayerSpec::hidden(6, 0.1)];
        let ens = train_ensemble(3, &spec, 3, &data, &hp, 3, 10).unwrap();
        assert_eq!(ens.seeds(), &[10, 11, 12]);
        let mut rev = ens.members().to_vec();
        rev.reverse();
        let rev = Ensemble::from_members(rev).unwrap();
        let a = ensemble_score_batch(&ens, data.features()).unwrap();
        let b = ensemble_score_batch(&rev, data.features()).unwrap();
        assert_eq!(a, b);
        for (i, v) in a.iter().enumerate() {
            assert_eq!(v, &ensemble_score(&ens, data.sample(i)).unwrap());
            assert!(v.confidence >= 1.0 / 3.0);
        }
    }

    #[test]
    fn member_errors_carry_index() {
        let data = crate::dataio::synth_blobs(3, 3, 4, 6.0, 0).unwrap();
        let hp = TrainParams {
            batch_size: 0,
            learning_rate: 1e-2,
            max_epochs: 1,
            early_stop_accuracy: 1.0,
            seed: 0,
        };
        let err = train_ensemble(3, &[LayerSpec::hidden(4, 0.0)], 3, &data, &hp, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Member { member: 0, .. }));
    }

    #[test]
    fn ensemble_directory_round_trip() {
        let nets: Vec<_> = (0..3)
            .map(|s| init_network(3, &[LayerSpec::hidden(4, 0.2)], 2, s).unwrap())
            .collect();
        let ens = Ensemble::from_members(nets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save_dir(dir.path()).unwrap();
        let back = Ensemble::load_dir(dir.path()).unwrap();
        assert_eq!(back.members(), ens.members());
        assert_eq!(back.seeds(), ens.seeds());
    }
}
