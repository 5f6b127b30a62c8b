//! Aleatoric / epistemic uncertainty decomposition and AUROC scoring.
//!
//! An *ensemble* for one input is an `N×C` matrix whose rows are the softmax
//! outputs of `N` weight samples. Entropies are in nats.

use rayon::prelude::*;
use serde::Serialize;

use crate::bnn::BnnModel;
use crate::data::{DatasetSplit, DatasetTag};
use crate::error::{Error, Result};
use crate::rng::sample_rng;
use crate::tensor::Tensor;

/// Row-sum tolerance for a valid probability vector.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
/// Largest negative rounding residue of `total − aleatoric` that is treated
/// as zero. Anything more negative is reported as an error.
pub const MI_ROUNDING_SLACK: f64 = 1e-12;

/// Shannon entropy with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn validate(ensemble: &Tensor) -> Result<()> {
    if ensemble.rows() == 0 || ensemble.cols() == 0 {
        return Err(Error::Validation("empty ensemble".into()));
    }
    for n in 0..ensemble.rows() {
        let row = ensemble.row(n);
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "sample {n} has a negative or non-finite probability"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Validation(format!("sample {n} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean of the per-sample softmax entropies.
pub fn aleatoric_entropy(ensemble: &Tensor) -> Result<f64> {
    validate(ensemble)?;
    let n = ensemble.rows();
    let total: f64 = (0..n).map(|i| entropy(ensemble.row(i))).sum();
    Ok(total / n as f64)
}

fn mean_distribution(ensemble: &Tensor) -> Vec<f64> {
    let (n, c) = ensemble.shape();
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, &p) in mean.iter_mut().zip(ensemble.row(i)) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

/// Entropy of the sample-averaged predictive distribution.
pub fn total_entropy(ensemble: &Tensor) -> Result<f64> {
    validate(ensemble)?;
    Ok(entropy(&mean_distribution(ensemble)))
}

/// `total_entropy − aleatoric_entropy`.
pub fn mutual_information(ensemble: &Tensor) -> Result<f64> {
    let total = total_entropy(ensemble)?;
    let aleatoric = aleatoric_entropy(ensemble)?;
    settle_mi(total - aleatoric)
}

fn settle_mi(d: f64) -> Result<f64> {
    if d >= 0.0 {
        Ok(d)
    } else if d >= -MI_ROUNDING_SLACK {
        Ok(0.0)
    } else {
        Err(Error::Validation(format!("mutual information {d} is negative")))
    }
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
///
/// Sort-based, `O(n log n)`. Pair counts are kept as integers so the result
/// is exactly `(2·#greater + #ties) / (2·n_pos·n_neg)`.
pub fn auroc(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::Spec("auroc needs at least one negative and one positive".into()));
    }
    if negatives.iter().chain(positives).any(|v| !v.is_finite()) {
        return Err(Error::Validation("auroc scores must be finite".into()));
    }
    let mut scored: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the Mann–Whitney U of the positives
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < scored.len() && scored[j].0 == scored[i].0 {
            if scored[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    let pairs = 2 * negatives.len() as u128 * positives.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyRecord {
    pub dataset: DatasetTag,
    pub index: usize,
    pub softmax_entropy: f64,
    pub mutual_information: f64,
    pub predicted: usize,
    /// `-1` for out-of-distribution inputs.
    pub label: i64,
}

/// Streaming form of the three estimators: accumulates one weight sample
/// at a time for a batch of inputs, in the same arithmetic order as the
/// per-ensemble functions above.
#[derive(Clone, Debug)]
pub struct EnsembleAccumulator {
    classes: usize,
    samples: usize,
    prob_sums: Vec<f64>,
    entropy_sums: Vec<f64>,
}

impl EnsembleAccumulator {
    pub fn new(inputs: usize, classes: usize) -> Self {
        EnsembleAccumulator {
            classes,
            samples: 0,
            prob_sums: vec![0.0; inputs * classes],
            entropy_sums: vec![0.0; inputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.entropy_sums.len()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Adds one sample's `inputs×C` probability matrix.
    pub fn push(&mut self, probs: &Tensor) -> Result<()> {
        if probs.shape() != (self.inputs(), self.classes) {
            return Err(Error::Shape {
                op: "EnsembleAccumulator::push",
                left: (self.inputs(), self.classes),
                right: probs.shape(),
            });
        }
        for (i, h) in self.entropy_sums.iter_mut().enumerate() {
            *h += entropy(probs.row(i));
        }
        for (s, &p) in self.prob_sums.iter_mut().zip(probs.values()) {
            *s += p;
        }
        self.samples += 1;
        Ok(())
    }

    fn mean_row(&self, i: usize) -> Vec<f64> {
        let n = self.samples as f64;
        self.prob_sums[i * self.classes..(i + 1) * self.classes]
            .iter()
            .map(|s| s / n)
            .collect()
    }

    pub fn aleatoric(&self, i: usize) -> f64 {
        self.entropy_sums[i] / self.samples as f64
    }

    pub fn total(&self, i: usize) -> f64 {
        entropy(&self.mean_row(i))
    }

    pub fn mutual_information(&self, i: usize) -> Result<f64> {
        settle_mi(self.total(i) - self.aleatoric(i))
    }

    /// Argmax of the mean predictive distribution (first maximum on ties).
    pub fn predicted(&self, i: usize) -> usize {
        let row = &self.prob_sums[i * self.classes..(i + 1) * self.classes];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best
    }
}

/// Test splits scored by [`evaluate_suite`].
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub mnist: DatasetSplit,
    pub ambiguous: DatasetSplit,
    pub fashion: DatasetSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteMetrics {
    pub accuracy: f64,
    pub auroc_amnist: f64,
    pub auroc_fmnist: f64,
    #[serde(skip)]
    pub records: Vec<UncertaintyRecord>,
}

/// Accuracy on MNIST, AUROC of MNIST vs Ambiguous (softmax-entropy score)
/// and of MNIST∪Ambiguous vs Fashion (mutual-information score).
///
/// Weight sample `i` uses [`sample_rng`]`(eval_seed, i)` and is shared by
/// all three splits. Samples are computed in parallel chunks and merged in
/// index order, so the output is independent of the thread count.
pub fn evaluate_suite(model: &BnnModel, suite: &EvalSuite, samples: usize, eval_seed: u64) -> Result<SuiteMetrics> {
    if samples == 0 {
        return Err(Error::Spec("evaluation needs at least one sample".into()));
    }
    let splits = [&suite.mnist, &suite.ambiguous, &suite.fashion];
    let classes = model.num_classes();
    let mut accs: Vec<EnsembleAccumulator> = splits
        .iter()
        .map(|s| EnsembleAccumulator::new(s.len(), classes))
        .collect();

    let chunk = rayon::current_num_threads().max(1);
    let mut next = 0;
    while next < samples {
        let end = (next + chunk).min(samples);
        let probs: Vec<Vec<Tensor>> = (next..end)
            .into_par_iter()
            .map(|i| -> Result<Vec<Tensor>> {
                let weights = model.sample_weights(&mut sample_rng(eval_seed, i as u64))?;
                splits
                    .iter()
                    .map(|s| {
                        let z = model.logits_with_weights(&s.images, &weights)?;
                        Ok(crate::bnn::softmax_rows(&z))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for per_split in &probs {
            for (acc, p) in accs.iter_mut().zip(per_split) {
                acc.push(p)?;
            }
        }
        next = end;
    }

    let mut records = Vec::new();
    for (split, acc) in splits.iter().zip(&accs) {
        for i in 0..split.len() {
            let label = match split.tag {
                DatasetTag::Fashion => -1,
                _ => split.labels[i] as i64,
            };
            records.push(UncertaintyRecord {
                dataset: split.tag,
                index: i,
                softmax_entropy: acc.aleatoric(i),
                mutual_information: acc.mutual_information(i)?,
                predicted: acc.predicted(i),
                label,
            });
        }
    }

    let of = |tag: DatasetTag| records.iter().filter(move |r| r.dataset == tag);
    let mnist_n = suite.mnist.len();
    if mnist_n == 0 {
        return Err(Error::Validation("MNIST test split is empty".into()));
    }
    let correct = of(DatasetTag::Mnist).filter(|r| r.predicted as i64 == r.label).count();
    let accuracy = correct as f64 / mnist_n as f64;

    let se = |tag| of(tag).map(|r| r.softmax_entropy).collect::<Vec<_>>();
    let mi = |tag| of(tag).map(|r| r.mutual_information).collect::<Vec<_>>();
    let auroc_amnist = auroc(&se(DatasetTag::Mnist), &se(DatasetTag::Ambiguous))?;
    let mut in_dist = mi(DatasetTag::Mnist);
    in_dist.extend(mi(DatasetTag::Ambiguous));
    let auroc_fmnist = auroc(&in_dist, &mi(DatasetTag::Fashion))?;

    Ok(SuiteMetrics {
        accuracy,
        auroc_amnist,
        auroc_fmnist,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ens(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Quadratic pairwise count, the definition of the statistic.
    fn auroc_pairwise(neg: &[f64], pos: &[f64]) -> f64 {
        let mut twice = 0u128;
        for &p in pos {
            for &n in neg {
                if p > n {
                    twice += 2;
                } else if p == n {
                    twice += 1;
                }
            }
        }
        twice as f64 / (2 * neg.len() as u128 * pos.len() as u128) as f64
    }

    fn binary_entropy(p: f64) -> f64 {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }

    #[test]
    fn aleatoric_examples() {
        let one_hot = ens(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(aleatoric_entropy(&one_hot).unwrap(), 0.0);
        let uniform = ens(&[vec![0.1; 10]]);
        assert!((aleatoric_entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mixed = ens(&[vec![0.5, 0.5], vec![1.0, 0.0]]);
        assert!((aleatoric_entropy(&mixed).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn total_and_mi_examples() {
        let same = ens(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert!((total_entropy(&same).unwrap() - binary_entropy(0.3)).abs() < 1e-15);
        assert_eq!(mutual_information(&same).unwrap(), 0.0);

        let opposed = ens(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((total_entropy(&opposed).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((mutual_information(&opposed).unwrap() - 2f64.ln()).abs() < 1e-15);

        let split = ens(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let want = 2f64.ln() - binary_entropy(0.9);
        assert!((want - 0.368_064).abs() < 1e-6);
        assert!((mutual_information(&split).unwrap() - want).abs() < 1e-12);

        let uniform = ens(&[vec![0.25; 4], vec![0.25; 4]]);
        assert!((total_entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn malformed_distributions_are_rejected() {
        assert!(aleatoric_entropy(&ens(&[vec![0.5, 0.4]])).is_err());
        assert!(total_entropy(&ens(&[vec![1.2, -0.2]])).is_err());
        assert!(mutual_information(&Tensor::zeros(0, 3)).is_err());
    }

    #[test]
    fn single_sample_has_exactly_zero_mi() {
        let p = ens(&[vec![0.2, 0.3, 0.5]]);
        assert_eq!(mutual_information(&p).unwrap(), 0.0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3], &[0.3]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4], &[0.2, 0.3]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn accumulator_matches_direct_estimators() {
        let samples = [
            ens(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![1.0, 0.0]]),
            ens(&[vec![0.5, 0.5], vec![0.1, 0.9], vec![0.0, 1.0]]),
            ens(&[vec![0.3, 0.7], vec![0.6, 0.4], vec![0.5, 0.5]]),
        ];
        let mut acc = EnsembleAccumulator::new(3, 2);
        for s in &samples {
            acc.push(s).unwrap();
        }
        for i in 0..3 {
            let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.row(i).to_vec()).collect();
            let e = ens(&rows);
            assert_eq!(acc.aleatoric(i), aleatoric_entropy(&e).unwrap());
            assert_eq!(acc.total(i), total_entropy(&e).unwrap());
            assert_eq!(acc.mutual_information(i).unwrap(), mutual_information(&e).unwrap());
        }
        assert_eq!(acc.predicted(0), 1);
    }

    fn ensemble_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..6, 2usize..6).prop_flat_map(|(n, c)| {
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, c), n).prop_map(|rows| {
                let rows: Vec<Vec<f64>> = rows
                    .into_iter()
                    .map(|r| {
                        let s: f64 = r.iter().sum::<f64>() + 1e-9;
                        r.iter().map(|v| (v + 1e-9 / r.len() as f64) / s).collect()
                    })
                    .collect();
                Tensor::from_rows(&rows).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn decomposition_bounds(e in ensemble_strategy()) {
            let c = e.cols() as f64;
            let total = total_entropy(&e).unwrap();
            let alea = aleatoric_entropy(&e).unwrap();
            let mi = mutual_information(&e).unwrap();
            prop_assert!(mi >= 0.0);
            prop_assert!(total >= alea - MI_ROUNDING_SLACK);
            prop_assert!(total <= c.ln() + 1e-12 && alea <= c.ln() + 1e-12);
        }

        #[test]
        fn auroc_matches_pairwise(
            neg in proptest::collection::vec(0u8..6, 1..20),
            pos in proptest::collection::vec(0u8..6, 1..20),
        ) {
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            prop_assert_eq!(auroc(&neg, &pos).unwrap(), auroc_pairwise(&neg, &pos));
        }

        #[test]
        fn auroc_is_rank_invariant(
            neg in proptest::collection::vec(-5.0f64..5.0, 1..15),
            pos in proptest::collection::vec(-5.0f64..5.0, 1..15),
        ) {
            let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
            let a = auroc(&neg, &pos).unwrap();
            prop_assert_eq!(a, auroc(&f(&neg), &f(&pos)).unwrap());
        }
    }
}
