//! Evaluation metrics, the replicated train/test protocol, grid-search
//! cross-validation and the per-sample latency benchmark.
//!
//! The replicated protocol mirrors the group-held-out design: each replicate
//! draws a fresh set of training groups, subsamples a fixed budget per label
//! from each side, fits every configured method and scores it on the held
//! out groups. Unclassifiable outcomes count as false negatives of the true
//! label and nobody's false positive.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::classifier::{fit, ClassifierModel, CoderSpec, DictionarySource};
use crate::data::{split_by_group, subsample_per_label, Dataset};
use crate::learning::LearnParams;
use crate::rng::{child_seed, sample_without_replacement, SplitMix64};
use crate::{Error, Result, Scalar};

const TAG_SPLIT: u64 = 0x31;
const TAG_TRAIN_SAMPLE: u64 = 0x32;
const TAG_TEST_SAMPLE: u64 = 0x33;
const TAG_FIT: u64 = 0x34;
const TAG_CV: u64 = 0x35;
const TAG_CV_FIT: u64 = 0x36;

/// `K × (K+1)` counts; rows are true labels, columns predicted labels, and
/// the final column collects unclassifiable outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn label_count(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count for a true label and a predicted outcome (`None` means
    /// unclassifiable); labels are 1-based.
    pub fn get(&self, true_label: usize, predicted: Option<usize>) -> u64 {
        let col = predicted.map_or(self.label_count(), |p| p - 1);
        self.counts[[true_label - 1, col]]
    }

    /// Merges another matrix of the same shape into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.counts.dim(), other.counts.dim());
        self.counts += &other.counts;
    }
}

/// Accumulates prediction counts; unclassifiable predictions (`None`) land
/// in the extra final column.
pub fn confusion(
    truth: &[usize],
    predicted: &[Option<usize>],
    labels: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let mut counts = Array2::zeros((labels, labels + 1));
    for (&t, &p) in truth.iter().zip(predicted.iter()) {
        if t == 0 || t > labels {
            return Err(Error::LabelOutOfRange(t, labels));
        }
        let col = match p {
            Some(p) if p == 0 || p > labels => return Err(Error::LabelOutOfRange(p, labels)),
            Some(p) => p - 1,
            None => labels,
        };
        counts[[t - 1, col]] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Precision, recall and F-score of one label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Per-label precision/recall/F from confusion counts. Unclassifiable
/// outcomes are false negatives of the true label; `0/0` ratios are zero by
/// convention and `F = 2PR/(P+R)` is zero when `P + R = 0`.
pub fn prf_scores(cm: &ConfusionMatrix) -> Vec<LabelScores> {
    let k = cm.label_count();
    (0..k)
        .map(|label| {
            let tp = cm.counts[[label, label]] as f64;
            let fp: f64 = (0..k)
                .filter(|&t| t != label)
                .map(|t| cm.counts[[t, label]] as f64)
                .sum();
            let fn_: f64 = (0..=k)
                .filter(|&c| c != label)
                .map(|c| cm.counts[[label, c]] as f64)
                .sum();
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f_score = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            LabelScores {
                precision,
                recall,
                f_score,
            }
        })
        .collect()
}

/// Unweighted mean F-score across labels.
pub fn macro_f(cm: &ConfusionMatrix) -> f64 {
    let scores = prf_scores(cm);
    scores.iter().map(|s| s.f_score).sum::<f64>() / scores.len() as f64
}

/// Mean and sample standard deviation across replicates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() > 1 {
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            var.sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Per-sample wall-clock statistics in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Mean, median and nearest-rank 95th percentile of raw timing samples.
pub fn timing_stats(samples: &[f64]) -> Result<TimingStats> {
    if samples.is_empty() {
        return Err(Error::EmptyMeasurement);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(TimingStats {
        mean,
        median,
        p95: sorted[rank - 1],
    })
}

/// One classification method entered in the protocol.
#[derive(Clone, Debug)]
pub struct MethodConfig<F> {
    pub name: String,
    pub coder: CoderSpec<F>,
    pub source: DictionarySource,
    /// Learned-dictionary atoms per label; ignored for raw dictionaries.
    pub atoms_per_label: usize,
    pub params: LearnParams<F>,
}

/// Replicated-protocol controls.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub n_replicates: usize,
    /// Groups drawn into the training side of each replicate.
    pub train_groups_count: usize,
    pub per_label_train: usize,
    pub per_label_test: usize,
}

/// Aggregated scores of one method across replicates. Failed replicates are
/// listed with their error text and excluded from the aggregates.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub method: String,
    pub label_names: Vec<String>,
    pub replicates_completed: usize,
    pub per_label_precision: Vec<MeanStd>,
    pub per_label_recall: Vec<MeanStd>,
    pub per_label_f: Vec<MeanStd>,
    pub macro_precision: MeanStd,
    pub macro_recall: MeanStd,
    pub macro_f: MeanStd,
    pub timing: Option<TimingStats>,
    pub failures: Vec<(usize, String)>,
}

impl EvalReport {
    /// Deterministic machine-readable record: one line per metric, no
    /// wall-clock content.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method {}\n", self.method));
        out.push_str(&format!("replicates_completed {}\n", self.replicates_completed));
        for (idx, name) in self.label_names.iter().enumerate() {
            let p = &self.per_label_precision[idx];
            let r = &self.per_label_recall[idx];
            let f = &self.per_label_f[idx];
            out.push_str(&format!(
                "label {name} precision {} {} recall {} {} f {} {}\n",
                p.mean, p.std, r.mean, r.std, f.mean, f.std
            ));
        }
        out.push_str(&format!(
            "macro precision {} {} recall {} {} f {} {}\n",
            self.macro_precision.mean,
            self.macro_precision.std,
            self.macro_recall.mean,
            self.macro_recall.std,
            self.macro_f.mean,
            self.macro_f.std
        ));
        for (rep, err) in &self.failures {
            out.push_str(&format!("failure {rep} {err}\n"));
        }
        out
    }
}

struct MethodAccumulator {
    per_label_precision: Vec<Vec<f64>>,
    per_label_recall: Vec<Vec<f64>>,
    per_label_f: Vec<Vec<f64>>,
    macro_precision: Vec<f64>,
    macro_recall: Vec<f64>,
    macro_f: Vec<f64>,
    timings: Vec<f64>,
    failures: Vec<(usize, String)>,
}

impl MethodAccumulator {
    fn new(labels: usize) -> Self {
        Self {
            per_label_precision: vec![Vec::new(); labels],
            per_label_recall: vec![Vec::new(); labels],
            per_label_f: vec![Vec::new(); labels],
            macro_precision: Vec::new(),
            macro_recall: Vec::new(),
            macro_f: Vec::new(),
            timings: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn record(&mut self, scores: &[LabelScores], timings: &[f64]) {
        for (idx, s) in scores.iter().enumerate() {
            self.per_label_precision[idx].push(s.precision);
            self.per_label_recall[idx].push(s.recall);
            self.per_label_f[idx].push(s.f_score);
        }
        let k = scores.len() as f64;
        self.macro_precision
            .push(scores.iter().map(|s| s.precision).sum::<f64>() / k);
        self.macro_recall
            .push(scores.iter().map(|s| s.recall).sum::<f64>() / k);
        self.macro_f
            .push(scores.iter().map(|s| s.f_score).sum::<f64>() / k);
        self.timings.extend_from_slice(timings);
    }

    fn into_report(self, method: String, label_names: Vec<String>) -> EvalReport {
        EvalReport {
            method,
            label_names,
            replicates_completed: self.macro_f.len(),
            per_label_precision: self
                .per_label_precision
                .iter()
                .map(|v| MeanStd::from_samples(v))
                .collect(),
            per_label_recall: self
                .per_label_recall
                .iter()
                .map(|v| MeanStd::from_samples(v))
                .collect(),
            per_label_f: self
                .per_label_f
                .iter()
                .map(|v| MeanStd::from_samples(v))
                .collect(),
            macro_precision: MeanStd::from_samples(&self.macro_precision),
            macro_recall: MeanStd::from_samples(&self.macro_recall),
            macro_f: MeanStd::from_samples(&self.macro_f),
            timing: timing_stats(&self.timings).ok(),
            failures: self.failures,
        }
    }
}

fn fit_and_score<F: Scalar>(
    method: &MethodConfig<F>,
    train: &Dataset<F>,
    test: &Dataset<F>,
    fit_seed: u64,
) -> Result<(Vec<LabelScores>, Vec<f64>)> {
    let train_set = train.to_training_set()?;
    let sizes = vec![method.atoms_per_label; train.label_count()];
    let mut params = method.params.clone();
    params.seed = fit_seed;
    let model = fit(
        &train_set,
        &sizes,
        &params,
        method.coder.clone(),
        method.source,
        Some(train.label_names().to_vec()),
    )?;
    let results = model.classify_batch(test.samples().view())?;
    let predicted: Vec<Option<usize>> = results.iter().map(|r| r.label).collect();
    let cm = confusion(test.labels(), &predicted, test.label_count())?;
    let timings: Vec<f64> = results.iter().map(|r| r.elapsed_secs).collect();
    Ok((prf_scores(&cm), timings))
}

/// Runs the replicated protocol: per replicate a seeded group split, a
/// per-label subsample of each side, then a fit/classify/score pass for
/// every method. A replicate that fails for one method is recorded in that
/// method's report and skipped in its aggregates.
pub fn run_replicates<F: Scalar>(
    data: &Dataset<F>,
    protocol: &Protocol,
    methods: &[MethodConfig<F>],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if protocol.n_replicates == 0 {
        return Err(Error::BadSpec("n_replicates must be positive".into()));
    }
    if methods.is_empty() {
        return Err(Error::BadSpec("no methods configured".into()));
    }
    let groups: Vec<usize> = data.groups_present().into_iter().collect();
    if protocol.train_groups_count == 0 || protocol.train_groups_count >= groups.len() {
        return Err(Error::BadSpec(format!(
            "train_groups_count must lie in 1..{} (groups present)",
            groups.len()
        )));
    }

    let labels = data.label_count();
    let mut accumulators: Vec<MethodAccumulator> = methods
        .iter()
        .map(|_| MethodAccumulator::new(labels))
        .collect();

    for rep in 0..protocol.n_replicates {
        let rep_u64 = rep as u64;
        let mut split_rng = SplitMix64::new(child_seed(child_seed(seed, TAG_SPLIT), rep_u64));
        let picks = sample_without_replacement(
            groups.len(),
            protocol.train_groups_count,
            &mut split_rng,
        );
        let train_groups: BTreeSet<usize> = picks.into_iter().map(|i| groups[i]).collect();

        let prepared = split_by_group(data, &train_groups).and_then(|(train_all, test_all)| {
            let train = subsample_per_label(
                &train_all,
                protocol.per_label_train,
                child_seed(child_seed(seed, TAG_TRAIN_SAMPLE), rep_u64),
            )?;
            let test = subsample_per_label(
                &test_all,
                protocol.per_label_test,
                child_seed(child_seed(seed, TAG_TEST_SAMPLE), rep_u64),
            )?;
            Ok((train, test))
        });

        match prepared {
            Ok((train, test)) => {
                for (mi, method) in methods.iter().enumerate() {
                    let fit_seed = child_seed(
                        child_seed(child_seed(seed, TAG_FIT), rep_u64),
                        mi as u64,
                    );
                    match fit_and_score(method, &train, &test, fit_seed) {
                        Ok((scores, timings)) => accumulators[mi].record(&scores, &timings),
                        Err(err) => accumulators[mi].failures.push((rep, err.to_string())),
                    }
                }
            }
            Err(err) => {
                for acc in &mut accumulators {
                    acc.failures.push((rep, err.to_string()));
                }
            }
        }
    }

    Ok(methods
        .iter()
        .zip(accumulators)
        .map(|(m, acc)| acc.into_report(m.name.clone(), data.label_names().to_vec()))
        .collect())
}

/// One grid point of the tuning search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint<F> {
    pub alpha: F,
    pub gamma: F,
    pub eta: F,
}

/// Grid-search outcome: the winning point plus the full score table.
#[derive(Clone, Debug)]
pub struct CvOutcome<F> {
    pub best_index: usize,
    pub best: GridPoint<F>,
    /// Mean macro-F per grid point, in grid order.
    pub scores: Vec<f64>,
}

/// Group-aware k-fold cross-validation over `(alpha, gamma, eta)`.
///
/// Groups are shuffled once (seeded) and dealt round-robin into `folds`
/// folds, so no group ever straddles a fold boundary. Every grid point is
/// scored by mean held-out macro-F; the best point wins and ties resolve to
/// the lowest grid index.
pub fn cross_validate<F: Scalar>(
    train: &Dataset<F>,
    grid: &[GridPoint<F>],
    folds: usize,
    base: &MethodConfig<F>,
    seed: u64,
) -> Result<CvOutcome<F>> {
    if grid.is_empty() {
        return Err(Error::BadSpec("empty tuning grid".into()));
    }
    if folds < 2 {
        return Err(Error::BadSpec("cross-validation needs at least 2 folds".into()));
    }
    let groups: Vec<usize> = train.groups_present().into_iter().collect();
    if groups.len() < folds {
        return Err(Error::InsufficientGroups {
            folds,
            groups: groups.len(),
        });
    }

    let mut shuffle_rng = SplitMix64::new(child_seed(seed, TAG_CV));
    let order = sample_without_replacement(groups.len(), groups.len(), &mut shuffle_rng);
    let mut fold_groups: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); folds];
    for (pos, &idx) in order.iter().enumerate() {
        fold_groups[pos % folds].insert(groups[idx]);
    }

    let mut scores = Vec::with_capacity(grid.len());
    for (gi, point) in grid.iter().enumerate() {
        let mut method = base.clone();
        method.params.alpha = point.alpha;
        method.params.gamma = point.gamma;
        method.params.eta = point.eta;
        if let CoderSpec::Hybrid { stop, .. } = &method.coder {
            method.coder = CoderSpec::Hybrid {
                alpha: point.alpha,
                gamma: point.gamma,
                stop: stop.clone(),
            };
        }

        let mut fold_scores = Vec::with_capacity(folds);
        for (fi, held_out) in fold_groups.iter().enumerate() {
            let fit_groups: BTreeSet<usize> = groups
                .iter()
                .copied()
                .filter(|g| !held_out.contains(g))
                .collect();
            let (fit_part, held_part) = split_by_group(train, &fit_groups)?;
            let fit_seed = child_seed(
                child_seed(child_seed(seed, TAG_CV_FIT), gi as u64),
                fi as u64,
            );
            let (scores_part, _) = fit_and_score(&method, &fit_part, &held_part, fit_seed)?;
            let k = scores_part.len() as f64;
            fold_scores.push(scores_part.iter().map(|s| s.f_score).sum::<f64>() / k);
        }
        scores.push(fold_scores.iter().sum::<f64>() / folds as f64);
    }

    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(CvOutcome {
        best_index,
        best: grid[best_index],
        scores,
    })
}

/// Times `classify` per sample, single-threaded and in column order,
/// discarding the first `warmup` measurements.
pub fn benchmark_timing<F: Scalar>(
    model: &ClassifierModel<F>,
    test: &Dataset<F>,
    warmup: usize,
) -> Result<TimingStats> {
    if warmup >= test.len() {
        return Err(Error::EmptyMeasurement);
    }
    let mut timings = Vec::with_capacity(test.len() - warmup);
    for j in 0..test.len() {
        let result = model.classify(test.samples().column(j))?;
        if j >= warmup {
            timings.push(result.elapsed_secs);
        }
    }
    timing_stats(&timings)
}
