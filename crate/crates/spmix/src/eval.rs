//! Frozen-feature evaluation: pooled feature extraction, the class-balanced
//! linear probe, and Many/Medium/Few accuracy plus macro-F1 reporting.

use crate::dataset::{LoadedDataset, Subset, SubsetPartition};
use crate::encoder::{encode_pooled, image_batch, EncoderConfig, ParamStore};
use crate::error::{Result, SpmixError};
use crate::imaging::ImageTensor;
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pooled encoder features for every image, computed without gradients.
pub fn extract_features(
    ds: &LoadedDataset,
    params: &ParamStore,
    enc: &EncoderConfig,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let frozen = params.detached_copy();
    let mut features = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let refs: Vec<&ImageTensor> = ds.images[start..end].iter().collect();
        let mut g = Graph::new();
        let x = image_batch(&refs)?;
        let pooled = encode_pooled(&mut g, &x, &frozen, enc)?;
        let d = pooled.shape()[1];
        for row in pooled.data().chunks_exact(d) {
            features.push(row.to_vec());
        }
        start = end;
    }
    Ok(features)
}

/// Single linear layer trained on frozen features.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// `[D, K]` row-major weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearClassifier {
            weights: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            dim,
            classes,
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &f) in feature.iter().enumerate() {
            for k in 0..self.classes {
                out[k] += f * self.weights[i * self.classes + k];
            }
        }
        out
    }

    /// Argmax prediction; ties break to the lowest class id, so zero-init
    /// weights predict class 0.
    pub fn predict(&self, feature: &[f64]) -> usize {
        let logits = self.logits(feature);
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn to_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(
            "probe.w",
            Tensor::from_parts(vec![self.dim, self.classes], self.weights.clone(), false),
        );
        p.insert(
            "probe.b",
            Tensor::from_parts(vec![self.classes], self.bias.clone(), false),
        );
        p
    }

    pub fn from_params(p: &ParamStore) -> Result<Self> {
        let w = p.expect("probe.w")?;
        let b = p.expect("probe.b")?;
        if w.ndim() != 2 || b.ndim() != 1 || w.shape()[1] != b.shape()[0] {
            return Err(SpmixError::contract(format!(
                "malformed probe checkpoint: weights {:?}, bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(LinearClassifier {
            dim: w.shape()[0],
            classes: w.shape()[1],
            weights: w.data().to_vec(),
            bias: b.data().to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    /// Full-batch gradient steps over the balanced feature set.
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Class-balanced resampling: every class is upsampled with replacement to
/// the majority count, once, deterministically.
fn balanced_indices(
    labels: &[usize],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(SpmixError::config(
            "probe resampling needs at least one sample per class".to_string(),
        ));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap();
    let mut out = Vec::with_capacity(classes * target);
    for group in &by_class {
        out.extend_from_slice(group);
        for _ in group.len()..target {
            out.push(group[rng.random_range(0..group.len())]);
        }
    }
    Ok(out)
}

/// Trains the probe with full-batch gradient descent on softmax
/// cross-entropy over the balanced set. `epochs == 0` returns the zero
/// classifier (predicts class 0 everywhere by the tie-break rule).
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearClassifier, Vec<f64>)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(SpmixError::contract(format!(
            "probe needs matching features/labels, got {}/{}",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    let mut clf = LinearClassifier::zeros(dim, classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let indices = balanced_indices(labels, classes, &mut rng)?;
    let n = indices.len() as f64;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut grad_w = vec![0.0; dim * classes];
        let mut grad_b = vec![0.0; classes];
        let mut loss = 0.0;
        for &i in &indices {
            let f = &features[i];
            let logits = clf.logits(f);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            loss += denom.ln() + max - logits[labels[i]];
            for k in 0..classes {
                let p = exps[k] / denom;
                let err = p - if k == labels[i] { 1.0 } else { 0.0 };
                grad_b[k] += err / n;
                for (j, &fj) in f.iter().enumerate() {
                    grad_w[j * classes + k] += err * fj / n;
                }
            }
        }
        losses.push(loss / n);
        for (w, gw) in clf.weights.iter_mut().zip(&grad_w) {
            *w -= cfg.lr * gw;
        }
        for (b, gb) in clf.bias.iter_mut().zip(&grad_b) {
            *b -= cfg.lr * gb;
        }
    }
    Ok((clf, losses))
}

/// Per-subset accuracies, total accuracy, macro-F1, confusion matrix.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub total_acc: f64,
    pub macro_f1: f64,
    /// `confusion[true][pred]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    fn fmt_acc(v: Option<f64>) -> String {
        match v {
            Some(a) => format!("{:.2}", a * 100.0),
            None => "n/a".to_string(),
        }
    }

    /// Human-readable table in Many/Med/Few/Total + F1 shape.
    pub fn to_table(&self) -> String {
        format!(
            "Many    Med     Few     Total   F1\n{:<8}{:<8}{:<8}{:<8}{:<8}",
            Self::fmt_acc(self.many_acc),
            Self::fmt_acc(self.medium_acc),
            Self::fmt_acc(self.few_acc),
            format!("{:.2}", self.total_acc * 100.0),
            format!("{:.2}", self.macro_f1 * 100.0),
        )
    }

    /// Machine-readable line-delimited key=value form.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| match v {
            Some(a) => format!("{a:.9}"),
            None => "n/a".to_string(),
        };
        let mut out = format!(
            "many_acc={}\nmedium_acc={}\nfew_acc={}\ntotal_acc={:.9}\nmacro_f1={:.9}\n",
            opt(self.many_acc),
            opt(self.medium_acc),
            opt(self.few_acc),
            self.total_acc,
            self.macro_f1
        );
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!(
                "confusion_row_{t}={}\n",
                row.iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            ));
        }
        out
    }
}

/// Builds the metrics report from labeled predictions.
pub fn report_from_predictions(
    truths: &[usize],
    predictions: &[usize],
    classes: usize,
    partition: &SubsetPartition,
) -> Result<MetricsReport> {
    if truths.len() != predictions.len() || truths.is_empty() {
        return Err(SpmixError::contract(format!(
            "evaluation needs matching nonempty truth/prediction lists, got {}/{}",
            truths.len(),
            predictions.len()
        )));
    }
    if partition.assignment.len() != classes {
        return Err(SpmixError::contract(format!(
            "partition covers {} classes, evaluation has {classes}",
            partition.assignment.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truths.iter().zip(predictions) {
        if t >= classes || p >= classes {
            return Err(SpmixError::contract(format!(
                "label {t}/{p} out of range for {classes} classes"
            )));
        }
        confusion[t][p] += 1;
    }

    let subset_acc = |subset: Subset| {
        let (mut correct, mut total) = (0usize, 0usize);
        for (class, row) in confusion.iter().enumerate() {
            if partition.subset_of(class) == subset {
                correct += row[class];
                total += row.iter().sum::<usize>();
            }
        }
        (total > 0).then(|| correct as f64 / total as f64)
    };

    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let total_acc = trace as f64 / truths.len() as f64;

    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let fn_: f64 = confusion[c].iter().sum::<usize>() as f64 - tp;
        let fp: f64 = (0..classes).map(|t| confusion[t][c]).sum::<usize>() as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1_sum += f1;
    }

    Ok(MetricsReport {
        many_acc: subset_acc(Subset::Many),
        medium_acc: subset_acc(Subset::Medium),
        few_acc: subset_acc(Subset::Few),
        total_acc,
        macro_f1: f1_sum / classes as f64,
        confusion,
    })
}

/// Classifies every test image through the frozen encoder + probe and
/// reports subset metrics.
pub fn evaluate(
    clf: &LinearClassifier,
    test: &LoadedDataset,
    params: &ParamStore,
    enc: &EncoderConfig,
    partition: &SubsetPartition,
) -> Result<MetricsReport> {
    let features = extract_features(test, params, enc, 64)?;
    let predictions: Vec<usize> = features.iter().map(|f| clf.predict(f)).collect();
    report_from_predictions(&test.labels, &predictions, test.class_count(), partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::partition_subsets;
    use crate::dataset::Manifest;

    fn three_subset_partition() -> SubsetPartition {
        // counts 500 / 100 / 10 with thresholds (300, 50)
        let entries = (0..500)
            .map(|i| (format!("a{i}"), "c0".to_string()))
            .chain((0..100).map(|i| (format!("b{i}"), "c1".to_string())))
            .chain((0..10).map(|i| (format!("c{i}"), "c2".to_string())))
            .collect();
        partition_subsets(&Manifest::new(entries).unwrap(), 300, 50).unwrap()
    }

    #[test]
    fn perfect_predictions_give_ones() {
        let partition = three_subset_partition();
        let truths = vec![0, 0, 1, 1, 2, 2];
        let report = report_from_predictions(&truths, &truths, 3, &partition).unwrap();
        assert_eq!(report.many_acc, Some(1.0));
        assert_eq!(report.medium_acc, Some(1.0));
        assert_eq!(report.few_acc, Some(1.0));
        assert_eq!(report.total_acc, 1.0);
        assert!((report.macro_f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let partition = three_subset_partition();
        let truths = vec![0, 1, 2, 0, 1, 2];
        let preds = vec![0; 6];
        let report = report_from_predictions(&truths, &preds, 3, &partition).unwrap();
        assert!((report.total_acc - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.few_acc, Some(0.0));
    }

    #[test]
    fn macro_f1_hand_computed_two_class_confusion() {
        // confusion [[3,1],[2,4]] -> macro-F1 = mean(2/3, 8/11) = 0.696969...
        let entries = (0..10)
            .map(|i| (format!("a{i}"), "c0".to_string()))
            .chain((0..10).map(|i| (format!("b{i}"), "c1".to_string())))
            .collect();
        let partition = partition_subsets(&Manifest::new(entries).unwrap(), 100, 1).unwrap();
        let mut truths = Vec::new();
        let mut preds = Vec::new();
        for (t, p, n) in [(0, 0, 3), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
            for _ in 0..n {
                truths.push(t);
                preds.push(p);
            }
        }
        let report = report_from_predictions(&truths, &preds, 2, &partition).unwrap();
        assert_eq!(report.confusion, vec![vec![3, 1], vec![2, 4]]);
        assert!((report.macro_f1 - 0.696_969_696_969_697).abs() < 1e-4);
        // total accuracy equals trace / sum
        assert!((report.total_acc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_invariant_to_class_relabeling() {
        let partition = three_subset_partition();
        let truths = vec![0, 0, 1, 1, 2, 2, 0, 1, 2];
        let preds = vec![0, 1, 1, 1, 2, 0, 0, 2, 2];
        let a = report_from_predictions(&truths, &preds, 3, &partition).unwrap();
        // apply the permutation 0->2, 1->0, 2->1 to both sides
        let perm = [2usize, 0, 1];
        let truths_p: Vec<usize> = truths.iter().map(|&t| perm[t]).collect();
        let preds_p: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let permuted_partition = SubsetPartition {
            assignment: vec![
                partition.assignment[1],
                partition.assignment[2],
                partition.assignment[0],
            ],
            many_min: partition.many_min,
            few_max: partition.few_max,
        };
        let b = report_from_predictions(&truths_p, &preds_p, 3, &permuted_partition).unwrap();
        assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        assert!((a.total_acc - b.total_acc).abs() < 1e-12);
    }

    #[test]
    fn empty_subset_reports_none() {
        // two classes, both Many -> Medium and Few are empty, not errors
        let entries = (0..10)
            .map(|i| (format!("a{i}"), "c0".to_string()))
            .chain((0..10).map(|i| (format!("b{i}"), "c1".to_string())))
            .collect();
        let partition = partition_subsets(&Manifest::new(entries).unwrap(), 5, 1).unwrap();
        let report = report_from_predictions(&[0, 1], &[0, 1], 2, &partition).unwrap();
        assert!(report.medium_acc.is_none());
        assert!(report.few_acc.is_none());
        assert!(report.to_table().contains("n/a"));
    }

    fn separable_features(n_per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3usize {
            for i in 0..n_per {
                let jitter = (i % 5) as f64 * 0.01;
                let mut f = vec![jitter; 4];
                f[class] = 1.0 + jitter;
                features.push(f);
                labels.push(class);
            }
        }
        (features, labels)
    }

    #[test]
    fn probe_reaches_full_accuracy_on_separable_features() {
        let (features, labels) = separable_features(20);
        let cfg = ProbeConfig::default();
        let (clf, _) = linear_probe(&features, &labels, 3, &cfg).unwrap();
        let correct = features
            .iter()
            .zip(&labels)
            .filter(|(f, &l)| clf.predict(f) == l)
            .count();
        assert_eq!(correct, features.len());
    }

    #[test]
    fn zero_epoch_probe_predicts_class_zero() {
        let (features, labels) = separable_features(10);
        let cfg = ProbeConfig {
            epochs: 0,
            ..Default::default()
        };
        let (clf, losses) = linear_probe(&features, &labels, 3, &cfg).unwrap();
        assert!(losses.is_empty());
        assert!(features.iter().all(|f| clf.predict(f) == 0));
        // accuracy equals the share of class 0 in the evaluation set
        let acc = labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64;
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probe_loss_decreases_monotonically_on_separable_data() {
        let (features, labels) = separable_features(15);
        let cfg = ProbeConfig {
            epochs: 10,
            lr: 0.1,
            seed: 1,
        };
        let (_, losses) = linear_probe(&features, &labels, 3, &cfg).unwrap();
        assert_eq!(losses.len(), 10);
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn probe_is_class_balanced() {
        // minority class must influence the boundary as much as the majority:
        // with balancing, a 90/10 imbalance still classifies the minority
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..90 {
            features.push(vec![1.0, 0.02 * (i % 7) as f64]);
            labels.push(0);
        }
        for i in 0..10 {
            features.push(vec![-1.0, 0.02 * (i % 7) as f64]);
            labels.push(1);
        }
        let (clf, _) = linear_probe(&features, &labels, 2, &ProbeConfig::default()).unwrap();
        let minority_correct = features
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == 1)
            .filter(|(f, &l)| clf.predict(f) == l)
            .count();
        assert_eq!(minority_correct, 10);
    }

    #[test]
    fn probe_checkpoint_roundtrip() {
        let (features, labels) = separable_features(10);
        let (clf, _) = linear_probe(&features, &labels, 3, &ProbeConfig::default()).unwrap();
        let params = clf.to_params();
        let back = LinearClassifier::from_params(&params).unwrap();
        assert_eq!(clf.weights, back.weights);
        assert_eq!(clf.bias, back.bias);
    }
}
