//! Zero-shot and linear-probe classification with ACC / macro-OvR AUC,
//! plus the forgetting-rate bookkeeping.
//!
//! Evaluation is a pure read-only consumer of encoder state: test sets are
//! fresh draws from seed-derived streams, the probe trains its own small
//! classifier on frozen embeddings, and nothing here mutates the model.

use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::{self, Tensor};
use crate::encoders::PairEncoder;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthstream::{image_batch, ModalityGenerator};

/// Linear probe schedule: full-batch gradient descent.
const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

/// One evaluation outcome, as written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub strategy: String,
    pub stage: usize,
    pub modality: u32,
    pub setting: String,
    pub acc: f64,
    pub auc: f64,
    /// Metric at the learning stage minus metric now; absent at the
    /// learning stage itself. Positive = forgetting.
    pub forgetting: Option<f64>,
    pub step: usize,
}

/// acc@learning - acc@now. Positive means forgetting, negative means
/// backward transfer. Inputs are validated to share the [0, 1] range.
pub fn forgetting_rate(metric_at_learning_stage: f64, metric_now: f64) -> Result<f64> {
    for (name, v) in [("learning-stage", metric_at_learning_stage), ("current", metric_now)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Metric(format!("{name} metric {v} outside [0, 1]")));
        }
    }
    Ok(metric_at_learning_stage - metric_now)
}

/// Macro one-vs-rest AUC via the Mann-Whitney rank statistic with midrank
/// tie handling. Classes absent from `labels` (or without negatives) are
/// undefined and excluded from the macro average.
pub fn macro_ovr_auc(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = scores.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} score rows vs {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l >= c) {
        return Err(Error::Metric(format!("label outside the {c} score columns")));
    }
    let mut aucs = Vec::new();
    for class in 0..c {
        let n_pos = labels.iter().filter(|&&l| l == class).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        // Midranks of the class-score column.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores.data[a * c + class]
                .partial_cmp(&scores.data[b * c + class])
                .unwrap()
        });
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n
                && scores.data[order[j + 1] * c + class] == scores.data[order[i] * c + class]
            {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = midrank;
            }
            i = j + 1;
        }
        let rank_sum_pos: f64 = (0..n).filter(|&i| labels[i] == class).map(|i| ranks[i]).sum();
        let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
        aucs.push(u / (n_pos as f64 * n_neg as f64));
    }
    if aucs.is_empty() {
        return Err(Error::Metric("no class has both positives and negatives".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Top-1 accuracy of row-argmax predictions (ties to the lowest index).
pub fn argmax_accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = scores.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} score rows vs {} labels", labels.len())));
    }
    let mut correct = 0usize;
    for i in 0..n {
        let row = &scores.data[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Draw a labeled test batch from a seed-derived stream; labels are local
/// class indices.
fn draw_test_set(
    generator: &ModalityGenerator,
    n: usize,
    seed: u64,
    stream_tag: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = Rng::derive(seed, &[0x6576616c, stream_tag, generator.modality_id() as u64]);
    let samples = generator.sample_pairs(n, &mut rng)?;
    let images = image_batch(&samples)?;
    let labels = samples.iter().map(|s| generator.class_of(s.class_label)).collect();
    Ok((images, labels))
}

/// Zero-shot classification: nearest class prompt by cosine similarity.
/// Scores are softmax-normalized per sample so the AUC is computed on
/// probabilities (the argmax, hence ACC, is unaffected).
pub fn zero_shot_eval<E: PairEncoder>(
    encoders: &E,
    generator: &ModalityGenerator,
    n_test: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_test < generator.n_classes() {
        return Err(Error::Parameter(format!(
            "n_test {n_test} below the class count {}",
            generator.n_classes()
        )));
    }
    let (images, labels) = draw_test_set(generator, n_test, seed, 0x7a73)?;
    let image_emb = encoders.embed_images(&images)?;
    let prompt_emb = encoders.embed_texts(&generator.class_prompt_vectors())?;
    let (inorm, _) = tensor::l2_normalize_rows(&image_emb)?;
    let (pnorm, _) = tensor::l2_normalize_rows(&prompt_emb)?;
    let cosine = tensor::matmul(&inorm, &tensor::transpose(&pnorm)?)?;
    let scores = tensor::row_softmax(&cosine, 1.0)?;
    let acc = argmax_accuracy(&scores, &labels)?;
    let auc = macro_ovr_auc(&scores, &labels)?;
    Ok((acc, auc))
}

/// Multinomial logistic-regression probe on frozen, L2-normalized image
/// embeddings: full-batch gradient descent, then test ACC / macro-OvR AUC
/// on the predicted probabilities.
pub fn linear_probe_eval<E: PairEncoder>(
    encoders: &E,
    generator: &ModalityGenerator,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let classes = generator.n_classes();
    if n_train < 10 * classes {
        return Err(Error::Parameter(format!(
            "probe needs n_train >= {}, got {n_train}",
            10 * classes
        )));
    }
    let (train_images, train_labels) = draw_test_set(generator, n_train, seed, 0x6c70_7472)?;
    let (test_images, test_labels) = draw_test_set(generator, n_test, seed, 0x6c70_7465)?;

    let embed = |batch: &Tensor| -> Result<Tensor> {
        let e = encoders.embed_images(batch)?;
        Ok(tensor::l2_normalize_rows(&e)?.0)
    };
    let x_train = embed(&train_images)?;
    let x_test = embed(&test_images)?;

    let probe = fit_logistic_probe(&x_train, &train_labels, classes)?;
    let scores = probe.predict_proba(&x_test)?;
    let acc = argmax_accuracy(&scores, &test_labels)?;
    let auc = macro_ovr_auc(&scores, &test_labels)?;
    Ok((acc, auc))
}

/// Fitted multinomial logistic regression head.
pub struct LogisticProbe {
    weights: Tensor,
    bias: Tensor,
}

impl LogisticProbe {
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let logits = tensor::add_row_bias(&tensor::matmul(x, &self.weights)?, &self.bias)?;
        tensor::row_softmax(&logits, 1.0)
    }
}

/// Full-batch softmax-regression fit (zero init, fixed schedule; L2 on the
/// weights only).
pub fn fit_logistic_probe(x: &Tensor, labels: &[usize], classes: usize) -> Result<LogisticProbe> {
    let (n, d) = x.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} probe rows vs {} labels", labels.len())));
    }
    let mut w = Tensor::zeros(vec![d, classes]);
    let mut b = Tensor::zeros(vec![1, classes]);
    for _ in 0..PROBE_ITERS {
        let logits = tensor::add_row_bias(&tensor::matmul(x, &w)?, &b)?;
        let p = tensor::row_softmax(&logits, 1.0)?;
        // residual = (P - Y) / n
        let mut residual = p;
        for (i, &label) in labels.iter().enumerate() {
            residual.data[i * classes + label] -= 1.0;
        }
        residual.data.iter_mut().for_each(|v| *v /= n as f64);
        let grad_w = tensor::matmul(&tensor::transpose(x)?, &residual)?;
        for j in 0..d * classes {
            w.data[j] -= PROBE_LR * (grad_w.data[j] + PROBE_L2 * w.data[j]);
        }
        for c in 0..classes {
            let gb: f64 = (0..n).map(|i| residual.data[i * classes + c]).sum();
            b.data[c] -= PROBE_LR * gb;
        }
    }
    Ok(LogisticProbe { weights: w, bias: b })
}
