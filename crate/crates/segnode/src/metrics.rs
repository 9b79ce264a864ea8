//! Segmentation loss and quality metrics.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::record;
use crate::tensor::Tensor;

/// Integer label map of shape (N, H, W).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    shape: [usize; 3],
    data: Vec<u32>,
}

impl Labels {
    pub fn new(shape: [usize; 3], data: Vec<u32>) -> Labels {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Labels { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Stacks label maps along the batch axis.
    pub fn stack(items: &[&Labels]) -> Result<Labels> {
        let [_, h, w] = items[0].shape;
        let mut data = Vec::new();
        let mut n = 0;
        for item in items {
            if item.shape[1] != h || item.shape[2] != w {
                return Err(Error::ShapeMismatch {
                    op: "labels stack",
                    lhs: items[0].shape.to_vec(),
                    rhs: item.shape.to_vec(),
                });
            }
            n += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        Ok(Labels::new([n, h, w], data))
    }

    /// Label maps travel through the tensor file format as rank-3 tensors
    /// holding integral values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.shape[0], self.shape[1], self.shape[2]],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Labels> {
        if t.rank() != 3 {
            return Err(Error::Format(format!(
                "label tensor must be rank 3, got {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.numel());
        for &v in t.data() {
            let f = v.to_f64();
            if !(f.is_finite() && f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64) {
                return Err(Error::Format(format!("non-integral label value {f}")));
            }
            data.push(f as u32);
        }
        Ok(Labels::new([t.shape()[0], t.shape()[1], t.shape()[2]], data))
    }
}

fn validate_labels(
    labels: &Labels,
    classes: usize,
    ignore_index: Option<u32>,
) -> Result<()> {
    for &l in labels.data() {
        if Some(l) == ignore_index {
            continue;
        }
        if l as usize >= classes {
            return Err(Error::LabelRange { label: l, classes });
        }
    }
    Ok(())
}

/// Mean per-pixel cross entropy of `logits` (N, K, H, W) against integer
/// labels (N, H, W), stabilized by max subtraction. Pixels whose label equals
/// `ignore_index` do not contribute.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Labels,
    ignore_index: Option<u32>,
) -> Result<Tensor<T>> {
    if logits.rank() != 4 {
        return Err(Error::Config(format!(
            "cross_entropy_loss expects rank-4 logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    if labels.shape() != [n, h, w] {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss labels",
            lhs: logits.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    validate_labels(labels, k, ignore_index)?;

    let ld = logits.data();
    let plane = h * w;
    let mut total = T::zero();
    let mut count = 0usize;
    for ni in 0..n {
        for p in 0..plane {
            let label = labels.data()[ni * plane + p];
            if Some(label) == ignore_index {
                continue;
            }
            let base = ni * k * plane + p;
            let mut max = ld[base];
            for c in 1..k {
                max = max.max(ld[base + c * plane]);
            }
            let mut sum_exp = T::zero();
            for c in 0..k {
                sum_exp += (ld[base + c * plane] - max).exp();
            }
            total += sum_exp.ln() + max - ld[base + label as usize * plane];
            count += 1;
        }
    }
    let loss_value = if count == 0 {
        T::zero()
    } else {
        total / T::from_usize(count)
    };

    let out = Tensor::scalar(loss_value);
    record("cross_entropy_loss", &[logits], out, |_| {
        let logits = logits.detach();
        let labels = labels.clone();
        Box::new(move |cot| {
            let scale = cot.item();
            let ld = logits.data();
            let mut grad = vec![T::zero(); ld.len()];
            if count > 0 {
                let inv = T::one() / T::from_usize(count);
                for ni in 0..n {
                    for p in 0..plane {
                        let label = labels.data()[ni * plane + p];
                        if Some(label) == ignore_index {
                            continue;
                        }
                        let base = ni * k * plane + p;
                        let mut max = ld[base];
                        for c in 1..k {
                            max = max.max(ld[base + c * plane]);
                        }
                        let mut sum_exp = T::zero();
                        for c in 0..k {
                            sum_exp += (ld[base + c * plane] - max).exp();
                        }
                        for c in 0..k {
                            let soft = (ld[base + c * plane] - max).exp() / sum_exp;
                            let indicator = if c == label as usize { T::one() } else { T::zero() };
                            grad[base + c * plane] = scale * (soft - indicator) * inv;
                        }
                    }
                }
            }
            vec![Tensor::from_vec(logits.shape(), grad)]
        })
    })
}

/// Per-class intersection-over-union plus the mean over classes present in
/// prediction or ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// Row = ground truth class, column = predicted class.
    pub confusion: Vec<u64>,
    pub classes: usize,
}

impl MiouReport {
    pub fn confusion_at(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.classes + pred]
    }
}

/// Accumulates a K x K confusion matrix over all pixels and derives IoU per
/// class. Ground-truth pixels equal to `ignore_index` are skipped entirely.
pub fn miou(
    pred: &Labels,
    gt: &Labels,
    classes: usize,
    ignore_index: Option<u32>,
) -> Result<MiouReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    validate_labels(gt, classes, ignore_index)?;
    validate_labels(pred, classes, None)?;

    let mut confusion = vec![0u64; classes * classes];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if Some(g) == ignore_index {
            continue;
        }
        confusion[g as usize * classes + p as usize] += 1;
    }
    Ok(report_from_confusion(confusion, classes))
}

pub(crate) fn report_from_confusion(confusion: Vec<u64>, classes: usize) -> MiouReport {
    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for o in 0..classes {
            if o != c {
                fp += confusion[o * classes + c];
                fn_ += confusion[c * classes + o];
            }
        }
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    let mean = if present == 0 { 0.0 } else { sum / present as f64 };
    MiouReport {
        per_class,
        mean,
        confusion,
        classes,
    }
}

/// Incremental confusion accumulation, for metrics over many samples.
#[derive(Debug, Clone)]
pub struct ConfusionAccumulator {
    confusion: Vec<u64>,
    classes: usize,
    ignore_index: Option<u32>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize, ignore_index: Option<u32>) -> ConfusionAccumulator {
        ConfusionAccumulator {
            confusion: vec![0; classes * classes],
            classes,
            ignore_index,
        }
    }

    pub fn add(&mut self, pred: &Labels, gt: &Labels) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                op: "confusion add",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        validate_labels(gt, self.classes, self.ignore_index)?;
        validate_labels(pred, self.classes, None)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if Some(g) == self.ignore_index {
                continue;
            }
            self.confusion[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        report_from_confusion(self.confusion.clone(), self.classes)
    }
}

/// Argmax over the class axis of (N, K, H, W) logits; ties break toward the
/// lowest class index.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Labels> {
    if logits.rank() != 4 {
        return Err(Error::Config(format!(
            "argmax_classes expects rank-4 logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let plane = h * w;
    let ld = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        for p in 0..plane {
            let base = ni * k * plane + p;
            let mut best = 0u32;
            let mut best_v = ld[base];
            for c in 1..k {
                let v = ld[base + c * plane];
                if v > best_v {
                    best_v = v;
                    best = c as u32;
                }
            }
            out.push(best);
        }
    }
    Ok(Labels::new([n, h, w], out))
}
