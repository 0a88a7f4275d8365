//! Classification accuracy, confusion-matrix accounting and per-frame
//! inference timing.

use std::ops::{Add, AddAssign};
use std::time::Instant;

use crate::dataset::{Label, SampleSource};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::network::Model;
use crate::tensor::{Scalar, Tensor};
use crate::training::predicted_label;

/// Binary confusion matrix; billboard is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Label, &'a Label)>) -> Self {
        let mut cm = Self::default();
        for (&actual, &predicted) in pairs {
            cm.record(actual, predicted);
        }
        cm
    }

    pub fn record(&mut self, actual: Label, predicted: Label) {
        match (actual, predicted) {
            (Label::Billboard, Label::Billboard) => self.true_pos += 1,
            (Label::NoBillboard, Label::NoBillboard) => self.true_neg += 1,
            (Label::NoBillboard, Label::Billboard) => self.false_pos += 1,
            (Label::Billboard, Label::NoBillboard) => self.false_neg += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// `(TP + TN) / (TP + TN + FP + FN)`.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyEvaluation),
            total => Ok((self.true_pos + self.true_neg) as f64 / total as f64),
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            true_pos: self.true_pos + rhs.true_pos,
            true_neg: self.true_neg + rhs.true_neg,
            false_pos: self.false_pos + rhs.false_pos,
            false_neg: self.false_neg + rhs.false_neg,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.accuracy()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub labels: Vec<Label>,
    /// `[N, 2]`: no-billboard, billboard.
    pub probabilities: Tensor<T>,
}

/// Labels from an `[N, 2]` probability matrix.
pub fn labels_from_probabilities<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<Label>> {
    if probs.rank() != 2 || probs.shape()[1] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, 2] probabilities, got {:?}",
            probs.shape()
        )));
    }
    Ok(probs
        .data()
        .chunks_exact(2)
        .map(|p| predicted_label(p[0], p[1]))
        .collect())
}

/// Inference-mode forward pass on `[N, 3, H, W]`.
pub fn predict<T: Scalar>(model: &mut Model<T>, input: &Tensor<T>) -> Result<Prediction<T>> {
    let probabilities = model.forward(input, Mode::Infer)?;
    Ok(Prediction {
        labels: labels_from_probabilities(&probabilities)?,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    /// Mean single-frame inference time.
    pub mean_ms: f64,
    /// 95th percentile (nearest rank) single-frame inference time.
    pub p95_ms: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let cm = &self.confusion;
        format!(
            "TP\t{}\nTN\t{}\nFP\t{}\nFN\t{}\naccuracy\t{:.6}\nmean_ms\t{:.3}\np95_ms\t{:.3}\n",
            cm.true_pos,
            cm.true_neg,
            cm.false_pos,
            cm.false_neg,
            self.accuracy,
            self.mean_ms,
            self.p95_ms
        )
    }
}

/// Nearest-rank percentile of an unsorted sample, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Scores every sample of `source` one frame at a time, timing each
/// inference-mode forward pass.
pub fn evaluate<T, S>(model: &mut Model<T>, source: &S) -> Result<EvalReport>
where
    T: Scalar,
    S: SampleSource<T> + ?Sized,
{
    if source.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut confusion = ConfusionMatrix::default();
    let mut times = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let (image, label) = source.load(i)?;
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let x = image.reshape(&shape)?;
        let started = Instant::now();
        let pred = predict(model, &x)?;
        times.push(started.elapsed().as_secs_f64() * 1e3);
        confusion.record(label, pred.labels[0]);
    }
    Ok(EvalReport {
        accuracy: confusion.accuracy()?,
        confusion,
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        p95_ms: percentile(&times, 0.95),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_config, init_params, ConfigName, Scale};

    #[test]
    fn accuracy_examples() {
        let perfect = ConfusionMatrix {
            true_pos: 2,
            true_neg: 2,
            false_pos: 0,
            false_neg: 0,
        };
        assert_eq!(accuracy(&perfect).unwrap(), 1.0);
        let cm = ConfusionMatrix {
            true_pos: 47,
            true_neg: 47,
            false_pos: 3,
            false_neg: 3,
        };
        assert_eq!(format!("{:.6}", cm.accuracy().unwrap()), "0.940000");
        assert!(matches!(
            ConfusionMatrix::default().accuracy(),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn always_negative_tally() {
        let actual: Vec<Label> = [vec![Label::Billboard; 3], vec![Label::NoBillboard; 7]].concat();
        let predicted = vec![Label::NoBillboard; 10];
        let cm = ConfusionMatrix::from_pairs(actual.iter().zip(&predicted));
        assert_eq!(
            cm,
            ConfusionMatrix {
                true_pos: 0,
                true_neg: 7,
                false_pos: 0,
                false_neg: 3
            }
        );
        assert_eq!(cm.accuracy().unwrap(), 0.7);
    }

    #[test]
    fn label_rule() {
        let probs = Tensor::new(&[3, 2], vec![0.9f64, 0.1, 0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(
            labels_from_probabilities(&probs).unwrap(),
            [Label::NoBillboard, Label::NoBillboard, Label::Billboard]
        );
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn predict_batch_shapes() {
        let spec = build_config(ConfigName::B, Scale::Tiny);
        let ckpt = init_params::<f32>(&spec, 2).unwrap();
        let mut model = Model::new(spec, ckpt).unwrap();
        let x = Tensor::create(
            &[3, 3, 32, 32],
            crate::tensor::Fill::Uniform {
                low: 0.0,
                high: 1.0,
            },
            1,
        )
        .unwrap();
        let p = predict(&mut model, &x).unwrap();
        assert_eq!(p.labels.len(), 3);
        assert_eq!(p.probabilities.shape(), &[3, 2]);
        for row in p.probabilities.data().chunks_exact(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
        assert_eq!(predict(&mut model, &x).unwrap(), p);
    }
}
