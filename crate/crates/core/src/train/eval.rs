use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::data::{Domain, Sample};
use crate::error::Result;
use crate::tasknet::{AdvPath, Network};
use crate::tensor::NormMode;

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) {
        assert_eq!(truth.len(), pred.len(), "label and prediction sizes");
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both the
    /// labels and the predictions.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Fraction of samples whose domain the discriminator gets right.
    pub disc_accuracy: Option<f64>,
    pub samples: usize,
}

impl EvalReport {
    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>10}", "metric", "value");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(s, "{:<16}{:>10}", format!("iou.class{c}"), v);
        }
        let _ = writeln!(s, "{:<16}{:>10.4}", "miou", self.miou);
        let _ = writeln!(s, "{:<16}{:>10.4}", "pixel_accuracy", self.pixel_accuracy);
        if let Some(d) = self.disc_accuracy {
            let _ = writeln!(s, "{:<16}{:>10.4}", "disc_accuracy", d);
        }
        let _ = writeln!(s, "{:<16}{:>10}", "samples", self.samples);
        s
    }

    /// `key=value` lines, full precision.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map_or_else(|| "nan".to_string(), |v| v.to_string());
            let _ = writeln!(s, "iou.class{c}={v}");
        }
        let _ = writeln!(s, "miou={}", self.miou);
        let _ = writeln!(s, "pixel_accuracy={}", self.pixel_accuracy);
        if let Some(d) = self.disc_accuracy {
            let _ = writeln!(s, "disc_accuracy={d}");
        }
        let _ = writeln!(s, "samples={}", self.samples);
        s
    }
}

/// Segmentation metrics over labelled samples and, with `with_disc`, the
/// discriminator's domain accuracy over all samples (batch norm in eval
/// mode, one sample at a time).
pub fn evaluate(net: &mut Network, samples: &[Sample], with_disc: bool) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(net.cfg.num_classes);
    let (mut correct, mut seen) = (0usize, 0usize);
    for s in samples {
        let img = s.image.to_tensor();
        if let Some(l) = &s.labels {
            cm.add(&l.classes, &net.predict(&img)?);
        }
        if with_disc {
            let mut g = Graph::new();
            let fw = net.forward(&mut g, &[&img], AdvPath::Direct, NormMode::Eval)?;
            let p = g.value(fw.sap.expect("pyramid requested").prob).data()[0];
            correct += usize::from((p > 0.5) == (s.domain == Domain::Target));
            seen += 1;
        }
    }
    Ok(EvalReport {
        per_class_iou: (0..cm.classes).map(|c| cm.iou(c)).collect(),
        miou: cm.miou(),
        pixel_accuracy: cm.pixel_accuracy(),
        disc_accuracy: (seen > 0).then(|| correct as f64 / seen as f64),
        samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.pixel_accuracy(), 1.0);
    }

    #[test]
    fn all_background() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 1, 1], &[0, 0, 0, 0]);
        assert_eq!(cm.iou(0), Some(0.5));
        assert_eq!(cm.iou(1), Some(0.0));
    }

    #[test]
    fn hand_computed() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 0, 1, 1, 2], &[0, 1, 1, 2, 2]);
        // class 0: tp 1 fn 1 fp 0; class 1: tp 1 fn 1 fp 1; class 2: tp 1 fp 1
        assert_eq!(cm.iou(0), Some(0.5));
        assert_eq!(cm.iou(1), Some(1.0 / 3.0));
        assert_eq!(cm.iou(2), Some(0.5));
        assert!((cm.miou() - (0.5 + 1.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1], &[0, 1]);
        assert_eq!(cm.iou(2), None);
        assert_eq!(cm.miou(), 1.0);
    }
}
