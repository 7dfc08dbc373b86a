//! Multi-label evaluation and the rf / deep / emb+rf comparison.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Dataset, Labels, Split, SplitAssignment, Stay};
use crate::featurize::{EncodedStay, Preprocessing};
use crate::forest::{forest_fit, forest_predict, ForestConfig};
use crate::hybridnet::{embed_encoded, predict, ModelConfig, ModelParams};
use crate::{Error, Result, N_LABELS};

/// ICD-9 chapters, in descending order of presence.
pub const LABEL_NAMES: [&str; N_LABELS] = [
    "circulatory",
    "endocrine_nutritional_metabolic",
    "supplementary_health_factors",
    "respiratory",
    "injury_poisoning",
    "genitourinary",
    "digestive",
    "symptoms_signs_ill_defined",
    "blood",
    "mental",
    "supplementary_external_causes",
    "nervous_system",
    "infectious_parasitic",
    "musculoskeletal",
    "neoplasms",
    "skin",
    "perinatal",
    "congenital",
    "pregnancy_complications",
];

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn binarize(probabilities: &[f64], threshold: f64) -> Result<Labels> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    if probabilities.len() != N_LABELS {
        return Err(Error::Shape(format!(
            "expected {N_LABELS} probabilities, got {}",
            probabilities.len()
        )));
    }
    let mut out = [0u8; N_LABELS];
    for (o, &p) in out.iter_mut().zip(probabilities) {
        *o = u8::from(p >= threshold);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub label: &'static str,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub presence: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub n_samples: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn score(predictions: &[Labels], labels: &[Labels]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} label vectors",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let n = labels.len();
    let per_label: Vec<LabelMetrics> = (0..N_LABELS)
        .map(|l| {
            let (mut tp, mut fp, mut fn_, mut present) = (0, 0, 0, 0);
            for (p, y) in predictions.iter().zip(labels) {
                match (p[l] == 1, y[l] == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
                present += usize::from(y[l] == 1);
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            LabelMetrics {
                label: LABEL_NAMES[l],
                precision,
                recall,
                f1: f1_score(precision, recall),
                presence: ratio(present, n),
                tp,
                fp,
                fn_,
            }
        })
        .collect();
    let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / N_LABELS as f64;
    Ok(MetricsReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_label,
        n_samples: n,
    })
}

impl MetricsReport {
    /// `label,precision,recall,f1,presence` rows followed by a `macro` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,precision,recall,f1,presence\n");
        for m in &self.per_label {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                m.label, m.precision, m.recall, m.f1, m.presence
            )
            .unwrap();
        }
        writeln!(
            s,
            "macro,{:.6},{:.6},{:.6},",
            self.macro_precision, self.macro_recall, self.macro_f1
        )
        .unwrap();
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThreeWayReport {
    pub rf: MetricsReport,
    pub deep: MetricsReport,
    pub emb_rf: MetricsReport,
}

impl ThreeWayReport {
    /// One CSV with a leading `model` column (`rf`, `deep`, `emb+rf`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,label,precision,recall,f1,presence\n");
        for (name, r) in self.named() {
            for line in r.to_csv().lines().skip(1) {
                writeln!(s, "{name},{line}").unwrap();
            }
        }
        s
    }

    fn named(&self) -> [(&'static str, &MetricsReport); 3] {
        [
            ("rf", &self.rf),
            ("deep", &self.deep),
            ("emb+rf", &self.emb_rf),
        ]
    }

    /// Aligned text table: precision, recall and F1 groups, each with
    /// rf / deep / emb+rf columns, then presence.
    pub fn table(&self) -> String {
        let width = LABEL_NAMES
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(0)
            .max(13);
        let mut s = format!("{:width$}", "");
        for group in ["Precision", "Recall", "F1"] {
            write!(s, " | {group:^22}").unwrap();
        }
        s.push_str(" |         \n");
        write!(s, "{:width$}", "label").unwrap();
        for _ in 0..3 {
            s.push_str(" |     rf   deep emb+rf");
        }
        s.push_str(" | Presence\n");
        s.push_str(&"-".repeat(width + 3 * 25 + 11));
        s.push('\n');
        let reports = self.named();
        for l in 0..N_LABELS {
            write!(s, "{:width$}", LABEL_NAMES[l]).unwrap();
            let metrics: [fn(&LabelMetrics) -> f64; 3] = [|m| m.precision, |m| m.recall, |m| m.f1];
            for f in metrics {
                s.push_str(" |");
                for (_, r) in &reports {
                    write!(s, " {:6.3}", f(&r.per_label[l])).unwrap();
                }
            }
            writeln!(s, " | {:8.3}", self.deep.per_label[l].presence).unwrap();
        }
        write!(s, "{:width$}", "Total average").unwrap();
        let totals: [fn(&MetricsReport) -> f64; 3] =
            [|r| r.macro_precision, |r| r.macro_recall, |r| r.macro_f1];
        for f in totals {
            s.push_str(" |");
            for (_, r) in &reports {
                write!(s, " {:6.3}", f(r)).unwrap();
            }
        }
        s.push_str(" |        -\n");
        s
    }
}

fn encode_all(preprocessing: &Preprocessing, stays: &[&Stay]) -> Result<Vec<EncodedStay>> {
    stays.par_iter().map(|s| preprocessing.apply(s)).collect()
}

/// Forest on selected raw structured features, the network itself, and a
/// forest on network embeddings. Both forests are fit on train+validation
/// and every model is scored on the test split.
pub fn three_way_protocol(
    dataset: &Dataset,
    splits: &SplitAssignment,
    preprocessing: &Preprocessing,
    model: &ModelConfig,
    params: &ModelParams,
    forest_config: &ForestConfig,
) -> Result<ThreeWayReport> {
    let fit = encode_all(
        preprocessing,
        &splits.stays(dataset, &[Split::Train, Split::Validation])?,
    )?;
    let test = encode_all(preprocessing, &splits.stays(dataset, &[Split::Test])?)?;
    if fit.is_empty() || test.is_empty() {
        return Err(Error::Empty(
            "train+validation and test splits must be non-empty".into(),
        ));
    }
    let fit_labels: Vec<Labels> = fit.iter().map(|s| s.labels).collect();
    let test_labels: Vec<Labels> = test.iter().map(|s| s.labels).collect();
    let to_labels = |probs: Vec<[f64; N_LABELS]>| -> Result<Vec<Labels>> {
        probs
            .iter()
            .map(|p| binarize(p, DEFAULT_THRESHOLD))
            .collect()
    };

    let k = preprocessing.selector.k();
    let raw = |set: &[EncodedStay]| -> Vec<Vec<f64>> {
        set.iter().map(|s| s.dense_structured(k)).collect()
    };
    let rf_forest = forest_fit(&raw(&fit), &fit_labels, forest_config)?;
    let rf = score(
        &to_labels(forest_predict(&rf_forest, &raw(&test))?)?,
        &test_labels,
    )?;

    let deep_probs = test
        .par_iter()
        .map(|s| predict(model, params, s))
        .collect::<Result<Vec<_>>>()?;
    let deep = score(&to_labels(deep_probs)?, &test_labels)?;

    let embed = |set: &[EncodedStay]| -> Result<Vec<Vec<f64>>> {
        set.par_iter()
            .map(|s| embed_encoded(model, params, s))
            .collect()
    };
    let emb_forest = forest_fit(&embed(&fit)?, &fit_labels, forest_config)?;
    let emb_rf = score(
        &to_labels(forest_predict(&emb_forest, &embed(&test)?)?)?,
        &test_labels,
    )?;

    Ok(ThreeWayReport { rf, deep, emb_rf })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(bits: &[usize]) -> Labels {
        let mut l = [0u8; N_LABELS];
        bits.iter().for_each(|&b| l[b] = 1);
        l
    }

    #[test]
    fn binarize_is_inclusive_at_threshold() {
        assert_eq!(binarize(&[0.5; N_LABELS], 0.5).unwrap(), [1; N_LABELS]);
        let exact: Vec<f64> = (0..N_LABELS).map(|i| (i % 2) as f64).collect();
        let b = binarize(&exact, 0.5).unwrap();
        assert!(b.iter().enumerate().all(|(i, &v)| v as usize == i % 2));
        assert!(binarize(&[0.5; N_LABELS], 1.0).is_err());
        assert!(binarize(&[0.5; 3], 0.5).is_err());
    }

    #[test]
    fn hand_counted_label() {
        // label 0: TP=2, FP=1, FN=1
        let y = vec![labels(&[0]), labels(&[0]), labels(&[0]), labels(&[])];
        let p = vec![labels(&[0]), labels(&[0]), labels(&[]), labels(&[0])];
        let r = score(&p, &y).unwrap();
        let m = &r.per_label[0];
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 1));
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(m.presence, 0.75);
    }

    #[test]
    fn perfect_predictions() {
        let y = vec![labels(&[0, 3]), labels(&[3, 18])];
        let r = score(&y, &y).unwrap();
        for l in [0, 3, 18] {
            let m = &r.per_label[l];
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.per_label[1].f1, 0.0);
        assert!((r.macro_f1 - 3.0 / 19.0).abs() < 1e-15);
    }

    #[test]
    fn table_row_f1_is_consistent() {
        // Reported values are rounded to three places, so the reported F1
        // must fall inside the F1 range spanned by the rounding intervals.
        let f1 = f1_score(0.994, 0.999);
        assert!((f1 - 0.99649).abs() < 1e-5);
        let lo = f1_score(0.9935, 0.9985);
        let hi = f1_score(0.9945, 0.9995);
        assert!(lo - 0.0005 <= 0.997 && 0.997 <= hi + 0.0005, "{lo} {hi}");
    }

    #[test]
    fn empty_evaluation_fails() {
        assert!(matches!(score(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn csv_layout() {
        let y = vec![labels(&[0])];
        let csv = score(&y, &y).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,precision,recall,f1,presence");
        assert_eq!(lines[1], "circulatory,1.000000,1.000000,1.000000,1.000000");
        assert_eq!(lines.len(), N_LABELS + 2);
        assert!(lines[N_LABELS + 1].starts_with("macro,"));
    }

    #[test]
    fn table_has_a_row_per_label() {
        let y = vec![labels(&[0]), labels(&[1])];
        let r = score(&y, &y).unwrap();
        let t = ThreeWayReport {
            rf: r.clone(),
            deep: r.clone(),
            emb_rf: r,
        };
        let table = t.table();
        assert_eq!(table.lines().count(), 3 + N_LABELS + 1);
        assert!(table.contains("emb+rf"));
        assert_eq!(t.to_csv().lines().count(), 1 + 3 * (N_LABELS + 1));
    }
}
