//! Evaluation report assembling accuracy, Fréchet distance and multimodality.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{AccuracyReport, ClassifierWeights};
use super::stats::{feature_stats, frechet_distance, multimodality, Multimodality};
use crate::data::MotionSequence;
use crate::error::{Error, Result};

/// Published scores on NTU-26, kept for side-by-side reading only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub accuracy: f64,
    pub fvd: f64,
    pub multimodality: f64,
}

pub const PUBLISHED_NTU26: ReferenceScores = ReferenceScores { accuracy: 0.770, fvd: 1048.13, multimodality: 11.28 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub accuracy: AccuracyReport,
    pub fvd: f64,
    pub multimodality: Multimodality,
    /// Classes scored by `multimodality`, in the order of its entries.
    pub multimodality_classes: Vec<String>,
    pub generated_count: usize,
    pub reference_count: usize,
    pub seed: u64,
    pub classifier_held_out_accuracy: Option<f64>,
    /// Where the generated set came from (checkpoint facts, sampling seed).
    pub provenance: serde_json::Value,
}

/// Features per classifier class, in class order.
fn group_by_class(clf: &ClassifierWeights, seqs: &[&MotionSequence], feats: Vec<Vec<f64>>) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut groups = vec![Vec::new(); clf.classes.len()];
    for (s, f) in seqs.iter().zip(feats) {
        let c = clf
            .classes
            .iter()
            .position(|c| c == &s.label)
            .ok_or_else(|| Error::Data(format!("label `{}` unknown to the classifier", s.label)))?;
        groups[c].push(f);
    }
    Ok(groups)
}

/// Scores `generated` against `reference` with one classifier. The
/// multimodality splits come from `seed`.
pub fn evaluate_all(
    name: &str,
    generated: &[&MotionSequence],
    reference: &[&MotionSequence],
    clf: &ClassifierWeights,
    seed: u64,
    provenance: serde_json::Value,
) -> Result<EvalReport> {
    let accuracy = clf.classification_accuracy(generated)?;
    let gen_feats = clf.extract_features_batch(generated)?;
    let ref_feats = clf.extract_features_batch(reference)?;
    let fvd = frechet_distance(&feature_stats(&gen_feats)?, &feature_stats(&ref_feats)?)?;
    // Multimodality covers the classes that were generated.
    let mut gen_groups = Vec::new();
    let mut ref_groups = Vec::new();
    let mut multimodality_classes = Vec::new();
    let all_ref = group_by_class(clf, reference, ref_feats)?;
    for ((c, g), r) in group_by_class(clf, generated, gen_feats)?.into_iter().enumerate().zip(all_ref) {
        if g.is_empty() {
            continue;
        }
        if r.is_empty() {
            return Err(Error::Data(format!("class `{}` has no reference samples", clf.classes[c])));
        }
        multimodality_classes.push(clf.classes[c].clone());
        gen_groups.push(g);
        ref_groups.push(r);
    }
    let multimodality = multimodality(&gen_groups, &ref_groups, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(EvalReport {
        name: name.to_string(),
        accuracy,
        fvd,
        multimodality,
        multimodality_classes,
        generated_count: generated.len(),
        reference_count: reference.len(),
        seed,
        classifier_held_out_accuracy: clf.held_out_accuracy,
        provenance,
    })
}

/// Reports for several variants of one experiment, read side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub reports: Vec<EvalReport>,
    pub published_ntu26: ReferenceScores,
}

impl EvalSuite {
    pub fn new(reports: Vec<EvalReport>) -> Self {
        Self { reports, published_ntu26: PUBLISHED_NTU26 }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))
    }

    /// `variant,class,accuracy,count` rows, plus each variant's average.
    pub fn write_accuracy_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "variant,class,accuracy,count")?;
        for r in &self.reports {
            for (c, a, n) in &r.accuracy.per_class {
                writeln!(w, "{},{c},{a},{n}", r.name)?;
            }
            writeln!(w, "{},average,{},{}", r.name, r.accuracy.average, r.generated_count)?;
        }
        w.flush()?;
        Ok(())
    }
}
