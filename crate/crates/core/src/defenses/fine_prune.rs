//! Fine-pruning sweep: rank the penultimate dense layer's neurons by mean
//! activation over clean data, prune cumulatively from the quietest up, and
//! trace benign accuracy against attack success at each step.

use serde::Serialize;

use crate::datasets::LabeledImageSet;
use crate::defenses::DefenseReport;
use crate::image::Image;
use crate::metrics::attack_success_rate;
use crate::nn::{accuracy, capture_activations, prune_neurons, LayerId, Model, NnError};

#[derive(Debug, Clone, Serialize)]
pub struct PruneStep {
    pub fraction: f64,
    pub pruned: usize,
    pub benign_accuracy: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinePruneReport {
    pub steps: Vec<PruneStep>,
    /// Neuron indices in pruning order (ascending mean activation).
    pub order: Vec<usize>,
}

impl FinePruneReport {
    pub fn to_report(&self) -> DefenseReport {
        let base = &self.steps[0];
        let best = self
            .steps
            .iter()
            .filter(|s| s.benign_accuracy >= base.benign_accuracy - 0.05)
            .map(|s| s.asr)
            .fold(f64::INFINITY, f64::min);
        DefenseReport {
            defense: "fine-pruning".into(),
            threshold: 0.05,
            scores: serde_json::json!({
                "baseline_ba": base.benign_accuracy,
                "baseline_asr": base.asr,
                "min_asr_within_5pt_ba": best,
            }),
            verdict: format!(
                "lowest ASR {best:.3} reachable while keeping BA within 5 points of {:.3}",
                base.benign_accuracy
            ),
        }
    }

    pub fn csv_rows(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec!["fraction", "pruned", "benign_accuracy", "asr"];
        let rows = self
            .steps
            .iter()
            .map(|s| vec![format!("{}", s.fraction), format!("{}", s.pruned), format!("{}", s.benign_accuracy), format!("{}", s.asr)])
            .collect();
        (header, rows)
    }
}

/// Cumulative pruning sweep over `steps` evenly spaced fractions from 0 to 1
/// inclusive. No fine-tuning between steps.
pub fn fine_prune_sweep(
    model: &Model,
    clean_set: &LabeledImageSet,
    benign_test: &LabeledImageSet,
    poisoned_test: &[(Image, usize)],
    steps: usize,
) -> Result<FinePruneReport, NnError> {
    assert!(steps >= 2, "need at least the 0 and 1 endpoints");
    let acts = capture_activations(model, clean_set, LayerId::Hidden)?;
    let n = model.hidden.outputs;
    let mut mean = vec![0.0; n];
    for row in &acts {
        for (m, &a) in mean.iter_mut().zip(row) {
            *m += a;
        }
    }
    mean.iter_mut().for_each(|m| *m /= acts.len() as f64);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean[a].partial_cmp(&mean[b]).unwrap().then(a.cmp(&b)));

    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let fraction = s as f64 / (steps - 1) as f64;
        let count = (fraction * n as f64).round() as usize;
        let pruned_model = prune_neurons(model, LayerId::Hidden, &order[..count])?;
        out.push(PruneStep {
            fraction,
            pruned: count,
            benign_accuracy: accuracy(&pruned_model, benign_test)?,
            asr: attack_success_rate(&pruned_model, poisoned_test).map_err(|_| NnError::EmptyTrainingSet)?,
        });
    }
    Ok(FinePruneReport { steps: out, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{train, ModelConfig, TrainConfig};

    fn fixture() -> (Model, LabeledImageSet, LabeledImageSet, Vec<(Image, usize)>) {
        let train_set = crate::synth::generate(120, 1);
        let test_set = crate::synth::generate(40, 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 32, ..TrainConfig::default() };
        let (model, _) = train(&Model::init(ModelConfig::desk((28, 28, 1), 10, 1)), &train_set, &cfg).unwrap();
        let pairs: Vec<(Image, usize)> = test_set.images.iter().cloned().map(|i| (i, 3)).collect();
        (model, train_set, test_set, pairs)
    }

    #[test]
    fn endpoints_match_contract() {
        let (model, clean, test, pairs) = fixture();
        let r = fine_prune_sweep(&model, &clean, &test, &pairs, 3).unwrap();
        assert_eq!(r.steps.len(), 3);

        // fraction 0: untouched model
        assert_eq!(r.steps[0].pruned, 0);
        assert_eq!(r.steps[0].benign_accuracy, accuracy(&model, &test).unwrap());
        assert_eq!(r.steps[0].asr, attack_success_rate(&model, &pairs).unwrap());

        // fraction 1: every hidden neuron silenced → constant logits → BA is
        // the prior of whichever class the constant argmax lands on
        let last = r.steps.last().unwrap();
        assert_eq!(last.pruned, model.hidden.outputs);
        let full = prune_neurons(&model, LayerId::Hidden, &(0..model.hidden.outputs).collect::<Vec<_>>()).unwrap();
        let constant_class = full.predict_class(&test.images[0]).unwrap();
        for img in &test.images[1..] {
            assert_eq!(full.predict_class(img).unwrap(), constant_class);
        }
        let prior = test.labels.iter().filter(|&&l| l == constant_class).count() as f64 / test.len() as f64;
        assert_eq!(last.benign_accuracy, prior);
    }

    #[test]
    fn pruned_sets_are_nested_and_counts_monotone() {
        let (model, clean, test, pairs) = fixture();
        let r = fine_prune_sweep(&model, &clean, &test, &pairs, 5).unwrap();
        // cumulative pruning by construction: counts non-decreasing and each
        // step's set is a prefix of the fixed order
        let mut last = 0;
        for s in &r.steps {
            assert!(s.pruned >= last);
            last = s.pruned;
        }
        assert_eq!(r.order.len(), model.hidden.outputs);
        let mut sorted = r.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..model.hidden.outputs).collect::<Vec<_>>());
    }

    #[test]
    fn sweep_is_deterministic() {
        let (model, clean, test, pairs) = fixture();
        let a = fine_prune_sweep(&model, &clean, &test, &pairs, 4).unwrap();
        let b = fine_prune_sweep(&model, &clean, &test, &pairs, 4).unwrap();
        assert_eq!(a.order, b.order);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.benign_accuracy, y.benign_accuracy);
            assert_eq!(x.asr, y.asr);
        }
    }
}
