use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{argmax, softmax, Network};
use crate::error::{Error, Result};

/// One staged network together with the size of its label space and its
/// vote weight.
#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub net: Network,
    pub classes: usize,
    pub weight: f64,
}

/// Networks from every curriculum stage, ordered by stage. The last one is
/// the final model whose label space contains all others.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let last = members
            .last()
            .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
        if last.classes != last.net.num_classes {
            return Err(Error::Composition(format!(
                "final model has {} outputs but claims {} classes",
                last.net.num_classes, last.classes
            )));
        }
        for (i, m) in members.iter().enumerate() {
            if m.classes == 0 || m.classes > m.net.num_classes {
                return Err(Error::Composition(format!(
                    "model {i} claims {} classes with {} outputs",
                    m.classes, m.net.num_classes
                )));
            }
            if i > 0 && m.classes < members[i - 1].classes {
                return Err(Error::Config("ensemble label spaces must be non-decreasing".into()));
            }
            if !(m.weight >= 0.0) || !m.weight.is_finite() {
                return Err(Error::Config(format!("model {i} has invalid vote weight {}", m.weight)));
            }
        }
        if members.iter().all(|m| m.weight == 0.0) {
            return Err(Error::Config("all vote weights are zero".into()));
        }
        Ok(EnsembleSpec { members })
    }

    /// Members weighted by their given accuracies, renormalized to sum to one.
    pub fn weighted_by_accuracy(nets: Vec<(Network, usize)>, accuracies: &[f64]) -> Result<Self> {
        if nets.len() != accuracies.len() {
            return Err(Error::Config("one accuracy per ensemble model is required".into()));
        }
        let sum: f64 = accuracies.iter().sum();
        let members = nets
            .into_iter()
            .zip(accuracies)
            .map(|((net, classes), &a)| EnsembleMember {
                net,
                classes,
                weight: if sum > 0.0 { a / sum } else { 1.0 },
            })
            .collect();
        Self::new(members)
    }

    pub fn final_classes(&self) -> usize {
        self.members.last().map(|m| m.classes).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "class")]
pub enum Outcome {
    Class(usize),
    NoDecision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    /// Threshold and vote across every staged model.
    Mutual,
    /// Threshold the final model alone.
    FinalOnly,
}

/// Per-input record of a mutual-inference decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// Final model's top class, which decides who abstains.
    pub final_argmax: usize,
    /// Top softmax probability of each model within its own label space.
    pub confidences: Vec<f64>,
    /// Top class of each model.
    pub predictions: Vec<usize>,
    /// Whether each model took part (its label space contains `final_argmax`).
    pub participating: Vec<bool>,
    pub outcome: Outcome,
}

/// Softmax outputs of every member on every input, so that many thresholds
/// can be evaluated from one set of forward passes.
#[derive(Clone, Debug)]
pub struct EnsembleOutputs {
    /// `confidence[m][s]`, `prediction[m][s]` for member `m`, sample `s`.
    pub confidence: Vec<Vec<f64>>,
    pub prediction: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl EnsembleOutputs {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn ensemble_outputs(spec: &EnsembleSpec, ds: &Dataset, idx: &[usize]) -> Result<EnsembleOutputs> {
    let mut confidence = vec![Vec::with_capacity(idx.len()); spec.members.len()];
    let mut prediction = vec![Vec::with_capacity(idx.len()); spec.members.len()];
    let mut labels = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let (x, l) = ds.batch(chunk);
        labels.extend(l);
        for (m, member) in spec.members.iter().enumerate() {
            let logits = member.net.forward(&x)?;
            for s in 0..chunk.len() {
                let row = &logits.row(s)[..member.classes];
                let p = softmax(row);
                let top = argmax(row);
                confidence[m].push(p[top]);
                prediction[m].push(top);
            }
        }
    }
    Ok(EnsembleOutputs { confidence, prediction, labels })
}

fn rejects(confidence: f64, delta: f64) -> bool {
    delta >= 1.0 || confidence < delta
}

fn decide(spec: &EnsembleSpec, out: &EnsembleOutputs, s: usize, delta: f64, procedure: Procedure) -> DecisionRecord {
    let last = spec.members.len() - 1;
    let final_argmax = out.prediction[last][s];
    let confidences: Vec<f64> = out.confidence.iter().map(|c| c[s]).collect();
    let predictions: Vec<usize> = out.prediction.iter().map(|p| p[s]).collect();
    let participating: Vec<bool> = match procedure {
        Procedure::Mutual => spec.members.iter().map(|m| final_argmax < m.classes).collect(),
        Procedure::FinalOnly => (0..spec.members.len()).map(|m| m == last).collect(),
    };
    let outcome = if participating
        .iter()
        .zip(&confidences)
        .any(|(&p, &c)| p && rejects(c, delta))
    {
        Outcome::NoDecision
    } else {
        let mut tally = vec![0.0f64; spec.final_classes()];
        for (m, member) in spec.members.iter().enumerate() {
            if participating[m] {
                tally[predictions[m]] += match procedure {
                    Procedure::Mutual => member.weight,
                    Procedure::FinalOnly => 1.0,
                };
            }
        }
        let best = tally.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..tally.len()).filter(|&c| tally[c] == best).collect();
        if winners.len() == 1 && best > 0.0 {
            Outcome::Class(winners[0])
        } else {
            Outcome::NoDecision
        }
    };
    DecisionRecord { final_argmax, confidences, predictions, participating, outcome }
}

/// Mutual-inference decisions for the selected samples at threshold `delta`.
pub fn mutual_infer(
    spec: &EnsembleSpec,
    ds: &Dataset,
    idx: &[usize],
    delta: f64,
    procedure: Procedure,
) -> Result<Vec<DecisionRecord>> {
    check_delta(delta)?;
    let out = ensemble_outputs(spec, ds, idx)?;
    Ok((0..out.len()).map(|s| decide(spec, &out, s, delta, procedure)).collect())
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must be in [0, 1], got {delta}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub delta: f64,
    /// Share of inputs misclassified without a threshold that are now rejected.
    pub tnr: f64,
    /// Share of inputs classified correctly without a threshold that are now rejected.
    pub fnr: f64,
    /// Share of all inputs rejected.
    pub rejection_rate: f64,
    /// Share of all inputs answered with the true label.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurve {
    pub procedure: Procedure,
    pub points: Vec<DetectionPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurves {
    pub mutual: DetectionCurve,
    pub final_only: DetectionCurve,
}

fn curve(spec: &EnsembleSpec, outputs: &[&EnsembleOutputs], deltas: &[f64], procedure: Procedure) -> DetectionCurve {
    // Reference decisions without a threshold: Some(correct?) when a class
    // was chosen, None when the vote was already undecided.
    let base: Vec<Option<bool>> = outputs
        .iter()
        .flat_map(|o| {
            (0..o.len()).map(move |s| match decide(spec, o, s, 0.0, procedure).outcome {
                Outcome::Class(c) => Some(c == o.labels[s]),
                Outcome::NoDecision => None,
            })
        })
        .collect();
    let positives = base.iter().filter(|b| **b == Some(true)).count();
    let negatives = base.iter().filter(|b| **b == Some(false)).count();
    let points = deltas
        .iter()
        .map(|&delta| {
            let (mut tn, mut fneg, mut rejected, mut correct) = (0usize, 0usize, 0usize, 0usize);
            let mut k = 0;
            for o in outputs {
                for s in 0..o.len() {
                    let outcome = decide(spec, o, s, delta, procedure).outcome;
                    if outcome == Outcome::NoDecision {
                        rejected += 1;
                        match base[k] {
                            Some(true) => fneg += 1,
                            Some(false) => tn += 1,
                            None => {}
                        }
                    } else if outcome == Outcome::Class(o.labels[s]) {
                        correct += 1;
                    }
                    k += 1;
                }
            }
            // An empty reference group is vacuously untouched below the
            // reject-all threshold and fully rejected at it.
            let frac = |a: usize, b: usize| {
                if b > 0 {
                    a as f64 / b as f64
                } else if delta >= 1.0 {
                    1.0
                } else {
                    0.0
                }
            };
            DetectionPoint {
                delta,
                tnr: frac(tn, negatives),
                fnr: frac(fneg, positives),
                rejection_rate: frac(rejected, base.len()),
                accuracy: if base.is_empty() { 0.0 } else { correct as f64 / base.len() as f64 },
            }
        })
        .collect();
    DetectionCurve { procedure, points }
}

/// Rejection curves over the union of a clean and an adversarial input set.
/// Inputs the procedure gets wrong at `delta = 0` are the negatives, those it
/// gets right the positives; inputs already undecided there count in neither.
pub fn detection_curve(
    spec: &EnsembleSpec,
    clean: (&Dataset, &[usize]),
    adversarial: &Dataset,
    deltas: &[f64],
) -> Result<DetectionCurves> {
    for &d in deltas {
        check_delta(d)?;
    }
    let clean_out = ensemble_outputs(spec, clean.0, clean.1)?;
    let all: Vec<usize> = (0..adversarial.len()).collect();
    let adv_out = ensemble_outputs(spec, adversarial, &all)?;
    let outputs = [&clean_out, &adv_out];
    Ok(DetectionCurves {
        mutual: curve(spec, &outputs, deltas, Procedure::Mutual),
        final_only: curve(spec, &outputs, deltas, Procedure::FinalOnly),
    })
}

/// Share of samples whose decision equals the true label.
pub fn decision_accuracy(records: &[DecisionRecord], labels: &[usize]) -> f64 {
    let ok = records
        .iter()
        .zip(labels)
        .filter(|(r, &l)| r.outcome == Outcome::Class(l))
        .count();
    ok as f64 / records.len().max(1) as f64
}
