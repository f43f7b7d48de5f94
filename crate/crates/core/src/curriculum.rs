//! Class-incremental splits and the staged train → grow → retrain loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complexity::{network_mac, zero_aware_mac, StageCost};
use crate::data::Dataset;
use crate::engine::{argmax, save_checkpoint, Mode, Network, Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::morph::{expand_output, MorphDirective, MorphLog, DEFAULT_EXPAND_SCALE};
use crate::prune::{freeze_net2net_zero_mask, prune_filters, PruneConfig};

/// Nested per-stage sample indices: stage `i` holds every sample whose label
/// is below `stage_classes[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSplit {
    pub stage_classes: Vec<usize>,
    pub indices: Vec<Vec<usize>>,
}

pub fn validate_schedule(stage_classes: &[usize], total: usize) -> Result<()> {
    if stage_classes.is_empty() {
        return Err(Error::Config("stage schedule is empty".into()));
    }
    if stage_classes[0] == 0 || stage_classes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "stage class counts must be positive and strictly increasing, got {stage_classes:?}"
        )));
    }
    if *stage_classes.last().unwrap() != total {
        return Err(Error::Config(format!(
            "last stage covers {} classes but the dataset has {total}",
            stage_classes.last().unwrap()
        )));
    }
    Ok(())
}

pub fn split_dataset(ds: &Dataset, stage_classes: &[usize]) -> Result<StageSplit> {
    validate_schedule(stage_classes, ds.num_classes)?;
    let indices = stage_classes
        .iter()
        .map(|&k| (0..ds.len()).filter(|&i| ds.labels[i] < k).collect())
        .collect();
    Ok(StageSplit {
        stage_classes: stage_classes.to_vec(),
        indices,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIncrementalSplit {
    pub stage_classes: Vec<usize>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl ClassIncrementalSplit {
    pub fn new(train: &Dataset, test: &Dataset, stage_classes: &[usize]) -> Result<Self> {
        if train.num_classes != test.num_classes {
            return Err(Error::Config("train and test class counts differ".into()));
        }
        Ok(ClassIncrementalSplit {
            stage_classes: stage_classes.to_vec(),
            train: split_dataset(train, stage_classes)?.indices,
            test: split_dataset(test, stage_classes)?.indices,
        })
    }

    pub fn stages(&self) -> usize {
        self.stage_classes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epoch cap; early stopping may end sooner.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate multiplier applied after every epoch.
    #[serde(default = "unit")]
    pub lr_decay: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// Epochs without sufficient improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Improvement in test accuracy (absolute) that resets patience.
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    /// Seed for per-epoch shuffling.
    #[serde(default)]
    pub seed: u64,
}

fn unit() -> f32 {
    1.0
}
fn default_patience() -> usize {
    3
}
fn default_min_delta() -> f64 {
    0.002
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least one epoch".into()));
        }
        Ok(())
    }
}

/// Borrowed view of one stage's data.
#[derive(Clone, Copy, Debug)]
pub struct StageData<'a> {
    pub train: &'a Dataset,
    pub train_idx: &'a [usize],
    pub test: &'a Dataset,
    pub test_idx: &'a [usize],
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct StageTraining {
    pub net: Network,
    /// Optimizer steps executed.
    pub iterations: u64,
    pub epochs: usize,
    /// Test accuracy of the returned network.
    pub accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Fraction of `idx` whose argmax over the first `classes` logits matches the label.
pub fn accuracy_over(net: &Network, ds: &Dataset, idx: &[usize], classes: usize) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    Ok(correct_count(net, ds, idx, classes)? as f64 / idx.len() as f64)
}

pub fn accuracy(net: &Network, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    accuracy_over(net, ds, idx, net.num_classes)
}

/// Number of samples classified correctly using the first `classes` logits.
pub fn correct_count(net: &Network, ds: &Dataset, idx: &[usize], classes: usize) -> Result<usize> {
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let (x, labels) = ds.batch(chunk);
        let logits = net.forward(&x)?;
        for (s, &l) in labels.iter().enumerate() {
            if argmax(&logits.row(s)[..classes.min(net.num_classes)]) == l {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Trains with per-epoch shuffling until test accuracy stops improving by more
/// than `min_delta` for `patience` epochs or the epoch cap is reached. Returns
/// the best-accuracy network seen.
pub fn train_stage(net: &Network, data: StageData<'_>, cfg: &TrainConfig) -> Result<StageTraining> {
    cfg.validate()?;
    if net.num_classes != data.classes {
        return Err(Error::Config(format!(
            "network has {} outputs but the stage has {} classes",
            net.num_classes, data.classes
        )));
    }
    let mut current = net.clone();
    let mut best = current.clone();
    let mut best_acc = accuracy(&current, data.test, data.test_idx)?;
    let mut reference = best_acc;
    let mut stale = 0;
    let mut iterations = 0u64;
    let mut history = Vec::new();
    let mut opt = Sgd::new();
    let mut order = data.train_idx.to_vec();
    let mut lr = cfg.lr;
    let mut epochs = 0;

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.train.batch(chunk);
            let step = current
                .forward_cached(&x, Mode::Train)
                .and_then(|(logits, cache)| current.backward(&cache, &logits, &labels));
            let back = match step {
                Ok(b) if b.loss.is_finite() => b,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        iteration: iterations as usize,
                        last_good: Box::new(best),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += back.loss as f64 * chunk.len() as f64;
            opt.step(
                &mut current,
                &back.grads,
                SgdConfig {
                    lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                },
            )?;
            iterations += 1;
        }
        epochs += 1;
        lr *= cfg.lr_decay;
        let acc = accuracy(&current, data.test, data.test_idx)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / order.len().max(1) as f64,
            accuracy: acc,
        });
        if acc > best_acc {
            best_acc = acc;
            best = current.clone();
        }
        if acc > reference + cfg.min_delta {
            reference = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(StageTraining {
        net: best,
        iterations,
        epochs,
        accuracy: best_acc,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Morphs applied (in order) before this stage trains. Must be empty for stage 1.
    #[serde(default)]
    pub morphs: Vec<MorphDirective>,
    pub train: TrainConfig,
    /// Prune the previous stage's network before growing it.
    #[serde(default)]
    pub prune: Option<PruneConfig>,
    /// Freeze the zero positions introduced by this stage's deepening morphs.
    #[serde(default)]
    pub keep_zero_mask: bool,
    /// Scale of the new classifier rows.
    #[serde(default)]
    pub expand_scale: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<StagePlan>,
}

impl CurriculumPlan {
    pub fn validate(&self, split: &ClassIncrementalSplit) -> Result<()> {
        if self.stages.len() != split.stages() {
            return Err(Error::Config(format!(
                "plan has {} stages, split has {}",
                self.stages.len(),
                split.stages()
            )));
        }
        if !self.stages[0].morphs.is_empty() || self.stages[0].prune.is_some() {
            return Err(Error::Config("the first stage cannot morph or prune".into()));
        }
        for s in &self.stages {
            s.train.validate()?;
            if let Some(p) = &s.prune {
                p.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 1-based stage number.
    pub stage: usize,
    pub classes: usize,
    /// Final test accuracy on this stage's test subset.
    pub accuracy: f64,
    /// Freshly grown network on the previous stage's test subset, old-class logits only.
    pub handoff_accuracy: Option<f64>,
    /// Same, but taking the argmax over every logit including new classes.
    pub handoff_full_accuracy: Option<f64>,
    pub iterations: u64,
    pub epochs: usize,
    /// Per-sample forward MACs.
    pub macs: u64,
    pub zero_aware_macs: u64,
    pub batch_size: usize,
    pub nonzero_params: usize,
    pub checkpoint: String,
    pub wall_time_s: f64,
}

impl StageReport {
    pub fn cost(&self) -> StageCost {
        StageCost {
            iterations: self.iterations,
            macs_per_forward: self.macs,
            batch_size: self.batch_size as u64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CumulativeRun {
    pub reports: Vec<StageReport>,
    /// Trained network of every stage, in order; the last is the final model.
    pub stage_nets: Vec<Network>,
}

impl CumulativeRun {
    pub fn final_net(&self) -> &Network {
        self.stage_nets.last().expect("at least one stage")
    }
}

/// Where and how stage checkpoints are written.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// File-name prefix for checkpoints.
    pub label: String,
}

/// Grows the previous stage's network for stage `i`: optional prune, the
/// stage's morphs, classifier expansion and optional zero-mask freezing.
pub fn grow(net: &Network, plan: &StagePlan, new_classes: usize) -> Result<Network> {
    let mut net = net.clone();
    if let Some(p) = &plan.prune {
        net = prune_filters(&net, p)?.0;
    }
    let first_new_entry = net.morph_log.entries.len();
    for m in &plan.morphs {
        net = m.apply(&net)?.0;
    }
    if new_classes > net.num_classes {
        let scale = plan.expand_scale.unwrap_or(DEFAULT_EXPAND_SCALE);
        net = expand_output(&net, new_classes - net.num_classes, scale)?.0;
    }
    let keep = plan.keep_zero_mask || plan.prune.is_some_and(|p| p.keep_zero_mask);
    if keep {
        let stage_log = MorphLog {
            entries: net.morph_log.entries[first_new_entry..].to_vec(),
        };
        net = freeze_net2net_zero_mask(&net, &stage_log)?;
    }
    Ok(net)
}

/// Runs the full staged schedule starting from `base`.
pub fn run_cumulative(
    plan: &CurriculumPlan,
    split: &ClassIncrementalSplit,
    train: &Dataset,
    test: &Dataset,
    base: &Network,
    opts: &RunOptions,
) -> Result<CumulativeRun> {
    plan.validate(split)?;
    if base.num_classes != split.stage_classes[0] {
        return Err(Error::Config(format!(
            "base network has {} outputs, first stage has {} classes",
            base.num_classes, split.stage_classes[0]
        )));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut reports = Vec::new();
    let mut nets: Vec<Network> = Vec::new();
    for (i, stage) in plan.stages.iter().enumerate() {
        let started = Instant::now();
        let classes = split.stage_classes[i];
        let (net, handoff, handoff_full) = match nets.last() {
            None => (base.clone(), None, None),
            Some(prev) => {
                let grown = grow(prev, stage, classes)?;
                let old = split.stage_classes[i - 1];
                let h = accuracy_over(&grown, test, &split.test[i - 1], old)?;
                let hf = accuracy(&grown, test, &split.test[i - 1])?;
                (grown, Some(h), Some(hf))
            }
        };
        let data = StageData {
            train,
            train_idx: &split.train[i],
            test,
            test_idx: &split.test[i],
            classes,
        };
        let mut tcfg = stage.train.clone();
        tcfg.seed = tcfg.seed.wrapping_add(i as u64);
        let trained = train_stage(&net, data, &tcfg)?;
        let name = format!("{}stage{}.mtck", opts.label, i + 1);
        let checkpoint = match &opts.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(&name);
                save_checkpoint(&trained.net, &path)?;
                path.display().to_string()
            }
            None => name,
        };
        reports.push(StageReport {
            stage: i + 1,
            classes,
            accuracy: trained.accuracy,
            handoff_accuracy: handoff,
            handoff_full_accuracy: handoff_full,
            iterations: trained.iterations,
            epochs: trained.epochs,
            macs: network_mac(&trained.net)?,
            zero_aware_macs: zero_aware_mac(&trained.net)?,
            batch_size: stage.train.batch_size,
            nonzero_params: trained.net.nonzero_param_count(),
            checkpoint,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        nets.push(trained.net);
    }
    Ok(CumulativeRun {
        reports,
        stage_nets: nets,
    })
}
