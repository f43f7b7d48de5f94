//! Experiment configuration: a single JSON document.

use std::path::{Path, PathBuf};

use cumnet::curriculum::{StagePlan, TrainConfig};
use cumnet::data::{ingest_idx, read_cifar, synth_blobs, synth_glyphs, Dataset, GlyphConfig};
use cumnet::engine::ArchSpec;
use cumnet::prune::PruneConfig;
use cumnet::robustness::{DEFAULT_FRACTIONS, DEFAULT_SIGMAS, TABLE_EPSILONS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Stroke-glyph images; `test_per_class` extra samples per class form the test set.
    SyntheticGlyphs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        side: usize,
        #[serde(default)]
        noise: Option<f32>,
        #[serde(default)]
        jitter: Option<f32>,
        #[serde(default)]
        max_shift: Option<i32>,
    },
    SyntheticBlobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dims: usize,
        separation: f32,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Cumulative class counts per stage, e.g. `[5, 10]`.
    pub stage_classes: Vec<usize>,
    pub stages: Vec<StagePlan>,
    /// Seed of a class permutation applied before splitting; natural order when absent.
    #[serde(default)]
    pub class_order_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteWeights {
    /// Each model's test accuracy on its own label space, renormalized.
    #[default]
    Accuracy,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_trials")]
    pub ablation_trials: usize,
    #[serde(default = "default_eps")]
    pub eps: Vec<f32>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Attack strength of the adversarial half of the detection population.
    #[serde(default = "default_detect_eps")]
    pub detect_eps: f32,
    #[serde(default)]
    pub vote_weights: VoteWeights,
}

fn default_sigmas() -> Vec<f64> {
    DEFAULT_SIGMAS.to_vec()
}
fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}
fn default_trials() -> usize {
    cumnet::robustness::ABLATION_TRIALS
}
fn default_eps() -> Vec<f32> {
    TABLE_EPSILONS.to_vec()
}
fn default_deltas() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}
fn default_detect_eps() -> f32 {
    0.05
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            sigmas: default_sigmas(),
            fractions: default_fractions(),
            ablation_trials: default_trials(),
            eps: default_eps(),
            deltas: default_deltas(),
            detect_eps: default_detect_eps(),
            vote_weights: VoteWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: data generation, weight init and sweeps derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    /// Architecture of the first-stage network (its classifier width is
    /// replaced by the first stage's class count).
    pub architecture: ArchSpec,
    pub curriculum: CurriculumConfig,
    /// Train the final architecture from scratch on all classes for comparison.
    #[serde(default)]
    pub baseline: Option<TrainConfig>,
    /// Prune configurations evaluated on the final network.
    #[serde(default)]
    pub prune_variants: Vec<PruneConfig>,
    #[serde(default)]
    pub robustness: Option<RobustnessConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// SHA-256 of the config serialized with sorted keys and no whitespace.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        match &self.dataset {
            DatasetSource::SyntheticGlyphs { classes, per_class, test_per_class, side, .. } => {
                if *classes == 0 || *per_class == 0 || *test_per_class == 0 || *side < 4 {
                    return bad("synthetic glyph parameters must be positive (side >= 4)".into());
                }
            }
            DatasetSource::SyntheticBlobs { classes, per_class, test_per_class, dims, separation } => {
                if *classes == 0 || *per_class == 0 || *test_per_class == 0 || *dims == 0 || !(*separation > 0.0) {
                    return bad("synthetic blob parameters must be positive".into());
                }
            }
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.exists() {
                        return bad(format!("dataset file {} does not exist", p.display()));
                    }
                }
            }
            DatasetSource::Cifar { train, test, classes } => {
                if train.is_empty() || test.is_empty() || *classes == 0 {
                    return bad("cifar source needs train files, test files and a class count".into());
                }
                for p in train.iter().chain(test) {
                    if !p.exists() {
                        return bad(format!("dataset file {} does not exist", p.display()));
                    }
                }
            }
        }
        let c = &self.curriculum;
        if c.stage_classes.len() != c.stages.len() {
            return bad(format!(
                "{} stage class counts but {} stage plans",
                c.stage_classes.len(),
                c.stages.len()
            ));
        }
        if let Some(total) = self.total_classes() {
            cumnet::curriculum::validate_schedule(&c.stage_classes, total)?;
        }
        if let Some(first) = c.stages.first() {
            if !first.morphs.is_empty() || first.prune.is_some() {
                return bad("the first stage cannot morph or prune".into());
            }
        }
        for s in &c.stages {
            s.train.validate()?;
            if let Some(p) = &s.prune {
                p.validate()?;
            }
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
        }
        for p in &self.prune_variants {
            p.validate()?;
        }
        if let Some(r) = &self.robustness {
            if r.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return bad("noise sigmas must be finite and >= 0".into());
            }
            if r.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                return bad("ablation fractions must lie in [0, 1]".into());
            }
            if r.eps.iter().chain([&r.detect_eps]).any(|e| !(0.0..=1.0).contains(e)) {
                return bad("attack strengths must lie in [0, 1]".into());
            }
            if r.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
                return bad("rejection thresholds must lie in [0, 1]".into());
            }
            if r.ablation_trials == 0 {
                return bad("ablation needs at least one trial".into());
            }
        }
        Ok(())
    }

    /// Class count known without reading files.
    fn total_classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::SyntheticGlyphs { classes, .. }
            | DatasetSource::SyntheticBlobs { classes, .. }
            | DatasetSource::Cifar { classes, .. } => Some(*classes),
            DatasetSource::Idx { .. } => None,
        }
    }

    /// Loads or generates `(train, test)`, with the configured class order applied.
    pub fn load_data(&self) -> CliResult<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetSource::SyntheticGlyphs { classes, per_class, test_per_class, side, noise, jitter, max_shift } => {
                let mut g = GlyphConfig::new(*classes, per_class + test_per_class, *side, self.seed);
                if let Some(n) = noise {
                    g.noise = *n;
                }
                if let Some(j) = jitter {
                    g.jitter = *j;
                }
                if let Some(s) = max_shift {
                    g.max_shift = *s;
                }
                split_per_class(&synth_glyphs(&g)?, *per_class)
            }
            DatasetSource::SyntheticBlobs { classes, per_class, test_per_class, dims, separation } => {
                let all = synth_blobs(*classes, per_class + test_per_class, *dims, *separation, self.seed)?;
                split_per_class(&all, *per_class)
            }
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels } => {
                let train = ingest_idx(train_images, train_labels)?;
                let mut test = ingest_idx(test_images, test_labels)?;
                test.num_classes = test.num_classes.max(train.num_classes);
                let mut train = train;
                train.num_classes = test.num_classes;
                (train, test)
            }
            DatasetSource::Cifar { train, test, classes } => (read_cifar(train, *classes)?, read_cifar(test, *classes)?),
        };
        match self.curriculum.class_order_seed {
            None => Ok((train, test)),
            Some(seed) => {
                let mut order: Vec<usize> = (0..train.num_classes).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Ok((train.relabel(&order)?, test.relabel(&order)?))
            }
        }
    }
}

/// First `train_per_class` samples of each class train, the rest test.
fn split_per_class(all: &Dataset, train_per_class: usize) -> (Dataset, Dataset) {
    let mut seen = vec![0usize; all.num_classes];
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, &l) in all.labels.iter().enumerate() {
        if seen[l] < train_per_class {
            tr.push(i);
        } else {
            te.push(i);
        }
        seen[l] += 1;
    }
    (all.subset(&tr), all.subset(&te))
}
