//! The composite experiment: split, cumulative and baseline runs, pruning
//! variants, complexity report and robustness suite.

use std::path::PathBuf;

use cumnet::complexity::{network_mac, training_complexity, zero_aware_mac, ComplexityReport, CostModel};
use cumnet::curriculum::{
    accuracy, grow, run_cumulative, ClassIncrementalSplit, CumulativeRun, CurriculumPlan, RunOptions, StagePlan,
    StageReport, TrainConfig,
};
use cumnet::data::Dataset;
use cumnet::engine::{ArchSpec, LayerSpec, Network};
use cumnet::par;
use cumnet::prune::{conv_nonzero_fraction, prune_filters, PruneScope};
use cumnet::robustness::{
    adversarial_dataset, decision_accuracy, detection_curve, eval_ablation, eval_gaussian_noise, mutual_infer,
    DetectionCurves, EnsembleSpec, InputRange, Procedure,
};

use crate::config::{ExperimentConfig, RobustnessConfig, VoteWeights};
use crate::error::{CliError, CliResult};
use crate::output::{num, opt, Manifest, Outputs, StepRecord, StepStatus};
use crate::svg::{line_chart, Series};

/// The configured architecture with its classifier sized for `classes`.
pub fn arch_for(cfg: &ExperimentConfig, classes: usize) -> CliResult<ArchSpec> {
    let mut arch = cfg.architecture.clone();
    match arch.layers.iter_mut().rev().find(|l| matches!(l, LayerSpec::Dense { .. })) {
        Some(LayerSpec::Dense { out }) => *out = classes,
        _ => return Err(CliError::Config("architecture needs a final dense classifier".into())),
    }
    Ok(arch)
}

pub fn plan(cfg: &ExperimentConfig) -> CurriculumPlan {
    CurriculumPlan { stages: cfg.curriculum.stages.clone() }
}

/// Architecture of the last stage, found by growing an untrained copy of the
/// first-stage network through the morph schedule.
pub fn final_arch(cfg: &ExperimentConfig) -> CliResult<ArchSpec> {
    let classes = &cfg.curriculum.stage_classes;
    let mut net = arch_for(cfg, classes[0])?.build(cfg.seed)?;
    for (i, stage) in cfg.curriculum.stages.iter().enumerate().skip(1) {
        let shape_only = StagePlan { prune: None, keep_zero_mask: false, ..stage.clone() };
        net = grow(&net, &shape_only, classes[i])?;
    }
    Ok(net.arch())
}

/// Human-readable table of what `run` would do.
pub fn plan_table(cfg: &ExperimentConfig) -> CliResult<String> {
    let mut s = String::from("stage  classes  morphs                          prune        max_epochs  batch  lr\n");
    for (i, st) in cfg.curriculum.stages.iter().enumerate() {
        let morphs = serde_json::to_string(&st.morphs)?;
        let prune = st
            .prune
            .map(|p| format!("R={} {:?}", p.ratio, p.scope))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<6} {:<8} {:<31} {:<12} {:<11} {:<6} {}\n",
            i + 1,
            cfg.curriculum.stage_classes[i],
            morphs,
            prune,
            st.train.max_epochs,
            st.train.batch_size,
            st.train.lr
        ));
    }
    if let Some(b) = &cfg.baseline {
        s.push_str(&format!(
            "baseline {:<6} {:<31} {:<12} {:<11} {:<6} {}\n",
            cfg.curriculum.stage_classes.last().copied().unwrap_or(0),
            "(final architecture, from scratch)",
            "-",
            b.max_epochs,
            b.batch_size,
            b.lr
        ));
    }
    Ok(s)
}

/// Everything a finished run produced, for callers that want more than files.
pub struct RunArtifacts {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub cumulative: Option<CumulativeRun>,
    pub baseline: Option<CumulativeRun>,
    pub complexity: Option<ComplexityReport>,
    pub detection: Option<DetectionCurves>,
    /// First failure, which decides the exit code; later steps still ran
    /// where their inputs were available.
    pub first_error: Option<CliError>,
}

struct Steps {
    records: Vec<StepRecord>,
    first_error: Option<CliError>,
}

impl Steps {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> CliResult<T>) -> Option<T> {
        match f() {
            Ok(v) => {
                self.records.push(StepRecord { step: name.into(), status: StepStatus::Ok, error: None });
                Some(v)
            }
            Err(e) => {
                self.records.push(StepRecord {
                    step: name.into(),
                    status: StepStatus::Failed,
                    error: Some(e.to_string()),
                });
                self.first_error.get_or_insert(e);
                None
            }
        }
    }

    fn skip(&mut self, name: &str) {
        self.records.push(StepRecord { step: name.into(), status: StepStatus::Skipped, error: None });
    }
}

fn stage_rows(run: &str, reports: &[StageReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                run.to_string(),
                r.stage.to_string(),
                r.classes.to_string(),
                num(r.accuracy),
                opt(r.handoff_accuracy),
                opt(r.handoff_full_accuracy),
                r.iterations.to_string(),
                r.epochs.to_string(),
                r.macs.to_string(),
                r.zero_aware_macs.to_string(),
                r.nonzero_params.to_string(),
                r.checkpoint.clone(),
                format!("{:.3}", r.wall_time_s),
            ]
        })
        .collect()
}

pub const STAGE_HEADER: [&str; 13] = [
    "run",
    "stage",
    "classes",
    "accuracy",
    "handoff_accuracy",
    "handoff_full_accuracy",
    "iterations",
    "epochs",
    "macs",
    "zero_aware_macs",
    "nonzero_params",
    "checkpoint",
    "wall_time_s",
];

fn baseline_run(
    cfg: &ExperimentConfig,
    tcfg: &TrainConfig,
    split: &ClassIncrementalSplit,
    train: &Dataset,
    test: &Dataset,
    ckpt: &std::path::Path,
) -> CliResult<CumulativeRun> {
    let all = *split.stage_classes.last().expect("validated schedule");
    let one = ClassIncrementalSplit::new(train, test, &[all])?;
    let net = final_arch(cfg)?.build(cfg.seed.wrapping_add(1))?;
    let plan = CurriculumPlan {
        stages: vec![StagePlan {
            morphs: vec![],
            train: tcfg.clone(),
            prune: None,
            keep_zero_mask: false,
            expand_scale: None,
        }],
    };
    let opts = RunOptions { checkpoint_dir: Some(ckpt.to_path_buf()), label: "baseline_".into() };
    Ok(run_cumulative(&plan, &one, train, test, &net, &opts)?)
}

fn complexity_rows(
    cum: &CumulativeRun,
    base: Option<&CumulativeRun>,
) -> CliResult<(ComplexityReport, Vec<Vec<String>>)> {
    let costs = |r: &CumulativeRun| r.reports.iter().map(|s| s.cost()).collect::<Vec<_>>();
    let rep = training_complexity(&costs(cum), CostModel::UNIT)?;
    let mut train_rep = training_complexity(&costs(cum), CostModel::default())?;
    let mut rows = Vec::new();
    let mut push = |run: &str, reports: &[StageReport], unit: &ComplexityReport, tr: &ComplexityReport| {
        for (i, r) in reports.iter().enumerate() {
            rows.push(vec![
                run.into(),
                r.stage.to_string(),
                r.classes.to_string(),
                num(r.accuracy),
                r.iterations.to_string(),
                r.macs.to_string(),
                unit.stages[i].product.to_string(),
                tr.stages[i].product.to_string(),
                String::new(),
            ]);
        }
    };
    push("cumulative", &cum.reports, &rep, &train_rep);
    let mut totals = vec![(
        "cumulative",
        rep.total,
        train_rep.total,
        cum.reports.last().map(|r| r.accuracy).unwrap_or(0.0),
    )];
    if let Some(b) = base {
        let brep = training_complexity(&costs(b), CostModel::UNIT)?;
        let btrain = training_complexity(&costs(b), CostModel::default())?;
        push("baseline", &b.reports, &brep, &btrain);
        totals.push(("baseline", brep.total, btrain.total, b.reports[0].accuracy));
        train_rep = train_rep.with_baseline(&btrain);
    }
    for (run, m, mt, acc) in totals {
        let ratio = if run == "cumulative" { opt(train_rep.ratio) } else { String::new() };
        rows.push(vec![
            run.into(),
            "total".into(),
            String::new(),
            num(acc),
            String::new(),
            String::new(),
            m.to_string(),
            mt.to_string(),
            ratio,
        ]);
    }
    Ok((train_rep, rows))
}

pub const TABLE1_HEADER: [&str; 9] = [
    "run",
    "stage",
    "classes",
    "accuracy",
    "iterations",
    "macs",
    "m",
    "m_train",
    "ratio_to_baseline",
];

/// Vote weights per the config: stage accuracies or uniform.
pub fn ensemble_for(run: &CumulativeRun, weights: VoteWeights) -> CliResult<EnsembleSpec> {
    let nets: Vec<(Network, usize)> = run
        .stage_nets
        .iter()
        .zip(&run.reports)
        .map(|(n, r)| (n.clone(), r.classes))
        .collect();
    let acc: Vec<f64> = match weights {
        VoteWeights::Accuracy => run.reports.iter().map(|r| r.accuracy).collect(),
        VoteWeights::Uniform => vec![1.0; nets.len()],
    };
    Ok(EnsembleSpec::weighted_by_accuracy(nets, &acc)?)
}

pub fn noise_and_ablation(
    out: &mut Outputs,
    net: &Network,
    test: &Dataset,
    r: &RobustnessConfig,
    seed: u64,
) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let noise = eval_gaussian_noise(net, test, &idx, &r.sigmas, InputRange::default(), seed)?;
    let rows: Vec<Vec<String>> = r.sigmas.iter().zip(&noise).map(|(s, a)| vec![num(*s), num(*a)]).collect();
    out.csv("noise.csv", &["sigma", "accuracy"], &rows)?;
    let svg = line_chart(
        "Accuracy under gaussian input noise",
        "noise sigma",
        "accuracy",
        &[Series { name: "final", points: r.sigmas.iter().copied().zip(noise.iter().copied()).collect() }],
    );
    out.text("svg", "noise.svg", &svg)?;

    let abl = eval_ablation(net, test, &idx, &r.fractions, r.ablation_trials, seed)?;
    let rows: Vec<Vec<String>> = r.fractions.iter().zip(&abl).map(|(f, a)| vec![num(*f), num(*a)]).collect();
    out.csv("ablation.csv", &["fraction", "accuracy"], &rows)?;
    let svg = line_chart(
        "Accuracy with feature maps removed",
        "fraction of feature maps removed",
        "accuracy",
        &[Series { name: "final", points: r.fractions.iter().copied().zip(abl.iter().copied()).collect() }],
    );
    out.text("svg", "ablation.svg", &svg)?;
    Ok((noise, abl))
}

/// `(eps, acc_mi, acc_nomi, acc_baseline)` rows. MI and the final model face
/// attacks crafted on the final model; the baseline faces attacks crafted on
/// itself.
pub fn attack_table(
    spec: &EnsembleSpec,
    baseline: Option<&Network>,
    test: &Dataset,
    eps: &[f32],
) -> CliResult<Vec<(f32, f64, f64, Option<f64>)>> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let final_net = &spec.members.last().expect("validated ensemble").net;
    let rows = par::map_slice(eps, |&e| -> CliResult<(f32, f64, f64, Option<f64>)> {
        let adv = adversarial_dataset(final_net, test, &idx, e, InputRange::default())?;
        let all: Vec<usize> = (0..adv.len()).collect();
        let mi = decision_accuracy(&mutual_infer(spec, &adv, &all, 0.0, Procedure::Mutual)?, &adv.labels);
        let nomi = accuracy(final_net, &adv, &all)?;
        let base = match baseline {
            Some(b) => {
                let adv_b = adversarial_dataset(b, test, &idx, e, InputRange::default())?;
                Some(accuracy(b, &adv_b, &all)?)
            }
            None => None,
        };
        Ok((e, mi, nomi, base))
    });
    rows.into_iter().collect()
}

pub fn write_attack_table(out: &mut Outputs, rows: &[(f32, f64, f64, Option<f64>)]) -> CliResult<()> {
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(e, mi, nomi, b)| vec![e.to_string(), num(*mi), num(*nomi), opt(*b)])
        .collect();
    out.csv("table3.csv", &["eps", "acc_mi", "acc_nomi", "acc_baseline"], &csv_rows)?;
    let mut series = vec![
        Series { name: "MI", points: rows.iter().map(|r| (r.0 as f64, r.1)).collect() },
        Series { name: "no MI", points: rows.iter().map(|r| (r.0 as f64, r.2)).collect() },
    ];
    if rows.iter().all(|r| r.3.is_some()) {
        series.push(Series { name: "baseline", points: rows.iter().map(|r| (r.0 as f64, r.3.unwrap_or(0.0))).collect() });
    }
    out.text("svg", "table3.svg", &line_chart("Accuracy under FGSM", "eps", "accuracy", &series))?;
    Ok(())
}

pub fn detection(
    out: &mut Outputs,
    spec: &EnsembleSpec,
    test: &Dataset,
    r: &RobustnessConfig,
) -> CliResult<DetectionCurves> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let final_net = &spec.members.last().expect("validated ensemble").net;
    let adv = adversarial_dataset(final_net, test, &idx, r.detect_eps, InputRange::default())?;
    let curves = detection_curve(spec, (test, &idx), &adv, &r.deltas)?;
    let rows: Vec<Vec<String>> = curves
        .mutual
        .points
        .iter()
        .zip(&curves.final_only.points)
        .map(|(m, f)| vec![num(m.delta), num(m.tnr), num(m.fnr), num(f.tnr), num(f.fnr)])
        .collect();
    out.csv("detection.csv", &["delta", "tnr_mi", "fnr_mi", "tnr_nomi", "fnr_nomi"], &rows)?;
    let roc = |c: &cumnet::robustness::DetectionCurve| c.points.iter().map(|p| (p.fnr, p.tnr)).collect();
    let svg = line_chart(
        &format!("Rejection on clean + FGSM(eps={}) inputs", r.detect_eps),
        "FNR (correct inputs rejected)",
        "TNR (wrong inputs rejected)",
        &[
            Series { name: "MI", points: roc(&curves.mutual) },
            Series { name: "no MI", points: roc(&curves.final_only) },
        ],
    );
    out.text("svg", "detection.svg", &svg)?;
    Ok(curves)
}

fn prune_rows(net: &Network, test: &Dataset, cfg: &ExperimentConfig) -> CliResult<Vec<Vec<String>>> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let row = |label: String, ratio: f64, scope: &str, n: &Network, status: &str| -> CliResult<Vec<String>> {
        Ok(vec![
            label,
            num(ratio),
            scope.into(),
            n.nonzero_param_count().to_string(),
            n.param_count().to_string(),
            num(conv_nonzero_fraction(n)),
            network_mac(n)?.to_string(),
            zero_aware_mac(n)?.to_string(),
            num(accuracy(n, test, &idx)?),
            status.into(),
        ])
    };
    let mut rows = vec![row("final".into(), 0.0, "-", net, "ok")?];
    for (k, p) in cfg.prune_variants.iter().enumerate() {
        let scope = match p.scope {
            PruneScope::Global => "global",
            PruneScope::PerLayer => "per_layer",
        };
        let label = format!("variant{}", k + 1);
        match prune_filters(net, p) {
            Ok((pruned, _)) => rows.push(row(label, p.ratio, scope, &pruned, "ok")?),
            Err(e @ cumnet::Error::LayerCollapse { .. }) => rows.push(vec![
                label,
                num(p.ratio),
                scope.into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ]),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}

pub const TABLE2_HEADER: [&str; 10] = [
    "network",
    "ratio",
    "scope",
    "nonzero_params",
    "total_params",
    "conv_nonzero_fraction",
    "macs",
    "zero_aware_macs",
    "accuracy",
    "status",
];

/// Executes the whole configured experiment and writes its manifest.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunArtifacts> {
    cfg.validate()?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let ckpt = out.path("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let mut steps = Steps { records: Vec::new(), first_error: None };

    let data = steps.run("data", || {
        let (train, test) = cfg.load_data()?;
        let split = ClassIncrementalSplit::new(&train, &test, &cfg.curriculum.stage_classes)?;
        let summary = serde_json::json!({
            "stage_classes": split.stage_classes,
            "train_sizes": split.train.iter().map(Vec::len).collect::<Vec<_>>(),
            "test_sizes": split.test.iter().map(Vec::len).collect::<Vec<_>>(),
            "train_histogram": train.label_histogram(),
            "test_histogram": test.label_histogram(),
        });
        out.text("json", "split.json", &serde_json::to_string_pretty(&summary)?)?;
        Ok((train, test, split))
    });

    let (mut cumulative, mut baseline) = (None, None);
    if let Some((train, test, split)) = &data {
        let (c, b) = par::join(
            || -> CliResult<CumulativeRun> {
                let base = arch_for(cfg, cfg.curriculum.stage_classes[0])?.build(cfg.seed)?;
                let opts = RunOptions { checkpoint_dir: Some(ckpt.clone()), label: "cumulative_".into() };
                Ok(run_cumulative(&plan(cfg), split, train, test, &base, &opts)?)
            },
            || cfg.baseline.as_ref().map(|t| baseline_run(cfg, t, split, train, test, &ckpt)),
        );
        cumulative = steps.run("cumulative", || c);
        match b {
            Some(b) => baseline = steps.run("baseline", || b),
            None => steps.skip("baseline"),
        }
    } else {
        steps.skip("cumulative");
        steps.skip("baseline");
    }
    for run in cumulative.iter().chain(&baseline) {
        for r in &run.reports {
            out.record("checkpoint", PathBuf::from(&r.checkpoint));
        }
    }

    let mut complexity = None;
    if let Some(cum) = &cumulative {
        complexity = steps.run("complexity", || {
            let mut rows = stage_rows("cumulative", &cum.reports);
            if let Some(b) = &baseline {
                rows.extend(stage_rows("baseline", &b.reports));
            }
            out.csv("stages.csv", &STAGE_HEADER, &rows)?;
            let (rep, t1) = complexity_rows(cum, baseline.as_ref())?;
            out.csv("table1.csv", &TABLE1_HEADER, &t1)?;
            Ok(rep)
        });
    } else {
        steps.skip("complexity");
    }

    let mut detection_curves = None;
    match (&cumulative, &data) {
        (Some(cum), Some((_, test, _))) => {
            if cfg.prune_variants.is_empty() {
                steps.skip("prune");
            } else {
                steps.run("prune", || {
                    let rows = prune_rows(cum.final_net(), test, cfg)?;
                    out.csv("table2.csv", &TABLE2_HEADER, &rows)?;
                    Ok(())
                });
            }
            if let Some(r) = &cfg.robustness {
                steps.run("noise_ablation", || noise_and_ablation(&mut out, cum.final_net(), test, r, cfg.seed));
                let spec = steps.run("ensemble", || ensemble_for(cum, r.vote_weights));
                if let Some(spec) = spec {
                    steps.run("attack", || {
                        let rows = attack_table(&spec, baseline.as_ref().map(|b| b.final_net()), test, &r.eps)?;
                        write_attack_table(&mut out, &rows)
                    });
                    detection_curves = steps.run("detect", || detection(&mut out, &spec, test, r));
                } else {
                    steps.skip("attack");
                    steps.skip("detect");
                }
            }
        }
        _ => {
            for s in ["prune", "noise_ablation", "ensemble", "attack", "detect"] {
                steps.skip(s);
            }
        }
    }

    let manifest_path = out.path("manifest.json");
    out.record("manifest", manifest_path.clone());
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: out.files.clone(),
        steps: steps.records,
        complexity_ratio: complexity.as_ref().and_then(|c: &ComplexityReport| c.ratio),
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunArtifacts {
        manifest,
        manifest_path,
        cumulative,
        baseline,
        complexity,
        detection: detection_curves,
        first_error: steps.first_error,
    })
}
