use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use popgraph::cohort::{make_folds, read_schema, save_cohort, Cohort, Fold, Preset};
use popgraph::experiment::{label_table, sweep_fold, Arm, ArmResult};
use popgraph::masking::MaskStrategy;
use popgraph::metrics::aggregate_folds;
use popgraph::model::{FeatureLayout, Model};
use popgraph::pipeline::{prepare_fold, split_labels, FoldFeatures, FoldLabels, Split};
use popgraph::train::{
    evaluate_imputation, evaluate_task, init_finetune, init_scratch, run_pretraining,
    run_task_training, Checkpoint, Mode, TaskMetrics,
};
use popgraph::{Error, Result};

use crate::config::{preset_of, Command, DataSource, RunConfig, RUN_CONFIG_FILE};

pub const PRETRAIN_BEST: &str = "pretrain_best.ckpt";
pub const PRETRAIN_FINAL: &str = "pretrain_final.ckpt";
pub const TASK_BEST: &str = "task_best.ckpt";

pub fn run(cfg: &RunConfig) -> Result<()> {
    cfg.write(&cfg.out)?;
    match cfg.command {
        Command::Generate => generate(cfg),
        Command::Pretrain => pretrain(cfg),
        Command::Train | Command::Finetune => train(cfg),
        Command::Evaluate => evaluate(cfg),
        Command::Sweep => sweep(cfg),
    }
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let DataSource::Synthetic { .. } = cfg.data else {
        return Err(Error::Config("generate needs a preset, not input files".into()));
    };
    let cohort = cfg.data.load()?;
    save_cohort(&cohort, &cfg.out.join("schema.json"), &cfg.out.join("records.jsonl"))?;
    eprintln!("wrote {} records to {}", cohort.len(), cfg.out.display());
    Ok(())
}

/// Cohort, model and folds shared by the per-fold commands.
struct Setup {
    cohort: Cohort,
    preset: Preset,
    model: Model,
    folds: Vec<Fold>,
    labels: FoldLabels,
}

fn setup(cfg: &RunConfig, seed: u64) -> Result<Setup> {
    let cohort = cfg.data.load()?;
    let preset = preset_of(&cohort);
    let config = cfg.model_config(preset);
    let layout = FeatureLayout::new(&cohort.schema, config.include_non_medical);
    let model = Model::new(config, layout)?;
    let folds = make_folds(&cohort.ids(), &cfg.folds, seed)?.folds;
    let labels = split_labels(&cohort);
    Ok(Setup {
        cohort,
        preset,
        model,
        folds,
        labels,
    })
}

fn prepare(cfg: &RunConfig, s: &Setup, fold: usize, seed: u64) -> Result<FoldFeatures> {
    prepare_fold(&s.cohort, &s.folds[fold], &s.model.layout, cfg.graph, seed)
}

/// Runs `f` for every fold, on separate threads when asked. Results keep fold order.
fn map_folds<T: Send>(
    n: usize,
    parallel: bool,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if !parallel {
        return (0..n).map(&f).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n).map(|i| scope.spawn({
            let f = &f;
            move || f(i)
        })).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fold worker panicked"))
            .collect()
    })
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

fn ratio_dir(out: &Path, fold: usize, ratio: f64) -> PathBuf {
    fold_dir(out, fold).join(format!("ratio_{ratio}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let s = setup(cfg, cfg.seed)?;
    let pc = cfg.protocol(s.preset).resolve(Mode::Pretrain, 1.0)?;
    let rows = map_folds(s.folds.len(), cfg.parallel_folds, |i| {
        let features = prepare(cfg, &s, i, cfg.seed)?;
        let outcome = run_pretraining(&features, &s.model, &pc, cfg.seed)?;
        let dir = fold_dir(&cfg.out, i);
        std::fs::create_dir_all(&dir)?;
        outcome.final_checkpoint.save(&dir.join(PRETRAIN_FINAL))?;
        outcome.best_checkpoint.save(&dir.join(PRETRAIN_BEST))?;
        outcome.log.write_csv(&dir.join("pretrain_log.csv"))?;
        let eval = evaluate_imputation(
            &features,
            &s.model,
            &outcome.best_checkpoint.params,
            pc.mask.as_ref().expect("pretrain mask"),
            Split::Test,
            cfg.seed,
        )?;
        eprintln!("fold {i}: best epoch {}, test imputation loss {:.4}", outcome.best_epoch, eval.loss);
        let mut rows = vec![
            (i, "best_epoch", outcome.best_epoch as f64),
            (i, "loss", eval.loss),
        ];
        for (name, v) in [
            ("rmse", eval.rmse),
            ("baseline_rmse", eval.baseline_rmse),
            ("discrete_accuracy", eval.discrete_accuracy),
            ("margin_accuracy", eval.margin_accuracy),
            ("baseline_discrete_accuracy", eval.baseline_discrete_accuracy),
            ("treatment_f1", eval.treatment_f1),
        ] {
            if let Some(v) = v {
                rows.push((i, name, v));
            }
        }
        Ok(rows)
    })?;
    let mut csv = String::from("fold,split,metric,value\n");
    for (fold, metric, value) in rows.into_iter().flatten() {
        writeln!(csv, "{fold},test,{metric},{value}").expect("string write");
    }
    write_text(&cfg.out.join("summary.csv"), &csv)
}

fn pretrained_checkpoint(cfg: &RunConfig, fold: usize) -> Result<Checkpoint> {
    let base = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("finetune needs --checkpoint".into()))?;
    let path = if base.is_dir() {
        fold_dir(base, fold).join(PRETRAIN_BEST)
    } else {
        base.clone()
    };
    Checkpoint::load(&path)
}

fn metric_rows(csv: &mut String, prefix: &str, split: &str, m: Option<TaskMetrics>) {
    if let Some(m) = m {
        writeln!(csv, "{prefix},{split},accuracy,{}", m.accuracy).expect("string write");
        if let Some(a) = m.auc {
            writeln!(csv, "{prefix},{split},auc,{a}").expect("string write");
        }
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    let s = setup(cfg, cfg.seed)?;
    let mode = if cfg.command == Command::Finetune {
        Mode::Finetune
    } else {
        Mode::Scratch
    };
    let protocol = cfg.protocol(s.preset);
    let per_fold = map_folds(s.folds.len(), cfg.parallel_folds, |i| {
        let features = prepare(cfg, &s, i, cfg.seed)?;
        let pretrained = match mode {
            Mode::Finetune => Some(pretrained_checkpoint(cfg, i)?),
            _ => None,
        };
        let mut csv = String::new();
        let mut tests = Vec::new();
        for &ratio in &cfg.label_ratios {
            let tc = protocol.resolve(mode, ratio)?;
            let params = match &pretrained {
                Some(ckpt) => init_finetune(ckpt, &s.model, cfg.seed)?,
                None => init_scratch(&s.model, cfg.seed)?,
            };
            let outcome = run_task_training(&features, &s.labels, &s.model, params, &tc, cfg.seed)?;
            for w in &outcome.warnings {
                eprintln!("fold {i}, ratio {ratio}: {w}");
            }
            let dir = ratio_dir(&cfg.out, i, ratio);
            std::fs::create_dir_all(&dir)?;
            outcome.best.save(&dir.join(TASK_BEST))?;
            outcome.log.write_csv(&dir.join("task_log.csv"))?;
            let prefix = format!("{ratio},{i}");
            writeln!(csv, "{prefix},train,labeled,{}", outcome.labeled_ids.len()).expect("string write");
            writeln!(csv, "{prefix},val,best_epoch,{}", outcome.best_epoch).expect("string write");
            metric_rows(&mut csv, &prefix, "val", outcome.val);
            metric_rows(&mut csv, &prefix, "test", outcome.test);
            tests.push((ratio, outcome.test));
        }
        Ok((csv, tests))
    })?;
    let mut csv = String::from("ratio,fold,split,metric,value\n");
    let mut report = String::new();
    for (part, _) in &per_fold {
        csv.push_str(part);
    }
    for &ratio in &cfg.label_ratios {
        let tests: Vec<TaskMetrics> = per_fold
            .iter()
            .flat_map(|(_, t)| t.iter())
            .filter(|(r, _)| *r == ratio)
            .filter_map(|(_, m)| *m)
            .collect();
        let acc: Vec<f64> = tests.iter().map(|m| 100.0 * m.accuracy).collect();
        let auc: Vec<f64> = tests.iter().filter_map(|m| m.auc).map(|a| 100.0 * a).collect();
        let fmt = |v: &[f64]| aggregate_folds("", v).map_or("n/a".to_string(), |r| r.to_string());
        writeln!(report, "ratio {ratio}: ACC {} | AUC {}", fmt(&acc), fmt(&auc)).expect("string write");
    }
    write_text(&cfg.out.join("summary.csv"), &csv)?;
    write_text(&cfg.out.join("report.txt"), &report)?;
    eprint!("{report}");
    Ok(())
}

/// Re-scores the checkpoints of an earlier run directory on its test splits.
fn evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs --checkpoint <run dir>".into()))?;
    let run = RunConfig::read(&dir.join(RUN_CONFIG_FILE))?;
    let s = setup(&run, run.seed)?;
    let mut csv = String::from("fold,checkpoint,split,metric,value\n");
    for i in 0..s.folds.len() {
        let features = prepare(&run, &s, i, run.seed)?;
        let fdir = fold_dir(dir, i);
        let best = fdir.join(PRETRAIN_BEST);
        if best.exists() {
            let ckpt = Checkpoint::load(&best)?;
            let pc = run.protocol(s.preset).resolve(Mode::Pretrain, 1.0)?;
            let eval = evaluate_imputation(&features, &s.model, &ckpt.params, pc.mask.as_ref().expect("mask"), Split::Test, run.seed)?;
            writeln!(csv, "{i},{PRETRAIN_BEST},test,loss,{}", eval.loss).expect("string write");
            if let Some(r) = eval.rmse {
                writeln!(csv, "{i},{PRETRAIN_BEST},test,rmse,{r}").expect("string write");
            }
        }
        for &ratio in &run.label_ratios {
            let path = ratio_dir(dir, i, ratio).join(TASK_BEST);
            if !path.exists() {
                continue;
            }
            let ckpt = Checkpoint::load(&path)?;
            let prefix = format!("{i},ratio_{ratio}/{TASK_BEST}");
            for (name, split) in [("val", Split::Val), ("test", Split::Test)] {
                let m = evaluate_task(&features, &s.labels, &s.model, &ckpt.params, split)?;
                metric_rows(&mut csv, &prefix, name, m);
            }
        }
    }
    write_text(&cfg.out.join("evaluation.csv"), &csv)
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let cohort_schema = match &cfg.data {
        DataSource::Files { schema, .. } => Some(read_schema(schema)?),
        DataSource::Synthetic { .. } => None,
    };
    let timeseries = match (&cohort_schema, &cfg.data) {
        (Some(s), _) => s.has_timeseries(),
        (None, DataSource::Synthetic { preset, .. }) => *preset == Preset::Timeseries,
        _ => unreachable!(),
    };
    let strategies: Vec<MaskStrategy> = if timeseries {
        vec![MaskStrategy::BlockMasking, MaskStrategy::FeatureMasking]
    } else {
        vec![MaskStrategy::StaticRandom]
    };
    let mut results: Vec<ArmResult> = Vec::new();
    for &seed in &cfg.seeds {
        let s = setup(cfg, seed)?;
        let protocol = cfg.protocol(s.preset);
        let per_fold = map_folds(s.folds.len(), cfg.parallel_folds, |i| {
            let features = prepare(cfg, &s, i, seed)?;
            let r = sweep_fold(&features, &s.labels, &s.model, &protocol, &cfg.label_ratios, &strategies, seed, i)?;
            eprintln!("seed {seed}, fold {i}: {} runs", r.len());
            Ok(r)
        })?;
        results.extend(per_fold.into_iter().flatten());
    }
    let mut runs = String::from("seed,fold,ratio,arm,labeled,best_epoch,split,metric,value\n");
    for r in &results {
        let prefix = format!("{},{},{},{},{},{}", r.seed, r.fold, r.ratio, r.arm.label(), r.labeled, r.best_epoch);
        metric_rows(&mut runs, &prefix, "val", r.val);
        metric_rows(&mut runs, &prefix, "test", r.test);
    }
    let columns: Vec<(&str, Arm)> = if timeseries {
        vec![
            ("SC", Arm::Scratch),
            ("FT", Arm::Finetune(cfg.mask.strategy)),
            ("FT:BM", Arm::Finetune(MaskStrategy::BlockMasking)),
            ("FT:FM", Arm::Finetune(MaskStrategy::FeatureMasking)),
        ]
    } else {
        vec![("SC", Arm::Scratch), ("FT", Arm::Finetune(MaskStrategy::StaticRandom))]
    };
    let table = label_table(&results, &cfg.label_ratios, &columns)?;
    write_text(&cfg.out.join("runs.csv"), &runs)?;
    write_text(&cfg.out.join("table.csv"), &table)?;
    eprint!("{table}");
    Ok(())
}
