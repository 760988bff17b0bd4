//! Config-driven k-fold experiments and ablation suites.
//!
//! An experiment writes into `out_dir/<name>/`:
//! `fold<k>.json` (one [`FoldReport`] per fold), `fold<k>.ckpt`,
//! `aggregate.csv`, `report.md`, `summary.json` and, on request,
//! `predictions/fold<k>/<id>_pred.pgm` next to `<id>_mask.pgm`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{gen_synthetic, load_dataset, read_pnm, write_pgm, Sample, SynthSpec};
use crate::dat::DatMode;
use crate::dra::DraVariant;
use crate::error::{Error, Result};
use crate::segnet::{argmax_mask, ModelConfig, SegModel, SkipStrategy, UdTransConfig};
use crate::train::{
    aggregate, derive_seed, hold_out, kfold_split, metrics, split_hash, train_fold, Aggregate, EvalSummary, FoldData,
    FoldReport, TrainConfig, SEED_HOLDOUT, SEED_MODEL,
};

const SEED_FOLDS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: SynthSpec, count: usize },
    Directory { path: PathBuf },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub save_predictions: bool,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Reseeds data generation, fold assignment, initialization and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        if let DatasetSource::Synthetic { spec, .. } = &mut self.dataset {
            spec.seed = seed;
        }
        self
    }

    /// Every problem with the config; nothing is trained while this is non-empty.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            p.push(format!("name {:?} must be non-empty and contain no path separators", self.name));
        }
        if self.jobs == 0 {
            p.push("jobs must be >= 1".into());
        }
        p.extend(self.model.problems());
        p.extend(self.train.problems());
        let b = &self.model.backbone;
        match &self.dataset {
            DatasetSource::Synthetic { spec, count } => {
                p.extend(spec.problems().into_iter().map(|s| format!("dataset.spec: {s}")));
                if (spec.height, spec.width, spec.channels) != (b.height, b.width, b.in_channels) {
                    p.push(format!(
                        "synthetic images are {}x{}x{} but the backbone expects {}x{}x{}",
                        spec.channels, spec.height, spec.width, b.in_channels, b.height, b.width
                    ));
                }
                if spec.classes != self.model.classes {
                    p.push(format!(
                        "synthetic classes {} differ from model classes {}",
                        spec.classes, self.model.classes
                    ));
                }
                // each fold needs training, validation and test samples
                if *count < 3 * self.train.folds.max(1) {
                    p.push(format!(
                        "dataset.count {count} is too small for {} folds",
                        self.train.folds
                    ));
                }
            }
            DatasetSource::Directory { path } => {
                if !path.is_dir() {
                    p.push(format!("dataset directory {} does not exist", path.display()));
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn load_samples(&self) -> Result<(Vec<Sample>, Vec<String>)> {
        let b = &self.model.backbone;
        match &self.dataset {
            DatasetSource::Synthetic { spec, count } => Ok((gen_synthetic(spec, *count)?, Vec::new())),
            DatasetSource::Directory { path } => {
                let loaded = load_dataset(path, self.model.classes)?;
                for s in &loaded.samples {
                    let dims = (s.image.channels, s.image.height, s.image.width);
                    if dims != (b.in_channels, b.height, b.width) {
                        return Err(Error::Data {
                            path: path.join(&s.id),
                            detail: format!(
                                "image is {dims:?} but the backbone expects {:?}",
                                (b.in_channels, b.height, b.width)
                            ),
                        });
                    }
                }
                if loaded.samples.len() < 3 * self.train.folds {
                    return Err(Error::Config(format!(
                        "{} samples are too few for {} folds",
                        loaded.samples.len(),
                        self.train.folds
                    )));
                }
                Ok((loaded.samples, loaded.warnings))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub label: String,
    pub split_hash: String,
    pub param_count: usize,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Validates, trains every fold (up to `jobs` folds at once) and writes all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    pool(cfg.jobs)?.install(|| run_folds(cfg))
}

fn run_folds(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (samples, warnings) = cfg.load_samples()?;
    let seed = cfg.train.seed;
    let folds = kfold_split(samples.len(), cfg.train.folds, derive_seed(seed, SEED_FOLDS, 0))?;
    let hash = split_hash(&folds);
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;

    let reports: Vec<FoldReport> = folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| -> Result<FoldReport> {
            let (train, val) = hold_out(&fold.train, cfg.train.val_fraction, derive_seed(seed, SEED_HOLDOUT, f as u64));
            let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
            let data = FoldData {
                train: pick(&train),
                val: pick(&val),
                test: pick(&fold.test),
            };
            let mut model = SegModel::<f32>::build(cfg.model.clone(), derive_seed(seed, SEED_MODEL, f as u64))?;
            let report = train_fold(&mut model, &data, &cfg.train, f)?;
            fs::write(dir.join(format!("fold{f}.json")), serde_json::to_string_pretty(&report)?)?;
            if cfg.save_checkpoints {
                checkpoint::save(&model, &dir.join(format!("fold{f}.ckpt")))?;
            }
            if cfg.save_predictions {
                save_predictions(&model, &data.test, &dir.join("predictions").join(format!("fold{f}")))?;
            }
            Ok(report)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.context(format!("experiment {}", cfg.name)))?;

    let param_count = SegModel::<f32>::build(cfg.model.clone(), 0)?.param_count();
    let result = ExperimentResult {
        name: cfg.name.clone(),
        label: cfg.model.skip.label(),
        split_hash: hash,
        param_count,
        aggregate: aggregate(&reports),
        folds: reports,
        warnings,
    };
    fs::write(dir.join("aggregate.csv"), aggregate_csv(&cfg.name, &result.folds))?;
    fs::write(dir.join("report.md"), markdown_table(&[(result.label.clone(), result.aggregate)]))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

fn save_predictions(model: &SegModel<f32>, samples: &[&Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ps = model.frozen_params();
    for s in samples {
        let pred = argmax_mask(&model.forward_with(&ps, &s.image.to_tensor())?);
        write_pgm(&dir.join(format!("{}_pred.pgm", s.id)), s.mask.height, s.mask.width, &pred)?;
        write_pgm(&dir.join(format!("{}_mask.pgm", s.id)), s.mask.height, s.mask.width, &s.mask.data)?;
    }
    Ok(())
}

/// One row per fold plus an `all` row with the mean and std across folds.
pub fn aggregate_csv(config: &str, reports: &[FoldReport]) -> String {
    let mut out = String::from("config,fold,dice_mean,dice_std,hd95_mean,hd95_std\n");
    for r in reports {
        let (d, ds) = r.dice();
        let (h, hs) = r.hd95();
        writeln!(out, "{config},{},{d:.6},{ds:.6},{h:.6},{hs:.6}", r.fold).unwrap();
    }
    let a = aggregate(reports);
    writeln!(
        out,
        "{config},all,{:.6},{:.6},{:.6},{:.6}",
        a.dice_mean, a.dice_std, a.hd95_mean, a.hd95_std
    )
    .unwrap();
    out
}

/// Method, Dice (%) mean±std, HD95 mean±std.
pub fn markdown_table(rows: &[(String, Aggregate)]) -> String {
    let mut out = String::from("| Method | Dice (%) | HD95 (px) |\n|---|---|---|\n");
    for (label, a) in rows {
        writeln!(
            out,
            "| {label} | {:.2}±{:.2} | {:.2}±{:.2} |",
            100.0 * a.dice_mean,
            100.0 * a.dice_std,
            a.hd95_mean,
            a.hd95_std
        )
        .unwrap();
    }
    out
}

/// Scores every `<id>_pred.pgm` against `<id>_mask.pgm` in `dir`.
pub fn eval_predictions(dir: &Path, classes: usize) -> Result<EvalSummary> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Data {
            path: dir.to_path_buf(),
            detail: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix("_pred.pgm").map(str::to_owned))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data {
            path: dir.to_path_buf(),
            detail: "no *_pred.pgm files".into(),
        });
    }
    let mut scores = Vec::new();
    for id in ids {
        let pred = read_pnm(&dir.join(format!("{id}_pred.pgm")))?;
        let mask_path = dir.join(format!("{id}_mask.pgm"));
        let gt = read_pnm(&mask_path)?;
        if (pred.height, pred.width, pred.channels) != (gt.height, gt.width, gt.channels) || gt.channels != 1 {
            return Err(Error::Data {
                path: mask_path,
                detail: "prediction and mask differ in size or are not single-channel".into(),
            });
        }
        let to_u8 = |v: &[u16]| v.iter().map(|&x| x.min(255) as u8).collect::<Vec<_>>();
        let (p, g) = (to_u8(&pred.values), to_u8(&gt.values));
        if let Some(&bad) = p.iter().chain(&g).find(|&&c| c as usize >= classes) {
            return Err(Error::Data {
                path: dir.join(&id),
                detail: format!("class id {bad} is not below K = {classes}"),
            });
        }
        let (cls, dice, hd95) = metrics::class_scores(&p, &g, gt.height, gt.width, classes);
        scores.push(crate::train::SampleScore {
            id,
            dice,
            hd95,
            classes: cls,
        });
    }
    let dice: Vec<f64> = scores.iter().map(|s| s.dice).collect();
    let hd: Vec<f64> = scores.iter().map(|s| s.hd95).collect();
    let (dice_mean, dice_std) = metrics::mean_std(&dice);
    let (hd95_mean, hd95_std) = metrics::mean_std(&hd);
    Ok(EvalSummary {
        loss: f64::NAN,
        dice_mean,
        dice_std,
        hd95_mean,
        hd95_std,
        per_class: Vec::new(),
        samples: scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    SkipFig4,
    ComponentsTable6,
    OrderFig6,
    DraTable7,
    HeadsLayersFig9,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::SkipFig4,
        Suite::ComponentsTable6,
        Suite::OrderFig6,
        Suite::DraTable7,
        Suite::HeadsLayersFig9,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::SkipFig4 => "skip_fig4",
            Suite::ComponentsTable6 => "components_table6",
            Suite::OrderFig6 => "order_fig6",
            Suite::DraTable7 => "dra_table7",
            Suite::HeadsLayersFig9 => "heads_layers_fig9",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|x| x.name()).collect();
                Error::Invalid(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

pub const HEADS_GRID: [usize; 4] = [1, 2, 4, 8];
pub const LAYERS_GRID: [usize; 4] = [1, 2, 4, 6];

/// Labelled skip strategies of a suite. Suites other than `skip_fig4` vary the
/// DAT settings of `base`, which must then be a UDTrans strategy.
pub fn suite_strategies(base: &SkipStrategy, suite: Suite) -> Result<Vec<(String, SkipStrategy)>> {
    if suite == Suite::SkipFig4 {
        return Ok(SkipStrategy::plain_suite().into_iter().map(|s| (s.label(), s)).collect());
    }
    let SkipStrategy::UdTrans(u) = *base else {
        return Err(Error::Config(format!(
            "suite {} needs a ud_trans base skip strategy",
            suite.name()
        )));
    };
    let with = |mode: DatMode, dra: bool, variant: DraVariant| {
        SkipStrategy::UdTrans(UdTransConfig {
            mode,
            dra,
            dra_variant: variant,
            ..u
        })
    };
    let c = DraVariant::Channel;
    Ok(match suite {
        Suite::SkipFig4 => unreachable!(),
        Suite::ComponentsTable6 => vec![
            ("Baseline".into(), SkipStrategy::All),
            ("+CFA".into(), with(DatMode::CfaOnly, false, c)),
            ("+SSA".into(), with(DatMode::SsaOnly, false, c)),
            ("+CFA+SSA".into(), with(DatMode::CfaThenSsa, false, c)),
            ("+CFA+SSA+DRA".into(), with(DatMode::CfaThenSsa, true, c)),
        ],
        Suite::OrderFig6 => {
            let orders = [
                ("A", DatMode::CfaOnly),
                ("B", DatMode::SsaOnly),
                ("A->B", DatMode::CfaThenSsa),
                ("B->A", DatMode::SsaThenCfa),
            ];
            let mut v = Vec::new();
            for dra in [false, true] {
                for (name, mode) in orders {
                    let label = if dra { format!("{name}+DRA") } else { name.to_string() };
                    v.push((label, with(mode, dra, c)));
                }
            }
            v
        }
        Suite::DraTable7 => vec![
            ("DRA-C".into(), with(u.mode, true, DraVariant::Channel)),
            ("DRA-S".into(), with(u.mode, true, DraVariant::Spatial)),
        ],
        Suite::HeadsLayersFig9 => HEADS_GRID
            .iter()
            .flat_map(|&heads| {
                LAYERS_GRID.iter().map(move |&layers| {
                    (
                        format!("N_H={heads} N_L={layers}"),
                        SkipStrategy::UdTrans(UdTransConfig { heads, layers, ..u }),
                    )
                })
            })
            .collect(),
    })
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

/// The suite's experiment configs; all share the base dataset, training settings and seed.
pub fn ablation_suite(base: &ExperimentConfig, suite: Suite) -> Result<Vec<(String, ExperimentConfig)>> {
    let suite_dir = base.out_dir.join(suite.name());
    Ok(suite_strategies(&base.model.skip, suite)?
        .into_iter()
        .enumerate()
        .map(|(i, (label, skip))| {
            let mut cfg = base.clone();
            cfg.name = format!("{:02}_{}", i + 1, slug(&label));
            cfg.out_dir = suite_dir.clone();
            cfg.model.skip = skip;
            (label, cfg)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub name: String,
    pub param_count: Option<usize>,
    pub split_hash: Option<String>,
    pub aggregate: Option<Aggregate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    /// Ranked by mean test Dice; failed rows last.
    pub rows: Vec<SuiteRow>,
    pub shared_split: bool,
}

/// Runs every config of the suite; a failing config is recorded, not fatal.
pub fn run_suite(base: &ExperimentConfig, suite: Suite) -> Result<SuiteReport> {
    let configs = ablation_suite(base, suite)?;
    let problems: Vec<String> = configs
        .iter()
        .flat_map(|(label, c)| c.problems().into_iter().map(move |p| format!("{label}: {p}")))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut rows: Vec<SuiteRow> = pool(base.jobs)?.install(|| {
        configs
            .par_iter()
            .map(|(label, cfg)| match run_folds(cfg) {
                Ok(r) => SuiteRow {
                    label: label.clone(),
                    name: cfg.name.clone(),
                    param_count: Some(r.param_count),
                    split_hash: Some(r.split_hash),
                    aggregate: Some(r.aggregate),
                    error: None,
                },
                Err(e) => SuiteRow {
                    label: label.clone(),
                    name: cfg.name.clone(),
                    param_count: None,
                    split_hash: None,
                    aggregate: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    rows.sort_by(|a, b| {
        let key = |r: &SuiteRow| r.aggregate.map_or(f64::NEG_INFINITY, |a| a.dice_mean);
        key(b).total_cmp(&key(a)).then_with(|| a.name.cmp(&b.name))
    });
    let hashes: Vec<&String> = rows.iter().filter_map(|r| r.split_hash.as_ref()).collect();
    let report = SuiteReport {
        suite,
        shared_split: hashes.windows(2).all(|w| w[0] == w[1]),
        rows,
    };
    let dir = base.out_dir.join(suite.name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("suite.csv"), suite_csv(&report))?;
    fs::write(dir.join("suite.md"), suite_markdown(&report))?;
    fs::write(dir.join("suite.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn suite_csv(report: &SuiteReport) -> String {
    let mut out = String::from("rank,config,label,params,dice_mean,dice_std,hd95_mean,hd95_std,split_hash,status\n");
    for (i, r) in report.rows.iter().enumerate() {
        let params = r.param_count.map_or(String::new(), |p| p.to_string());
        let hash = r.split_hash.clone().unwrap_or_default();
        match (&r.aggregate, &r.error) {
            (Some(a), _) => writeln!(
                out,
                "{},{},\"{}\",{params},{:.6},{:.6},{:.6},{:.6},{hash},ok",
                i + 1,
                r.name,
                r.label,
                a.dice_mean,
                a.dice_std,
                a.hd95_mean,
                a.hd95_std
            ),
            (None, e) => writeln!(
                out,
                "{},{},\"{}\",{params},,,,,{hash},\"error: {}\"",
                i + 1,
                r.name,
                r.label,
                e.clone().unwrap_or_default().replace('"', "'")
            ),
        }
        .unwrap();
    }
    out
}

pub fn suite_markdown(report: &SuiteReport) -> String {
    let mut out = format!(
        "## {}\n\n| Rank | Method | Params | Dice (%) | HD95 (px) |\n|---|---|---|---|---|\n",
        report.suite.name()
    );
    for (i, r) in report.rows.iter().enumerate() {
        let params = r.param_count.map_or("-".into(), |p| format!("{:.3}M", p as f64 / 1e6));
        match r.aggregate {
            Some(a) => writeln!(
                out,
                "| {} | {} | {params} | {:.2}±{:.2} | {:.2}±{:.2} |",
                i + 1,
                r.label,
                100.0 * a.dice_mean,
                100.0 * a.dice_std,
                a.hd95_mean,
                a.hd95_std
            ),
            None => writeln!(out, "| {} | {} | {params} | failed | failed |", i + 1, r.label),
        }
        .unwrap();
    }
    if !report.shared_split {
        out.push_str("\nWarning: rows did not share the same fold split.\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{BackboneSpec, BlockType};

    pub(crate) fn toy_config(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            name: "toy".into(),
            dataset: DatasetSource::Synthetic {
                spec: SynthSpec::toy(16, 0),
                count: 12,
            },
            model: ModelConfig {
                backbone: BackboneSpec {
                    in_channels: 1,
                    height: 16,
                    width: 16,
                    widths: [4, 4, 4, 4],
                    bottleneck: 4,
                    block: BlockType::PlainConv,
                },
                skip: SkipStrategy::UdTrans(UdTransConfig {
                    patch: 8,
                    embed_dim: 8,
                    heads: 2,
                    layers: 1,
                    ..UdTransConfig::table1()
                }),
                classes: 2,
            },
            train: TrainConfig {
                lr: 1e-2,
                max_epochs: 2,
                folds: 2,
                ..TrainConfig::default()
            },
            out_dir: out.to_path_buf(),
            jobs: 1,
            save_checkpoints: true,
            save_predictions: true,
        }
    }

    #[test]
    fn suite_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let base = toy_config(dir.path());
        let sizes: Vec<usize> = Suite::ALL.iter().map(|&s| ablation_suite(&base, s).unwrap().len()).collect();
        assert_eq!(sizes, vec![10, 5, 8, 2, 16]);
        let mut plain = base.clone();
        plain.model.skip = SkipStrategy::All;
        assert!(ablation_suite(&plain, Suite::DraTable7).is_err());
        assert!(ablation_suite(&plain, Suite::SkipFig4).is_ok());
        let names: std::collections::BTreeSet<_> = ablation_suite(&base, Suite::OrderFig6)
            .unwrap()
            .into_iter()
            .map(|(_, c)| c.name)
            .collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn problems_are_enumerated_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.train.lr = -1.0;
        cfg.model.classes = 3;
        cfg.jobs = 0;
        if let DatasetSource::Synthetic { count, .. } = &mut cfg.dataset {
            *count = 2;
        }
        let p = cfg.problems();
        assert!(p.len() >= 4, "{p:?}");
        assert!(run_experiment(&cfg).is_err());
        assert!(!cfg.run_dir().exists());
    }

    #[test]
    fn smoke_run_writes_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.folds.len(), 2);
        let run = cfg.run_dir();
        for f in ["fold0.json", "fold1.json", "fold0.ckpt", "aggregate.csv", "report.md", "summary.json"] {
            assert!(run.join(f).exists(), "{f}");
        }
        let csv = fs::read_to_string(run.join("aggregate.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(fs::read_to_string(run.join("aggregate.csv")).unwrap(), csv);
        assert_eq!(again.split_hash, r.split_hash);

        let preds = run.join("predictions/fold0");
        let e = eval_predictions(&preds, 2).unwrap();
        let test_dice = r.folds[0].test.dice_mean;
        assert!((e.dice_mean - test_dice).abs() < 1e-12);

        let back: FoldReport = serde_json::from_str(&fs::read_to_string(run.join("fold1.json")).unwrap()).unwrap();
        assert_eq!(back, r.folds[1]);
    }

    #[test]
    fn config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let path = dir.path().join("c.json");
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::from_json_file(&path).unwrap(), cfg);
        fs::write(&path, "{\"name\": 3}").unwrap();
        assert!(matches!(ExperimentConfig::from_json_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn markdown_layout() {
        let a = Aggregate {
            folds: 5,
            dice_mean: 0.8928,
            dice_std: 0.0058,
            hd95_mean: 12.5,
            hd95_std: 1.25,
        };
        let md = markdown_table(&[("UDTrans".into(), a)]);
        assert!(md.contains("| UDTrans | 89.28±0.58 | 12.50±1.25 |"), "{md}");
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("w/o L1"), "w_o_l1");
        assert_eq!(slug("N_H=4 N_L=2"), "n_h_4_n_l_2");
        assert_eq!(slug("+CFA+SSA+DRA"), "cfa_ssa_dra");
    }
}
