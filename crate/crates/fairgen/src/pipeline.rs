//! Staged experiment execution. Each run lives in `runs/<config-hash>/`,
//! each stage writes its artifacts into `<stage>/seed-<n>/` and a stamp file;
//! rerunning a finished stage is a no-op that leaves the artifacts untouched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_count_rule, kmeans_per_group, load_assignments, save_assignments};
use crate::config::{config_hash, ExperimentConfig, FilterKind, MethodConfig};
use crate::data::{load_manifest, save_manifest, GroupKey, GroupedDataset, ManifestSchema, Split};
use crate::embed::{
    load_embeddings, save_embeddings, Embedding, EmbeddingBackend, ToyEmbedder,
};
use crate::error::{Error, Result};
use crate::eval::{
    distribution_report, evaluate, summarize, write_summary_csv, write_summary_markdown,
    EvalReport, MethodSummary,
};
use crate::filter::{filter_dataset, random_filter, real_group_centroids};
use crate::gen::{build_plan, run_generation, OracleBackend, SamplerParams};
use crate::model::Mlp;
use crate::prompt::{DatasetId, Strategy};
use crate::toy::{default_vocabulary, generate_shapeworld};
use crate::train::{erm_baseline, finetune, gdro_train, pretrain, save_trajectory, TrainConfig};

/// Pipeline stages in execution order. `Report` aggregates across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Split,
    Embed,
    Cluster,
    Generate,
    Score,
    Filter,
    Pretrain,
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Split,
        Stage::Embed,
        Stage::Cluster,
        Stage::Generate,
        Stage::Score,
        Stage::Filter,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Filter => "filter",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Run directory for one configuration.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// `<run_root>/<config-hash>`; writes `config.json` on first use.
    pub fn create(run_root: &Path, cfg: &ExperimentConfig) -> Result<RunDir> {
        let root = run_root.join(config_hash(cfg)?);
        std::fs::create_dir_all(&root)?;
        let config_path = root.join("config.json");
        if !config_path.exists() {
            crate::config::save_config(cfg, &config_path)?;
        }
        Ok(RunDir { root })
    }

    pub fn stage_dir(&self, stage: &str, seed: u64) -> PathBuf {
        self.root.join(stage).join(format!("seed-{seed}"))
    }
}

/// Run `compute` into the stage directory unless its stamp already exists,
/// in which case `load` reads the cached artifacts.
fn cached<T>(
    dir: &Path,
    compute: impl FnOnce(&Path) -> Result<T>,
    load: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    let stamp = dir.join(".done");
    if stamp.exists() {
        return load(dir);
    }
    std::fs::create_dir_all(dir)?;
    let value = compute(dir)?;
    std::fs::write(&stamp, "ok\n")?;
    Ok(value)
}

fn schema() -> ManifestSchema {
    ManifestSchema::default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: EvalReport,
    /// Per-group distribution distance between real and kept synthetic data,
    /// when every real group is large enough to fit a Gaussian.
    pub frechet: Option<BTreeMap<GroupKey, f64>>,
}

fn toy_embedder(cfg: &ExperimentConfig, seed: u64) -> ToyEmbedder {
    let size = cfg.toy.image_size;
    ToyEmbedder::new(seed, cfg.embed_dim, size * size * 3)
        .with_vocabulary(default_vocabulary(size))
}

fn embed_dataset(
    embedder: &ToyEmbedder,
    ds: &GroupedDataset,
) -> Result<BTreeMap<String, Embedding>> {
    ds.items()
        .iter()
        .map(|item| Ok((item.id.clone(), embedder.embed_image(&item.image()?)?)))
        .collect()
}

/// Execute every stage for one seed, reusing cached artifacts where present.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, run: &RunDir) -> Result<SeedOutcome> {
    run_seed_until(cfg, seed, run, Stage::Evaluate)?
        .ok_or_else(|| Error::Config("evaluate stage did not produce a report".into()))
}

/// Execute stages up to and including `until`. Returns `None` when stopping
/// before the evaluation report exists. Stages a method does not use are
/// skipped; asking for one of them just runs the prefix it depends on.
pub fn run_seed_until(
    cfg: &ExperimentConfig,
    seed: u64,
    run: &RunDir,
    until: Stage,
) -> Result<Option<SeedOutcome>> {
    cfg.validate()?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };

    let full = cached(
        &run.stage_dir("split", seed),
        |dir| {
            let mut toy = cfg.toy.clone();
            toy.seed = seed;
            let ds = generate_shapeworld(&toy)?;
            save_manifest(&ds, &dir.join("manifest.csv"))?;
            Ok(ds)
        },
        |dir| load_manifest(&dir.join("manifest.csv"), &schema()),
    )?;
    if until == Stage::Split {
        return Ok(None);
    }
    let train_real = full.filter_split(Split::Train)?;
    let test = full.filter_split(Split::Test)?;

    let (model, class_names, frechet) = match &cfg.method {
        MethodConfig::Erm => {
            if until < Stage::Finetune {
                return Ok(None);
            }
            let out = cached(
                &run.stage_dir("finetune", seed),
                |dir| {
                    let out = erm_baseline(&train_real, &train_cfg)?;
                    out.model.save(&dir.join("model.bin"), &serde_json::json!({"seed": seed}))?;
                    save_trajectory(&out.trajectory, &dir.join("trajectory.csv"))?;
                    Ok(out.model)
                },
                |dir| Mlp::load(&dir.join("model.bin")),
            )?;
            let class_names: Vec<String> = train_real.classes().iter().cloned().collect();
            (out, class_names, None)
        }
        MethodConfig::GroupDro { eta } => {
            if until < Stage::Finetune {
                return Ok(None);
            }
            let eta = *eta;
            let out = cached(
                &run.stage_dir("finetune", seed),
                |dir| {
                    let out = gdro_train(&train_real, &train_cfg, eta)?;
                    out.model.save(&dir.join("model.bin"), &serde_json::json!({"seed": seed}))?;
                    save_trajectory(&out.trajectory, &dir.join("trajectory.csv"))?;
                    Ok(out.model)
                },
                |dir| Mlp::load(&dir.join("model.bin")),
            )?;
            let class_names: Vec<String> = train_real.classes().iter().cloned().collect();
            (out, class_names, None)
        }
        MethodConfig::TwoStage {
            strategy,
            fidelity,
            severe,
            budget,
            filter,
            finetune: finetune_mode,
        } => {
            let embedder = toy_embedder(cfg, seed);
            let real_embs = cached(
                &run.stage_dir("embed", seed),
                |dir| {
                    let embs = embed_dataset(&embedder, &train_real)?;
                    save_embeddings(&embs, &dir.join("embeddings.json"))?;
                    Ok(embs)
                },
                |dir| load_embeddings(&dir.join("embeddings.json")),
            )?;
            if until == Stage::Embed {
                return Ok(None);
            }

            let clusters = if *strategy == Strategy::ClusteredDreambooth {
                Some(cached(
                    &run.stage_dir("cluster", seed),
                    |dir| {
                        let k = cluster_count_rule(
                            train_real
                                .smallest_group_size()
                                .ok_or_else(|| Error::Capacity("empty train split".into()))?,
                        );
                        let assignments =
                            kmeans_per_group(&train_real, &real_embs, k, seed, 100)?;
                        save_assignments(&assignments, &dir.join("assignments.json"))?;
                        Ok(assignments)
                    },
                    |dir| load_assignments(&dir.join("assignments.json")),
                )?)
            } else {
                None
            };
            if until == Stage::Cluster {
                return Ok(None);
            }

            let k_d = clusters
                .as_ref()
                .and_then(|c| c.values().map(|a| a.k).max());
            let synth = cached(
                &run.stage_dir("generate", seed),
                |dir| {
                    let plan = build_plan(
                        DatasetId::Shapes,
                        &train_real,
                        *strategy,
                        *severe,
                        *budget,
                        k_d,
                        SamplerParams { seed, ..Default::default() },
                    )?;
                    std::fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
                    let mut backend = OracleBackend::new(*fidelity, cfg.toy.image_size);
                    let synth = run_generation(&plan, &mut backend, &train_real, clusters.as_ref())?;
                    save_manifest(&synth, &dir.join("manifest.csv"))?;
                    Ok(synth)
                },
                |dir| load_manifest(&dir.join("manifest.csv"), &schema()),
            )?;
            if until == Stage::Generate {
                return Ok(None);
            }

            let synth_embs = cached(
                &run.stage_dir("score", seed),
                |dir| {
                    let embs = embed_dataset(&embedder, &synth)?;
                    save_embeddings(&embs, &dir.join("embeddings.json"))?;
                    Ok(embs)
                },
                |dir| load_embeddings(&dir.join("embeddings.json")),
            )?;
            if until == Stage::Score {
                return Ok(None);
            }

            let kept = cached(
                &run.stage_dir("filter", seed),
                |dir| {
                    let kept = match filter {
                        FilterKind::Scored(fcfg) => {
                            let centroids = if fcfg.effective_alpha() < 1.0 {
                                Some(real_group_centroids(&train_real, &real_embs)?)
                            } else {
                                None
                            };
                            filter_dataset(fcfg, &synth, &synth_embs, &embedder, centroids.as_ref())?
                        }
                        FilterKind::Random { keep_fraction } => {
                            random_filter(&synth, *keep_fraction, seed)?
                        }
                        FilterKind::None => synth.clone(),
                    };
                    save_manifest(&kept, &dir.join("manifest.csv"))?;
                    Ok(kept)
                },
                |dir| load_manifest(&dir.join("manifest.csv"), &schema()),
            )?;
            if until == Stage::Filter {
                return Ok(None);
            }

            let pretrained = cached(
                &run.stage_dir("pretrain", seed),
                |dir| {
                    let out = pretrain(&kept, &train_cfg)?;
                    out.model.save(&dir.join("model.bin"), &serde_json::json!({"seed": seed}))?;
                    save_trajectory(&out.trajectory, &dir.join("trajectory.csv"))?;
                    Ok(out.model)
                },
                |dir| Mlp::load(&dir.join("model.bin")),
            )?;
            if until == Stage::Pretrain {
                return Ok(None);
            }

            let tuned = cached(
                &run.stage_dir("finetune", seed),
                |dir| {
                    let out = finetune(pretrained.clone(), &train_real, *finetune_mode, &train_cfg)?;
                    out.model.save(&dir.join("model.bin"), &serde_json::json!({"seed": seed}))?;
                    save_trajectory(&out.trajectory, &dir.join("trajectory.csv"))?;
                    Ok(out.model)
                },
                |dir| Mlp::load(&dir.join("model.bin")),
            )?;
            if until == Stage::Finetune {
                return Ok(None);
            }

            // The distance report needs a Gaussian per real group; skip it
            // when a group is too small (severe mode).
            let enough = train_real
                .smallest_group_size()
                .is_some_and(|n| n > cfg.embed_dim);
            let frechet = if enough {
                let mut all = real_embs.clone();
                all.extend(synth_embs.clone());
                Some(distribution_report(&train_real, &kept, &all)?)
            } else {
                None
            };
            let class_names: Vec<String> = train_real.classes().iter().cloned().collect();
            (tuned, class_names, frechet)
        }
    };
    if until < Stage::Evaluate {
        return Ok(None);
    }

    let outcome = cached(
        &run.stage_dir("evaluate", seed),
        |dir| {
            let report = evaluate(&model, &class_names, &test)?;
            let outcome = SeedOutcome {
                seed,
                report,
                frechet: frechet.clone(),
            };
            std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome)?)?;
            Ok(outcome)
        },
        |dir| {
            let text = std::fs::read_to_string(dir.join("report.json"))?;
            Ok(serde_json::from_str(&text)?)
        },
    )?;
    Ok(Some(outcome))
}

/// Run every seed of one configuration.
pub fn run_experiment(cfg: &ExperimentConfig, run_root: &Path) -> Result<Vec<SeedOutcome>> {
    let run = RunDir::create(run_root, cfg)?;
    cfg.seeds.iter().map(|&seed| run_seed(cfg, seed, &run)).collect()
}

/// Aggregate all seeds of one configuration into `summary.csv` / `summary.md`
/// inside its run directory.
pub fn run_report(cfg: &ExperimentConfig, run_root: &Path) -> Result<MethodSummary> {
    let run = RunDir::create(run_root, cfg)?;
    let outcomes: Vec<SeedOutcome> = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(cfg, seed, &run))
        .collect::<Result<_>>()?;
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let summary = summarize(&cfg.name, &reports)?;
    write_summary_csv(std::slice::from_ref(&summary), &run.root.join("summary.csv"))?;
    write_summary_markdown(std::slice::from_ref(&summary), &run.root.join("summary.md"))?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct MatrixReport {
    pub summaries: Vec<MethodSummary>,
    /// Preset name -> error message for runs that failed.
    pub failures: BTreeMap<String, String>,
}

/// Run several presets and write a consolidated summary (CSV + markdown)
/// under the run root. A failing preset is recorded and does not abort the
/// rest of the matrix.
pub fn run_matrix(
    configs: &BTreeMap<String, ExperimentConfig>,
    run_root: &Path,
) -> Result<MatrixReport> {
    let mut summaries = Vec::new();
    let mut failures = BTreeMap::new();
    for (name, cfg) in configs {
        match run_experiment(cfg, run_root) {
            Ok(outcomes) => {
                let reports: Vec<EvalReport> =
                    outcomes.iter().map(|o| o.report.clone()).collect();
                summaries.push(summarize(name, &reports)?);
            }
            Err(e) => {
                failures.insert(name.clone(), e.to_string());
            }
        }
    }
    write_summary_csv(&summaries, &run_root.join("summary.csv"))?;
    write_summary_markdown(&summaries, &run_root.join("summary.md"))?;
    if !failures.is_empty() {
        std::fs::write(
            run_root.join("failures.json"),
            serde_json::to_string_pretty(&failures)?,
        )?;
    }
    Ok(MatrixReport {
        summaries,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets;
    use crate::filter::FilterConfig;
    use crate::gen::Fidelity;
    use crate::toy::ShapeWorldConfig;
    use crate::train::FinetuneMode;

    fn tiny(method: MethodConfig) -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            toy: ShapeWorldConfig {
                n_train: 160,
                n_val: 0,
                n_test: 80,
                bias_ratio: 0.8,
                ..Default::default()
            },
            method,
            train: TrainConfig {
                epochs: 2,
                batch_size: 32,
                lr: 0.05,
                ..Default::default()
            },
            embed_dim: 8,
            seeds: vec![0],
        }
    }

    #[test]
    fn erm_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let outcomes = run_experiment(&tiny(MethodConfig::Erm), dir.path()).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].report.per_group.len(), 4);
    }

    #[test]
    fn two_stage_pipeline_runs_and_reruns_without_touching_artifacts() {
        let cfg = tiny(MethodConfig::TwoStage {
            strategy: Strategy::DreamboothPerGroup,
            fidelity: Fidelity::Fitted,
            severe: false,
            budget: 40,
            filter: FilterKind::Scored(FilterConfig::default()),
            finetune: FinetuneMode::HeadFull,
        });
        let dir = tempfile::tempdir().unwrap();
        let first = run_experiment(&cfg, dir.path()).unwrap();

        // Snapshot every artifact byte, rerun, compare.
        let mut snapshot = BTreeMap::new();
        let run_dir = dir.path().join(config_hash(&cfg).unwrap());
        for entry in walk(&run_dir) {
            snapshot.insert(entry.clone(), std::fs::read(&entry).unwrap());
        }
        let second = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(
            serde_json::to_string(&first).unwrap(),
            serde_json::to_string(&second).unwrap()
        );
        for entry in walk(&run_dir) {
            assert_eq!(
                snapshot.get(&entry).map(Vec::as_slice),
                std::fs::read(&entry).ok().as_deref(),
                "artifact changed on rerun: {}",
                entry.display()
            );
        }
        assert_eq!(snapshot.len(), walk(&run_dir).len());
        assert!(first[0].frechet.is_some());
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn matrix_records_failures_without_aborting() {
        let mut configs = BTreeMap::new();
        configs.insert("ok".to_string(), tiny(MethodConfig::Erm));
        let mut bad = tiny(MethodConfig::TwoStage {
            strategy: Strategy::DreamboothPerGroup,
            fidelity: Fidelity::Fitted,
            severe: false,
            budget: 0,
            filter: FilterKind::None,
            finetune: FinetuneMode::HeadFull,
        });
        bad.name = "bad".into();
        configs.insert("bad".to_string(), bad);
        let dir = tempfile::tempdir().unwrap();
        let report = run_matrix(&configs, dir.path()).unwrap();
        assert_eq!(report.summaries.len(), 1);
        assert!(report.failures.contains_key("bad"));
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("failures.json").exists());
    }

    #[test]
    fn preset_table_is_usable_with_shorter_settings() {
        // Smoke-check one real preset, shrunk for test time.
        let mut cfg = presets()["dreambooth"].clone();
        cfg.toy.n_train = 160;
        cfg.toy.n_test = 80;
        cfg.toy.n_val = 0;
        cfg.train.epochs = 2;
        if let MethodConfig::TwoStage { budget, .. } = &mut cfg.method {
            *budget = 40;
        }
        cfg.seeds = vec![0];
        let dir = tempfile::tempdir().unwrap();
        let outcomes = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(outcomes.len(), 1);
    }
}
