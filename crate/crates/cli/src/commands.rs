use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use ppa_core::dataset::{self, generate_synthetic, preset, DatasetMeta, SyntheticSpec};
use ppa_core::eval::{identification_quality, report_csv, tau_sweep_csv, tau_sweep_gnuplot, IdentificationReport};
use ppa_core::pipeline::{
    erm_error_set, projected_error_set, run_method_prepared, sweep_grouping, sweep_tau as sweep_point, train_erm,
    JttFirstStage, Method, PipelineConfig, PreparedData, RunManifest,
};
use ppa_core::probe::{LossKind, ModelFile, Provenance};
use ppa_core::{ClassProxyMatrix, FeatureDataset, Split};

use crate::{FirstStage, GenArgs, Recipe, SweepArgs, Toggle, TrainArgs};

/// Bad command-line input that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let (spec, label) = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| usage(format!("bad spec: {e}")))?;
            spec.seed = a.seed;
            (spec, path.display().to_string())
        }
        None => (preset(&a.preset, a.seed)?, a.preset.clone()),
    };
    let (ds, z) = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    let meta = DatasetMeta {
        class_names: vec!["class0".into(), "class1".into()],
        attribute_names: vec!["attr0".into(), "attr1".into()],
        provenance: format!("synthetic {label} seed {}", a.seed),
        normalized: Some(false),
    };
    let features = a.out.join("features.ppaf");
    let proxies = a.out.join("proxies.ppaz");
    dataset::save(&ds, &features, Some(&meta))?;
    dataset::save_proxies(&z, &proxies)?;
    fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    println!(
        "wrote {} samples ({} train) to {} and {}",
        ds.len(),
        ds.split_indices(Split::Train).len(),
        features.display(),
        proxies.display()
    );
    Ok(())
}

pub(crate) fn pipeline_config(a: &TrainArgs) -> Result<PipelineConfig> {
    let mut cfg = match a.recipe {
        Recipe::Backbone => PipelineConfig::default(),
        Recipe::Synthetic => PipelineConfig::synthetic(),
    };
    cfg.train.seed = a.seed;
    cfg.noise_seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(n) = a.normalize {
        cfg.normalize = n == Toggle::On;
    }
    if let Some(l) = a.lambda {
        cfg.jtt_lambda = l;
    }
    cfg.jtt_first_stage = match a.jtt_first_stage {
        FirstStage::Erm => JttFirstStage::Erm,
        FirstStage::Projected => JttFirstStage::Projected,
    };
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(usage(format!("--noise must lie in [0, 1], got {}", a.noise)));
    }
    cfg.pseudo_noise = a.noise;
    cfg.train.validate()?;
    Ok(cfg)
}

struct Inputs {
    dataset: FeatureDataset,
    proxies: ClassProxyMatrix,
    digest: String,
}

fn load_inputs(a: &TrainArgs) -> Result<Inputs> {
    for p in [&a.features, &a.proxies] {
        if !p.is_file() {
            return Err(usage(format!("no such file: {}", p.display())));
        }
    }
    let (dataset, _) = dataset::load(&a.features).with_context(|| format!("loading {}", a.features.display()))?;
    let proxies = dataset::load_proxies(&a.proxies).with_context(|| format!("loading {}", a.proxies.display()))?;
    proxies.check_compatible(&dataset)?;
    let mut h = Sha256::new();
    h.update(fs::read(&a.features)?);
    h.update(fs::read(&a.proxies)?);
    Ok(Inputs {
        dataset,
        proxies,
        digest: hex::encode(h.finalize()),
    })
}

/// `out/<hash>` where the hash covers the command, the inputs and the config.
fn run_dir(out: &Path, command: &str, key: &impl Serialize, inputs: &Inputs) -> Result<PathBuf> {
    let json = serde_json::to_string(&(command, key, &inputs.digest))?;
    let hash = hex::encode(&Sha256::digest(json.as_bytes())[..8]);
    let dir = out.join(hash);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn loss_kind(method: Method) -> LossKind {
    match method {
        Method::Erm | Method::Jtt => LossKind::Ce,
        _ => LossKind::Gla,
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let method = Method::parse(&a.method).map_err(|e| usage(e.to_string()))?;
    let cfg = pipeline_config(a)?;
    let inputs = load_inputs(a)?;
    if method == Method::GtGla && !inputs.dataset.has_attributes() {
        return Err(ppa_core::Error::MissingAttributes("gt-gla").into());
    }
    let dir = run_dir(&a.out, "train", &(method, &cfg), &inputs)?;
    let data = PreparedData::new(&inputs.dataset, &inputs.proxies, cfg.normalize)?;
    let result = run_method_prepared(&data, &inputs.proxies, &cfg, method)?;

    let model = ModelFile::from_scorer(
        &result.model.scorer,
        Provenance {
            method: method.name().into(),
            loss_kind: loss_kind(method),
            tau: result.manifest.tau,
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            selected_epoch: Some(result.model.selected_epoch),
        },
    );
    fs::write(dir.join("model.json"), model.to_json()? + "\n")?;
    write_json(&dir.join("manifest.json"), &Manifest::new(&result.manifest, &cfg, a))?;
    if let Some(r) = &result.model.val_report {
        write_json(&dir.join("val_report.json"), r)?;
    }
    match &result.test_report {
        Some(r) => {
            write_json(&dir.join("report.json"), r)?;
            fs::write(dir.join("report.csv"), report_csv(&[(method.name().into(), r.clone())]))?;
            println!(
                "{}: test WGA {:.4}, avg {:.4}, BGE {:.4} (epoch {}) -> {}",
                method.name(),
                r.worst_group_accuracy,
                r.average_accuracy,
                r.balanced_group_error,
                result.model.selected_epoch,
                dir.display()
            );
        }
        None => println!(
            "{}: trained (no attributed test split) -> {}",
            method.name(),
            dir.display()
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    run: &'a RunManifest,
    features: String,
    proxies: String,
    config: &'a PipelineConfig,
}

impl<'a> Manifest<'a> {
    fn new(run: &'a RunManifest, config: &'a PipelineConfig, a: &TrainArgs) -> Self {
        Self {
            run,
            features: a.features.display().to_string(),
            proxies: a.proxies.display().to_string(),
            config,
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PPA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("PPA_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

pub fn sweep_tau(a: &SweepArgs) -> Result<()> {
    if a.tau_grid.is_empty() || a.tau_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(usage("--tau-grid needs finite values ≥ 0"));
    }
    let cfg = pipeline_config(&a.train)?;
    let inputs = load_inputs(&a.train)?;
    let dir = run_dir(&a.train.out, "sweep-tau", &(&cfg, &a.tau_grid), &inputs)?;
    let data = PreparedData::new(&inputs.dataset, &inputs.proxies, cfg.normalize)?;
    let grouping = sweep_grouping(&data, &inputs.proxies, &cfg)?;
    let points = thread_pool()?.install(|| {
        a.tau_grid
            .par_iter()
            .map(|&t| sweep_point(&data, &inputs.proxies, &cfg, &grouping, t))
            .collect::<ppa_core::Result<Vec<_>>>()
    })?;
    fs::write(dir.join("sweep.csv"), tau_sweep_csv(&points))?;
    fs::write(dir.join("sweep.gp"), tau_sweep_gnuplot("sweep.csv"))?;
    for p in &points {
        println!("tau {:>4}: test WGA {:.4}, avg {:.4}", p.tau, p.test_wga, p.test_avg);
    }
    println!("-> {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct IdentifyOutput {
    worst_group: (usize, usize),
    erm: IdentificationReport,
    projected: IdentificationReport,
}

pub fn identify(a: &TrainArgs) -> Result<()> {
    let cfg = pipeline_config(a)?;
    let inputs = load_inputs(a)?;
    if !inputs.dataset.has_attributes() {
        return Err(ppa_core::Error::MissingAttributes("identify").into());
    }
    let dir = run_dir(&a.out, "identify", &cfg, &inputs)?;
    let data = PreparedData::new(&inputs.dataset, &inputs.proxies, cfg.normalize)?;
    let reference = train_erm(&data, &inputs.proxies, &cfg)?;
    let worst = reference
        .val_report
        .as_ref()
        .ok_or(ppa_core::Error::EmptySplit("val"))?
        .worst_group;

    let erm_flags = erm_error_set(&data, &inputs.proxies, &cfg)?;
    let proj_flags = projected_error_set(&data, &inputs.proxies, &cfg)?;
    let out = IdentifyOutput {
        worst_group: worst,
        erm: identification_quality(&erm_flags, &data.dataset, &data.train_idx, worst)?,
        projected: identification_quality(&proj_flags, &data.dataset, &data.train_idx, worst)?,
    };
    write_json(&dir.join("identification.json"), &out)?;
    println!("worst validation group (class, attribute) = {worst:?}");
    for (name, r) in [("erm", &out.erm), ("projected", &out.projected)] {
        let precision = r
            .precision
            .map_or("n/a (nothing identified)".to_string(), |p| format!("{p:.4}"));
        println!(
            "{name:>9}: identified {:>5}, precision {precision}, recall {:.4}",
            r.identified, r.recall
        );
    }
    println!("-> {}", dir.display());
    Ok(())
}
