use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use urocnn::arch::{load_checkpoint, Model};
use urocnn::dataset::{
    generate_synthetic, ingest_manifest, load_ground_truth, write_synthetic, DatasetManifest, DecoderRegistry,
    LoadedSet, Procedure, SyntheticOptions,
};
use urocnn::gradcam::{gradcam as grad_cam, overlay};
use urocnn::metrics::{evaluate_manifest, report as write_report, roc_curve, roc_svg, ScoredSample};
use urocnn::tensor::Tensor;
use urocnn::trainer::{run_matrix_from, Experiment, ExperimentBundle, RunRecord};

use crate::config::{output_path, RunConfig, ECHO_FILE};
use crate::{Common, EvalArgs, GenerateArgs, GradcamArgs, ReportArgs, TrainArgs};

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    Ok(c)
}

fn finish_config(c: RunConfig) -> Result<RunConfig> {
    c.validate()?;
    Ok(c)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(ECHO_FILE), config.to_toml())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} not found", path.display()),
        )
        .into());
    }
    Ok(())
}

fn output_dir(common: &Common, config: &RunConfig, fallback: &str) -> PathBuf {
    let dir = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback));
    output_path(&dir)
}

fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let csv = dir.join("manifest.csv");
    require(&csv, "manifest")?;
    let manifest = ingest_manifest(&csv, dir)?;
    let gt = dir.join("ground_truth.csv");
    Ok(if gt.exists() {
        load_ground_truth(&manifest, &gt)?
    } else {
        manifest
    })
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    require(path, "checkpoint")?;
    Ok(load_checkpoint::<f32>(path)?)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(n) = args.per_cell {
        config.data.per_cell = n;
    }
    if let Some(r) = args.resolution {
        config.data.resolution = r;
    }
    if let Some(out) = &args.common.out {
        config.data.dir = out.clone();
    }
    let config = finish_config(config)?;
    let dir = output_path(&config.data.dir);
    create_dir(&dir)?;
    let composition = config.data.composition();
    eprintln!(
        "generate: {} images at {}px into {}",
        composition.total(),
        config.data.resolution,
        dir.display()
    );
    let manifest = generate_synthetic(
        &composition,
        config.data.resolution,
        config.seed,
        &SyntheticOptions::default(),
    )?;
    write_synthetic(&manifest, &dir)?;
    echo_config(&config, &dir)?;
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(d) = &args.data {
        config.data.dir = d.clone();
    }
    if !args.arch.is_empty() {
        config.model.archs = args.arch.clone();
    }
    if !args.scenario.is_empty() {
        config.train.scenarios = args.scenario.clone();
    }
    let t = &mut config.train;
    t.warm_epochs = args.warm_epochs.unwrap_or(t.warm_epochs);
    t.finetune_epochs = args.finetune_epochs.unwrap_or(t.finetune_epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.folds = args.folds.unwrap_or(t.folds);
    t.jobs = args.jobs.unwrap_or(t.jobs);
    config.model.width_scale = args.scale.unwrap_or(config.model.width_scale);
    config.model.resolution = args.resolution.unwrap_or(config.model.resolution);
    if let Some(init) = &args.init {
        config.model.init = Some(init.clone());
    }
    let out = output_dir(&args.common, &config, "runs/train");
    config.output_dir = Some(out.clone());
    let config = finish_config(config)?;

    let starts: Vec<Model<f32>> = match &config.model.init {
        Some(path) => {
            let m = load_model(path)?;
            eprintln!(
                "train: starting from {} ({}, lineage {:?})",
                path.display(),
                m.spec.backbone,
                m.provenance_tags().iter().map(ToString::to_string).collect::<Vec<_>>()
            );
            vec![m]
        }
        None => Vec::new(),
    };
    let data_dir = output_path(&config.data.dir);
    let manifest = load_dataset(&data_dir)?;
    let resolution = match starts.first() {
        Some(m) => m.spec.input_resolution,
        None => (config.model.resolution, config.model.resolution),
    };
    let set = LoadedSet::load(manifest, resolution)?;
    create_dir(&out)?;
    echo_config(&config, &out)?;

    let clock = Instant::now();
    let progress = |r: &RunRecord| {
        let mut aucs = String::new();
        for e in &r.evals {
            let _ = write!(aucs, " {}={:.3}", e.domain, e.auc);
        }
        eprintln!(
            "train: {} s{} fold{} step{} ({}) auc{aucs} [{:.1}s]",
            r.arch,
            r.scenario,
            r.fold,
            r.step,
            r.outcome.train_domain,
            clock.elapsed().as_secs_f64()
        );
    };
    let exp = Experiment::new(&set, config.train_config())?
        .with_out_dir(&out)
        .with_progress(&progress);
    let starts = if starts.is_empty() {
        config
            .model
            .archs
            .iter()
            .map(|&a| exp.start_model(&config.model.spec(a)))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        starts
    };
    let bundle = run_matrix_from(&exp, &starts, &config.train.scenarios)?;
    eprintln!("train: {} runs written to {}", bundle.runs.len(), out.display());
    Ok(())
}

fn roc_csv(samples: &[ScoredSample]) -> Result<(String, f64)> {
    let roc = roc_curve(samples)?;
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.threshold, p.fpr, p.tpr);
    }
    Ok((s, roc.auc))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(d) = &args.data {
        config.data.dir = d.clone();
    }
    let out = output_dir(&args.common, &config, "eval");
    config.output_dir = Some(out.clone());
    let config = finish_config(config)?;
    let model = load_model(&args.checkpoint)?;
    let manifest = load_dataset(&output_path(&config.data.dir))?;
    let scores = evaluate_manifest(&model.network, &manifest, None)?;
    create_dir(&out)?;

    let mut csv = String::from("id,procedure,label,score\n");
    for s in &scores {
        let _ = writeln!(csv, "{},{},{},{:.6}", s.id, s.procedure, s.label, s.score);
    }
    write_file(&out.join("scores.csv"), csv)?;
    let (points, auc) = roc_csv(&scores)?;
    write_file(&out.join("roc.csv"), points)?;
    let roc = roc_curve(&scores)?;
    write_file(
        &out.join("roc.svg"),
        roc_svg("Evaluation", &[(model.spec.backbone.to_string(), &roc)]),
    )?;
    let mut per_procedure = serde_json::Map::new();
    for &p in Procedure::ALL {
        let subset: Vec<ScoredSample> = scores.iter().filter(|s| s.procedure == p).cloned().collect();
        if let Ok(r) = roc_curve(&subset) {
            per_procedure.insert(p.as_str().to_ascii_lowercase(), r.auc.into());
        }
    }
    let summary = serde_json::json!({
        "checkpoint": args.checkpoint,
        "spec": model.spec,
        "provenance": model.provenance(),
        "samples": scores.len(),
        "auc": auc,
        "auc_by_procedure": per_procedure,
    });
    write_file(&out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    echo_config(&config, &out)?;
    eprintln!("eval: {} samples, AUC {auc:.4}", scores.len());
    Ok(())
}

pub fn gradcam(args: GradcamArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    if let Some(c) = args.class {
        config.gradcam.class_index = c;
    }
    if let Some(l) = &args.layer {
        config.gradcam.layer = Some(l.clone());
    }
    if let Some(o) = args.opacity {
        config.gradcam.opacity = o;
    }
    let out = output_dir(&args.common, &config, "gradcam");
    config.output_dir = Some(out.clone());
    let config = finish_config(config)?;
    let model = load_model(&args.checkpoint)?;
    require(&args.image, "image")?;
    let image = DecoderRegistry::default()
        .decode_file(&args.image)
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.image.display()))?;
    let (h, w) = model.spec.input_resolution;
    let input = Tensor::new(vec![3, h, w], image.resized(w, h).to_chw())?;
    let map = grad_cam(
        &model.network,
        &input,
        config.gradcam.class_index,
        config.gradcam.layer.as_deref(),
    )?
    .with_sample(args.image.display().to_string());
    let blended = overlay(&image, &map, config.gradcam.opacity)?;
    create_dir(&out)?;
    let stem = args
        .image
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    blended.write_ppm(&out.join(format!("{stem}_gradcam.ppm")))?;
    write_file(&out.join(format!("{stem}_heatmap.csv")), map.to_csv())?;
    let summary = serde_json::json!({
        "image": args.image,
        "checkpoint": args.checkpoint,
        "layer": map.layer,
        "class_index": map.class_index,
        "grid": [map.height, map.width],
        "degenerate": map.degenerate,
    });
    write_file(
        &out.join(format!("{stem}_gradcam.json")),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    echo_config(&config, &out)?;
    eprintln!(
        "gradcam: layer {} grid {}x{}{}",
        map.layer,
        map.height,
        map.width,
        if map.degenerate { " (degenerate)" } else { "" }
    );
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<()> {
    finish_config(base_config(&args.common)?)?;
    require(&args.bundle, "bundle directory")?;
    let bundle = ExperimentBundle::read(&args.bundle)?;
    let out = match &args.common.out {
        Some(o) => output_path(o),
        None => args.bundle.join("report"),
    };
    let summary = write_report(&bundle, &out)?;
    if summary.is_empty() {
        eprintln!("report: no runs in {}", args.bundle.display());
    }
    for c in &summary.cells {
        eprintln!(
            "report: {} s{} step{} {}->{} pooled AUC {:.3}",
            c.arch, c.scenario, c.step, c.train_domain, c.eval_domain, c.pooled.auc
        );
    }
    Ok(())
}
