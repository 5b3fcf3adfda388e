use std::path::{Path, PathBuf};
use std::time::Instant;

use connseg::checkpoint::load_model;
use connseg::codec::{decode as decode_cube, encode as encode_mask};
use connseg::dataset::{
    generate_synthetic, image_to_tensor, load_gray, load_image, load_instances, load_mask, read_ccub, save_gray,
    save_mask, write_ccub, Manifest, SyntheticSpec,
};
use connseg::metrics::{
    evaluate_dataset, map_r_dataset, mask_instances, threshold_grid, ImageScore, InstanceSet, PRPoint, ScoreMap,
};
use connseg::model::ConnNet;
use connseg::training::train as train_run;
use connseg::tta::{fused_prediction, FusionPlan, Prediction};
use connseg::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};
use connseg::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{read_json, write_json, RunConfig};
use crate::{
    CliError, DecodeArgs, EncodeArgs, EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, TrainArgs,
};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p, "spec")?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.count {
        spec.count = n;
    }
    spec.validate().map_err(|e| CliError::Usage(format!("spec: {e}")))?;
    create_dir(&a.out)?;
    let manifest = generate_synthetic(&spec, &a.out)?;
    write_json(&spec, &a.out.join("spec.json"))?;
    eprintln!(
        "wrote {} samples and {}",
        manifest.len(),
        a.out.join("manifest.csv").display()
    );
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<(), CliError> {
    let mask = load_mask(&a.mask)?;
    let cube = encode_mask(&mask, a.pattern);
    write_ccub(&cube, &a.out)?;
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let cube = read_ccub(&a.cube)?;
    let mask = decode_cube(&cube, a.t, a.k).map_err(|e| match e {
        Error::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Data(other),
    })?;
    save_mask(&mask, &a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.max_steps {
        cfg.train.max_steps = Some(v);
    }
    if let Some(v) = a.freeze_backbone_steps {
        cfg.train.freeze_backbone_steps = v;
    }
    cfg.validate()?;
    let manifest = Manifest::read(&a.data)?;
    create_dir(&a.out)?;
    write_json(&cfg, &a.out.join("config.json"))?;
    let start = Instant::now();
    let (_, report) = train_run(&manifest, &cfg.model, &cfg.train, &a.out, &mut |row| {
        if let Some(f) = row.val_max_f {
            eprintln!("step {:>6}  loss {:.5}  val maxF {:.4}", row.step, row.loss, f);
        }
    })?;
    eprintln!(
        "trained {} steps in {:.1}s; final loss {:.5}; best val maxF {}",
        report.steps,
        start.elapsed().as_secs_f64(),
        report.final_loss(),
        report.best_val_max_f.map_or("n/a".into(), |f| format!("{f:.4}"))
    );
    if let Some(p) = &report.best_checkpoint {
        eprintln!("best checkpoint: {}", p.display());
    }
    Ok(())
}

fn load_predictor(checkpoint: &Path, config: Option<&Path>) -> Result<ConnNet, CliError> {
    let model_cfg = match config {
        Some(p) => Some(RunConfig::load(Some(p))?.model),
        None => None,
    };
    Ok(load_model(checkpoint, model_cfg)?)
}

fn write_probabilities(pred: &Prediction, path: &Path) -> Result<(), CliError> {
    match pred {
        Prediction::Connectivity(cube) => write_ccub(cube, path)?,
        Prediction::Saliency(map) => {
            let bytes: Vec<u8> = map.scores().iter().map(|&v| (v * 255.0).round() as u8).collect();
            save_gray(map.height(), map.width(), &bytes, path)?;
        }
    }
    Ok(())
}

fn prob_extension(pred: &Prediction) -> &'static str {
    match pred {
        Prediction::Connectivity(_) => "ccub",
        Prediction::Saliency(_) => "png",
    }
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let mut plan = match &a.fusion {
        Some(p) => read_json::<FusionPlan>(p, "fusion plan")?,
        None => FusionPlan::default(),
    };
    if let Some(t) = a.t {
        plan.t = t;
    }
    if let Some(k) = a.k {
        plan.k = k;
    }
    plan.validate().map_err(|e| CliError::Usage(format!("fusion plan: {e}")))?;
    let model = load_predictor(&a.checkpoint, a.config.as_deref())?;

    if let (Some(image), Some(out)) = (&a.image, &a.out) {
        let pred = fused_prediction(&model, &image_to_tensor(&load_image(image)?), &plan)?;
        save_mask(&pred.to_mask(plan.t, plan.k)?, out)?;
        if let Some(p) = &a.prob_out {
            write_probabilities(&pred, p)?;
        }
        return Ok(());
    }
    let (Some(manifest), Some(dir)) = (&a.manifest, &a.out_dir) else {
        return Err(CliError::Usage("predict needs --image/--out or --manifest/--out-dir".into()));
    };
    let manifest = Manifest::read(manifest)?;
    create_dir(dir)?;
    manifest
        .records
        .par_iter()
        .map(|rec| -> Result<(), CliError> {
            let pred = fused_prediction(&model, &image_to_tensor(&load_image(&rec.image)?), &plan)?;
            let stem = rec.stem();
            write_probabilities(&pred, &dir.join(format!("{stem}.{}", prob_extension(&pred))))?;
            save_mask(&pred.to_mask(plan.t, plan.k)?, dir.join(format!("{stem}.mask.png")))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, _>>()?;
    eprintln!("wrote {} predictions to {}", manifest.len(), dir.display());
    Ok(())
}

/// Evaluation report written by `eval`.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub count: usize,
    #[serde(rename = "maxF")]
    pub max_f: f64,
    pub best_t: f64,
    #[serde(rename = "mean_image_maxF")]
    pub mean_image_max_f: f64,
    pub grid: usize,
    pub per_threshold: Vec<PRPoint>,
    pub per_image: Vec<ImageScore>,
    /// Mask AP at `iou`, when every record lists instance masks.
    pub mapr: Option<f64>,
    pub iou: f64,
}

fn load_prediction(dir: &Path, stem: &str) -> Result<ScoreMap, CliError> {
    let cube = dir.join(format!("{stem}.ccub"));
    if cube.exists() {
        return Ok(ScoreMap::connectivity(&read_ccub(&cube)?));
    }
    let png = dir.join(format!("{stem}.png"));
    if png.exists() {
        let (h, w, v) = load_gray(&png)?;
        return Ok(ScoreMap::saliency(h, w, v.iter().map(|&b| f32::from(b) / 255.0).collect())?);
    }
    Err(CliError::Data(Error::Data(format!(
        "no prediction for {stem:?} in {} (expected {stem}.ccub or {stem}.png)",
        dir.display()
    ))))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let grid_n = a.grid.unwrap_or(cfg.metrics.grid);
    let grid = threshold_grid(grid_n).map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = Manifest::read(&a.gt_manifest)?;
    if manifest.is_empty() {
        return Err(CliError::Data(Error::Data("ground-truth manifest is empty".into())));
    }
    let items = manifest
        .records
        .par_iter()
        .map(|rec| -> Result<_, CliError> {
            let stem = rec.stem();
            let pred = load_prediction(&a.pred_dir, &stem)?;
            let gt = load_mask(&rec.mask)?;
            Ok((stem, pred, gt))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = evaluate_dataset(&items, &grid)?;

    let mapr = if manifest.records.iter().all(|r| r.instances.is_some()) {
        let sets = manifest
            .records
            .par_iter()
            .zip(&items)
            .map(|(rec, (_, pred, _))| -> Result<InstanceSet, CliError> {
                let binary = pred.binarize(summary.best_t)?;
                Ok(InstanceSet {
                    predictions: mask_instances(&binary, pred.scores())?,
                    ground_truth: load_instances(rec.instances.as_ref().expect("checked above"))?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(map_r_dataset(&sets, cfg.metrics.iou)?)
    } else {
        None
    };

    let dataset = a.dataset.unwrap_or_else(|| {
        a.gt_manifest
            .file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = EvalReport {
        dataset,
        count: items.len(),
        max_f: summary.max_f,
        best_t: summary.best_t,
        mean_image_max_f: summary.mean_image_max_f,
        grid: grid_n,
        per_threshold: summary.per_threshold,
        per_image: summary.per_image,
        mapr,
        iou: cfg.metrics.iou,
    };
    write_json(&report, &a.report)?;
    if let Some(p) = &a.pr_csv {
        write_pr_csv(&report.per_threshold, p)?;
    }
    println!(
        "{}: {} images, maxF {:.4} at t={:.4}{}",
        report.dataset,
        report.count,
        report.max_f,
        report.best_t,
        report.mapr.map_or(String::new(), |m| format!(", mAP^r@{} {:.4}", report.iou, m))
    );
    Ok(())
}

fn write_pr_csv(curve: &[PRPoint], path: &PathBuf) -> Result<(), CliError> {
    let mut text = String::from("threshold,precision,recall,f_beta\n");
    for p in curve {
        text.push_str(&format!("{},{},{},{}\n", p.threshold, p.precision, p.recall, p.f_beta));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(CliError::Usage(format!("--eps must be positive, got {}", a.eps)));
    }
    let start = Instant::now();
    let outcomes = gradcheck_suite(&cfg.model, a.seed, a.eps)?;
    let mut failed = Vec::new();
    println!("{:<24} {:>12} {:>10}  status", "check", "rel_error", "entries");
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:>12.3e} {:>10}  {status}",
            o.name, o.report.max_rel_error, o.report.entries_checked
        );
        if !o.passed() {
            failed.push(o.name.clone());
        }
    }
    let worst = outcomes.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    println!(
        "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}) in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "relative error ≥ {GRADCHECK_TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}
