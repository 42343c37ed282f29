use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use puzzlecam::data::{self, load_dataset, make_synthetic, write_dataset, DatasetDescriptor, DatasetItem};
use puzzlecam::infer::{evaluate_miou, export_cams, import_cams, infer_cams, make_pseudo_labels};
use puzzlecam::train::{self, run_ablation, AblationTable, ABLATION_ROWS};
use puzzlecam::Classifier;

use crate::config::{ConfigError, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: puzzlecam::Error) -> CliError {
    match e {
        puzzlecam::Error::Config(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn config<T>(r: std::result::Result<T, ConfigError>) -> Result<T> {
    r.map_err(|e| CliError::Config(e.0))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Creates the output directory and records the resolved configuration.
pub fn prepare(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    write(&out.join(format!("{command}.resolved.cfg")), &cfg.to_text())?;
    Ok(out)
}

fn dataset(cfg: &RunConfig) -> Result<DatasetDescriptor> {
    if config(cfg.get::<bool>("data.synthetic"))? {
        make_synthetic(&config(cfg.synthetic())?).map_err(runtime)
    } else {
        let root = config(cfg.data_root())?;
        load_dataset(&root, cfg.raw("data.split")).map_err(runtime)
    }
}

fn load_model(cfg: &RunConfig, out: &Path) -> Result<Classifier<f32>> {
    let path = cfg.path_or("infer.checkpoint", out.join(train::FINAL_CHECKPOINT));
    Classifier::from_checkpoint(&path).map_err(runtime)
}

/// Runs `f` over the items, in parallel unless deterministic, and returns
/// the first error in item order.
fn for_each_item<T: Send>(
    cfg: &RunConfig,
    items: &[DatasetItem],
    f: impl Fn(&DatasetItem) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = if config(cfg.get::<bool>("run.deterministic"))? {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    };
    results.into_iter().collect()
}

pub fn make_synthetic_cmd(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "make-synthetic")?;
    let ds = make_synthetic(&config(cfg.synthetic())?).map_err(runtime)?;
    let written = write_dataset(&ds, &out).map_err(runtime)?;
    println!(
        "wrote {} images ({} classes) to {}",
        written.len(),
        written.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    prepare(cfg, "train")?;
    let tc = config(cfg.train())?;
    let ds = dataset(cfg)?;
    let outcome = train::train(&tc, &ds).map_err(runtime)?;
    if let (Some(first), Some(last)) = (outcome.epoch_means.first(), outcome.epoch_means.last()) {
        println!(
            "trained {} epochs: L_cls {:.4} -> {:.4}, total {:.4} -> {:.4}",
            tc.epochs, first.cls, last.cls, first.total, last.total
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    Ok(())
}

pub fn infer_cmd(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "infer")?;
    let icfg = config(cfg.inference())?;
    let ds = dataset(cfg)?;
    let model = load_model(cfg, &out)?;
    let dir = out.join("cams");
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    for_each_item(cfg, ds.items(), |item| {
        let image = item.load_tensor().map_err(runtime)?;
        let cams = infer_cams(&model, image.view(), Some(&item.labels), &icfg).map_err(runtime)?;
        let classes: Vec<usize> = if icfg.restrict_to_image_labels {
            item.labels.present()
        } else {
            (0..ds.num_classes()).collect()
        };
        let subset = cams.select(&classes).map_err(runtime)?;
        let ids: Vec<u16> = classes.iter().map(|&c| c as u16).collect();
        export_cams(&subset, &ids, dir.join(format!("{}.pcam", item.id))).map_err(runtime)
    })?;
    println!("wrote {} CAM files to {}", ds.len(), dir.display());
    Ok(())
}

pub fn pseudo_cmd(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "pseudo")?;
    let pcfg = config(cfg.pseudo())?;
    let ds = dataset(cfg)?;
    let cams_dir = cfg.path_or("pseudo.cams", out.join("cams"));
    let dir = out.join("pseudo");
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    for_each_item(cfg, ds.items(), |item| {
        let path = cams_dir.join(format!("{}.pcam", item.id));
        if !path.is_file() {
            return Err(CliError::Runtime(format!(
                "no CAM file for image `{}` (expected {})",
                item.id,
                path.display()
            )));
        }
        let file = import_cams(&path).map_err(runtime)?;
        let cams = file.to_full_stack(ds.num_classes()).map_err(runtime)?;
        let labels = make_pseudo_labels(&cams, &pcfg).map_err(runtime)?;
        data::write_mask(&dir.join(format!("{}.png", item.id)), &labels).map_err(runtime)
    })?;
    println!("wrote {} label maps to {}", ds.len(), dir.display());
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "eval")?;
    let pcfg = config(cfg.pseudo())?;
    let ds = dataset(cfg)?;
    let pred_dir = cfg.path_or("eval.predictions", out.join("pseudo"));
    let with_masks: Vec<DatasetItem> = ds.items().iter().filter(|i| i.mask.is_some()).cloned().collect();
    if with_masks.is_empty() {
        return Err(CliError::Runtime(format!(
            "split `{}` has no ground-truth masks",
            ds.split
        )));
    }
    let pairs = for_each_item(cfg, &with_masks, |item| {
        let path = pred_dir.join(format!("{}.png", item.id));
        if !path.is_file() {
            return Err(CliError::Runtime(format!(
                "no prediction for image `{}` (expected {})",
                item.id,
                path.display()
            )));
        }
        let pred = data::read_mask(&path).map_err(runtime)?;
        let gt = item.load_mask().map_err(runtime)?.expect("filtered on masks");
        Ok((item.id.clone(), pred, gt))
    })?;
    let report = evaluate_miou(
        pairs.iter().map(|(id, p, g)| (id.as_str(), p.view(), g.view())),
        ds.num_classes(),
    )
    .map_err(runtime)?;
    let text = report.to_text(&ds.class_names, Some(pcfg.threshold));
    write(&out.join("miou.txt"), &text)?;
    write(&out.join("miou.csv"), &report.to_csv(&ds.class_names))?;
    print!("{text}");
    Ok(())
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "ablate")?;
    let base = config(cfg.train())?;
    let eval = config(cfg.eval_settings())?;
    let rows = match cfg.raw("ablate.rows") {
        "all" => ABLATION_ROWS.to_vec(),
        "ends" => vec![ABLATION_ROWS[0], ABLATION_ROWS[3]],
        other => {
            return Err(CliError::Config(format!(
                "config key `ablate.rows`: expected `all` or `ends`, got `{other}`"
            )))
        }
    };
    let ds = dataset(cfg)?;
    let table: AblationTable = run_ablation(&base, &ds, &eval, &rows).map_err(runtime)?;
    write(&out.join("ablation.txt"), &table.to_text())?;
    write(&out.join("ablation.csv"), &table.to_csv())?;
    print!("{}", table.to_text());
    println!("pseudo-label threshold {}", eval.pseudo.threshold);
    Ok(())
}

pub fn visualize_cmd(cfg: &RunConfig, images: &[PathBuf]) -> Result<()> {
    let out = prepare(cfg, "visualize")?;
    let icfg = config(cfg.inference())?;
    let model = load_model(cfg, &out)?;
    let results: Vec<(PathBuf, Result<()>)> = images
        .par_iter()
        .map(|path| (path.clone(), crate::visualize::render(&model, path, &icfg, &out)))
        .collect();
    let mut ok = 0;
    for (path, r) in results {
        match r {
            Ok(()) => ok += 1,
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    if ok == 0 {
        return Err(CliError::Runtime("no image could be visualized".into()));
    }
    println!(
        "wrote overlays for {ok} of {} images to {}",
        images.len(),
        out.display()
    );
    Ok(())
}
