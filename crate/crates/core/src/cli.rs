//! Command implementations behind the `mcanet` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cam::{self, compute_cam};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_config_text, resolve, RunConfig};
use crate::data::{
    self, generate_synthetic_dataset, load_manifest, split_train_test, Dataset, Manifest, SynthConfig,
    SynthOutput,
};
use crate::error::{Error, Result};
use crate::gradcheck::{full_suite, GradCheckReport};
use crate::metrics::{mean_average_precision, per_class_report, EvalReport, DEFAULT_THRESHOLD};
use crate::model::Network;
use crate::nn::Module;
use crate::ppm;
use crate::training::{evaluate, BatchMaker, StepRecord, Trainer};

pub const CONFIG_FILE: &str = "config.txt";
pub const SEED_FILE: &str = "seed.txt";
pub const LOSS_LOG: &str = "loss.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.mcan";
const CLASS_NAMES_ENTRY: &str = "meta.class_names";
const EVAL_BATCH: usize = 64;

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:03}.mcan")
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(out_dir: &Path, config: &SynthConfig) -> Result<SynthOutput> {
    let out = generate_synthetic_dataset(out_dir, config)?;
    println!(
        "wrote {} images with {} classes to {}",
        out.manifest.len(),
        out.manifest.num_classes(),
        out_dir.display()
    );
    Ok(out)
}

/// Train and test sets named by the config.
pub fn load_splits(config: &RunConfig) -> Result<(Manifest, Manifest)> {
    let path = config
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::usage("training needs data.manifest"))?;
    require_file(path, "manifest")?;
    let manifest = load_manifest(path)?;
    match &config.data.test_manifest {
        Some(test_path) => {
            require_file(test_path, "test manifest")?;
            let test = load_manifest(test_path)?;
            if test.class_names != manifest.class_names {
                return Err(Error::data("train and test manifests name different classes"));
            }
            Ok((manifest, test))
        }
        None => split_train_test(&manifest, config.data.train_fraction, config.seed),
    }
}

/// Fresh network for `config` with `num_classes` outputs, seeded by `config.seed`.
pub fn build_network(config: &RunConfig, num_classes: usize) -> Result<Network<f32>> {
    let head = config.head_for(num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Network::build(&config.backbone, &head, &mut rng)
}

pub fn build_trainer(config: &RunConfig, num_classes: usize) -> Result<Trainer> {
    let network = build_network(config, num_classes)?;
    let batches = BatchMaker {
        seed: config.seed,
        image_size: config.data.image_size,
        augment: config.augmentation(),
    };
    let mut trainer = Trainer::new(network, config.optim.clone(), batches)?;
    trainer.prefetch = config.data.prefetch;
    Ok(trainer)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub report: EvalReport,
    pub train_map: f64,
    pub run_dir: PathBuf,
}

/// Train for `optim.epochs`, writing the run directory as it goes.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_manifest, test_manifest) = load_splits(config)?;
    let train = Dataset::from_manifest(&train_manifest)?;
    let test = Dataset::from_manifest(&test_manifest)?;
    let class_names = train.class_names.clone();
    let mut trainer = build_trainer(config, class_names.len())?;

    let run_dir = config.out_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let echo = config.echo();
    write_text(&run_dir.join(CONFIG_FILE), &echo)?;
    write_text(&run_dir.join(SEED_FILE), &format!("{}\n", config.seed))?;
    let log_path = run_dir.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "{}", StepRecord::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;

    println!(
        "training on {} images, testing on {}, {} classes, {} parameters",
        train.len(),
        test.len(),
        class_names.len(),
        trainer.network.param_count()
    );
    for _ in 0..config.optim.epochs {
        let (stats, records) = trainer.train_epoch(&train)?;
        for r in &records {
            writeln!(log, "{}", r.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ckpt = run_checkpoint(&mut trainer, &echo, &class_names);
        ckpt.save(run_dir.join(checkpoint_file_name(stats.epoch)))?;
        ckpt.save(run_dir.join(LAST_CHECKPOINT))?;
        println!(
            "epoch {:>3}  loss {:.5}  {:.0} img/s",
            stats.epoch, stats.mean_loss, stats.images_per_sec
        );
    }

    let size = config.data.image_size;
    let train_map = mean_average_precision(&evaluate(&trainer.network, &train, size, EVAL_BATCH)?)?;
    let eval_set = if test.is_empty() { &train } else { &test };
    let report = per_class_report(&evaluate(&trainer.network, eval_set, size, EVAL_BATCH)?, DEFAULT_THRESHOLD);
    write_text(&run_dir.join(REPORT_TXT), &format!("train mAP {train_map:.4}\n{report}"))?;
    report.write_csv(run_dir.join(REPORT_CSV))?;
    println!("train mAP {train_map:.4}");
    println!("{report}");
    Ok(TrainOutcome {
        trainer,
        report,
        train_map,
        run_dir,
    })
}

fn run_checkpoint(trainer: &mut Trainer, echo: &str, class_names: &[String]) -> Checkpoint {
    let mut ckpt = trainer.checkpoint(echo);
    ckpt.push_text(CLASS_NAMES_ENTRY, &class_names.join("\n"));
    ckpt
}

/// A trained network with the configuration and class names it was saved with.
pub struct LoadedModel {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub network: Network<f32>,
}

/// Rebuild the network described by a checkpoint's config echo, then apply
/// `overrides` (which may change data settings but not the architecture).
pub fn load_model(path: &Path, overrides: &[(String, String)]) -> Result<LoadedModel> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let saved = parse_config_text(&ckpt.text("meta.config")?)?;
    let config = resolve(RunConfig::default(), &saved, overrides)?;
    let class_names: Vec<String> = ckpt.text(CLASS_NAMES_ENTRY)?.lines().map(str::to_string).collect();
    let mut trainer = build_trainer(&config, class_names.len())?;
    trainer.restore(&ckpt)?;
    Ok(LoadedModel {
        config,
        class_names,
        network: trainer.network,
    })
}

/// Evaluate a checkpoint on `manifest`, or on the test split of its
/// training manifest when none is given.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: Option<&Path>,
    overrides: &[(String, String)],
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let model = load_model(checkpoint, overrides)?;
    let rows = match manifest {
        Some(path) => {
            require_file(path, "manifest")?;
            load_manifest(path)?
        }
        None => load_splits(&model.config)?.1,
    };
    if rows.class_names != model.class_names {
        return Err(Error::data(format!(
            "manifest classes {:?} differ from the checkpoint's {:?}",
            rows.class_names, model.class_names
        )));
    }
    let data = Dataset::from_manifest(&rows)?;
    let pred = evaluate(&model.network, &data, model.config.data.image_size, EVAL_BATCH)?;
    let report = per_class_report(&pred, DEFAULT_THRESHOLD);
    println!("{report}");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(REPORT_TXT), &report.to_string())?;
        report.write_csv(dir.join(REPORT_CSV))?;
    }
    Ok(report)
}

/// Write one heatmap per (image, class). With no classes requested, every
/// class the model predicts is drawn, or the top-scoring one if none is.
pub fn cmd_cam(
    checkpoint: &Path,
    images: &[PathBuf],
    classes: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let model = load_model(checkpoint, &[])?;
    let requested = classes
        .iter()
        .map(|name| {
            model
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::usage(format!("unknown class {name:?}; known: {:?}", model.class_names)))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let size = model.config.data.image_size;
    let m = &model.network.head.classifier.value;
    let mut written = Vec::new();
    for path in images {
        require_file(path, "image")?;
        let image = ppm::decode_image(path)?;
        let (h, w) = (image.dims()[1], image.dims()[2]);
        let x = data::resize_bilinear(&image, size, size)?.reshape(&[1, 3, size, size])?;
        let features = model.network.features(&x)?;
        let chosen = if requested.is_empty() {
            let logits = model.network.head.infer(&features)?;
            predicted_classes(&logits.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
        } else {
            requested.clone()
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for class in chosen {
            let map = compute_cam(&features, m, class, (h, w))?;
            let target = out_dir.join(cam::cam_file_name(stem, &model.class_names[class]));
            cam::render_heatmap(&map, &image, &target)?;
            println!("{}", target.display());
            written.push(target);
        }
    }
    Ok(written)
}

fn predicted_classes(logits: &[f64]) -> Vec<usize> {
    let positive: Vec<usize> = (0..logits.len()).filter(|&c| logits[c] >= 0.0).collect();
    if !positive.is_empty() {
        return positive;
    }
    let best = (0..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
    vec![best]
}

/// Run the whole gradient-check suite; any failure is an acceptance error.
pub fn cmd_gradcheck(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let reports = full_suite(tolerance)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed at tolerance {tolerance:e}", reports.len());
        Ok(reports)
    } else {
        Err(Error::Acceptance(format!(
            "{} of {} gradient checks failed: {}",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )))
    }
}
