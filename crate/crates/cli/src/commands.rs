use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dualvit::data::synth::{generate, SynthSpec};
use dualvit::data::{
    decode_and_resize, load_manifest, load_manifest_in, normalize, ClassDistribution, DecodePolicy, LabelVocabulary,
    Loader,
};
use dualvit::fusion::{predict, ModelGradCheck};
use dualvit::metrics::evaluate;
use dualvit::tensor::{DType, Element, OpKind, Tensor};
use dualvit::train::{config_hash, load_checkpoint, read_header, save_checkpoint, Checkpoint, Trainer};
use dualvit::DualStageModel;
use serde::Serialize;

use crate::config::{DataSection, RunConfig};
use crate::CliError;

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "dualvit", version, about = "Dual-stage ViT + Swin multi-label image classifier")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints and loss_log.csv to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest and write the metric reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated label names the checkpoint must have been trained with.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Skip unreadable images instead of aborting.
        #[arg(long)]
        skip_bad_images: bool,
    },
    /// Print per-label probabilities and the argmax label for one image as JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Finite-difference check of every model gradient in 64-bit.
    Gradcheck {
        /// Run config whose model section is checked; the default model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        /// Parameter group to leave out: vit, swin or fusion.
        #[arg(long)]
        freeze: Vec<String>,
        /// Scale the backward rule of one op kind, e.g. `gelu:1.5`.
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
    /// Per-label counts of a manifest as CSV and SVG.
    DatasetStats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated label names; the 14 chest X-ray findings by default.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Write a synthetic image set with one geometric pattern per class.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Print the JSON schema of the run config.
    Schema,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let config = RunConfig::load(&config)?;
            let out = out
                .or_else(|| config.output_dir.clone())
                .ok_or_else(|| CliError::Input("no output directory: pass --out or set output_dir".into()))?;
            match config.train.precision {
                DType::F32 => train::<f32>(&config, &out, resume.as_deref()),
                DType::F64 => train::<f64>(&config, &out, resume.as_deref()),
            }
        }
        Command::Eval { ckpt, manifest, out, labels, batch_size, skip_bad_images } => {
            let labels = labels.map(LabelVocabulary::new).transpose()?;
            let policy = if skip_bad_images { DecodePolicy::Skip } else { DecodePolicy::Abort };
            let args = EvalArgs { ckpt: &ckpt, manifest: &manifest, out: &out, labels, batch_size, policy };
            match read_header(&ckpt)?.precision {
                DType::F32 => eval::<f32>(args),
                DType::F64 => eval::<f64>(args),
            }
        }
        Command::Predict { ckpt, image } => match read_header(&ckpt)?.precision {
            DType::F32 => predict_image::<f32>(&ckpt, &image),
            DType::F64 => predict_image::<f64>(&ckpt, &image),
        },
        Command::Gradcheck { config, seed, batch_size, freeze, corrupt_backward } => {
            gradcheck(config.as_deref(), seed, batch_size, freeze, corrupt_backward.as_deref())
        }
        Command::DatasetStats { manifest, out, labels } => {
            let vocab = labels.map(LabelVocabulary::new).transpose()?.unwrap_or_default();
            let samples = load_manifest(&manifest, &vocab)?;
            let (csv, svg) = ClassDistribution::from_samples(&samples, &vocab)?.write(&out)?;
            println!("{} samples; wrote {} and {}", samples.len(), csv.display(), svg.display());
            Ok(())
        }
        Command::Synth { out, classes, per_class, seed, size } => {
            let vocab = LabelVocabulary::default();
            let count = classes
                .checked_mul(per_class)
                .ok_or_else(|| CliError::Input("--classes times --per-class overflows".into()))?;
            let spec = SynthSpec { count, num_classes: classes, image_size: size, seed };
            let manifest = generate(&out, &spec, &vocab)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Schema => {
            let schema = schemars::schema_for!(RunConfig);
            println!("{}", serde_json::to_string_pretty(&schema).expect("schema serializes"));
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn checkpoint_of<T: Element>(trainer: &Trainer<T>, config: &RunConfig, data: &DataSection) -> Checkpoint<T> {
    let state = trainer.training_state();
    Checkpoint {
        model: trainer.model.clone(),
        vocabulary: config.model.labels.clone(),
        preprocess: data.preprocess.clone(),
        epoch: state.epoch,
        seed: state.seed,
        loss_history: state.loss_history,
        adam: Some(state.adam),
    }
}

fn train<T: Element>(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let data = config.data()?;
    let vocab = &config.model.labels;
    let model_config = config.model.model_config();
    let samples = match &data.image_root {
        Some(root) => load_manifest_in(&data.manifest, vocab, root)?,
        None => load_manifest(&data.manifest, vocab)?,
    };
    let mut loader = Loader::new(&samples, &data.preprocess, data.decode_policy)?;
    if data.cache {
        loader = loader.with_cache();
    }
    create_dir(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<T>(path, Some(vocab))?;
            if ckpt.model.config != model_config {
                return Err(CliError::Input(format!(
                    "{}: the checkpoint model config differs from the run config",
                    path.display()
                )));
            }
            let state = ckpt
                .training_state()
                .ok_or_else(|| CliError::Input(format!("{}: no optimizer state to resume from", path.display())))?;
            log::info!("resuming after epoch {}", state.epoch);
            Trainer::resume(ckpt.model, config.train.clone(), state)?
        }
        None => {
            let model = DualStageModel::<T>::new(&model_config, vocab.len(), config.train.seed)?;
            let trainer = Trainer::new(model, config.train.clone())?;
            save_checkpoint(&checkpoint_of(&trainer, config, data), &out.join("init.ckpt"))?;
            trainer
        }
    };
    log::info!(
        "training on {} samples, {} parameters ({} scalars), {}",
        samples.len(),
        trainer.model.params.len(),
        trainer.model.params.num_scalars(),
        T::DTYPE
    );
    let log_path = out.join("loss_log.csv");
    trainer.fit(&loader, |t| {
        t.log().write(&log_path)?;
        if t.checkpoint_due() {
            let name = format!("checkpoint_epoch_{:04}.ckpt", t.epoch());
            save_checkpoint(&checkpoint_of(t, config, data), &out.join(name))?;
        }
        Ok(())
    })?;
    trainer.log().write(&log_path)?;
    let final_path = out.join("model.ckpt");
    save_checkpoint(&checkpoint_of(&trainer, config, data), &final_path)?;
    if let Some(loss) = trainer.log().0.last() {
        println!("epoch {} mean loss {loss}", trainer.epoch());
    }
    println!("wrote {}", final_path.display());
    Ok(())
}

struct EvalArgs<'a> {
    ckpt: &'a Path,
    manifest: &'a Path,
    out: &'a Path,
    labels: Option<LabelVocabulary>,
    batch_size: usize,
    policy: DecodePolicy,
}

fn eval<T: Element>(args: EvalArgs<'_>) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<T>(args.ckpt, args.labels.as_ref())?;
    let samples = load_manifest(args.manifest, &ckpt.vocabulary)?;
    let loader = Loader::new(&samples, &ckpt.preprocess, args.policy)?;
    let hash = config_hash(&ckpt.model.config, &ckpt.vocabulary);
    let evaluation = evaluate(&ckpt.model, &loader, args.batch_size, &ckpt.vocabulary, &hash)?;
    evaluation.write(args.out)?;
    let r = &evaluation.report;
    println!(
        "accuracy {} on {} labeled samples ({} without findings); micro precision {} recall {}",
        r.accuracy, r.labeled_samples, r.no_finding_samples, r.micro_precision, r.micro_recall
    );
    Ok(())
}

#[derive(Serialize)]
struct LabelProbability<'a> {
    label: &'a str,
    probability: f64,
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    image: String,
    label: &'a str,
    label_index: usize,
    probabilities: Vec<LabelProbability<'a>>,
}

fn predict_image<T: Element>(ckpt_path: &Path, image: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<T>(ckpt_path, None)?;
    let size = ckpt.preprocess.target_size;
    let pixels = normalize(&decode_and_resize(image, size)?, &ckpt.preprocess.normalization)?;
    let batch = Tensor::<T>::new(vec![1, 3, size, size], pixels.data().iter().map(|&v| T::from_f64(v)).collect())?;
    let p = predict(&ckpt.model.logits(&batch)?.cast::<f64>())?;
    let names = ckpt.vocabulary.names();
    let output = PredictOutput {
        image: image.display().to_string(),
        label: &names[p.labels[0]],
        label_index: p.labels[0],
        probabilities: names
            .iter()
            .zip(p.probabilities.data())
            .map(|(label, &probability)| LabelProbability { label, probability })
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&output).expect("prediction serializes"));
    Ok(())
}

fn parse_corruption(spec: &str) -> Result<(OpKind, f64), CliError> {
    let bad = || CliError::Input(format!("--corrupt-backward {spec:?}: expected <op>:<factor>"));
    let (op, factor) = spec.split_once(':').ok_or_else(bad)?;
    let kind = op.parse::<OpKind>().map_err(CliError::Input)?;
    Ok((kind, factor.parse().map_err(|_| bad())?))
}

fn gradcheck(
    config: Option<&Path>,
    seed: u64,
    batch_size: usize,
    freeze: Vec<String>,
    corrupt: Option<&str>,
) -> Result<(), CliError> {
    let config = config.map(RunConfig::load).transpose()?.unwrap_or_default();
    if batch_size == 0 {
        return Err(CliError::Input("--batch-size must be positive".into()));
    }
    for group in &freeze {
        if !matches!(group.as_str(), "vit" | "swin" | "fusion") {
            return Err(CliError::Input(format!("--freeze {group:?}: expected vit, swin or fusion")));
        }
    }
    let mut check = ModelGradCheck::new(config.model.model_config(), config.model.labels.len(), seed);
    check.batch_size = batch_size;
    check.frozen = freeze;
    check.corrupt = corrupt.map(parse_corruption).transpose()?;
    let started = std::time::Instant::now();
    let report = check.run()?;
    for p in &report.params {
        log::debug!("{}: max relative error {:e}", p.name, p.max_rel_error);
    }
    println!(
        "checked {} scalars in {} parameters in {:.1}s at h = {:e}",
        report.scalars_checked(),
        report.params.len(),
        started.elapsed().as_secs_f64(),
        report.step
    );
    let max = report.max_rel_error();
    if let Some(w) = report.worst_param() {
        println!(
            "max relative error {max:e} at {}[{}] (autodiff {:e}, finite difference {:e})",
            w.name, w.worst.0, w.worst.1, w.worst.2
        );
    }
    if report.passes(GRAD_CHECK_TOLERANCE) {
        println!("PASS (tolerance {GRAD_CHECK_TOLERANCE:e})");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed: {max:e} >= {GRAD_CHECK_TOLERANCE:e}")))
    }
}
