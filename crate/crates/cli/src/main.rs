//! Command-line interface for the poisonforge toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage/runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use poisonforge::assemble::assemble;
use poisonforge::defense::strip::median;
use poisonforge::error::Error as ForgeError;
use poisonforge::eval::evaluate;
use poisonforge::fixtures::{make_desk_dataset, StubEditor, StubGenerator, StubScorer, StubVqa, TAGS_FILE};
use poisonforge::generate::{edit_batch, generate_batch, load_candidates, save_candidates, GenerationSpec};
use poisonforge::manifest::{DatasetManifest, LabelMode, PoisonConfig, Split};
use poisonforge::nn::NeuralNet;
use poisonforge::pipeline::{resume, run_pipeline, Pipeline, PipelineConfig};
use poisonforge::select::{score_candidates, select_top_k};
use poisonforge::suggest::{collect_suggestions, compute_compatibility};
use poisonforge::trainer::{train, TrainConfig};
use poisonforge::util::atomic_write;

#[derive(Parser)]
#[command(name = "poisonforge")]
#[command(about = "Synthesize physically-triggered backdoor datasets, train on them, audit the result")]
#[command(version)]
struct Cli {
    /// Pipeline config file (run/resume).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for standalone subcommands.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    /// Output path or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Abort on backend failures instead of skipping.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic fixture dataset (train/val/real-like splits).
    Fixtures {
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long = "val-per-class", default_value_t = 100)]
        val_per_class: usize,
        #[arg(long = "real-per-class", default_value_t = 100)]
        real_per_class: usize,
    },
    /// Query the VQA backend and write the compatibility table.
    Suggest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "stub")]
        backend: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long = "sample-cap")]
        sample_cap: Option<usize>,
    },
    /// Edit source images with the trigger, filling a candidate pool.
    Edit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trigger: String,
        /// File with one source image_id per line.
        #[arg(long)]
        sources: PathBuf,
        #[arg(long, default_value = "stub")]
        backend: String,
    },
    /// Generate candidates from a text prompt spec.
    Generate {
        #[arg(long)]
        class: String,
        #[arg(long)]
        trigger: String,
        #[arg(long, default_value_t = 8)]
        pool: usize,
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        background: Option<String>,
        #[arg(long = "pos-prompt")]
        pos_prompt: Option<String>,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "stub")]
        backend: String,
    },
    /// Score a candidate pool and keep the top-k.
    Select {
        /// Pool directory holding candidates.jsonl and the images.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long = "min-score")]
        min_score: Option<f64>,
        #[arg(long)]
        class: String,
        #[arg(long, default_value = "stub")]
        backend: String,
    },
    /// Merge selected candidates into a poisoned training manifest.
    Assemble {
        /// Clean manifest path.
        #[arg(long)]
        clean: PathBuf,
        /// Selected candidates sidecar (JSONL).
        #[arg(long)]
        selected: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        target: usize,
        #[arg(long, value_parser = parse_label_mode, default_value = "dirty")]
        mode: LabelMode,
    },
    /// Train a classifier on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate CA/ASR/Real CA/Real ASR.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        target: usize,
    },
    /// Run one defense against a trained model.
    Defend {
        #[arg(long)]
        method: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        target: usize,
    },
    /// Print the summary of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        plots: bool,
    },
    /// Execute the full pipeline from a config file.
    Run,
    /// Continue a run directory from its first incomplete stage.
    Resume { run_dir: PathBuf },
}

fn parse_label_mode(s: &str) -> Result<LabelMode, String> {
    match s {
        "dirty" => Ok(LabelMode::Dirty),
        "clean" => Ok(LabelMode::Clean),
        other => Err(format!("unknown label mode `{other}` (dirty|clean)")),
    }
}

fn require_out(out: &Option<PathBuf>) -> anyhow::Result<&PathBuf> {
    out.as_ref()
        .ok_or_else(|| anyhow::Error::new(ForgeError::config("--out", "required for this command")))
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
}

fn known_backend(kind: &str, name: &str) -> anyhow::Result<()> {
    if name != "stub" {
        bail!(ForgeError::config(
            format!("backend.{kind}"),
            format!("unknown backend `{name}`; registered: stub"),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .downcast_ref::<ForgeError>()
                .map(|e| e.is_config())
                .unwrap_or(false);
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fixtures {
            classes,
            per_class,
            size,
            val_per_class,
            real_per_class,
        } => {
            let out = require_out(&cli.out)?;
            let manifest = make_desk_dataset(
                out,
                classes,
                per_class,
                val_per_class,
                real_per_class,
                size,
                cli.seed,
            )?;
            println!(
                "wrote {} entries ({} classes) under {}",
                manifest.entries.len(),
                manifest.class_names.len(),
                out.display()
            );
        }
        Command::Suggest {
            manifest,
            backend,
            k,
            sample_cap,
        } => {
            known_backend("vqa", &backend)?;
            let out = require_out(&cli.out)?;
            let root = manifest_root(&manifest);
            let data = DatasetManifest::load(&manifest)?;
            let tags_file = root.join(TAGS_FILE);
            let vqa = if tags_file.exists() {
                StubVqa::from_tags_file(&tags_file)?
            } else {
                StubVqa::default()
            };
            let train_only = data.filtered(|e| e.split == Split::Train);
            let run =
                collect_suggestions(&vqa, &train_only, &root, k, sample_cap, cli.seed, cli.strict)?;
            let table = compute_compatibility(&run.records, &train_only)?;
            let json = serde_json::json!({
                "queried_per_class": table.queried_per_class,
                "rows": table.flat_rows(),
                "warnings": run.warnings,
            });
            atomic_write(out, &serde_json::to_vec_pretty(&json)?)?;
            println!(
                "queried {} images, {} warnings -> {}",
                run.records.len(),
                run.warnings,
                out.display()
            );
        }
        Command::Edit {
            manifest,
            trigger,
            sources,
            backend,
        } => {
            known_backend("editor", &backend)?;
            let out = require_out(&cli.out)?;
            let root = manifest_root(&manifest);
            let data = DatasetManifest::load(&manifest)?;
            let ids = std::fs::read_to_string(&sources)
                .with_context(|| format!("reading {}", sources.display()))?;
            let entries: Vec<_> = ids
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|id| {
                    data.entry(id.trim())
                        .cloned()
                        .ok_or_else(|| ForgeError::UnknownImageId(id.trim().to_string()))
                })
                .collect::<Result<_, _>>()?;
            let outcome = edit_batch(
                &StubEditor::default(),
                &entries,
                &root,
                out,
                &trigger,
                cli.seed,
                cli.strict,
            )?;
            save_candidates(&outcome.candidates, &out.join("candidates.jsonl"))?;
            println!(
                "{} candidates, {} skipped -> {}",
                outcome.candidates.len(),
                outcome.skipped,
                out.display()
            );
        }
        Command::Generate {
            class,
            trigger,
            pool,
            action,
            background,
            pos_prompt,
            guidance,
            size,
            backend,
        } => {
            known_backend("generator", &backend)?;
            let out = require_out(&cli.out)?;
            let mut spec = GenerationSpec::new(class.clone(), trigger, pool);
            spec.action = action;
            spec.background = background;
            spec.pos_prompt = pos_prompt;
            spec.guidance_scale = guidance;
            let generator = StubGenerator::new(size, poisonforge::fixtures::default_class_names(5));
            let outcome = generate_batch(&generator, &spec, &class, out, cli.seed, cli.strict)?;
            save_candidates(&outcome.candidates, &out.join("candidates.jsonl"))?;
            println!(
                "{} candidates, {} skipped -> {}",
                outcome.candidates.len(),
                outcome.skipped,
                out.display()
            );
        }
        Command::Select {
            pool,
            k,
            min_score,
            class,
            backend,
        } => {
            known_backend("scorer", &backend)?;
            let out = require_out(&cli.out)?;
            let candidates = load_candidates(&pool.join("candidates.jsonl"))?;
            let scorer = StubScorer::new(poisonforge::fixtures::default_class_names(5));
            let scored = score_candidates(&scorer, &candidates, &pool, &class)?;
            let selected = select_top_k(&scored, k, min_score)?;
            save_candidates(&selected, out)?;
            println!("selected {} of {} candidates", selected.len(), scored.len());
        }
        Command::Assemble {
            clean,
            selected,
            rate,
            target,
            mode,
        } => {
            let out = require_out(&cli.out)?;
            let manifest = DatasetManifest::load(&clean)?;
            let candidates = load_candidates(&selected)?;
            let trigger = candidates
                .first()
                .map(|c| c.trigger.clone())
                .context("selected candidate list is empty")?;
            let cfg = PoisonConfig {
                target_class: target,
                poisoning_rate: rate,
                label_mode: mode,
                trigger,
            };
            let poisoned = assemble(&manifest, &candidates, &cfg)?;
            poisoned.save(out)?;
            let n = poisoned.entries.iter().filter(|e| e.poisoned).count();
            println!(
                "assembled {} entries ({n} poisoned) -> {}",
                poisoned.entries.len(),
                out.display()
            );
        }
        Command::Train {
            manifest,
            profile,
            history,
            epochs,
        } => {
            let out = require_out(&cli.out)?;
            let data = DatasetManifest::load(&manifest)?;
            let root = manifest_root(&manifest);
            let mut cfg = match profile.as_str() {
                "desk" => TrainConfig::desk(),
                "paper" => TrainConfig::default(),
                other => bail!(ForgeError::config(
                    "profile",
                    format!("unknown profile `{other}` (desk|paper)"),
                )),
            };
            cfg.seed = cli.seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let outcome = train(&data, &root, &cfg)?;
            outcome.model.save(out)?;
            if let Some(history_path) = history {
                atomic_write(&history_path, &serde_json::to_vec_pretty(&outcome.history)?)?;
            }
            let last = outcome.history.last();
            println!(
                "trained {} epochs, final loss {:.4}, val acc {}",
                outcome.history.len(),
                last.map(|h| h.train_loss).unwrap_or(f64::NAN),
                last.and_then(|h| h.val_accuracy)
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
            );
        }
        Command::Eval {
            model,
            manifest,
            target,
        } => {
            let out = require_out(&cli.out)?;
            let net = NeuralNet::load(&model)?;
            let data = DatasetManifest::load(&manifest)?;
            let root = manifest_root(&manifest);
            let report = evaluate(&net, &data, &root, target, net.input_h)?.rounded();
            atomic_write(out, &serde_json::to_vec_pretty(&report)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Defend {
            method,
            model,
            manifest,
            target,
        } => {
            let out = require_out(&cli.out)?;
            run_single_defense(&method, &model, &manifest, target, cli.seed, out)?;
        }
        Command::Report { run, plots } => {
            let config = PipelineConfig::load(&run.join("config.json"))?;
            let pipeline = Pipeline::new(&config, &run);
            let summary = pipeline.load_summary()?;
            println!("trigger: {}", summary.trigger);
            println!("metrics: {}", serde_json::to_string(&summary.metrics)?);
            for (method, metrics) in &summary.defense_metrics {
                println!("{method}: {}", serde_json::to_string(metrics)?);
            }
            if plots {
                pipeline.rerender_plots()?;
                println!("plots written under {}", run.join("plots").display());
            }
        }
        Command::Run => {
            let config = cli
                .config
                .as_ref()
                .ok_or_else(|| ForgeError::config("--config", "required for `run`"))?;
            let out = require_out(&cli.out)?;
            let summary = run_pipeline(config, out)?;
            println!("run complete: trigger `{}`", summary.trigger);
            println!("metrics: {}", serde_json::to_string(&summary.metrics)?);
        }
        Command::Resume { run_dir } => {
            let summary = resume(&run_dir)?;
            println!("resume complete: trigger `{}`", summary.trigger);
            println!("metrics: {}", serde_json::to_string(&summary.metrics)?);
        }
    }
    Ok(())
}

fn run_single_defense(
    method: &str,
    model_path: &Path,
    manifest_path: &Path,
    target: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    use poisonforge::defense::cleanse::{neural_cleanse, CleanseConfig};
    use poisonforge::defense::gradcam::grad_cam;
    use poisonforge::defense::nad::{nad, NadConfig};
    use poisonforge::defense::prune::{fine_prune, PruneEvalSets};
    use poisonforge::defense::strip::strip_detect;
    use poisonforge::eval::ImageStore;

    let model = NeuralNet::load(model_path)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    let store = ImageStore::new(&root, model.input_h);
    let val = manifest.split_entries(Split::Val);
    let clean_entries: Vec<_> = val.iter().filter(|e| !e.poisoned).cloned().collect();
    let poison_entries: Vec<_> = val.iter().filter(|e| e.poisoned).cloned().collect();
    let clean: Vec<_> = clean_entries
        .iter()
        .take(96)
        .map(|e| store.load(e))
        .collect::<Result<_, _>>()?;
    let triggered: Vec<_> = poison_entries
        .iter()
        .take(64)
        .map(|e| store.load(e))
        .collect::<Result<_, _>>()?;

    let report = match method {
        "strip" => {
            if clean.len() < 32 {
                bail!("need at least 32 clean val images for strip");
            }
            let (overlays, rest) = clean.split_at(16);
            let result = strip_detect(&model, rest, &triggered, overlays, 0.05, 16, 0.5)?;
            serde_json::json!({
                "method": "strip",
                "threshold": result.threshold,
                "clean_median_entropy": median(&result.calibration_entropies),
                "triggered_median_entropy": median(&result.entropies),
                "triggered_flag_rate": result.flagged_fraction(),
            })
        }
        "nc" => {
            let cfg = CleanseConfig {
                seed,
                ..CleanseConfig::default()
            };
            let samples: Vec<_> = clean.iter().take(16).cloned().collect();
            let result = neural_cleanse(&model, &samples, manifest.class_names.len(), &cfg)?;
            serde_json::json!({
                "method": "nc",
                "norms": result.norms,
                "anomaly_indices": result.anomaly_indices,
                "flagged": result.flagged,
            })
        }
        "fineprune" => {
            let layer = model.last_conv_layer().context("model has no conv layer")?;
            let clean_refs: Vec<_> = clean_entries.iter().take(150).cloned().collect();
            let poison_refs: Vec<_> = poison_entries.iter().take(150).cloned().collect();
            let sets = PruneEvalSets {
                clean: clean_refs,
                poisoned: poison_refs,
                target_class: target,
                store: &store,
            };
            let curve = fine_prune(&model, &clean, &layer, &[0.0, 0.25, 0.5, 0.75], &sets)?;
            serde_json::json!({
                "method": "fineprune",
                "layer": curve.layer,
                "points": curve.points,
            })
        }
        "nad" => {
            let train_clean: Vec<_> = manifest
                .split_entries(Split::Train)
                .into_iter()
                .filter(|e| !e.poisoned)
                .collect();
            let take = (train_clean.len() / 20).max(1);
            let stride = (train_clean.len() / take).max(1);
            let subset: Vec<_> = train_clean
                .iter()
                .step_by(stride)
                .take(take)
                .map(|e| store.load(e).map(|t| (t, e.label)))
                .collect::<Result<_, _>>()?;
            let outcome = nad(
                &model,
                &subset,
                &NadConfig {
                    seed,
                    ..NadConfig::default()
                },
            )?;
            let student_path = out.with_extension("student.json");
            outcome.student.save(&student_path)?;
            serde_json::json!({
                "method": "nad",
                "student_saved": student_path.display().to_string(),
                "epoch_losses": outcome.student_losses,
            })
        }
        "gradcam" => {
            let layer = model.last_conv_layer().context("model has no conv layer")?;
            let sample = triggered
                .first()
                .or_else(|| clean.first())
                .context("no val images")?;
            let heat = grad_cam(&model, sample, target, &layer)?;
            serde_json::json!({
                "method": "gradcam",
                "layer": layer,
                "heatmap": heat.data,
                "height": heat.h,
                "width": heat.w,
            })
        }
        other => bail!(ForgeError::config(
            "method",
            format!("unknown method `{other}` (strip|nc|fineprune|nad|gradcam)"),
        )),
    };
    atomic_write(out, &serde_json::to_vec_pretty(&report)?)?;
    println!("{method} report -> {}", out.display());
    Ok(())
}
