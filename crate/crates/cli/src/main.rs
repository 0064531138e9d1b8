//! Command-line driver. Every subcommand is a thin shell over the library:
//! stage commands recompute their deterministic prerequisites from the
//! config and read earlier artifacts out of the experiment directory.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use hdcnn_core::engine::network::save_params;
use hdcnn_core::engine::rng::Rng;
use hdcnn_core::error::{Error, Result};
use hdcnn_core::harness::config::{default_config, parse_float_with_inf, ExperimentConfig};
use hdcnn_core::harness::pipeline::{
    auto_pq_entries, block_spec, ensure_pipeline, evaluate_all, hierarchy_split, learn_hierarchy,
    load_block, obtain_data, pretrain_fine_all, run_baselines, run_pipeline, sweep, write_metrics,
    SweepParam, SUBSTREAM_ASSEMBLE,
};
use hdcnn_core::harness::dataset::Preprocessor;
use hdcnn_core::hierarchy::Hierarchy;
use hdcnn_core::model::{assemble, load_bundle, save_bundle};
use hdcnn_core::runtime::{
    compression_factor, parse_pq_layer_name, pq_file_name, pq_target_weight, save_quantized,
};
use hdcnn_core::runtime::pq_compress;
use hdcnn_core::trainer::{
    consistency_targets, finetune, pretrain_building_block, JsonlLogger,
};

#[derive(Parser)]
#[command(
    name = "hdcnn",
    version,
    about = "Coarse-to-fine hierarchical CNN toolkit"
)]
struct Cli {
    /// Experiment configuration file (INI). Omitted: the built-in default
    /// desk-scale experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment artifacts directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for fine-component pretraining.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured train/test datasets into the directory.
    Synth,
    /// Pretrain the building block on the non-held-out training split.
    Pretrain,
    /// Learn the two-level category hierarchy from the pretrained block.
    Hierarchy,
    /// Assemble the hierarchical model and pretrain its fine components.
    PretrainFine,
    /// Finetune the assembled model with the consistency penalty.
    Finetune,
    /// Evaluate the block and hierarchical variants; writes metrics.csv.
    Eval,
    /// Write quantized classifier tables (.hdq) into the finetuned bundle.
    Compress,
    /// Trace error along a hyperparameter grid.
    Sweep {
        /// One of: beta, gamma, k.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values; `inf` is accepted.
        #[arg(long)]
        grid: String,
    },
    /// Compare the block, an averaging ensemble, a doubled-width block, and
    /// the hierarchical ablations.
    Baselines {
        /// Ensemble size for the model-averaging row.
        #[arg(long, default_value_t = 2)]
        members: usize,
    },
    /// Run every stage end to end.
    Pipeline,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Stage commands share the deterministic preamble: the training split and
/// its standardized tensor. Evaluation reloads test data through
/// `ensure_pipeline` instead.
struct Prepared {
    train: hdcnn_core::harness::dataset::Dataset,
    train_x: hdcnn_core::engine::tensor::Tensor,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, _) = obtain_data(cfg)?;
    let prep = Preprocessor::fit(&train);
    let train_x = prep.apply(&train);
    Ok(Prepared { train, train_x })
}

fn load_hierarchy(out: &Path) -> Result<Hierarchy> {
    Hierarchy::load(&out.join("hierarchy.txt"), &out.join("hierarchy_u.csv"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::Synth => {
            let (train, test) = obtain_data(&cfg).map_err(|e| e.in_stage("data"))?;
            train.save(&out.join("train.hdc"))?;
            test.save(&out.join("test.hdc"))?;
            println!(
                "wrote {} train / {} test images over {} classes to {}",
                train.len(),
                test.len(),
                train.label_count,
                out.display()
            );
        }
        Command::Pretrain => {
            let p = prepare(&cfg).map_err(|e| e.in_stage("data"))?;
            let spec = block_spec(&cfg, &p.train).map_err(|e| e.in_stage("model-spec"))?;
            fs::write(out.join("block.netspec"), spec.to_text())?;
            let split =
                hierarchy_split(&cfg, &p.train, &p.train_x).map_err(|e| e.in_stage("split"))?;
            let log = fs::File::create(out.join("train_log.jsonl"))?;
            let mut logger = JsonlLogger(BufWriter::new(log));
            let block = pretrain_building_block(
                &spec,
                &split.rem_images,
                &split.rem_labels,
                &cfg.block_train(),
                &mut logger,
            )
            .map_err(|e| e.in_stage("pretrain-block"))?;
            save_params(&out.join("block.hdw"), &block.params)?;
            println!(
                "pretrained block ({} parameters) -> {}",
                block.param_count(),
                out.join("block.hdw").display()
            );
        }
        Command::Hierarchy => {
            let p = prepare(&cfg).map_err(|e| e.in_stage("data"))?;
            let block = load_block(&out).map_err(|e| e.in_stage("hierarchy"))?;
            let split =
                hierarchy_split(&cfg, &p.train, &p.train_x).map_err(|e| e.in_stage("split"))?;
            let hierarchy = learn_hierarchy(
                &block,
                &split.held_images,
                &split.held_labels,
                cfg.hierarchy.k,
                cfg.hierarchy.gamma,
                cfg.seed,
            )
            .map_err(|e| e.in_stage("hierarchy"))?;
            hierarchy.save(&out.join("hierarchy.txt"), &out.join("hierarchy_u.csv"))?;
            for (k, set) in hierarchy.partial_sets.iter().enumerate() {
                println!("coarse {}: {} fine categories", k + 1, set.len());
            }
        }
        Command::PretrainFine => {
            let p = prepare(&cfg).map_err(|e| e.in_stage("data"))?;
            let block = load_block(&out).map_err(|e| e.in_stage("assemble"))?;
            let hierarchy = load_hierarchy(&out).map_err(|e| e.in_stage("assemble"))?;
            let mut model = assemble(
                &block,
                block.spec.split_index,
                &hierarchy,
                &mut Rng::substream(cfg.seed, SUBSTREAM_ASSEMBLE),
            )
            .map_err(|e| e.in_stage("assemble"))?;
            let log = fs::File::create(out.join("train_log_fine.jsonl"))?;
            let mut logger = JsonlLogger(BufWriter::new(log));
            pretrain_fine_all(
                &mut model,
                &p.train_x,
                &p.train.labels,
                &cfg.fine_train(),
                cli.workers,
                &mut logger,
            )
            .map_err(|e| e.in_stage("pretrain-fine"))?;
            save_bundle(&model, &out.join("bundle"), &[])?;
            println!("pretrained {} fine components -> {}", model.fine.len(), out.join("bundle").display());
        }
        Command::Finetune => {
            let p = prepare(&cfg).map_err(|e| e.in_stage("data"))?;
            let bundle = load_bundle(&out.join("bundle")).map_err(|e| e.in_stage("finetune"))?;
            let mut model = bundle.model;
            let targets = consistency_targets(&model.hierarchy, &p.train.class_sizes())
                .map_err(|e| e.in_stage("finetune"))?;
            let log = fs::File::create(out.join("train_log_ft.jsonl"))?;
            let mut logger = JsonlLogger(BufWriter::new(log));
            finetune(
                &mut model,
                &p.train_x,
                &p.train.labels,
                &targets,
                &cfg.ft_train(),
                &mut logger,
            )
            .map_err(|e| e.in_stage("finetune"))?;
            let entries = match cfg.runtime.pq {
                hdcnn_core::harness::config::PqMode::Auto => {
                    auto_pq_entries(&model, cfg.runtime.pq_s, cfg.runtime.pq_k, cfg.seed)
                }
                hdcnn_core::harness::config::PqMode::None => Vec::new(),
            };
            save_bundle(&model, &out.join("bundle_ft"), &entries)?;
            println!("finetuned model -> {}", out.join("bundle_ft").display());
        }
        Command::Eval => {
            let run = ensure_pipeline(&cfg, &out, cli.workers)?;
            let rows = evaluate_all(
                &cfg,
                &run.block,
                &run.noft,
                &run.nocc,
                &run.ft,
                &run.pq_entries,
                &run.test_images,
                &run.test_labels,
            )
            .map_err(|e| e.in_stage("evaluate"))?;
            write_metrics(&out.join("metrics.csv"), &rows)?;
            // Wall time goes to stdout only; metrics.csv stays byte-stable
            // across reruns.
            for row in &rows {
                println!(
                    "{:<14} {:<6} {:<10} {:<8} top-1 {:6.2}%  executed {:.2}  {:6.2}s",
                    row.variant,
                    row.view,
                    row.exec,
                    row.pq,
                    row.report.top1_err,
                    row.report.mean_executed,
                    row.report.wall_time_sec
                );
            }
        }
        Command::Compress => {
            let dir = out.join("bundle_ft");
            let bundle = load_bundle(&dir).map_err(|e| e.in_stage("compress"))?;
            let entries = if bundle.pq.is_empty() {
                auto_pq_entries(&bundle.model, cfg.runtime.pq_s, cfg.runtime.pq_k, cfg.seed)
            } else {
                bundle.pq
            };
            if entries.is_empty() {
                return Err(Error::rejected(
                    "no classifier weight benefits from quantization under this config",
                )
                .in_stage("compress"));
            }
            for entry in &entries {
                let (component, layer) = parse_pq_layer_name(&entry.layer)?;
                let w = pq_target_weight(&bundle.model, component, layer)?;
                let q = pq_compress(w, entry.s, entry.k, &mut Rng::new(entry.seed))
                    .map_err(|e| e.in_stage("compress"))?;
                let path = dir.join(pq_file_name(component, layer));
                save_quantized(&path, &q)?;
                println!(
                    "{}: {}x{} -> {} bytes (factor {:.2})",
                    entry.layer,
                    q.m,
                    q.n,
                    q.byte_size(),
                    compression_factor(q.m, q.n, entry.s, entry.k)
                );
            }
            save_bundle(&bundle.model, &dir, &entries)?;
        }
        Command::Sweep { param, grid } => {
            let param = SweepParam::parse(&param)?;
            let mut values = Vec::new();
            for item in grid.split(',') {
                let item = item.trim();
                let v = parse_float_with_inf(item)
                    .ok_or_else(|| Error::rejected(format!("bad grid value `{item}`")))?;
                values.push(v);
            }
            let rows = sweep(&cfg, &out, cli.workers, param, &values)?;
            for row in &rows {
                if row.ok {
                    println!(
                        "{}: top-1 {:.2}%  executed {:.2}",
                        row.value,
                        row.top1_err.unwrap(),
                        row.mean_executed.unwrap()
                    );
                } else {
                    println!("{}: failed", row.value);
                }
            }
        }
        Command::Baselines { members } => {
            let rows = run_baselines(&cfg, &out, cli.workers, members)?;
            for row in &rows {
                match row.top5_err {
                    Some(t5) => println!(
                        "{:<14} top-1 {:6.2}%  top-5 {:6.2}%",
                        row.name, row.top1_err, t5
                    ),
                    None => println!("{:<14} top-1 {:6.2}%", row.name, row.top1_err),
                }
            }
        }
        Command::Pipeline => {
            let result = run_pipeline(&cfg, &out, cli.workers)?;
            for row in &result.rows {
                println!(
                    "{:<14} {:<6} {:<10} {:<8} top-1 {:6.2}%  executed {:.2}",
                    row.variant,
                    row.view,
                    row.exec,
                    row.pq,
                    row.report.top1_err,
                    row.report.mean_executed
                );
            }
            println!("artifacts in {}", result.dir.display());
        }
    }
    Ok(())
}
