//! Subcommand implementations.

use crate::args::{BenchArgs, DataArgs, DrawArg, EvalArgs, PruneArgs, SweepArgs, TrainArgs};
use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsegate::data::{self, Dataset, Split};
use sparsegate::gates::DrawMode;
use sparsegate::infer;
use sparsegate::model::{self, ForwardMode, Network, NetworkSpec};
use sparsegate::sparsify::{self, SparsityTable};
use sparsegate::tensor::Tensor;
use sparsegate::trainer::{self, GateInit, RunRecord, SampledSparsity, TrainConfig};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.sgck";
const EVAL_BATCH: usize = 500;

pub fn parse_arch(arch: &str) -> Result<NetworkSpec, CliError> {
    if arch == "lenet5" {
        return Ok(NetworkSpec::lenet5());
    }
    let dims = arch
        .strip_prefix("mlp:")
        .ok_or_else(|| CliError::Usage(format!("unknown architecture `{arch}` (expected lenet5 or mlp:<dims>)")))?;
    let dims: Vec<usize> = dims
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad mlp dims `{dims}`: {e}")))?;
    Ok(NetworkSpec::mlp(&dims)?)
}

/// Where the data came from and what it hashed to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataIdentity {
    pub source: String,
    pub directory: Option<PathBuf>,
    pub normalization: String,
    pub train_count: usize,
    pub test_count: usize,
    pub train_sha256: String,
    pub test_sha256: String,
}

fn mnist_dir(spec: &str) -> Result<Option<PathBuf>, CliError> {
    match spec {
        "synth" => Ok(None),
        "mnist" => data::default_data_dir()
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("--data mnist needs {} to be set", data::DATA_DIR_ENV))),
        other => match other.strip_prefix("mnist:") {
            Some(dir) if !dir.is_empty() => Ok(Some(PathBuf::from(dir))),
            _ => Err(CliError::Usage(format!(
                "unknown data source `{other}` (expected mnist:<dir>, mnist or synth)"
            ))),
        },
    }
}

pub fn load_data(args: &DataArgs, spec: &NetworkSpec) -> Result<(Dataset, Dataset, DataIdentity), CliError> {
    let (train, test, directory) = match mnist_dir(&args.data)? {
        Some(dir) => {
            let train = data::load_mnist(&dir, Split::Train, Some(args.train_limit))?;
            let test = data::load_mnist(&dir, Split::Test, args.test_limit)?;
            (train, test, Some(dir))
        }
        None => {
            if args.synth_n == 0 {
                return Err(CliError::Usage("--synth-n must be positive".into()));
            }
            let held_out = (args.synth_n / 5).max(1);
            let all = data::synth_blobs(args.synth_n + held_out, spec.input_len(), spec.classes(), args.data_seed)?;
            let train_idx: Vec<usize> = (0..args.synth_n).collect();
            let test_idx: Vec<usize> = (args.synth_n..args.synth_n + held_out).collect();
            (all.gather(&train_idx), all.gather(&test_idx), None)
        }
    };
    let identity = DataIdentity {
        source: args.data.clone(),
        directory,
        normalization: "pixel/255".into(),
        train_count: train.len(),
        test_count: test.len(),
        train_sha256: train.fingerprint(),
        test_sha256: test.fingerprint(),
    };
    Ok((train, test, identity))
}

fn gating_flags(spec: &NetworkSpec, names: Option<&[String]>) -> Result<Option<Vec<bool>>, CliError> {
    let Some(names) = names else { return Ok(None) };
    let layers: Vec<String> = spec.shapes()?.into_iter().map(|s| s.name).collect();
    if let Some(unknown) = names.iter().find(|n| !layers.contains(n)) {
        return Err(CliError::Usage(format!("unknown layer `{unknown}` in --gated (layers: {})", layers.join(","))));
    }
    Ok(Some(layers.iter().map(|l| names.contains(l)).collect()))
}

fn draw_mode(d: DrawArg) -> DrawMode {
    match d {
        DrawArg::Ml => DrawMode::Ml,
        DrawArg::Sampled => DrawMode::Unbiased,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreinitIdentity {
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub keep_fractions: Vec<f64>,
}

fn parse_preinit(spec: &str) -> Result<(PathBuf, Vec<f64>), CliError> {
    let (path, fracs) = spec
        .rsplit_once(':')
        .ok_or_else(|| CliError::Usage(format!("--preinit expects <checkpoint>:<fractions>, got `{spec}`")))?;
    let fracs: Vec<f64> = fracs
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad keep fractions `{fracs}`: {e}")))?;
    Ok((PathBuf::from(path), fracs))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Everything needed to repeat a run with the same binary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub args: TrainArgs,
    pub config: TrainConfig,
    pub dataset: DataIdentity,
    pub preinit: Option<PreinitIdentity>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub final_sparsity: f64,
    pub sampled: Option<SampledSparsity>,
    pub layers: SparsityTable,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let spec = parse_arch(&args.arch)?;
    let (train_ds, test_ds, dataset) = load_data(&args.data, &spec)?;
    let flags = gating_flags(&spec, args.gated.as_deref())?;
    let mut net = Network::new(spec.clone(), args.seed)?;
    if let Some(flags) = &flags {
        net.set_gating(flags)?;
    }
    let mut preinit = None;
    let gate_init = match &args.preinit {
        Some(text) => {
            let (path, keep_fractions) = parse_preinit(text)?;
            let pretrained = model::load_checkpoint(&path)?;
            trainer::preinit_gates(&mut net, &pretrained, &keep_fractions)?;
            preinit = Some(PreinitIdentity {
                sha256: sha256_file(&path)?,
                checkpoint: path,
                keep_fractions,
            });
            GateInit::Keep
        }
        None => GateInit::Constant(args.gate_init),
    };
    let config = TrainConfig {
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        lambda3: args.lambda3,
        lr: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        draw_mode: draw_mode(args.draw),
        gate_init,
        gating: flags,
        freeze_gates: args.freeze_gates,
        sampled_draws: args.draws,
    };
    config.validate()?;
    let record = trainer::train(&mut net, &train_ds, Some(&test_ds), &config)?;
    write_run(&args.out, args, config, dataset, preinit, &record, &net)?;
    println!(
        "accuracy {:.2}%  sparsity {:.2}%{}",
        record.final_accuracy,
        record.final_sparsity,
        record
            .sampled
            .map(|s| format!("  sampled mean {:.2}% var {:.4}", s.mean, s.variance))
            .unwrap_or_default()
    );
    Ok(())
}

fn write_run(
    out: &Path,
    args: &TrainArgs,
    config: TrainConfig,
    dataset: DataIdentity,
    preinit: Option<PreinitIdentity>,
    record: &RunRecord,
    net: &Network,
) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write(&out.join(METRICS_FILE), record.to_jsonl())?;
    model::save_checkpoint(net, &out.join(CHECKPOINT_FILE))?;
    let summary = RunSummary {
        final_accuracy: record.final_accuracy,
        final_sparsity: record.final_sparsity,
        sampled: record.sampled,
        layers: SparsityTable::from_network(net),
    };
    write(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        args: args.clone(),
        config,
        dataset,
        preinit,
        outputs: [METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE].map(String::from).to_vec(),
    };
    write(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")
}

pub fn cmd_rerun(manifest_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CliError::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let mut args = manifest.args;
    args.out = out.to_path_buf();
    let spec = parse_arch(&args.arch)?;
    let (_, _, dataset) = load_data(&args.data, &spec)?;
    if dataset.train_sha256 != manifest.dataset.train_sha256 || dataset.test_sha256 != manifest.dataset.test_sha256 {
        return Err(CliError::Io("dataset contents differ from the manifest".into()));
    }
    if let Some(p) = &manifest.preinit {
        if sha256_file(&p.checkpoint)? != p.sha256 {
            return Err(CliError::Io(format!("{} changed since the run", p.checkpoint.display())));
        }
    }
    cmd_train(&args)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let points = trainer::grid(&args.lambda1, &args.lambda2, &args.init);
    if points.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let spec = parse_arch(&args.arch)?;
    let (train_ds, test_ds, _) = load_data(&args.data, &spec)?;
    let flags = gating_flags(&spec, args.gated.as_deref())?;
    let base = TrainConfig {
        lambda3: args.lambda3,
        lr: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        draw_mode: draw_mode(args.mode),
        gating: flags,
        sampled_draws: args.draws,
        ..TrainConfig::default()
    };
    base.validate()?;
    let seed = args.seed;
    let make_net = move || Network::new(spec.clone(), seed);
    let rows = trainer::sweep(&points, &base, &make_net, &train_ds, Some(&test_ds))?;
    let csv = trainer::sweep_csv(&rows);
    write(&args.out, &csv)?;
    print!("{csv}");
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} grid cells failed", rows.len())));
    }
    Ok(())
}

pub fn cmd_prune(args: &PruneArgs) -> Result<(), CliError> {
    let net = model::load_checkpoint(&args.checkpoint)?;
    let mut sparse = sparsify::prune(&net);
    sparse.metadata.source_run = args.run_id.clone();
    let manifest_path = args.checkpoint.with_file_name(MANIFEST_FILE);
    if let Ok(text) = fs::read_to_string(&manifest_path) {
        if let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) {
            sparse.metadata.penalties = Some(manifest.config.penalties());
            if sparse.metadata.source_run.is_none() {
                // Named by manifest content so that identical runs export identical files.
                let digest: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
                sparse.metadata.source_run = Some(format!("run-{}", &digest[..16]));
            }
        }
    }
    sparsify::save(&sparse, &args.out)?;
    let table = SparsityTable::from_model(&sparse);
    if let Some(path) = &args.table_csv {
        write(path, table.to_csv())?;
    }
    let cost = sparsify::storage_cost(&sparse);
    let dense = sparse.dense_weight_count();
    let rate = sparsify::compression_rate(&sparse, dense)?;
    if cost.values_count == dense {
        eprintln!("warning: no weights were pruned; compression is 1x");
    }
    print!("{}", table.to_text());
    println!(
        "stored values {}  indices {}  effective {}  file bytes {}",
        cost.values_count, cost.index_count, cost.effective_count, cost.file_bytes
    );
    println!("compression {} ({dense} dense weights)", sparsify::format_rate(rate));
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub checkpoint_accuracy: Option<f64>,
    pub accuracy_delta: Option<f64>,
    pub max_abs_logit_diff: Option<f64>,
    pub argmax_agreement: Option<usize>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let sparse = sparsify::load(&args.model)?;
    let reference = args.checkpoint.as_deref().map(model::load_checkpoint).transpose()?;
    if let Some(net) = &reference {
        if net.spec().shapes()? != sparse.spec.shapes()? {
            return Err(CliError::Usage("checkpoint and model architectures differ".into()));
        }
    }
    let (_, test, _) = load_data(&args.data, &sparse.spec)?;
    let (mut correct, mut ref_correct, mut agree, mut max_diff) = (0usize, 0usize, 0usize, 0.0f64);
    let masks = reference.as_ref().map(|n| n.masks(ForwardMode::Eval));
    for batch in data::sequential_batches(&test, EVAL_BATCH) {
        let logits = infer::infer(&sparse, &batch.x)?;
        let pred = trainer::argmax_rows(&logits);
        correct += pred.iter().zip(&batch.y).filter(|(p, y)| p == y).count();
        if let (Some(net), Some(masks)) = (&reference, &masks) {
            let dense: Tensor<f32> = net.forward_with_masks(&batch.x, masks)?;
            let dense_pred = trainer::argmax_rows(&dense);
            ref_correct += dense_pred.iter().zip(&batch.y).filter(|(p, y)| p == y).count();
            agree += dense_pred.iter().zip(&pred).filter(|(a, b)| a == b).count();
            max_diff = max_diff.max(dense.max_abs_diff(&logits));
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / test.len().max(1) as f64;
    let accuracy = pct(correct);
    let report = EvalReport {
        samples: test.len(),
        accuracy,
        checkpoint_accuracy: reference.as_ref().map(|_| pct(ref_correct)),
        accuracy_delta: reference.as_ref().map(|_| accuracy - pct(ref_correct)),
        max_abs_logit_diff: reference.as_ref().map(|_| max_diff),
        argmax_agreement: reference.as_ref().map(|_| agree),
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let results = infer::bench(args.m, args.n, args.batch, &args.sparsities, args.reps as usize, args.seed)?;
    let csv = infer::bench_csv(&results);
    match &args.out {
        Some(path) => write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
