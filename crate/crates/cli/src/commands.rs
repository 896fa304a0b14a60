use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use icestack::covsync::{sync_covariates, GriddedField};
use icestack::datasyn::{generate_dataset, SynthConfig};
use icestack::downstream::{pretrain_then_finetune, DownstreamConfig};
use icestack::gradcheck::{run_gradcheck, GradcheckConfig};
use icestack::graph::COVARIATE_NAMES;
use icestack::io::{read_jsonl, write_atomic, write_jsonl};
use icestack::model::Checkpoint;
use icestack::optim::metrics_csv;
use icestack::pipeline::{complete_samples, evaluate, train_completion, CompletionConfig};
use icestack::Execution;

use crate::config::{load, snapshot, Loaded};
use crate::manifest::RunManifest;
use crate::traces::Traces;
use crate::{Cli, Command, Common, UsageError};

/// Commands without tunable settings.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NoConfig {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub sample_id: Option<String>,
    pub width: f64,
    pub height: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            sample_id: None,
            width: 960.0,
            height: 540.0,
        }
    }
}

struct Session {
    manifest: RunManifest,
    out_dir: PathBuf,
    start: Instant,
}

impl Session {
    fn start<T: Serialize>(
        command: &str,
        common: &Common,
        config: &T,
        seed: Option<u64>,
        exec: Execution,
    ) -> Result<Self> {
        std::fs::create_dir_all(&common.out_dir).map_err(|e| icestack::Error::Io {
            path: common.out_dir.clone(),
            source: e,
        })?;
        Ok(Session {
            manifest: RunManifest::new(command, snapshot(config), seed, exec),
            out_dir: common.out_dir.clone(),
            start: Instant::now(),
        })
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.manifest
            .inputs
            .insert(name.to_string(), path.to_path_buf());
    }

    fn output(&mut self, name: &str, file: &str) -> PathBuf {
        let p = self.out_dir.join(file);
        self.manifest.outputs.insert(name.to_string(), p.clone());
        p
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.duration_secs = self.start.elapsed().as_secs_f64();
        self.manifest.write(&self.out_dir)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| icestack::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .map_err(Into::into)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Generate { common } => generate(&common, exec),
        Command::Sync {
            common,
            fields,
            nodes,
        } => sync(&common, &fields, &nodes, exec),
        Command::Train { common, dataset } => train(&common, &dataset, exec),
        Command::Complete {
            common,
            checkpoint,
            dataset,
        } => complete(&common, &checkpoint, &dataset, exec),
        Command::Eval {
            common,
            completed,
            original,
            truth,
        } => eval(&common, &completed, &original, &truth, exec),
        Command::Workflow {
            common,
            incomplete,
            complete,
            completion_checkpoint,
        } => workflow(
            &common,
            &incomplete,
            &complete,
            &completion_checkpoint,
            exec,
        ),
        Command::Gradcheck { common } => gradcheck(&common, exec),
        Command::ExportTraces {
            common,
            completed,
            original,
            sample_id,
        } => export_traces(&common, &completed, &original, sample_id, exec),
    }
}

fn generate(common: &Common, exec: Execution) -> Result<()> {
    let loaded: Loaded<SynthConfig> = load("generate", common.config.as_deref(), &common.sets)?;
    let cfg = loaded.config;
    cfg.validate()?;
    let mut s = Session::start("generate", common, &cfg, Some(cfg.seed), exec)?;
    let data = s.output("dataset", "dataset.jsonl");
    let truth = s.output("truth", "truth.jsonl");
    let samples = generate_dataset(&cfg, &data, &truth, exec)?;
    let observed: usize = samples.iter().map(|x| x.observed.observed_count()).sum();
    let total: usize = samples.iter().map(|x| x.observed.thickness.len()).sum();
    println!(
        "generated {} samples ({} of {} entries observed) in {}",
        samples.len(),
        observed,
        total,
        common.out_dir.display()
    );
    s.finish()
}

fn read_nodes(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(lat), Some(lon)) = (col("lat"), col("lon")) else {
        bail!(UsageError(format!(
            "{}:1: node file needs lat and lon columns",
            path.display()
        )));
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| UsageError(format!("{}:{line}: {e}", path.display())).into())
        };
        out.push((num(lat)?, num(lon)?));
    }
    Ok(out)
}

fn sync(
    common: &Common,
    fields: &[PathBuf],
    nodes: &Option<PathBuf>,
    exec: Execution,
) -> Result<()> {
    let loaded: Loaded<NoConfig> = load("sync", common.config.as_deref(), &common.sets)?;
    let mut fields = fields.to_vec();
    if fields.is_empty() {
        if let Some(m) = &loaded.replay {
            fields = (0..COVARIATE_NAMES.len())
                .filter_map(|i| m.inputs.get(&format!("field{i}")).cloned())
                .collect();
        }
    }
    if fields.len() != COVARIATE_NAMES.len() {
        bail!(UsageError(format!(
            "sync needs exactly {} --field files ({}), got {}",
            COVARIATE_NAMES.len(),
            COVARIATE_NAMES.join(", "),
            fields.len()
        )));
    }
    let nodes_path = loaded.input(nodes, "nodes")?;
    let mut s = Session::start("sync", common, &loaded.config, None, exec)?;
    let mut grids = Vec::new();
    for (i, f) in fields.iter().enumerate() {
        s.input(&format!("field{i}"), f);
        grids.push(GriddedField::from_csv_str(
            COVARIATE_NAMES[i],
            &read_text(f)?,
            f,
        )?);
    }
    s.input("nodes", &nodes_path);
    let nodes = read_nodes(&nodes_path)?;
    let synced = sync_covariates(&grids, &nodes, exec)?;

    let out = s.output("covariates", "covariates.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["node".to_string(), "lat".into(), "lon".into()];
    header.extend(COVARIATE_NAMES.iter().map(|s| s.to_string()));
    header.push("extrapolated".into());
    w.write_record(&header)?;
    let k = COVARIATE_NAMES.len();
    for (i, &(lat, lon)) in nodes.iter().enumerate() {
        let mut row = vec![i.to_string(), lat.to_string(), lon.to_string()];
        row.extend(
            synced.values[i * k..(i + 1) * k]
                .iter()
                .map(|v| v.to_string()),
        );
        let ex = synced.extrapolated[i * k..(i + 1) * k].iter().any(|&e| e);
        row.push((ex as u8).to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_atomic(&out, &bytes)?;
    if synced.any_extrapolated() {
        log::warn!("some nodes lie outside a field's hull; nearest grid values were used");
    }
    println!("synced {} nodes into {}", nodes.len(), out.display());
    s.finish()
}

fn train(common: &Common, dataset: &Option<PathBuf>, exec: Execution) -> Result<()> {
    let loaded: Loaded<CompletionConfig> = load("train", common.config.as_deref(), &common.sets)?;
    let data_path = loaded.input(dataset, "dataset")?;
    let cfg = loaded.config.resolved();
    cfg.validate()?;
    let mut s = Session::start("train", common, &cfg, Some(cfg.train.seed), exec)?;
    s.input("dataset", &data_path);
    let samples = read_jsonl(&data_path)?;
    if samples.is_empty() {
        bail!(UsageError(format!(
            "{} holds no samples",
            data_path.display()
        )));
    }
    let ck_dir = common.out_dir.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        std::fs::create_dir_all(&ck_dir).map_err(|e| icestack::Error::Io {
            path: ck_dir.clone(),
            source: e,
        })?;
        s.manifest
            .outputs
            .insert("checkpoints".into(), ck_dir.clone());
    }
    let out = train_completion(&samples, &cfg, exec, &mut |ck| {
        ck.save(&ck_dir.join(format!("epoch_{:04}.json", ck.epoch)))
    })?;
    out.checkpoint
        .save(&s.output("checkpoint", "checkpoint.json"))?;
    write_text(&s.output("metrics", "metrics.csv"), &metrics_csv(&out.log))?;
    let ids =
        |v: &[usize]| -> Vec<String> { v.iter().map(|&i| samples[i].sample_id.clone()).collect() };
    write_json(
        &s.output("split", "split.json"),
        &serde_json::json!({ "train": ids(&out.train_ids), "validation": ids(&out.val_ids) }),
    )?;
    if let Some(last) = out.log.last() {
        println!(
            "trained {} epochs: loss {:.5}, train masked MAE {:.4}{}",
            last.epoch,
            last.train_loss,
            last.train_masked_mae,
            last.val_masked_mae
                .map(|v| format!(", validation masked MAE {v:.4}"))
                .unwrap_or_default()
        );
    }
    s.finish()
}

fn complete(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    dataset: &Option<PathBuf>,
    exec: Execution,
) -> Result<()> {
    let loaded: Loaded<NoConfig> = load("complete", common.config.as_deref(), &common.sets)?;
    let ck_path = loaded.input(checkpoint, "checkpoint")?;
    let data_path = loaded.input(dataset, "dataset")?;
    let mut s = Session::start("complete", common, &loaded.config, None, exec)?;
    s.input("checkpoint", &ck_path);
    s.input("dataset", &data_path);
    let ck = Checkpoint::load(&ck_path)?;
    s.manifest.seed = Some(ck.seed);
    let samples = read_jsonl(&data_path)?;
    let completed = complete_samples(&ck, &samples, exec)?;
    let filled: usize = samples
        .iter()
        .map(|x| x.thickness.len() - x.observed_count())
        .sum();
    write_jsonl(&s.output("completed", "completed.jsonl"), &completed)?;
    println!(
        "completed {} samples, filled {} entries",
        completed.len(),
        filled
    );
    s.finish()
}

fn eval(
    common: &Common,
    completed: &Option<PathBuf>,
    original: &Option<PathBuf>,
    truth: &Option<PathBuf>,
    exec: Execution,
) -> Result<()> {
    let loaded: Loaded<NoConfig> = load("eval", common.config.as_deref(), &common.sets)?;
    let paths = [
        ("completed", loaded.input(completed, "completed")?),
        ("original", loaded.input(original, "original")?),
        ("truth", loaded.input(truth, "truth")?),
    ];
    let mut s = Session::start("eval", common, &loaded.config, None, exec)?;
    let mut sets = Vec::new();
    for (name, p) in &paths {
        s.input(name, p);
        sets.push(read_jsonl(p)?);
    }
    let report = evaluate(&sets[0], &sets[1], &sets[2])?;
    write_json(&s.output("metrics", "metrics.json"), &report)?;
    println!(
        "observed-entry MAE {} | unobserved MAE {:.4}, RMSE {:.4} over {} entries",
        report.observed_mae,
        report.unobserved_mae,
        report.unobserved_rmse,
        report.unobserved_entries
    );
    s.finish()
}

fn workflow(
    common: &Common,
    incomplete: &Option<PathBuf>,
    complete: &Option<PathBuf>,
    completion_checkpoint: &Option<PathBuf>,
    exec: Execution,
) -> Result<()> {
    let loaded: Loaded<DownstreamConfig> =
        load("workflow", common.config.as_deref(), &common.sets)?;
    let inc_path = loaded.input(incomplete, "incomplete")?;
    let com_path = loaded.input(complete, "complete")?;
    let ck_path = loaded.input(completion_checkpoint, "completion_checkpoint")?;
    let cfg = loaded.config;
    cfg.validate()?;
    let mut s = Session::start("workflow", common, &cfg, Some(cfg.pretrain.seed), exec)?;
    s.input("incomplete", &inc_path);
    s.input("complete", &com_path);
    s.input("completion_checkpoint", &ck_path);
    let ck = Checkpoint::load(&ck_path).with_context(|| "loading the completion checkpoint")?;
    let inc = read_jsonl(&inc_path)?;
    let com = read_jsonl(&com_path)?;
    let out = pretrain_then_finetune(&inc, &com, &ck, &cfg, exec)?;
    out.pretrained
        .save(&s.output("pretrained", "pretrained.json"))?;
    out.finetuned
        .save(&s.output("finetuned", "finetuned.json"))?;
    out.scratch.save(&s.output("scratch", "scratch.json"))?;
    write_text(
        &s.output("pretrain_metrics", "pretrain_metrics.csv"),
        &metrics_csv(&out.pretrain_log),
    )?;
    write_text(
        &s.output("finetune_metrics", "finetune_metrics.csv"),
        &metrics_csv(&out.finetune_log),
    )?;
    write_text(
        &s.output("scratch_metrics", "scratch_metrics.csv"),
        &metrics_csv(&out.scratch_log),
    )?;
    write_json(&s.output("report", "report.json"), &out.report)?;
    let r = &out.report;
    println!(
        "deep-layer RMSE: pretrain+finetune {:.4}, scratch {:.4} ({:+.2}%)",
        r.pretrain_finetune_rmse, r.scratch_rmse, r.improvement_pct
    );
    s.finish()
}

fn gradcheck(common: &Common, exec: Execution) -> Result<()> {
    let loaded: Loaded<GradcheckConfig> =
        load("gradcheck", common.config.as_deref(), &common.sets)?;
    let cfg = loaded.config;
    let mut s = Session::start("gradcheck", common, &cfg, Some(cfg.seed), exec)?;
    let report = run_gradcheck(&cfg)?;
    let table = report.table();
    print!("{table}");
    write_text(&s.output("table", "gradcheck.txt"), &table)?;
    write_json(&s.output("report", "gradcheck.json"), &report)?;
    let passed = report.passed();
    println!(
        "{} of {} tensors within relative error {:e} ({} entries)",
        report.checks.iter().filter(|c| c.passed).count(),
        report.checks.len(),
        cfg.tolerance,
        report.entries()
    );
    s.finish()?;
    if !passed {
        bail!(UsageError("gradient check failed".into()));
    }
    Ok(())
}

fn export_traces(
    common: &Common,
    completed: &Option<PathBuf>,
    original: &Option<PathBuf>,
    sample_id: Option<String>,
    exec: Execution,
) -> Result<()> {
    let loaded: Loaded<ExportConfig> =
        load("export-traces", common.config.as_deref(), &common.sets)?;
    let comp_path = loaded.input(completed, "completed")?;
    let orig_path = original.clone().or_else(|| {
        loaded
            .replay
            .as_ref()
            .and_then(|m| m.inputs.get("original").cloned())
    });
    let mut cfg = loaded.config;
    if sample_id.is_some() {
        cfg.sample_id = sample_id;
    }
    let Some(id) = cfg.sample_id.clone() else {
        bail!(UsageError("missing --sample-id".into()));
    };
    let mut s = Session::start("export-traces", common, &cfg, None, exec)?;
    s.input("completed", &comp_path);
    let samples = read_jsonl(&comp_path)?;
    let Some(sample) = samples.iter().find(|x| x.sample_id == id) else {
        bail!(UsageError(format!(
            "no sample `{id}` in {}",
            comp_path.display()
        )));
    };
    let orig = match &orig_path {
        Some(p) => {
            s.input("original", p);
            let all = read_jsonl(p)?;
            let found = all.into_iter().find(|x| x.sample_id == id);
            if found.is_none() {
                bail!(UsageError(format!("no sample `{id}` in {}", p.display())));
            }
            found
        }
        None => None,
    };
    let traces = Traces::new(sample, orig.as_ref())?;
    write_text(&s.output("csv", "traces.csv"), &traces.csv())?;
    write_text(
        &s.output("svg", "traces.svg"),
        &traces.svg(cfg.width, cfg.height),
    )?;
    println!(
        "{} boundary curves of {} nodes for {id}",
        traces.n_layers, traces.n_nodes
    );
    s.finish()
}
