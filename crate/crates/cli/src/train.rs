//! The train command: runs the continual protocol and lays down the run
//! directory — per-epoch metrics CSV, summary JSON, per-task checkpoints,
//! and the effective config.

use std::fmt::Write as _;

use eqcl_core::eqnet::save_checkpoint;
use eqcl_core::fsutil::write_atomic;
use eqcl_core::protocol::{run_continual_with, EpochRecord, ProtocolError, RunOutcome};
use serde::Serialize;

use crate::{CliError, TrainArgs};

pub const METRICS_HEADER: &str =
    "task,epoch,loss_total,loss1,loss2,loss3,loss4,loss_exemplar,acc_seen";

/// Field order is the file's key order.
#[derive(Serialize)]
struct Summary<'a> {
    avg_acc: f64,
    per_task_acc: &'a [Vec<f64>],
    forgetting: &'a [f64],
    retention: &'a [Option<f64>],
    config_hash: &'a str,
    seed: u64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let (config, canonical) = crate::config::effective_config(args.config.as_deref(), &args.set)?;
    let hash = crate::config::config_hash(&canonical);

    let out = &args.out;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", ckpt_dir.display())))?;
    write_atomic(&out.join("effective-config.toml"), canonical.as_bytes())
        .map_err(|e| CliError::Io(format!("effective-config.toml: {e}")))?;

    let quiet = args.quiet;
    let outcome: RunOutcome<f64> = run_continual_with(&config, |task, model| {
        let path = ckpt_dir.join(format!("task_{task}.json"));
        save_checkpoint(&path, model).map_err(ProtocolError::Net)?;
        if !quiet {
            println!("task {task} done ({} classes)", model.classes);
        }
        Ok(())
    })
    .map_err(CliError::from)?;

    let m = &outcome.metrics;
    write_atomic(&out.join("metrics.csv"), render_csv(&m.epochs).as_bytes())
        .map_err(|e| CliError::Io(format!("metrics.csv: {e}")))?;

    let summary = Summary {
        avg_acc: m.avg_acc().map_err(CliError::from)?,
        per_task_acc: &m.task_acc,
        forgetting: &m.forgetting,
        retention: &m.retention,
        config_hash: &hash,
        seed: config.seed,
    };
    let mut body = serde_json::to_vec_pretty(&summary)
        .map_err(|e| CliError::Io(format!("summary.json: {e}")))?;
    body.push(b'\n');
    write_atomic(&out.join("summary.json"), &body)
        .map_err(|e| CliError::Io(format!("summary.json: {e}")))?;

    if !quiet {
        println!(
            "avg_acc {:.4}  final seen-class acc {:.4}  exemplars stored {}",
            summary.avg_acc,
            m.seen_acc.last().copied().unwrap_or(f64::NAN),
            outcome.exemplars_stored,
        );
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn render_csv(epochs: &[EpochRecord]) -> String {
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in epochs {
        let _ = write!(
            csv,
            "{},{},{},{},{},{},{},{},",
            r.task, r.epoch, r.loss_total, r.loss1, r.loss2, r.loss3, r.loss4, r.loss_exemplar
        );
        if let Some(acc) = r.acc_seen {
            let _ = write!(csv, "{acc}");
        }
        csv.push('\n');
    }
    csv
}

/// Recomputes and prints headline metrics from a run directory.
pub fn cmd_metrics(args: &crate::MetricsArgs) -> Result<(), CliError> {
    #[derive(serde::Deserialize)]
    struct Stored {
        avg_acc: f64,
        per_task_acc: Vec<Vec<f64>>,
        forgetting: Vec<f64>,
        retention: Vec<Option<f64>>,
        config_hash: String,
        seed: u64,
    }
    let path = args.run.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let stored: Stored = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (k, row) in stored.per_task_acc.iter().enumerate() {
        if row.len() != k + 1 {
            return Err(CliError::Config(format!(
                "{}: per_task_acc row {k} has {} entries, expected {}",
                path.display(),
                row.len(),
                k + 1
            )));
        }
    }

    let forgetting =
        eqcl_core::protocol::forgetting_rate(&stored.per_task_acc, args.forgetting.into());
    let retention = eqcl_core::protocol::feature_retention(&stored.per_task_acc);

    println!("run {}  seed {}  config {}", args.run.display(), stored.seed, stored.config_hash);
    println!("avg_acc {:.4}", stored.avg_acc);
    println!("task  final_acc  forgetting  retention");
    let last = stored.per_task_acc.last().cloned().unwrap_or_default();
    for (i, acc) in last.iter().enumerate() {
        let f = forgetting.get(i).copied().unwrap_or(f64::NAN);
        match retention.get(i).copied().flatten() {
            Some(r) => println!("{i:<5} {acc:<10.4} {f:<11.4} {r:.4}"),
            None => println!("{i:<5} {acc:<10.4} {f:<11.4} -"),
        }
    }
    if forgetting != stored.forgetting && args.forgetting == crate::ForgettingFlag::FirstTask {
        println!("note: stored forgetting used a different variant");
    }
    if retention != stored.retention {
        println!("note: stored retention differs from recomputation");
    }
    Ok(())
}

pub fn exit_code(err: &ProtocolError) -> i32 {
    use eqcl_core::dataio::DataError;
    use eqcl_core::eqnet::EqnetError;
    use eqcl_core::rehearsal::RehearsalError;
    match err {
        ProtocolError::NonFiniteLoss { .. } => 3,
        ProtocolError::Data(DataError::Io { .. }) => 4,
        ProtocolError::Net(EqnetError::CheckpointIo { .. }) => 4,
        ProtocolError::Rehearsal(RehearsalError::Io { .. }) => 4,
        _ => 2,
    }
}

impl From<ProtocolError> for CliError {
    fn from(err: ProtocolError) -> Self {
        match exit_code(&err) {
            3 => CliError::Numeric(err.to_string()),
            4 => CliError::Io(err.to_string()),
            _ => CliError::Config(err.to_string()),
        }
    }
}
