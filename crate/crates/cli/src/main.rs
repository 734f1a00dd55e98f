mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fsspip", version, about = "Multi-channel political leaning classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Embedding source for dense (text) channels.
#[derive(Debug, Clone, Args)]
pub struct EmbeddingArgs {
    /// Document vectors keyed by SHA-256 of the document text.
    #[arg(long, conflicts_with = "hash_seed")]
    pub embeddings: Option<PathBuf>,
    /// Seed of the built-in hashing embedder, used when no file is given.
    #[arg(long)]
    pub hash_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct WindowArgs {
    /// Keep tweets at or after this time (RFC 3339, date or year).
    #[arg(long)]
    pub after: Option<String>,
    /// Keep tweets strictly before this time.
    #[arg(long)]
    pub before: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract per-channel token bags from a raw archive.
    Ingest {
        #[arg(long)]
        archive: PathBuf,
        /// Restrict to a past time window: also drops profile channels, which
        /// only reflect the present.
        #[arg(long)]
        window: bool,
        #[command(flatten)]
        range: WindowArgs,
        /// Skip malformed records instead of failing.
        #[arg(long)]
        skip_invalid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the per-channel vocabulary from bags.
    Vocab {
        #[arg(long)]
        bags: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vectorize bags into a dataset.
    Dataset {
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        embed: EmbeddingArgs,
        /// Dimension of the hashing embedder.
        #[arg(long, default_value_t = fsspip::embed::DEFAULT_D_EM)]
        d_em: usize,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',')]
        class_names: Vec<String>,
        #[arg(long, default_value = "gold")]
        provenance: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label users by party anchor membership.
    Silver {
        #[arg(long)]
        anchors: PathBuf,
        /// Most recent ids per follower and retweeter list kept in the pool.
        #[arg(long, default_value_t = fsspip::pretrain::DEFAULT_POOL_SIZE)]
        pool: usize,
        /// Users sampled per party and list.
        #[arg(long, default_value_t = fsspip::pretrain::DEFAULT_SAMPLE_PER_PARTY)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channelized pool; when given the output is a silver dataset,
        /// otherwise the label list.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining with mixup.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        variant: Option<fsspip::AttentionVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training with best-validation selection.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        variant: Option<fsspip::AttentionVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write the confusion matrix as integer CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Also write the metrics as `metric,value` CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Repeated few-shot training at several shot counts.
    Fewshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [50, 250, 500])]
        shots: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start every run from this checkpoint (e.g. a pretrained one).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Accuracy drop from retraining without each channel.
    Importance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Classify users straight from a raw archive without storing them.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[command(flatten)]
        range: WindowArgs,
        #[arg(long)]
        window: bool,
        #[command(flatten)]
        embed: EmbeddingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a synthetic population from a generative spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the noisy party anchor lists.
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Bayes-optimal accuracy of a spec on a dataset.
    Oracle {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mean predicted leaning per user group.
    Groups {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// User attribute to group by.
        #[arg(long)]
        group_by: String,
        /// Class whose probability is averaged.
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Two-sample t-test on a column of two per-run CSV files.
    Ttest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "accuracy")]
        column: String,
        /// Only rows with this shot count.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time channelization and inference per user.
    Timing {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[command(flatten)]
        embed: EmbeddingArgs,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Re-run the command recorded in a manifest after checking its inputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Exit code and stable kind tag of a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    use fsspip::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => (4, "io"),
                E::Numerical { .. } => (3, "numerical"),
                E::Undefined(_) => (3, "undefined"),
                E::Parse { .. } => (2, "parse"),
                E::Dimension(_) => (2, "dimension"),
                E::Corruption(_) => (2, "corruption"),
                E::SchemaMismatch { .. } => (2, "schema_mismatch"),
                E::Config(_) => (2, "config"),
                E::Validation(_) => (2, "validation"),
                E::Size { .. } => (2, "size"),
                E::Lookup(_) => (2, "lookup"),
                E::Json(_) => (2, "json"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (4, "io");
        }
    }
    (2, "validation")
}

fn report_error(code: u8, kind: &str, message: &str) {
    let message = message.replace('\n', " ");
    eprintln!("error kind={kind} code={code} message={message:?}");
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FSSPIP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| fsspip::Error::Config(format!("FSSPIP_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fsspip::Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error(2, "usage", e.render().to_string().lines().next().unwrap_or("bad arguments"));
            return ExitCode::from(2);
        }
    };
    let result = configure_threads().and_then(|_| commands::run(cli.command, argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            report_error(code, kind, &format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}
