//! `bknn`: build artifacts, answer cloze queries and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::StubLm;

/// Command-line misuse: missing inputs, bad flag combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "bknn",
    version,
    about = "kNN-augmented cloze question answering"
)]
pub struct Cli {
    /// Worker threads (default: available cores)
    #[arg(long, global = true, env = "BKNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize, tokenize and store a JSON-lines document collection
    Ingest {
        /// Input documents, one {"title", "text"} object per line
        #[arg(long)]
        corpus: PathBuf,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every token occurrence of a corpus into a datastore
    BuildDatastore {
        /// Corpus directory
        #[arg(long)]
        corpus: PathBuf,
        /// Where embeddings come from
        #[arg(long, value_enum, default_value_t = EmbedderChoice::Reference)]
        embedder: EmbedderChoice,
        /// Exchange store written by an external embedder (with --embedder import)
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Embedding dimension of the reference embedder, or the expected imported dimension
        #[arg(long)]
        dim: Option<usize>,
        /// Expected layer tag of imported embeddings
        #[arg(long)]
        layer_tag: Option<String>,
        /// Output datastore file
        #[arg(long)]
        out: PathBuf,
    },
    /// Add new documents to a corpus and their records to its datastore
    AppendDatastore {
        /// Datastore file to extend
        #[arg(long)]
        store: PathBuf,
        /// New documents, one {"title", "text"} object per line
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus directory the store was built from; updated in place
        #[arg(long)]
        corpus_dir: PathBuf,
        /// Exchange store covering only the new documents (imported stores)
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Build the TF-IDF document index
    BuildIr {
        /// Corpus directory
        #[arg(long)]
        corpus: PathBuf,
        /// Output index file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and populate the inverted-file index over a whole datastore
    BuildAnn {
        /// Datastore file
        #[arg(long)]
        store: PathBuf,
        /// Number of clusters
        #[arg(long, default_value_t = 256)]
        clusters: usize,
        /// Default number of clusters probed per query
        #[arg(long, default_value_t = 8)]
        probe: usize,
        /// Product quantization: subquantizer count and bits per code
        #[arg(long, num_args = 2, value_names = ["M", "BITS"])]
        pq: Option<Vec<usize>>,
        /// Keys sampled for training
        #[arg(long, default_value_t = 100_000)]
        training_sample: usize,
        /// Random seed for sampling and clustering
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output index file
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one cloze query
    Query {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Cloze text containing one [MASK]
        #[arg(long)]
        text: String,
        /// Subject of the query, for the title shortcut
        #[arg(long)]
        subject: Option<String>,
        /// Query id used to look up imported predictions and embeddings
        #[arg(long, default_value = "query")]
        query_id: String,
        /// Number of answers shown
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Number of neighbors shown
        #[arg(long, default_value_t = 5)]
        neighbors: usize,
        /// Prediction mode
        #[arg(long, value_enum, default_value_t = ModeArg::Interpolated)]
        mode: ModeArg,
        /// Search the whole store through the ANN index instead of retrieved documents
        #[arg(long)]
        no_ir: bool,
        /// Print JSON instead of text
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a dataset in one mode
    Eval {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Dataset, JSON lines of triples or instantiated queries
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset whose query ids are dropped from the evaluation (the dev split)
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Prediction mode
        #[arg(long, value_enum, default_value_t = ModeArg::Interpolated)]
        mode: ModeArg,
        /// Search the whole store through the ANN index instead of retrieved documents
        #[arg(long)]
        no_ir: bool,
        /// Output JSON report
        #[arg(long)]
        report: PathBuf,
    },
    /// Search retrieved documents, lambda, k and distance scale on a dev set
    Gridsearch {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Dev dataset
        #[arg(long)]
        dev: PathBuf,
        /// Grid definition as JSON {"top_n", "lambdas", "ks", "distance_scales"} (default: full grid)
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Output JSON with every cell and the best one
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderChoice {
    /// Built-in feature-hashing embedder
    Reference,
    /// Validate and copy an exchange store
    Import,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Language model only
    Lm,
    /// Nearest neighbors only
    Knn,
    /// Interpolation of both
    Interpolated,
}

impl From<ModeArg> for bknn::pipeline::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lm => Self::Lm,
            ModeArg::Knn => Self::Knn,
            ModeArg::Interpolated => Self::Interpolated,
        }
    }
}

/// Artifact locations and settings; flags override the config file.
#[derive(Debug, Clone, Args)]
pub struct ArtifactArgs {
    /// Project configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Datastore file
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// TF-IDF index file
    #[arg(long)]
    pub ir: Option<PathBuf>,
    /// ANN index file
    #[arg(long)]
    pub ann: Option<PathBuf>,
    /// Candidate vocabulary, one token per line (default: whole vocabulary)
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Imported LM predictions (default: built-in stub LM)
    #[arg(long)]
    pub lm_predictions: Option<PathBuf>,
    /// Stub LM used without imported predictions
    #[arg(long, value_enum)]
    pub stub_lm: Option<StubLm>,
    /// Imported query embeddings, required for imported datastores
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    /// Number of neighbors
    #[arg(long)]
    pub k: Option<usize>,
    /// Distance scale of the neighbor softmax
    #[arg(long)]
    pub distance_scale: Option<f64>,
    /// Interpolation weight of the kNN distribution
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Documents retrieved per query
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Disable the subject title shortcut
    #[arg(long)]
    pub no_subject_shortcut: bool,
    /// Clusters probed by ANN search
    #[arg(long)]
    pub probe: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<bknn::Error>() {
            return if e.is_data_error() { 2 } else { 3 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
