mod commands;
mod config;
mod retriever;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Composed image retrieval lab: toy data, training, retrieval, analysis.
#[derive(Parser, Debug)]
#[command(name = "coir", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic toy dataset.
    GenToy(GenToyArgs),
    /// Convert VQA complementary pairs into triplets.
    #[command(subcommand)]
    Roam(RoamCommand),
    /// Dataset statistics (triplets, corpus sizes, tokens, text length).
    Stats(StatsArgs),
    /// Convert CIRR or FashionIQ annotations to triplet JSONL.
    Convert(ConvertArgs),
    /// Train the toy model and write a checkpoint.
    Train(TrainArgs),
    /// Embed corpus images or queries into a CEMB file.
    Embed(EmbedArgs),
    /// Retrieve the top-k corpus ids for one query.
    Retrieve(RetrieveArgs),
    /// Recall@K report for a query set.
    Eval(EvalArgs),
    /// Modality-redundancy curves and purified-subset sweeps.
    #[command(subcommand)]
    Redundancy(RedundancyCommand),
    /// Occlusion heatmap and token saliency for one query.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compositional (text needed) or redundant (image alone suffices).
    #[arg(long, value_enum)]
    pub mode: Option<ToyModeArg>,
    /// Queries sharing each transition text.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Training triplets.
    #[arg(long)]
    pub train_triplets: Option<usize>,
    /// Validation triplets.
    #[arg(long)]
    pub val_triplets: Option<usize>,
    /// Images in the val corpus.
    #[arg(long)]
    pub val_corpus: Option<usize>,
    /// Attach six-image candidate subsets to val triplets.
    #[arg(long)]
    pub subsets: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ToyModeArg {
    Compositional,
    Redundant,
}

#[derive(Subcommand, Debug)]
pub enum RoamCommand {
    /// Rephrase every pair and write triplet JSONL.
    Run(RoamRunArgs),
    /// Draw a review sheet of triplets for manual rating.
    Sample(RoamSampleArgs),
}

#[derive(Args, Debug)]
pub struct RoamRunArgs {
    /// VQA JSON: [{image_id, question, answer, complement_image_id, complement_answer}].
    #[arg(long)]
    pub input: PathBuf,
    /// Triplet JSONL output.
    #[arg(long)]
    pub out: PathBuf,
    /// Audit JSONL of prompts and raw completions.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// Use a deterministic mock table ([{question, answer, text}]) instead of HTTP.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Use the built-in mock holding the prompt examples.
    #[arg(long, conflicts_with = "mock")]
    pub mock_examples: bool,
    /// Emit only the forward triplet of each pair.
    #[arg(long)]
    pub no_symmetry: bool,
    /// Reject rephrasings shorter than this many characters.
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Reject rephrasings longer than this many characters.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RoamSampleArgs {
    /// Triplet JSONL to sample from.
    #[arg(long)]
    pub triplets: PathBuf,
    /// Rows to draw.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Triplet JSONL files, pooled.
    #[arg(long, required = true, num_args = 1..)]
    pub triplets: Vec<PathBuf>,
    /// Manifest for train/val corpus counts.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSON output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ConvertFormat {
    Cirr,
    Fashioniq,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Annotation format.
    #[arg(long, value_enum)]
    pub format: ConvertFormat,
    /// Annotation JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// FashionIQ category name (dress, shirt, toptee).
    #[arg(long, required_if_eq("format", "fashioniq"))]
    pub category: Option<String>,
    /// Triplet JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Contrastive loss, lr0 2e-3, 10 epochs.
    Toy,
    /// Surrogate Recall@K loss, lr0 5e-5, 20 epochs.
    Reference,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum LossArg {
    Surrogate,
    Contrastive,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Full,
    TextOnly,
    ImageOnly,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with manifest.json and train.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    /// Base recipe; other flags override it.
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Triplets per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Shuffling and initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Query inputs the model sees.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Training objective.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Disable reverse queries.
    #[arg(long)]
    pub no_rq: bool,
    /// Per-epoch JSONL log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedKind {
    /// Target embeddings of corpus images, keyed by image id.
    Corpus,
    /// Query embeddings of triplets, keyed by qid.
    Queries,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Standard,
    Reverse,
    TextOnly,
    ImageOnly,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// What to embed.
    #[arg(long, value_enum, default_value_t = EmbedKind::Corpus)]
    pub kind: EmbedKind,
    /// Images or triplets of this split.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Query mode for `--kind queries`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// CEMB output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus CEMB.
    #[arg(long)]
    pub index: PathBuf,
    /// Query image (PPM or .f32t).
    #[arg(long)]
    pub image: PathBuf,
    /// Transition text.
    #[arg(long)]
    pub text: String,
    /// Results to print.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Query mode (default standard).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint; embeds `--data` on the fly.
    #[arg(long, requires = "data", conflicts_with_all = ["index", "queries"])]
    pub model: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Triplets and corpus of this split.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Corpus CEMB (with `--queries` and `--triplets`).
    #[arg(long, requires_all = ["queries", "triplets"])]
    pub index: Option<PathBuf>,
    /// Query CEMB keyed by qid.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Triplet JSONL for `--queries`.
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Query mode when embedding with `--model`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// JSON report output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV report output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum RedundancyCommand {
    /// Uni-modal Recall@K curves.
    Curve(CurveArgs),
    /// Recall on purified subsets V_n as n grows.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Triplets and corpus of this split.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// MODALITY=RETRIEVER, repeatable. Modalities: text-only, image-only,
    /// reference. Retrievers: text_bow, pixel_mean, model:MODE:CKPT,
    /// cemb:QUERIES:INDEX.
    #[arg(long = "curve", required = true)]
    pub curves: Vec<String>,
    /// Comma-separated K grid.
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
    /// JSON output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Triplets and corpus of this split.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Filtering retriever (see `curve --curve`).
    #[arg(long, default_value = "text_bow")]
    pub filter: String,
    /// Evaluated retriever; defaults to the filter itself.
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated n grid.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Comma-separated K set averaged per row.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// JSON output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Query image.
    #[arg(long)]
    pub image: PathBuf,
    /// Transition text.
    #[arg(long)]
    pub text: String,
    /// Target image whose embedding is the reference.
    #[arg(long)]
    pub target: PathBuf,
    /// Query mode (default standard).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Occlusion window side in pixels.
    #[arg(long)]
    pub window: Option<usize>,
    /// Occlusion stride in pixels.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Heatmap JSON output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PPM overlay output.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Token saliency JSON output.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
