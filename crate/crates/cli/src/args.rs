use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hdflim", version, about = "Hyperdimensional prototype learning and caption decoding")]
pub struct Cli {
    /// TOML configuration file. Flags take precedence over its values.
    #[arg(long, global = true, env = "HDFLIM_CONFIG")]
    pub config: Option<PathBuf>,

    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Accumulate prototypes from shard files.
    Learn(LearnArgs),
    /// Binarize and bit-pack an accumulator memory.
    Binarize(BinarizeArgs),
    /// Caption images with a packed memory.
    Infer(InferArgs),
    /// Measure retrieval throughput on a packed memory.
    Bench(BenchArgs),
    /// Run the statistical property checks.
    Selftest(SelftestArgs),
    /// Print the header of a memory file.
    Inspect(InspectArgs),
    /// Sum accumulator memories learned on disjoint data.
    Merge(MergeArgs),
    /// Generate the synthetic two-template world and its shards.
    Synth(SynthArgs),
    /// Serve the synthetic model over stdin/stdout.
    ServeStub(ServeStubArgs),
}

#[derive(Args, Debug)]
pub struct MemoryArgs {
    /// Highest token position stored.
    #[arg(long = "lmax")]
    pub l_max: Option<usize>,
    /// Hypervector dimensionality.
    #[arg(long)]
    pub beta: Option<usize>,
    /// Vocabulary size. Taken from the world file when there is one.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Master seed for the projections and positional codes.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    /// Directory of `.hdsh` shards (read in name order).
    #[arg(long, env = "HDFLIM_DATA", required_unless_present = "shard")]
    pub data: Option<PathBuf>,
    /// Individual shard files, in order. May be repeated.
    #[arg(long)]
    pub shard: Vec<PathBuf>,
    /// Memory file to create or resume.
    #[arg(long, env = "HDFLIM_PROTO")]
    pub proto: PathBuf,
    /// World file giving the vocabulary size and prefix; defaults to
    /// `<data>/world.json` when present.
    #[arg(long, env = "HDFLIM_WORLD")]
    pub world: Option<PathBuf>,
    #[command(flatten)]
    pub memory: MemoryArgs,
    /// Continue an existing memory from its last checkpoint.
    #[arg(long, conflicts_with = "overwrite")]
    pub resume: bool,
    /// Replace an existing memory.
    #[arg(long)]
    pub overwrite: bool,
    /// Records per checkpoint.
    #[arg(long)]
    pub flush_batch: Option<usize>,
    /// Records whose images are projected together.
    #[arg(long)]
    pub encode_batch: Option<usize>,
    /// Cut captions to this many tokens.
    #[arg(long)]
    pub truncation: Option<usize>,
    /// Comma-separated prefix token ids.
    #[arg(long, value_delimiter = ',')]
    pub prefix_ids: Option<Vec<u32>>,
    /// Abort on the first malformed record instead of skipping it.
    #[arg(long)]
    pub strict: bool,
    /// Stop after this many records in total and abort without a final
    /// checkpoint, as a crash would.
    #[arg(long, hide = true)]
    pub abort_after: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BinarizeArgs {
    /// Accumulator memory.
    #[arg(long, env = "HDFLIM_PROTO")]
    pub proto: PathBuf,
    /// Packed memory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Accumulator memories with identical dimensions and seeds.
    #[arg(long, num_args = 2.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, env = "HDFLIM_PROTO")]
    pub proto: PathBuf,
    /// Print JSON instead of `key: value` lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// In-process synthetic model described by a world file.
    Synthetic,
    /// External model server speaking the wire protocol.
    Server,
}

#[derive(Args, Debug)]
pub struct ProviderArgs {
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// World file for the synthetic provider.
    #[arg(long, env = "HDFLIM_WORLD")]
    pub world: Option<PathBuf>,
    /// Model-server command line, split like a shell would.
    #[arg(long, env = "HDFLIM_SERVER")]
    pub server: Option<String>,
    /// Per-request timeout for the model server, in seconds.
    #[arg(long)]
    pub server_timeout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SamplerArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long = "rep-penalty")]
    pub repetition_penalty: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Weight of text-embedding similarity in the final ranking.
    #[arg(long)]
    pub clip_weight: Option<f64>,
    /// Scale of the similarity softmax.
    #[arg(long)]
    pub sharpen: Option<f64>,
    /// Sampler seed; defaults to the seed stored in the memory.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pick the highest mixed logit at every step.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, value_enum)]
    pub tie_break: Option<TieBreakArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TieBreakArg {
    LowestId,
    Random,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Packed memory.
    #[arg(long, env = "HDFLIM_PROTO")]
    pub proto: PathBuf,
    /// Shard holding the images to caption.
    #[arg(long)]
    pub shard: PathBuf,
    /// Record indices to caption; all records when omitted.
    #[arg(long, value_delimiter = ',')]
    pub record: Vec<u64>,
    /// Prototype positions searched per step.
    #[arg(long)]
    pub window: Option<usize>,
    /// Weight of the language-model logits.
    #[arg(long)]
    pub mix: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Text to start from; the training prefix by default.
    #[arg(long)]
    pub prompt: Option<String>,
    /// End-of-sequence token ids.
    #[arg(long, value_delimiter = ',')]
    pub eos: Option<Vec<u32>>,
    /// Keep decoding past a full stop.
    #[arg(long)]
    pub no_full_stop: bool,
    /// JSON-lines file receiving one object per decoding step.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// JSON-lines file receiving one object per caption.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Packed memory to measure.
    #[arg(long, env = "HDFLIM_PROTO", required_unless_present = "random")]
    pub proto: Option<PathBuf>,
    /// Measure a freshly generated random memory instead.
    #[arg(long)]
    pub random: bool,
    #[command(flatten)]
    pub memory: MemoryArgs,
    /// Where the random memory is written; a temporary file by default.
    #[arg(long)]
    pub scratch: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub windows: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Also time an unpacked reference implementation.
    #[arg(long)]
    pub compare_unpacked: bool,
    /// Unpacked slices kept in memory for the comparison.
    #[arg(long, default_value_t = 2)]
    pub unpacked_slices: usize,
    /// CSV output; standard output by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 50_000)]
    pub beta: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Print the reports as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, env = "HDFLIM_DATA")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caption templates, one per flag. The prefix is prepended.
    #[arg(long)]
    pub template: Vec<String>,
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub train_per_template: Option<usize>,
    #[arg(long)]
    pub heldout_per_template: Option<usize>,
    /// Patch noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ServeStubArgs {
    #[arg(long, env = "HDFLIM_WORLD")]
    pub world: Option<PathBuf>,
    /// Misbehave on purpose: bad-length, wrong-type, exit-after-hello,
    /// hang or error-reply.
    #[arg(long)]
    pub fault: Option<String>,
}
