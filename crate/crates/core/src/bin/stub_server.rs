//! Model server over stdin/stdout backed by the synthetic world model.

use std::io::{self, BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hdflim_core::providers::server::{serve, Fault};
use hdflim_core::providers::synthetic::{SyntheticModel, World, WorldManifest, WorldSpec};

#[derive(Parser)]
#[command(name = "hdflim-stub-server", about = "Synthetic model server speaking the hdflim wire protocol")]
struct Args {
    /// `world.json` written by `hdflim synth`; the default world otherwise.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Misbehave after the handshake: bad-length, wrong-type,
    /// exit-after-hello, hang or error-reply.
    #[arg(long)]
    fault: Option<Fault>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let model = match &args.world {
        Some(path) => WorldManifest::load(path).and_then(|m| SyntheticModel::new(m.model)),
        None => World::new(WorldSpec::default()).map(|w| w.model().clone()),
    };
    let mut model = match model {
        Ok(m) => m,
        Err(e) => {
            eprintln!("hdflim-stub-server: {e}");
            return ExitCode::from(2);
        }
    };
    let metadata = serde_json::json!({ "server": "hdflim-stub", "pooling": "mean" });
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    match serve(&mut model, metadata, &mut input, &mut output, args.fault) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hdflim-stub-server: {e}");
            ExitCode::from(3)
        }
    }
}
