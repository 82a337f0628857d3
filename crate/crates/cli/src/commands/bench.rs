use std::io::Write;
use std::path::PathBuf;

use hdflim_core::bench::{self, BenchConfig, BenchRow};
use hdflim_core::protomem::{MemoryDims, PrototypeMemory};
use serde_json::json;

use crate::args::BenchArgs;
use crate::config::{pick, FileConfig};
use crate::error::CliError;
use crate::manifest::ManifestBuilder;

const RANDOM_L_MAX: usize = 16;
const RANDOM_VOCAB: usize = 10_000;
const RANDOM_BETA: usize = 50_000;

pub fn write_csv(w: impl Write, rows: &[BenchRow]) -> Result<(), CliError> {
    let compare = rows.iter().any(|r| r.unpacked_tokens_per_sec.is_some());
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Io(e.to_string());
    let mut header = vec!["caption_length", "window", "tokens_per_sec", "bytes_scanned"];
    if compare {
        header.extend(["unpacked_tokens_per_sec", "speedup"]);
    }
    out.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.caption_length.to_string(),
            r.window.to_string(),
            format!("{:.3}", r.tokens_per_sec),
            r.bytes_scanned.to_string(),
        ];
        if let Some(u) = r.unpacked_tokens_per_sec {
            rec.push(format!("{u:.3}"));
            rec.push(format!("{:.2}", r.tokens_per_sec / u));
        }
        out.write_record(&rec).map_err(io)?;
    }
    out.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Removes the scratch memory when dropped.
struct Scratch(Option<PathBuf>);

impl Drop for Scratch {
    fn drop(&mut self) {
        if let Some(p) = self.0.take() {
            let _ = std::fs::remove_file(&p);
        }
    }
}

pub fn run(args: &BenchArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("bench");
    let m = &args.memory;
    let fm = &file.memory;
    let seed = pick(m.seed, fm.seed, 0);
    let mut scratch = Scratch(None);
    let mem = if args.random {
        let dims = MemoryDims::new(
            pick(m.l_max, fm.l_max, RANDOM_L_MAX),
            pick(m.vocab, fm.vocab, RANDOM_VOCAB),
            pick(m.beta, fm.beta, RANDOM_BETA),
        )?;
        let path = match &args.scratch {
            Some(p) => p.clone(),
            None => {
                let p = std::env::temp_dir().join(format!("hdflim-bench-{}.hdfp", std::process::id()));
                scratch.0 = Some(p.clone());
                p
            }
        };
        log::info!("building random memory {dims:?} at {}", path.display());
        bench::build_random_memory(&path, dims, seed, true)?
    } else {
        let path = args.proto.as_deref().expect("clap requires --proto without --random");
        manifest.input(path);
        PrototypeMemory::open(path)?.into_packed()?
    };
    let cfg = BenchConfig {
        lengths: args.lengths.clone(),
        windows: args.windows.clone(),
        repeats: args.repeats,
        compare_unpacked: args.compare_unpacked,
        unpacked_slices: args.unpacked_slices,
        seed,
    };
    let rows = bench::run(&mem, &cfg)?;
    match &args.out {
        Some(path) => {
            let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            write_csv(f, &rows)?;
            manifest.config(json!({
                "dims": mem.dims(),
                "random": args.random,
                "seed": seed,
                "lengths": cfg.lengths,
                "windows": cfg.windows,
                "repeats": cfg.repeats,
                "compare_unpacked": cfg.compare_unpacked,
                "unpacked_slices": cfg.unpacked_slices,
            }));
            manifest.write(&[path], &rows)?;
        }
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}
