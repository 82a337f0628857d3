use std::path::{Path, PathBuf};

use hdflim_core::learner::{ChainSource, LearnConfig, LearnOptions, Learner, MalformedPolicy, RecordSource};
use hdflim_core::protomem::{AccumMemory, EncoderDims, MemoryDims, Seeds};
use hdflim_core::providers::shard::ShardReader;
use hdflim_core::providers::synthetic::{WorldManifest, WORLD_FILE};
use serde::Serialize;

use crate::args::LearnArgs;
use crate::config::{pick, FileConfig};
use crate::error::CliError;
use crate::manifest::ManifestBuilder;
use crate::provider::load_world;

pub const DEFAULT_L_MAX: usize = 41;
pub const DEFAULT_BETA: usize = 50_000;
pub const DEFAULT_SEED: u64 = 0;

/// Shards named on the command line, else every `.hdsh` file directly
/// inside the data directory, in name order.
fn shard_paths(args: &LearnArgs) -> Result<Vec<PathBuf>, CliError> {
    if !args.shard.is_empty() {
        return Ok(args.shard.clone());
    }
    let dir = args.data.as_deref().expect("clap requires --data or --shard");
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "hdsh") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .hdsh shards", dir.display())));
    }
    Ok(paths)
}

fn world_path(args: &LearnArgs) -> Option<PathBuf> {
    args.world.clone().or_else(|| {
        let p = args.data.as_ref()?.join(WORLD_FILE);
        p.exists().then_some(p)
    })
}

#[derive(Debug, Serialize)]
struct Resolved {
    dims: MemoryDims,
    master_seed: Option<u64>,
    seeds: Seeds,
    encoder: EncoderDims,
    learn: LearnConfig,
    shards: Vec<PathBuf>,
    world: Option<PathBuf>,
    resumed: bool,
}

fn check_flag<T: PartialEq + std::fmt::Display>(name: &str, flag: Option<T>, stored: T) -> Result<(), CliError> {
    match flag {
        Some(v) if v != stored => Err(CliError::Usage(format!(
            "--{name} {v} differs from the resumed memory ({stored})"
        ))),
        _ => Ok(()),
    }
}

fn open_or_create(
    args: &LearnArgs,
    file: &FileConfig,
    world: Option<&WorldManifest>,
    encoder: EncoderDims,
) -> Result<(AccumMemory, Option<u64>), CliError> {
    let m = &args.memory;
    let fm = &file.memory;
    let l_max = m.l_max.or(fm.l_max);
    let beta = m.beta.or(fm.beta);
    let vocab = m.vocab.or(fm.vocab).or(world.map(|w| w.model.vocab_size));
    if args.resume {
        let mem = AccumMemory::open(&args.proto)?;
        let d = mem.dims();
        check_flag("lmax", l_max, d.l_max)?;
        check_flag("beta", beta, d.beta)?;
        check_flag("vocab", vocab, d.vocab_size)?;
        if let Some(seed) = m.seed.or(fm.seed) {
            if Seeds::from_master(seed) != mem.seeds() {
                return Err(CliError::Usage(format!("--seed {seed} differs from the resumed memory")));
            }
        }
        if mem.header().encoder != encoder {
            return Err(CliError::Data(format!(
                "shard encoder dims {encoder:?} differ from the memory's {:?}",
                mem.header().encoder
            )));
        }
        return Ok((mem, None));
    }
    let vocab = vocab.ok_or_else(|| CliError::Usage("--vocab is required without a world file".into()))?;
    let dims = MemoryDims::new(l_max.unwrap_or(DEFAULT_L_MAX), vocab, beta.unwrap_or(DEFAULT_BETA))?;
    let seed = pick(m.seed, fm.seed, DEFAULT_SEED);
    let mem = AccumMemory::create(&args.proto, dims, Seeds::from_master(seed), encoder, args.overwrite)?;
    Ok((mem, Some(seed)))
}

pub fn run(args: &LearnArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("learn");
    let shards = shard_paths(args)?;
    let world_file = world_path(args);
    let world = world_file.as_deref().map(load_world).transpose()?;
    let first = ShardReader::open(&shards[0], None)?;
    let encoder = first.dims();
    drop(first);
    let mut sources: Vec<Box<dyn RecordSource>> = Vec::with_capacity(shards.len());
    for p in &shards {
        sources.push(Box::new(ShardReader::open(p, Some(encoder))?));
    }
    let mut source = ChainSource::new(sources).map_err(|e| CliError::Data(e.to_string()))?;

    let (mut mem, master_seed) = open_or_create(args, file, world.as_ref(), encoder)?;
    let fl = &file.learn;
    let defaults = LearnConfig::default();
    let strict = args.strict || fl.strict.unwrap_or(false);
    let config = LearnConfig {
        prefix: args
            .prefix_ids
            .clone()
            .or_else(|| fl.prefix_ids.clone())
            .or_else(|| world.as_ref().map(|w| w.prefix_ids.clone()))
            .unwrap_or_default(),
        flush_batch: pick(args.flush_batch, fl.flush_batch, defaults.flush_batch),
        truncation: args.truncation.or(fl.truncation),
        malformed: if strict { MalformedPolicy::Abort } else { MalformedPolicy::Skip },
        encode_batch: pick(args.encode_batch, fl.encode_batch, defaults.encode_batch),
    };
    let learner = Learner::new(&mem, config.clone())?;
    let resumed_from = mem.records_consumed();
    if args.resume {
        log::info!("resuming at record {resumed_from}");
    }
    let summary = learner.learn_stream(
        &mut mem,
        &mut source,
        LearnOptions {
            halt_after: args.abort_after,
        },
    )?;
    if let Some(n) = args.abort_after {
        if summary.records_consumed < source.len().unwrap_or(u64::MAX) {
            log::error!("aborting after {n} records as requested");
            std::process::abort();
        }
    }

    println!("records={}", summary.records);
    println!("skipped={}", summary.skipped);
    println!("tokens={}", summary.tokens);
    println!("records_consumed={}", summary.records_consumed);
    println!("seconds={:.3}", summary.duration.as_secs_f64());

    for p in &shards {
        manifest.input(p);
    }
    if let Some(w) = &world_file {
        manifest.input(w);
    }
    manifest.config(Resolved {
        dims: mem.dims(),
        master_seed,
        seeds: mem.seeds(),
        encoder,
        learn: config,
        shards: shards.clone(),
        world: world_file.clone(),
        resumed: args.resume,
    });
    let proto: &Path = &args.proto;
    drop(mem);
    manifest.write(&[proto], &summary)?;
    Ok(())
}
