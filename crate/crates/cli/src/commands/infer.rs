use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hdflim_core::decoder::{DecodeConfig, Decoder, FinishReason, StepRecord};
use hdflim_core::protomem::PrototypeMemory;
use hdflim_core::providers::shard::ShardReader;
use hdflim_core::providers::synthetic::EOS_ID;
use hdflim_core::sampler::{SamplerConfig, TieBreak};
use serde::Serialize;

use crate::args::{InferArgs, SamplerArgs, TieBreakArg};
use crate::config::{pick, FileConfig, SamplerSection};
use crate::error::CliError;
use crate::manifest::ManifestBuilder;
use crate::provider::{self, ProviderSettings};

fn parse_tie_break(s: &str) -> Result<TieBreak, CliError> {
    match s {
        "lowest-id" | "lowest_id" => Ok(TieBreak::LowestId),
        "random" => Ok(TieBreak::Random),
        other => Err(CliError::Usage(format!("unknown tie_break {other:?}"))),
    }
}

pub fn sampler_config(args: &SamplerArgs, file: &SamplerSection, default_seed: u64) -> Result<SamplerConfig, CliError> {
    let base = if args.greedy || file.greedy.unwrap_or(false) {
        SamplerConfig::greedy()
    } else {
        SamplerConfig::default()
    };
    let file_tie = file.tie_break.as_deref().map(parse_tie_break).transpose()?;
    let flag_tie = args.tie_break.map(|t| match t {
        TieBreakArg::LowestId => TieBreak::LowestId,
        TieBreakArg::Random => TieBreak::Random,
    });
    let cfg = SamplerConfig {
        temperature: pick(args.temperature, file.temperature, base.temperature),
        repetition_penalty: pick(args.repetition_penalty, file.rep_penalty, base.repetition_penalty),
        top_k: pick(args.top_k, file.top_k, base.top_k),
        top_p: pick(args.top_p, file.top_p, base.top_p),
        clip_weight: pick(args.clip_weight, file.clip_weight, base.clip_weight),
        sharpen: pick(args.sharpen, file.sharpen, base.sharpen),
        rng_seed: pick(args.seed, file.seed, default_seed),
        tie_break: pick(flag_tie, file_tie, base.tie_break),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct DiagnosticLine<'a> {
    record: u64,
    #[serde(flatten)]
    step: &'a StepRecord,
}

#[derive(Serialize)]
struct CaptionLine<'a> {
    record: u64,
    text: &'a str,
    tokens: &'a [u32],
    generated: &'a [u32],
    reason: FinishReason,
}

#[derive(Serialize)]
struct Resolved<'a> {
    decode: &'a DecodeConfig,
    sampler: &'a SamplerConfig,
    provider: &'a ProviderSettings,
    memory: &'a hdflim_core::protomem::Header,
    shard: &'a Path,
    records: &'a [u64],
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn run(args: &InferArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("infer");
    let mem = PrototypeMemory::open(&args.proto)?.into_packed()?;
    let header = mem.header().clone();
    let mut prov = provider::open(&args.provider, &file.provider)?;
    provider::check_against_memory(prov.model.as_ref(), &header)?;

    let fd = &file.decode;
    let prompt = match args.prompt.as_deref().or(fd.prompt.as_deref()) {
        Some(text) => prov.model.tokenize(text)?,
        None => prov
            .world
            .as_ref()
            .map(|w| w.prefix_ids.clone())
            .ok_or_else(|| CliError::Usage("--prompt is required without a world file".into()))?,
    };
    let defaults = DecodeConfig::default();
    let world_eos = prov.world.as_ref().map(|_| vec![EOS_ID]);
    let decode = DecodeConfig {
        window: pick(args.window, fd.window, defaults.window),
        mix_weight: pick(args.mix, fd.mix, defaults.mix_weight),
        max_new_tokens: pick(args.max_tokens, fd.max_tokens, defaults.max_new_tokens),
        eos_tokens: args.eos.clone().or(fd.eos.clone()).or(world_eos).unwrap_or_default(),
        stop_on_full_stop: !args.no_full_stop && fd.stop_on_full_stop.unwrap_or(defaults.stop_on_full_stop),
        prompt,
        diagnostics_top_k: defaults.diagnostics_top_k,
    };
    let sampler = sampler_config(&args.sampler, &file.sampler, header.seeds.sampler)?;
    let decoder = Decoder::new(&mem, decode.clone(), sampler.clone())?;

    let mut shard = ShardReader::open(&args.shard, Some(header.encoder))?;
    let records: Vec<u64> = if args.record.is_empty() {
        (0..shard.record_count()).collect()
    } else {
        args.record.clone()
    };
    let mut diagnostics = args.diagnostics.as_deref().map(create).transpose()?;
    let mut output = args.output.as_deref().map(create).transpose()?;
    let write_err = |p: &Option<PathBuf>| {
        let p = p.clone().unwrap_or_default();
        move |e: std::io::Error| CliError::io(&p, e)
    };
    let stdout = std::io::stdout();
    for &i in &records {
        let rec = shard.read(i)?;
        let out = decoder.decode(&rec.patches, prov.model.as_mut(), None)?;
        writeln!(stdout.lock(), "{}", out.text).map_err(|e| CliError::Io(e.to_string()))?;
        if let Some(w) = diagnostics.as_mut() {
            for step in &out.steps {
                let line = serde_json::to_string(&DiagnosticLine { record: i, step }).expect("serializable");
                writeln!(w, "{line}").map_err(write_err(&args.diagnostics))?;
            }
        }
        if let Some(w) = output.as_mut() {
            let line = serde_json::to_string(&CaptionLine {
                record: i,
                text: &out.text,
                tokens: &out.tokens,
                generated: &out.generated,
                reason: out.reason,
            })
            .expect("serializable");
            writeln!(w, "{line}").map_err(write_err(&args.output))?;
        }
    }
    if let Some(mut w) = diagnostics {
        w.flush().map_err(write_err(&args.diagnostics))?;
    }
    if let Some(mut w) = output {
        w.flush().map_err(write_err(&args.output))?;
    }

    let artifacts: Vec<&Path> = args.output.iter().chain(&args.diagnostics).map(PathBuf::as_path).collect();
    if !artifacts.is_empty() {
        manifest.input(&args.proto).input(&args.shard);
        if let Some(w) = &args.provider.world {
            manifest.input(w);
        }
        manifest.config(Resolved {
            decode: &decode,
            sampler: &sampler,
            provider: &prov.settings,
            memory: &header,
            shard: &args.shard,
            records: &records,
        });
        manifest.write(&artifacts, serde_json::json!({ "captions": records.len() }))?;
    }
    Ok(())
}
