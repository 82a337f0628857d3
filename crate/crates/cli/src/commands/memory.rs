//! Commands that transform or describe memory files.

use std::path::Path;

use hdflim_core::protomem::{journal_path, read_header, AccumMemory, Header, MemoryState};
use serde::Serialize;
use serde_json::json;

use crate::args::{BinarizeArgs, InspectArgs, MergeArgs};
use crate::error::CliError;
use crate::manifest::ManifestBuilder;

pub fn binarize(args: &BinarizeArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("binarize");
    manifest.input(&args.proto);
    let mem = AccumMemory::open(&args.proto)?;
    let packed = mem.binarize_pack(&args.out, args.overwrite)?;
    let header = packed.header().clone();
    drop(packed);
    println!("wrote {} ({} records)", args.out.display(), header.records_consumed);
    manifest.config(json!({ "header": header, "overwrite": args.overwrite }));
    manifest.write(&[&args.out], json!({ "records_consumed": header.records_consumed }))?;
    Ok(())
}

pub fn merge(args: &MergeArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("merge");
    let mems = args
        .inputs
        .iter()
        .map(|p| {
            manifest.input(p);
            AccumMemory::open(p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&AccumMemory> = mems.iter().collect();
    let out = AccumMemory::merge(&refs, &args.out, args.overwrite)?;
    let header = out.header().clone();
    drop(out);
    println!("wrote {} ({} records)", args.out.display(), header.records_consumed);
    manifest.config(json!({ "header": header, "inputs": args.inputs, "overwrite": args.overwrite }));
    manifest.write(&[&args.out], json!({ "records_consumed": header.records_consumed }))?;
    Ok(())
}

#[derive(Serialize)]
struct Inspection<'a> {
    path: &'a Path,
    file_bytes: u64,
    pending_journal: bool,
    #[serde(flatten)]
    header: &'a Header,
}

fn state_name(s: MemoryState) -> &'static str {
    match s {
        MemoryState::AccumI32 => "AccumI32",
        MemoryState::PackedBits => "PackedBits",
    }
}

pub fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    let header = read_header(&args.proto)?;
    let file_bytes = std::fs::metadata(&args.proto)
        .map_err(|e| CliError::io(&args.proto, e))?
        .len();
    let pending_journal = journal_path(&args.proto).exists();
    if args.json {
        let doc = Inspection {
            path: &args.proto,
            file_bytes,
            pending_journal,
            header: &header,
        };
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
        return Ok(());
    }
    let h = &header;
    println!("path: {}", args.proto.display());
    println!("format_version: {}", h.version);
    println!("state: {}", state_name(h.state));
    println!("l_max: {}", h.dims.l_max);
    println!("vocab_size: {}", h.dims.vocab_size);
    println!("beta: {}", h.dims.beta);
    println!("records: {}", h.records_consumed);
    println!("valid: {}", h.valid);
    println!("seed_lsh_image: {:#018x}", h.seeds.lsh_image);
    println!("seed_lsh_caption: {:#018x}", h.seeds.lsh_caption);
    println!("seed_positional: {:#018x}", h.seeds.positional);
    println!("seed_sampler: {:#018x}", h.seeds.sampler);
    println!("n_p: {}", h.encoder.n_p);
    println!("d_i: {}", h.encoder.d_i);
    println!("d_c: {}", h.encoder.d_c);
    println!("file_bytes: {file_bytes}");
    println!("pending_journal: {pending_journal}");
    Ok(())
}
