use std::io::{BufReader, BufWriter};

use hdflim_core::providers::server::{serve, Fault};
use hdflim_core::providers::synthetic::{SyntheticModel, World, WorldSpec, WORLD_FILE};
use hdflim_core::selftest::{self, SelftestConfig};
use serde_json::json;

use crate::args::{SelftestArgs, ServeStubArgs, SynthArgs};
use crate::error::CliError;
use crate::manifest::ManifestBuilder;
use crate::provider::load_world;

pub fn selftest(args: &SelftestArgs) -> Result<(), CliError> {
    let cfg = SelftestConfig {
        beta: args.beta,
        seed: args.seed,
        ..Default::default()
    };
    if cfg.beta < 64 {
        return Err(CliError::Usage("--beta must be at least 64".into()));
    }
    let reports = selftest::run_all(&cfg);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("serializable"));
    } else {
        for r in &reports {
            println!("{r}");
        }
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} of {} properties failed", reports.len())));
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("synth");
    let d = WorldSpec::default();
    let spec = WorldSpec {
        seed: args.seed.unwrap_or(d.seed),
        prefix: args.prefix.clone().unwrap_or(d.prefix),
        templates: if args.template.is_empty() { d.templates } else { args.template.clone() },
        train_per_template: args.train_per_template.unwrap_or(d.train_per_template),
        heldout_per_template: args.heldout_per_template.unwrap_or(d.heldout_per_template),
        sigma: args.sigma.unwrap_or(d.sigma),
        vocab_size: args.vocab.unwrap_or(d.vocab_size),
        ..d
    };
    let world_file = args.out.join(WORLD_FILE);
    if world_file.exists() && !args.overwrite {
        return Err(CliError::Usage(format!(
            "{} already exists (use --overwrite)",
            world_file.display()
        )));
    }
    let world = World::new(spec.clone())?;
    let m = world.write(&args.out)?;
    let train = args.out.join(&m.train_shard);
    let heldout = args.out.join(&m.heldout_shard);
    println!("world: {}", world_file.display());
    println!("train: {} ({} records)", train.display(), spec.train_per_template * spec.templates.len());
    println!("heldout: {} ({} records)", heldout.display(), spec.heldout_per_template * spec.templates.len());
    manifest.config(json!({ "world": spec }));
    manifest.write(&[&world_file, &train, &heldout], json!({ "prefix_ids": m.prefix_ids, "template_ids": m.template_ids }))?;
    Ok(())
}

pub fn serve_stub(args: &ServeStubArgs) -> Result<(), CliError> {
    let fault = args
        .fault
        .as_deref()
        .map(|f| f.parse::<Fault>().map_err(CliError::Usage))
        .transpose()?;
    let mut model = match &args.world {
        Some(p) => SyntheticModel::new(load_world(p)?.model)?,
        None => World::new(WorldSpec::default())?.model().clone(),
    };
    let metadata = json!({ "server": "hdflim serve-stub", "pooling": "mean" });
    let mut input = BufReader::new(std::io::stdin().lock());
    let mut output = BufWriter::new(std::io::stdout().lock());
    serve(&mut model, metadata, &mut input, &mut output, fault).map_err(|e| CliError::Io(e.to_string()))
}
