//! Provider selection for commands that need live models.

use std::path::{Path, PathBuf};
use std::time::Duration;

use hdflim_core::providers::client::{ClientOptions, ModelServerClient};
use hdflim_core::providers::synthetic::{SyntheticModel, WorldManifest};
use hdflim_core::protomem::Header;
use hdflim_core::providers::ModelProvider;
use serde::Serialize;

use crate::args::{ProviderArgs, ProviderKind};
use crate::config::{pick, ProviderSection};
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct ProviderSettings {
    pub kind: String,
    pub world: Option<PathBuf>,
    pub server: Option<Vec<String>>,
    pub server_timeout_secs: f64,
}

pub struct Provider {
    pub model: Box<dyn ModelProvider>,
    /// Present whenever a world file was given, whatever the provider.
    pub world: Option<WorldManifest>,
    pub settings: ProviderSettings,
}

pub fn load_world(path: &Path) -> Result<WorldManifest, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    WorldManifest::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_kind(s: &str) -> Result<ProviderKind, CliError> {
    match s {
        "synthetic" => Ok(ProviderKind::Synthetic),
        "server" => Ok(ProviderKind::Server),
        other => Err(CliError::Usage(format!("unknown provider kind {other:?}"))),
    }
}

pub fn open(args: &ProviderArgs, file: &ProviderSection) -> Result<Provider, CliError> {
    let file_kind = file.kind.as_deref().map(parse_kind).transpose()?;
    let default_kind = if args.server.is_some() {
        ProviderKind::Server
    } else {
        ProviderKind::Synthetic
    };
    let kind = pick(args.provider, file_kind, default_kind);
    let timeout = pick(args.server_timeout, file.server_timeout, 60.0);
    if !(timeout > 0.0 && timeout.is_finite()) {
        return Err(CliError::Usage("server timeout must be positive".into()));
    }
    let world = args.world.as_deref().map(load_world).transpose()?;
    let mut settings = ProviderSettings {
        kind: format!("{kind:?}").to_lowercase(),
        world: args.world.clone(),
        server: None,
        server_timeout_secs: timeout,
    };
    let model: Box<dyn ModelProvider> = match kind {
        ProviderKind::Synthetic => {
            let w = world
                .as_ref()
                .ok_or_else(|| CliError::Usage("the synthetic provider needs --world".into()))?;
            Box::new(SyntheticModel::new(w.model.clone())?)
        }
        ProviderKind::Server => {
            let line = args
                .server
                .as_deref()
                .ok_or_else(|| CliError::Usage("the server provider needs --server".into()))?;
            let argv = shlex::split(line)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| CliError::Usage(format!("cannot parse server command {line:?}")))?;
            settings.server = Some(argv.clone());
            let client = ModelServerClient::spawn(
                &argv,
                ClientOptions {
                    timeout: Duration::from_secs_f64(timeout),
                    ..Default::default()
                },
            )?;
            log::info!("model server metadata: {}", client.hello().metadata);
            Box::new(client)
        }
    };
    Ok(Provider { model, world, settings })
}

/// Checks the provider against the dims recorded in a memory header. The
/// pooled width is not recorded there, so it is not checked.
pub fn check_against_memory(model: &dyn ModelProvider, header: &Header) -> Result<(), CliError> {
    let d = model.dims();
    let e = header.encoder;
    let pairs = [
        ("n_p", d.n_p, e.n_p),
        ("d_I", d.d_i, e.d_i),
        ("d_C", d.d_c, e.d_c),
        ("vocab_size", d.vocab_size, header.dims.vocab_size),
    ];
    for (name, got, want) in pairs {
        if got != want {
            return Err(CliError::Usage(format!("{name}: provider has {got}, memory was built with {want}")));
        }
    }
    Ok(())
}
