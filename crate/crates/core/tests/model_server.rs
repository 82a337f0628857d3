use std::time::{Duration, Instant};

use hdflim_core::decoder::{DecodeConfig, Decoder};
use hdflim_core::learner::{LearnConfig, LearnOptions, Learner, VecSource};
use hdflim_core::protomem::{AccumMemory, MemoryDims, Seeds};
use hdflim_core::providers::client::{ClientOptions, ModelServerClient};
use hdflim_core::providers::synthetic::{Split, World, WorldSpec, EOS_ID};
use hdflim_core::providers::{check_causality, ModelProvider, ProviderError, SequenceEncoder, TextEmbedder, VisionEncoder};
use hdflim_core::sampler::SamplerConfig;

const STUB: &str = env!("CARGO_BIN_EXE_hdflim-stub-server");

fn stub(extra: &[&str], timeout: Duration) -> Result<ModelServerClient, ProviderError> {
    let mut cmd = vec![STUB.to_string()];
    cmd.extend(extra.iter().map(|s| s.to_string()));
    ModelServerClient::spawn(
        &cmd,
        ClientOptions {
            timeout,
            ..Default::default()
        },
    )
}

fn world() -> World {
    World::new(WorldSpec::default()).unwrap()
}

#[test]
fn handshake_reports_the_synthetic_dims() {
    let w = world();
    let client = stub(&[], Duration::from_secs(10)).unwrap();
    assert_eq!(client.dims(), w.model().dims());
    assert_eq!(client.hello().metadata["pooling"], "mean");
}

#[test]
fn handshake_rejects_unexpected_dims() {
    let mut expected = world().model().dims();
    expected.d_c += 1;
    let err = ModelServerClient::spawn(
        &[STUB.to_string()],
        ClientOptions {
            expected: Some(expected),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, ProviderError::Config(_)), "{err}");
}

#[test]
fn served_model_answers_like_the_in_process_one() {
    let w = world();
    let mut local = w.model().clone();
    let mut remote = stub(&[], Duration::from_secs(10)).unwrap();
    let text = "this image shows new car on snow .";
    let ids = local.tokenize(text).unwrap();
    assert_eq!(remote.tokenize(text).unwrap(), ids);
    assert_eq!(remote.detokenize(&ids).unwrap(), local.detokenize(&ids).unwrap());

    let a = local.encode_tokens(&ids).unwrap();
    let b = remote.encode_tokens(&ids).unwrap();
    assert_eq!(a, b);

    let img = w.image(1, Split::Heldout, 3);
    assert_eq!(remote.pool_image(&img).unwrap(), local.pool_image(&img).unwrap());
    assert_eq!(remote.embed_text(text).unwrap(), local.embed_text(text).unwrap());
    assert_eq!(check_causality(&mut remote, &ids).unwrap(), None);
}

#[test]
fn tokenize_round_trips_over_the_wire() {
    let mut remote = stub(&[], Duration::from_secs(10)).unwrap();
    for text in ["this image shows latest car on road .", "new car", "."] {
        let ids = remote.tokenize(text).unwrap();
        let back = remote.detokenize(&ids).unwrap();
        assert_eq!(remote.tokenize(&back).unwrap(), ids, "{text:?} -> {back:?}");
    }
}

#[test]
fn remote_errors_leave_the_connection_usable() {
    let mut remote = stub(&[], Duration::from_secs(10)).unwrap();
    let err = remote.tokenize("zebra").unwrap_err();
    assert!(matches!(err, ProviderError::Remote(_)), "{err}");
    assert_eq!(remote.tokenize("car").unwrap().len(), 1);
}

#[test]
fn decoding_is_provider_independent() {
    let dir = tempfile::tempdir().unwrap();
    let w = world();
    let dims = MemoryDims::new(12, w.spec().vocab_size, 8192).unwrap();
    let mut mem = AccumMemory::create(&dir.path().join("m.hdfp"), dims, Seeds::from_master(4), w.encoder_dims(), false).unwrap();
    let cfg = LearnConfig {
        prefix: w.prefix_ids().to_vec(),
        ..Default::default()
    };
    let learner = Learner::new(&mem, cfg).unwrap();
    let mut src = VecSource::new(w.records(Split::Train).map(|(_, r)| r).collect());
    learner.learn_stream(&mut mem, &mut src, LearnOptions::default()).unwrap();
    let packed = mem.binarize_pack(&dir.path().join("p.hdfp"), false).unwrap();

    let decode = DecodeConfig {
        prompt: w.prefix_ids().to_vec(),
        eos_tokens: vec![EOS_ID],
        ..Default::default()
    };
    // Default sampler, so text embeddings cross the wire too.
    let decoder = Decoder::new(&packed, decode, SamplerConfig::default()).unwrap();
    let mut local = w.model().clone();
    let mut remote = stub(&[], Duration::from_secs(10)).unwrap();
    for i in 0..4 {
        let img = w.image(i % 2, Split::Heldout, i);
        let a = decoder.decode(&img, &mut local, None).unwrap();
        let b = decoder.decode(&img, &mut remote, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn bad_length_breaks_the_handle() {
    let mut remote = stub(&["--fault", "bad-length"], Duration::from_secs(10)).unwrap();
    let err = remote.tokenize("car").unwrap_err();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err}");
    let again = remote.tokenize("car").unwrap_err();
    assert!(matches!(again, ProviderError::Protocol(_)), "{again}");
    // A fresh server still works.
    let mut fresh = stub(&[], Duration::from_secs(10)).unwrap();
    assert_eq!(fresh.tokenize("car").unwrap().len(), 1);
}

#[test]
fn wrong_reply_type_is_a_protocol_error() {
    let mut remote = stub(&["--fault", "wrong-type"], Duration::from_secs(10)).unwrap();
    let err = remote.tokenize("car").unwrap_err();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err}");
    assert!(remote.detokenize(&[5]).is_err());
}

#[test]
fn server_exit_is_reported_with_status() {
    let mut remote = stub(&["--fault", "exit-after-hello"], Duration::from_secs(10)).unwrap();
    let err = remote.encode_tokens(&[2, 3]).unwrap_err();
    assert!(matches!(err, ProviderError::Exited { .. }), "{err}");
}

#[test]
fn hang_times_out() {
    let mut remote = stub(&["--fault", "hang"], Duration::from_millis(300)).unwrap();
    let start = Instant::now();
    let err = remote.tokenize("car").unwrap_err();
    assert!(matches!(err, ProviderError::Timeout(_)), "{err}");
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn error_replies_surface_as_remote_errors() {
    let mut remote = stub(&["--fault", "error-reply"], Duration::from_secs(10)).unwrap();
    match remote.tokenize("car").unwrap_err() {
        ProviderError::Remote(msg) => assert!(msg.contains("injected")),
        other => panic!("{other}"),
    }
}

#[test]
fn missing_program_is_an_io_error() {
    let err = ModelServerClient::spawn(&["/nonexistent/model-server".into()], ClientOptions::default()).unwrap_err();
    assert!(matches!(err, ProviderError::Io(_)), "{err}");
    let err = ModelServerClient::spawn(&[], ClientOptions::default()).unwrap_err();
    assert!(matches!(err, ProviderError::Config(_)), "{err}");
}

#[test]
fn world_file_selects_the_served_model() {
    let dir = tempfile::tempdir().unwrap();
    let w = World::new(WorldSpec {
        seed: 99,
        vocab_size: 40,
        ..WorldSpec::default()
    })
    .unwrap();
    w.write(dir.path()).unwrap();
    let world_file = dir.path().join("world.json");
    let mut remote = stub(&["--world", world_file.to_str().unwrap()], Duration::from_secs(10)).unwrap();
    assert_eq!(remote.dims().vocab_size, 40);
    let ids = w.model().clone().tokenize("new car on snow").unwrap();
    assert_eq!(remote.encode_tokens(&ids).unwrap(), w.model().clone().encode_tokens(&ids).unwrap());
}
