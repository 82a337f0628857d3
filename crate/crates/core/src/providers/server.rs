//! Serving loop for the wire protocol, with optional fault injection for
//! exercising clients.

use std::io::{self, Read, Write};
use std::str::FromStr;

use serde_json::Value;

use super::protocol::{self, Frame, FrameError, Hello, MsgType, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};
use super::{ModelProvider, ProviderError};
use crate::encoders::PatchFeatures;
use crate::matrix::Matrix;

/// Misbehaviours a server can be told to exhibit after the handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Answer requests with an impossible frame length.
    BadLength,
    /// Answer requests with a frame of the wrong type.
    WrongType,
    /// Exit right after answering HELLO.
    ExitAfterHello,
    /// Stop answering after HELLO.
    Hang,
    /// Answer every request with an ERROR frame.
    ErrorReply,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "bad-length" => Fault::BadLength,
            "wrong-type" => Fault::WrongType,
            "exit-after-hello" => Fault::ExitAfterHello,
            "hang" => Fault::Hang,
            "error-reply" => Fault::ErrorReply,
            other => return Err(format!("unknown fault {other:?}")),
        })
    }
}

fn handle<P: ModelProvider + ?Sized>(model: &mut P, frame: &Frame) -> Result<Frame, ProviderError> {
    let kind = MsgType::from_byte(frame.kind)
        .ok_or_else(|| ProviderError::Protocol(format!("unknown message type {}", frame.kind)))?;
    let p = &frame.payload;
    let payload = match kind {
        MsgType::Hello => return Err(ProviderError::Protocol("repeated HELLO".into())),
        MsgType::EncodeTokens => {
            let ids = protocol::decode_ids(p)?;
            let out = model.encode_tokens(&ids)?;
            let mut b = protocol::encode_f32s(out.hidden.as_slice());
            b.extend(protocol::encode_f32s(&out.logits));
            b
        }
        MsgType::EncodeImage => {
            let data = protocol::decode_image(p)?;
            let (n_p, d_i) = (model.n_p(), model.d_i());
            let m = Matrix::new(n_p, d_i, data)
                .map_err(|e| ProviderError::Input(format!("image payload: {e}")))?;
            protocol::encode_f32s(&model.pool_image(&PatchFeatures(m))?)
        }
        MsgType::EmbedText => protocol::encode_f32s(&model.embed_text(&protocol::decode_text(p)?)?),
        MsgType::Detokenize => model.detokenize(&protocol::decode_ids(p)?)?.into_bytes(),
        MsgType::Tokenize => protocol::encode_ids(&model.tokenize(&protocol::decode_text(p)?)?),
        MsgType::Error => return Err(ProviderError::Protocol("client sent ERROR".into())),
    };
    Ok(Frame {
        kind: frame.kind,
        payload,
    })
}

/// Answers requests until the input closes.
pub fn serve<P: ModelProvider + ?Sized>(
    model: &mut P,
    metadata: Value,
    input: &mut impl Read,
    output: &mut impl Write,
    fault: Option<Fault>,
) -> io::Result<()> {
    let mut greeted = false;
    loop {
        let frame = match protocol::read_frame(input, DEFAULT_MAX_FRAME) {
            Ok(f) => f,
            Err(FrameError::Eof) => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e),
            Err(e @ FrameError::BadLength(_)) => {
                // The stream cannot be resynchronized.
                protocol::write_frame(output, &Frame::error(&e.to_string()))?;
                return Ok(());
            }
        };
        if !greeted {
            if frame.kind != MsgType::Hello as u8 {
                protocol::write_frame(output, &Frame::error("HELLO must be the first exchange"))?;
                continue;
            }
            greeted = true;
            let hello = Hello {
                version: PROTOCOL_VERSION,
                dims: model.dims(),
                metadata: metadata.clone(),
            };
            protocol::write_frame(output, &Frame::new(MsgType::Hello, hello.encode()))?;
            match fault {
                Some(Fault::ExitAfterHello) => return Ok(()),
                Some(Fault::Hang) => loop {
                    std::thread::park();
                },
                _ => continue,
            }
        }
        let reply = match fault {
            Some(Fault::BadLength) => {
                output.write_all(&u32::MAX.to_le_bytes())?;
                output.write_all(&[frame.kind, 0, 0, 0])?;
                output.flush()?;
                continue;
            }
            Some(Fault::WrongType) => Frame {
                kind: frame.kind.wrapping_add(1) % 6,
                payload: Vec::new(),
            },
            Some(Fault::ErrorReply) => Frame::error("injected fault"),
            _ => handle(model, &frame).unwrap_or_else(|e| Frame::error(&e.to_string())),
        };
        protocol::write_frame(output, &reply)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::synthetic::{World, WorldSpec};

    fn exchange(requests: &[Frame], fault: Option<Fault>) -> Vec<Frame> {
        let mut model = World::new(WorldSpec::default()).unwrap().model().clone();
        let mut input = Vec::new();
        for r in requests {
            protocol::write_frame(&mut input, r).unwrap();
        }
        let mut output = Vec::new();
        serve(&mut model, serde_json::json!({}), &mut input.as_slice(), &mut output, fault).unwrap();
        let mut frames = Vec::new();
        let mut r = output.as_slice();
        while let Ok(f) = protocol::read_frame(&mut r, DEFAULT_MAX_FRAME) {
            frames.push(f);
        }
        frames
    }

    #[test]
    fn hello_must_come_first() {
        let out = exchange(
            &[
                Frame::new(MsgType::Tokenize, protocol::encode_text("car")),
                Frame::new(MsgType::Hello, vec![]),
                Frame::new(MsgType::Tokenize, protocol::encode_text("car")),
            ],
            None,
        );
        assert_eq!(out[0].kind, MsgType::Error as u8);
        let hello = Hello::decode(&out[1].payload).unwrap();
        assert_eq!(hello.dims.vocab_size, 64);
        assert_eq!(protocol::decode_ids(&out[2].payload).unwrap().len(), 1);
    }

    #[test]
    fn request_errors_become_error_frames() {
        let out = exchange(
            &[
                Frame::new(MsgType::Hello, vec![]),
                Frame::new(MsgType::Tokenize, protocol::encode_text("zebra")),
                Frame::new(MsgType::EncodeTokens, protocol::encode_ids(&[])),
                Frame { kind: 42, payload: vec![] },
            ],
            None,
        );
        assert!(out[1..].iter().all(|f| f.kind == MsgType::Error as u8));
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn fault_modes() {
        let reqs = [Frame::new(MsgType::Hello, vec![]), Frame::new(MsgType::Tokenize, protocol::encode_text("car"))];
        let out = exchange(&reqs, Some(Fault::ErrorReply));
        assert_eq!(out[1].kind, MsgType::Error as u8);
        let out = exchange(&reqs, Some(Fault::WrongType));
        assert_ne!(out[1].kind, MsgType::Tokenize as u8);
        let out = exchange(&reqs, Some(Fault::ExitAfterHello));
        assert_eq!(out.len(), 1);
        assert_eq!("hang".parse::<Fault>(), Ok(Fault::Hang));
        assert!("nope".parse::<Fault>().is_err());
    }
}
