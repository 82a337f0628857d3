//! Client for a model server running as a child process.

use std::io::{BufReader, Read};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{self, Frame, FrameError, Hello, MsgType, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};
use super::{ModelProvider, ProviderDims, ProviderError, SequenceEncoder, SequenceOutput, TextEmbedder, VisionEncoder};
use crate::encoders::PatchFeatures;
use crate::matrix::Matrix;

const STDERR_CAP: usize = 64 << 10;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Per-request timeout, handshake included.
    pub timeout: Duration,
    pub max_frame: u32,
    /// Dims the engine was configured with; the handshake must match.
    pub expected: Option<ProviderDims>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            max_frame: DEFAULT_MAX_FRAME,
            expected: None,
        }
    }
}

/// A spawned model server. Requests are serialized; after a protocol
/// violation or timeout the handle refuses further requests, and a fresh
/// server must be spawned.
pub struct ModelServerClient {
    child: Child,
    stdin: Option<ChildStdin>,
    frames: Receiver<Result<Frame, String>>,
    stderr: Arc<Mutex<String>>,
    hello: Hello,
    timeout: Duration,
    broken: bool,
}

impl std::fmt::Debug for ModelServerClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelServerClient")
            .field("pid", &self.child.id())
            .field("hello", &self.hello)
            .field("broken", &self.broken)
            .finish()
    }
}

impl ModelServerClient {
    /// Spawns `command[0]` with the remaining elements as arguments and
    /// performs the handshake.
    pub fn spawn(command: &[String], options: ClientOptions) -> Result<Self, ProviderError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ProviderError::Config("empty model-server command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr_pipe = child.stderr.take().expect("piped stderr");
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut r = BufReader::new(stderr_pipe);
            let mut buf = [0u8; 4096];
            while let Ok(n) = r.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().unwrap();
                if s.len() < STDERR_CAP {
                    s.push_str(&String::from_utf8_lossy(&buf[..n]));
                }
            }
        });
        let (tx, rx) = mpsc::channel();
        let max_frame = options.max_frame;
        thread::spawn(move || {
            let mut r = BufReader::new(stdout);
            loop {
                let msg = protocol::read_frame(&mut r, max_frame).map_err(|e| match e {
                    FrameError::Eof => "eof".to_string(),
                    other => other.to_string(),
                });
                let stop = msg.is_err();
                if tx.send(msg).is_err() || stop {
                    break;
                }
            }
        });
        let stdin = child.stdin.take();
        let mut client = Self {
            child,
            stdin,
            frames: rx,
            stderr,
            hello: Hello {
                version: 0,
                dims: ProviderDims {
                    n_p: 0,
                    d_i: 0,
                    d_c: 0,
                    vocab_size: 0,
                    pooled_dims: 0,
                    normalized: false,
                },
                metadata: serde_json::Value::Null,
            },
            timeout: options.timeout,
            broken: false,
        };
        let payload = client.request(MsgType::Hello, Vec::new())?;
        let hello = Hello::decode(&payload)?;
        if hello.version != PROTOCOL_VERSION {
            return Err(ProviderError::Protocol(format!(
                "server speaks protocol version {}, client {PROTOCOL_VERSION}",
                hello.version
            )));
        }
        if let Some(expected) = &options.expected {
            hello.dims.check_against(expected)?;
        }
        client.hello = hello;
        Ok(client)
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    /// Everything the server wrote to stderr so far (capped).
    pub fn stderr(&self) -> String {
        self.stderr.lock().unwrap().clone()
    }

    fn exited(&mut self) -> ProviderError {
        self.broken = true;
        let deadline = Instant::now() + Duration::from_secs(2);
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(s)) => break s.to_string(),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                Ok(None) => break "still running".to_string(),
                Err(e) => break e.to_string(),
            }
        };
        // Give the stderr thread a moment to drain.
        thread::sleep(Duration::from_millis(20));
        ProviderError::Exited {
            status,
            stderr: self.stderr(),
        }
    }

    fn request(&mut self, kind: MsgType, payload: Vec<u8>) -> Result<Vec<u8>, ProviderError> {
        if self.broken {
            return Err(ProviderError::Protocol("connection unusable after an earlier failure".into()));
        }
        let frame = Frame::new(kind, payload);
        let stdin = self.stdin.as_mut().expect("stdin open while not broken");
        if protocol::write_frame(stdin, &frame).is_err() {
            return Err(self.exited());
        }
        match self.frames.recv_timeout(self.timeout) {
            Ok(Ok(reply)) if reply.kind == MsgType::Error as u8 => {
                Err(ProviderError::Remote(String::from_utf8_lossy(&reply.payload).into_owned()))
            }
            Ok(Ok(reply)) if reply.kind != kind as u8 => {
                self.broken = true;
                Err(ProviderError::Protocol(format!(
                    "expected reply type {}, got {}",
                    kind as u8, reply.kind
                )))
            }
            Ok(Ok(reply)) => Ok(reply.payload),
            Ok(Err(e)) if e == "eof" => Err(self.exited()),
            Ok(Err(e)) => {
                self.broken = true;
                Err(ProviderError::Protocol(e))
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                Err(ProviderError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(self.exited()),
        }
    }
}

impl Drop for ModelServerClient {
    fn drop(&mut self) {
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl SequenceEncoder for ModelServerClient {
    fn d_c(&self) -> usize {
        self.hello.dims.d_c
    }

    fn vocab_size(&self) -> usize {
        self.hello.dims.vocab_size
    }

    fn encode_tokens(&mut self, ids: &[u32]) -> Result<SequenceOutput, ProviderError> {
        let reply = self.request(MsgType::EncodeTokens, protocol::encode_ids(ids))?;
        let (d_c, v) = (self.d_c(), self.vocab_size());
        let mut values = protocol::decode_f32s(&reply, ids.len() * d_c + v)?;
        let logits = values.split_off(ids.len() * d_c);
        Ok(SequenceOutput {
            hidden: Matrix::new(ids.len(), d_c, values).expect("sized by decode"),
            logits,
        })
    }

    fn tokenize(&mut self, text: &str) -> Result<Vec<u32>, ProviderError> {
        protocol::decode_ids(&self.request(MsgType::Tokenize, protocol::encode_text(text))?)
    }

    fn detokenize(&mut self, ids: &[u32]) -> Result<String, ProviderError> {
        let reply = self.request(MsgType::Detokenize, protocol::encode_ids(ids))?;
        String::from_utf8(reply).map_err(|e| ProviderError::Protocol(format!("invalid UTF-8: {e}")))
    }
}

impl VisionEncoder for ModelServerClient {
    fn n_p(&self) -> usize {
        self.hello.dims.n_p
    }

    fn d_i(&self) -> usize {
        self.hello.dims.d_i
    }

    fn pooled_dims(&self) -> usize {
        self.hello.dims.pooled_dims
    }

    fn pool_image(&mut self, patches: &PatchFeatures) -> Result<Vec<f32>, ProviderError> {
        let reply = self.request(MsgType::EncodeImage, protocol::encode_image(patches.matrix().as_slice()))?;
        protocol::decode_f32s(&reply, self.pooled_dims())
    }
}

impl TextEmbedder for ModelServerClient {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let reply = self.request(MsgType::EmbedText, protocol::encode_text(text))?;
        protocol::decode_f32s(&reply, self.pooled_dims())
    }
}

impl ModelProvider for ModelServerClient {
    fn dims(&self) -> ProviderDims {
        self.hello.dims.clone()
    }
}
