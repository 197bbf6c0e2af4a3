//! Client/server annotation protocol.
//!
//! Every message travels as one frame: a 4-byte big-endian body length `N`
//! followed by `N` bytes of canonical JSON (object keys sorted, no
//! insignificant whitespace):
//!
//! ```text
//! {"payload":{...},"round_id":<u64>,"type":"HELLO"|"SUBMIT_BATCH"|"LABELS"|"ACK"|"ERROR"}
//! ```
//!
//! A session opens with `HELLO`, answered by `ACK`. Each `SUBMIT_BATCH`
//! carries a strictly larger round id than anything seen before on the
//! session and is answered by `LABELS` covering exactly its frames, or by
//! `ERROR`.

use std::collections::HashSet;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::model::{FilteredSet, FrameRecord, LabeledFrame, OracleLabels};

/// Largest body the 4-byte length prefix can describe.
pub const MAX_BODY: usize = u32::MAX as usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello {
        round_id: u64,
        client: String,
    },
    SubmitBatch {
        round_id: u64,
        frames: Vec<FrameRecord>,
    },
    Labels {
        round_id: u64,
        labels: Vec<LabeledFrame>,
    },
    Ack {
        round_id: u64,
    },
    Error {
        round_id: u64,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    Hello,
    SubmitBatch,
    Labels,
    Ack,
    Error,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(rename = "type")]
    kind: MessageType,
    round_id: u64,
    payload: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HelloPayload {
    client: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchPayload {
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsPayload {
    labels: Vec<LabeledFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AckPayload {}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorPayload {
    reason: String,
}

impl Message {
    pub fn round_id(&self) -> u64 {
        match self {
            Message::Hello { round_id, .. }
            | Message::SubmitBatch { round_id, .. }
            | Message::Labels { round_id, .. }
            | Message::Ack { round_id }
            | Message::Error { round_id, .. } => *round_id,
        }
    }

    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::SubmitBatch { .. } => MessageType::SubmitBatch,
            Message::Labels { .. } => MessageType::Labels,
            Message::Ack { .. } => MessageType::Ack,
            Message::Error { .. } => MessageType::Error,
        }
    }

    fn to_envelope(&self) -> Result<Envelope> {
        let payload = match self {
            Message::Hello { client, .. } => serde_json::to_value(HelloPayload {
                client: client.clone(),
            })?,
            Message::SubmitBatch { frames, .. } => serde_json::to_value(BatchPayload {
                frames: frames.clone(),
            })?,
            Message::Labels { labels, .. } => serde_json::to_value(LabelsPayload {
                labels: labels.clone(),
            })?,
            Message::Ack { .. } => serde_json::to_value(AckPayload {})?,
            Message::Error { reason, .. } => serde_json::to_value(ErrorPayload {
                reason: reason.clone(),
            })?,
        };
        Ok(Envelope {
            kind: self.message_type(),
            round_id: self.round_id(),
            payload,
        })
    }

    fn from_envelope(env: Envelope) -> Result<Self> {
        let round_id = env.round_id;
        Ok(match env.kind {
            MessageType::Hello => {
                let p: HelloPayload = serde_json::from_value(env.payload)?;
                Message::Hello {
                    round_id,
                    client: p.client,
                }
            }
            MessageType::SubmitBatch => {
                let p: BatchPayload = serde_json::from_value(env.payload)?;
                Message::SubmitBatch {
                    round_id,
                    frames: p.frames,
                }
            }
            MessageType::Labels => {
                let p: LabelsPayload = serde_json::from_value(env.payload)?;
                Message::Labels {
                    round_id,
                    labels: p.labels,
                }
            }
            MessageType::Ack => {
                let _: AckPayload = serde_json::from_value(env.payload)?;
                Message::Ack { round_id }
            }
            MessageType::Error => {
                let p: ErrorPayload = serde_json::from_value(env.payload)?;
                Message::Error {
                    round_id,
                    reason: p.reason,
                }
            }
        })
    }

    /// Canonical JSON body (no length prefix).
    pub fn to_canonical_json(&self) -> Result<Vec<u8>> {
        // serde_json's Value map is ordered by key, which gives sorted keys at
        // every nesting level.
        let value = serde_json::to_value(self.to_envelope()?)?;
        Ok(serde_json::to_vec(&value)?)
    }

    pub fn from_json(body: &[u8]) -> Result<Self> {
        let env: Envelope = serde_json::from_slice(body)
            .map_err(|e| Error::Protocol(format!("bad message body: {e}")))?;
        Message::from_envelope(env).map_err(|e| Error::Protocol(format!("bad payload: {e}")))
    }
}

/// Length-prefixed framing with a configurable body limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codec {
    max_body: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Codec { max_body: MAX_BODY }
    }
}

impl Codec {
    /// A codec refusing bodies larger than `max_body` (capped at [`MAX_BODY`]).
    pub fn with_limit(max_body: usize) -> Self {
        Codec {
            max_body: max_body.min(MAX_BODY),
        }
    }

    pub fn max_body(&self) -> usize {
        self.max_body
    }

    pub fn encode(&self, msg: &Message) -> Result<Vec<u8>> {
        let body = msg.to_canonical_json()?;
        if body.len() > self.max_body {
            return Err(Error::OversizeFrame {
                size: body.len(),
                limit: self.max_body,
            });
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Decodes one frame from the front of `bytes`, returning the message and
    /// the number of bytes consumed.
    pub fn decode(&self, bytes: &[u8]) -> Result<(Message, usize)> {
        if bytes.len() < 4 {
            return Err(Error::IncompleteFrame {
                declared: 4,
                available: bytes.len(),
            });
        }
        let declared = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if declared > self.max_body {
            return Err(Error::OversizeFrame {
                size: declared,
                limit: self.max_body,
            });
        }
        let available = bytes.len() - 4;
        if available < declared {
            return Err(Error::IncompleteFrame {
                declared,
                available,
            });
        }
        let msg = Message::from_json(&bytes[4..4 + declared])?;
        Ok((msg, 4 + declared))
    }

    pub fn write_to<W: Write>(&self, out: &mut W, msg: &Message) -> Result<usize> {
        let frame = self.encode(msg)?;
        out.write_all(&frame)?;
        out.flush()?;
        Ok(frame.len())
    }

    /// Reads one frame. Returns `Ok(None)` on a clean end of stream before
    /// any header byte.
    pub fn read_from<R: Read>(&self, input: &mut R) -> Result<Option<Message>> {
        let mut header = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match input.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => {
                    return Err(Error::IncompleteFrame {
                        declared: 4,
                        available: got,
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let declared = u32::from_be_bytes(header) as usize;
        if declared > self.max_body {
            return Err(Error::OversizeFrame {
                size: declared,
                limit: self.max_body,
            });
        }
        let mut body = Vec::new();
        let read = input.take(declared as u64).read_to_end(&mut body)?;
        if read < declared {
            return Err(Error::IncompleteFrame {
                declared,
                available: read,
            });
        }
        Message::from_json(&body).map(Some)
    }
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    Codec::default().encode(msg)
}

pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize)> {
    Codec::default().decode(bytes)
}

/// Teacher stand-in: labels each submitted frame from the oracle, with an
/// empty list for frames the oracle does not know.
pub fn teacher_annotate(round_id: u64, frames: &[FrameRecord], oracle: &OracleLabels) -> Message {
    let labels = frames
        .iter()
        .map(|f| LabeledFrame {
            frame_id: f.frame_id,
            labels: oracle
                .get(f.frame_id)
                .map(<[_]>::to_vec)
                .unwrap_or_default(),
        })
        .collect();
    Message::Labels { round_id, labels }
}

/// Server-side state of one client session.
#[derive(Debug)]
pub struct ServerSession {
    oracle: Arc<OracleLabels>,
    last_round: Option<u64>,
}

impl ServerSession {
    pub fn new(oracle: Arc<OracleLabels>) -> Self {
        ServerSession {
            oracle,
            last_round: None,
        }
    }

    pub fn handle(&mut self, msg: Message) -> Message {
        let round_id = msg.round_id();
        let error = |reason: String| Message::Error { round_id, reason };
        match msg {
            Message::Hello { client, .. } => {
                if self.last_round.is_some() {
                    return error("session already open".into());
                }
                debug!(%client, round_id, "session opened");
                self.last_round = Some(round_id);
                Message::Ack { round_id }
            }
            Message::SubmitBatch { frames, .. } => {
                let Some(last) = self.last_round else {
                    return error("SUBMIT_BATCH before HELLO".into());
                };
                if round_id <= last {
                    return error(format!(
                        "round_id {round_id} does not exceed previous round_id {last}"
                    ));
                }
                let mut ids = HashSet::with_capacity(frames.len());
                if let Some(dup) = frames.iter().find(|f| !ids.insert(f.frame_id)) {
                    return error(format!("duplicate frame_id {} in batch", dup.frame_id));
                }
                self.last_round = Some(round_id);
                teacher_annotate(round_id, &frames, &self.oracle)
            }
            other => error(format!(
                "unexpected {:?} message from client",
                other.message_type()
            )),
        }
    }
}

/// A request/response channel to the annotation server.
pub trait Transport {
    fn request(&mut self, msg: &Message) -> Result<Message>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        (**self).request(msg)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        (**self).request(msg)
    }
}

/// In-process server. Messages still pass through the wire encoding in both
/// directions.
#[derive(Debug)]
pub struct Loopback {
    session: ServerSession,
    codec: Codec,
}

impl Loopback {
    pub fn new(oracle: Arc<OracleLabels>) -> Self {
        Loopback {
            session: ServerSession::new(oracle),
            codec: Codec::default(),
        }
    }
}

impl Transport for Loopback {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        let up = self.codec.encode(msg)?;
        let (received, _) = self.codec.decode(&up)?;
        let reply = self.session.handle(received);
        let down = self.codec.encode(&reply)?;
        Ok(self.codec.decode(&down)?.0)
    }
}

pub struct TcpTransport {
    stream: TcpStream,
    codec: Codec,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            stream,
            codec: Codec::default(),
        })
    }
}

impl Transport for TcpTransport {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        self.codec
            .write_to(&mut self.stream, msg)
            .map_err(|e| Error::Transport(e.to_string()))?;
        match self.codec.read_from(&mut self.stream) {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => Err(Error::Transport("server closed the connection".into())),
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }
}

/// Runs one session over a byte stream until the peer closes it.
pub fn serve_connection<S: Read + Write>(stream: &mut S, oracle: Arc<OracleLabels>) -> Result<()> {
    let codec = Codec::default();
    let mut session = ServerSession::new(oracle);
    loop {
        let msg = match codec.read_from(stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) => {
                let reply = Message::Error {
                    round_id: 0,
                    reason: e.to_string(),
                };
                let _ = codec.write_to(stream, &reply);
                return Err(e);
            }
        };
        let reply = session.handle(msg);
        codec.write_to(stream, &reply)?;
    }
}

/// Accepts connections forever, one thread per session.
pub fn serve(listener: TcpListener, oracle: Arc<OracleLabels>) -> Result<()> {
    for conn in listener.incoming() {
        let mut stream = conn?;
        let oracle = Arc::clone(&oracle);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = serve_connection(&mut stream, oracle) {
                warn!(?peer, error = %e, "session ended with error");
            }
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round_id: u64,
    pub frames_sent: u64,
    /// Sum of the declared image sizes of the transmitted frames.
    pub bytes_sent: u64,
    pub frames_labeled: u64,
    /// Encoded size of the SUBMIT_BATCH frame.
    pub wire_bytes: u64,
}

/// Completed rounds only; a failed round leaves no trace.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionLedger {
    rounds: Vec<LedgerEntry>,
}

impl TransmissionLedger {
    pub fn rounds(&self) -> &[LedgerEntry] {
        &self.rounds
    }

    pub fn total_frames(&self) -> u64 {
        self.rounds.iter().map(|r| r.frames_sent).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.rounds.iter().map(|r| r.bytes_sent).sum()
    }

    fn commit(&mut self, entry: LedgerEntry) {
        self.rounds.push(entry);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLabels {
    pub round_id: u64,
    pub labeled: Vec<LabeledFrame>,
    pub entry: LedgerEntry,
}

/// Edge-side end of a session.
pub struct Client<T: Transport> {
    transport: T,
    last_round: u64,
    ledger: TransmissionLedger,
}

impl<T: Transport> Client<T> {
    /// Opens the session with HELLO (round 0).
    pub fn connect(mut transport: T, name: &str) -> Result<Self> {
        let hello = Message::Hello {
            round_id: 0,
            client: name.to_string(),
        };
        match transport.request(&hello)? {
            Message::Ack { round_id: 0 } => Ok(Client {
                transport,
                last_round: 0,
                ledger: TransmissionLedger::default(),
            }),
            Message::Error { reason, .. } => Err(Error::Server(reason)),
            other => Err(Error::Protocol(format!(
                "expected ACK to HELLO, got {:?}",
                other.message_type()
            ))),
        }
    }

    pub fn ledger(&self) -> &TransmissionLedger {
        &self.ledger
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Sends `filtered` as the next round and waits for its labels. The
    /// ledger is updated only when the round completes.
    pub fn submit_round(&mut self, filtered: &FilteredSet) -> Result<RoundLabels> {
        self.last_round += 1;
        let round_id = self.last_round;
        let msg = Message::SubmitBatch {
            round_id,
            frames: filtered.items().to_vec(),
        };
        let wire_bytes = Codec::default().encode(&msg)?.len() as u64;
        let reply = self.transport.request(&msg)?;
        let labeled = match reply {
            Message::Labels {
                round_id: r,
                labels,
            } if r == round_id => labels,
            Message::Labels { round_id: r, .. } => {
                return Err(Error::Protocol(format!(
                    "LABELS for round {r} in reply to round {round_id}"
                )))
            }
            Message::Error { reason, .. } => return Err(Error::Server(reason)),
            other => {
                return Err(Error::Protocol(format!(
                    "expected LABELS, got {:?}",
                    other.message_type()
                )))
            }
        };
        let sent: Vec<u64> = filtered.frame_ids();
        let mut got: Vec<u64> = labeled.iter().map(|l| l.frame_id).collect();
        let mut want = sent.clone();
        got.sort_unstable();
        want.sort_unstable();
        if got != want {
            return Err(Error::Protocol(format!(
                "LABELS cover frames {got:?}, submitted {want:?}"
            )));
        }
        let entry = LedgerEntry {
            round_id,
            frames_sent: sent.len() as u64,
            bytes_sent: filtered.items().iter().map(|f| f.image_bytes).sum(),
            frames_labeled: labeled.len() as u64,
            wire_bytes,
        };
        self.ledger.commit(entry);
        Ok(RoundLabels {
            round_id,
            labeled,
            entry,
        })
    }
}
