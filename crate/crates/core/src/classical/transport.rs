//! Authenticated message link over any reliable ordered byte stream.

use std::io::{self, BufReader, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use thiserror::Error;

use super::frame::{decode_frame, encode_frame, parse_header, Frame, FrameError, FrameKey, HEADER_LEN, TAG_LEN};
use super::messages::{Message, MessageError, Sender};
use super::reservoir::{KeyReservoir, ReservoirEmpty};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Reservoir(#[from] ReservoirEmpty),
    #[error("peer aborted with code {code}: {reason}")]
    PeerAbort { code: u8, reason: String },
    #[error("unexpected {0}")]
    Unexpected(String),
}

/// Key material of one direction: reusable hash key plus its pad pool.
#[derive(Debug, Clone)]
pub struct DirectionKeys {
    pub hash_key: u128,
    pub reservoir: KeyReservoir,
}

impl DirectionKeys {
    /// Takes the hash key from the front of the reservoir.
    pub fn from_reservoir(mut reservoir: KeyReservoir) -> Result<Self, ReservoirEmpty> {
        let hash_key = u128::from_le_bytes(reservoir.draw_array::<16>()?);
        Ok(Self { hash_key, reservoir })
    }
}

/// Byte and frame counters of a link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// One node's end of the classical channel.
pub struct Link<S: Read + Write> {
    reader: BufReader<ReadHalf<S>>,
    me: Sender,
    session: u64,
    out: DirectionKeys,
    inc: DirectionKeys,
    next_out: u64,
    last_in: Option<u64>,
    stats: LinkStats,
    /// Flip one bit of the outgoing frame with this sequence (fault tests).
    corrupt_seq: Option<u64>,
}

/// Shares one stream between the buffered reader and direct writes.
struct ReadHalf<S>(std::rc::Rc<std::cell::RefCell<S>>);

impl<S: Read> Read for ReadHalf<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.0.borrow_mut().read(buf)
    }
}

impl<S: Read + Write> Link<S> {
    pub fn new(stream: S, me: Sender, session: u64, out: DirectionKeys, inc: DirectionKeys) -> Self {
        let shared = std::rc::Rc::new(std::cell::RefCell::new(stream));
        Self {
            reader: BufReader::with_capacity(1 << 16, ReadHalf(shared)),
            me,
            session,
            out,
            inc,
            next_out: 1,
            last_in: None,
            stats: LinkStats::default(),
            corrupt_seq: None,
        }
    }

    pub fn set_corrupt_frame(&mut self, seq: Option<u64>) {
        self.corrupt_seq = seq;
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn outgoing(&self) -> &DirectionKeys {
        &self.out
    }

    pub fn incoming(&self) -> &DirectionKeys {
        &self.inc
    }

    pub fn outgoing_mut(&mut self) -> &mut DirectionKeys {
        &mut self.out
    }

    pub fn incoming_mut(&mut self) -> &mut DirectionKeys {
        &mut self.inc
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), LinkError> {
        let pad = self.out.reservoir.draw_array::<16>()?;
        let frame = Frame {
            msg_type: msg.msg_type() as u8,
            session: self.session,
            sequence: self.next_out,
            payload: msg.encode(),
        };
        let mut bytes = encode_frame(
            &frame,
            FrameKey {
                hash_key: self.out.hash_key,
                pad: &pad,
            },
        )?;
        if self.corrupt_seq == Some(self.next_out) {
            let i = (HEADER_LEN + frame.payload.len() / 2).min(bytes.len() - 1);
            bytes[i] ^= 0x01;
        }
        self.next_out += 1;
        let stream = &self.reader.get_ref().0;
        let mut s = stream.borrow_mut();
        s.write_all(&bytes)?;
        s.flush()?;
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    /// Receives one message. A peer abort with a nonzero code is returned
    /// as [`LinkError::PeerAbort`].
    pub fn recv(&mut self) -> Result<Message, LinkError> {
        let mut head = [0u8; HEADER_LEN];
        self.reader.read_exact(&mut head)?;
        let h = parse_header(&head)?;
        let mut bytes = head.to_vec();
        bytes.resize(HEADER_LEN + h.length + TAG_LEN, 0);
        self.reader.read_exact(&mut bytes[HEADER_LEN..])?;
        let pad = self.inc.reservoir.draw_array::<16>()?;
        let frame = decode_frame(
            &bytes,
            FrameKey {
                hash_key: self.inc.hash_key,
                pad: &pad,
            },
            self.last_in.or(Some(0)),
        )?;
        if frame.session != self.session {
            return Err(FrameError::WrongSession {
                got: frame.session,
                expected: self.session,
            }
            .into());
        }
        self.last_in = Some(frame.sequence);
        self.stats.frames_received += 1;
        self.stats.bytes_received += bytes.len() as u64;
        let peer = match self.me {
            Sender::Alice => Sender::Bob,
            Sender::Bob => Sender::Alice,
        };
        match Message::decode(frame.msg_type, &frame.payload, peer)? {
            Message::Abort { code, reason } if code != 0 => Err(LinkError::PeerAbort { code, reason }),
            m => Ok(m),
        }
    }
}

/// One end of an in-memory duplex byte stream with bounded buffering.
pub struct MemoryStream {
    tx: SyncSender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

/// Two connected in-memory streams; each direction holds at most
/// `capacity` unread writes before the writer blocks.
pub fn memory_pair(capacity: usize) -> (MemoryStream, MemoryStream) {
    let (tx_a, rx_b) = sync_channel(capacity);
    let (tx_b, rx_a) = sync_channel(capacity);
    (
        MemoryStream {
            tx: tx_a,
            rx: rx_a,
            buf: Vec::new(),
            pos: 0,
        },
        MemoryStream {
            tx: tx_b,
            rx: rx_b,
            buf: Vec::new(),
            pos: 0,
        },
    )
}

impl Read for MemoryStream {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.pos == self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for MemoryStream {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.tx
            .send(data.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// TCP stream with Nagle disabled, since the protocol is request/response.
pub fn tcp_stream(stream: TcpStream) -> io::Result<TcpStream> {
    stream.set_nodelay(true)?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::messages::SyncAnnounce;

    fn keys(seed: u8) -> DirectionKeys {
        let bytes: Vec<u8> = (0..1024u32).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        DirectionKeys::from_reservoir(KeyReservoir::new(bytes, 0)).unwrap()
    }

    fn pair() -> (Link<MemoryStream>, Link<MemoryStream>) {
        let (a, b) = memory_pair(16);
        (
            Link::new(a, Sender::Alice, 9, keys(1), keys(2)),
            Link::new(b, Sender::Bob, 9, keys(2), keys(1)),
        )
    }

    fn hello(i: u64) -> Message {
        Message::SyncSeed(SyncAnnounce {
            sync_seed: i,
            marker_seed: 0,
            sync_len: 0,
            config_digest: 0,
        })
    }

    #[test]
    fn messages_flow_both_ways() {
        let (mut a, mut b) = pair();
        for i in 0..20 {
            a.send(&hello(i)).unwrap();
            b.send(&hello(100 + i)).unwrap();
            assert_eq!(b.recv().unwrap(), hello(i));
            assert_eq!(a.recv().unwrap(), hello(100 + i));
        }
        assert_eq!(a.outgoing().reservoir.consumed(), 16 + 20 * 16);
    }

    #[test]
    fn corrupted_frame_is_tag_mismatch() {
        let (mut a, mut b) = pair();
        a.set_corrupt_frame(Some(2));
        a.send(&hello(1)).unwrap();
        a.send(&hello(2)).unwrap();
        b.recv().unwrap();
        assert!(matches!(b.recv(), Err(LinkError::Frame(FrameError::TagMismatch(2)))));
    }

    #[test]
    fn exhausted_reservoir_halts() {
        let (s, _t) = memory_pair(4);
        let out = DirectionKeys::from_reservoir(KeyReservoir::new(vec![0; 40], 0)).unwrap();
        let mut a = Link::new(s, Sender::Alice, 1, out, keys(0));
        a.send(&hello(0)).unwrap();
        assert!(matches!(a.send(&hello(1)), Err(LinkError::Reservoir(_))));
    }

    #[test]
    fn peer_abort_surfaces() {
        let (mut a, mut b) = pair();
        a.send(&Message::Abort {
            code: 4,
            reason: "desync".into(),
        })
        .unwrap();
        assert!(matches!(b.recv(), Err(LinkError::PeerAbort { code: 4, .. })));
    }

    #[test]
    fn works_over_tcp() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut b = Link::new(tcp_stream(s).unwrap(), Sender::Bob, 9, keys(2), keys(1));
            let m = b.recv().unwrap();
            b.send(&m).unwrap();
        });
        let s = tcp_stream(TcpStream::connect(addr).unwrap()).unwrap();
        let mut a = Link::new(s, Sender::Alice, 9, keys(1), keys(2));
        a.send(&hello(5)).unwrap();
        assert_eq!(a.recv().unwrap(), hello(5));
        h.join().unwrap();
    }
}
