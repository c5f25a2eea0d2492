//! Rank fabric: allgather/broadcast, asynchronous all-to-all embedding
//! exchange with completion handles, and gradient all-reduce.
//!
//! Two transports share the same SPMD contract (collectives called by all
//! ranks in the same order, per-pair FIFO delivery): an in-process transport
//! over bounded-order channels for single-machine runs, and a length-prefixed
//! TCP transport for one-process-per-rank runs. Wire frames carry a
//! little-endian u32 round id (high bit marks synchronous collectives), u32
//! sender rank, u64 tag count, then the payload.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;
use std::time::{Duration, Instant};

const COLLECTIVE_BIT: u32 = 0x8000_0000;

/// One width-uniform group of cache lines in a push payload (one per GNN
/// layer in the trainer).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub tags: Vec<u64>,
    pub width: usize,
    pub rows: Vec<f64>,
}

impl Section {
    pub fn new(tags: Vec<u64>, width: usize, rows: Vec<f64>) -> Section {
        debug_assert_eq!(tags.len() * width, rows.len());
        Section { tags, width, rows }
    }

    pub fn data_bytes(&self) -> u64 {
        (self.tags.len() * 8 + self.rows.len() * 8) as u64
    }
}

/// Payload delivered to one peer in one all-to-all round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankPayload {
    /// Producer-stamped metadata (the trainer packs epoch and iteration here
    /// for staleness assertions).
    pub meta: u64,
    pub sections: Vec<Section>,
}

impl RankPayload {
    pub fn data_bytes(&self) -> u64 {
        self.sections.iter().map(|s| s.data_bytes()).sum()
    }
}

#[derive(Debug)]
enum Frame {
    Collective { round: u32, bytes: Vec<u8> },
    AllToAll { round: u32, payload: RankPayload },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Collective = 0,
    AllToAll = 1,
}

trait Transport: Send {
    fn send(&mut self, to: u32, frame: Frame) -> Result<()>;
    fn recv(&mut self, from: u32, class: Class, timeout: Duration) -> Result<Frame>;
}

/// Pending all-to-all round. Waiting consumes the handle, so a double wait
/// is unrepresentable.
#[derive(Debug)]
pub struct CommHandle {
    round: u32,
}

impl CommHandle {
    pub fn round(&self) -> u32 {
        self.round
    }
}

/// Per-rank communication object.
pub struct Fabric {
    rank: u32,
    world: u32,
    transport: Box<dyn Transport>,
    collective_round: u32,
    send_round: u32,
    recv_round: u32,
    timeout: Duration,
    sent_data_bytes: u64,
}

impl Fabric {
    fn new(rank: u32, world: u32, transport: Box<dyn Transport>) -> Fabric {
        Fabric {
            rank,
            world,
            transport,
            collective_round: 0,
            send_round: 0,
            recv_round: 0,
            timeout: Duration::from_secs(60),
            sent_data_bytes: 0,
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn world(&self) -> u32 {
        self.world
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// All-to-all payload bytes sent so far (tags + rows only).
    pub fn sent_data_bytes(&self) -> u64 {
        self.sent_data_bytes
    }

    fn next_collective_round(&mut self) -> u32 {
        let r = self.collective_round | COLLECTIVE_BIT;
        self.collective_round += 1;
        r
    }

    fn recv_collective(&mut self, from: u32, round: u32) -> Result<Vec<u8>> {
        match self.transport.recv(from, Class::Collective, self.timeout)? {
            Frame::Collective { round: r, bytes } if r == round => Ok(bytes),
            Frame::Collective { round: r, .. } => Err(Error::protocol(format!(
                "rank {}: collective round mismatch from {from}: got {r:#x}, want {round:#x}",
                self.rank
            ))),
            _ => Err(Error::protocol("unexpected frame class")),
        }
    }

    /// Every rank contributes a byte payload and receives everyone's,
    /// indexed by rank.
    pub fn allgather_bytes(&mut self, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let round = self.next_collective_round();
        for peer in 0..self.world {
            if peer != self.rank {
                self.transport.send(
                    peer,
                    Frame::Collective {
                        round,
                        bytes: payload.to_vec(),
                    },
                )?;
            }
        }
        let mut out = Vec::with_capacity(self.world as usize);
        for peer in 0..self.world {
            if peer == self.rank {
                out.push(payload.to_vec());
            } else {
                out.push(self.recv_collective(peer, round)?);
            }
        }
        Ok(out)
    }

    /// The Alg. 1 broadcast: every rank publishes its halo VID_o list and
    /// collects all ranks' lists.
    pub fn bcast_halo_lists(&mut self, halo: &[u32]) -> Result<Vec<Vec<u32>>> {
        let mut bytes = Vec::with_capacity(halo.len() * 4);
        for &v in halo {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let gathered = self.allgather_bytes(&bytes)?;
        gathered
            .into_iter()
            .map(|b| {
                if b.len() % 4 != 0 {
                    return Err(Error::protocol("halo list payload not u32-aligned"));
                }
                Ok(b.chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect())
            })
            .collect()
    }

    /// Elementwise sum across ranks, reduced on rank 0 in ascending rank
    /// order and broadcast back, so every rank receives byte-identical data.
    pub fn allreduce_sum(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let round = self.next_collective_round();
        if self.world == 1 {
            return Ok(x.to_vec());
        }
        let mut bytes = Vec::with_capacity(x.len() * 8);
        for &v in x {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if self.rank == 0 {
            let mut acc = x.to_vec();
            for peer in 1..self.world {
                let b = self.recv_collective(peer, round)?;
                if b.len() != x.len() * 8 {
                    return Err(Error::protocol(format!(
                        "allreduce length mismatch: rank {peer} sent {} bytes, want {}",
                        b.len(),
                        x.len() * 8
                    )));
                }
                for (i, c) in b.chunks_exact(8).enumerate() {
                    acc[i] += f64::from_le_bytes(c.try_into().unwrap());
                }
            }
            let mut out_bytes = Vec::with_capacity(acc.len() * 8);
            for &v in &acc {
                out_bytes.extend_from_slice(&v.to_le_bytes());
            }
            for peer in 1..self.world {
                self.transport.send(
                    peer,
                    Frame::Collective {
                        round,
                        bytes: out_bytes.clone(),
                    },
                )?;
            }
            Ok(acc)
        } else {
            self.transport.send(0, Frame::Collective { round, bytes })?;
            let b = self.recv_collective(0, round)?;
            if b.len() != x.len() * 8 {
                return Err(Error::protocol("allreduce result length mismatch"));
            }
            Ok(b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }

    /// Posts one payload per peer and returns immediately. `payloads` is
    /// indexed by rank; the local entry is ignored.
    pub fn alltoall_async(&mut self, payloads: Vec<RankPayload>) -> Result<CommHandle> {
        if payloads.len() != self.world as usize {
            return Err(Error::protocol(format!(
                "alltoall payload count {} != world {}",
                payloads.len(),
                self.world
            )));
        }
        let round = self.send_round;
        self.send_round += 1;
        for (peer, payload) in payloads.into_iter().enumerate() {
            let peer = peer as u32;
            if peer == self.rank {
                continue;
            }
            self.sent_data_bytes += payload.data_bytes();
            self.transport
                .send(peer, Frame::AllToAll { round, payload })?;
        }
        Ok(CommHandle { round })
    }

    /// Blocks until the handle's round has arrived from every peer; returns
    /// (sender, payload) ordered by sender rank. Handles must be waited in
    /// issue order.
    pub fn comm_wait(&mut self, handle: CommHandle) -> Result<Vec<(u32, RankPayload)>> {
        if handle.round != self.recv_round {
            return Err(Error::protocol(format!(
                "comm_wait out of order: handle round {}, expected {}",
                handle.round, self.recv_round
            )));
        }
        self.recv_round += 1;
        let mut out = Vec::with_capacity(self.world as usize - 1);
        for peer in 0..self.world {
            if peer == self.rank {
                continue;
            }
            match self.transport.recv(peer, Class::AllToAll, self.timeout)? {
                Frame::AllToAll { round, payload } if round == handle.round => {
                    out.push((peer, payload));
                }
                Frame::AllToAll { round, .. } => {
                    return Err(Error::protocol(format!(
                        "all-to-all round mismatch from {peer}: got {round}, want {}",
                        handle.round
                    )));
                }
                _ => return Err(Error::protocol("unexpected frame class")),
            }
        }
        Ok(out)
    }
}

/// Concatenates single-section payloads over peers (sender order) into one
/// tag list and row tensor — the plain (tags, rows) view of a wait result.
pub fn flatten_single_section(result: &[(u32, RankPayload)], width: usize) -> (Vec<u64>, Tensor) {
    let mut tags = Vec::new();
    let mut rows = Vec::new();
    for (_, payload) in result {
        for s in &payload.sections {
            debug_assert!(s.tags.is_empty() || s.width == width);
            tags.extend_from_slice(&s.tags);
            rows.extend_from_slice(&s.rows);
        }
    }
    let t = Tensor::from_vec(&[tags.len(), width], rows).expect("section widths agree");
    (tags, t)
}

// ---------------------------------------------------------------------------
// In-process transport
// ---------------------------------------------------------------------------

struct InprocTransport {
    rank: u32,
    senders: Vec<Vec<Sender<Frame>>>,
    receivers: Vec<Vec<Receiver<Frame>>>,
}

impl Transport for InprocTransport {
    fn send(&mut self, to: u32, frame: Frame) -> Result<()> {
        let class = match frame {
            Frame::Collective { .. } => Class::Collective,
            Frame::AllToAll { .. } => Class::AllToAll,
        };
        self.senders[to as usize][class as usize]
            .send(frame)
            .map_err(|_| Error::protocol(format!("rank {to} hung up (from {})", self.rank)))
    }

    fn recv(&mut self, from: u32, class: Class, timeout: Duration) -> Result<Frame> {
        self.receivers[from as usize][class as usize]
            .recv_timeout(timeout)
            .map_err(|_| Error::PeerTimeout { peer: from })
    }
}

/// Builds an R-rank in-process world; element r is rank r's fabric. Message
/// delivery is per-pair FIFO over unbounded channels, so sends never block.
pub fn inproc_world(world: u32) -> Vec<Fabric> {
    let n = world as usize;
    // tx[dst][src][class] feeds rx[dst][src][class].
    let mut tx: Vec<Vec<Vec<Sender<Frame>>>> = Vec::with_capacity(n);
    let mut rx: Vec<Vec<Vec<Receiver<Frame>>>> = Vec::with_capacity(n);
    for _dst in 0..n {
        let mut tx_row = Vec::with_capacity(n);
        let mut rx_row = Vec::with_capacity(n);
        for _src in 0..n {
            let (t0, r0) = channel();
            let (t1, r1) = channel();
            tx_row.push(vec![t0, t1]);
            rx_row.push(vec![r0, r1]);
        }
        tx.push(tx_row);
        rx.push(rx_row);
    }
    let mut fabrics = Vec::with_capacity(n);
    for (rank, receivers) in rx.into_iter().enumerate() {
        let senders: Vec<Vec<Sender<Frame>>> = (0..n)
            .map(|dst| {
                tx[dst][rank]
                    .iter()
                    .map(|s| s.clone())
                    .collect()
            })
            .collect();
        fabrics.push(Fabric::new(
            rank as u32,
            world,
            Box::new(InprocTransport {
                rank: rank as u32,
                senders,
                receivers,
            }),
        ));
    }
    fabrics
}

// ---------------------------------------------------------------------------
// Socket transport
// ---------------------------------------------------------------------------

fn write_frame(stream: &mut TcpStream, sender: u32, frame: &Frame) -> Result<()> {
    let mut body = Vec::new();
    let round = match frame {
        Frame::Collective { round, bytes } => {
            body.extend_from_slice(&0u64.to_le_bytes()); // tag count
            body.extend_from_slice(bytes);
            *round
        }
        Frame::AllToAll { round, payload } => {
            let total_tags: u64 = payload.sections.iter().map(|s| s.tags.len() as u64).sum();
            body.extend_from_slice(&total_tags.to_le_bytes());
            body.extend_from_slice(&payload.meta.to_le_bytes());
            body.extend_from_slice(&(payload.sections.len() as u32).to_le_bytes());
            for s in &payload.sections {
                body.extend_from_slice(&(s.tags.len() as u64).to_le_bytes());
                body.extend_from_slice(&(s.width as u64).to_le_bytes());
                for &t in &s.tags {
                    body.extend_from_slice(&t.to_le_bytes());
                }
                for &v in &s.rows {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
            *round
        }
    };
    let len = (8 + body.len()) as u64; // round + sender + body
    stream.write_all(&len.to_le_bytes())?;
    stream.write_all(&round.to_le_bytes())?;
    stream.write_all(&sender.to_le_bytes())?;
    stream.write_all(&body)?;
    stream.flush()?;
    Ok(())
}

fn read_exact_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_frame(stream: &mut TcpStream) -> Result<(u32, Frame)> {
    let len = read_exact_u64(stream)? as usize;
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    if len < 16 {
        return Err(Error::protocol("short frame"));
    }
    let round = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    let sender = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let _tag_count = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let body = &buf[16..];
    if round & COLLECTIVE_BIT != 0 {
        return Ok((
            sender,
            Frame::Collective {
                round,
                bytes: body.to_vec(),
            },
        ));
    }
    if body.len() < 12 {
        return Err(Error::protocol("short all-to-all frame"));
    }
    let meta = u64::from_le_bytes(body[0..8].try_into().unwrap());
    let n_sections = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let n_tags = u64::from_le_bytes(body[off..off + 8].try_into().unwrap()) as usize;
        let width = u64::from_le_bytes(body[off + 8..off + 16].try_into().unwrap()) as usize;
        off += 16;
        let mut tags = Vec::with_capacity(n_tags);
        for _ in 0..n_tags {
            tags.push(u64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        let mut rows = Vec::with_capacity(n_tags * width);
        for _ in 0..n_tags * width {
            rows.push(f64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        sections.push(Section { tags, width, rows });
    }
    Ok((sender, Frame::AllToAll { round, payload: RankPayload { meta, sections } }))
}

struct SocketTransport {
    writers: Vec<Option<Mutex<TcpStream>>>,
    queues: Vec<Vec<Option<Receiver<Frame>>>>,
    /// Local buffer for frames that arrive while a different class is being
    /// awaited (never needed with per-class queues, kept for self sends).
    _pending: VecDeque<Frame>,
}

impl Transport for SocketTransport {
    fn send(&mut self, to: u32, frame: Frame) -> Result<()> {
        let stream = self.writers[to as usize]
            .as_ref()
            .ok_or_else(|| Error::protocol(format!("no connection to rank {to}")))?;
        let mut guard = stream.lock().expect("writer poisoned");
        // Sender id is filled by the reader side from the handshake; pass 0.
        write_frame(&mut guard, u32::MAX, &frame)
    }

    fn recv(&mut self, from: u32, class: Class, timeout: Duration) -> Result<Frame> {
        let q = self.queues[from as usize][class as usize]
            .as_ref()
            .ok_or_else(|| Error::protocol(format!("no connection to rank {from}")))?;
        q.recv_timeout(timeout)
            .map_err(|_| Error::PeerTimeout { peer: from })
    }
}

/// Connects a full mesh over TCP: rank r accepts connections from higher
/// ranks on `listener` and dials every lower rank at `addrs[j]` (with
/// retry, since peers may still be starting). Returns rank r's fabric.
pub fn socket_world(
    rank: u32,
    world: u32,
    listener: TcpListener,
    addrs: &[SocketAddr],
    timeout: Duration,
) -> Result<Fabric> {
    assert_eq!(addrs.len(), world as usize);
    let mut writers: Vec<Option<Mutex<TcpStream>>> = (0..world).map(|_| None).collect();
    let mut queues: Vec<Vec<Option<Receiver<Frame>>>> =
        (0..world).map(|_| vec![None, None]).collect();

    let expect_accepts = (world - 1 - rank) as usize;
    let acceptor = std::thread::spawn(move || -> Result<Vec<(u32, TcpStream)>> {
        let mut got = Vec::with_capacity(expect_accepts);
        for _ in 0..expect_accepts {
            let (mut stream, _) = listener.accept()?;
            let mut b = [0u8; 4];
            stream.read_exact(&mut b)?;
            got.push((u32::from_le_bytes(b), stream));
        }
        Ok(got)
    });

    let mut streams: Vec<(u32, TcpStream)> = Vec::new();
    for peer in 0..rank {
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match TcpStream::connect(addrs[peer as usize]) {
                Ok(s) => break s,
                Err(e) => {
                    if Instant::now() >= deadline {
                        return Err(Error::protocol(format!(
                            "rank {rank}: cannot reach rank {peer} at {}: {e}",
                            addrs[peer as usize]
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
            }
        };
        let mut s = stream;
        s.write_all(&rank.to_le_bytes())?;
        streams.push((peer, s));
    }
    let accepted = acceptor
        .join()
        .map_err(|_| Error::protocol("acceptor thread panicked"))??;
    streams.extend(accepted);

    for (peer, stream) in streams {
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone()?;
        writers[peer as usize] = Some(Mutex::new(stream));
        let (tx_c, rx_c) = channel();
        let (tx_a, rx_a) = channel();
        queues[peer as usize][Class::Collective as usize] = Some(rx_c);
        queues[peer as usize][Class::AllToAll as usize] = Some(rx_a);
        std::thread::spawn(move || {
            let mut reader = reader;
            loop {
                match read_frame(&mut reader) {
                    Ok((_, frame @ Frame::Collective { .. })) => {
                        if tx_c.send(frame).is_err() {
                            break;
                        }
                    }
                    Ok((_, frame @ Frame::AllToAll { .. })) => {
                        if tx_a.send(frame).is_err() {
                            break;
                        }
                    }
                    Err(_) => break, // peer closed
                }
            }
        });
    }

    let mut fabric = Fabric::new(
        rank,
        world,
        Box::new(SocketTransport {
            writers,
            queues,
            _pending: VecDeque::new(),
        }),
    );
    fabric.set_timeout(timeout);
    Ok(fabric)
}
