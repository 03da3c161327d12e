//! Versioned little-endian binary layout for messages and checkpoints.
//!
//! Every file starts with the 4-byte magic `PCDR`, a `u16` format version and
//! a `u8` kind tag. Scalars are little-endian; `usize` values are written as
//! `u64`; float vectors are a `u64` length followed by `f64` values; strings
//! are a `u32` byte length followed by UTF-8; id sets are a `u32` count of
//! strings in ascending order; matrices are `rows: u64, cols: u64` then the
//! row-major values.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::graph::EmbeddingState;
use crate::linalg::Matrix;
use crate::losses::MlpParams;
use crate::nn::{Dense, Mlp, MlpAdam};
use crate::optim::AdamState;
use crate::server::{ClientUpload, ClusterPrototypes, DomainPrototypes, LocalPrototype};
use crate::trainer::{ClientAdam, ClientState, ClusterMemory, EarlyStopState, Hyperparams};

pub const MAGIC: [u8; 4] = *b"PCDR";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Upload = 1,
    Download = 2,
    Checkpoint = 3,
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("expected kind {expected}, found {found}")]
    WrongKind { expected: u8, found: u8 },
    #[error("unexpected end of input")]
    Truncated,
    #[error("invalid UTF-8 in string field")]
    InvalidUtf8,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: Kind) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&MAGIC);
        w.buf.extend_from_slice(&VERSION.to_le_bytes());
        w.u8(kind as u8);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn ids(&mut self, set: &BTreeSet<String>) {
        self.u32(set.len() as u32);
        for s in set {
            self.str(s);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &x in m.as_slice() {
            self.f64(x);
        }
    }

    fn adam(&mut self, s: &AdamState) {
        self.f64s(&s.m);
        self.f64s(&s.v);
        self.u64(s.step);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], kind: Kind) -> Result<Self, WireError> {
        let mut r = Self { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(WireError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let found = r.u8()?;
        if found != kind as u8 {
            return Err(WireError::WrongKind {
                expected: kind as u8,
                found,
            });
        }
        Ok(r)
    }

    fn finish(self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(WireError::Invalid(format!("bool tag {t}"))),
        }
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, WireError> {
        usize::try_from(self.u64()?).map_err(|_| WireError::Invalid("length overflow".into()))
    }

    /// A length that must fit in the remaining input at `unit` bytes per element.
    fn len(&mut self, unit: usize) -> Result<usize, WireError> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::InvalidUtf8)
    }

    fn ids(&mut self) -> Result<BTreeSet<String>, WireError> {
        let n = self.u32()? as usize;
        let mut out = BTreeSet::new();
        for _ in 0..n {
            if !out.insert(self.str()?) {
                return Err(WireError::Invalid("duplicate id".into()));
            }
        }
        Ok(out)
    }

    fn matrix(&mut self) -> Result<Matrix, WireError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or(WireError::Truncated)?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Matrix::from_vec(rows, cols, data).ok_or_else(|| WireError::Invalid("matrix shape".into()))
    }

    fn adam(&mut self) -> Result<AdamState, WireError> {
        Ok(AdamState {
            m: self.f64s()?,
            v: self.f64s()?,
            step: self.u64()?,
        })
    }
}

pub fn encode_upload(up: &ClientUpload) -> Vec<u8> {
    let mut w = Writer::header(Kind::Upload);
    w.usize(up.domain_id);
    w.usize(up.diff_protos.len());
    for (p, s) in up.diff_protos.iter().zip(&up.overlap_sets) {
        w.f64s(p);
        w.ids(s);
    }
    w.buf
}

pub fn decode_upload(buf: &[u8]) -> Result<ClientUpload, WireError> {
    let mut r = Reader::open(buf, Kind::Upload)?;
    let domain_id = r.usize()?;
    let n = r.len(8)?;
    let mut up = ClientUpload::empty(domain_id);
    for _ in 0..n {
        up.diff_protos.push(r.f64s()?);
        up.overlap_sets.push(r.ids()?);
    }
    r.finish()?;
    Ok(up)
}

pub fn encode_download(d: &DomainPrototypes) -> Vec<u8> {
    let mut w = Writer::header(Kind::Download);
    w.usize(d.domain_id);
    w.usize(d.clusters.len());
    for c in &d.clusters {
        w.f64s(&c.global);
        w.usize(c.local.len());
        for l in &c.local {
            w.usize(l.domain);
            w.usize(l.cluster);
            w.f64s(&l.vector);
        }
    }
    w.buf
}

pub fn decode_download(buf: &[u8]) -> Result<DomainPrototypes, WireError> {
    let mut r = Reader::open(buf, Kind::Download)?;
    let domain_id = r.usize()?;
    let n = r.len(8)?;
    let mut clusters = Vec::with_capacity(n);
    for _ in 0..n {
        let global = r.f64s()?;
        let m = r.len(24)?;
        let local = (0..m)
            .map(|_| {
                Ok(LocalPrototype {
                    domain: r.usize()?,
                    cluster: r.usize()?,
                    vector: r.f64s()?,
                })
            })
            .collect::<Result<Vec<_>, WireError>>()?;
        clusters.push(ClusterPrototypes { global, local });
    }
    r.finish()?;
    Ok(DomainPrototypes { domain_id, clusters })
}

const NONE_POS: u64 = u64::MAX;

pub fn encode_checkpoint(c: &ClientState) -> Vec<u8> {
    let mut w = Writer::header(Kind::Checkpoint);
    w.usize(c.domain_id);
    w.str(&serde_json::to_string(&c.hyper).expect("hyperparams serialize"));
    w.u64(c.rounds_completed);
    w.usize(c.embedding.depth);
    w.matrix(&c.embedding.id_embed_0);
    w.matrix(&c.embedding.rev_embed_0);
    w.usize(c.mlp.mlp.layers.len());
    for l in &c.mlp.mlp.layers {
        w.matrix(&l.w);
        w.f64s(&l.b);
    }
    w.adam(&c.adam.id_embed);
    w.usize(c.adam.head.states.len());
    for s in &c.adam.head.states {
        w.adam(s);
    }
    match &c.clusters {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            w.usize(m.assignments.len());
            for &a in &m.assignments {
                w.usize(a);
            }
            w.usize(m.upload_position.len());
            for p in &m.upload_position {
                w.u64(p.map_or(NONE_POS, |p| p as u64));
            }
        }
    }
    w.u8(c.early_stop.armed as u8);
    w.f64(c.early_stop.best);
    w.usize(c.early_stop.bad_rounds);
    w.u8(c.early_stop.stopped as u8);
    w.buf
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ClientState, WireError> {
    let mut r = Reader::open(buf, Kind::Checkpoint)?;
    let domain_id = r.usize()?;
    let hyper: Hyperparams =
        serde_json::from_str(&r.str()?).map_err(|e| WireError::Invalid(format!("hyperparams: {e}")))?;
    let rounds_completed = r.u64()?;
    let depth = r.usize()?;
    let embedding = EmbeddingState {
        id_embed_0: r.matrix()?,
        rev_embed_0: r.matrix()?,
        depth,
    };
    let n_layers = r.len(16)?;
    let layers = (0..n_layers)
        .map(|_| Ok(Dense { w: r.matrix()?, b: r.f64s()? }))
        .collect::<Result<Vec<_>, WireError>>()?;
    let id_adam = r.adam()?;
    let n_states = r.len(24)?;
    let states = (0..n_states).map(|_| r.adam()).collect::<Result<Vec<_>, _>>()?;
    let clusters = match r.u8()? {
        0 => None,
        1 => {
            let n = r.len(8)?;
            let assignments = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let k = r.len(8)?;
            let upload_position = (0..k)
                .map(|_| r.u64().map(|p| (p != NONE_POS).then_some(p as usize)))
                .collect::<Result<Vec<_>, _>>()?;
            if assignments.iter().any(|&a| a >= k) {
                return Err(WireError::Invalid("cluster assignment out of range".into()));
            }
            Some(ClusterMemory {
                assignments,
                upload_position,
            })
        }
        t => return Err(WireError::Invalid(format!("option tag {t}"))),
    };
    let early_stop = EarlyStopState {
        armed: r.bool()?,
        best: r.f64()?,
        bad_rounds: r.usize()?,
        stopped: r.bool()?,
    };
    r.finish()?;
    let state = ClientState {
        domain_id,
        hyper,
        embedding,
        mlp: MlpParams { mlp: Mlp { layers } },
        adam: ClientAdam {
            id_embed: id_adam,
            head: MlpAdam { states },
        },
        clusters,
        early_stop,
        rounds_completed,
    };
    check_shapes(&state)?;
    Ok(state)
}

fn check_shapes(c: &ClientState) -> Result<(), WireError> {
    let bad = |m: &str| Err(WireError::Invalid(m.to_string()));
    if c.embedding.id_embed_0.shape() != c.embedding.rev_embed_0.shape() {
        return bad("embedding tables differ in shape");
    }
    if c.adam.id_embed.len() != c.embedding.id_embed_0.as_slice().len() {
        return bad("id adam state does not mirror the table");
    }
    let layers = &c.mlp.mlp.layers;
    if c.adam.head.states.len() != 2 * layers.len() {
        return bad("head adam state count");
    }
    for (l, pair) in layers.iter().zip(c.adam.head.states.chunks(2)) {
        if l.b.len() != l.w.cols() || pair[0].len() != l.w.as_slice().len() || pair[1].len() != l.b.len() {
            return bad("head adam state does not mirror the layer");
        }
    }
    for pair in layers.windows(2) {
        if pair[0].w.cols() != pair[1].w.rows() {
            return bad("head layers do not chain");
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> WireError {
    WireError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn save_checkpoint(path: &Path, c: &ClientState) -> Result<(), WireError> {
    std::fs::write(path, encode_checkpoint(c)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ClientState, WireError> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&buf)
}
