//! Append-only Merkle ledger.
//!
//! File layout: `b"GFCL"`, a version byte, then entries each written as a
//! big-endian `u32` length followed by canonical JSON. Entries are records and
//! block headers in commit order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::digest::{sha256, Digest};

pub const LEDGER_MAGIC: &[u8; 4] = b"GFCL";
pub const LEDGER_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Command,
    Ack,
    FrameBatch,
    Admission,
    Reject,
    Override,
    StateNote,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::Command => "command",
            RecordKind::Ack => "ack",
            RecordKind::FrameBatch => "frame-batch",
            RecordKind::Admission => "admission",
            RecordKind::Reject => "reject",
            RecordKind::Override => "override",
            RecordKind::StateNote => "state-note",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerRecord {
    pub index: u64,
    pub tick: u64,
    pub kind: RecordKind,
    pub payload_hash: Digest,
    pub meta: BTreeMap<String, String>,
}

impl LedgerRecord {
    /// Merkle leaf: SHA-256 over the record's canonical bytes, so every field
    /// (not only the payload hash) is covered by the root.
    pub fn leaf(&self) -> Digest {
        sha256(&to_canonical_bytes(self).expect("records serialize"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerBlock {
    pub block_index: u64,
    pub start: u64,
    pub end: u64,
    pub merkle_root: Digest,
    pub prev_block_root: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub digest: Digest,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub index: u64,
    pub block_index: u64,
    pub path: Vec<ProofStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AuditPhase {
    Append,
    Commit,
    /// The job-end block has been written.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger is closed")]
    Closed,
    #[error("nothing to commit")]
    NothingToCommit,
    #[error("record {0} is not in a committed block")]
    Uncommitted(u64),
}

/// Merkle root with duplicate-last-leaf padding; empty input hashes to
/// SHA-256 of the empty string.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return sha256(b"");
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| {
            let right = pair.get(1).unwrap_or(&pair[0]);
            hash_pair(&pair[0], right)
        })
        .collect()
}

fn hash_pair(left: &Digest, right: &Digest) -> Digest {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(left.as_bytes());
    buf[32..].copy_from_slice(right.as_bytes());
    sha256(&buf)
}

pub fn verify_inclusion(root: &Digest, record: &LedgerRecord, proof: &InclusionProof) -> bool {
    if proof.index != record.index {
        return false;
    }
    let mut acc = record.leaf();
    for step in &proof.path {
        acc = match step.side {
            Side::Left => hash_pair(&step.digest, &acc),
            Side::Right => hash_pair(&acc, &step.digest),
        };
    }
    acc == *root
}

#[derive(Debug, Clone)]
pub struct Ledger {
    records: Vec<LedgerRecord>,
    blocks: Vec<LedgerBlock>,
    phase: AuditPhase,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            blocks: Vec::new(),
            phase: AuditPhase::Append,
        }
    }

    pub fn phase(&self) -> AuditPhase {
        self.phase
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn last_root(&self) -> Digest {
        self.blocks.last().map_or(Digest::ZERO, |b| b.merkle_root)
    }

    fn committed(&self) -> u64 {
        self.blocks.last().map_or(0, |b| b.end)
    }

    pub fn uncommitted(&self) -> usize {
        self.records.len() - self.committed() as usize
    }

    pub fn append(
        &mut self,
        tick: u64,
        kind: RecordKind,
        payload_hash: Digest,
        meta: BTreeMap<String, String>,
    ) -> Result<u64, LedgerError> {
        if self.phase == AuditPhase::Closed {
            return Err(LedgerError::Closed);
        }
        let index = self.records.len() as u64;
        self.records.push(LedgerRecord {
            index,
            tick,
            kind,
            payload_hash,
            meta,
        });
        Ok(index)
    }

    /// Seals all uncommitted records into a block. An empty block is allowed
    /// only as the job-end block, which also closes the ledger.
    pub fn commit(&mut self, end_of_job: bool) -> Result<LedgerBlock, LedgerError> {
        if self.phase == AuditPhase::Closed {
            return Err(LedgerError::Closed);
        }
        let start = self.committed();
        let end = self.records.len() as u64;
        if start == end && !end_of_job {
            return Err(LedgerError::NothingToCommit);
        }
        self.phase = AuditPhase::Commit;
        let leaves: Vec<Digest> = self.records[start as usize..]
            .iter()
            .map(LedgerRecord::leaf)
            .collect();
        let block = LedgerBlock {
            block_index: self.blocks.len() as u64,
            start,
            end,
            merkle_root: merkle_root(&leaves),
            prev_block_root: self.last_root(),
        };
        self.blocks.push(block.clone());
        self.phase = if end_of_job {
            AuditPhase::Closed
        } else {
            AuditPhase::Append
        };
        Ok(block)
    }

    pub fn prove_inclusion(&self, index: u64) -> Result<InclusionProof, LedgerError> {
        let block = self
            .blocks
            .iter()
            .find(|b| b.start <= index && index < b.end)
            .ok_or(LedgerError::Uncommitted(index))?;
        let mut level: Vec<Digest> = self.records[block.start as usize..block.end as usize]
            .iter()
            .map(LedgerRecord::leaf)
            .collect();
        let mut pos = (index - block.start) as usize;
        let mut path = Vec::new();
        while level.len() > 1 {
            let step = if pos.is_multiple_of(2) {
                ProofStep {
                    digest: *level.get(pos + 1).unwrap_or(&level[pos]),
                    side: Side::Right,
                }
            } else {
                ProofStep {
                    digest: level[pos - 1],
                    side: Side::Left,
                }
            };
            path.push(step);
            level = next_level(&level);
            pos /= 2;
        }
        Ok(InclusionProof {
            index,
            block_index: block.block_index,
            path,
        })
    }

    pub fn block_root(&self, block_index: u64) -> Option<Digest> {
        self.blocks.get(block_index as usize).map(|b| b.merkle_root)
    }

    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LEDGER_MAGIC);
        out.push(LEDGER_VERSION);
        let mut next = 0usize;
        for block in &self.blocks {
            for record in &self.records[next..block.end as usize] {
                write_entry(&mut out, &Entry::Record(record.clone()));
            }
            next = block.end as usize;
            write_entry(&mut out, &Entry::Block(block.clone()));
        }
        for record in &self.records[next..] {
            write_entry(&mut out, &Entry::Record(record.clone()));
        }
        out
    }

    /// One line per entry, for humans.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut next = 0usize;
        for block in &self.blocks {
            for r in &self.records[next..block.end as usize] {
                out.push_str(&record_line(r));
            }
            next = block.end as usize;
            out.push_str(&format!(
                "block {} [{}, {}) root={} prev={}\n",
                block.block_index, block.start, block.end, block.merkle_root, block.prev_block_root
            ));
        }
        for r in &self.records[next..] {
            out.push_str(&record_line(r));
        }
        out
    }
}

fn record_line(r: &LedgerRecord) -> String {
    let meta: Vec<String> = r.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!(
        "  #{} t={} {} {} {}\n",
        r.index,
        r.tick,
        r.kind,
        r.payload_hash,
        meta.join(" ")
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "lowercase")]
enum Entry {
    Record(LedgerRecord),
    Block(LedgerBlock),
}

fn write_entry(out: &mut Vec<u8>, entry: &Entry) {
    let bytes = to_canonical_bytes(entry).expect("entries serialize");
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&bytes);
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported ledger version {0}")]
    Version(u8),
    #[error("truncated entry at byte {0}")]
    Truncated(usize),
    #[error("malformed entry at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFailure {
    /// Earliest block whose contents or linkage do not check out. Records
    /// trailing the last block report the index the next block would have.
    pub block_index: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub blocks: u64,
    pub records: u64,
    pub last_root: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerifyError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("verification failed at block {}: {}", .0.block_index, .0.reason)]
    Failed(ChainFailure),
}

/// Parsed entries plus whether each one was byte-exact canonical JSON.
fn parse_entries(bytes: &[u8]) -> Result<Vec<(Entry, bool)>, ParseError> {
    if bytes.len() < 5 || &bytes[..4] != LEDGER_MAGIC {
        return Err(ParseError::BadMagic);
    }
    if bytes[4] != LEDGER_VERSION {
        return Err(ParseError::Version(bytes[4]));
    }
    let mut at = 5;
    let mut entries = Vec::new();
    while at < bytes.len() {
        let header = bytes.get(at..at + 4).ok_or(ParseError::Truncated(at))?;
        let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(at + 4..at + 4 + len)
            .ok_or(ParseError::Truncated(at))?;
        let entry: Entry = serde_json::from_slice(body).map_err(|e| ParseError::Malformed {
            offset: at,
            message: e.to_string(),
        })?;
        let canonical = to_canonical_bytes(&entry).expect("entries serialize") == body;
        entries.push((entry, canonical));
        at += 4 + len;
    }
    Ok(entries)
}

pub fn parse_ledger(bytes: &[u8]) -> Result<Ledger, VerifyError> {
    verify_chain(bytes)?;
    let mut ledger = Ledger::new();
    for (entry, _) in parse_entries(bytes)? {
        match entry {
            Entry::Record(r) => ledger.records.push(r),
            Entry::Block(b) => ledger.blocks.push(b),
        }
    }
    Ok(ledger)
}

pub fn verify_chain(bytes: &[u8]) -> Result<ChainReport, VerifyError> {
    let entries = parse_entries(bytes)?;
    let fail = |block_index: u64, reason: String| {
        Err(VerifyError::Failed(ChainFailure {
            block_index,
            reason,
        }))
    };
    let mut pending: Vec<LedgerRecord> = Vec::new();
    let mut pending_canonical = true;
    let mut next_index = 0u64;
    let mut blocks = 0u64;
    let mut prev_root = Digest::ZERO;
    for (entry, canonical) in entries {
        match entry {
            Entry::Record(r) => {
                pending_canonical &= canonical;
                pending.push(r);
            }
            Entry::Block(b) => {
                if !canonical || !pending_canonical {
                    return fail(blocks, "entry is not in canonical form".into());
                }
                if b.block_index != blocks {
                    return fail(
                        blocks,
                        format!("block index {} out of sequence", b.block_index),
                    );
                }
                if b.start != next_index || b.end != next_index + pending.len() as u64 {
                    return fail(
                        blocks,
                        format!(
                            "block range [{}, {}) does not match its records",
                            b.start, b.end
                        ),
                    );
                }
                if let Some((i, r)) = pending
                    .iter()
                    .enumerate()
                    .find(|(i, r)| r.index != b.start + *i as u64)
                {
                    return fail(
                        blocks,
                        format!("record at position {i} has index {}", r.index),
                    );
                }
                let leaves: Vec<Digest> = pending.iter().map(LedgerRecord::leaf).collect();
                if merkle_root(&leaves) != b.merkle_root {
                    return fail(blocks, "merkle root mismatch".into());
                }
                if b.prev_block_root != prev_root {
                    return fail(blocks, "previous-root link broken".into());
                }
                prev_root = b.merkle_root;
                next_index = b.end;
                blocks += 1;
                pending.clear();
                pending_canonical = true;
            }
        }
    }
    if !pending.is_empty() {
        return fail(
            blocks,
            format!("{} records after the last block", pending.len()),
        );
    }
    Ok(ChainReport {
        blocks,
        records: next_index,
        last_root: prev_root,
    })
}
