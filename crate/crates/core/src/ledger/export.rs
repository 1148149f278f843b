//! Flat-file chain exports: one file per chain, one JSON object per block.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{ControlBlock, WhitelistBlock};
use super::store::ChainStore;
use crate::digest::{BlockHash, ChainId};

pub const CONTROL_FILE: &str = "control.jsonl";
const DEVICE_PREFIX: &str = "chain-";
const EXT: &str = ".jsonl";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}:{line}: stored hash {stored} does not match block contents {actual}")]
    HashMismatch { path: PathBuf, line: usize, stored: BlockHash, actual: BlockHash },
    #[error("{path}:{line}: block belongs to chain {found}, file is for {expected}")]
    WrongChain { path: PathBuf, line: usize, expected: ChainId, found: ChainId },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Exported<B> {
    hash: BlockHash,
    #[serde(flatten)]
    block: B,
}

pub fn device_file_name(chain_id: &ChainId) -> String {
    format!("{DEVICE_PREFIX}{}{EXT}", chain_id.to_hex())
}

/// Parses `chain-<hex>.jsonl` back to its chain id.
pub fn chain_id_from_file_name(name: &str) -> Option<ChainId> {
    let hex = name.strip_prefix(DEVICE_PREFIX)?.strip_suffix(EXT)?;
    ChainId::from_hex(hex).ok()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

fn write_lines<B: Serialize>(path: &Path, items: impl Iterator<Item = (BlockHash, B)>) -> Result<(), ExportError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (hash, block) in items {
        let line = serde_json::to_string(&Exported { hash, block })
            .map_err(|source| ExportError::Json { path: path.to_path_buf(), line: 0, source })?;
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn read_lines<B: for<'de> Deserialize<'de>>(
    path: &Path,
    hash_of: impl Fn(&B) -> BlockHash,
) -> Result<Vec<B>, ExportError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut blocks = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Exported<B> = serde_json::from_str(&line)
            .map_err(|source| ExportError::Json { path: path.to_path_buf(), line: idx + 1, source })?;
        let actual = hash_of(&rec.block);
        if actual != rec.hash {
            return Err(ExportError::HashMismatch { path: path.to_path_buf(), line: idx + 1, stored: rec.hash, actual });
        }
        blocks.push(rec.block);
    }
    Ok(blocks)
}

pub fn write_control_chain<'a>(path: &Path, blocks: impl Iterator<Item = &'a ControlBlock>) -> Result<(), ExportError> {
    write_lines(path, blocks.map(|b| (b.hash(), b)))
}

pub fn write_device_chain<'a>(path: &Path, blocks: impl Iterator<Item = &'a WhitelistBlock>) -> Result<(), ExportError> {
    write_lines(path, blocks.map(|b| (b.hash(), b)))
}

pub fn read_control_chain(path: &Path) -> Result<Vec<ControlBlock>, ExportError> {
    read_lines(path, ControlBlock::hash)
}

pub fn read_device_chain(path: &Path, chain_id: &ChainId) -> Result<Vec<WhitelistBlock>, ExportError> {
    let blocks = read_lines(path, WhitelistBlock::hash)?;
    for (idx, b) in blocks.iter().enumerate() {
        if b.chain_id != *chain_id {
            return Err(ExportError::WrongChain {
                path: path.to_path_buf(),
                line: idx + 1,
                expected: *chain_id,
                found: b.chain_id,
            });
        }
    }
    Ok(blocks)
}

/// Every block ever published, in first-publication order. This is the
/// public ledger view an auditor replays.
#[derive(Debug, Clone, Default)]
pub struct BlockArchive {
    pub control: Vec<ControlBlock>,
    pub devices: BTreeMap<ChainId, Vec<WhitelistBlock>>,
    seen: HashSet<BlockHash>,
}

impl BlockArchive {
    pub fn new() -> Self {
        let mut archive = BlockArchive::default();
        archive.record_control(&ControlBlock::genesis());
        archive
    }

    /// Returns false if the block was already archived.
    pub fn record_control(&mut self, block: &ControlBlock) -> bool {
        if !self.seen.insert(block.hash()) {
            return false;
        }
        self.control.push(block.clone());
        true
    }

    pub fn record_whitelist(&mut self, block: &WhitelistBlock) -> bool {
        if !self.seen.insert(block.hash()) {
            return false;
        }
        self.devices.entry(block.chain_id).or_default().push(block.clone());
        true
    }

    /// Snapshot of one sentinel's store, in its local receipt order.
    pub fn from_store(store: &ChainStore) -> Self {
        let mut archive = BlockArchive::new();
        for node in store.control().iter() {
            archive.record_control(&node.block);
        }
        for chain in store.chains() {
            for node in store.device_tree(chain).expect("listed chain").iter() {
                archive.record_whitelist(&node.block);
            }
        }
        archive
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), ExportError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_control_chain(&dir.join(CONTROL_FILE), self.control.iter())?;
        for (chain, blocks) in &self.devices {
            write_device_chain(&dir.join(device_file_name(chain)), blocks.iter())?;
        }
        Ok(())
    }

    /// Loads every chain file in `dir`. A corrupt device file is reported and
    /// skipped so the rest of the export stays usable.
    pub fn read_dir(dir: &Path) -> Result<(Self, Vec<ExportError>), ExportError> {
        let mut archive = BlockArchive::default();
        for block in read_control_chain(&dir.join(CONTROL_FILE))? {
            archive.record_control(&block);
        }
        let mut errors = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                chain_id_from_file_name(&name).map(|id| (id, e.path()))
            })
            .collect();
        entries.sort();
        for (chain, path) in entries {
            match read_device_chain(&path, &chain) {
                Ok(blocks) => {
                    archive.devices.entry(chain).or_default();
                    for b in &blocks {
                        archive.record_whitelist(b);
                    }
                }
                Err(e) => errors.push(e),
            }
        }
        Ok((archive, errors))
    }
}
