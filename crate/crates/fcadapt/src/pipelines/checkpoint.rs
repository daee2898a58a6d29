//! Binary checkpoint archive and run-directory layout.
//!
//! A checkpoint is one file holding a metadata record (schema, `N`, `D`,
//! `K`, branch count, epoch, seed, branch kinds, optional optimizer state)
//! followed by every parameter tensor under a canonical name
//! (`branch<i>.gin.0.w`, `branch<i>.se.w1`, ...). Tensor payloads are raw
//! little-endian `f64` bits, so save/load round-trips are bit-exact.
//!
//! Run directories look like:
//! ```text
//! <run>/config.snapshot       resolved config, written before any work
//! <run>/metrics.log           one JSON record per epoch
//! <run>/checkpoints/epoch_<k> atomic per-epoch checkpoints
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::write_atomic;
use crate::encoder::{EncoderDims, EncoderParams, GIN_LAYERS};
use crate::enrichment::BranchKind;
use crate::error::{Error, Result};
use crate::pipelines::train::{Adam, EpochRecord};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MAGIC: &[u8; 8] = b"FCADCKP1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub n: usize,
    pub d: usize,
    pub gin_layers: usize,
    pub epoch: usize,
    pub seed: u64,
    pub kinds: Vec<Option<BranchKind>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub branches: Vec<EncoderParams>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(
        branches: Vec<EncoderParams>,
        kinds: Vec<Option<BranchKind>>,
        epoch: usize,
        seed: u64,
        adam: Option<Adam>,
    ) -> Self {
        let dims = branches.first().map(|b| b.dims).unwrap_or(EncoderDims { n: 2, d: 2 });
        Checkpoint {
            meta: CheckpointMeta {
                schema_version: CHECKPOINT_SCHEMA,
                n: dims.n,
                d: dims.d,
                gin_layers: GIN_LAYERS,
                epoch,
                seed,
                kinds,
            },
            branches,
            adam,
        }
    }
}

fn kind_byte(kind: Option<BranchKind>) -> u8 {
    match kind {
        None => 0,
        Some(BranchKind::Warp) => 1,
        Some(BranchKind::ReceptiveField) => 2,
        Some(BranchKind::Slice) => 3,
    }
}

fn byte_kind(b: u8) -> Result<Option<BranchKind>> {
    match b {
        0 => Ok(None),
        1 => Ok(Some(BranchKind::Warp)),
        2 => Ok(Some(BranchKind::ReceptiveField)),
        3 => Ok(Some(BranchKind::Slice)),
        other => Err(Error::Checkpoint(format!("unknown branch kind byte {other}"))),
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes and atomically writes a checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(ckpt.meta.schema_version);
    w.u32(ckpt.meta.n as u32);
    w.u32(ckpt.meta.d as u32);
    w.u32(ckpt.meta.gin_layers as u32);
    w.u32(ckpt.branches.len() as u32);
    w.u64(ckpt.meta.epoch as u64);
    w.u64(ckpt.meta.seed);
    for &k in &ckpt.meta.kinds {
        w.u8(kind_byte(k));
    }
    match &ckpt.adam {
        None => w.u8(0),
        Some(adam) => {
            w.u8(1);
            w.u64(adam.t);
            w.u64(adam.m.len() as u64);
            w.f64s(&adam.m);
            w.f64s(&adam.v);
        }
    }
    let tensors: Vec<(String, Vec<usize>, Vec<f64>)> = ckpt
        .branches
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            b.tensor_entries()
                .into_iter()
                .map(move |(name, shape, data)| (format!("branch{i}.{name}"), shape, data))
        })
        .collect();
    w.u32(tensors.len() as u32);
    for (name, shape, data) in &tensors {
        w.u16(name.len() as u16);
        w.buf.extend_from_slice(name.as_bytes());
        w.u8(shape.len() as u8);
        for &dim in shape {
            w.u32(dim as u32);
        }
        w.f64s(data);
    }
    write_atomic(path, &w.buf)
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "'{}' is not a checkpoint file",
            path.display()
        )));
    }
    let schema = r.u32()?;
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {schema}, expected {CHECKPOINT_SCHEMA}"
        )));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let gin_layers = r.u32()? as usize;
    if gin_layers != GIN_LAYERS {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {gin_layers} GIN layers, this build uses {GIN_LAYERS}"
        )));
    }
    let m = r.u32()? as usize;
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;
    let mut kinds = Vec::with_capacity(m);
    for _ in 0..m {
        kinds.push(byte_kind(r.u8()?)?);
    }
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let len = r.u64()? as usize;
            let m_vec = r.f64s(len)?;
            let v_vec = r.f64s(len)?;
            Some(Adam { m: m_vec, v: v_vec, t })
        }
        other => {
            return Err(Error::Checkpoint(format!("bad optimizer flag {other}")));
        }
    };
    let tensor_count = r.u32()? as usize;
    let mut per_branch: Vec<Vec<(String, Vec<usize>, Vec<f64>)>> = vec![Vec::new(); m];
    for _ in 0..tensor_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        let (branch, rest) = name
            .strip_prefix("branch")
            .and_then(|s| s.split_once('.'))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' lacks a branch prefix")))?;
        let branch: usize = branch
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad branch index in '{name}'")))?;
        if branch >= m {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' references branch {branch}, checkpoint has {m}"
            )));
        }
        per_branch[branch].push((rest.to_string(), shape, data));
    }
    let dims = EncoderDims::new(n, d)?;
    let branches = per_branch
        .iter()
        .map(|entries| EncoderParams::from_tensor_entries(dims, entries))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        meta: CheckpointMeta {
            schema_version: schema,
            n,
            d,
            gin_layers,
            epoch,
            seed,
            kinds,
        },
        branches,
        adam,
    })
}

/// A training run's on-disk home.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    records: Vec<EpochRecord>,
}

impl RunDir {
    /// Creates `<root>` and `<root>/checkpoints`.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Echoes the resolved configuration before any work starts.
    pub fn write_config_snapshot(&self, text: &str) -> Result<()> {
        write_atomic(&self.root.join("config.snapshot"), text.as_bytes())
    }

    /// Appends one epoch record and atomically rewrites `metrics.log` as
    /// JSON lines.
    pub fn append_metric(&mut self, record: &EpochRecord) -> Result<()> {
        self.records.push(record.clone());
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch records serialize"));
            out.push('\n');
        }
        write_atomic(&self.root.join("metrics.log"), out.as_bytes())
    }

    /// Seeds the in-memory metrics log from an earlier (resumed) run.
    pub fn preload_metrics(&mut self, upto_epoch: usize) -> Result<()> {
        let path = self.root.join("metrics.log");
        if !path.is_file() {
            return Ok(());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        self.records.clear();
        for line in text.lines() {
            let record: EpochRecord = serde_json::from_str(line)
                .map_err(|e| Error::Schema(format!("bad metrics.log line: {e}")))?;
            if record.epoch < upto_epoch {
                self.records.push(record);
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch}"))
    }

    /// Highest-epoch checkpoint present, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(usize, PathBuf)>> {
        let dir = self.root.join("checkpoints");
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let Some(epoch) = name.to_str().and_then(|s| s.strip_prefix("epoch_")) else {
                continue;
            };
            if let Ok(epoch) = epoch.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
                    best = Some((epoch, entry.path()));
                }
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dims = EncoderDims::new(5, 6).unwrap();
        let branches: Vec<EncoderParams> = (0..3)
            .map(|i| EncoderParams::init_seeded(dims, 90 + i))
            .collect();
        let kinds = vec![
            Some(BranchKind::Warp),
            Some(BranchKind::ReceptiveField),
            Some(BranchKind::Slice),
        ];
        let adam = Adam {
            m: vec![0.25; 10],
            v: vec![1e-9; 10],
            t: 17,
        };
        let ckpt = Checkpoint::new(branches.clone(), kinds.clone(), 12, 99, Some(adam.clone()));
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta.kinds, kinds);
        assert_eq!(back.meta.epoch, 12);
        assert_eq!(back.meta.seed, 99);
        assert_eq!(back.branches, branches);
        assert_eq!(back.adam, Some(adam));

        // Same content -> same bytes.
        let path2 = dir.path().join("ckpt2");
        save_checkpoint(&path2, &ckpt).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn run_dir_layout_and_latest() {
        let dir = tempdir().unwrap();
        let mut run = RunDir::create(&dir.path().join("run")).unwrap();
        run.write_config_snapshot("k = 1\n").unwrap();
        run.append_metric(&EpochRecord {
            epoch: 0,
            lr: 3e-4,
            loss: 1.0,
            val_auc: None,
            val_acc: None,
        })
        .unwrap();
        assert!(run.root().join("config.snapshot").is_file());
        let log = fs::read_to_string(run.root().join("metrics.log")).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert!(log.contains("\"epoch\":0"));

        assert!(run.latest_checkpoint().unwrap().is_none());
        let dims = EncoderDims::new(4, 4).unwrap();
        let ckpt = Checkpoint::new(
            vec![EncoderParams::init_seeded(dims, 1)],
            vec![None],
            3,
            1,
            None,
        );
        save_checkpoint(&run.checkpoint_path(3), &ckpt).unwrap();
        save_checkpoint(&run.checkpoint_path(7), &ckpt).unwrap();
        let (epoch, path) = run.latest_checkpoint().unwrap().unwrap();
        assert_eq!(epoch, 7);
        assert!(path.ends_with("epoch_7"));
    }
}
