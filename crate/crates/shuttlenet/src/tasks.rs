//! Synthetic long-term-dependency tasks (copy, adding, noisy sequence
//! classification) and binary feature-file ingestion standing in for CNN
//! outputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-sequence supervision.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One class label per sequence, scored at the final step.
    SeqClass(Vec<usize>),
    /// One label per (sequence, step); loss and accuracy only count the
    /// steps where `mask` is true.
    StepClass {
        labels: Vec<Vec<usize>>,
        mask: Vec<bool>,
    },
    /// One real regression target per sequence, scored at the final step.
    SeqRegress(Vec<f64>),
}

/// A batch of feature sequences: `[B, T, F]` plus targets.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub features: Tensor,
    pub targets: Targets,
    pub task: &'static str,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_size(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Anything the trainer can pull batches from.
pub trait BatchStream {
    fn next_batch(&mut self) -> Result<SequenceBatch>;
    /// Width of the model head this stream's targets require
    /// (class count, or 1 for regression).
    fn output_dim(&self) -> usize;
}

/// Copy task: L random symbols, G blanks, a trigger, then L answer
/// positions where the model must reproduce the payload. Inputs are
/// one-hot over `symbols + 2` channels (symbols, blank, trigger); loss
/// counts only the answer positions.
pub struct CopyTaskGen {
    rng: ChaCha8Rng,
    batch: usize,
    symbols: usize,
    payload: usize,
    gap: usize,
}

impl CopyTaskGen {
    pub fn new(seed: u64, batch: usize, symbols: usize, payload: usize, gap: usize) -> Result<Self> {
        if batch < 1 || symbols < 2 || payload < 1 {
            return Err(Error::contract(format!(
                "copy task needs batch >= 1, symbols >= 2, payload >= 1; \
                 got batch={batch}, symbols={symbols}, payload={payload}"
            )));
        }
        Ok(CopyTaskGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            symbols,
            payload,
            gap,
        })
    }

    pub fn seq_len(&self) -> usize {
        2 * self.payload + self.gap + 1
    }

    pub fn feature_size(&self) -> usize {
        self.symbols + 2
    }
}

impl BatchStream for CopyTaskGen {
    fn next_batch(&mut self) -> Result<SequenceBatch> {
        let (b, t, f) = (self.batch, self.seq_len(), self.feature_size());
        let (blank, trigger) = (self.symbols, self.symbols + 1);
        let answer_start = self.payload + self.gap + 1;
        let mut features = vec![0.0; b * t * f];
        let mut labels = vec![vec![0usize; t]; b];
        for row in 0..b {
            let payload: Vec<usize> = (0..self.payload)
                .map(|_| self.rng.gen_range(0..self.symbols))
                .collect();
            for step in 0..t {
                let channel = if step < self.payload {
                    payload[step]
                } else if step == self.payload + self.gap {
                    trigger
                } else {
                    blank
                };
                features[(row * t + step) * f + channel] = 1.0;
                if step >= answer_start {
                    labels[row][step] = payload[step - answer_start];
                }
            }
        }
        let mask: Vec<bool> = (0..t).map(|step| step >= answer_start).collect();
        Ok(SequenceBatch {
            features: Tensor::new(&[b, t, f], features)?,
            targets: Targets::StepClass { labels, mask },
            task: "copy",
        })
    }

    fn output_dim(&self) -> usize {
        self.symbols
    }
}

/// Adding problem: channel 0 carries uniform(0,1) values, channel 1 marks
/// exactly two positions (one per half); the target is the sum of the two
/// marked values, regressed at the final step.
pub struct AddingProblemGen {
    rng: ChaCha8Rng,
    batch: usize,
    seq_len: usize,
}

impl AddingProblemGen {
    pub fn new(seed: u64, batch: usize, seq_len: usize) -> Result<Self> {
        if batch < 1 || seq_len < 2 {
            return Err(Error::contract(format!(
                "adding problem needs batch >= 1 and T >= 2, got batch={batch}, T={seq_len}"
            )));
        }
        Ok(AddingProblemGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            seq_len,
        })
    }
}

impl BatchStream for AddingProblemGen {
    fn next_batch(&mut self) -> Result<SequenceBatch> {
        let (b, t) = (self.batch, self.seq_len);
        let mut features = vec![0.0; b * t * 2];
        let mut targets = Vec::with_capacity(b);
        for row in 0..b {
            let values: Vec<f64> = (0..t).map(|_| self.rng.gen_range(0.0..1.0)).collect();
            for (step, &v) in values.iter().enumerate() {
                features[(row * t + step) * 2] = v;
            }
            let first = self.rng.gen_range(0..t / 2);
            let second = self.rng.gen_range(t / 2..t);
            features[(row * t + first) * 2 + 1] = 1.0;
            features[(row * t + second) * 2 + 1] = 1.0;
            targets.push(values[first] + values[second]);
        }
        Ok(SequenceBatch {
            features: Tensor::new(&[b, t, 2], features)?,
            targets: Targets::SeqRegress(targets),
            task: "adding",
        })
    }

    fn output_dim(&self) -> usize {
        1
    }
}

/// Noisy sequence classification: uniform noise everywhere, plus a short
/// strong pulse on the feature channel matching the class, placed at a
/// random position in the first quarter of the sequence.
pub struct SeqClassGen {
    rng: ChaCha8Rng,
    batch: usize,
    classes: usize,
    seq_len: usize,
    features: usize,
}

impl SeqClassGen {
    pub fn new(
        seed: u64,
        batch: usize,
        classes: usize,
        seq_len: usize,
        features: usize,
    ) -> Result<Self> {
        if batch < 1 || classes < 2 || seq_len < 2 || features < classes {
            return Err(Error::contract(format!(
                "seqclass needs batch >= 1, classes >= 2, T >= 2, features >= classes; \
                 got batch={batch}, classes={classes}, T={seq_len}, features={features}"
            )));
        }
        Ok(SeqClassGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            classes,
            seq_len,
            features,
        })
    }
}

impl BatchStream for SeqClassGen {
    fn next_batch(&mut self) -> Result<SequenceBatch> {
        let (b, t, f) = (self.batch, self.seq_len, self.features);
        let mut features = vec![0.0; b * t * f];
        let mut labels = Vec::with_capacity(b);
        for row in 0..b {
            for v in &mut features[row * t * f..(row + 1) * t * f] {
                *v = self.rng.gen_range(-0.5..0.5);
            }
            let label = self.rng.gen_range(0..self.classes);
            let pos = self.rng.gen_range(0..(t / 4).max(1));
            for step in [pos, (pos + 1).min(t - 1)] {
                features[(row * t + step) * f + label] += 2.5;
            }
            labels.push(label);
        }
        Ok(SequenceBatch {
            features: Tensor::new(&[b, t, f], features)?,
            targets: Targets::SeqClass(labels),
            task: "seqclass",
        })
    }

    fn output_dim(&self) -> usize {
        self.classes
    }
}

/// One stored feature sequence: 32-bit values widened to 64-bit on batch
/// assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub seq_len: usize,
    pub feature_size: usize,
    pub label: i32,
    pub values: Vec<f32>,
}

const MAGIC: &[u8; 4] = b"SHTL";
const VERSION: u8 = 1;

/// Write records in the binary feature format: magic "SHTL", version 1,
/// record count u32, then per record T u32, F u32, label i32 and T*F
/// little-endian f32 values.
pub fn write_feature_file(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        if rec.values.len() != rec.seq_len * rec.feature_size {
            return Err(Error::contract(format!(
                "record declares {}x{} but holds {} values",
                rec.seq_len,
                rec.feature_size,
                rec.values.len()
            )));
        }
        out.extend_from_slice(&(rec.seq_len as u32).to_le_bytes());
        out.extend_from_slice(&(rec.feature_size as u32).to_le_bytes());
        out.extend_from_slice(&rec.label.to_le_bytes());
        for v in &rec.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                message: format!(
                    "{what} needs {n} more bytes (through byte {}), file has {}",
                    self.offset + n,
                    self.buf.len()
                ),
            });
        }
        let slice = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read and validate a feature file. Errors carry the byte offset of the
/// problem.
pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureRecord>> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, offset: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = cur.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = cur.u32("record count")?;
    let mut records = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let seq_len = cur.u32(&format!("record {idx} T"))? as usize;
        let feature_size = cur.u32(&format!("record {idx} F"))? as usize;
        let label = cur.i32(&format!("record {idx} label"))?;
        if seq_len == 0 || feature_size == 0 {
            return Err(Error::Format {
                offset: cur.offset as u64,
                message: format!("record {idx} declares empty shape {seq_len}x{feature_size}"),
            });
        }
        let n = seq_len * feature_size;
        let payload_offset = cur.offset;
        let bytes = cur.take(4 * n, &format!("record {idx} payload ({n} floats)"))?;
        let mut values = Vec::with_capacity(n);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: (payload_offset + 4 * i) as u64,
                    message: format!("non-finite value {v} in record {idx}"),
                });
            }
            values.push(v);
        }
        records.push(FeatureRecord {
            seq_len,
            feature_size,
            label,
            values,
        });
    }
    if cur.offset != buf.len() {
        return Err(Error::Format {
            offset: cur.offset as u64,
            message: format!(
                "{} trailing bytes after the declared {count} records",
                buf.len() - cur.offset
            ),
        });
    }
    Ok(records)
}

/// Batch stream over stored feature records. Order is preserved unless a
/// shuffle seed is given; the stream wraps around for open-ended
/// training. Batches never pad or truncate: mixed shapes are an error.
pub struct FeatureStream {
    records: Vec<FeatureRecord>,
    classes: usize,
    batch: usize,
    position: usize,
}

impl FeatureStream {
    pub fn new(
        mut records: Vec<FeatureRecord>,
        batch: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::contract("feature stream needs at least one record"));
        }
        if batch < 1 {
            return Err(Error::contract("feature stream needs batch >= 1"));
        }
        if let Some(&FeatureRecord { label, .. }) =
            records.iter().find(|r| r.label < 0)
        {
            return Err(Error::contract(format!(
                "negative class label {label} in feature records"
            )));
        }
        let classes = records.iter().map(|r| r.label as usize).max().unwrap_or(0) + 1;
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            records.shuffle(&mut rng);
        }
        Ok(FeatureStream {
            records,
            classes,
            batch,
            position: 0,
        })
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Batches needed to see every record once.
    pub fn epoch_batches(&self) -> usize {
        self.records.len().div_ceil(self.batch)
    }
}

impl BatchStream for FeatureStream {
    fn next_batch(&mut self) -> Result<SequenceBatch> {
        let take = self.batch.min(self.records.len());
        let picked: Vec<&FeatureRecord> = (0..take)
            .map(|i| &self.records[(self.position + i) % self.records.len()])
            .collect();
        self.position = (self.position + take) % self.records.len();

        let (t, f) = (picked[0].seq_len, picked[0].feature_size);
        for rec in &picked {
            if rec.seq_len != t || rec.feature_size != f {
                return Err(Error::contract(format!(
                    "mixed record shapes in one batch: {t}x{f} vs {}x{}",
                    rec.seq_len, rec.feature_size
                )));
            }
        }
        let mut features = Vec::with_capacity(take * t * f);
        let mut labels = Vec::with_capacity(take);
        for rec in &picked {
            features.extend(rec.values.iter().map(|&v| v as f64));
            labels.push(rec.label as usize);
        }
        Ok(SequenceBatch {
            features: Tensor::new(&[take, t, f], features)?,
            targets: Targets::SeqClass(labels),
            task: "features",
        })
    }

    fn output_dim(&self) -> usize {
        self.classes
    }
}
