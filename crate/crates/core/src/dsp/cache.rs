//! Optional on-disk segment cache: raw 257×256 float32 little-endian blocks
//! plus a JSON-lines index of `(offset, start_s, channel)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::{SpectralSegment, N_FRAMES, N_FREQ_BINS};
use super::DspError;

const BLOCK_FLOATS: usize = N_FREQ_BINS * N_FRAMES;
const BLOCK_BYTES: usize = BLOCK_FLOATS * 4;

/// One index line.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CacheEntry {
    pub offset: u64,
    pub start_s: f64,
    pub channel: u8,
}

pub struct SegmentCacheWriter {
    data: BufWriter<File>,
    index: BufWriter<File>,
    offset: u64,
}

impl SegmentCacheWriter {
    pub fn create(data_path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<Self, DspError> {
        Ok(SegmentCacheWriter {
            data: BufWriter::new(File::create(data_path)?),
            index: BufWriter::new(File::create(index_path)?),
            offset: 0,
        })
    }

    pub fn append(&mut self, seg: &SpectralSegment) -> Result<(), DspError> {
        debug_assert_eq!(seg.values.dim(), (N_FREQ_BINS, N_FRAMES));
        let mut bytes = Vec::with_capacity(BLOCK_BYTES);
        for v in seg.values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.data.write_all(&bytes)?;
        let entry = CacheEntry {
            offset: self.offset,
            start_s: seg.origin_s,
            channel: seg.channel,
        };
        serde_json::to_writer(&mut self.index, &entry).map_err(std::io::Error::from)?;
        self.index.write_all(b"\n")?;
        self.offset += BLOCK_BYTES as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), DspError> {
        self.data.flush()?;
        self.index.flush()?;
        Ok(())
    }
}

pub struct SegmentCacheReader {
    data_path: PathBuf,
    entries: Vec<CacheEntry>,
}

impl SegmentCacheReader {
    pub fn open(data_path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<Self, DspError> {
        let mut entries = Vec::new();
        for line in BufReader::new(File::open(index_path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry =
                serde_json::from_str(&line).map_err(std::io::Error::from)?;
            entries.push(entry);
        }
        Ok(SegmentCacheReader {
            data_path: data_path.as_ref().to_path_buf(),
            entries,
        })
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read(&self, i: usize) -> Result<SpectralSegment, DspError> {
        let entry = self.entries[i];
        let mut f = File::open(&self.data_path)?;
        f.seek(SeekFrom::Start(entry.offset))?;
        let mut bytes = vec![0u8; BLOCK_BYTES];
        f.read_exact(&mut bytes)?;
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let values = Array2::from_shape_vec((N_FREQ_BINS, N_FRAMES), floats)
            .expect("block size matches segment shape");
        Ok(SpectralSegment {
            values,
            origin_s: entry.start_s,
            channel: entry.channel,
        })
    }
}
