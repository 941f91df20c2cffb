//! Video records, the `VFR1` binary dataset format and the synthetic
//! long-tail generator.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VFR1" | u32 version=1 | u32 d_video | u32 d_audio | u32 vocab_size | u64 record_count
//! per record:
//!   u16 id_len | id bytes | u32 T | T*(d_video+d_audio) f32 row-major
//!   | u16 label_count | label_count * u32 ascending label ids
//! ```
//!
//! Each frame row holds the video features followed by the audio features.

use std::borrow::Borrow;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

pub const MAGIC: &[u8; 4] = b"VFR1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
/// Upper bound on frames per record accepted by the reader.
pub const DEFAULT_MAX_FRAMES: u32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub d_video: u32,
    pub d_audio: u32,
    pub vocab_size: u32,
    pub record_count: u64,
}

impl DatasetHeader {
    pub fn new(d_video: u32, d_audio: u32, vocab_size: u32, record_count: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            d_video,
            d_audio,
            vocab_size,
            record_count,
        }
    }

    /// Width of one frame row.
    pub fn row_width(&self) -> usize {
        (self.d_video + self.d_audio) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", self.version)));
        }
        if self.d_video == 0 {
            return Err(Error::Format("d_video must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Format("vocab_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One video: per-second feature rows and its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: Vec<u8>,
    /// `T x (d_video + d_audio)`.
    pub frames: Array2<f32>,
    /// Strictly ascending label ids.
    pub labels: Vec<u32>,
}

impl VideoRecord {
    pub fn id_str(&self) -> String {
        String::from_utf8_lossy(&self.id).into_owned()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Frames widened to f64 for the model.
    pub fn frames_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }

    /// Checks the record against the dataset dimensions.
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        if self.id.is_empty() {
            return Err(invalid("record id must be non-empty"));
        }
        if self.id.len() > u16::MAX as usize {
            return Err(invalid(format!(
                "record id is {} bytes, limit is {}",
                self.id.len(),
                u16::MAX
            )));
        }
        if self.frames.nrows() == 0 {
            return Err(invalid(format!("record {:?} has no frames", self.id_str())));
        }
        if self.frames.ncols() != header.row_width() {
            return Err(shape(format!(
                "record {:?} has rows of width {}, header expects {}",
                self.id_str(),
                self.frames.ncols(),
                header.row_width()
            )));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of record {:?}", self.id_str())));
        }
        check_labels(&self.labels, header.vocab_size).map_err(|msg| {
            invalid(format!("record {:?}: {msg}", self.id_str()))
        })
    }
}

fn check_labels(labels: &[u32], vocab_size: u32) -> std::result::Result<(), String> {
    if labels.is_empty() {
        return Err("label list is empty".into());
    }
    if labels.len() > u16::MAX as usize {
        return Err(format!("{} labels exceed the u16 count field", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab_size) {
        return Err(format!("label {bad} out of range for vocab_size {vocab_size}"));
    }
    if labels.windows(2).any(|w| w[0] >= w[1]) {
        return Err("labels are not strictly ascending".into());
    }
    Ok(())
}

/// In-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    /// Builds a dataset from records, fixing `record_count`.
    pub fn new(d_video: u32, d_audio: u32, vocab_size: u32, records: Vec<VideoRecord>) -> Self {
        let header = DatasetHeader::new(d_video, d_audio, vocab_size, records.len() as u64);
        Self { header, records }
    }

    pub fn with_records<R: Borrow<VideoRecord>>(&self, records: &[R]) -> Dataset {
        Dataset::new(
            self.header.d_video,
            self.header.d_audio,
            self.header.vocab_size,
            records.iter().map(|r| r.borrow().clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = File::open(path.as_ref())?;
        let reader = DatasetReader::new(BufReader::new(file))?;
        let header = *reader.header();
        let records = reader.collect::<Result<Vec<_>>>()?;
        Ok(Dataset { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let mut sink = BufWriter::new(File::create(path.as_ref())?);
        let n = write_dataset(&self.records, &self.header, &mut sink)?;
        sink.flush()?;
        Ok(n)
    }
}

/// Writes header and records. Returns the number of bytes emitted.
///
/// Every record is validated before anything is written.
pub fn write_dataset<R, W>(records: &[R], header: &DatasetHeader, sink: &mut W) -> Result<u64>
where
    R: Borrow<VideoRecord>,
    W: Write,
{
    header.validate().map_err(|e| invalid(e.to_string()))?;
    if header.record_count != records.len() as u64 {
        return Err(invalid(format!(
            "header declares {} records but {} were supplied",
            header.record_count,
            records.len()
        )));
    }
    for r in records {
        r.borrow().validate(header)?;
    }

    let mut written = 0u64;
    let mut put = |bytes: &[u8], sink: &mut W| -> io::Result<()> {
        written += bytes.len() as u64;
        sink.write_all(bytes)
    };

    put(MAGIC, sink)?;
    put(&header.version.to_le_bytes(), sink)?;
    put(&header.d_video.to_le_bytes(), sink)?;
    put(&header.d_audio.to_le_bytes(), sink)?;
    put(&header.vocab_size.to_le_bytes(), sink)?;
    put(&header.record_count.to_le_bytes(), sink)?;

    let mut buf = Vec::new();
    for r in records {
        let r = r.borrow();
        buf.clear();
        buf.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
        buf.extend_from_slice(&r.id);
        buf.extend_from_slice(&(r.frames.nrows() as u32).to_le_bytes());
        for v in r.frames.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(r.labels.len() as u16).to_le_bytes());
        for l in &r.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        put(&buf, sink)?;
    }
    Ok(written)
}

/// Reads the header, then returns a streaming iterator over records.
pub fn read_dataset<R: Read>(source: R) -> Result<(DatasetHeader, DatasetReader<R>)> {
    let reader = DatasetReader::new(source)?;
    Ok((*reader.header(), reader))
}

/// Streaming record reader. Yields records in file order and stops after
/// `record_count` records.
pub struct DatasetReader<R> {
    source: R,
    header: DatasetHeader,
    next_index: u64,
    max_frames: u32,
    failed: bool,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut source: R) -> Result<Self> {
        let mut raw = [0u8; HEADER_LEN];
        source
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("file shorter than the 28-byte header".into()))?;
        if &raw[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"VFR1\"",
                String::from_utf8_lossy(&raw[0..4])
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
        let header = DatasetHeader {
            version: u32_at(4),
            d_video: u32_at(8),
            d_audio: u32_at(12),
            vocab_size: u32_at(16),
            record_count: u64::from_le_bytes(raw[20..28].try_into().unwrap()),
        };
        header.validate()?;
        Ok(Self {
            source,
            header,
            next_index: 0,
            max_frames: DEFAULT_MAX_FRAMES,
            failed: false,
        })
    }

    pub fn with_max_frames(mut self, max_frames: u32) -> Self {
        self.max_frames = max_frames;
        self
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn truncated(&self, what: &str) -> Error {
        Error::Truncated {
            index: self.next_index,
            detail: format!("unexpected end of file while reading {what}"),
        }
    }

    fn read_bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.source.read_exact(buf) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(self.truncated(what)),
            Err(e) => Err(e.into()),
        }
    }

    fn read_record(&mut self) -> Result<VideoRecord> {
        let index = self.next_index;
        let bad = |detail: String| Error::Format(format!("record {index}: {detail}"));

        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];

        self.read_bytes(&mut b2, "id length")?;
        let id_len = u16::from_le_bytes(b2) as usize;
        if id_len == 0 {
            return Err(bad("empty id".into()));
        }
        let mut id = vec![0u8; id_len];
        self.read_bytes(&mut id, "id")?;

        self.read_bytes(&mut b4, "frame count")?;
        let t = u32::from_le_bytes(b4);
        if t == 0 || t > self.max_frames {
            return Err(bad(format!("frame count {t} outside [1, {}]", self.max_frames)));
        }
        let width = self.header.row_width();
        let n = t as usize * width;
        let mut raw = vec![0u8; n * 4];
        self.read_bytes(&mut raw, "features")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "record {index}, frame {}, column {}",
                pos / width.max(1),
                pos % width.max(1)
            )));
        }
        let frames = Array2::from_shape_vec((t as usize, width), values)
            .map_err(|e| bad(e.to_string()))?;

        self.read_bytes(&mut b2, "label count")?;
        let count = u16::from_le_bytes(b2) as usize;
        let mut raw = vec![0u8; count * 4];
        self.read_bytes(&mut raw, "labels")?;
        let labels: Vec<u32> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        check_labels(&labels, self.header.vocab_size).map_err(bad)?;

        Ok(VideoRecord { id, frames, labels })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<VideoRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_index >= self.header.record_count {
            return None;
        }
        let out = self.read_record();
        if out.is_err() {
            self.failed = true;
        }
        self.next_index += 1;
        Some(out)
    }
}

/// Parameters of the synthetic long-tail dataset.
///
/// Label `l` is drawn with weight `(l + 1)^-imbalance_exponent`, so label ids
/// are frequency ordered. Each label owns a unit-norm prototype in the video
/// space (and one in the audio space); a frame is the mean of the prototypes
/// of the video's labels plus spherical Gaussian noise whose expected norm
/// is `noise_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub vocab_size: u32,
    pub d_video: u32,
    pub d_audio: u32,
    pub frames_min: u32,
    pub frames_max: u32,
    pub labels_min: u32,
    pub labels_max: u32,
    pub imbalance_exponent: f64,
    pub noise_scale: f64,
    /// Probability that one emitted label of a video is replaced by a
    /// uniformly drawn label. Features are always built from the clean labels.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 1000,
            vocab_size: 50,
            d_video: 32,
            d_audio: 8,
            frames_min: 4,
            frames_max: 12,
            labels_min: 1,
            labels_max: 3,
            imbalance_exponent: 1.0,
            noise_scale: 0.1,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(invalid("num_videos must be at least 1"));
        }
        if self.vocab_size == 0 || self.d_video == 0 {
            return Err(invalid("vocab_size and d_video must be at least 1"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(invalid(format!(
                "frame range [{}, {}] is empty or starts at 0",
                self.frames_min, self.frames_max
            )));
        }
        if self.labels_min == 0 || self.labels_min > self.labels_max {
            return Err(invalid(format!(
                "label-count range [{}, {}] is empty or starts at 0",
                self.labels_min, self.labels_max
            )));
        }
        if self.labels_max > self.vocab_size {
            return Err(invalid(format!(
                "labels_max {} exceeds vocab_size {}",
                self.labels_max, self.vocab_size
            )));
        }
        if !(self.imbalance_exponent > 0.0 && self.imbalance_exponent.is_finite()) {
            return Err(invalid("imbalance_exponent must be positive and finite"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(invalid("noise_scale must be non-negative and finite"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(invalid("label_noise must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader::new(self.d_video, self.d_audio, self.vocab_size, self.num_videos as u64)
    }
}

/// Generated records together with the label prototypes that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// `vocab_size x d_video`, unit rows.
    pub video_prototypes: Array2<f64>,
    /// `vocab_size x d_audio`, unit rows (empty when `d_audio == 0`).
    pub audio_prototypes: Array2<f64>,
}

/// Pure function of the spec. Video `i` draws from its own ChaCha stream
/// `i + 1`; stream 0 holds the prototypes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let vocab = spec.vocab_size as usize;
    let dv = spec.d_video as usize;
    let da = spec.d_audio as usize;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    proto_rng.set_stream(0);
    let video_prototypes = unit_rows(&mut proto_rng, vocab, dv);
    let audio_prototypes = unit_rows(&mut proto_rng, vocab, da);

    let weights: Vec<f64> = (0..vocab)
        .map(|l| ((l + 1) as f64).powf(-spec.imbalance_exponent))
        .collect();

    let records = (0..spec.num_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            synth_video(spec, i, &weights, &video_prototypes, &audio_prototypes, &mut rng)
        })
        .collect();

    Ok(SyntheticDataset {
        dataset: Dataset::new(spec.d_video, spec.d_audio, spec.vocab_size, records),
        video_prototypes,
        audio_prototypes,
    })
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    if cols == 0 {
        return m;
    }
    for mut row in m.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row.mapv_inplace(|v| v / n);
                break;
            }
        }
    }
    m
}

/// Weighted sampling of `count` distinct labels without replacement.
fn draw_labels(rng: &mut ChaCha8Rng, weights: &[f64], count: usize) -> Vec<u32> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (l, &wl) in w.iter().enumerate() {
            if wl <= 0.0 {
                continue;
            }
            pick = Some(l);
            if u < wl {
                break;
            }
            u -= wl;
        }
        let l = pick.expect("fewer positive weights than requested labels");
        w[l] = 0.0;
        out.push(l as u32);
    }
    out.sort_unstable();
    out
}

fn synth_video(
    spec: &SyntheticSpec,
    index: usize,
    weights: &[f64],
    video_protos: &Array2<f64>,
    audio_protos: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> VideoRecord {
    let dv = spec.d_video as usize;
    let da = spec.d_audio as usize;
    let t = rng.random_range(spec.frames_min..=spec.frames_max) as usize;
    let count = rng.random_range(spec.labels_min..=spec.labels_max) as usize;
    let labels = draw_labels(rng, weights, count);

    let mut mean = vec![0.0f64; dv + da];
    for &l in &labels {
        let l = l as usize;
        for j in 0..dv {
            mean[j] += video_protos[[l, j]];
        }
        for j in 0..da {
            mean[dv + j] += audio_protos[[l, j]];
        }
    }
    let k = labels.len() as f64;
    mean.iter_mut().for_each(|v| *v /= k);

    let sv = spec.noise_scale / (dv as f64).sqrt();
    let sa = if da > 0 { spec.noise_scale / (da as f64).sqrt() } else { 0.0 };
    let mut frames = Array2::<f32>::zeros((t, dv + da));
    for mut row in frames.rows_mut() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut v = mean[j];
            if spec.noise_scale > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += z * if j < dv { sv } else { sa };
            }
            *cell = v as f32;
        }
    }

    let mut emitted = labels;
    if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
        let slot = rng.random_range(0..emitted.len());
        let replacement = rng.random_range(0..spec.vocab_size);
        emitted[slot] = replacement;
        emitted.sort_unstable();
        emitted.dedup();
    }

    VideoRecord {
        id: format!("vid{index:07}").into_bytes(),
        frames,
        labels: emitted,
    }
}
