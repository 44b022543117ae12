//! File formats: 16-bit binary PGM (P5, maxval 65535, big-endian samples),
//! 16-bit single-channel uncompressed little-endian TIFF, and the
//! `frames.csv` sequence index (`timestamp_s,filename`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{FpnPattern, ImageError, RadiometricImage};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a binary PGM (magic {found:?}, expected \"P5\")")]
    BadMagic { path: PathBuf, found: String },
    #[error("{path}: malformed PGM header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: unsupported maxval {maxval}, expected 65535 (16-bit)")]
    UnsupportedMaxval { path: PathBuf, maxval: u64 },
    #[error("{path}: truncated pixel data, expected {expected} bytes, got {got}")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{path}: TIFF error: {source}")]
    Tiff {
        path: PathBuf,
        #[source]
        source: tiff::TiffError,
    },
    #[error("{path}: unsupported TIFF layout: {reason}")]
    UnsupportedTiff { path: PathBuf, reason: String },
    #[error("{path}: unsupported image extension (expected .pgm, .tif, or .tiff)")]
    UnsupportedExtension { path: PathBuf },
    #[error("{path}, line {line}: malformed frame index: {reason}")]
    BadIndex { path: PathBuf, line: usize, reason: String },
    #[error("{path}, line {line}: timestamps must be strictly increasing")]
    NonMonotoneTimestamps { path: PathBuf, line: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path, source: std::io::Error) -> ImageIoError {
    ImageIoError::Io { path: path.to_path_buf(), source }
}

/// Writes a 16-bit binary PGM (`P5`, maxval 65535, big-endian sample order).
/// Counts are rounded to the nearest integer.
pub fn write_pgm16(path: &Path, image: &RadiometricImage) -> Result<(), ImageIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n65535\n", image.width(), image.height()).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::with_capacity(image.as_slice().len() * 2);
    for &v in image.as_slice() {
        let q = v.round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn read_pgm_token(r: &mut impl Read, path: &Path) -> Result<String, ImageIoError> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        let n = r.read(&mut byte).map_err(|e| io_err(path, e))?;
        if n == 0 {
            if token.is_empty() {
                return Err(ImageIoError::BadHeader {
                    path: path.to_path_buf(),
                    reason: "unexpected end of header".into(),
                });
            }
            return Ok(token);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
    }
}

/// Reads a 16-bit binary PGM. The returned timestamp is 0; sequence readers
/// attach timestamps from `frames.csv`.
pub fn read_pgm16(path: &Path) -> Result<RadiometricImage, ImageIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let magic = read_pgm_token(&mut r, path)?;
    if magic != "P5" {
        return Err(ImageIoError::BadMagic { path: path.to_path_buf(), found: magic });
    }
    let mut dims = [0u64; 3];
    for d in &mut dims {
        let token = read_pgm_token(&mut r, path)?;
        *d = token.parse().map_err(|_| ImageIoError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("non-numeric header field {token:?}"),
        })?;
    }
    let (width, height, maxval) = (dims[0] as usize, dims[1] as usize, dims[2]);
    if maxval != 65535 {
        return Err(ImageIoError::UnsupportedMaxval { path: path.to_path_buf(), maxval });
    }
    let expected = width * height * 2;
    let mut bytes = Vec::with_capacity(expected);
    r.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() < expected {
        return Err(ImageIoError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    let data = bytes[..expected]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64)
        .collect();
    Ok(RadiometricImage::new(width, height, 0.0, data)?)
}

/// Writes a 16-bit single-channel uncompressed little-endian TIFF.
pub fn write_tiff16(path: &Path, image: &RadiometricImage) -> Result<(), ImageIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let data: Vec<u16> =
        image.as_slice().iter().map(|&v| v.round().clamp(0.0, 65535.0) as u16).collect();
    let mut encoder = tiff::encoder::TiffEncoder::new(BufWriter::new(file))
        .map_err(|source| ImageIoError::Tiff { path: path.to_path_buf(), source })?;
    encoder
        .write_image::<tiff::encoder::colortype::Gray16>(
            image.width() as u32,
            image.height() as u32,
            &data,
        )
        .map_err(|source| ImageIoError::Tiff { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Reads a 16-bit single-channel TIFF.
pub fn read_tiff16(path: &Path) -> Result<RadiometricImage, ImageIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = tiff::decoder::Decoder::new(BufReader::new(file))
        .map_err(|source| ImageIoError::Tiff { path: path.to_path_buf(), source })?;
    let (width, height) = decoder
        .dimensions()
        .map_err(|source| ImageIoError::Tiff { path: path.to_path_buf(), source })?;
    let image = decoder
        .read_image()
        .map_err(|source| ImageIoError::Tiff { path: path.to_path_buf(), source })?;
    let buf = match image {
        tiff::decoder::DecodingResult::U16(buf) => buf,
        other => {
            return Err(ImageIoError::UnsupportedTiff {
                path: path.to_path_buf(),
                reason: format!("expected 16-bit samples, got {:?}", sample_kind(&other)),
            })
        }
    };
    let data: Vec<f64> = buf.into_iter().map(f64::from).collect();
    Ok(RadiometricImage::new(width as usize, height as usize, 0.0, data)?)
}

fn sample_kind(result: &tiff::decoder::DecodingResult) -> &'static str {
    use tiff::decoder::DecodingResult::*;
    match result {
        U8(_) => "u8",
        U16(_) => "u16",
        U32(_) => "u32",
        U64(_) => "u64",
        I8(_) => "i8",
        I16(_) => "i16",
        I32(_) => "i32",
        I64(_) => "i64",
        F32(_) => "f32",
        F64(_) => "f64",
    }
}

/// Writes by extension: `.pgm` or `.tif`/`.tiff`.
pub fn write_image(path: &Path, image: &RadiometricImage) -> Result<(), ImageIoError> {
    match extension(path) {
        Some("pgm") => write_pgm16(path, image),
        Some("tif") | Some("tiff") => write_tiff16(path, image),
        _ => Err(ImageIoError::UnsupportedExtension { path: path.to_path_buf() }),
    }
}

/// Reads by extension: `.pgm` or `.tif`/`.tiff`.
pub fn read_image(path: &Path) -> Result<RadiometricImage, ImageIoError> {
    match extension(path) {
        Some("pgm") => read_pgm16(path),
        Some("tif") | Some("tiff") => read_tiff16(path),
        _ => Err(ImageIoError::UnsupportedExtension { path: path.to_path_buf() }),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

/// One row of `frames.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub filename: String,
}

/// Writes the sequence index with header `timestamp_s,filename`.
pub fn write_frames_csv(path: &Path, entries: &[FrameEntry]) -> Result<(), ImageIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "timestamp_s,filename").map_err(|e| io_err(path, e))?;
    for e in entries {
        writeln!(w, "{:.9},{}", e.timestamp, e.filename).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads and validates the sequence index: header row, two columns,
/// strictly increasing timestamps.
pub fn read_frames_csv(path: &Path) -> Result<Vec<FrameEntry>, ImageIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    let mut last: Option<f64> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if line != "timestamp_s,filename" {
                return Err(ImageIoError::BadIndex {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: format!("expected header \"timestamp_s,filename\", got {line:?}"),
                });
            }
            continue;
        }
        let (ts, name) = line.split_once(',').ok_or_else(|| ImageIoError::BadIndex {
            path: path.to_path_buf(),
            line: i + 1,
            reason: "expected two comma-separated columns".into(),
        })?;
        let timestamp: f64 = ts.trim().parse().map_err(|_| ImageIoError::BadIndex {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("non-numeric timestamp {ts:?}"),
        })?;
        if let Some(prev) = last {
            if timestamp <= prev {
                return Err(ImageIoError::NonMonotoneTimestamps {
                    path: path.to_path_buf(),
                    line: i + 1,
                });
            }
        }
        last = Some(timestamp);
        entries.push(FrameEntry { timestamp, filename: name.trim().to_string() });
    }
    Ok(entries)
}

/// Lazily reads frames of a directory-based sequence. Frames are loaded on
/// demand so long sequences never sit in memory at once.
#[derive(Debug, Clone)]
pub struct SequenceReader {
    dir: PathBuf,
    entries: Vec<FrameEntry>,
}

impl SequenceReader {
    /// Opens `dir/frames.csv` and validates it.
    pub fn open(dir: &Path) -> Result<Self, ImageIoError> {
        let entries = read_frames_csv(&dir.join("frames.csv"))?;
        Ok(Self { dir: dir.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FrameEntry] {
        &self.entries
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        self.entries[index].timestamp
    }

    /// Loads frame `index` and stamps it with the index timestamp.
    pub fn frame(&self, index: usize) -> Result<RadiometricImage, ImageIoError> {
        let entry = &self.entries[index];
        let image = read_image(&self.dir.join(&entry.filename))?;
        Ok(image.with_timestamp(entry.timestamp))
    }
}

/// Loads a directory of 16-bit PGM flat-field frames as de-meaned
/// fixed-pattern offsets, sorted by file name for determinism.
pub fn load_fpn_bank(dir: &Path) -> Result<Vec<FpnPattern>, ImageIoError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| extension(p) == Some("pgm"))
        .collect();
    names.sort();
    let mut bank = Vec::with_capacity(names.len());
    for path in names {
        let frame = read_pgm16(&path)?;
        let mean = frame.mean();
        let offsets = frame.as_slice().iter().map(|&v| v - mean).collect();
        bank.push(FpnPattern::new(frame.width(), frame.height(), offsets)?);
    }
    Ok(bank)
}
