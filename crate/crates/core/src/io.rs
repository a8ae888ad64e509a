//! On-disk formats.
//!
//! * Catalog: one class name per line; the line index is the class id.
//! * Frame labels: one class name per line.
//! * Segment labels: `name<TAB>duration` per line. Readers autodetect the
//!   two label layouts by the presence of a tab.
//! * Transcript: one class name per line.
//! * Timestamps: `frame<TAB>name` per line, frames strictly increasing.
//! * Features: `ACTSFEAT`, `u32` frames, `u32` dims, then `f32` values,
//!   all little-endian and row-major. Files without the magic are read as
//!   text with one frame per line and comma or whitespace separated values.
//! * Checkpoint: `ACTSCKPT`, `u32` version, the model config as `key=value`
//!   text, then named `f64` tensors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::pseudolabel::TimestampAnnotation;
use crate::segcore::{
    to_frames, to_segments, ClassCatalog, FeatureSequence, FrameLabeling, Segment, Segmentation,
    Transcript,
};
use crate::tensor::Mat;

pub const FEATURE_MAGIC: &[u8; 8] = b"ACTSFEAT";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err<T>(path: &Path, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn read_catalog(path: &Path) -> Result<ClassCatalog> {
    let text = read_text(path)?;
    let names = content_lines(&text)
        .map(|(_, l)| l.trim().to_string())
        .collect();
    ClassCatalog::new(names).or_else(|e| format_err(path, e.to_string()))
}

pub fn catalog_text(catalog: &ClassCatalog) -> String {
    catalog.names().iter().map(|n| format!("{n}\n")).collect()
}

fn class_id(catalog: &ClassCatalog, path: &Path, line: usize, name: &str) -> Result<usize> {
    match catalog.id(name) {
        Some(id) => Ok(id),
        None => format_err(path, format!("line {line}: unknown class {name:?}")),
    }
}

/// Frame-level or segment-level label file.
pub fn parse_labels(text: &str, catalog: &ClassCatalog, path: &Path) -> Result<Segmentation> {
    let lines: Vec<(usize, &str)> = content_lines(text).collect();
    if lines.is_empty() {
        return format_err(path, "no labels");
    }
    if lines.iter().any(|(_, l)| l.contains('\t')) {
        let mut segments = Vec::with_capacity(lines.len());
        for (n, l) in lines {
            let Some((name, dur)) = l.split_once('\t') else {
                return format_err(path, format!("line {n}: expected name<TAB>duration"));
            };
            let id = class_id(catalog, path, n, name.trim())?;
            let d: usize = match dur.trim().parse() {
                Ok(d) if d > 0 => d,
                _ => return format_err(path, format!("line {n}: bad duration {dur:?}")),
            };
            segments.push(Segment::new(id, d));
        }
        Segmentation::new(segments).or_else(|e| format_err(path, e.to_string()))
    } else {
        let labels = lines
            .iter()
            .map(|(n, l)| class_id(catalog, path, *n, l.trim()))
            .collect::<Result<Vec<_>>>()?;
        let frames = FrameLabeling::new(labels).or_else(|e| format_err(path, e.to_string()))?;
        Ok(to_segments(&frames))
    }
}

pub fn read_labels(path: &Path, catalog: &ClassCatalog) -> Result<Segmentation> {
    parse_labels(&read_text(path)?, catalog, path)
}

fn name_of(catalog: &ClassCatalog, id: usize) -> &str {
    catalog.name(id).expect("class id inside the catalog")
}

pub fn frames_text(seg: &Segmentation, catalog: &ClassCatalog) -> String {
    to_frames(seg)
        .labels()
        .iter()
        .map(|&c| format!("{}\n", name_of(catalog, c)))
        .collect()
}

pub fn segments_text(seg: &Segmentation, catalog: &ClassCatalog) -> String {
    seg.segments()
        .iter()
        .map(|s| format!("{}\t{}\n", name_of(catalog, s.action), s.duration))
        .collect()
}

pub fn transcript_text(tr: &Transcript, catalog: &ClassCatalog) -> String {
    tr.actions()
        .iter()
        .map(|&c| format!("{}\n", name_of(catalog, c)))
        .collect()
}

pub fn parse_timestamps(
    text: &str,
    catalog: &ClassCatalog,
    total_frames: usize,
    path: &Path,
) -> Result<TimestampAnnotation> {
    let mut entries = Vec::new();
    for (n, l) in content_lines(text) {
        let Some((frame, name)) = l.split_once('\t') else {
            return format_err(path, format!("line {n}: expected frame<TAB>name"));
        };
        let frame: usize = match frame.trim().parse() {
            Ok(f) => f,
            Err(_) => return format_err(path, format!("line {n}: bad frame {frame:?}")),
        };
        entries.push((frame, class_id(catalog, path, n, name.trim())?));
    }
    TimestampAnnotation::new(entries, total_frames).or_else(|e| format_err(path, e.to_string()))
}

pub fn read_timestamps(
    path: &Path,
    catalog: &ClassCatalog,
    total_frames: usize,
) -> Result<TimestampAnnotation> {
    parse_timestamps(&read_text(path)?, catalog, total_frames, path)
}

pub fn timestamps_text(ts: &TimestampAnnotation, catalog: &ClassCatalog) -> String {
    ts.entries()
        .iter()
        .map(|&(f, c)| format!("{f}\t{}\n", name_of(catalog, c)))
        .collect()
}

pub fn encode_features(x: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + x.values().data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(x.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(x.dim() as u32).to_le_bytes());
    for &v in x.values().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(self.path, "truncated file");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => format_err(self.path, "invalid UTF-8 string"),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return format_err(self.path, "trailing bytes");
        }
        Ok(())
    }
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let values = if bytes.starts_with(FEATURE_MAGIC) {
        let mut r = Reader {
            bytes,
            pos: FEATURE_MAGIC.len(),
            path,
        };
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let mut data = Vec::with_capacity(t.saturating_mul(d).min(1 << 28));
        for _ in 0..t * d {
            data.push(r.f32()? as f64);
        }
        r.finish()?;
        Mat::from_vec(t, d, data)
    } else {
        let text = match std::str::from_utf8(bytes) {
            Ok(t) => t,
            Err(_) => return format_err(path, "neither binary features nor text"),
        };
        let mut rows = Vec::new();
        for (n, l) in content_lines(text) {
            let row = l
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>();
            match row {
                Ok(r) => rows.push(r),
                Err(_) => return format_err(path, format!("line {n}: bad number")),
            }
        }
        if rows.is_empty()
            || rows
                .iter()
                .any(|r| r.len() != rows[0].len() || r.is_empty())
        {
            return format_err(path, "rows must be non-empty and equally long");
        }
        Mat::from_rows(&rows)
    };
    FeatureSequence::new(values).or_else(|e| format_err(path, e.to_string()))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    decode_features(&read_bytes(path)?, path)
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &model.config().to_kv());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, m) in model.params().iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return format_err(path, "not a checkpoint");
    }
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return format_err(path, format!("unsupported checkpoint version {version}"));
    }
    let config = ModelConfig::from_kv(&r.string()?).or_else(|e| format_err(path, e.to_string()))?;
    let count = r.u32()?;
    let mut params = Params::default();
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity((rows * cols).min(1 << 28));
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        params
            .insert(name, Mat::from_vec(rows, cols, data))
            .or_else(|e| format_err(path, e.to_string()))?;
    }
    r.finish()?;
    Model::from_parts(config, params).or_else(|e| format_err(path, e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&read_bytes(path)?, path)
}
