//! On-disk formats: skeleton text files, tensor checkpoints and PNG images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::io::BufWriter;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::graph::SkeletonSequence;
use crate::stroi::Image;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKFZ";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// skeleton text

/// Serialize sequences as consecutive records: a `T M C label subjects`
/// header, then per subject `T * M` lines of `C` numbers.
pub fn format_skeletons(seqs: &[SkeletonSequence]) -> String {
    let mut out = String::new();
    for seq in seqs {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            seq.frames(),
            seq.joints(),
            seq.channels(),
            seq.label,
            seq.subject_count()
        );
        for subject in &seq.subjects {
            for row in subject.data().chunks(seq.channels()) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    out
}

/// Parse one or more records. Blank lines are skipped. Errors carry the
/// 1-based line at which the problem was found; a truncated body reports
/// the first missing line.
pub fn parse_skeletons(text: &str, origin: &Path) -> Result<Vec<SkeletonSequence>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let total_lines = text.lines().count();
    let mut pos = 0;
    let mut seqs = Vec::new();
    while pos < lines.len() {
        let (hline, header) = lines[pos];
        pos += 1;
        let fields: Vec<usize> = header
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(hline, format!("bad header '{header}': {e}")))?;
        let [t, m, c, label, subjects] = fields[..] else {
            return Err(err(hline, format!("header needs 5 fields (T M C label subjects), got '{header}'")));
        };
        if t == 0 || m == 0 || c == 0 || !(1..=2).contains(&subjects) {
            return Err(err(hline, format!("header '{header}' has a zero extent or unsupported subject count")));
        }
        let mut tensors = Vec::new();
        for _ in 0..subjects {
            let mut data = Vec::with_capacity(t * m * c);
            for _ in 0..t * m {
                let Some(&(lno, line)) = lines.get(pos) else {
                    let missing = lines.last().map_or(1, |l| l.0 + 1).max(total_lines + 1);
                    return Err(err(missing, format!("expected {} coordinate lines", subjects * t * m)));
                };
                pos += 1;
                let row: Vec<f32> = line
                    .split_whitespace()
                    .map(|f| f.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(lno, format!("bad number in '{line}': {e}")))?;
                if row.len() != c {
                    return Err(err(lno, format!("expected {c} values, got {}", row.len())));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(err(lno, "non-finite coordinate".into()));
                }
                data.extend(row);
            }
            tensors.push(Tensor::new(&[t, m, c], data).map_err(|e| err(hline, e.to_string()))?);
        }
        seqs.push(SkeletonSequence::new(tensors, label).map_err(|e| err(hline, e.to_string()))?);
    }
    Ok(seqs)
}

pub fn parse_skeleton_file(path: &Path) -> Result<Vec<SkeletonSequence>> {
    parse_skeletons(&read_text(path)?, path)
}

pub fn write_skeleton_file(path: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    write_bytes(path, format_skeletons(seqs).as_bytes())
}

// ---------------------------------------------------------------------------
// checkpoints

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Corrupt {
            path: self.origin.to_path_buf(),
            msg: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<BTreeMap<String, Tensor>> {
    let corrupt = |msg: String| Error::Corrupt {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(corrupt(format!("only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        origin,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| corrupt(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| corrupt("tensor too large".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large".into()))?)?;
        let data = raw.chunks(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("tensor '{name}': {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(tensors: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(tensors))
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

// ---------------------------------------------------------------------------
// images

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG of a `[3, H, W]` image in `[0, 1]`.
pub fn export_png(image: &Tensor, path: &Path) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("export_png", image.shape(), &[3, 0, 0]));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_byte(image.data()[c * plane + i]));
        }
    }
    write_png(&Image::new(w, h, bytes)?, path)
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let as_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(as_io)?;
    writer.write_image_data(image.data()).map_err(as_io)?;
    writer.finish().map_err(as_io)
}

/// Read an 8-bit RGB or RGBA PNG (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = png::Decoder::new(file).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let px = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    Image::new(info.width as usize, info.height as usize, data)
}
