//! `P360` tensor container, model checkpoints and binary PPM frames.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "P360"  version:u8 = 1  count:u32
//! per entry: name_len:u32  name:utf8  rank:u8  extents:u32 x rank  payload:f32 x prod(extents)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::unet::{DenoiserConfig, PanoModel};

pub const MAGIC: [u8; 4] = *b"P360";
pub const VERSION: u8 = 1;

/// One named array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub extents: Vec<u32>,
    pub data: Vec<f32>,
}

impl Entry {
    /// Rank-5 entry holding `t` in `(B, C, F, H, W)` order.
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Entry {
            name: name.into(),
            extents: t.shape().dims().iter().map(|&d| d as u32).collect(),
            data: t.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f32>) -> Self {
        Entry {
            name: name.into(),
            extents: vec![data.len() as u32],
            data,
        }
    }

    /// Entries of rank at most 5 map to the trailing tensor axes.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.extents.len() > 5 {
            return Err(Error::invalid(
                "load_tensor",
                format!("entry `{}` has rank {} (at most 5 supported)", self.name, self.extents.len()),
            ));
        }
        let mut dims = [1usize; 5];
        let off = 5 - self.extents.len();
        for (i, &e) in self.extents.iter().enumerate() {
            dims[off + i] = e as usize;
        }
        Tensor::new(Shape::from_dims(dims), self.data.clone())
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let payload: usize = entries.iter().map(|e| e.data.len() * 4 + e.name.len() + 9 + 4 * e.extents.len()).sum();
    let mut out = Vec::with_capacity(9 + payload);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let n: u64 = e.extents.iter().map(|&x| x as u64).product();
        if n != e.data.len() as u64 || e.extents.len() > u8::MAX as usize {
            return Err(Error::invalid(
                "save_tensor",
                format!("entry `{}`: extents {:?} do not match {} values", e.name, e.extents, e.data.len()),
            ));
        }
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.extents.len() as u8);
        for x in &e.extents {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::BadName)?.to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u32("extents")?);
        }
        let n = extents
            .iter()
            .try_fold(1u64, |acc, &x| acc.checked_mul(x as u64))
            .and_then(|n| n.checked_mul(4))
            .filter(|&bytes| bytes <= usize::MAX as u64);
        let Some(bytes) = n else {
            return Err(Error::ExtentOverflow {
                name,
                extents: extents.iter().map(|&x| x as u64).collect(),
            });
        };
        if bytes as usize > r.remaining() {
            return Err(Error::Truncated("payload"));
        }
        let data = r
            .take(bytes as usize, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(Entry { name, extents, data });
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    fs::write(path, encode(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `t` as the single entry `name`.
pub fn save_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    write_entries(path, &[Entry::from_tensor(name, t)])
}

/// Loads the entry `name` (or the only entry when `name` is `None`).
pub fn load_tensor(path: &Path, name: Option<&str>) -> Result<Tensor> {
    let entries = read_entries(path)?;
    let found = match name {
        Some(n) => entries.iter().find(|e| e.name == n),
        None if entries.len() == 1 => entries.first(),
        None => None,
    };
    found
        .ok_or_else(|| {
            Error::invalid(
                "load_tensor",
                format!("{}: no entry {}", path.display(), name.map_or("(file holds several)".into(), |n| format!("`{n}`"))),
            )
        })?
        .to_tensor()
}

pub const DENOISER_CONFIG: &str = "config.denoiser";
pub const ADAPTER_CONFIG: &str = "config.adapter";

fn adapter_to_vec(a: &AdapterConfig) -> Vec<f32> {
    let c = a.channels;
    [a.in_channels, c[0], c[1], c[2], c[3], a.unshuffle_factor, a.zero_init_output as usize]
        .iter()
        .map(|&v| v as f32)
        .collect()
}

fn adapter_from_vec(v: &[f32]) -> Result<AdapterConfig> {
    if v.len() != 7 || v.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
        return Err(Error::invalid("adapter config", "expected 7 non-negative integers"));
    }
    let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
    Ok(AdapterConfig {
        in_channels: u[0],
        channels: [u[1], u[2], u[3], u[4]],
        unshuffle_factor: u[5],
        zero_init_output: u[6] != 0,
    })
}

/// Config echo followed by every parameter in store order.
pub fn model_entries(model: &PanoModel) -> Vec<Entry> {
    let mut entries = vec![
        Entry::vector(DENOISER_CONFIG, model.denoiser.to_vec()),
        Entry::vector(ADAPTER_CONFIG, adapter_to_vec(&model.adapter)),
    ];
    entries.extend(model.params.iter().map(|p| Entry::from_tensor(p.name.clone(), &p.value)));
    entries
}

pub fn save_model(path: &Path, model: &PanoModel) -> Result<()> {
    write_entries(path, &model_entries(model))
}

pub fn load_model(path: &Path) -> Result<PanoModel> {
    let entries = read_entries(path)?;
    let config = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::invalid("load_model", format!("{}: missing `{name}`", path.display())))
    };
    let denoiser = DenoiserConfig::from_vec(&config(DENOISER_CONFIG)?.data)?;
    let adapter = adapter_from_vec(&config(ADAPTER_CONFIG)?.data)?;
    let mut params = ParamStore::new();
    for e in entries.iter().filter(|e| !e.name.starts_with("config.")) {
        params.insert(e.name.clone(), e.to_tensor()?);
    }
    Ok(PanoModel {
        denoiser,
        adapter,
        params,
    })
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// One binary PPM per frame: `frame_0000.ppm`, ... for a single clip,
/// `b00_frame_0000.ppm`, ... when the batch holds several. Values are
/// clamped to `[0, 1]` and mapped to `round(v · 255)`, halves rounding up.
/// Single-channel video is replicated to gray.
pub fn write_frames_ppm(video: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    let s = video.shape();
    if s.channels != 3 && s.channels != 1 {
        return Err(Error::Ppm(format!("need 1 or 3 channels, got {s}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(s.batch * s.frames);
    for b in 0..s.batch {
        for f in 0..s.frames {
            let name = if s.batch == 1 {
                format!("frame_{f:04}.ppm")
            } else {
                format!("b{b:02}_frame_{f:04}.ppm")
            };
            let path = dir.join(name);
            let mut bytes = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
            for y in 0..s.height {
                for x in 0..s.width {
                    for c in 0..3 {
                        let ch = if s.channels == 1 { 0 } else { c };
                        bytes.push(to_byte(video.get([b, ch, f, y, x])));
                    }
                }
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Decoded binary PPM with 8-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

pub fn parse_ppm(buf: &[u8]) -> Result<Ppm> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Ppm("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P6" {
        return Err(Error::Ppm(format!("expected P6, got {}", tokens[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Ppm(format!("bad header number `{s}`")));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Ppm(format!("only maxval 255 is supported, got {maxval}")));
    }
    let n = width * height * 3;
    let rgb = buf
        .get(pos..pos + n)
        .ok_or_else(|| Error::Ppm(format!("expected {n} sample bytes")))?
        .to_vec();
    Ok(Ppm { width, height, rgb })
}

pub fn read_ppm(path: &Path) -> Result<Ppm> {
    parse_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads every `*.ppm` in `dir` (sorted by name) as frames of one clip with
/// values `byte / 255`.
pub fn read_frames_ppm(dir: &Path) -> Result<Tensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ppm(format!("no .ppm files in {}", dir.display())));
    }
    let frames: Vec<Ppm> = paths.iter().map(|p| read_ppm(p)).collect::<Result<_>>()?;
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::Ppm("frames differ in size".into()));
    }
    let nf = frames.len();
    Ok(Tensor::from_fn(Shape::new(1, 3, nf, h, w), |[_, c, f, y, x]| {
        frames[f].rgb[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}
