//! Readers and writers for flow fields, label rasters, images and dataset
//! manifests.
//!
//! `.flo` follows the Middlebury layout: a little-endian `f32` magic of
//! `202021.25`, `i32` width and height, then `width * height` interleaved
//! `(u, v)` little-endian `f32` pairs. Label rasters are single-channel
//! 8-bit images (binary PGM or PNG, chosen by extension) with ignore stored
//! as 255.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Image, LabelMap};
use crate::oracles::{MotionNoiseConfig, SemanticNoiseConfig};
use crate::synth::Sequence;

pub const FLO_MAGIC: f32 = 202021.25;
pub const RASTER_IGNORE: u8 = 255;
pub const MANIFEST_VERSION: &str = "labelprop-manifest/1";

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// .flo

pub fn encode_flo(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + field.data().len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width() as i32).to_le_bytes());
    out.extend_from_slice(&(field.height() as i32).to_le_bytes());
    for [u, v] in field.data() {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |i: usize| -> Option<[u8; 4]> { bytes.get(i..i + 4).map(|b| b.try_into().unwrap()) };
    let header = word(0)
        .zip(word(4))
        .zip(word(8))
        .ok_or_else(|| Error::Format(format!(".flo header truncated ({} bytes)", bytes.len())))?;
    let ((magic, w), h) = header;
    let magic = f32::from_le_bytes(magic);
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!(".flo magic {magic} != {FLO_MAGIC}")));
    }
    let (w, h) = (i32::from_le_bytes(w), i32::from_le_bytes(h));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!(".flo dimensions {w}x{h} not positive")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format(".flo dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".flo payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
            ]
        })
        .collect();
    FlowField::new(w, h, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_all(path.as_ref())?)
}

pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_all(path.as_ref(), &encode_flo(field))
}

// ---------------------------------------------------------------------------
// 8-bit rasters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RasterKind {
    Png,
    Pnm,
}

fn raster_kind(path: &Path) -> Result<RasterKind> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(RasterKind::Png),
        Some("pgm") | Some("ppm") | Some("pnm") => Ok(RasterKind::Pnm),
        _ => Err(Error::Format(format!(
            "{}: unsupported raster extension",
            path.display()
        ))),
    }
}

/// Decoded 8-bit raster: `channels` interleaved samples per pixel.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn pnm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("PNM header truncated".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    if i >= bytes.len() {
        return Err(Error::Format("PNM payload missing".into()));
    }
    Ok((tokens, i + 1))
}

fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let (tok, offset) = pnm_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM kind {other}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&tok[1])?, parse(&tok[2])?, parse(&tok[3])?);
    if width == 0 || height == 0 {
        return Err(Error::Format("PNM dimensions must be positive".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("PNM maxval {maxval} unsupported (need 255)")));
    }
    let n = width * height * channels;
    let payload = &bytes[offset..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "PNM payload is {} bytes, expected {n}",
            payload.len()
        )));
    }
    Ok(Raster { width, height, channels, data: payload.to_vec() })
}

fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

fn decode_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit PNG is supported",
            path.display()
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::GrayscaleAlpha => 2,
    };
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    if info.line_size != width * channels {
        return Err(Error::Format(format!("{}: unexpected PNG row size", path.display())));
    }
    Ok(Raster { width, height, channels, data: buf })
}

fn encode_png(r: &Raster, palette: Option<&[u8]>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_depth(png::BitDepth::Eight);
        match (r.channels, palette) {
            (1, Some(p)) => {
                enc.set_color(png::ColorType::Indexed);
                enc.set_palette(p.to_vec());
            }
            (1, None) => enc.set_color(png::ColorType::Grayscale),
            _ => enc.set_color(png::ColorType::Rgb),
        }
        let fail = |e: png::EncodingError| Error::Format(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(fail)?;
        writer.write_image_data(&r.data).map_err(fail)?;
        writer.finish().map_err(fail)?;
    }
    Ok(out)
}

fn read_raster(path: &Path) -> Result<Raster> {
    match raster_kind(path)? {
        RasterKind::Png => decode_png(path),
        RasterKind::Pnm => decode_pnm(&read_all(path)?),
    }
}

/// Visualization palette: 256 RGB triples, ignore rendered black.
pub fn label_palette(num_classes: usize) -> Vec<u8> {
    const BASE: [[u8; 3]; 12] = [
        [70, 130, 180],
        [128, 64, 128],
        [150, 100, 80],
        [220, 20, 60],
        [250, 170, 30],
        [60, 180, 75],
        [170, 50, 200],
        [230, 230, 230],
        [0, 128, 128],
        [255, 225, 25],
        [145, 30, 180],
        [210, 245, 60],
    ];
    let mut pal = vec![0u8; 256 * 3];
    for c in 0..num_classes.min(255) {
        let rgb = if c < BASE.len() {
            BASE[c]
        } else {
            let h = (c as u32).wrapping_mul(2654435761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        };
        pal[c * 3..c * 3 + 3].copy_from_slice(&rgb);
    }
    pal
}

/// Reads a label raster, mapping stored 255 to `ignore_id`.
pub fn read_label_image(path: impl AsRef<Path>, num_classes: usize, ignore_id: u8) -> Result<LabelMap> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    if r.channels != 1 {
        return Err(Error::Format(format!(
            "{}: label raster has {} channels, expected 1",
            path.display(),
            r.channels
        )));
    }
    let data = r
        .data
        .into_iter()
        .map(|v| if v == RASTER_IGNORE { ignore_id } else { v })
        .collect();
    LabelMap::new(r.width, r.height, num_classes, ignore_id, data)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Writes a label raster. PNG output is palette-indexed and a `palette.json`
/// sidecar describing the class colors is placed next to it.
pub fn write_label_image(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let kind = raster_kind(path)?;
    let data = labels
        .data()
        .iter()
        .map(|&v| if v == labels.ignore_id() { RASTER_IGNORE } else { v })
        .collect();
    let raster = Raster { width: labels.width(), height: labels.height(), channels: 1, data };
    match kind {
        RasterKind::Pnm => write_all(path, &encode_pnm(&raster)),
        RasterKind::Png => {
            let pal = label_palette(labels.num_classes());
            write_all(path, &encode_png(&raster, Some(&pal))?)?;
            write_palette_sidecar(path, labels.num_classes(), &pal)
        }
    }
}

fn write_palette_sidecar(label_path: &Path, num_classes: usize, pal: &[u8]) -> Result<()> {
    let dir = label_path.parent().unwrap_or_else(|| Path::new("."));
    let target = dir.join("palette.json");
    let mut entries: Vec<serde_json::Value> = (0..num_classes)
        .map(|c| serde_json::json!({ "id": c, "rgb": &pal[c * 3..c * 3 + 3] }))
        .collect();
    entries.push(serde_json::json!({ "id": RASTER_IGNORE, "rgb": [0, 0, 0], "ignore": true }));
    let body = serde_json::to_vec_pretty(&entries).expect("palette serializes");
    if fs::read(&target).map(|old| old == body).unwrap_or(false) {
        return Ok(());
    }
    // rename keeps concurrent writers from observing a partial file
    let tmp = dir.join(format!(
        ".palette.{}.{}.tmp",
        std::process::id(),
        label_path.file_name().and_then(|n| n.to_str()).unwrap_or("x")
    ));
    write_all(&tmp, &body)?;
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))
}

/// Reads an RGB image (PNG or binary PPM) with values scaled to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    let data: Vec<f32> = match r.channels {
        3 => r.data.iter().map(|&v| v as f32 / 255.0).collect(),
        1 => r.data.iter().flat_map(|&v| [v as f32 / 255.0; 3]).collect(),
        4 => r
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]].map(|v| v as f32 / 255.0))
            .collect(),
        n => {
            return Err(Error::Format(format!(
                "{}: {n}-channel raster is not an RGB image",
                path.display()
            )))
        }
    };
    Image::new(r.width, r.height, 3, data)
}

pub fn quantize_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB image; single-channel images are written as gray.
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let channels = match image.channels() {
        1 | 3 => image.channels(),
        n => return Err(Error::Shape(format!("cannot write {n}-channel image"))),
    };
    let raster = Raster {
        width: image.width(),
        height: image.height(),
        channels,
        data: image.data().iter().map(|&v| quantize_unit(v)).collect(),
    };
    match raster_kind(path)? {
        RasterKind::Pnm => write_all(path, &encode_pnm(&raster)),
        RasterKind::Png => write_all(path, &encode_png(&raster, None)?),
    }
}

// ---------------------------------------------------------------------------
// manifests

/// Files for one frame, relative to the manifest directory. `flow` maps this
/// frame back to the previous one; `rev_flow` maps it to the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rev_flow: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub annotated_index: usize,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
    pub num_classes: usize,
    pub ignore_id: u8,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub motion_noise: MotionNoiseConfig,
    pub semantic_noise: SemanticNoiseConfig,
    pub sequences: Vec<SequenceEntry>,
    /// Directory the relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn validate_structure(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {:?}, expected {MANIFEST_VERSION:?}",
                self.format_version
            )));
        }
        if self.num_classes == 0 || self.num_classes > self.ignore_id as usize {
            return Err(Error::Validation(format!(
                "num_classes {} incompatible with ignore_id {}",
                self.num_classes, self.ignore_id
            )));
        }
        for s in &self.sequences {
            if s.frames.len() != s.frame_count {
                return Err(Error::Validation(format!(
                    "sequence {}: frame_count {} but {} frame entries",
                    s.name,
                    s.frame_count,
                    s.frames.len()
                )));
            }
            if s.annotated_index >= s.frame_count {
                return Err(Error::Validation(format!(
                    "sequence {}: annotated index {} out of range",
                    s.name, s.annotated_index
                )));
            }
        }
        self.motion_noise.validate()?;
        self.semantic_noise.validate(self.num_classes)?;
        Ok(())
    }

    fn referenced_files(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.sequences.iter().flat_map(|s| {
            s.frames.iter().flat_map(move |f| {
                [Some(&f.image), Some(&f.label), f.flow.as_ref(), f.rev_flow.as_ref()]
                    .into_iter()
                    .flatten()
                    .map(move |p| (s.name.as_str(), p.as_str()))
            })
        })
    }
}

/// Loads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_structure()?;
    for (seq, rel) in manifest.referenced_files() {
        let full = manifest.resolve(rel);
        if !full.is_file() {
            return Err(Error::io(
                full,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("referenced by sequence {seq} as {rel:?}"),
                ),
            ));
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate_structure()?;
    let mut body = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    body.push(b'\n');
    write_all(path, &body)
}

/// Writes every frame of `seq` under `root/name/` and returns its manifest entry.
pub fn write_sequence(seq: &Sequence, root: &Path, name: &str) -> Result<SequenceEntry> {
    let (width, height) = seq.dims();
    let mut frames = Vec::with_capacity(seq.len());
    for k in 0..seq.len() {
        let rel = |kind: &str, ext: &str| format!("{name}/{kind}_{k:03}.{ext}");
        let entry = FrameEntry {
            image: rel("frame", "png"),
            label: rel("label", "png"),
            flow: seq.flows[k].as_ref().map(|_| rel("flow", "flo")),
            rev_flow: seq.rev_flows[k].as_ref().map(|_| rel("revflow", "flo")),
        };
        write_image(&seq.frames[k], root.join(&entry.image))?;
        write_label_image(&seq.labels[k], root.join(&entry.label))?;
        if let (Some(f), Some(p)) = (&seq.flows[k], &entry.flow) {
            write_flo(f, root.join(p))?;
        }
        if let (Some(f), Some(p)) = (&seq.rev_flows[k], &entry.rev_flow) {
            write_flo(f, root.join(p))?;
        }
        frames.push(entry);
    }
    Ok(SequenceEntry {
        name: name.to_string(),
        width,
        height,
        frame_count: seq.len(),
        annotated_index: seq.annotated_index,
        frames,
    })
}

/// Loads one manifest sequence; provenance flags are not stored on disk.
pub fn read_sequence(manifest: &DatasetManifest, entry: &SequenceEntry) -> Result<Sequence> {
    let dims = (entry.width, entry.height);
    let check = |what: &str, got: (usize, usize)| -> Result<()> {
        if got != dims {
            return Err(Error::Validation(format!(
                "sequence {}: {what} is {}x{}, manifest says {}x{}",
                entry.name, got.0, got.1, dims.0, dims.1
            )));
        }
        Ok(())
    };
    let mut seq = Sequence {
        frames: Vec::new(),
        labels: Vec::new(),
        flows: Vec::new(),
        rev_flows: Vec::new(),
        annotated_index: entry.annotated_index,
        provenance: Vec::new(),
        rev_provenance: Vec::new(),
    };
    for f in &entry.frames {
        let image = read_image(manifest.resolve(&f.image))?;
        check(&f.image, image.dims())?;
        let label = read_label_image(manifest.resolve(&f.label), manifest.num_classes, manifest.ignore_id)?;
        check(&f.label, label.dims())?;
        let load_flow = |p: &Option<String>| -> Result<Option<FlowField>> {
            p.as_ref()
                .map(|p| {
                    let fl = read_flo(manifest.resolve(p))?;
                    check(p, fl.dims())?;
                    Ok(fl)
                })
                .transpose()
        };
        seq.flows.push(load_flow(&f.flow)?);
        seq.rev_flows.push(load_flow(&f.rev_flow)?);
        seq.frames.push(image);
        seq.labels.push(label);
    }
    Ok(seq)
}

/// Reads a whole file into memory through a buffered reader.
pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Writes bytes, creating parent directories.
pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
