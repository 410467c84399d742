//! PNG frames and label maps, and the on-disk sequence layout:
//!
//! ```text
//! <sequence>/frames/00000.png   8-bit RGB
//! <sequence>/masks/00000.png    8-bit indexed, pixel value = object id
//! ```
//!
//! A dataset is a directory of sequences. File names are frame numbers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::tensor::Tensor;

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

fn decode(path: &Path, transform: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(transform);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads any 8- or 16-bit PNG as a `3×h×w` tensor with values in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let (info, buf) = decode(path, png::Transformations::EXPAND | png::Transformations::STRIP_16)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported colour type {other:?}"))),
    };
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        let px = &buf[i * channels..(i + 1) * channels];
        for c in 0..3 {
            let v = if channels < 3 { px[0] } else { px[c] };
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("write_frame", format!("expected 3×h×w, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((frame.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode(path, w, h, png::ColorType::Rgb, None, &rgb)
}

/// Reads an 8-bit single-channel (indexed or greyscale) PNG whose pixel
/// values are object ids.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (info, buf) = decode(path, png::Transformations::IDENTITY)?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::format(
            path,
            format!(
                "annotation must be an 8-bit single-channel PNG, found {:?} at {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    LabelMap::new(info.height as usize, info.width as usize, buf)
}

/// Distinct colours for ids, background black (bit-interleaved palette).
pub fn label_palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b, mut id) = (0u8, 0u8, 0u8, i);
        for shift in (0..8).rev() {
            r |= ((id & 1) as u8) << shift;
            g |= (((id >> 1) & 1) as u8) << shift;
            b |= (((id >> 2) & 1) as u8) << shift;
            id >>= 3;
        }
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let palette = label_palette();
    encode(
        path,
        labels.width(),
        labels.height(),
        png::ColorType::Indexed,
        Some(&palette),
        labels.data(),
    )
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, palette: Option<&[u8]>, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let to_fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(to_fmt)?;
    writer.write_image_data(data).map_err(to_fmt)?;
    writer.finish().map_err(to_fmt)
}

/// PNG files of `dir` ordered by the number in their stem.
pub fn numbered_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(&path, "frame files must be named by their frame number"))?;
        out.push((index, path));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::format(&w[1].1, format!("duplicate frame number {}", w[0].0)));
    }
    Ok(out)
}

/// Frames of a sequence directory, in order.
pub fn read_frames(sequence: &Path) -> Result<Vec<Tensor<f32>>> {
    let dir = sequence.join(FRAMES_DIR);
    let files = numbered_pngs(&dir)?;
    if files.is_empty() {
        return Err(Error::format(&dir, "no frames found"));
    }
    files.iter().map(|(_, p)| read_frame(p)).collect()
}

/// Every annotation of a sequence directory, with its frame number.
pub fn read_masks(sequence: &Path) -> Result<Vec<(usize, LabelMap)>> {
    numbered_pngs(&sequence.join(MASKS_DIR))?
        .into_iter()
        .map(|(i, p)| Ok((i, read_labels(&p)?)))
        .collect()
}

pub fn write_sequence(sequence: &Path, frames: &[Tensor<f32>], masks: &[LabelMap]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        write_frame(&sequence.join(FRAMES_DIR).join(frame_file_name(i)), f)?;
    }
    write_masks(sequence, masks)
}

pub fn write_masks(sequence: &Path, masks: &[LabelMap]) -> Result<()> {
    for (i, m) in masks.iter().enumerate() {
        write_labels(&sequence.join(MASKS_DIR).join(frame_file_name(i)), m)?;
    }
    Ok(())
}

fn is_sequence(dir: &Path) -> bool {
    dir.join(FRAMES_DIR).is_dir() || dir.join(MASKS_DIR).is_dir()
}

/// Sequences under `root` by name. A root that is itself a sequence yields
/// just that sequence, named after the directory.
pub fn sequence_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let name_of = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".to_string())
    };
    if is_sequence(root) {
        return Ok(vec![(name_of(root), root.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && is_sequence(&path) {
            out.push((name_of(&path), path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::format(root, "no sequence directories (with frames/ or masks/) found"));
    }
    Ok(out)
}
