//! DAVIS-layout ingestion, mask and colour PNG output, and the Middlebury
//! `.flo` codec.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, resize_mask_nearest, BinaryMask, FlowField, Image};

/// Magic number opening every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER_BYTES: usize = 12;

/// Working resolution as `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSize {
    pub height: usize,
    pub width: usize,
}

impl Default for FrameSize {
    fn default() -> Self {
        Self { height: 448, width: 832 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// Empty when the sequence has no annotations.
    pub annotations: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetIndex {
    pub fn sequence(&self, name: &str) -> Result<&SequenceEntry> {
        self.sequences
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Dataset(format!("no sequence named `{name}`")))
    }
}

pub fn frames_dir(root: &Path) -> PathBuf {
    root.join("JPEGImages").join("480p")
}

pub fn annotations_dir(root: &Path) -> PathBuf {
    root.join("Annotations").join("480p")
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads a split list: one sequence name per line, `#` comments and blank
/// lines ignored.
pub fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read split list {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Indexes `root/JPEGImages/480p/<seq>` and the matching annotation
/// directories, optionally restricted to the sequences named in `split`.
pub fn load_davis_index(root: &Path, split: Option<&Path>) -> Result<DatasetIndex> {
    let wanted = split.map(read_split_list).transpose()?;
    load_davis_index_filtered(root, wanted.as_deref())
}

/// Like [`load_davis_index`] with the sequence filter given directly.
pub fn load_davis_index_filtered(root: &Path, wanted: Option<&[String]>) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let frame_root = frames_dir(root);
    if !frame_root.is_dir() {
        return Err(Error::Dataset(format!("missing frame directory {}", frame_root.display())));
    }
    let mut names: Vec<String> = fs::read_dir(&frame_root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    names.sort();
    if let Some(wanted) = wanted {
        if let Some(missing) = wanted.iter().find(|w| !names.contains(w)) {
            return Err(Error::Dataset(format!("split names unknown sequence `{missing}`")));
        }
        names.retain(|n| wanted.contains(n));
    }

    let mut sequences = Vec::with_capacity(names.len());
    for name in names {
        let frames = sorted_files(&frame_root.join(&name), &["jpg", "jpeg", "png"])?;
        if frames.is_empty() {
            return Err(Error::Dataset(format!("sequence `{name}` has no frames")));
        }
        let ann_dir = annotations_dir(root).join(&name);
        let annotations = if ann_dir.is_dir() { sorted_files(&ann_dir, &["png"])? } else { Vec::new() };
        if !annotations.is_empty() && annotations.len() != frames.len() {
            return Err(Error::Dataset(format!(
                "sequence `{name}` has {} frames but {} annotations",
                frames.len(),
                annotations.len()
            )));
        }
        sequences.push(SequenceEntry { name, frames, annotations });
    }
    Ok(DatasetIndex { root: root.to_path_buf(), sequences })
}

fn decode_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode { path: path.to_path_buf(), message: e.to_string() }
}

/// Decodes a JPEG or PNG frame as RGB with intensities in [0, 1].
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// Frames `t` and `t + 1` of a sequence, resized bilinearly to `size`.
pub fn load_frame_pair(index: &DatasetIndex, seq: &str, t: usize, size: FrameSize) -> Result<(Image, Image)> {
    let entry = index.sequence(seq)?;
    if t + 1 >= entry.frames.len() {
        return Err(Error::Dataset(format!(
            "frame {t} of `{seq}` has no successor ({} frames)",
            entry.frames.len()
        )));
    }
    let load = |p: &Path| -> Result<Image> {
        let img = load_image(p)?;
        if img.height == size.height && img.width == size.width {
            Ok(img)
        } else {
            resize_bilinear(&img, size.height, size.width)
        }
    };
    Ok((load(&entry.frames[t])?, load(&entry.frames[t + 1])?))
}

/// Nonzero-label mask of an indexed, grayscale or colour PNG at its native size.
/// Palette indices are read raw, never expanded to colours.
pub fn read_label_mask(path: &Path) -> Result<BinaryMask> {
    let file = fs::File::open(path).map_err(|e| decode_error(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_error(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_error(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = info.bit_depth as usize;
    let (samples, label_samples) = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
    };
    let mut mask = BinaryMask::new(h, w);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let nonzero = (0..label_samples).any(|s| {
                let sample = x * samples + s;
                match bits {
                    8 => row[sample] != 0,
                    16 => row[2 * sample] != 0 || row[2 * sample + 1] != 0,
                    b => {
                        let bit = sample * b;
                        let byte = row[bit / 8];
                        let shift = 8 - b - bit % 8;
                        (byte >> shift) & ((1u8 << b) - 1) != 0
                    }
                }
            });
            mask.set(x, y, nonzero);
        }
    }
    Ok(mask)
}

/// Foreground iff label ≠ 0, resized to `size` by nearest neighbour.
pub fn binarize_annotation(path: &Path, size: FrameSize) -> Result<BinaryMask> {
    let mask = read_label_mask(path)?;
    Ok(if mask.height == size.height && mask.width == size.width {
        mask
    } else {
        resize_mask_nearest(&mask, size.height, size.width)
    })
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// 8-bit grayscale PNG with foreground 255 and background 0.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, &data)
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask)?)
}

/// 8-bit PNG of a 1- or 3-channel image.
pub fn write_image_png(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::UnsupportedChannels(c)),
    };
    let data: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    write_atomic(path, &encode_png(img.width, img.height, color, &data)?)
}

/// Serialises a flow field in the Middlebury layout.
pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    if flow.u.iter().chain(&flow.v).any(|v| !v.is_finite() || !(*v as f32).is_finite()) {
        return Err(Error::InvalidArgument("flow contains values not representable as finite f32".into()));
    }
    let n = flow.height * flow.width;
    let mut out = Vec::with_capacity(FLO_HEADER_BYTES + 8 * n);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..n {
        out.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        out.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < FLO_HEADER_BYTES {
        return Err(Error::Truncated { expected: FLO_HEADER_BYTES, found: bytes.len() });
    }
    let word = |i: usize| [bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let width = i32::from_le_bytes(word(1));
    let height = i32::from_le_bytes(word(2));
    if width < 0 || height < 0 {
        return Err(Error::InvalidArgument(format!("negative .flo dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = FLO_HEADER_BYTES + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        u.push(f32::from_le_bytes(word(3 + 2 * i)) as f64);
        v.push(f32::from_le_bytes(word(4 + 2 * i)) as f64);
    }
    FlowField::new(h, w, u, v)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_atomic(path, &encode_flo(flow)?)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
