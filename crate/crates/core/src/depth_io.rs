//! Depth, ground-truth and mask frames, and their on-disk PGM encoding.
//!
//! Depth frames are binary PGM (`P5`) with maxval 65535 and big-endian
//! 16-bit samples; ground truth, masks and the ROI are 8-bit PGM. A video
//! sequence is a directory:
//!
//! ```text
//! <dir>/depth/000001.pgm ...
//! <dir>/gt/000001.pgm ...     (optional)
//! <dir>/ROI.pgm               (optional, nonzero = inside)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn ensure_same_dims<U>(&self, other: &Grid<U>, context: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(self.dims(), other.dims(), context));
        }
        Ok(())
    }
}

/// Millimeter distances; 0 is an absent measurement.
pub type DepthFrame = Grid<u16>;

/// Binary segmentation mask.
pub type MaskFrame = Grid<MaskLabel>;

/// Decoded ground-truth frame.
pub type GtFrame = Grid<GtLabel>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskLabel {
    Background,
    Foreground,
}

impl MaskLabel {
    pub fn is_fg(self) -> bool {
        self == MaskLabel::Foreground
    }
}

/// Ground-truth label with the usual change-detection byte codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GtLabel {
    Background,
    Shadow,
    OutsideRoi,
    Unknown,
    Foreground,
}

impl GtLabel {
    pub const ALL: [GtLabel; 5] = [
        GtLabel::Background,
        GtLabel::Shadow,
        GtLabel::OutsideRoi,
        GtLabel::Unknown,
        GtLabel::Foreground,
    ];

    pub fn code(self) -> u8 {
        match self {
            GtLabel::Background => 0,
            GtLabel::Shadow => 50,
            GtLabel::OutsideRoi => 85,
            GtLabel::Unknown => 170,
            GtLabel::Foreground => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<GtLabel> {
        match code {
            0 => Some(GtLabel::Background),
            50 => Some(GtLabel::Shadow),
            85 => Some(GtLabel::OutsideRoi),
            170 => Some(GtLabel::Unknown),
            255 => Some(GtLabel::Foreground),
            _ => None,
        }
    }
}

/// A depth video with optional ground truth and region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<DepthFrame>,
    /// File stems of the depth frames, e.g. `000001`.
    pub frame_ids: Vec<String>,
    pub gt: Option<Vec<GtFrame>>,
    /// `Foreground` marks pixels inside the region of interest.
    pub roi: Option<MaskFrame>,
}

impl VideoSequence {
    /// Builds a sequence with frame ids `000000`, `000001`, ... and checks
    /// the shape invariants.
    pub fn new(
        name: impl Into<String>,
        frames: Vec<DepthFrame>,
        gt: Option<Vec<GtFrame>>,
        roi: Option<MaskFrame>,
    ) -> Result<Self> {
        let frame_ids = (0..frames.len()).map(|i| format!("{i:06}")).collect();
        let seq = VideoSequence {
            name: name.into(),
            frames,
            frame_ids,
            gt,
            roi,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` shared by every frame.
    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.dims()).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::EmptySequence(PathBuf::from(&self.name)));
        };
        let dims = first.dims();
        for (k, f) in self.frames.iter().enumerate() {
            if f.data.len() != f.width * f.height {
                return Err(Error::ShapeMismatch {
                    expected: vec![f.height, f.width],
                    found: vec![f.data.len()],
                });
            }
            if f.dims() != dims {
                return Err(Error::dims(dims, f.dims(), format!("depth frame {k}")));
            }
        }
        if self.frame_ids.len() != self.frames.len() {
            return Err(Error::InvalidConfig(format!(
                "{} frame ids for {} frames",
                self.frame_ids.len(),
                self.frames.len()
            )));
        }
        if let Some(gt) = &self.gt {
            if gt.len() != self.frames.len() {
                return Err(Error::GtCountMismatch {
                    frames: self.frames.len(),
                    gt: gt.len(),
                });
            }
            for (k, g) in gt.iter().enumerate() {
                if g.dims() != dims {
                    return Err(Error::dims(dims, g.dims(), format!("gt frame {k}")));
                }
            }
        }
        if let Some(roi) = &self.roi {
            if roi.dims() != dims {
                return Err(Error::dims(dims, roi.dims(), "ROI"));
            }
        }
        Ok(())
    }
}

struct RawPgm {
    width: usize,
    height: usize,
    maxval: u32,
    payload: Vec<u8>,
}

fn parse_pgm(bytes: &[u8]) -> Result<RawPgm> {
    let mut pos = 0;
    let mut fields: Vec<u32> = Vec::with_capacity(3);

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::MalformedHeader("missing P5 magic".into()));
    }
    pos += 2;
    while fields.len() < 3 {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!(
                "expected a number at byte {start}"
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        let value = text
            .parse::<u32>()
            .map_err(|e| Error::MalformedHeader(format!("bad number {text:?}: {e}")))?;
        fields.push(value);
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    Ok(RawPgm {
        width,
        height,
        maxval,
        payload: bytes[pos..].to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_pgm(path: &Path, width: usize, height: usize, maxval: u32, raster: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(raster.len() + 32);
    write!(out, "P5\n{width} {height}\n{maxval}\n").expect("write to vec");
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthFrame> {
    let pgm = parse_pgm(bytes)?;
    if pgm.maxval != 65535 {
        return Err(Error::UnsupportedMaxval {
            found: pgm.maxval,
            expected: 65535,
        });
    }
    let n = pgm.width * pgm.height;
    if pgm.payload.len() < 2 * n {
        return Err(Error::TruncatedData {
            expected: 2 * n,
            found: pgm.payload.len(),
        });
    }
    let data = pgm.payload[..2 * n]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok(Grid {
        width: pgm.width,
        height: pgm.height,
        data,
    })
}

fn decode_gray8(bytes: &[u8]) -> Result<Grid<u8>> {
    let pgm = parse_pgm(bytes)?;
    if pgm.maxval != 255 {
        return Err(Error::UnsupportedMaxval {
            found: pgm.maxval,
            expected: 255,
        });
    }
    let n = pgm.width * pgm.height;
    if pgm.payload.len() < n {
        return Err(Error::TruncatedData {
            expected: n,
            found: pgm.payload.len(),
        });
    }
    Ok(Grid {
        width: pgm.width,
        height: pgm.height,
        data: pgm.payload[..n].to_vec(),
    })
}

pub fn load_depth_frame(path: impl AsRef<Path>) -> Result<DepthFrame> {
    decode_depth_pgm(&read_file(path.as_ref())?)
}

pub fn save_depth_frame(frame: &DepthFrame, path: impl AsRef<Path>) -> Result<()> {
    let raster: Vec<u8> = frame.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_pgm(path.as_ref(), frame.width, frame.height, 65535, &raster)
}

pub fn decode_groundtruth(gray: &Grid<u8>) -> Result<GtFrame> {
    let mut data = Vec::with_capacity(gray.data.len());
    for (idx, &value) in gray.data.iter().enumerate() {
        match GtLabel::from_code(value) {
            Some(label) => data.push(label),
            None => {
                return Err(Error::UnknownGtCode {
                    value,
                    row: idx / gray.width,
                    col: idx % gray.width,
                })
            }
        }
    }
    Ok(Grid {
        width: gray.width,
        height: gray.height,
        data,
    })
}

pub fn load_groundtruth(path: impl AsRef<Path>) -> Result<GtFrame> {
    decode_groundtruth(&decode_gray8(&read_file(path.as_ref())?)?)
}

pub fn save_groundtruth(gt: &GtFrame, path: impl AsRef<Path>) -> Result<()> {
    let raster: Vec<u8> = gt.data.iter().map(|l| l.code()).collect();
    write_pgm(path.as_ref(), gt.width, gt.height, 255, &raster)
}

pub fn save_mask(mask: &MaskFrame, path: impl AsRef<Path>) -> Result<()> {
    let raster: Vec<u8> = mask
        .data
        .iter()
        .map(|l| if l.is_fg() { 255 } else { 0 })
        .collect();
    write_pgm(path.as_ref(), mask.width, mask.height, 255, &raster)
}

/// Loads a mask written by [`save_mask`]; only the codes 0 and 255 are accepted.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskFrame> {
    let gray = decode_gray8(&read_file(path.as_ref())?)?;
    let mut data = Vec::with_capacity(gray.data.len());
    for (idx, &v) in gray.data.iter().enumerate() {
        data.push(match v {
            0 => MaskLabel::Background,
            255 => MaskLabel::Foreground,
            _ => {
                return Err(Error::Corrupt(format!(
                    "mask value {v} at row {}, col {} (expected 0 or 255)",
                    idx / gray.width,
                    idx % gray.width
                )))
            }
        });
    }
    Ok(Grid {
        width: gray.width,
        height: gray.height,
        data,
    })
}

/// Loads a region-of-interest image: any nonzero pixel is inside.
pub fn load_roi(path: impl AsRef<Path>) -> Result<MaskFrame> {
    let gray = decode_gray8(&read_file(path.as_ref())?)?;
    Ok(gray.map(|&v| {
        if v != 0 {
            MaskLabel::Foreground
        } else {
            MaskLabel::Background
        }
    }))
}

/// Sorted `*.pgm` files of a directory.
pub fn list_pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|ext| ext.eq_ignore_ascii_case("pgm"))
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_sequence(dir: impl AsRef<Path>) -> Result<VideoSequence> {
    let dir = dir.as_ref();
    let depth_dir = dir.join("depth");
    if !depth_dir.is_dir() {
        return Err(Error::EmptySequence(dir.to_path_buf()));
    }
    let depth_files = list_pgm_files(&depth_dir)?;
    if depth_files.is_empty() {
        return Err(Error::EmptySequence(depth_dir));
    }
    let frames = depth_files
        .iter()
        .map(load_depth_frame)
        .collect::<Result<Vec<_>>>()?;
    let frame_ids = depth_files.iter().map(|p| file_stem(p)).collect();

    let gt_dir = dir.join("gt");
    let gt = if gt_dir.is_dir() {
        let gt_files = list_pgm_files(&gt_dir)?;
        if gt_files.len() != frames.len() {
            return Err(Error::GtCountMismatch {
                frames: frames.len(),
                gt: gt_files.len(),
            });
        }
        Some(
            gt_files
                .iter()
                .map(load_groundtruth)
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let roi_path = dir.join("ROI.pgm");
    let roi = if roi_path.is_file() {
        Some(load_roi(&roi_path)?)
    } else {
        None
    };

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    let seq = VideoSequence {
        name,
        frames,
        frame_ids,
        gt,
        roi,
    };
    seq.validate()?;
    Ok(seq)
}

/// Writes a sequence in the layout read by [`load_sequence`].
pub fn save_sequence(seq: &VideoSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let depth_dir = dir.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    for (frame, id) in seq.frames.iter().zip(&seq.frame_ids) {
        save_depth_frame(frame, depth_dir.join(format!("{id}.pgm")))?;
    }
    if let Some(gt) = &seq.gt {
        let gt_dir = dir.join("gt");
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        for (g, id) in gt.iter().zip(&seq.frame_ids) {
            save_groundtruth(g, gt_dir.join(format!("{id}.pgm")))?;
        }
    }
    if let Some(roi) = &seq.roi {
        save_mask(roi, dir.join("ROI.pgm"))?;
    }
    Ok(())
}
