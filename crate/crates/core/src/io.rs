//! Image file I/O with fixed normalization rules.
//!
//! Grayscale images live in 8- or 16-bit single-channel PNG or binary PGM
//! (P5) files. Loading maps stored values to [0, 1] by dividing by the type
//! maximum (255 or 65535); saving multiplies back and rounds half up.
//! Instance masks use 16-bit single-channel PNG with pixel value = label
//! and 0 = background; gapped label sets are compacted on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma};
use thiserror::Error;

use crate::imagedata::{GrayImage, ImageStack, InstanceMask, RasterError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("file not found: {path}")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: corrupt or unsupported image header")]
    CorruptHeader { path: PathBuf },
    #[error("{path}: expected single-channel grayscale, found multi-channel data")]
    MultiChannel { path: PathBuf },
    #[error("{path}: instance masks must be 16-bit single-channel PNG")]
    NotInstanceFormat { path: PathBuf },
    #[error("instance label {label} exceeds the 16-bit storage maximum 65535")]
    LabelOverflow { label: u32 },
    #[error("{path}: PGM maxval {maxval} unsupported; expected 255 or 65535")]
    UnsupportedMaxval { path: PathBuf, maxval: u32 },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Output storage depth for grayscale images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    if source.kind() == std::io::ErrorKind::NotFound {
        IoError::MissingFile {
            path: path.to_path_buf(),
        }
    } else {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn is_pgm(path: &Path, bytes: &[u8]) -> Result<bool, IoError> {
    match bytes {
        [b'P', b'5', ..] => Ok(true),
        [0x89, b'P', b'N', b'G', ..] => Ok(false),
        _ => Err(IoError::CorruptHeader {
            path: path.to_path_buf(),
        }),
    }
}

/// Load an 8- or 16-bit single-channel PNG or binary PGM as a normalized
/// grayscale image.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if is_pgm(path, &bytes)? {
        return load_pgm(path, &bytes);
    }
    let decoded = decode_png(path, &bytes)?;
    match decoded {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.into_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
            Ok(GrayImage::new(h, w, data)?)
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img
                .into_raw()
                .iter()
                .map(|&v| f32::from(v) / 65535.0)
                .collect();
            Ok(GrayImage::new(h, w, data)?)
        }
        _ => Err(IoError::MultiChannel {
            path: path.to_path_buf(),
        }),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<DynamicImage, IoError> {
    let reader = ImageReader::with_format(std::io::Cursor::new(bytes), ImageFormat::Png);
    reader.decode().map_err(|_| IoError::CorruptHeader {
        path: path.to_path_buf(),
    })
}

/// Save a grayscale image; `.pgm` paths produce binary PGM, anything else
/// produces PNG. Values are quantized with round-half-up.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<(), IoError> {
    let path = path.as_ref();
    let is_pgm_ext = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm_ext {
        return save_pgm(img, path, depth);
    }
    let (h, w) = img.shape();
    match depth {
        BitDepth::Eight => {
            let data: Vec<u8> = img
                .as_slice()
                .iter()
                .map(|&v| quantize(v, depth) as u8)
                .collect();
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
            save_png(path, || buf.save_with_format(path, ImageFormat::Png))
        }
        BitDepth::Sixteen => {
            let data: Vec<u16> = img
                .as_slice()
                .iter()
                .map(|&v| quantize(v, depth) as u16)
                .collect();
            let buf: ImageBuffer<Luma<u16>, _> =
                ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
            save_png(path, || buf.save_with_format(path, ImageFormat::Png))
        }
    }
}

fn save_png(path: &Path, write: impl FnOnce() -> image::ImageResult<()>) -> Result<(), IoError> {
    write().map_err(|e| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        _ => IoError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
    })
}

/// Round half up into the integer range of `depth`.
fn quantize(value: f32, depth: BitDepth) -> u32 {
    let max = depth.max_value();
    ((f64::from(value) * f64::from(max) + 0.5).floor() as u32).min(max as u32)
}

fn load_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage, IoError> {
    let corrupt = || IoError::CorruptHeader {
        path: path.to_path_buf(),
    };
    let mut pos = 2usize; // past "P5"
    let mut fields = [0u32; 3];
    for field in &mut fields {
        *field = pgm_header_int(bytes, &mut pos).ok_or_else(corrupt)?;
    }
    // Single whitespace byte separates the header from raster data.
    pos += 1;
    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval != 255 && maxval != 65535 {
        return Err(IoError::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    let raster = bytes.get(pos..).ok_or_else(corrupt)?;
    let data = if maxval == 255 {
        if raster.len() < width * height {
            return Err(corrupt());
        }
        raster[..width * height]
            .iter()
            .map(|&v| f32::from(v) / 255.0)
            .collect()
    } else {
        if raster.len() < 2 * width * height {
            return Err(corrupt());
        }
        raster[..2 * width * height]
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
            .collect()
    };
    Ok(GrayImage::new(height, width, data)?)
}

/// Parse the next unsigned integer in a PGM header, skipping whitespace
/// and `#` comments.
fn pgm_header_int(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

fn save_pgm(img: &GrayImage, path: &Path, depth: BitDepth) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let (h, w) = img.shape();
    let maxval = depth.max_value() as u32;
    let mut write = || -> std::io::Result<()> {
        write!(out, "P5\n{w} {h}\n{maxval}\n")?;
        match depth {
            BitDepth::Eight => {
                let data: Vec<u8> = img
                    .as_slice()
                    .iter()
                    .map(|&v| quantize(v, depth) as u8)
                    .collect();
                out.write_all(&data)?;
            }
            BitDepth::Sixteen => {
                for &v in img.as_slice() {
                    out.write_all(&(quantize(v, depth) as u16).to_be_bytes())?;
                }
            }
        }
        out.flush()
    };
    write().map_err(|e| io_err(path, e))
}

/// Load an instance mask from a 16-bit single-channel PNG and compact its
/// label set.
pub fn load_instance_mask(path: impl AsRef<Path>) -> Result<InstanceMask, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if is_pgm(path, &bytes)? {
        return Err(IoError::NotInstanceFormat {
            path: path.to_path_buf(),
        });
    }
    match decode_png(path, &bytes)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let labels = img.into_raw().iter().map(|&v| u32::from(v)).collect();
            Ok(InstanceMask::new(h, w, labels)?.compact())
        }
        _ => Err(IoError::NotInstanceFormat {
            path: path.to_path_buf(),
        }),
    }
}

/// Save an instance mask as 16-bit PNG; labels above 65535 are rejected.
pub fn save_instance_mask(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let (h, w) = mask.shape();
    let mut data = Vec::with_capacity(h * w);
    for &label in mask.as_slice() {
        if label > 65535 {
            return Err(IoError::LabelOverflow { label });
        }
        data.push(label as u16);
    }
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
    save_png(path, || buf.save_with_format(path, ImageFormat::Png))
}

/// Load every grayscale image in a directory as an ordered stack
/// (lexicographic filename order).
pub fn load_stack_dir(dir: impl AsRef<Path>) -> Result<ImageStack, IoError> {
    let dir = dir.as_ref();
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    names.sort();
    let planes = names
        .iter()
        .map(load_gray)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImageStack::new(planes)?)
}
