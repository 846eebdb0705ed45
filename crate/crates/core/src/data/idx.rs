use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Idx {
    dims: Vec<usize>,
    body: Vec<u8>,
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| parse_err(path, 0, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Offsets below refer to the decompressed byte stream.
fn parse(path: &Path, magic: u32) -> Result<Idx> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 4 {
        return Err(parse_err(path, bytes.len(), "truncated magic number"));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(parse_err(path, 0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse_err(path, bytes.len(), format!("truncated header, expected {ndim} dimensions")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() < expected {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated data, header promises {expected} bytes after offset {header}"),
        ));
    }
    if body.len() > expected {
        return Err(parse_err(path, header + expected, "trailing bytes after data"));
    }
    Ok(Idx {
        dims,
        body: body.to_vec(),
    })
}

/// Load an IDX image file (and optional label file), gzip or raw. Pixels
/// are scaled by `1/255`. The dataset is tagged [`Split::Train`]; use
/// [`Dataset::with_split`] to retag.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let img = parse(images_path, IDX_IMAGES_MAGIC)?;
    let (count, height, width) = (img.dims[0], img.dims[1], img.dims[2]);
    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lab = parse(lp, IDX_LABELS_MAGIC)?;
            if lab.dims[0] != count {
                return Err(parse_err(
                    lp,
                    4,
                    format!("label count {} does not match image count {count}", lab.dims[0]),
                ));
            }
            Some(lab.body.iter().map(|&b| b as usize).collect())
        }
    };
    let data = img.body.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::matrix(count, height * width, data)?;
    Dataset::new(images, labels, Split::Train, height, width)
}

/// Write `d` as IDX files, gzip-wrapped when `gzip` is set. Pixel values
/// must be multiples of `1/255`; this makes write-then-load exact.
pub fn write_idx(d: &Dataset, images_path: &Path, labels_path: Option<&Path>, gzip: bool) -> Result<()> {
    let mut img = Vec::with_capacity(16 + d.images().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [d.len(), d.height(), d.width()] {
        img.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for &v in d.images().data() {
        let b = (v * 255.0).round();
        if (b - v * 255.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("pixel {v} is not a multiple of 1/255")));
        }
        img.push(b as u8);
    }
    write_bytes(images_path, &img, gzip)?;
    if let Some(lp) = labels_path {
        let labels = d
            .labels()
            .ok_or_else(|| Error::Contract("dataset has no labels to write".into()))?;
        let mut lab = Vec::with_capacity(8 + labels.len());
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        for &l in labels {
            let b = u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} does not fit a byte")))?;
            lab.push(b);
        }
        write_bytes(lp, &lab, gzip)?;
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    if gzip {
        let mut enc = GzEncoder::new(std::fs::File::create(path)?, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

/// Paths of the standard MNIST-family file pair for `split` inside `dir`,
/// accepting either the raw or the `.gz` name.
pub fn find_idx_pair(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |stem: String| -> Result<PathBuf> {
        for name in [format!("{stem}.gz"), stem.clone()] {
            let p = dir.join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found in {}", stem, dir.display()),
        )))
    };
    Ok((
        pick(format!("{prefix}-images-idx3-ubyte"))?,
        pick(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Load the labelled `split` from a directory laid out like the MNIST
/// distribution.
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = find_idx_pair(dir, split)?;
    Ok(load_idx(&img, Some(&lab))?.with_split(split))
}
