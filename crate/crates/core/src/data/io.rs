//! Binary PGM (P5), PPM (P6) and CIFAR-10 batch files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClientDataset, DataError, Result};

/// Bytes per CIFAR-10 record: one label byte and 3 x 32 x 32 pixel bytes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageFormat {
    Pgm,
    Ppm,
    Cifar10Binary,
}

impl std::str::FromStr for ImageFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(Self::Pgm),
            "ppm" => Ok(Self::Ppm),
            "cifar10-binary" => Ok(Self::Cifar10Binary),
            other => Err(DataError::Invalid(format!("unknown image format `{other}`"))),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a dataset from `path`.
///
/// For PGM/PPM, `path` is either one image (label 0) or a directory whose
/// matching files are read in name order; a leading `<digits>_` in a file
/// name is taken as its label. For CIFAR-10, `path` is one batch file or a
/// directory of `*.bin` batches.
pub fn load_images(path: impl AsRef<Path>, format: ImageFormat) -> Result<ClientDataset> {
    let path = path.as_ref();
    let ext = match format {
        ImageFormat::Pgm => "pgm",
        ImageFormat::Ppm => "ppm",
        ImageFormat::Cifar10Binary => "bin",
    };
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(DataError::Invalid(format!("no .{ext} files in {}", path.display())));
    }

    let mut shape = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = read_file(file)?;
        let (s, px, lb) = match format {
            ImageFormat::Cifar10Binary => {
                let (px, lb) = read_cifar10(&bytes)?;
                ([3, 32, 32], px, lb)
            }
            _ => {
                let (s, px) = read_pnm(&bytes)?;
                let want_channels = if format == ImageFormat::Pgm { 1 } else { 3 };
                if s[0] != want_channels {
                    return Err(DataError::Invalid(format!("{} is not a {ext} image", file.display())));
                }
                (s, px, vec![label_from_name(file)])
            }
        };
        if *shape.get_or_insert(s) != s {
            return Err(DataError::Invalid(format!("{} has shape {s:?}, expected {:?}", file.display(), shape.unwrap())));
        }
        pixels.extend(px);
        labels.extend(lb);
    }
    ClientDataset::new(shape.expect("at least one file"), pixels, labels)
}

fn label_from_name(path: &Path) -> usize {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    match stem.split_once('_') {
        Some((head, _)) => head.parse().unwrap_or(0),
        None => 0,
    }
}

/// Decodes concatenated CIFAR-10 records into planar `[0, 1]` pixels and
/// labels.
pub fn read_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() {
        return Err(DataError::Format {
            offset: 0,
            msg: "empty CIFAR-10 file".into(),
        });
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
        return Err(DataError::Format {
            offset,
            msg: format!("truncated record: {} of {CIFAR_RECORD} bytes", bytes.len() - offset),
        });
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DataError::Format {
                offset: k * CIFAR_RECORD,
                msg: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments, then reads a decimal integer.
    fn header_int(&mut self) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a header number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| self.err("header number too large"))
    }
}

/// Decodes a binary PGM or PPM (maxval <= 255) into `(C, H, W)` and planar
/// `[0, 1]` pixels.
pub fn read_pnm(bytes: &[u8]) -> Result<([usize; 3], Vec<f64>)> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(DataError::Format {
                offset: 0,
                msg: "expected magic P5 or P6".into(),
            })
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.header_int()?;
    let height = cur.header_int()?;
    let maxval = cur.header_int()?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected whitespace after maxval"));
    }
    cur.pos += 1;
    let n = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < n {
        return Err(DataError::Format {
            offset: bytes.len(),
            msg: format!("pixel data ends early: {} of {n} bytes", body.len()),
        });
    }
    let scale = maxval as f64;
    let mut planar = vec![0.0; n];
    for (idx, &b) in body[..n].iter().enumerate() {
        let (pixel, ch) = (idx / channels, idx % channels);
        planar[ch * width * height + pixel] = (b as f64 / scale).min(1.0);
    }
    Ok(([channels, height, width], planar))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes planar `(C, H, W)` pixels (C = 1 or 3) as P5/P6 with maxval 255.
pub fn write_pnm(shape: [usize; 3], pixels: &[f64]) -> Result<Vec<u8>> {
    let [c, h, w] = shape;
    if pixels.len() != c * h * w {
        return Err(DataError::Invalid(format!("{} pixels for shape {shape:?}", pixels.len())));
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(DataError::Invalid(format!("cannot write {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(pixels[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    write_file(path.as_ref(), &write_pnm([1, height, width], pixels)?)
}

pub fn write_ppm(path: impl AsRef<Path>, height: usize, width: usize, planar: &[f64]) -> Result<()> {
    write_file(path.as_ref(), &write_pnm([3, height, width], planar)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_small_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 128, 255, 64]);
        let (shape, px) = read_pnm(&bytes).unwrap();
        assert_eq!(shape, [1, 2, 2]);
        assert_eq!(px, vec![0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n1 # width\n1\n255\n".to_vec();
        bytes.push(51);
        assert_eq!(read_pnm(&bytes).unwrap().1, vec![0.2]);
    }

    #[test]
    fn ppm_is_converted_to_planar() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255u8, 0, 0, 0, 255, 51]);
        let (shape, px) = read_pnm(&bytes).unwrap();
        assert_eq!(shape, [3, 1, 2]);
        assert_eq!(px, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.2]);
    }

    #[test]
    fn short_pixel_data_reports_offset() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([1u8, 2]);
        match read_pnm(&bytes) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_pnm(b"P3\n1 1\n255\n0"), Err(DataError::Format { offset: 0, .. })));
    }

    #[test]
    fn cifar_records_decode() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let (px, labels) = read_cifar10(&rec).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(px.len(), 3072);
        assert_eq!(px[255], 1.0);
        assert_eq!(px[1024], 0.0);
    }

    #[test]
    fn truncated_cifar_record_offset() {
        for k in 0..3 {
            let mut bytes = vec![0u8; CIFAR_RECORD * k];
            bytes.extend([1u8; 100]);
            match read_cifar10(&bytes) {
                Err(DataError::Format { offset, .. }) => assert_eq!(offset, 3073 * k),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn directory_labels_come_from_file_names() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(dir.path().join("3_a.pgm"), 2, 2, &[0.0, 0.5, 1.0, 0.25]).unwrap();
        write_pgm(dir.path().join("1_b.pgm"), 2, 2, &[1.0; 4]).unwrap();
        let d = load_images(dir.path(), ImageFormat::Pgm).unwrap();
        assert_eq!(d.labels(), &[1, 3]);
        assert_eq!(d.image(0), &[1.0; 4]);
    }

    proptest! {
        #[test]
        fn write_read_within_quantization(px in prop::collection::vec(0.0f64..=1.0, 3 * 4 * 5)) {
            for (shape, data) in [([1, 4, 5], &px[..20]), ([3, 4, 5], &px[..])] {
                let bytes = write_pnm(shape, data).unwrap();
                let (s, back) = read_pnm(&bytes).unwrap();
                prop_assert_eq!(s, shape);
                for (a, b) in data.iter().zip(&back) {
                    prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
                }
            }
        }
    }
}
