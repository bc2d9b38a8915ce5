//! Digit datasets: IDX binaries (MNIST layout) and labelled text matrices
//! (USPS-style exports).
//!
//! IDX layout, all integers big-endian:
//!
//! ```text
//! images: u32 magic = 0x00000803, u32 count, u32 rows, u32 cols, count*rows*cols u8 pixels
//! labels: u32 magic = 0x00000801, u32 count, count u8 labels
//! ```
//!
//! Text matrix layout: a header line `range <lo> <hi>` giving the pixel
//! value range, then one image per line: the label followed by `side * side`
//! pixel values separated by whitespace. Blank lines and lines starting with
//! `#` are ignored.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Tensor, DEFAULT_INPUT_SIDE};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Shaped `[1, side, side]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: u8,
}

impl LabeledImage {
    pub fn new(side: usize, pixels: Vec<f64>, label: u8) -> Result<Self> {
        if label > 9 {
            return Err(Error::Argument(format!("label {label} outside 0..=9")));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(LabeledImage {
            pixels: Tensor::from_vec(&[1, side, side], pixels)?,
            label,
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub side: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, side: usize, images: Vec<LabeledImage>) -> Result<Self> {
        if let Some(img) = images.iter().find(|i| i.side() != side) {
            return Err(Error::Consistency(format!(
                "image of side {} in a dataset of side {side}",
                img.side()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            side,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Argument(format!("dataset {:?} is empty", self.name)));
        }
        Ok(())
    }

    /// Label counts for digits 0..=9.
    pub fn label_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for img in &self.images {
            h[img.label as usize] += 1;
        }
        h
    }

    /// Encodes the dataset as an (images, labels) pair of IDX byte buffers.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.images.len() as u32;
        let side = self.side as u32;
        let mut images = Vec::with_capacity(16 + self.images.len() * self.side * self.side);
        for v in [IDX_IMAGES_MAGIC, n, side, side] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        let mut labels = Vec::with_capacity(8 + self.images.len());
        for v in [IDX_LABELS_MAGIC, n] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        for img in &self.images {
            images.extend(img.pixels.data.iter().map(|&p| (p * 255.0).round() as u8));
            labels.push(img.label);
        }
        (images, labels)
    }

    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let (images, labels) = self.to_idx_bytes();
        std::fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
        std::fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
    }
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("file truncated while reading {what}"),
        ),
    )
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxReader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let chunk = self.take(4, what)?;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| truncated(self.path, what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32("magic number")?;
        if magic != expected {
            return Err(Error::Format {
                path: self.path.into(),
                reason: format!("magic 0x{magic:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }
}

/// Parses an IDX image/label file pair, scaling pixel bytes to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_idx(&name, images_path, &image_bytes, labels_path, &label_bytes)
}

pub fn parse_idx(
    name: &str,
    images_path: &Path,
    image_bytes: &[u8],
    labels_path: &Path,
    label_bytes: &[u8],
) -> Result<Dataset> {
    let mut imgs = IdxReader {
        path: images_path,
        bytes: image_bytes,
        pos: 0,
    };
    imgs.magic(IDX_IMAGES_MAGIC)?;
    let count = imgs.u32("image count")? as usize;
    let rows = imgs.u32("row count")? as usize;
    let cols = imgs.u32("column count")? as usize;
    if rows != cols {
        return Err(Error::Format {
            path: images_path.into(),
            reason: format!("non-square images {rows}x{cols}"),
        });
    }

    let mut labels = IdxReader {
        path: labels_path,
        bytes: label_bytes,
        pos: 0,
    };
    labels.magic(IDX_LABELS_MAGIC)?;
    let label_count = labels.u32("label count")? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {label_count} labels",
            images_path.display(),
            labels_path.display()
        )));
    }

    let area = rows * cols;
    let pixel_data = imgs.take(count * area, "pixels")?;
    let label_data = labels.take(count, "labels")?;
    let images = pixel_data
        .chunks_exact(area.max(1))
        .zip(label_data)
        .map(|(px, &label)| {
            if label > 9 {
                return Err(Error::Format {
                    path: labels_path.into(),
                    reason: format!("label {label} outside 0..=9"),
                });
            }
            LabeledImage::new(rows, px.iter().map(|&b| b as f64 / 255.0).collect(), label)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(name, rows, images)
}

/// Parses a labelled text matrix (see the module docs), rescaling pixels to
/// `[0, 1]` and zero-padding images smaller than 28x28 to the centre of a
/// 28x28 frame.
pub fn load_matrix_text(path: &Path, side: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_text(path, &text, side)
}

pub fn parse_matrix_text(path: &Path, text: &str, side: usize) -> Result<Dataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.into(),
        line,
        reason,
    };
    if side == 0 || side > DEFAULT_INPUT_SIDE {
        return Err(Error::Argument(format!(
            "image side {side} must be in 1..={DEFAULT_INPUT_SIDE}"
        )));
    }
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing `range <lo> <hi>` header".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let (lo, hi) = match h.as_slice() {
        ["range", lo, hi] => (
            lo.parse::<f64>()
                .map_err(|_| parse_err(hline, format!("bad range bound {lo:?}")))?,
            hi.parse::<f64>()
                .map_err(|_| parse_err(hline, format!("bad range bound {hi:?}")))?,
        ),
        _ => return Err(parse_err(hline, "expected `range <lo> <hi>` header".into())),
    };
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(parse_err(hline, format!("empty pixel range [{lo}, {hi}]")));
    }

    let target = DEFAULT_INPUT_SIDE;
    let offset = (target - side) / 2;
    let mut images = Vec::new();
    for (ln, line) in lines {
        let mut fields = line.split_whitespace();
        let label_field = fields.next().unwrap_or_default();
        let label: u8 = label_field
            .parse()
            .ok()
            .filter(|l| *l <= 9)
            .ok_or_else(|| parse_err(ln, format!("bad label {label_field:?}")))?;
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| parse_err(ln, format!("bad pixel value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != side * side {
            return Err(parse_err(
                ln,
                format!("expected {} pixel values, found {}", side * side, values.len()),
            ));
        }
        let mut pixels = vec![0.0; target * target];
        for (i, v) in values.into_iter().enumerate() {
            let (y, x) = (i / side, i % side);
            let scaled = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            pixels[(y + offset) * target + x + offset] = scaled;
        }
        images.push(LabeledImage::new(target, pixels, label).map_err(|e| parse_err(ln, e.to_string()))?);
    }
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, target, images)
}

/// Deterministic pseudo-random subset of `n` images.
pub fn take(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::Argument(format!(
            "cannot take {n} images from {:?} which holds {}",
            dataset.name,
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let (picked, _) = order.partial_shuffle(&mut rng, n);
    Ok(Dataset {
        name: format!("{}[{n}@{seed}]", dataset.name),
        side: dataset.side,
        images: picked.iter().map(|&i| dataset.images[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(label: u8) -> Dataset {
        let img = LabeledImage::new(28, vec![0.0; 784], label).unwrap();
        Dataset::new("fixture", 28, vec![img]).unwrap()
    }

    fn tiny(n: usize) -> Dataset {
        let images = (0..n)
            .map(|i| {
                let px = (0..16).map(|p| ((i * 16 + p) % 256) as f64 / 255.0).collect();
                LabeledImage::new(4, px, (i % 10) as u8).unwrap()
            })
            .collect();
        Dataset::new("tiny", 4, images).unwrap()
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fixture(7).write_idx(&ip, &lp).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.side, 28);
        assert_eq!(ds.images[0].label, 7);
        assert!(ds.images[0].pixels.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn idx_reserialization_is_byte_identical() {
        let ds = tiny(5);
        let (imgs, lbls) = ds.to_idx_bytes();
        let back = parse_idx("t", Path::new("i"), &imgs, Path::new("l"), &lbls).unwrap();
        assert_eq!(back.to_idx_bytes(), (imgs, lbls));
    }

    #[test]
    fn idx_wrong_magic() {
        let (mut imgs, lbls) = tiny(1).to_idx_bytes();
        imgs[..4].copy_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        let err = parse_idx("t", Path::new("i"), &imgs, Path::new("l"), &lbls).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn idx_count_mismatch_and_truncation() {
        let (imgs, _) = tiny(2).to_idx_bytes();
        let (_, lbls) = tiny(3).to_idx_bytes();
        let err = parse_idx("t", Path::new("i"), &imgs, Path::new("l"), &lbls).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");

        let (imgs, lbls) = tiny(2).to_idx_bytes();
        let err = parse_idx("t", Path::new("i"), &imgs[..imgs.len() - 1], Path::new("l"), &lbls).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
        let err = parse_idx("t", Path::new("i"), &imgs[..10], Path::new("l"), &lbls).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn matrix_text_zero_image_is_padded() {
        let line = format!("7 {}", vec!["0"; 256].join(" "));
        let text = format!("range 0 1\n{line}\n");
        let ds = parse_matrix_text(Path::new("u"), &text, 16).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.side, 28);
        assert_eq!(ds.images[0].label, 7);
        assert!(ds.images[0].pixels.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn matrix_text_rescales_and_centres() {
        let mut vals = vec!["-1"; 256];
        vals[0] = "1";
        let text = format!("range -1 1\n3 {}\n", vals.join(" "));
        let ds = parse_matrix_text(Path::new("u"), &text, 16).unwrap();
        let px = &ds.images[0].pixels.data;
        // top-left source pixel lands at (6, 6) of the 28x28 frame
        assert_eq!(px[6 * 28 + 6], 1.0);
        assert_eq!(px.iter().filter(|&&p| p != 0.0).count(), 1);
    }

    #[test]
    fn matrix_text_counts_lines() {
        let line = format!("1 {}", vec!["0.5"; 256].join(" "));
        let mut text = String::from("range 0 1\n");
        for _ in 0..1000 {
            text.push_str(&line);
            text.push('\n');
        }
        let ds = parse_matrix_text(Path::new("u"), &text, 16).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.label_histogram()[1], 1000);
    }

    #[test]
    fn matrix_text_reports_line_numbers() {
        let good = format!("1 {}", vec!["0"; 256].join(" "));
        let bad = format!("2 {}", vec!["0"; 255].join(" "));
        let text = format!("range 0 1\n{good}\n\n{bad}\n");
        match parse_matrix_text(Path::new("u"), &text, 16).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
        let text = format!("range 0 1\nx {}\n", vec!["0"; 256].join(" "));
        assert!(matches!(
            parse_matrix_text(Path::new("u"), &text, 16),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_matrix_text(Path::new("u"), "0 0 0\n", 16),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn take_is_deterministic_permutation() {
        let ds = tiny(20);
        let all = take(&ds, 20, 3).unwrap();
        let mut a: Vec<_> = all.images.iter().map(|i| i.pixels.data[0].to_bits()).collect();
        let mut b: Vec<_> = ds.images.iter().map(|i| i.pixels.data[0].to_bits()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let x = take(&ds, 7, 11).unwrap();
        let y = take(&ds, 7, 11).unwrap();
        assert_eq!(x.to_idx_bytes(), y.to_idx_bytes());
        assert_ne!(take(&ds, 7, 12).unwrap().to_idx_bytes(), x.to_idx_bytes());

        let empty = take(&ds, 0, 1).unwrap();
        assert!(empty.ensure_non_empty().is_err());
        assert!(matches!(take(&ds, 21, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn rejects_bad_labels_and_pixels() {
        assert!(LabeledImage::new(1, vec![0.5], 10).is_err());
        assert!(LabeledImage::new(1, vec![1.5], 1).is_err());
    }
}
