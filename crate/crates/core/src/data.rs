//! Datasets, IDX/CIFAR readers, quantization, synthetic corpora and PNG grids.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Conditioning;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images as integer levels `[N, C, H, W]` with optional labels and embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub levels: usize,
    /// Per-image conditioning vectors `[N, d]`.
    pub embeddings: Option<Tensor>,
}

/// Where per-image conditioning comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondSource {
    None,
    /// One-hot label vectors.
    Class,
    /// Rows of [`Dataset::embeddings`].
    Embedding,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, levels: usize, classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4("dataset")?;
        if let Some(&x) = images
            .data()
            .iter()
            .find(|&&x| !(x >= 0.0 && x.fract() == 0.0 && (x as usize) < levels))
        {
            return Err(Error::LevelOutOfRange {
                level: if x >= 0.0 { x as usize } else { usize::MAX },
                levels,
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::shape("dataset", format!("{} labels for {n} images", labels.len())));
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::TargetOutOfRange { target: l, classes });
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            levels,
            embeddings: None,
        })
    }

    pub fn with_embeddings(mut self, embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != self.len() {
            return Err(Error::shape(
                "dataset",
                format!("embeddings {:?} for {} images", embeddings.shape(), self.len()),
            ));
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            levels: self.levels,
            embeddings: self.embeddings.as_ref().map(|e| e.select(indices)),
        }
    }

    /// `(first at images, the rest)`.
    pub fn split(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Conditioning for the images at `indices`.
    pub fn conditioning(&self, indices: &[usize], source: CondSource) -> Result<Conditioning> {
        match source {
            CondSource::None => Ok(Conditioning::None),
            CondSource::Class => {
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Conditioning("dataset has no labels".into()))?;
                let picked: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
                Ok(Conditioning::Global(one_hot(&picked, self.classes)?))
            }
            CondSource::Embedding => {
                let e = self
                    .embeddings
                    .as_ref()
                    .ok_or_else(|| Error::Conditioning("dataset has no embeddings".into()))?;
                Ok(Conditioning::Global(e.select(indices)))
            }
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::TargetOutOfRange { target: l, classes });
        }
        t.set(&[i, l], 1.0);
    }
    Ok(t)
}

/// Maps 8-bit values onto `levels` equal bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizationSpec {
    levels: usize,
}

impl QuantizationSpec {
    /// `levels` must be a power of two between 2 and 256.
    pub fn new(levels: usize) -> Result<Self> {
        if !(2..=256).contains(&levels) || !levels.is_power_of_two() {
            return Err(Error::Invalid(format!("levels must be a power of two in 2..=256, got {levels}")));
        }
        Ok(Self { levels })
    }

    pub fn levels(self) -> usize {
        self.levels
    }

    /// `floor(value * L / 256)`.
    pub fn quantize(self, value: u8) -> usize {
        value as usize * self.levels / 256
    }

    /// Centre of the level's bin (rounded down).
    pub fn dequantize(self, level: usize) -> u8 {
        let width = 256 / self.levels;
        (level.min(self.levels - 1) * width + width / 2) as u8
    }

    pub fn quantize_all(self, bytes: &[u8]) -> Vec<f64> {
        bytes.iter().map(|&b| self.quantize(b) as f64).collect()
    }
}

/// Dequantizes arbitrary `levels` (not only powers of two) to bin-centre bytes.
pub fn level_to_byte(level: usize, levels: usize) -> u8 {
    ((2 * level.min(levels - 1) + 1) * 256 / (2 * levels)) as u8
}

/// Raw IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let fmt = |offset: usize, detail: &str| Error::Format {
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(0, "bad magic number"));
    }
    if bytes[2] != 0x08 {
        return Err(fmt(2, "unsupported element type (only unsigned bytes)"));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fmt(3, "zero dimensions"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), "truncated dimension list"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt(4, "dimension product overflows"))?;
    let body = &bytes[header..];
    if body.len() < count {
        return Err(fmt(bytes.len(), "truncated data"));
    }
    if body.len() > count {
        return Err(fmt(header + count, "trailing bytes after data"));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(arr)).map_err(|e| Error::io(path, e))
}

/// IDX image file (`N x H x W` bytes) as levels `[N, 1, H', W']`, averaging
/// `pool x pool` blocks first when `pool > 1`.
pub fn load_idx_images(path: &Path, spec: QuantizationSpec, pool: usize) -> Result<Tensor> {
    let arr = read_idx(path)?;
    let [n, h, w] = arr.dims[..] else {
        return Err(Error::Format {
            offset: 3,
            detail: format!("expected 3 image dimensions, found {}", arr.dims.len()),
        });
    };
    let pool = pool.max(1);
    if h % pool != 0 || w % pool != 0 {
        return Err(Error::Invalid(format!("{h}x{w} images do not pool by {pool}")));
    }
    let (ho, wo) = (h / pool, w / pool);
    let mut out = Vec::with_capacity(n * ho * wo);
    for i in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let mut sum = 0usize;
                for dy in 0..pool {
                    for dx in 0..pool {
                        sum += arr.data[(i * h + y * pool + dy) * w + x * pool + dx] as usize;
                    }
                }
                let mean = (sum + pool * pool / 2) / (pool * pool);
                out.push(spec.quantize(mean as u8) as f64);
            }
        }
    }
    Tensor::new(&[n, 1, ho, wo], out)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = read_idx(path)?;
    if arr.dims.len() != 1 {
        return Err(Error::Format {
            offset: 3,
            detail: format!("expected 1 label dimension, found {}", arr.dims.len()),
        });
    }
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// MNIST-layout directory (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ...).
/// 28x28 digits are average-pooled to 14x14; other sizes load as they are.
pub fn load_mnist(dir: &Path, split: Split, spec: QuantizationSpec) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let dims = read_idx(&images_path)?.dims;
    let pool = if dims.get(1) == Some(&28) && dims.get(2) == Some(&28) { 2 } else { 1 };
    let images = load_idx_images(&images_path, spec, pool)?;
    let labels = load_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    Dataset::new(images, Some(labels), spec.levels(), 10)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary records: one label byte then R, G and B planes of 32x32.
pub fn parse_cifar(bytes: &[u8], spec: QuantizationSpec) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            detail: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(spec.quantize_all(&rec[1..]));
    }
    let images = Tensor::new(&[n, 3, 32, 32], data)?;
    Dataset::new(images, Some(labels), spec.levels(), 10)
}

pub fn load_cifar_binary(path: &Path, spec: QuantizationSpec) -> Result<Dataset> {
    parse_cifar(&fs::read(path).map_err(|e| Error::io(path, e))?, spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Class 0: horizontal bars (constant rows); class 1: vertical bars.
    StripesHv,
    /// Class 0: levels in the lower half; class 1: the upper half.
    Brightness2Class,
}

/// Labelled synthetic grayscale corpus; image `i` has class `i % 2`.
///
/// Stripes alternate between two distinct random levels with a random bar
/// width of 1 or 2 and a random phase.
pub fn make_synthetic(kind: SyntheticKind, n: usize, (h, w): (usize, usize), levels: usize, seed: u64) -> Result<Dataset> {
    if levels < 2 {
        return Err(Error::Invalid(format!("levels must be >= 2, got {levels}")));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        labels.push(class);
        match kind {
            SyntheticKind::StripesHv => {
                let a = rng.below(levels);
                let b = (a + 1 + rng.below(levels - 1)) % levels;
                let bar = 1 + rng.below(2);
                let phase = rng.below(2 * bar);
                for y in 0..h {
                    for x in 0..w {
                        let t = if class == 0 { y } else { x };
                        let level = if ((t + phase) / bar).is_multiple_of(2) { a } else { b };
                        data.push(level as f64);
                    }
                }
            }
            SyntheticKind::Brightness2Class => {
                let half = levels / 2;
                let (lo, span) = if class == 0 { (0, half) } else { (half, levels - half) };
                for _ in 0..h * w {
                    data.push((lo + rng.below(span)) as f64);
                }
            }
        }
    }
    Dataset::new(Tensor::new(&[n, 1, h, w], data)?, Some(labels), levels, 2)
}

/// Stripe orientation of one `[C, H, W]` image (flat): 0 when rows vary
/// less internally than columns (horizontal bars), else 1.
pub fn classify_stripes(image: &[f64], h: usize, w: usize) -> usize {
    let var = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
    };
    let planes = image.len() / (h * w);
    let (mut rows, mut cols) = (0.0, 0.0);
    for p in 0..planes {
        let img = &image[p * h * w..(p + 1) * h * w];
        rows += (0..h).map(|y| var(&mut (0..w).map(|x| img[y * w + x]))).sum::<f64>() / h as f64;
        cols += (0..w).map(|x| var(&mut (0..h).map(|y| img[y * w + x]))).sum::<f64>() / w as f64;
    }
    usize::from(rows >= cols)
}

/// Tiles `[N, C, H, W]` level images row-major into `columns` columns with
/// one-pixel white separators between tiles. Returns `(width, height, bytes)`
/// with `C` interleaved bytes per pixel.
pub fn render_grid(images: &Tensor, levels: usize, columns: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (n, c, h, w) = images.dims4("write_png_grid")?;
    if n == 0 || columns == 0 || !(c == 1 || c == 3) {
        return Err(Error::Invalid(format!("cannot tile {n} images of {c} channels in {columns} columns")));
    }
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w + cols - 1, rows * h + rows - 1);
    let mut out = vec![255u8; gw * gh * c];
    for i in 0..n {
        let (ty, tx) = (i / cols * (h + 1), i % cols * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let level = images.at(&[i, ch, y, x]);
                    out[((ty + y) * gw + tx + x) * c + ch] = level_to_byte(level.max(0.0) as usize, levels);
                }
            }
        }
    }
    Ok((gw, gh, out))
}

/// Writes [`render_grid`] as an 8-bit grayscale or RGB PNG.
pub fn write_png_grid(images: &Tensor, levels: usize, columns: usize, path: &Path) -> Result<(usize, usize)> {
    let (w, h, bytes) = render_grid(images, levels, columns)?;
    let c = images.shape()[1];
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok((w, h))
}

/// Decoded 8-bit PNG: `(width, height, channels, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// One vector per line, space-separated decimals.
pub fn parse_embeddings(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Invalid(format!("embedding line {}: {e}", i + 1)))?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Invalid(format!("embedding line {} has {} values", i + 1, row.len())));
        }
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    Tensor::new(&[rows.len(), d], rows.concat())
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    parse_embeddings(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_floor_rule_and_identity() {
        let q = QuantizationSpec::new(2).unwrap();
        assert_eq!(q.quantize(127), 0);
        assert_eq!(q.quantize(128), 1);
        let q = QuantizationSpec::new(256).unwrap();
        assert!((0..=255u8).all(|v| q.quantize(v) == v as usize));
        assert!(QuantizationSpec::new(3).is_err());
        assert!(QuantizationSpec::new(512).is_err());
    }

    #[test]
    fn dequantize_then_quantize_is_identity() {
        for bits in 1..=8 {
            let q = QuantizationSpec::new(1 << bits).unwrap();
            for l in 0..q.levels() {
                assert_eq!(q.quantize(q.dequantize(l)), l);
                assert_eq!(q.dequantize(l), level_to_byte(l, q.levels()));
            }
            let mut prev = 0;
            for v in 0..=255u8 {
                assert!(q.quantize(v) >= prev);
                prev = q.quantize(v);
            }
        }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let arr = IdxArray {
            dims: vec![4, 2, 2],
            data: (0..16).collect(),
        };
        let bytes = encode_idx(&arr);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
        assert_eq!(encode_idx(&parse_idx(&bytes).unwrap()), bytes);

        let mut bad = bytes.clone();
        bad[1] = 1;
        assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            parse_idx(&bytes[..bytes.len() - 1]),
            Err(Error::Format { offset: 31, .. })
        ));
        assert!(parse_idx(&bytes[..6]).is_err());
        assert!(parse_idx(&[]).is_err());
    }

    #[test]
    fn cifar_layout() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 200;
        bytes[1 + 1024] = 77;
        bytes[CIFAR_RECORD] = 9;
        let ds = parse_cifar(&bytes, QuantizationSpec::new(256).unwrap()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, Some(vec![3, 9]));
        assert_eq!(ds.images.at(&[0, 0, 0, 0]), 200.0);
        assert_eq!(ds.images.at(&[0, 1, 0, 0]), 77.0);
        assert!(parse_cifar(&bytes[..CIFAR_RECORD + 5], QuantizationSpec::new(4).unwrap()).is_err());
    }

    #[test]
    fn stripes_construction_balance_and_classifier() {
        let ds = make_synthetic(SyntheticKind::StripesHv, 200, (8, 8), 4, 3).unwrap();
        let labels = ds.labels.clone().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 100);
        for i in 0..ds.len() {
            let img = ds.images.batch_item(i);
            if labels[i] == 0 {
                for y in 0..8 {
                    assert!((0..8).all(|x| img.at(&[0, 0, y, x]) == img.at(&[0, 0, y, 0])));
                }
            }
            assert_eq!(classify_stripes(img.data(), 8, 8), labels[i]);
        }
    }

    #[test]
    fn brightness_classes_are_separated() {
        let ds = make_synthetic(SyntheticKind::Brightness2Class, 10, (4, 4), 8, 1).unwrap();
        for i in 0..10 {
            let img = ds.images.batch_item(i);
            assert!(img.data().iter().all(|&v| (v >= 4.0) == (i % 2 == 1)));
        }
    }

    #[test]
    fn grid_dims_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = Tensor::from_fn(&[4, 1, 3, 5], |i| (i % 4) as f64);
        let path = dir.path().join("g.png");
        assert_eq!(write_png_grid(&images, 4, 2, &path).unwrap(), (11, 7));
        let (w, h, c, bytes) = read_png(&path).unwrap();
        assert_eq!((w, h, c), (11, 7, 1));
        assert_eq!(bytes, render_grid(&images, 4, 2).unwrap().2);
        assert_eq!(bytes[0], level_to_byte(0, 4));
        assert_eq!(bytes[5], 255);

        let rgb = Tensor::from_fn(&[3, 3, 2, 2], |i| (i % 256) as f64);
        let path = dir.path().join("c.png");
        write_png_grid(&rgb, 256, 2, &path).unwrap();
        let (w, h, c, bytes) = read_png(&path).unwrap();
        assert_eq!((w, h, c), (5, 5, 3));
        assert_eq!(bytes[1], rgb.at(&[0, 1, 0, 0]) as u8);
    }

    #[test]
    fn one_hot_and_conditioning() {
        let ds = make_synthetic(SyntheticKind::StripesHv, 4, (4, 4), 2, 0).unwrap();
        match ds.conditioning(&[1, 2], CondSource::Class).unwrap() {
            Conditioning::Global(h) => assert_eq!(h.data(), &[0.0, 1.0, 1.0, 0.0]),
            other => panic!("{other:?}"),
        }
        assert!(ds.conditioning(&[0], CondSource::Embedding).is_err());
        assert!(one_hot(&[2], 2).is_err());
    }

    #[test]
    fn embeddings_parse() {
        let e = parse_embeddings("1 2.5\n\n-3 4e-1\n").unwrap();
        assert_eq!(e.shape(), &[2, 2]);
        assert_eq!(e.data(), &[1.0, 2.5, -3.0, 0.4]);
        assert!(parse_embeddings("1 2\n3\n").is_err());
    }
}
