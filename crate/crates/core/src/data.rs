//! Image batches and desk-scale datasets.
//!
//! The default dataset is a procedurally rendered 10-class digit set
//! (16x16 grayscale): glyphs are placed with random offsets, ink/background
//! intensity jitter, and additive Gaussian noise, all drawn from a dataset
//! seed that is independent of the run seed so every run trains and
//! evaluates against the same split. The CIFAR-10 binary layout is also
//! supported for larger machines.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{Array3, Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// A batch of images `(B, C, H, W)` in `[0, 1]` with per-image labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Array4<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::shape(
                "ImageBatch",
                format!("{} labels", images.dim().0),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(ImageBatch { images, labels })
    }

    pub fn empty(c: usize, h: usize, w: usize) -> Self {
        ImageBatch {
            images: Array4::zeros((0, c, h, w)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.images.dim();
        (d.1, d.2, d.3)
    }

    pub fn image(&self, i: usize) -> Array3<f64> {
        self.images.index_axis(ndarray::Axis(0), i).to_owned()
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        ImageBatch { images, labels }
    }

    pub fn from_images(images: Vec<Array3<f64>>, labels: Vec<usize>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("from_images: empty image list"));
        }
        let (c, h, w) = images[0].dim();
        let mut arr = Array4::zeros((images.len(), c, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (c, h, w) {
                return Err(Error::shape(
                    "from_images",
                    format!("{:?}", (c, h, w)),
                    format!("{:?}", img.dim()),
                ));
            }
            arr.index_axis_mut(ndarray::Axis(0), i).assign(img);
        }
        ImageBatch::new(arr, labels)
    }

    /// Constant (non-differentiable) tensor view of the batch.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(self.images.clone().into_dyn())
    }

    /// Differentiable leaf tensor holding a copy of the pixels.
    pub fn to_variable(&self) -> Tensor {
        Tensor::new(self.images.clone().into_dyn(), true)
    }
}

/// Convert a `(B, C, H, W)` tensor value back into a batch.
pub fn batch_from_tensor(t: &Tensor, labels: Vec<usize>) -> Result<ImageBatch> {
    let arr: ArrayD<f64> = t.to_array();
    let images = arr
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::invalid("batch_from_tensor: tensor is not 4-D"))?;
    ImageBatch::new(images, labels)
}

/// A labelled train/test split.
#[derive(Debug)]
pub struct Dataset {
    pub id: String,
    pub label_count: usize,
    pub train: ImageBatch,
    pub test: ImageBatch,
}

impl Dataset {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.train.image_shape()
    }
}

const GLYPH_W: usize = 8;
const GLYPH_H: usize = 12;

#[rustfmt::skip]
const GLYPHS: [[&str; GLYPH_H]; 10] = [
    [
        "..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#",
        "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####..",
    ],
    [
        "...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...",
        "...##...", "...##...", "...##...", "...##...", "...##...", ".######.",
    ],
    [
        "..####..", ".#....#.", "#......#", ".......#", ".......#", "......#.",
        ".....#..", "....#...", "...#....", "..#.....", ".#......", "########",
    ],
    [
        "..####..", ".#....#.", "#......#", ".......#", ".......#", "...###..",
        ".......#", ".......#", ".......#", "#......#", ".#....#.", "..####..",
    ],
    [
        ".....##.", "....###.", "...#.##.", "..#..##.", ".#...##.", "#....##.",
        "########", ".....##.", ".....##.", ".....##.", ".....##.", ".....##.",
    ],
    [
        "#######.", "#.......", "#.......", "#.......", "######..", "......#.",
        ".......#", ".......#", ".......#", "#......#", ".#....#.", "..####..",
    ],
    [
        "..####..", ".#....#.", "#.......", "#.......", "#.####..", "##....#.",
        "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####..",
    ],
    [
        "########", ".......#", "......#.", "......#.", ".....#..", ".....#..",
        "....#...", "....#...", "...#....", "...#....", "..#.....", "..#.....",
    ],
    [
        "..####..", ".#....#.", "#......#", "#......#", ".#....#.", "..####..",
        ".#....#.", "#......#", "#......#", "#......#", ".#....#.", "..####..",
    ],
    [
        "..####..", ".#....#.", "#......#", "#......#", "#......#", ".#....##",
        "..####.#", ".......#", ".......#", ".......#", ".#....#.", "..####..",
    ],
];

/// Desk-scale digit image size.
pub const DIGITS_HW: usize = 16;

/// Render one digit with positional/intensity jitter and pixel noise.
fn render_digit(rng: &mut ChaCha12Rng, class: usize) -> Array3<f64> {
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut img = Array3::<f64>::zeros((1, DIGITS_HW, DIGITS_HW));
    let background = rng.random_range(0.0..0.08);
    let ink = rng.random_range(0.65..1.0);
    let dx = rng.random_range(0..=(DIGITS_HW - GLYPH_W)) as isize - 1;
    let dy = rng.random_range(0..=(DIGITS_HW - GLYPH_H)) as isize;
    img.fill(background);
    let glyph = &GLYPHS[class];
    for (gy, row) in glyph.iter().enumerate() {
        for (gx, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                let y = gy as isize + dy;
                let x = gx as isize + dx;
                if y >= 0 && x >= 0 && (y as usize) < DIGITS_HW && (x as usize) < DIGITS_HW {
                    img[(0, y as usize, x as usize)] = ink;
                }
            }
        }
    }
    img.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    img
}

fn digit_split(rng: &mut ChaCha12Rng, size: usize) -> ImageBatch {
    let mut images = Array4::zeros((size, 1, DIGITS_HW, DIGITS_HW));
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let class = i % 10;
        let img = render_digit(rng, class);
        images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
        labels.push(class);
    }
    ImageBatch { images, labels }
}

/// Procedural 10-class digit dataset. Fully determined by `seed` and sizes.
pub fn digits(train_size: usize, test_size: usize, seed: u64) -> Dataset {
    let mut train_rng = crate::rng::stream(seed, "digits-train", &[]);
    let mut test_rng = crate::rng::stream(seed, "digits-test", &[]);
    Dataset {
        id: "digits".into(),
        label_count: 10,
        train: digit_split(&mut train_rng, train_size),
        test: digit_split(&mut test_rng, test_size),
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_HW: usize = 32;

fn read_cifar_file(path: &Path) -> Result<ImageBatch> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{} does not look like a CIFAR-10 binary batch ({} bytes is not a multiple of {CIFAR_RECORD})",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Array4::zeros((n, 3, CIFAR_HW, CIFAR_HW));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        for c in 0..3 {
            for y in 0..CIFAR_HW {
                for x in 0..CIFAR_HW {
                    let v = rec[1 + c * CIFAR_HW * CIFAR_HW + y * CIFAR_HW + x];
                    images[(i, c, y, x)] = v as f64 / 255.0;
                }
            }
        }
    }
    Ok(ImageBatch { images, labels })
}

fn concat_batches(parts: Vec<ImageBatch>) -> ImageBatch {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let (_, c, h, w) = parts[0].images.dim();
    let mut images = Array4::zeros((total, c, h, w));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for p in parts {
        for i in 0..p.len() {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&p.images.index_axis(ndarray::Axis(0), i));
            row += 1;
        }
        labels.extend(p.labels);
    }
    ImageBatch { images, labels }
}

/// CIFAR-10 from the standard binary layout under `root`.
pub fn cifar10(root: &Path) -> Result<Dataset> {
    let expected = "data_batch_1.bin .. data_batch_5.bin and test_batch.bin (CIFAR-10 binary version)";
    let mut train_parts = Vec::new();
    for i in 1..=5 {
        let p = root.join(format!("data_batch_{i}.bin"));
        if !p.exists() {
            return Err(Error::Dataset(format!(
                "missing {}; expected layout under {}: {expected}",
                p.display(),
                root.display()
            )));
        }
        train_parts.push(read_cifar_file(&p)?);
    }
    let test_path = root.join("test_batch.bin");
    if !test_path.exists() {
        return Err(Error::Dataset(format!(
            "missing {}; expected layout under {}: {expected}",
            test_path.display(),
            root.display()
        )));
    }
    Ok(Dataset {
        id: "cifar10".into(),
        label_count: 10,
        train: concat_batches(train_parts),
        test: read_cifar_file(&test_path)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_reproducible_and_in_range() {
        let a = digits(40, 20, 7);
        let b = digits(40, 20, 7);
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.test.labels, b.test.labels);
        assert!(a.train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Balanced classes by construction.
        for c in 0..10 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 4);
        }
    }

    #[test]
    fn digit_classes_are_visually_distinct() {
        // Mean images of two different classes should differ substantially.
        let d = digits(200, 10, 3);
        let mut means = vec![Array3::<f64>::zeros((1, DIGITS_HW, DIGITS_HW)); 10];
        let mut counts = [0usize; 10];
        for i in 0..d.train.len() {
            let c = d.train.labels[i];
            means[c] = &means[c] + &d.train.image(i);
            counts[c] += 1;
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            *m /= n as f64;
        }
        for a in 0..10 {
            for b in (a + 1)..10 {
                let diff: f64 = (&means[a] - &means[b]).mapv(f64::abs).sum();
                assert!(diff > 3.0, "classes {a} and {b} look alike: {diff}");
            }
        }
    }

    #[test]
    fn select_keeps_pairing() {
        let d = digits(30, 10, 1);
        let sub = d.train.select(&[5, 2, 9]);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.labels[0], d.train.labels[5]);
        assert_eq!(sub.image(1), d.train.image(2));
    }

    #[test]
    fn cifar_reader_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        // Fabricate 2-record batches.
        let mut rec = vec![0u8; CIFAR_RECORD * 2];
        rec[0] = 3;
        rec[1] = 255; // first red pixel of image 0
        rec[CIFAR_RECORD] = 7;
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let ds = cifar10(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 10);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.test.labels, vec![3, 7]);
        assert!((ds.test.images[(0, 0, 0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cifar_missing_file_names_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let err = cifar10(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data_batch_1.bin"), "unhelpful error: {msg}");
    }
}
