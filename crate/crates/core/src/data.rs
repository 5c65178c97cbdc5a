//! Datasets: MNIST-style IDX files, CIFAR-10 binary batches, and a synthetic
//! random-walk dataset on the hypercube. Samples are stored as `f32` rows in
//! `[0, 1]`; image rows are channel-major (`c × s × s`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dropout::{Rng, Stream};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Spatial layout of image samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Matrix<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub geometry: Option<Geometry>,
}

impl Dataset {
    pub fn new(samples: Matrix<f32>, labels: Vec<usize>, classes: usize, geometry: Option<Geometry>) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::CountMismatch { images: samples.rows(), labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} with {classes} classes")));
        }
        if let Some(g) = geometry {
            if g.channels * g.side * g.side != samples.cols() {
                return Err(Error::Config(format!("geometry {}x{}x{} for {}-wide samples", g.channels, g.side, g.side, samples.cols())));
            }
        }
        Ok(Dataset { samples, labels, classes, geometry })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            samples: self.samples.row_slice(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            geometry: self.geometry,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::Truncated { path: path.into(), expected: header as u64, found: bytes.len() as u64 });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic { path: path.into(), found, expected: magic });
    }
    let shape: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header as u64 + shape.iter().map(|&d| d as u64).product::<u64>();
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() as u64 });
    }
    if bytes.len() as u64 != expected {
        return Err(Error::Format { path: path.into(), detail: format!("{} trailing bytes", bytes.len() as u64 - expected) });
    }
    Ok(shape)
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled by 1/255; the class count is `max(label) + 1`, at least 10.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibytes = read_file(ipath)?;
    let lbytes = read_file(lpath)?;
    let ishape = idx_header(ipath, &ibytes, IDX_IMAGES, 3)?;
    let lshape = idx_header(lpath, &lbytes, IDX_LABELS, 1)?;
    let (n, rows, cols) = (ishape[0], ishape[1], ishape[2]);
    if n != lshape[0] {
        return Err(Error::CountMismatch { images: n, labels: lshape[0] });
    }
    let pixels = ibytes[16..].iter().map(|&p| p as f32 / 255.0).collect();
    let samples = Matrix::from_vec(n, rows * cols, pixels)?;
    let labels: Vec<usize> = lbytes[8..].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let geometry = (rows == cols).then_some(Geometry { channels: 1, side: rows });
    Dataset::new(samples, labels, classes, geometry)
}

/// Loads the standard MNIST file names from `dir`, for `"train"` or `"t10k"`.
pub fn load_mnist_split(dir: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let find = |stem: String| -> PathBuf {
        let plain = dir.join(&stem);
        if plain.exists() {
            plain
        } else {
            dir.join(stem.replacen("-idx", ".idx", 1))
        }
    };
    load_idx(find(format!("{split}-images-idx3-ubyte")), find(format!("{split}-labels-idx1-ubyte")))
}

/// Writes a dataset as an IDX pair. Values are stored as `round(255·v)`, so
/// binary and 8-bit data round-trip exactly. Only one-channel square images
/// or flat samples (`1 × dim`) are representable.
pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = match data.geometry {
        Some(Geometry { channels: 1, side }) => (side, side),
        None => (1, data.dim()),
        Some(_) => return Err(Error::Config("IDX export supports single-channel images only".into())),
    };
    if data.classes > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + data.samples.as_slice().len());
    for v in [IDX_IMAGES, data.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.samples.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images.as_ref(), img), (labels.as_ref(), lab)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Reads CIFAR-10 binary batches: records of one label byte followed by
/// 3×32×32 channel-major pixel bytes.
pub fn load_cifar10<P: AsRef<Path>>(batches: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batches {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            if record[0] >= 10 {
                return Err(Error::Format { path: path.into(), detail: format!("label {}", record[0]) });
            }
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    let samples = Matrix::from_vec(n, 3 * CIFAR_SIDE * CIFAR_SIDE, pixels)?;
    Dataset::new(samples, labels, 10, Some(Geometry { channels: 3, side: CIFAR_SIDE }))
}

/// Synthetic classes built from random walks on `{0,1}^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtificialSpec {
    pub classes: usize,
    pub dim: usize,
    pub walk_len: usize,
    pub flip: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Flip exactly `round(flip·dim)` bits instead of each bit independently.
    #[serde(default)]
    pub exact_flips: bool,
}

impl ArtificialSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.walk_len == 0 {
            return Err(Error::Config("classes, dim and walk_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.flip) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1)", self.flip)));
        }
        Ok(())
    }
}

/// `len` states of a walk on the hypercube starting at a uniform vertex; each
/// step flips one uniformly chosen coordinate.
pub fn hypercube_walk(dim: usize, len: usize, rng: &mut Rng) -> Vec<Vec<bool>> {
    let mut state: Vec<bool> = (0..dim).map(|_| rng.bernoulli(0.5)).collect();
    let mut walk = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            let i = rng.below(0, dim);
            state[i] = !state[i];
        }
        walk.push(state.clone());
    }
    walk
}

fn noisy_sample(walk: &[Vec<bool>], spec: &ArtificialSpec, rng: &mut Rng, out: &mut [f32]) {
    let mut bits = walk[rng.below(0, walk.len())].clone();
    if spec.exact_flips {
        let k = crate::dropout::dropped_count(spec.dim, spec.flip);
        let mut idx: Vec<usize> = (0..spec.dim).collect();
        for j in 0..k {
            let r = rng.below(j, spec.dim);
            idx.swap(j, r);
            bits[idx[j]] = !bits[idx[j]];
        }
    } else {
        for b in bits.iter_mut() {
            if rng.bernoulli(spec.flip) {
                *b = !*b;
            }
        }
    }
    for (o, b) in out.iter_mut().zip(bits) {
        *o = if b { 1.0 } else { 0.0 };
    }
}

/// Training and test sets drawn from the same per-class walks. Each sample
/// picks a uniform walk position and then flips bits with probability `flip`.
pub fn gen_artificial(spec: &ArtificialSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let (c, d) = (spec.classes, spec.dim);
    let mut train = Matrix::zeros(c * spec.train_per_class, d);
    let mut test = Matrix::zeros(c * spec.test_per_class, d);
    let mut train_labels = Vec::with_capacity(train.rows());
    let mut test_labels = Vec::with_capacity(test.rows());
    for class in 0..c {
        let walk = hypercube_walk(d, spec.walk_len, &mut Rng::for_stream(spec.seed, Stream::Walk { class }));
        let mut rng = Rng::for_stream(spec.seed, Stream::Sample { class });
        for i in 0..spec.train_per_class {
            noisy_sample(&walk, spec, &mut rng, train.row_mut(class * spec.train_per_class + i));
            train_labels.push(class);
        }
        for i in 0..spec.test_per_class {
            noisy_sample(&walk, spec, &mut rng, test.row_mut(class * spec.test_per_class + i));
            test_labels.push(class);
        }
    }
    Ok((Dataset::new(train, train_labels, c, None)?, Dataset::new(test, test_labels, c, None)?))
}

/// Training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Mirror each image left-right with probability ½.
    #[serde(default)]
    pub hflip: bool,
    /// Random `crop × crop` window (center window at test time).
    #[serde(default)]
    pub crop: Option<usize>,
}

impl Augment {
    pub fn is_none(&self) -> bool {
        !self.hflip && self.crop.is_none()
    }

    /// Geometry of samples after augmentation.
    pub fn output_geometry(&self, g: Option<Geometry>) -> Result<Option<Geometry>> {
        if self.is_none() {
            return Ok(g);
        }
        let g = g.ok_or_else(|| Error::Config("augmentation needs image data".into()))?;
        match self.crop {
            Some(c) if c == 0 || c > g.side => Err(Error::Config(format!("crop {c} for {}-pixel images", g.side))),
            Some(c) => Ok(Some(Geometry { side: c, ..g })),
            None => Ok(Some(g)),
        }
    }
}

/// Reverses the width axis of every channel of one sample in place.
pub fn hflip(sample: &mut [f32], g: Geometry) {
    for row in sample.chunks_exact_mut(g.side) {
        row.reverse();
    }
}

fn crop_into(sample: &[f32], g: Geometry, size: usize, y0: usize, x0: usize, out: &mut [f32]) {
    for c in 0..g.channels {
        for y in 0..size {
            let src = c * g.side * g.side + (y0 + y) * g.side + x0;
            let dst = (c * size + y) * size;
            out[dst..dst + size].copy_from_slice(&sample[src..src + size]);
        }
    }
}

/// Center `size × size` window of every image.
pub fn center_crop(data: &Dataset, size: usize) -> Result<Dataset> {
    let g = Augment { hflip: false, crop: Some(size) }.output_geometry(data.geometry)?.expect("image data");
    let src_g = data.geometry.expect("image data");
    let off = (src_g.side - size) / 2;
    let mut out = Matrix::zeros(data.len(), g.channels * size * size);
    for i in 0..data.len() {
        crop_into(data.samples.row(i), src_g, size, off, off, out.row_mut(i));
    }
    Dataset::new(out, data.labels.clone(), data.classes, Some(g))
}

/// One epoch of minibatches: a fresh permutation cut into `⌊N/b⌋` batches.
pub struct Minibatches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    b: usize,
    next: usize,
    augment: Augment,
    out_geometry: Option<Geometry>,
    rng: &'a mut Rng,
}

/// Shuffles with `rng` and yields `(samples, labels)` batches. Augmentation
/// draws come from the same generator, after the permutation.
pub fn minibatches<'a>(data: &'a Dataset, b: usize, rng: &'a mut Rng, augment: Augment) -> Result<Minibatches<'a>> {
    if b == 0 || b > data.len() {
        return Err(Error::Config(format!("minibatch size {b} for {} samples", data.len())));
    }
    let out_geometry = augment.output_geometry(data.geometry)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.below(0, i + 1);
        order.swap(i, j);
    }
    Ok(Minibatches { data, order, b, next: 0, augment, out_geometry, rng })
}

impl Minibatches<'_> {
    pub fn len(&self) -> usize {
        self.order.len() / self.b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Iterator for Minibatches<'_> {
    type Item = (Matrix<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next + self.b > self.order.len() - self.order.len() % self.b {
            return None;
        }
        let idx = &self.order[self.next..self.next + self.b];
        self.next += self.b;
        let labels = idx.iter().map(|&i| self.data.labels[i]).collect();
        if self.augment.is_none() {
            let mut x = Matrix::zeros(self.b, self.data.dim());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).copy_from_slice(self.data.samples.row(i));
            }
            return Some((x, labels));
        }
        let src_g = self.data.geometry.expect("checked when the iterator was built");
        let g = self.out_geometry.expect("checked when the iterator was built");
        let mut x = Matrix::zeros(self.b, g.channels * g.side * g.side);
        for (r, &i) in idx.iter().enumerate() {
            let (y0, x0) = match self.augment.crop {
                Some(size) => (self.rng.below(0, src_g.side - size + 1), self.rng.below(0, src_g.side - size + 1)),
                None => (0, 0),
            };
            crop_into(self.data.samples.row(i), src_g, g.side, y0, x0, x.row_mut(r));
            if self.augment.hflip && self.rng.bernoulli(0.5) {
                hflip(x.row_mut(r), g);
            }
        }
        Some((x, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ArtificialSpec {
        ArtificialSpec { classes: 10, dim: 100, walk_len: 100, flip: 0.4, train_per_class: 100, test_per_class: 10, seed: 1, exact_flips: false }
    }

    #[test]
    fn artificial_shapes_and_values() {
        let (train, test) = gen_artificial(&spec()).unwrap();
        assert_eq!(train.samples.shape(), (1000, 100));
        assert_eq!(test.samples.shape(), (100, 100));
        assert!(train.samples.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(gen_artificial(&spec()).unwrap().0, train);
    }

    #[test]
    fn walk_steps_change_one_coordinate() {
        let walk = hypercube_walk(50, 200, &mut Rng::new(3, 0));
        for pair in walk.windows(2) {
            assert_eq!(pair[0].iter().zip(&pair[1]).filter(|(a, b)| a != b).count(), 1);
        }
    }

    #[test]
    fn zero_flip_samples_are_walk_states() {
        let s = ArtificialSpec { flip: 0.0, walk_len: 1, ..spec() };
        let (train, _) = gen_artificial(&s).unwrap();
        assert_eq!(train.samples.row(0), train.samples.row(1));
    }

    #[test]
    fn exact_flips_flip_the_rounded_count() {
        let s = ArtificialSpec { walk_len: 1, exact_flips: true, train_per_class: 5, ..spec() };
        let walk = hypercube_walk(100, 1, &mut Rng::for_stream(s.seed, Stream::Walk { class: 0 }));
        let (train, _) = gen_artificial(&s).unwrap();
        for i in 0..5 {
            let diff = train.samples.row(i).iter().zip(&walk[0]).filter(|(&v, &b)| (v == 1.0) != b).count();
            assert_eq!(diff, 40);
        }
    }

    #[test]
    fn minibatches_are_a_permutation_without_the_remainder() {
        let (train, _) = gen_artificial(&ArtificialSpec { train_per_class: 7, ..spec() }).unwrap();
        let mut rng = Rng::new(1, 0);
        let batches: Vec<_> = minibatches(&train, 16, &mut rng, Augment::default()).unwrap().collect();
        assert_eq!(batches.len(), 70 / 16);
        assert!(batches.iter().all(|(x, l)| x.rows() == 16 && l.len() == 16));
        let mut rng2 = Rng::new(1, 0);
        let again: Vec<_> = minibatches(&train, 16, &mut rng2, Augment::default()).unwrap().collect();
        assert_eq!(batches, again);
        assert!(minibatches(&train, 71, &mut rng, Augment::default()).is_err());
        assert!(minibatches(&train, 0, &mut rng, Augment::default()).is_err());
    }

    #[test]
    fn flip_is_an_involution_and_crop_centers() {
        let g = Geometry { channels: 2, side: 4 };
        let orig: Vec<f32> = (0..32).map(|v| v as f32).collect();
        let mut s = orig.clone();
        hflip(&mut s, g);
        assert_eq!(&s[..4], &[3.0, 2.0, 1.0, 0.0]);
        hflip(&mut s, g);
        assert_eq!(s, orig);
        let data = Dataset::new(Matrix::from_vec(1, 32, orig).unwrap(), vec![0], 1, Some(g)).unwrap();
        let c = center_crop(&data, 2).unwrap();
        assert_eq!(c.samples.row(0), &[5.0, 6.0, 9.0, 10.0, 21.0, 22.0, 25.0, 26.0]);
    }

    #[test]
    fn augment_requires_images() {
        let (train, _) = gen_artificial(&spec()).unwrap();
        let mut rng = Rng::new(1, 0);
        assert!(minibatches(&train, 10, &mut rng, Augment { hflip: true, crop: None }).is_err());
    }
}
