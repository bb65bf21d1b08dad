//! MNIST ingestion (IDX, optionally gzip-compressed) and image grid output.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;

use crate::error::{Error, PathContext, Result};
use crate::tensor::{FloatTensor, Real, Rng, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// Images `[n, 1, h, w]` scaled to `[-1, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: FloatTensor<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(h, w)` of one image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// The first `n` samples.
    pub fn truncate(mut self, n: usize) -> Result<Dataset> {
        if n == 0 || n >= self.len() {
            return Ok(self);
        }
        let mut shape = self.images.shape().to_vec();
        let per = self.images.len() / shape[0];
        shape[0] = n;
        let mut data = self.images.into_data();
        data.truncate(n * per);
        self.labels.truncate(n);
        Ok(Dataset {
            images: Tensor::from_vec(shape, data)?,
            labels: self.labels,
        })
    }
}

#[inline]
pub fn pixel_to_real(p: u8) -> f32 {
    f32::from(p) / 127.5 - 1.0
}

/// Inverse of [`pixel_to_real`], clamping to `[-1, 1]` first.
#[inline]
pub fn real_to_pixel(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round() as u8
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).with_path(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).with_path(path)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], what: &str, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Truncated(format!("{what} header")));
    }
    let found = BigEndian::read_u32(bytes);
    if found != magic {
        return Err(Error::BadMagic {
            what: what.to_string(),
            found,
            expected: magic,
        });
    }
    Ok((0..dims).map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..]) as usize).collect())
}

/// Parses an IDX3 image file body.
pub fn parse_images(bytes: &[u8]) -> Result<FloatTensor<f32>> {
    let dims = header(bytes, "images", IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    if body.len() < n * h * w {
        return Err(Error::Truncated(format!("images: {} of {} pixel bytes", body.len(), n * h * w)));
    }
    let data = body[..n * h * w].iter().map(|&p| pixel_to_real(p)).collect();
    Tensor::from_vec(vec![n, 1, h, w], data)
}

/// Parses an IDX1 label file body.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = header(bytes, "labels", LABELS_MAGIC, 1)?[0];
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("labels: {} of {n} bytes", body.len())));
    }
    if let Some(&bad) = body[..n].iter().find(|&&l| usize::from(l) >= CLASSES) {
        return Err(Error::LabelOutOfRange {
            label: usize::from(bad),
            classes: CLASSES,
        });
    }
    Ok(body[..n].to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_labels(&read_file(labels_path.as_ref())?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Idx(format!("{} images but {} labels", images.shape()[0], labels.len())));
    }
    Ok(Dataset { images, labels })
}

/// Loads the training split from a directory holding the standard file
/// names, with or without a `.gz` suffix.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> Result<PathBuf> {
        [stem.to_string(), format!("{stem}.gz")]
            .into_iter()
            .map(|name| dir.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Path {
                path: dir.join(stem),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (also tried .gz)"),
            })
    };
    load_idx(find("train-images-idx3-ubyte")?, find("train-labels-idx1-ubyte")?)
}

/// Tiles `[k, 1, h, w]` images row-major into a grayscale raster.
/// Returns `(width, height, pixels)`; unused tiles stay black.
pub fn grid_pixels<T: Real>(images: &FloatTensor<T>, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (k, h, w) = match *images.shape() {
        [k, 1, h, w] => (k, h, w),
        _ => {
            return Err(Error::ShapeMismatch {
                expected: vec![images.shape()[0], 1, 0, 0],
                actual: images.shape().to_vec(),
            })
        }
    };
    if cols == 0 {
        return Err(Error::InvalidConfig("grid needs at least one column".into()));
    }
    let rows = k.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    for (i, img) in images.data().chunks(h * w).enumerate() {
        let (ty, tx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                pixels[(ty * h + y) * width + tx * w + x] = real_to_pixel(img[y * w + x].as_f64());
            }
        }
    }
    Ok((width, height, pixels))
}

/// Writes a grid as binary PGM when the extension is `.pgm`, PNG otherwise.
pub fn write_grid<T: Real>(images: &FloatTensor<T>, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (width, height, pixels) = grid_pixels(images, cols)?;
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let mut f = BufWriter::new(File::create(path).with_path(path)?);
        write!(f, "P5\n{width} {height}\n255\n").with_path(path)?;
        f.write_all(&pixels).with_path(path)?;
        f.flush().with_path(path)?;
    } else {
        let img = image::GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches size");
        img.save_with_format(path, image::ImageFormat::Png)?;
    }
    Ok(())
}

/// `[n, classes]` one-hot rows.
pub fn one_hot<T: Real>(labels: &[u8], classes: usize) -> Result<FloatTensor<T>> {
    let mut v = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        let l = usize::from(l);
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        v[i * classes + l] = T::one();
    }
    Tensor::from_vec(vec![labels.len(), classes], v)
}

/// One epoch of `(images, one-hot labels)` batches. The final partial batch
/// is dropped.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    classes: usize,
    next: usize,
}

pub fn batches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    classes: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::LabelOutOfRange {
            label: usize::from(bad),
            classes,
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        classes,
        next: 0,
    })
}

impl Batches<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for Batches<'_> {
    type Item = (FloatTensor<f32>, FloatTensor<f32>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.get(self.next..self.next + self.batch_size)?;
        self.next += self.batch_size;
        let per = self.ds.images.len() / self.ds.len();
        let mut shape = self.ds.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.ds.images.data()[i * per..(i + 1) * per]);
            labels.push(self.ds.labels[i]);
        }
        let images = Tensor::from_vec(shape, data).expect("batch shape");
        Some((images, one_hot(&labels, self.classes).expect("labels checked against classes")))
    }
}
