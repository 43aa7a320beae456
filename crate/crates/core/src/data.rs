//! Dataset ingestion (MNIST IDX files and PGM/PPM folders), resizing,
//! seeded batching and binary PGM/PPM image output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, dim_err, HqaError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Overrides [`default_mnist_dir`].
pub const MNIST_DIR_ENV: &str = "HQA_MNIST_DIR";

/// `$HQA_MNIST_DIR`, else `data/mnist` under the workspace root.
pub fn default_mnist_dir() -> PathBuf {
    match std::env::var_os(MNIST_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// 8-bit greyscale images, row-major, `count × rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistData {
    pub images: RawImages,
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HqaError::Parse(format!("{what}: truncated header")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(HqaError::Parse(format!(
            "idx images: bad magic {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(HqaError::Parse(format!(
            "idx images: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(HqaError::Parse(format!(
            "idx labels: bad magic {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(HqaError::Parse(format!(
            "idx labels: expected {count} labels, found {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Reads the canonical uncompressed IDX file pair of `split` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<MnistData> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let read = |name: String| -> Result<Vec<u8>> {
        let path = dir.join(&name);
        fs::read(&path).map_err(|e| {
            HqaError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })
    };
    let images = parse_idx_images(&read(format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = parse_idx_labels(&read(format!("{prefix}-labels-idx1-ubyte"))?)?;
    if labels.len() != images.count {
        return Err(HqaError::Parse(format!(
            "{} labels for {} images",
            labels.len(),
            images.count
        )));
    }
    Ok(MnistData { images, labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    #[default]
    Bilinear,
    /// Centre the source in a zero canvas.
    ZeroPad,
}

/// Bilinear resampling of one channel with half-pixel centres and edge
/// clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s =
                    ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * fx;
            let bottom = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

/// `[B,1,32,32]` batch in `[0,1]` from 28×28 (or any ≤32) 8-bit images.
pub fn resize_to_32<T: Real>(images: &RawImages, method: ResizeMethod) -> Result<Tensor<T>> {
    const S: usize = 32;
    let (h, w) = (images.rows, images.cols);
    if h == 0 || w == 0 || (method == ResizeMethod::ZeroPad && (h > S || w > S)) {
        return Err(dim_err(
            "resize_to_32",
            format!("cannot map {h}×{w} onto 32×32"),
        ));
    }
    let mut data = Vec::with_capacity(images.count * S * S);
    for i in 0..images.count {
        let img: Vec<f64> = images.image(i).iter().map(|&p| p as f64 / 255.0).collect();
        match method {
            ResizeMethod::Bilinear => data.extend(
                resize_bilinear(&img, h, w, S, S)
                    .into_iter()
                    .map(|v| T::c(v.clamp(0.0, 1.0))),
            ),
            ResizeMethod::ZeroPad => {
                let (oy, ox) = ((S - h) / 2, (S - w) / 2);
                let mut canvas = vec![T::zero(); S * S];
                for y in 0..h {
                    for x in 0..w {
                        canvas[(y + oy) * S + x + ox] = T::c(img[y * w + x]);
                    }
                }
                data.extend(canvas);
            }
        }
    }
    Tensor::new([images.count, 1, S, S], data)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    MnistIdx {
        dir: PathBuf,
    },
    /// Every `.pgm`/`.ppm` in the folder, name-sorted, all the same size.
    ImageFolder {
        dir: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub split: Split,
    pub limit: Option<usize>,
    pub resize: ResizeMethod,
}

/// Images in `[0,1]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = f32> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<u8>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Option<Vec<u8>>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(dim_err(
                "Dataset",
                format!("images must be [N,C,H,W], got {:?}", images.shape()),
            ));
        }
        if labels
            .as_ref()
            .is_some_and(|l| l.len() != images.shape()[0])
        {
            return Err(dim_err("Dataset", "label count differs from image count"));
        }
        if images
            .data()
            .iter()
            .any(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(arg_err("Dataset", "pixel values must lie in [0,1]"));
        }
        Ok(Self { images, labels })
    }

    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        let mut ds = match &spec.source {
            DataSource::MnistIdx { dir } => {
                let m = load_mnist(dir, spec.split)?;
                Self::new(resize_to_32(&m.images, spec.resize)?, Some(m.labels))?
            }
            DataSource::ImageFolder { dir } => Self::from_folder(dir)?,
        };
        if let Some(limit) = spec.limit {
            if limit > ds.len() {
                return Err(arg_err(
                    "Dataset::load",
                    format!("limit {limit} exceeds {} samples", ds.len()),
                ));
            }
            ds = ds.take(limit);
        }
        Ok(ds)
    }

    fn from_folder(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(arg_err(
                "Dataset::load",
                format!("no PGM/PPM images in {}", dir.display()),
            ));
        }
        let images = paths
            .iter()
            .map(|p| read_image(p))
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let parts: Vec<Tensor<T>> = images
            .into_iter()
            .map(|t| {
                let s = t.shape().to_vec();
                t.reshape([1, s[0], s[1], s[2]])
            })
            .collect::<Result<_>>()?;
        Self::new(Tensor::concat_outer(&parts)?, None)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_outer(0, n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch<T> {
        ImageBatch {
            images: self.images.select_outer(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Sample order of `epoch` under `seed`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Batches of one epoch. Training shuffles and drops the trailing
    /// partial batch; evaluation keeps dataset order and every sample.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        training: bool,
    ) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(arg_err("batches", "batch size must be ≥ 1"));
        }
        let order = if training {
            self.epoch_order(seed, epoch)
        } else {
            (0..self.len()).collect()
        };
        Ok(order
            .chunks(batch_size)
            .filter(|c| !training || c.len() == batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }
}

/// Endless training batches across epochs.
pub struct BatchStream<'a, T = f32> {
    data: &'a Dataset<T>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl<'a, T: Real> BatchStream<'a, T> {
    pub fn new(data: &'a Dataset<T>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size > data.len() {
            return Err(arg_err(
                "BatchStream",
                format!("batch size {batch_size} exceeds {} samples", data.len()),
            ));
        }
        let queue = data.batches(batch_size, seed, 0, true)?.into_iter();
        Ok(Self {
            data,
            batch_size,
            seed,
            epoch: 0,
            queue,
        })
    }
}

impl<T: Real> Iterator for BatchStream<'_, T> {
    type Item = ImageBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(idx) = self.queue.next() {
                return Some(self.data.select(&idx));
            }
            self.epoch += 1;
            self.queue = self
                .data
                .batches(self.batch_size, self.seed, self.epoch, true)
                .ok()?
                .into_iter();
        }
    }
}

fn to_byte<T: Real>(v: T) -> Result<u8> {
    let f = v.f64();
    if !(0.0..=1.0).contains(&f) {
        return Err(arg_err(
            "write_image",
            format!("pixel value {f} outside [0,1]"),
        ));
    }
    Ok((f * 255.0).round() as u8)
}

/// Writes `[C,H,W]` (C = 1 → PGM, C = 3 → PPM) as binary 8-bit netpbm.
pub fn write_image<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(dim_err(
            "write_image",
            format!("expected [1|3,H,W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut bytes = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            bytes.push(to_byte(image.data()[ch * plane + p])?);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM/PPM (maxval ≤ 255) into `[C,H,W]` values in `[0,1]`.
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    parse_netpbm(&fs::read(path)?)
}

pub fn parse_netpbm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(HqaError::Parse("netpbm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(HqaError::Parse(format!(
                "netpbm: unsupported magic {other:?}"
            )))
        }
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| HqaError::Parse(format!("netpbm: bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(HqaError::Parse(format!(
            "netpbm: unsupported maxval {maxval}"
        )));
    }
    // One whitespace byte separates the header from the raster.
    let start = pos + 1;
    let plane = w * h;
    let raster = bytes
        .get(start..start + plane * channels)
        .ok_or_else(|| HqaError::Parse("netpbm: truncated raster".into()))?;
    let mut data = vec![T::zero(); plane * channels];
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = T::c(raster[p * channels + ch] as f64 / maxval as f64);
        }
    }
    Tensor::new([channels, h, w], data)
}

/// Tiles `[N,C,H,W]` into one `[C, rows·H, cols·W]` image, row-major.
pub fn tile<T: Real>(images: &Tensor<T>, cols: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 || cols == 0 {
        return Err(dim_err(
            "tile",
            format!("expected non-empty [N,C,H,W], got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (th, tw) = (rows * h, cols * w);
    let mut out = vec![T::zero(); c * th * tw];
    for i in 0..n {
        let (r, q) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                let src = ((i * c + ch) * h + y) * w;
                let dst = (ch * th + r * h + y) * tw + q * w;
                out[dst..dst + w].copy_from_slice(&images.data()[src..src + w]);
            }
        }
    }
    Tensor::new([c, th, tw], out)
}
