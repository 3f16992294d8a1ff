//! Datasets: generated 2-D densities, IDX and CIFAR-10 binary images, CSV
//! points, uniform dequantization and deterministic splits.
//!
//! Every dataset is an array `[n, h, w, c]`; 2-D points are `[n, 1, 1, 2]`.
//! Images hold integer levels in `[0, 256)`.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::rng::FlowRng;

pub const IDX_MAGIC_GRAY: u32 = 0x0000_0803;
pub const IDX_MAGIC_COLOR: u32 = 0x0000_0804;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;
pub const PIXEL_LEVELS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Rings,
    Checkerboard,
    Idx,
    CifarBinary,
    CsvPoints,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Moons => "moons",
            Self::Rings => "rings",
            Self::Checkerboard => "checkerboard",
            Self::Idx => "idx",
            Self::CifarBinary => "cifar",
            Self::CsvPoints => "csv",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub count: usize,
}

impl DatasetSpec {
    pub fn generated(kind: DatasetKind, seed: u64, count: usize) -> Self {
        Self {
            kind,
            path: None,
            seed,
            count,
        }
    }

    /// A generator name (`moons`, `rings`, `checkerboard`) or a file path.
    /// Files ending in `.csv` are points, `.bin` CIFAR-10 batches, anything
    /// else IDX.
    pub fn from_arg(arg: &str, seed: u64, count: usize) -> Self {
        let kind = match arg {
            "moons" => DatasetKind::Moons,
            "rings" => DatasetKind::Rings,
            "checkerboard" => DatasetKind::Checkerboard,
            _ => {
                let ext = Path::new(arg).extension().and_then(|e| e.to_str()).unwrap_or("");
                let kind = match ext {
                    "csv" => DatasetKind::CsvPoints,
                    "bin" => DatasetKind::CifarBinary,
                    _ => DatasetKind::Idx,
                };
                return Self {
                    kind,
                    path: Some(PathBuf::from(arg)),
                    seed,
                    count,
                };
            }
        };
        Self::generated(kind, seed, count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseArray,
    /// Number of discrete levels for images; `None` for continuous points.
    pub levels: Option<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.x.shape();
        [s[1], s[2], s[3]]
    }

    pub fn is_image(&self) -> bool {
        self.levels.is_some()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            levels: self.levels,
        }
    }
}

pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
    let mut rng = FlowRng::derive(spec.seed, "data");
    let points = |v: Vec<f64>| -> Result<Dataset> {
        let n = v.len() / 2;
        Ok(Dataset {
            x: DenseArray::new(&[n, 1, 1, 2], v)?,
            levels: None,
        })
    };
    let path = || {
        spec.path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} dataset needs a file path", spec.kind)))
    };
    match spec.kind {
        DatasetKind::Moons => points(moons(spec.count, &mut rng)),
        DatasetKind::Rings => points(rings(spec.count, &mut rng)),
        DatasetKind::Checkerboard => points(checkerboard(spec.count, &mut rng)),
        DatasetKind::CsvPoints => points(parse_csv_points(&std::fs::read_to_string(path()?)?)?),
        DatasetKind::Idx => Ok(Dataset {
            x: parse_idx(&std::fs::read(path()?)?)?,
            levels: Some(PIXEL_LEVELS),
        }),
        DatasetKind::CifarBinary => Ok(Dataset {
            x: parse_cifar(&std::fs::read(path()?)?)?,
            levels: Some(PIXEL_LEVELS),
        }),
    }
}

/// Two interleaved half circles with Gaussian noise of std 0.1, as flat
/// `(x, y)` pairs in shuffled order.
pub fn moons(count: usize, rng: &mut FlowRng) -> Vec<f64> {
    let mut pts: Vec<[f64; 2]> = (0..count)
        .map(|i| {
            let t = std::f64::consts::PI * rng.uniform();
            let (x, y) = if i % 2 == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            [x + 0.1 * rng.normal(), y + 0.1 * rng.normal()]
        })
        .collect();
    rng.shuffle(&mut pts);
    pts.concat()
}

/// Concentric circles of radius 1 and 2 with radial noise of std 0.08.
pub fn rings(count: usize, rng: &mut FlowRng) -> Vec<f64> {
    let mut pts: Vec<[f64; 2]> = (0..count)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 2.0 } + 0.08 * rng.normal();
            let t = std::f64::consts::TAU * rng.uniform();
            [r * t.cos(), r * t.sin()]
        })
        .collect();
    rng.shuffle(&mut pts);
    pts.concat()
}

/// Uniform on the eight dark squares of a 4×4 board covering `[-2, 2)²`.
pub fn checkerboard(count: usize, rng: &mut FlowRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let x = rng.uniform_in(-2.0, 2.0);
        let row = 2.0 * rng.below(2) as f64 - 2.0 + x.floor().rem_euclid(2.0);
        out.push(x);
        out.push(row + rng.uniform());
    }
    out
}

fn read_u32_be(bytes: &[u8], offset: usize, context: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            context: context.into(),
            offset: offset as u64,
            msg: format!(
                "file ends after {} bytes while reading a 4-byte header field",
                bytes.len()
            ),
        })
}

/// Unsigned-byte IDX tensors: magic `0x00000803` holds `[n, h, w]`
/// grayscale images, `0x00000804` holds `[n, h, w, c]`.
pub fn parse_idx(bytes: &[u8]) -> Result<DenseArray> {
    let magic = read_u32_be(bytes, 0, "idx")?;
    let rank = match magic {
        IDX_MAGIC_GRAY => 3,
        IDX_MAGIC_COLOR => 4,
        _ => {
            return Err(Error::Format {
                context: "idx".into(),
                offset: 0,
                msg: format!("magic {magic:#010x} is not an unsigned-byte image tensor"),
            })
        }
    };
    let mut dims = Vec::with_capacity(4);
    for i in 0..rank {
        dims.push(read_u32_be(bytes, 4 + 4 * i, "idx")? as usize);
    }
    if rank == 3 {
        dims.push(1);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() != len {
        return Err(Error::Format {
            context: "idx".into(),
            offset: (start + body.len().min(len)) as u64,
            msg: format!("header promises {len} pixel bytes, file has {}", body.len()),
        });
    }
    DenseArray::new(&dims, body.iter().map(|&b| f64::from(b)).collect())
}

/// Writes `[n, h, w, c]` integer levels as IDX.
pub fn write_idx(x: &DenseArray) -> Result<Vec<u8>> {
    let [n, h, w, c] = *x.shape() else {
        return Err(Error::invalid(
            "write_idx",
            format!("expected [n, h, w, c], got {:?}", x.shape()),
        ));
    };
    let mut out = Vec::with_capacity(20 + x.len());
    let dims: Vec<usize> = if c == 1 {
        out.extend(IDX_MAGIC_GRAY.to_be_bytes());
        vec![n, h, w]
    } else {
        out.extend(IDX_MAGIC_COLOR.to_be_bytes());
        vec![n, h, w, c]
    };
    for d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    for &v in x.data() {
        if !(0.0..256.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::invalid("write_idx", format!("value {v} is not a byte")));
        }
        out.push(v as u8);
    }
    Ok(out)
}

/// CIFAR-10 binary batches: records of one label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes in row-major order. Labels are dropped.
pub fn parse_cifar(bytes: &[u8]) -> Result<DenseArray> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            context: "cifar".into(),
            offset: whole as u64,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let px = &rec[1..];
        for p in 0..1024 {
            for ch in 0..3 {
                data.push(f64::from(px[ch * 1024 + p]));
            }
        }
    }
    DenseArray::new(&[n, 32, 32, 3], data)
}

/// Two comma-separated numbers per line. Blank lines, `#` comments and an
/// `x,y` header are skipped.
pub fn parse_csv_points(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (no, line) in text.split_inclusive('\n').enumerate() {
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (out.is_empty() && line == "x,y") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => out.extend(v),
            _ => {
                return Err(Error::Format {
                    context: "csv".into(),
                    offset: here,
                    msg: format!("line {}: expected two finite numbers, got `{line}`", no + 1),
                })
            }
        }
    }
    Ok(out)
}

/// `(x + u) / levels` with `u ~ U[0, 1)`; results stay below the upper edge
/// of each level's bin.
pub fn dequantize(x: &DenseArray, levels: u32, rng: &mut FlowRng) -> Result<DenseArray> {
    let lv = f64::from(levels);
    let mut out = Vec::with_capacity(x.len());
    for &v in x.data() {
        if !(0.0..lv).contains(&v) || v.fract() != 0.0 {
            return Err(Error::invalid(
                "dequantize",
                format!("value {v} is not an integer level below {levels}"),
            ));
        }
        let mut s = v + rng.uniform();
        if s >= v + 1.0 {
            s = (v + 1.0).next_down();
        }
        out.push(s / lv);
    }
    DenseArray::new(x.shape(), out)
}

/// Deterministic shuffled split; the test part holds `⌊n/10⌋` rows (at least
/// one when `n ≥ 2`).
pub fn train_test_split(data: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let n = data.len();
    let perm = FlowRng::derive(seed, "split").permutation(n);
    let n_test = if n >= 2 { (n / 10).max(1) } else { 0 };
    let (test, train) = perm.split_at(n_test);
    (data.select(train), data.select(test))
}

/// Per-coordinate affine standardization `(x − shift)·scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Zero mean and unit variance on `x` (last axis is the coordinate).
    pub fn fit(x: &DenseArray) -> Self {
        let c = *x.shape().last().unwrap();
        let n = (x.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            mean[i % c] += v / n;
        }
        let mut var = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2) / n;
        }
        let scale = var
            .iter()
            .map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Self { shift: mean, scale }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            shift: vec![0.0; c],
            scale: vec![1.0; c],
        }
    }

    pub fn apply(&self, x: &DenseArray) -> DenseArray {
        let c = self.shift.len();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = (*v - self.shift[i % c]) * self.scale[i % c];
        }
        y
    }

    pub fn invert(&self, y: &DenseArray) -> DenseArray {
        let c = self.shift.len();
        let mut x = y.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = *v / self.scale[i % c] + self.shift[i % c];
        }
        x
    }
}
