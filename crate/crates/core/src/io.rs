//! On-disk formats and dataset plumbing: the CAFM feature-map container,
//! line-oriented dataset manifests, a seeded synthetic anomaly benchmark,
//! a frozen random feature extractor, and binary PGM heatmap export.
//!
//! CAFM layout, all little-endian:
//!
//! ```text
//! "CAFM" | u32 version=1 | u32 N | u32 C | u32 H | u32 W
//!        | u8 dtype (0=f32, 1=f64) | payload row-major | u32 CRC32
//! ```
//!
//! The CRC covers every byte before it. Masks are stored as single-channel
//! CAFM files with values in {0, 1}.

use crate::error::{Error, Result};
use crate::rng::{seeded, sub_seed};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{ConvKernel, Shape, Tensor, UnaryOp};
use rand::Rng;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const MAGIC: [u8; 4] = *b"CAFM";
const VERSION: u32 = 1;

// ── CAFM container ──────────────────────────────────────────────────────

/// Serializes a tensor to the CAFM container.
pub fn write_features<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    let mut buf = Vec::with_capacity(25 + s.count() * T::DTYPE.size() + 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [s.n, s.c, s.h, s.w] {
        let v = u32::try_from(dim)
            .map_err(|_| Error::contract("write_features", format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(T::DTYPE.flag());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n - available, available });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads a CAFM container written at the same precision.
pub fn read_features<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let found = cur.take(4)?;
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: found.try_into().expect("4 bytes") });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version { expected: VERSION, found: version });
    }
    let n = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let flag = cur.take(1)?[0];
    let dtype = Dtype::from_flag(flag).ok_or(Error::DtypeMismatch {
        expected: T::DTYPE.name(),
        found: "unknown",
    })?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch { expected: T::DTYPE.name(), found: dtype.name() });
    }
    let shape = Shape::new(n, c, h, w);
    let payload = cur.take(shape.count() * dtype.size())?;
    let stored = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if cur.pos != buf.len() {
        let trailing = std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{} trailing bytes after checksum", buf.len() - cur.pos),
        );
        return Err(Error::io(path, trailing));
    }
    let computed = crc32fast::hash(&buf[..buf.len() - 4]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let step = dtype.size();
    let data = payload.chunks_exact(step).map(T::read_le).collect();
    Tensor::new(shape, data)
}

// ── Dataset manifest ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Label, ()> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            _ => Err(()),
        }
    }
}

/// One dataset entry. Paths are stored relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub features: PathBuf,
    pub label: Label,
    pub mask: Option<PathBuf>,
    /// Original image size `(H_img, W_img)`; heatmaps and masks use it.
    pub image_dims: (usize, usize),
}

/// A parsed manifest plus the directory its relative paths resolve
/// against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses `path<TAB>label<TAB>maskpath|-<TAB>Himg<TAB>Wimg` lines.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Manifest {
                    line,
                    detail: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let label = fields[1].parse::<Label>().map_err(|_| Error::Manifest {
                line,
                detail: format!("unknown label {:?} (expected normal|anomalous)", fields[1]),
            })?;
            let mask = match fields[2] {
                "-" => None,
                p => Some(PathBuf::from(p)),
            };
            if label == Label::Anomalous && mask.is_none() {
                return Err(Error::Manifest {
                    line,
                    detail: "anomalous record carries no mask path".to_string(),
                });
            }
            let dim = |field: &str| -> Result<usize> {
                field
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::Manifest {
                        line,
                        detail: format!("bad image dimension {field:?}"),
                    })
            };
            records.push(ManifestRecord {
                features: PathBuf::from(fields[0]),
                label,
                mask,
                image_dims: (dim(fields[3])?, dim(fields[4])?),
            });
        }
        Ok(DatasetManifest { dir, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            let mask = r
                .mask
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".to_string());
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.features.display(),
                r.label,
                mask,
                r.image_dims.0,
                r.image_dims.1
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn feature_path(&self, r: &ManifestRecord) -> PathBuf {
        self.dir.join(&r.features)
    }

    pub fn mask_path(&self, r: &ManifestRecord) -> Option<PathBuf> {
        r.mask.as_ref().map(|m| self.dir.join(m))
    }

    pub fn load_features<T: Scalar>(&self, r: &ManifestRecord) -> Result<Tensor<T>> {
        read_features(&self.feature_path(r))
    }

    pub fn load_mask<T: Scalar>(&self, r: &ManifestRecord) -> Result<Option<Tensor<T>>> {
        match self.mask_path(r) {
            None => Ok(None),
            Some(p) => read_features(&p).map(Some),
        }
    }
}

// ── Synthetic benchmark ─────────────────────────────────────────────────

/// Parameters of the generated texture-plus-defect dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Square image side; must be a positive multiple of 4 so the frozen
    /// extractor can downsample twice.
    pub image_size: usize,
    pub seed: u64,
    /// Inclusive side/diameter range of injected defects.
    pub anomaly_min: usize,
    pub anomaly_max: usize,
    /// Additive brightness offset inside the defect region.
    pub intensity_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 200,
            n_test_normal: 40,
            n_test_anomalous: 40,
            image_size: 32,
            seed: 0,
            anomaly_min: 6,
            anomaly_max: 12,
            intensity_shift: 0.75,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test_normal < 1 || self.n_test_anomalous < 1 {
            return Err(Error::contract("synth_generate", "all sample counts must be at least 1"));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::contract(
                "synth_generate",
                format!("image size {} is not a positive multiple of 4", self.image_size),
            ));
        }
        if self.anomaly_min < 1 || self.anomaly_min > self.anomaly_max {
            return Err(Error::contract(
                "synth_generate",
                format!("bad anomaly size range {}..={}", self.anomaly_min, self.anomaly_max),
            ));
        }
        if self.anomaly_max > self.image_size {
            return Err(Error::contract(
                "synth_generate",
                format!(
                    "anomaly size {} cannot fit inside a {}-pixel image",
                    self.anomaly_max, self.image_size
                ),
            ));
        }
        if !self.intensity_shift.is_finite() {
            return Err(Error::contract("synth_generate", "intensity shift must be finite"));
        }
        Ok(())
    }
}

/// Manifest locations produced by [`synth_generate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

const TAG_TRAIN: u64 = 0x1000_0000;
const TAG_TEST_NORMAL: u64 = 0x2000_0000;
const TAG_TEST_ANOMALOUS: u64 = 0x3000_0000;
const TAG_EXTRACTOR: u64 = 0x4000_0000;

/// Band-limited texture: uniform noise smoothed by three box-blur passes,
/// then min-max rescaled to [0, 1].
fn texture<T: Scalar>(size: usize, rng: &mut impl Rng) -> Tensor<T> {
    let shape = Shape::new(1, 1, size, size);
    let data = (0..shape.count())
        .map(|_| T::from_f64(rng.random_range(0.0..1.0)))
        .collect();
    let noise = Tensor::new(shape, data).expect("sized data");
    let blur = ConvKernel::<T> {
        weight: Tensor::filled(Shape::new(1, 1, 3, 3), T::from_f64(1.0 / 9.0)),
        bias: Tensor::zeros(Shape::new(1, 1, 1, 1)),
    };
    let mut img = noise;
    for _ in 0..3 {
        img = img.conv2d(&blur).expect("dims preserved");
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in img.data() {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    for v in img.data_mut() {
        *v = T::from_f64((v.as_f64() - lo) / range);
    }
    img
}

/// Generates the dataset under `dir` and writes `train.tsv` / `test.tsv`.
/// Every image is a seeded texture; anomalous test images additionally
/// carry a rectangle or ellipse whose brightness is shifted, with the
/// region recorded exactly in a mask file. Manifests reference extracted
/// feature files; raw images sit alongside them for inspection.
pub fn synth_generate<T: Scalar>(cfg: &SynthConfig, dir: &Path) -> Result<SynthPaths> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let extractor_seed = sub_seed(cfg.seed, TAG_EXTRACTOR);
    let size = cfg.image_size;

    let emit = |stem: &str, img: &Tensor<T>| -> Result<PathBuf> {
        let feat = toy_extractor(img, extractor_seed)?;
        write_features(img, &dir.join(format!("{stem}_img.cafm")))?;
        let feat_rel = PathBuf::from(format!("{stem}_feat.cafm"));
        write_features(&feat, &dir.join(&feat_rel))?;
        Ok(feat_rel)
    };

    let mut train_records = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        let mut rng = seeded(sub_seed(cfg.seed, TAG_TRAIN + i as u64));
        let img = texture::<T>(size, &mut rng);
        let feat_rel = emit(&format!("train_{i:04}"), &img)?;
        train_records.push(ManifestRecord {
            features: feat_rel,
            label: Label::Normal,
            mask: None,
            image_dims: (size, size),
        });
    }

    let mut test_records = Vec::with_capacity(cfg.n_test_normal + cfg.n_test_anomalous);
    for i in 0..cfg.n_test_normal {
        let mut rng = seeded(sub_seed(cfg.seed, TAG_TEST_NORMAL + i as u64));
        let img = texture::<T>(size, &mut rng);
        let feat_rel = emit(&format!("test_normal_{i:04}"), &img)?;
        test_records.push(ManifestRecord {
            features: feat_rel,
            label: Label::Normal,
            mask: None,
            image_dims: (size, size),
        });
    }
    for i in 0..cfg.n_test_anomalous {
        let mut rng = seeded(sub_seed(cfg.seed, TAG_TEST_ANOMALOUS + i as u64));
        let mut img = texture::<T>(size, &mut rng);
        let mask = stamp_defect(&mut img, cfg, &mut rng);
        let stem = format!("test_anomalous_{i:04}");
        let feat_rel = emit(&stem, &img)?;
        let mask_rel = PathBuf::from(format!("{stem}_mask.cafm"));
        write_features(&mask, &dir.join(&mask_rel))?;
        test_records.push(ManifestRecord {
            features: feat_rel,
            label: Label::Anomalous,
            mask: Some(mask_rel),
            image_dims: (size, size),
        });
    }

    let train_manifest = dir.join("train.tsv");
    let test_manifest = dir.join("test.tsv");
    DatasetManifest { dir: dir.to_path_buf(), records: train_records }.save(&train_manifest)?;
    DatasetManifest { dir: dir.to_path_buf(), records: test_records }.save(&test_manifest)?;
    Ok(SynthPaths { train_manifest, test_manifest })
}

/// Adds `intensity_shift` inside a random rectangle or ellipse that fits
/// the image; returns the exact {0, 1} mask.
fn stamp_defect<T: Scalar>(
    img: &mut Tensor<T>,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let size = cfg.image_size;
    let shape = Shape::new(1, 1, size, size);
    let mut mask = Tensor::<T>::zeros(shape);
    let shift = T::from_f64(cfg.intensity_shift);
    let rect = rng.random_range(0..2u32) == 0;
    let member: Box<dyn Fn(usize, usize) -> bool> = if rect {
        let w = rng.random_range(cfg.anomaly_min..=cfg.anomaly_max);
        let h = rng.random_range(cfg.anomaly_min..=cfg.anomaly_max);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        Box::new(move |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
    } else {
        // radii chosen so the ellipse always fits with its center inside
        let lo = (cfg.anomaly_min / 2).max(1).min((size - 1) / 2);
        let hi = (cfg.anomaly_max / 2).max(lo).min((size - 1) / 2);
        let rx = rng.random_range(lo..=hi);
        let ry = rng.random_range(lo..=hi);
        let cx = rng.random_range(rx..=size - 1 - rx);
        let cy = rng.random_range(ry..=size - 1 - ry);
        Box::new(move |y, x| {
            let dx = (x as f64 - cx as f64) / rx as f64;
            let dy = (y as f64 - cy as f64) / ry as f64;
            dx * dx + dy * dy <= 1.0
        })
    };
    for y in 0..size {
        for x in 0..size {
            if member(y, x) {
                let idx = shape.index(0, 0, y, x);
                img.data_mut()[idx] += shift;
                mask.data_mut()[idx] = T::one();
            }
        }
    }
    mask
}

// ── Frozen feature extractor ────────────────────────────────────────────

/// Two seeded stride-2 conv+relu layers mapping `(N, 1|3, H, W)` to
/// `(N, 16, H/4, W/4)`. Never trained; deterministic in `(image, seed)`.
pub fn toy_extractor<T: Scalar>(image: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.c != 1 && s.c != 3 {
        return Err(Error::contract(
            "toy_extractor",
            format!("expected 1 or 3 input channels, got {}", s.c),
        ));
    }
    if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::contract(
            "toy_extractor",
            format!("spatial dims {}x{} must be positive multiples of 4", s.h, s.w),
        ));
    }
    let k1 = frozen_kernel::<T>(8, s.c, sub_seed(seed, 0));
    let k2 = frozen_kernel::<T>(16, 8, sub_seed(seed, 1));
    let y = strided_conv_relu(image, &k1)?;
    strided_conv_relu(&y, &k2)
}

fn frozen_kernel<T: Scalar>(c_out: usize, c_in: usize, seed: u64) -> ConvKernel<T> {
    let mut rng = seeded(seed);
    let bound = 1.0 / ((9 * c_in) as f64).sqrt();
    let shape = Shape::new(c_out, c_in, 3, 3);
    let data = (0..shape.count())
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ConvKernel {
        weight: Tensor::new(shape, data).expect("sized data"),
        bias: Tensor::zeros(Shape::new(1, c_out, 1, 1)),
    }
}

/// Same-padded conv evaluated at even sites only, then relu.
fn strided_conv_relu<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    let full = x.conv2d(k)?.map_unary(UnaryOp::Relu);
    let s = full.shape();
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut data = Vec::with_capacity(out_shape.count());
    for n in 0..s.n {
        for c in 0..s.c {
            for h in (0..s.h).step_by(2) {
                for w in (0..s.w).step_by(2) {
                    data.push(full.at(n, c, h, w));
                }
            }
        }
    }
    Tensor::new(out_shape, data)
}

// ── PGM export ──────────────────────────────────────────────────────────

/// Writes a `(1, 1, H, W)` score map as binary PGM, min-max scaled to
/// 0..=255 with floor rounding. A constant map emits all zeros.
pub fn export_pgm<T: Scalar>(scores: &Tensor<T>, path: &Path) -> Result<()> {
    let s = scores.shape();
    if s.n != 1 || s.c != 1 || s.spatial() == 0 {
        return Err(Error::contract(
            "export_pgm",
            format!("expected a non-empty (1, 1, H, W) map, got {s}"),
        ));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in scores.data() {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    if hi > lo {
        let range = hi - lo;
        out.extend(
            scores
                .data()
                .iter()
                .map(|&v| (255.0 * (v.as_f64() - lo) / range).floor() as u8),
        );
    } else {
        out.extend(std::iter::repeat_n(0u8, s.spatial()));
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = seeded(seed);
        let data = (0..shape.count())
            .map(|_| rng.random_range(-2.0..2.0f32))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn cafm_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let t = random_tensor(Shape::new(2, 3, 4, 5), 0);
        let p = dir.path().join("t.cafm");
        write_features(&t, &p).unwrap();
        assert_eq!(read_features::<f32>(&p).unwrap(), t);

        let mut rng = seeded(1);
        let shape = Shape::new(1, 2, 2, 2);
        let t64 = Tensor::<f64>::new(
            shape,
            (0..shape.count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let p64 = dir.path().join("t64.cafm");
        write_features(&t64, &p64).unwrap();
        assert_eq!(read_features::<f64>(&p64).unwrap(), t64);
    }

    #[test]
    fn cafm_header_bytes_match_format() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::zeros(Shape::new(2, 8, 4, 4));
        let p = dir.path().join("h.cafm");
        write_features(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let expected: Vec<u8> = [
            b"CAFM".as_slice(),
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &8u32.to_le_bytes(),
            &4u32.to_le_bytes(),
            &4u32.to_le_bytes(),
            &[0u8],
        ]
        .concat();
        assert_eq!(&bytes[..25], &expected[..]);
        assert_eq!(bytes.len(), 25 + 2 * 8 * 4 * 4 * 4 + 4);
    }

    #[test]
    fn cafm_detects_each_corruption_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let t = random_tensor(Shape::new(1, 2, 2, 2), 2);
        let p = dir.path().join("c.cafm");
        write_features(&t, &p).unwrap();
        let clean = std::fs::read(&p).unwrap();

        let mut flipped = clean.clone();
        flipped[30] ^= 1;
        std::fs::write(&p, &flipped).unwrap();
        assert!(matches!(read_features::<f32>(&p), Err(Error::Checksum { .. })));

        let mut magic = clean.clone();
        magic[0] = b'X';
        std::fs::write(&p, &magic).unwrap();
        assert!(matches!(read_features::<f32>(&p), Err(Error::BadMagic { .. })));

        let mut version = clean.clone();
        version[4] = 9;
        std::fs::write(&p, &version).unwrap();
        assert!(matches!(
            read_features::<f32>(&p),
            Err(Error::Version { expected: 1, found: 9 })
        ));

        std::fs::write(&p, &clean[..clean.len() - 6]).unwrap();
        assert!(matches!(read_features::<f32>(&p), Err(Error::Truncated { .. })));

        std::fs::write(&p, &clean).unwrap();
        assert!(matches!(
            read_features::<f64>(&p),
            Err(Error::DtypeMismatch { expected: "f64", found: "f32" })
        ));

        let missing = dir.path().join("absent.cafm");
        let err = read_features::<f32>(&missing).unwrap_err();
        assert!(err.is_io_class());
    }

    #[test]
    fn manifest_round_trips_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            dir: dir.path().to_path_buf(),
            records: vec![
                ManifestRecord {
                    features: PathBuf::from("a_feat.cafm"),
                    label: Label::Normal,
                    mask: None,
                    image_dims: (32, 32),
                },
                ManifestRecord {
                    features: PathBuf::from("b_feat.cafm"),
                    label: Label::Anomalous,
                    mask: Some(PathBuf::from("b_mask.cafm")),
                    image_dims: (32, 48),
                },
            ],
        };
        let p = dir.path().join("set.tsv");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "a_feat.cafm\tnormal\t-\t32\t32\nb_feat.cafm\tanomalous\tb_mask.cafm\t32\t48\n"
        );
        let loaded = DatasetManifest::load(&p).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.feature_path(&loaded.records[0]), dir.path().join("a_feat.cafm"));
        assert_eq!(
            loaded.mask_path(&loaded.records[1]),
            Some(dir.path().join("b_mask.cafm"))
        );
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        let cases = [
            ("only\tthree\tfields\n", "5 tab-separated fields"),
            ("f.cafm\tweird\t-\t8\t8\n", "unknown label"),
            ("f.cafm\tanomalous\t-\t8\t8\n", "no mask"),
            ("f.cafm\tnormal\t-\t0\t8\n", "bad image dimension"),
            ("f.cafm\tnormal\t-\t8\tx\n", "bad image dimension"),
        ];
        for (text, needle) in cases {
            std::fs::write(&p, text).unwrap();
            let err = DatasetManifest::load(&p).unwrap_err();
            assert!(matches!(err, Error::Manifest { line: 1, .. }), "{text:?}");
            assert!(err.to_string().contains(needle), "{err} vs {needle}");
        }
    }

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_train: 2,
            n_test_normal: 2,
            n_test_anomalous: 3,
            image_size: 16,
            seed: 11,
            anomaly_min: 4,
            anomaly_max: 8,
            intensity_shift: 0.75,
        }
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = synth_generate::<f32>(&tiny_cfg(), d1.path()).unwrap();
        let p2 = synth_generate::<f32>(&tiny_cfg(), d2.path()).unwrap();
        for name in [
            "train.tsv",
            "test.tsv",
            "train_0001_feat.cafm",
            "test_anomalous_0002_mask.cafm",
            "test_anomalous_0002_feat.cafm",
        ] {
            let b1 = std::fs::read(d1.path().join(name)).unwrap();
            let b2 = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(b1, b2, "{name} differs between runs");
        }
        assert_eq!(p1.train_manifest.file_name(), p2.train_manifest.file_name());
    }

    #[test]
    fn synthetic_masks_are_exact_and_features_shaped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let paths = synth_generate::<f32>(&cfg, dir.path()).unwrap();
        let test = DatasetManifest::load(&paths.test_manifest).unwrap();
        assert_eq!(test.records.len(), cfg.n_test_normal + cfg.n_test_anomalous);
        for r in &test.records {
            let feat = test.load_features::<f32>(r).unwrap();
            assert_eq!(
                feat.shape(),
                Shape::new(1, 16, cfg.image_size / 4, cfg.image_size / 4)
            );
            match r.label {
                Label::Normal => assert!(r.mask.is_none()),
                Label::Anomalous => {
                    let mask = test.load_mask::<f32>(r).unwrap().unwrap();
                    assert_eq!(mask.shape(), Shape::new(1, 1, cfg.image_size, cfg.image_size));
                    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
                    assert!(mask.data().iter().any(|&v| v == 1.0));
                }
            }
        }
        let train = DatasetManifest::load(&paths.train_manifest).unwrap();
        assert!(train.records.iter().all(|r| r.label == Label::Normal && r.mask.is_none()));
    }

    #[test]
    fn synthetic_anomalies_shift_masked_intensity() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let paths = synth_generate::<f32>(&cfg, dir.path()).unwrap();
        let test = DatasetManifest::load(&paths.test_manifest).unwrap();
        for r in test.records.iter().filter(|r| r.label == Label::Anomalous) {
            let feat_name = r.features.to_string_lossy().into_owned();
            let img_name = feat_name.replace("_feat.cafm", "_img.cafm");
            let img = read_features::<f32>(&dir.path().join(img_name)).unwrap();
            let mask = test.load_mask::<f32>(r).unwrap().unwrap();
            let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0f64, 0usize, 0.0f64, 0usize);
            for (v, m) in img.data().iter().zip(mask.data()) {
                if *m == 1.0 {
                    in_sum += *v as f64;
                    in_n += 1;
                } else {
                    out_sum += *v as f64;
                    out_n += 1;
                }
            }
            let diff = in_sum / in_n as f64 - out_sum / out_n as f64;
            assert!(
                diff > cfg.intensity_shift * 0.5,
                "inside-outside mean gap {diff} too small for shift {}",
                cfg.intensity_shift
            );
        }
    }

    #[test]
    fn extractor_shapes_determinism_and_batching() {
        let a = random_tensor(Shape::new(1, 1, 32, 32), 3);
        let fa = toy_extractor(&a, 7).unwrap();
        assert_eq!(fa.shape(), Shape::new(1, 16, 8, 8));
        assert_eq!(toy_extractor(&a, 7).unwrap(), fa);
        assert_ne!(toy_extractor(&a, 8).unwrap(), fa);

        let rgb = random_tensor(Shape::new(1, 3, 8, 8), 4);
        assert_eq!(toy_extractor(&rgb, 7).unwrap().shape(), Shape::new(1, 16, 2, 2));

        let b = random_tensor(Shape::new(1, 1, 32, 32), 5);
        let fb = toy_extractor(&b, 7).unwrap();
        let mut stacked_data = a.data().to_vec();
        stacked_data.extend_from_slice(b.data());
        let batch = Tensor::new(Shape::new(2, 1, 32, 32), stacked_data).unwrap();
        let fboth = toy_extractor(&batch, 7).unwrap();
        let mut expect = fa.data().to_vec();
        expect.extend_from_slice(fb.data());
        assert_eq!(fboth.data(), &expect[..]);

        let odd = random_tensor(Shape::new(1, 1, 30, 30), 6);
        assert!(toy_extractor(&odd, 7).is_err());
        let five = random_tensor(Shape::new(1, 5, 32, 32), 6);
        assert!(toy_extractor(&five, 7).is_err());
    }

    #[test]
    fn pgm_export_matches_hand_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let map =
            Tensor::<f64>::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let p = dir.path().join("m.pgm");
        export_pgm(&map, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 255, 127, 63]);

        let flat = Tensor::<f64>::filled(Shape::new(1, 1, 2, 3), 4.2);
        let pf = dir.path().join("flat.pgm");
        export_pgm(&flat, &pf).unwrap();
        let fb = std::fs::read(&pf).unwrap();
        assert_eq!(&fb[b"P5\n3 2\n255\n".len()..], &[0u8; 6]);

        let batched = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 2));
        assert!(export_pgm(&batched, &dir.path().join("x.pgm")).is_err());
    }

    #[test]
    fn synth_config_contracts() {
        let mut cfg = tiny_cfg();
        cfg.n_train = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.anomaly_max = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.anomaly_min = 9;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }
}
