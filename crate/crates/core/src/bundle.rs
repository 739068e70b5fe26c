//! Feature bundles: the on-disk container that carries per-object features,
//! boxes, labels and image sizes from an extractor to the scorers.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "DTFB" | version u16 | flags u16 | M u64 | D u32 | K u32 | P u32 | L u8 | 3 pad
//! features f32[M*D] | boxes f32[M*4] | labels u32[M] | image_dims f32[M*2]
//! [levels u8[M]] [gradients f32[M*P]] | crc32 u32 over all preceding bytes
//! ```
//!
//! A JSON sidecar `<stem>.manifest.json` carries the names, extractor notes
//! and the checksum in hex.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_pyramid_level, CornerBox, ImageSize, PyramidConfig};

pub const MAGIC: &[u8; 4] = b"DTFB";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const FLAG_LEVELS: u16 = 1;
pub const FLAG_GRADIENTS: u16 = 1 << 1;

/// Per-object sampled gradient vectors (row-major `M x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dim: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub model_name: String,
    pub dataset_name: String,
    pub extractor_info: String,
    pub num_objects: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Row-major `M x D`.
    pub features: Vec<f32>,
    /// Pixel corners `(x1, y1, x2, y2)`.
    pub boxes: Vec<[f32; 4]>,
    pub labels: Vec<u32>,
    /// Source image `(width, height)` per object.
    pub image_dims: Vec<[f32; 2]>,
    pub levels: Option<Vec<u8>>,
    pub level_count: u8,
    pub gradients: Option<Gradients>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u16,
    pub flags: u16,
    /// CRC-32 of the payload, as `0x%08x`.
    pub checksum: String,
    pub model_name: String,
    pub dataset_name: String,
    pub extractor_info: String,
}

impl BundleManifest {
    pub fn checksum_value(&self) -> Result<u32> {
        let s = self.checksum.trim_start_matches("0x");
        u32::from_str_radix(s, 16)
            .map_err(|_| Error::Format(format!("bad manifest checksum '{}'", self.checksum)))
    }

    pub fn has_levels(&self) -> bool {
        self.flags & FLAG_LEVELS != 0
    }

    pub fn has_gradients(&self) -> bool {
        self.flags & FLAG_GRADIENTS != 0
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

impl FeatureBundle {
    pub fn flags(&self) -> u16 {
        let mut f = 0;
        if self.levels.is_some() {
            f |= FLAG_LEVELS;
        }
        if self.gradients.is_some() {
            f |= FLAG_GRADIENTS;
        }
        f
    }

    pub fn gradient_dim(&self) -> usize {
        self.gradients.as_ref().map_or(0, |g| g.dim)
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feature_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.num_objects,
            self.feature_dim,
            self.features.iter().map(|&v| v as f64),
        )
    }

    pub fn gradient_matrix(&self) -> Option<DMatrix<f64>> {
        self.gradients.as_ref().map(|g| {
            DMatrix::from_row_iterator(self.num_objects, g.dim, g.values.iter().map(|&v| v as f64))
        })
    }

    pub fn corner_box(&self, i: usize) -> CornerBox {
        let b = self.boxes[i];
        CornerBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
    }

    pub fn image(&self, i: usize) -> ImageSize {
        let d = self.image_dims[i];
        ImageSize::new(d[0] as f64, d[1] as f64)
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Checks every structural and per-row invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let (m, d, k) = (self.num_objects, self.feature_dim, self.num_classes);
        if m == 0 || d == 0 || k == 0 {
            return Err(Error::Validation(format!(
                "dimensions must be positive, got M={m} D={d} K={k}"
            )));
        }
        let mismatch = |what: &str, got: usize, want: usize| {
            Error::Validation(format!("{what} has length {got}, expected {want}"))
        };
        if self.features.len() != m * d {
            return Err(mismatch("features", self.features.len(), m * d));
        }
        if self.boxes.len() != m {
            return Err(mismatch("boxes", self.boxes.len(), m));
        }
        if self.labels.len() != m {
            return Err(mismatch("labels", self.labels.len(), m));
        }
        if self.image_dims.len() != m {
            return Err(mismatch("image_dims", self.image_dims.len(), m));
        }
        if let Some(levels) = &self.levels {
            if levels.len() != m {
                return Err(mismatch("levels", levels.len(), m));
            }
        }
        if let Some(g) = &self.gradients {
            if g.dim == 0 {
                return Err(Error::Validation("gradient dimension must be positive".into()));
            }
            if g.values.len() != m * g.dim {
                return Err(mismatch("gradients", g.values.len(), m * g.dim));
            }
        }
        for i in 0..m {
            if self.feature_row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite feature at row {i}")));
            }
            let [x1, y1, x2, y2] = self.boxes[i];
            let [w, h] = self.image_dims[i];
            if ![x1, y1, x2, y2, w, h].iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("non-finite box or image size at row {i}")));
            }
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Validation(format!("non-positive image size at row {i}")));
            }
            if !(x1 < x2 && y1 < y2) {
                return Err(Error::Validation(format!(
                    "degenerate or flipped box at row {i}: ({x1}, {y1}, {x2}, {y2})"
                )));
            }
            if !(x1 >= 0.0 && y1 >= 0.0 && x2 <= w && y2 <= h) {
                return Err(Error::Validation(format!(
                    "box outside image at row {i}: ({x1}, {y1}, {x2}, {y2}) in {w}x{h}"
                )));
            }
            if self.labels[i] as usize >= k {
                return Err(Error::Validation(format!(
                    "label out of range at row {i}: {} >= {k}",
                    self.labels[i]
                )));
            }
            if let Some(g) = &self.gradients {
                if g.values[i * g.dim..(i + 1) * g.dim].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("non-finite gradient at row {i}")));
                }
            }
        }
        Ok(())
    }

    /// Exact serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        let m = self.num_objects;
        let mut n = HEADER_LEN + 4 * m * self.feature_dim + 16 * m + 4 * m + 8 * m + 4;
        if self.levels.is_some() {
            n += m;
        }
        n += 4 * m * self.gradient_dim();
        n
    }

    pub fn manifest(&self, checksum: u32) -> BundleManifest {
        BundleManifest {
            format_version: FORMAT_VERSION,
            flags: self.flags(),
            checksum: format!("{checksum:#010x}"),
            model_name: self.model_name.clone(),
            dataset_name: self.dataset_name.clone(),
            extractor_info: self.extractor_info.clone(),
        }
    }
}

/// Serialize a validated bundle; returns the bytes and their trailing checksum.
pub fn encode_bundle(bundle: &FeatureBundle) -> Result<(Vec<u8>, u32)> {
    bundle.validate()?;
    let m = bundle.num_objects;
    let mut buf = Vec::with_capacity(bundle.encoded_len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&bundle.flags().to_le_bytes());
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    for v in [bundle.feature_dim, bundle.num_classes, bundle.gradient_dim()] {
        let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(if bundle.levels.is_some() { bundle.level_count } else { 0 });
    buf.extend_from_slice(&[0u8; 3]);
    debug_assert_eq!(buf.len(), HEADER_LEN);

    buf.extend(bundle.features.iter().flat_map(|v| v.to_le_bytes()));
    buf.extend(bundle.boxes.iter().flatten().flat_map(|v| v.to_le_bytes()));
    buf.extend(bundle.labels.iter().flat_map(|v| v.to_le_bytes()));
    buf.extend(bundle.image_dims.iter().flatten().flat_map(|v| v.to_le_bytes()));
    if let Some(levels) = &bundle.levels {
        buf.extend_from_slice(levels);
    }
    if let Some(g) = &bundle.gradients {
        buf.extend(g.values.iter().flat_map(|v| v.to_le_bytes()));
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(buf.len(), bundle.encoded_len());
    Ok((buf, crc))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("array size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse and validate a serialized bundle. Names are left empty; they live in the manifest.
pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"DTFB\"".into()));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let flags = cur.u16()?;
    if flags & !(FLAG_LEVELS | FLAG_GRADIENTS) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#06x}")));
    }
    let m = usize::try_from(cur.u64()?).map_err(|_| Error::Format("object count overflow".into()))?;
    let d = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let p = cur.u32()? as usize;
    let level_count = cur.take(4)?[0];

    let has_levels = flags & FLAG_LEVELS != 0;
    let has_gradients = flags & FLAG_GRADIENTS != 0;
    if has_gradients != (p > 0) {
        return Err(Error::Format(format!(
            "gradient flag {has_gradients} inconsistent with gradient dimension {p}"
        )));
    }

    // size check before touching the payload so a truncated file reports as such
    let expected = m
        .checked_mul(d.checked_add(4 + 1 + 2 + p).ok_or_else(|| Error::Format("size overflow".into()))?)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(if has_levels { m } else { 0 }))
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::Format("size overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Corruption { stored, computed });
    }

    let features = cur.f32s(m * d)?;
    let boxes = cur.f32s(m * 4)?.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let labels = cur
        .take(m * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let image_dims = cur.f32s(m * 2)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let levels = if has_levels { Some(cur.take(m)?.to_vec()) } else { None };
    let gradients = if has_gradients {
        Some(Gradients {
            dim: p,
            values: cur.f32s(m * p)?,
        })
    } else {
        None
    };

    let bundle = FeatureBundle {
        model_name: String::new(),
        dataset_name: String::new(),
        extractor_info: String::new(),
        num_objects: m,
        feature_dim: d,
        num_classes: k,
        features,
        boxes,
        labels,
        image_dims,
        levels,
        level_count: if has_levels { level_count } else { 0 },
        gradients,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Write `bytes` to `path` via a temporary file in the same directory.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    let (bytes, crc) = encode_bundle(bundle)?;
    let manifest = serde_json::to_string_pretty(&bundle.manifest(crc))?;
    atomic_write(path, &bytes)?;
    atomic_write(&manifest_path(path), manifest.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Option<BundleManifest>> {
    let mp = manifest_path(path);
    if !mp.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bundle = decode_bundle(&bytes)?;
    let computed = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    match read_manifest(path)? {
        Some(man) => {
            if man.format_version != FORMAT_VERSION {
                return Err(Error::Format(format!(
                    "manifest format version {} unsupported",
                    man.format_version
                )));
            }
            let stored = man.checksum_value()?;
            if stored != computed {
                return Err(Error::Corruption { stored, computed });
            }
            if man.flags != bundle.flags() {
                return Err(Error::Format(format!(
                    "manifest flags {:#06x} disagree with bundle flags {:#06x}",
                    man.flags,
                    bundle.flags()
                )));
            }
            bundle.model_name = man.model_name;
            bundle.dataset_name = man.dataset_name;
            bundle.extractor_info = man.extractor_info;
        }
        None => {
            bundle.model_name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
    }
    Ok(bundle)
}

/// Side length of the square synthetic image.
pub const SYNTH_IMAGE_SIZE: f32 = 1000.0;
/// Standard deviation of the planted feature noise at quality 0.
pub const SYNTH_NOISE_SCALE: f64 = 0.25;

/// Deterministic synthetic bundle whose features carry a noisy linear image of
/// the center-normalized boxes; the noise shrinks to zero as `quality -> 1`.
pub fn synth_bundle(m: usize, d: usize, k: usize, quality: f64, seed: u64) -> Result<FeatureBundle> {
    if k == 0 || m < k || d < 4 {
        return Err(Error::InvalidInput(format!(
            "synthetic bundle needs M >= K >= 1 and D >= 4, got M={m} D={d} K={k}"
        )));
    }
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::InvalidInput(format!("quality must lie in [0, 1], got {quality}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = SYNTH_IMAGE_SIZE;
    let pyramid = PyramidConfig::default();

    let mut boxes = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    let mut levels = Vec::with_capacity(m);
    for i in 0..m {
        let w = rng.random_range(16.0f32..600.0);
        let h = rng.random_range(16.0f32..600.0);
        let x1 = rng.random_range(0.0f32..side - w).floor();
        let y1 = rng.random_range(0.0f32..side - h).floor();
        let b = [x1, y1, x1 + w.floor(), y1 + h.floor()];
        levels.push(assign_pyramid_level((b[2] - b[0]) as f64, (b[3] - b[1]) as f64, &pyramid)? as u8);
        boxes.push(b);
        labels.push(if i < k { i as u32 } else { rng.random_range(0..k as u32) });
    }

    // latent: [noisy b_cen | noisy class-slotted b_cen (if room) | distractors]
    let noise = SYNTH_NOISE_SCALE * (1.0 - quality);
    let slotted = if d >= 4 + 4 * k { 4 * k } else { 0 };
    let mut latent = DMatrix::<f64>::zeros(m, d);
    for i in 0..m {
        let b = boxes[i];
        let s = side as f64;
        let cen = [
            (b[0] as f64 + b[2] as f64) / (2.0 * s),
            (b[1] as f64 + b[3] as f64) / (2.0 * s),
            (b[2] - b[0]) as f64 / s,
            (b[3] - b[1]) as f64 / s,
        ];
        for j in 0..4 {
            let e: f64 = rng.sample(StandardNormal);
            latent[(i, j)] = cen[j] + noise * e;
        }
        if slotted > 0 {
            let c = labels[i] as usize;
            for j in 0..4 {
                let e: f64 = rng.sample(StandardNormal);
                latent[(i, 4 + 4 * c + j)] = cen[j] + noise * e;
            }
        }
        for j in 4 + slotted..d {
            latent[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let gauss = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let mixing = gauss.qr().q();
    let feats = latent * mixing.transpose();

    Ok(FeatureBundle {
        model_name: format!("synth-q{quality:.2}-s{seed}"),
        dataset_name: "synthetic".into(),
        extractor_info: format!("synth_bundle(M={m}, D={d}, K={k}, quality={quality}, seed={seed})"),
        num_objects: m,
        feature_dim: d,
        num_classes: k,
        features: (0..m).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| feats[(i, j)] as f32).collect(),
        boxes,
        labels,
        image_dims: vec![[side, side]; m],
        levels: Some(levels),
        level_count: pyramid.level_count(),
        gradients: None,
    })
}

/// Attach deterministic synthetic per-object gradients of length `dim`, shaped as a
/// linear head's per-sample gradient (residual times a random feature projection).
pub fn synth_gradients(bundle: &FeatureBundle, dim: usize, seed: u64) -> Result<Gradients> {
    if dim == 0 {
        return Err(Error::InvalidInput("gradient dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj = DMatrix::<f64>::from_fn(bundle.feature_dim, dim, |_, _| rng.sample(StandardNormal));
    let f = bundle.feature_matrix();
    let g = &f * proj;
    let mut values = Vec::with_capacity(bundle.num_objects * dim);
    for i in 0..bundle.num_objects {
        let r: f64 = rng.sample(StandardNormal);
        values.extend((0..dim).map(|j| (r * g[(i, j)]) as f32));
    }
    Ok(Gradients { dim, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureBundle {
        FeatureBundle {
            model_name: "tiny".into(),
            dataset_name: "unit".into(),
            extractor_info: String::new(),
            num_objects: 3,
            feature_dim: 8,
            num_classes: 2,
            features: (0..24).map(|v| v as f32 * 0.5 - 3.0).collect(),
            boxes: vec![[0., 0., 10., 10.], [5., 5., 50., 40.], [1., 2., 3., 4.]],
            labels: vec![0, 1, 1],
            image_dims: vec![[100., 100.], [64., 48.], [10., 10.]],
            levels: None,
            level_count: 0,
            gradients: None,
        }
    }

    #[test]
    fn roundtrip_bytes() {
        let b = tiny();
        let (bytes, _) = encode_bundle(&b).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back.features, b.features);
        assert_eq!(back.boxes, b.boxes);
        assert_eq!(back.labels, b.labels);
        assert_eq!(back.image_dims, b.image_dims);
        assert_eq!((back.num_objects, back.feature_dim, back.num_classes), (3, 8, 2));
        assert_eq!(encode_bundle(&back).unwrap().0, bytes);
    }

    #[test]
    fn minimal_size_formula() {
        let b = FeatureBundle {
            num_objects: 1,
            feature_dim: 5,
            num_classes: 1,
            features: vec![1.0; 5],
            boxes: vec![[0., 0., 1., 1.]],
            labels: vec![0],
            image_dims: vec![[1., 1.]],
            ..tiny()
        };
        let (bytes, _) = encode_bundle(&b).unwrap();
        // header 32 + features 4*5 + boxes 16 + labels 4 + dims 8 + crc 4
        assert_eq!(bytes.len(), 32 + 20 + 16 + 4 + 8 + 4);
        assert_eq!(bytes.len(), b.encoded_len());
    }

    #[test]
    fn flags_reflect_optional_arrays() {
        let mut b = tiny();
        b.levels = Some(vec![2, 3, 4]);
        b.level_count = 4;
        let (bytes, _) = encode_bundle(&b).unwrap();
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]) & FLAG_LEVELS, FLAG_LEVELS);
        assert_eq!(bytes[28], 4);
        b.gradients = Some(Gradients { dim: 2, values: vec![0.5; 6] });
        let (bytes, _) = encode_bundle(&b).unwrap();
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), FLAG_LEVELS | FLAG_GRADIENTS);
        assert_eq!(decode_bundle(&bytes).unwrap().gradients, b.gradients);
    }

    #[test]
    fn rejects_label_out_of_range() {
        let mut b = tiny();
        b.labels[2] = 5;
        let msg = b.validate().unwrap_err().to_string();
        assert!(msg.contains("label out of range at row 2"), "{msg}");
    }

    #[test]
    fn rejects_flipped_box() {
        let mut b = tiny();
        b.boxes[1] = [50., 5., 5., 40.];
        assert!(matches!(b.validate(), Err(Error::Validation(m)) if m.contains("row 1")));
    }

    #[test]
    fn rejects_box_outside_image_and_nan() {
        let mut b = tiny();
        b.boxes[0] = [0., 0., 101., 10.];
        assert!(matches!(b.validate(), Err(Error::Validation(_))));
        let mut b = tiny();
        b.features[9] = f32::NAN;
        assert!(matches!(b.validate(), Err(Error::Validation(m)) if m.contains("row 1")));
    }

    #[test]
    fn corrupted_payload_detected() {
        let (mut bytes, _) = encode_bundle(&tiny()).unwrap();
        bytes[HEADER_LEN + 3] ^= 0x40;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Corruption { .. })));
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let (bytes, _) = encode_bundle(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bundle(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_bundle(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(decode_bundle(&bytes[..bytes.len() - 7]), Err(Error::Format(_))));
    }

    #[test]
    fn malformed_label_in_file_is_validation_error() {
        let mut b = tiny();
        let (mut bytes, _) = encode_bundle(&b).unwrap();
        // labels start after header + features + boxes
        let off = HEADER_LEN + 4 * 24 + 16 * 3;
        bytes[off..off + 4].copy_from_slice(&5u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_bundle(&bytes).unwrap_err();
        assert!(err.to_string().contains("label out of range at row 0"));
        b.labels[0] = 0;
    }

    #[test]
    fn file_roundtrip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.dtfb");
        write_bundle(&tiny(), &path).unwrap();
        assert!(manifest_path(&path).exists());
        let back = read_bundle(&path).unwrap();
        assert_eq!(back, tiny());

        // manifest checksum mismatch is corruption
        let mut man = read_manifest(&path).unwrap().unwrap();
        man.checksum = "0xdeadbeef".into();
        fs::write(manifest_path(&path), serde_json::to_string(&man).unwrap()).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::Corruption { .. })));
    }

    #[test]
    fn write_rejects_invalid_bundle_without_creating_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dtfb");
        let mut b = tiny();
        b.labels[0] = 9;
        assert!(write_bundle(&b, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_bundle(100, 16, 3, 0.5, 7).unwrap();
        let b = synth_bundle(100, 16, 3, 0.5, 7).unwrap();
        assert_eq!(encode_bundle(&a).unwrap().0, encode_bundle(&b).unwrap().0);
        a.validate().unwrap();
        let c = synth_bundle(100, 16, 3, 0.5, 8).unwrap();
        assert_ne!(a.features, c.features);
        assert!(synth_bundle(2, 16, 3, 0.5, 7).is_err());
        assert!(synth_bundle(10, 3, 3, 0.5, 7).is_err());
        assert!(synth_bundle(10, 8, 3, 1.5, 7).is_err());
    }

    #[test]
    fn synth_noiseless_is_exactly_linear() {
        let b = synth_bundle(100, 16, 3, 1.0, 7).unwrap();
        let f = b.feature_matrix();
        let y = DMatrix::from_fn(100, 4, |i, j| {
            crate::geometry::to_center_normalized(&b.corner_box(i), b.image(i)).unwrap().to_array()[j]
        });
        let svd = f.clone().svd(true, true);
        let coef = svd.solve(&y, 1e-12).unwrap();
        let resid = (&f * coef - &y).norm() / (y.len() as f64).sqrt();
        assert!(resid <= 1e-6, "rms residual {resid}");
    }
}
