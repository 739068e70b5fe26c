//! Box representations, normalization, pyramid level assignment, the unified
//! class-slotted label matrix and IoU.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Source image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    fn check(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) || !self.width.is_finite() || !self.height.is_finite() {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Center-format box with every coordinate divided by the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub xc: f64,
    pub yc: f64,
    pub wc: f64,
    pub hc: f64,
}

impl CenterBox {
    pub fn new(xc: f64, yc: f64, wc: f64, hc: f64) -> Self {
        Self { xc, yc, wc, hc }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xc, self.yc, self.wc, self.hc]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Normalized corners `(x1, y1, x2, y2)`; negative sizes are clamped to zero.
    pub fn to_corners(self) -> [f64; 4] {
        let w = self.wc.max(0.0);
        let h = self.hc.max(0.0);
        [
            self.xc - w / 2.0,
            self.yc - h / 2.0,
            self.xc + w / 2.0,
            self.yc + h / 2.0,
        ]
    }

    /// Inverse of [`to_center_normalized`].
    pub fn to_pixels(self, image: ImageSize) -> CornerBox {
        let [x1, y1, x2, y2] = self.to_corners();
        CornerBox::new(
            x1 * image.width,
            y1 * image.height,
            x2 * image.width,
            y2 * image.height,
        )
    }
}

/// Corner box with coordinates divided by image width / height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BorderBox {
    pub x1n: f64,
    pub y1n: f64,
    pub x2n: f64,
    pub y2n: f64,
}

impl BorderBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.x1n, self.y1n, self.x2n, self.y2n]
    }
}

/// Box target encoding used when building regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Center,
    Border,
}

impl Normalization {
    pub fn encode(self, b: &CornerBox, image: ImageSize) -> Result<[f64; 4]> {
        match self {
            Normalization::Center => Ok(to_center_normalized(b, image)?.to_array()),
            Normalization::Border => Ok(to_border_normalized(b, image)?.to_array()),
        }
    }

    /// Normalized corners of an encoded (possibly predicted) box.
    pub fn corners(self, v: &[f64]) -> [f64; 4] {
        match self {
            Normalization::Center => CenterBox::from_slice(v).to_corners(),
            Normalization::Border => {
                // predictions may swap corners; collapse to an empty box
                [v[0], v[1], v[2].max(v[0]), v[3].max(v[1])]
            }
        }
    }
}

pub fn to_center_normalized(b: &CornerBox, image: ImageSize) -> Result<CenterBox> {
    image.check()?;
    if !(b.x2 > b.x1 && b.y2 > b.y1) {
        return Err(Error::InvalidInput(format!(
            "degenerate box ({}, {}, {}, {})",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    Ok(CenterBox {
        xc: (b.x1 + b.x2) / (2.0 * image.width),
        yc: (b.y1 + b.y2) / (2.0 * image.height),
        wc: (b.x2 - b.x1) / image.width,
        hc: (b.y2 - b.y1) / image.height,
    })
}

pub fn to_border_normalized(b: &CornerBox, image: ImageSize) -> Result<BorderBox> {
    image.check()?;
    Ok(BorderBox {
        x1n: b.x1 / image.width,
        y1n: b.y1 / image.height,
        x2n: b.x2 / image.width,
        y2n: b.y2 / image.height,
    })
}

/// FPN level assignment with FCOS-style clamps for very small and very large objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub l0: i32,
    pub l_min: i32,
    pub l_max: i32,
    pub small_thresh: f64,
    pub large_thresh: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            l0: 3,
            l_min: 2,
            l_max: 5,
            small_thresh: 64.0,
            large_thresh: 512.0,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_min <= self.l0 && self.l0 <= self.l_max) {
            return Err(Error::InvalidInput(format!(
                "pyramid levels must satisfy l_min <= l0 <= l_max, got {} <= {} <= {}",
                self.l_min, self.l0, self.l_max
            )));
        }
        if !(self.small_thresh > 0.0 && self.small_thresh <= self.large_thresh) {
            return Err(Error::InvalidInput(
                "pyramid thresholds must satisfy 0 < small <= large".into(),
            ));
        }
        Ok(())
    }

    pub fn level_count(&self) -> u8 {
        (self.l_max - self.l_min + 1).clamp(0, 255) as u8
    }
}

pub fn assign_pyramid_level(box_w: f64, box_h: f64, cfg: &PyramidConfig) -> Result<i32> {
    if !(box_w > 0.0 && box_h > 0.0) || !box_w.is_finite() || !box_h.is_finite() {
        return Err(Error::InvalidInput(format!(
            "box size must be positive, got {box_w}x{box_h}"
        )));
    }
    let side = box_w.max(box_h);
    if side < cfg.small_thresh {
        return Ok(cfg.l_min);
    }
    if side > cfg.large_thresh {
        return Ok(cfg.l_max);
    }
    let level = (cfg.l0 as f64 + ((box_w * box_h).sqrt() / 224.0).log2()).floor() as i32;
    Ok(level.clamp(cfg.l_min, cfg.l_max))
}

/// Class-slotted box targets: row `i` holds the object's box in block `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedLabelMatrix {
    pub y: DMatrix<f64>,
    pub num_classes: usize,
    pub source_labels: Vec<usize>,
}

impl UnifiedLabelMatrix {
    /// Recover `(box, class)` for row `i`.
    pub fn row_target(&self, i: usize) -> ([f64; 4], usize) {
        let c = self.source_labels[i];
        let mut b = [0.0; 4];
        for (j, v) in b.iter_mut().enumerate() {
            *v = self.y[(i, 4 * c + j)];
        }
        (b, c)
    }
}

pub fn expand_unified_labels(
    boxes: &[[f64; 4]],
    labels: &[usize],
    num_classes: usize,
) -> Result<UnifiedLabelMatrix> {
    if boxes.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} boxes but {} labels",
            boxes.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidInput("class count must be at least 1".into()));
    }
    let mut y = DMatrix::zeros(boxes.len(), 4 * num_classes);
    for (i, (b, &c)) in boxes.iter().zip(labels).enumerate() {
        if c >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label out of range at row {i}: {c} >= {num_classes}"
            )));
        }
        for (j, v) in b.iter().enumerate() {
            y[(i, 4 * c + j)] = *v;
        }
    }
    Ok(UnifiedLabelMatrix {
        y,
        num_classes,
        source_labels: labels.to_vec(),
    })
}

/// IoU of two boxes given as normalized corners. Empty boxes score 0.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |c: [f64; 4]| (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
    let (area_a, area_b) = (area(a), area(b));
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if !(union > 0.0) {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU between a (possibly unconstrained) prediction and a ground-truth center box.
pub fn iou_pair(pred: &CenterBox, truth: &CenterBox) -> f64 {
    iou_corners(pred.to_corners(), truth.to_corners())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn center_normalization_examples() {
        let c = to_center_normalized(&CornerBox::new(10., 20., 30., 60.), ImageSize::new(100., 200.)).unwrap();
        assert_abs_diff_eq!(c.xc, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.yc, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.wc, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.hc, 0.2, epsilon = 1e-15);

        let full = to_center_normalized(&CornerBox::new(0., 0., 640., 480.), ImageSize::new(640., 480.)).unwrap();
        assert_eq!(full, CenterBox::new(0.5, 0.5, 1.0, 1.0));
        let unit = to_center_normalized(&CornerBox::new(0., 0., 1., 1.), ImageSize::new(1., 1.)).unwrap();
        assert_eq!(unit, CenterBox::new(0.5, 0.5, 1.0, 1.0));
    }

    #[test]
    fn center_normalization_rejects_degenerate() {
        let img = ImageSize::new(10., 10.);
        assert!(to_center_normalized(&CornerBox::new(1., 1., 1., 5.), img).is_err());
        assert!(to_center_normalized(&CornerBox::new(1., 5., 4., 2.), img).is_err());
        assert!(to_center_normalized(&CornerBox::new(1., 1., 2., 2.), ImageSize::new(0., 5.)).is_err());
    }

    #[test]
    fn border_normalization_examples() {
        let b = to_border_normalized(&CornerBox::new(10., 20., 30., 60.), ImageSize::new(100., 200.)).unwrap();
        assert_abs_diff_eq!(b.x1n, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b.y1n, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b.x2n, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(b.y2n, 0.3, epsilon = 1e-15);

        let full = to_border_normalized(&CornerBox::new(0., 0., 300., 200.), ImageSize::new(300., 200.)).unwrap();
        assert_eq!(full.to_array(), [0., 0., 1., 1.]);

        let s = 400.0;
        let sq = to_border_normalized(
            &CornerBox::new(s / 2. - s / 4., s / 2. - s / 4., s / 2. + s / 4., s / 2. + s / 4.),
            ImageSize::new(s, s),
        )
        .unwrap();
        assert_eq!(sq.to_array(), [0.25, 0.25, 0.75, 0.75]);
        assert!(to_border_normalized(&CornerBox::new(0., 0., 1., 1.), ImageSize::new(0., 0.)).is_err());
    }

    #[test]
    fn pyramid_levels() {
        let cfg = PyramidConfig::default();
        assert_eq!(assign_pyramid_level(224., 224., &cfg).unwrap(), 3);
        assert_eq!(assign_pyramid_level(50., 50., &cfg).unwrap(), cfg.l_min);
        assert_eq!(assign_pyramid_level(112., 112., &cfg).unwrap(), 2);
        assert_eq!(assign_pyramid_level(600., 100., &cfg).unwrap(), cfg.l_max);
        // max side exactly on a threshold goes through the formula
        assert_eq!(assign_pyramid_level(64., 64., &cfg).unwrap(), 2);
        assert_eq!(assign_pyramid_level(512., 512., &cfg).unwrap(), 4);
        // thin box: max side 64 is not "small", formula gives floor(3 + log2(16/224)) -> clamped
        assert_eq!(assign_pyramid_level(64., 4., &cfg).unwrap(), 2);
        assert!(assign_pyramid_level(0., 4., &cfg).is_err());
        assert!(assign_pyramid_level(-3., 4., &cfg).is_err());
    }

    #[test]
    fn unified_labels() {
        let y = expand_unified_labels(&[[0.5, 0.5, 0.2, 0.3]], &[1], 2).unwrap();
        assert_eq!(y.y.row(0).iter().copied().collect::<Vec<_>>(), vec![0., 0., 0., 0., 0.5, 0.5, 0.2, 0.3]);

        let boxes = [[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]];
        let single = expand_unified_labels(&boxes, &[0, 0], 1).unwrap();
        assert_eq!(single.y.ncols(), 4);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(single.y[(i, j)], boxes[i][j]);
            }
        }

        let two = expand_unified_labels(&boxes, &[0, 1], 2).unwrap();
        assert!((0..4).all(|j| two.y[(0, j)] != 0.0 && two.y[(1, j)] == 0.0));
        assert!((4..8).all(|j| two.y[(1, j)] != 0.0 && two.y[(0, j)] == 0.0));

        let err = expand_unified_labels(&boxes, &[0, 2], 2).unwrap_err();
        assert!(err.to_string().contains("label out of range at row 1"));
    }

    #[test]
    fn iou_examples() {
        let b = CenterBox::new(0.4, 0.6, 0.3, 0.2);
        assert_abs_diff_eq!(iou_pair(&b, &b), 1.0, epsilon = 1e-15);
        let far = CenterBox::new(0.9, 0.1, 0.1, 0.1);
        assert_eq!(iou_pair(&far, &b), 0.0);
        let outer = CenterBox::new(0.5, 0.5, 0.4, 0.4);
        let inner = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        assert_abs_diff_eq!(iou_pair(&outer, &inner), 0.25, epsilon = 1e-12);
        // degenerate and negative-size predictions score 0
        assert_eq!(iou_pair(&CenterBox::new(0.5, 0.5, -0.2, 0.3), &inner), 0.0);
        assert_eq!(iou_pair(&CenterBox::new(0.0, 0.0, 0.0, 0.0), &inner), 0.0);
    }

    fn corner_strategy() -> impl Strategy<Value = (CornerBox, ImageSize)> {
        (1.0f64..4000.0, 1.0f64..4000.0, 0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(
            |(w, h, fx, fy, fw, fh)| {
                let x1 = fx * w * 0.99;
                let y1 = fy * h * 0.99;
                let x2 = x1 + (w - x1) * fw;
                let y2 = y1 + (h - y1) * fh;
                (CornerBox::new(x1, y1, x2, y2), ImageSize::new(w, h))
            },
        )
    }

    proptest! {
        #[test]
        fn center_roundtrip((b, img) in corner_strategy()) {
            prop_assume!(b.x2 > b.x1 && b.y2 > b.y1);
            let c = to_center_normalized(&b, img).unwrap();
            for v in c.to_array() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            let back = c.to_pixels(img);
            let scale_x = img.width.max(1.0);
            let scale_y = img.height.max(1.0);
            prop_assert!((back.x1 - b.x1).abs() <= 1e-9 * scale_x);
            prop_assert!((back.x2 - b.x2).abs() <= 1e-9 * scale_x);
            prop_assert!((back.y1 - b.y1).abs() <= 1e-9 * scale_y);
            prop_assert!((back.y2 - b.y2).abs() <= 1e-9 * scale_y);
        }

        #[test]
        fn iou_symmetric_and_bounded(
            a in (0.0f64..1.0, 0.0f64..1.0, 0.001f64..1.0, 0.001f64..1.0),
            b in (0.0f64..1.0, 0.0f64..1.0, 0.001f64..1.0, 0.001f64..1.0),
        ) {
            let a = CenterBox::new(a.0, a.1, a.2, a.3);
            let b = CenterBox::new(b.0, b.1, b.2, b.3);
            let ab = iou_pair(&a, &b);
            let ba = iou_pair(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() <= 1e-15);
        }

        #[test]
        fn level_monotone(s1 in 64.0f64..512.0, s2 in 64.0f64..512.0) {
            let cfg = PyramidConfig::default();
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(assign_pyramid_level(lo, lo, &cfg).unwrap() <= assign_pyramid_level(hi, hi, &cfg).unwrap());
        }

        #[test]
        fn unified_labels_lossless(
            rows in proptest::collection::vec((0usize..5, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 1..20)
        ) {
            let boxes: Vec<[f64; 4]> = rows.iter().map(|r| [r.1, r.2, r.3, r.4]).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let u = expand_unified_labels(&boxes, &labels, 5).unwrap();
            for i in 0..boxes.len() {
                let nonzero = u.y.row(i).iter().filter(|v| **v != 0.0).count();
                prop_assert_eq!(nonzero, 4);
                let (b, c) = u.row_target(i);
                prop_assert_eq!(b, boxes[i]);
                prop_assert_eq!(c, labels[i]);
            }
        }
    }
}
