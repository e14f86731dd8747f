//! Crop geometry: random resized crops, constrained multi-crop and IoU
//! statistics of crop pairs. Only rectangles are produced; no pixels are
//! touched.

use rand::Rng;

use crate::{Error, Result};

pub const TWO_CROP_SCALE: (f64, f64) = (0.2, 1.0);
pub const MULTI_CROP_LARGE_SCALE: (f64, f64) = (0.2, 1.0);
pub const MULTI_CROP_SMALL_SCALE: (f64, f64) = (0.05, 0.14);
pub const DEFAULT_ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const HISTOGRAM_BINS: usize = 20;

const RESIZED_CROP_ATTEMPTS: usize = 10;
const MAX_CONSECUTIVE_REJECTIONS: usize = 1000;
const MAX_DRAWS_PER_PAIR: usize = 100_000;

/// Axis-aligned crop inside a `src_w x src_h` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub src_w: u32,
    pub src_h: u32,
}

impl CropRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32, src_w: u32, src_h: u32) -> Result<Self> {
        let r = CropRect { x, y, w, h, src_w, src_h };
        if !r.is_valid() {
            return Err(Error::Geometry(format!("{r:?} does not fit its source image")));
        }
        Ok(r)
    }

    pub fn full(src_w: u32, src_h: u32) -> Self {
        CropRect {
            x: 0,
            y: 0,
            w: src_w,
            h: src_h,
            src_w,
            src_h,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= self.src_w as u64
            && self.y as u64 + self.h as u64 <= self.src_h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / (self.src_w as f64 * self.src_h as f64)
    }

    pub fn intersection_area(&self, other: &CropRect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = (self.x as u64 + self.w as u64).min(other.x as u64 + other.w as u64);
        let y1 = (self.y as u64 + self.h as u64).min(other.y as u64 + other.h as u64);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn contains(&self, other: &CropRect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x as u64 + other.w as u64 <= self.x as u64 + self.w as u64
            && other.y as u64 + other.h as u64 <= self.y as u64 + self.h as u64
    }
}

/// Intersection over union; 0 for disjoint rectangles.
pub fn rect_iou(a: &CropRect, b: &CropRect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn validate_ranges(width: u32, height: u32, scale: (f64, f64), aspect: (f64, f64)) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Geometry("source image must be non-empty".into()));
    }
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::domain(format!("scale range {scale:?} must satisfy 0 < lo <= hi <= 1")));
    }
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1 && aspect.1.is_finite()) {
        return Err(Error::domain(format!("aspect range {aspect:?} must satisfy 0 < lo <= hi")));
    }
    if scale.0 * (width as f64) * (height as f64) < 1.0 {
        return Err(Error::Geometry(format!(
            "{width}x{height} image is too small for a minimum area fraction of {}",
            scale.0
        )));
    }
    Ok(())
}

/// Random resized crop: area fraction uniform in `scale`, log aspect ratio
/// uniform in `aspect`. After ten rejected attempts the centre crop clipped
/// to the aspect range (and shrunk to the scale range) is returned.
pub fn sample_resized_crop<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> Result<CropRect> {
    validate_ranges(width, height, scale, aspect)?;
    let total = width as f64 * height as f64;
    let (min_area, max_area) = (scale.0 * total, scale.1 * total);
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..RESIZED_CROP_ATTEMPTS {
        let area = total * uniform(rng, scale.0, scale.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (area * ratio).sqrt().round();
        let h = (area / ratio).sqrt().round();
        if w < 1.0 || h < 1.0 || w > width as f64 || h > height as f64 {
            continue;
        }
        // Rounding may push the area outside the requested range.
        if w * h < min_area || w * h > max_area {
            continue;
        }
        let (w, h) = (w as u32, h as u32);
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        return Ok(CropRect {
            x,
            y,
            w,
            h,
            src_w: width,
            src_h: height,
        });
    }
    centre_fallback(width, height, scale, aspect)
}

fn centre_fallback(width: u32, height: u32, scale: (f64, f64), aspect: (f64, f64)) -> Result<CropRect> {
    let (fw, fh) = (width as f64, height as f64);
    let in_ratio = fw / fh;
    let (mut w, mut h) = if in_ratio < aspect.0 {
        (fw, (fw / aspect.0).round())
    } else if in_ratio > aspect.1 {
        ((fh * aspect.1).round(), fh)
    } else {
        (fw, fh)
    };
    w = w.clamp(1.0, fw);
    h = h.clamp(1.0, fh);
    let total = fw * fh;
    if w * h > scale.1 * total {
        let f = (scale.1 * total / (w * h)).sqrt();
        w = (w * f).floor().max(1.0);
        h = (h * f).floor().max(1.0);
    }
    if w * h < scale.0 * total {
        return Err(Error::Geometry(format!(
            "no centre crop of {width}x{height} satisfies scale {scale:?} and aspect {aspect:?}"
        )));
    }
    let (w, h) = (w as u32, h as u32);
    Ok(CropRect {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
        src_w: width,
        src_h: height,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiCropMode {
    /// The small crop must intersect the anchor.
    #[default]
    Overlap,
    /// The small crop must lie entirely inside the anchor.
    Contained,
}

impl MultiCropMode {
    fn accepts(self, anchor: &CropRect, crop: &CropRect) -> bool {
        match self {
            MultiCropMode::Overlap => anchor.intersection_area(crop) > 0,
            MultiCropMode::Contained => anchor.contains(crop),
        }
    }
}

/// One small crop satisfying the anchor constraint, and the number of
/// draws it took.
pub fn sample_constrained_crop<R: Rng + ?Sized>(
    anchor: &CropRect,
    scale: (f64, f64),
    aspect: (f64, f64),
    mode: MultiCropMode,
    rng: &mut R,
) -> Result<(CropRect, usize)> {
    if !anchor.is_valid() {
        return Err(Error::Geometry(format!("anchor {anchor:?} is not a valid crop")));
    }
    for attempt in 1..=MAX_CONSECUTIVE_REJECTIONS {
        let crop = sample_resized_crop(anchor.src_w, anchor.src_h, scale, aspect, rng)?;
        if mode.accepts(anchor, &crop) {
            return Ok((crop, attempt));
        }
    }
    Err(Error::Geometry(format!(
        "{MAX_CONSECUTIVE_REJECTIONS} consecutive crops violated the {mode:?} constraint for anchor {anchor:?}"
    )))
}

/// `n` small crops tied to `anchor`.
pub fn constrained_multicrop<R: Rng + ?Sized>(
    anchor: &CropRect,
    n: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    mode: MultiCropMode,
    rng: &mut R,
) -> Result<Vec<CropRect>> {
    if n == 0 {
        return Err(Error::domain("multi-crop needs at least one crop"));
    }
    (0..n)
        .map(|_| sample_constrained_crop(anchor, scale, aspect, mode, rng).map(|(c, _)| c))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouStats {
    /// Counts per bin of width `1 / HISTOGRAM_BINS` over `[0, 1]`.
    pub counts: Vec<u64>,
    /// Recorded pairs over drawn pairs.
    pub acceptance_rate: f64,
    pub draws: u64,
}

impl IouStats {
    pub fn bin_edges(i: usize) -> (f64, f64) {
        (i as f64 / HISTOGRAM_BINS as f64, (i + 1) as f64 / HISTOGRAM_BINS as f64)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn iou_bin(iou: f64) -> usize {
    ((iou * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Histogram of IoU between two independent random resized crops. With a
/// threshold below 1, pairs with IoU at or above it are redrawn.
pub fn iou_pair_stats<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    scale: (f64, f64),
    aspect: (f64, f64),
    threshold: Option<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<IouStats> {
    if samples == 0 {
        return Err(Error::domain("at least one sample is required"));
    }
    let threshold = match threshold {
        Some(t) if t.is_nan() || t <= 0.0 => {
            return Err(Error::Geometry(format!("no crop pair can have IoU below {t}")))
        }
        Some(t) if t >= 1.0 => None,
        other => other,
    };
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let mut draws = 0u64;
    for _ in 0..samples {
        let mut accepted = None;
        for _ in 0..MAX_DRAWS_PER_PAIR {
            let a = sample_resized_crop(width, height, scale, aspect, rng)?;
            let b = sample_resized_crop(width, height, scale, aspect, rng)?;
            draws += 1;
            let iou = rect_iou(&a, &b);
            if threshold.is_none_or(|t| iou < t) {
                accepted = Some(iou);
                break;
            }
        }
        let iou = accepted.ok_or_else(|| {
            Error::Geometry(format!(
                "{MAX_DRAWS_PER_PAIR} consecutive pairs reached the IoU threshold {threshold:?}"
            ))
        })?;
        counts[iou_bin(iou)] += 1;
    }
    Ok(IouStats {
        counts,
        acceptance_rate: samples as f64 / draws as f64,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_cases() {
        let a = CropRect::new(0, 0, 2, 1, 4, 4).unwrap();
        let b = CropRect::new(1, 0, 2, 1, 4, 4).unwrap();
        assert!((rect_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rect_iou(&a, &a), 1.0);
        let c = CropRect::new(3, 3, 1, 1, 4, 4).unwrap();
        assert_eq!(rect_iou(&a, &c), 0.0);
    }

    #[test]
    fn forced_full_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_resized_crop(64, 64, (1.0, 1.0), (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(r, CropRect::full(64, 64));
    }

    #[test]
    fn seeded_determinism() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_resized_crop(320, 240, TWO_CROP_SCALE, DEFAULT_ASPECT, &mut rng).unwrap()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn full_anchor_accepts_first_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchor = CropRect::full(200, 150);
        for _ in 0..200 {
            let (_, attempts) =
                sample_constrained_crop(&anchor, MULTI_CROP_SMALL_SCALE, DEFAULT_ASPECT, MultiCropMode::Overlap, &mut rng)
                    .unwrap();
            assert_eq!(attempts, 1);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_resized_crop(10, 10, (0.5, 0.2), DEFAULT_ASPECT, &mut rng).is_err());
        assert!(sample_resized_crop(10, 10, (0.2, 1.5), DEFAULT_ASPECT, &mut rng).is_err());
        assert!(sample_resized_crop(1, 1, (0.2, 1.0), DEFAULT_ASPECT, &mut rng).is_err());
        assert!(iou_pair_stats(10, 10, TWO_CROP_SCALE, DEFAULT_ASPECT, Some(0.0), 1, &mut rng).is_err());
    }

    #[test]
    fn vacuous_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = iou_pair_stats(224, 224, TWO_CROP_SCALE, DEFAULT_ASPECT, Some(1.0), 500, &mut rng).unwrap();
        assert_eq!(s.acceptance_rate, 1.0);
        assert_eq!(s.total(), 500);
    }

    #[test]
    fn contained_mode_impossible_for_tiny_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchor = CropRect::new(0, 0, 2, 2, 100, 100).unwrap();
        let err = constrained_multicrop(&anchor, 1, MULTI_CROP_SMALL_SCALE, DEFAULT_ASPECT, MultiCropMode::Contained, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }
}
