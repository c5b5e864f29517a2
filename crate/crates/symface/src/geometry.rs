//! Three-point frontness scoring and vertical face splitting.
//!
//! A face image is scored from three landmarks (two eyes, one nose): the
//! horizontal discrepancy `D` between the nose and the eye midpoint gives
//! the symmetric orientation coefficient `rho = 1 / (1 + D^2)`. Near-frontal
//! faces score close to 1; strongly posed faces score close to 0. Images
//! that pass a threshold can then be split at the nose column into two
//! hemi-face canvases of the original size, each half re-centered over zero
//! padding so both feed the same network input shape.
//!
//! These are pure functions over immutable inputs; there is no shared state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// 2-D point in pixel coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// The three landmarks used for frontness scoring.
///
/// Eye order is canonicalized on construction: `left_eye` always has the
/// smaller x, regardless of the order the detector reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    left_eye: Point2,
    right_eye: Point2,
    nose: Point2,
    detected: bool,
}

impl Landmarks {
    /// Landmarks from a successful detection. Swaps the eyes if they arrive
    /// in right-to-left order.
    pub fn detected(eye_a: Point2, eye_b: Point2, nose: Point2) -> Self {
        let (left_eye, right_eye) = if eye_a.x <= eye_b.x {
            (eye_a, eye_b)
        } else {
            (eye_b, eye_a)
        };
        Self {
            left_eye,
            right_eye,
            nose,
            detected: true,
        }
    }

    /// Placeholder for an image where the detector found nothing.
    pub fn undetected() -> Self {
        let origin = Point2::new(0.0, 0.0);
        Self {
            left_eye: origin,
            right_eye: origin,
            nose: origin,
            detected: false,
        }
    }

    pub fn is_detected(&self) -> bool {
        self.detected
    }

    pub fn left_eye(&self) -> Point2 {
        self.left_eye
    }

    pub fn right_eye(&self) -> Point2 {
        self.right_eye
    }

    pub fn nose(&self) -> Point2 {
        self.nose
    }

    fn coords_finite(&self) -> bool {
        [self.left_eye, self.right_eye, self.nose]
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite())
    }
}

/// How the nose/eye-midpoint discrepancy is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontnessMode {
    /// Raw pixel units of the aligned crop (the default).
    #[default]
    Pixels,
    /// Discrepancy divided by the inter-ocular distance.
    InterOcular,
}

/// Frontness measurement: the raw discrepancy and its squashed score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontnessScore {
    /// |nose_x - (left_eye_x + right_eye_x) / 2|; infinity when undetected.
    pub discrepancy: f64,
    /// 1 / (1 + discrepancy^2); exactly 0 when undetected.
    pub rho: f64,
}

/// Score how frontal a face is from its three landmarks.
///
/// Undetected landmarks are a valid input and score `rho = 0` with an
/// infinite discrepancy sentinel. Detected landmarks with non-finite
/// coordinates are rejected.
pub fn frontness_score(lm: &Landmarks) -> Result<FrontnessScore> {
    frontness_score_with(lm, FrontnessMode::Pixels)
}

/// [`frontness_score`] with an explicit measurement mode.
pub fn frontness_score_with(lm: &Landmarks, mode: FrontnessMode) -> Result<FrontnessScore> {
    if !lm.detected {
        return Ok(FrontnessScore {
            discrepancy: f64::INFINITY,
            rho: 0.0,
        });
    }
    if !lm.coords_finite() {
        return Err(Error::InvalidLandmarks(
            "detected landmarks must have finite coordinates".into(),
        ));
    }
    let midpoint_x = (lm.left_eye.x + lm.right_eye.x) / 2.0;
    let mut d = (lm.nose.x - midpoint_x).abs();
    if mode == FrontnessMode::InterOcular {
        let inter_ocular = lm.right_eye.x - lm.left_eye.x;
        if inter_ocular <= f64::EPSILON {
            return Err(Error::InvalidLandmarks(
                "inter-ocular distance is zero; cannot normalize".into(),
            ));
        }
        d /= inter_ocular;
    }
    Ok(FrontnessScore {
        discrepancy: d,
        rho: 1.0 / (1.0 + d * d),
    })
}

/// Strict threshold test: an image qualifies as symmetric iff `rho > tau`.
///
/// Callers are expected to pass `tau` in `[0, 1)`; the boundary `rho == tau`
/// is asymmetric.
pub fn classify_symmetric(rho: f64, tau: f64) -> bool {
    debug_assert!((0.0..1.0).contains(&tau), "tau must be in [0, 1)");
    rho > tau
}

/// The two zero-padded hemi-face canvases produced by a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    left_padded: RasterImage,
    right_padded: RasterImage,
    split_column: usize,
    source_dims: (usize, usize),
}

impl SplitPair {
    /// Left hemi face, centered in a zero canvas of the source dimensions.
    pub fn left(&self) -> &RasterImage {
        &self.left_padded
    }

    /// Right hemi face, centered in a zero canvas of the source dimensions.
    pub fn right(&self) -> &RasterImage {
        &self.right_padded
    }

    pub fn split_column(&self) -> usize {
        self.split_column
    }

    /// (height, width) of the source image.
    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    /// Swap the two halves and mirror each one. The mirror of a left hemi
    /// face is a right hemi face, so a horizontal flip of the source maps
    /// onto this role swap.
    pub fn mirrored(&self) -> SplitPair {
        SplitPair {
            left_padded: self.right_padded.mirror_horizontal(),
            right_padded: self.left_padded.mirror_horizontal(),
            split_column: self.source_dims.1 - self.split_column,
            source_dims: self.source_dims,
        }
    }
}

/// Horizontal offset that centers a strip of width `w_half` in a canvas of
/// width `w`. Odd remainders bias left.
pub fn center_offset(w: usize, w_half: usize) -> usize {
    (w - w_half) / 2
}

/// Split `img` vertically at column `n_x`.
///
/// The left half owns columns `[0, n_x)`, the right half `[n_x, W)`; the
/// nose column itself belongs to the right half. Each half is re-centered
/// in an all-zero canvas with the source dimensions.
pub fn split_face(img: &RasterImage, n_x: usize) -> Result<SplitPair> {
    let (w, h) = (img.width(), img.height());
    if n_x < 1 || n_x > w.saturating_sub(1) {
        return Err(Error::DegenerateSplit {
            column: n_x as i64,
            max: w.saturating_sub(1),
            width: w,
        });
    }
    let left_content = img.crop(0, 0, n_x, h)?;
    let right_content = img.crop(n_x, 0, w - n_x, h)?;

    let mut left_padded = RasterImage::zeros(w, h, img.channels());
    let mut right_padded = RasterImage::zeros(w, h, img.channels());
    left_content.blit_into(&mut left_padded, center_offset(w, n_x), 0)?;
    right_content.blit_into(&mut right_padded, center_offset(w, w - n_x), 0)?;

    Ok(SplitPair {
        left_padded,
        right_padded,
        split_column: n_x,
        source_dims: (h, w),
    })
}

/// Reconstruct the source image from a split pair. Exact inverse of
/// [`split_face`]: stripping the padding and concatenating the halves along
/// columns reproduces the source bit for bit.
pub fn unsplit(pair: &SplitPair) -> Result<RasterImage> {
    let (h, w) = pair.source_dims;
    let n_x = pair.split_column;
    for (name, half) in [("left", &pair.left_padded), ("right", &pair.right_padded)] {
        if half.width() != w || half.height() != h {
            return Err(Error::InvalidPair(format!(
                "{name} half is {}x{}, source is {w}x{h}",
                half.width(),
                half.height()
            )));
        }
    }
    if pair.left_padded.channels() != pair.right_padded.channels() {
        return Err(Error::InvalidPair(
            "halves disagree on channel count".into(),
        ));
    }
    if n_x < 1 || n_x > w - 1 {
        return Err(Error::InvalidPair(format!(
            "split column {n_x} is outside [1, {}]",
            w - 1
        )));
    }

    let left_content = pair.left_padded.crop(center_offset(w, n_x), 0, n_x, h)?;
    let right_content = pair
        .right_padded
        .crop(center_offset(w, w - n_x), 0, w - n_x, h)?;

    let mut out = RasterImage::zeros(w, h, pair.left_padded.channels());
    left_content.blit_into(&mut out, 0, 0)?;
    right_content.blit_into(&mut out, n_x, 0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(ex_l: f64, ex_r: f64, nx: f64) -> Landmarks {
        Landmarks::detected(
            Point2::new(ex_l, 40.0),
            Point2::new(ex_r, 40.0),
            Point2::new(nx, 80.0),
        )
    }

    #[test]
    fn nose_at_eye_midpoint_scores_one() {
        let s = frontness_score(&lm(30.0, 70.0, 50.0)).unwrap();
        assert_eq!(s.discrepancy, 0.0);
        assert_eq!(s.rho, 1.0);
    }

    #[test]
    fn two_pixel_discrepancy_scores_point_two() {
        let s = frontness_score(&lm(28.0, 68.0, 50.0)).unwrap();
        assert_eq!(s.discrepancy, 2.0);
        assert_eq!(s.rho, 0.2);
    }

    #[test]
    fn undetected_scores_zero_exactly() {
        let s = frontness_score(&Landmarks::undetected()).unwrap();
        assert_eq!(s.rho, 0.0);
        assert!(s.discrepancy.is_infinite());
    }

    #[test]
    fn non_finite_detected_coordinates_error() {
        let bad = Landmarks::detected(
            Point2::new(f64::NAN, 1.0),
            Point2::new(2.0, 1.0),
            Point2::new(1.0, 2.0),
        );
        assert!(matches!(
            frontness_score(&bad),
            Err(Error::InvalidLandmarks(_))
        ));
    }

    #[test]
    fn eye_order_is_canonicalized() {
        let swapped = Landmarks::detected(
            Point2::new(70.0, 40.0),
            Point2::new(30.0, 40.0),
            Point2::new(50.0, 80.0),
        );
        assert_eq!(swapped.left_eye().x, 30.0);
        assert_eq!(swapped.right_eye().x, 70.0);
        assert_eq!(frontness_score(&swapped).unwrap().rho, 1.0);
    }

    #[test]
    fn inter_ocular_mode_normalizes_by_eye_distance() {
        // D = 4 px over a 40 px inter-ocular span -> 0.1 normalized.
        let s = frontness_score_with(&lm(30.0, 70.0, 54.0), FrontnessMode::InterOcular).unwrap();
        assert!((s.discrepancy - 0.1).abs() < 1e-15);
        let coincident = Landmarks::detected(
            Point2::new(30.0, 40.0),
            Point2::new(30.0, 40.0),
            Point2::new(30.0, 80.0),
        );
        assert!(frontness_score_with(&coincident, FrontnessMode::InterOcular).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        assert!(classify_symmetric(0.38, 0.2));
        assert!(!classify_symmetric(0.01, 0.2));
        assert!(!classify_symmetric(0.2, 0.2));
    }

    #[test]
    fn rho_is_strictly_decreasing_in_discrepancy() {
        let mut prev = f64::INFINITY;
        for d in [0.0, 0.5, 1.0, 2.0, 5.0, 50.0, 1e6] {
            let rho = 1.0 / (1.0 + d * d);
            assert!(rho < prev || (d == 0.0 && rho == 1.0));
            prev = rho;
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> RasterImage {
        let mut img = RasterImage::zeros(w, h, 1);
        let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        for y in 0..h {
            for x in 0..w {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                img.set(x, y, 0, (state >> 56) as u8);
            }
        }
        img
    }

    #[test]
    fn split_at_midpoint_centers_both_halves() {
        let img = random_image(112, 4, 7);
        let pair = split_face(&img, 56).unwrap();
        assert_eq!(center_offset(112, 56), 28);
        // Content columns [28, 84) are populated; everything else is zero.
        for half in [pair.left(), pair.right()] {
            for x in 0..112 {
                for y in 0..4 {
                    let inside = (28..84).contains(&x);
                    if !inside {
                        assert_eq!(half.get(x, y, 0), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_split_columns_error() {
        let img = random_image(112, 4, 1);
        assert!(matches!(
            split_face(&img, 0),
            Err(Error::DegenerateSplit { .. })
        ));
        assert!(matches!(
            split_face(&img, 112),
            Err(Error::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn unsplit_inverts_split() {
        let img = random_image(8, 5, 99);
        let pair = split_face(&img, 3).unwrap();
        assert_eq!(unsplit(&pair).unwrap(), img);
    }

    #[test]
    fn unsplit_all_zero_source() {
        let img = RasterImage::zeros(8, 3, 1);
        let pair = split_face(&img, 5).unwrap();
        assert_eq!(unsplit(&pair).unwrap(), img);
    }

    #[test]
    fn unsplit_rejects_mismatched_dims() {
        let img = random_image(10, 4, 3);
        let mut pair = split_face(&img, 4).unwrap();
        pair.source_dims = (4, 12);
        assert!(matches!(unsplit(&pair), Err(Error::InvalidPair(_))));
    }

    #[test]
    fn mirror_equivariance_on_content() {
        // Splitting the mirrored image at W - n_x produces halves whose
        // content regions are the mirrored, role-swapped content of the
        // original split. Offsets may differ by one column for odd widths,
        // so compare contents.
        for (w, n_x) in [(12usize, 5usize), (12, 6), (9, 4), (16, 3)] {
            let img = random_image(w, 6, w as u64 * 31 + n_x as u64);
            let pair = split_face(&img, n_x).unwrap();
            let mirrored_pair = split_face(&img.mirror_horizontal(), w - n_x).unwrap();

            let h = img.height();
            let left_content = |p: &SplitPair| {
                let nx = p.split_column();
                p.left().crop(center_offset(w, nx), 0, nx, h).unwrap()
            };
            let right_content = |p: &SplitPair| {
                let nx = p.split_column();
                p.right()
                    .crop(center_offset(w, w - nx), 0, w - nx, h)
                    .unwrap()
            };

            assert_eq!(
                left_content(&mirrored_pair),
                right_content(&pair).mirror_horizontal()
            );
            assert_eq!(
                right_content(&mirrored_pair),
                left_content(&pair).mirror_horizontal()
            );
        }
    }

    #[test]
    fn mirrored_pair_swaps_roles() {
        let img = random_image(10, 4, 17);
        let pair = split_face(&img, 4).unwrap();
        let swapped = pair.mirrored();
        assert_eq!(swapped.left(), &pair.right().mirror_horizontal());
        assert_eq!(swapped.right(), &pair.left().mirror_horizontal());
        assert_eq!(swapped.split_column(), 6);
    }
}
