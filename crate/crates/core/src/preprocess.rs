//! CT geometry preprocessing: black-border cropping, trilinear resampling,
//! RECIST pseudo masks and affine augmentation.
//!
//! Pixel `(row, col)` has its centre at `(x, y) = (col, row)`. Boxes and
//! RECIST endpoints use the same convention.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::Scalar;

/// HU at or below which a pixel counts as black border. Air is about -1024.
pub const BLACK_THRESHOLD_HU: f64 = -1000.0;

/// Common voxel spacing `(x, y, z)` in millimetres.
pub const DEFAULT_TARGET_SPACING_MM: [f64; 3] = [0.8, 0.8, 2.0];

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const TRANSLATE_RANGE: (f64, f64) = (-8.0, 8.0);

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("spacing must be positive and finite, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("volume has no voxels")]
    EmptyVolume,
    #[error("degenerate RECIST measurement: {0}")]
    DegenerateMeasurement(&'static str),
    #[error("augmentation parameter `{name}` = {value} outside [{lo}, {hi}]")]
    ParamOutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("voxel count {found} does not match dims {dims:?}")]
    DataLength { dims: [usize; 3], found: usize },
}

/// CT volume: voxels indexed `(slice, row, col)` with spacing `(x, y, z)` mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    voxels: Array3<T>,
    spacing_mm: [T; 3],
}

impl<T: Scalar> Volume<T> {
    pub fn new(voxels: Array3<T>, spacing_mm: [T; 3]) -> Result<Self, PreprocessError> {
        if voxels.is_empty() {
            return Err(PreprocessError::EmptyVolume);
        }
        check_spacing(&spacing_mm)?;
        Ok(Self { voxels, spacing_mm })
    }

    pub fn voxels(&self) -> &Array3<T> {
        &self.voxels
    }

    pub fn spacing_mm(&self) -> [T; 3] {
        self.spacing_mm
    }

    /// `(slices, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn slice(&self, k: usize) -> ArrayView2<'_, T> {
        self.voxels.slice(s![k, .., ..])
    }

    /// Key slice `k` with its inferior and superior neighbours. Indices are
    /// clamped at the volume ends.
    pub fn context_slices(&self, k: usize) -> [ArrayView2<'_, T>; 3] {
        let last = self.dims().0 - 1;
        let k = k.min(last);
        [
            self.slice(k.saturating_sub(1)),
            self.slice(k),
            self.slice((k + 1).min(last)),
        ]
    }

    pub fn into_voxels(self) -> Array3<T> {
        self.voxels
    }
}

fn check_spacing<T: Scalar>(spacing: &[T; 3]) -> Result<(), PreprocessError> {
    if spacing.iter().all(|v| v.is_finite() && *v > T::zero()) {
        Ok(())
    } else {
        Err(PreprocessError::NonPositiveSpacing(spacing.map(|v| v.as_f64())))
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropRect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Smallest rect covering both.
    pub fn union(&self, other: &CropRect) -> CropRect {
        CropRect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// Tight bounding rect of pixels brighter than `threshold`, or `None` when
/// every pixel is black.
pub fn foreground_rect<T: Scalar>(slice: ArrayView2<'_, T>, threshold: T) -> Option<CropRect> {
    let mut rect: Option<CropRect> = None;
    for ((r, c), &v) in slice.indexed_iter() {
        if v > threshold {
            let px = CropRect {
                x0: c,
                y0: r,
                x1: c + 1,
                y1: r + 1,
            };
            rect = Some(rect.map_or(px, |acc| acc.union(&px)));
        }
    }
    rect
}

/// Crops away the black border around the body. An all-black slice comes
/// back unchanged with a full-frame rect.
pub fn crop_black_border<T: Scalar>(slice: ArrayView2<'_, T>) -> (Array2<T>, CropRect) {
    crop_with_threshold(slice, T::lit(BLACK_THRESHOLD_HU))
}

pub fn crop_with_threshold<T: Scalar>(
    slice: ArrayView2<'_, T>,
    threshold: T,
) -> (Array2<T>, CropRect) {
    let (h, w) = slice.dim();
    let rect = foreground_rect(slice, threshold).unwrap_or(CropRect::full(h, w));
    (crop_to(slice, &rect), rect)
}

pub fn crop_to<T: Scalar>(slice: ArrayView2<'_, T>, rect: &CropRect) -> Array2<T> {
    slice.slice(s![rect.y0..rect.y1, rect.x0..rect.x1]).to_owned()
}

/// Crops every slice of a volume to the union of the per-slice foreground
/// rects, so that slices stay aligned.
pub fn crop_volume<T: Scalar>(vol: &Volume<T>) -> (Volume<T>, CropRect) {
    let (_, h, w) = vol.dims();
    let threshold = T::lit(BLACK_THRESHOLD_HU);
    let rect = vol
        .voxels
        .outer_iter()
        .filter_map(|sl| foreground_rect(sl, threshold))
        .reduce(|a, b| a.union(&b))
        .unwrap_or(CropRect::full(h, w));
    let voxels = vol
        .voxels
        .slice(s![.., rect.y0..rect.y1, rect.x0..rect.x1])
        .to_owned();
    (
        Volume {
            voxels,
            spacing_mm: vol.spacing_mm,
        },
        rect,
    )
}

fn resampled_len(len: usize, src: f64, dst: f64) -> usize {
    ((len as f64 * src / dst).round() as usize).max(1)
}

/// Linear sample position along one axis: index, next index and weight of
/// the next index. Positions beyond the last voxel clamp to it.
#[inline]
fn axis_sample(pos: f64, len: usize) -> (usize, usize, f64) {
    let last = (len - 1) as f64;
    let p = pos.clamp(0.0, last);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

/// Resamples to `target_spacing` `(x, y, z)` mm with trilinear interpolation.
///
/// Output voxel `i` along an axis sits at physical offset `i * target` from
/// the first source voxel, i.e. source index `i * target / source`. Output
/// extent per axis is `round(n * source / target)`, at least 1.
pub fn resample<T: Scalar>(
    vol: &Volume<T>,
    target_spacing: [T; 3],
) -> Result<Volume<T>, PreprocessError> {
    check_spacing(&target_spacing)?;
    let (ns, nh, nw) = vol.dims();
    let src = vol.spacing_mm.map(|v| v.as_f64());
    let dst = target_spacing.map(|v| v.as_f64());
    let out_w = resampled_len(nw, src[0], dst[0]);
    let out_h = resampled_len(nh, src[1], dst[1]);
    let out_s = resampled_len(ns, src[2], dst[2]);

    let xs: Vec<_> = (0..out_w)
        .map(|i| axis_sample(i as f64 * (dst[0] / src[0]), nw))
        .collect();
    let ys: Vec<_> = (0..out_h)
        .map(|i| axis_sample(i as f64 * (dst[1] / src[1]), nh))
        .collect();
    let zs: Vec<_> = (0..out_s)
        .map(|i| axis_sample(i as f64 * (dst[2] / src[2]), ns))
        .collect();

    let v = &vol.voxels;
    let lerp = |a: T, b: T, t: f64| {
        if t == 0.0 {
            a
        } else {
            a + (b - a) * T::lit(t)
        }
    };
    let voxels = Array3::from_shape_fn((out_s, out_h, out_w), |(k, j, i)| {
        let (z0, z1, tz) = zs[k];
        let (y0, y1, ty) = ys[j];
        let (x0, x1, tx) = xs[i];
        let plane = |z: usize| {
            let top = lerp(v[[z, y0, x0]], v[[z, y0, x1]], tx);
            let bottom = lerp(v[[z, y1, x0]], v[[z, y1, x1]], tx);
            lerp(top, bottom, ty)
        };
        lerp(plane(z0), plane(z1), tz)
    });
    Ok(Volume {
        voxels,
        spacing_mm: target_spacing,
    })
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Rasterizes the RECIST pseudo mask into an `(height, width)` frame.
///
/// `endpoints` are `[lx1, ly1, lx2, ly2, sx1, sy1, sx2, sy2]`: the long-axis
/// pair then the short-axis pair. The mask is the filled quadrilateral with
/// those four vertices (taken in angular order, i.e. their convex hull); a
/// pixel is set when its centre lies inside or on the boundary. Parts of the
/// quadrilateral outside the frame are dropped.
pub fn recist_to_mask(
    endpoints: &[f64; 8],
    frame: (usize, usize),
) -> Result<Array2<bool>, PreprocessError> {
    if endpoints.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::DegenerateMeasurement("non-finite endpoint"));
    }
    let p: Vec<(f64, f64)> = endpoints.chunks(2).map(|c| (c[0], c[1])).collect();
    let scale = p
        .iter()
        .flat_map(|&(x, y)| [x.abs(), y.abs()])
        .fold(1.0f64, f64::max);
    let tol = 1e-9 * scale;
    let len = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    if len(p[0], p[1]) <= tol {
        return Err(PreprocessError::DegenerateMeasurement("zero-length long axis"));
    }
    if len(p[2], p[3]) <= tol {
        return Err(PreprocessError::DegenerateMeasurement("zero-length short axis"));
    }
    let hull = convex_hull(p);
    let twice_area: f64 = (0..hull.len())
        .map(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if hull.len() < 3 || twice_area.abs() <= tol * scale {
        return Err(PreprocessError::DegenerateMeasurement("collinear endpoints"));
    }

    let (height, width) = frame;
    let mut mask = Array2::from_elem((height, width), false);
    let (min_x, max_x) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.0), hi.max(q.0)));
    let (min_y, max_y) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.1), hi.max(q.1)));
    let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let lo = lo.ceil().max(0.0);
        let hi = hi.floor().min(n as f64 - 1.0);
        (n > 0 && lo <= hi).then(|| (lo as usize, hi as usize))
    };
    let (Some((c0, c1)), Some((r0, r1))) = (clip(min_x, max_x, width), clip(min_y, max_y, height))
    else {
        return Ok(mask);
    };
    let edge_tol = 1e-9 * scale * scale;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let q = (c as f64, r as f64);
            let inside = (0..hull.len())
                .all(|i| cross(hull[i], hull[(i + 1) % hull.len()], q) >= -edge_tol);
            if inside {
                mask[[r, c]] = true;
            }
        }
    }
    Ok(mask)
}

/// Affine augmentation applied as flips, then scale about the centre, then
/// translation by `(dx, dy)` pixels (rounded to integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub scale: f64,
    pub translate: [f64; 2],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            scale: 1.0,
            translate: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let check = |name, value: f64, (lo, hi): (f64, f64)| {
            if value.is_finite() && (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(PreprocessError::ParamOutOfRange {
                    name,
                    value,
                    lo,
                    hi,
                })
            }
        };
        check("scale", self.scale, SCALE_RANGE)?;
        check("translate_x", self.translate[0], TRANSLATE_RANGE)?;
        check("translate_y", self.translate[1], TRANSLATE_RANGE)
    }
}

pub fn augment<T: Scalar>(
    image: ArrayView2<'_, T>,
    p: &AugmentParams,
) -> Result<Array2<T>, PreprocessError> {
    p.validate()?;
    let (h, w) = image.dim();
    let mut out = image.to_owned();
    if p.hflip {
        out.invert_axis(ndarray::Axis(1));
    }
    if p.vflip {
        out.invert_axis(ndarray::Axis(0));
    }
    let mut out = out.as_standard_layout().into_owned();

    if p.scale != 1.0 && h > 0 && w > 0 {
        let src = out;
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let inv = 1.0 / p.scale;
        out = Array2::from_shape_fn((h, w), |(r, c)| {
            let sy = cy + (r as f64 - cy) * inv;
            let sx = cx + (c as f64 - cx) * inv;
            bilinear_or_zero(&src, sy, sx)
        });
    }

    let dx = p.translate[0].round() as isize;
    let dy = p.translate[1].round() as isize;
    if dx != 0 || dy != 0 {
        let src = out;
        out = Array2::from_shape_fn((h, w), |(r, c)| {
            let sr = r as isize - dy;
            let sc = c as isize - dx;
            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                src[[sr as usize, sc as usize]]
            } else {
                T::zero()
            }
        });
    }
    Ok(out)
}

fn bilinear_or_zero<T: Scalar>(src: &Array2<T>, y: f64, x: f64) -> T {
    let (h, w) = src.dim();
    let eps = 1e-9;
    if y < -eps || x < -eps || y > (h - 1) as f64 + eps || x > (w - 1) as f64 + eps {
        return T::zero();
    }
    let (y0, y1, ty) = axis_sample(y, h);
    let (x0, x1, tx) = axis_sample(x, w);
    let top = src[[y0, x0]] * T::lit(1.0 - tx) + src[[y0, x1]] * T::lit(tx);
    let bottom = src[[y1, x0]] * T::lit(1.0 - tx) + src[[y1, x1]] * T::lit(tx);
    top * T::lit(1.0 - ty) + bottom * T::lit(ty)
}

/// Draws augmentation parameters uniformly over their ranges.
pub fn sample_augment(seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentParams {
        hflip: rng.gen_bool(0.5),
        vflip: rng.gen_bool(0.5),
        scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        translate: [
            rng.gen_range(TRANSLATE_RANGE.0..=TRANSLATE_RANGE.1),
            rng.gen_range(TRANSLATE_RANGE.0..=TRANSLATE_RANGE.1),
        ],
    }
}
