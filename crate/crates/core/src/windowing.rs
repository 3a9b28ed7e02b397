//! Hounsfield-unit windowing and the multi-window intensity stack.
//!
//! A window is a `(level, width)` pair. HU values in
//! `[level - width/2, level + width/2]` map linearly onto `[0, 255]`; values
//! outside saturate. Output stays floating point.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, ArrayView2, Zip};
use rayon::prelude::*;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("window width must be > 0, got {0}")]
    NonPositiveWidth(f64),
    #[error("window set is empty")]
    EmptyWindowSet,
    #[error("expected {expected} slices, got {found}")]
    SliceCount { expected: usize, found: usize },
    #[error("slice shapes differ: {first:?} vs {other:?}")]
    ShapeMismatch {
        first: (usize, usize),
        other: (usize, usize),
    },
    #[error("line {line}: expected `level,width`, found `{text}`")]
    Parse { line: usize, text: String },
}

/// Display window centred on `level` spanning `width` HU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow<T> {
    level: T,
    width: T,
}

impl<T: Scalar> HuWindow<T> {
    pub fn new(level: T, width: T) -> Result<Self, WindowError> {
        if !(width > T::zero()) || !level.is_finite() || !width.is_finite() {
            return Err(WindowError::NonPositiveWidth(width.as_f64()));
        }
        Ok(Self { level, width })
    }

    pub fn level(&self) -> T {
        self.level
    }

    pub fn width(&self) -> T {
        self.width
    }

    /// Lowest HU of the display range.
    pub fn lower(&self) -> T {
        self.level - self.width / T::lit(2.0)
    }

    /// Highest HU of the display range.
    pub fn upper(&self) -> T {
        self.level + self.width / T::lit(2.0)
    }

    /// Maps a single HU value to `[0, 255]`.
    #[inline]
    pub fn map(&self, hu: T) -> T {
        let t = (hu - self.lower()) / self.width;
        t.max(T::zero()).min(T::one()) * T::lit(255.0)
    }
}

impl<T: Scalar> fmt::Display for HuWindow<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.level, self.width)
    }
}

impl<T: Scalar> FromStr for HuWindow<T> {
    type Err = WindowError;

    /// Parses `level,width`.
    fn from_str(s: &str) -> Result<Self, WindowError> {
        let err = || WindowError::Parse {
            line: 1,
            text: s.to_string(),
        };
        let (l, w) = s.split_once(',').ok_or_else(err)?;
        let level: f64 = l.trim().parse().map_err(|_| err())?;
        let width: f64 = w.trim().parse().map_err(|_| err())?;
        HuWindow::new(T::lit(level), T::lit(width))
    }
}

/// Non-empty ordered list of windows. Order fixes the view order of
/// [`multi_intensity_stack`].
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet<T> {
    windows: Vec<HuWindow<T>>,
}

impl<T: Scalar> WindowSet<T> {
    pub fn new(windows: Vec<HuWindow<T>>) -> Result<Self, WindowError> {
        if windows.is_empty() {
            return Err(WindowError::EmptyWindowSet);
        }
        Ok(Self { windows })
    }

    pub fn windows(&self) -> &[HuWindow<T>] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Reads one `level,width` pair per line. Blank lines and `#` comments
    /// are skipped.
    pub fn parse_config(text: &str) -> Result<Self, WindowError> {
        let mut windows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let w = line.parse::<HuWindow<T>>().map_err(|e| match e {
                WindowError::Parse { text, .. } => WindowError::Parse { line: i + 1, text },
                other => other,
            })?;
            windows.push(w);
        }
        Self::new(windows)
    }
}

/// The five organ windows: bone, lung, mediastinum, abdomen, soft tissue.
pub fn default_window_set<T: Scalar>() -> WindowSet<T> {
    const PAIRS: [(f64, f64); 5] = [
        (400.0, 2000.0),
        (-600.0, 1500.0),
        (50.0, 350.0),
        (30.0, 150.0),
        (50.0, 400.0),
    ];
    WindowSet {
        windows: PAIRS
            .iter()
            .map(|&(l, w)| HuWindow {
                level: T::lit(l),
                width: T::lit(w),
            })
            .collect(),
    }
}

/// The single wide window commonly used when no organ windows are applied.
pub fn wide_window<T: Scalar>() -> HuWindow<T> {
    HuWindow {
        level: T::lit(1024.0),
        width: T::lit(4096.0),
    }
}

/// Applies `w` to every pixel of `slice`.
pub fn apply_window<T: Scalar>(slice: ArrayView2<'_, T>, w: &HuWindow<T>) -> Array2<T> {
    slice.mapv(|hu| w.map(hu))
}

/// Builds the `(views, 3, H, W)` stack where view `v`, channel `c` is
/// `slices[c]` under window `v`.
///
/// `slices` are the inferior neighbour, key slice and superior neighbour.
pub fn multi_intensity_stack<T: Scalar>(
    slices: &[ArrayView2<'_, T>],
    ws: &WindowSet<T>,
) -> Result<Array4<T>, WindowError> {
    if slices.len() != 3 {
        return Err(WindowError::SliceCount {
            expected: 3,
            found: slices.len(),
        });
    }
    let first = slices[0].dim();
    for s in &slices[1..] {
        if s.dim() != first {
            return Err(WindowError::ShapeMismatch {
                first,
                other: s.dim(),
            });
        }
    }
    let (h, w) = first;
    let mut out = Array4::<T>::zeros((ws.len(), 3, h, w));
    out.outer_iter_mut()
        .into_par_iter()
        .zip(ws.windows.par_iter())
        .for_each(|(mut view, win)| {
            for (c, src) in slices.iter().enumerate() {
                Zip::from(view.slice_mut(s![c, .., ..]))
                    .and(src)
                    .for_each(|o, &hu| *o = win.map(hu));
            }
        });
    Ok(out)
}
