//! Synthetic CT phantoms: rectangular organs on air with planted elliptical
//! lesions, plus the matching annotation records.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{write_annotations, LesionRecord, Organ, Split};
use crate::anchors::Box;
use crate::eval::Detection;
use crate::io::{write_volume, IoError};
use crate::preprocess::Volume;

pub const AIR_HU: f64 = -1024.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place lesion {lesion} in organ region {region} after {MAX_PLACEMENT_ATTEMPTS} attempts")]
    InfeasiblePlacement { region: usize, lesion: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Write(String),
}

/// Rectangular organ `[x0, x1) x [y0, y1)` filled with a constant HU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganRegion {
    pub rect: [usize; 4],
    pub hu: f64,
    /// Organ code `1..=8`.
    pub organ: u8,
    /// Lesions planted in this region.
    pub lesions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(slices, height, width)`.
    pub dims: [usize; 3],
    /// `(x, y, z)` mm.
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub organs: Vec<OrganRegion>,
    pub lesion_hu_delta: f64,
    /// Range of lesion diameters in mm.
    pub size_range_mm: [f64; 2],
    pub seed: u64,
    /// Patient number used in image keys.
    #[serde(default = "default_patient")]
    pub patient: u32,
}

fn default_spacing() -> [f64; 3] {
    [0.8, 0.8, 2.0]
}

fn default_patient() -> u32 {
    1
}

impl PhantomSpec {
    /// A 12-slice 128x128 abdomen-like phantom with four organs and nine
    /// lesions between 4 and 30 mm.
    pub fn example(seed: u64) -> Self {
        let region = |rect, hu, organ, lesions| OrganRegion {
            rect,
            hu,
            organ,
            lesions,
        };
        Self {
            dims: [12, 128, 128],
            spacing_mm: default_spacing(),
            organs: vec![
                region([8, 10, 60, 70], -700.0, 5, 3),
                region([66, 10, 120, 60], 60.0, 4, 3),
                region([10, 78, 58, 118], 35.0, 6, 2),
                region([66, 70, 118, 120], 700.0, 1, 1),
            ],
            lesion_hu_delta: 80.0,
            size_range_mm: [4.0, 30.0],
            seed,
            patient: 1,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let [s, h, w] = self.dims;
        if s == 0 || h == 0 || w == 0 {
            return bad(format!("dims {:?} must be positive", self.dims));
        }
        if !self.spacing_mm.iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("spacing must be positive".into());
        }
        let [lo, hi] = self.size_range_mm;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("size range {:?} must satisfy 0 < lo <= hi", self.size_range_mm));
        }
        if !self.lesion_hu_delta.is_finite() || self.lesion_hu_delta == 0.0 {
            return bad("lesion_hu_delta must be finite and non-zero".into());
        }
        for (i, o) in self.organs.iter().enumerate() {
            let [x0, y0, x1, y1] = o.rect;
            if !(x0 < x1 && y0 < y1 && x1 <= w && y1 <= h) {
                return bad(format!("organ region {i}: rect {:?} outside {w}x{h} frame", o.rect));
            }
            if Organ::from_code(o.organ as i64).is_none() {
                return bad(format!("organ region {i}: unknown organ code {}", o.organ));
            }
            if !o.hu.is_finite() {
                return bad(format!("organ region {i}: non-finite HU"));
            }
            for (j, p) in self.organs[..i].iter().enumerate() {
                let [a0, b0, a1, b1] = p.rect;
                if x0 < a1 && a0 < x1 && y0 < b1 && b0 < y1 {
                    return bad(format!("organ regions {j} and {i} overlap"));
                }
            }
        }
        Ok(())
    }
}

/// A planted lesion: ellipse centre and semi-axes in pixels on one slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedLesion {
    pub slice: usize,
    pub center: (usize, usize),
    /// Semi-axes `(along x, along y)` in pixels.
    pub semi_axes: (usize, usize),
    pub region: usize,
}

impl PlantedLesion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dx = (col as f64 - self.center.0 as f64) / self.semi_axes.0 as f64;
        let dy = (row as f64 - self.center.1 as f64) / self.semi_axes.1 as f64;
        dx * dx + dy * dy <= 1.0
    }

    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub fn bounds(&self) -> [usize; 4] {
        let (cx, cy) = self.center;
        let (a, b) = self.semi_axes;
        [cx - a, cy - b, cx + a, cy + b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume<f64>,
    pub records: Vec<LesionRecord>,
    pub lesions: Vec<PlantedLesion>,
}

fn image_key(patient: u32, slice: usize) -> String {
    format!("{patient:06}_01_01_{slice:03}")
}

/// Renders the phantom. Identical specs give bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, SynthError> {
    spec.validate()?;
    let [ns, nh, nw] = spec.dims;
    let [sx, sy, sz] = spec.spacing_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut voxels = Array3::from_elem((ns, nh, nw), AIR_HU);
    for o in &spec.organs {
        let [x0, y0, x1, y1] = o.rect;
        voxels
            .slice_mut(ndarray::s![.., y0..y1, x0..x1])
            .fill(o.hu);
    }

    let mut lesions: Vec<PlantedLesion> = Vec::new();
    let mut records = Vec::new();
    let [lo, hi] = spec.size_range_mm;
    for (ri, region) in spec.organs.iter().enumerate() {
        let [x0, y0, x1, y1] = region.rect;
        for li in 0..region.lesions {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let d1 = rng.gen_range(lo..=hi);
                let d2 = rng.gen_range(lo..=hi);
                let horizontal = rng.gen_bool(0.5);
                let (long, short) = if d1 >= d2 { (d1, d2) } else { (d2, d1) };
                let (dx_mm, dy_mm) = if horizontal { (long, short) } else { (short, long) };
                let a = ((dx_mm / 2.0 / sx).round() as usize).max(1);
                let b = ((dy_mm / 2.0 / sy).round() as usize).max(1);
                let slice = rng.gen_range(0..ns);
                if x0 + 2 * a + 1 > x1 || y0 + 2 * b + 1 > y1 {
                    continue;
                }
                let cx = rng.gen_range(x0 + a..=x1 - 1 - a);
                let cy = rng.gen_range(y0 + b..=y1 - 1 - b);
                let cand = PlantedLesion {
                    slice,
                    center: (cx, cy),
                    semi_axes: (a, b),
                    region: ri,
                };
                let [cx0, cy0, cx1, cy1] = cand.bounds();
                let clash = lesions.iter().any(|l| {
                    let [lx0, ly0, lx1, ly1] = l.bounds();
                    l.slice == slice && cx0 <= lx1 + 1 && lx0 <= cx1 + 1 && cy0 <= ly1 + 1 && ly0 <= cy1 + 1
                });
                if !clash {
                    placed = Some(cand);
                    break;
                }
            }
            let lesion = placed.ok_or(SynthError::InfeasiblePlacement { region: ri, lesion: li })?;
            let split = match rng.gen::<f64>() {
                u if u < 0.70 => Split::Train,
                u if u < 0.85 => Split::Val,
                _ => Split::Test,
            };
            let [bx0, by0, bx1, by1] = lesion.bounds();
            let value = region.hu + spec.lesion_hu_delta;
            for r in by0..=by1 {
                for c in bx0..=bx1 {
                    if lesion.contains(r, c) {
                        voxels[[lesion.slice, r, c]] = value;
                    }
                }
            }

            let (cx, cy) = (lesion.center.0 as f64, lesion.center.1 as f64);
            let (a, b) = (lesion.semi_axes.0 as f64, lesion.semi_axes.1 as f64);
            let x_axis = [cx - a, cy, cx + a, cy];
            let y_axis = [cx, cy - b, cx, cy + b];
            let (x_mm, y_mm) = (2.0 * a * sx, 2.0 * b * sy);
            let (long_axis, short_axis, diameters) = if x_mm >= y_mm {
                (x_axis, y_axis, [x_mm, y_mm])
            } else {
                (y_axis, x_axis, [y_mm, x_mm])
            };
            let mut recist = [0.0; 8];
            recist[..4].copy_from_slice(&long_axis);
            recist[4..].copy_from_slice(&short_axis);
            records.push(LesionRecord {
                image_key: image_key(spec.patient, lesion.slice),
                bbox: [bx0 as f64, by0 as f64, bx1 as f64, by1 as f64],
                recist,
                diameters_mm: diameters,
                organ: Organ::from_code(region.organ as i64).expect("validated"),
                split,
                pixel_spacing_mm: [sx, sy],
                slice_interval_mm: sz,
            });
            lesions.push(lesion);
        }
    }

    let volume = Volume::new(voxels, spec.spacing_mm).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(Phantom {
        volume,
        records,
        lesions,
    })
}

/// Detections that reproduce every annotated box with score 1.
pub fn oracle_detections(records: &[LesionRecord]) -> Vec<Detection> {
    records
        .iter()
        .map(|r| Detection::new(r.image_key.clone(), Box::from_array(r.bbox), 1.0))
        .collect()
}

/// Writes `volume.json` + `volume.raw`, `annotations.csv` and
/// `oracle_detections.jsonl` into `dir`.
pub fn write_phantom(dir: &Path, phantom: &Phantom) -> Result<(), SynthError> {
    let io_err = |e: std::io::Error| SynthError::Write(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    write_volume(&dir.join("volume.json"), &phantom.volume)?;
    let csv = std::fs::File::create(dir.join("annotations.csv")).map_err(io_err)?;
    write_annotations(&phantom.records, std::io::BufWriter::new(csv)).map_err(|e| SynthError::Write(e.to_string()))?;
    let mut jsonl = String::new();
    for d in oracle_detections(&phantom.records) {
        jsonl.push_str(&d.to_json_line());
        jsonl.push('\n');
    }
    std::fs::write(dir.join("oracle_detections.jsonl"), jsonl).map_err(io_err)?;
    Ok(())
}
