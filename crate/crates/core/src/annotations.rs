//! Lesion annotation records in a DeepLesion-like CSV schema.
//!
//! Header (exact, one line):
//!
//! ```text
//! image_key,x1,y1,x2,y2,recist,long_mm,short_mm,organ,split,spacing_x,spacing_y,slice_mm
//! ```
//!
//! `recist` holds eight `;`-separated floats (long-axis endpoint pair, then
//! short-axis endpoint pair), `organ` is a code in `1..=8` and `split` is one
//! of `train`, `val`, `test`. Files are UTF-8 with LF line endings and `.` as
//! the decimal point.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER: &str =
    "image_key,x1,y1,x2,y2,recist,long_mm,short_mm,organ,split,spacing_x,spacing_y,slice_mm";

const COLUMNS: [&str; 13] = [
    "image_key",
    "x1",
    "y1",
    "x2",
    "y2",
    "recist",
    "long_mm",
    "short_mm",
    "organ",
    "split",
    "spacing_x",
    "spacing_y",
    "slice_mm",
];

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line 1: header must be `{HEADER}`, found `{found}`")]
    BadHeader { found: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    MalformedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    InvalidField {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("line {line}, column `{column}`: {reason}")]
    InvariantViolation {
        line: u64,
        column: &'static str,
        reason: String,
    },
    #[error("line {line}: unknown organ code {code}")]
    UnknownOrganCode { line: u64, code: i64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Body region of a lesion, in DeepLesion code order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Organ {
    Bone,
    Abdomen,
    Mediastinum,
    Liver,
    Lung,
    Kidney,
    SoftTissue,
    Pelvis,
}

impl Organ {
    pub const ALL: [Organ; 8] = [
        Organ::Bone,
        Organ::Abdomen,
        Organ::Mediastinum,
        Organ::Liver,
        Organ::Lung,
        Organ::Kidney,
        Organ::SoftTissue,
        Organ::Pelvis,
    ];

    pub fn from_code(code: i64) -> Option<Organ> {
        if (1..=8).contains(&code) {
            Some(Self::ALL[(code - 1) as usize])
        } else {
            None
        }
    }

    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::Bone => "bone",
            Organ::Abdomen => "abdomen",
            Organ::Mediastinum => "mediastinum",
            Organ::Liver => "liver",
            Organ::Lung => "lung",
            Organ::Kidney => "kidney",
            Organ::SoftTissue => "soft-tissue",
            Organ::Pelvis => "pelvis",
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

/// Lesion size range by long diameter: `< 10 mm`, `10..=30 mm`, `> 30 mm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn from_long_diameter(mm: f64) -> SizeBucket {
        if mm < 10.0 {
            SizeBucket::Small
        } else if mm <= 30.0 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

/// One annotated lesion on a key slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    /// `patient_study_series_slice` identifier.
    pub image_key: String,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    /// Long-axis endpoints then short-axis endpoints, `(x, y)` pairs in pixels.
    pub recist: [f64; 8],
    /// Long and short diameter in millimetres.
    pub diameters_mm: [f64; 2],
    pub organ: Organ,
    pub split: Split,
    pub pixel_spacing_mm: [f64; 2],
    pub slice_interval_mm: f64,
}

impl LesionRecord {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn long_diameter_mm(&self) -> f64 {
        self.diameters_mm[0]
    }

    pub fn size_bucket(&self) -> SizeBucket {
        size_bucket(self)
    }

    /// Checks the record invariants, returning the offending column.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let [x1, y1, x2, y2] = self.bbox;
        for (col, v) in [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)] {
            if !v.is_finite() {
                return Err((col, format!("non-finite coordinate {v}")));
            }
        }
        if x2 <= x1 {
            return Err(("x2", format!("x2 ({x2}) must exceed x1 ({x1})")));
        }
        if y2 <= y1 {
            return Err(("y2", format!("y2 ({y2}) must exceed y1 ({y1})")));
        }
        if self.recist.iter().any(|v| !v.is_finite()) {
            return Err(("recist", "non-finite endpoint".into()));
        }
        let [long, short] = self.diameters_mm;
        if !(short.is_finite() && short > 0.0) {
            return Err(("short_mm", format!("short diameter must be > 0, got {short}")));
        }
        if !(long.is_finite() && long >= short) {
            return Err((
                "long_mm",
                format!("long diameter ({long}) must be >= short diameter ({short})"),
            ));
        }
        for (col, v) in [
            ("spacing_x", self.pixel_spacing_mm[0]),
            ("spacing_y", self.pixel_spacing_mm[1]),
            ("slice_mm", self.slice_interval_mm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err((col, format!("spacing must be > 0, got {v}")));
            }
        }
        if self.image_key.is_empty() || self.image_key.contains([',', '\n', '\r', '"']) {
            return Err(("image_key", format!("invalid key `{}`", self.image_key)));
        }
        Ok(())
    }
}

fn parse_f64(line: u64, column: &'static str, s: &str) -> Result<f64, AnnotationError> {
    s.trim().parse::<f64>().map_err(|_| AnnotationError::InvalidField {
        line,
        column,
        value: s.to_string(),
    })
}

fn parse_row(line: u64, row: &csv::StringRecord) -> Result<LesionRecord, AnnotationError> {
    if row.len() != COLUMNS.len() {
        return Err(AnnotationError::MalformedRow {
            line,
            expected: COLUMNS.len(),
            found: row.len(),
        });
    }
    let num = |i: usize| parse_f64(line, COLUMNS[i], &row[i]);

    let recist_parts: Vec<&str> = row[5].split(';').collect();
    if recist_parts.len() != 8 {
        return Err(AnnotationError::InvalidField {
            line,
            column: "recist",
            value: row[5].to_string(),
        });
    }
    let mut recist = [0.0; 8];
    for (dst, part) in recist.iter_mut().zip(&recist_parts) {
        *dst = parse_f64(line, "recist", part)?;
    }

    let organ_code: i64 = row[8].trim().parse().map_err(|_| AnnotationError::InvalidField {
        line,
        column: "organ",
        value: row[8].to_string(),
    })?;
    let organ = Organ::from_code(organ_code).ok_or(AnnotationError::UnknownOrganCode {
        line,
        code: organ_code,
    })?;
    let split = row[9]
        .trim()
        .parse::<Split>()
        .map_err(|_| AnnotationError::InvalidField {
            line,
            column: "split",
            value: row[9].to_string(),
        })?;

    let record = LesionRecord {
        image_key: row[0].to_string(),
        bbox: [num(1)?, num(2)?, num(3)?, num(4)?],
        recist,
        diameters_mm: [num(6)?, num(7)?],
        organ,
        split,
        pixel_spacing_mm: [num(10)?, num(11)?],
        slice_interval_mm: num(12)?,
    };
    record
        .validate()
        .map_err(|(column, reason)| AnnotationError::InvariantViolation {
            line,
            column,
            reason,
        })?;
    Ok(record)
}

/// Parses an annotation CSV stream (header line first).
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<LesionRecord>, AnnotationError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let mut records = Vec::new();
    let mut row = csv::StringRecord::new();
    let mut header_seen = false;
    while rdr.read_record(&mut row)? {
        let line = row.position().map_or(0, |p| p.line());
        if !header_seen {
            let found = row.iter().collect::<Vec<_>>().join(",");
            if found != HEADER {
                return Err(AnnotationError::BadHeader { found });
            }
            header_seen = true;
            continue;
        }
        records.push(parse_row(line, &row)?);
    }
    if !header_seen {
        return Err(AnnotationError::BadHeader {
            found: String::new(),
        });
    }
    Ok(records)
}

pub fn parse_annotations_str(text: &str) -> Result<Vec<LesionRecord>, AnnotationError> {
    parse_annotations(text.as_bytes())
}

fn join_floats(values: &[f64], sep: &str) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Writes records in the annotation CSV schema. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_annotations<W: Write>(
    records: &[LesionRecord],
    mut writer: W,
) -> Result<(), AnnotationError> {
    writeln!(writer, "{HEADER}")?;
    for r in records {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{}",
            r.image_key,
            join_floats(&r.bbox, ","),
            join_floats(&r.recist, ";"),
            join_floats(&r.diameters_mm, ","),
            r.organ.code(),
            r.split.as_str(),
            r.pixel_spacing_mm[0],
            r.pixel_spacing_mm[1],
            r.slice_interval_mm,
        )?;
    }
    Ok(())
}

pub fn annotations_to_string(records: &[LesionRecord]) -> String {
    let mut buf = Vec::new();
    write_annotations(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 output")
}

/// Records partitioned by their split tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSets {
    pub train: Vec<LesionRecord>,
    pub val: Vec<LesionRecord>,
    pub test: Vec<LesionRecord>,
}

/// Partitions records by split tag, keeping input order within each part.
pub fn split_records(records: &[LesionRecord]) -> SplitSets {
    let mut out = SplitSets::default();
    for r in records {
        match r.split {
            Split::Train => out.train.push(r.clone()),
            Split::Val => out.val.push(r.clone()),
            Split::Test => out.test.push(r.clone()),
        }
    }
    out
}

pub fn size_bucket(record: &LesionRecord) -> SizeBucket {
    SizeBucket::from_long_diameter(record.long_diameter_mm())
}
