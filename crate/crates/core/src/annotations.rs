//! Per-frame pedestrian point annotations and their CSV form.
//!
//! The CSV has the header `frame,id,x,y`; `frame` and `id` are non-negative
//! integers, `x`/`y` are map-space coordinates.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame: u32,
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// Annotation records with unique `(frame, id)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationStream {
    records: Vec<Annotation>,
}

impl AnnotationStream {
    pub fn new(records: Vec<Annotation>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !r.x.is_finite() || !r.y.is_finite() {
                return Err(Error::Format(format!(
                    "non-finite coordinate for frame {}, id {}",
                    r.frame, r.id
                )));
            }
            if !seen.insert((r.frame, r.id)) {
                return Err(Error::DuplicateAnnotation {
                    frame: r.frame,
                    id: r.id,
                });
            }
        }
        Ok(AnnotationStream { records })
    }

    pub fn records(&self) -> &[Annotation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One past the largest frame index, or 0 for an empty stream.
    pub fn frame_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.frame as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Checks every record against a `width × height` map.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for r in &self.records {
            if !(r.x >= 0.0 && r.x < width as f64 && r.y >= 0.0 && r.y < height as f64) {
                return Err(Error::OutOfBounds {
                    frame: r.frame,
                    id: r.id,
                    x: r.x,
                    y: r.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["frame", "id", "x", "y"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Format(format!(
                "annotation header must be `frame,id,x,y`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Annotation>, _>>()?;
        Self::new(records)
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_csv_reader(bytes)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv_to(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(["frame", "id", "x", "y"])?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }
}
