//! Line-oriented text formats shared by the detector and the evaluator.
//!
//! Detection dump: `video_id,frame_index,class_id,score,x1,y1,x2,y2`
//! Annotations:    `video_id,frame_index,class_id,instance_id,x1,y1,x2,y2`
//!
//! Blank lines and lines starting with `#` are ignored. Floats are written in
//! shortest round-trip form so a write/read cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::records::{Detection, GroundTruthInstance};

pub const DETECTION_HEADER: &str = "# video_id,frame_index,class_id,score,x1,y1,x2,y2";
pub const ANNOTATION_HEADER: &str = "# video_id,frame_index,class_id,instance_id,x1,y1,x2,y2";

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::with_capacity(64 * (dets.len() + 1));
    out.push_str(DETECTION_HEADER);
    out.push('\n');
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.to_array();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.video_id, d.frame_index, d.class_id, d.score, x1, y1, x2, y2
        );
    }
    out
}

pub fn format_annotations(gts: &[GroundTruthInstance]) -> String {
    let mut out = String::with_capacity(64 * (gts.len() + 1));
    out.push_str(ANNOTATION_HEADER);
    out.push('\n');
    for g in gts {
        let [x1, y1, x2, y2] = g.bbox.to_array();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            g.video_id, g.frame_index, g.class_id, g.instance_id, x1, y1, x2, y2
        );
    }
    out
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    parts: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn split(path: &'a Path, line: usize, text: &'a str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 8 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 8 fields, found {}", parts.len()),
            });
        }
        Ok(Self { path, line, parts })
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn int(&self, i: usize) -> Result<u32> {
        self.parts[i]
            .parse()
            .map_err(|e| self.err(format!("field {}: {e}", i + 1)))
    }

    fn float(&self, i: usize) -> Result<f64> {
        self.parts[i]
            .parse()
            .map_err(|e| self.err(format!("field {}: {e}", i + 1)))
    }

    fn bbox(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.float(4)?, self.float(5)?, self.float(6)?, self.float(7)?)
            .map_err(|e| self.err(e.to_string()))
    }
}

fn records<'a>(text: &'a str) -> impl Iterator<Item = (usize, &'a str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<Detection>> {
    records(text)
        .map(|(line, l)| {
            let f = Fields::split(path, line, l)?;
            Detection::new(f.int(0)?, f.int(1)?, f.bbox()?, f.int(2)?, f.float(3)?)
                .map_err(|e| f.err(e.to_string()))
        })
        .collect()
}

pub fn parse_annotations(path: &Path, text: &str) -> Result<Vec<GroundTruthInstance>> {
    records(text)
        .map(|(line, l)| {
            let f = Fields::split(path, line, l)?;
            Ok(GroundTruthInstance {
                video_id: f.int(0)?,
                frame_index: f.int(1)?,
                class_id: f.int(2)?,
                instance_id: f.int(3)?,
                bbox: f.bbox()?,
            })
        })
        .collect()
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(path, &text)
}

pub fn read_annotations(path: &Path) -> Result<Vec<GroundTruthInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(path, &text)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn write_annotations(path: &Path, gts: &[GroundTruthInstance]) -> Result<()> {
    fs::write(path, format_annotations(gts)).map_err(|e| Error::io(path, e))
}
