//! Normalized boxes, IoU, centroid conversion, and the two text formats
//! (per-image annotation files and the centroid CSV exported by the
//! annotation macro).

use super::AuriBoxError;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Ear side; doubles as the detector class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left = 0,
    Right = 1,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn class_id(&self) -> usize {
        *self as usize
    }

    pub fn from_class_id(id: usize) -> Option<Side> {
        match id {
            0 => Some(Side::Left),
            1 => Some(Side::Right),
            _ => None,
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" | "0" => Some(Side::Left),
            "right" | "r" | "1" => Some(Side::Right),
            _ => None,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Axis-aligned box in fractions of image width/height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBox {
    pub side: Side,
    pub x_center: f64,
    pub y_center: f64,
    pub width: f64,
    pub height: f64,
    /// Prediction confidence; 1.0 for ground truth.
    pub confidence: f64,
}

impl NormalizedBox {
    pub fn new(
        side: Side,
        x_center: f64,
        y_center: f64,
        width: f64,
        height: f64,
        confidence: f64,
    ) -> Result<NormalizedBox, AuriBoxError> {
        let b = NormalizedBox {
            side,
            x_center,
            y_center,
            width,
            height,
            confidence,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AuriBoxError> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(AuriBoxError::InvalidBox("non-positive size".into()));
        }
        let (x0, y0, x1, y1) = self.corners();
        const SLACK: f64 = 1e-9;
        if x0 < -SLACK || y0 < -SLACK || x1 > 1.0 + SLACK || y1 > 1.0 + SLACK {
            return Err(AuriBoxError::InvalidBox(format!(
                "box [{x0:.4},{y0:.4},{x1:.4},{y1:.4}] exceeds the unit square"
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(AuriBoxError::InvalidBox("confidence outside [0,1]".into()));
        }
        Ok(())
    }

    /// (x0, y0, x1, y1) corners in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x_center - self.width / 2.0,
            self.y_center - self.height / 2.0,
            self.x_center + self.width / 2.0,
            self.y_center + self.height / 2.0,
        )
    }

    /// Center in pixel coordinates of an `img_w`×`img_h` image.
    pub fn center_px(&self, img_w: usize, img_h: usize) -> (f64, f64) {
        (self.x_center * img_w as f64, self.y_center * img_h as f64)
    }
}

/// Convert a pixel centroid to a fixed-size normalized box. Boxes that would
/// stick out past the border are shifted inward (size preserved).
pub fn centroid_to_box(
    cx_px: f64,
    cy_px: f64,
    img_w: usize,
    img_h: usize,
    box_w_px: f64,
    box_h_px: f64,
    side: Side,
) -> Result<NormalizedBox, AuriBoxError> {
    let (w, h) = (img_w as f64, img_h as f64);
    if !(0.0..w).contains(&cx_px) || !(0.0..h).contains(&cy_px) {
        return Err(AuriBoxError::CentroidOutside { x: cx_px, y: cy_px });
    }
    if box_w_px <= 0.0 || box_h_px <= 0.0 || box_w_px > w || box_h_px > h {
        return Err(AuriBoxError::BoxTooLarge {
            w: box_w_px,
            h: box_h_px,
            img_w,
            img_h,
        });
    }
    let cx = cx_px.clamp(box_w_px / 2.0, w - box_w_px / 2.0);
    let cy = cy_px.clamp(box_h_px / 2.0, h - box_h_px / 2.0);
    NormalizedBox::new(side, cx / w, cy / h, box_w_px / w, box_h_px / h, 1.0)
}

/// Intersection-over-union of two normalized boxes (class-agnostic).
pub fn iou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let union = a.width * a.height + b.width * b.height - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---------------------------------------------------------------------------
// Annotation text formats
// ---------------------------------------------------------------------------

/// Format one annotation line: `<class> <x_center> <y_center> <width> <height>`.
pub fn format_yolo_line(b: &NormalizedBox) -> String {
    format!(
        "{} {:.6} {:.6} {:.6} {:.6}",
        b.side.class_id(),
        b.x_center,
        b.y_center,
        b.width,
        b.height
    )
}

pub fn parse_yolo_line(line: &str) -> Result<NormalizedBox, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, got {}", fields.len()));
    }
    let class: usize = fields[0].parse().map_err(|_| "bad class id".to_string())?;
    let side = Side::from_class_id(class).ok_or_else(|| format!("unknown class {class}"))?;
    let nums: Vec<f64> = fields[1..]
        .iter()
        .map(|f| f.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| "bad coordinate".to_string())?;
    NormalizedBox::new(side, nums[0], nums[1], nums[2], nums[3], 1.0)
        .map_err(|e| e.to_string())
}

/// Write a per-image `.txt` annotation file (one line per box; empty file for
/// negative images).
pub fn write_yolo_file(path: &Path, boxes: &[NormalizedBox]) -> Result<(), AuriBoxError> {
    let mut f = fs::File::create(path)?;
    for b in boxes {
        writeln!(f, "{}", format_yolo_line(b))?;
    }
    Ok(())
}

pub fn read_yolo_file(path: &Path) -> Result<Vec<NormalizedBox>, AuriBoxError> {
    let text = fs::read_to_string(path).map_err(|_| {
        AuriBoxError::MissingAnnotation(path.display().to_string())
    })?;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        boxes.push(parse_yolo_line(line).map_err(|msg| AuriBoxError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        })?);
    }
    Ok(boxes)
}

/// One centroid annotation: `image_id,side,x_px,y_px`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidRow {
    pub image_id: String,
    pub side: Side,
    pub x_px: f64,
    pub y_px: f64,
}

pub fn write_centroid_csv(path: &Path, rows: &[CentroidRow]) -> Result<(), AuriBoxError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "image_id,side,x_px,y_px")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.image_id, r.side.key(), r.x_px, r.y_px)?;
    }
    Ok(())
}

pub fn read_centroid_csv(path: &Path) -> Result<Vec<CentroidRow>, AuriBoxError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(AuriBoxError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let side = Side::parse(fields[1]).ok_or_else(|| AuriBoxError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("unknown side {}", fields[1]),
        })?;
        let x_px = fields[2].parse().map_err(|_| AuriBoxError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: "bad x".into(),
        })?;
        let y_px = fields[3].parse().map_err(|_| AuriBoxError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: "bad y".into(),
        })?;
        rows.push(CentroidRow {
            image_id: fields[0].to_string(),
            side,
            x_px,
            y_px,
        });
    }
    Ok(rows)
}
