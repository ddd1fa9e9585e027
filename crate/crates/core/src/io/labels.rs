use std::fs;
use std::path::Path;

use crate::data::LabelRecord;
use crate::error::{Error, Result};

/// Parses `class_id cx cy w h` lines; blank lines are skipped. `source`
/// names the input in error messages.
pub fn parse_yolo_labels(text: &str, source: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            msg,
        };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("class id `{}` is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 4];
        for (k, name) in ["cx", "cy", "w", "h"].into_iter().enumerate() {
            let x: f64 = fields[k + 1]
                .parse()
                .map_err(|_| parse_err(format!("{name} `{}` is not a number", fields[k + 1])))?;
            let ok = if k < 2 { (0.0..=1.0).contains(&x) } else { x > 0.0 && x <= 1.0 };
            if !ok {
                let field = match k {
                    0 => "cx",
                    1 => "cy",
                    2 => "width",
                    _ => "height",
                };
                return Err(Error::OutOfRange {
                    path: source.to_string(),
                    line: line_no,
                    field,
                    value: x,
                });
            }
            v[k] = x;
        }
        let rec = LabelRecord {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_yolo_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_yolo_labels(&text, &path.display().to_string())
}

/// One line per record with six decimals.
pub fn format_yolo_labels(labels: &[LabelRecord]) -> String {
    labels
        .iter()
        .map(|l| format!("{} {:.6} {:.6} {:.6} {:.6}\n", l.class_id, l.cx, l.cy, l.w, l.h))
        .collect()
}

pub fn write_yolo_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    fs::write(path, format_yolo_labels(labels)).map_err(|e| Error::io(path, e))
}
