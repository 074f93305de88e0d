//! Line-delimited JSON detections: `{"image_id", "bbox": [x1,y1,x2,y2], "category", "score"}`.

use std::fs;
use std::path::Path;

use apt_core::evaluator::DetectionRecord;
use apt_core::geometry::BBox;
use serde::{Deserialize, Serialize};

use crate::error::{json_message, Result, ToolError};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    image_id: String,
    bbox: [f64; 4],
    category: String,
    score: f64,
}

pub fn parse_detections_str(text: &str, source: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ToolError::Parse { path: source.to_string(), line: n + 1, message };
        let mut de = serde_json::Deserializer::from_str(line);
        let raw: RawDetection = serde_path_to_error::deserialize(&mut de).map_err(|e| err(json_message(e)))?;
        if !raw.score.is_finite() {
            return Err(err("score: not finite".into()));
        }
        let [x1, y1, x2, y2] = raw.bbox;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| err(format!("bbox: {e}")))?;
        out.push(DetectionRecord { image_id: raw.image_id, bbox, category: raw.category, score: raw.score });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    parse_detections_str(&text, &path.display().to_string())
}

pub fn serialize_detections(dets: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for d in dets {
        let raw = RawDetection { image_id: d.image_id.clone(), bbox: d.bbox.to_array(), category: d.category.clone(), score: d.score };
        out.push_str(&serde_json::to_string(&raw).expect("detections serialize"));
        out.push('\n');
    }
    out
}

pub fn write_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    fs::write(path, serialize_detections(dets)).map_err(|e| ToolError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "{\"image_id\":\"a\",\"bbox\":[0.0,0.0,10.0,5.5],\"category\":\"icon\",\"score\":0.25}\n";
        let d = parse_detections_str(text, "d").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(serialize_detections(&d), text);
    }

    #[test]
    fn bad_lines_are_located() {
        let e = parse_detections_str("\n{\"image_id\":\"a\",\"bbox\":[0,0,0,5],\"category\":\"icon\",\"score\":1}", "d").unwrap_err();
        assert!(e.to_string().starts_with("d:2:"), "{e}");
        assert!(parse_detections_str("{\"image_id\":\"a\",\"bbox\":[0,0,1],\"category\":\"icon\",\"score\":1}", "d").is_err());
    }
}
