//! Line-delimited JSON screen annotations.
//!
//! One object per line:
//! `{"image_id", "width", "height", "elements": [{"bbox": [x1,y1,x2,y2], "category"}], "ocr": [{"bbox", "text"}]}`.
//! Element and OCR indices are their positions in the lists. Linked files
//! add `"description"` and `"ocr_links"` to every element; the links are
//! read back and the descriptions rebuilt from them.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use apt_core::data::ScreenAnnotation;
use apt_core::geometry::{BBox, ElementAnnotation, LinkAssignment, OcrItem};
use serde::{Deserialize, Serialize};

use crate::error::{json_message, Result, ToolError};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    bbox: [f64; 4],
    category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ocr_links: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOcr {
    bbox: [f64; 4],
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScreen {
    image_id: String,
    width: u32,
    height: u32,
    elements: Vec<RawElement>,
    ocr: Vec<RawOcr>,
}

fn to_box(b: [f64; 4], field: &str) -> std::result::Result<BBox, String> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| match e {
        apt_core::Error::InvalidBox(m) => format!("{field}: {m}"),
        other => format!("{field}: {other}"),
    })
}

fn convert(raw: RawScreen) -> std::result::Result<ScreenAnnotation, String> {
    if raw.width == 0 || raw.height == 0 {
        return Err("width and height must be positive".into());
    }
    let (w, h) = (f64::from(raw.width), f64::from(raw.height));
    let mut elements = Vec::with_capacity(raw.elements.len());
    let mut links = Vec::with_capacity(raw.elements.len());
    for (i, e) in raw.elements.into_iter().enumerate() {
        let field = format!("elements[{i}].bbox");
        let bbox = to_box(e.bbox, &field)?;
        if !bbox.within(w, h) {
            return Err(format!("{field}: box outside the {}x{} image", raw.width, raw.height));
        }
        if e.category.is_empty() {
            return Err(format!("elements[{i}].category: empty"));
        }
        elements.push(ElementAnnotation { bbox, category: e.category, index: i });
        links.push(e.ocr_links);
    }
    let mut ocr = Vec::with_capacity(raw.ocr.len());
    for (i, o) in raw.ocr.into_iter().enumerate() {
        let field = format!("ocr[{i}].bbox");
        let bbox = to_box(o.bbox, &field)?;
        if !bbox.within(w, h) {
            return Err(format!("{field}: box outside the {}x{} image", raw.width, raw.height));
        }
        ocr.push(OcrItem { bbox, text: o.text, index: i });
    }
    let given = links.iter().filter(|l| l.is_some()).count();
    let links = if given == 0 {
        None
    } else if given == links.len() {
        let l: Vec<Vec<usize>> = links.into_iter().flatten().collect();
        Some(LinkAssignment::from_links(&ocr, &l).map_err(|e| format!("ocr_links: {e}"))?)
    } else {
        return Err("ocr_links: present on some elements but not all".into());
    };
    Ok(ScreenAnnotation { image_id: raw.image_id, width: raw.width, height: raw.height, elements, ocr, links })
}

/// Parses annotation text; `source` names the input in errors.
pub fn parse_annotations_str(text: &str, source: &str) -> Result<Vec<ScreenAnnotation>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ToolError::Parse { path: source.to_string(), line: line_no, message };
        let mut de = serde_json::Deserializer::from_str(line);
        let raw: RawScreen = serde_path_to_error::deserialize(&mut de).map_err(|e| err(json_message(e)))?;
        if !ids.insert(raw.image_id.clone()) {
            return Err(err(format!("image_id: duplicate {:?}", raw.image_id)));
        }
        out.push(convert(raw).map_err(err)?);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<ScreenAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    parse_annotations_str(&text, &path.display().to_string())
}

/// One JSON object, no trailing newline.
pub fn annotation_line(screen: &ScreenAnnotation) -> String {
    let raw = RawScreen {
        image_id: screen.image_id.clone(),
        width: screen.width,
        height: screen.height,
        elements: screen
            .elements
            .iter()
            .enumerate()
            .map(|(k, e)| RawElement {
                bbox: e.bbox.to_array(),
                category: e.category.clone(),
                description: screen.links.as_ref().map(|l| l.descriptions[k].clone()),
                ocr_links: screen.links.as_ref().map(|l| l.links[k].clone()),
            })
            .collect(),
        ocr: screen.ocr.iter().map(|o| RawOcr { bbox: o.bbox.to_array(), text: o.text.clone() }).collect(),
    };
    serde_json::to_string(&raw).expect("annotations serialize")
}

pub fn serialize_annotations(screens: &[ScreenAnnotation]) -> String {
    screens.iter().map(|s| annotation_line(s) + "\n").collect()
}

pub fn write_annotations(path: &Path, screens: &[ScreenAnnotation]) -> Result<()> {
    fs::write(path, serialize_annotations(screens)).map_err(|e| ToolError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"image_id":"a","width":100,"height":50,"elements":[{"bbox":[0,0,40,20],"category":"button"},{"bbox":[50,0,90,20],"category":"icon"}],"ocr":[{"bbox":[2,2,20,10],"text":"Buy"},{"bbox":[60,2,70,10],"text":"x"},{"bbox":[0,30,10,40],"text":"12:30"}]}"#;

    #[test]
    fn counts_are_echoed() {
        let s = parse_annotations_str(LINE, "t").unwrap();
        assert_eq!((s[0].elements.len(), s[0].ocr.len()), (2, 3));
        assert!(s[0].links.is_none());
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_annotations_str("", "t").unwrap().is_empty());
        assert!(parse_annotations_str("\n  \n", "t").unwrap().is_empty());
    }

    #[test]
    fn zero_area_box_names_line_and_field() {
        let text = format!("{LINE}\n{}", LINE.replace("[0,0,40,20]", "[0,0,0,5]").replace("\"a\"", "\"b\""));
        let e = parse_annotations_str(&text, "t").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("t:2:") && msg.contains("elements[0].bbox") && msg.contains("zero-area box"), "{msg}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn malformed_field_is_located() {
        let e = parse_annotations_str(&LINE.replace("\"width\":100", "\"width\":\"wide\""), "t").unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
        let e = parse_annotations_str(&LINE.replace(",\"height\":50", ""), "t").unwrap_err();
        assert!(e.to_string().contains("missing field `height`"), "{e}");
    }

    #[test]
    fn out_of_bounds_and_duplicates_fail() {
        assert!(parse_annotations_str(&LINE.replace("[50,0,90,20]", "[50,0,190,20]"), "t").is_err());
        let e = parse_annotations_str(&format!("{LINE}\n{LINE}"), "t").unwrap_err();
        assert!(e.to_string().contains(":2:") && e.to_string().contains("duplicate"));
    }

    #[test]
    fn round_trip_with_and_without_links() {
        let mut s = parse_annotations_str(LINE, "t").unwrap();
        assert_eq!(parse_annotations_str(&serialize_annotations(&s), "t").unwrap(), s);
        let l = apt_core::geometry::link_ocr(&s[0].elements, &s[0].ocr, 0.5, Default::default()).unwrap();
        s[0].links = Some(l);
        let text = serialize_annotations(&s);
        assert!(text.contains("\"description\":\"Buy\""));
        assert_eq!(parse_annotations_str(&text, "t").unwrap(), s);
    }
}
