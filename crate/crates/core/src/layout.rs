//! Proxy layouts: the scene plus per-instance boxes and reference modalities
//! produced by a language model, and the prompt that asks for them.
//!
//! Wire format (JSON):
//!
//! ```json
//! {
//!   "scene": "a dog on grass wearing a red hat",
//!   "instances": [
//!     {"desc": "a dog", "bbox": [0.1, 0.3, 0.7, 0.95], "modality": "image"},
//!     {"desc": "a red hat", "bbox": [0.3, 0.2, 0.5, 0.35], "modality": "text"}
//!   ]
//! }
//! ```
//!
//! Boxes are `[x1, y1, x2, y2]` in normalized coordinates with the origin at
//! the top-left corner. Coordinates within [`CLAMP_MARGIN`] of the unit
//! interval are clamped on parse; anything further out is rejected.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CLAMP_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    ImageAndText,
}

impl Modality {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(Modality::Text),
            "image" => Some(Modality::Image),
            "image_and_text" => Some(Modality::ImageAndText),
            _ => None,
        }
    }
}

/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutInstance {
    #[serde(rename = "desc")]
    pub description: String,
    pub bbox: BBox,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyLayout {
    pub scene: String,
    pub instances: Vec<LayoutInstance>,
}

/// Names of the checks reported by [`validate_layout`] and [`parse_layout`].
pub mod rules {
    pub const SCENE_NONEMPTY: &str = "scene_nonempty";
    pub const INSTANCES_NONEMPTY: &str = "instances_nonempty";
    pub const DESC_NONEMPTY: &str = "desc_nonempty";
    pub const BBOX_FINITE: &str = "bbox_finite";
    pub const X_IN_UNIT: &str = "x_in_unit";
    pub const Y_IN_UNIT: &str = "y_in_unit";
    pub const X_ORDER: &str = "x1<x2";
    pub const Y_ORDER: &str = "y1<y2";
    // schema-level, only produced while parsing
    pub const NOT_OBJECT: &str = "document_object";
    pub const SCENE_FIELD: &str = "scene_string";
    pub const INSTANCES_FIELD: &str = "instances_array";
    pub const INSTANCE_OBJECT: &str = "instance_object";
    pub const DESC_FIELD: &str = "desc_string";
    pub const BBOX_FIELD: &str = "bbox_four_numbers";
    pub const MODALITY_FIELD: &str = "modality_known";
}

/// One failed check. `instance` is `None` for scene-level rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub instance: Option<usize>,
    pub rule: &'static str,
}

impl Violation {
    fn scene(rule: &'static str) -> Self {
        Self {
            instance: None,
            rule,
        }
    }

    fn at(i: usize, rule: &'static str) -> Self {
        Self {
            instance: Some(i),
            rule,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instance {
            Some(i) => write!(f, "instance {i}: {}", self.rule),
            None => write!(f, "layout: {}", self.rule),
        }
    }
}

/// Fills the fixed prompt template. Multiple captions are joined with `"; "`.
pub fn build_prompt(query_captions: &[impl AsRef<str>], relative_caption: &str) -> Result<String> {
    if query_captions.is_empty() {
        return Err(Error::Argument("no query caption given".into()));
    }
    if query_captions.iter().any(|c| c.as_ref().trim().is_empty()) {
        return Err(Error::Argument("empty query caption".into()));
    }
    if relative_caption.trim().is_empty() {
        return Err(Error::Argument("empty relative caption".into()));
    }
    let caption = query_captions
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join("; ");
    Ok(format!(
        "Given an image of {caption}, we show {relative_caption}"
    ))
}

/// Checks every layout invariant; an empty result means the layout is valid.
pub fn validate_layout(l: &ProxyLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    if l.scene.trim().is_empty() {
        out.push(Violation::scene(rules::SCENE_NONEMPTY));
    }
    if l.instances.is_empty() {
        out.push(Violation::scene(rules::INSTANCES_NONEMPTY));
    }
    for (i, inst) in l.instances.iter().enumerate() {
        if inst.description.trim().is_empty() {
            out.push(Violation::at(i, rules::DESC_NONEMPTY));
        }
        let b = inst.bbox;
        if ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite()) {
            out.push(Violation::at(i, rules::BBOX_FINITE));
            continue;
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(b.x1) && unit(b.x2)) {
            out.push(Violation::at(i, rules::X_IN_UNIT));
        }
        if !(unit(b.y1) && unit(b.y2)) {
            out.push(Violation::at(i, rules::Y_IN_UNIT));
        }
        if b.x1 >= b.x2 {
            out.push(Violation::at(i, rules::X_ORDER));
        }
        if b.y1 >= b.y2 {
            out.push(Violation::at(i, rules::Y_ORDER));
        }
    }
    out
}

fn clamp_coord(v: f64) -> f64 {
    if (-CLAMP_MARGIN..0.0).contains(&v) {
        0.0
    } else if v > 1.0 && v <= 1.0 + CLAMP_MARGIN {
        1.0
    } else {
        v
    }
}

/// Parses a layout document, clamps slight overshoots, and validates it.
///
/// Syntax errors are reported with their byte offset. Schema and invariant
/// failures are all collected into a single [`Error::Validation`].
pub fn parse_layout(raw: &str) -> Result<ProxyLayout> {
    let doc: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut violations = Vec::new();
    let layout = read_layout(&doc, &mut violations);
    if let Some(l) = &layout {
        violations.extend(validate_layout(l));
    }
    match layout {
        Some(l) if violations.is_empty() => Ok(l),
        _ => Err(Error::Validation(
            violations.iter().map(ToString::to_string).collect(),
        )),
    }
}

fn read_layout(doc: &Value, violations: &mut Vec<Violation>) -> Option<ProxyLayout> {
    let Some(obj) = doc.as_object() else {
        violations.push(Violation::scene(rules::NOT_OBJECT));
        return None;
    };
    let scene = obj.get("scene").and_then(Value::as_str);
    if scene.is_none() {
        violations.push(Violation::scene(rules::SCENE_FIELD));
    }
    let Some(raw_instances) = obj.get("instances").and_then(Value::as_array) else {
        violations.push(Violation::scene(rules::INSTANCES_FIELD));
        return None;
    };
    let mut instances = Vec::with_capacity(raw_instances.len());
    for (i, inst) in raw_instances.iter().enumerate() {
        let Some(inst) = inst.as_object() else {
            violations.push(Violation::at(i, rules::INSTANCE_OBJECT));
            continue;
        };
        let desc = inst.get("desc").and_then(Value::as_str);
        if desc.is_none() {
            violations.push(Violation::at(i, rules::DESC_FIELD));
        }
        let bbox = inst
            .get("bbox")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>());
        if bbox.is_none() {
            violations.push(Violation::at(i, rules::BBOX_FIELD));
        }
        let modality = inst
            .get("modality")
            .and_then(Value::as_str)
            .and_then(Modality::parse);
        if modality.is_none() {
            violations.push(Violation::at(i, rules::MODALITY_FIELD));
        }
        if let (Some(desc), Some(b), Some(modality)) = (desc, bbox, modality) {
            instances.push(LayoutInstance {
                description: desc.to_string(),
                bbox: BBox::new(
                    clamp_coord(b[0]),
                    clamp_coord(b[1]),
                    clamp_coord(b[2]),
                    clamp_coord(b[3]),
                ),
                modality,
            });
        }
    }
    if !violations.is_empty() {
        return None;
    }
    Some(ProxyLayout {
        scene: scene?.to_string(),
        instances,
    })
}

fn byte_offset(raw: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = raw.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(raw.len())
}

pub fn serialize_layout(l: &ProxyLayout) -> String {
    serde_json::to_string_pretty(l).expect("layout serializes")
}

/// Adds, for every image-modality instance, a co-located copy rendered from
/// both image and text. Copies are appended after the original instances.
///
/// Not idempotent: each call duplicates every `Image` instance again.
pub fn duplicate_image_instances(l: &ProxyLayout) -> ProxyLayout {
    let copies: Vec<LayoutInstance> = l
        .instances
        .iter()
        .filter(|i| i.modality == Modality::Image)
        .map(|i| LayoutInstance {
            modality: Modality::ImageAndText,
            ..i.clone()
        })
        .collect();
    let mut instances = l.instances.clone();
    instances.extend(copies);
    ProxyLayout {
        scene: l.scene.clone(),
        instances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(b: [f64; 4], m: Modality) -> LayoutInstance {
        LayoutInstance {
            description: "thing".into(),
            bbox: b.into(),
            modality: m,
        }
    }

    fn layout(insts: Vec<LayoutInstance>) -> ProxyLayout {
        ProxyLayout {
            scene: "a scene".into(),
            instances: insts,
        }
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            build_prompt(&["a dog on grass"], "add a red hat").unwrap(),
            "Given an image of a dog on grass, we show add a red hat"
        );
        assert_eq!(
            build_prompt(&["x"], "y").unwrap(),
            "Given an image of x, we show y"
        );
        assert!(build_prompt(&[""], "y").is_err());
        assert!(build_prompt(&["x"], " ").is_err());
        assert!(build_prompt(&[] as &[&str], "y").is_err());
    }

    #[test]
    fn prompt_golden_multi_caption() {
        let got = build_prompt(
            &[
                "a brown dog lying on grass",
                "a dog in a park",
                "a small dog resting outdoors",
            ],
            "make the dog wear a red knitted hat",
        )
        .unwrap();
        assert_eq!(
            got,
            include_str!("../tests/data/prompt_golden.txt").trim_end()
        );
    }

    #[test]
    fn well_formed_and_inverted_boxes() {
        assert!(
            validate_layout(&layout(vec![inst([0.2, 0.2, 0.8, 0.9], Modality::Text)])).is_empty()
        );
        let v = validate_layout(&layout(vec![inst([0.8, 0.2, 0.2, 0.9], Modality::Text)]));
        assert_eq!(v, vec![Violation::at(0, "x1<x2")]);
    }

    #[test]
    fn scene_level_rules() {
        let v = validate_layout(&ProxyLayout {
            scene: " ".into(),
            instances: vec![],
        });
        assert_eq!(
            v,
            vec![
                Violation::scene(rules::SCENE_NONEMPTY),
                Violation::scene(rules::INSTANCES_NONEMPTY)
            ]
        );
    }

    #[test]
    fn parse_clamps_small_overshoot() {
        let l = parse_layout(
            r#"{"scene":"s","instances":[{"desc":"d","bbox":[-0.01,0.0,1.015,0.5],"modality":"image"}]}"#,
        )
        .unwrap();
        assert_eq!(l.instances[0].bbox, BBox::new(0.0, 0.0, 1.0, 0.5));
    }

    #[test]
    fn parse_rejects_pixel_boxes_and_lists_everything() {
        let err = parse_layout(
            r#"{"scene":"s","instances":[
                {"desc":"d","bbox":[10,20,300,400],"modality":"image"},
                {"desc":"","bbox":[0.5,0.1,0.4,0.2],"modality":"text"}]}"#,
        )
        .unwrap_err();
        let Error::Validation(list) = err else {
            panic!("{err:?}")
        };
        assert_eq!(
            list,
            vec![
                "instance 0: x_in_unit",
                "instance 0: y_in_unit",
                "instance 1: desc_nonempty",
                "instance 1: x1<x2",
            ]
        );
    }

    #[test]
    fn parse_schema_violations() {
        let err =
            parse_layout(r#"{"instances":[{"desc":3,"bbox":[0,0,1],"modality":"video"}, 7]}"#)
                .unwrap_err();
        let Error::Validation(list) = err else {
            panic!("{err:?}")
        };
        assert_eq!(
            list,
            vec![
                "layout: scene_string",
                "instance 0: desc_string",
                "instance 0: bbox_four_numbers",
                "instance 0: modality_known",
                "instance 1: instance_object",
            ]
        );
    }

    #[test]
    fn parse_error_reports_byte_offset() {
        let raw = "{\"scene\": \"s\",\n  \"instances\": [,]}";
        match parse_layout(raw) {
            Err(Error::Parse { offset, .. }) => assert_eq!(&raw[offset..offset + 1], ","),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_one_image_instance() {
        let l = layout(vec![
            inst([0.0, 0.0, 0.5, 0.5], Modality::Text),
            inst([0.1, 0.2, 0.9, 0.8], Modality::Image),
        ]);
        let d = duplicate_image_instances(&l);
        assert_eq!(d.instances.len(), 3);
        assert_eq!(d.instances[..2], l.instances[..]);
        assert_eq!(d.instances[2].bbox, l.instances[1].bbox);
        assert_eq!(d.instances[2].modality, Modality::ImageAndText);
        assert_eq!(d.instances[2].description, l.instances[1].description);
    }

    #[test]
    fn duplicate_without_image_is_identity() {
        let l = layout(vec![
            inst([0.0, 0.0, 0.5, 0.5], Modality::Text),
            inst([0.0, 0.0, 0.5, 0.5], Modality::ImageAndText),
        ]);
        assert_eq!(duplicate_image_instances(&l), l);
    }

    #[test]
    fn duplicate_is_not_idempotent() {
        let l = layout(vec![inst([0.1, 0.1, 0.4, 0.4], Modality::Image)]);
        let once = duplicate_image_instances(&l);
        let twice = duplicate_image_instances(&once);
        assert_eq!((once.instances.len(), twice.instances.len()), (2, 3));
        let l = layout(vec![
            inst([0.1, 0.1, 0.4, 0.4], Modality::Image),
            inst([0.5, 0.5, 0.9, 0.9], Modality::Text),
        ]);
        let once = duplicate_image_instances(&l);
        assert_eq!(once.instances.len(), 3);
        assert_eq!(duplicate_image_instances(&once).instances.len(), 4);
    }
}
