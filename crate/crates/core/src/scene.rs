//! Structured scenes: three boxes of 1-8 objects each, plus the corpus file
//! format and tokenizer.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOXES_PER_SCENE: usize = 3;
pub const MAX_OBJECTS_PER_BOX: usize = 8;
pub const MAX_COORD: u8 = 99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Black,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Triangle,
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Black, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Black => "black",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Triangle, Shape::Square, Shape::Circle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Triangle => "triangle",
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        }
    }
}

/// One object. `y` grows downward, so "above" means a smaller `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Obj {
    pub x: u8,
    pub y: u8,
    pub color: Color,
    pub shape: Shape,
    pub size: Size,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneBox {
    pub objects: Vec<Obj>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub id: String,
    pub boxes: Vec<SceneBox>,
}

impl Scene {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.boxes.len() != BOXES_PER_SCENE {
            return Err(format!("scene {} has {} boxes, expected {}", self.id, self.boxes.len(), BOXES_PER_SCENE));
        }
        for (b, bx) in self.boxes.iter().enumerate() {
            let n = bx.objects.len();
            if n == 0 || n > MAX_OBJECTS_PER_BOX {
                return Err(format!(
                    "scene {} box {} holds {} objects, expected 1-{}",
                    self.id, b, n, MAX_OBJECTS_PER_BOX
                ));
            }
            for o in &bx.objects {
                if o.x > MAX_COORD || o.y > MAX_COORD {
                    return Err(format!(
                        "scene {} box {} has object at ({}, {}) outside 0-{}",
                        self.id, b, o.x, o.y, MAX_COORD
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn object_count(&self) -> usize {
        self.boxes.iter().map(|b| b.objects.len()).sum()
    }

    pub fn to_json(&self, denotation: bool) -> serde_json::Result<String> {
        serde_json::to_string(&SceneRecord { denotation, boxes: self.boxes.clone() })
    }

    /// Inverse of [`Scene::to_json`]; the id is not part of the wire format.
    pub fn from_json(id: impl Into<String>, text: &str) -> Result<(Scene, bool)> {
        let rec: SceneRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let scene = Scene { id: id.into(), boxes: rec.boxes };
        scene.validate().map_err(|message| Error::Invariant { id: scene.id.clone(), message })?;
        Ok((scene, rec.denotation))
    }
}

/// An utterance with its labelled scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub scenes: Vec<(Scene, bool)>,
}

/// NLVR groups every utterance with four images.
pub const SCENES_PER_EXAMPLE: usize = 4;

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, scenes: Vec<(Scene, bool)>) -> Self {
        let text = text.into();
        Example { id: id.into(), tokens: tokenize(&text), text, scenes }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.scenes.len() != SCENES_PER_EXAMPLE {
            return Err(format!("has {} scenes, expected {}", self.scenes.len(), SCENES_PER_EXAMPLE));
        }
        if self.tokens.is_empty() {
            return Err("utterance is empty".to_string());
        }
        self.scenes.iter().try_for_each(|(s, _)| s.validate())
    }
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    denotation: bool,
    boxes: Vec<SceneBox>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    utterance: String,
    scenes: Vec<SceneRecord>,
}

fn to_example(rec: ExampleRecord) -> Result<Example> {
    let scenes = rec
        .scenes
        .into_iter()
        .enumerate()
        .map(|(k, s)| (Scene { id: format!("{}-{}", rec.id, k), boxes: s.boxes }, s.denotation))
        .collect();
    let ex = Example::new(rec.id, rec.utterance, scenes);
    ex.validate().map_err(|message| Error::Invariant { id: ex.id.clone(), message })?;
    Ok(ex)
}

/// Parses corpus JSON. Blank input is an empty corpus.
pub fn parse_corpus(text: &str) -> Result<Vec<Example>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<ExampleRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    records.into_iter().map(to_example).collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    parse_corpus(&text)
}

pub fn corpus_to_json(corpus: &[Example]) -> String {
    let records: Vec<ExampleRecord> = corpus
        .iter()
        .map(|ex| ExampleRecord {
            id: ex.id.clone(),
            utterance: ex.text.clone(),
            scenes: ex.scenes.iter().map(|(s, d)| SceneRecord { denotation: *d, boxes: s.boxes.clone() }).collect(),
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&records).expect("corpus serializes");
    out.push('\n');
    out
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Example]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus_to_json(corpus)).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

impl fmt::Display for Obj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} @({},{})", self.size.name(), self.color.name(), self.shape.name(), self.x, self.y)
    }
}
