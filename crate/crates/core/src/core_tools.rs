//! The fixed core tool library and its deterministic fixture backends.
//!
//! Four tools are always present: `region_crop`, `visual_search`,
//! `external_text_retrieval` and `web_visit`. Vision tools are served purely
//! from fixtures; text tools use fixtures first and may fall through to a
//! live HTTP backend when one is configured.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parser::{normalize_tool_name, ToolInvocation};
use crate::policy::{ChatMessage, PolicyAdapter};
use crate::prompts;
use crate::schema::{validate, ArgSchema, ArgSpec, ArgType, SchemaViolation};

pub const REGION_CROP: &str = "region_crop";
pub const VISUAL_SEARCH: &str = "visual_search";
pub const TEXT_RETRIEVAL: &str = "external_text_retrieval";
pub const WEB_VISIT: &str = "web_visit";

pub const VISUAL_CATEGORIES: [&str; 8] = [
    "plant", "animal", "car", "person", "landmark", "vegetable", "cuisine", "logo",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub schema: ArgSchema,
}

fn bbox_spec() -> ArgSpec {
    ArgSpec::required(ArgType::Array).describe(
        "[x1, y1, x2, y2] where (x1, y1) is the top-left corner and (x2, y2) is the bottom-right corner",
    )
}

/// Descriptors of the core tools, in prompt order.
pub fn core_descriptors() -> Vec<ToolDescriptor> {
    let crop = ToolDescriptor {
        name: REGION_CROP.into(),
        description: "Zoom into a specific area of the first input image based on the provided bounding box. Returns a new image.".into(),
        schema: ArgSchema::from([("bbox".to_string(), bbox_spec())]),
    };
    let search = ToolDescriptor {
        name: VISUAL_SEARCH.into(),
        description: "Search for images similar to the bounding box area of the first input image. Returns only the most similar target's type name and the confidence score.".into(),
        schema: ArgSchema::from([
            ("bbox_2d".to_string(), bbox_spec()),
            (
                "category".to_string(),
                ArgSpec::required(ArgType::String)
                    .with_enum(&VISUAL_CATEGORIES)
                    .describe("category of the target to search for"),
            ),
        ]),
    };
    let retrieval = ToolDescriptor {
        name: TEXT_RETRIEVAL.into(),
        description: "Retrieve external text information based on a text query. Returns text.".into(),
        schema: ArgSchema::from([(
            "query".to_string(),
            ArgSpec::required(ArgType::String).describe("the content to search for"),
        )]),
    };
    let visit = ToolDescriptor {
        name: WEB_VISIT.into(),
        description: "Visit a web page URL in one of three modes: read the full content, read the content within a [a, b] character window, or get a summary focused on a goal. Returns a JSON object with the visited URL and the result.".into(),
        schema: ArgSchema::from([
            ("url".to_string(), ArgSpec::required(ArgType::String).describe("the page to visit")),
            (
                "window".to_string(),
                ArgSpec::optional(ArgType::Array).describe("[a, b] character offsets to read"),
            ),
            (
                "goal".to_string(),
                ArgSpec::optional(ArgType::String).describe("what to find on the page"),
            ),
        ]),
    };
    vec![crop, search, retrieval, visit]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BoundingBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, CoreToolError> {
        let bbox = Self { x1, y1, x2, y2 };
        if x1 < 0 || y1 < 0 || x1 >= x2 || y1 >= y2 {
            return Err(CoreToolError::InvalidBox(bbox.as_array()));
        }
        Ok(bbox)
    }

    pub fn from_value(value: &Value) -> Result<Self, CoreToolError> {
        let coords: Vec<i64> = value
            .as_array()
            .map(|items| items.iter().filter_map(Value::as_i64).collect())
            .unwrap_or_default();
        match coords.as_slice() {
            [x1, y1, x2, y2] if value.as_array().is_some_and(|a| a.len() == 4) => {
                Self::new(*x1, *y1, *x2, *y2)
            }
            _ => Err(CoreToolError::BadArgument(format!(
                "bounding box must be four integers, got {value}"
            ))),
        }
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }
}

/// Reference to an image known to the fixture corpus (or derived from one by cropping).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub width: i64,
    pub height: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_hash: Option<String>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, width: i64, height: i64) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            region_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreToolError {
    #[error("bounding box {0:?} is not a valid top-left/bottom-right box")]
    InvalidBox([i64; 4]),
    #[error("bounding box {bbox:?} exceeds image bounds {width}x{height}")]
    OutOfBounds { bbox: [i64; 4], width: i64, height: i64 },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("no fixture for {0:?}")]
    FixtureMiss(String),
    #[error("fetch failed: {0}")]
    FetchFailure(String),
    #[error("this task has no input image")]
    NoImage,
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("bad argument: {0}")]
    BadArgument(String),
    #[error("summarizer failed: {0}")]
    Summarizer(String),
    #[error("{0} is not a core tool")]
    NotCore(String),
    #[error(transparent)]
    Schema(#[from] SchemaViolation),
}

impl CoreToolError {
    /// Short machine label used as the observation's error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreToolError::InvalidBox(_) => "invalid_box",
            CoreToolError::OutOfBounds { .. } => "out_of_bounds",
            CoreToolError::UnknownCategory(_) => "unknown_category",
            CoreToolError::FixtureMiss(_) => "fixture_miss",
            CoreToolError::FetchFailure(_) => "fetch_failure",
            CoreToolError::NoImage => "no_image",
            CoreToolError::InvalidWindow(_) => "invalid_window",
            CoreToolError::BadArgument(_) => "bad_argument",
            CoreToolError::Summarizer(_) => "summarizer_failure",
            CoreToolError::NotCore(_) => "not_core",
            CoreToolError::Schema(_) => "schema_violation",
        }
    }
}

/// Deterministic region descriptor; the identity crop returns the image itself.
pub fn crop_zoom(image: &ImageRef, bbox: BoundingBox) -> Result<ImageRef, CoreToolError> {
    if bbox.x2 > image.width || bbox.y2 > image.height {
        return Err(CoreToolError::OutOfBounds {
            bbox: bbox.as_array(),
            width: image.width,
            height: image.height,
        });
    }
    if bbox.as_array() == [0, 0, image.width, image.height] {
        return Ok(image.clone());
    }
    let [x1, y1, x2, y2] = bbox.as_array();
    let key = format!("{}:{x1},{y1},{x2},{y2}", image.id);
    let hash = hex::encode(Sha256::digest(key.as_bytes()));
    Ok(ImageRef {
        id: format!("{}#crop({x1},{y1},{x2},{y2})", image.id),
        width: bbox.width(),
        height: bbox.height(),
        region_hash: Some(hash[..16].to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFixture {
    pub image: String,
    pub bbox: [i64; 4],
    pub label: String,
    pub confidence: f64,
}

/// Keyed fixture data for the mock backends.
///
/// On-disk layout:
/// ```text
/// images.json          [{"id", "width", "height"}]
/// visual_search.json   [{"image", "bbox", "label", "confidence"}]
/// text/<key>.txt       retrieval results, key = fixture_key(query)
/// pages/<key>.txt      page contents, key = fixture_key(url)
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureCorpus {
    pub images: BTreeMap<String, ImageRef>,
    pub visual: Vec<VisualFixture>,
    pub texts: BTreeMap<String, String>,
    pub pages: BTreeMap<String, String>,
}

/// Normalized lookup key for queries and URLs.
pub fn fixture_key(raw: &str) -> String {
    normalize_tool_name(raw).unwrap_or_default()
}

impl FixtureCorpus {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let mut corpus = Self::default();
        let images = dir.join("images.json");
        if images.exists() {
            let list: Vec<ImageRef> = serde_json::from_str(&fs::read_to_string(images)?)?;
            corpus.images = list.into_iter().map(|i| (i.id.clone(), i)).collect();
        }
        let visual = dir.join("visual_search.json");
        if visual.exists() {
            corpus.visual = serde_json::from_str(&fs::read_to_string(visual)?)?;
        }
        corpus.texts = read_keyed_dir(&dir.join("text"))?;
        corpus.pages = read_keyed_dir(&dir.join("pages"))?;
        Ok(corpus)
    }

    pub fn with_text(mut self, query: &str, text: &str) -> Self {
        self.texts.insert(fixture_key(query), text.to_string());
        self
    }

    pub fn with_page(mut self, url: &str, content: &str) -> Self {
        self.pages.insert(fixture_key(url), content.to_string());
        self
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.images.insert(image.id.clone(), image);
        self
    }

    pub fn with_visual(mut self, fixture: VisualFixture) -> Self {
        self.visual.push(fixture);
        self
    }
}

fn read_keyed_dir(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), fs::read_to_string(&path)?);
            }
        }
    }
    Ok(out)
}

/// Fixture lookup keyed by `(image id, bbox)`; misses yield `("unknown", 0.0)`.
pub fn visual_search(
    corpus: &FixtureCorpus,
    image: &ImageRef,
    bbox: BoundingBox,
    category: &str,
) -> Result<(String, f64), CoreToolError> {
    if !VISUAL_CATEGORIES.contains(&category) {
        return Err(CoreToolError::UnknownCategory(category.to_string()));
    }
    Ok(corpus
        .visual
        .iter()
        .find(|f| f.image == image.id && f.bbox == bbox.as_array())
        .map(|f| (f.label.clone(), f.confidence))
        .unwrap_or_else(|| ("unknown".to_string(), 0.0)))
}

/// Produces goal-directed page summaries for `web_visit`.
pub trait Summarizer: Send + Sync {
    fn summarize(&self, content: &str, goal: &str) -> Result<String, String>;
}

impl Summarizer for PolicyAdapter {
    fn summarize(&self, content: &str, goal: &str) -> Result<String, String> {
        let history = [
            ChatMessage::system(prompts::SUMMARIZER_SYSTEM),
            ChatMessage::user(format!("Goal: {goal}\n\nContent:\n{content}")),
        ];
        self.complete(&history).map_err(|e| e.to_string())
    }
}

impl<S: Summarizer + ?Sized> Summarizer for Arc<S> {
    fn summarize(&self, content: &str, goal: &str) -> Result<String, String> {
        (**self).summarize(content, goal)
    }
}

/// Optional network backend for the text tools.
pub struct LiveWeb {
    agent: ureq::Agent,
    search_url: Option<String>,
}

impl LiveWeb {
    pub fn new(search_url: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent, search_url }
    }

    fn get(&self, url: &str, query: Option<&str>) -> Result<String, CoreToolError> {
        let mut request = self.agent.get(url);
        if let Some(q) = query {
            request = request.query("q", q);
        }
        request
            .call()
            .map_err(|e| CoreToolError::FetchFailure(e.to_string()))?
            .body_mut()
            .read_to_string()
            .map_err(|e| CoreToolError::FetchFailure(e.to_string()))
    }

    pub fn retrieve(&self, query: &str) -> Result<String, CoreToolError> {
        let url = self
            .search_url
            .as_deref()
            .ok_or_else(|| CoreToolError::FixtureMiss(query.to_string()))?;
        self.get(url, Some(query))
    }

    pub fn fetch(&self, url: &str) -> Result<String, CoreToolError> {
        self.get(url, None)
    }
}

/// Dispatches core tool invocations.
pub struct CoreToolbox {
    descriptors: Vec<ToolDescriptor>,
    fixtures: FixtureCorpus,
    summarizer: Option<Box<dyn Summarizer>>,
    live: Option<LiveWeb>,
}

impl CoreToolbox {
    pub fn new(fixtures: FixtureCorpus) -> Self {
        Self {
            descriptors: core_descriptors(),
            fixtures,
            summarizer: None,
            live: None,
        }
    }

    pub fn with_summarizer(mut self, summarizer: Box<dyn Summarizer>) -> Self {
        self.summarizer = Some(summarizer);
        self
    }

    pub fn with_live(mut self, live: LiveWeb) -> Self {
        self.live = Some(live);
        self
    }

    pub fn descriptors(&self) -> &[ToolDescriptor] {
        &self.descriptors
    }

    pub fn descriptor(&self, name: &str) -> Option<&ToolDescriptor> {
        self.descriptors.iter().find(|d| d.name == name)
    }

    pub fn fixtures(&self) -> &FixtureCorpus {
        &self.fixtures
    }

    /// Validate against the tool's schema, then run the backend.
    pub fn invoke(
        &self,
        call: &ToolInvocation,
        image: Option<&ImageRef>,
    ) -> Result<String, CoreToolError> {
        let descriptor = self
            .descriptor(&call.name)
            .ok_or_else(|| CoreToolError::NotCore(call.name.clone()))?;
        let args = call.arguments_value();
        validate(&descriptor.schema, &args)?;
        match call.name.as_str() {
            REGION_CROP => {
                let image = image.ok_or(CoreToolError::NoImage)?;
                let cropped = crop_zoom(image, BoundingBox::from_value(&args["bbox"])?)?;
                Ok(serde_json::to_string(&cropped).expect("image ref serializes"))
            }
            VISUAL_SEARCH => {
                let image = image.ok_or(CoreToolError::NoImage)?;
                let bbox = BoundingBox::from_value(&args["bbox_2d"])?;
                let category = args["category"].as_str().unwrap_or_default();
                let (name, confidence) = visual_search(&self.fixtures, image, bbox, category)?;
                Ok(json!({ "type_name": name, "confidence": confidence }).to_string())
            }
            TEXT_RETRIEVAL => self.text_retrieval(args["query"].as_str().unwrap_or_default()),
            WEB_VISIT => {
                let window = match args.get("window") {
                    None | Some(Value::Null) => None,
                    Some(w) => Some(parse_window(w)?),
                };
                let goal = args.get("goal").and_then(Value::as_str).filter(|g| !g.trim().is_empty());
                let result = self.web_visit(args["url"].as_str().unwrap_or_default(), window, goal)?;
                Ok(result.to_string())
            }
            other => Err(CoreToolError::NotCore(other.to_string())),
        }
    }

    pub fn text_retrieval(&self, query: &str) -> Result<String, CoreToolError> {
        if query.trim().is_empty() {
            return Err(CoreToolError::BadArgument("query must not be empty".into()));
        }
        if let Some(text) = self.fixtures.texts.get(&fixture_key(query)) {
            return Ok(text.clone());
        }
        match &self.live {
            Some(live) => live.retrieve(query),
            None => Err(CoreToolError::FixtureMiss(query.to_string())),
        }
    }

    /// Full page, a `[a, b)` character window, or a goal-directed summary.
    pub fn web_visit(
        &self,
        url: &str,
        window: Option<(usize, usize)>,
        goal: Option<&str>,
    ) -> Result<Value, CoreToolError> {
        if url.trim().is_empty() {
            return Err(CoreToolError::BadArgument("url must not be empty".into()));
        }
        let content = match self.fixtures.pages.get(&fixture_key(url)) {
            Some(page) => page.clone(),
            None => match &self.live {
                Some(live) => live.fetch(url)?,
                None => return Err(CoreToolError::FixtureMiss(url.to_string())),
            },
        };
        let (mode, content) = match (window, goal) {
            (_, Some(goal)) => {
                let summarizer = self
                    .summarizer
                    .as_ref()
                    .ok_or_else(|| CoreToolError::Summarizer("no summarizer configured".into()))?;
                let base = match window {
                    Some((a, b)) => slice_chars(&content, a, b),
                    None => content,
                };
                ("goal", summarizer.summarize(&base, goal).map_err(CoreToolError::Summarizer)?)
            }
            (Some((a, b)), None) => ("window", slice_chars(&content, a, b)),
            (None, None) => ("full", content),
        };
        Ok(json!({ "url": url, "mode": mode, "content": content }))
    }
}

fn parse_window(value: &Value) -> Result<(usize, usize), CoreToolError> {
    let bounds: Vec<u64> = value
        .as_array()
        .map(|items| items.iter().filter_map(Value::as_u64).collect())
        .unwrap_or_default();
    match bounds.as_slice() {
        [a, b] if a <= b => Ok((*a as usize, *b as usize)),
        [a, b] => Err(CoreToolError::InvalidWindow(format!("{a} > {b}"))),
        _ => Err(CoreToolError::InvalidWindow(format!(
            "expected [a, b] with non-negative integers, got {value}"
        ))),
    }
}

fn slice_chars(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}
