//! Hierarchical entity schemas, entity values and reversible preprocessing.
//!
//! A schema is a tree of named properties. Composite nodes only group other
//! nodes; the leaves (numerical, categorical or text) are the dimensions the
//! diffusion process works on, enumerated in document order.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Printable ASCII, the default character vocabulary for text leaves.
pub const DEFAULT_TEXT_VOCAB: &str =
    " !\"#$%&'()*+,-./0123456789:;<=>?@ABCDEFGHIJKLMNOPQRSTUVWXYZ[\\]^_`abcdefghijklmnopqrstuvwxyz{|}~";
pub const DEFAULT_TEXT_MAX_LENGTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Numerical,
    Categorical,
    Text,
    Composite,
}

impl Kind {
    pub fn parse(s: &str) -> Result<Kind> {
        match s {
            "numerical" => Ok(Kind::Numerical),
            "categorical" => Ok(Kind::Categorical),
            "text" => Ok(Kind::Text),
            "composite" => Ok(Kind::Composite),
            other => Err(Error::schema(format!("unknown kind `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Numerical => "numerical",
            Kind::Categorical => "categorical",
            Kind::Text => "text",
            Kind::Composite => "composite",
        }
    }
}

/// Min-max scaling fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
    /// Set when every training value was identical (`min == max`).
    pub constant: bool,
}

impl Normalizer {
    pub fn new(min: f64, max: f64) -> Result<Normalizer> {
        if !(min.is_finite() && max.is_finite()) || max < min {
            return Err(Error::schema(format!("invalid normalizer range [{min}, {max}]")));
        }
        Ok(Normalizer { min, max, constant: min == max })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        if self.constant {
            self.min
        } else {
            self.min + y * (self.max - self.min)
        }
    }

    /// Width of the fitted range, 1 for constant columns.
    pub fn scale(&self) -> f64 {
        if self.constant {
            1.0
        } else {
            self.max - self.min
        }
    }
}

/// Character vocabulary and length limit of a text leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSpec {
    pub vocab: Vec<char>,
    pub max_length: usize,
}

impl Default for TextSpec {
    fn default() -> Self {
        TextSpec { vocab: DEFAULT_TEXT_VOCAB.chars().collect(), max_length: DEFAULT_TEXT_MAX_LENGTH }
    }
}

impl TextSpec {
    /// Token ids: `0` is padding, `1` is end-of-text, characters start at `2`.
    pub const PAD: usize = 0;
    pub const END: usize = 1;

    pub fn token_count(&self) -> usize {
        self.vocab.len() + 2
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len());
        for c in text.chars() {
            match self.vocab.iter().position(|&v| v == c) {
                Some(i) => out.push(i + 2),
                None => return Err(Error::data(format!("character {c:?} is not in the text vocabulary"))),
            }
        }
        if out.len() > self.max_length {
            return Err(Error::data(format!(
                "text of length {} exceeds max_length {}",
                out.len(),
                self.max_length
            )));
        }
        Ok(out)
    }

    /// Decode token ids up to the first end/pad token.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t >= 2)
            .filter_map(|&t| self.vocab.get(t - 2))
            .collect()
    }
}

/// Type information of one leaf property.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafKind {
    Numerical { normalizer: Option<Normalizer> },
    /// Labels are addressed by their position in `categories`. The diffusion
    /// state of label `i` is `i + 1`; state `0` is the mask.
    Categorical { categories: Vec<String> },
    Text(TextSpec),
}

impl LeafKind {
    pub fn kind(&self) -> Kind {
        match self {
            LeafKind::Numerical { .. } => Kind::Numerical,
            LeafKind::Categorical { .. } => Kind::Categorical,
            LeafKind::Text(_) => Kind::Text,
        }
    }
}

/// A leaf property with its full dot-separated path.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertySpec {
    pub path: String,
    pub kind: LeafKind,
}

impl PropertySpec {
    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.path.split('.')
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            LeafKind::Categorical { categories } => Some(categories),
            _ => None,
        }
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        match &self.kind {
            LeafKind::Numerical { normalizer } => normalizer.as_ref(),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&TextSpec> {
        match &self.kind {
            LeafKind::Text(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Composite { name: String, children: Vec<Node> },
    Leaf { name: String, index: usize },
}

/// The property tree plus its ordered leaves (the `D` dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct EntitySchema {
    root: Vec<Node>,
    leaves: Vec<PropertySpec>,
    index: HashMap<String, usize>,
}

impl EntitySchema {
    pub fn leaves(&self) -> &[PropertySpec] {
        &self.leaves
    }

    pub fn leaf(&self, i: usize) -> &PropertySpec {
        &self.leaves[i]
    }

    /// Number of leaf properties.
    pub fn dim(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_index(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn require_leaf(&self, path: &str) -> Result<usize> {
        self.leaf_index(path).ok_or_else(|| Error::schema(format!("unknown property path `{path}`")))
    }

    /// Build a schema from leaves given as `(path, kind)` pairs. Composite nodes
    /// are created from the dotted paths, preserving first-appearance order.
    pub fn from_leaves(leaves: Vec<PropertySpec>) -> Result<EntitySchema> {
        if leaves.is_empty() {
            return Err(Error::schema("schema has no leaf properties"));
        }
        let mut root: Vec<Node> = Vec::new();
        for (i, leaf) in leaves.iter().enumerate() {
            let segs: Vec<&str> = leaf.path.split('.').collect();
            for s in &segs {
                validate_name(s)?;
            }
            insert_path(&mut root, &segs, i, &leaf.path)?;
        }
        EntitySchema::build(root, leaves)
    }

    fn build(root: Vec<Node>, leaves: Vec<PropertySpec>) -> Result<EntitySchema> {
        let mut index = HashMap::new();
        for (i, leaf) in leaves.iter().enumerate() {
            validate_leaf(leaf)?;
            if index.insert(leaf.path.clone(), i).is_some() {
                return Err(Error::schema(format!("duplicate property path `{}`", leaf.path)));
            }
        }
        Ok(EntitySchema { root, leaves, index })
    }

    /// Parse a schema document.
    pub fn load(document: &str) -> Result<EntitySchema> {
        let doc: Json = serde_json::from_str(document).map_err(|e| Error::schema(format!("malformed schema document: {e}")))?;
        let obj = doc.as_object().ok_or_else(|| Error::schema("schema document must be an object"))?;
        let kind = obj.get("kind").and_then(Json::as_str).unwrap_or("composite");
        if Kind::parse(kind)? != Kind::Composite {
            return Err(Error::schema("schema root must be composite"));
        }
        let children = obj
            .get("children")
            .and_then(Json::as_array)
            .ok_or_else(|| Error::schema("schema root needs a `children` array"))?;
        if children.is_empty() {
            return Err(Error::schema("composite node `<root>` has no children"));
        }
        let mut leaves = Vec::new();
        let mut root = Vec::new();
        for child in children {
            root.push(parse_node(child, "", &mut leaves)?);
        }
        EntitySchema::build(root, leaves)
    }

    /// Serialize to the schema document format. `load(save(s)) == s`.
    pub fn save(&self) -> String {
        let children: Vec<Json> = self.root.iter().map(|n| self.node_json(n, true)).collect();
        let doc = json!({ "kind": "composite", "children": children });
        let mut s = serde_json::to_string_pretty(&doc).expect("schema serializes");
        s.push('\n');
        s
    }

    fn node_json(&self, node: &Node, with_normalizer: bool) -> Json {
        let mut m = Map::new();
        match node {
            Node::Composite { name, children } => {
                m.insert("name".into(), json!(name));
                m.insert("kind".into(), json!("composite"));
                let ch: Vec<Json> = children.iter().map(|c| self.node_json(c, with_normalizer)).collect();
                m.insert("children".into(), Json::Array(ch));
            }
            Node::Leaf { name, index } => {
                let leaf = &self.leaves[*index];
                m.insert("name".into(), json!(name));
                m.insert("kind".into(), json!(leaf.kind.kind().as_str()));
                match &leaf.kind {
                    LeafKind::Numerical { normalizer } => {
                        if let (true, Some(n)) = (with_normalizer, normalizer) {
                            m.insert(
                                "normalizer".into(),
                                json!({ "min": n.min, "max": n.max, "constant": n.constant }),
                            );
                        }
                    }
                    LeafKind::Categorical { categories } => {
                        m.insert("categories".into(), json!(categories));
                    }
                    LeafKind::Text(t) => {
                        let vocab: String = t.vocab.iter().collect();
                        m.insert("text".into(), json!({ "vocab": vocab, "max_length": t.max_length }));
                    }
                }
            }
        }
        Json::Object(m)
    }

    /// Hash of the structure (paths, kinds, categories, text settings); fitted
    /// normalizers are excluded so a raw and a fitted schema share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let children: Vec<Json> = self.root.iter().map(|n| self.node_json(n, false)).collect();
        let doc = json!({ "kind": "composite", "children": children });
        let bytes = serde_json::to_vec(&doc).expect("schema serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn is_fitted(&self) -> bool {
        self.leaves.iter().all(|l| match &l.kind {
            LeafKind::Numerical { normalizer } => normalizer.is_some(),
            _ => true,
        })
    }

    /// Fit min-max normalizers on the Present numerical cells of `train`.
    pub fn fit_normalizers(&self, train: &[EntityInstance]) -> Result<EntitySchema> {
        if train.is_empty() {
            return Err(Error::data("cannot fit normalizers on an empty training set"));
        }
        let mut out = self.clone();
        for (i, leaf) in out.leaves.iter_mut().enumerate() {
            if let LeafKind::Numerical { normalizer } = &mut leaf.kind {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for e in train {
                    if let Cell::Present(Value::Num(x)) = e.cells[i] {
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                if lo > hi {
                    return Err(Error::data(format!(
                        "numerical property `{}` has no present values in the training set",
                        leaf.path
                    )));
                }
                *normalizer = Some(Normalizer::new(lo, hi)?);
            }
        }
        Ok(out)
    }

    /// Map Present numerical cells onto the fitted unit range.
    pub fn normalize(&self, entity: &EntityInstance) -> Result<EntityInstance> {
        self.map_numeric(entity, |n, x| n.normalize(x))
    }

    pub fn denormalize(&self, entity: &EntityInstance) -> Result<EntityInstance> {
        self.map_numeric(entity, |n, x| n.denormalize(x))
    }

    fn map_numeric(&self, entity: &EntityInstance, f: impl Fn(&Normalizer, f64) -> f64) -> Result<EntityInstance> {
        self.check_width(entity)?;
        let mut out = entity.clone();
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let LeafKind::Numerical { normalizer } = &leaf.kind {
                if let Cell::Present(Value::Num(x)) = &mut out.cells[i] {
                    let n = normalizer
                        .as_ref()
                        .ok_or_else(|| Error::schema(format!("normalizer of `{}` is not fitted", leaf.path)))?;
                    *x = f(n, *x);
                }
            }
        }
        Ok(out)
    }

    pub fn check_width(&self, entity: &EntityInstance) -> Result<()> {
        if entity.cells.len() != self.dim() {
            return Err(Error::data(format!(
                "entity has {} cells but the schema has {} leaves",
                entity.cells.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Check every Present cell against its leaf type.
    pub fn validate_entity(&self, entity: &EntityInstance) -> Result<()> {
        self.check_width(entity)?;
        for (leaf, cell) in self.leaves.iter().zip(&entity.cells) {
            if let Cell::Present(v) = cell {
                match (&leaf.kind, v) {
                    (LeafKind::Numerical { .. }, Value::Num(x)) if x.is_finite() => {}
                    (LeafKind::Categorical { categories }, Value::Cat(c)) if *c < categories.len() => {}
                    (LeafKind::Text(t), Value::Text(s)) => {
                        t.encode(s)?;
                    }
                    _ => {
                        return Err(Error::data(format!("invalid value {v:?} for property `{}`", leaf.path)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parse a raw string cell for leaf `i`. Empty strings and `missing` are Missing.
    pub fn parse_cell(&self, i: usize, raw: &str, missing: &str) -> Result<Cell> {
        if raw.is_empty() || raw == missing {
            return Ok(Cell::Missing);
        }
        let leaf = &self.leaves[i];
        let value = match &leaf.kind {
            LeafKind::Numerical { .. } => {
                let x: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::data(format!("`{raw}` is not a number (property `{}`)", leaf.path)))?;
                if !x.is_finite() {
                    return Err(Error::data(format!("non-finite value in property `{}`", leaf.path)));
                }
                Value::Num(x)
            }
            LeafKind::Categorical { categories } => {
                let c = categories
                    .iter()
                    .position(|c| c == raw)
                    .ok_or_else(|| Error::data(format!("unknown label `{raw}` for property `{}`", leaf.path)))?;
                Value::Cat(c)
            }
            LeafKind::Text(t) => {
                t.encode(raw)?;
                Value::Text(raw.to_string())
            }
        };
        Ok(Cell::Present(value))
    }

    /// Render a Present value as text; `None` for Missing or Masked cells.
    pub fn format_cell(&self, i: usize, cell: &Cell) -> Option<String> {
        match cell {
            Cell::Present(Value::Num(x)) => Some(format!("{x}")),
            Cell::Present(Value::Cat(c)) => self.leaves[i].categories().map(|cats| cats[*c].clone()),
            Cell::Present(Value::Text(s)) => Some(s.clone()),
            _ => None,
        }
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('.') {
        return Err(Error::schema(format!("invalid property name `{name}`")));
    }
    Ok(())
}

fn validate_leaf(leaf: &PropertySpec) -> Result<()> {
    match &leaf.kind {
        LeafKind::Categorical { categories } => {
            if categories.is_empty() {
                return Err(Error::schema(format!("categorical property `{}` has no categories", leaf.path)));
            }
            let mut seen = HashSet::new();
            for c in categories {
                if !seen.insert(c) {
                    return Err(Error::schema(format!("duplicate category `{c}` in `{}`", leaf.path)));
                }
            }
        }
        LeafKind::Text(t) => {
            if t.max_length == 0 || t.vocab.is_empty() {
                return Err(Error::schema(format!("text property `{}` needs a vocabulary and max_length > 0", leaf.path)));
            }
            let distinct: BTreeSet<char> = t.vocab.iter().copied().collect();
            if distinct.len() != t.vocab.len() {
                return Err(Error::schema(format!("duplicate characters in vocabulary of `{}`", leaf.path)));
            }
        }
        LeafKind::Numerical { normalizer } => {
            if let Some(n) = normalizer {
                Normalizer::new(n.min, n.max)?;
            }
        }
    }
    Ok(())
}

fn insert_path(nodes: &mut Vec<Node>, segs: &[&str], leaf: usize, full: &str) -> Result<()> {
    let (head, rest) = segs.split_first().expect("non-empty path");
    if rest.is_empty() {
        if nodes.iter().any(|n| node_name(n) == *head) {
            return Err(Error::schema(format!("duplicate property path `{full}`")));
        }
        nodes.push(Node::Leaf { name: head.to_string(), index: leaf });
        return Ok(());
    }
    let pos = nodes.iter().position(|n| node_name(n) == *head);
    let pos = match pos {
        Some(p) => p,
        None => {
            nodes.push(Node::Composite { name: head.to_string(), children: Vec::new() });
            nodes.len() - 1
        }
    };
    match &mut nodes[pos] {
        Node::Composite { children, .. } => insert_path(children, rest, leaf, full),
        Node::Leaf { .. } => Err(Error::schema(format!("path `{full}` descends into a leaf property"))),
    }
}

fn node_name(n: &Node) -> &str {
    match n {
        Node::Composite { name, .. } | Node::Leaf { name, .. } => name,
    }
}

fn parse_node(doc: &Json, prefix: &str, leaves: &mut Vec<PropertySpec>) -> Result<Node> {
    let obj = doc.as_object().ok_or_else(|| Error::schema("schema node must be an object"))?;
    let name = obj
        .get("name")
        .and_then(Json::as_str)
        .ok_or_else(|| Error::schema("schema node without a `name`"))?;
    validate_name(name)?;
    let path = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
    let kind = Kind::parse(
        obj.get("kind")
            .and_then(Json::as_str)
            .ok_or_else(|| Error::schema(format!("node `{path}` has no `kind`")))?,
    )?;
    let leaf_kind = match kind {
        Kind::Composite => {
            let children = obj.get("children").and_then(Json::as_array).map(Vec::as_slice).unwrap_or(&[]);
            if children.is_empty() {
                return Err(Error::schema(format!("composite node `{path}` has no children")));
            }
            let mut nodes = Vec::with_capacity(children.len());
            for c in children {
                nodes.push(parse_node(c, &path, leaves)?);
            }
            return Ok(Node::Composite { name: name.to_string(), children: nodes });
        }
        Kind::Numerical => {
            let normalizer = match obj.get("normalizer") {
                None | Some(Json::Null) => None,
                Some(n) => {
                    let min = n.get("min").and_then(Json::as_f64);
                    let max = n.get("max").and_then(Json::as_f64);
                    match (min, max) {
                        (Some(min), Some(max)) => Some(Normalizer::new(min, max)?),
                        _ => return Err(Error::schema(format!("normalizer of `{path}` needs min and max"))),
                    }
                }
            };
            LeafKind::Numerical { normalizer }
        }
        Kind::Categorical => {
            let cats = obj
                .get("categories")
                .and_then(Json::as_array)
                .ok_or_else(|| Error::schema(format!("categorical property `{path}` has no categories")))?;
            let categories = cats
                .iter()
                .map(|c| {
                    c.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::schema(format!("category labels of `{path}` must be strings")))
                })
                .collect::<Result<Vec<_>>>()?;
            LeafKind::Categorical { categories }
        }
        Kind::Text => {
            let mut spec = TextSpec::default();
            if let Some(t) = obj.get("text") {
                if let Some(v) = t.get("vocab").and_then(Json::as_str) {
                    spec.vocab = v.chars().collect();
                }
                if let Some(m) = t.get("max_length").and_then(Json::as_u64) {
                    spec.max_length = m as usize;
                }
            }
            LeafKind::Text(spec)
        }
    };
    leaves.push(PropertySpec { path, kind: leaf_kind });
    Ok(Node::Leaf { name: name.to_string(), index: leaves.len() - 1 })
}

/// A typed leaf value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    /// Index into the leaf's category list.
    Cat(usize),
    Text(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            _ => None,
        }
    }
}

/// State of one leaf of an entity.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Present(Value),
    /// Absent from the source data; outside the diffusion and never scored.
    Missing,
    /// Diffusion mask state, awaiting prediction.
    Masked,
}

impl Cell {
    pub fn is_present(&self) -> bool {
        matches!(self, Cell::Present(_))
    }

    pub fn is_masked(&self) -> bool {
        matches!(self, Cell::Masked)
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn value(&self) -> Option<&Value> {
        match self {
            Cell::Present(v) => Some(v),
            _ => None,
        }
    }
}

/// Leaf-aligned cells of one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityInstance {
    pub cells: Vec<Cell>,
}

impl EntityInstance {
    pub fn new(cells: Vec<Cell>) -> Self {
        EntityInstance { cells }
    }

    pub fn all_masked(dim: usize) -> Self {
        EntityInstance { cells: vec![Cell::Masked; dim] }
    }

    /// Count of non-Missing leaves (`D_eff`).
    pub fn effective_dim(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_missing()).count()
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_masked()).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.cells.iter().enumerate().filter(|(_, c)| c.is_masked()).map(|(i, _)| i).collect()
    }
}

/// Options for [`infer_schema_from_csv`].
#[derive(Debug, Clone)]
pub struct InferOptions {
    /// Columns with at most this many distinct strings become categorical.
    pub categorical_cutoff: usize,
    pub missing_sentinel: String,
    /// Per-column kind overrides.
    pub type_hints: HashMap<String, Kind>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { categorical_cutoff: 20, missing_sentinel: "NA".into(), type_hints: HashMap::new() }
    }
}

/// Infer a schema from CSV text whose header row holds dotted leaf paths.
pub fn infer_schema_from_csv(text: &str, opts: &InferOptions) -> Result<EntitySchema> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::data("csv has zero columns"));
    }
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("ragged or malformed csv at row {}: {e}", row + 1)))?;
        if rec.len() != header.len() {
            return Err(Error::data(format!("ragged csv: row {} has {} fields", row + 1, rec.len())));
        }
        for (c, f) in rec.iter().enumerate() {
            columns[c].push(f.to_string());
        }
    }
    let mut leaves = Vec::with_capacity(header.len());
    for (name, values) in header.iter().zip(&columns) {
        let present: Vec<&str> = values
            .iter()
            .map(String::as_str)
            .filter(|v| !v.is_empty() && *v != opts.missing_sentinel)
            .collect();
        let numeric = present.iter().all(|v| v.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false));
        let distinct: BTreeSet<&str> = present.iter().copied().collect();
        let kind = match opts.type_hints.get(name) {
            Some(k) => *k,
            None if numeric => Kind::Numerical,
            None if distinct.len() <= opts.categorical_cutoff => Kind::Categorical,
            None => Kind::Text,
        };
        let leaf_kind = match kind {
            Kind::Numerical => LeafKind::Numerical { normalizer: None },
            Kind::Categorical => LeafKind::Categorical { categories: distinct.iter().map(|s| s.to_string()).collect() },
            Kind::Text => {
                let longest = present.iter().map(|s| s.chars().count()).max().unwrap_or(0);
                let mut spec = TextSpec::default();
                spec.max_length = spec.max_length.max(longest);
                LeafKind::Text(spec)
            }
            Kind::Composite => return Err(Error::schema(format!("column `{name}` cannot be composite"))),
        };
        leaves.push(PropertySpec { path: name.clone(), kind: leaf_kind });
    }
    EntitySchema::from_leaves(leaves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn launch_doc() -> &'static str {
        r#"{"kind":"composite","children":[
            {"name":"launch","kind":"composite","children":[
                {"name":"day","kind":"numerical"},
                {"name":"month","kind":"numerical"},
                {"name":"year","kind":"numerical"}]},
            {"name":"oem","kind":"categorical","categories":["a","b"]}]}"#
    }

    #[test]
    fn flat_two_leaf_schema() {
        let s = EntitySchema::load(
            r#"{"kind":"composite","children":[{"name":"x","kind":"numerical"},{"name":"y","kind":"numerical"}]}"#,
        )
        .unwrap();
        assert_eq!(s.dim(), 2);
    }

    #[test]
    fn composite_paths_are_enumerated_in_order() {
        let s = EntitySchema::load(launch_doc()).unwrap();
        let paths: Vec<&str> = s.leaves().iter().map(|l| l.path.as_str()).collect();
        assert_eq!(paths, ["launch.day", "launch.month", "launch.year", "oem"]);
        assert_eq!(EntitySchema::load(launch_doc()).unwrap(), s);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let err = EntitySchema::load(
            r#"{"kind":"composite","children":[{"name":"x","kind":"numerical"},{"name":"x","kind":"categorical","categories":["a"]}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn empty_categories_and_unknown_kind_rejected() {
        assert!(EntitySchema::load(r#"{"kind":"composite","children":[{"name":"c","kind":"categorical","categories":[]}]}"#).is_err());
        assert!(EntitySchema::load(r#"{"kind":"composite","children":[{"name":"c","kind":"date"}]}"#).is_err());
        assert!(EntitySchema::load(r#"{"kind":"composite","children":[{"name":"c","kind":"composite","children":[]}]}"#).is_err());
    }

    #[test]
    fn save_load_is_bit_exact() {
        let s = EntitySchema::load(launch_doc()).unwrap();
        let train = vec![
            EntityInstance::new(vec![
                Cell::Present(Value::Num(0.1)),
                Cell::Present(Value::Num(3.0)),
                Cell::Present(Value::Num(1999.0)),
                Cell::Missing,
            ]),
            EntityInstance::new(vec![
                Cell::Present(Value::Num(1.0 / 3.0)),
                Cell::Present(Value::Num(3.0)),
                Cell::Present(Value::Num(2021.0)),
                Cell::Present(Value::Cat(1)),
            ]),
        ];
        let fitted = s.fit_normalizers(&train).unwrap();
        let doc = fitted.save();
        let back = EntitySchema::load(&doc).unwrap();
        assert_eq!(back, fitted);
        assert_eq!(back.save(), doc);
        assert_eq!(back.fingerprint(), s.fingerprint());
        assert!(back.leaf(1).normalizer().unwrap().constant);
    }

    #[test]
    fn infer_kinds_from_csv() {
        let csv = "num,cat,txt\n1.5,a,w0\n2.0,b,w1\n,a,w2\n";
        let mut opts = InferOptions::default();
        opts.categorical_cutoff = 2;
        let s = infer_schema_from_csv(csv, &opts).unwrap();
        assert_eq!(s.leaf(0).kind.kind(), Kind::Numerical);
        assert_eq!(s.leaf(1).categories().unwrap(), ["a", "b"]);
        assert_eq!(s.leaf(2).kind.kind(), Kind::Text);
        assert_eq!(s.parse_cell(0, "", "NA").unwrap(), Cell::Missing);
        assert_eq!(s.parse_cell(0, "NA", "NA").unwrap(), Cell::Missing);
    }

    #[test]
    fn infer_text_when_many_distinct() {
        let mut csv = String::from("name\n");
        for i in 0..30 {
            csv.push_str(&format!("item{i}\n"));
        }
        let s = infer_schema_from_csv(&csv, &InferOptions::default()).unwrap();
        assert_eq!(s.leaf(0).kind.kind(), Kind::Text);
    }

    #[test]
    fn type_hints_override() {
        let mut opts = InferOptions::default();
        opts.type_hints.insert("code".into(), Kind::Categorical);
        let s = infer_schema_from_csv("code\n1\n2\n1\n", &opts).unwrap();
        assert_eq!(s.leaf(0).categories().unwrap(), ["1", "2"]);
    }

    #[test]
    fn ragged_and_empty_csv_rejected() {
        assert!(infer_schema_from_csv("a,b\n1,2\n3\n", &InferOptions::default()).is_err());
        assert!(infer_schema_from_csv("", &InferOptions::default()).is_err());
    }

    fn numeric_schema() -> EntitySchema {
        EntitySchema::from_leaves(vec![PropertySpec { path: "x".into(), kind: LeafKind::Numerical { normalizer: None } }])
            .unwrap()
    }

    fn num(x: f64) -> EntityInstance {
        EntityInstance::new(vec![Cell::Present(Value::Num(x))])
    }

    #[test]
    fn fit_min_max() {
        let s = numeric_schema().fit_normalizers(&[num(2.0), num(4.0), num(6.0)]).unwrap();
        let n = s.leaf(0).normalizer().unwrap();
        assert_eq!((n.min, n.max, n.constant), (2.0, 6.0, false));

        let s = numeric_schema().fit_normalizers(&[num(5.0), num(5.0)]).unwrap();
        let n = *s.leaf(0).normalizer().unwrap();
        assert!(n.constant);
        assert_eq!(n.normalize(17.0), 0.0);
        assert_eq!(n.denormalize(0.0), 5.0);

        let s = numeric_schema().fit_normalizers(&[num(-1.0), num(3.0)]).unwrap();
        assert_eq!(s.normalize(&num(1.0)).unwrap(), num(0.5));
    }

    #[test]
    fn fit_requires_present_values() {
        let e = EntityInstance::new(vec![Cell::Missing]);
        assert!(numeric_schema().fit_normalizers(&[e]).is_err());
        assert!(numeric_schema().fit_normalizers(&[]).is_err());
    }

    #[test]
    fn normalize_needs_fit_and_extrapolates() {
        assert!(numeric_schema().normalize(&num(1.0)).is_err());
        let s = numeric_schema().fit_normalizers(&[num(0.0), num(10.0)]).unwrap();
        assert_eq!(s.normalize(&num(10.0)).unwrap(), num(1.0));
        assert_eq!(s.normalize(&num(20.0)).unwrap(), num(2.0));
        let missing = EntityInstance::new(vec![Cell::Missing]);
        assert_eq!(s.normalize(&missing).unwrap(), missing);
    }

    #[test]
    fn text_codec() {
        let t = TextSpec::default();
        let ids = t.encode("Galaxy S").unwrap();
        assert_eq!(t.decode(&ids), "Galaxy S");
        assert!(t.encode("é").is_err());
        assert!(t.encode(&"a".repeat(33)).is_err());
    }
}
