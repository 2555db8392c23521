//! Multi-relational knowledge-graph store.
//!
//! A [`KnowledgeGraph`] is immutable once built. It owns an entity registry
//! (ids may have gaps), a dense relation registry, a deduplicated triple set
//! and per-`(entity, relation)` adjacency. Graphs come from the TSV/JSONL
//! ingestion formats ([`load_graph`]) or from fusing an item graph with a
//! concept graph ([`merge_graphs`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label of the relation added by [`merge_graphs`].
pub const ALIGNED_TO: &str = "aligned_to";

/// Suffix of relations materialized by [`KnowledgeGraph::with_inverse_relations`].
pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Item,
    Attribute,
    Concept,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub id: RelationId,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unknown entity id {0}")]
    UnknownEntity(EntityId),
    #[error("unknown relation id {0}")]
    UnknownRelation(RelationId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

/// Simple lowercase folding used for names, aliases and mention matching.
pub fn fold_case(s: &str) -> String {
    s.to_lowercase()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphRecord {
    entities: Vec<Entity>,
    relations: Vec<RelationType>,
    triples: Vec<Triple>,
}

/// Immutable multi-relational graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    index: HashMap<EntityId, usize>,
    relations: Vec<RelationType>,
    relation_by_label: HashMap<String, RelationId>,
    triples: BTreeSet<Triple>,
    adjacency: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
    incidence: HashMap<EntityId, Vec<Incident>>,
    lexicon: Vec<LexiconEntry>,
}

/// An edge seen from one endpoint. `inverse` is set when the viewing entity
/// is the tail of the stored triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Incident {
    pub other: EntityId,
    pub relation: RelationId,
    pub inverse: bool,
}

#[derive(Debug, Clone)]
struct LexiconEntry {
    pattern: Vec<char>,
    entity: EntityId,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.triples == other.triples
    }
}

impl TryFrom<GraphRecord> for KnowledgeGraph {
    type Error = KgError;

    fn try_from(r: GraphRecord) -> Result<Self> {
        KnowledgeGraph::from_parts(r.entities, r.relations, r.triples)
    }
}

impl From<KnowledgeGraph> for GraphRecord {
    fn from(g: KnowledgeGraph) -> Self {
        GraphRecord {
            triples: g.triples.into_iter().collect(),
            entities: g.entities,
            relations: g.relations,
        }
    }
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self::from_parts(Vec::new(), Vec::new(), Vec::new()).expect("empty graph is valid")
    }
}

impl KnowledgeGraph {
    /// Builds a graph, validating every registry and triple invariant.
    ///
    /// Relation ids must be exactly `0..relations.len()` in order. Duplicate
    /// triples are collapsed.
    pub fn from_parts(
        entities: Vec<Entity>,
        relations: Vec<RelationType>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if e.name.trim().is_empty() {
                return Err(KgError::Integrity(format!("entity {} has an empty name", e.id)));
            }
            if index.insert(e.id, i).is_some() {
                return Err(KgError::Integrity(format!("duplicate entity id {}", e.id)));
            }
        }
        validate_names(&entities)?;

        let mut relation_by_label = HashMap::with_capacity(relations.len());
        for (i, r) in relations.iter().enumerate() {
            if r.id.0 as usize != i {
                return Err(KgError::Integrity(format!(
                    "relation ids must be dense: found id {} at position {i}",
                    r.id
                )));
            }
            if relation_by_label.insert(r.label.clone(), r.id).is_some() {
                return Err(KgError::Integrity(format!("duplicate relation label {:?}", r.label)));
            }
        }

        let mut set = BTreeSet::new();
        let mut adjacency: HashMap<(EntityId, RelationId), BTreeSet<EntityId>> = HashMap::new();
        for t in triples {
            for id in [t.head, t.tail] {
                if !index.contains_key(&id) {
                    return Err(KgError::Integrity(format!("triple references unknown entity {id}")));
                }
            }
            let Some(rel) = relations.get(t.relation.0 as usize) else {
                return Err(KgError::Integrity(format!(
                    "triple references unknown relation {}",
                    t.relation
                )));
            };
            if rel.label == ALIGNED_TO && t.head == t.tail {
                return Err(KgError::Integrity(format!("self-alignment on entity {}", t.head)));
            }
            if set.insert(t) {
                adjacency.entry((t.head, t.relation)).or_default().insert(t.tail);
            }
        }

        let mut incidence: HashMap<EntityId, Vec<Incident>> = HashMap::new();
        for t in &set {
            if t.head == t.tail {
                continue;
            }
            incidence
                .entry(t.head)
                .or_default()
                .push(Incident { other: t.tail, relation: t.relation, inverse: false });
            incidence
                .entry(t.tail)
                .or_default()
                .push(Incident { other: t.head, relation: t.relation, inverse: true });
        }
        for list in incidence.values_mut() {
            list.sort();
        }

        let lexicon = build_lexicon(&entities);
        Ok(Self {
            entities,
            index,
            relations,
            relation_by_label,
            triples: set,
            adjacency,
            incidence,
            lexicon,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    /// Triples in `(head, relation, tail)` order.
    pub fn triples(&self) -> impl ExactSizeIterator<Item = &Triple> + '_ {
        self.triples.iter()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn contains_triple(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    /// Registry position of an entity; this is its row in an entity table.
    pub fn entity_index(&self, id: EntityId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entity_index(id).map(|i| &self.entities[i])
    }

    pub fn relation(&self, id: RelationId) -> Option<&RelationType> {
        self.relations.get(id.0 as usize)
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_by_label.get(label).copied()
    }

    /// Entity name, or the decimal id for unregistered ids.
    pub fn name_of(&self, id: EntityId) -> String {
        self.entity(id).map_or_else(|| id.to_string(), |e| e.name.clone())
    }

    pub fn items(&self) -> impl Iterator<Item = &Entity> + '_ {
        self.entities.iter().filter(|e| e.kind == EntityKind::Item)
    }

    /// Tails of `(e, r, ·)`, or of `(e, ·, ·)` over every relation when `r` is `None`.
    pub fn neighbors(&self, e: EntityId, r: Option<RelationId>) -> Result<BTreeSet<EntityId>> {
        if !self.index.contains_key(&e) {
            return Err(KgError::UnknownEntity(e));
        }
        match r {
            Some(r) => {
                if self.relation(r).is_none() {
                    return Err(KgError::UnknownRelation(r));
                }
                Ok(self.adjacency.get(&(e, r)).cloned().unwrap_or_default())
            }
            None => {
                let mut out = BTreeSet::new();
                for rel in &self.relations {
                    if let Some(ts) = self.adjacency.get(&(e, rel.id)) {
                        out.extend(ts.iter().copied());
                    }
                }
                Ok(out)
            }
        }
    }

    /// Edges touching `e` in either direction, sorted by (other, relation,
    /// forward before inverse). Self-loops are omitted.
    pub fn incident(&self, e: EntityId) -> &[Incident] {
        self.incidence.get(&e).map_or(&[], Vec::as_slice)
    }

    /// Returns a graph with one extra relation `<label>_inv` per relation and
    /// the reversed copy of every triple. The entity registry is unchanged.
    pub fn with_inverse_relations(&self) -> Result<Self> {
        let base = self.relations.len() as u32;
        let mut relations = self.relations.clone();
        for r in &self.relations {
            relations.push(RelationType {
                id: RelationId(base + r.id.0),
                label: format!("{}{INVERSE_SUFFIX}", r.label),
            });
        }
        let reversed = self.triples.iter().map(|t| Triple {
            head: t.tail,
            relation: RelationId(base + t.relation.0),
            tail: t.head,
        });
        let triples: Vec<Triple> = self.triples.iter().copied().chain(reversed).collect();
        Self::from_parts(self.entities.clone(), relations, triples)
    }

    /// Writes the ingestion formats back out. Triples are ordered by relation
    /// id so relation ids survive a reload unchanged.
    pub fn write_triples<W: Write>(&self, mut out: W) -> Result<()> {
        let mut ts: Vec<&Triple> = self.triples.iter().collect();
        ts.sort_by_key(|t| (t.relation, t.head, t.tail));
        for t in ts {
            writeln!(out, "{}\t{}\t{}", t.head, self.relations[t.relation.0 as usize].label, t.tail)?;
        }
        Ok(())
    }

    pub fn write_entities<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entities {
            let line = serde_json::to_string(e).map_err(|err| KgError::Integrity(err.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn validate_names(entities: &[Entity]) -> Result<()> {
    let mut names: HashMap<(EntityKind, String), EntityId> = HashMap::new();
    let mut any_name: HashMap<String, Vec<EntityId>> = HashMap::new();
    for e in entities {
        let folded = fold_case(&e.name);
        if let Some(prev) = names.insert((e.kind, folded.clone()), e.id) {
            return Err(KgError::Integrity(format!(
                "entities {prev} and {} share the name {:?}",
                e.id, e.name
            )));
        }
        any_name.entry(folded).or_default().push(e.id);
    }
    for e in entities {
        for alias in &e.aliases {
            if let Some(owners) = any_name.get(&fold_case(alias)) {
                if let Some(other) = owners.iter().find(|&&o| o != e.id) {
                    return Err(KgError::Integrity(format!(
                        "alias {alias:?} of entity {} collides with the name of entity {other}",
                        e.id
                    )));
                }
            }
        }
    }
    Ok(())
}

fn build_lexicon(entities: &[Entity]) -> Vec<LexiconEntry> {
    let mut out = Vec::new();
    for e in entities.iter().filter(|e| e.kind != EntityKind::Item) {
        for surface in std::iter::once(&e.name).chain(e.aliases.iter()) {
            let pattern: Vec<char> = fold_case(surface).chars().collect();
            if !pattern.is_empty() {
                out.push(LexiconEntry { pattern, entity: e.id });
            }
        }
    }
    // longest first, then lowest id: the first hit at a position wins
    out.sort_by(|a, b| b.pattern.len().cmp(&a.pattern.len()).then(a.entity.cmp(&b.entity)));
    out
}

fn parse_err(source_name: &str, line: usize, message: impl Into<String>) -> KgError {
    KgError::Parse {
        source_name: source_name.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses the entity JSONL format, one record per line. Blank lines are skipped.
pub fn read_entities<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<Entity>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Entity =
            serde_json::from_str(&line).map_err(|err| parse_err(source_name, i + 1, err.to_string()))?;
        out.push(e);
    }
    Ok(out)
}

/// One parsed row of the triples TSV, relation still as a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriple {
    pub head: EntityId,
    pub relation: String,
    pub tail: EntityId,
    pub line: usize,
}

pub fn read_triples<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(
                source_name,
                lineno,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        let id = |s: &str| -> Result<EntityId> {
            s.trim()
                .parse::<u32>()
                .map(EntityId)
                .map_err(|_| parse_err(source_name, lineno, format!("invalid entity id {s:?}")))
        };
        let label = cols[1].trim();
        if label.is_empty() {
            return Err(parse_err(source_name, lineno, "empty relation label"));
        }
        out.push(RawTriple {
            head: id(cols[0])?,
            relation: label.to_string(),
            tail: id(cols[2])?,
            line: lineno,
        });
    }
    Ok(out)
}

/// Reads an alignment TSV of `item_entity_id<TAB>concept_entity_id` pairs.
pub fn read_alignment<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<(EntityId, EntityId)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.trim_end().split('\t').collect();
        if cols.len() != 2 {
            return Err(parse_err(source_name, lineno, "expected 2 tab-separated columns"));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map(EntityId)
                .map_err(|_| parse_err(source_name, lineno, format!("invalid entity id {s:?}")))
        };
        out.push((parse(cols[0])?, parse(cols[1])?));
    }
    Ok(out)
}

/// Builds a graph from the two ingestion sources. Relation ids are assigned
/// in order of first appearance in the triple source.
pub fn load_graph<T: BufRead, E: BufRead>(triples_source: T, entities_source: E) -> Result<KnowledgeGraph> {
    let entities = read_entities(entities_source, "entities")?;
    let raw = read_triples(triples_source, "triples")?;
    let known: BTreeSet<EntityId> = entities.iter().map(|e| e.id).collect();

    let mut relations: Vec<RelationType> = Vec::new();
    let mut by_label: HashMap<String, RelationId> = HashMap::new();
    let mut triples = Vec::with_capacity(raw.len());
    for r in raw {
        for id in [r.head, r.tail] {
            if !known.contains(&id) {
                return Err(KgError::Integrity(format!(
                    "triples:{}: dangling reference to entity {id}",
                    r.line
                )));
            }
        }
        let rel = *by_label.entry(r.relation.clone()).or_insert_with(|| {
            let id = RelationId(relations.len() as u32);
            relations.push(RelationType { id, label: r.relation.clone() });
            id
        });
        triples.push(Triple { head: r.head, relation: rel, tail: r.tail });
    }
    KnowledgeGraph::from_parts(entities, relations, triples)
}

/// Result of fusing an item graph with a concept graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedGraph {
    pub graph: KnowledgeGraph,
    /// Added to every concept-graph entity id.
    pub concept_offset: u32,
    pub aligned_to: RelationId,
}

impl MergedGraph {
    pub fn concept_id(&self, original: EntityId) -> EntityId {
        EntityId(original.0 + self.concept_offset)
    }
}

/// Fuses two graphs into one joint graph.
///
/// Entities form a disjoint union with concept ids shifted past the largest
/// item-graph id. Relations are unioned by label and a fresh `aligned_to`
/// relation links every alignment pair in both directions.
pub fn merge_graphs(
    g_item: &KnowledgeGraph,
    g_concept: &KnowledgeGraph,
    alignment: &[(EntityId, EntityId)],
) -> Result<MergedGraph> {
    for &(a, b) in alignment {
        if g_item.entity(a).is_none() {
            return Err(KgError::Integrity(format!("alignment references unknown item-graph entity {a}")));
        }
        if g_concept.entity(b).is_none() {
            return Err(KgError::Integrity(format!(
                "alignment references unknown concept-graph entity {b}"
            )));
        }
    }
    let offset = g_item.entities.iter().map(|e| e.id.0 + 1).max().unwrap_or(0);

    let mut entities = g_item.entities.clone();
    entities.extend(g_concept.entities.iter().map(|e| Entity {
        id: EntityId(
            e.id.0
                .checked_add(offset)
                .expect("entity id space exhausted while merging"),
        ),
        ..e.clone()
    }));

    let mut relations = g_item.relations.clone();
    let mut by_label: BTreeMap<String, RelationId> =
        relations.iter().map(|r| (r.label.clone(), r.id)).collect();
    let mut intern = |label: &str, relations: &mut Vec<RelationType>| -> RelationId {
        *by_label.entry(label.to_string()).or_insert_with(|| {
            let id = RelationId(relations.len() as u32);
            relations.push(RelationType { id, label: label.to_string() });
            id
        })
    };
    let concept_rel: Vec<RelationId> = g_concept
        .relations
        .iter()
        .map(|r| intern(&r.label, &mut relations))
        .collect();
    let aligned_to = intern(ALIGNED_TO, &mut relations);

    let mut triples: Vec<Triple> = g_item.triples.iter().copied().collect();
    triples.extend(g_concept.triples.iter().map(|t| Triple {
        head: EntityId(t.head.0 + offset),
        relation: concept_rel[t.relation.0 as usize],
        tail: EntityId(t.tail.0 + offset),
    }));
    for &(a, b) in alignment {
        let b = EntityId(b.0 + offset);
        triples.push(Triple { head: a, relation: aligned_to, tail: b });
        triples.push(Triple { head: b, relation: aligned_to, tail: a });
    }

    Ok(MergedGraph {
        graph: KnowledgeGraph::from_parts(entities, relations, triples)?,
        concept_offset: offset,
        aligned_to,
    })
}

/// A linked span of source text. Offsets are UTF-8 byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity: EntityId,
}

/// A `@<id>` placeholder that did not resolve to a registered item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlinkedToken {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedText {
    pub mentions: Vec<Mention>,
    pub unlinked: Vec<UnlinkedToken>,
}

impl LinkedText {
    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.mentions.iter().map(|m| m.entity)
    }
}

/// Scans `text` for `@<digits>` placeholders.
pub fn find_placeholders(text: &str) -> Vec<(usize, usize, Option<u32>)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if let Some(end) = placeholder_end(bytes, i) {
            out.push((i, end, text[i + 1..end].parse().ok()));
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

/// Replaces registered `@<id>` placeholders with entity names.
pub fn render_placeholders(text: &str, g: &KnowledgeGraph) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (start, end, id) in find_placeholders(text) {
        if let Some(e) = id.and_then(|id| g.entity(EntityId(id))) {
            out.push_str(&text[last..start]);
            out.push_str(&e.name);
            last = end;
        }
    }
    out.push_str(&text[last..]);
    out
}

fn placeholder_end(bytes: &[u8], i: usize) -> Option<usize> {
    if bytes[i] != b'@' {
        return None;
    }
    let digits = bytes[i + 1..].iter().take_while(|b| b.is_ascii_digit()).count();
    (digits > 0).then_some(i + 1 + digits)
}

/// Links item placeholders and attribute/concept names in `text`.
///
/// Matching is leftmost-longest over case-folded text at word boundaries.
/// Equal-length candidates resolve to the lowest entity id.
pub fn link_mentions(text: &str, g: &KnowledgeGraph) -> LinkedText {
    // folded[k] came from the source char starting at byte origin[k]
    let mut folded: Vec<char> = Vec::with_capacity(text.len());
    let mut origin: Vec<usize> = Vec::with_capacity(text.len());
    for (b, c) in text.char_indices() {
        for lc in c.to_lowercase() {
            folded.push(lc);
            origin.push(b);
        }
    }
    let byte_at = |k: usize| if k < origin.len() { origin[k] } else { text.len() };
    let starts_char = |k: usize| k == 0 || k == origin.len() || origin[k] != origin[k - 1];
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let boundary_before = |b: usize| text[..b].chars().next_back().is_none_or(|c| !is_word(c));
    let boundary_after = |b: usize| text[b..].chars().next().is_none_or(|c| !is_word(c));

    let mut out = LinkedText::default();
    let bytes = text.as_bytes();
    let mut k = 0;
    while k < folded.len() {
        let b = origin[k];
        if !starts_char(k) {
            k += 1;
            continue;
        }
        if let Some(end) = placeholder_end(bytes, b) {
            let surface = text[b..end].to_string();
            let id = text[b + 1..end].parse::<u32>().ok().map(EntityId);
            match id.and_then(|id| g.entity(id)) {
                Some(e) if e.kind == EntityKind::Item => out.mentions.push(Mention {
                    start: b,
                    end,
                    surface,
                    entity: e.id,
                }),
                _ => out.unlinked.push(UnlinkedToken { start: b, end, surface }),
            }
            while k < folded.len() && origin[k] < end {
                k += 1;
            }
            continue;
        }
        let mut hit = None;
        if boundary_before(b) {
            for entry in &g.lexicon {
                let n = entry.pattern.len();
                if k + n <= folded.len()
                    && folded[k..k + n] == entry.pattern[..]
                    && starts_char(k + n)
                    && boundary_after(byte_at(k + n))
                {
                    hit = Some((n, entry.entity));
                    break;
                }
            }
        }
        match hit {
            Some((n, entity)) => {
                let end = byte_at(k + n);
                out.mentions.push(Mention {
                    start: b,
                    end,
                    surface: text[b..end].to_string(),
                    entity,
                });
                k += n;
            }
            None => k += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: u32, name: &str, kind: EntityKind) -> Entity {
        Entity { id: EntityId(id), name: name.into(), kind, aliases: vec![] }
    }

    fn load(triples: &str, entities: &[Entity]) -> Result<KnowledgeGraph> {
        let ents: String = entities
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect();
        load_graph(triples.as_bytes(), ents.as_bytes())
    }

    #[test]
    fn empty_sources_give_empty_graph() {
        let g = load_graph("".as_bytes(), "".as_bytes()).unwrap();
        assert_eq!((g.num_entities(), g.num_relations(), g.num_triples()), (0, 0, 0));
    }

    #[test]
    fn movie_linked_to_genre() {
        let g = load(
            "0\thas_genre\t1\n",
            &[ent(0, "No Time to Die", EntityKind::Item), ent(1, "Action", EntityKind::Attribute)],
        )
        .unwrap();
        assert_eq!(g.num_entities(), 2);
        assert_eq!(g.num_triples(), 1);
        let r = g.relation_id("has_genre").unwrap();
        assert_eq!(g.neighbors(EntityId(0), Some(r)).unwrap(), BTreeSet::from([EntityId(1)]));
    }

    #[test]
    fn duplicate_triples_collapse() {
        let g = load(
            "# comment\n0\tr\t1\n0\tr\t1\n",
            &[ent(0, "a", EntityKind::Item), ent(1, "b", EntityKind::Attribute)],
        )
        .unwrap();
        assert_eq!(g.num_triples(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load("0\tr\t1\n0\tr\n", &[ent(0, "a", EntityKind::Item), ent(1, "b", EntityKind::Item)])
            .unwrap_err();
        match err {
            KgError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = load_graph("".as_bytes(), "{\"id\": 0}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, KgError::Parse { line: 1, .. }));
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let err = load("0\tr\t42\n", &[ent(0, "a", EntityKind::Item)]).unwrap_err();
        assert!(matches!(err, KgError::Integrity(_)));
        assert!(err.to_string().contains("42"));
    }

    #[test]
    fn name_and_alias_collisions_rejected() {
        let err = load("", &[ent(0, "Action", EntityKind::Attribute), ent(1, "action", EntityKind::Attribute)]);
        assert!(err.is_err());
        // same name, different kinds is allowed
        load("", &[ent(0, "Dune", EntityKind::Item), ent(1, "dune", EntityKind::Concept)]).unwrap();
        let mut a = ent(0, "Sci-Fi", EntityKind::Attribute);
        a.aliases.push("Action".into());
        assert!(load("", &[a, ent(1, "Action", EntityKind::Attribute)]).is_err());
    }

    fn three_triples() -> KnowledgeGraph {
        load(
            "0\tr0\t1\n0\tr0\t2\n0\tr1\t1\n",
            &[
                ent(0, "m", EntityKind::Item),
                ent(1, "x", EntityKind::Attribute),
                ent(2, "y", EntityKind::Attribute),
                ent(3, "lonely", EntityKind::Item),
            ],
        )
        .unwrap()
    }

    #[test]
    fn neighbors_by_relation_and_union() {
        let g = three_triples();
        let r0 = g.relation_id("r0").unwrap();
        assert_eq!(g.neighbors(EntityId(0), Some(r0)).unwrap(), BTreeSet::from([EntityId(1), EntityId(2)]));
        // union oracle: enumerate all triples with head 0
        let oracle: BTreeSet<EntityId> =
            g.triples().filter(|t| t.head == EntityId(0)).map(|t| t.tail).collect();
        assert_eq!(g.neighbors(EntityId(0), None).unwrap(), oracle);
        assert!(g.neighbors(EntityId(3), None).unwrap().is_empty());
        assert!(matches!(g.neighbors(EntityId(9), None), Err(KgError::UnknownEntity(_))));
        assert!(matches!(
            g.neighbors(EntityId(0), Some(RelationId(7))),
            Err(KgError::UnknownRelation(_))
        ));
    }

    #[test]
    fn serialization_reloads_identically() {
        // r1 appears first in the file but gets written after r0 on output
        let g = load(
            "0\tr1\t1\n0\tr0\t2\n2\tr1\t1\n",
            &[ent(5, "m", EntityKind::Item), ent(0, "n", EntityKind::Item), ent(1, "x", EntityKind::Attribute), ent(2, "y", EntityKind::Concept)],
        )
        .unwrap();
        let mut t = Vec::new();
        let mut e = Vec::new();
        g.write_triples(&mut t).unwrap();
        g.write_entities(&mut e).unwrap();
        let again = load_graph(t.as_slice(), e.as_slice()).unwrap();
        assert_eq!(g, again);
        let json = serde_json::to_string(&g).unwrap();
        let back: KnowledgeGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn merge_counts() {
        let gi = load("0\thas_genre\t1\n", &[ent(0, "m", EntityKind::Item), ent(1, "Action", EntityKind::Attribute)]).unwrap();
        let gc = load(
            "0\trelated_to\t1\n1\tis_a\t2\n",
            &[ent(0, "action", EntityKind::Concept), ent(1, "fight", EntityKind::Concept), ent(2, "event", EntityKind::Concept)],
        )
        .unwrap();
        let m = merge_graphs(&gi, &gc, &[(EntityId(1), EntityId(0))]).unwrap();
        assert_eq!(m.graph.num_entities(), 5);
        assert_eq!(m.graph.num_triples(), 1 + 2 + 2);
        assert_eq!(m.concept_offset, 2);
        assert_eq!(m.graph.relations().last().unwrap().label, ALIGNED_TO);
        assert!(m.graph.contains_triple(&Triple { head: EntityId(1), relation: m.aligned_to, tail: EntityId(2) }));
        assert!(m.graph.contains_triple(&Triple { head: EntityId(2), relation: m.aligned_to, tail: EntityId(1) }));
    }

    #[test]
    fn merge_singletons_and_empty_alignment() {
        let gi = load("", &[ent(0, "m", EntityKind::Item)]).unwrap();
        let gc = load("", &[ent(0, "c", EntityKind::Concept)]).unwrap();
        let m = merge_graphs(&gi, &gc, &[(EntityId(0), EntityId(0))]).unwrap();
        assert_eq!(m.graph.num_entities(), 2);
        assert_eq!(m.graph.num_relations(), 1);
        assert_eq!(m.graph.num_triples(), 2);
        let m = merge_graphs(&gi, &gc, &[]).unwrap();
        assert_eq!(m.graph.num_triples(), 0);
        assert!(merge_graphs(&gi, &gc, &[(EntityId(0), EntityId(3))]).is_err());
        assert!(merge_graphs(&gi, &gc, &[(EntityId(4), EntityId(0))]).is_err());
    }

    fn lex_graph() -> KnowledgeGraph {
        let mut sci = ent(3, "Science Fiction", EntityKind::Attribute);
        sci.aliases.push("sci-fi".into());
        load(
            "",
            &[
                ent(111, "Super Troopers", EntityKind::Item),
                ent(1, "Action", EntityKind::Attribute),
                ent(2, "Action Movie", EntityKind::Concept),
                sci,
                ent(4, "Daniel Craig", EntityKind::Attribute),
            ],
        )
        .unwrap()
    }

    #[test]
    fn placeholder_mentions() {
        let g = lex_graph();
        let l = link_mentions("I loved @111 a lot", &g);
        assert_eq!(l.mentions, vec![Mention { start: 8, end: 12, surface: "@111".into(), entity: EntityId(111) }]);
        // unregistered id and non-item id are diagnostics
        let l = link_mentions("@999 and @1", &g);
        assert!(l.mentions.is_empty());
        assert_eq!(l.unlinked.len(), 2);
    }

    #[test]
    fn lexicon_mentions() {
        let g = lex_graph();
        let l = link_mentions("something action packed", &g);
        assert_eq!(l.mentions.len(), 1);
        assert_eq!(l.mentions[0].surface, "action");
        assert_eq!(l.mentions[0].entity, EntityId(1));
        // longest match wins
        let l = link_mentions("An ACTION MOVIE with Daniel Craig, some Sci-Fi!", &g);
        let got: Vec<(&str, u32)> = l.mentions.iter().map(|m| (m.surface.as_str(), m.entity.0)).collect();
        assert_eq!(got, vec![("ACTION MOVIE", 2), ("Daniel Craig", 4), ("Sci-Fi", 3)]);
        // word boundaries
        assert!(link_mentions("transactions", &g).mentions.is_empty());
        assert!(link_mentions("no entities here", &KnowledgeGraph::default()).mentions.is_empty());
    }

    #[test]
    fn equal_length_ties_use_lowest_id() {
        let mut a = ent(9, "Thriller", EntityKind::Attribute);
        a.aliases.push("tense".into());
        let mut b = ent(4, "Suspense", EntityKind::Concept);
        b.aliases.push("TENSE".into());
        let g = KnowledgeGraph::from_parts(vec![a, b], vec![], vec![]).unwrap();
        let l = link_mentions("so tense", &g);
        assert_eq!(l.mentions[0].entity, EntityId(4));
    }

    #[test]
    fn non_ascii_text_keeps_byte_spans() {
        let g = lex_graph();
        let text = "Ünïcode — ACTION ✓";
        let l = link_mentions(text, &g);
        assert_eq!(l.mentions.len(), 1);
        let m = &l.mentions[0];
        assert_eq!(&text[m.start..m.end], "ACTION");
    }
}
