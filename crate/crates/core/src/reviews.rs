//! Review selection, pooling, and fusion into item embeddings.

use std::collections::BTreeMap;
use std::io::BufRead;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{Projection, TextEncoder};
use crate::encoder::EntityTable;
use crate::kg::{EntityId, EntityKind, KnowledgeGraph};

/// Reviews kept per item.
pub const DEFAULT_K_MAX: usize = 30;
/// Whitespace tokens of a review fed to the encoder; the tail is dropped.
pub const MAX_REVIEW_TOKENS: usize = 512;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("review {review_id}: {message}")]
    Encoder { review_id: String, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("reviews:{line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReviewError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    #[serde(rename = "item_id")]
    pub item: EntityId,
    pub review_id: String,
    pub text: String,
    pub helpful: u64,
}

/// Reviews of one item ordered by helpfulness (desc), then review id (asc).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSet {
    pub item: Option<EntityId>,
    pub reviews: Vec<Review>,
}

impl ReviewSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }
}

pub fn select_reviews(raw: &[Review], k_max: usize) -> Result<ReviewSet> {
    let Some(first) = raw.first() else {
        return Ok(ReviewSet::empty());
    };
    if let Some(other) = raw.iter().find(|r| r.item != first.item) {
        return Err(ReviewError::Integrity(format!(
            "reviews for items {} and {} mixed in one selection",
            first.item, other.item
        )));
    }
    let mut reviews = raw.to_vec();
    reviews.sort_by(|a, b| b.helpful.cmp(&a.helpful).then_with(|| a.review_id.cmp(&b.review_id)));
    reviews.truncate(k_max);
    Ok(ReviewSet { item: Some(first.item), reviews })
}

/// Mean review embedding. `empty` marks a set with no reviews.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReviews {
    pub vector: Vec<f64>,
    pub empty: bool,
}

impl PooledReviews {
    pub fn project(&self, proj: &Projection) -> Result<PooledReviews> {
        let vector = proj
            .apply(&self.vector)
            .map_err(|e| ReviewError::Dimension(e.to_string()))?
            .to_vec();
        Ok(PooledReviews { vector, empty: self.empty })
    }
}

pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    text.split_whitespace().take(max_tokens).collect::<Vec<_>>().join(" ")
}

pub fn embed_reviews(rs: &ReviewSet, enc: &dyn TextEncoder) -> Result<PooledReviews> {
    let mut sum = vec![0.0; enc.dim()];
    if rs.is_empty() {
        return Ok(PooledReviews { vector: sum, empty: true });
    }
    for r in &rs.reviews {
        let v = enc
            .encode(&truncate_tokens(&r.text, MAX_REVIEW_TOKENS))
            .map_err(|e| ReviewError::Encoder { review_id: r.review_id.clone(), message: e.to_string() })?;
        if v.len() != sum.len() {
            return Err(ReviewError::Encoder {
                review_id: r.review_id.clone(),
                message: format!("encoder returned width {}, expected {}", v.len(), sum.len()),
            });
        }
        sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
    }
    let n = rs.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(PooledReviews { vector: sum, empty: false })
}

/// `alpha * entity + (1 - alpha) * review`; an empty review pool leaves the entity untouched.
pub fn enrich_entity(entity_vec: &[f64], review: &PooledReviews, alpha: f64) -> Result<Vec<f64>> {
    if entity_vec.len() != review.vector.len() {
        return Err(ReviewError::Dimension(format!(
            "entity width {} vs review width {}",
            entity_vec.len(),
            review.vector.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ReviewError::Dimension(format!("alpha {alpha} outside [0, 1]")));
    }
    if review.empty || alpha == 1.0 {
        return Ok(entity_vec.to_vec());
    }
    Ok(entity_vec
        .iter()
        .zip(&review.vector)
        .map(|(e, r)| alpha * e + (1.0 - alpha) * r)
        .collect())
}

/// Reads the review corpus JSONL.
pub fn read_reviews<R: BufRead>(reader: R) -> Result<Vec<Review>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Review =
            serde_json::from_str(&line).map_err(|e| ReviewError::Parse { line: i + 1, message: e.to_string() })?;
        if r.text.trim().is_empty() {
            return Err(ReviewError::Parse { line: i + 1, message: "empty review text".into() });
        }
        out.push(r);
    }
    Ok(out)
}

/// Groups a corpus by item and selects the top `k_max` per item.
pub fn select_all(raw: &[Review], k_max: usize) -> Result<BTreeMap<EntityId, ReviewSet>> {
    let mut by_item: BTreeMap<EntityId, Vec<Review>> = BTreeMap::new();
    for r in raw {
        by_item.entry(r.item).or_default().push(r.clone());
    }
    by_item
        .into_iter()
        .map(|(item, rs)| Ok((item, select_reviews(&rs, k_max)?)))
        .collect()
}

/// Fuses pooled review vectors into the rows of item entities.
pub fn enrich_table(
    table: &EntityTable,
    g: &KnowledgeGraph,
    reviews: &BTreeMap<EntityId, ReviewSet>,
    enc: &dyn TextEncoder,
    proj: &Projection,
    alpha: f64,
) -> Result<EntityTable> {
    let mut out = table.clone();
    for (&item, rs) in reviews {
        let Some(entity) = g.entity(item) else {
            return Err(ReviewError::Integrity(format!("reviews reference unknown entity {item}")));
        };
        if entity.kind != EntityKind::Item {
            return Err(ReviewError::Integrity(format!("reviews attached to non-item entity {item}")));
        }
        let row = table.row_of(item).expect("table covers the graph");
        let pooled = embed_reviews(rs, enc)?.project(proj)?;
        let current: Array1<f64> = table.row(row).to_owned();
        let fused = enrich_entity(current.as_slice().expect("contiguous"), &pooled, alpha)?;
        out.set_row(row, &fused).map_err(|e| ReviewError::Dimension(e.to_string()))?;
    }
    Ok(out)
}
