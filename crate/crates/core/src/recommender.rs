//! Item scoring, top-K ranking, reasoning-path extraction and scorer fitting.
//!
//! An item's score is
//!
//! ```text
//! score(i) = <state, e_i> + beta * max_{m in mentions} <e_m, e_i> + bias_i
//! ```
//!
//! with the mention term taken as 0 when nothing was mentioned. Mentioned
//! items can be masked to `-inf`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EntityTable;
use crate::kg::{EntityId, EntityKind, KnowledgeGraph, RelationId};

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("entity {0} is not in the entity table")]
    MissingEntity(EntityId),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = RecommendError> = std::result::Result<T, E>;

/// Trainable scoring parameters. `bias[k]` belongs to `items[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub items: Vec<EntityId>,
    pub bias: Vec<f64>,
    pub beta: f64,
    pub mask_mentioned: bool,
}

impl ScorerParams {
    pub fn new(items: Vec<EntityId>, beta: f64, mask_mentioned: bool) -> Self {
        let bias = vec![0.0; items.len()];
        Self { items, bias, beta, mask_mentioned }
    }

    /// Zero bias over every item of `g`, in registry order.
    pub fn for_graph(g: &KnowledgeGraph, beta: f64) -> Self {
        Self::new(candidate_items(g), beta, true)
    }

    fn validate(&self) -> Result<()> {
        if self.bias.len() != self.items.len() {
            return Err(RecommendError::Dimension(format!(
                "{} biases for {} items",
                self.bias.len(),
                self.items.len()
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(RecommendError::Contract("scorer parameters must be finite with beta >= 0".into()));
        }
        Ok(())
    }
}

/// Every `kind = item` entity in registry order.
pub fn candidate_items(g: &KnowledgeGraph) -> Vec<EntityId> {
    g.items().map(|e| e.id).collect()
}

/// Parameter-independent parts of the score for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFeatures {
    pub items: Vec<EntityId>,
    /// `<state, e_i>`
    pub state_term: Vec<f64>,
    /// `max_m <e_m, e_i>`, 0 without mentions
    pub affinity: Vec<f64>,
    pub mentioned: Vec<bool>,
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

pub fn score_features(
    state: ArrayView1<'_, f64>,
    mentions: &BTreeSet<EntityId>,
    table: &EntityTable,
    items: &[EntityId],
) -> Result<ScoreFeatures> {
    if state.len() != table.dim() {
        return Err(RecommendError::Dimension(format!(
            "state width {} vs table width {}",
            state.len(),
            table.dim()
        )));
    }
    let mention_rows = mentions
        .iter()
        .map(|&m| table.get(m).ok_or(RecommendError::MissingEntity(m)))
        .collect::<Result<Vec<_>>>()?;
    let mut f = ScoreFeatures {
        items: items.to_vec(),
        state_term: Vec::with_capacity(items.len()),
        affinity: Vec::with_capacity(items.len()),
        mentioned: Vec::with_capacity(items.len()),
    };
    for &item in items {
        let e = table.get(item).ok_or(RecommendError::MissingEntity(item))?;
        f.state_term.push(dot(state, e));
        let aff = mention_rows.iter().map(|&m| dot(m, e)).fold(f64::NEG_INFINITY, f64::max);
        f.affinity.push(if mention_rows.is_empty() { 0.0 } else { aff });
        f.mentioned.push(mentions.contains(&item));
    }
    Ok(f)
}

impl ScoreFeatures {
    pub fn scores(&self, params: &ScorerParams) -> Scores {
        let values = (0..self.items.len())
            .map(|k| {
                if params.mask_mentioned && self.mentioned[k] {
                    f64::NEG_INFINITY
                } else {
                    self.state_term[k] + params.beta * self.affinity[k] + params.bias[k]
                }
            })
            .collect();
        Scores { items: self.items.clone(), values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub items: Vec<EntityId>,
    pub values: Vec<f64>,
}

pub fn score_entities(
    state: ArrayView1<'_, f64>,
    mentions: &BTreeSet<EntityId>,
    table: &EntityTable,
    params: &ScorerParams,
) -> Result<Scores> {
    params.validate()?;
    Ok(score_features(state, mentions, table, &params.items)?.scores(params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub entity: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub ranked: Vec<RankedItem>,
    pub query_turn: usize,
}

impl Recommendation {
    pub fn top(&self) -> Option<EntityId> {
        self.ranked.first().map(|r| r.entity)
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.ranked.iter().map(|r| r.entity)
    }
}

fn rank_order(a: &RankedItem, b: &RankedItem) -> Ordering {
    b.score.total_cmp(&a.score).then(a.entity.cmp(&b.entity))
}

/// The `k` best finite scores ordered by (score desc, entity id asc).
pub fn recommend_top_k(scores: &Scores, k: usize) -> Recommendation {
    let mut ranked: Vec<RankedItem> = scores
        .items
        .iter()
        .zip(&scores.values)
        .filter(|(_, s)| s.is_finite())
        .map(|(&entity, &score)| RankedItem { entity, score })
        .collect();
    let k = k.min(ranked.len());
    if k < ranked.len() && k > 0 {
        ranked.select_nth_unstable_by(k - 1, rank_order);
    }
    ranked.truncate(k);
    ranked.sort_by(rank_order);
    Recommendation { ranked, query_turn: 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathHop {
    pub relation: RelationId,
    /// Traversed tail to head.
    pub inverse: bool,
    pub entity: EntityId,
}

/// A chain from a mentioned entity to a recommended item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub start: Option<EntityId>,
    pub hops: Vec<PathHop>,
}

impl ReasoningPath {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// Start entity followed by every hop's entity.
    pub fn entity_sequence(&self) -> Vec<EntityId> {
        self.start.into_iter().chain(self.hops.iter().map(|h| h.entity)).collect()
    }

    pub fn end(&self) -> Option<EntityId> {
        self.hops.last().map(|h| h.entity).or(self.start)
    }

    /// One string per hop: `"from —rel→ to"`, inverse hops marked `⁻¹`.
    pub fn render_hops(&self, g: &KnowledgeGraph) -> Vec<String> {
        let mut out = Vec::with_capacity(self.hops.len());
        let mut prev = match self.start {
            Some(s) => s,
            None => return out,
        };
        for hop in &self.hops {
            out.push(format!("{} {} {}", g.name_of(prev), render_relation(g, hop), g.name_of(hop.entity)));
            prev = hop.entity;
        }
        out
    }

    /// The whole chain on one line, or `"none"` for an empty path.
    pub fn render_chain(&self, g: &KnowledgeGraph) -> String {
        let Some(start) = self.start.filter(|_| !self.is_empty()) else {
            return "none".to_string();
        };
        let mut s = g.name_of(start);
        for hop in &self.hops {
            s.push(' ');
            s.push_str(&render_relation(g, hop));
            s.push(' ');
            s.push_str(&g.name_of(hop.entity));
        }
        s
    }
}

fn render_relation(g: &KnowledgeGraph, hop: &PathHop) -> String {
    let label = g.relation(hop.relation).map_or_else(|| hop.relation.to_string(), |r| r.label.clone());
    if hop.inverse {
        format!("—{label}⁻¹→")
    } else {
        format!("—{label}→")
    }
}

pub const DEFAULT_MAX_PATH_LEN: usize = 2;

/// Shortest undirected path (at most `max_len` hops) from any mentioned
/// entity to `rec`.
///
/// Among equally short paths the one with the fewest non-attribute
/// intermediates wins, then the lexicographically smallest entity sequence.
/// Between a fixed pair of entities the lowest relation id is used, forward
/// before inverse.
pub fn extract_reasoning_path(
    g: &KnowledgeGraph,
    mentions: &BTreeSet<EntityId>,
    rec: EntityId,
    max_len: usize,
) -> ReasoningPath {
    if g.entity(rec).is_none() {
        return ReasoningPath::default();
    }
    let starts: Vec<EntityId> = mentions.iter().copied().filter(|m| g.entity(*m).is_some()).collect();
    if starts.is_empty() {
        return ReasoningPath::default();
    }
    if starts.contains(&rec) {
        return ReasoningPath { start: Some(rec), hops: vec![] };
    }

    // distances to rec, level by level
    let mut dist: HashMap<EntityId, usize> = HashMap::from([(rec, 0)]);
    let mut levels: Vec<Vec<EntityId>> = vec![vec![rec]];
    for d in 1..=max_len {
        let mut next = BTreeSet::new();
        for &x in &levels[d - 1] {
            for inc in g.incident(x) {
                if !dist.contains_key(&inc.other) {
                    next.insert(inc.other);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        for &y in &next {
            dist.insert(y, d);
        }
        levels.push(next.into_iter().collect());
    }
    let Some(best_d) = starts.iter().filter_map(|m| dist.get(m)).min().copied() else {
        return ReasoningPath::default();
    };

    let penalty = |e: EntityId| -> usize {
        usize::from(e != rec && g.entity(e).is_some_and(|x| x.kind != EntityKind::Attribute))
    };
    // best[x] = (non-attribute intermediates after x, sequence from x to rec)
    let mut best: HashMap<EntityId, (usize, Vec<EntityId>)> = HashMap::from([(rec, (0, vec![rec]))]);
    for (d, level) in levels.iter().enumerate().take(best_d + 1).skip(1) {
        for &x in level {
            let mut choice: Option<(usize, Vec<EntityId>)> = None;
            for inc in g.incident(x) {
                if dist.get(&inc.other) != Some(&(d - 1)) {
                    continue;
                }
                let (count, seq) = &best[&inc.other];
                let cand = (count + penalty(inc.other), seq.clone());
                if choice.as_ref().is_none_or(|c| cand < *c) {
                    choice = Some(cand);
                }
            }
            let (count, mut seq) = choice.expect("node at distance d has a neighbor at d - 1");
            seq.insert(0, x);
            best.insert(x, (count, seq));
        }
    }
    let (_, seq) = starts
        .iter()
        .filter(|m| dist.get(m) == Some(&best_d))
        .map(|m| best[m].clone())
        .min()
        .expect("some start is at the best distance");

    let hops = seq
        .windows(2)
        .map(|w| {
            let inc = g
                .incident(w[0])
                .iter()
                .find(|inc| inc.other == w[1])
                .expect("consecutive path entities are adjacent");
            PathHop { relation: inc.relation, inverse: inc.inverse, entity: w[1] }
        })
        .collect();
    ReasoningPath { start: Some(seq[0]), hops }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub train_beta: bool,
    #[serde(default = "default_init_beta")]
    pub init_beta: f64,
}

fn default_true() -> bool {
    true
}
fn default_init_beta() -> f64 {
    1.0
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1.0, seed: 0, train_beta: true, init_beta: 1.0 }
    }
}

/// One labeled query: the features at a gold turn and the gold item's position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub features: ScoreFeatures,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub bias: Vec<f64>,
    pub beta: f64,
}

/// Mean softmax cross-entropy over examples and its gradient in (bias, beta).
/// Masked items are excluded from the softmax.
pub fn loss_and_grad(params: &ScorerParams, examples: &[TrainingExample]) -> (f64, Gradient) {
    let n_items = params.items.len();
    let mut grad = Gradient { bias: vec![0.0; n_items], beta: 0.0 };
    if examples.is_empty() {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    let mut probs = vec![0.0; n_items];
    for ex in examples {
        let s = ex.features.scores(params).values;
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in probs.iter_mut().zip(&s) {
            *p = if v.is_finite() { (v - max).exp() } else { 0.0 };
            z += *p;
        }
        loss += z.ln() + max - s[ex.gold];
        for (k, p) in probs.iter_mut().enumerate() {
            *p /= z;
            let y = if k == ex.gold { 1.0 } else { 0.0 };
            grad.bias[k] += *p - y;
            grad.beta += (*p - y) * ex.features.affinity[k];
        }
    }
    let n = examples.len() as f64;
    grad.bias.iter_mut().for_each(|g| *g /= n);
    grad.beta /= n;
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: ScorerParams,
    /// Training loss before the first epoch and after each epoch.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent with step halving, so the training loss
/// never increases from one epoch to the next.
pub fn fit(examples: &[TrainingExample], initial: ScorerParams, cfg: &FitConfig) -> Result<FitOutcome> {
    initial.validate()?;
    if examples.is_empty() {
        return Err(RecommendError::Contract("no labeled turns to fit on".into()));
    }
    for ex in examples {
        if ex.features.items != initial.items || ex.gold >= initial.items.len() {
            return Err(RecommendError::Contract("training example does not match the item set".into()));
        }
        if initial.mask_mentioned && ex.features.mentioned[ex.gold] {
            return Err(RecommendError::Contract(format!(
                "gold item {} is masked as mentioned",
                initial.items[ex.gold]
            )));
        }
    }
    let mut params = initial;
    let (mut loss, mut grad) = loss_and_grad(&params, examples);
    let mut losses = vec![loss];
    let mut lr = cfg.lr;
    for _ in 0..cfg.epochs {
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = params.clone();
            cand.bias.iter_mut().zip(&grad.bias).for_each(|(b, g)| *b -= lr * g);
            if cfg.train_beta {
                cand.beta = (cand.beta - lr * grad.beta).max(0.0);
            }
            let (cand_loss, cand_grad) = loss_and_grad(&cand, examples);
            if cand_loss.is_finite() && cand_loss <= loss {
                params = cand;
                loss = cand_loss;
                grad = cand_grad;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        losses.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(FitOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, RelationType, Triple};
    use ndarray::{array, Array2};

    fn table(rows: Vec<Vec<f64>>) -> EntityTable {
        let n = rows.len();
        let d = rows[0].len();
        let data = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).unwrap();
        EntityTable::new((0..n as u32).map(EntityId).collect(), data).unwrap()
    }

    fn ids(v: &[u32]) -> BTreeSet<EntityId> {
        v.iter().map(|&i| EntityId(i)).collect()
    }

    #[test]
    fn state_picks_its_own_row() {
        let t = table((0..10).map(|i| (0..10).map(|j| f64::from(u8::from(i == j))).collect()).collect());
        let params = ScorerParams::new((0..10).map(EntityId).collect(), 0.0, true);
        let s = score_entities(t.row(7), &BTreeSet::new(), &t, &params).unwrap();
        let rec = recommend_top_k(&s, 2);
        assert_eq!(rec.top(), Some(EntityId(7)));
        assert!(rec.ranked[0].score > rec.ranked[1].score);
    }

    #[test]
    fn mentioned_items_are_masked() {
        let t = table((0..10).map(|i| (0..10).map(|j| f64::from(u8::from(i == j))).collect()).collect());
        let params = ScorerParams::new((0..10).map(EntityId).collect(), 1.0, true);
        let s = score_entities(t.row(7), &ids(&[7]), &t, &params).unwrap();
        assert_eq!(s.values[7], f64::NEG_INFINITY);
        assert!(recommend_top_k(&s, 10).entities().all(|e| e != EntityId(7)));
        assert_eq!(recommend_top_k(&s, 10).ranked.len(), 9);
    }

    #[test]
    fn scores_match_formula_term_by_term() {
        // items 0..3, attribute row 3
        let t = table(vec![
            vec![1.0, 2.0, 0.0],
            vec![0.5, -1.0, 3.0],
            vec![-2.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ]);
        let mut params = ScorerParams::new(vec![EntityId(0), EntityId(1), EntityId(2)], 1.0, false);
        params.bias = vec![0.1, -0.2, 0.3];
        let state = array![0.2, 0.4, -0.5];
        let s = score_entities(state.view(), &ids(&[0, 3]), &t, &params).unwrap();
        // hand evaluation
        // <state,e0> = 0.2+0.8 = 1.0 ; aff0 = max(<e0,e0>=5, <e3,e0>=2) = 5 ; +0.1 → 6.1
        // <state,e1> = 0.1-0.4-1.5 = -1.8 ; aff1 = max(<e0,e1>=-1.5, <e3,e1>=2) = 2 ; -0.2 → 0.0
        // <state,e2> = -0.4+0-0.5 = -0.9 ; aff2 = max(<e0,e2>=-2, <e3,e2>=1) = 1 ; +0.3 → 0.4
        let want = [6.1, 0.0, 0.4];
        for (a, b) in s.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(score_entities(array![1.0].view(), &BTreeSet::new(), &t, &params).is_err());
        assert!(matches!(
            score_entities(state.view(), &ids(&[9]), &t, &params),
            Err(RecommendError::MissingEntity(_))
        ));
    }

    #[test]
    fn empty_mentions_ignore_beta() {
        let t = table(vec![vec![1.0, 2.0], vec![3.0, -1.0]]);
        let state = array![0.3, 0.7];
        let a = ScorerParams::new(vec![EntityId(0), EntityId(1)], 0.0, true);
        let b = ScorerParams { beta: 17.0, ..a.clone() };
        assert_eq!(
            score_entities(state.view(), &BTreeSet::new(), &t, &a).unwrap(),
            score_entities(state.view(), &BTreeSet::new(), &t, &b).unwrap()
        );
    }

    fn scores(pairs: &[(u32, f64)]) -> Scores {
        Scores { items: pairs.iter().map(|p| EntityId(p.0)).collect(), values: pairs.iter().map(|p| p.1).collect() }
    }

    #[test]
    fn top_k_ordering_and_ties() {
        assert_eq!(recommend_top_k(&scores(&[(1, 0.9), (2, 0.1)]), 1).top(), Some(EntityId(1)));
        assert_eq!(recommend_top_k(&scores(&[(2, 0.5), (1, 0.5)]), 1).top(), Some(EntityId(1)));
        let s = scores(&[(4, 0.3), (0, 0.8), (3, 0.1), (1, 0.8), (2, 0.45)]);
        let got: Vec<u32> = recommend_top_k(&s, 3).entities().map(|e| e.0).collect();
        // full-sort oracle
        let mut all: Vec<(u32, f64)> = s.items.iter().map(|e| e.0).zip(s.values.iter().copied()).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<u32> = all.iter().take(3).map(|p| p.0).collect();
        assert_eq!(got, want);
        assert_eq!(got, vec![0, 1, 2]);
        let few = scores(&[(0, f64::NEG_INFINITY), (1, 1.0)]);
        assert_eq!(recommend_top_k(&few, 5).ranked.len(), 1);
    }

    fn movie_graph() -> KnowledgeGraph {
        let e = |id: u32, name: &str, kind| Entity { id: EntityId(id), name: name.into(), kind, aliases: vec![] };
        let entities = vec![
            e(0, "Skyfall", EntityKind::Item),
            e(1, "No Time to Die", EntityKind::Item),
            e(2, "Action", EntityKind::Attribute),
            e(3, "Daniel Craig", EntityKind::Attribute),
            e(4, "Dune", EntityKind::Item),
            e(5, "Timothee Chalamet", EntityKind::Attribute),
            e(6, "Lonely", EntityKind::Item),
        ];
        let relations = vec![
            RelationType { id: RelationId(0), label: "has_genre".into() },
            RelationType { id: RelationId(1), label: "has_actor".into() },
        ];
        let t = |h: u32, r: u32, t: u32| Triple { head: EntityId(h), relation: RelationId(r), tail: EntityId(t) };
        let triples = vec![t(0, 0, 2), t(1, 0, 2), t(1, 1, 3), t(4, 1, 5), t(4, 0, 2)];
        KnowledgeGraph::from_parts(entities, relations, triples).unwrap()
    }

    #[test]
    fn direct_link_is_one_hop() {
        let g = movie_graph();
        let p = extract_reasoning_path(&g, &ids(&[3]), EntityId(1), 2);
        assert_eq!(p.start, Some(EntityId(3)));
        assert_eq!(p.hops, vec![PathHop { relation: RelationId(1), inverse: true, entity: EntityId(1) }]);
        assert_eq!(p.render_hops(&g), vec!["Daniel Craig —has_actor⁻¹→ No Time to Die"]);
    }

    #[test]
    fn shared_genre_is_two_hops() {
        let g = movie_graph();
        let p = extract_reasoning_path(&g, &ids(&[0]), EntityId(1), 2);
        assert_eq!(p.entity_sequence(), vec![EntityId(0), EntityId(2), EntityId(1)]);
        assert_eq!(p.render_chain(&g), "Skyfall —has_genre→ Action —has_genre⁻¹→ No Time to Die");
    }

    #[test]
    fn unreachable_or_unmentioned_gives_empty_path() {
        let g = movie_graph();
        assert!(extract_reasoning_path(&g, &ids(&[0]), EntityId(6), 2).is_empty());
        assert!(extract_reasoning_path(&g, &BTreeSet::new(), EntityId(1), 2).is_empty());
        // Daniel Craig → NTTD → Action → Dune is 3 hops
        assert!(extract_reasoning_path(&g, &ids(&[3]), EntityId(4), 2).is_empty());
        assert_eq!(extract_reasoning_path(&g, &ids(&[3]), EntityId(4), 3).len(), 3);
        assert_eq!(extract_reasoning_path(&g, &ids(&[]), EntityId(4), 3).render_chain(&g), "none");
    }

    fn toy_examples() -> (ScorerParams, Vec<TrainingExample>) {
        let items: Vec<EntityId> = (0..5).map(EntityId).collect();
        let f = |st: [f64; 5], aff: [f64; 5], mentioned: [bool; 5]| ScoreFeatures {
            items: items.clone(),
            state_term: st.to_vec(),
            affinity: aff.to_vec(),
            mentioned: mentioned.to_vec(),
        };
        let ex = vec![
            TrainingExample { features: f([0.1, -0.3, 0.5, 0.0, 0.2], [1.0, 0.2, -0.4, 0.8, 0.0], [false; 5]), gold: 3 },
            TrainingExample {
                features: f([0.4, 0.1, -0.2, 0.3, -0.1], [0.0, 1.5, 0.3, -0.2, 0.9], [true, false, false, false, false]),
                gold: 1,
            },
            TrainingExample { features: f([-0.2, 0.2, 0.2, 0.6, 0.0], [0.3, 0.3, 1.2, 0.1, -0.5], [false; 5]), gold: 2 },
        ];
        let mut p = ScorerParams::new(items, 0.7, true);
        p.bias = vec![0.05, -0.1, 0.2, 0.0, -0.3];
        (p, ex)
    }

    #[test]
    fn bias_gradient_matches_central_differences() {
        let (p, ex) = toy_examples();
        let (_, g) = loss_and_grad(&p, &ex);
        let h = 1e-4;
        for k in 0..5 {
            let mut up = p.clone();
            up.bias[k] += h;
            let mut down = p.clone();
            down.bias[k] -= h;
            let fd = (loss_and_grad(&up, &ex).0 - loss_and_grad(&down, &ex).0) / (2.0 * h);
            let rel = (g.bias[k] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "bias {k}: analytic {} fd {fd}", g.bias[k]);
        }
        let mut up = p.clone();
        up.beta += h;
        let mut down = p.clone();
        down.beta -= h;
        let fd = (loss_and_grad(&up, &ex).0 - loss_and_grad(&down, &ex).0) / (2.0 * h);
        assert!((g.beta - fd).abs() / fd.abs() < 1e-4);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (p, ex) = toy_examples();
        let out = fit(&ex, p.clone(), &FitConfig { epochs: 0, ..FitConfig::default() }).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn bias_only_loss_is_non_increasing() {
        let (p, ex) = toy_examples();
        let cfg = FitConfig { epochs: 50, lr: 5.0, train_beta: false, ..FitConfig::default() };
        let out = fit(&ex, p.clone(), &cfg).unwrap();
        assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        assert_eq!(out.params.beta, p.beta);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let (p, mut ex) = toy_examples();
        assert!(fit(&[], p.clone(), &FitConfig::default()).is_err());
        ex[0].features.mentioned[3] = true;
        assert!(fit(&ex, p, &FitConfig::default()).is_err());
    }
}
