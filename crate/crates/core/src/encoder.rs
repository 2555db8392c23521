//! Relational graph convolution over a [`KnowledgeGraph`].
//!
//! One layer computes, for every entity `i`,
//!
//! ```text
//! h'_i = act( W_0 h_i + Σ_r Σ_{j ∈ N_r(i)} W_r h_j / |N_r(i)| )
//! ```
//!
//! where `N_r(i)` holds the heads of triples `(j, r, i)`: messages travel
//! from head to tail. Relations with no in-neighbors for `i` contribute
//! nothing. The self term is dropped when `self_loop` is off.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Activation of every layer except the last, which is always identity.
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub self_loop: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_layers() -> usize {
    2
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_true() -> bool {
    true
}

impl EncoderConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, layers: 2, activation: Activation::Relu, self_loop: true, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EncoderError::Config("dim must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(EncoderError::Config("layers must be at least 1".into()));
        }
        Ok(())
    }

    /// Glorot-style uniform bound `sqrt(6 / (2 dim))`.
    pub fn init_bound(&self) -> f64 {
        (6.0 / (2.0 * self.dim as f64)).sqrt()
    }

    fn with_activation(&self, activation: Activation) -> Self {
        Self { activation, ..self.clone() }
    }
}

/// Parameters of one layer: a self matrix plus one matrix per relation id.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub self_weight: Array2<f64>,
    pub relation_weights: Vec<Array2<f64>>,
}

impl LayerWeights {
    pub fn zeros(dim: usize, relations: usize) -> Self {
        Self {
            self_weight: Array2::zeros((dim, dim)),
            relation_weights: vec![Array2::zeros((dim, dim)); relations],
        }
    }

    fn dim(&self) -> usize {
        self.self_weight.nrows()
    }

    fn check(&self, dim: usize, relations: usize) -> Result<()> {
        if self.relation_weights.len() < relations {
            return Err(EncoderError::Config(format!(
                "layer weights cover {} relations, graph has {relations}",
                self.relation_weights.len()
            )));
        }
        for m in std::iter::once(&self.self_weight).chain(&self.relation_weights) {
            if m.dim() != (dim, dim) {
                return Err(EncoderError::Dimension(format!(
                    "weight matrix is {:?}, expected ({dim}, {dim})",
                    m.dim()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::Config("non-finite weight".into()));
            }
        }
        Ok(())
    }
}

/// Per-entity embedding matrix; row `i` belongs to the entity at registry position `i`.
#[derive(Debug, Clone)]
pub struct EntityTable {
    ids: Vec<EntityId>,
    data: Array2<f64>,
    index: HashMap<EntityId, usize>,
}

impl PartialEq for EntityTable {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids && self.data == other.data
    }
}

impl EntityTable {
    pub fn new(ids: Vec<EntityId>, data: Array2<f64>) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(EncoderError::Dimension(format!(
                "{} ids for {} rows",
                ids.len(),
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Dimension("entity table contains non-finite values".into()));
        }
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self { ids, data, index })
    }

    pub fn zeros(g: &KnowledgeGraph, dim: usize) -> Self {
        let ids = g.entities().iter().map(|e| e.id).collect();
        Self::new(ids, Array2::zeros((g.num_entities(), dim))).expect("shape is consistent")
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row_of(&self, id: EntityId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: EntityId) -> Option<ArrayView1<'_, f64>> {
        self.row_of(id).map(|i| self.data.row(i))
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Overwrites one row; the table stays finite.
    pub fn set_row(&mut self, i: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(EncoderError::Dimension(format!(
                "row of width {} for table of width {}",
                values.len(),
                self.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Dimension("non-finite row".into()));
        }
        self.data.row_mut(i).iter_mut().zip(values).for_each(|(d, &v)| *d = v);
        Ok(())
    }

    fn rebuild_index(&mut self) {
        self.index = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    }

    /// Binary container: magic, row count, dim, ids, then row-major f64 bits.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TABLE_MAGIC)?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        for id in &self.ids {
            out.write_all(&id.0.to_le_bytes())?;
        }
        for v in self.data.iter() {
            out.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(EncoderError::Checkpoint("not an entity table file".into()));
        }
        let rows = read_u64(&mut input)? as usize;
        let dim = read_u64(&mut input)? as usize;
        let mut ids = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            ids.push(EntityId(u32::from_le_bytes(b)));
        }
        let data = read_matrix(&mut input, rows, dim)?;
        Self::new(ids, data)
    }
}

const TABLE_MAGIC: &[u8; 8] = b"EGCRTAB1";
const WEIGHTS_MAGIC: &[u8; 8] = b"EGCRWTS1";

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(f64::from_bits(read_u64(input)?));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| EncoderError::Checkpoint(e.to_string()))
}

/// One relational convolution pass.
pub fn rgcn_layer(
    h: &EntityTable,
    g: &KnowledgeGraph,
    w: &LayerWeights,
    cfg: &EncoderConfig,
) -> Result<EntityTable> {
    let n = g.num_entities();
    if h.len() != n {
        return Err(EncoderError::Dimension(format!("table has {} rows, graph has {n} entities", h.len())));
    }
    let dim = h.dim();
    if w.dim() != dim {
        return Err(EncoderError::Dimension(format!("weights are {0}x{0}, table width is {dim}", w.dim())));
    }
    w.check(dim, g.num_relations())?;

    // in-degree per (tail row, relation)
    let mut in_degree: HashMap<(usize, usize), usize> = HashMap::new();
    for t in g.triples() {
        let tail = g.entity_index(t.tail).expect("graph invariant");
        *in_degree.entry((tail, t.relation.0 as usize)).or_default() += 1;
    }

    let mut out = if cfg.self_loop {
        h.data.dot(&w.self_weight.t())
    } else {
        Array2::zeros((n, dim))
    };
    for t in g.triples() {
        let head = g.entity_index(t.head).expect("graph invariant");
        let tail = g.entity_index(t.tail).expect("graph invariant");
        let r = t.relation.0 as usize;
        let norm = 1.0 / in_degree[&(tail, r)] as f64;
        let msg = w.relation_weights[r].dot(&h.data.row(head));
        out.row_mut(tail).scaled_add(norm, &msg);
    }
    out.mapv_inplace(|x| cfg.activation.apply(x));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(EncoderError::Dimension("layer produced non-finite values".into()));
    }
    let mut table = EntityTable { ids: h.ids.clone(), data: out, index: HashMap::new() };
    table.rebuild_index();
    Ok(table)
}

/// Seeded uniform weights for every layer, drawn layer by layer with the
/// self matrix first and relation matrices in id order, row-major.
pub fn init_weights(g: &KnowledgeGraph, cfg: &EncoderConfig) -> Vec<LayerWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.init_bound();
    let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
    let matrix = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((cfg.dim, cfg.dim), |_| dist.sample(rng));
    (0..cfg.layers)
        .map(|_| {
            let self_weight = matrix(&mut rng);
            let relation_weights = (0..g.num_relations()).map(|_| matrix(&mut rng)).collect();
            LayerWeights { self_weight, relation_weights }
        })
        .collect()
}

/// Seeded uniform input features on `[-1, 1]`, one row per registered entity.
pub fn init_features(g: &KnowledgeGraph, dim: usize, seed: u64) -> EntityTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_cafe_d00d);
    let dist = Uniform::new_inclusive(-1.0, 1.0).expect("finite bound");
    let data = Array2::from_shape_fn((g.num_entities(), dim), |_| dist.sample(&mut rng));
    let ids = g.entities().iter().map(|e| e.id).collect();
    EntityTable::new(ids, data).expect("shape is consistent")
}

/// Runs `cfg.layers` stacked layers. Hidden layers use `cfg.activation`,
/// the final layer is linear.
pub fn encode_entities(
    g: &KnowledgeGraph,
    cfg: &EncoderConfig,
    weights: &[LayerWeights],
    init: Option<&EntityTable>,
) -> Result<EntityTable> {
    cfg.validate()?;
    if weights.len() != cfg.layers {
        return Err(EncoderError::Config(format!(
            "{} layer weights for {} layers",
            weights.len(),
            cfg.layers
        )));
    }
    let mut h = match init {
        Some(t) => {
            if t.len() != g.num_entities() {
                return Err(EncoderError::Dimension(format!(
                    "initial table has {} rows, graph has {} entities",
                    t.len(),
                    g.num_entities()
                )));
            }
            t.clone()
        }
        None => init_features(g, cfg.dim, cfg.seed),
    };
    let hidden = cfg.clone();
    let last = cfg.with_activation(Activation::Identity);
    for (i, w) in weights.iter().enumerate() {
        let layer_cfg = if i + 1 == weights.len() { &last } else { &hidden };
        h = rgcn_layer(&h, g, w, layer_cfg)?;
    }
    Ok(h)
}

/// Writes weights with a header of dim, layers, relation count and seed.
/// Values are stored as raw f64 bits so a reload is bit-exact.
pub fn write_checkpoint<W: Write>(mut out: W, cfg: &EncoderConfig, weights: &[LayerWeights]) -> Result<()> {
    let relations = weights.first().map_or(0, |w| w.relation_weights.len());
    out.write_all(WEIGHTS_MAGIC)?;
    for v in [cfg.dim as u64, weights.len() as u64, relations as u64, cfg.seed] {
        out.write_all(&v.to_le_bytes())?;
    }
    for w in weights {
        if w.relation_weights.len() != relations || w.dim() != cfg.dim {
            return Err(EncoderError::Checkpoint("layers disagree in shape".into()));
        }
        for m in std::iter::once(&w.self_weight).chain(&w.relation_weights) {
            for v in m.iter() {
                out.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dim: usize,
    pub relations: usize,
    pub seed: u64,
    pub weights: Vec<LayerWeights>,
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(EncoderError::Checkpoint("not an encoder checkpoint".into()));
    }
    let dim = read_u64(&mut input)? as usize;
    let layers = read_u64(&mut input)? as usize;
    let relations = read_u64(&mut input)? as usize;
    let seed = read_u64(&mut input)?;
    let mut weights = Vec::with_capacity(layers);
    for _ in 0..layers {
        let self_weight = read_matrix(&mut input, dim, dim)?;
        let relation_weights =
            (0..relations).map(|_| read_matrix(&mut input, dim, dim)).collect::<Result<_>>()?;
        weights.push(LayerWeights { self_weight, relation_weights });
    }
    Ok(Checkpoint { dim, relations, seed, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, EntityKind, RelationId, RelationType, Triple};

    fn graph(n: u32, rels: u32, triples: &[(u32, u32, u32)]) -> KnowledgeGraph {
        let entities = (0..n)
            .map(|i| Entity { id: EntityId(i), name: format!("e{i}"), kind: EntityKind::Item, aliases: vec![] })
            .collect();
        let relations = (0..rels).map(|r| RelationType { id: RelationId(r), label: format!("r{r}") }).collect();
        let triples = triples
            .iter()
            .map(|&(h, r, t)| Triple { head: EntityId(h), relation: RelationId(r), tail: EntityId(t) });
        KnowledgeGraph::from_parts(entities, relations, triples).unwrap()
    }

    #[test]
    fn isolated_node_with_identity_self_weight() {
        let g = graph(1, 0, &[]);
        let cfg = EncoderConfig { activation: Activation::Identity, ..EncoderConfig::new(3, 0) };
        let h = EntityTable::new(vec![EntityId(0)], ndarray::array![[0.5, -2.0, 3.0]]).unwrap();
        let w = LayerWeights { self_weight: Array2::eye(3), relation_weights: vec![] };
        assert_eq!(rgcn_layer(&h, &g, &w, &cfg).unwrap(), h);
    }

    #[test]
    fn zero_weights_give_zero_table() {
        let g = graph(3, 2, &[(0, 0, 1), (1, 1, 2)]);
        let cfg = EncoderConfig::new(4, 1);
        let h = init_features(&g, 4, 9);
        let out = rgcn_layer(&h, &g, &LayerWeights::zeros(4, 2), &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let g = graph(2, 1, &[(0, 0, 1)]);
        let cfg = EncoderConfig::new(2, 0);
        let h = init_features(&g, 2, 0);
        assert!(matches!(rgcn_layer(&h, &g, &LayerWeights::zeros(3, 1), &cfg), Err(EncoderError::Dimension(_))));
        assert!(matches!(rgcn_layer(&h, &g, &LayerWeights::zeros(2, 0), &cfg), Err(EncoderError::Config(_))));
        let short = init_features(&graph(1, 0, &[]), 2, 0);
        assert!(matches!(rgcn_layer(&short, &g, &LayerWeights::zeros(2, 1), &cfg), Err(EncoderError::Dimension(_))));
        assert!(encode_entities(&g, &cfg, &init_weights(&g, &cfg), Some(&short)).is_err());
        assert!(EncoderConfig { layers: 0, ..cfg.clone() }.validate().is_err());
        assert!(EncoderConfig { dim: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn single_layer_is_one_pass() {
        let g = graph(4, 2, &[(0, 0, 1), (2, 1, 1), (3, 0, 2)]);
        for act in [Activation::Identity, Activation::Relu] {
            let cfg = EncoderConfig { layers: 1, activation: act, ..EncoderConfig::new(5, 11) };
            let w = init_weights(&g, &cfg);
            let init = init_features(&g, 5, 3);
            let encoded = encode_entities(&g, &cfg, &w, Some(&init)).unwrap();
            // the final layer is always linear
            let last = EncoderConfig { activation: Activation::Identity, ..cfg.clone() };
            assert_eq!(encoded, rgcn_layer(&init, &g, &w[0], &last).unwrap());
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let g = graph(5, 2, &[(0, 0, 1), (1, 1, 2), (4, 0, 2)]);
        let cfg = EncoderConfig::new(6, 42);
        let a = encode_entities(&g, &cfg, &init_weights(&g, &cfg), None).unwrap();
        let b = encode_entities(&g, &cfg, &init_weights(&g, &cfg), None).unwrap();
        assert_eq!(a, b);
        let empty = KnowledgeGraph::default();
        let t = encode_entities(&empty, &cfg, &init_weights(&empty, &cfg), None).unwrap();
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn weight_init_bounds_and_shapes() {
        let g = graph(2, 3, &[]);
        let cfg = EncoderConfig { layers: 2, ..EncoderConfig::new(1, 5) };
        assert!((cfg.init_bound() - 3f64.sqrt()).abs() < 1e-12);
        let w = init_weights(&g, &cfg);
        assert_eq!(w, init_weights(&g, &cfg));
        assert_eq!(w.len(), 2);
        for layer in &w {
            assert_eq!(layer.relation_weights.len(), 3);
            for m in std::iter::once(&layer.self_weight).chain(&layer.relation_weights) {
                assert!(m.iter().all(|v| v.abs() <= 3f64.sqrt()));
            }
        }
        let wide = EncoderConfig::new(8, 5);
        let s = wide.init_bound();
        assert!(init_weights(&g, &wide).iter().flat_map(|l| l.self_weight.iter()).all(|v| v.abs() <= s));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let g = graph(3, 2, &[(0, 1, 2)]);
        let cfg = EncoderConfig { layers: 3, ..EncoderConfig::new(4, 77) };
        let w = init_weights(&g, &cfg);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &w).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!((ck.dim, ck.relations, ck.seed), (4, 2, 77));
        for (a, b) in ck.weights.iter().zip(&w) {
            for (x, y) in a.self_weight.iter().zip(b.self_weight.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(ck.weights, w);
        assert!(read_checkpoint(&b"garbage!........"[..]).is_err());

        let t = encode_entities(&g, &cfg, &w, None).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = EntityTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.row_of(EntityId(2)), Some(2));
    }
}
