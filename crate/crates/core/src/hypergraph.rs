//! Hypergraph dataset model: per-node feature series, hyperedges carrying a
//! context tag, class labels and a node split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("hyperedge {edge} references unknown node {member}")]
    DanglingReference { edge: String, member: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Time-major feature matrix (`T × d`) of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureSeries {
    pub id: String,
    pub features: Matrix,
}

/// A multi-party context. Members are node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge {
    pub id: String,
    pub members: Vec<usize>,
    pub context_type: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub timesteps: usize,
    pub classes: usize,
    pub horizon: usize,
    pub nodes: Vec<NodeFeatureSeries>,
    pub hyperedges: Vec<Hyperedge>,
    /// One class per node, aligned with `nodes`.
    pub labels: Vec<usize>,
    pub splits: Splits,
}

/// Node → hyperedge and hyperedge → node adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceIndex {
    pub node_edges: Vec<Vec<usize>>,
    pub edge_nodes: Vec<Vec<usize>>,
}

impl IncidenceIndex {
    pub fn edges_of(&self, node: usize) -> &[usize] {
        &self.node_edges[node]
    }

    pub fn members_of(&self, edge: usize) -> &[usize] {
        &self.edge_nodes[edge]
    }
}

/// Builds both adjacency directions. Lists are ordered by index.
pub fn build_index(ds: &Dataset) -> Result<IncidenceIndex, DatasetError> {
    let n = ds.nodes.len();
    let mut node_edges = vec![Vec::new(); n];
    let mut edge_nodes = Vec::with_capacity(ds.hyperedges.len());
    for (e, edge) in ds.hyperedges.iter().enumerate() {
        let mut members = edge.members.clone();
        members.sort_unstable();
        for &m in &members {
            if m >= n {
                return Err(DatasetError::DanglingReference {
                    edge: edge.id.clone(),
                    member: m.to_string(),
                });
            }
            node_edges[m].push(e);
        }
        edge_nodes.push(members);
    }
    Ok(IncidenceIndex {
        node_edges,
        edge_nodes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: String,
    features: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    id: String,
    members: Vec<String>,
    #[serde(rename = "type")]
    context_type: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitRecord {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    dim: usize,
    timesteps: usize,
    classes: usize,
    horizon: usize,
    nodes: Vec<NodeRecord>,
    hyperedges: Vec<EdgeRecord>,
    labels: BTreeMap<String, i64>,
    splits: SplitRecord,
}

impl Dataset {
    /// Parses and validates the JSON dataset format.
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let rec: DatasetRecord = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_record(rec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("dataset serializes")
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    fn from_record(rec: DatasetRecord) -> Result<Self, DatasetError> {
        let bad = |m: String| Err(DatasetError::Validation(m));
        if rec.dim == 0 || rec.timesteps == 0 {
            return bad("dim and timesteps must be positive".into());
        }
        if rec.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", rec.classes));
        }
        let mut index = HashMap::with_capacity(rec.nodes.len());
        let mut nodes = Vec::with_capacity(rec.nodes.len());
        for (i, n) in rec.nodes.into_iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return bad(format!("duplicate node id {}", n.id));
            }
            if n.features.len() != rec.timesteps {
                return bad(format!(
                    "node {}: {} feature rows, expected {}",
                    n.id,
                    n.features.len(),
                    rec.timesteps
                ));
            }
            if let Some(row) = n.features.iter().find(|r| r.len() != rec.dim) {
                return bad(format!(
                    "node {}: feature row of length {}, expected {}",
                    n.id,
                    row.len(),
                    rec.dim
                ));
            }
            let features = Matrix::from_rows(&n.features)
                .map_err(|_| DatasetError::Validation(format!("node {}: non-finite feature", n.id)))?;
            nodes.push(NodeFeatureSeries { id: n.id, features });
        }

        let lookup = |edge: &str, id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| DatasetError::DanglingReference {
                    edge: edge.to_string(),
                    member: id.to_string(),
                })
        };

        let mut edge_ids = BTreeSet::new();
        let mut hyperedges = Vec::with_capacity(rec.hyperedges.len());
        for e in rec.hyperedges {
            if !edge_ids.insert(e.id.clone()) {
                return bad(format!("duplicate hyperedge id {}", e.id));
            }
            if e.members.len() < 2 {
                return bad(format!("hyperedge {} has fewer than 2 members", e.id));
            }
            let mut seen = BTreeSet::new();
            let mut members = Vec::with_capacity(e.members.len());
            for m in &e.members {
                if !seen.insert(m.as_str()) {
                    return bad(format!("hyperedge {} lists member {m} twice", e.id));
                }
                members.push(lookup(&e.id, m)?);
            }
            hyperedges.push(Hyperedge {
                id: e.id,
                members,
                context_type: e.context_type,
            });
        }

        if rec.labels.len() != nodes.len() {
            return bad(format!(
                "{} labels for {} nodes",
                rec.labels.len(),
                nodes.len()
            ));
        }
        let mut labels = vec![0; nodes.len()];
        for (id, &c) in &rec.labels {
            let Some(&i) = index.get(id) else {
                return bad(format!("label for unknown node {id}"));
            };
            if c < 0 || c as usize >= rec.classes {
                return bad(format!("label {c} of node {id} outside 0..{}", rec.classes));
            }
            labels[i] = c as usize;
        }

        let mut assigned = vec![false; nodes.len()];
        let mut split = |name: &str, ids: &[String]| -> Result<Vec<usize>, DatasetError> {
            ids.iter()
                .map(|id| {
                    let &i = index.get(id).ok_or_else(|| {
                        DatasetError::Validation(format!("{name} split references unknown node {id}"))
                    })?;
                    if std::mem::replace(&mut assigned[i], true) {
                        return Err(DatasetError::Validation(format!(
                            "node {id} appears in more than one split slot"
                        )));
                    }
                    Ok(i)
                })
                .collect()
        };
        let splits = Splits {
            train: split("train", &rec.splits.train)?,
            val: split("val", &rec.splits.val)?,
            test: split("test", &rec.splits.test)?,
        };
        if let Some(i) = assigned.iter().position(|a| !a) {
            return bad(format!("node {} is in no split", nodes[i].id));
        }

        Ok(Self {
            dim: rec.dim,
            timesteps: rec.timesteps,
            classes: rec.classes,
            horizon: rec.horizon,
            nodes,
            hyperedges,
            labels,
            splits,
        })
    }

    fn to_record(&self) -> DatasetRecord {
        let ids = |v: &[usize]| v.iter().map(|&i| self.nodes[i].id.clone()).collect();
        DatasetRecord {
            dim: self.dim,
            timesteps: self.timesteps,
            classes: self.classes,
            horizon: self.horizon,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    features: n.features.to_rows(),
                })
                .collect(),
            hyperedges: self
                .hyperedges
                .iter()
                .map(|e| EdgeRecord {
                    id: e.id.clone(),
                    members: ids(&e.members),
                    context_type: e.context_type.clone(),
                })
                .collect(),
            labels: self
                .nodes
                .iter()
                .zip(&self.labels)
                .map(|(n, &c)| (n.id.clone(), c as i64))
                .collect(),
            splits: SplitRecord {
                train: ids(&self.splits.train),
                val: ids(&self.splits.val),
                test: ids(&self.splits.test),
            },
        }
    }

    /// Re-runs every load-time check on an in-memory dataset.
    pub fn validate(&self) -> Result<(), DatasetError> {
        Self::from_record(self.to_record()).map(|_| ())
    }

    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    /// Sorted distinct context tags.
    pub fn context_types(&self) -> Vec<String> {
        self.hyperedges
            .iter()
            .map(|e| e.context_type.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Features at the last observed timestep.
    pub fn last_features(&self, node: usize) -> &[f64] {
        let f = &self.nodes[node].features;
        f.row(f.rows() - 1)
    }

    /// Replaces every hyperedge by the 2-cliques over its members.
    pub fn pairwise_expansion(&self) -> Self {
        let mut seen = BTreeSet::new();
        let mut hyperedges = Vec::new();
        for e in &self.hyperedges {
            let mut m = e.members.clone();
            m.sort_unstable();
            for (a, &i) in m.iter().enumerate() {
                for &j in &m[a + 1..] {
                    if seen.insert((i, j, e.context_type.clone())) {
                        hyperedges.push(Hyperedge {
                            id: format!("{}:{}-{}", e.id, self.nodes[i].id, self.nodes[j].id),
                            members: vec![i, j],
                            context_type: e.context_type.clone(),
                        });
                    }
                }
            }
        }
        Self {
            hyperedges,
            ..self.clone()
        }
    }
}

/// Zeroes each feature entry independently with probability `rate`.
/// Structure and labels are untouched.
pub fn feature_dropout<R: Rng + ?Sized>(
    ds: &Dataset,
    rate: f64,
    rng: &mut R,
) -> Result<Dataset, DatasetError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DatasetError::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut out = ds.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    for node in &mut out.nodes {
        for v in node.features.data_mut() {
            if rng.random::<f64>() < rate {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
