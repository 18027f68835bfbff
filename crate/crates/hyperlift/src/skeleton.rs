//! The 17-joint human skeleton: kinematic tree plus the part-scale and
//! body-scale hyperedge sets used to build multi-granularity convolution
//! kernels. Skeletons are immutable after construction and loadable from a
//! small JSON document.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("skeleton has no joints")]
    NoJoints,
    #[error("duplicate joint name {name:?}")]
    DuplicateJoint { name: String },
    #[error("unknown joint {name:?} referenced by {context}")]
    UnknownJoint { name: String, context: String },
    #[error("edge {a:?}-{b:?} is a self loop")]
    SelfLoop { a: String, b: String },
    #[error("duplicate edge {a:?}-{b:?}")]
    DuplicateEdge { a: String, b: String },
    #[error("kinematic edges must form a tree over all joints: {detail}")]
    NotATree { detail: String },
    #[error("{scale} hyperedge #{index} has {size} members; at least 2 required")]
    HyperedgeTooSmall {
        scale: Scale,
        index: usize,
        size: usize,
    },
    #[error("skeleton declares no {scale} hyperedges")]
    NoHyperedges { scale: Scale },
}

/// Which hypergraph a hyperedge set or incidence matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Part,
    Body,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Part => write!(f, "part"),
            Scale::Body => write!(f, "body"),
        }
    }
}

/// A joint: stable index into the skeleton plus its name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointId {
    pub index: usize,
    pub name: String,
}

/// Joint vocabulary, kinematic tree, and the two hyperedge sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<JointId>,
    edges: Vec<(usize, usize)>,
    part_hyperedges: Vec<Vec<usize>>,
    body_hyperedges: Vec<Vec<usize>>,
}

/// Dense joint-by-hyperedge membership matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    pub data: Tensor,
    pub scale: Scale,
}

/// On-disk form: everything by joint name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkeletonFile {
    pub joints: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub part_hyperedges: Vec<Vec<String>>,
    pub body_hyperedges: Vec<Vec<String>>,
}

const DEFAULT_JOINTS: [&str; 17] = [
    "hip", "rhip", "rknee", "rfoot", "lhip", "lknee", "lfoot", "spine", "thorax", "neck", "head",
    "lshoulder", "lelbow", "lwrist", "rshoulder", "relbow", "rwrist",
];

const DEFAULT_EDGES: [(&str, &str); 16] = [
    ("hip", "rhip"),
    ("hip", "lhip"),
    ("hip", "spine"),
    ("rhip", "rknee"),
    ("rknee", "rfoot"),
    ("lhip", "lknee"),
    ("lknee", "lfoot"),
    ("spine", "thorax"),
    ("thorax", "neck"),
    ("thorax", "lshoulder"),
    ("thorax", "rshoulder"),
    ("neck", "head"),
    ("lshoulder", "lelbow"),
    ("lelbow", "lwrist"),
    ("rshoulder", "relbow"),
    ("relbow", "rwrist"),
];

const DEFAULT_PART_HYPEREDGES: [&[&str]; 10] = [
    &["hip", "spine", "thorax"],
    &["thorax", "neck", "head"],
    &["hip", "rhip", "rknee"],
    &["rknee", "rfoot"],
    &["hip", "lhip", "lknee"],
    &["lknee", "lfoot"],
    &["relbow", "rwrist"],
    &["lelbow", "lwrist"],
    &["thorax", "rshoulder", "relbow"],
    &["thorax", "lshoulder", "lelbow"],
];

const DEFAULT_BODY_HYPEREDGES: [&[&str]; 5] = [
    &[
        "hip", "rhip", "lhip", "spine", "thorax", "neck", "head", "lshoulder", "rshoulder",
    ],
    &["rhip", "rknee", "rfoot"],
    &["lhip", "lknee", "lfoot"],
    &["rshoulder", "relbow", "rwrist"],
    &["lshoulder", "lelbow", "lwrist"],
];

/// The 17-joint skeleton with the standard kinematic tree (rooted at hip),
/// ten part-scale hyperedges, and five body-scale hyperedges.
pub fn default_skeleton() -> Skeleton {
    let file = SkeletonFile {
        joints: DEFAULT_JOINTS.iter().map(|s| s.to_string()).collect(),
        edges: DEFAULT_EDGES
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        part_hyperedges: DEFAULT_PART_HYPEREDGES
            .iter()
            .map(|h| h.iter().map(|s| s.to_string()).collect())
            .collect(),
        body_hyperedges: DEFAULT_BODY_HYPEREDGES
            .iter()
            .map(|h| h.iter().map(|s| s.to_string()).collect())
            .collect(),
    };
    Skeleton::from_file_doc(&file).expect("built-in skeleton is valid")
}

impl Skeleton {
    /// Build and validate a skeleton from its by-name document form.
    pub fn from_file_doc(doc: &SkeletonFile) -> Result<Skeleton, SkeletonError> {
        if doc.joints.is_empty() {
            return Err(SkeletonError::NoJoints);
        }
        let mut seen = BTreeSet::new();
        for name in &doc.joints {
            if !seen.insert(name.clone()) {
                return Err(SkeletonError::DuplicateJoint { name: name.clone() });
            }
        }
        let joints: Vec<JointId> = doc
            .joints
            .iter()
            .enumerate()
            .map(|(index, name)| JointId {
                index,
                name: name.clone(),
            })
            .collect();
        let lookup = |name: &str, context: &str| -> Result<usize, SkeletonError> {
            doc.joints
                .iter()
                .position(|j| j == name)
                .ok_or_else(|| SkeletonError::UnknownJoint {
                    name: name.to_string(),
                    context: context.to_string(),
                })
        };

        let mut edges = Vec::with_capacity(doc.edges.len());
        let mut edge_set = BTreeSet::new();
        for (a, b) in &doc.edges {
            let ia = lookup(a, "edge list")?;
            let ib = lookup(b, "edge list")?;
            if ia == ib {
                return Err(SkeletonError::SelfLoop {
                    a: a.clone(),
                    b: b.clone(),
                });
            }
            let key = (ia.min(ib), ia.max(ib));
            if !edge_set.insert(key) {
                return Err(SkeletonError::DuplicateEdge {
                    a: a.clone(),
                    b: b.clone(),
                });
            }
            edges.push(key);
        }

        // The kinematic graph must be a tree: J-1 edges and connected.
        let j = joints.len();
        if edges.len() != j - 1 {
            return Err(SkeletonError::NotATree {
                detail: format!("{} edges for {} joints", edges.len(), j),
            });
        }
        let mut parent: Vec<usize> = (0..j).collect();
        fn find(parent: &mut Vec<usize>, x: usize) -> usize {
            if parent[x] != x {
                let root = find(parent, parent[x]);
                parent[x] = root;
            }
            parent[x]
        }
        for &(a, b) in &edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return Err(SkeletonError::NotATree {
                    detail: "edge set contains a cycle".to_string(),
                });
            }
            parent[ra] = rb;
        }

        let resolve_hyperedges = |sets: &[Vec<String>], scale: Scale| -> Result<Vec<Vec<usize>>, SkeletonError> {
            let mut out = Vec::with_capacity(sets.len());
            for (index, members) in sets.iter().enumerate() {
                let mut ids = BTreeSet::new();
                for name in members {
                    ids.insert(lookup(name, &format!("{scale} hyperedge #{}", index + 1))?);
                }
                if ids.len() < 2 {
                    return Err(SkeletonError::HyperedgeTooSmall {
                        scale,
                        index: index + 1,
                        size: ids.len(),
                    });
                }
                out.push(ids.into_iter().collect());
            }
            Ok(out)
        };
        let part_hyperedges = resolve_hyperedges(&doc.part_hyperedges, Scale::Part)?;
        let body_hyperedges = resolve_hyperedges(&doc.body_hyperedges, Scale::Body)?;

        Ok(Skeleton {
            joints,
            edges,
            part_hyperedges,
            body_hyperedges,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointId] {
        &self.joints
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn joint_name(&self, index: usize) -> &str {
        &self.joints[index].name
    }

    /// Kinematic edges, each normalized as (low index, high index).
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn hyperedges(&self, scale: Scale) -> &[Vec<usize>] {
        match scale {
            Scale::Part => &self.part_hyperedges,
            Scale::Body => &self.body_hyperedges,
        }
    }

    /// J x J symmetric 0/1 matrix of the kinematic tree (zero diagonal).
    pub fn adjacency(&self) -> Tensor {
        let j = self.joint_count();
        let mut adj = Tensor::zeros(&[j, j]);
        for &(a, b) in &self.edges {
            adj.set(&[a, b], 1.0);
            adj.set(&[b, a], 1.0);
        }
        adj
    }

    /// J x E binary incidence matrix; column order follows hyperedge
    /// declaration order. Errors when the scale declares no hyperedges.
    pub fn incidence(&self, scale: Scale) -> Result<IncidenceMatrix, SkeletonError> {
        let j = self.joint_count();
        let sets = self.hyperedges(scale);
        if sets.is_empty() {
            return Err(SkeletonError::NoHyperedges { scale });
        }
        let mut data = Tensor::zeros(&[j, sets.len()]);
        for (col, members) in sets.iter().enumerate() {
            for &row in members {
                data.set(&[row, col], 1.0);
            }
        }
        Ok(IncidenceMatrix { data, scale })
    }

    pub fn to_file_doc(&self) -> SkeletonFile {
        let name = |i: &usize| self.joints[*i].name.clone();
        SkeletonFile {
            joints: self.joints.iter().map(|j| j.name.clone()).collect(),
            edges: self
                .edges
                .iter()
                .map(|(a, b)| (name(a), name(b)))
                .collect(),
            part_hyperedges: self
                .part_hyperedges
                .iter()
                .map(|h| h.iter().map(name).collect())
                .collect(),
            body_hyperedges: self
                .body_hyperedges
                .iter()
                .map(|h| h.iter().map(name).collect())
                .collect(),
        }
    }
}

pub fn save_skeleton(skeleton: &Skeleton, path: impl AsRef<Path>) -> Result<(), SkeletonError> {
    let doc = skeleton.to_file_doc();
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_skeleton(path: impl AsRef<Path>) -> Result<Skeleton, SkeletonError> {
    let text = std::fs::read_to_string(path)?;
    let doc: SkeletonFile = serde_json::from_str(&text)?;
    Skeleton::from_file_doc(&doc)
}
