//! Kinematic trees: parent arrays, bone lists and cached hop matrices for
//! the multi-hop attention bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Number of hop classes carried by the topology bias.
pub const HOPS: usize = 3;

/// How the k-hop matrices are built from the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopMode {
    /// Aᵏ[i][j] = 1 iff the tree distance between i and j is exactly k.
    #[default]
    Indicator,
    /// Aᵏ is the k-th matrix power of A¹ (walk counts) with a zeroed diagonal.
    WalkCount,
}

/// On-disk description: `{ "joints": [...], "parents": [...], "root": r }`,
/// optionally with a `"mirror"` permutation used by horizontal flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub joints: Vec<String>,
    pub parents: Vec<i64>,
    pub root: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joint_names: Vec<String>,
    parent: Vec<Option<usize>>,
    root: usize,
    bones: Vec<(usize, usize)>,
    mirror: Vec<usize>,
    hop_mode: HopMode,
    /// Pairwise tree distances (number of bones on the path).
    tree_dist: Vec<usize>,
    /// A¹..A³ flattened row-major, each J×J.
    powers: [Vec<f64>; HOPS],
}

const H36M_JOINTS: [&str; 17] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];
const H36M_PARENTS: [i64; 17] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
const H36M_MIRROR: [usize; 17] = [0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13];

impl Skeleton {
    /// The standard 17-joint pelvis-rooted topology.
    pub fn h36m() -> Self {
        Self::from_file(&Self::h36m_file(), HopMode::default()).expect("preset is a valid tree")
    }

    pub fn h36m_file() -> SkeletonFile {
        SkeletonFile {
            joints: H36M_JOINTS.iter().map(|s| s.to_string()).collect(),
            parents: H36M_PARENTS.to_vec(),
            root: 0,
            mirror: Some(H36M_MIRROR.to_vec()),
        }
    }

    /// Unnamed tree from a parent array (−1 marks the root).
    pub fn from_parents(parents: &[i64]) -> Result<Self> {
        let root = parents.iter().position(|&p| p < 0).unwrap_or(0);
        let file = SkeletonFile {
            joints: (0..parents.len()).map(|j| format!("joint{j}")).collect(),
            parents: parents.to_vec(),
            root,
            mirror: None,
        };
        Self::from_file(&file, HopMode::default())
    }

    pub fn load(path: &Path, mode: HopMode) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, mode)
    }

    pub fn from_json(text: &str, mode: HopMode) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        Self::from_file(&file, mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("plain data serializes")
    }

    pub fn to_file(&self) -> SkeletonFile {
        SkeletonFile {
            joints: self.joint_names.clone(),
            parents: self
                .parent
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            root: self.root,
            mirror: Some(self.mirror.clone()),
        }
    }

    /// Validates tree-ness and caches distances and hop matrices.
    pub fn from_file(file: &SkeletonFile, mode: HopMode) -> Result<Self> {
        let j = file.parents.len();
        let bad = |joint: usize, reason: &str| Error::SkeletonFormat {
            joint,
            reason: reason.to_string(),
        };
        if j == 0 {
            return Err(bad(0, "empty skeleton"));
        }
        if file.joints.len() != j {
            return Err(bad(
                file.joints.len().min(j),
                "joint name count differs from parent count",
            ));
        }
        let mut parent = Vec::with_capacity(j);
        let mut roots = Vec::new();
        for (i, &p) in file.parents.iter().enumerate() {
            if p < 0 {
                roots.push(i);
                parent.push(None);
            } else if p as usize >= j {
                return Err(bad(i, "parent index out of range"));
            } else if p as usize == i {
                return Err(bad(i, "joint is its own parent"));
            } else {
                parent.push(Some(p as usize));
            }
        }
        match roots.as_slice() {
            [] => return Err(bad(0, "no root joint (every joint has a parent, so there is a cycle)")),
            [r] if *r != file.root => return Err(bad(*r, "root field disagrees with parent array")),
            [_] => {}
            [_, second, ..] => return Err(bad(*second, "multiple roots")),
        }
        // every joint must reach the root without revisiting a joint
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > j {
                    return Err(bad(start, "cycle in parent chain"));
                }
            }
        }
        let mirror = match &file.mirror {
            Some(m) => {
                if m.len() != j {
                    return Err(bad(m.len().min(j), "mirror map length differs from joint count"));
                }
                for (i, &k) in m.iter().enumerate() {
                    if k >= j || m[k] != i {
                        return Err(bad(i, "mirror map is not an involution"));
                    }
                }
                m.clone()
            }
            None => (0..j).collect(),
        };
        let bones: Vec<(usize, usize)> = parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c, p)))
            .collect();
        let tree_dist = all_pairs_distance(j, &bones);
        let powers = hop_matrices(j, &bones, &tree_dist, mode);
        Ok(Self {
            joint_names: file.joints.clone(),
            parent,
            root: file.root,
            bones,
            mirror,
            hop_mode: mode,
            tree_dist,
            powers,
        })
    }

    /// Same tree with hop matrices rebuilt under `mode`.
    pub fn with_hop_mode(&self, mode: HopMode) -> Self {
        let mut s = self.clone();
        s.hop_mode = mode;
        s.powers = hop_matrices(self.num_joints(), &self.bones, &self.tree_dist, mode);
        s
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// (child, parent) pairs in child order; always J − 1 of them.
    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    /// Left/right joint swap used by horizontal flips.
    pub fn mirror(&self) -> &[usize] {
        &self.mirror
    }

    pub fn hop_mode(&self) -> HopMode {
        self.hop_mode
    }

    pub fn tree_distance(&self, a: usize, b: usize) -> usize {
        self.tree_dist[a * self.num_joints() + b]
    }

    /// Aᵏ for k ∈ {1, 2, 3}, flattened row-major.
    pub fn adjacency_power(&self, k: usize) -> &[f64] {
        assert!((1..=HOPS).contains(&k), "hop order {k} out of range");
        &self.powers[k - 1]
    }

    /// `[3, J·J]` stack of A¹..A³, the right operand of the bias matmul.
    pub fn power_stack<F: Real>(&self) -> Tensor<F> {
        let jj = self.num_joints() * self.num_joints();
        let data = self.powers.iter().flatten().map(|&v| F::c(v)).collect();
        Tensor::new(vec![HOPS, jj], data).expect("stack shape")
    }
}

fn all_pairs_distance(j: usize, bones: &[(usize, usize)]) -> Vec<usize> {
    let mut nbrs = vec![Vec::new(); j];
    for &(c, p) in bones {
        nbrs[c].push(p);
        nbrs[p].push(c);
    }
    let mut dist = vec![usize::MAX; j * j];
    for s in 0..j {
        let row = &mut dist[s * j..(s + 1) * j];
        row[s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &nbrs[u] {
                if row[v] == usize::MAX {
                    row[v] = row[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    dist
}

fn hop_matrices(
    j: usize,
    bones: &[(usize, usize)],
    tree_dist: &[usize],
    mode: HopMode,
) -> [Vec<f64>; HOPS] {
    match mode {
        HopMode::Indicator => std::array::from_fn(|k| {
            tree_dist
                .iter()
                .map(|&d| if d == k + 1 { 1.0 } else { 0.0 })
                .collect()
        }),
        HopMode::WalkCount => {
            let mut a1 = vec![0.0; j * j];
            for &(c, p) in bones {
                a1[c * j + p] = 1.0;
                a1[p * j + c] = 1.0;
            }
            let mut out: [Vec<f64>; HOPS] = std::array::from_fn(|_| Vec::new());
            let mut cur = a1.clone();
            for slot in out.iter_mut() {
                let mut m = cur.clone();
                for i in 0..j {
                    m[i * j + i] = 0.0;
                }
                *slot = m;
                let mut next = vec![0.0; j * j];
                for r in 0..j {
                    for k in 0..j {
                        let v = cur[r * j + k];
                        if v != 0.0 {
                            for c in 0..j {
                                next[r * j + c] += v * a1[k * j + c];
                            }
                        }
                    }
                }
                cur = next;
            }
            out
        }
    }
}

/// Per-head topology logits Σₖ γ[h,k]·Aᵏ as `[H, J, J]`.
pub fn hop_bias_logits<F: Real>(skeleton: &Skeleton, gamma: &Tensor<F>) -> Result<Tensor<F>> {
    if gamma.rank() != 2 || gamma.shape()[1] != HOPS {
        return Err(Error::shape(
            "hop_bias_logits",
            format!("gamma must be [H, {HOPS}], got {:?}", gamma.shape()),
        ));
    }
    let h = gamma.shape()[0];
    let j = skeleton.num_joints();
    let mut out = vec![F::zero(); h * j * j];
    for hi in 0..h {
        let row = &mut out[hi * j * j..(hi + 1) * j * j];
        for k in 0..HOPS {
            let g = gamma.data()[hi * HOPS + k];
            for (o, &a) in row.iter_mut().zip(&skeleton.powers[k]) {
                *o += g * F::c(a);
            }
        }
    }
    Tensor::new(vec![h, j, j], out)
}

/// γ at initialization: (1, 0, 0) for every head.
pub fn init_hop_gamma<F: Real>(heads: usize) -> Tensor<F> {
    let mut g = Tensor::zeros(&[heads, HOPS]);
    for h in 0..heads {
        g.data_mut()[h * HOPS] = F::one();
    }
    g
}
