use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::Real;

/// One coarsening step: group `i` of `groups` becomes joint `i` of the next level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingLevel {
    pub groups: Vec<Vec<usize>>,
}

impl PoolingLevel {
    pub fn output_joints(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Clone, Serialize, Deserialize)]
struct TopologyDef {
    name: String,
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    pooling: Vec<PoolingLevel>,
    rest_offsets: Vec<[f64; 3]>,
}

impl TryFrom<TopologyDef> for SkeletonTopology {
    type Error = crate::Error;

    fn try_from(d: TopologyDef) -> Result<Self> {
        Self::new(d.name, d.joint_count, d.edges, d.pooling, d.rest_offsets)
    }
}

impl From<SkeletonTopology> for TopologyDef {
    fn from(t: SkeletonTopology) -> Self {
        Self {
            name: t.name,
            joint_count: t.joint_count,
            edges: t.edges,
            pooling: t.pooling,
            rest_offsets: t.rest_offsets,
        }
    }
}

/// Kinematic tree plus the joint-pooling hierarchy used by the VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyDef", into = "TopologyDef")]
pub struct SkeletonTopology {
    pub name: String,
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    parents: Vec<Option<usize>>,
    neighbors: Vec<Vec<usize>>,
    pooling: Vec<PoolingLevel>,
    /// Rest offset of each joint from its parent, in the parent frame (meters).
    rest_offsets: Vec<[f64; 3]>,
}

impl SkeletonTopology {
    pub fn new(
        name: impl Into<String>,
        joint_count: usize,
        edges: Vec<(usize, usize)>,
        pooling: Vec<PoolingLevel>,
        rest_offsets: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let mut topo = Self {
            name: name.into(),
            joint_count,
            edges,
            parents: Vec::new(),
            neighbors: Vec::new(),
            pooling,
            rest_offsets,
        };
        topo.validate()?;
        Ok(topo)
    }

    fn validate(&mut self) -> Result<()> {
        let j = self.joint_count;
        if j == 0 {
            return Err(invalid("skeleton", "joint count must be positive"));
        }
        if self.edges.len() != j - 1 {
            return Err(invalid(
                "skeleton",
                format!("a tree over {j} joints needs {} edges, got {}", j - 1, self.edges.len()),
            ));
        }
        if self.rest_offsets.len() != j {
            return Err(invalid("skeleton", "one rest offset per joint required"));
        }
        let mut parents = vec![None; j];
        for &(p, c) in &self.edges {
            if p >= j || c >= j || p == c {
                return Err(invalid("skeleton", format!("bad edge ({p}, {c})")));
            }
            if c == 0 {
                return Err(invalid("skeleton", "joint 0 must be the root"));
            }
            if parents[c].replace(p).is_some() {
                return Err(invalid("skeleton", format!("joint {c} has two parents")));
            }
        }
        // Every joint must reach the root without revisiting a joint.
        for start in 1..j {
            let mut cur = start;
            let mut hops = 0;
            while cur != 0 {
                cur = parents[cur]
                    .ok_or_else(|| invalid("skeleton", format!("joint {cur} is disconnected")))?;
                hops += 1;
                if hops > j {
                    return Err(invalid("skeleton", "edges contain a cycle"));
                }
            }
        }
        let mut neighbors = vec![Vec::new(); j];
        for &(p, c) in &self.edges {
            neighbors[p].push(c);
            neighbors[c].push(p);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        let mut prev = j;
        for (li, level) in self.pooling.iter().enumerate() {
            let mut seen = vec![0usize; prev];
            for g in &level.groups {
                if g.is_empty() {
                    return Err(invalid("skeleton", format!("pooling level {li} has an empty group")));
                }
                for &s in g {
                    if s >= prev {
                        return Err(invalid(
                            "skeleton",
                            format!("pooling level {li} references joint {s} of {prev}"),
                        ));
                    }
                    seen[s] += 1;
                }
            }
            if seen.iter().any(|&c| c != 1) {
                return Err(invalid(
                    "skeleton",
                    format!("pooling level {li} does not partition the {prev} joints"),
                ));
            }
            prev = level.groups.len();
        }
        self.parents = parents;
        self.neighbors = neighbors;
        Ok(())
    }

    /// Default 9-joint rig: root, spine, head, two 2-joint arms, two 1-joint legs.
    pub fn toy() -> Self {
        let edges = vec![(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (0, 8)];
        let pooling = vec![
            PoolingLevel {
                groups: vec![vec![0, 1, 2], vec![3, 4], vec![5, 6], vec![7, 8]],
            },
            PoolingLevel {
                groups: vec![vec![0, 1, 2, 3]],
            },
        ];
        let rest_offsets = vec![
            [0.0, 0.9, 0.0],
            [0.0, 0.45, 0.0],
            [0.0, 0.25, 0.0],
            [-0.2, 0.0, 0.0],
            [-0.3, 0.0, 0.0],
            [0.2, 0.0, 0.0],
            [0.3, 0.0, 0.0],
            [-0.12, -0.85, 0.0],
            [0.12, -0.85, 0.0],
        ];
        Self::new("toy9", 9, edges, pooling, rest_offsets).expect("toy skeleton is valid")
    }

    /// Simple kinematic chain of `j` joints with one pooling level halving it.
    pub fn chain(j: usize) -> Result<Self> {
        let edges = (1..j).map(|c| (c - 1, c)).collect();
        let groups = (0..j).step_by(2).map(|s| (s..(s + 2).min(j)).collect()).collect();
        let mut offsets = vec![[0.0, 0.2, 0.0]; j];
        offsets[0] = [0.0, 0.9, 0.0];
        Self::new(format!("chain{j}"), j, edges, vec![PoolingLevel { groups }], offsets)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    /// Parent and children of `j`.
    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[j]
    }

    pub fn pooling(&self) -> &[PoolingLevel] {
        &self.pooling
    }

    pub fn rest_offset(&self, j: usize) -> [f64; 3] {
        self.rest_offsets[j]
    }

    /// Joints in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![0];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            for &(a, c) in &self.edges {
                if a == p {
                    order.push(c);
                }
            }
            i += 1;
        }
        order
    }

    /// Joint count after each pooling level, starting with the full rig.
    pub fn level_sizes(&self) -> Vec<usize> {
        std::iter::once(self.joint_count)
            .chain(self.pooling.iter().map(|l| l.groups.len()))
            .collect()
    }

    /// `[J, J]` row-stochastic neighbor averaging matrix; isolated joints get a zero row.
    pub fn neighbor_mean_matrix<T: Real>(&self) -> Tensor<T> {
        let j = self.joint_count;
        let mut m = Tensor::zeros([j, j]);
        for (r, ns) in self.neighbors.iter().enumerate() {
            for &n in ns {
                m.data_mut()[r * j + n] = T::of(1.0 / ns.len() as f64);
            }
        }
        m
    }
}

/// Graph on the joints of one pooling level, with edges induced from the full rig.
pub fn level_adjacency(topo: &SkeletonTopology, level: usize) -> Vec<Vec<usize>> {
    let mut assign: Vec<usize> = (0..topo.joint_count).collect();
    for l in &topo.pooling[..level] {
        let mut map = vec![0; l.groups.iter().map(|g| g.len()).sum()];
        for (gi, g) in l.groups.iter().enumerate() {
            for &s in g {
                map[s] = gi;
            }
        }
        for a in &mut assign {
            *a = map[*a];
        }
    }
    let size = topo.level_sizes()[level];
    let mut adj = vec![Vec::new(); size];
    for &(p, c) in &topo.edges {
        let (a, b) = (assign[p], assign[c]);
        if a != b && !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for n in &mut adj {
        n.sort_unstable();
    }
    adj
}

/// Row-normalized `[n, n]` averaging matrix for an adjacency list.
pub fn mean_matrix<T: Real>(adj: &[Vec<usize>]) -> Tensor<T> {
    let n = adj.len();
    let mut m = Tensor::zeros([n, n]);
    for (r, ns) in adj.iter().enumerate() {
        for &c in ns {
            m.data_mut()[r * n + c] = T::of(1.0 / ns.len() as f64);
        }
    }
    m
}

/// `[groups, joints]` matrix averaging each group's members.
pub fn pool_matrix<T: Real>(level: &PoolingLevel, joints: usize) -> Tensor<T> {
    let g = level.groups.len();
    let mut m = Tensor::zeros([g, joints]);
    for (gi, members) in level.groups.iter().enumerate() {
        for &s in members {
            m.data_mut()[gi * joints + s] = T::of(1.0 / members.len() as f64);
        }
    }
    m
}

/// `[joints, groups]` matrix copying each group's value back to its members.
pub fn unpool_matrix<T: Real>(level: &PoolingLevel, joints: usize) -> Tensor<T> {
    let g = level.groups.len();
    let mut m = Tensor::zeros([joints, g]);
    for (gi, members) in level.groups.iter().enumerate() {
        for &s in members {
            m.data_mut()[s * g + gi] = T::one();
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_rig_is_a_tree_with_two_pooling_levels() {
        let t = SkeletonTopology::toy();
        assert_eq!(t.joint_count(), 9);
        assert_eq!(t.level_sizes(), vec![9, 4, 1]);
        assert_eq!(t.neighbors(1), &[0, 2, 3, 5]);
        assert_eq!(t.neighbors(4), &[3]);
        assert_eq!(t.topological_order().len(), 9);
    }

    #[test]
    fn rejects_cycles_and_bad_partitions() {
        let offs = vec![[0.0; 3]; 3];
        assert!(SkeletonTopology::new("x", 3, vec![(0, 1), (1, 0)], vec![], offs.clone()).is_err());
        assert!(SkeletonTopology::new("x", 3, vec![(0, 1), (2, 1)], vec![], offs.clone()).is_err());
        let overlap = PoolingLevel {
            groups: vec![vec![0, 1], vec![1, 2]],
        };
        assert!(SkeletonTopology::new("x", 3, vec![(0, 1), (1, 2)], vec![overlap], offs.clone()).is_err());
        let missing = PoolingLevel {
            groups: vec![vec![0, 1]],
        };
        assert!(SkeletonTopology::new("x", 3, vec![(0, 1), (1, 2)], vec![missing], offs).is_err());
    }

    #[test]
    fn pool_then_unpool_of_group_constant_values_is_identity() {
        let t = SkeletonTopology::toy();
        let level = &t.pooling()[0];
        let p = pool_matrix::<f64>(level, 9);
        let u = unpool_matrix::<f64>(level, 9);
        let x: Vec<f64> = [1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0].to_vec();
        let pooled: Vec<f64> = (0..4).map(|g| (0..9).map(|j| p.data()[g * 9 + j] * x[j]).sum()).collect();
        assert_eq!(pooled, vec![1.0, 2.0, 3.0, 4.0]);
        let back: Vec<f64> = (0..9).map(|j| (0..4).map(|g| u.data()[j * 4 + g] * pooled[g]).sum()).collect();
        assert_eq!(back, x);
    }

    #[test]
    fn coarse_level_adjacency_is_a_star_around_the_torso() {
        let t = SkeletonTopology::toy();
        let adj = level_adjacency(&t, 1);
        assert_eq!(adj, vec![vec![1, 2, 3], vec![0], vec![0], vec![0]]);
        let top = level_adjacency(&t, 2);
        assert_eq!(top, vec![Vec::<usize>::new()]);
        assert_eq!(mean_matrix::<f64>(&top).data(), &[0.0]);
    }
}
