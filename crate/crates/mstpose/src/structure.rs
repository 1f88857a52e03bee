//! Structure learning for sub-tree mixtures: correlation distances
//! between per-part feature series, K-means clustering into mixtures,
//! Chow-Liu spanning trees and the sibling-group latent construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::parts::{SubTreeDefinition, TrainingAnnotation};

/// Symmetric distance matrix with zero diagonal; entries clamped to be
/// non-negative on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = f(i, j).max(0.0);
            }
        }
        let m = DistanceMatrix { n, data };
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "distance matrix diagonal entry ({i},{i}) is nonzero"
                )));
            }
            for j in 0..i {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "distance matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Correlation distance between two feature series (product-moment
/// correlation mapped through -log).
///
/// The correlation is clamped to `[CORRELATION_EPS, 1]` before taking the
/// logarithm: anti-correlated series are maximally distant and the
/// downstream spanning tree only needs a consistent ordering. A series
/// with zero variance is treated as maximally distant too.
pub const CORRELATION_EPS: f64 = 1e-6;

pub fn correlation_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "correlation series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Dimension(
            "correlation needs series of length >= 2".into(),
        ));
    }
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let cov = n * sab - sa * sb;
    let var_a = n * saa - sa * sa;
    let var_b = n * sbb - sb * sb;
    let rho = if var_a <= 0.0 || var_b <= 0.0 {
        CORRELATION_EPS
    } else {
        (cov / (var_a * var_b).sqrt()).clamp(CORRELATION_EPS, 1.0)
    };
    Ok(-rho.ln())
}

/// Centroid of a sub-tree's parts; the root node location.
pub fn root_location(annotation: &TrainingAnnotation, st: &SubTreeDefinition) -> (f64, f64) {
    let mut x = 0.0;
    let mut y = 0.0;
    for &p in &st.part_ids {
        x += annotation.points[p].0;
        y += annotation.points[p].1;
    }
    let k = st.part_ids.len() as f64;
    (x / k, y / k)
}

/// Per-sample concatenated geometric and appearance distances of the
/// sub-tree's parts to the root, laid out `[geom..., app...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTreeDescriptor {
    pub values: Vec<f64>,
    /// False when a part fell outside the feature grid after
    /// normalization; such samples are excluded from clustering.
    pub valid: bool,
}

impl SubTreeDescriptor {
    pub fn num_parts(&self) -> usize {
        self.values.len() / 2
    }

    pub fn geometric(&self, part: usize) -> f64 {
        self.values[part]
    }

    pub fn appearance(&self, part: usize) -> f64 {
        self.values[self.num_parts() + part]
    }
}

/// One scale-normalized sample ready for descriptor extraction: the
/// annotation coordinates and the feature grid live at the same scale.
pub struct DescriptorSample<'a> {
    pub annotation: &'a TrainingAnnotation,
    pub features: &'a FeatureMap,
    pub cell_size: usize,
}

fn cell_descriptor<'m>(
    map: &'m FeatureMap,
    cell_size: usize,
    x: f64,
    y: f64,
) -> Option<&'m [f64]> {
    let col = (x * map.scale / cell_size as f64).floor();
    let row = (y * map.scale / cell_size as f64).floor();
    if col < 0.0 || row < 0.0 || col as usize >= map.cols || row as usize >= map.rows {
        return None;
    }
    Some(map.cell(row as usize, col as usize))
}

/// Build per-sample sub-tree descriptors and z-score each coordinate over
/// the valid samples.
pub fn build_descriptors(
    samples: &[DescriptorSample<'_>],
    st: &SubTreeDefinition,
) -> Vec<SubTreeDescriptor> {
    let p = st.part_ids.len();
    let mut descriptors: Vec<SubTreeDescriptor> = samples
        .iter()
        .map(|s| {
            let (rx, ry) = root_location(s.annotation, st);
            let mut values = vec![0.0; 2 * p];
            let mut valid = true;
            let root_cell = cell_descriptor(s.features, s.cell_size, rx, ry);
            for (k, &part) in st.part_ids.iter().enumerate() {
                let (px, py) = s.annotation.points[part];
                values[k] = ((px - rx).powi(2) + (py - ry).powi(2)).sqrt();
                match (cell_descriptor(s.features, s.cell_size, px, py), root_cell) {
                    (Some(pc), Some(rc)) => {
                        values[p + k] = pc
                            .iter()
                            .zip(rc)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                    }
                    _ => valid = false,
                }
            }
            SubTreeDescriptor { values, valid }
        })
        .collect();

    // z-score each coordinate over the valid samples.
    let dim = 2 * p;
    let valid_count = descriptors.iter().filter(|d| d.valid).count();
    if valid_count > 0 {
        for k in 0..dim {
            let mean = descriptors
                .iter()
                .filter(|d| d.valid)
                .map(|d| d.values[k])
                .sum::<f64>()
                / valid_count as f64;
            let var = descriptors
                .iter()
                .filter(|d| d.valid)
                .map(|d| (d.values[k] - mean).powi(2))
                .sum::<f64>()
                / valid_count as f64;
            let std = var.sqrt();
            for d in &mut descriptors {
                d.values[k] = if std > 0.0 { (d.values[k] - mean) / std } else { 0.0 };
            }
        }
    }
    descriptors
}

/// K-means over descriptor vectors: k-means++ seeding from `seed`,
/// Euclidean metric, at most 300 Lloyd iterations. Deterministic for a
/// fixed seed. Returns per-sample mixture ids in `0..m`.
pub fn cluster_mixtures(
    descriptors: &[SubTreeDescriptor],
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    assert!(m >= 1);
    let points: Vec<&[f64]> = descriptors.iter().map(|d| d.values.as_slice()).collect();
    if points.len() < m {
        return Err(Error::InvalidInput(format!(
            "cannot split {} samples into {} mixtures",
            points.len(),
            m
        )));
    }
    Ok(kmeans_points(&points, m, seed))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn kmeans_points(points: &[&[f64]], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[idx].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Recompute means; empty clusters keep their previous center.
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                center[d] = members.iter().map(|&i| points[i][d]).sum::<f64>()
                    / members.len() as f64;
            }
        }
    }
    assignment
}

/// K-means objective (sum of squared distances to the assigned means),
/// used by the clustering property tests.
pub fn kmeans_objective(descriptors: &[SubTreeDescriptor], assignment: &[usize], k: usize) -> f64 {
    let dim = descriptors[0].values.len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&SubTreeDescriptor> = descriptors
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == c)
            .map(|(d, _)| d)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for m in &members {
            for (s, v) in mean.iter_mut().zip(&m.values) {
                *s += v;
            }
        }
        for s in &mut mean {
            *s /= members.len() as f64;
        }
        for m in &members {
            total += sq_dist(&m.values, &mean);
        }
    }
    total
}

/// Minimum spanning tree of the distance matrix (equivalently the
/// maximum-weight tree under mutual information `-d`). Kruskal with ties
/// broken by lexicographic edge `(i, j)`.
pub fn chow_liu_tree(d: &DistanceMatrix) -> Result<Vec<(usize, usize)>> {
    let n = d.n;
    if n < 2 {
        return Err(Error::InvalidInput(
            "chow-liu needs at least two nodes".into(),
        ));
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    edges.sort_by(|&(a, b), &(c, e)| {
        d.get(a, b)
            .partial_cmp(&d.get(c, e))
            .expect("non-finite distance")
            .then((a, b).cmp(&(c, e)))
    });

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut chosen = Vec::with_capacity(n - 1);
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            chosen.push((i, j));
            if chosen.len() == n - 1 {
                break;
            }
        }
    }
    Ok(chosen)
}

/// Node of a learned mixture structure. Index 0 is always the latent
/// mixture root `v0`.
#[derive(Debug, Clone, PartialEq)]
pub enum StructureNode {
    /// Observed part, index local to the sub-tree's part list.
    Observed { local_part: usize },
    /// Latent sibling-group node (no appearance).
    Latent,
}

/// Tree topology of one mixture of one sub-tree: parent pointers rooted
/// at the latent node `v0` (index 0).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStructure {
    pub nodes: Vec<StructureNode>,
    /// `parent[i]` for node `i`; `parent[0]` is unused (root).
    pub parents: Vec<usize>,
}

impl MixtureStructure {
    /// Star topology: every observed part a direct child of `v0`.
    pub fn star(num_parts: usize) -> Self {
        let mut nodes = vec![StructureNode::Latent];
        let mut parents = vec![0usize];
        for p in 0..num_parts {
            nodes.push(StructureNode::Observed { local_part: p });
            parents.push(0);
        }
        MixtureStructure { nodes, parents }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        (1..self.nodes.len())
            .filter(|&i| self.parents[i] == node)
            .collect()
    }

    /// Checks tree shape: single root, acyclic parent pointers, every
    /// observed part exactly once, latent nodes with at least one child.
    pub fn check(&self, num_parts: usize) -> Result<()> {
        let n = self.nodes.len();
        if self.parents.len() != n || n == 0 {
            return Err(Error::ModelInvalid("structure arity mismatch".into()));
        }
        let mut seen = vec![false; num_parts];
        for (i, node) in self.nodes.iter().enumerate() {
            if i > 0 {
                // Walk to the root, bailing on cycles.
                let mut cur = i;
                let mut steps = 0;
                while cur != 0 {
                    cur = self.parents[cur];
                    steps += 1;
                    if steps > n {
                        return Err(Error::ModelInvalid("structure has a cycle".into()));
                    }
                }
            }
            if let StructureNode::Observed { local_part } = node {
                if *local_part >= num_parts || seen[*local_part] {
                    return Err(Error::ModelInvalid(format!(
                        "observed part {local_part} repeated or out of range"
                    )));
                }
                seen[*local_part] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::ModelInvalid("structure misses an observed part".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node, StructureNode::Latent) && self.children(i).is_empty() {
                return Err(Error::ModelInvalid(format!("latent node {i} has no children")));
            }
        }
        Ok(())
    }
}

/// Group the sub-tree's parts into a mixture structure.
///
/// A Chow-Liu tree is built over the observed parts; its edges with
/// distance strictly below the median pairwise distance partition the
/// parts into groups. A group of two or more parts whose pairwise
/// distances all stay below the median becomes a sibling group under a
/// new latent node; every other part (and any group failing the pairwise
/// check, attached through its Chow-Liu subtree) hangs directly off the
/// mixture root.
pub fn cl_group(num_parts: usize, d: &DistanceMatrix) -> Result<MixtureStructure> {
    assert_eq!(d.n, num_parts);
    if num_parts < 2 {
        return Ok(MixtureStructure::star(num_parts));
    }
    let edges = chow_liu_tree(d)?;

    let mut pairwise: Vec<f64> = Vec::new();
    for i in 0..num_parts {
        for j in i + 1..num_parts {
            pairwise.push(d.get(i, j));
        }
    }
    pairwise.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if pairwise.len() % 2 == 1 {
        pairwise[pairwise.len() / 2]
    } else {
        0.5 * (pairwise[pairwise.len() / 2 - 1] + pairwise[pairwise.len() / 2])
    };

    // Components under the tight Chow-Liu edges.
    let mut comp: Vec<usize> = (0..num_parts).collect();
    fn find(comp: &mut Vec<usize>, mut x: usize) -> usize {
        while comp[x] != x {
            comp[x] = comp[comp[x]];
            x = comp[x];
        }
        x
    }
    for &(i, j) in &edges {
        if d.get(i, j) < median {
            let (ri, rj) = (find(&mut comp, i), find(&mut comp, j));
            if ri != rj {
                comp[ri.max(rj)] = ri.min(rj);
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut rep_to_group: Vec<Option<usize>> = vec![None; num_parts];
    for p in 0..num_parts {
        let r = find(&mut comp, p);
        match rep_to_group[r] {
            Some(g) => groups[g].push(p),
            None => {
                rep_to_group[r] = Some(groups.len());
                groups.push(vec![p]);
            }
        }
    }

    let mut nodes = vec![StructureNode::Latent];
    let mut parents = vec![0usize];
    for group in groups {
        let all_tight = group.len() >= 2
            && group.iter().enumerate().all(|(a, &i)| {
                group[a + 1..].iter().all(|&j| d.get(i, j) < median)
            });
        if all_tight {
            let latent = nodes.len();
            nodes.push(StructureNode::Latent);
            parents.push(0);
            for &p in &group {
                nodes.push(StructureNode::Observed { local_part: p });
                parents.push(latent);
            }
        } else if group.len() == 1 {
            nodes.push(StructureNode::Observed { local_part: group[0] });
            parents.push(0);
        } else {
            // Keep the Chow-Liu shape inside the group, rooted at the
            // member with the smallest total distance to the others.
            let root = *group
                .iter()
                .min_by(|&&a, &&b| {
                    let ta: f64 = group.iter().map(|&j| d.get(a, j)).sum();
                    let tb: f64 = group.iter().map(|&j| d.get(b, j)).sum();
                    ta.partial_cmp(&tb).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            let mut index_of = vec![usize::MAX; num_parts];
            // BFS over the group's Chow-Liu edges from the chosen root.
            let mut order = vec![root];
            index_of[root] = nodes.len();
            nodes.push(StructureNode::Observed { local_part: root });
            parents.push(0);
            let mut head = 0;
            while head < order.len() {
                let cur = order[head];
                head += 1;
                for &(i, j) in &edges {
                    let other = if i == cur { j } else if j == cur { i } else { continue };
                    if group.contains(&other) && index_of[other] == usize::MAX {
                        index_of[other] = nodes.len();
                        nodes.push(StructureNode::Observed { local_part: other });
                        parents.push(index_of[cur]);
                        order.push(other);
                    }
                }
            }
        }
    }

    let structure = MixtureStructure { nodes, parents };
    structure.check(num_parts)?;
    Ok(structure)
}

/// Which descriptor coordinates feed the correlation distance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceFeatures {
    Both,
    GeometryOnly,
    AppearanceOnly,
}

/// Learn `m` mixture structures for one sub-tree: cluster the descriptors,
/// then build a correlation-distance matrix over each cluster's per-part
/// feature series and run the sibling grouping. Clusters with fewer than
/// two samples fall back to a star on the root.
pub fn learn_structures(
    descriptors: &[SubTreeDescriptor],
    num_parts: usize,
    m: usize,
    seed: u64,
    features: DistanceFeatures,
) -> Result<(Vec<MixtureStructure>, Vec<Option<usize>>)> {
    let valid: Vec<usize> = (0..descriptors.len())
        .filter(|&i| descriptors[i].valid)
        .collect();
    if valid.len() < m {
        return Err(Error::InvalidInput(format!(
            "{} valid samples cannot form {} mixtures",
            valid.len(),
            m
        )));
    }
    let subset: Vec<SubTreeDescriptor> = valid.iter().map(|&i| descriptors[i].clone()).collect();
    let sub_assignment = cluster_mixtures(&subset, m, seed)?;
    let mut assignment: Vec<Option<usize>> = vec![None; descriptors.len()];
    for (k, &i) in valid.iter().enumerate() {
        assignment[i] = Some(sub_assignment[k]);
    }

    let mut structures = Vec::with_capacity(m);
    for mixture in 0..m {
        let members: Vec<&SubTreeDescriptor> = subset
            .iter()
            .zip(&sub_assignment)
            .filter(|(_, &a)| a == mixture)
            .map(|(d, _)| d)
            .collect();
        if members.len() < 2 {
            structures.push(MixtureStructure::star(num_parts));
            continue;
        }
        let series: Vec<Vec<f64>> = (0..num_parts)
            .map(|p| {
                let mut s = Vec::with_capacity(2 * members.len());
                for d in &members {
                    match features {
                        DistanceFeatures::Both => {
                            s.push(d.geometric(p));
                            s.push(d.appearance(p));
                        }
                        DistanceFeatures::GeometryOnly => s.push(d.geometric(p)),
                        DistanceFeatures::AppearanceOnly => s.push(d.appearance(p)),
                    }
                }
                s
            })
            .collect();
        if series[0].len() < 2 {
            structures.push(MixtureStructure::star(num_parts));
            continue;
        }
        let dist = DistanceMatrix::from_fn(num_parts, |i, j| {
            if i == j {
                0.0
            } else {
                correlation_distance(&series[i], &series[j]).unwrap()
            }
        })?;
        structures.push(cl_group(num_parts, &dist)?);
    }
    Ok((structures, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(values: Vec<f64>) -> SubTreeDescriptor {
        SubTreeDescriptor { values, valid: true }
    }

    #[test]
    fn correlation_distance_of_identical_series_is_zero() {
        let v = vec![1.0, 2.0, 3.0, 5.0];
        assert_eq!(correlation_distance(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn correlation_distance_of_anti_correlated_series_is_clamped() {
        let d = correlation_distance(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((d - (-(CORRELATION_EPS.ln()))).abs() < 1e-9);
    }

    #[test]
    fn correlation_distance_of_scaled_series_is_zero() {
        let d = correlation_distance(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn correlation_distance_zero_variance_is_maximal() {
        let d = correlation_distance(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((d - (-(CORRELATION_EPS.ln()))).abs() < 1e-9);
    }

    #[test]
    fn correlation_distance_length_mismatch_errors() {
        assert!(correlation_distance(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn root_location_is_centroid() {
        use crate::parts::{SubTreeName, NUM_PARTS};
        let mut pts = vec![(0.0, 0.0); NUM_PARTS];
        pts[16] = (0.0, 0.0);
        pts[17] = (2.0, 0.0);
        pts[18] = (4.0, 0.0);
        pts[19] = (1.0, 1.0);
        pts[20] = (3.0, 5.0);
        let ann = TrainingAnnotation::new(pts);
        let st = SubTreeDefinition {
            name: SubTreeName::LeftLeg,
            part_ids: vec![16, 17, 18],
        };
        assert_eq!(root_location(&ann, &st), (2.0, 0.0));
        let st2 = SubTreeDefinition {
            name: SubTreeName::LeftLeg,
            part_ids: vec![19, 20],
        };
        assert_eq!(root_location(&ann, &st2), (2.0, 3.0));
    }

    #[test]
    fn chow_liu_three_node_case() {
        // d01=1, d02=2, d12=3: of the three spanning trees the cheapest
        // keeps edges (0,1) and (0,2).
        let d = DistanceMatrix::from_fn(3, |i, j| match (i.min(j), i.max(j)) {
            (0, 1) => 1.0,
            (0, 2) => 2.0,
            (1, 2) => 3.0,
            _ => 0.0,
        })
        .unwrap();
        let edges = chow_liu_tree(&d).unwrap();
        assert_eq!(edges, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn chow_liu_star_dominance() {
        let d = DistanceMatrix::from_fn(5, |i, j| {
            if i == j {
                0.0
            } else if i == 0 || j == 0 {
                1.0
            } else {
                10.0
            }
        })
        .unwrap();
        let edges = chow_liu_tree(&d).unwrap();
        assert_eq!(edges.len(), 4);
        assert!(edges.iter().all(|&(i, _)| i == 0));
    }

    #[test]
    fn chow_liu_two_nodes() {
        let d = DistanceMatrix::from_fn(2, |i, j| if i == j { 0.0 } else { 4.2 }).unwrap();
        assert_eq!(chow_liu_tree(&d).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn chow_liu_matches_brute_force_on_random_matrices() {
        // Enumerate all spanning trees via Pruefer sequences.
        fn pruefer_to_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
            let mut degree = vec![1usize; n];
            for &s in seq {
                degree[s] += 1;
            }
            let mut edges = Vec::with_capacity(n - 1);
            for &s in seq {
                let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
                edges.push((leaf.min(s), leaf.max(s)));
                degree[leaf] -= 1;
                degree[s] -= 1;
            }
            let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
            edges.push((rest[0], rest[1]));
            edges
        }

        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for n in 3..=5usize {
            for _ in 0..10 {
                let mut vals = vec![0.0; n * n];
                for i in 0..n {
                    for j in i + 1..n {
                        let v = next() * 10.0;
                        vals[i * n + j] = v;
                        vals[j * n + i] = v;
                    }
                }
                let d = DistanceMatrix::from_fn(n, |i, j| vals[i * n + j]).unwrap();
                let got: f64 = chow_liu_tree(&d)
                    .unwrap()
                    .iter()
                    .map(|&(i, j)| d.get(i, j))
                    .sum();

                let mut best = f64::INFINITY;
                let count = (n as u32).pow(n as u32 - 2);
                for code in 0..count {
                    let mut seq = Vec::new();
                    let mut c = code as usize;
                    for _ in 0..n - 2 {
                        seq.push(c % n);
                        c /= n;
                    }
                    let w: f64 = pruefer_to_edges(&seq, n)
                        .iter()
                        .map(|&(i, j)| d.get(i, j))
                        .sum();
                    best = best.min(w);
                }
                assert!((got - best).abs() < 1e-9, "n={n}: {got} vs {best}");
            }
        }
    }

    #[test]
    fn non_symmetric_matrix_is_rejected() {
        assert!(DistanceMatrix::from_fn(3, |i, j| (i * 3 + j) as f64).is_err());
    }

    #[test]
    fn cl_group_two_parts_no_latent() {
        let d = DistanceMatrix::from_fn(2, |i, j| if i == j { 0.0 } else { 1.0 }).unwrap();
        let s = cl_group(2, &d).unwrap();
        // Both parts hang off v0 directly.
        assert_eq!(s.nodes.len(), 3);
        assert_eq!(s.children(0).len(), 2);
        assert!(s
            .nodes
            .iter()
            .filter(|n| matches!(n, StructureNode::Latent))
            .count()
            == 1);
    }

    #[test]
    fn cl_group_two_tight_pairs_get_two_latents() {
        // Parts {0,1} and {2,3} are tight (d=1), everything across is 10.
        let d = DistanceMatrix::from_fn(4, |i, j| {
            if i == j {
                0.0
            } else if (i.min(j), i.max(j)) == (0, 1) || (i.min(j), i.max(j)) == (2, 3) {
                1.0
            } else {
                10.0
            }
        })
        .unwrap();
        let s = cl_group(4, &d).unwrap();
        let latents: Vec<usize> = (1..s.nodes.len())
            .filter(|&i| matches!(s.nodes[i], StructureNode::Latent))
            .collect();
        assert_eq!(latents.len(), 2);
        for &l in &latents {
            assert_eq!(s.parents[l], 0);
            let kids = s.children(l);
            assert_eq!(kids.len(), 2);
            let mut parts: Vec<usize> = kids
                .iter()
                .map(|&k| match s.nodes[k] {
                    StructureNode::Observed { local_part } => local_part,
                    _ => panic!("latent under latent"),
                })
                .collect();
            parts.sort();
            assert!(parts == vec![0, 1] || parts == vec![2, 3]);
        }
    }

    #[test]
    fn cl_group_always_yields_single_rooted_tree() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for n in 2..=6usize {
            for _ in 0..20 {
                let mut vals = vec![0.0; n * n];
                for i in 0..n {
                    for j in i + 1..n {
                        let v = next() * 5.0;
                        vals[i * n + j] = v;
                        vals[j * n + i] = v;
                    }
                }
                let d = DistanceMatrix::from_fn(n, |i, j| vals[i * n + j]).unwrap();
                let s = cl_group(n, &d).unwrap();
                s.check(n).unwrap();
                assert_eq!(s.parents.len(), s.nodes.len());
            }
        }
    }

    #[test]
    fn kmeans_one_cluster_and_all_singletons() {
        let descs: Vec<SubTreeDescriptor> = (0..5)
            .map(|i| desc(vec![i as f64 * 10.0, 0.0]))
            .collect();
        let one = cluster_mixtures(&descs, 1, 3).unwrap();
        assert!(one.iter().all(|&a| a == 0));
        let all = cluster_mixtures(&descs, 5, 3).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
    }

    #[test]
    fn kmeans_separates_well_separated_blobs() {
        // Two blobs with inter-center distance 100x the intra spread.
        let mut descs = Vec::new();
        for i in 0..10 {
            descs.push(desc(vec![0.0 + (i as f64) * 0.01, 0.0]));
            descs.push(desc(vec![100.0 + (i as f64) * 0.01, 0.0]));
        }
        let assign = cluster_mixtures(&descs, 2, 11).unwrap();
        for pair in assign.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        let blob_a: Vec<usize> = assign.iter().step_by(2).copied().collect();
        assert!(blob_a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn kmeans_more_clusters_than_samples_errors() {
        let descs = vec![desc(vec![0.0]), desc(vec![1.0])];
        assert!(cluster_mixtures(&descs, 3, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let descs: Vec<SubTreeDescriptor> = (0..30)
            .map(|i| desc(vec![(i % 7) as f64, (i % 5) as f64, i as f64 * 0.1]))
            .collect();
        let a = cluster_mixtures(&descs, 4, 42).unwrap();
        let b = cluster_mixtures(&descs, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learn_structures_regimes_produce_distinct_topologies() {
        // Regime A near the origin: parts 0 and 1 move together; regime B
        // offset by 100: parts 1 and 2 move together. K-means must split
        // the blobs and the per-cluster Chow-Liu trees must differ.
        let mut descriptors = Vec::new();
        for s in 0..12 {
            let t = (s % 6) as f64 - 2.5;
            // layout: [g0,g1,g2, a0,a1,a2]
            descriptors.push(desc(vec![
                t,
                t,
                if s % 2 == 0 { 2.0 } else { -2.0 },
                t,
                t,
                if s % 3 == 0 { 1.5 } else { -0.5 },
            ]));
        }
        for s in 0..12 {
            let t = (s % 6) as f64 - 2.5;
            descriptors.push(desc(vec![
                100.0 + if s % 2 == 0 { 2.0 } else { -2.0 },
                100.0 + t,
                100.0 + t,
                100.0 + if s % 3 == 0 { 1.5 } else { -0.5 },
                100.0 + t,
                100.0 + t,
            ]));
        }
        let (structures, assignment) =
            learn_structures(&descriptors, 3, 2, 5, DistanceFeatures::Both).unwrap();
        assert_eq!(structures.len(), 2);
        assert_ne!(structures[0], structures[1]);
        for s in &structures {
            s.check(3).unwrap();
        }
        assert!(assignment.iter().all(|a| a.is_some()));
    }

    #[test]
    fn learn_structures_is_deterministic() {
        let descriptors: Vec<SubTreeDescriptor> = (0..20)
            .map(|i| {
                desc(vec![
                    (i % 4) as f64,
                    (i % 3) as f64,
                    (i % 5) as f64,
                    0.1 * i as f64,
                    -0.2 * i as f64,
                    ((i * i) % 7) as f64,
                ])
            })
            .collect();
        let a = learn_structures(&descriptors, 3, 2, 9, DistanceFeatures::Both).unwrap();
        let b = learn_structures(&descriptors, 3, 2, 9, DistanceFeatures::Both).unwrap();
        assert_eq!(a, b);
    }
}
