//! The two-layer pose model: per-mixture part templates with types,
//! deformation and compatibility parameters, latent connective nodes,
//! occlusion parameters, plus validation, default initialization and the
//! versioned binary model format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{HogConfig, Template};
use crate::parts::{SubTreeDefinition, TrainingAnnotation};
use crate::structure::{MixtureStructure, StructureNode};

pub const MODEL_MAGIC: &str = "MSTMODEL";
pub const MODEL_VERSION_MAJOR: u32 = 1;
pub const MODEL_VERSION_MINOR: u32 = 0;

/// Per-type parameters of a node: appearance template, anchor offset to
/// the parent and the quadratic deformation weights `(dx^2, dx, dy^2,
/// dy)`. The quadratic coefficients must stay non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeParams {
    pub template: Template,
    pub anchor: (i32, i32),
    pub deform: [f64; 4],
}

impl TypeParams {
    pub fn latent() -> Self {
        TypeParams {
            template: Template::zeros(0, 0, 0),
            anchor: (0, 0),
            deform: [0.01, 0.0, 0.01, 0.0],
        }
    }
}

/// Type compatibility along an edge: `k_child x k_parent` entries, where
/// `None` is the hard-incompatible sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatTable {
    pub k_child: usize,
    pub k_parent: usize,
    entries: Vec<Option<f64>>,
}

impl CompatTable {
    pub fn empty() -> Self {
        CompatTable {
            k_child: 0,
            k_parent: 0,
            entries: Vec::new(),
        }
    }

    pub fn all_zero(k_child: usize, k_parent: usize) -> Self {
        CompatTable {
            k_child,
            k_parent,
            entries: vec![Some(0.0); k_child * k_parent],
        }
    }

    pub fn incompatible(k_child: usize, k_parent: usize) -> Self {
        CompatTable {
            k_child,
            k_parent,
            entries: vec![None; k_child * k_parent],
        }
    }

    #[inline]
    pub fn get(&self, z_child: usize, z_parent: usize) -> Option<f64> {
        self.entries[z_child * self.k_parent + z_parent]
    }

    pub fn set(&mut self, z_child: usize, z_parent: usize, v: Option<f64>) {
        self.entries[z_child * self.k_parent + z_parent] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_compatible_pair(&self) -> bool {
        self.entries.iter().any(|e| e.is_some())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Option<f64>)> + '_ {
        let kp = self.k_parent;
        self.entries
            .iter()
            .enumerate()
            .map(move |(i, e)| (i / kp, i % kp, *e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Observed { part_id: usize },
    Latent,
}

/// One node of a tree graph (a mixture tree or the upper layer).
///
/// `parent` indexes into the owning graph's node list; the graph root has
/// `parent == None` and an empty compatibility table. Latent nodes carry
/// one type with an empty template: their unary score is identically 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub types: Vec<TypeParams>,
    pub compat: CompatTable,
    /// Nominal box extent in cells, used to derive candidate boxes for
    /// latent nodes (observed nodes use their template size).
    pub extent: (f64, f64),
}

impl NodeSpec {
    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn is_latent(&self) -> bool {
        matches!(self.kind, NodeKind::Latent)
    }
}

/// One mixture of a sub-tree: a tree of nodes whose index 0 is the
/// latent sub-tree root `v0`, plus the mixture bias and compatibility
/// gate of the mixture-selection max.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub nodes: Vec<NodeSpec>,
    pub bias: f64,
    pub gate: bool,
}

impl MixtureModel {
    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == Some(node))
            .collect()
    }
}

/// All mixtures of one limb plus the edge that ties the shared latent
/// root into the upper layer. The deformation weights of that edge are
/// not free parameters: they are the `(1/Z)`-average of the learned
/// deformation weights inside the two sub-trees sharing the upper
/// parent, keeping the pairwise sub-tree term inside the tree DP.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTreeModel {
    pub name: String,
    /// Global part ids in local order.
    pub part_ids: Vec<usize>,
    pub mixtures: Vec<MixtureModel>,
    /// Index of the upper-layer node the sub-tree root attaches to.
    pub upper_parent: usize,
    /// Anchor of the sub-tree root relative to its upper parent.
    pub root_anchor: (i32, i32),
    /// Nominal extent of root candidates, in cells.
    pub root_extent: (f64, f64),
}

/// The upper layer: Root (index 0) plus latent group nodes and the
/// observed torso/head chain.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperLayer {
    pub nodes: Vec<NodeSpec>,
}

impl UpperLayer {
    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == Some(node))
            .collect()
    }
}

/// Learned occlusion gate for one unordered sub-tree pair.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionPair {
    pub a: usize,
    pub b: usize,
    pub lambda: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OcclusionParams {
    pub pairs: Vec<OcclusionPair>,
}

impl OcclusionParams {
    pub fn disabled(num_sub_trees: usize) -> Self {
        let mut pairs = Vec::new();
        for a in 0..num_sub_trees {
            for b in a + 1..num_sub_trees {
                pairs.push(OcclusionPair {
                    a,
                    b,
                    lambda: 0.0,
                    lower: 0.0,
                    upper: 1.0,
                });
            }
        }
        OcclusionParams { pairs }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&OcclusionPair> {
        let (a, b) = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| p.a == a && p.b == b)
    }

    pub fn all_disabled(&self) -> bool {
        self.pairs.iter().all(|p| p.lambda == 0.0)
    }
}

/// Model-wide settings echoed into the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub cell_size: usize,
    pub interval: usize,
    pub hog: HogConfig,
    pub canonical_torso_px: f64,
    pub detection_threshold: f64,
    pub nms_overlap: f64,
    /// NMS settings of the occlusion candidate sets.
    pub occ_nms_overlap: f64,
    pub occ_score_margin: f64,
    /// Root candidates kept per mixture when building occlusion sets.
    pub occ_max_candidates: usize,
    /// Two occlusion candidates must imply Root locations within this
    /// many cells to be compared.
    pub occ_parent_radius: f64,
    pub num_parts: usize,
    pub part_names: Vec<String>,
    pub config_echo: Vec<(String, String)>,
}

impl ModelMeta {
    pub fn with_defaults(num_parts: usize, part_names: Vec<String>) -> Self {
        ModelMeta {
            cell_size: 4,
            interval: 2,
            hog: HogConfig::default(),
            canonical_torso_px: 64.0,
            detection_threshold: -1.0,
            nms_overlap: 0.5,
            occ_nms_overlap: 0.5,
            occ_score_margin: 1.0,
            occ_max_candidates: 2,
            occ_parent_radius: 3.0,
            num_parts,
            part_names,
            config_echo: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel {
    pub meta: ModelMeta,
    pub upper: UpperLayer,
    pub sub_trees: Vec<SubTreeModel>,
    pub occlusion: OcclusionParams,
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn check_tree(nodes: &[NodeSpec], path: &str, out: &mut Vec<Violation>) {
    let n = nodes.len();
    if n == 0 {
        out.push(Violation {
            path: path.into(),
            message: "graph is empty".into(),
        });
        return;
    }
    if nodes[0].parent.is_some() {
        out.push(Violation {
            path: format!("{path}.nodes[0]"),
            message: "root must have no parent".into(),
        });
    }
    for (i, node) in nodes.iter().enumerate() {
        if i > 0 && node.parent.is_none() {
            out.push(Violation {
                path: format!("{path}.nodes[{i}]"),
                message: "second root found; not a tree".into(),
            });
        }
        if let Some(p) = node.parent {
            if p >= n {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}]"),
                    message: format!("parent {p} out of range"),
                });
                continue;
            }
            // Cycle check by walking to the root.
            let mut cur = i;
            let mut steps = 0;
            loop {
                match nodes[cur].parent {
                    Some(next) if next < n => {
                        cur = next;
                        steps += 1;
                        if steps > n {
                            out.push(Violation {
                                path: format!("{path}.nodes[{i}]"),
                                message: "not a tree (cycle in parent pointers)".into(),
                            });
                            break;
                        }
                    }
                    _ => break,
                }
            }
            if node.compat.k_child != node.num_types()
                || node.compat.k_parent != nodes[p].num_types()
            {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}].compat"),
                    message: "compatibility table shape mismatch".into(),
                });
            } else if !node.compat.has_compatible_pair() {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}].compat"),
                    message: "no compatible type pair on edge".into(),
                });
            }
        }
        if node.types.is_empty() {
            out.push(Violation {
                path: format!("{path}.nodes[{i}]"),
                message: "node has no types".into(),
            });
        }
        let (h0, w0) = node
            .types
            .first()
            .map(|t| (t.template.h, t.template.w))
            .unwrap_or((0, 0));
        for (k, t) in node.types.iter().enumerate() {
            if t.deform[0] < 0.0 || t.deform[2] < 0.0 {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}].types[{k}]"),
                    message: format!(
                        "negative quadratic deformation coefficient {:?}",
                        t.deform
                    ),
                });
            }
            if (t.template.h, t.template.w) != (h0, w0) {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}].types[{k}]"),
                    message: "template size differs across types".into(),
                });
            }
            if !t.template.weights.iter().all(|w| w.is_finite()) {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}].types[{k}]"),
                    message: "non-finite template weight".into(),
                });
            }
        }
        if node.is_latent() {
            if node.types.len() != 1 || node.types[0].template.h != 0 {
                out.push(Violation {
                    path: format!("{path}.nodes[{i}]"),
                    message: "latent node must have one type and a zero-size template".into(),
                });
            }
        }
    }
}

/// Check every model invariant, returning the list of violations (empty
/// when the model is well formed).
pub fn validate(model: &PoseModel) -> Vec<Violation> {
    let mut out = Vec::new();
    check_tree(&model.upper.nodes, "upper", &mut out);
    if model
        .upper
        .nodes
        .first()
        .map(|n| !n.is_latent())
        .unwrap_or(false)
    {
        out.push(Violation {
            path: "upper.nodes[0]".into(),
            message: "global root must be a latent node".into(),
        });
    }

    // Latent nodes of a tree need children; in the upper layer sub-tree
    // roots count as children.
    for (i, node) in model.upper.nodes.iter().enumerate() {
        if node.is_latent() {
            let has_child = model.upper.children(i).len() > 0
                || model.sub_trees.iter().any(|st| st.upper_parent == i);
            if !has_child {
                out.push(Violation {
                    path: format!("upper.nodes[{i}]"),
                    message: "latent upper node has no children".into(),
                });
            }
        }
    }

    let mut part_seen = vec![false; model.meta.num_parts];
    let mut mark = |part: usize, path: String, out: &mut Vec<Violation>| {
        if part >= part_seen.len() {
            out.push(Violation {
                path,
                message: format!("part id {part} out of range"),
            });
        } else if part_seen[part] {
            out.push(Violation {
                path,
                message: format!("part id {part} appears more than once"),
            });
        } else {
            part_seen[part] = true;
        }
    };
    for (i, node) in model.upper.nodes.iter().enumerate() {
        if let NodeKind::Observed { part_id } = node.kind {
            mark(part_id, format!("upper.nodes[{i}]"), &mut out);
        }
    }

    for (s, st) in model.sub_trees.iter().enumerate() {
        let path = format!("sub_trees[{s}]");
        if st.upper_parent >= model.upper.nodes.len() {
            out.push(Violation {
                path: path.clone(),
                message: "upper parent out of range".into(),
            });
        }
        for &p in &st.part_ids {
            mark(p, path.clone(), &mut out);
        }
        if st.mixtures.is_empty() {
            out.push(Violation {
                path: path.clone(),
                message: "sub-tree has no mixtures".into(),
            });
        }
        for (m, mix) in st.mixtures.iter().enumerate() {
            let mpath = format!("{path}.mixtures[{m}]");
            check_tree(&mix.nodes, &mpath, &mut out);
            if !mix.nodes.is_empty() && !mix.nodes[0].is_latent() {
                out.push(Violation {
                    path: mpath.clone(),
                    message: "mixture root v0 must be latent".into(),
                });
            }
            // Every local part exactly once.
            let mut seen = vec![false; st.part_ids.len()];
            for (i, node) in mix.nodes.iter().enumerate() {
                if let NodeKind::Observed { part_id } = node.kind {
                    match st.part_ids.iter().position(|&g| g == part_id) {
                        Some(local) if !seen[local] => seen[local] = true,
                        Some(_) => out.push(Violation {
                            path: format!("{mpath}.nodes[{i}]"),
                            message: format!("part {part_id} repeated in mixture"),
                        }),
                        None => out.push(Violation {
                            path: format!("{mpath}.nodes[{i}]"),
                            message: format!("part {part_id} does not belong to this sub-tree"),
                        }),
                    }
                }
            }
            if !seen.iter().all(|&s| s) {
                out.push(Violation {
                    path: mpath.clone(),
                    message: "mixture misses an observed part".into(),
                });
            }
            for (i, node) in mix.nodes.iter().enumerate() {
                if node.is_latent() && mix.children(i).is_empty() {
                    out.push(Violation {
                        path: format!("{mpath}.nodes[{i}]"),
                        message: "latent node has no children".into(),
                    });
                }
            }
        }
    }
    if !part_seen.iter().all(|&s| s) {
        let missing: Vec<usize> = part_seen
            .iter()
            .enumerate()
            .filter(|(_, &s)| !s)
            .map(|(i, _)| i)
            .collect();
        out.push(Violation {
            path: "model".into(),
            message: format!("parts {missing:?} not covered by any node"),
        });
    }

    for (i, p) in model.occlusion.pairs.iter().enumerate() {
        let path = format!("occlusion.pairs[{i}]");
        if !(0.0..1.0).contains(&p.lambda) {
            out.push(Violation {
                path: path.clone(),
                message: format!("lambda {} outside [0,1)", p.lambda),
            });
        }
        if !(0.0..=1.0).contains(&p.lower) || !(0.0..=1.0).contains(&p.upper) || p.lower > p.upper
        {
            out.push(Violation {
                path,
                message: format!("bounds [{}, {}] invalid", p.lower, p.upper),
            });
        }
    }
    out
}

/// Everything `init_parameters` needs for one sub-tree: the learned
/// structures and the per-sample mixture assignment.
#[derive(Debug, Clone)]
pub struct SubTreeInit {
    pub def: SubTreeDefinition,
    pub structures: Vec<MixtureStructure>,
    pub assignment: Vec<Option<usize>>,
}

fn mean(vals: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in vals {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Position of a structure node in one annotation, in pixels at the
/// canonical (normalized) scale. Latent nodes sit at the centroid of
/// their observed descendants.
fn structure_node_position(
    structure: &MixtureStructure,
    node: usize,
    part_ids: &[usize],
    ann: &TrainingAnnotation,
) -> (f64, f64) {
    match structure.nodes[node] {
        StructureNode::Observed { local_part } => ann.points[part_ids[local_part]],
        StructureNode::Latent => {
            let mut xs = Vec::new();
            let mut stack = vec![node];
            while let Some(cur) = stack.pop() {
                for child in structure.children(cur) {
                    match structure.nodes[child] {
                        StructureNode::Observed { local_part } => {
                            xs.push(ann.points[part_ids[local_part]]);
                        }
                        StructureNode::Latent => stack.push(child),
                    }
                }
            }
            if xs.is_empty() {
                return (0.0, 0.0);
            }
            (
                mean(xs.iter().map(|p| p.0)),
                mean(xs.iter().map(|p| p.1)),
            )
        }
    }
}

/// Cluster 2-d offsets into `k` types, returning per-sample type ids and
/// per-type mean offsets. Empty type clusters get the overall mean.
fn cluster_offsets(
    offsets: &[(f64, f64)],
    k: usize,
    seed: u64,
) -> (Vec<usize>, Vec<(f64, f64)>) {
    let overall = (
        mean(offsets.iter().map(|o| o.0)),
        mean(offsets.iter().map(|o| o.1)),
    );
    if offsets.is_empty() {
        return (Vec::new(), vec![overall; k]);
    }
    let points: Vec<Vec<f64>> = offsets.iter().map(|&(x, y)| vec![x, y]).collect();
    let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let assignment = crate::structure::kmeans_points(&refs, k, seed);
    let mut anchors = Vec::with_capacity(k);
    for t in 0..k {
        let members: Vec<&(f64, f64)> = offsets
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == t)
            .map(|(o, _)| o)
            .collect();
        if members.is_empty() {
            anchors.push(overall);
        } else {
            anchors.push((
                mean(members.iter().map(|o| o.0)),
                mean(members.iter().map(|o| o.1)),
            ));
        }
    }
    (assignment, anchors)
}

/// Standard upper-layer shape for the 26-part body: Root holds L.Body,
/// U.Body and the torso/head chain; legs attach to L.Body and arms to
/// U.Body.
pub struct UpperPlan {
    /// (name, part id, parent slot) in creation order after the latents.
    pub observed_chain: Vec<(String, usize, UpperParent)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpperParent {
    Root,
    LBody,
    UBody,
    Observed(usize),
}

pub fn standard_upper_plan() -> UpperPlan {
    use crate::parts::*;
    UpperPlan {
        observed_chain: vec![
            ("torso_mid".into(), TORSO_MID, UpperParent::Root),
            ("chest".into(), CHEST, UpperParent::Observed(TORSO_MID)),
            ("pelvis".into(), PELVIS, UpperParent::Observed(TORSO_MID)),
            ("neck".into(), NECK, UpperParent::Observed(CHEST)),
            ("head_mid".into(), HEAD_MID, UpperParent::Observed(NECK)),
            ("head_top".into(), HEAD_TOP, UpperParent::Observed(HEAD_MID)),
        ],
    }
}

pub const UPPER_ROOT: usize = 0;
pub const UPPER_LBODY: usize = 1;
pub const UPPER_UBODY: usize = 2;

/// Build a zero-weight model from learned structures: templates and
/// biases zero, deformation weights `(0.01, 0, 0.01, 0)`, anchors from
/// per-type mean parent-child offsets over the training cluster, and
/// type compatibilities 0 for co-occurring pairs (hard-incompatible
/// otherwise).
///
/// `annotations` must already be scale-normalized so the torso spans
/// `meta.canonical_torso_px`.
pub fn init_parameters(
    annotations: &[TrainingAnnotation],
    sub_tree_inits: &[SubTreeInit],
    plan: &UpperPlan,
    k_limb: usize,
    k_upper: usize,
    template_cells: usize,
    meta: ModelMeta,
    seed: u64,
) -> Result<PoseModel> {
    let cell = meta.cell_size as f64;
    let dim = meta.hog.feature_dim();
    let half_tpl = template_cells as f64 / 2.0;
    // Observed node location = template top-left cell; latent node
    // location = its center cell.
    let obs_loc = |p: (f64, f64)| (p.0 / cell - half_tpl, p.1 / cell - half_tpl);
    let lat_loc = |p: (f64, f64)| (p.0 / cell, p.1 / cell);

    let mut seed_counter = seed;
    let mut next_seed = move || {
        seed_counter = seed_counter.wrapping_add(0x9E3779B97F4A7C15);
        seed_counter
    };

    // Positions of the upper latents per annotation.
    let subtree_centroid = |ann: &TrainingAnnotation, ids: &[usize]| {
        (
            mean(ids.iter().map(|&p| ann.points[p].0)),
            mean(ids.iter().map(|&p| ann.points[p].1)),
        )
    };
    let leg_ids: Vec<usize> = sub_tree_inits
        .iter()
        .filter(|si| si.def.name.is_leg())
        .flat_map(|si| si.def.part_ids.clone())
        .collect();
    let arm_ids: Vec<usize> = sub_tree_inits
        .iter()
        .filter(|si| !si.def.name.is_leg())
        .flat_map(|si| si.def.part_ids.clone())
        .collect();
    let all_ids: Vec<usize> = (0..meta.num_parts).collect();
    let upper_latent_pos = |ann: &TrainingAnnotation, slot: usize| -> (f64, f64) {
        match slot {
            UPPER_ROOT => subtree_centroid(ann, &all_ids),
            UPPER_LBODY => subtree_centroid(ann, &leg_ids),
            UPPER_UBODY => subtree_centroid(ann, &arm_ids),
            _ => unreachable!(),
        }
    };

    // Nominal extent in cells of a latent node covering `ids`.
    let nominal_extent = |ids: &[usize]| -> (f64, f64) {
        if annotations.is_empty() || ids.is_empty() {
            return (template_cells as f64, template_cells as f64);
        }
        let h = mean(annotations.iter().map(|ann| {
            let ys: Vec<f64> = ids.iter().map(|&p| ann.points[p].1).collect();
            ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min)
        })) / cell
            + template_cells as f64;
        let w = mean(annotations.iter().map(|ann| {
            let xs: Vec<f64> = ids.iter().map(|&p| ann.points[p].0).collect();
            xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
        })) / cell
            + template_cells as f64;
        (h, w)
    };

    // ---- upper layer ----
    let mut upper_nodes: Vec<NodeSpec> = Vec::new();
    upper_nodes.push(NodeSpec {
        name: "Root".into(),
        kind: NodeKind::Latent,
        parent: None,
        types: vec![TypeParams::latent()],
        compat: CompatTable::empty(),
        extent: nominal_extent(&all_ids),
    });
    for (slot, name, ids) in [(UPPER_LBODY, "L.Body", &leg_ids), (UPPER_UBODY, "U.Body", &arm_ids)]
    {
        let offsets: Vec<(f64, f64)> = annotations
            .iter()
            .map(|ann| {
                let c = lat_loc(upper_latent_pos(ann, slot));
                let r = lat_loc(upper_latent_pos(ann, UPPER_ROOT));
                (c.0 - r.0, c.1 - r.1)
            })
            .collect();
        let anchor = (
            mean(offsets.iter().map(|o| o.0)).round() as i32,
            mean(offsets.iter().map(|o| o.1)).round() as i32,
        );
        upper_nodes.push(NodeSpec {
            name: name.into(),
            kind: NodeKind::Latent,
            parent: Some(UPPER_ROOT),
            types: vec![TypeParams {
                template: Template::zeros(0, 0, 0),
                anchor,
                deform: [0.01, 0.0, 0.01, 0.0],
            }],
            compat: CompatTable::all_zero(1, 1),
            extent: nominal_extent(ids),
        });
    }

    // Observed torso/head chain with type clustering against the parent.
    // Compatibility is 0 for type pairs that co-occur in the training
    // data, hard-incompatible otherwise.
    let mut upper_index_of_part: Vec<Option<usize>> = vec![None; meta.num_parts];
    let mut upper_type_ids: Vec<Vec<usize>> = vec![vec![0; annotations.len()]; upper_nodes.len()];
    for (name, part_id, parent) in &plan.observed_chain {
        let parent_idx = match parent {
            UpperParent::Root => UPPER_ROOT,
            UpperParent::LBody => UPPER_LBODY,
            UpperParent::UBody => UPPER_UBODY,
            UpperParent::Observed(p) => upper_index_of_part[*p].ok_or_else(|| {
                Error::ModelInvalid(format!("upper plan references part {p} before creation"))
            })?,
        };
        let offsets: Vec<(f64, f64)> = annotations
            .iter()
            .map(|ann| {
                let c = obs_loc(ann.points[*part_id]);
                let p = match &upper_nodes[parent_idx].kind {
                    NodeKind::Latent => lat_loc(upper_latent_pos(ann, parent_idx)),
                    NodeKind::Observed { part_id } => obs_loc(ann.points[*part_id]),
                };
                (c.0 - p.0, c.1 - p.1)
            })
            .collect();
        let (type_ids, anchors) = cluster_offsets(&offsets, k_upper, next_seed());
        let k_parent = upper_nodes[parent_idx].num_types();
        let mut compat = CompatTable::incompatible(k_upper, k_parent);
        for (s, &z) in type_ids.iter().enumerate() {
            compat.set(z, upper_type_ids[parent_idx][s], Some(0.0));
        }
        if !compat.has_compatible_pair() {
            compat = CompatTable::all_zero(k_upper, k_parent);
        }
        let types = anchors
            .into_iter()
            .map(|(ax, ay)| TypeParams {
                template: Template::zeros(template_cells, template_cells, dim),
                anchor: (ax.round() as i32, ay.round() as i32),
                deform: [0.01, 0.0, 0.01, 0.0],
            })
            .collect();
        upper_index_of_part[*part_id] = Some(upper_nodes.len());
        upper_type_ids.push(type_ids);
        upper_nodes.push(NodeSpec {
            name: name.clone(),
            kind: NodeKind::Observed { part_id: *part_id },
            parent: Some(parent_idx),
            types,
            compat,
            extent: (template_cells as f64, template_cells as f64),
        });
    }

    // ---- sub-trees ----
    let mut sub_trees = Vec::with_capacity(sub_tree_inits.len());
    for si in sub_tree_inits {
        let part_ids = si.def.part_ids.clone();
        let upper_parent = if si.def.name.is_leg() { UPPER_LBODY } else { UPPER_UBODY };
        let mut mixtures = Vec::with_capacity(si.structures.len());
        for (m, structure) in si.structures.iter().enumerate() {
            let members: Vec<&TrainingAnnotation> = annotations
                .iter()
                .zip(&si.assignment)
                .filter(|(_, &a)| a == Some(m))
                .map(|(ann, _)| ann)
                .collect();
            // Anchor estimation falls back to the full set for tiny or
            // empty clusters.
            let pool: Vec<&TrainingAnnotation> = if members.is_empty() {
                annotations.iter().collect()
            } else {
                members
            };
            let mut nodes: Vec<NodeSpec> = Vec::with_capacity(structure.nodes.len());
            let mut sample_type_ids: Vec<Vec<usize>> = Vec::with_capacity(structure.nodes.len());
            for (i, snode) in structure.nodes.iter().enumerate() {
                let parent = if i == 0 { None } else { Some(structure.parents[i]) };
                let node_pos = |ann: &TrainingAnnotation, node: usize| -> (f64, f64) {
                    let raw = structure_node_position(structure, node, &part_ids, ann);
                    match structure.nodes[node] {
                        StructureNode::Observed { .. } => obs_loc(raw),
                        StructureNode::Latent => lat_loc(raw),
                    }
                };
                match snode {
                    StructureNode::Latent => {
                        let anchor = if let Some(p) = parent {
                            let offs: Vec<(f64, f64)> = pool
                                .iter()
                                .map(|ann| {
                                    let c = node_pos(ann, i);
                                    let pp = node_pos(ann, p);
                                    (c.0 - pp.0, c.1 - pp.1)
                                })
                                .collect();
                            (
                                mean(offs.iter().map(|o| o.0)).round() as i32,
                                mean(offs.iter().map(|o| o.1)).round() as i32,
                            )
                        } else {
                            (0, 0)
                        };
                        let desc_ids: Vec<usize> = {
                            // Observed descendants define the latent extent.
                            let mut ids = Vec::new();
                            let mut stack = vec![i];
                            while let Some(cur) = stack.pop() {
                                for ch in structure.children(cur) {
                                    match structure.nodes[ch] {
                                        StructureNode::Observed { local_part } => {
                                            ids.push(part_ids[local_part])
                                        }
                                        StructureNode::Latent => stack.push(ch),
                                    }
                                }
                            }
                            ids
                        };
                        nodes.push(NodeSpec {
                            name: if i == 0 {
                                format!("{}.v0", si.def.name.as_str())
                            } else {
                                format!("{}.latent{}", si.def.name.as_str(), i)
                            },
                            kind: NodeKind::Latent,
                            parent,
                            types: vec![TypeParams {
                                template: Template::zeros(0, 0, 0),
                                anchor,
                                deform: [0.01, 0.0, 0.01, 0.0],
                            }],
                            compat: if parent.is_some() {
                                CompatTable::all_zero(1, 1)
                            } else {
                                CompatTable::empty()
                            },
                            extent: nominal_extent(&desc_ids),
                        });
                        sample_type_ids.push(vec![0; pool.len()]);
                    }
                    StructureNode::Observed { local_part } => {
                        let p = parent.expect("observed node cannot be the root");
                        let offs: Vec<(f64, f64)> = pool
                            .iter()
                            .map(|ann| {
                                let c = node_pos(ann, i);
                                let pp = node_pos(ann, p);
                                (c.0 - pp.0, c.1 - pp.1)
                            })
                            .collect();
                        let (type_ids, anchors) = cluster_offsets(&offs, k_limb, next_seed());
                        let k_parent = nodes[p].num_types();
                        let mut compat = CompatTable::incompatible(k_limb, k_parent);
                        for (s, &z) in type_ids.iter().enumerate() {
                            let zp = sample_type_ids[p][s];
                            compat.set(z, zp, Some(0.0));
                        }
                        if !compat.has_compatible_pair() {
                            compat = CompatTable::all_zero(k_limb, k_parent);
                        }
                        let types: Vec<TypeParams> = anchors
                            .into_iter()
                            .map(|(ax, ay)| TypeParams {
                                template: Template::zeros(template_cells, template_cells, dim),
                                anchor: (ax.round() as i32, ay.round() as i32),
                                deform: [0.01, 0.0, 0.01, 0.0],
                            })
                            .collect();
                        nodes.push(NodeSpec {
                            name: format!(
                                "{}.{}",
                                si.def.name.as_str(),
                                crate::parts::PART_NAMES
                                    .get(part_ids[*local_part])
                                    .copied()
                                    .unwrap_or("part")
                            ),
                            kind: NodeKind::Observed {
                                part_id: part_ids[*local_part],
                            },
                            parent,
                            types,
                            compat,
                            extent: (template_cells as f64, template_cells as f64),
                        });
                        sample_type_ids.push(type_ids);
                    }
                }
            }
            mixtures.push(MixtureModel {
                nodes,
                bias: 0.0,
                gate: true,
            });
        }

        // Anchor of v0 under its upper parent.
        let root_offsets: Vec<(f64, f64)> = annotations
            .iter()
            .map(|ann| {
                let c = lat_loc(subtree_centroid(ann, &part_ids));
                let p = lat_loc(upper_latent_pos(ann, upper_parent));
                (c.0 - p.0, c.1 - p.1)
            })
            .collect();
        sub_trees.push(SubTreeModel {
            name: si.def.name.as_str().to_string(),
            part_ids: part_ids.clone(),
            mixtures,
            upper_parent,
            root_anchor: (
                mean(root_offsets.iter().map(|o| o.0)).round() as i32,
                mean(root_offsets.iter().map(|o| o.1)).round() as i32,
            ),
            root_extent: nominal_extent(&part_ids),
        });
    }

    let num_sub_trees = sub_trees.len();
    let model = PoseModel {
        meta,
        upper: UpperLayer { nodes: upper_nodes },
        sub_trees,
        occlusion: OcclusionParams::disabled(num_sub_trees),
    };
    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(Error::ModelInvalid(
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    Ok(model)
}

/// Effective deformation weights of the sub-tree root edge: the
/// `(1/Z)`-average of all learned per-type deformation weights inside
/// the sub-trees sharing this upper parent, `Z` being their total
/// mixture count.
pub fn effective_root_deform(model: &PoseModel, sub_tree: usize) -> [f64; 4] {
    let parent = model.sub_trees[sub_tree].upper_parent;
    let z: usize = model
        .sub_trees
        .iter()
        .filter(|st| st.upper_parent == parent)
        .map(|st| st.mixtures.len())
        .sum();
    let mut acc = [0.0f64; 4];
    let st = &model.sub_trees[sub_tree];
    for mix in &st.mixtures {
        for node in mix.nodes.iter().skip(1) {
            let k = node.types.len() as f64;
            for t in &node.types {
                for (a, d) in acc.iter_mut().zip(&t.deform) {
                    *a += d / k;
                }
            }
        }
    }
    let z = z.max(1) as f64;
    for a in &mut acc {
        *a /= z;
    }
    acc
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new() -> Self {
        Enc { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::ModelTruncated(self.section.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::ModelFormat("invalid utf-8 string".into()))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            other => Err(Error::ModelFormat(format!("bad option flag {other}"))),
        }
    }
}

fn encode_template(e: &mut Enc, t: &Template) {
    e.u32(t.h as u32);
    e.u32(t.w as u32);
    e.u32(t.dim as u32);
    for w in &t.weights {
        e.f64(*w);
    }
    e.f64(t.bias);
}

fn decode_template(d: &mut Dec) -> Result<Template> {
    let h = d.u32()? as usize;
    let w = d.u32()? as usize;
    let dim = d.u32()? as usize;
    let mut weights = Vec::with_capacity(h * w * dim);
    for _ in 0..h * w * dim {
        weights.push(d.f64()?);
    }
    Ok(Template {
        h,
        w,
        dim,
        weights,
        bias: d.f64()?,
    })
}

fn encode_node(e: &mut Enc, n: &NodeSpec) {
    e.string(&n.name);
    match n.kind {
        NodeKind::Observed { part_id } => {
            e.u8(1);
            e.u32(part_id as u32);
        }
        NodeKind::Latent => e.u8(0),
    }
    match n.parent {
        Some(p) => {
            e.u8(1);
            e.u32(p as u32);
        }
        None => e.u8(0),
    }
    e.u32(n.types.len() as u32);
    for t in &n.types {
        encode_template(e, &t.template);
        e.i32(t.anchor.0);
        e.i32(t.anchor.1);
        for v in &t.deform {
            e.f64(*v);
        }
    }
    e.u32(n.compat.k_child as u32);
    e.u32(n.compat.k_parent as u32);
    for (_, _, v) in n.compat.iter() {
        e.opt_f64(v);
    }
    e.f64(n.extent.0);
    e.f64(n.extent.1);
}

fn decode_node(d: &mut Dec) -> Result<NodeSpec> {
    let name = d.string()?;
    let kind = match d.u8()? {
        1 => NodeKind::Observed {
            part_id: d.u32()? as usize,
        },
        0 => NodeKind::Latent,
        other => return Err(Error::ModelFormat(format!("bad node kind {other}"))),
    };
    let parent = match d.u8()? {
        1 => Some(d.u32()? as usize),
        0 => None,
        other => return Err(Error::ModelFormat(format!("bad parent flag {other}"))),
    };
    let n_types = d.u32()? as usize;
    let mut types = Vec::with_capacity(n_types);
    for _ in 0..n_types {
        let template = decode_template(d)?;
        let anchor = (d.i32()?, d.i32()?);
        let mut deform = [0.0; 4];
        for v in &mut deform {
            *v = d.f64()?;
        }
        types.push(TypeParams {
            template,
            anchor,
            deform,
        });
    }
    let k_child = d.u32()? as usize;
    let k_parent = d.u32()? as usize;
    let mut compat = CompatTable::incompatible(k_child, k_parent);
    for zc in 0..k_child {
        for zp in 0..k_parent {
            compat.set(zc, zp, d.opt_f64()?);
        }
    }
    let extent = (d.f64()?, d.f64()?);
    Ok(NodeSpec {
        name,
        kind,
        parent,
        types,
        compat,
        extent,
    })
}

/// Serialize the model into the `.mstmodel` container: a plain-text
/// header (magic, version, config echo, counts) followed by a binary
/// body with little-endian 64-bit floats.
pub fn serialize(model: &PoseModel) -> Vec<u8> {
    let mut out = Vec::new();
    let header = format!(
        "{MODEL_MAGIC} {MODEL_VERSION_MAJOR} {MODEL_VERSION_MINOR}\nparts {} sub_trees {}\n",
        model.meta.num_parts,
        model.sub_trees.len()
    );
    out.extend_from_slice(header.as_bytes());
    for (k, v) in &model.meta.config_echo {
        out.extend_from_slice(format!("cfg {k} {v}\n").as_bytes());
    }
    out.extend_from_slice(b"---\n");

    let mut e = Enc::new();
    // meta
    e.u32(model.meta.cell_size as u32);
    e.u32(model.meta.interval as u32);
    e.u32(model.meta.hog.cell_size as u32);
    e.u32(model.meta.hog.signed_orientations as u32);
    e.f64(model.meta.hog.clip);
    e.f64(model.meta.canonical_torso_px);
    e.f64(model.meta.detection_threshold);
    e.f64(model.meta.nms_overlap);
    e.f64(model.meta.occ_nms_overlap);
    e.f64(model.meta.occ_score_margin);
    e.u32(model.meta.occ_max_candidates as u32);
    e.f64(model.meta.occ_parent_radius);
    e.u32(model.meta.num_parts as u32);
    e.u32(model.meta.part_names.len() as u32);
    for n in &model.meta.part_names {
        e.string(n);
    }
    e.u32(model.meta.config_echo.len() as u32);
    for (k, v) in &model.meta.config_echo {
        e.string(k);
        e.string(v);
    }
    // upper layer
    e.u32(model.upper.nodes.len() as u32);
    for n in &model.upper.nodes {
        encode_node(&mut e, n);
    }
    // sub-trees
    e.u32(model.sub_trees.len() as u32);
    for st in &model.sub_trees {
        e.string(&st.name);
        e.u32(st.part_ids.len() as u32);
        for &p in &st.part_ids {
            e.u32(p as u32);
        }
        e.u32(st.upper_parent as u32);
        e.i32(st.root_anchor.0);
        e.i32(st.root_anchor.1);
        e.f64(st.root_extent.0);
        e.f64(st.root_extent.1);
        e.u32(st.mixtures.len() as u32);
        for mix in &st.mixtures {
            e.f64(mix.bias);
            e.u8(mix.gate as u8);
            e.u32(mix.nodes.len() as u32);
            for n in &mix.nodes {
                encode_node(&mut e, n);
            }
        }
    }
    // occlusion
    e.u32(model.occlusion.pairs.len() as u32);
    for p in &model.occlusion.pairs {
        e.u32(p.a as u32);
        e.u32(p.b as u32);
        e.f64(p.lambda);
        e.f64(p.lower);
        e.f64(p.upper);
    }

    out.extend_from_slice(&(e.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&e.buf);
    out
}

/// Inverse of [`serialize`]; validates invariants after decoding.
pub fn deserialize(bytes: &[u8]) -> Result<PoseModel> {
    // Text header up to the '---' separator.
    let sep = b"---\n";
    let header_end = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| Error::ModelFormat("missing header separator".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::ModelFormat("header is not utf-8".into()))?;
    let mut lines = header.lines();
    let magic_line = lines
        .next()
        .ok_or_else(|| Error::ModelFormat("empty header".into()))?;
    let mut tokens = magic_line.split_whitespace();
    if tokens.next() != Some(MODEL_MAGIC) {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let major: u32 = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::ModelFormat("bad version".into()))?;
    let minor: u32 = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::ModelFormat("bad version".into()))?;
    if major != MODEL_VERSION_MAJOR {
        return Err(Error::ModelVersion {
            found_major: major,
            found_minor: minor,
            expected_major: MODEL_VERSION_MAJOR,
        });
    }

    let body = &bytes[header_end + sep.len()..];
    if body.len() < 8 {
        return Err(Error::ModelTruncated("body length".into()));
    }
    let body_len = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
    let payload = &body[8..];
    if payload.len() < body_len {
        return Err(Error::ModelTruncated("body".into()));
    }
    if payload.len() > body_len {
        return Err(Error::ModelFormat("trailing bytes after model body".into()));
    }
    let mut d = Dec {
        buf: payload,
        pos: 0,
        section: "meta",
    };

    let cell_size = d.u32()? as usize;
    let interval = d.u32()? as usize;
    let hog = HogConfig {
        cell_size: d.u32()? as usize,
        signed_orientations: d.u32()? as usize,
        clip: d.f64()?,
    };
    let canonical_torso_px = d.f64()?;
    let detection_threshold = d.f64()?;
    let nms_overlap = d.f64()?;
    let occ_nms_overlap = d.f64()?;
    let occ_score_margin = d.f64()?;
    let occ_max_candidates = d.u32()? as usize;
    let occ_parent_radius = d.f64()?;
    let num_parts = d.u32()? as usize;
    let n_names = d.u32()? as usize;
    let mut part_names = Vec::with_capacity(n_names);
    for _ in 0..n_names {
        part_names.push(d.string()?);
    }
    let n_cfg = d.u32()? as usize;
    let mut config_echo = Vec::with_capacity(n_cfg);
    for _ in 0..n_cfg {
        let k = d.string()?;
        let v = d.string()?;
        config_echo.push((k, v));
    }

    d.section = "upper";
    let n_upper = d.u32()? as usize;
    let mut upper_nodes = Vec::with_capacity(n_upper);
    for _ in 0..n_upper {
        upper_nodes.push(decode_node(&mut d)?);
    }

    d.section = "sub_trees";
    let n_st = d.u32()? as usize;
    let mut sub_trees = Vec::with_capacity(n_st);
    for _ in 0..n_st {
        let name = d.string()?;
        let n_parts = d.u32()? as usize;
        let mut part_ids = Vec::with_capacity(n_parts);
        for _ in 0..n_parts {
            part_ids.push(d.u32()? as usize);
        }
        let upper_parent = d.u32()? as usize;
        let root_anchor = (d.i32()?, d.i32()?);
        let root_extent = (d.f64()?, d.f64()?);
        let n_mix = d.u32()? as usize;
        let mut mixtures = Vec::with_capacity(n_mix);
        for _ in 0..n_mix {
            let bias = d.f64()?;
            let gate = d.u8()? != 0;
            let n_nodes = d.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                nodes.push(decode_node(&mut d)?);
            }
            mixtures.push(MixtureModel { nodes, bias, gate });
        }
        sub_trees.push(SubTreeModel {
            name,
            part_ids,
            mixtures,
            upper_parent,
            root_anchor,
            root_extent,
        });
    }

    d.section = "occlusion";
    let n_pairs = d.u32()? as usize;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        pairs.push(OcclusionPair {
            a: d.u32()? as usize,
            b: d.u32()? as usize,
            lambda: d.f64()?,
            lower: d.f64()?,
            upper: d.f64()?,
        });
    }
    if d.pos != d.buf.len() {
        return Err(Error::ModelFormat("unused bytes in model body".into()));
    }

    let model = PoseModel {
        meta: ModelMeta {
            cell_size,
            interval,
            hog,
            canonical_torso_px,
            detection_threshold,
            nms_overlap,
            occ_nms_overlap,
            occ_score_margin,
            occ_max_candidates,
            occ_parent_radius,
            num_parts,
            part_names,
            config_echo,
        },
        upper: UpperLayer { nodes: upper_nodes },
        sub_trees,
        occlusion: OcclusionParams { pairs },
    };
    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(Error::ModelInvalid(format!(
            "loaded model violates invariants: {}",
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(model)
}

pub fn save_model(model: &PoseModel, path: &Path) -> Result<()> {
    let bytes = serialize(model);
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<PoseModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    deserialize(&bytes)
}

/// Lossless text dump for diffing; floats print with Rust's shortest
/// round-trip formatting and `-inf` marks incompatible pairs.
pub fn text_export(model: &PoseModel) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{MODEL_MAGIC} {MODEL_VERSION_MAJOR} {MODEL_VERSION_MINOR} text"
    );
    let m = &model.meta;
    let _ = writeln!(
        s,
        "meta cell_size={} interval={} hog_cell={} hog_orient={} hog_clip={} torso_px={} thr={} nms={} occ_nms={} occ_margin={} occ_radius={}",
        m.cell_size, m.interval, m.hog.cell_size, m.hog.signed_orientations, m.hog.clip,
        m.canonical_torso_px, m.detection_threshold, m.nms_overlap, m.occ_nms_overlap,
        m.occ_score_margin, m.occ_parent_radius
    );
    for (k, v) in &m.config_echo {
        let _ = writeln!(s, "cfg {k} {v}");
    }
    let dump_node = |s: &mut String, prefix: &str, n: &NodeSpec| {
        let kind = match n.kind {
            NodeKind::Observed { part_id } => format!("observed part={part_id}"),
            NodeKind::Latent => "latent".to_string(),
        };
        let parent = n
            .parent
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{prefix}node name={} kind={kind} parent={parent} extent=({},{})",
            n.name, n.extent.0, n.extent.1
        );
        for (k, t) in n.types.iter().enumerate() {
            let _ = writeln!(
                s,
                "{prefix}  type {k} anchor=({},{}) deform=({},{},{},{}) bias={} tpl={}x{}x{}",
                t.anchor.0,
                t.anchor.1,
                t.deform[0],
                t.deform[1],
                t.deform[2],
                t.deform[3],
                t.template.bias,
                t.template.h,
                t.template.w,
                t.template.dim
            );
            if !t.template.weights.is_empty() {
                let _ = write!(s, "{prefix}    w");
                for w in &t.template.weights {
                    let _ = write!(s, " {w}");
                }
                let _ = writeln!(s);
            }
        }
        if !n.compat.is_empty() {
            let _ = write!(s, "{prefix}  compat");
            for (_, _, v) in n.compat.iter() {
                match v {
                    Some(x) => {
                        let _ = write!(s, " {x}");
                    }
                    None => {
                        let _ = write!(s, " -inf");
                    }
                }
            }
            let _ = writeln!(s);
        }
    };
    let _ = writeln!(s, "upper nodes={}", model.upper.nodes.len());
    for n in &model.upper.nodes {
        dump_node(&mut s, "  ", n);
    }
    for (i, st) in model.sub_trees.iter().enumerate() {
        let _ = writeln!(
            s,
            "sub_tree {i} name={} parts={:?} upper_parent={} root_anchor=({},{}) root_extent=({},{}) mixtures={}",
            st.name,
            st.part_ids,
            st.upper_parent,
            st.root_anchor.0,
            st.root_anchor.1,
            st.root_extent.0,
            st.root_extent.1,
            st.mixtures.len()
        );
        for (mi, mix) in st.mixtures.iter().enumerate() {
            let _ = writeln!(
                s,
                "  mixture {mi} bias={} gate={} nodes={}",
                mix.bias,
                mix.gate,
                mix.nodes.len()
            );
            for n in &mix.nodes {
                dump_node(&mut s, "    ", n);
            }
        }
    }
    for p in &model.occlusion.pairs {
        let _ = writeln!(
            s,
            "occlusion pair=({},{}) lambda={} lower={} upper={}",
            p.a, p.b, p.lambda, p.lower, p.upper
        );
    }
    s
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;

    /// A small hand-built two-layer model used across the test suite:
    /// `n_parts` observed parts split between one or two sub-trees plus
    /// an optional upper observed node.
    pub fn tiny_model(
        sub_tree_parts: &[usize],
        upper_parts: usize,
        k: usize,
        dim: usize,
        tpl_cells: usize,
    ) -> PoseModel {
        let mut next_part = 0usize;
        let mut upper_nodes = vec![NodeSpec {
            name: "Root".into(),
            kind: NodeKind::Latent,
            parent: None,
            types: vec![TypeParams::latent()],
            compat: CompatTable::empty(),
            extent: (3.0, 3.0),
        }];
        // One group latent per pair-slot actually used by a sub-tree.
        let n_groups = sub_tree_parts.len().min(2);
        for g in 0..n_groups {
            upper_nodes.push(NodeSpec {
                name: if g == 0 { "L.Body".into() } else { "U.Body".into() },
                kind: NodeKind::Latent,
                parent: Some(0),
                types: vec![TypeParams::latent()],
                compat: CompatTable::all_zero(1, 1),
                extent: (3.0, 3.0),
            });
        }
        let mut prev = 0usize;
        for u in 0..upper_parts {
            let types = (0..k)
                .map(|t| TypeParams {
                    template: Template::zeros(tpl_cells, tpl_cells, dim),
                    anchor: (t as i32, 1),
                    deform: [0.02, 0.0, 0.02, 0.0],
                })
                .collect();
            upper_nodes.push(NodeSpec {
                name: format!("upper{u}"),
                kind: NodeKind::Observed { part_id: next_part },
                parent: Some(prev),
                types,
                compat: CompatTable::all_zero(k, upper_nodes[prev].num_types()),
                extent: (tpl_cells as f64, tpl_cells as f64),
            });
            prev = upper_nodes.len() - 1;
            next_part += 1;
        }

        let mut sub_trees = Vec::new();
        for (si, &n_parts) in sub_tree_parts.iter().enumerate() {
            let part_ids: Vec<usize> = (next_part..next_part + n_parts).collect();
            next_part += n_parts;
            let mut nodes = vec![NodeSpec {
                name: format!("st{si}.v0"),
                kind: NodeKind::Latent,
                parent: None,
                types: vec![TypeParams::latent()],
                compat: CompatTable::empty(),
                extent: (3.0, 3.0),
            }];
            for (li, &pid) in part_ids.iter().enumerate() {
                let types = (0..k)
                    .map(|t| TypeParams {
                        template: Template::zeros(tpl_cells, tpl_cells, dim),
                        anchor: (li as i32 - 1, t as i32),
                        deform: [0.03, 0.0, 0.03, 0.0],
                    })
                    .collect();
                nodes.push(NodeSpec {
                    name: format!("st{si}.p{li}"),
                    kind: NodeKind::Observed { part_id: pid },
                    parent: Some(if li == 0 { 0 } else { li }),
                    types,
                    compat: CompatTable::all_zero(k, if li == 0 { 1 } else { k }),
                    extent: (tpl_cells as f64, tpl_cells as f64),
                });
            }
            sub_trees.push(SubTreeModel {
                name: format!("st{si}"),
                part_ids,
                mixtures: vec![MixtureModel {
                    nodes,
                    bias: 0.0,
                    gate: true,
                }],
                upper_parent: 1 + (si % n_groups),
                root_anchor: (0, 0),
                root_extent: (4.0, 4.0),
            });
        }
        let n_st = sub_trees.len();
        let meta = ModelMeta::with_defaults(
            next_part,
            (0..next_part).map(|i| format!("part{i}")).collect(),
        );
        PoseModel {
            meta,
            upper: UpperLayer { nodes: upper_nodes },
            sub_trees,
            occlusion: OcclusionParams::disabled(n_st),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::tiny_model;
    use super::*;

    #[test]
    fn tiny_model_validates() {
        let m = tiny_model(&[2, 2], 1, 2, 4, 1);
        assert_eq!(validate(&m), Vec::new());
    }

    #[test]
    fn negative_quadratic_coefficient_is_a_violation() {
        let mut m = tiny_model(&[2], 0, 2, 4, 1);
        m.sub_trees[0].mixtures[0].nodes[1].types[0].deform[0] = -0.5;
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].path.contains("sub_trees[0].mixtures[0].nodes[1].types[0]"));
    }

    #[test]
    fn cycle_in_upper_layer_is_detected() {
        let mut m = tiny_model(&[2], 2, 1, 4, 1);
        // Make the two upper observed nodes point at each other.
        let n = m.upper.nodes.len();
        m.upper.nodes[n - 2].parent = Some(n - 1);
        let v = validate(&m);
        assert!(v.iter().any(|v| v.message.contains("cycle")));
    }

    #[test]
    fn all_incompatible_edge_is_a_violation() {
        let mut m = tiny_model(&[2], 0, 2, 4, 1);
        m.sub_trees[0].mixtures[0].nodes[2].compat = CompatTable::incompatible(2, 2);
        let v = validate(&m);
        assert!(v.iter().any(|v| v.message.contains("no compatible")));
    }

    #[test]
    fn serialize_round_trip_is_identity() {
        let mut m = tiny_model(&[2, 3], 2, 2, 8, 2);
        // Put distinctive values everywhere, including a -inf sentinel.
        let mut x = 0.1f64;
        for st in &mut m.sub_trees {
            for mix in &mut st.mixtures {
                mix.bias = x;
                for node in &mut mix.nodes {
                    for t in &mut node.types {
                        for w in &mut t.template.weights {
                            *w = x;
                            x = (x * 1.7 + 0.3) % 5.0;
                        }
                        t.template.bias = -x;
                        t.deform = [x.abs(), -x, x.abs() * 0.5, x];
                    }
                }
            }
        }
        m.sub_trees[0].mixtures[0].nodes[2]
            .compat
            .set(0, 0, None);
        m.occlusion.pairs[0].lambda = 0.625;
        m.occlusion.pairs[0].lower = 0.1;
        m.occlusion.pairs[0].upper = 0.75;
        m.meta.config_echo = vec![("seed".into(), "7".into()), ("m".into(), "2".into())];

        let bytes = serialize(&m);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(m, back);
        // Bit-exactness of floats comes with structural equality since
        // every weight survives as the identical f64.
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn truncated_stream_errors() {
        let m = tiny_model(&[2], 1, 2, 4, 1);
        let bytes = serialize(&m);
        let cut = &bytes[..bytes.len() - 9];
        match deserialize(cut) {
            Err(Error::ModelTruncated(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn future_major_version_is_rejected() {
        let m = tiny_model(&[2], 1, 2, 4, 1);
        let mut bytes = serialize(&m);
        // Header starts with "MSTMODEL 1 0\n".
        let pos = MODEL_MAGIC.len() + 1;
        bytes[pos] = b'9';
        match deserialize(&bytes) {
            Err(Error::ModelVersion { found_major: 9, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn infinity_sentinels_survive_round_trip() {
        let mut m = tiny_model(&[3], 0, 2, 4, 1);
        m.sub_trees[0].mixtures[0].nodes[2].compat.set(1, 0, None);
        m.sub_trees[0].mixtures[0].nodes[2].compat.set(0, 1, None);
        let back = deserialize(&serialize(&m)).unwrap();
        let c = &back.sub_trees[0].mixtures[0].nodes[2].compat;
        assert_eq!(c.get(1, 0), None);
        assert_eq!(c.get(0, 1), None);
        assert_eq!(c.get(0, 0), Some(0.0));
    }

    #[test]
    fn effective_root_deform_averages_over_mixture_count() {
        let m = tiny_model(&[2, 2], 0, 1, 4, 1);
        // Both sub-trees share no upper parent (they alternate 1 and 2),
        // so Z is each sub-tree's own mixture count (1) and the average
        // is over its two nodes' deform values.
        let d = effective_root_deform(&m, 0);
        assert!((d[0] - 0.06).abs() < 1e-12);
        assert!((d[2] - 0.06).abs() < 1e-12);
    }

    #[test]
    fn text_export_mentions_every_mixture() {
        let m = tiny_model(&[2, 2], 1, 2, 4, 1);
        let txt = text_export(&m);
        assert!(txt.contains("sub_tree 0"));
        assert!(txt.contains("sub_tree 1"));
        assert!(txt.contains("mixture 0"));
        assert!(txt.contains("upper nodes=4"));
    }
}
