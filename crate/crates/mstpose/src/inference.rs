//! Exact MAP inference: unary score maps, quadratic-deformation message
//! passing up the two-layer tree and backtracking to part locations.
//!
//! Locations are cell coordinates at one pyramid level. An observed
//! node's location is the top-left cell of its template; a latent node's
//! location is its center cell. The displacement penalized along an edge
//! is `d = child_loc - (parent_loc + anchor)`, with cost
//! `a[0]*dx^2 + a[1]*dx + a[2]*dy^2 + a[3]*dy`.

use crate::error::{Error, Result};
use crate::features::{correlate_template, FeatureMap, FeaturePyramid, ScoreGrid};
use crate::geometry::{nms, BoundingBox, Candidate};
use crate::model::{NodeKind, NodeSpec, PoseModel};

pub const NEG_INF: f64 = f64::NEG_INFINITY;

// ---------------------------------------------------------------------------
// Generalized distance transform
// ---------------------------------------------------------------------------

/// 1-d transform `out[i] = max_q f[q] - a2*(q-r)^2 - a1*(q-r)` with
/// `r = offset + i`, by the lower-envelope method. Returns values and the
/// winning source index per output. Sources at `-inf` never win; if every
/// source is `-inf` the output is `-inf` with argmax 0.
fn dt1d(
    f: &[f64],
    a2: f64,
    a1: f64,
    offset: i64,
    out_len: usize,
    out_vals: &mut [f64],
    out_args: &mut [u32],
) {
    debug_assert!(a2 >= 0.0);
    let n = f.len();
    let eval = |q: usize, r: f64| -> f64 {
        let d = q as f64 - r;
        f[q] - a2 * d * d - a1 * d
    };

    if a2 == 0.0 {
        // Linear tilt only: one global winner of f[q] - a1*q.
        let mut best = usize::MAX;
        let mut best_val = NEG_INF;
        for (q, &v) in f.iter().enumerate() {
            if v == NEG_INF {
                continue;
            }
            let t = v - a1 * q as f64;
            if t > best_val {
                best_val = t;
                best = q;
            }
        }
        for i in 0..out_len {
            let r = (offset + i as i64) as f64;
            if best == usize::MAX {
                out_vals[i] = NEG_INF;
                out_args[i] = 0;
            } else {
                out_vals[i] = eval(best, r);
                out_args[i] = best as u32;
            }
        }
        return;
    }

    // Apex of the parabola rooted at q sits at q + b.
    let b = a1 / (2.0 * a2);
    let apex = |q: usize| q as f64 + b;
    let apex_val = |q: usize| f[q] + a1 * a1 / (4.0 * a2);

    let sources: Vec<usize> = (0..n).filter(|&q| f[q] != NEG_INF).collect();
    if sources.is_empty() {
        out_vals[..out_len].fill(NEG_INF);
        out_args[..out_len].fill(0);
        return;
    }

    // Upper envelope of concave parabolas with identical curvature.
    // Invariant: `v` holds m parabolas and `z` holds m+1 boundaries,
    // z[0] = -inf, z[m] = +inf, z[i] the left boundary of v[i].
    // Concave parabolas V - a2 (r - p)^2 with apexes (p, V) cross where
    // V_u - V_q = a2 [(r-p_q)^2 - (r-p_u)^2].
    let intersect = |q: usize, u: usize| -> f64 {
        let pq = apex(q);
        let pu = apex(u);
        ((apex_val(u) - apex_val(q)) / a2 + pq * pq - pu * pu) / (2.0 * (pq - pu))
    };
    let mut v: Vec<usize> = vec![sources[0]];
    let mut z: Vec<f64> = vec![NEG_INF, f64::INFINITY];
    for &q in &sources[1..] {
        let mut s = intersect(q, *v.last().unwrap());
        while v.len() >= 2 && s <= z[v.len() - 1] {
            v.pop();
            s = intersect(q, *v.last().unwrap());
        }
        z.truncate(v.len());
        z.push(s);
        z.push(f64::INFINITY);
        v.push(q);
    }

    let mut k = 0usize;
    for i in 0..out_len {
        let r = (offset + i as i64) as f64;
        while z[k + 1] < r {
            k += 1;
        }
        out_vals[i] = eval(v[k], r);
        out_args[i] = v[k] as u32;
    }
}

/// Per-output argmax of the 2-d transform.
#[derive(Debug, Clone)]
pub struct DtResult {
    pub values: ScoreGrid,
    /// Winning child cell (index into the child grid) per output cell.
    pub arg: Vec<u32>,
}

/// 2-d generalized distance transform with anchored output range:
///
/// `out(p) = max_q values(q) - cost(q - (p + anchor))` for `p` over an
/// `out_rows x out_cols` grid, `q` over the input grid. `deform` is
/// `(a_dx2, a_dx, a_dy2, a_dy)` with non-negative quadratic parts.
pub fn quadratic_dt_anchored(
    values: &ScoreGrid,
    deform: [f64; 4],
    anchor: (i32, i32),
    out_rows: usize,
    out_cols: usize,
) -> DtResult {
    assert!(
        deform[0] >= 0.0 && deform[2] >= 0.0,
        "negative quadratic deformation coefficient"
    );
    let (in_rows, in_cols) = (values.rows, values.cols);
    let (ax, ay) = (anchor.0 as i64, anchor.1 as i64);

    // Pass 1: transform along rows (y) for every input column; outputs on
    // the parent row range.
    let mut m1 = vec![NEG_INF; out_rows * in_cols];
    let mut arg_row = vec![0u32; out_rows * in_cols];
    let mut col_buf = vec![0.0f64; in_rows];
    let mut val_buf = vec![0.0f64; out_rows];
    let mut arg_buf = vec![0u32; out_rows];
    for x in 0..in_cols {
        for y in 0..in_rows {
            col_buf[y] = values.get(y, x);
        }
        dt1d(&col_buf, deform[2], deform[3], ay, out_rows, &mut val_buf, &mut arg_buf);
        for oy in 0..out_rows {
            m1[oy * in_cols + x] = val_buf[oy];
            arg_row[oy * in_cols + x] = arg_buf[oy];
        }
    }

    // Pass 2: transform along columns (x) per output row.
    let mut out = ScoreGrid::filled(out_rows, out_cols, NEG_INF);
    let mut arg = vec![0u32; out_rows * out_cols];
    let mut val_buf2 = vec![0.0f64; out_cols];
    let mut arg_buf2 = vec![0u32; out_cols];
    for oy in 0..out_rows {
        let row = &m1[oy * in_cols..(oy + 1) * in_cols];
        dt1d(row, deform[0], deform[1], ax, out_cols, &mut val_buf2, &mut arg_buf2);
        for ox in 0..out_cols {
            let qx = arg_buf2[ox] as usize;
            let qy = arg_row[oy * in_cols + qx] as usize;
            out.set(oy, ox, val_buf2[ox]);
            arg[oy * out_cols + ox] = (qy * in_cols + qx) as u32;
        }
    }
    DtResult { values: out, arg }
}

/// Square-output transform matching the spec operation: `p` ranges over
/// the input grid.
pub fn quadratic_dt(values: &ScoreGrid, deform: [f64; 4], anchor: (i32, i32)) -> DtResult {
    quadratic_dt_anchored(values, deform, anchor, values.rows, values.cols)
}

// ---------------------------------------------------------------------------
// Score maps and the level pass
// ---------------------------------------------------------------------------

/// Dense per-location, per-type log-score grids for one node at one
/// pyramid level.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub grids: Vec<ScoreGrid>,
}

impl ScoreMap {
    pub fn rows(&self) -> usize {
        self.grids[0].rows
    }
    pub fn cols(&self) -> usize {
        self.grids[0].cols
    }
}

/// Arg-max tables of one edge, indexed by parent type then parent cell.
#[derive(Debug, Clone)]
pub struct EdgeTables {
    pub arg_loc: Vec<Vec<u32>>,
    pub arg_type: Vec<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct NodePass {
    /// Unary plus accumulated child messages, per type.
    pub total: ScoreMap,
    /// Backtracking tables for the edge to the parent (None at roots).
    pub edge: Option<EdgeTables>,
}

#[derive(Debug, Clone)]
pub struct MixturePass {
    pub nodes: Vec<NodePass>,
    /// v0 total plus the mixture bias: the mixture evidence map.
    pub evidence: ScoreGrid,
}

#[derive(Debug, Clone)]
pub struct SubTreePass {
    pub mixtures: Vec<MixturePass>,
    /// Per-cell max over gated mixtures (after occlusion re-weighting).
    pub root_map: ScoreGrid,
    pub winner: Vec<u8>,
}

/// One applied occlusion re-weight, kept for score re-evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionDelta {
    pub sub_tree: usize,
    pub mixture: usize,
    pub cell: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct LevelPass {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    pub sub_trees: Vec<SubTreePass>,
    pub upper: Vec<NodePass>,
    /// DT tables of each sub-tree root edge into its upper parent.
    pub subtree_edges: Vec<EdgeTables>,
    pub root_total: ScoreGrid,
    pub occ_deltas: Vec<OcclusionDelta>,
}

/// Optional per-part location windows (inclusive, in template top-left
/// cells); used by latent completion during training.
#[derive(Debug, Clone, Default)]
pub struct UnaryMasks {
    pub windows: Vec<Option<(i32, i32, i32, i32)>>, // (x_min, x_max, y_min, y_max) per part id
}

fn node_grid_dims(node: &NodeSpec, rows: usize, cols: usize) -> Option<(usize, usize)> {
    match node.kind {
        NodeKind::Latent => Some((rows, cols)),
        NodeKind::Observed { .. } => {
            let t = &node.types[0].template;
            if t.h > rows || t.w > cols {
                None
            } else {
                Some((rows - t.h + 1, cols - t.w + 1))
            }
        }
    }
}

fn correlate_window(
    map: &FeatureMap,
    tpl: &crate::features::Template,
    rows: usize,
    cols: usize,
    window: (i32, i32, i32, i32),
) -> ScoreGrid {
    let (x0, x1, y0, y1) = window;
    let mut g = ScoreGrid::filled(rows, cols, NEG_INF);
    for y in y0.max(0)..=(y1.min(rows as i32 - 1)) {
        for x in x0.max(0)..=(x1.min(cols as i32 - 1)) {
            let (ux, uy) = (x as usize, y as usize);
            let mut acc = tpl.bias;
            for ty in 0..tpl.h {
                for tx in 0..tpl.w {
                    let cell = map.cell(uy + ty, ux + tx);
                    for ch in 0..tpl.dim {
                        acc += tpl.weight(ty, tx, ch) * cell[ch];
                    }
                }
            }
            g.set(uy, ux, acc);
        }
    }
    g
}

fn unary_map(
    node: &NodeSpec,
    map: &FeatureMap,
    masks: Option<&UnaryMasks>,
) -> Option<ScoreMap> {
    let (rows, cols) = node_grid_dims(node, map.rows, map.cols)?;
    let mut grids = Vec::with_capacity(node.types.len());
    match node.kind {
        NodeKind::Latent => grids.push(ScoreGrid::filled(rows, cols, 0.0)),
        NodeKind::Observed { part_id } => {
            let window = masks.and_then(|m| m.windows.get(part_id).copied().flatten());
            for t in &node.types {
                if t.template.h > map.rows || t.template.w > map.cols {
                    return None;
                }
                let g = match window {
                    // Constrained parts only need scores inside the
                    // window; everything else is masked off anyway.
                    Some(w) => correlate_window(map, &t.template, rows, cols, w),
                    None => {
                        let g = correlate_template(map, &t.template);
                        if g.is_empty() {
                            return None;
                        }
                        g
                    }
                };
                grids.push(g);
            }
        }
    }
    Some(ScoreMap { grids })
}

/// Message from a fully accumulated child into its parent's grid: per
/// parent type, max over compatible child types of
/// `compat + dt(child total)`. Returns the per-parent-type grids and the
/// backtracking tables.
fn pass_message(
    child: &NodeSpec,
    child_total: &ScoreMap,
    parent_dims: (usize, usize),
    k_parent: usize,
) -> (Vec<ScoreGrid>, EdgeTables) {
    let (p_rows, p_cols) = parent_dims;
    let cells = p_rows * p_cols;
    // One DT per child type, shared across parent types.
    let dts: Vec<DtResult> = child
        .types
        .iter()
        .enumerate()
        .map(|(zc, t)| {
            quadratic_dt_anchored(&child_total.grids[zc], t.deform, t.anchor, p_rows, p_cols)
        })
        .collect();

    let mut grids = Vec::with_capacity(k_parent);
    let mut arg_loc = Vec::with_capacity(k_parent);
    let mut arg_type = Vec::with_capacity(k_parent);
    for zp in 0..k_parent {
        let mut best = ScoreGrid::filled(p_rows, p_cols, NEG_INF);
        let mut bl = vec![0u32; cells];
        let mut bt = vec![0u8; cells];
        for zc in 0..child.types.len() {
            let compat = if child.compat.is_empty() {
                Some(0.0)
            } else {
                child.compat.get(zc, zp)
            };
            let Some(compat) = compat else { continue };
            let dt = &dts[zc];
            for c in 0..cells {
                let v = dt.values.data[c] + compat;
                if v > best.data[c] {
                    best.data[c] = v;
                    bl[c] = dt.arg[c];
                    bt[c] = zc as u8;
                }
            }
        }
        grids.push(best);
        arg_loc.push(bl);
        arg_type.push(bt);
    }
    (grids, EdgeTables { arg_loc, arg_type })
}

/// Depth-descending order so children precede parents.
fn bottom_up_order(nodes: &[NodeSpec]) -> Vec<usize> {
    let mut depth = vec![0usize; nodes.len()];
    for i in 0..nodes.len() {
        let mut cur = i;
        while let Some(p) = nodes[cur].parent {
            depth[i] += 1;
            cur = p;
        }
    }
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(depth[i]));
    order
}

fn seed_unaries(
    nodes: &[NodeSpec],
    map: &FeatureMap,
    masks: Option<&UnaryMasks>,
) -> Option<Vec<NodePass>> {
    nodes
        .iter()
        .map(|n| unary_map(n, map, masks).map(|total| NodePass { total, edge: None }))
        .collect()
}

/// Pass messages up the tree, accumulating into each parent's totals.
/// The totals must already hold the unaries plus any externally attached
/// contributions (the sub-tree root messages in the upper layer).
fn upward_accumulate(nodes: &[NodeSpec], passes: &mut [NodePass]) {
    for &i in &bottom_up_order(nodes) {
        let Some(parent) = nodes[i].parent else { continue };
        let parent_dims = (passes[parent].total.rows(), passes[parent].total.cols());
        let k_parent = nodes[parent].num_types();
        let (msg, tables) = pass_message(&nodes[i], &passes[i].total, parent_dims, k_parent);
        passes[i].edge = Some(tables);
        for (zp, g) in msg.into_iter().enumerate() {
            for (acc, v) in passes[parent].total.grids[zp].data.iter_mut().zip(&g.data) {
                *acc += v;
            }
        }
    }
}

fn upward_pass(
    nodes: &[NodeSpec],
    map: &FeatureMap,
    masks: Option<&UnaryMasks>,
) -> Option<Vec<NodePass>> {
    let mut passes = seed_unaries(nodes, map, masks)?;
    upward_accumulate(nodes, &mut passes);
    Some(passes)
}

/// Run the full two-layer upward pass on one pyramid level. Returns
/// `None` when a template does not fit the level's grid. The occlusion
/// re-weighting, when enabled, runs between the sub-tree evidence
/// computation and the upper pass.
pub fn run_level_pass(
    model: &PoseModel,
    map: &FeatureMap,
    level: usize,
    masks: Option<&UnaryMasks>,
    occlusion: bool,
) -> Option<LevelPass> {
    let (rows, cols) = (map.rows, map.cols);
    let mut sub_trees = Vec::with_capacity(model.sub_trees.len());
    for st in &model.sub_trees {
        let mut mixtures = Vec::with_capacity(st.mixtures.len());
        for mix in &st.mixtures {
            let nodes = upward_pass(&mix.nodes, map, masks)?;
            let mut evidence = nodes[0].total.grids[0].clone();
            for v in &mut evidence.data {
                *v += mix.bias;
            }
            mixtures.push(MixturePass { nodes, evidence });
        }
        sub_trees.push(SubTreePass {
            mixtures,
            root_map: ScoreGrid::filled(rows, cols, NEG_INF),
            winner: vec![0u8; rows * cols],
        });
    }

    let mut pass = LevelPass {
        level,
        rows,
        cols,
        scale: map.scale,
        sub_trees,
        upper: Vec::new(),
        subtree_edges: Vec::new(),
        root_total: ScoreGrid::filled(rows, cols, NEG_INF),
        occ_deltas: Vec::new(),
    };

    if occlusion && !model.occlusion.all_disabled() {
        pass.occ_deltas = crate::occlusion::reweight(model, &mut pass);
    }

    // Mixture max with the compatibility gate (Eq. 7 realization).
    for (si, st) in model.sub_trees.iter().enumerate() {
        let sp = &mut pass.sub_trees[si];
        for (mi, mix) in st.mixtures.iter().enumerate() {
            if !mix.gate {
                continue;
            }
            for c in 0..rows * cols {
                let v = sp.mixtures[mi].evidence.data[c];
                if v > sp.root_map.data[c] {
                    sp.root_map.data[c] = v;
                    sp.winner[c] = mi as u8;
                }
            }
        }
    }

    // Upper layer: seed unaries, attach the sub-tree root messages, then
    // run the internal message passing.
    let mut upper = seed_unaries(&model.upper.nodes, map, masks)?;
    let mut subtree_edges = Vec::with_capacity(model.sub_trees.len());
    for (si, st) in model.sub_trees.iter().enumerate() {
        let parent_dims = {
            let p = &upper[st.upper_parent];
            (p.total.rows(), p.total.cols())
        };
        let deform = crate::model::effective_root_deform(model, si);
        let dt = quadratic_dt_anchored(
            &pass.sub_trees[si].root_map,
            deform,
            st.root_anchor,
            parent_dims.0,
            parent_dims.1,
        );
        let k_parent = model.upper.nodes[st.upper_parent].num_types();
        for zp in 0..k_parent {
            for (acc, v) in upper[st.upper_parent].total.grids[zp]
                .data
                .iter_mut()
                .zip(&dt.values.data)
            {
                *acc += v;
            }
        }
        subtree_edges.push(EdgeTables {
            arg_loc: vec![dt.arg.clone()],
            arg_type: vec![vec![0u8; dt.arg.len()]],
        });
    }
    upward_accumulate(&model.upper.nodes, &mut upper);
    pass.root_total = upper[0].total.grids[0].clone();
    pass.upper = upper;
    pass.subtree_edges = subtree_edges;
    Some(pass)
}

// ---------------------------------------------------------------------------
// Candidates, detection and backtracking
// ---------------------------------------------------------------------------

/// Box of an observed node placement: the template footprint mapped back
/// to image pixels.
pub fn observed_box(
    loc: (i32, i32),
    tpl_h: usize,
    tpl_w: usize,
    cell_size: usize,
    scale: f64,
) -> BoundingBox {
    let c = cell_size as f64 / scale;
    BoundingBox::new(
        loc.0 as f64 * c,
        loc.1 as f64 * c,
        (loc.0 + tpl_w as i32) as f64 * c,
        (loc.1 + tpl_h as i32) as f64 * c,
    )
}

/// Box of a latent node placement: the nominal extent centered on the
/// location cell.
pub fn latent_box(
    loc: (i32, i32),
    extent: (f64, f64),
    cell_size: usize,
    scale: f64,
) -> BoundingBox {
    let c = cell_size as f64 / scale;
    let cx = (loc.0 as f64 + 0.5) * c;
    let cy = (loc.1 as f64 + 0.5) * c;
    let hw = extent.1 * c / 2.0;
    let hh = extent.0 * c / 2.0;
    BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
}

/// All cells of a score grid at or above `threshold`, as candidates with
/// boxes produced by `make_box`.
pub fn grid_candidates(
    grid: &ScoreGrid,
    part_id: u32,
    level: u32,
    type_id: u32,
    threshold: f64,
    make_box: impl Fn((i32, i32)) -> BoundingBox,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for y in 0..grid.rows {
        for x in 0..grid.cols {
            let score = grid.get(y, x);
            if score >= threshold && score != NEG_INF {
                out.push(Candidate {
                    part_id,
                    x: x as i32,
                    y: y as i32,
                    level,
                    type_id,
                    score,
                    bbox: make_box((x as i32, y as i32)),
                });
            }
        }
    }
    out
}

/// Non-maximum suppression over a single score grid (the spec-facing
/// map-level wrapper around the candidate-list NMS).
pub fn nms_score_map(
    grid: &ScoreGrid,
    score_threshold: f64,
    overlap_threshold: f64,
    part_id: u32,
    level: u32,
    make_box: impl Fn((i32, i32)) -> BoundingBox,
) -> Vec<Candidate> {
    nms(
        grid_candidates(grid, part_id, level, 0, score_threshold, make_box),
        score_threshold,
        overlap_threshold,
    )
}

/// Location and type of one node in a parse.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAssign {
    pub loc: (i32, i32),
    pub type_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubTreeAssign {
    pub mixture: usize,
    /// Per node of the winning mixture's tree.
    pub nodes: Vec<NodeAssign>,
}

/// One detected pose: assignments for every node, the raw DP score and
/// the occlusion adjustment consumed at the chosen sub-tree roots.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub level: usize,
    pub scale: f64,
    pub score: f64,
    pub upper: Vec<NodeAssign>,
    pub sub_trees: Vec<SubTreeAssign>,
    pub occlusion_adjust: f64,
}

impl PoseEstimate {
    /// Box of an observed part in image pixels, or None for parts not in
    /// the model.
    pub fn part_box(&self, model: &PoseModel, part_id: usize) -> Option<BoundingBox> {
        let cell = model.meta.cell_size;
        for (ui, node) in model.upper.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Observed { part_id: p } if p == part_id) {
                let a = &self.upper[ui];
                let t = &node.types[a.type_id].template;
                return Some(observed_box(a.loc, t.h, t.w, cell, self.scale));
            }
        }
        for (si, st) in model.sub_trees.iter().enumerate() {
            let assign = &self.sub_trees[si];
            for (ni, node) in st.mixtures[assign.mixture].nodes.iter().enumerate() {
                if matches!(node.kind, NodeKind::Observed { part_id: p } if p == part_id) {
                    let a = &assign.nodes[ni];
                    let t = &node.types[a.type_id].template;
                    return Some(observed_box(a.loc, t.h, t.w, cell, self.scale));
                }
            }
        }
        None
    }

    /// Center of a part's box, in image pixels.
    pub fn part_center(&self, model: &PoseModel, part_id: usize) -> Option<(f64, f64)> {
        self.part_box(model, part_id).map(|b| b.center())
    }
}

fn backtrack_tree(
    nodes: &[NodeSpec],
    passes: &[NodePass],
    root_assign: NodeAssign,
) -> Vec<NodeAssign> {
    let mut assigns: Vec<Option<NodeAssign>> = vec![None; nodes.len()];
    assigns[0] = Some(root_assign);
    // Parents before children: reverse of the bottom-up order.
    let mut order = bottom_up_order(nodes);
    order.reverse();
    for &i in &order {
        let Some(p) = nodes[i].parent else { continue };
        let pa = assigns[p].clone().expect("parent assigned before child");
        let tables = passes[i].edge.as_ref().expect("edge tables present");
        let p_cols = passes[p].total.cols();
        let cell = pa.loc.1 as usize * p_cols + pa.loc.0 as usize;
        let child_cols = passes[i].total.cols();
        let loc_idx = tables.arg_loc[pa.type_id][cell] as usize;
        assigns[i] = Some(NodeAssign {
            loc: ((loc_idx % child_cols) as i32, (loc_idx / child_cols) as i32),
            type_id: tables.arg_type[pa.type_id][cell] as usize,
        });
    }
    assigns.into_iter().map(|a| a.unwrap()).collect()
}

/// Expand one mixture-root placement into assignments for every node of
/// that mixture's tree (used by the occlusion candidate sets).
pub fn backtrack_mixture(
    nodes: &[NodeSpec],
    passes: &[NodePass],
    root_assign: NodeAssign,
) -> Vec<NodeAssign> {
    backtrack_tree(nodes, passes, root_assign)
}

/// Expand one Root placement into the full pose.
pub fn backtrack(model: &PoseModel, pass: &LevelPass, root_loc: (i32, i32)) -> PoseEstimate {
    let upper = backtrack_tree(
        &model.upper.nodes,
        &pass.upper,
        NodeAssign {
            loc: root_loc,
            type_id: 0,
        },
    );
    let mut sub_trees = Vec::with_capacity(model.sub_trees.len());
    let mut occlusion_adjust = 0.0;
    for (si, st) in model.sub_trees.iter().enumerate() {
        let pa = &upper[st.upper_parent];
        let p_cols = pass.upper[st.upper_parent].total.cols();
        let cell = pa.loc.1 as usize * p_cols + pa.loc.0 as usize;
        let root_idx = pass.subtree_edges[si].arg_loc[pa.type_id][cell] as usize;
        let root_cell = (
            (root_idx % pass.cols) as i32,
            (root_idx / pass.cols) as i32,
        );
        let mixture = pass.sub_trees[si].winner[root_idx] as usize;
        for d in &pass.occ_deltas {
            if d.sub_tree == si && d.mixture == mixture && d.cell == root_idx {
                occlusion_adjust += d.after - d.before;
            }
        }
        let nodes = backtrack_tree(
            &st.mixtures[mixture].nodes,
            &pass.sub_trees[si].mixtures[mixture].nodes,
            NodeAssign {
                loc: root_cell,
                type_id: 0,
            },
        );
        sub_trees.push(SubTreeAssign { mixture, nodes });
    }
    let score = pass
        .root_total
        .get(root_loc.1 as usize, root_loc.0 as usize);
    PoseEstimate {
        level: pass.level,
        scale: pass.scale,
        score,
        upper,
        sub_trees,
        occlusion_adjust,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub occlusion: bool,
    /// Overrides the model's detection threshold when set.
    pub threshold: Option<f64>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            occlusion: false,
            threshold: None,
        }
    }
}

/// Full multi-scale inference: per-level upward passes, NMS on the Root
/// score map across levels (boxes in image coordinates) and backtracking
/// of every kept detection. Estimates come back sorted by descending
/// score.
pub fn infer(
    model: &PoseModel,
    pyramid: &FeaturePyramid,
    opts: InferOptions,
) -> Result<Vec<PoseEstimate>> {
    let threshold = opts.threshold.unwrap_or(model.meta.detection_threshold);
    let mut passes: Vec<Option<LevelPass>> = Vec::with_capacity(pyramid.levels.len());
    let mut candidates = Vec::new();
    let root_extent = model.upper.nodes[0].extent;
    for (li, level_map) in pyramid.levels.iter().enumerate() {
        let pass = run_level_pass(model, level_map, li, None, opts.occlusion);
        if let Some(p) = &pass {
            candidates.extend(grid_candidates(
                &p.root_total,
                u32::MAX,
                li as u32,
                0,
                threshold,
                |loc| latent_box(loc, root_extent, model.meta.cell_size, level_map.scale),
            ));
        }
        passes.push(pass);
    }
    let kept = nms(candidates, threshold, model.meta.nms_overlap);
    let mut estimates: Vec<PoseEstimate> = kept
        .iter()
        .map(|c| {
            backtrack(
                model,
                passes[c.level as usize].as_ref().unwrap(),
                (c.x, c.y),
            )
        })
        .collect();
    estimates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.level.cmp(&b.level))
    });
    Ok(estimates)
}

/// Re-evaluate the objective at a returned configuration by direct
/// summation of unaries, deformation costs, compatibilities and biases
/// (plus the recorded occlusion adjustment). Used to check backtracking
/// consistency.
pub fn evaluate_configuration(
    model: &PoseModel,
    pyramid: &FeaturePyramid,
    est: &PoseEstimate,
) -> Result<f64> {
    let map = &pyramid.levels[est.level];
    let mut total = est.occlusion_adjust;

    let unary_at = |node: &NodeSpec, a: &NodeAssign| -> Result<f64> {
        match node.kind {
            NodeKind::Latent => Ok(0.0),
            NodeKind::Observed { .. } => {
                let t = &node.types[a.type_id].template;
                let (x, y) = (a.loc.0 as usize, a.loc.1 as usize);
                if y + t.h > map.rows || x + t.w > map.cols {
                    return Err(Error::InvalidInput("assignment outside grid".into()));
                }
                let mut acc = t.bias;
                for ty in 0..t.h {
                    for tx in 0..t.w {
                        let cell = map.cell(y + ty, x + tx);
                        for ch in 0..t.dim {
                            acc += t.weight(ty, tx, ch) * cell[ch];
                        }
                    }
                }
                Ok(acc)
            }
        }
    };
    let def_cost = |deform: &[f64; 4], anchor: (i32, i32), child: (i32, i32), parent: (i32, i32)| {
        let dx = (child.0 - (parent.0 + anchor.0)) as f64;
        let dy = (child.1 - (parent.1 + anchor.1)) as f64;
        deform[0] * dx * dx + deform[1] * dx + deform[2] * dy * dy + deform[3] * dy
    };
    let tree_score = |nodes: &[NodeSpec], assigns: &[NodeAssign]| -> Result<f64> {
        let mut acc = 0.0;
        for (i, node) in nodes.iter().enumerate() {
            let a = &assigns[i];
            acc += unary_at(node, a)?;
            if let Some(p) = node.parent {
                let t = &node.types[a.type_id];
                acc -= def_cost(&t.deform, t.anchor, a.loc, assigns[p].loc);
                if !node.compat.is_empty() {
                    acc += node
                        .compat
                        .get(a.type_id, assigns[p].type_id)
                        .ok_or_else(|| {
                            Error::InvalidInput("incompatible pair in estimate".into())
                        })?;
                }
            }
        }
        Ok(acc)
    };

    total += tree_score(&model.upper.nodes, &est.upper)?;
    for (si, st) in model.sub_trees.iter().enumerate() {
        let assign = &est.sub_trees[si];
        let mix = &st.mixtures[assign.mixture];
        total += tree_score(&mix.nodes, &assign.nodes)?;
        total += mix.bias;
        // Sub-tree root edge with the averaged deformation weights.
        let deform = crate::model::effective_root_deform(model, si);
        total -= def_cost(
            &deform,
            st.root_anchor,
            assign.nodes[0].loc,
            est.upper[st.upper_parent].loc,
        );
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Template;
    use crate::model::test_models::tiny_model;
    use crate::model::{NodeKind, PoseModel};

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    }

    fn naive_dt(
        values: &ScoreGrid,
        deform: [f64; 4],
        anchor: (i32, i32),
        out_rows: usize,
        out_cols: usize,
    ) -> ScoreGrid {
        let mut out = ScoreGrid::filled(out_rows, out_cols, NEG_INF);
        for py in 0..out_rows as i32 {
            for px in 0..out_cols as i32 {
                let rx = px + anchor.0;
                let ry = py + anchor.1;
                let mut best = NEG_INF;
                for qy in 0..values.rows as i32 {
                    for qx in 0..values.cols as i32 {
                        let v = values.get(qy as usize, qx as usize);
                        if v == NEG_INF {
                            continue;
                        }
                        let dx = (qx - rx) as f64;
                        let dy = (qy - ry) as f64;
                        let s = v
                            - deform[0] * dx * dx
                            - deform[1] * dx
                            - deform[2] * dy * dy
                            - deform[3] * dy;
                        if s > best {
                            best = s;
                        }
                    }
                }
                out.set(py as usize, px as usize, best);
            }
        }
        out
    }

    #[test]
    fn dt_zero_deformation_is_global_max() {
        let mut g = ScoreGrid::filled(5, 4, 0.0);
        let mut state = 1u64;
        for v in &mut g.data {
            *v = lcg(&mut state);
        }
        let max = g.data.iter().cloned().fold(NEG_INF, f64::max);
        let dt = quadratic_dt(&g, [0.0; 4], (0, 0));
        for v in &dt.values.data {
            assert_eq!(*v, max);
        }
    }

    #[test]
    fn dt_spike_peaks_at_shifted_location() {
        let mut g = ScoreGrid::filled(7, 7, -100.0);
        g.set(4, 5, 10.0); // spike at (x=5, y=4)
        let anchor = (2, 1);
        let dt = quadratic_dt(&g, [5.0, 0.0, 5.0, 0.0], anchor);
        // out peaks where p + anchor = q*, i.e. p = (3, 3).
        let mut best = (0usize, 0usize);
        let mut best_v = NEG_INF;
        for y in 0..7 {
            for x in 0..7 {
                if dt.values.get(y, x) > best_v {
                    best_v = dt.values.get(y, x);
                    best = (x, y);
                }
            }
        }
        assert_eq!(best, (3, 3));
        assert_eq!(dt.arg[3 * 7 + 3], (4 * 7 + 5) as u32);
    }

    #[test]
    fn dt_matches_naive_oracle_on_random_grids() {
        let mut state = 42u64;
        for trial in 0..200 {
            let rows = 1 + (trial % 16);
            let cols = 1 + ((trial * 7) % 16);
            let mut g = ScoreGrid::filled(rows, cols, 0.0);
            for v in &mut g.data {
                *v = lcg(&mut state) * 10.0;
            }
            // Sprinkle some -inf cells.
            if trial % 3 == 0 {
                let n = g.data.len();
                g.data[trial % n] = NEG_INF;
            }
            let deform = [
                lcg(&mut state).abs() * 2.0,
                lcg(&mut state),
                lcg(&mut state).abs() * 2.0,
                lcg(&mut state),
            ];
            let deform = if trial % 5 == 0 {
                [0.0, deform[1], 0.0, deform[3]]
            } else {
                deform
            };
            let anchor = ((trial % 5) as i32 - 2, (trial % 7) as i32 - 3);
            let out_rows = 1 + ((trial * 3) % 12);
            let out_cols = 1 + ((trial * 5) % 12);
            let dt = quadratic_dt_anchored(&g, deform, anchor, out_rows, out_cols);
            let want = naive_dt(&g, deform, anchor, out_rows, out_cols);
            for c in 0..dt.values.data.len() {
                let (a, b) = (dt.values.data[c], want.data[c]);
                if a == NEG_INF && b == NEG_INF {
                    continue;
                }
                assert!(
                    (a - b).abs() < 1e-9,
                    "trial {trial} cell {c}: {a} vs {b} (deform {deform:?})"
                );
            }
        }
    }

    #[test]
    #[should_panic(expected = "negative quadratic")]
    fn dt_rejects_negative_quadratic_coefficient() {
        let g = ScoreGrid::filled(3, 3, 0.0);
        let _ = quadratic_dt(&g, [-1.0, 0.0, 0.0, 0.0], (0, 0));
    }

    fn constant_feature_map(rows: usize, cols: usize, dim: usize) -> FeatureMap {
        FeatureMap {
            rows,
            cols,
            dim,
            scale: 1.0,
            data: vec![0.0; rows * cols * dim],
        }
    }

    fn random_feature_map(rows: usize, cols: usize, dim: usize, state: &mut u64) -> FeatureMap {
        let mut m = constant_feature_map(rows, cols, dim);
        for v in &mut m.data {
            *v = lcg(state) * 0.5;
        }
        m
    }

    fn touch_nodes(nodes: &mut [crate::model::NodeSpec], state: &mut u64) {
        for node in nodes.iter_mut() {
            for t in &mut node.types {
                for w in &mut t.template.weights {
                    *w = lcg(state);
                }
                t.template.bias = lcg(state);
                t.deform = [
                    lcg(state).abs() * 0.5 + 0.01,
                    lcg(state) * 0.2,
                    lcg(state).abs() * 0.5 + 0.01,
                    lcg(state) * 0.2,
                ];
                t.anchor = ((lcg(state) * 2.0) as i32, (lcg(state) * 2.0) as i32);
            }
        }
    }

    fn randomize_model(model: &mut PoseModel, state: &mut u64) {
        for st in &mut model.sub_trees {
            for mix in &mut st.mixtures {
                touch_nodes(&mut mix.nodes, state);
                mix.bias = lcg(state);
            }
        }
        touch_nodes(&mut model.upper.nodes, state);
    }

    /// Independent MAP oracle: recursive per-edge exhaustive maximization
    /// with direct cost evaluation (no distance transforms, no shared
    /// grids).
    fn oracle_best(model: &PoseModel, map: &FeatureMap) -> f64 {
        fn unary(node: &crate::model::NodeSpec, map: &FeatureMap, x: i32, y: i32, z: usize) -> f64 {
            match node.kind {
                NodeKind::Latent => 0.0,
                NodeKind::Observed { .. } => {
                    let t = &node.types[z].template;
                    let mut acc = t.bias;
                    for ty in 0..t.h {
                        for tx in 0..t.w {
                            let cell = map.cell(y as usize + ty, x as usize + tx);
                            for ch in 0..t.dim {
                                acc += t.weight(ty, tx, ch) * cell[ch];
                            }
                        }
                    }
                    acc
                }
            }
        }
        fn grid_of(node: &crate::model::NodeSpec, map: &FeatureMap) -> (i32, i32) {
            match node.kind {
                NodeKind::Latent => (map.cols as i32, map.rows as i32),
                NodeKind::Observed { .. } => {
                    let t = &node.types[0].template;
                    (
                        (map.cols - t.w + 1) as i32,
                        (map.rows - t.h + 1) as i32,
                    )
                }
            }
        }
        // Best score of the subtree rooted at `i` given the parent state.
        fn best_subtree(
            nodes: &[crate::model::NodeSpec],
            map: &FeatureMap,
            i: usize,
            parent_loc: (i32, i32),
            parent_type: usize,
        ) -> f64 {
            let node = &nodes[i];
            let (gx, gy) = grid_of(node, map);
            let mut best = NEG_INF;
            for z in 0..node.num_types() {
                let compat = if node.compat.is_empty() {
                    Some(0.0)
                } else {
                    node.compat.get(z, parent_type)
                };
                let Some(compat) = compat else { continue };
                let t = &node.types[z];
                for y in 0..gy {
                    for x in 0..gx {
                        let dx = (x - (parent_loc.0 + t.anchor.0)) as f64;
                        let dy = (y - (parent_loc.1 + t.anchor.1)) as f64;
                        let mut s = compat + unary(node, map, x, y, z)
                            - (t.deform[0] * dx * dx
                                + t.deform[1] * dx
                                + t.deform[2] * dy * dy
                                + t.deform[3] * dy);
                        for c in 0..nodes.len() {
                            if nodes[c].parent == Some(i) {
                                s += best_subtree(nodes, map, c, (x, y), z);
                            }
                        }
                        if s > best {
                            best = s;
                        }
                    }
                }
            }
            best
        }

        let mut best = NEG_INF;
        for ry in 0..map.rows as i32 {
            for rx in 0..map.cols as i32 {
                let mut s = 0.0;
                // Upper children of Root.
                for c in 1..model.upper.nodes.len() {
                    if model.upper.nodes[c].parent == Some(0) {
                        s += best_subtree(&model.upper.nodes, map, c, (rx, ry), 0);
                    }
                }
                // Sub-trees hang from their upper parents; handle the ones
                // directly under Root here and recurse manually otherwise.
                s += subtree_contributions(model, map, 0, (rx, ry));
                if s > best {
                    best = s;
                }
            }
        }
        // Contribution of sub-trees whose upper parent is `u` at `loc`,
        // plus nothing else (upper subtree recursion above includes its
        // own attached sub-trees via this helper in best_subtree... the
        // tiny models used here only attach sub-trees to latents directly
        // under Root, so handling them at Root level is exact as long as
        // those latents are the parents).
        fn subtree_contributions(
            model: &PoseModel,
            map: &FeatureMap,
            _u: usize,
            _loc: (i32, i32),
        ) -> f64 {
            let _ = (model, map);
            0.0
        }
        best
    }

    // The generic oracle above needs sub-tree handling entangled with the
    // upper recursion; rather than complicate it, this self-contained
    // oracle re-walks the whole model for every Root location.
    fn oracle_full(model: &PoseModel, map: &FeatureMap) -> f64 {
        fn unary(node: &crate::model::NodeSpec, map: &FeatureMap, x: i32, y: i32, z: usize) -> f64 {
            match node.kind {
                NodeKind::Latent => 0.0,
                NodeKind::Observed { .. } => {
                    let t = &node.types[z].template;
                    let mut acc = t.bias;
                    for ty in 0..t.h {
                        for tx in 0..t.w {
                            let cell = map.cell(y as usize + ty, x as usize + tx);
                            for ch in 0..t.dim {
                                acc += t.weight(ty, tx, ch) * cell[ch];
                            }
                        }
                    }
                    acc
                }
            }
        }
        fn grid_of(node: &crate::model::NodeSpec, map: &FeatureMap) -> (i32, i32) {
            match node.kind {
                NodeKind::Latent => (map.cols as i32, map.rows as i32),
                NodeKind::Observed { .. } => {
                    let t = &node.types[0].template;
                    ((map.cols - t.w + 1) as i32, (map.rows - t.h + 1) as i32)
                }
            }
        }
        fn cost(t: &crate::model::TypeParams, loc: (i32, i32), ploc: (i32, i32)) -> f64 {
            let dx = (loc.0 - (ploc.0 + t.anchor.0)) as f64;
            let dy = (loc.1 - (ploc.1 + t.anchor.1)) as f64;
            t.deform[0] * dx * dx + t.deform[1] * dx + t.deform[2] * dy * dy + t.deform[3] * dy
        }
        fn best_subtree(
            model: &PoseModel,
            nodes: &[crate::model::NodeSpec],
            upper_index: Option<usize>,
            map: &FeatureMap,
            i: usize,
            ploc: (i32, i32),
            pz: usize,
        ) -> f64 {
            let node = &nodes[i];
            let (gx, gy) = grid_of(node, map);
            let mut best = NEG_INF;
            for z in 0..node.num_types() {
                let compat = if node.compat.is_empty() {
                    Some(0.0)
                } else {
                    node.compat.get(z, pz)
                };
                let Some(compat) = compat else { continue };
                for y in 0..gy {
                    for x in 0..gx {
                        let mut s =
                            compat + unary(node, map, x, y, z) - cost(&node.types[z], (x, y), ploc);
                        for c in 0..nodes.len() {
                            if nodes[c].parent == Some(i) {
                                s += best_subtree(model, nodes, upper_index, map, c, (x, y), z);
                            }
                        }
                        if let Some(ui) = upper_index {
                            // `i` lives in the upper layer: add attached
                            // sub-trees.
                            let _ = ui;
                            for (si, st) in model.sub_trees.iter().enumerate() {
                                if st.upper_parent == i {
                                    s += best_attached(model, si, map, (x, y));
                                }
                            }
                        }
                        if s > best {
                            best = s;
                        }
                    }
                }
            }
            best
        }
        fn best_attached(
            model: &PoseModel,
            si: usize,
            map: &FeatureMap,
            ploc: (i32, i32),
        ) -> f64 {
            let st = &model.sub_trees[si];
            let deform = crate::model::effective_root_deform(model, si);
            let mut best = NEG_INF;
            for y in 0..map.rows as i32 {
                for x in 0..map.cols as i32 {
                    let dx = (x - (ploc.0 + st.root_anchor.0)) as f64;
                    let dy = (y - (ploc.1 + st.root_anchor.1)) as f64;
                    let edge = deform[0] * dx * dx
                        + deform[1] * dx
                        + deform[2] * dy * dy
                        + deform[3] * dy;
                    for (mi, mix) in st.mixtures.iter().enumerate() {
                        if !mix.gate {
                            continue;
                        }
                        let _ = mi;
                        let mut s = mix.bias - edge;
                        for c in 0..mix.nodes.len() {
                            if mix.nodes[c].parent == Some(0) {
                                s += best_subtree(model, &mix.nodes, None, map, c, (x, y), 0);
                            }
                        }
                        if s > best {
                            best = s;
                        }
                    }
                }
            }
            best
        }

        let mut best = NEG_INF;
        for ry in 0..map.rows as i32 {
            for rx in 0..map.cols as i32 {
                let mut s = 0.0;
                for c in 1..model.upper.nodes.len() {
                    if model.upper.nodes[c].parent == Some(0) {
                        s += best_subtree(
                            model,
                            &model.upper.nodes,
                            Some(c),
                            map,
                            c,
                            (rx, ry),
                            0,
                        );
                    }
                }
                for (si, st) in model.sub_trees.iter().enumerate() {
                    if st.upper_parent == 0 {
                        s += best_attached(model, si, map, (rx, ry));
                    }
                }
                if s > best {
                    best = s;
                }
            }
        }
        best
    }

    #[test]
    fn infer_matches_brute_force_on_tiny_models() {
        let mut state = 2024u64;
        for trial in 0..6 {
            let mut model = tiny_model(&[2, 2], 1, 2, 3, 1);
            randomize_model(&mut model, &mut state);
            let map = random_feature_map(5, 5, 3, &mut state);
            let pyramid = FeaturePyramid {
                levels: vec![map.clone()],
                interval: 1,
                cell_size: 4,
            };
            let got = infer(&model, &pyramid, InferOptions::default()).unwrap();
            assert!(!got.is_empty(), "trial {trial}: no detections");
            let want = oracle_full(&model, &map);
            assert!(
                (got[0].score - want).abs() < 1e-9,
                "trial {trial}: {} vs {}",
                got[0].score,
                want
            );
        }
        // Silence the unused simpler oracle.
        let _ = oracle_best;
    }

    #[test]
    fn backtracked_configuration_reproduces_reported_score() {
        let mut state = 77u64;
        let mut model = tiny_model(&[3, 2], 2, 2, 4, 2);
        randomize_model(&mut model, &mut state);
        let map = random_feature_map(8, 9, 4, &mut state);
        let pyramid = FeaturePyramid {
            levels: vec![map],
            interval: 1,
            cell_size: 4,
        };
        let ests = infer(&model, &pyramid, InferOptions::default()).unwrap();
        assert!(!ests.is_empty());
        for est in &ests {
            let j = evaluate_configuration(&model, &pyramid, est).unwrap();
            assert!(
                (j - est.score).abs() < 1e-6,
                "re-evaluated {j} vs reported {}",
                est.score
            );
        }
    }

    #[test]
    fn zero_template_model_gives_constant_bias_maps() {
        let model = tiny_model(&[2], 0, 2, 3, 1);
        let map = constant_feature_map(6, 6, 3);
        let pass = run_level_pass(&model, &map, 0, None, false).unwrap();
        // With all-zero weights every unary map is the bias (0 here) and
        // latent maps are identically zero.
        for mp in &pass.sub_trees[0].mixtures {
            for g in &mp.nodes[0].total.grids {
                assert!(g.data.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn translation_equivariance_on_interior() {
        // Shift the feature content by one cell; the best estimate must
        // shift by one cell as long as nothing clips the border.
        let mut state = 555u64;
        let mut model = tiny_model(&[2], 0, 1, 2, 1);
        randomize_model(&mut model, &mut state);
        // Zero anchors, positive weights: the optimum locks onto the
        // planted content block and stays interior.
        for st in &mut model.sub_trees {
            for mix in &mut st.mixtures {
                for n in &mut mix.nodes {
                    for t in &mut n.types {
                        t.anchor = (0, 0);
                        t.deform = [1.0, 0.0, 1.0, 0.0];
                        for w in &mut t.template.weights {
                            *w = w.abs() + 0.1;
                        }
                    }
                }
            }
        }
        let mut base = random_feature_map(4, 4, 2, &mut state);
        for v in &mut base.data {
            *v += 2.0;
        }
        let mut padded = constant_feature_map(10, 10, 2);
        let mut shifted = constant_feature_map(10, 10, 2);
        for v in padded.data.iter_mut() {
            *v = -1.0;
        }
        for v in shifted.data.iter_mut() {
            *v = -1.0;
        }
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..2 {
                    let v = base.get(y, x, ch);
                    padded.data[((y + 3) * 10 + (x + 3)) * 2 + ch] = v;
                    shifted.data[((y + 4) * 10 + (x + 4)) * 2 + ch] = v;
                }
            }
        }
        let pyr_a = FeaturePyramid {
            levels: vec![padded],
            interval: 1,
            cell_size: 4,
        };
        let pyr_b = FeaturePyramid {
            levels: vec![shifted],
            interval: 1,
            cell_size: 4,
        };
        let a = &infer(&model, &pyr_a, InferOptions::default()).unwrap()[0];
        let b = &infer(&model, &pyr_b, InferOptions::default()).unwrap()[0];
        assert!((a.score - b.score).abs() < 1e-9);
        for (na, nb) in a.sub_trees[0].nodes.iter().zip(&b.sub_trees[0].nodes) {
            assert_eq!((na.loc.0 + 1, na.loc.1 + 1), nb.loc);
            assert_eq!(na.type_id, nb.type_id);
        }
    }

    #[test]
    fn fully_masked_parts_produce_no_detections() {
        let model = tiny_model(&[2], 0, 1, 2, 1);
        let map = constant_feature_map(6, 6, 2);
        let masks = UnaryMasks {
            windows: vec![Some((50, 60, 50, 60)); model.meta.num_parts],
        };
        let pass = run_level_pass(&model, &map, 0, Some(&masks), false).unwrap();
        assert!(pass.root_total.data.iter().all(|&v| v == NEG_INF));
    }

    #[test]
    fn monotonicity_bias_bump_never_decreases_map() {
        let mut state = 31u64;
        let mut model = tiny_model(&[2, 2], 1, 2, 3, 1);
        randomize_model(&mut model, &mut state);
        let map = random_feature_map(6, 6, 3, &mut state);
        let pyramid = FeaturePyramid {
            levels: vec![map],
            interval: 1,
            cell_size: 4,
        };
        let before = infer(&model, &pyramid, InferOptions::default()).unwrap()[0].score;
        model.sub_trees[0].mixtures[0].nodes[1].types[0]
            .template
            .bias += 0.5;
        let after = infer(&model, &pyramid, InferOptions::default()).unwrap()[0].score;
        assert!(after + 1e-12 >= before);
    }

    #[test]
    fn single_child_identity_compat_message_is_dt_of_child() {
        // pass_message with one child type and a 1x1 identity-style
        // compatibility must equal the raw distance transform.
        let mut state = 9u64;
        let mut g = ScoreGrid::filled(5, 5, 0.0);
        for v in &mut g.data {
            *v = lcg(&mut state);
        }
        let node = crate::model::NodeSpec {
            name: "c".into(),
            kind: NodeKind::Latent,
            parent: Some(0),
            types: vec![crate::model::TypeParams {
                template: Template::zeros(0, 0, 0),
                anchor: (1, -1),
                deform: [0.3, 0.1, 0.2, -0.05],
            }],
            compat: crate::model::CompatTable::all_zero(1, 1),
            extent: (1.0, 1.0),
        };
        let child_total = ScoreMap {
            grids: vec![g.clone()],
        };
        let (msg, _tables) = pass_message(&node, &child_total, (5, 5), 1);
        let dt = quadratic_dt_anchored(&g, [0.3, 0.1, 0.2, -0.05], (1, -1), 5, 5);
        assert_eq!(msg[0].data, dt.values.data);
    }

    #[test]
    fn incompatible_pairs_are_excluded_from_messages() {
        let mut state = 13u64;
        let mut g0 = ScoreGrid::filled(4, 4, 0.0);
        let mut g1 = ScoreGrid::filled(4, 4, 0.0);
        for v in &mut g0.data {
            *v = lcg(&mut state);
        }
        for v in &mut g1.data {
            *v = lcg(&mut state) + 10.0; // type 1 dominates when allowed
        }
        let mut compat = crate::model::CompatTable::all_zero(2, 1);
        compat.set(1, 0, None); // forbid the dominant type
        let node = crate::model::NodeSpec {
            name: "c".into(),
            kind: NodeKind::Observed { part_id: 0 },
            parent: Some(0),
            types: vec![
                crate::model::TypeParams {
                    template: Template::zeros(1, 1, 1),
                    anchor: (0, 0),
                    deform: [0.5, 0.0, 0.5, 0.0],
                },
                crate::model::TypeParams {
                    template: Template::zeros(1, 1, 1),
                    anchor: (0, 0),
                    deform: [0.5, 0.0, 0.5, 0.0],
                },
            ],
            compat,
            extent: (1.0, 1.0),
        };
        let child_total = ScoreMap {
            grids: vec![g0.clone(), g1],
        };
        let (msg, tables) = pass_message(&node, &child_total, (4, 4), 1);
        let dt = quadratic_dt_anchored(&g0, [0.5, 0.0, 0.5, 0.0], (0, 0), 4, 4);
        assert_eq!(msg[0].data, dt.values.data);
        assert!(tables.arg_type[0].iter().all(|&t| t == 0));
    }
}
