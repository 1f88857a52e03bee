//! Two-stage latent max-margin training: per-sub-tree detectors first,
//! then the full model initialized from them, plus empirical estimation
//! of the occlusion parameters.
//!
//! All model parameters (templates, biases, deformation weights and
//! compatibilities) are concatenated into one weight vector `w`; a
//! configuration's score is `w . F*(I, assignment)`, so a stochastic
//! sub-gradient on the regularized hinge objective trains everything at
//! once. Quadratic deformation coefficients are projected to stay
//! positive after every step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::DatasetManifest;
use crate::features::{compute_hog, FeatureMap, FeaturePyramid};
use crate::geometry::iou;
use crate::inference::{
    infer, run_level_pass, InferOptions, NodeAssign, PoseEstimate, SubTreeAssign, UnaryMasks,
};
use crate::model::{
    init_parameters, standard_upper_plan, validate, ModelMeta, NodeKind, OcclusionPair,
    OcclusionParams, PoseModel, SubTreeInit, UpperLayer,
};
use crate::parts::{sub_tree_definitions, TrainingAnnotation, NUM_PARTS, PART_NAMES};
use crate::raster::Image;
use crate::structure::{build_descriptors, learn_structures, DescriptorSample};

// ---------------------------------------------------------------------------
// Weight vector layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TypeOffsets {
    pub template: u32,
    pub template_len: u32,
    /// None for latent nodes (their unary is pinned at zero).
    pub bias: Option<u32>,
    pub deform: u32,
}

#[derive(Debug, Clone, Default)]
pub struct NodeOffsets {
    pub types: Vec<TypeOffsets>,
    /// Per (z_child * k_parent + z_parent); None marks the -inf sentinel.
    pub compat: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Default)]
pub struct MixtureOffsets {
    pub bias: u32,
    pub nodes: Vec<NodeOffsets>,
}

#[derive(Debug, Clone, Default)]
pub struct SubTreeOffsets {
    pub mixtures: Vec<MixtureOffsets>,
}

/// Index map between a model's parameters and the flattened vector `w`.
#[derive(Debug, Clone, Default)]
pub struct WeightLayout {
    pub len: usize,
    pub upper: Vec<NodeOffsets>,
    pub sub_trees: Vec<SubTreeOffsets>,
    /// Offsets of quadratic deformation coefficients, projected to stay
    /// at or above [`QUAD_FLOOR`] after every step.
    pub quad_indices: Vec<u32>,
    /// Offsets of linear deformation coefficients, clamped to
    /// [`LINEAR_BOUND`].
    pub linear_indices: Vec<u32>,
}

/// Lower bound kept on quadratic deformation coefficients during
/// learning (the usual deformable-part default; comfortably above the
/// 1e-4 positivity floor the model format requires).
pub const QUAD_FLOOR: f64 = 0.01;
/// Symmetric bound on the linear deformation coefficients; unbounded
/// linear terms let the optimizer shift effective anchors arbitrarily
/// far, which rewards scattered part placements.
pub const LINEAR_BOUND: f64 = 0.1;

fn layout_node(
    node: &crate::model::NodeSpec,
    next: &mut usize,
    quads: &mut Vec<u32>,
    linears: &mut Vec<u32>,
) -> NodeOffsets {
    let mut types = Vec::with_capacity(node.types.len());
    for t in &node.types {
        let template = *next as u32;
        let template_len = t.template.weights.len() as u32;
        *next += t.template.weights.len();
        let bias = if node.is_latent() {
            None
        } else {
            let b = *next as u32;
            *next += 1;
            Some(b)
        };
        let deform = *next as u32;
        quads.push(deform);
        quads.push(deform + 2);
        linears.push(deform + 1);
        linears.push(deform + 3);
        *next += 4;
        types.push(TypeOffsets {
            template,
            template_len,
            bias,
            deform,
        });
    }
    let mut compat = Vec::new();
    for (_, _, entry) in node.compat.iter() {
        match entry {
            Some(_) => {
                compat.push(Some(*next as u32));
                *next += 1;
            }
            None => compat.push(None),
        }
    }
    NodeOffsets { types, compat }
}

pub fn build_layout(model: &PoseModel) -> WeightLayout {
    let mut next = 0usize;
    let mut quads = Vec::new();
    let mut linears = Vec::new();
    let upper = model
        .upper
        .nodes
        .iter()
        .map(|n| layout_node(n, &mut next, &mut quads, &mut linears))
        .collect();
    let mut sub_trees = Vec::with_capacity(model.sub_trees.len());
    for st in &model.sub_trees {
        let mut mixtures = Vec::with_capacity(st.mixtures.len());
        for mix in &st.mixtures {
            let bias = next as u32;
            next += 1;
            let nodes = mix
                .nodes
                .iter()
                .map(|n| layout_node(n, &mut next, &mut quads, &mut linears))
                .collect();
            mixtures.push(MixtureOffsets { bias, nodes });
        }
        sub_trees.push(SubTreeOffsets { mixtures });
    }
    WeightLayout {
        len: next,
        upper,
        sub_trees,
        quad_indices: quads,
        linear_indices: linears,
    }
}

fn pack_node(node: &crate::model::NodeSpec, off: &NodeOffsets, w: &mut [f64]) {
    for (t, to) in node.types.iter().zip(&off.types) {
        w[to.template as usize..to.template as usize + to.template_len as usize]
            .copy_from_slice(&t.template.weights);
        if let Some(b) = to.bias {
            w[b as usize] = t.template.bias;
        }
        for k in 0..4 {
            w[to.deform as usize + k] = t.deform[k];
        }
    }
    for ((_, _, entry), off) in node.compat.iter().zip(&off.compat) {
        if let (Some(v), Some(idx)) = (entry, off) {
            w[*idx as usize] = v;
        }
    }
}

fn unpack_node(node: &mut crate::model::NodeSpec, off: &NodeOffsets, w: &[f64]) {
    for (t, to) in node.types.iter_mut().zip(&off.types) {
        t.template
            .weights
            .copy_from_slice(&w[to.template as usize..to.template as usize + to.template_len as usize]);
        if let Some(b) = to.bias {
            t.template.bias = w[b as usize];
        }
        for k in 0..4 {
            t.deform[k] = w[to.deform as usize + k];
        }
    }
    let kp = node.compat.k_parent;
    for (i, off) in off.compat.clone().iter().enumerate() {
        if let Some(idx) = off {
            node.compat.set(i / kp, i % kp, Some(w[*idx as usize]));
        }
    }
}

pub fn pack_weights(model: &PoseModel, layout: &WeightLayout) -> Vec<f64> {
    let mut w = vec![0.0; layout.len];
    for (n, off) in model.upper.nodes.iter().zip(&layout.upper) {
        pack_node(n, off, &mut w);
    }
    for (st, so) in model.sub_trees.iter().zip(&layout.sub_trees) {
        for (mix, mo) in st.mixtures.iter().zip(&so.mixtures) {
            w[mo.bias as usize] = mix.bias;
            for (n, no) in mix.nodes.iter().zip(&mo.nodes) {
                pack_node(n, no, &mut w);
            }
        }
    }
    w
}

pub fn unpack_weights(model: &mut PoseModel, layout: &WeightLayout, w: &[f64]) {
    for (n, off) in model.upper.nodes.iter_mut().zip(&layout.upper) {
        unpack_node(n, off, w);
    }
    for (st, so) in model.sub_trees.iter_mut().zip(&layout.sub_trees) {
        for (mix, mo) in st.mixtures.iter_mut().zip(&so.mixtures) {
            mix.bias = w[mo.bias as usize];
            for (n, no) in mix.nodes.iter_mut().zip(&mo.nodes) {
                unpack_node(n, no, w);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Sparse feature vector of one configuration; the model score is
/// exactly `w . features`.
pub type SparseFeatures = Vec<(u32, f64)>;

fn push_patch(
    map: &FeatureMap,
    tpl: &crate::features::Template,
    loc: (i32, i32),
    base: u32,
    out: &mut SparseFeatures,
) {
    let (x, y) = (loc.0 as usize, loc.1 as usize);
    let mut idx = base;
    for ty in 0..tpl.h {
        for tx in 0..tpl.w {
            let cell = map.cell(y + ty, x + tx);
            for ch in 0..tpl.dim {
                out.push((idx, cell[ch]));
                idx += 1;
            }
        }
    }
}

fn displacement(child: (i32, i32), parent: (i32, i32), anchor: (i32, i32)) -> (f64, f64) {
    (
        (child.0 - (parent.0 + anchor.0)) as f64,
        (child.1 - (parent.1 + anchor.1)) as f64,
    )
}

fn push_deform(offset: u32, d: (f64, f64), scale: f64, out: &mut SparseFeatures) {
    out.push((offset, -d.0 * d.0 * scale));
    out.push((offset + 1, -d.0 * scale));
    out.push((offset + 2, -d.1 * d.1 * scale));
    out.push((offset + 3, -d.1 * scale));
}

/// Feature vector of a full configuration at one level map.
pub fn extract_features(
    model: &PoseModel,
    layout: &WeightLayout,
    map: &FeatureMap,
    est: &PoseEstimate,
) -> SparseFeatures {
    let mut out: SparseFeatures = Vec::new();

    let mut tree_features = |nodes: &[crate::model::NodeSpec],
                             offs: &[NodeOffsets],
                             assigns: &[NodeAssign],
                             out: &mut SparseFeatures| {
        for (i, node) in nodes.iter().enumerate() {
            let a = &assigns[i];
            let to = &offs[i].types[a.type_id];
            if !node.is_latent() {
                let t = &node.types[a.type_id].template;
                push_patch(map, t, a.loc, to.template, out);
                out.push((to.bias.unwrap(), 1.0));
            }
            if let Some(p) = node.parent {
                let t = &node.types[a.type_id];
                let d = displacement(a.loc, assigns[p].loc, t.anchor);
                push_deform(to.deform, d, 1.0, out);
                if !node.compat.is_empty() {
                    let kp = node.compat.k_parent;
                    if let Some(idx) = offs[i].compat[a.type_id * kp + assigns[p].type_id] {
                        out.push((idx, 1.0));
                    }
                }
            }
        }
    };

    tree_features(&model.upper.nodes, &layout.upper, &est.upper, &mut out);
    for (si, st) in model.sub_trees.iter().enumerate() {
        let assign = &est.sub_trees[si];
        let mo = &layout.sub_trees[si].mixtures[assign.mixture];
        tree_features(
            &st.mixtures[assign.mixture].nodes,
            &mo.nodes,
            &assign.nodes,
            &mut out,
        );
        out.push((mo.bias, 1.0));

        // The sub-tree root edge uses the (1/Z)-averaged deformation
        // weights, which replicates its displacement features onto every
        // internal deformation block of this sub-tree.
        let parent = st.upper_parent;
        let z: usize = model
            .sub_trees
            .iter()
            .filter(|o| o.upper_parent == parent)
            .map(|o| o.mixtures.len())
            .sum();
        let d = displacement(
            assign.nodes[0].loc,
            est.upper[st.upper_parent].loc,
            st.root_anchor,
        );
        for (mix, mo) in st.mixtures.iter().zip(&layout.sub_trees[si].mixtures) {
            for (node, no) in mix.nodes.iter().zip(&mo.nodes).skip(1) {
                let k = node.types.len() as f64;
                for to in &no.types {
                    push_deform(to.deform, d, 1.0 / (z.max(1) as f64 * k), &mut out);
                }
            }
        }
    }
    out
}

pub fn dot_sparse(w: &[f64], f: &SparseFeatures) -> f64 {
    f.iter().map(|&(i, v)| w[i as usize] * v).sum()
}

// ---------------------------------------------------------------------------
// Latent completion and hard negative mining
// ---------------------------------------------------------------------------

/// Level map of one training sample at the scale matching its torso
/// height against the canonical size.
pub struct SampleLevel {
    pub map: FeatureMap,
    /// Annotation rescaled into this level's pixel space.
    pub annotation: TrainingAnnotation,
    /// Per sub-tree, the structure-learning cluster of this sample; used
    /// to pin the mixture choice during the first completion round.
    pub mixture_hint: Vec<Option<usize>>,
}

pub fn sample_level(
    image: &Image,
    annotation: &TrainingAnnotation,
    model_meta: &ModelMeta,
) -> Result<SampleLevel> {
    let torso = annotation.torso_height();
    if torso <= 0.0 {
        return Err(Error::Training("annotation has zero torso height".into()));
    }
    let target = model_meta.canonical_torso_px / torso;
    // Nearest pyramid-quantized scale not above 1.
    let interval = model_meta.interval as f64;
    let mut best_level = 0i64;
    let mut best_err = f64::INFINITY;
    for level in 0..32i64 {
        let s = 2f64.powf(-(level as f64) / interval);
        let err = (s - target).abs();
        if err < best_err {
            best_err = err;
            best_level = level;
        }
    }
    let scale = 2f64.powf(-(best_level as f64) / interval);
    let scaled = if best_level == 0 {
        image.clone()
    } else {
        image.rescale(scale)
    };
    let mut map = compute_hog(&scaled, &model_meta.hog)?;
    map.scale = scale;
    let points = annotation
        .points
        .iter()
        .map(|&(x, y)| (x * scale, y * scale))
        .collect();
    Ok(SampleLevel {
        map,
        annotation: TrainingAnnotation::new(points),
        mixture_hint: Vec::new(),
    })
}

/// Constrained inference: every observed part is restricted to within
/// one cell of its annotated location (snapped to the valid grid), then
/// the best configuration under the current weights is backtracked.
pub fn latent_completion(model: &PoseModel, level: &SampleLevel) -> Result<PoseEstimate> {
    latent_completion_gated(model, level, None)
}

/// Latent completion with an optional per-sub-tree mixture pin.
fn latent_completion_gated(
    model: &PoseModel,
    level: &SampleLevel,
    mixture_hint: Option<&[Option<usize>]>,
) -> Result<PoseEstimate> {
    if let Some(hints) = mixture_hint {
        let mut pinned = model.clone();
        let mut any = false;
        for (si, hint) in hints.iter().enumerate().take(pinned.sub_trees.len()) {
            if let Some(m) = hint {
                for (mi, mix) in pinned.sub_trees[si].mixtures.iter_mut().enumerate() {
                    mix.gate = mi == *m;
                }
                any = true;
            }
        }
        if any {
            return latent_completion_gated(&pinned, level, None);
        }
    }
    let cell = model.meta.cell_size as f64;
    let mut windows: Vec<Option<(i32, i32, i32, i32)>> = vec![None; model.meta.num_parts];

    let mut set_window = |part_id: usize, tpl: usize, rows: usize, cols: usize| {
        let (px, py) = level.annotation.points[part_id];
        let half = tpl as f64 / 2.0;
        let tx = (px * level.map.scale / cell - half).round() as i32;
        let ty = (py * level.map.scale / cell - half).round() as i32;
        let gx = (cols - tpl) as i32;
        let gy = (rows - tpl) as i32;
        let cx = tx.clamp(0, gx.max(0));
        let cy = ty.clamp(0, gy.max(0));
        windows[part_id] = Some((
            (cx - 1).max(0),
            (cx + 1).min(gx.max(0)),
            (cy - 1).max(0),
            (cy + 1).min(gy.max(0)),
        ));
    };
    let (rows, cols) = (level.map.rows, level.map.cols);
    for node in &model.upper.nodes {
        if let NodeKind::Observed { part_id } = node.kind {
            set_window(part_id, node.types[0].template.h, rows, cols);
        }
    }
    for st in &model.sub_trees {
        for mix in &st.mixtures {
            for node in &mix.nodes {
                if let NodeKind::Observed { part_id } = node.kind {
                    set_window(part_id, node.types[0].template.h, rows, cols);
                }
            }
        }
    }

    let masks = UnaryMasks { windows };
    let pass = run_level_pass(model, &level.map, 0, Some(&masks), false)
        .ok_or_else(|| Error::Training("level too small for the model templates".into()))?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (c, &v) in pass.root_total.data.iter().enumerate() {
        if v > best.1 {
            best = (c, v);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return Err(Error::Training(
            "latent completion found no feasible configuration".into(),
        ));
    }
    let loc = ((best.0 % cols) as i32, (best.0 / cols) as i32);
    let mut est = crate::inference::backtrack(model, &pass, loc);
    est.scale = level.map.scale;
    Ok(est)
}

/// One margin-violating detection on a person-free image.
#[derive(Debug, Clone)]
pub struct HardNegative {
    pub score: f64,
    pub features: SparseFeatures,
}

/// Run the detector over negative images and keep the highest-scoring
/// violations (score above -1), up to `limit`.
pub fn mine_hard_negatives(
    model: &PoseModel,
    layout: &WeightLayout,
    negatives: &[Image],
    limit: usize,
) -> Result<Vec<HardNegative>> {
    let mut out: Vec<HardNegative> = Vec::new();
    for image in negatives {
        let pyramid = crate::evaluation::pyramid_for(model, image)?;
        let ests = infer(
            model,
            &pyramid,
            InferOptions {
                occlusion: false,
                threshold: Some(-1.0),
            },
        )?;
        for est in ests {
            let features = extract_features(model, layout, &pyramid.levels[est.level], &est);
            out.push(HardNegative {
                score: est.score,
                features,
            });
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out.truncate(limit);
    Ok(out)
}

// ---------------------------------------------------------------------------
// The SVM core
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SvmExample {
    pub features: SparseFeatures,
    pub label: f64,
}

/// Objective of Eq-style regularized hinge training:
/// `0.5 ||w||^2 + C sum_n max(0, 1 - y_n w.F_n)`.
pub fn svm_objective(w: &[f64], examples: &[SvmExample], c: f64) -> f64 {
    let reg: f64 = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = examples
        .iter()
        .map(|e| (1.0 - e.label * dot_sparse(w, &e.features)).max(0.0))
        .sum();
    reg + c * hinge
}

/// One stochastic sub-gradient epoch with step size `1/(t + t0)`;
/// deformation coefficients are projected after every step (quadratics
/// to at least [`QUAD_FLOOR`], linears into [`LINEAR_BOUND`]). Returns
/// the objective evaluated after the epoch.
pub fn svm_epoch(
    w: &mut [f64],
    examples: &[SvmExample],
    c: f64,
    t: &mut u64,
    t0: f64,
    layout_bounds: (&[u32], &[u32]),
    shuffle_seed: u64,
) -> Result<f64> {
    let (quad_indices, linear_indices) = layout_bounds;
    let n = examples.len();
    if n == 0 {
        return Ok(svm_objective(w, examples, c));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    let n_f = n as f64;
    for &i in &order {
        let e = &examples[i];
        let eta = 1.0 / (*t as f64 + t0);
        *t += 1;
        let score = dot_sparse(w, &e.features);
        // Regularizer share of this sample.
        for v in w.iter_mut() {
            *v *= 1.0 - eta / n_f;
        }
        if 1.0 - e.label * score > 0.0 {
            for &(idx, val) in &e.features {
                w[idx as usize] += eta * c * e.label * val;
            }
        }
        for &q in quad_indices {
            if w[q as usize] < QUAD_FLOOR {
                w[q as usize] = QUAD_FLOOR;
            }
        }
        for &l in linear_indices {
            w[l as usize] = w[l as usize].clamp(-LINEAR_BOUND, LINEAR_BOUND);
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite weights after step {t} (eta {eta})"
            )));
        }
    }
    Ok(svm_objective(w, examples, c))
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveRow {
    pub stage: String,
    pub round: usize,
    pub epoch: usize,
    pub objective: f64,
}

/// Single-sub-tree detector used by stage one: the sub-tree hangs
/// directly under a latent Root.
fn isolated_subtree_model(full: &PoseModel, si: usize) -> PoseModel {
    let mut st = full.sub_trees[si].clone();
    st.upper_parent = 0;
    st.root_anchor = (0, 0);
    let root = crate::model::NodeSpec {
        name: "Root".into(),
        kind: NodeKind::Latent,
        parent: None,
        types: vec![crate::model::TypeParams::latent()],
        compat: crate::model::CompatTable::empty(),
        extent: st.root_extent,
    };
    PoseModel {
        meta: full.meta.clone(),
        upper: UpperLayer { nodes: vec![root] },
        sub_trees: vec![st],
        occlusion: OcclusionParams::disabled(1),
    }
}

struct LatentStage<'a> {
    levels: &'a [SampleLevel],
    negatives: &'a [Image],
    c: f64,
    rounds: usize,
    epochs: usize,
    t0: f64,
    cache_limit: usize,
    seed: u64,
    stage_name: String,
}

/// Alternate latent completion on the positives with sub-gradient
/// epochs, mining hard negatives once per round.
fn run_latent_stage(
    model: &mut PoseModel,
    stage: &LatentStage,
    log: &mut Vec<ObjectiveRow>,
) -> Result<()> {
    let layout = build_layout(model);
    let mut w = pack_weights(model, &layout);
    let mut cache: Vec<HardNegative> = Vec::new();
    for round in 0..stage.rounds {
        // Fresh step-size schedule per round so newly mined negatives
        // still receive meaningful updates.
        let mut t: u64 = 0;
        // Latent completion under the current weights. The first round
        // pins each sample's mixtures to its structure-learning cluster
        // so every mixture receives its own positives before the choice
        // goes latent.
        let mut examples: Vec<SvmExample> = Vec::new();
        for level in stage.levels {
            let est = if round == 0 && !level.mixture_hint.is_empty() {
                latent_completion_gated(model, level, Some(&level.mixture_hint))?
            } else {
                latent_completion(model, level)?
            };
            examples.push(SvmExample {
                features: extract_features(model, &layout, &level.map, &est),
                label: 1.0,
            });
        }
        let mined = mine_hard_negatives(model, &layout, stage.negatives, stage.cache_limit)?;
        cache.extend(mined);
        cache.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        cache.truncate(stage.cache_limit);
        examples.extend(cache.iter().map(|h| SvmExample {
            features: h.features.clone(),
            label: -1.0,
        }));

        for epoch in 0..stage.epochs {
            let objective = svm_epoch(
                &mut w,
                &examples,
                stage.c,
                &mut t,
                stage.t0,
                (&layout.quad_indices, &layout.linear_indices),
                stage
                    .seed
                    .wrapping_add(round as u64 * 1009)
                    .wrapping_add(epoch as u64),
            )?;
            log.push(ObjectiveRow {
                stage: stage.stage_name.clone(),
                round,
                epoch,
                objective,
            });
        }
        unpack_weights(model, &layout, &w);
    }
    Ok(())
}

/// Stage one: train each sub-tree as an independent latent-SVM detector.
pub fn train_subtree_stage(
    model: &mut PoseModel,
    levels: &[SampleLevel],
    negatives: &[Image],
    cfg: &TrainConfig,
    log: &mut Vec<ObjectiveRow>,
) -> Result<()> {
    for si in 0..model.sub_trees.len() {
        let mut sub = isolated_subtree_model(model, si);
        // Restrict the hints to this sub-tree.
        let sub_levels: Vec<SampleLevel> = levels
            .iter()
            .map(|l| SampleLevel {
                map: l.map.clone(),
                annotation: l.annotation.clone(),
                mixture_hint: vec![l.mixture_hint.get(si).copied().flatten()],
            })
            .collect();
        let stage = LatentStage {
            levels: &sub_levels,
            negatives,
            c: cfg.c_subtree,
            rounds: cfg.rounds_subtree,
            epochs: cfg.epochs,
            t0: cfg.step_t0,
            cache_limit: cfg.negative_cache / model.sub_trees.len().max(1),
            seed: cfg.seed.wrapping_add(1000 + si as u64),
            stage_name: format!("subtree:{}", model.sub_trees[si].name),
        };
        run_latent_stage(&mut sub, &stage, log)?;
        let mut trained = sub.sub_trees.remove(0);
        // Restore the full-model attachment.
        trained.upper_parent = model.sub_trees[si].upper_parent;
        trained.root_anchor = model.sub_trees[si].root_anchor;
        model.sub_trees[si] = trained;
    }
    Ok(())
}

/// Stage two: latent SVM over the whole two-layer model, starting from
/// the stage-one weights.
pub fn train_full_stage(
    model: &mut PoseModel,
    levels: &[SampleLevel],
    negatives: &[Image],
    cfg: &TrainConfig,
    log: &mut Vec<ObjectiveRow>,
) -> Result<()> {
    let stage = LatentStage {
        levels,
        negatives,
        c: cfg.c_full,
        rounds: cfg.rounds_full,
        epochs: cfg.epochs,
        t0: cfg.step_t0,
        cache_limit: cfg.negative_cache,
        seed: cfg.seed.wrapping_add(5000),
        stage_name: "full".into(),
    };
    run_latent_stage(model, &stage, log)
}

// ---------------------------------------------------------------------------
// Occlusion parameter estimation
// ---------------------------------------------------------------------------

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let idx = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Ground-truth box of one part: the template footprint at the
/// annotation's own scale, centered on the part.
fn truth_part_box(
    ann: &TrainingAnnotation,
    part: usize,
    meta: &ModelMeta,
    template_cells: usize,
) -> crate::geometry::BoundingBox {
    let side = template_cells as f64 * meta.cell_size as f64 * ann.torso_height()
        / meta.canonical_torso_px;
    let (x, y) = ann.points[part];
    crate::geometry::BoundingBox::new(
        x - side / 2.0,
        y - side / 2.0,
        x + side / 2.0,
        y + side / 2.0,
    )
}

/// Estimate per-pair occlusion parameters from the training poses:
/// `lambda` is the fraction of poses where the two sub-trees' part boxes
/// overlap (capped at 0.9), and `[L, U]` are the 5th and 95th
/// percentiles of the positive overlap ratios.
pub fn learn_occlusion_params(
    annotations: &[TrainingAnnotation],
    model: &PoseModel,
    template_cells: usize,
) -> OcclusionParams {
    let mut pairs = Vec::new();
    for a in 0..model.sub_trees.len() {
        for b in a + 1..model.sub_trees.len() {
            let mut ious: Vec<f64> = Vec::new();
            let mut overlapping_poses = 0usize;
            for ann in annotations {
                let mut any = false;
                for &pa in &model.sub_trees[a].part_ids {
                    for &pb in &model.sub_trees[b].part_ids {
                        let v = iou(
                            &truth_part_box(ann, pa, &model.meta, template_cells),
                            &truth_part_box(ann, pb, &model.meta, template_cells),
                        );
                        if v > 0.0 {
                            ious.push(v);
                            any = true;
                        }
                    }
                }
                if any {
                    overlapping_poses += 1;
                }
            }
            if ious.is_empty() || annotations.is_empty() {
                pairs.push(OcclusionPair {
                    a,
                    b,
                    lambda: 0.0,
                    lower: 0.0,
                    upper: 1.0,
                });
            } else {
                ious.sort_by(|x, y| x.partial_cmp(y).unwrap());
                pairs.push(OcclusionPair {
                    a,
                    b,
                    lambda: (overlapping_poses as f64 / annotations.len() as f64).min(0.9),
                    lower: percentile(&ious, 5.0),
                    upper: percentile(&ious, 95.0),
                });
            }
        }
    }
    OcclusionParams { pairs }
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

pub struct TrainOutput {
    pub model: PoseModel,
    pub log: Vec<ObjectiveRow>,
}

/// End-to-end training: structure learning, parameter initialization,
/// both latent-SVM stages and the occlusion parameters. Deterministic
/// for a fixed (manifest, config) pair.
pub fn train_pipeline(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutput> {
    let manifest = crate::evaluation::augment(manifest, &cfg.rotations, cfg.mirror)?;

    let mut meta = ModelMeta::with_defaults(NUM_PARTS, PART_NAMES.iter().map(|s| s.to_string()).collect());
    meta.cell_size = cfg.cell_size;
    meta.interval = cfg.interval;
    meta.hog.cell_size = cfg.cell_size;
    meta.canonical_torso_px = cfg.canonical_torso_px;
    meta.config_echo = cfg.echo();

    // Load positives once: the normalized annotation plus the level map
    // used for descriptors, latent completion and positive features.
    let mut levels: Vec<SampleLevel> = Vec::new();
    let mut normalized: Vec<TrainingAnnotation> = Vec::new();
    for entry in manifest.positives() {
        let image = manifest.load_entry_image(entry)?;
        let ann = entry.annotation.as_ref().unwrap();
        let level = sample_level(&image, ann, &meta)?;
        // Normalized coordinates: canonical torso height.
        let s = meta.canonical_torso_px / ann.torso_height();
        normalized.push(TrainingAnnotation::new(
            ann.points.iter().map(|&(x, y)| (x * s, y * s)).collect(),
        ));
        levels.push(level);
    }
    if levels.is_empty() {
        return Err(Error::Training("no positive examples in manifest".into()));
    }
    let negatives: Vec<Image> = manifest
        .negatives()
        .map(|e| manifest.load_entry_image(e))
        .collect::<Result<_>>()?;
    if negatives.is_empty() {
        return Err(Error::Training(
            "training requires negative (person-free) images in the manifest".into(),
        ));
    }

    // Structure learning per sub-tree on the normalized level maps.
    let mut inits: Vec<SubTreeInit> = Vec::new();
    for (sti, def) in sub_tree_definitions().into_iter().enumerate() {
        let samples: Vec<DescriptorSample> = levels
            .iter()
            .map(|l| DescriptorSample {
                annotation: &l.annotation,
                features: &l.map,
                cell_size: meta.cell_size,
            })
            .collect();
        let descriptors = build_descriptors(&samples, &def);
        let (structures, assignment) = learn_structures(
            &descriptors,
            def.part_ids.len(),
            cfg.mixtures,
            cfg.seed.wrapping_add(sti as u64),
            cfg.distance_features,
        )?;
        for (m, s) in structures.iter().enumerate() {
            if levels
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == Some(m))
                .count()
                < 3
            {
                log::warn!(
                    "sub-tree {} mixture {m} has fewer than 3 positives",
                    def.name.as_str()
                );
            }
            s.check(def.part_ids.len())
                .map_err(|e| Error::Training(format!("bad learned structure: {e}")))?;
        }
        inits.push(SubTreeInit {
            def,
            structures,
            assignment,
        });
    }

    // Per-sample mixture hints from the structure-learning clusters.
    for (i, level) in levels.iter_mut().enumerate() {
        level.mixture_hint = inits.iter().map(|si| si.assignment[i]).collect();
    }

    let mut model = init_parameters(
        &normalized,
        &inits,
        &standard_upper_plan(),
        cfg.types_limb,
        cfg.types_upper,
        cfg.template_cells,
        meta,
        cfg.seed,
    )?;

    let mut log = Vec::new();
    train_subtree_stage(&mut model, &levels, &negatives, cfg, &mut log)?;
    train_full_stage(&mut model, &levels, &negatives, cfg, &mut log)?;
    model.occlusion = learn_occlusion_params(&normalized, &model, cfg.template_cells);

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
    Ok(TrainOutput { model, log })
}

pub fn objective_log_csv(log: &[ObjectiveRow]) -> String {
    let mut s = String::from("stage,round,epoch,objective\n");
    for row in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.stage, row.round, row.epoch, row.objective
        ));
    }
    s
}
