//! Occlusion-aware re-scoring: candidate occlusion sets from sub-tree
//! level NMS, IoU gating against learned bounds, the exclusion penalty
//! and the re-weighting of occluded candidates.
//!
//! For every mixture evidence map, NMS proposes whole-limb root
//! candidates; each survivor is expanded by backtracking into its parts'
//! boxes. Candidates of different sub-trees whose implied global Root
//! locations agree are compared part against part: when a gated overlap
//! exists, the lower-scoring root candidate is the occluded one and its
//! evidence entry is re-written to `score + max(psi)` from the frozen
//! pre-pass scores.

use crate::geometry::{iou, nms, BoundingBox, Candidate};
use crate::inference::{latent_box, observed_box, LevelPass, NodeAssign, OcclusionDelta};
use crate::model::{NodeKind, PoseModel};

/// Lower clamp of the Eq. 8 log argument.
pub const PSI_ARG_FLOOR: f64 = 1e-6;

/// IoU gate between two candidates: the overlap passes through only
/// inside the learned `[lower, upper]` band.
pub fn occlusion_gate(iou_value: f64, lower: f64, upper: f64) -> f64 {
    debug_assert!(lower <= upper);
    if iou_value >= lower && iou_value <= upper {
        iou_value
    } else {
        0.0
    }
}

/// Exclusion penalty for one candidate against an opposing sub-tree:
/// `psi = log(1 - lambda * mean(gated))`, never positive; zero when the
/// opposing set is empty or nothing is gated.
pub fn exclusion_term(gated_ious: &[f64], lambda: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&lambda));
    if gated_ious.is_empty() || lambda == 0.0 {
        return 0.0;
    }
    let mean = gated_ious.iter().sum::<f64>() / gated_ious.len() as f64;
    let arg = (1.0 - lambda * mean).max(PSI_ARG_FLOOR);
    arg.ln().min(0.0)
}

/// One part candidate inside an occlusion set, carrying its box and the
/// mixture evidence score of its root candidate.
#[derive(Debug, Clone)]
pub struct PartCandidate {
    pub part_id: usize,
    pub bbox: BoundingBox,
}

/// One root (whole-limb) candidate from mixture-level NMS.
#[derive(Debug, Clone)]
pub struct RootCandidate {
    pub cell: usize,
    pub loc: (i32, i32),
    /// Frozen evidence score.
    pub score: f64,
    /// Implied global Root cell obtained by walking anchors upward.
    pub implied_root: (i32, i32),
    pub parts: Vec<PartCandidate>,
}

/// NMS survivors of one mixture's evidence map, expanded to parts.
#[derive(Debug, Clone)]
pub struct OcclusionSet {
    pub sub_tree: usize,
    pub mixture: usize,
    pub candidates: Vec<RootCandidate>,
}

fn implied_root_cell(model: &PoseModel, sub_tree: usize, v0_loc: (i32, i32)) -> (i32, i32) {
    let st = &model.sub_trees[sub_tree];
    let mut loc = (v0_loc.0 - st.root_anchor.0, v0_loc.1 - st.root_anchor.1);
    let mut node = st.upper_parent;
    loop {
        match model.upper.nodes[node].parent {
            Some(p) => {
                let a = model.upper.nodes[node].types[0].anchor;
                loc = (loc.0 - a.0, loc.1 - a.1);
                node = p;
            }
            None => break,
        }
    }
    loc
}

/// Build the occlusion sets of every (sub-tree, mixture) pair of the
/// level: NMS on the mixture evidence map, thresholded relative to the
/// map's peak, then backtracking each survivor into part boxes.
pub fn build_occlusion_sets(model: &PoseModel, pass: &LevelPass) -> Vec<OcclusionSet> {
    let cell_size = model.meta.cell_size;
    let scale = pass.scale;
    let mut sets = Vec::new();
    for (si, st) in model.sub_trees.iter().enumerate() {
        for (mi, mix) in st.mixtures.iter().enumerate() {
            let evidence = &pass.sub_trees[si].mixtures[mi].evidence;
            let peak = evidence
                .data
                .iter()
                .cloned()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut candidates = Vec::new();
            if peak.is_finite() {
                let threshold = peak - model.meta.occ_score_margin;
                let mut survivors = nms(
                    grid_candidates_for(evidence, threshold, |loc| {
                        latent_box(loc, st.root_extent, cell_size, scale)
                    }),
                    threshold,
                    model.meta.occ_nms_overlap,
                );
                // Keep the candidate sets tight: Eq-8's mean over the
                // opposing set washes out when the sets are padded with
                // weak candidates.
                survivors.truncate(model.meta.occ_max_candidates);
                for s in survivors {
                    let assigns = crate::inference::backtrack_mixture(
                        &mix.nodes,
                        &pass.sub_trees[si].mixtures[mi].nodes,
                        NodeAssign {
                            loc: (s.x, s.y),
                            type_id: 0,
                        },
                    );
                    let mut parts = Vec::new();
                    for (ni, node) in mix.nodes.iter().enumerate() {
                        if let NodeKind::Observed { part_id } = node.kind {
                            let a = &assigns[ni];
                            let t = &node.types[a.type_id].template;
                            parts.push(PartCandidate {
                                part_id,
                                bbox: observed_box(a.loc, t.h, t.w, cell_size, scale),
                            });
                        }
                    }
                    candidates.push(RootCandidate {
                        cell: s.y as usize * pass.cols + s.x as usize,
                        loc: (s.x, s.y),
                        score: s.score,
                        implied_root: implied_root_cell(model, si, (s.x, s.y)),
                        parts,
                    });
                }
            }
            sets.push(OcclusionSet {
                sub_tree: si,
                mixture: mi,
                candidates,
            });
        }
    }
    sets
}

fn grid_candidates_for(
    grid: &crate::features::ScoreGrid,
    threshold: f64,
    make_box: impl Fn((i32, i32)) -> BoundingBox,
) -> Vec<Candidate> {
    crate::inference::grid_candidates(grid, 0, 0, 0, threshold, make_box)
}

/// Deterministic tie order of two root candidates with equal scores:
/// the lexicographically smaller (y, x, sub_tree, mixture) wins.
fn loses_to(
    a_score: f64,
    a_key: (i32, i32, usize, usize),
    b_score: f64,
    b_key: (i32, i32, usize, usize),
) -> bool {
    if a_score != b_score {
        a_score < b_score
    } else {
        a_key > b_key
    }
}

/// Apply the exclusion re-weighting to the mixture evidence maps of the
/// level using frozen occlusion sets; returns the applied deltas.
/// Entries are re-written as `frozen_score + max(psi)`, so a second
/// application with the same sets is a no-op.
pub fn reweight_with_sets(
    model: &PoseModel,
    pass: &mut LevelPass,
    sets: &[OcclusionSet],
) -> Vec<OcclusionDelta> {
    let radius = model.meta.occ_parent_radius;
    let mut deltas = Vec::new();
    for set in sets {
        let si = set.sub_tree;
        for root in &set.candidates {
            let a_key = (root.loc.1, root.loc.0, si, set.mixture);
            // Best (least negative) psi over this candidate's parts and
            // the opposing mixture sets it loses a gated comparison to.
            // The mean of Eq-8 runs over one opposing set's candidate
            // samples.
            let mut best_psi: Option<f64> = None;
            for other in sets {
                let sj = other.sub_tree;
                if sj == si {
                    continue;
                }
                let Some(params) = model.occlusion.get(si, sj) else {
                    continue;
                };
                let s_count: usize = other.candidates.iter().map(|c| c.parts.len()).sum();
                if params.lambda == 0.0 || s_count == 0 {
                    continue;
                }
                for u in &root.parts {
                    let mut gated_sum = 0.0;
                    let mut lost = false;
                    for q in &other.candidates {
                        let consistent = (root.implied_root.0 - q.implied_root.0).abs() as f64
                            <= radius
                            && (root.implied_root.1 - q.implied_root.1).abs() as f64 <= radius;
                        if !consistent {
                            continue;
                        }
                        let b_key = (q.loc.1, q.loc.0, sj, other.mixture);
                        for v in &q.parts {
                            let g =
                                occlusion_gate(iou(&u.bbox, &v.bbox), params.lower, params.upper);
                            if g > 0.0 {
                                gated_sum += g;
                                if loses_to(root.score, a_key, q.score, b_key) {
                                    lost = true;
                                }
                            }
                        }
                    }
                    if lost {
                        let mean = gated_sum / s_count as f64;
                        let psi = (1.0 - params.lambda * mean).max(PSI_ARG_FLOOR).ln().min(0.0);
                        best_psi = Some(match best_psi {
                            Some(b) => b.max(psi),
                            None => psi,
                        });
                    }
                }
            }
            if let Some(psi) = best_psi {
                let after = root.score + psi;
                let evidence =
                    &mut pass.sub_trees[si].mixtures[set.mixture].evidence;
                evidence.data[root.cell] = after;
                deltas.push(OcclusionDelta {
                    sub_tree: si,
                    mixture: set.mixture,
                    cell: root.cell,
                    before: root.score,
                    after,
                });
            }
        }
    }
    deltas
}

/// Build the occlusion sets and re-weight the level in one step.
pub fn reweight(model: &PoseModel, pass: &mut LevelPass) -> Vec<OcclusionDelta> {
    let sets = build_occlusion_sets(model, pass);
    reweight_with_sets(model, pass, &sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMap, FeaturePyramid};
    use crate::inference::{run_level_pass, InferOptions};
    use crate::model::test_models::tiny_model;
    use crate::model::PoseModel;

    #[test]
    fn gate_passes_inside_bounds() {
        assert_eq!(occlusion_gate(0.4, 0.1, 0.5), 0.4);
        assert_eq!(occlusion_gate(0.05, 0.1, 0.5), 0.0);
        assert_eq!(occlusion_gate(0.9, 0.1, 0.5), 0.0);
    }

    #[test]
    fn exclusion_term_zero_cases() {
        assert_eq!(exclusion_term(&[], 0.5), 0.0);
        assert_eq!(exclusion_term(&[0.0, 0.0, 0.0], 0.5), 0.0);
        assert_eq!(exclusion_term(&[0.3, 0.4], 0.0), 0.0);
    }

    #[test]
    fn exclusion_term_matches_direct_evaluation() {
        // lambda 0.5, mean gated IoU 0.5 -> log(0.75).
        let psi = exclusion_term(&[0.5, 0.5], 0.5);
        assert!((psi - 0.75f64.ln()).abs() < 1e-12);
        assert!(psi <= 0.0);
    }

    #[test]
    fn exclusion_term_clamps_log_argument() {
        let psi = exclusion_term(&[1.0], 0.999999999);
        assert!(psi.is_finite());
        assert!(psi <= 0.0);
    }

    /// Model with two single-part sub-trees whose parts respond to
    /// different feature channels, so evidence peaks are controlled by
    /// spikes planted in the feature map.
    fn two_subtree_setup() -> (PoseModel, FeatureMap) {
        let mut model = tiny_model(&[1, 1], 0, 1, 2, 1);
        for (si, st) in model.sub_trees.iter_mut().enumerate() {
            let node = &mut st.mixtures[0].nodes[1];
            let t = &mut node.types[0];
            t.template.weights = vec![0.0; 2];
            t.template.weights[si] = 1.0; // channel selector
            t.anchor = (0, 0);
            t.deform = [5.0, 0.0, 5.0, 0.0];
            st.root_anchor = (0, 0);
        }
        model.meta.occ_score_margin = 1.5;
        model.meta.occ_parent_radius = 3.0;
        let mut map = FeatureMap::zeros(12, 12, 2, 1.0);
        // Spike for sub-tree 0 (channel 0) scoring 3.0 and for sub-tree 1
        // (channel 1) scoring 2.0, both at cell (5,5).
        map.data[(5 * 12 + 5) * 2] = 3.0;
        map.data[(5 * 12 + 5) * 2 + 1] = 2.0;
        (model, map)
    }

    #[test]
    fn reweight_hand_trace_of_overlapping_candidates() {
        let (mut model, map) = two_subtree_setup();
        // Pick lambda so psi = -0.3 for a single fully-overlapping pair.
        let lambda = 1.0 - (-0.3f64).exp();
        model.occlusion.pairs[0].lambda = lambda;
        model.occlusion.pairs[0].lower = 0.5;
        model.occlusion.pairs[0].upper = 1.0;

        let mut pass = run_level_pass(&model, &map, 0, None, false).unwrap();
        let sets = build_occlusion_sets(&model, &pass);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].candidates.len(), 1);
        assert_eq!(sets[1].candidates.len(), 1);
        assert!((sets[0].candidates[0].score - 3.0).abs() < 1e-9);
        assert!((sets[1].candidates[0].score - 2.0).abs() < 1e-9);

        let deltas = reweight_with_sets(&model, &mut pass, &sets);
        assert_eq!(deltas.len(), 1);
        assert_eq!(deltas[0].sub_tree, 1);
        assert!((deltas[0].after - 1.7).abs() < 1e-9);
        let cell = sets[1].candidates[0].cell;
        assert!((pass.sub_trees[1].mixtures[0].evidence.data[cell] - 1.7).abs() < 1e-9);
        // The winner is untouched.
        let cell0 = sets[0].candidates[0].cell;
        assert!((pass.sub_trees[0].mixtures[0].evidence.data[cell0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn reweight_is_idempotent_with_frozen_sets() {
        let (mut model, map) = two_subtree_setup();
        model.occlusion.pairs[0].lambda = 0.4;
        model.occlusion.pairs[0].lower = 0.2;
        model.occlusion.pairs[0].upper = 1.0;
        let mut pass = run_level_pass(&model, &map, 0, None, false).unwrap();
        let sets = build_occlusion_sets(&model, &pass);
        let d1 = reweight_with_sets(&model, &mut pass, &sets);
        let snapshot: Vec<Vec<f64>> = pass.sub_trees
            .iter()
            .flat_map(|st| st.mixtures.iter().map(|m| m.evidence.data.clone()))
            .collect();
        let d2 = reweight_with_sets(&model, &mut pass, &sets);
        let snapshot2: Vec<Vec<f64>> = pass.sub_trees
            .iter()
            .flat_map(|st| st.mixtures.iter().map(|m| m.evidence.data.clone()))
            .collect();
        assert_eq!(d1, d2);
        assert_eq!(snapshot, snapshot2);
    }

    #[test]
    fn zero_lambda_leaves_maps_bit_identical() {
        let (model, map) = two_subtree_setup();
        // All lambdas stay zero as produced by OcclusionParams::disabled.
        let plain = run_level_pass(&model, &map, 0, None, false).unwrap();
        let occ = run_level_pass(&model, &map, 0, None, true).unwrap();
        assert!(occ.occ_deltas.is_empty());
        for (a, b) in plain.sub_trees.iter().zip(&occ.sub_trees) {
            for (ma, mb) in a.mixtures.iter().zip(&b.mixtures) {
                assert_eq!(ma.evidence.data, mb.evidence.data);
            }
        }
        assert_eq!(plain.root_total.data, occ.root_total.data);
    }

    #[test]
    fn disjoint_candidates_change_nothing() {
        let (mut model, mut map) = two_subtree_setup();
        model.occlusion.pairs[0].lambda = 0.8;
        model.occlusion.pairs[0].lower = 0.1;
        model.occlusion.pairs[0].upper = 1.0;
        // Move the second spike far away: boxes cannot overlap.
        map.data[(5 * 12 + 5) * 2 + 1] = 0.0;
        map.data[(10 * 12 + 10) * 2 + 1] = 2.0;
        let mut pass = run_level_pass(&model, &map, 0, None, false).unwrap();
        let before: Vec<f64> = pass.sub_trees[1].mixtures[0].evidence.data.clone();
        let deltas = reweight(&model, &mut pass);
        assert!(deltas.is_empty());
        assert_eq!(pass.sub_trees[1].mixtures[0].evidence.data, before);
    }

    #[test]
    fn occluded_estimate_reevaluates_to_reported_score() {
        let (mut model, map) = two_subtree_setup();
        model.occlusion.pairs[0].lambda = 0.5;
        model.occlusion.pairs[0].lower = 0.2;
        model.occlusion.pairs[0].upper = 1.0;
        let pyramid = FeaturePyramid {
            levels: vec![map],
            interval: 1,
            cell_size: model.meta.cell_size,
        };
        let ests = crate::inference::infer(
            &model,
            &pyramid,
            InferOptions {
                occlusion: true,
                threshold: Some(-1e9),
            },
        )
        .unwrap();
        assert!(!ests.is_empty());
        let est = &ests[0];
        assert!(est.occlusion_adjust < 0.0, "penalty should apply");
        let j = crate::inference::evaluate_configuration(&model, &pyramid, est).unwrap();
        assert!((j - est.score).abs() < 1e-6);
    }
}
