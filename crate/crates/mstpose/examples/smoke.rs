use mstpose::config::TrainConfig;
use mstpose::evaluation::{evaluate, EvalOptions};
use mstpose::synth::{generate_dataset, FigureSpec, OcclusionMode, SceneSpec};
use mstpose::training::train_pipeline;

fn main() {
    let n_pos: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(48);
    let rounds: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(4);
    let epochs: usize = std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(16);
    let dir = std::path::Path::new("/tmp/smoke/train");
    let fig = FigureSpec::default();
    let scene = SceneSpec {
        occlusion_mode: OcclusionMode::LegsCrossed,
        occlusion_rate: 0.5,
        seed: 7,
        ..SceneSpec::default()
    };
    let t0 = std::time::Instant::now();
    let (manifest, _) = generate_dataset(&fig, &scene, n_pos, n_pos / 3, dir).unwrap();
    println!("dataset({n_pos}): {:?}", t0.elapsed());

    let cfg = TrainConfig::parse(&format!(
        "seed = 7\nmixtures = 2\ntypes_limb = 6\ntypes_upper = 4\ntemplate_cells = 3\ncanonical_torso_px = 48\nepochs = {epochs}\nrounds_subtree = {rounds}\nrounds_full = {rounds}\nnegative_cache = 600\n",
    ))
    .unwrap();
    let t1 = std::time::Instant::now();
    let out = train_pipeline(&manifest, &cfg).unwrap();
    println!("train: {:?}", t1.elapsed());
    let last_by_stage: Vec<_> = out
        .log
        .chunks(epochs)
        .map(|c| (c[0].stage.clone(), c[0].round, c.last().unwrap().objective))
        .collect();
    for (s, r, o) in &last_by_stage {
        println!("  {s} round {r}: final obj {o:.4}");
    }

    // PCP on the training set itself (sanity) and a held-out occluded set.
    let train_rep = evaluate(&out.model, &manifest, EvalOptions::default()).unwrap();
    println!("train PCP:\n{}", train_rep.to_text());
    let test_scene = SceneSpec { seed: 1007, occlusion_rate: 1.0, ..scene };
    let (test_manifest, _) = generate_dataset(&fig, &test_scene, 24, 0, std::path::Path::new("/tmp/smoke/test")).unwrap();
    let rep = evaluate(&out.model, &test_manifest, EvalOptions::default()).unwrap();
    println!("test MST:\n{}", rep.to_text());
    let rep_oa = evaluate(&out.model, &test_manifest, EvalOptions { occlusion: true, ..EvalOptions::default() }).unwrap();
    println!("test OA:\n{}", rep_oa.to_text());
}
