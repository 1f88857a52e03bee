use mstpose::config::TrainConfig;
use mstpose::evaluation::load_manifest;
use mstpose::inference::{infer, InferOptions};
use mstpose::training::{latent_completion, sample_level, train_pipeline, build_layout, pack_weights, extract_features, dot_sparse};

fn main() {
    let manifest = load_manifest(std::path::Path::new("/tmp/smoke/train/set.manifest")).unwrap();
    let cfg = TrainConfig::parse(
        "seed = 7\nmixtures = 2\ntypes_limb = 3\ntypes_upper = 3\ntemplate_cells = 3\ncanonical_torso_px = 48\nepochs = 16\nrounds_subtree = 4\nrounds_full = 4\nnegative_cache = 600\n",
    ).unwrap();
    let out = train_pipeline(&manifest, &cfg).unwrap();
    let model = out.model;
    let layout = build_layout(&model);
    let w = pack_weights(&model, &layout);
    println!("||w|| = {:.4}", w.iter().map(|v| v*v).sum::<f64>().sqrt());

    for entry in manifest.positives().take(3) {
        let image = manifest.load_entry_image(entry).unwrap();
        let ann = entry.annotation.as_ref().unwrap();
        let level = sample_level(&image, ann, &model.meta).unwrap();
        let lc = latent_completion(&model, &level).unwrap();
        let f = extract_features(&model, &layout, &level.map, &lc);
        println!("completion score {:.3} (dot {:.3})", lc.score, dot_sparse(&w, &f));
        let pyr = mstpose::evaluation::pyramid_for(&model, &image).unwrap();
        let ests = infer(&model, &pyr, InferOptions::default()).unwrap();
        let best = &ests[0];
        println!("  free best score {:.3} at level {} (n={})", best.score, best.level, ests.len());
        // mixture biases and deform magnitudes
    }
    // inspect learned deformation magnitude distribution
    let mut quads = vec![];
    for st in &model.sub_trees { for m in &st.mixtures { for n in &m.nodes { for t in &n.types { quads.push(t.deform[0]); quads.push(t.deform[2]); }}}}
    quads.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("deform quad: min {:.4} med {:.4} max {:.4}", quads[0], quads[quads.len()/2], quads[quads.len()-1]);
    let mut biases = vec![];
    for st in &model.sub_trees { for m in &st.mixtures { biases.push(m.bias); }}
    println!("mixture biases: {:?}", biases.iter().map(|b| format!("{b:.3}")).collect::<Vec<_>>());
}
