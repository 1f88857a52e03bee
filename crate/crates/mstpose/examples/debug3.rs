use mstpose::evaluation::load_manifest;
use mstpose::inference::run_level_pass;
use mstpose::training::train_pipeline;
use mstpose::config::TrainConfig;
use mstpose::geometry::iou;

fn main() {
    let manifest = load_manifest(std::path::Path::new("/tmp/smoke/train/set.manifest")).unwrap();
    let cfg = TrainConfig::parse(
        "seed = 7\nmixtures = 2\ntypes_limb = 6\ntypes_upper = 4\ntemplate_cells = 3\ncanonical_torso_px = 48\nepochs = 20\nrounds_subtree = 5\nrounds_full = 5\nnegative_cache = 600\n",
    ).unwrap();
    let out = train_pipeline(&manifest, &cfg).unwrap();
    let model = out.model;
    for p in &model.occlusion.pairs {
        println!("pair ({},{}) lambda {:.3} L {:.4} U {:.4}", p.a, p.b, p.lambda, p.lower, p.upper);
    }
    let test = load_manifest(std::path::Path::new("/tmp/smoke/test/set.manifest")).unwrap();
    for entry in test.positives().take(3) {
        let image = test.load_entry_image(entry).unwrap();
        let pyr = mstpose::evaluation::pyramid_for(&model, &image).unwrap();
        let map = &pyr.levels[0];
        let plain = run_level_pass(&model, map, 0, None, false).unwrap();
        let sets = mstpose::occlusion::build_occlusion_sets(&model, &plain);
        println!("image {:?}", entry.image);
        // legs are sub-trees 2 and 3
        for s in &sets {
            if s.sub_tree < 2 { continue; }
            println!("  st{} m{}: {:?}", s.sub_tree, s.mixture,
                s.candidates.iter().map(|c| (c.loc, format!("{:.2}", c.score), c.implied_root)).collect::<Vec<_>>());
        }
        // cross IoUs between leg part boxes
        let legs: Vec<_> = sets.iter().filter(|s| s.sub_tree >= 2).collect();
        let mut max_iou: f64 = 0.0; let mut gated = 0; let mut total = 0;
        for a in legs.iter().filter(|s| s.sub_tree == 2) {
            for b in legs.iter().filter(|s| s.sub_tree == 3) {
                for ca in &a.candidates { for cb in &b.candidates {
                    let consistent = (ca.implied_root.0 - cb.implied_root.0).abs() <= 3 && (ca.implied_root.1 - cb.implied_root.1).abs() <= 3;
                    for u in &ca.parts { for v in &cb.parts {
                        let i = iou(&u.bbox, &v.bbox);
                        total += 1;
                        max_iou = max_iou.max(i);
                        let prm = model.occlusion.get(2,3).unwrap();
                        if consistent && i >= prm.lower && i <= prm.upper { gated += 1; }
                    }}
                }}
            }
        }
        println!("  leg cross pairs: {total}, gated {gated}, max iou {max_iou:.3}");
        let mut occ = plain.clone();
        let deltas = mstpose::occlusion::reweight(&model, &mut occ);
        println!("  deltas: {:?}", deltas.iter().map(|d| (d.sub_tree, d.mixture, format!("{:.3}", d.after - d.before))).collect::<Vec<_>>());
    }
}
