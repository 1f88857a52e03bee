use mstpose::evaluation::load_manifest;
use mstpose::inference::{infer, InferOptions};
use mstpose::training::train_pipeline;
use mstpose::config::TrainConfig;
use mstpose::parts::PART_NAMES;

fn main() {
    let types: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let mixtures: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(2);
    let manifest = load_manifest(std::path::Path::new("/tmp/smoke/train/set.manifest")).unwrap();
    let cfg = TrainConfig::parse(&format!(
        "seed = 7\nmixtures = {mixtures}\ntypes_limb = {types}\ntypes_upper = 3\ntemplate_cells = 3\ncanonical_torso_px = 48\nepochs = 20\nrounds_subtree = 5\nrounds_full = 5\nnegative_cache = 600\n",
    )).unwrap();
    let out = train_pipeline(&manifest, &cfg).unwrap();
    let model = out.model;
    let test = load_manifest(std::path::Path::new("/tmp/smoke/test/set.manifest")).unwrap();

    // For every arm part: where did the estimate land? nearest truth part
    // name or "background" if nothing within 12px.
    let mut tally: std::collections::BTreeMap<String, usize> = Default::default();
    let mut mix_use: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
    for entry in test.positives() {
        let image = test.load_entry_image(entry).unwrap();
        let ann = entry.annotation.as_ref().unwrap();
        let pyr = mstpose::evaluation::pyramid_for(&model, &image).unwrap();
        let ests = infer(&model, &pyr, InferOptions::default()).unwrap();
        let best = &ests[0];
        for (si, sa) in best.sub_trees.iter().enumerate() {
            *mix_use.entry((si, sa.mixture)).or_default() += 1;
        }
        for pid in [6usize,7,8,9,10,11,12,13,14,15] {
            let c = best.part_center(&model, pid).unwrap();
            let mut best_d = f64::INFINITY;
            let mut best_p = usize::MAX;
            for (q, &(tx, ty)) in ann.points.iter().enumerate() {
                let d = ((c.0-tx).powi(2) + (c.1-ty).powi(2)).sqrt();
                if d < best_d { best_d = d; best_p = q; }
            }
            let label = if best_d > 12.0 { "background".to_string() }
                else if best_p == pid { "CORRECT".to_string() }
                else { PART_NAMES[best_p].to_string() };
            *tally.entry(format!("{} -> {}", PART_NAMES[pid], label)).or_default() += 1;
        }
    }
    let mut rows: Vec<_> = tally.into_iter().collect();
    rows.sort_by_key(|(_, n)| std::cmp::Reverse(*n));
    for (k, n) in rows.iter().take(25) { println!("{n:3}  {k}"); }
    println!("mixture usage: {:?}", mix_use);
}
