//! Training configuration: a plain `key = value` text file whose values
//! are echoed into the model header.

use std::path::Path;

use crate::error::{Error, Result};
use crate::structure::DistanceFeatures;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Mixtures per sub-tree.
    pub mixtures: usize,
    /// Types per limb part.
    pub types_limb: usize,
    /// Types per torso/head part.
    pub types_upper: usize,
    pub template_cells: usize,
    pub cell_size: usize,
    pub interval: usize,
    pub canonical_torso_px: f64,
    pub c_subtree: f64,
    pub c_full: f64,
    /// SVM epochs per outer round.
    pub epochs: usize,
    pub rounds_subtree: usize,
    pub rounds_full: usize,
    pub step_t0: f64,
    pub negative_cache: usize,
    pub mirror: bool,
    pub rotations: Vec<f64>,
    pub distance_features: DistanceFeatures,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            mixtures: 4,
            types_limb: 6,
            types_upper: 4,
            template_cells: 4,
            cell_size: 4,
            interval: 2,
            canonical_torso_px: 64.0,
            c_subtree: 0.02,
            c_full: 0.1,
            epochs: 20,
            rounds_subtree: 5,
            rounds_full: 5,
            step_t0: 200.0,
            negative_cache: 1000,
            mirror: false,
            rotations: Vec::new(),
            distance_features: DistanceFeatures::Both,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", ln + 1));
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "mixtures" => cfg.mixtures = value.parse().map_err(|_| bad("mixtures"))?,
                "types_limb" => cfg.types_limb = value.parse().map_err(|_| bad("types_limb"))?,
                "types_upper" => cfg.types_upper = value.parse().map_err(|_| bad("types_upper"))?,
                "template_cells" => {
                    cfg.template_cells = value.parse().map_err(|_| bad("template_cells"))?
                }
                "cell_size" => cfg.cell_size = value.parse().map_err(|_| bad("cell_size"))?,
                "interval" => cfg.interval = value.parse().map_err(|_| bad("interval"))?,
                "canonical_torso_px" => {
                    cfg.canonical_torso_px = value.parse().map_err(|_| bad("canonical_torso_px"))?
                }
                "c_subtree" => cfg.c_subtree = value.parse().map_err(|_| bad("c_subtree"))?,
                "c_full" => cfg.c_full = value.parse().map_err(|_| bad("c_full"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "rounds_subtree" => {
                    cfg.rounds_subtree = value.parse().map_err(|_| bad("rounds_subtree"))?
                }
                "rounds_full" => cfg.rounds_full = value.parse().map_err(|_| bad("rounds_full"))?,
                "step_t0" => cfg.step_t0 = value.parse().map_err(|_| bad("step_t0"))?,
                "negative_cache" => {
                    cfg.negative_cache = value.parse().map_err(|_| bad("negative_cache"))?
                }
                "mirror" => cfg.mirror = value.parse().map_err(|_| bad("mirror"))?,
                "rotations" => {
                    cfg.rotations = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|t| t.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("rotations"))?
                    }
                }
                "distance_features" => {
                    cfg.distance_features = match value {
                        "both" => DistanceFeatures::Both,
                        "geometry" => DistanceFeatures::GeometryOnly,
                        "appearance" => DistanceFeatures::AppearanceOnly,
                        _ => return Err(bad("distance_features")),
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        ln + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        TrainConfig::parse(&text)
    }

    /// Key/value echo for the model header.
    pub fn echo(&self) -> Vec<(String, String)> {
        let df = match self.distance_features {
            DistanceFeatures::Both => "both",
            DistanceFeatures::GeometryOnly => "geometry",
            DistanceFeatures::AppearanceOnly => "appearance",
        };
        let rot = self
            .rotations
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed".into(), self.seed.to_string()),
            ("mixtures".into(), self.mixtures.to_string()),
            ("types_limb".into(), self.types_limb.to_string()),
            ("types_upper".into(), self.types_upper.to_string()),
            ("template_cells".into(), self.template_cells.to_string()),
            ("cell_size".into(), self.cell_size.to_string()),
            ("interval".into(), self.interval.to_string()),
            (
                "canonical_torso_px".into(),
                self.canonical_torso_px.to_string(),
            ),
            ("c_subtree".into(), self.c_subtree.to_string()),
            ("c_full".into(), self.c_full.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("rounds_subtree".into(), self.rounds_subtree.to_string()),
            ("rounds_full".into(), self.rounds_full.to_string()),
            ("step_t0".into(), self.step_t0.to_string()),
            ("negative_cache".into(), self.negative_cache.to_string()),
            ("mirror".into(), self.mirror.to_string()),
            ("rotations".into(), rot),
            ("distance_features".into(), df.into()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = TrainConfig::parse(
            "# test\nseed = 7\nmixtures=2 # inline\nrotations = -10, 10\nc_subtree = 0.02\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mixtures, 2);
        assert_eq!(cfg.rotations, vec![-10.0, 10.0]);
        assert_eq!(cfg.c_subtree, 0.02);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(TrainConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn echo_round_trips_through_parse() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 42;
        cfg.rotations = vec![-5.0, 5.0];
        let text: String = cfg
            .echo()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
