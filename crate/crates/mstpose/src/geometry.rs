//! Axis-aligned boxes, intersection-over-union and greedy non-maximum
//! suppression. Shared by inference, occlusion reasoning and evaluation.

/// Axis-aligned box in continuous image coordinates, half-open on the
/// max edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max, "degenerate box");
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Smallest box containing both `self` and `other`.
    pub fn union_hull(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union of two boxes. Zero for disjoint pairs and for
/// degenerate pairs whose union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored location of a part (or latent node) at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub part_id: u32,
    /// Grid column of the template's top-left cell.
    pub x: i32,
    /// Grid row of the template's top-left cell.
    pub y: i32,
    pub level: u32,
    pub type_id: u32,
    /// Log-score; must be finite.
    pub score: f64,
    /// Box in image pixels, derived from the grid location.
    pub bbox: BoundingBox,
}

impl Candidate {
    /// Deterministic ordering used everywhere a tie on score must be
    /// broken: (level, y, x, type, part).
    fn tie_key(&self) -> (u32, i32, i32, u32, u32) {
        (self.level, self.y, self.x, self.type_id, self.part_id)
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates below `score_threshold` are dropped. The rest are visited in
/// descending score order (ties broken by `(level, y, x, type, part)`);
/// a candidate is kept when its IoU with every already-kept candidate is
/// strictly below `overlap_threshold`.
pub fn nms(
    mut candidates: Vec<Candidate>,
    score_threshold: f64,
    overlap_threshold: f64,
) -> Vec<Candidate> {
    assert!(
        (0.0..=1.0).contains(&overlap_threshold),
        "overlap threshold must be in [0,1]"
    );
    candidates.retain(|c| c.score >= score_threshold);
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("non-finite candidate score")
            .then_with(|| a.tie_key().cmp(&b.tie_key()))
    });

    let mut kept: Vec<Candidate> = Vec::new();
    'outer: for c in candidates {
        for k in &kept {
            // Disjoint candidates never suppress each other, so a zero
            // threshold keeps one candidate per overlapping cluster.
            let overlap = iou(&c.bbox, &k.bbox);
            if overlap > 0.0 && overlap >= overlap_threshold {
                continue 'outer;
            }
        }
        kept.push(c);
    }
    kept
}
