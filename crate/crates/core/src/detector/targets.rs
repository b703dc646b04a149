use ndarray::Array2;

use super::Model;
use crate::autograd::Var;
use crate::nn::Graph;

/// A ground-truth instance; `category` indexes the current prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub category: usize,
    pub bbox: [f64; 4],
}

/// Per-region match: the ground-truth index a region regresses to, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matched: Vec<Option<usize>>,
    pub categories: Vec<Option<usize>>,
    pub boxes: Vec<Option<[f64; 4]>>,
}

impl Assignment {
    pub fn positives(&self) -> Vec<usize> {
        self.matched
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|_| i))
            .collect()
    }
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Center-in-box assignment: a region is positive for a ground truth when
/// its cell center lies inside the box; the smallest such box wins, then
/// the lowest index.
pub fn assign_targets(gt: &[GtInstance], model: &Model) -> Assignment {
    let centers = model.grid_centers();
    let mut matched = Vec::with_capacity(centers.len());
    for &(cx, cy) in &centers {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            let b = &g.bbox;
            if cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3] {
                let a = area(b);
                if best.is_none_or(|(_, ba)| a < ba) {
                    best = Some((gi, a));
                }
            }
        }
        matched.push(best.map(|(gi, _)| gi));
    }
    Assignment {
        categories: matched.iter().map(|m| m.map(|gi| gt[gi].category)).collect(),
        boxes: matched.iter().map(|m| m.map(|gi| gt[gi].bbox)).collect(),
        matched,
    }
}

/// One-hot region x category targets; background rows are all zero.
pub fn grounding_targets(assignment: &Assignment, num_categories: usize) -> Array2<f64> {
    let mut t = Array2::zeros((assignment.categories.len(), num_categories));
    for (r, c) in assignment.categories.iter().enumerate() {
        if let Some(c) = c {
            t[[r, *c]] = 1.0;
        }
    }
    t
}

/// Mean sigmoid cross-entropy over every region x category cell.
pub fn grounding_loss(g: &mut Graph, logits: Var, assignment: &Assignment) -> Var {
    let c = g.value(logits).ncols();
    let targets = grounding_targets(assignment, c);
    g.tape.bce_with_logits(logits, targets)
}

/// Mean L1 between predicted and matched boxes over positive regions, in
/// units of the patch size. Zero without positives.
pub fn localization_loss(g: &mut Graph, boxes: Var, assignment: &Assignment, patch_size: usize) -> Var {
    let pos = assignment.positives();
    if pos.is_empty() {
        return g.tape.scalar_constant(0.0);
    }
    let pred = g.tape.gather_rows(boxes, &pos);
    let mut target = Array2::zeros((pos.len(), 4));
    for (row, &r) in pos.iter().enumerate() {
        let b = assignment.boxes[r].expect("positive region has a box");
        for k in 0..4 {
            target[[row, k]] = b[k];
        }
    }
    let denom = patch_size as f64 * 4.0 * pos.len() as f64;
    g.tape.l1(pred, target, denom)
}
