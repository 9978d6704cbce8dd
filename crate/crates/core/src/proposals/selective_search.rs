//! Hierarchical grouping of an initial segmentation.
//!
//! Adjacent regions are merged greedily by
//! `s_color + s_texture + s_size + s_fill`; the box of every initial and every
//! merged region is emitted.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::proposals::color::{convert, ColorSpace};
use crate::proposals::segment::{segment_float, Segmentation, SegmentationParams};
use crate::proposals::ProposalSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectiveSearchParams {
    pub segmentation: SegmentationParams,
    /// Run every colour space x k combination below instead of the single
    /// RGB strategy.
    pub diversify: bool,
    pub color_spaces: Vec<ColorSpace>,
    pub ks: Vec<f64>,
    /// Boxes whose width and height are both below this are dropped.
    pub min_box_side: f64,
    pub max_proposals: usize,
}

impl Default for SelectiveSearchParams {
    fn default() -> Self {
        SelectiveSearchParams {
            segmentation: SegmentationParams::default(),
            diversify: false,
            color_spaces: vec![ColorSpace::Hsv, ColorSpace::Lab],
            ks: vec![50.0, 100.0, 150.0, 300.0],
            min_box_side: 20.0,
            max_proposals: 2000,
        }
    }
}

impl SelectiveSearchParams {
    pub fn diversified() -> Self {
        SelectiveSearchParams {
            diversify: true,
            ..Self::default()
        }
    }

    fn strategies(&self) -> Vec<(ColorSpace, SegmentationParams)> {
        if !self.diversify {
            return vec![(ColorSpace::Rgb, self.segmentation)];
        }
        let mut out = Vec::new();
        for &space in &self.color_spaces {
            for &k in &self.ks {
                out.push((
                    space,
                    SegmentationParams {
                        k,
                        min_size: k.round().max(1.0) as usize,
                        ..self.segmentation
                    },
                ));
            }
        }
        out
    }
}

/// One node of the grouping hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedBox {
    pub bbox: BBox,
    /// 1 for the final (whole-image) region, increasing towards the leaves.
    pub rank: usize,
}

struct Node {
    bbox: BBox,
    size: usize,
    color: Vec<f32>,
    texture: Vec<f32>,
}

fn intersection(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y) as f64).sum()
}

fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Similarity components, each in `[0, 1]`.
pub fn similarity_terms(
    a_color: &[f32],
    a_texture: &[f32],
    a_size: usize,
    a_box: &BBox,
    b_color: &[f32],
    b_texture: &[f32],
    b_size: usize,
    b_box: &BBox,
    image_size: usize,
) -> [f64; 4] {
    let im = image_size as f64;
    let both = (a_size + b_size) as f64;
    let s_color = intersection(a_color, b_color).clamp(0.0, 1.0);
    let s_texture = intersection(a_texture, b_texture).clamp(0.0, 1.0);
    let s_size = (1.0 - both / im).clamp(0.0, 1.0);
    let s_fill = (1.0 - (union_box(a_box, b_box).area() - both) / im).clamp(0.0, 1.0);
    [s_color, s_texture, s_size, s_fill]
}

fn similarity(a: &Node, b: &Node, image_size: usize) -> f64 {
    similarity_terms(
        &a.color, &a.texture, a.size, &a.bbox, &b.color, &b.texture, b.size, &b.bbox, image_size,
    )
    .iter()
    .sum()
}

fn merge_hist(a: &[f32], sa: usize, b: &[f32], sb: usize) -> Vec<f32> {
    let (wa, wb) = (sa as f32, sb as f32);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x * wa + y * wb) / (wa + wb))
        .collect()
}

/// Greedy hierarchical grouping. For `n` initial regions whose adjacency graph
/// is connected this emits exactly `2n - 1` boxes (leaves first, then merges
/// in order), before any deduplication.
pub fn hierarchical_grouping(seg: &Segmentation) -> Vec<GroupedBox> {
    let image_size = seg.width * seg.height;
    let mut nodes: Vec<Node> = seg
        .regions
        .iter()
        .map(|r| Node {
            bbox: r.bbox,
            size: r.size,
            color: r.color_hist.clone(),
            texture: r.texture_hist.clone(),
        })
        .collect();
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (a, b) in seg.adjacency() {
        neighbours[a].push(b);
        neighbours[b].push(a);
        pairs.push((similarity(&nodes[a], &nodes[b], image_size), a, b));
    }
    let mut alive = vec![true; nodes.len()];
    let mut emitted: Vec<BBox> = nodes.iter().map(|n| n.bbox).collect();

    loop {
        // highest similarity; ties go to the lowest (i, j) pair
        let best = pairs
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| {
                x.0.total_cmp(&y.0)
                    .then_with(|| (y.1, y.2).cmp(&(x.1, x.2)))
            })
            .map(|(i, _)| i);
        let Some(best) = best else { break };
        let (_, i, j) = pairs[best];
        let (ni, nj) = (&nodes[i], &nodes[j]);
        let merged = Node {
            bbox: union_box(&ni.bbox, &nj.bbox),
            size: ni.size + nj.size,
            color: merge_hist(&ni.color, ni.size, &nj.color, nj.size),
            texture: merge_hist(&ni.texture, ni.size, &nj.texture, nj.size),
        };
        let id = nodes.len();
        emitted.push(merged.bbox);
        let mut adj: Vec<usize> = neighbours[i]
            .iter()
            .chain(neighbours[j].iter())
            .copied()
            .filter(|&n| n != i && n != j && alive[n])
            .collect();
        adj.sort_unstable();
        adj.dedup();
        alive[i] = false;
        alive[j] = false;
        pairs.retain(|&(_, a, b)| a != i && a != j && b != i && b != j);
        nodes.push(merged);
        alive.push(true);
        for &n in &adj {
            let s = similarity(&nodes[n], &nodes[id], image_size);
            pairs.push((s, n, id));
            neighbours[n].push(id);
        }
        neighbours.push(adj);
    }
    let total = emitted.len();
    emitted
        .into_iter()
        .enumerate()
        .map(|(k, bbox)| GroupedBox {
            bbox,
            rank: total - k,
        })
        .collect()
}

/// Runs every configured strategy, ranks boxes by hierarchy level (then
/// strategy order), drops small boxes and duplicates, and caps the count.
pub fn selective_search(
    image_id: &str,
    image: &image::RgbImage,
    params: &SelectiveSearchParams,
) -> ProposalSet {
    let mut all: Vec<(usize, usize, BBox)> = Vec::new();
    for (s, (space, seg_params)) in params.strategies().into_iter().enumerate() {
        let img = convert(image, space);
        let seg = segment_float(&img, &seg_params);
        for g in hierarchical_grouping(&seg) {
            all.push((g.rank, s, g.bbox));
        }
    }
    all.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut set = ProposalSet::new(image_id);
    for (rank, _, bbox) in all {
        if bbox.width() < params.min_box_side && bbox.height() < params.min_box_side {
            continue;
        }
        if set.len() >= params.max_proposals {
            break;
        }
        set.push_unique(bbox, rank);
    }
    set
}
