use partflow::partdecode::{
    decode_full, decode_guided, decode_interactive, full_report, guided_report, iou_at_n_report, match_parts, simulate_clicks,
    ClickPolicy, DecodeError, Segmenter, SegmenterError, DEFAULT_DELTA_C,
};
use partflow::shapeforge::{make_full_target, make_interactive_target, sample_dataset, GenConfig, GuidanceMap, ShapeRecord, View};
use partflow::voxcore::{Coord, Palette, PartLabeling, SparseVoxelGrid, BLACK, WHITE};
use proptest::prelude::*;

/// Answers every request with the ground truth of the matching shape.
struct Oracle(Vec<ShapeRecord>);

impl Oracle {
    fn shape(&self, grid: &SparseVoxelGrid) -> &ShapeRecord {
        self.0.iter().find(|s| &s.grid == grid).expect("known grid")
    }
}

impl Segmenter for Oracle {
    fn interactive(&self, grid: &SparseVoxelGrid, clicks: &[Coord], _: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        let shape = self.shape(grid);
        let part = shape.labels.labels()[grid.index_of(clicks[0]).unwrap()];
        Ok(make_interactive_target(grid, &shape.labels, part)?)
    }

    fn full(&self, grid: &SparseVoxelGrid, _: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        let shape = self.shape(grid);
        Ok(make_full_target(grid, &shape.labels, &shape.palettes()?[3])?)
    }

    fn guided(&self, grid: &SparseVoxelGrid, _: &GuidanceMap, _: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        let shape = self.shape(grid);
        Ok(make_full_target(grid, &shape.labels, &shape.palettes()?[0])?)
    }
}

/// Always predicts nothing.
struct Blank;

impl Segmenter for Blank {
    fn interactive(&self, grid: &SparseVoxelGrid, _: &[Coord], _: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        Ok(grid.with_colors(&vec![BLACK; grid.len()])?)
    }
    fn full(&self, grid: &SparseVoxelGrid, _: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        Ok(grid.with_colors(&vec![BLACK; grid.len()])?)
    }
    fn guided(&self, grid: &SparseVoxelGrid, _: &GuidanceMap, _: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        self.full(grid, 0)
    }
}

fn shapes(count: usize, seed: u64) -> Vec<ShapeRecord> {
    sample_dataset(count, seed, &GenConfig { resolution: 12, ..GenConfig::default() }).unwrap()
}

fn brute_force_best(m: &[Vec<f64>], ng: usize) -> f64 {
    fn go(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == m.len() {
            *best = best.max(acc);
            return;
        }
        go(m, row + 1, used, acc, best);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(m, row + 1, used, acc + m[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = 0.0;
    go(m, 0, &mut vec![false; ng], 0.0, &mut best);
    best / ng as f64
}

#[test]
fn decode_examples() {
    let grid = SparseVoxelGrid::from_colors(4, vec![[0, 0, 0], [0, 0, 1], [0, 0, 2]], &[[0.8; 3], [-0.2; 3], [0.01; 3]]).unwrap();
    assert_eq!(decode_interactive(&grid), vec![true, false, true]);
    let white = grid.with_colors(&[WHITE; 3]).unwrap();
    assert_eq!(decode_full(&white, DEFAULT_DELTA_C).num_parts(), 1);
    let palette = Palette::new(vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]], 0.5).unwrap();
    // Voxel 0 is equidistant from entries 0 and 2.
    let snapped = grid.with_colors(&[[0.0, 0.0, -1.0], [0.0, 0.0, 0.9], [-0.9, 0.0, 0.0]]).unwrap();
    assert_eq!(decode_guided(&snapped, &palette).labels(), &[0, 1, 2]);
}

#[test]
fn two_by_two_matching_example() {
    // pred part 0 = {0..5}, pred 1 = {6..9}; gt 0 = {0..4, 9}, gt 1 = {5..8}
    let pred = PartLabeling::new(vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    let gt = PartLabeling::new(vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 0]).unwrap();
    let r = match_parts(&pred, &gt).unwrap();
    assert_eq!(r.assignment, vec![(0, 0), (1, 1)]);
    let expected = (5.0 / 7.0 + 3.0 / 5.0) / 2.0;
    assert!((r.mean_iou - expected).abs() < 1e-12);
    assert_eq!(match_parts(&gt, &gt).unwrap().mean_iou, 1.0);
    let short = PartLabeling::new(vec![0; 3]).unwrap();
    assert!(matches!(match_parts(&short, &gt), Err(DecodeError::GridMismatch)));
}

#[test]
fn clean_targets_decode_exactly() {
    for shape in shapes(20, 5) {
        for part in 0..shape.labels.num_parts() {
            let t = make_interactive_target(&shape.grid, &shape.labels, part).unwrap();
            assert_eq!(decode_interactive(&t), shape.labels.mask(part));
        }
        for palette in shape.palettes().unwrap() {
            let t = make_full_target(&shape.grid, &shape.labels, &palette).unwrap();
            assert_eq!(decode_guided(&t, &palette), shape.labels);
            assert_eq!(decode_full(&t, DEFAULT_DELTA_C), shape.labels);
        }
    }
}

#[test]
fn oracle_scores_perfectly() {
    let data = shapes(4, 9);
    let oracle = Oracle(data.clone());
    let report = iou_at_n_report(&oracle, &data, &[1, 3, 5, 7, 10], ClickPolicy::Interior, 0).unwrap();
    assert_eq!(report.iou_at.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3, 5, 7, 10]);
    assert!(report.iou_at.iter().all(|&(_, v)| v == 100.0));
    assert_eq!(full_report(&oracle, &data, DEFAULT_DELTA_C, 0).unwrap().full_iou, 100.0);
    assert_eq!(guided_report(&oracle, &data, View::PosZ, 0).unwrap().full_iou, 100.0);
    assert!(matches!(iou_at_n_report(&oracle, &[], &[1], ClickPolicy::Interior, 0), Err(DecodeError::EmptyDataset)));
    assert!(matches!(iou_at_n_report(&oracle, &data, &[2], ClickPolicy::Interior, 0), Err(DecodeError::BadClickSet(_))));
}

#[test]
fn single_voxel_part_repeats_click() {
    let grid = SparseVoxelGrid::from_colors(4, vec![[0, 0, 0], [0, 0, 1], [0, 0, 2], [3, 3, 3]], &[[0.0; 3]; 4]).unwrap();
    let labels = PartLabeling::new(vec![0, 0, 0, 1]).unwrap();
    let trace = simulate_clicks(&Blank, &grid, &labels, 1, 5, ClickPolicy::Interior, 1).unwrap();
    assert_eq!(trace.clicks, vec![[3, 3, 3]; 5]);
    assert!(matches!(simulate_clicks(&Blank, &grid, &labels, 2, 5, ClickPolicy::Interior, 1), Err(DecodeError::UnknownPart(2))));
    assert!(matches!(simulate_clicks(&Blank, &grid, &labels, 0, 11, ClickPolicy::Interior, 1), Err(DecodeError::BadClickCount(11))));
}

#[test]
fn interior_click_is_deepest_voxel() {
    let mut coords = Vec::new();
    for i in 0..5u16 {
        for j in 0..5u16 {
            for k in 0..5u16 {
                coords.push([i, j, k]);
            }
        }
    }
    let n = coords.len();
    let grid = SparseVoxelGrid::from_colors(5, coords, &vec![[0.0; 3]; n]).unwrap();
    let labels = PartLabeling::new(vec![0; n]).unwrap();
    let trace = simulate_clicks(&Blank, &grid, &labels, 0, 3, ClickPolicy::Interior, 0).unwrap();
    assert_eq!(trace.clicks[0], [2, 2, 2]);
    // Later clicks avoid already-clicked voxels and stay in the part.
    assert_ne!(trace.clicks[1], trace.clicks[0]);
    assert!(trace.ious.iter().all(|&v| v == 0.0));
}

#[test]
fn clicks_are_positive_and_deterministic() {
    let data = shapes(3, 21);
    for policy in [ClickPolicy::Interior, ClickPolicy::Random] {
        for shape in &data {
            for part in 0..shape.labels.num_parts() {
                let a = simulate_clicks(&Blank, &shape.grid, &shape.labels, part, 10, policy, 7).unwrap();
                let b = simulate_clicks(&Blank, &shape.grid, &shape.labels, part, 10, policy, 7).unwrap();
                assert_eq!(a, b);
                for c in &a.clicks {
                    assert_eq!(shape.labels.labels()[shape.grid.index_of(*c).unwrap()], part);
                }
            }
        }
    }
}

fn labeling(raw: &[u32]) -> PartLabeling {
    PartLabeling::compacted(raw).unwrap()
}

proptest! {
    #[test]
    fn matching_equals_brute_force(
        (pred, gt_raw) in (1usize..40).prop_flat_map(|n| (prop::collection::vec(0u32..6, n), prop::collection::vec(0u32..6, n))),
    ) {
        let (p, g) = (labeling(&pred), labeling(&gt_raw));
        let m = partflow::partdecode::iou_matrix(&p, &g).unwrap();
        let best = brute_force_best(&m, g.num_parts() as usize);
        let got = match_parts(&p, &g).unwrap();
        prop_assert!((got.mean_iou - best).abs() < 1e-12);
        let mut seen_p: Vec<u32> = got.assignment.iter().map(|a| a.0).collect();
        let mut seen_g: Vec<u32> = got.assignment.iter().map(|a| a.1).collect();
        seen_p.dedup();
        seen_g.sort_unstable();
        seen_g.dedup();
        prop_assert_eq!(seen_p.len(), got.assignment.len());
        prop_assert_eq!(seen_g.len(), got.assignment.len());
    }

    #[test]
    fn matching_ignores_label_names(raw in prop::collection::vec(0u32..5, 2..30), shift in 1u32..5) {
        let gt = labeling(&raw);
        let pred_raw: Vec<u32> = raw.iter().map(|v| (v + shift) % 5).collect();
        let r = match_parts(&PartLabeling::new(pred_raw.clone()).unwrap_or_else(|_| labeling(&pred_raw)), &gt).unwrap();
        prop_assert!((r.mean_iou - 1.0).abs() < 1e-12);
    }
}
