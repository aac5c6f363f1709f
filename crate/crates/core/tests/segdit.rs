use partflow::codec::LatentGrid;
use partflow::segdit::{
    build_point_tokens, explicit_coord_tokens, task_embedding, InitScheme, ModelConfig, ModelError, ModelParams, PointEmbed,
    PointPrompt, Tape, TaskCondition,
};
use partflow::shapeforge::{GuidanceMap, GuidancePixel, View};
use partflow::voxcore::Coord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(point_embed: PointEmbed) -> ModelConfig {
    ModelConfig { d_model: 24, blocks: 2, heads: 2, d_lat: 3, point_embed, patch_size: 4, freq_dim: 8, ..ModelConfig::default() }
}

fn random_latents(n: usize, seed: u64) -> (LatentGrid, LatentGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<Coord> = Vec::new();
    while coords.len() < n {
        let c = [rng.random_range(0..6u16), rng.random_range(0..6u16), rng.random_range(0..6u16)];
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    coords.sort();
    let vals = |rng: &mut ChaCha8Rng| (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let y = LatentGrid::new(6, 1, coords.clone(), 3, vals(&mut rng)).unwrap();
    let z = LatentGrid::new(6, 1, coords, 3, vals(&mut rng)).unwrap();
    (y, z)
}

fn random_guidance(seed: u64) -> GuidanceMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..64)
        .map(|_| {
            let background = rng.random_bool(0.3);
            let color = if background { [0.0; 3] } else { std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
            GuidancePixel { color, background }
        })
        .collect();
    GuidanceMap { width: 8, height: 8, view: View::PosZ, pixels }
}

fn clicks() -> TaskCondition {
    TaskCondition::Interactive(PointPrompt::new(vec![[0.1, 0.5, 0.9], [0.7, 0.2, 0.3], [0.95, 0.95, 0.05]]).unwrap())
}

fn loss(params: &ModelParams, y: &LatentGrid, z: &LatentGrid, cond: &TaskCondition, adj: &[f64]) -> f64 {
    let out = params.forward(y, z, cond, 0.37).unwrap();
    out.values().iter().zip(adj).map(|(a, b)| a * b).sum()
}

fn check_gradients(cond: TaskCondition, cfg: ModelConfig) {
    let mut params = ModelParams::init(cfg, 5, InitScheme::Dense).unwrap();
    let (y, z) = random_latents(12, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let adj: Vec<f64> = (0..y.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, tape) = params.forward_recorded(&y, &z, &cond, 0.37).unwrap();
    let grads = tape.backward(&params, &adj).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, slot) in params.layout().entries.clone() {
        for k in (0..slot.len()).step_by((slot.len() / 7).max(1)) {
            let i = slot.off + k;
            let orig = params.as_slice()[i];
            params.as_mut_slice()[i] = orig + h;
            let lp = loss(&params, &y, &z, &cond, &adj);
            params.as_mut_slice()[i] = orig - h;
            let lm = loss(&params, &y, &z, &cond, &adj);
            params.as_mut_slice()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let err = (grads[i] - num).abs() / (1e-8 + 1e-5 * (grads[i].abs() + num.abs()));
            worst = worst.max(err);
            assert!(err <= 1.0, "{name}[{k}]: analytic {} numeric {num}", grads[i]);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn gradients_interactive_label() {
    check_gradients(clicks(), small_config(PointEmbed::Label));
}

#[test]
fn gradients_interactive_explicit() {
    check_gradients(clicks(), small_config(PointEmbed::Explicit));
}

#[test]
fn gradients_guided() {
    check_gradients(TaskCondition::GuidedFull(random_guidance(4)), small_config(PointEmbed::Label));
}

#[test]
fn gradients_masked_padding_without_cross_rope() {
    let cfg = ModelConfig { mask_padded_points: true, cross_rope: false, ..small_config(PointEmbed::Label) };
    check_gradients(TaskCondition::GuidedFull(random_guidance(6)), cfg.clone());
    check_gradients(clicks(), cfg);
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let params = ModelParams::init(small_config(PointEmbed::Label), 5, InitScheme::Dense).unwrap();
    let (y, z) = random_latents(10, 2);
    let adj = vec![1.0; y.values().len()];
    let (_, tape) = params.forward_recorded(&y, &z, &clicks(), 0.2).unwrap();
    let grads = tape.backward(&params, &adj).unwrap();
    let l = params.layout();
    for slot in [l.guide_w, l.guide_b].into_iter().chain(l.blocks.iter().flat_map(|b| [b.xq, b.xk, b.xv, b.xo, b.xo_b])) {
        assert!(grads[slot.range()].iter().all(|&g| g == 0.0));
    }
    assert!(grads[l.e_p.range()].iter().any(|&g| g != 0.0));
}

#[test]
fn backward_requires_forward() {
    let params = ModelParams::init(small_config(PointEmbed::Label), 0, InitScheme::Standard).unwrap();
    assert!(matches!(Tape::default().backward(&params, &[]), Err(ModelError::NoRecordedForward)));
}

#[test]
fn click_order_invariance() {
    let params = ModelParams::init(small_config(PointEmbed::Explicit), 7, InitScheme::Dense).unwrap();
    let (y, z) = random_latents(9, 11);
    let pts = vec![[0.1, 0.5, 0.9], [0.7, 0.2, 0.3], [0.95, 0.95, 0.05]];
    let a = params.forward(&y, &z, &TaskCondition::Interactive(PointPrompt::new(pts.clone()).unwrap()), 0.6).unwrap();
    let rev: Vec<_> = pts.into_iter().rev().collect();
    let b = params.forward(&y, &z, &TaskCondition::Interactive(PointPrompt::new(rev).unwrap()), 0.6).unwrap();
    for (u, v) in a.values().iter().zip(b.values()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn padded_point_tokens_are_zero() {
    let params = ModelParams::init(small_config(PointEmbed::Explicit), 1, InitScheme::Dense).unwrap();
    let prompt = PointPrompt::new(vec![[0.5; 3]; 3]).unwrap();
    let tokens = build_point_tokens(&prompt, &params).unwrap();
    assert_eq!(tokens.valid.iter().filter(|&&v| v).count(), 3);
    let d = params.config().d_model;
    assert!(tokens.features[3 * d..].iter().all(|&v| v == 0.0));
    assert!(tokens.coords[3..].iter().all(|c| *c == [0.0; 3]));
    assert_eq!(tokens, explicit_coord_tokens(&prompt, &params).unwrap());
    assert!(matches!(PointPrompt::new(vec![[0.5; 3]; 11]), Err(ModelError::TooManyPoints(11))));
}

#[test]
fn task_index_validation() {
    let params = ModelParams::init(small_config(PointEmbed::Label), 1, InitScheme::Dense).unwrap();
    assert!(task_embedding(&params, 2).is_ok());
    assert!(matches!(task_embedding(&params, 3), Err(ModelError::UnknownTask(3))));
}

#[test]
fn task_surgery_makes_empty_prompt_match_full() {
    let mut params = ModelParams::init(small_config(PointEmbed::Label), 3, InitScheme::Dense).unwrap();
    let w2 = params.layout().task_w2;
    params.get_mut(w2).fill(0.0);
    let (y, z) = random_latents(10, 4);
    let a = params.forward(&y, &z, &TaskCondition::Interactive(PointPrompt::default()), 0.4).unwrap();
    let b = params.forward(&y, &z, &TaskCondition::Full, 0.4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = ModelParams::init(small_config(PointEmbed::Explicit), 8, InitScheme::Dense).unwrap();
    params.round_to_f32();
    let path = dir.path().join("flow.ckpt");
    params.save(&path, &serde_json::json!({"step": 12})).unwrap();
    let (loaded, extra) = ModelParams::load(&path).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(extra["step"], 12);
    let (y, z) = random_latents(6, 1);
    assert_eq!(loaded.forward(&y, &z, &clicks(), 0.3).unwrap(), params.forward(&y, &z, &clicks(), 0.3).unwrap());
}

#[test]
fn rejects_mismatched_inputs() {
    let params = ModelParams::init(small_config(PointEmbed::Label), 1, InitScheme::Standard).unwrap();
    let (y, _) = random_latents(6, 1);
    let (_, z) = random_latents(6, 2);
    assert!(matches!(params.forward(&y, &z, &TaskCondition::Full, 0.1), Err(ModelError::CoordMismatch)));
    let wide = LatentGrid::new(6, 1, y.coords().to_vec(), 4, vec![0.0; 24]).unwrap();
    assert!(matches!(params.forward(&wide, &wide, &TaskCondition::Full, 0.1), Err(ModelError::DimMismatch { .. })));
    let bad = GuidanceMap { width: 6, height: 6, view: View::PosZ, pixels: vec![GuidancePixel { color: [0.0; 3], background: true }; 36] };
    assert!(matches!(params.forward(&y, &y, &TaskCondition::GuidedFull(bad), 0.1), Err(ModelError::BadDimensions(_))));
}
