use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use stereoflow::synth::*;
use stereoflow::*;

fn main() {
    // 1. Recovery sweep
    println!("== constant recovery (levels=3, refs LtRt) ==");
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = SinusoidTexture::random(&mut rng, 12);
        let scene = constant_motion_scene(64, 64, [3.0, 2.0, 4.0, 4.0], &t);
        let cfg = SolverConfig {
            levels: 3, iters_per_level: 120,
            refs: [ViewId::LEFT_T, ViewId::RIGHT_T].into_iter().collect(),
            ..SolverConfig::default()
        };
        let t0 = Instant::now();
        let result = solve(&scene.quadruplet, &cfg).unwrap();
        let mask = combined_reference_mask(&scene.masks, ViewId::LEFT_T, 64, 64);
        let epe = field_epe(&result.fields[&ViewId::LEFT_T], &scene.fields[&ViewId::LEFT_T], Some(&mask));
        println!("seed {seed}: EPE {epe:.4}  ({:?})", t0.elapsed());
    }
    // 2. Multi-ref direction on layered scenes
    println!("== multiref direction (layered scenes) ==");
    let mut wins = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let tb = SinusoidTexture::random(&mut rng, 10);
        let tf = SinusoidTexture::random(&mut rng, 10);
        let d1f = rng.gen_range(6.0..9.0);
        let params = LayeredSceneParams {
            background: [0.0, 0.0, 2.0, 2.0],
            foreground: [rng.gen_range(0.5..1.5), rng.gen_range(-0.5..0.5), d1f, d1f + rng.gen_range(-0.5..0.5)],
            rect: Rect { x0: rng.gen_range(12.0..28.0), y0: rng.gen_range(12.0..28.0), w: 16.0, h: 16.0 },
        };
        let scene = layered_square_scene(64, 64, &params, &tb, &tf);
        let mask = combined_reference_mask(&scene.masks, ViewId::LEFT_T, 64, 64);
        let mut epes = vec![];
        for refs in [vec![ViewId::LEFT_T], vec![ViewId::LEFT_T, ViewId::RIGHT_T]] {
            let cfg = SolverConfig { levels: 3, iters_per_level: 100, refs: refs.into_iter().collect(), ..SolverConfig::default() };
            let result = solve(&scene.quadruplet, &cfg).unwrap();
            epes.push(field_epe(&result.fields[&ViewId::LEFT_T], &scene.fields[&ViewId::LEFT_T], Some(&mask)));
        }
        let ok = epes[1] <= epes[0];
        if ok { wins += 1; }
        println!("seed {seed}: single {:.4} multi {:.4} {}", epes[0], epes[1], if ok {"<=" } else { "WORSE" });
    }
    println!("multiref wins: {wins}/10");
    // 3. Flip equivalence sweep
    println!("== flip equivalence ==");
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let t = SinusoidTexture::random(&mut rng, 12);
        let scene = constant_motion_scene(48, 48, [2.0, 1.0, 3.0, 3.5], &t);
        let cfg = SolverConfig { levels: 3, iters_per_level: 80, refs: [ViewId::RIGHT_T].into_iter().collect(), ..SolverConfig::default() };
        let direct = solve(&scene.quadruplet, &cfg).unwrap();
        let (fq, _) = assemble_reference_inputs(&scene.quadruplet, ViewId::RIGHT_T);
        let cfg2 = SolverConfig { refs: [ViewId::LEFT_T].into_iter().collect(), ..cfg.clone() };
        let flipped = solve(&fq, &cfg2).unwrap();
        let unflipped = mirror_sceneflow(&flipped.fields[&ViewId::LEFT_T], ViewId::RIGHT_T);
        let epe = field_epe(&direct.fields[&ViewId::RIGHT_T], &unflipped, None);
        println!("seed {seed}: flip-equiv EPE {epe:.4}");
    }
}
