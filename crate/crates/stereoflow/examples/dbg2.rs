use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereoflow::synth::*;
use stereoflow::*;

fn main() {
    let mut wins = 0;
    let mut ties = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let tb = SinusoidTexture::random(&mut rng, 10);
        let tf = SinusoidTexture::random(&mut rng, 10);
        let d1f = rng.gen_range(8.0..11.0);
        let params = LayeredSceneParams {
            background: [0.0, 0.0, 2.0, 2.0],
            foreground: [0.0, 0.0, d1f, d1f],
            rect: Rect { x0: rng.gen_range(18.0..26.0), y0: rng.gen_range(14.0..24.0), w: 24.0, h: 24.0 },
        };
        let scene = layered_square_scene(64, 64, &params, &tb, &tf);
        let mut epes = vec![];
        for refs in [vec![ViewId::LEFT_T], vec![ViewId::LEFT_T, ViewId::RIGHT_T]] {
            let cfg = SolverConfig {
                levels: 3, iters_per_level: 120,
                refs: refs.into_iter().collect(),
                ..SolverConfig::default()
            };
            let result = solve(&scene.quadruplet, &cfg).unwrap();
            epes.push(field_epe(&result.fields[&ViewId::LEFT_T], &scene.fields[&ViewId::LEFT_T], None));
        }
        if epes[1] <= epes[0] { wins += 1; }
        if (epes[1] - epes[0]).abs() < 1e-12 { ties += 1; }
        println!("seed {seed}: single {:.4} multi {:.4}{}", epes[0], epes[1], if epes[1]<=epes[0] {" *"} else {""});
    }
    println!("wins {wins}/10 (exact ties {ties})");
}
