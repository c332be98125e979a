use mocodiff_core::synth::*;

fn main() {
    let poses = [
        Pose::default(),
        Pose { dx: 2.0, dy: 0.0, rot: 0.0 },
        Pose { dx: -2.0, dy: 0.0, rot: 0.0 },
        Pose { dx: 0.0, dy: 2.0, rot: 0.0 },
        Pose { dx: 0.0, dy: -2.0, rot: 0.0 },
        Pose { dx: 0.0, dy: 0.0, rot: 0.1 },
        Pose { dx: 0.0, dy: 0.0, rot: -0.1 },
        Pose { dx: 1.5, dy: -1.0, rot: 0.08 },
        Pose { dx: -1.5, dy: 1.0, rot: -0.08 },
    ];
    let mut worst = 0.0f64;
    let mut worst_at = (0u64, 0.0f64, 0usize);
    for seed in 0..60u64 {
        let id = SpriteIdentity::from_seed(seed);
        id.validate().unwrap();
        let meter = ApertureMeter::new(&id);
        for ai in 0..=10 {
            let a = ai as f64 / 10.0;
            for (pi, pose) in poses.iter().enumerate() {
                let img = render_sprite_frame(&id, pose, a).unwrap();
                let m = meter.measure(&img);
                let d = (m - a).abs();
                if d > worst { worst = d; worst_at = (seed, a, pi); }
            }
        }
    }
    println!("grid worst |m - a| = {worst:.4} at (seed, a, pose) = {worst_at:?}");
    // Doubling pairs for canonical identities.
    for seed in 0..6u64 {
        let id = SpriteIdentity::from_seed(seed);
        let eye = {
            let img = render_sprite_frame(&id, &Pose::default(), 0.0).unwrap();
            img.data().iter().filter(|&&v| v < DARK_THRESHOLD).count() as i64
        };
        let count = |a: f64| {
            let img = render_sprite_frame(&id, &Pose::default(), a).unwrap();
            img.data().iter().filter(|&&v| v < DARK_THRESHOLD).count() as i64 - eye
        };
        let diffs: Vec<(f64, i64)> = [0.3, 0.35, 0.4, 0.45, 0.5]
            .iter()
            .map(|&a| (a, count(2.0 * a) - 2 * count(a)))
            .collect();
        println!("seed {seed}: doubling diffs {diffs:?}");
    }
}
