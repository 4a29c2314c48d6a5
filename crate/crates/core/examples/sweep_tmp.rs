// Temporary calibration scan; not part of the deliverable.
use ledit_core::gateway::{GatewayStrategy, OptimizationConfig};
use ledit_core::pipeline::{edit_image, RunConfig, Workbench};
use ledit_core::share::ShareMode;
use ledit_core::toydata::{self, render, TaskCategory, ToyScene, SceneShape, SceneColor, SceneSize, GridPos, Background};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.backend.checkpoint = "/tmp/cal/denoiser.lar".into();
    cfg.embedder.checkpoint = "/tmp/cal/embedder.lar".into();
    let bench = Workbench::<f32>::load(&cfg).unwrap();
    let cases = [
        ("sq-plain-c2tl", ToyScene { shape: SceneShape::Square, color: SceneColor::Blue, size: SceneSize::Large, position: GridPos { row: 1, col: 1 }, background: Background::Plain }, GridPos { row: 0, col: 0 }),
        ("circ-plain-l2r", ToyScene { shape: SceneShape::Circle, color: SceneColor::Green, size: SceneSize::Large, position: GridPos { row: 1, col: 0 }, background: Background::Plain }, GridPos { row: 1, col: 2 }),
        ("tri-plain-t2b", ToyScene { shape: SceneShape::Triangle, color: SceneColor::Yellow, size: SceneSize::Small, position: GridPos { row: 0, col: 1 }, background: Background::Plain }, GridPos { row: 2, col: 1 }),
    ];
    for (name, source, tpos) in cases {
        let mut target_scene = source;
        target_scene.position = tpos;
        let img = render::<f32>(&source, 7777);
        let target = target_scene.caption();
        for cfg_scale in [3.0f64, 7.5] {
            let mut line = format!("{name} cfg{cfg_scale:>4}: ");
            for lambda in [10.0f64, 1.0, 0.0] {
                let opt = OptimizationConfig {
                    loops: 5,
                    gateways_per_loop: 5,
                    strategy: GatewayStrategy::Random,
                    learning_rate: 1e-3,
                    betas: (0.9, 0.999),
                    lambda,
                    cfg_scale,
                };
                let mut total = 0.0;
                for seed in 0..5u64 {
                    let r = edit_image(
                        &cfg, &img, &target, ShareMode::KvShare, TaskCategory::PoseChange,
                        &opt, &bench, 9000 + seed,
                    ).unwrap();
                    total += r.metrics.self_sim_distance;
                }
                line.push_str(&format!("l{lambda:<4} {:.5}  ", total / 5.0));
            }
            println!("{line}");
        }
    }
}
