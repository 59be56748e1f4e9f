use rotodet::config::*;
use rotodet::trainer::*;
use std::time::Instant;

fn main() {
    for (name, mode) in [("hbox", TrainMode::Hbox), ("point", TrainMode::Point)] {
        let cfg = TrainConfig {
            mode,
            epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            warmup_iters: 5,
            lr_decay_frac: 0.0,
            seed: 1,
            eval_images: 0,
            workers: 2,
            dataset: DatasetConfig::Synthetic {
                train_images: 40,
                test_images: 2,
                scene: Default::default(),
            },
            ..TrainConfig::default()
        };
        let data = build_data(&cfg).unwrap();
        let mut tr = Trainer::new(&cfg, &data);
        let t0 = Instant::now();
        let _ = tr.run(&data).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{name}: 20 steps (40 imgs) in {dt:.2}s -> {:.0} ms/step, {:.1} min per 2000-img epoch", dt / 20.0 * 1000.0, dt / 40.0 * 2000.0 / 60.0);
    }
    // inference timing
    let cfg = TrainConfig { epochs: 0, dataset: DatasetConfig::Synthetic { train_images: 1, test_images: 50, scene: Default::default() }, ..TrainConfig::default() };
    let data = build_data(&cfg).unwrap();
    let tr = Trainer::new(&cfg, &data);
    let t0 = Instant::now();
    let _ = tr.evaluate(&data, 50).unwrap();
    println!("eval: {:.1} ms/image", t0.elapsed().as_secs_f64() / 50.0 * 1000.0);
}
