use rotodet::config::*;
use rotodet::trainer::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode: TrainMode = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(TrainMode::Rbox);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(600);
    let sigma: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let fusion: bool = args.get(6).map(|s| s != "nofusion").unwrap_or(true);

    let mut weights = rotodet::losses::LossWeights::default();
    if let Ok(v) = std::env::var("MU_SS") {
        weights.mu_ss = v.parse().unwrap();
    }
    let decay_frac: f64 = std::env::var("DECAY").ok().and_then(|v| v.parse().ok()).unwrap_or(0.85);
    let cfg = TrainConfig {
        mode,
        weights,
        epochs,
        batch_size: 2,
        learning_rate: lr,
        warmup_iters: 300,
        lr_decay_frac: decay_frac,
        seed: 5,
        noise_sigma: sigma,
        eval_images: 100,
        workers: 2,
        model: ModelSection { channels: 32, fusion_scaling: fusion },
        dataset: DatasetConfig::Synthetic {
            train_images: n_train,
            test_images: 150,
            scene: Default::default(),
        },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out_dir = std::env::var("PROBE_OUT").ok().map(std::path::PathBuf::from);
    let (report, trainer) = train(&cfg, out_dir.as_deref()).unwrap();
    for m in &report.metrics {
        println!(
            "ep{} cls={:.3} cn={:.3} box={:.3} rot={:.4} flp={:.4} p2r=({:.3},{:.3}) ap50={:.3}",
            m.epoch, m.cls, m.cn, m.bbox, m.rot, m.flp, m.p2r_cls, m.p2r_box, m.ap50
        );
    }
    println!(
        "FINAL {mode:?} ap50={:.4} warnings={} [{:.0}s]",
        report.final_ap50, report.warnings, t0.elapsed().as_secs_f64()
    );
    // Diagnostics: loose-IoU AP and detection counts.
    let data = build_data(&cfg).unwrap();
    let mut dets = Vec::new();
    let mut n_dets = 0usize;
    let mut n_gts = 0usize;
    for i in 0..data.test.images.len() {
        let raster = data.test.images[i].unpack();
        let found = infer(&trainer.detector, &raster, cfg.score_thresh, cfg.nms_thresh).unwrap();
        n_dets += found.len();
        n_gts += data.test.anns.images[i].instances.len();
        dets.push(rotodet::dataio::ImageDetections {
            name: data.test.anns.images[i].name.clone(),
            detections: found,
        });
    }
    let ap25 = rotodet::dataio::eval_ap(&dets, &data.test.anns, 0.25).unwrap();
    let ap35 = rotodet::dataio::eval_ap(&dets, &data.test.anns, 0.35).unwrap();
    let ap50 = rotodet::dataio::eval_ap(&dets, &data.test.anns, 0.5).unwrap();
    let ap65 = rotodet::dataio::eval_ap(&dets, &data.test.anns, 0.65).unwrap();
    println!("diag: dets={n_dets} gts={n_gts} ap25={:.3} ap35={:.3} ap50={:.3} ap65={:.3} per_class50={:?}",
        ap25.mean, ap35.mean, ap50.mean, ap65.mean,
        ap50.per_class.iter().map(|c| c.map(|v| (v*1000.0).round()/1000.0)).collect::<Vec<_>>());
    if matches!(mode, TrainMode::Point | TrainMode::Mixed) {
        let data = build_data(&cfg).unwrap();
        let ms = trainer.object_scale_factors(&data).unwrap();
        let mut by_q: Vec<Vec<f64>> = vec![vec![]; 4];
        let mut sizes: Vec<f64> = ms.iter().map(|(s, _)| *s).collect();
        sizes.sort_by(f64::total_cmp);
        let qs = [sizes[sizes.len()/4], sizes[sizes.len()/2], sizes[3*sizes.len()/4]];
        for (s, m) in &ms {
            let q = if *s < qs[0] { 0 } else if *s < qs[1] { 1 } else if *s < qs[2] { 2 } else { 3 };
            by_q[q].push(*m);
        }
        let means: Vec<f64> = by_q.iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect();
        println!("m by size quartile: {:?} ratio={:.2}", means.iter().map(|v|(v*100.0).round()/100.0).collect::<Vec<_>>(), means[3]/means[0].max(1e-9));
    }
}
