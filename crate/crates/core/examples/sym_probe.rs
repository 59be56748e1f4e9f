use rotodet::config::SymmetryConfig;
use rotodet::trainer::verify_symmetry;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let control = args.get(3).map(|s| s == "control").unwrap_or(false);
    let cfg = SymmetryConfig {
        steps,
        learning_rate: lr,
        control,
        train_objects: 1500,
        holdout_objects: 500,
        seed: 7,
        ..SymmetryConfig::default()
    };
    let t0 = Instant::now();
    let rep = verify_symmetry(&cfg).unwrap();
    let mut sorted = rep.errors.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let p90 = sorted[sorted.len() * 9 / 10];
    println!(
        "steps={steps} lr={lr} control={control}: pass_frac={:.3} (untrained {:.3}) med_err={:.4} p90={:.4} passed={} [{:.1}s]",
        rep.pass_fraction, rep.untrained_pass_fraction, med, p90, rep.passed, t0.elapsed().as_secs_f64()
    );
    println!("loss trace: {:?}", rep.loss_trace.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
}
