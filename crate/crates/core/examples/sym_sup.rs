use rotodet::config::SymmetryConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let cfg = SymmetryConfig {
        steps,
        learning_rate: lr,
        train_objects: 1500,
        holdout_objects: 300,
        seed: 7,
        ..SymmetryConfig::default()
    };
    let (pass, trace) = rotodet::trainer::debug_sym_supervised(&cfg).unwrap();
    println!("supervised: pass_frac={pass:.3}");
    println!("trace: {:?}", trace.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
}
