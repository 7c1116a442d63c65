//! Train the default teacher/student toy and print the matched taps.
//!
//! Optional first argument: a JSON object of `TrainConfig` overrides.

use dcls::training::{train_toy, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: TrainConfig = match std::env::args().nth(1) {
        Some(json) => serde_json::from_str(&json)?,
        None => TrainConfig::default(),
    };
    let start = std::time::Instant::now();
    let report = train_toy(&cfg)?;
    for t in &report.matched {
        println!(
            "tap {:?} -> {:?} (err {:.3}), weight {} -> {:.4} (rel {:.3})",
            t.true_position,
            t.learned_position,
            t.position_error,
            t.true_weight,
            t.learned_weight,
            t.weight_rel_error
        );
    }
    println!(
        "final loss {:?}, baseline {:?}, recovered {}, diverged {:?}, {:.1}s",
        report.final_loss,
        report.baseline.as_ref().map(|b| b.final_loss),
        report.recovered,
        report.diverged_at,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
