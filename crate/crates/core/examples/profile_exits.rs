//! Parameters and FLOPs per exit for the four architectures.

use splitformer::eval::flops_per_exit;
use splitformer::model::{analytic_param_count, ModelConfig, Variant};

fn main() {
    let frames: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1000);
    for v in [Variant::EeBaseline, Variant::Splitformer, Variant::ConformerBaseline, Variant::UnetModified] {
        let cfg = ModelConfig::preset(v);
        let flops = flops_per_exit(&cfg, frames);
        println!("{} ({frames} frames)", v.name());
        for m in 1..=cfg.exits() {
            println!(
                "  exit {m}: {:>6.2}M params {:>8.3} GFLOPs",
                analytic_param_count(&cfg, m) as f64 / 1e6,
                flops.per_exit[m - 1] as f64 / 1e9
            );
        }
    }
}
