//! The analytic cost ledger behind the efficiency claim: parallel-form
//! inference pays for attention over every pair of window positions, while
//! the recurrent form pays a flat price per step no matter how long the
//! stream has been running. This example prints both across window sizes
//! and itemizes where the operations go.
//!
//! ```text
//! cargo run --example cost_model
//! ```

use sentinet::backbone::BackboneConfig;
use sentinet::flops::{count_flops, discriminator_episode_flops, CostMode};
use sentinet::discriminator::DiscriminatorConfig;

fn main() {
    println!("encoder: 3 layers, 2 heads, width 64, 8 nodes × 2 modalities\n");
    println!("{:>8}  {:>16}  {:>16}  {:>10}", "window", "parallel FLOPs", "per-step FLOPs", "ratio");
    for w in [64, 128, 256, 512] {
        let cfg = BackboneConfig::with_shape(8, 2, w, 64);
        let parallel = count_flops(&cfg, CostMode::ParallelWindow).total();
        let step = count_flops(&cfg, CostMode::RecurrentStep).total();
        println!(
            "{w:>8}  {parallel:>16}  {step:>16}  {:>9.1}x",
            parallel as f64 / step as f64
        );
    }
    println!("\nper-step cost is identical at every window size: the recurrent state");
    println!("never grows, so the ratio above is pure savings for long windows.");

    let cfg = BackboneConfig::with_shape(8, 2, 256, 64);
    let ledger = count_flops(&cfg, CostMode::ParallelWindow);
    println!("\nwhere the parallel pass at W = 256 spends its {:.1} MFLOPs:", ledger.mflops());
    for (module, flops) in ledger.by_module() {
        let share = 100.0 * flops as f64 / ledger.total() as f64;
        println!("  {module:<10} {flops:>14}  {share:>5.1}%");
    }

    let disc = DiscriminatorConfig::with_dim(64);
    let episode = discriminator_episode_flops(&disc, 64);
    println!(
        "\none 64-member discriminator episode costs {:.2} MFLOPs on top",
        episode.mflops()
    );
}
