//! Generates a handful of synthetic view pairs and writes them to disk.
//!
//! Usage: `cargo run --example gen_data [out_dir] [n_pairs]`

use v2lab::metrics::compute_iou;
use v2lab::synth::{generate_dataset, save_pair, warp_mask, SceneConfig};

fn main() -> v2lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "synthetic_pairs".into());
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);

    let cfg = SceneConfig::default().with_seed(42);
    let pairs = generate_dataset(&cfg, n)?;
    for (i, pair) in pairs.iter().enumerate() {
        let dir = format!("{out}/pair_{i:04}");
        save_pair(pair, &dir, &[("index", i.to_string())])?;
        // The target mask is the warped query mask minus whatever left the frame.
        let warped = warp_mask(&pair.query_mask, &pair.transform);
        println!(
            "{dir}: query area {:4}  target area {:4}  IoU(target, warped query) {:.3}",
            pair.query_mask.count(),
            pair.target_mask.count(),
            compute_iou(&pair.target_mask, &warped)?
        );
    }
    Ok(())
}
