//! Cyclic-consistency selection between a correct target mask and a shifted
//! copy of it, with the mask-level baseline for comparison.
//!
//! Usage: `cargo run --example pccs_select [n_pairs] [shift_px]`

use std::time::Instant;

use v2lab::anchor::AnchorConfig;
use v2lab::decoder::Decoder;
use v2lab::model::ModelConfig;
use v2lab::pccs::{select_for, SelectMode};
use v2lab::pipeline::prepare;
use v2lab::synth::{generate_dataset, SceneConfig};

fn main() -> v2lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let shift: i64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);

    let model = ModelConfig::default();
    let backend = model.backend();
    let anchor = AnchorConfig::default();
    // An untrained decoder is enough to time the baseline; its choices are not meaningful.
    let decoder = Decoder::new(&model, 1, candle_core::DType::F32)?;
    let pairs = generate_dataset(&SceneConfig::default().with_seed(9), n)?;

    let mut correct = 0;
    let (mut t_point, mut t_mask) = (0.0, 0.0);
    for (i, pair) in pairs.iter().enumerate() {
        let p = prepare(format!("pair{i}"), pair, &backend, &anchor)?;
        let candidates = vec![(0, p.target_mask.translated(shift, 0)), (1, p.target_mask.clone())];
        let t = Instant::now();
        let sel = select_for(&p, &candidates, SelectMode::Pccs, &anchor, &decoder, i as u64)?;
        t_point += t.elapsed().as_secs_f64();
        let t = Instant::now();
        select_for(&p, &candidates, SelectMode::CycleMask, &anchor, &decoder, i as u64)?;
        t_mask += t.elapsed().as_secs_f64();
        correct += usize::from(sel.selected == 1);
        println!(
            "pair {i:2}: shifted {:6.2} px, correct {:6.2} px -> picked {}",
            sel.scores[0].mean_dist,
            sel.scores[1].mean_dist,
            if sel.selected == 1 { "correct" } else { "shifted" }
        );
    }
    println!("correct candidate chosen in {correct}/{n} pairs");
    println!(
        "selector time per pair: point-level {:.2} ms, mask-level {:.2} ms",
        1e3 * t_point / n as f64,
        1e3 * t_mask / n as f64
    );
    Ok(())
}
