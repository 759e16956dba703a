//! Training-free anchor prompts: match query-mask patches into the target view
//! and compare the resulting point with the true location of the object.
//!
//! Usage: `cargo run --example anchor_matching [n_pairs] [n_points]`

use v2lab::anchor::{canonical_to_pixels, generate_anchor_prompt, AnchorConfig};
use v2lab::mask::mask_centroid;
use v2lab::model::ModelConfig;
use v2lab::synth::{generate_dataset, SceneConfig};

fn main() -> v2lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let n_points: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let backend = ModelConfig::default().backend();
    let cfg = AnchorConfig {
        n_points,
        ..AnchorConfig::default()
    };
    let pairs = generate_dataset(&SceneConfig::default().with_seed(7), n)?;
    let (mut inside, mut total) = (0usize, 0usize);
    for (i, pair) in pairs.iter().enumerate() {
        let fq = backend.anchor.encode(&pair.query_image)?;
        let ft = backend.anchor.encode(&pair.target_image)?;
        let prompt = generate_anchor_prompt(&fq, &ft, &pair.query_mask, &cfg)?;
        let dims = pair.target_mask.dims();
        let pts = canonical_to_pixels(&prompt.points, prompt.canonical_size, dims);
        let hits = pts
            .iter()
            .filter(|p| pair.target_mask.get_signed(p.x.floor() as i64, p.y.floor() as i64))
            .count();
        inside += hits;
        total += pts.len();
        let c = mask_centroid(&pair.target_mask)?;
        println!(
            "pair {i:2}: {} point(s), {hits} on the object; first at ({:5.1}, {:5.1}), object centroid ({:5.1}, {:5.1})",
            pts.len(),
            pts[0].x,
            pts[0].y,
            c.x,
            c.y
        );
    }
    println!("{inside}/{total} anchor points land on the target object");
    Ok(())
}
