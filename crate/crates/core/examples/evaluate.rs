//! Evaluates a trained checkpoint on a held-out synthetic split: every expert
//! alone, then post-hoc selection by cyclic consistency.
//!
//! Usage: `cargo run --release --example evaluate <checkpoint> [n_pairs]`
//! (produce the checkpoint with the `train_experts` example or `v2lab train`).

use v2lab::anchor::AnchorConfig;
use v2lab::checkpoint::load_checkpoint;
use v2lab::metrics::MetricReport;
use v2lab::pccs::{select_for, SelectMode};
use v2lab::pipeline::{evaluate_expert, prepare, ExpertKind};
use v2lab::synth::{generate_dataset, SceneConfig};

fn main() -> v2lab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let Some(path) = args.get(1) else {
        eprintln!("usage: evaluate <checkpoint> [n_pairs]");
        std::process::exit(2);
    };
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(128);

    let (ck, _) = load_checkpoint(path, None)?;
    let backend = ck.model.backend();
    let anchor = AnchorConfig::default();
    let pairs = generate_dataset(&SceneConfig::default().with_seed(2), n)?;
    let data = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| prepare(format!("test{i:04}"), p, &backend, &anchor))
        .collect::<v2lab::Result<Vec<_>>>()?;

    for e in &ck.experts {
        let r = evaluate_expert(e, &data)?;
        println!("{:>8}: IoU {:.3}  Loc.E {:.4}", e.kind.name(), r.iou, r.loc_e);
    }

    let point_decoder = &ck.expert(ExpertKind::Anchor).expect("anchor expert").decoder;
    for mode in [SelectMode::Pccs, SelectMode::CycleMask] {
        let mut report = MetricReport::default();
        let mut picks = [0usize; 3];
        for p in &data {
            let preds = ck
                .experts
                .iter()
                .map(|e| Ok((e.kind.tag() as usize, e.predict(p)?.mask)))
                .collect::<v2lab::Result<Vec<_>>>()?;
            let sel = select_for(p, &preds, mode, &anchor, point_decoder, 0)?;
            picks[sel.selected] += 1;
            let mask = &preds.iter().find(|(id, _)| *id == sel.selected).unwrap().1;
            report.push(p.id.clone(), mask, &p.target_mask)?;
        }
        println!(
            "{mode:>8}: IoU {:.3}  Loc.E {:.4}  picks anchor/visual/fusion = {}/{}/{}",
            report.iou, report.loc_e, picks[0], picks[1], picks[2]
        );
    }
    Ok(())
}
