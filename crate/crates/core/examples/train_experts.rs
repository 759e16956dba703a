//! Pre-trains the point decoder, then trains the Visual and Fusion experts on
//! a synthetic benchmark and reports held-out IoU for each.
//!
//! Usage: `cargo run --release --example train_experts [pretrain_steps] [expert_steps] [checkpoint]`

use std::time::Instant;

use v2lab::anchor::AnchorConfig;
use v2lab::checkpoint::save_checkpoint;
use v2lab::model::ModelConfig;
use v2lab::pipeline::{evaluate_expert, prepare, ExpertKind, Prepared};
use v2lab::synth::{generate_dataset, SceneConfig};
use v2lab::training::{build_experts, point_prompt_iou, pretrain_point_decoder, train_expert, TrainConfig};

fn main() -> v2lab::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, default: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let pretrain_steps = arg(1, 5000);
    let expert_steps = arg(2, 2000);

    let model = ModelConfig::default();
    let backend = model.backend();
    let anchor = AnchorConfig::default();
    let train_pairs = generate_dataset(&SceneConfig::default().with_seed(1), 512)?;
    let test_pairs = generate_dataset(&SceneConfig::default().with_seed(2), 128)?;

    let mut cfg = TrainConfig::desk();
    cfg.pretrain_steps = pretrain_steps;
    cfg.max_steps = expert_steps;

    let t = Instant::now();
    let (point_decoder, log) = pretrain_point_decoder(&model, &SceneConfig::default().with_seed(3), &cfg, |row| {
        if row.step % 100 == 0 {
            println!("pretrain step {:5}  loss {:.4}", row.step, row.loss.total);
        }
    })?;
    let iou = point_prompt_iou(&point_decoder, &backend, &test_pairs, 7)?;
    println!(
        "point decoder: {} steps, final loss {:.4}, held-out IoU {iou:.3} ({:.0}s)",
        log.rows.len(),
        log.final_loss().unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64()
    );

    let prep = |pairs: &[v2lab::synth::ViewPair], tag: &str| -> v2lab::Result<Vec<Prepared>> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| prepare(format!("{tag}{i:04}"), p, &backend, &anchor))
            .collect()
    };
    let train = prep(&train_pairs, "train")?;
    let test = prep(&test_pairs, "test")?;

    let mut experts = build_experts(&model, &point_decoder, 11)?;
    for e in experts.iter_mut() {
        let t = Instant::now();
        if e.kind != ExpertKind::Anchor {
            train_expert(e, &train, &cfg, |row| {
                if row.step % 100 == 0 {
                    println!(
                        "  step {:5}  loss {:.4} (v {:.3} s {:.3} m {:.3})",
                        row.step,
                        row.loss.total,
                        row.loss.v,
                        row.loss.s,
                        row.loss.m
                    );
                }
            })?;
        }
        let report = evaluate_expert(e, &test)?;
        println!(
            "{:>6} expert: IoU {:.3}  Loc.E {:.4}  ({:.0}s)",
            e.kind,
            report.iou,
            report.loc_e,
            t.elapsed().as_secs_f64()
        );
    }
    if let Some(path) = args.get(3) {
        save_checkpoint(path, &model, &experts)?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
