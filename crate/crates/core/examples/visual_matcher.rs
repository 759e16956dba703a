//! Runs an untrained visual prompt matcher on a few pairs: pooled query
//! features go in, a refined region feature and cross-view mask logits come out.
//!
//! Usage: `cargo run --example visual_matcher`

use candle_core::DType;
use v2lab::anchor::AnchorConfig;
use v2lab::features::FeatureGrid;
use v2lab::losses::contrastive_loss;
use v2lab::mask::Mask;
use v2lab::matcher::VpMatcher;
use v2lab::model::{grids_tensor, masks_tensor, rows_tensor, ModelConfig};
use v2lab::nn::to_f64_vec;
use v2lab::pipeline::prepare;
use v2lab::synth::{generate_dataset, SceneConfig};

fn main() -> v2lab::Result<()> {
    let model = ModelConfig::default();
    let backend = model.backend();
    let pairs = generate_dataset(&SceneConfig::default().with_seed(5), 4)?;
    let prepared = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| prepare(format!("pair{i}"), p, &backend, &AnchorConfig::default()))
        .collect::<v2lab::Result<Vec<_>>>()?;
    let usable: Vec<_> = prepared.iter().filter(|p| p.v_t.is_some()).collect();

    let matcher = VpMatcher::new(&model, 3, DType::F32)?;
    let feats: Vec<&FeatureGrid> = usable.iter().map(|p| &p.query_feat).collect();
    let masks: Vec<&Mask> = usable.iter().map(|p| &p.query_mask).collect();
    let v_q = rows_tensor(&usable.iter().map(|p| p.v_q.clone()).collect::<Vec<_>>(), DType::F32)?;
    let out = matcher.forward(
        &grids_tensor(&feats, DType::F32)?,
        feats[0].rows,
        feats[0].cols,
        &masks_tensor(&masks, DType::F32)?,
        &v_q,
    )?;
    println!("batch of {}: v_hat {:?}, logits {:?}", usable.len(), out.v_hat.dims(), out.logits.dims());

    // The conditioning branch starts at zero, so the refined latent is the prior
    // plus the mask-encoder map; zeroing that encoder leaves the prior alone.
    let diff = (&out.m_tilde - &out.m_prior)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("max |m_tilde - m_prior| at initialisation: {diff}");
    let names: Vec<(String, usize)> = matcher
        .store
        .vars()
        .filter(|(n, _)| n.starts_with("f_mask."))
        .map(|(n, v)| (n.to_string(), v.elem_count()))
        .collect();
    for (name, count) in names {
        matcher.store.set(&name, &vec![0.0; count])?;
    }
    let masks_t = masks_tensor(&masks, DType::F32)?;
    let (_, m_tilde, m_prior) = matcher.structural_mapping_forward(&masks_t, &v_q, &matcher.encode_mask(&masks_t)?)?;
    let diff = (&m_tilde - &m_prior)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("with the mask encoder zeroed: {diff}");

    let v_t = rows_tensor(&usable.iter().map(|p| p.v_t.clone().unwrap()).collect::<Vec<_>>(), DType::F32)?;
    let l_v = to_f64_vec(&contrastive_loss(&out.v_hat, &v_t, 0.07)?)?[0];
    let l_raw = to_f64_vec(&contrastive_loss(&v_q, &v_t, 0.07)?)?[0];
    println!("contrastive loss: refined {l_v:.4}, raw pooled query features {l_raw:.4}");
    Ok(())
}
