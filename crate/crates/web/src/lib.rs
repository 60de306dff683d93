//! Browser bindings for three small demos: the A-GEM projection in 2-D, the
//! plateau learning-rate schedule for different validation splits, and
//! LID-token suppression on a scripted decoder.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dcl_core::cl::{agem_project, scheduler_step, should_validate, SchedulerConfig, SchedulerState};
use dcl_core::decoding::{greedy_decode_with, DecodeOptions};
use dcl_core::metrics::wer_text;
use dcl_core::numerics::params::LayoutEntry;
use dcl_core::numerics::{GradientVector, GroupSet};
use dcl_core::vocab::{TokenId, Vocab};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct Projection {
    g: [f64; 2],
    dot_before: f64,
    dot_after: f64,
    projected: bool,
}

/// Projects the new-task gradient `(gx, gy)` against the reference `(ax, ay)`.
#[wasm_bindgen]
pub fn project_2d(gx: f64, gy: f64, ax: f64, ay: f64) -> Result<String, JsValue> {
    let vector = |x: f64, y: f64| GradientVector {
        scope: GroupSet::decoder_layers(),
        data: vec![x, y],
        layout: vec![LayoutEntry {
            name: "g".into(),
            offset: 0,
            len: 2,
        }],
    };
    let g = vector(gx, gy);
    let a = vector(ax, ay);
    let out = agem_project(&g, &a).map_err(js_err)?;
    to_json(&Projection {
        g: [out.data[0], out.data[1]],
        dot_before: g.dot(&a).map_err(js_err)?,
        dot_after: out.dot(&a).map_err(js_err)?,
        projected: out != g,
    })
}

#[derive(Serialize)]
struct LrPoint {
    step: usize,
    val_loss: f64,
    lr: f64,
}

/// Runs the plateau scheduler on a synthetic validation curve that decays
/// from 1 towards `floor` with rate `speed` per step, for `epochs` epochs of
/// `steps_per_epoch` steps validated `split_n` times per epoch.
#[wasm_bindgen]
pub fn lr_trace(
    split_n: usize,
    steps_per_epoch: usize,
    epochs: usize,
    floor: f64,
    speed: f64,
    lr0: f64,
) -> Result<String, JsValue> {
    let mut state = SchedulerState::new(lr0, &SchedulerConfig::default());
    let mut points = Vec::new();
    let mut progress = 0.0;
    for e in 0..epochs {
        for k in 0..steps_per_epoch {
            progress += state.current_lr / lr0;
            if should_validate(k, steps_per_epoch, split_n).map_err(js_err)? {
                let val_loss = floor + (1.0 - floor) * (-speed * progress).exp();
                scheduler_step(&mut state, val_loss).map_err(js_err)?;
                points.push(LrPoint {
                    step: e * steps_per_epoch + k + 1,
                    val_loss,
                    lr: state.current_lr,
                });
            }
        }
    }
    to_json(&points)
}

#[derive(Serialize)]
struct SuppressionOutcome {
    hypothesis: String,
    wer: f64,
    stray_lid: bool,
}

/// Decodes `reference` with a scripted decoder that prefers the new
/// language's LID token over the character at index `lid_at`; once the LID
/// is emitted it keeps repeating the last character.
#[wasm_bindgen]
pub fn suppression_demo(reference: &str, lid_at: usize, suppress: bool) -> Result<String, JsValue> {
    let mut alphabet: Vec<char> = reference.chars().filter(|c| *c != ' ').collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    if alphabet.is_empty() {
        return Err(js_err("reference is empty"));
    }
    let mut vocab = Vocab::build(&alphabet, &["OLD"]).map_err(js_err)?;
    let new_lid = vocab.add_language_token("NEW").map_err(js_err)?;
    let script = vocab.encode(reference).map_err(js_err)?;
    let n = vocab.len();
    let eos = vocab.eos_id();
    let mut scorer = |prefix: &[TokenId], _: Option<&str>| -> dcl_core::Result<Vec<f64>> {
        let text = &prefix[2..];
        let mut row = vec![0.0; n];
        let next = if let Some(p) = text.iter().position(|&t| t == new_lid) {
            if text.len() >= script.len() {
                eos
            } else {
                text[..p].last().copied().unwrap_or(script[0])
            }
        } else {
            script.get(text.len()).copied().unwrap_or(eos)
        };
        row[next] = 5.0;
        if text.len() == lid_at && text.len() < script.len() {
            row[new_lid] = 9.0;
        }
        Ok(row)
    };
    let opts = DecodeOptions::aware("OLD", suppress, script.len() + 4);
    let h = greedy_decode_with(&mut scorer, &vocab, &opts).map_err(js_err)?;
    let rec = wer_text(reference, &h.text).map_err(js_err)?;
    to_json(&SuppressionOutcome {
        stray_lid: h.tokens[2..].iter().any(|&t| vocab.is_lid(t)),
        hypothesis: h.text,
        wer: rec.wer(),
    })
}
