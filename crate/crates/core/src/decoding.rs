//! Greedy auto-regressive decoding with LID-token suppression.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ToyMASRModel;
use crate::numerics::ops::MASK_PENALTY;
use crate::numerics::Tensor;
use crate::vocab::{TokenId, Vocab};

/// Position of the language-ID token in every sequence.
pub const LID_POSITION: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    LanguageAware(String),
    LanguageAgnostic,
}

/// Which LID tokens the suppression rule covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SuppressionTarget {
    #[default]
    AllLid,
    /// Only LID tokens added after the base vocabulary was frozen.
    NewlyAdded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub suppression_enabled: bool,
    #[serde(default)]
    pub suppression_target: SuppressionTarget,
    /// Maximum hypothesis length including BOS.
    pub max_len: usize,
}

impl DecodeOptions {
    pub fn aware(lang: &str, suppression_enabled: bool, max_len: usize) -> Self {
        Self {
            mode: DecodeMode::LanguageAware(lang.to_string()),
            suppression_enabled,
            suppression_target: SuppressionTarget::AllLid,
            max_len,
        }
    }

    pub fn agnostic(suppression_enabled: bool, max_len: usize) -> Self {
        Self {
            mode: DecodeMode::LanguageAgnostic,
            suppression_enabled,
            suppression_target: SuppressionTarget::AllLid,
            max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuppressionRule {
    pub suppressed_ids: BTreeSet<TokenId>,
    pub allowed_positions: BTreeSet<usize>,
}

impl SuppressionRule {
    /// Suppresses `ids` everywhere except `allowed_positions`. Every id must be
    /// an LID token of `vocab`.
    pub fn new(
        vocab: &Vocab,
        ids: impl IntoIterator<Item = TokenId>,
        allowed_positions: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let suppressed_ids: BTreeSet<TokenId> = ids.into_iter().collect();
        if let Some(&bad) = suppressed_ids.iter().find(|&&id| !vocab.is_lid(id)) {
            return Err(Error::Vocab(format!("token {bad} is not a language-ID token")));
        }
        Ok(Self {
            suppressed_ids,
            allowed_positions: allowed_positions.into_iter().collect(),
        })
    }

    pub fn all_lid(vocab: &Vocab) -> Self {
        Self::new(vocab, vocab.lid_ids().map(|(_, id)| id), [LID_POSITION]).expect("LID ids")
    }

    pub fn newly_added(vocab: &Vocab) -> Self {
        let base = vocab.frozen_base_size();
        Self::new(
            vocab,
            vocab.lid_ids().map(|(_, id)| id).filter(|&id| id >= base),
            [LID_POSITION],
        )
        .expect("LID ids")
    }

    pub fn for_target(vocab: &Vocab, target: SuppressionTarget) -> Self {
        match target {
            SuppressionTarget::AllLid => Self::all_lid(vocab),
            SuppressionTarget::NewlyAdded => Self::newly_added(vocab),
        }
    }
}

/// Sets suppressed logits to the mask penalty unless `position` is allowed.
pub fn apply_suppression(row: &mut [f64], position: usize, rule: &SuppressionRule) {
    if rule.allowed_positions.contains(&position) {
        return;
    }
    for &id in &rule.suppressed_ids {
        if let Some(v) = row.get_mut(id) {
            *v = MASK_PENALTY;
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Full sequence starting at BOS.
    pub tokens: Vec<TokenId>,
    pub predicted_lid: Option<String>,
    /// Text tokens after the LID slot. A stray LID token renders as its own word.
    pub text: String,
    pub truncated: bool,
}

/// Source of next-token logits for a prefix. `lang` is the language chosen
/// for the LID slot, once known.
pub trait StepScorer {
    fn next_logits(&mut self, prefix: &[TokenId], lang: Option<&str>) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[TokenId], Option<&str>) -> Result<Vec<f64>>,
{
    fn next_logits(&mut self, prefix: &[TokenId], lang: Option<&str>) -> Result<Vec<f64>> {
        self(prefix, lang)
    }
}

struct ModelScorer<'a> {
    model: &'a ToyMASRModel,
    memory: Tensor,
}

impl StepScorer for ModelScorer<'_> {
    fn next_logits(&mut self, prefix: &[TokenId], lang: Option<&str>) -> Result<Vec<f64>> {
        let emb = match lang {
            Some(l) => self.model.embedding_index_for(l),
            None => self.model.token_embedding_index(),
        };
        self.model.next_logits(prefix, &self.memory, emb)
    }
}

fn render_text(tokens: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut words = String::new();
    for &id in tokens.iter().skip(LID_POSITION + 1) {
        if vocab.is_lid(id) {
            words.push(' ');
            words.push_str(&vocab.decode(&[id])?);
            words.push(' ');
        } else if !vocab.is_special(id) {
            words.push_str(&vocab.decode(&[id])?);
        }
    }
    Ok(words.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Greedy decode against an arbitrary logit source.
pub fn greedy_decode_with(
    scorer: &mut impl StepScorer,
    vocab: &Vocab,
    options: &DecodeOptions,
) -> Result<Hypothesis> {
    if options.max_len < 3 {
        return Err(Error::Config(format!("max_len {} below 3", options.max_len)));
    }
    let rule = SuppressionRule::for_target(vocab, options.suppression_target);
    let mut tokens = vec![vocab.bos_id()];
    let lid = match &options.mode {
        DecodeMode::LanguageAware(lang) => vocab
            .lid_id(lang)
            .ok_or_else(|| Error::Vocab(format!("no LID token for {lang}")))?,
        DecodeMode::LanguageAgnostic => {
            let row = scorer.next_logits(&tokens, None)?;
            let lids: Vec<TokenId> = vocab.lid_ids().map(|(_, id)| id).collect();
            if lids.is_empty() {
                return Err(Error::Vocab("vocabulary has no LID tokens".into()));
            }
            let scores: Vec<f64> = lids.iter().map(|&id| row[id]).collect();
            lids[argmax(&scores).expect("non-empty")]
        }
    };
    tokens.push(lid);
    let lang = vocab.lid_language(lid).map(str::to_string);
    let mut truncated = true;
    while tokens.len() < options.max_len {
        let mut row = scorer.next_logits(&tokens, lang.as_deref())?;
        if row.len() != vocab.len() {
            return Err(Error::Dimension {
                op: "decode logits",
                left: vec![row.len()],
                right: vec![vocab.len()],
            });
        }
        if options.suppression_enabled {
            apply_suppression(&mut row, tokens.len(), &rule);
        }
        let next = argmax(&row).expect("non-empty logits");
        tokens.push(next);
        if next == vocab.eos_id() {
            truncated = false;
            break;
        }
    }
    let text = render_text(&tokens, vocab)?;
    Ok(Hypothesis {
        tokens,
        predicted_lid: lang,
        text,
        truncated,
    })
}

/// Greedy decode of one utterance with the model.
pub fn greedy_decode(
    model: &ToyMASRModel,
    features: &Tensor,
    options: &DecodeOptions,
    vocab: &Vocab,
) -> Result<Hypothesis> {
    let mut scorer = ModelScorer {
        model,
        memory: model.encode(features)?,
    };
    let opts = DecodeOptions {
        max_len: options.max_len.min(model.config().max_len + 1),
        ..options.clone()
    };
    greedy_decode_with(&mut scorer, vocab, &opts)
}

pub fn lid_accuracy(hypotheses: &[Hypothesis], references: &[&str]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let correct = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h.predicted_lid.as_deref() == Some(**r))
        .count();
    Ok(correct as f64 / hypotheses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub language_ref: String,
    pub predicted_lid: Option<String>,
    pub text_ref: String,
    pub text_hyp: String,
    pub truncated: bool,
}

pub fn write_hypotheses_jsonl(records: &[HypothesisRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        let mut v = Vocab::build(&['a', 'b', 'c'], &["L1"]).unwrap();
        v.add_language_token("L2").unwrap();
        v
    }

    /// Plays back one logit row per call.
    fn scripted(rows: Vec<Vec<f64>>) -> impl FnMut(&[TokenId], Option<&str>) -> Result<Vec<f64>> {
        let mut it = rows.into_iter();
        move |_, _| Ok(it.next().expect("script exhausted"))
    }

    fn one_hot(v: &Vocab, id: TokenId, lid_boost: Option<TokenId>) -> Vec<f64> {
        let mut r = vec![0.0; v.len()];
        r[id] = 5.0;
        if let Some(l) = lid_boost {
            r[l] = 9.0;
        }
        r
    }

    #[test]
    fn suppression_only_touches_lid_logits_off_the_lid_slot() {
        let v = vocab();
        let rule = SuppressionRule::all_lid(&v);
        let row: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let mut at1 = row.clone();
        apply_suppression(&mut at1, 1, &rule);
        assert_eq!(at1, row);
        let mut at5 = row.clone();
        apply_suppression(&mut at5, 5, &rule);
        for i in 0..v.len() {
            if v.is_lid(i) {
                assert_eq!(at5[i], MASK_PENALTY);
            } else {
                assert_eq!(at5[i].to_bits(), row[i].to_bits());
            }
        }
        let best = argmax(&at5).unwrap();
        assert!(!v.is_lid(best));
        assert_eq!(best, v.pad_id());
        assert!(SuppressionRule::new(&v, [v.eos_id()], [1]).is_err());
        assert_eq!(
            SuppressionRule::newly_added(&v).suppressed_ids,
            [v.lid_id("L2").unwrap()].into_iter().collect()
        );
    }

    #[test]
    fn eos_first_gives_empty_hypothesis() {
        let v = vocab();
        let mut s = |_: &[TokenId], _: Option<&str>| Ok(one_hot(&v, v.eos_id(), None));
        let h = greedy_decode_with(&mut s, &v, &DecodeOptions::aware("L2", true, 10)).unwrap();
        assert_eq!(h.tokens, vec![v.bos_id(), v.lid_id("L2").unwrap(), v.eos_id()]);
        assert_eq!(h.text, "");
        assert_eq!(h.predicted_lid.as_deref(), Some("L2"));
        assert!(!h.truncated);
    }

    #[test]
    fn agnostic_mode_picks_lid_from_lid_tokens_only() {
        let v = vocab();
        let l1 = v.lid_id("L1").unwrap();
        let mut first = vec![0.0; v.len()];
        first[0] = 100.0;
        first[l1] = 3.0;
        let mut s = scripted(vec![first, one_hot(&v, v.eos_id(), None)]);
        let h = greedy_decode_with(&mut s, &v, &DecodeOptions::agnostic(false, 10)).unwrap();
        assert_eq!(h.tokens[1], l1);
    }

    #[test]
    fn mid_sentence_lid_is_removed_by_suppression() {
        let v = vocab();
        let (a, b, c) = (v.char_id('a').unwrap(), v.char_id('b').unwrap(), v.char_id('c').unwrap());
        let sp = v.space_id();
        let l2 = v.lid_id("L2").unwrap();
        // A model that wants to emit the new LID mid-sentence; once it has,
        // the continuation degrades into repeats of "c".
        let mut model = |prefix: &[TokenId], _: Option<&str>| -> Result<Vec<f64>> {
            let text = &prefix[2..];
            let row = if text.contains(&l2) {
                if text.len() >= 6 { one_hot(&v, v.eos_id(), None) } else { one_hot(&v, c, None) }
            } else {
                match text.len() {
                    0 => one_hot(&v, a, None),
                    1 => one_hot(&v, sp, None),
                    2 => one_hot(&v, b, Some(l2)),
                    3 => one_hot(&v, sp, None),
                    4 => one_hot(&v, a, None),
                    _ => one_hot(&v, v.eos_id(), None),
                }
            };
            Ok(row)
        };
        let before = greedy_decode_with(&mut model, &v, &DecodeOptions::aware("L1", false, 12)).unwrap();
        assert!(before.tokens[2..].contains(&l2));
        assert_eq!(before.text, "a <|L2|> ccc");
        let after = greedy_decode_with(&mut model, &v, &DecodeOptions::aware("L1", true, 12)).unwrap();
        assert!(after.tokens[2..].iter().all(|&t| !v.is_lid(t)));
        assert_eq!(after.text, "a b a");
    }

    #[test]
    fn truncation_is_flagged() {
        let v = vocab();
        let mut s = |_: &[TokenId], _: Option<&str>| Ok(one_hot(&v, 0, None));
        let h = greedy_decode_with(&mut s, &v, &DecodeOptions::aware("L1", false, 5)).unwrap();
        assert_eq!(h.tokens.len(), 5);
        assert!(h.truncated);
        assert_eq!(h.text, "aaa");
        assert!(greedy_decode_with(&mut s, &v, &DecodeOptions::aware("L1", false, 2)).is_err());
    }

    #[test]
    fn lid_accuracy_counts_matches() {
        let h = |l: &str| Hypothesis {
            tokens: vec![],
            predicted_lid: Some(l.into()),
            text: String::new(),
            truncated: false,
        };
        let hs = vec![h("L1"), h("L2"), h("L2"), h("L2")];
        assert_eq!(lid_accuracy(&hs, &["L1", "L1", "L1", "L1"]).unwrap(), 0.25);
        assert_eq!(lid_accuracy(&hs[..1], &["L1"]).unwrap(), 1.0);
        assert!(lid_accuracy(&hs, &["L1"]).is_err());
    }
}
