//! Word error rate, averaged WER and result tables.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Aware,
    Agnostic,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Aware => "aware",
            EvalMode::Agnostic => "agnostic",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aware" => Ok(EvalMode::Aware),
            "agnostic" => Ok(EvalMode::Agnostic),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}"))),
        }
    }
}

/// Edit counts for one or more aligned (reference, hypothesis) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerRecord {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerRecord {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            return 0.0;
        }
        self.errors() as f64 / self.ref_words as f64
    }

    /// Corpus-level accumulation: counts add, so WER is errors over all
    /// reference words.
    pub fn merge(&mut self, other: &WerRecord) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Minimal edit alignment; among optimal alignments the backtrace prefers
/// substitution (or match), then deletion, then insertion.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerRecord> {
    if reference.is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[(i - 1) * w + j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            let del = dist[(i - 1) * w + j] + 1;
            let ins = dist[i * w + j - 1] + 1;
            dist[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut rec = WerRecord {
        ref_words: n,
        ..WerRecord::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if dist[(i - 1) * w + j - 1] + usize::from(!same) == here {
                rec.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * w + j] + 1 == here {
            rec.deletions += 1;
            i -= 1;
        } else {
            rec.insertions += 1;
            j -= 1;
        }
    }
    Ok(rec)
}

/// WER between two whitespace-delimited strings.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerRecord> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

/// Unweighted mean over languages.
pub fn awer<K>(per_language: &BTreeMap<K, f64>) -> Result<f64> {
    if per_language.is_empty() {
        return Err(Error::Metric("no languages to average".into()));
    }
    Ok(per_language.values().sum::<f64>() / per_language.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("no values to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `after.wer - before.wer`; positive means forgetting.
pub fn forgetting_delta(before: &ResultRow, after: &ResultRow) -> Result<f64> {
    if before.language != after.language || before.mode != after.mode {
        return Err(Error::Metric(format!(
            "cannot compare {}/{} with {}/{}",
            before.language, before.mode, after.language, after.mode
        )));
    }
    Ok(after.record.wer() - before.record.wer())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub language: String,
    pub mode: EvalMode,
    pub record: WerRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageRole {
    Old,
    New,
}

/// Rows keyed by (method, language, mode).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    rows: BTreeMap<(String, String, EvalMode), WerRecord>,
    /// Language name to its role.
    roles: BTreeMap<String, LanguageRole>,
    /// Method insertion order, used for output.
    methods: Vec<String>,
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_role(&mut self, language: &str, role: LanguageRole) {
        self.roles.insert(language.to_string(), role);
    }

    pub fn role(&self, language: &str) -> Option<LanguageRole> {
        self.roles.get(language).copied()
    }

    pub fn insert(&mut self, row: ResultRow) {
        if !self.methods.contains(&row.method) {
            self.methods.push(row.method.clone());
        }
        self.rows.insert((row.method, row.language, row.mode), row.record);
    }

    pub fn get(&self, method: &str, language: &str, mode: EvalMode) -> Option<&WerRecord> {
        self.rows.get(&(method.to_string(), language.to_string(), mode))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::with_capacity(self.rows.len());
        for m in &self.methods {
            for ((method, language, mode), record) in &self.rows {
                if method == m {
                    out.push(ResultRow {
                        method: method.clone(),
                        language: language.clone(),
                        mode: *mode,
                        record: *record,
                    });
                }
            }
        }
        out
    }

    /// AWER over the languages with `role` for one method and mode.
    pub fn awer_for(&self, method: &str, mode: EvalMode, role: LanguageRole) -> Option<f64> {
        let per: BTreeMap<&str, f64> = self
            .rows
            .iter()
            .filter(|((m, l, md), _)| m == method && *md == mode && self.role(l) == Some(role))
            .map(|((_, l, _), r)| (l.as_str(), r.wer()))
            .collect();
        awer(&per).ok()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "language", "mode", "wer", "S", "D", "I", "N"])?;
        for r in self.rows() {
            w.write_record([
                r.method.clone(),
                r.language.clone(),
                r.mode.to_string(),
                format_rate(r.record.wer()),
                r.record.substitutions.to_string(),
                r.record.deletions.to_string(),
                r.record.insertions.to_string(),
                r.record.ref_words.to_string(),
            ])?;
        }
        finish_csv(w)
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for m in &self.methods {
            for mode in [EvalMode::Aware, EvalMode::Agnostic] {
                let old = self.awer_for(m, mode, LanguageRole::Old);
                let new = self.awer_for(m, mode, LanguageRole::New);
                if old.is_some() || new.is_some() {
                    out.push(SummaryRow {
                        method: m.clone(),
                        mode,
                        awer_old: old,
                        awer_new: new,
                    });
                }
            }
        }
        out
    }

    pub fn summary_csv(&self) -> Result<String> {
        summary_csv(&self.summary_rows())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut table = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 8 {
                return Err(Error::Format(format!("expected 8 columns, got {}", rec.len())));
            }
            let num = |i: usize| -> Result<usize> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad count {:?}", &rec[i])))
            };
            table.insert(ResultRow {
                method: rec[0].to_string(),
                language: rec[1].to_string(),
                mode: rec[2].parse()?,
                record: WerRecord {
                    substitutions: num(4)?,
                    deletions: num(5)?,
                    insertions: num(6)?,
                    ref_words: num(7)?,
                },
            });
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mode: EvalMode,
    pub awer_old: Option<f64>,
    pub awer_new: Option<f64>,
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "mode", "awer_old", "awer_new"])?;
    let opt = |v: Option<f64>| v.map(format_rate).unwrap_or_default();
    for r in rows {
        w.write_record([r.method.clone(), r.mode.to_string(), opt(r.awer_old), opt(r.awer_new)])?;
    }
    finish_csv(w)
}

/// Fixed six-decimal rendering so CSV bytes are stable.
pub fn format_rate(v: f64) -> String {
    format!("{v:.6}")
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|_| Error::Format("csv is not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["ka", "lo"], &["ka", "lo"]).unwrap().wer(), 0.0);
        let r = wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        assert!((r.wer() - 1.0 / 3.0).abs() < 1e-15);
        let r = wer(&["a"], &["a", "b", "c"]).unwrap();
        assert_eq!((r.insertions, r.wer()), (2, 2.0));
        let r = wer(&["a", "b"], &[] as &[&str]).unwrap();
        assert_eq!(r.deletions, 2);
        assert!(wer(&[] as &[&str], &["a"]).is_err());
    }

    #[test]
    fn backtrace_prefers_substitution_over_delete_insert() {
        // "a b" vs "b c": distance 2, reachable as 2 substitutions or delete+insert.
        let r = wer(&["a", "b"], &["b", "c"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (2, 0, 0));
    }

    /// Exhaustive search over edit scripts: the cheapest way to turn `r` into
    /// `h` using keep (free), substitute, delete and insert (cost 1 each).
    fn brute_force(r: &[u8], h: &[u8]) -> usize {
        match (r.split_first(), h.split_first()) {
            (None, _) => h.len(),
            (_, None) => r.len(),
            (Some((a, rr)), Some((b, hh))) => {
                let keep_or_sub = brute_force(rr, hh) + usize::from(a != b);
                let del = brute_force(rr, h) + 1;
                let ins = brute_force(r, hh) + 1;
                keep_or_sub.min(del).min(ins)
            }
        }
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for w in 0..3u8 {
                    let mut t: Vec<u8> = s.clone();
                    t.push(w);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn dp_matches_exhaustive_edit_scripts() {
        let seqs = all_sequences(4);
        let words = ["x", "y", "z"];
        for r in seqs.iter().filter(|s| !s.is_empty()) {
            let rw: Vec<&str> = r.iter().map(|&i| words[i as usize]).collect();
            for h in &seqs {
                let hw: Vec<&str> = h.iter().map(|&i| words[i as usize]).collect();
                let rec = wer(&rw, &hw).unwrap();
                assert_eq!(rec.errors(), brute_force(r, h), "{rw:?} vs {hw:?}");
                assert_eq!(rec.ref_words + rec.insertions - rec.deletions, hw.len());
            }
        }
    }

    #[test]
    fn awer_and_forgetting() {
        let m: BTreeMap<&str, f64> = [("a", 0.10), ("b", 0.20)].into_iter().collect();
        assert!((awer(&m).unwrap() - 0.15).abs() < 1e-15);
        let table1: BTreeMap<&str, f64> = [("en", 14.56), ("eo", 14.96), ("de", 14.12), ("ia", 19.88)]
            .into_iter()
            .collect();
        assert!((awer(&table1).unwrap() - 15.9).abs() <= 0.05);
        assert!(awer(&BTreeMap::<&str, f64>::new()).is_err());
        let row = |w: usize, lang: &str| ResultRow {
            method: "x".into(),
            language: lang.into(),
            mode: EvalMode::Aware,
            record: WerRecord {
                substitutions: w,
                ref_words: 100,
                ..Default::default()
            },
        };
        assert_eq!(forgetting_delta(&row(14, "de"), &row(14, "de")).unwrap(), 0.0);
        assert!(forgetting_delta(&row(20, "de"), &row(10, "de")).unwrap() < 0.0);
        assert!(forgetting_delta(&row(10, "de"), &row(10, "en")).is_err());
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let mut t = ResultsTable::new();
        t.set_role("L1", LanguageRole::Old);
        t.set_role("N1", LanguageRole::New);
        for (m, l, s) in [("FT", "L1", 50), ("FT", "N1", 5), ("None", "L1", 4)] {
            t.insert(ResultRow {
                method: m.into(),
                language: l.into(),
                mode: EvalMode::Aware,
                record: WerRecord {
                    substitutions: s,
                    ref_words: 100,
                    ..Default::default()
                },
            });
        }
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("method,language,mode,wer,S,D,I,N\nFT,L1,aware,0.500000,50,0,0,100\n"));
        let back = ResultsTable::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv().unwrap(), csv);
        let s = t.summary_csv().unwrap();
        assert_eq!(
            s,
            "method,mode,awer_old,awer_new\nFT,aware,0.500000,0.050000\nNone,aware,0.040000,\n"
        );
    }
}
