//! Word error rate, dialog-act F1, intent accuracy and table rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DialogAct, Intent};
use crate::error::{Error, Result};

/// Minimum number of substitutions, deletions and insertions.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer<S: AsRef<str> + PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedRate("reference has no words".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// WER over whitespace-split strings.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

/// Corpus-level WER: total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        edits += edit_distance(&r, &h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::UndefinedRate("references have no words".into()));
    }
    Ok(edits as f64 / words as f64)
}

fn counts(refs: &[BTreeSet<DialogAct>], hyps: &[BTreeSet<DialogAct>]) -> Result<[[usize; 3]; 16]> {
    if refs.len() != hyps.len() {
        return Err(Error::Alignment(format!(
            "{} reference utterances vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    // Per act: true positives, false positives, false negatives.
    let mut c = [[0usize; 3]; 16];
    for (r, h) in refs.iter().zip(hyps) {
        for a in h {
            c[a.index()][if r.contains(a) { 0 } else { 1 }] += 1;
        }
        for a in r.difference(h) {
            c[a.index()][2] += 1;
        }
    }
    Ok(c)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Micro-averaged F1 over all (utterance, act) decisions.
pub fn dialog_act_f1(refs: &[BTreeSet<DialogAct>], hyps: &[BTreeSet<DialogAct>]) -> Result<f64> {
    let c = counts(refs, hyps)?;
    let sum = |k: usize| c.iter().map(|x| x[k]).sum::<usize>();
    Ok(f1(sum(0), sum(1), sum(2)))
}

/// Macro average over acts that occur in either references or hypotheses.
pub fn dialog_act_f1_macro(refs: &[BTreeSet<DialogAct>], hyps: &[BTreeSet<DialogAct>]) -> Result<f64> {
    let c = counts(refs, hyps)?;
    let used: Vec<f64> = c
        .iter()
        .filter(|x| x.iter().any(|&v| v > 0))
        .map(|x| f1(x[0], x[1], x[2]))
        .collect();
    if used.is_empty() {
        return Ok(1.0);
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rollup {
    Utterance,
    Conversation,
}

/// Exact-match accuracy. A missing prediction counts as wrong. Conversation
/// mode needs the conversation id of every utterance and scores a majority
/// vote per conversation, ties going to the earlier intent in label order.
pub fn intent_accuracy(
    refs: &[Intent],
    hyps: &[Option<Intent>],
    conversations: Option<&[String]>,
    rollup: Rollup,
) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Alignment(format!("{} references vs {} hypotheses", refs.len(), hyps.len())));
    }
    if refs.is_empty() {
        return Err(Error::UndefinedRate("no utterances to score".into()));
    }
    match rollup {
        Rollup::Utterance => {
            let ok = refs.iter().zip(hyps).filter(|(r, h)| Some(**r) == **h).count();
            Ok(ok as f64 / refs.len() as f64)
        }
        Rollup::Conversation => {
            let ids = conversations
                .ok_or_else(|| Error::Contract("conversation roll-up needs conversation ids".into()))?;
            if ids.len() != refs.len() {
                return Err(Error::Alignment("conversation ids not aligned with utterances".into()));
            }
            let mut groups: BTreeMap<&str, (Intent, [usize; 8])> = BTreeMap::new();
            for ((id, r), h) in ids.iter().zip(refs).zip(hyps) {
                let entry = groups.entry(id.as_str()).or_insert((*r, [0; 8]));
                if entry.0 != *r {
                    return Err(Error::Consistency(format!("conversation {id} has mixed reference intents")));
                }
                if let Some(h) = h {
                    entry.1[h.index()] += 1;
                }
            }
            let ok = groups
                .values()
                .filter(|(r, votes)| {
                    let max = *votes.iter().max().unwrap();
                    max > 0 && votes.iter().position(|&v| v == max) == Some(r.index())
                })
                .count();
            Ok(ok as f64 / groups.len() as f64)
        }
    }
}

/// One evaluated system, destined for one row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Table this row belongs to: `context-intent`, `context-dialog-act`,
    /// `intent` or `dialog-act`.
    pub table: String,
    /// Row id such as `C4` or `D1`.
    pub row: String,
    /// Human-readable input-feature description.
    pub description: String,
    /// Train/test history regime, e.g. `REF/DEC`; empty for baselines.
    pub regime: String,
    pub metric_name: String,
    /// Fraction in [0, 1].
    pub metric: f64,
    #[serde(default)]
    pub wer: Option<f64>,
    #[serde(default)]
    pub per_conversation: BTreeMap<String, f64>,
    pub corpus_fingerprint: String,
    #[serde(default)]
    pub checkpoints: Vec<String>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn fingerprint_of(corpus: &str, checkpoints: &[String]) -> String {
        let mut h = Sha256::new();
        h.update(corpus.as_bytes());
        for c in checkpoints {
            h.update([0]);
            h.update(c.as_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn row_key(row: &str) -> (String, u32) {
    let split = row.find(|c: char| c.is_ascii_digit()).unwrap_or(row.len());
    (row[..split].to_string(), row[split..].parse().unwrap_or(0))
}

fn table_title(table: &str) -> &str {
    match table {
        "context-intent" => "Context encoder, intent classification",
        "context-dialog-act" => "Context encoder, dialog-act classification",
        "intent" => "Transducer SLU, intent recognition",
        "dialog-act" => "Transducer SLU, dialog-act recognition",
        other => other,
    }
}

/// Renders one text table and one CSV per table kind under `dir`.
/// Returns the written paths.
pub fn emit_tables(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Consistency("no reports to tabulate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.corpus_fingerprint != first.corpus_fingerprint) {
        return Err(Error::Consistency(format!(
            "row {} was evaluated on a different corpus ({} vs {})",
            r.row, r.corpus_fingerprint, first.corpus_fingerprint
        )));
    }
    let mut tables: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        tables.entry(r.table.as_str()).or_default().push(r);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, mut rows) in tables {
        rows.sort_by_key(|r| row_key(&r.row));
        let desc_w = rows.iter().map(|r| r.description.len()).max().unwrap_or(0).max(14);
        let metric = &rows[0].metric_name;
        let mut text = String::new();
        writeln!(text, "{}", table_title(name)).unwrap();
        writeln!(text, "{:<5} {:<desc_w$} {:<8} {:>8} {:>7}", "row", "input features", "regime", metric, "WER").unwrap();
        let mut csv = String::from("row,description,regime,metric_name,metric,wer,fingerprint\n");
        for r in &rows {
            let wer = r.wer.map(|w| format!("{:.1}", 100.0 * w)).unwrap_or_else(|| "-".into());
            writeln!(
                text,
                "{:<5} {:<desc_w$} {:<8} {:>8.1} {:>7}",
                format!("[{}]", r.row),
                r.description,
                if r.regime.is_empty() { "-" } else { &r.regime },
                100.0 * r.metric,
                wer
            )
            .unwrap();
            writeln!(
                csv,
                "{},\"{}\",{},{},{:.6},{},{}",
                r.row,
                r.description,
                r.regime,
                r.metric_name,
                r.metric,
                r.wer.map(|w| format!("{w:.6}")).unwrap_or_default(),
                r.fingerprint
            )
            .unwrap();
        }
        for (ext, body) in [("txt", text), ("csv", csv)] {
            let path = dir.join(format!("{name}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(acts: &[DialogAct]) -> BTreeSet<DialogAct> {
        acts.iter().copied().collect()
    }

    /// Full-table recursive definition, no row rolling.
    fn naive_distance(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            for j in 0..=b.len() {
                d[i][j] = if i == 0 {
                    j
                } else if j == 0 {
                    i
                } else {
                    (d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]))
                        .min(d[i - 1][j] + 1)
                        .min(d[i][j - 1] + 1)
                };
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer_str("pay my bill", "pay my bill").unwrap(), 0.0);
        assert!((wer_str("pay my bill", "pay bill").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(wer_str("", "x"), Err(Error::UndefinedRate(_))));
        assert_eq!(wer_str("a", "b c d").unwrap(), 3.0);
    }

    proptest! {
        #[test]
        fn wer_matches_oracle(a in prop::collection::vec(0u8..4, 1..9), b in prop::collection::vec(0u8..4, 0..9)) {
            let words = |v: &[u8]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            let (wa, wb) = (words(&a), words(&b));
            let expected = naive_distance(&a, &b) as f64 / a.len() as f64;
            prop_assert_eq!(wer(&wa, &wb).unwrap(), expected);
            if !b.is_empty() {
                let lhs = wer(&wa, &wb).unwrap() * a.len() as f64;
                let rhs = wer(&wb, &wa).unwrap() * b.len() as f64;
                prop_assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn f1_is_one_iff_equal(r in prop::collection::vec(prop::collection::btree_set(0usize..16, 0..4), 1..6),
                               h in prop::collection::vec(prop::collection::btree_set(0usize..16, 0..4), 1..6)) {
            let conv = |v: &[BTreeSet<usize>]| v.iter().map(|s| s.iter().map(|&i| DialogAct::ALL[i]).collect()).collect::<Vec<BTreeSet<_>>>();
            let n = r.len().min(h.len());
            let (r, h) = (conv(&r[..n]), conv(&h[..n]));
            let f = dialog_act_f1(&r, &h).unwrap();
            prop_assert_eq!(f == 1.0, r == h);
            let mut rr = r.clone();
            let mut hh = h.clone();
            rr.reverse();
            hh.reverse();
            prop_assert_eq!(dialog_act_f1(&rr, &hh).unwrap(), f);
        }
    }

    #[test]
    fn f1_examples() {
        use DialogAct::*;
        let r = vec![set(&[Greeting, Response])];
        assert!((dialog_act_f1(&r, &[set(&[Greeting])]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dialog_act_f1(&r, &r).unwrap(), 1.0);
        assert_eq!(dialog_act_f1(&r, &[set(&[])]).unwrap(), 0.0);
        assert!(matches!(dialog_act_f1(&r, &[]), Err(Error::Alignment(_))));
        let m = dialog_act_f1_macro(&r, &[set(&[Greeting])]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn intent_examples() {
        use Intent::*;
        assert_eq!(intent_accuracy(&[PayBill; 3], &[Some(PayBill); 3], None, Rollup::Utterance).unwrap(), 1.0);
        let acc = intent_accuracy(
            &[PayBill; 4],
            &[Some(PayBill), Some(PayBill), None, Some(PayBill)],
            None,
            Rollup::Utterance,
        )
        .unwrap();
        assert_eq!(acc, 0.75);
        let ids: Vec<String> = vec!["c".into(); 3];
        let acc = intent_accuracy(
            &[PayBill; 3],
            &[Some(PayBill), Some(PayBill), Some(TransferMoney)],
            Some(&ids),
            Rollup::Conversation,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
        // Tie between check_balance and pay_bill goes to check_balance.
        let acc = intent_accuracy(
            &[PayBill; 2],
            &[Some(PayBill), Some(CheckBalance)],
            Some(&ids[..2]),
            Rollup::Conversation,
        )
        .unwrap();
        assert_eq!(acc, 0.0);
    }

    fn report(table: &str, row: &str, corpus: &str) -> EvalReport {
        EvalReport {
            table: table.into(),
            row: row.into(),
            description: "current utterance".into(),
            regime: String::new(),
            metric_name: "accuracy".into(),
            metric: 0.5,
            wer: Some(0.1),
            per_conversation: BTreeMap::new(),
            corpus_fingerprint: corpus.into(),
            checkpoints: vec![],
            fingerprint: EvalReport::fingerprint_of(corpus, &[]),
        }
    }

    #[test]
    fn tables_ordered_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let rows = ["C10", "C2", "C1", "C9"].map(|r| report("dialog-act", r, "x"));
        let paths = emit_tables(&rows, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let text = std::fs::read_to_string(dir.path().join("dialog-act.txt")).unwrap();
        let order: Vec<usize> = ["[C1]", "[C2]", "[C9]", "[C10]"].iter().map(|r| text.find(r).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));

        let empty = tempfile::tempdir().unwrap();
        let out = empty.path().join("tables");
        assert!(matches!(emit_tables(&[], &out), Err(Error::Consistency(_))));
        assert!(!out.exists());
        let mixed = [report("intent", "D1", "x"), report("intent", "D2", "y")];
        assert!(matches!(emit_tables(&mixed, &out), Err(Error::Consistency(_))));
        assert!(!out.exists());
    }
}
