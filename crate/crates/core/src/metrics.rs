//! Classification and sentence-answer metrics.
//!
//! Sentences are compared as whitespace-split token lists; callers normalise
//! text beforehand. METEOR here is exact-match only (no stemming or synonym
//! stages) and is labelled `meteor_exact` in reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            _ => Err(Error::Config(format!("unknown averaging `{s}` (macro|weighted)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn fscore(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub fscore: f64,
    pub averaging: Averaging,
    pub per_class: Vec<ClassCounts>,
}

/// Accuracy plus recall / precision / F averaged over the classes present
/// in `labels`. `class_names` supplies one name per class index.
pub fn classification_report(
    preds: &[usize],
    labels: &[usize],
    class_names: &[String],
    averaging: Averaging,
) -> Result<ClassificationReport> {
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("classification report over an empty set".into()));
    }
    let k = class_names.len();
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Metric(format!("class index {bad} outside a universe of {k}")));
    }
    let mut per_class: Vec<ClassCounts> = class_names
        .iter()
        .map(|l| ClassCounts {
            label: l.clone(),
            ..Default::default()
        })
        .collect();
    let mut correct = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            correct += 1;
            per_class[y].tp += 1;
        } else {
            per_class[p].fp += 1;
            per_class[y].fn_ += 1;
        }
    }
    let present: Vec<&ClassCounts> = per_class.iter().filter(|c| c.support() > 0).collect();
    let weight = |c: &ClassCounts| match averaging {
        Averaging::Macro => 1.0,
        Averaging::Weighted => c.support() as f64,
    };
    let total: f64 = present.iter().map(|c| weight(c)).sum();
    let avg = |f: &dyn Fn(&ClassCounts) -> f64| present.iter().map(|c| weight(c) * f(c)).sum::<f64>() / total;
    Ok(ClassificationReport {
        accuracy: correct as f64 / labels.len() as f64,
        recall: avg(&|c| c.recall()),
        precision: avg(&|c| c.precision()),
        fscore: avg(&|c| c.fscore()),
        averaging,
        per_class,
    })
}

pub fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut out = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    Ok(())
}

/// Clipped n-gram matches and candidate n-gram totals pooled over the corpus.
pub fn bleu_precisions<S: AsRef<str>>(candidates: &[S], references: &[S], max_n: usize) -> Result<Vec<(usize, usize)>> {
    check_corpus(candidates, references)?;
    let mut out = vec![(0, 0); max_n];
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (tokens(c.as_ref()), tokens(r.as_ref()));
        for (n, slot) in out.iter_mut().enumerate() {
            let rc = ngram_counts(&r, n + 1);
            for (g, k) in ngram_counts(&c, n + 1) {
                slot.0 += k.min(rc.get(&g).copied().unwrap_or(0));
                slot.1 += k;
            }
        }
    }
    Ok(out)
}

/// Corpus BLEU-1..BLEU-`max_n` without smoothing.
pub fn bleu<S: AsRef<str>>(candidates: &[S], references: &[S], max_n: usize) -> Result<Vec<f64>> {
    bleu_with(candidates, references, max_n, false)
}

/// Corpus BLEU. With `smoothing`, orders above 1 use add-one counts.
pub fn bleu_with<S: AsRef<str>>(candidates: &[S], references: &[S], max_n: usize, smoothing: bool) -> Result<Vec<f64>> {
    if max_n == 0 {
        return Err(Error::Metric("max_n must be at least 1".into()));
    }
    let prec = bleu_precisions(candidates, references, max_n)?;
    let c: usize = candidates.iter().map(|s| tokens(s.as_ref()).len()).sum();
    let r: usize = references.iter().map(|s| tokens(s.as_ref()).len()).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut zero = false;
    let mut out = Vec::with_capacity(max_n);
    for (n, &(m, t)) in prec.iter().enumerate() {
        let (m, t) = if smoothing && n > 0 { (m + 1, t + 1) } else { (m, t) };
        if m == 0 || t == 0 {
            zero = true;
        } else {
            log_sum += (m as f64 / t as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

/// CIDEr-D with one reference per candidate: TF-IDF vectors for n = 1..4,
/// candidate weights clipped to the reference's, Gaussian length penalty,
/// averaged over n and scaled by 10.
pub fn cider<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    check_corpus(candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::Metric("CIDEr needs at least 2 pairs: IDF undefined for a corpus of 1".into()));
    }
    let refs: Vec<Vec<&str>> = references.iter().map(|s| tokens(s.as_ref())).collect();
    let cands: Vec<Vec<&str>> = candidates.iter().map(|s| tokens(s.as_ref())).collect();
    let log_n = (refs.len() as f64).ln();
    let mut total = 0.0;
    for n in 1..=4 {
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: BTreeMap<&Vec<&str>, usize> = BTreeMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        fn tf_idf<'a>(
            counts: &BTreeMap<Vec<&'a str>, usize>,
            df: &BTreeMap<&Vec<&'a str>, usize>,
            log_n: f64,
        ) -> BTreeMap<Vec<&'a str>, f64> {
            counts
                .iter()
                .map(|(g, &k)| {
                    let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g.clone(), k as f64 * (log_n - d.ln()))
                })
                .collect()
        }
        for (i, c) in cands.iter().enumerate() {
            let cand_counts = ngram_counts(c, n);
            let vc = tf_idf(&cand_counts, &df, log_n);
            let vr = tf_idf(&ref_counts[i], &df, log_n);
            let norm = |v: &BTreeMap<Vec<&str>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            let mut dot = 0.0;
            for (g, &w) in &vc {
                if let Some(&wr) = vr.get(g) {
                    dot += w.min(wr) * wr;
                }
            }
            let sim = if nc != 0.0 && nr != 0.0 { dot / (nc * nr) } else { 0.0 };
            let delta = c.len() as f64 - refs[i].len() as f64;
            total += sim * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        }
    }
    Ok(CIDER_SCALE * total / (4.0 * cands.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Exact-match alignment: the largest possible number of matched unigrams,
/// then the fewest chunks among such alignments (exhaustive search).
pub fn align(candidate: &[&str], reference: &[&str]) -> Alignment {
    let mut need: BTreeMap<&str, usize> = BTreeMap::new();
    {
        let mut cc: BTreeMap<&str, usize> = BTreeMap::new();
        let mut rc: BTreeMap<&str, usize> = BTreeMap::new();
        candidate.iter().for_each(|w| *cc.entry(w).or_insert(0) += 1);
        reference.iter().for_each(|w| *rc.entry(w).or_insert(0) += 1);
        for (w, &k) in &cc {
            let m = k.min(rc.get(w).copied().unwrap_or(0));
            if m > 0 {
                need.insert(w, m);
            }
        }
    }
    let matches: usize = need.values().sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    // Occurrences of each word at or after position i.
    let mut remaining: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); candidate.len() + 1];
    for i in (0..candidate.len()).rev() {
        remaining[i] = remaining[i + 1].clone();
        *remaining[i].entry(candidate[i]).or_insert(0) += 1;
    }

    struct Search<'a, 'b> {
        cand: &'b [&'a str],
        refr: &'b [&'a str],
        remaining: Vec<BTreeMap<&'a str, usize>>,
        used: Vec<bool>,
        need: BTreeMap<&'a str, usize>,
        best: usize,
    }

    impl Search<'_, '_> {
        fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
            if chunks >= self.best {
                return;
            }
            if i == self.cand.len() {
                self.best = chunks;
                return;
            }
            let w = self.cand[i];
            let need = self.need.get(w).copied().unwrap_or(0);
            if need > 0 {
                // Try the continuing position first so good bounds come early.
                let mut order: Vec<usize> = (0..self.refr.len()).filter(|&j| self.refr[j] == w && !self.used[j]).collect();
                if let Some(p) = prev {
                    if let Some(k) = order.iter().position(|&j| j == p + 1) {
                        order.swap(0, k);
                    }
                }
                for j in order {
                    let cont = prev.is_some_and(|p| p + 1 == j);
                    self.used[j] = true;
                    *self.need.get_mut(w).unwrap() -= 1;
                    self.run(i + 1, Some(j), chunks + usize::from(!cont));
                    *self.need.get_mut(w).unwrap() += 1;
                    self.used[j] = false;
                }
            }
            // Skipping is allowed only if later occurrences can still fill the quota.
            if self.remaining[i + 1].get(w).copied().unwrap_or(0) >= need {
                self.run(i + 1, None, chunks);
            }
        }
    }

    let mut s = Search {
        cand: candidate,
        refr: reference,
        remaining,
        used: vec![false; reference.len()],
        need,
        best: usize::MAX,
    };
    s.run(0, None, 0);
    Alignment { matches, chunks: s.best }
}

pub fn meteor_sentence(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    let a = align(&c, &r);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / c.len() as f64;
    let rc = m / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    f * (1.0 - penalty)
}

/// Corpus mean of exact-match METEOR.
pub fn meteor<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_sentence(c.as_ref(), r.as_ref()))
        .sum();
    Ok(sum / candidates.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    /// CIDEr-D; `None` when the corpus has a single pair.
    pub cider: Option<f64>,
    pub meteor_exact: f64,
}

pub fn corpus_scores<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<CorpusScores> {
    let b = bleu(candidates, references, 4)?;
    let cider = if candidates.len() >= 2 {
        Some(cider(candidates, references)?)
    } else {
        None
    };
    Ok(CorpusScores {
        bleu_1: b[0],
        bleu_2: b[1],
        bleu_3: b[2],
        bleu_4: b[3],
        cider,
        meteor_exact: meteor(candidates, references)?,
    })
}

/// Scores plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: serde_json::Map<String, serde_json::Value>,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classification: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sentence: Option<CorpusScores>,
}

impl MetricReport {
    /// Flat `(column, value)` pairs: config echo first, then scores.
    pub fn csv_fields(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .config
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect();
        out.push(("samples".into(), self.samples.to_string()));
        if let Some(c) = &self.classification {
            out.push(("accuracy".into(), format!("{:.6}", c.accuracy)));
            out.push(("recall".into(), format!("{:.6}", c.recall)));
            out.push(("fscore".into(), format!("{:.6}", c.fscore)));
        }
        if let Some(s) = &self.sentence {
            for (k, v) in [("bleu_1", s.bleu_1), ("bleu_2", s.bleu_2), ("bleu_3", s.bleu_3), ("bleu_4", s.bleu_4)] {
                out.push((k.into(), format!("{v:.6}")));
            }
            out.push(("cider".into(), s.cider.map_or(String::new(), |v| format!("{v:.6}"))));
            out.push(("meteor_exact".into(), format!("{:.6}", s.meteor_exact)));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &[self.csv_fields()])
    }
}

/// Writes rows sharing the first row's columns.
pub fn write_csv_rows(path: &Path, rows: &[Vec<(String, String)>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(first) = rows.first() {
        w.write_record(first.iter().map(|(k, _)| k)).map_err(|e| Error::format(path, e.to_string()))?;
    }
    for row in rows {
        w.write_record(row.iter().map(|(_, v)| v)).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let r = classification_report(&[0, 1, 2, 1], &[0, 1, 2, 1], &names(4), Averaging::Macro).unwrap();
        assert_eq!((r.accuracy, r.recall, r.fscore), (1.0, 1.0, 1.0));
    }

    #[test]
    fn binary_hand_confusion() {
        // labels [a,a,b,b], preds [a,b,b,b]
        let r = classification_report(&[0, 1, 1, 1], &[0, 0, 1, 1], &names(2), Averaging::Macro).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.recall, 0.75);
        // a: P 1, R .5, F 2/3; b: P 2/3, R 1, F .8
        assert!((r.fscore - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        let w = classification_report(&[0, 1, 1, 1, 1], &[0, 0, 1, 1, 1], &names(2), Averaging::Weighted).unwrap();
        assert!((w.recall - (2.0 * 0.5 + 3.0 * 1.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_do_not_dilute_macro() {
        let r = classification_report(&[0, 0], &[0, 0], &names(26), Averaging::Macro).unwrap();
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn classification_errors() {
        assert!(classification_report(&[], &[], &names(2), Averaging::Macro).is_err());
        assert!(classification_report(&[0], &[0, 1], &names(2), Averaging::Macro).is_err());
        assert!(classification_report(&[5], &[0], &names(2), Averaging::Macro).is_err());
    }

    #[test]
    fn bleu_examples() {
        let same = ["the grasper is grasping the kidney", "the organ being operated is kidney"];
        assert_eq!(bleu(&same, &same, 4).unwrap()[3], 1.0);
        let b = bleu(&["the cat sat"], &["the cat sat down"], 4).unwrap();
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        assert!((b[2] - bp).abs() < 1e-12);
        assert!((b[2] - 0.7165).abs() < 1e-4);
        assert_eq!(b[3], 0.0);
        assert_eq!(bleu(&["a b c d"], &["d c b a"], 4).unwrap()[3], 0.0);
        assert!(bleu::<&str>(&[], &[], 4).is_err());
        assert!(bleu_with(&["a b c"], &["a x c"], 2, true).unwrap()[1] > 0.0);
    }

    /// Cumulative corpus BLEU can rise with n: pooled bigram precision
    /// excludes candidates too short to have bigrams.
    #[test]
    fn corpus_bleu_can_increase_with_order() {
        let b = bleu(&["a b c d", "x"], &["a b c d", "q"], 2).unwrap();
        assert!((b[0] - 0.8).abs() < 1e-12);
        assert!(b[1] > b[0]);
    }

    #[test]
    fn cider_examples() {
        let c = cider(&["a b c d", "e f g h i"], &["a b c d", "e f g h i"]).unwrap();
        assert!((c - 10.0).abs() < 1e-9, "{c}");
        let z = cider(&["x y", "e f g h i"], &["a b c d", "e f g h i"]).unwrap();
        assert!((cider(&["a b c", "d e f g"], &["a b c", "d e f g"]).unwrap() - 8.75).abs() < 1e-9);
        assert!((z - 5.0).abs() < 1e-9, "{z}");
        let err = cider(&["a"], &["a"]).unwrap_err().to_string();
        assert!(err.contains("IDF undefined"));
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&["a b c d"], &["a b c d"]).unwrap(), 0.9921875);
        assert_eq!(meteor(&["a b"], &["c d"]).unwrap(), 0.0);
        let perm = meteor(&["d c b a"], &["a b c d"]).unwrap();
        assert!(perm < 0.9921875);
        assert_eq!(align(&["a", "b", "a", "b"], &["b", "a", "b"]), Alignment { matches: 3, chunks: 1 });
    }

    #[test]
    fn report_csv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = serde_json::Map::new();
        config.insert("variant".into(), "resmlp".into());
        let report = MetricReport {
            config,
            samples: 2,
            classification: None,
            sentence: Some(corpus_scores(&["a b", "c d"], &["a b", "c e"]).unwrap()),
        };
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        report.write_json(&dir.path().join("r.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,samples,bleu_1,bleu_2,bleu_3,bleu_4,cider,meteor_exact");
        assert!(lines.next().unwrap().starts_with("resmlp,2,0.75"));
        let back: MetricReport = crate::data::read_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(back, report);
    }

    // Brute-force references written without shared helpers.

    fn grams(s: &str, n: usize) -> Vec<String> {
        let w: Vec<&str> = s.split(' ').filter(|x| !x.is_empty()).collect();
        if w.len() < n {
            return vec![];
        }
        (0..=w.len() - n).map(|i| w[i..i + n].join(" ")).collect()
    }

    fn oracle_bleu(c: &[String], r: &[String], n_max: usize) -> Vec<f64> {
        let mut m = vec![0usize; n_max];
        let mut t = vec![0usize; n_max];
        for (a, b) in c.iter().zip(r) {
            for n in 1..=n_max {
                let ga = grams(a, n);
                let mut gb = grams(b, n);
                t[n - 1] += ga.len();
                for g in &ga {
                    if let Some(k) = gb.iter().position(|x| x == g) {
                        gb.remove(k);
                        m[n - 1] += 1;
                    }
                }
            }
        }
        let cl: usize = c.iter().map(|s| grams(s, 1).len()).sum();
        let rl: usize = r.iter().map(|s| grams(s, 1).len()).sum();
        let bp = if cl == 0 { 0.0 } else if cl > rl { 1.0 } else { (1.0 - rl as f64 / cl as f64).exp() };
        (1..=n_max)
            .map(|n| {
                if (0..n).any(|k| m[k] == 0) {
                    0.0
                } else {
                    let g: f64 = (0..n).map(|k| m[k] as f64 / t[k] as f64).product();
                    bp * g.powf(1.0 / n as f64)
                }
            })
            .collect()
    }

    /// All partial injective maps from candidate to reference positions over
    /// equal words.
    fn oracle_align(c: &[&str], r: &[&str]) -> (usize, usize) {
        let mut best = (0usize, usize::MAX);
        let mut map: Vec<Option<usize>> = vec![None; c.len()];
        fn rec(i: usize, c: &[&str], r: &[&str], map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
            if i == c.len() {
                let m = map.iter().flatten().count();
                let mut ch = 0;
                for k in 0..c.len() {
                    if let Some(j) = map[k] {
                        let cont = k > 0 && j > 0 && map[k - 1] == Some(j - 1);
                        if !cont {
                            ch += 1;
                        }
                    }
                }
                if m > best.0 || (m == best.0 && ch < best.1) {
                    *best = (m, ch);
                }
                return;
            }
            rec(i + 1, c, r, map, best);
            for j in 0..r.len() {
                if r[j] == c[i] && !map.contains(&Some(j)) {
                    map[i] = Some(j);
                    rec(i + 1, c, r, map, best);
                    map[i] = None;
                }
            }
        }
        rec(0, c, r, &mut map, &mut best);
        if best.0 == 0 {
            (0, 0)
        } else {
            best
        }
    }

    fn oracle_cider(c: &[String], r: &[String]) -> f64 {
        let big_n = r.len() as f64;
        let mut score = 0.0;
        for n in 1..=4 {
            let df = |g: &String| r.iter().filter(|s| grams(s, n).contains(g)).count() as f64;
            let vec_of = |s: &String| -> Vec<(String, f64)> {
                let mut gs = grams(s, n);
                gs.sort();
                gs.dedup();
                gs.iter()
                    .map(|g| {
                        let tf = grams(s, n).iter().filter(|x| *x == g).count() as f64;
                        (g.clone(), tf * (big_n.ln() - df(g).max(1.0).ln()))
                    })
                    .collect()
            };
            for (a, b) in c.iter().zip(r) {
                let va = vec_of(a);
                let vb = vec_of(b);
                let na = va.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
                let nb = vb.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
                let mut dot = 0.0;
                for (g, w) in &va {
                    for (h, v) in &vb {
                        if g == h {
                            dot += w.min(*v) * v;
                        }
                    }
                }
                let cos = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
                let d = grams(a, 1).len() as f64 - grams(b, 1).len() as f64;
                score += cos * (-d * d / 72.0).exp();
            }
        }
        10.0 * score / (4.0 * c.len() as f64)
    }

    fn random_corpus(rng: &mut Rng, size: usize) -> (Vec<String>, Vec<String>) {
        let words = ["a", "b", "c", "d"];
        let sent = |rng: &mut Rng| -> String {
            let len = 1 + rng.below(6);
            (0..len).map(|_| words[rng.below(words.len())]).collect::<Vec<_>>().join(" ")
        };
        let c = (0..size).map(|_| sent(rng)).collect();
        let r = (0..size).map(|_| sent(rng)).collect();
        (c, r)
    }

    #[test]
    fn metrics_match_brute_force_on_random_corpora() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let size = 2 + rng.below(4);
            let (c, r) = random_corpus(&mut rng, size);
            let got = bleu(&c, &r, 4).unwrap();
            let want = oracle_bleu(&c, &r, 4);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{c:?} {r:?}: {got:?} vs {want:?}");
            }
            let cd = cider(&c, &r).unwrap();
            assert!((cd - oracle_cider(&c, &r)).abs() < 1e-9);
            let mut sum = 0.0;
            for (a, b) in c.iter().zip(&r) {
                let (ta, tb) = (tokens(a), tokens(b));
                let (m, ch) = oracle_align(&ta, &tb);
                let got = align(&ta, &tb);
                assert_eq!((got.matches, got.chunks), (m, ch), "{a} / {b}");
                if m > 0 {
                    let (p, rc) = (m as f64 / ta.len() as f64, m as f64 / tb.len() as f64);
                    sum += 10.0 * p * rc / (rc + 9.0 * p) * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3));
                }
            }
            assert!((meteor(&c, &r).unwrap() - sum / c.len() as f64).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_pure(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let (c, r) = random_corpus(&mut rng, 3);
            let a = corpus_scores(&c, &r).unwrap();
            let b = corpus_scores(&c, &r).unwrap();
            prop_assert_eq!(&a, &b);
            for v in [a.bleu_1, a.bleu_2, a.bleu_3, a.bleu_4, a.meteor_exact] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(a.cider.unwrap() >= 0.0);
        }

        #[test]
        fn cider_is_order_invariant(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let (mut c, mut r) = random_corpus(&mut rng, 4);
            let a = cider(&c, &r).unwrap();
            c.reverse();
            r.reverse();
            prop_assert!((a - cider(&c, &r).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_mean_indicator_and_macro_f_bounded(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..40)
        ) {
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = classification_report(&p, &y, &names(5), Averaging::Macro).unwrap();
            let mean = p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
            prop_assert_eq!(r.accuracy, mean);
            let max_f = r.per_class.iter().map(|c| c.fscore()).fold(0.0, f64::max);
            prop_assert!(r.fscore <= max_f + 1e-12);
        }
    }
}
