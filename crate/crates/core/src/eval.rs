//! Trials, score files and detection metrics (EER, minDCF, DET points).
//!
//! Convention: a trial is accepted when `score >= threshold`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backend::{average_embeddings, cosine_score, PldaModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
            Label::Unknown => "unknown",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            "unknown" => Ok(Label::Unknown),
            _ => Err(Error::invalid(format!("unknown trial label '{s}'"))),
        }
    }
}

/// Up to 4 arrays × 4 channels per trial.
pub const MAX_TEST_IDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_ids: Vec<String>,
    pub label: Label,
}

impl Trial {
    pub fn test_list(&self) -> String {
        self.test_ids.join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub enroll_id: String,
    pub test_ids: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
    pub points: Vec<DetPoint>,
}

impl DetMetrics {
    /// `eer=<percent, 2 dp> minDCF=<3 dp> threshold=<6 dp>`
    pub fn report(&self) -> String {
        format!(
            "eer={:.2} minDCF={:.3} threshold={:.6}",
            self.eer * 100.0,
            self.min_dcf,
            self.dcf_threshold
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid("p_target must lie in (0, 1)"));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::invalid("detection costs must be positive"));
        }
        Ok(())
    }

    /// Cost normalized by the best accept-all / reject-all system.
    pub fn normalized(&self, p_miss: f64, p_fa: f64) -> f64 {
        let raw = self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa;
        raw / (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// `(threshold, p_miss, p_fa)` at every distinct score and at +∞, with
/// thresholds ascending.
pub fn det_points(scores: &[(f64, bool)]) -> Result<Vec<DetPoint>> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let n_t = scores.iter().filter(|(_, t)| *t).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::MissingClass);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut t_below, mut n_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        points.push(DetPoint {
            threshold: v,
            p_miss: t_below as f64 / n_t as f64,
            p_fa: (n_n - n_below) as f64 / n_n as f64,
        });
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                t_below += 1;
            } else {
                n_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

fn eer_from_points(points: &[DetPoint]) -> f64 {
    let j = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the +inf point has p_miss >= p_fa");
    let (m1, f1) = (points[j].p_miss, points[j].p_fa);
    if m1 == f1 || j == 0 {
        return m1;
    }
    let (m0, f0) = (points[j - 1].p_miss, points[j - 1].p_fa);
    let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
    m0 + t * (m1 - m0)
}

/// Equal error rate, linearly interpolated between adjacent ROC vertices.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<f64> {
    Ok(eer_from_points(&det_points(scores)?))
}

fn min_dcf_from_points(points: &[DetPoint], p: &DcfParams) -> (f64, f64) {
    // -inf accepts everything: same operating point as the lowest score.
    let mut best = (p.normalized(0.0, 1.0), f64::NEG_INFINITY);
    for pt in points {
        let c = p.normalized(pt.p_miss, pt.p_fa);
        if c < best.0 {
            best = (c, pt.threshold);
        }
    }
    best
}

/// Minimum normalized detection cost and its (lowest) threshold.
pub fn compute_min_dcf(scores: &[(f64, bool)], params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    Ok(min_dcf_from_points(&det_points(scores)?, params))
}

pub fn compute_metrics(scores: &[(f64, bool)], params: &DcfParams) -> Result<DetMetrics> {
    params.validate()?;
    let points = det_points(scores)?;
    let eer = eer_from_points(&points);
    let (min_dcf, dcf_threshold) = min_dcf_from_points(&points, params);
    Ok(DetMetrics {
        eer,
        min_dcf,
        dcf_threshold,
        points,
    })
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn split_ids(field: &str, line: usize) -> Result<Vec<String>> {
    let ids: Vec<String> = field.split(',').map(|s| s.trim().to_string()).collect();
    if ids.iter().any(|s| s.is_empty()) {
        return Err(parse_err(line, "empty test id"));
    }
    if ids.len() > MAX_TEST_IDS {
        return Err(parse_err(
            line,
            format!("{} test ids, at most {MAX_TEST_IDS} allowed", ids.len()),
        ));
    }
    Ok(ids)
}

/// Parses `enroll<TAB>test[,test...]<TAB>label` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let enroll = fields[0].trim();
        if enroll.is_empty() {
            return Err(parse_err(line, "empty enrollment id"));
        }
        let test_ids = split_ids(fields[1], line)?;
        let label: Label = fields[2]
            .trim()
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        if !seen.insert((enroll.to_string(), test_ids.clone())) {
            return Err(parse_err(
                line,
                format!("duplicate trial {enroll} / {}", test_ids.join(",")),
            ));
        }
        out.push(Trial {
            enroll_id: enroll.to_string(),
            test_ids,
            label,
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.enroll_id, t.test_list(), t.label))
        .collect()
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    parse_trials(&fs::read_to_string(path)?)
}

pub fn format_scores(scores: &[ScoreRecord]) -> String {
    scores
        .iter()
        .map(|s| format!("{}\t{}\t{:.6}\n", s.enroll_id, s.test_ids.join(","), s.score))
        .collect()
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[ScoreRecord]) -> Result<()> {
    fs::write(path, format_scores(scores))?;
    Ok(())
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let test_ids = split_ids(fields[1], line)?;
        let score: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad score '{}'", fields[2])))?;
        if !score.is_finite() {
            return Err(parse_err(line, "score is not finite"));
        }
        let enroll = fields[0].trim().to_string();
        if !seen.insert((enroll.clone(), test_ids.clone())) {
            return Err(parse_err(line, "duplicate score entry"));
        }
        out.push(ScoreRecord {
            enroll_id: enroll,
            test_ids,
            score,
        });
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    parse_scores(&fs::read_to_string(path)?)
}

/// Pairs labelled trials with their scores; unknown-label trials are dropped.
pub fn labeled_scores(trials: &[Trial], scores: &[ScoreRecord]) -> Result<Vec<(f64, bool)>> {
    let index: HashMap<(&str, &[String]), f64> = scores
        .iter()
        .map(|s| ((s.enroll_id.as_str(), s.test_ids.as_slice()), s.score))
        .collect();
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for t in trials.iter().filter(|t| t.label != Label::Unknown) {
        match index.get(&(t.enroll_id.as_str(), t.test_ids.as_slice())) {
            Some(&s) => out.push((s, t.label == Label::Target)),
            None => missing.push(format!("{} {}", t.enroll_id, t.test_list())),
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "no score for {} trial(s), first: {}",
            missing.len(),
            missing[0]
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Average every channel of every listed test item.
    Multi,
    /// Use one channel index of each listed test item.
    Single(usize),
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "multi" {
            return Ok(Fusion::Multi);
        }
        if let Some(k) = s.strip_prefix("single=") {
            return k
                .parse()
                .map(Fusion::Single)
                .map_err(|_| Error::invalid(format!("bad channel index in '{s}'")));
        }
        Err(Error::invalid(format!(
            "fusion must be 'multi' or 'single=<k>', got '{s}'"
        )))
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Multi => f.write_str("multi"),
            Fusion::Single(k) => write!(f, "single={k}"),
        }
    }
}

pub enum Scorer<'a> {
    Cosine,
    Plda(&'a PldaModel),
}

impl Scorer<'_> {
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        match self {
            Scorer::Cosine => cosine_score(enroll, test),
            Scorer::Plda(m) => m.score(enroll, test),
        }
    }
}

/// Id of channel `k` of a multichannel item.
pub fn channel_id(item: &str, k: usize) -> String {
    format!("{item}/ch{k}")
}

/// Embedding lookup that understands `<item>/ch<k>` channel ids.
pub struct EmbeddingIndex<'a> {
    direct: HashMap<&'a str, &'a [f64]>,
    channels: HashMap<&'a str, Vec<(usize, &'a [f64])>>,
}

impl<'a> EmbeddingIndex<'a> {
    pub fn new<I>(items: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut direct = HashMap::new();
        let mut channels: HashMap<&str, Vec<(usize, &[f64])>> = HashMap::new();
        for (id, v) in items {
            direct.insert(id, v);
            if let Some((base, ch)) = id.rsplit_once("/ch") {
                if let Ok(k) = ch.parse::<usize>() {
                    channels.entry(base).or_default().push((k, v));
                }
            }
        }
        for list in channels.values_mut() {
            list.sort_by_key(|(k, _)| *k);
        }
        Self { direct, channels }
    }

    pub fn get(&self, id: &str) -> Option<&'a [f64]> {
        self.direct.get(id).copied()
    }

    /// All channels of an item: the item itself if it is stored directly.
    pub fn all_channels(&self, id: &str) -> Option<Vec<&'a [f64]>> {
        if let Some(v) = self.direct.get(id) {
            return Some(vec![*v]);
        }
        self.channels
            .get(id)
            .map(|l| l.iter().map(|(_, v)| *v).collect())
    }

    /// Channel `k`; a directly stored (mono) item is its own channel 0.
    pub fn channel(&self, id: &str, k: usize) -> Option<&'a [f64]> {
        if k == 0 {
            if let Some(v) = self.direct.get(id) {
                return Some(*v);
            }
        }
        self.direct.get(channel_id(id, k).as_str()).copied()
    }
}

/// Test-side embedding of a trial under a fusion mode, or the ids missing.
pub fn fused_test_embedding(
    trial: &Trial,
    index: &EmbeddingIndex<'_>,
    fusion: Fusion,
) -> std::result::Result<Vec<f64>, Vec<String>> {
    let mut parts: Vec<&[f64]> = Vec::new();
    let mut missing = Vec::new();
    for id in &trial.test_ids {
        match fusion {
            Fusion::Multi => match index.all_channels(id) {
                Some(list) => parts.extend(list),
                None => missing.push(id.clone()),
            },
            Fusion::Single(k) => match index.channel(id, k) {
                Some(v) => parts.push(v),
                None => missing.push(if k == 0 { id.clone() } else { channel_id(id, k) }),
            },
        }
    }
    if !missing.is_empty() {
        return Err(missing);
    }
    average_embeddings(&parts).map_err(|e| vec![e.to_string()])
}

/// Scores every trial. `enroll_override` supplies enrollment embeddings
/// per trial (e.g. enrollment augmented with the test's noise); otherwise
/// the enrollment id is looked up in `index`.
pub fn score_trials(
    trials: &[Trial],
    index: &EmbeddingIndex<'_>,
    scorer: &Scorer<'_>,
    fusion: Fusion,
    enroll_override: Option<&dyn Fn(&Trial) -> Result<Vec<f64>>>,
) -> Result<Vec<ScoreRecord>> {
    let mut missing = BTreeSet::new();
    for t in trials {
        if enroll_override.is_none() && index.all_channels(&t.enroll_id).is_none() {
            missing.insert(t.enroll_id.clone());
        }
        if let Err(ids) = fused_test_embedding(t, index, fusion) {
            missing.extend(ids);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing.into_iter().collect()));
    }
    trials
        .iter()
        .map(|t| {
            let test = fused_test_embedding(t, index, fusion).expect("checked above");
            let enroll = match enroll_override {
                Some(f) => f(t)?,
                None => average_embeddings(&index.all_channels(&t.enroll_id).expect("checked"))?,
            };
            Ok(ScoreRecord {
                enroll_id: t.enroll_id.clone(),
                test_ids: t.test_ids.clone(),
                score: scorer.score(&enroll, &test)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(t: &[f64], n: &[f64]) -> Vec<(f64, bool)> {
        t.iter()
            .map(|&s| (s, true))
            .chain(n.iter().map(|&s| (s, false)))
            .collect()
    }

    #[test]
    fn eer_hand_cases() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1])).unwrap(), 0.0);
        let e = compute_eer(&set(&[0.9, 0.8, 0.4], &[0.5, 0.2, 0.1])).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(compute_eer(&set(&[0.5], &[0.5])).unwrap(), 0.5);
        assert!(matches!(compute_eer(&set(&[0.5], &[])), Err(Error::MissingClass)));
        assert!(compute_eer(&set(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn min_dcf_bounds() {
        let p = DcfParams::default();
        let (d, _) = compute_min_dcf(&set(&[0.9, 0.8], &[0.1, 0.2]), &p).unwrap();
        assert_eq!(d, 0.0);
        let (d, th) = compute_min_dcf(&set(&[0.1, 0.2], &[0.9, 0.8]), &p).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(th, f64::INFINITY);
        assert!(compute_min_dcf(&set(&[0.1], &[0.2]), &DcfParams { p_target: 0.0, ..p }).is_err());
    }

    #[test]
    fn det_points_monotone() {
        let pts = det_points(&set(&[0.3, 0.3, 0.9, 0.1], &[0.3, 0.05, 0.6])).unwrap();
        for w in pts.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[0].p_miss <= w[1].p_miss);
            assert!(w[0].p_fa >= w[1].p_fa);
        }
    }

    #[test]
    fn report_format() {
        let m = compute_metrics(&set(&[0.9, 0.8, 0.4], &[0.5, 0.2, 0.1]), &DcfParams::default()).unwrap();
        assert!(m.report().starts_with("eer=33.33 minDCF="));
    }

    #[test]
    fn trial_parsing() {
        let t = parse_trials("e1\tt1,t2,t3\ttarget\n\n# note\ne2\tt1\tunknown\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].test_ids.len(), 3);
        assert_eq!(t[1].label, Label::Unknown);
        assert_eq!(parse_trials(&format_trials(&t)).unwrap(), t);
        match parse_trials("e1\tt1\ttarget\nbroken\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_trials("e\tt\ttarget\ne\tt\tnontarget\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_trials("e\tt\tmaybe\n").is_err());
    }

    #[test]
    fn score_round_trip() {
        let recs: Vec<ScoreRecord> = (0..1000)
            .map(|i| ScoreRecord {
                enroll_id: format!("e{}", i % 7),
                test_ids: vec![format!("t{i}")],
                score: (i as f64 * 0.7311).sin() * 12.3456789,
            })
            .collect();
        let back = parse_scores(&format_scores(&recs)).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.enroll_id, b.enroll_id);
            assert!((a.score - b.score).abs() <= 5e-7);
        }
    }

    #[test]
    fn fusion_parsing() {
        assert_eq!("multi".parse::<Fusion>().unwrap(), Fusion::Multi);
        assert_eq!("single=2".parse::<Fusion>().unwrap(), Fusion::Single(2));
        assert!("single".parse::<Fusion>().is_err());
    }

    #[test]
    fn multi_channel_scoring() {
        let store: Vec<(String, Vec<f64>)> = vec![
            ("enr".into(), vec![1.0, 0.0]),
            ("u/ch0".into(), vec![1.0, 1.0]),
            ("u/ch1".into(), vec![0.0, 1.0]),
            ("mono".into(), vec![2.0, 1.0]),
        ];
        let index = EmbeddingIndex::new(store.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
        let trials = vec![
            Trial {
                enroll_id: "enr".into(),
                test_ids: vec!["u".into()],
                label: Label::Target,
            },
            Trial {
                enroll_id: "enr".into(),
                test_ids: vec!["mono".into()],
                label: Label::Nontarget,
            },
        ];
        let multi = score_trials(&trials, &index, &Scorer::Cosine, Fusion::Multi, None).unwrap();
        let by_hand = cosine_score(&[0.5, 1.0], &[1.0, 0.0]).unwrap();
        assert!((multi[0].score - by_hand).abs() < 1e-15);
        let single = score_trials(&trials, &index, &Scorer::Cosine, Fusion::Single(0), None).unwrap();
        assert_eq!(multi[1].score, single[1].score);
        let err = score_trials(&trials, &index, &Scorer::Cosine, Fusion::Single(1), None).unwrap_err();
        match err {
            Error::MissingEmbeddings(ids) => assert_eq!(ids, vec!["mono/ch1".to_string()]),
            e => panic!("{e}"),
        }
    }
}
