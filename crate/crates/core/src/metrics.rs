//! Equal error rate, normalized minimum tandem detection cost, per-attack
//! reports and score files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Key;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub utterance: String,
    pub attack: String,
    pub key: Key,
    /// Bona fide cosine; higher means more likely bona fide.
    pub score: f64,
}

/// One threshold of the sweep with its error rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub miss: f64,
    pub fa: f64,
}

/// Operating points for thresholds `-inf`, every distinct score and `+inf`,
/// with `miss = frac(targets < t)` and `fa = frac(nontargets >= t)`. Misses
/// never decrease and false alarms never increase along the result.
pub fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<Vec<OperatingPoint>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid(
            "error rates need at least one target and one nontarget score",
        ));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut t = targets.to_vec();
    let mut n = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (t.len() as f64, n.len() as f64);
    let mut out = vec![OperatingPoint {
        threshold: f64::NEG_INFINITY,
        miss: 0.0,
        fa: 1.0,
    }];
    let (mut below_t, mut below_n) = (0, 0);
    for th in thresholds {
        while below_t < t.len() && t[below_t] < th {
            below_t += 1;
        }
        while below_n < n.len() && n[below_n] < th {
            below_n += 1;
        }
        out.push(OperatingPoint {
            threshold: th,
            miss: below_t as f64 / nt,
            fa: (n.len() - below_n) as f64 / nn,
        });
    }
    out.push(OperatingPoint {
        threshold: f64::INFINITY,
        miss: 1.0,
        fa: 0.0,
    });
    Ok(out)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Equal error rate on the convex hull of the (miss, false alarm) curve and
/// the threshold at the crossing. The threshold is interpolated between the
/// two hull vertices around the crossing (or taken from the finite one).
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    let pts = operating_points(targets, nontargets)?;
    // lower hull of points ordered by increasing miss (then decreasing fa)
    let mut hull: Vec<OperatingPoint> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if cross((a.miss, a.fa), (b.miss, b.fa), (p.miss, p.fa)) <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let mut best: Option<(f64, f64)> = None;
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.miss - a.fa, b.miss - b.fa);
        if da > 0.0 || db < 0.0 {
            continue;
        }
        let (eer, frac) = if da == db {
            (a.miss, 0.0)
        } else {
            let s = da / (da - db);
            (a.miss + s * (b.miss - a.miss), s)
        };
        let th = match (a.threshold.is_finite(), b.threshold.is_finite()) {
            (true, true) => a.threshold + frac * (b.threshold - a.threshold),
            (true, false) => a.threshold,
            (false, true) => b.threshold,
            (false, false) => 0.0,
        };
        if best.is_none_or(|(e, _)| eer < e) {
            best = Some((eer, th));
        }
    }
    Ok(best.expect("the hull always crosses the diagonal"))
}

/// Cost model of the tandem (ASV + countermeasure) detection cost function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfCosts {
    pub p_tar: f64,
    pub p_non: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    /// ASV false-alarm rate on zero-effort impostors.
    pub p_fa_asv: f64,
    /// ASV miss rate on targets.
    pub p_miss_asv: f64,
    /// Fraction of spoofs the ASV rejects.
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfCosts {
    /// ASVspoof 2019 priors and costs. The three ASV error rates are
    /// illustrative placeholders; supply those of the real ASV system.
    fn default() -> Self {
        TdcfCosts {
            p_spoof: 0.05,
            p_tar: 0.95 * 0.99,
            p_non: 0.95 * 0.01,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_fa_asv: 0.01,
            p_miss_asv: 0.01,
            p_miss_spoof_asv: 0.05,
        }
    }
}

impl TdcfCosts {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.p_tar, self.p_non, self.p_spoof];
        if priors.iter().any(|&p| !(p > 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "t-DCF priors must be positive and sum to 1".into(),
            ));
        }
        if [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm]
            .iter()
            .any(|&c| !(c > 0.0 && c.is_finite()))
        {
            return Err(Error::Config("t-DCF costs must be positive".into()));
        }
        if [self.p_fa_asv, self.p_miss_asv, self.p_miss_spoof_asv]
            .iter()
            .any(|&r| !(0.0..=1.0).contains(&r))
        {
            return Err(Error::Config("ASV error rates must lie in [0, 1]".into()));
        }
        let (c1, c2) = self.weights();
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::Config(format!(
                "degenerate t-DCF weights C1 = {c1}, C2 = {c2}"
            )));
        }
        Ok(())
    }

    /// Reads a TOML file; missing keys keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let costs: TdcfCosts =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        costs.validate()?;
        Ok(costs)
    }

    /// `(C1, C2)`: the weights of the countermeasure miss and false-alarm rates.
    pub fn weights(&self) -> (f64, f64) {
        let c1 = self.p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
            - self.p_non * self.c_fa_asv * self.p_fa_asv;
        let c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv);
        (c1, c2)
    }
}

/// Minimum over the threshold sweep of `(C1 miss + C2 fa) / min(C1, C2)` with
/// bona fide as the countermeasure target class, and its threshold.
pub fn compute_min_tdcf(records: &[ScoreRecord], costs: &TdcfCosts) -> Result<(f64, f64)> {
    costs.validate()?;
    let (bona, spoof) = split_scores(records);
    let (c1, c2) = costs.weights();
    let norm = c1.min(c2);
    let mut best = (f64::INFINITY, 0.0);
    for p in operating_points(&bona, &spoof)? {
        let v = (c1 * p.miss + c2 * p.fa) / norm;
        if v < best.0 {
            best = (v, p.threshold);
        }
    }
    Ok(best)
}

/// `(bona fide scores, spoof scores)`.
pub fn split_scores(records: &[ScoreRecord]) -> (Vec<f64>, Vec<f64>) {
    let bona = records
        .iter()
        .filter(|r| r.key == Key::Bonafide)
        .map(|r| r.score)
        .collect();
    let spoof = records
        .iter()
        .filter(|r| r.key == Key::Spoof)
        .map(|r| r.score)
        .collect();
    (bona, spoof)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    pub attack: String,
    pub spoofs: usize,
    pub eer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Sorted by attack id.
    pub attacks: Vec<AttackRow>,
    pub pooled_eer: f64,
    /// Index into `attacks` of the highest EER (first on ties).
    pub worst: usize,
    pub min_tdcf: Option<f64>,
}

/// Pooled EER, each attack's spoofs against all bona fide scores, the
/// worst attack and, with costs, the pooled min t-DCF.
pub fn per_attack_report(records: &[ScoreRecord], costs: Option<&TdcfCosts>) -> Result<Report> {
    let (bona, spoof) = split_scores(records);
    let (pooled_eer, _) = compute_eer(&bona, &spoof)?;
    let mut by_attack: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.key == Key::Spoof) {
        by_attack.entry(&r.attack).or_default().push(r.score);
    }
    let mut attacks = Vec::with_capacity(by_attack.len());
    for (attack, scores) in by_attack {
        attacks.push(AttackRow {
            attack: attack.to_string(),
            spoofs: scores.len(),
            eer: compute_eer(&bona, &scores)?.0,
        });
    }
    let mut worst = 0;
    for (i, row) in attacks.iter().enumerate() {
        if row.eer > attacks[worst].eer {
            worst = i;
        }
    }
    let min_tdcf = costs
        .map(|c| compute_min_tdcf(records, c))
        .transpose()?
        .map(|t| t.0);
    Ok(Report {
        attacks,
        pooled_eer,
        worst,
        min_tdcf,
    })
}

impl Report {
    /// Aligned table with EERs in percent.
    pub fn to_text(&self) -> String {
        let w = self
            .attacks
            .iter()
            .map(|a| a.attack.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut s = format!("{:<w$}  {:>7}  {:>8}\n", "attack", "spoofs", "EER(%)");
        for a in &self.attacks {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7}  {:>8.3}",
                a.attack,
                a.spoofs,
                100.0 * a.eer
            );
        }
        let spoofs: usize = self.attacks.iter().map(|a| a.spoofs).sum();
        let _ = writeln!(
            s,
            "{:<w$}  {:>7}  {:>8.3}",
            "pooled",
            spoofs,
            100.0 * self.pooled_eer
        );
        if let Some(worst) = self.attacks.get(self.worst) {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7}  {:>8.3}",
                format!("worst:{}", worst.attack),
                worst.spoofs,
                100.0 * worst.eer
            );
        }
        if let Some(t) = self.min_tdcf {
            let _ = writeln!(s, "min t-DCF  {t:.6}");
        }
        s
    }

    /// `row<TAB>attack<TAB>spoofs<TAB>eer` lines plus an optional
    /// `min_tdcf` line; rates are fractions.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("row\tattack\tspoofs\teer\n");
        for a in &self.attacks {
            let _ = writeln!(s, "attack\t{}\t{}\t{}", a.attack, a.spoofs, a.eer);
        }
        let spoofs: usize = self.attacks.iter().map(|a| a.spoofs).sum();
        let _ = writeln!(s, "pooled\t*\t{spoofs}\t{}", self.pooled_eer);
        if let Some(w) = self.attacks.get(self.worst) {
            let _ = writeln!(s, "worst\t{}\t{}\t{}", w.attack, w.spoofs, w.eer);
        }
        if let Some(t) = self.min_tdcf {
            let _ = writeln!(s, "min_tdcf\t*\t*\t{t}");
        }
        s
    }
}

/// Six significant digits in the style of C's `%g`.
pub fn format_score(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-4..6).contains(&exp) {
        format!(
            "{}e{}{:02}",
            trim(mant.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    } else {
        trim(format!("{x:.prec$}", prec = (5 - exp) as usize))
    }
}

pub fn scores_to_string(records: &[ScoreRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{} {} {} {}\n",
                r.utterance,
                r.attack,
                r.key,
                format_score(r.score)
            )
        })
        .collect()
}

pub fn parse_scores(text: &str, source: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::parse(source, n + 1, msg);
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let key: Key = f[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let score: f64 = f[3]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| bad(format!("`{}` is not a finite score", f[3])))?;
        out.push(ScoreRecord {
            utterance: f[0].to_string(),
            attack: f[1].to_string(),
            key,
            score,
        });
    }
    Ok(out)
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    fs::write(path, scores_to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, &path.display().to_string())
}
