use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::LanguageId;
use crate::CODE_VERSION;

/// Label attached to the error metric wherever it is reported: the
/// classification error plays the role word error rate plays for speech.
pub const METRIC_LABEL: &str = "classification error (stand-in for WER)";

/// Final evaluation of one language in one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub procedure: String,
    pub seed: u64,
    pub language: LanguageId,
    pub loss: f64,
    pub error: f64,
    pub sparsity: f64,
    pub eval_sha256: String,
}

/// Per-seed mask diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedDiagnostics {
    /// Final `|∪ m_z| / |θ|` for pathway runs.
    pub final_union_ratio: Option<f64>,
    /// Mean mask similarity across adapt events.
    pub mean_adapt_similarity: Option<f64>,
    /// Mask files consumed from an earlier stage, as (file, sha256).
    pub consumed_masks: Vec<(String, String)>,
}

/// Outcome of an experiment: raw per-seed, per-language rows plus
/// diagnostics. Aggregates are always recomputed from the rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub procedure: String,
    pub code_version: String,
    pub rows: Vec<ReportRow>,
    pub diagnostics: BTreeMap<u64, SeedDiagnostics>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len();
        let m = mean(xs);
        let std = if n > 1 {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean: m, std, n }
    }
}

impl RunReport {
    pub fn seeds(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn languages(&self) -> Vec<LanguageId> {
        self.rows.iter().map(|r| r.language).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn row(&self, seed: u64, z: LanguageId) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.seed == seed && r.language == z)
    }

    /// Error averaged over languages, per seed.
    pub fn mean_error_by_seed(&self) -> BTreeMap<u64, f64> {
        let mut acc: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            acc.entry(r.seed).or_default().push(r.error);
        }
        acc.into_iter().map(|(s, v)| (s, mean(&v))).collect()
    }

    /// Error averaged over languages and then over seeds.
    pub fn mean_error(&self) -> Stat {
        Stat::of(&self.mean_error_by_seed().into_values().collect::<Vec<_>>())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the rows of a `report.csv`. Diagnostics are not part of the
    /// CSV and come back empty.
    pub fn read_csv(path: &Path) -> Result<RunReport> {
        let mut rd = csv::Reader::from_path(path)?;
        let rows = rd.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        let first = rows
            .first()
            .ok_or_else(|| Error::Format(format!("{} has no rows", path.display())))?;
        let (name, procedure) = (first.run.clone(), first.procedure.clone());
        if rows.iter().any(|r| r.run != name || r.procedure != procedure) {
            return Err(Error::Format(format!("{} mixes several runs", path.display())));
        }
        let mut seen = BTreeSet::new();
        if !rows.iter().all(|r| seen.insert((r.seed, r.language))) {
            return Err(Error::Format(format!("{} repeats a (seed, language) row", path.display())));
        }
        Ok(RunReport {
            name,
            procedure,
            code_version: CODE_VERSION.to_string(),
            rows,
            diagnostics: BTreeMap::new(),
        })
    }

    /// Plain-text summary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run: {}", self.name);
        let _ = writeln!(s, "procedure: {}", self.procedure);
        let _ = writeln!(s, "code version: {}", self.code_version);
        let _ = writeln!(s, "metric: {METRIC_LABEL}");
        let _ = writeln!(s);
        let langs = self.languages();
        let mut header = format!("{:>6}", "seed");
        for z in &langs {
            let _ = write!(header, " {:>9}", format!("lang {z}"));
        }
        let _ = writeln!(s, "{header} {:>9}", "avg");
        for (seed, avg) in self.mean_error_by_seed() {
            let mut line = format!("{seed:>6}");
            for &z in &langs {
                match self.row(seed, z) {
                    Some(r) => {
                        let _ = write!(line, " {:>9.4}", r.error);
                    }
                    None => {
                        let _ = write!(line, " {:>9}", "-");
                    }
                }
            }
            let _ = writeln!(s, "{line} {avg:>9.4}");
        }
        let m = self.mean_error();
        let _ = writeln!(s, "mean error over seeds: {:.4} ± {:.4} (n = {})", m.mean, m.std, m.n);
        for (seed, d) in &self.diagnostics {
            if let Some(u) = d.final_union_ratio {
                let _ = writeln!(s, "seed {seed}: final union ratio {u:.4}");
            }
            if let Some(sim) = d.mean_adapt_similarity {
                let _ = writeln!(s, "seed {seed}: mean adapt similarity {sim:.4}");
            }
            for (file, hash) in &d.consumed_masks {
                let _ = writeln!(s, "seed {seed}: consumed {file} sha256 {hash}");
            }
        }
        s
    }
}

/// Relative change of one run against the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonEntry {
    pub name: String,
    pub mean_error: Stat,
    /// Per language: relative change in error, statistics over seeds.
    pub per_language: Vec<(LanguageId, Stat)>,
    /// Per seed the relative change is averaged over languages; this is the
    /// statistic of those averages over seeds.
    pub average: Stat,
    /// Seeds in which the language-averaged relative change is ≤ 0.
    pub seeds_not_worse: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub languages: Vec<LanguageId>,
    pub entries: Vec<ComparisonEntry>,
}

/// Compares every report against the one named `baseline`. All reports
/// must cover the same seeds and languages with identical eval sets.
pub fn compare(reports: &[RunReport], baseline: &str) -> Result<Comparison> {
    let base = reports
        .iter()
        .find(|r| r.name == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("no report named {baseline:?}")))?;
    let seeds = base.seeds();
    let langs = base.languages();
    for r in reports {
        if r.seeds() != seeds || r.languages() != langs {
            return Err(Error::InvalidArgument(format!(
                "report {:?} covers seeds {:?} / languages {:?}, baseline covers {:?} / {:?}",
                r.name,
                r.seeds(),
                r.languages(),
                seeds,
                langs
            )));
        }
        for &s in &seeds {
            for &z in &langs {
                let (a, b) = match (r.row(s, z), base.row(s, z)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "report {:?} or the baseline lacks seed {s} language {z}",
                            r.name
                        )))
                    }
                };
                if a.eval_sha256 != b.eval_sha256 {
                    return Err(Error::InvalidArgument(format!(
                        "report {:?} was evaluated on a different eval set (seed {s}, language {z})",
                        r.name
                    )));
                }
                if b.error <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "baseline error is zero for seed {s} language {z}; relative change undefined"
                    )));
                }
            }
        }
    }
    let entries = reports
        .iter()
        .map(|r| {
            let rel = |s: u64, z: LanguageId| {
                let (a, b) = (r.row(s, z).unwrap().error, base.row(s, z).unwrap().error);
                (a - b) / b
            };
            let per_language = langs
                .iter()
                .map(|&z| (z, Stat::of(&seeds.iter().map(|&s| rel(s, z)).collect::<Vec<_>>())))
                .collect();
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|&s| mean(&langs.iter().map(|&z| rel(s, z)).collect::<Vec<_>>()))
                .collect();
            ComparisonEntry {
                name: r.name.clone(),
                mean_error: r.mean_error(),
                per_language,
                average: Stat::of(&per_seed),
                seeds_not_worse: per_seed.iter().filter(|&&x| x <= 0.0).count(),
            }
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_string(),
        languages: langs,
        entries,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "metric: {METRIC_LABEL}");
        let _ = writeln!(s, "relative change vs {:?}, mean ± std over seeds", self.baseline);
        let mut header = format!("{:<24} {:>17}", "run", "error");
        for z in &self.languages {
            let _ = write!(header, " {:>17}", format!("lang {z}"));
        }
        let _ = writeln!(s, "{header} {:>17} {:>7}", "avg rel", "not worse");
        let pct = |st: &Stat| format!("{:+.2}% ± {:.2}", 100.0 * st.mean, 100.0 * st.std);
        for e in &self.entries {
            let mut line = format!(
                "{:<24} {:>17}",
                e.name,
                format!("{:.4} ± {:.4}", e.mean_error.mean, e.mean_error.std)
            );
            for (_, st) in &e.per_language {
                let _ = write!(line, " {:>17}", pct(st));
            }
            let _ = writeln!(s, "{line} {:>17} {:>4}/{}", pct(&e.average), e.seeds_not_worse, e.average.n);
        }
        s
    }
}
