//! Machine-readable exports and their rendered text forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use metastack::baselines::{NoiseSweepResult, PriceOfPrivacy, Scenario, ScenarioReport};
use metastack::stacking::{EvaluationReport, ModelRole};
use metastack::tabular::{Dataset, UnitPartition};
use metastack::transport::{AuditRule, AuditVerdict, TrafficSummary, VolumeReport};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::CliError;

pub const NOISE_NOTE: &str =
    "noise, where applied, perturbs the training and the evaluation copies of the data alike; markers stay untouched";

/// JSON with object keys in sorted order and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let value = serde_json::to_value(value).map_err(|e| CliError::Experiment(format!("cannot serialize: {e}")))?;
    let mut text = serde_json::to_string_pretty(&value).expect("a JSON value always serializes");
    text.push('\n');
    Ok(text)
}

/// The configuration as echoed into reports. The output directory is left
/// out so that identical runs written to different places export the same
/// bytes.
pub fn config_echo(config: &RunConfig) -> Value {
    let mut v = serde_json::to_value(config).expect("config serializes");
    if let Value::Object(map) = &mut v {
        map.remove("out");
    }
    v
}

#[derive(Clone, Debug, Serialize)]
pub struct UnitSummary {
    pub unit_id: String,
    pub columns: usize,
    /// Parts with at least one observed cell in the unit.
    pub parts: usize,
    pub share: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetSummary {
    pub items: usize,
    pub columns: usize,
    pub n_units: usize,
    pub units: Vec<UnitSummary>,
    pub classes: Vec<String>,
    pub class_counts: Vec<usize>,
    pub missing_cells: usize,
    pub marker: Option<f64>,
}

impl DatasetSummary {
    /// `missing_cells` counts the cells that were empty before imputation.
    pub fn new(data: &Dataset, partitions: &[UnitPartition], missing_cells: usize) -> Self {
        let n = data.n_items();
        let mut class_counts = vec![0; data.classes().len()];
        for &l in data.labels() {
            class_counts[l] += 1;
        }
        let units = partitions
            .iter()
            .map(|p| {
                let parts = p.covered_count();
                UnitSummary {
                    unit_id: p.unit_id.clone(),
                    columns: p.width(),
                    parts,
                    share: if n == 0 { 0.0 } else { parts as f64 / n as f64 },
                }
            })
            .collect();
        Self {
            items: n,
            columns: data.n_columns(),
            n_units: partitions.len(),
            units,
            classes: data.classes().to_vec(),
            class_counts,
            missing_cells,
            marker: data.marker(),
        }
    }

    pub fn visit_shares_csv(&self) -> String {
        let mut out = String::from("unit_id,columns,parts,share\n");
        for u in &self.units {
            let _ = writeln!(out, "{},{},{},{:.6}", u.unit_id, u.columns, u.parts, u.share);
        }
        out
    }

    fn render(&self, out: &mut String) {
        let _ = writeln!(out, "items        {}", self.items);
        let _ = writeln!(out, "columns      {} in {} units", self.columns, self.n_units);
        let classes: Vec<String> =
            self.classes.iter().zip(&self.class_counts).map(|(c, n)| format!("{c} ({n})")).collect();
        let _ = writeln!(out, "classes      {}", classes.join(", "));
        let _ = writeln!(out, "missing      {} cells before imputation", self.missing_cells);
        if let Some(m) = self.marker {
            let _ = writeln!(out, "marker       {m}");
        }
        let _ = writeln!(out, "\nShare of parts passing each unit");
        for u in &self.units {
            let _ = writeln!(out, "  {:<6} {:>8} parts  {:>7.2}%", u.unit_id, u.parts, 100.0 * u.share);
        }
    }
}

/// Gnuplot script for `visit_shares.csv`.
pub fn visit_shares_plot() -> String {
    [
        "# Share of parts passing each unit; run with: gnuplot -p visit_shares.gp",
        "set datafile separator ','",
        "set style fill solid 0.6",
        "set boxwidth 0.6",
        "set yrange [0:1]",
        "set ylabel 'share of parts'",
        "set key off",
        "plot 'visit_shares.csv' every ::1 using 0:4:xtic(1) with boxes",
        "",
    ]
    .join("\n")
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditSummary {
    pub pass: bool,
    pub messages_scanned: usize,
    pub violations: usize,
    pub flagged_messages: usize,
    pub by_rule: BTreeMap<String, usize>,
}

impl From<&AuditVerdict> for AuditSummary {
    fn from(v: &AuditVerdict) -> Self {
        let mut by_rule = BTreeMap::new();
        for x in &v.violations {
            let name = match x.rule {
                AuditRule::RawRowKind => "raw_row_kind",
                AuditRule::FeatureField => "feature_field",
                AuditRule::RawValue => "raw_value",
            };
            *by_rule.entry(name.to_string()).or_insert(0) += 1;
        }
        Self {
            pass: v.pass,
            messages_scanned: v.messages_scanned,
            violations: v.violations.len(),
            flagged_messages: v.flagged_messages().len(),
            by_rule,
        }
    }
}

impl AuditSummary {
    /// `PASS, 0 violations` or `FAIL, n violations`.
    pub fn line(&self) -> String {
        format!("{}, {} violations", if self.pass { "PASS" } else { "FAIL" }, self.violations)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioExport {
    pub scenario: Scenario,
    pub title: String,
    pub models: Vec<EvaluationReport>,
    pub volume: VolumeReport,
    pub traffic: TrafficSummary,
    pub audit: AuditSummary,
    pub leak_free: bool,
    pub warnings: Vec<String>,
    pub folds_file: String,
    pub transcript_file: String,
}

impl ScenarioExport {
    pub fn new(report: &ScenarioReport) -> Self {
        let n = report.scenario.number();
        Self {
            scenario: report.scenario,
            title: report.scenario.title().to_string(),
            models: report.models.clone(),
            volume: report.volume.clone(),
            traffic: report.traffic.clone(),
            audit: AuditSummary::from(&report.audit),
            leak_free: report.leak_free,
            warnings: report.warnings.clone(),
            folds_file: format!("folds_s{n}.csv"),
            transcript_file: format!("transcript_s{n}.ndjson"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub config: Value,
    pub dataset: DatasetSummary,
    pub scenarios: Vec<ScenarioExport>,
    /// Present when both scenario 2 and scenario 3 ran.
    pub price_of_privacy: Option<PriceOfPrivacy>,
    pub notes: Vec<String>,
}

fn role_name(role: &ModelRole) -> String {
    role.to_string()
}

/// Most frequent per-fold choice, ties to the smaller setting.
fn typical_params(m: &EvaluationReport) -> Option<(usize, usize)> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for b in m.folds.iter().filter_map(|f| f.best) {
        *counts.entry(b).or_insert(0) += 1;
    }
    counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k)
}

impl CompareReport {
    pub fn render_text(&self) -> String {
        let mut out = String::from("Scenario comparison\n===================\n\n");
        let seed = self.config.get("seed").and_then(Value::as_u64).unwrap_or_default();
        let _ = writeln!(out, "seed         {seed}");
        self.dataset.render(&mut out);
        let _ = writeln!(out, "\nnote: {NOISE_NOTE}.");

        let _ = writeln!(out, "\nTechnical performance (pooled outer folds)\n");
        let _ = writeln!(
            out,
            "{:<3} {:<20} {:>7} {:>8} {:>7} {:>9} {:>7} {:>7} {:>12} {:>9}",
            "sc", "model", "MCC", "accuracy", "F1(w)", "prec.(w)", "rec.(w)", "kappa", "n_estimators", "max_depth"
        );
        for s in &self.scenarios {
            for m in &s.models {
                let v = m.metrics;
                let (est, depth) = typical_params(m)
                    .map_or_else(|| ("-".to_string(), "-".to_string()), |(e, d)| (e.to_string(), d.to_string()));
                let _ = writeln!(
                    out,
                    "{:<3} {:<20} {:>7.4} {:>8.4} {:>7.4} {:>9.4} {:>7.4} {:>7.4} {:>12} {:>9}",
                    s.scenario.number(),
                    role_name(&m.role),
                    v.mcc,
                    v.accuracy,
                    v.f1_weighted,
                    v.precision_weighted,
                    v.recall_weighted,
                    v.cohens_kappa,
                    est,
                    depth
                );
            }
        }

        let _ = writeln!(out, "\nConfidentiality and volume\n");
        for s in &self.scenarios {
            let _ = writeln!(
                out,
                "scenario {}: audit {} ({} messages scanned)",
                s.scenario.number(),
                s.audit.line(),
                s.audit.messages_scanned
            );
            let _ = writeln!(
                out,
                "  measured traffic: {} messages, {} bytes, {} value fields",
                s.traffic.messages, s.traffic.bytes, s.traffic.value_fields
            );
            let _ = writeln!(
                out,
                "  fold bookkeeping: {} ({})",
                s.folds_file,
                if s.leak_free { "leak-free" } else { "LEAK" }
            );
        }
        if let Some(v) = self.scenarios.first().map(|s| &s.volume) {
            let _ = writeln!(out, "\nanalytic volume per item, in feature values (s = {})", v.s);
            let _ = writeln!(out, "  scenario 1: {}", v.scenario1);
            let _ = writeln!(out, "  scenario 2: {} (k = {} units, m = {} outputs each)", v.scenario2, v.k, v.m);
            let _ = writeln!(out, "  scenario 3: {}", v.scenario3);
            let _ = writeln!(out, "  savings of scenario 2 over 3: {}", v.savings);
            let _ = writeln!(out, "  reduction ratio: {} = {}", v.ratio, v.ratio_percent);
        }
        if let Some(p) = &self.price_of_privacy {
            let _ = writeln!(out, "\n{}", p.render());
        }
        for w in self.scenarios.iter().flat_map(|s| &s.warnings) {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from(
            "scenario,model,mcc,accuracy,f1_weighted,precision_weighted,recall_weighted,cohens_kappa,n_estimators,max_depth\n",
        );
        for s in &self.scenarios {
            for m in &s.models {
                let v = m.metrics;
                let (est, depth) =
                    typical_params(m).map_or_else(|| (String::new(), String::new()), |(e, d)| (e.to_string(), d.to_string()));
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{est},{depth}",
                    s.scenario.number(),
                    role_name(&m.role),
                    v.mcc,
                    v.accuracy,
                    v.f1_weighted,
                    v.precision_weighted,
                    v.recall_weighted,
                    v.cohens_kappa
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub config: Value,
    pub dataset: DatasetSummary,
    pub result: NoiseSweepResult,
    /// Spearman correlation of λ and MCC.
    pub spearman: Option<f64>,
    pub notes: Vec<String>,
}

impl SweepReport {
    pub fn render_text(&self) -> String {
        let mut out = String::from("Noise sweep (shared-pool model)\n===============================\n\n");
        let _ = writeln!(out, "note: {NOISE_NOTE}.\n");
        let _ = writeln!(out, "{:>6} {:>9}", "lambda", "MCC");
        for (l, m) in self.result.lambdas.iter().zip(&self.result.mcc) {
            let _ = writeln!(out, "{l:>6.2} {m:>9.4}");
        }
        match self.spearman {
            Some(r) => {
                let _ = writeln!(out, "\nSpearman rank correlation of lambda and MCC: {r:.4}");
            }
            None => out.push_str("\nSpearman rank correlation of lambda and MCC: undefined\n"),
        }
        out
    }
}

pub fn sweep_plot() -> String {
    [
        "# MCC of the shared-pool model under additive noise; run with: gnuplot -p sweep.gp",
        "set datafile separator ','",
        "set xlabel 'noise term lambda'",
        "set ylabel 'MCC'",
        "set key off",
        "set grid",
        "plot 'sweep.csv' every ::1 using 1:2 with linespoints",
        "",
    ]
    .join("\n")
}

fn is_numeric(token: &str) -> bool {
    let t = token.strip_prefix('-').unwrap_or(token);
    let mut parts = t.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    !int.is_empty() && int.bytes().all(|b| b.is_ascii_digit()) && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

/// Numeric tokens of a text, split on whitespace and punctuation. A `%`
/// suffix is kept.
pub fn numeric_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || ",;:()/=[]{}\"|".contains(c))
        .map(|t| t.trim_end_matches('.'))
        .filter(|t| is_numeric(t.strip_suffix('%').unwrap_or(t)))
        .map(str::to_string)
        .collect()
}

fn collect(value: &Value, numbers: &mut Vec<f64>, strings: &mut Vec<String>) {
    match value {
        Value::Number(n) => numbers.extend(n.as_f64()),
        Value::String(s) => strings.extend(numeric_tokens(s)),
        Value::Array(a) => a.iter().for_each(|v| collect(v, numbers, strings)),
        Value::Object(o) => o.values().for_each(|v| collect(v, numbers, strings)),
        _ => {}
    }
}

/// Numbers printed in `text` that cannot be traced to `export`. A token with
/// `d` decimals matches an exported number that rounds to it at `d`
/// decimals; a percentage also matches a fraction scaled by 100.
pub fn untraceable_numbers(text: &str, export: &Value) -> Vec<String> {
    let (mut numbers, mut strings) = (Vec::new(), Vec::new());
    collect(export, &mut numbers, &mut strings);
    numeric_tokens(text)
        .into_iter()
        .filter(|token| {
            if strings.contains(token) {
                return false;
            }
            let (body, pct) = match token.strip_suffix('%') {
                Some(b) => (b, true),
                None => (token.as_str(), false),
            };
            let decimals = body.split_once('.').map_or(0, |(_, f)| f.len());
            let matches = |v: f64| {
                let shown = format!("{v:.decimals$}");
                shown == body || (shown == format!("-{body}") && body.trim_matches(['0', '.']).is_empty())
            };
            !numbers.iter().any(|&v| matches(v) || (pct && matches(100.0 * v)))
        })
        .collect()
}
