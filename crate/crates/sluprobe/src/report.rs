//! Result CSVs and the collated markdown tables.
//!
//! Probe results use a long format, `task,layer,best,split,metric,value`,
//! with raw metric values (F1 in 0..1). Markdown tables print F1 and
//! accuracy as percentages and MAE as is.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sluprobe_core::attn::{AttnBuckets, Buckets, DependencyReport, EntityValueReport};
use sluprobe_core::probes::{Metrics, ProbeReport, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    /// Layer number, or `ngram` for the n-gram baseline.
    pub layer: String,
    pub best: bool,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

fn metric_rows(task: &str, layer: &str, best: bool, split: &str, m: &Metrics, out: &mut Vec<ResultRow>) {
    let mut push = |metric: String, value: f64| {
        out.push(ResultRow {
            task: task.to_string(),
            layer: layer.to_string(),
            best,
            split: split.to_string(),
            metric,
            value,
        })
    };
    if let Some(v) = m.macro_f1 {
        push("macro_f1".into(), v);
    }
    if let Some(v) = m.accuracy {
        push("accuracy".into(), v);
    }
    if let Some(v) = m.mae {
        push("mae".into(), v);
    }
    for c in &m.per_class {
        push(format!("f1:{}", c.label), c.f1);
    }
}

pub fn single_result_rows(task: &str, layer: &str, valid: &Metrics, test: &Metrics) -> Vec<ResultRow> {
    let mut out = Vec::new();
    metric_rows(task, layer, true, "valid", valid, &mut out);
    metric_rows(task, layer, true, "test", test, &mut out);
    out
}

pub fn sweep_result_rows(report: &ProbeReport) -> Vec<ResultRow> {
    let mut out = Vec::new();
    for r in &report.per_layer {
        let layer = r.layer.to_string();
        let best = r.layer == report.best_layer;
        metric_rows(&report.task, &layer, best, "valid", &r.valid, &mut out);
        metric_rows(&report.task, &layer, best, "test", &r.test, &mut out);
    }
    out
}

pub fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(r: impl Read) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

/// Hyperparameter footnote for probe tables. These values are this tool's
/// defaults unless overridden on the command line.
pub fn training_note(c: &TrainConfig) -> String {
    format!(
        "\nProbe training: {} epochs, batch {}, learning rate {}, L2 {}, seed {}.\n",
        c.epochs, c.batch_size, c.learning_rate, c.l2_penalty, c.seed
    )
}

/// Per-layer markdown for one or more sweeps; the best layer is starred.
pub fn sweep_markdown(reports: &[ProbeReport]) -> String {
    let mut t = Table::new(&["Task", "Metric", "Layer", "Valid", "Test"]);
    for rep in reports {
        for r in &rep.per_layer {
            let star = if r.layer == rep.best_layer { "*" } else { "" };
            t.push(vec![
                rep.task.clone(),
                rep.metric.clone(),
                format!("{}{star}", r.layer),
                fmt_metric(&rep.metric, r.valid.headline()),
                fmt_metric(&rep.metric, r.test.headline()),
            ]);
        }
    }
    t.markdown()
}

pub fn fmt_metric(metric: &str, v: f64) -> String {
    if v.is_nan() {
        return "-".into();
    }
    if metric == "mae" {
        format!("{v:.2}")
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.headers.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(self.headers.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.headers)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyRow {
    pub relation: String,
    pub layer: Option<u32>,
    pub head: Option<u32>,
    pub direction: String,
    pub correct: usize,
    pub total: usize,
    pub uas: f64,
}

/// Best cell per relation, then `all` (micro) and `all_macro`.
pub fn dependency_rows(rep: &DependencyReport) -> Vec<DependencyRow> {
    let mut out: Vec<DependencyRow> = rep
        .relations
        .iter()
        .chain(std::iter::once(&rep.all_micro))
        .map(|r| DependencyRow {
            relation: r.relation.clone(),
            layer: Some(r.layer),
            head: Some(r.head),
            direction: r.direction.as_str().into(),
            correct: r.correct,
            total: r.total,
            uas: r.uas,
        })
        .collect();
    out.push(DependencyRow {
        relation: "all_macro".into(),
        layer: None,
        head: None,
        direction: String::new(),
        correct: 0,
        total: rep.relations.iter().map(|r| r.total).sum(),
        uas: rep.all_macro,
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub layer: u32,
    /// Head index, or `mean` for the head average.
    pub head: String,
    pub self_attn: f64,
    pub intra: f64,
    pub inter: f64,
    pub separator: f64,
    pub initial: f64,
    pub isa_percent: f64,
}

fn bucket_row(layer: u32, head: String, b: &Buckets) -> BucketRow {
    BucketRow {
        layer,
        head,
        self_attn: b.self_attn,
        intra: b.intra,
        inter: b.inter,
        separator: b.separator,
        initial: b.initial,
        isa_percent: b.isa_percent(),
    }
}

pub fn bucket_rows(b: &AttnBuckets) -> Vec<BucketRow> {
    let mut out = Vec::new();
    for l in &b.layers {
        out.push(bucket_row(l.layer, "mean".into(), &l.buckets));
        for h in b.per_head.iter().filter(|h| h.layer == l.layer) {
            out.push(bucket_row(h.layer, h.head.to_string(), &h.buckets));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRow {
    pub id: String,
    pub accuracy: f64,
}

pub fn entity_rows(r: &EntityValueReport) -> Vec<EntityRow> {
    r.per_pair
        .iter()
        .map(|(id, a)| EntityRow {
            id: id.clone(),
            accuracy: *a,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub task: String,
    pub mode: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// Rows of the probing table: group, display name, task, metric.
pub const PROBING_ROWS: &[(&str, &str, &str, &str)] = &[
    ("Conversational", "Disfluency", "disfluency", "macro_f1"),
    ("Conversational", "Pause", "pause", "macro_f1"),
    ("Conversational", "Overtalk", "overtalk", "macro_f1"),
    ("Conversational", "Question", "question", "macro_f1"),
    ("Channel", "Speaker", "speaker_role", "macro_f1"),
    ("Channel", "Response-Len", "response_length", "macro_f1"),
    ("Channel", "Turn-Taking", "turn_taking", "macro_f1"),
    ("ASR", "Binary", "error_binary", "macro_f1"),
    ("ASR", "Insertion", "error_multiclass", "f1:insertion"),
    ("ASR", "Deletion", "error_multiclass", "f1:deletion"),
    ("ASR", "Substitution", "error_multiclass", "f1:substitution"),
    ("ASR", "WER", "wer", "mae"),
];

/// Best-layer test value for `task`/`metric`.
pub fn best_test(rows: &[ResultRow], task: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.task == task && r.best && r.split == "test" && r.metric == metric)
        .map(|r| r.value)
}

fn display_metric(metric: &str) -> &str {
    if metric == "mae" {
        "mae"
    } else {
        "f1"
    }
}

/// Tasks as rows, models as columns, and a delta column (last model minus
/// the one before it) when two or more models are given.
pub fn probing_table(models: &[(String, Vec<ResultRow>)], delta_name: &str) -> Table {
    let mut headers = vec!["Group".to_string(), "Task".to_string()];
    headers.extend(models.iter().map(|(n, _)| n.clone()));
    let with_delta = models.len() >= 2;
    if with_delta {
        headers.push(delta_name.to_string());
    }
    let mut t = Table {
        headers,
        rows: Vec::new(),
    };
    for &(group, name, task, metric) in PROBING_ROWS {
        let vals: Vec<Option<f64>> = models.iter().map(|(_, rows)| best_test(rows, task, metric)).collect();
        if vals.iter().all(Option::is_none) {
            continue;
        }
        let mut row = vec![group.to_string(), name.to_string()];
        row.extend(vals.iter().map(|v| v.map_or("-".into(), |v| fmt_metric(display_metric(metric), v))));
        if with_delta {
            let n = vals.len();
            row.push(match (vals[n - 2], vals[n - 1]) {
                (Some(a), Some(b)) => fmt_metric(display_metric(metric), b - a),
                _ => "-".into(),
            });
        }
        t.push(row);
    }
    t
}

/// `all`, then the ten most frequent relations of the first model, then
/// the five relations with the largest absolute delta.
pub fn dependency_table(models: &[(String, Vec<DependencyRow>)], delta_name: &str) -> Table {
    let mut headers = vec!["Relation".to_string()];
    headers.extend(models.iter().map(|(n, _)| n.clone()));
    let with_delta = models.len() >= 2;
    if with_delta {
        headers.push(delta_name.to_string());
    }
    let mut t = Table {
        headers,
        rows: Vec::new(),
    };
    let lookup = |rows: &[DependencyRow], rel: &str| rows.iter().find(|r| r.relation == rel).map(|r| r.uas);
    let render = |rel: &str| -> (Vec<String>, Option<f64>) {
        let vals: Vec<Option<f64>> = models.iter().map(|(_, rows)| lookup(rows, rel)).collect();
        let mut row = vec![rel.to_string()];
        row.extend(vals.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.1}"))));
        let mut delta = None;
        if with_delta {
            let n = vals.len();
            delta = vals[n - 2].zip(vals[n - 1]).map(|(a, b)| b - a);
            row.push(delta.map_or("-".into(), |d| format!("{d:.1}")));
        }
        (row, delta)
    };
    let Some((_, first)) = models.first() else {
        return t;
    };
    t.push(render("all").0);
    let mut relations: Vec<&DependencyRow> = first
        .iter()
        .filter(|r| r.relation != "all" && r.relation != "all_macro")
        .collect();
    relations.sort_by(|a, b| b.total.cmp(&a.total).then_with(|| a.relation.cmp(&b.relation)));
    let section = |title: &str, t: &mut Table| {
        let mut row = vec![format!("*{title}*")];
        row.resize(t.headers.len(), String::new());
        t.push(row);
    };
    section("Most frequent relations", &mut t);
    for r in relations.iter().take(10) {
        t.push(render(&r.relation).0);
    }
    if with_delta {
        let mut by_delta: Vec<(f64, Vec<String>)> = relations
            .iter()
            .filter_map(|r| {
                let (row, d) = render(&r.relation);
                d.map(|d| (d, row))
            })
            .collect();
        by_delta.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()));
        section("Relations with highest delta", &mut t);
        for (_, row) in by_delta.into_iter().take(5) {
            t.push(row);
        }
    }
    t
}

pub fn entity_table(models: &[(String, Vec<SummaryRow>)]) -> Table {
    let mut t = Table::new(&["Model", "Entity-Value Acc.", "ISA%"]);
    for (name, rows) in models {
        let get = |m: &str| {
            rows.iter()
                .find(|r| r.metric == m)
                .map_or("-".into(), |r| format!("{:.2}", r.value))
        };
        t.push(vec![name.clone(), get("entity_value_accuracy"), get("isa_percent")]);
    }
    t
}

/// Models as rows, external tasks as columns, accuracy in percent.
pub fn transfer_table(models: &[(String, Vec<TransferRow>)]) -> Table {
    let tasks: BTreeSet<&str> = models
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.task.as_str()))
        .collect();
    let mut headers = vec!["Model".to_string()];
    headers.extend(tasks.iter().map(|s| s.to_string()));
    let mut t = Table {
        headers,
        rows: Vec::new(),
    };
    for (name, rows) in models {
        let mut row = vec![name.clone()];
        for task in &tasks {
            row.push(
                rows.iter()
                    .find(|r| r.task == *task)
                    .map_or("-".into(), |r| format!("{:.2}", 100.0 * r.accuracy)),
            );
        }
        t.push(row);
    }
    t
}

pub fn token_baseline_table(rows: &[ResultRow]) -> Table {
    let mut t = Table::new(&["Probe Tasks", "Token Baseline"]);
    for &(_, name, task, metric) in PROBING_ROWS {
        if let Some(v) = best_test(rows, task, metric) {
            t.push(vec![name.to_string(), fmt_metric(display_metric(metric), v)]);
        }
    }
    t
}

/// Concatenated per-layer head-averaged buckets, one row per model and layer.
pub fn attention_curves(models: &[(String, Vec<BucketRow>)]) -> Table {
    let mut t = Table::new(&["model", "layer", "self", "intra", "inter", "separator", "initial", "isa_percent"]);
    for (name, rows) in models {
        for r in rows.iter().filter(|r| r.head == "mean") {
            t.push(vec![
                name.clone(),
                r.layer.to_string(),
                r.self_attn.to_string(),
                r.intra.to_string(),
                r.inter.to_string(),
                r.separator.to_string(),
                r.initial.to_string(),
                r.isa_percent.to_string(),
            ]);
        }
    }
    t
}

/// Groups result rows by task for convenience.
pub fn by_task(rows: &[ResultRow]) -> BTreeMap<&str, Vec<&ResultRow>> {
    let mut m: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.task.as_str()).or_default().push(r);
    }
    m
}
