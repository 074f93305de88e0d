//! Reports as an aligned human table plus one JSON object per line.

use apt_core::ablation::AblationRow;
use apt_core::data::CategorySet;
use serde_json::{json, Map, Value};

use crate::config::Settings;
use crate::pipeline::{EvalOutcome, LinkStats, TrainOutcome};

fn line(kind: &str, mut fields: Map<String, Value>) -> String {
    let mut m = Map::new();
    m.insert("kind".into(), json!(kind));
    m.append(&mut fields);
    Value::Object(m).to_string()
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("object literal"),
    }
}

pub fn link_summary(stats: &LinkStats, metric: &str, threshold: f64) -> String {
    format!(
        "metric={metric} threshold={threshold}\nscreens {}  elements {}  ocr items {}\nlinked elements {} ({:.2}%)  linked pairs {}\n",
        stats.screens,
        stats.elements,
        stats.ocr_items,
        stats.linked_elements,
        100.0 * stats.rate(),
        stats.linked_pairs
    )
}

/// Machine lines of a training run. Wall time is left out unless
/// `with_timing`, so two runs with one seed produce identical reports.
pub fn train_lines(outcome: &TrainOutcome, settings: &Settings, with_timing: bool) -> Vec<String> {
    let mut header = settings.echo();
    header.insert("split".into(), json!(outcome.filter.name()));
    header.insert("categories".into(), json!(outcome.categories));
    header.insert("params".into(), json!(outcome.head.param_count()));
    header.insert("train_proposals".into(), json!(outcome.train_proposals));
    header.insert("val_proposals".into(), json!(outcome.val_proposals));
    let mut out = vec![line("header", header)];
    for (k, loss) in outcome.report.epoch_losses.iter().enumerate() {
        out.push(line("epoch", obj(json!({"epoch": k + 1, "loss": loss}))));
    }
    out.push(line(
        "result",
        obj(json!({
            "steps": outcome.report.steps,
            "final_loss": outcome.report.epoch_losses.last(),
            "val_accuracy": outcome.report.val_accuracy,
        })),
    ));
    if with_timing {
        out.push(line("timing", obj(json!({"wall_seconds": outcome.wall_time.as_secs_f64()}))));
    }
    out
}

pub fn train_table(outcome: &TrainOutcome, settings: &Settings) -> String {
    let h = &settings.train.head;
    let mut s = format!(
        "tau={} fusion={} tuning={} share_weights={} layers={} seed={} params={}\n",
        h.tau,
        h.fusion.name(),
        h.tuning.name(),
        h.share_weights,
        h.layers,
        settings.train.seed,
        outcome.head.param_count()
    );
    s.push_str("epoch  loss\n");
    for (k, loss) in outcome.report.epoch_losses.iter().enumerate() {
        s.push_str(&format!("{:>5}  {loss:.6}\n", k + 1));
    }
    s.push_str(&format!("steps {}", outcome.report.steps));
    if let Some(a) = outcome.report.val_accuracy {
        s.push_str(&format!("  val accuracy {a:.4}"));
    }
    s.push_str(&format!("  wall {:.2}s\n", outcome.wall_time.as_secs_f64()));
    s
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
}

pub fn eval_table(outcome: &EvalOutcome, categories: &CategorySet) -> String {
    let r = &outcome.map;
    let width = r.per_category.iter().map(|c| c.name.len()).max().unwrap_or(8).max(8);
    let thr: Vec<String> = r.iou_thresholds.iter().map(|t| format!("{t:.2}")).collect();
    let mut s = format!("split={} iou={}\n", r.split.name(), thr.join(","));
    s.push_str(&format!("{:<width$}  {:<5}  {:>6}  {:>6}  {:>6}\n", "category", "split", "AP", "gt", "det"));
    for c in &r.per_category {
        let split = categories.index_of(&c.name).map_or("-", |i| categories.split(i).name());
        s.push_str(&format!("{:<width$}  {:<5}  {:>6}  {:>6}  {:>6}\n", c.name, split, fmt_ap(c.ap), c.num_gt, c.num_det));
    }
    s.push_str(&format!("{:<width$}  {:<5}  {:>6.4}  ({} categories evaluated)\n", "mAP", "", r.mean, r.evaluated()));
    if let Some(a) = outcome.accuracy {
        s.push_str(&format!("top-1 accuracy {a:.4}\n"));
    }
    s
}

pub fn eval_lines(outcome: &EvalOutcome, mut header: Map<String, Value>) -> Vec<String> {
    let r = &outcome.map;
    header.insert("split".into(), json!(r.split.name()));
    header.insert("iou_thresholds".into(), json!(r.iou_thresholds));
    let mut out = vec![line("header", header)];
    for c in &r.per_category {
        out.push(line("category", obj(json!({"name": c.name, "ap": c.ap, "num_gt": c.num_gt, "num_det": c.num_det}))));
    }
    out.push(line("summary", obj(json!({"map": r.mean, "evaluated": r.evaluated(), "accuracy": outcome.accuracy}))));
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "row", "params", "acc", "mAP");
    for r in rows {
        s.push_str(&format!("{:<width$}  {:>8}  {:>8.4}  {:>8.4}\n", r.label, r.params, r.accuracy, r.map));
    }
    s
}

pub fn ablation_lines(rows: &[AblationRow], header: Map<String, Value>) -> Vec<String> {
    let mut out = vec![line("header", header)];
    for r in rows {
        out.push(line(
            "row",
            obj(json!({
                "label": r.label,
                "fusion": r.head.fusion.name(),
                "tuning": r.head.tuning.name(),
                "share_weights": r.head.share_weights,
                "layers": r.head.layers,
                "use_ocr": r.head.use_ocr,
                "use_vision": r.head.use_vision,
                "params": r.params,
                "accuracy": r.accuracy,
                "map": r.map,
            })),
        ));
    }
    out
}
