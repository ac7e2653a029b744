//! Per-node reasoning traces: each intermediate prompt is probed on its own
//! and the results are exported as JSON plus a static HTML page.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conllu::ModuleKind;
use crate::grounder::{argmax, iou, BBox, FrozenBackbone, GroundingExample};
use crate::numerics::{Graph, Tensor};
use crate::train_eval::{PromptedModel, TrainError};
use crate::Scalar;

/// Dimensions of `h` kept in a trace for display.
pub const SHOWN_DIMS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub index: usize,
    pub word: String,
    pub module: ModuleKind,
    pub head: usize,
    pub dep: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<usize>,
    pub h: Vec<f64>,
    pub probe_region: usize,
    pub probe_box: BBox,
    pub probe_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub example_id: String,
    pub sentence: String,
    /// `(head, dependent)` pairs, 1-based.
    pub edges: Vec<(usize, usize)>,
    pub image_px: usize,
    pub objects: Vec<SceneObject>,
    pub gold_box: BBox,
    pub prediction_box: BBox,
    pub prediction_iou: f64,
    pub nodes: Vec<NodeTrace>,
}

/// Predicted region when the backbone is prompted by `h` alone: a
/// one-row `H` fused with the global prompt exactly as the full tree is.
pub fn probe_node<T: Scalar>(model: &PromptedModel<T>, h: &[T], example: &GroundingExample) -> Result<usize, TrainError> {
    if model.config.tree_enabled || model.config.modules_enabled {
        let mut g = Graph::inference(&model.store);
        let row = g.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
        let hm = model.tree.stack_with_positions(&mut g, &[row])?;
        let p = model.tree.fuse_with_global(&mut g, hm)?;
        let prompt = model.deliver(&mut g, p)?;
        let ids = model.vocab.word_ids(&example.tree.words());
        let (scores, _) = model.backbone.forward(&mut g, &ids, &FrozenBackbone::features(&example.scene), &prompt)?;
        Ok(argmax(g.value(scores).data()))
    } else {
        Err(TrainError::Config("a continuous prompt has no node prompts to probe".into()))
    }
}

pub fn trace_example<T: Scalar>(model: &PromptedModel<T>, example: &GroundingExample) -> Result<Trace, TrainError> {
    let nodes = model.tree.node_prompts(&model.store, &example.tree, &model.vocab)?;
    let mut traces = Vec::with_capacity(nodes.len());
    for n in &nodes {
        let region = probe_node(model, &n.h, example)?;
        let bx = example.scene.region(region);
        let node = example.tree.node(n.index);
        traces.push(NodeTrace {
            index: n.index,
            word: node.word.clone(),
            module: n.kind,
            head: node.head,
            dep: node.dep.clone(),
            children: n.children.clone(),
            h: n.h.iter().take(SHOWN_DIMS).map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            probe_region: region,
            probe_box: bx,
            probe_iou: iou(&bx, &example.gold_box)?,
        });
    }
    let pred = example.scene.region(model.predict(example)?);
    Ok(Trace {
        example_id: example.id.clone(),
        sentence: example.query.clone(),
        edges: example.tree.edges(),
        image_px: example.scene.image_px(),
        objects: example
            .scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| SceneObject {
                label: format!("{} {} {}", o.size.word(), o.color.word(), o.shape.word()),
                bbox: example.scene.region(i),
            })
            .collect(),
        gold_box: example.gold_box,
        prediction_box: pred,
        prediction_iou: iou(&pred, &example.gold_box)?,
        nodes: traces,
    })
}

/// CSS class and colour per module: Enti red, Rel green, Leaf blue.
pub fn module_style(kind: ModuleKind) -> (&'static str, &'static str) {
    match kind {
        ModuleKind::Enti => ("enti", "#d62728"),
        ModuleKind::Rel => ("rel", "#2ca02c"),
        ModuleKind::Leaf => ("leaf", "#1f77b4"),
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn rect(out: &mut String, b: &BBox, scale: f64, attrs: &str) {
    let _ = write!(
        out,
        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" {attrs}/>"#,
        b.x1 * scale,
        b.y1 * scale,
        (b.x2 - b.x1) * scale,
        (b.y2 - b.y1) * scale
    );
}

fn depth(trace: &Trace, index: usize) -> usize {
    let mut d = 0;
    let mut cur = index;
    while let Some(n) = trace.nodes.iter().find(|n| n.index == cur) {
        if n.head == 0 {
            break;
        }
        cur = n.head;
        d += 1;
    }
    d
}

/// Static page: dependency tree with module-coloured nodes, the scene with
/// gold and predicted boxes, and a per-node probe table. No scripting.
pub fn render_html(trace: &Trace) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>");
    out.push_str(&esc(&trace.example_id));
    out.push_str("</title>\n<style>\nbody{font-family:sans-serif;margin:1.5em}\n");
    for kind in ModuleKind::ALL {
        let (class, color) = module_style(kind);
        let _ = writeln!(out, "circle.{class},span.{class}{{fill:{color};background:{color}}}");
    }
    out.push_str("span.swatch{display:inline-block;width:0.8em;height:0.8em;margin-right:0.3em}\ntable{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 6px}\n</style></head><body>\n");
    let _ = writeln!(out, "<h1>{}</h1>\n<p>{}</p>", esc(&trace.example_id), esc(&trace.sentence));
    out.push_str("<p>");
    for kind in ModuleKind::ALL {
        let (class, _) = module_style(kind);
        let _ = write!(out, "<span class=\"swatch {class}\"></span>{} ", kind.name());
    }
    out.push_str("</p>\n");

    let (dx, dy) = (70.0, 70.0);
    let max_depth = trace.nodes.iter().map(|n| depth(trace, n.index)).max().unwrap_or(0);
    let width = dx * (trace.nodes.len() as f64 + 1.0);
    let height = dy * (max_depth as f64 + 1.5);
    let pos = |i: usize| (dx * i as f64, 30.0 + dy * depth(trace, i) as f64);
    let _ = writeln!(out, "<svg class=\"tree\" width=\"{width:.0}\" height=\"{height:.0}\" xmlns=\"http://www.w3.org/2000/svg\">");
    for &(h, d) in &trace.edges {
        let ((x1, y1), (x2, y2)) = (pos(h), pos(d));
        let _ = writeln!(out, r##"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="#888"/>"##);
    }
    for n in &trace.nodes {
        let (x, y) = pos(n.index);
        let (class, _) = module_style(n.module);
        let _ = writeln!(
            out,
            r#"<circle class="{class}" cx="{x:.1}" cy="{y:.1}" r="9"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            y + 24.0,
            esc(&n.word)
        );
    }
    out.push_str("</svg>\n");

    let scale = 4.0;
    let side = trace.image_px as f64 * scale;
    let _ = writeln!(out, "<svg class=\"scene\" width=\"{side:.0}\" height=\"{side:.0}\" xmlns=\"http://www.w3.org/2000/svg\">");
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{side:.0}" height="{side:.0}" fill="#f7f7f7" stroke="#333"/>"##);
    for o in &trace.objects {
        rect(&mut out, &o.bbox, scale, r##"fill="#ddd" stroke="#999""##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="9">{}</text>"#, o.bbox.x1 * scale + 2.0, o.bbox.y1 * scale + 10.0, esc(&o.label));
    }
    rect(&mut out, &trace.gold_box, scale, r##"fill="none" stroke="#000" stroke-width="3""##);
    rect(&mut out, &trace.prediction_box, scale, r##"fill="none" stroke="#ff7f0e" stroke-width="2" stroke-dasharray="6 3""##);
    out.push_str("\n</svg>\n");
    let _ = writeln!(out, "<p>gold: solid black; prediction (IoU {:.2}): dashed orange</p>", trace.prediction_iou);

    out.push_str("<table><tr><th>#</th><th>word</th><th>module</th><th>dep</th><th>probe region</th><th>probe IoU</th><th>h[..8]</th></tr>\n");
    for n in &trace.nodes {
        let (class, _) = module_style(n.module);
        let h: Vec<String> = n.h.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td><span class=\"swatch {class}\"></span>{}</td><td>{}</td><td>{}</td><td>{:.2}</td><td>{}</td></tr>",
            n.index,
            esc(&n.word),
            n.module.name(),
            esc(&n.dep),
            n.probe_region,
            n.probe_iou,
            h.join(" ")
        );
    }
    out.push_str("</table>\n</body></html>\n");
    out
}

pub const TRACE_JSON: &str = "trace.json";
pub const TRACE_HTML: &str = "trace.html";

/// Writes `trace.json` and `trace.html` into `dir`.
pub fn export_trace(trace: &Trace, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRACE_JSON), serde_json::to_string_pretty(trace)?)?;
    fs::write(dir.join(TRACE_HTML), render_html(trace))?;
    Ok(())
}

pub fn load_trace(path: &Path) -> std::io::Result<Trace> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// JSON Schema for `trace.json`.
pub const TRACE_SCHEMA: &str = include_str!("../schema/trace.schema.json");
