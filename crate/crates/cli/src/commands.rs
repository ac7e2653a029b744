use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use treeprompt::conllu::parse_conllu;
use treeprompt::grounder::{pretrain_backbone, Dataset, GroundingExample, Split, VOCAB_FILE};
use treeprompt::numerics::checkpoint;
use treeprompt::trace_inspect::{export_trace, trace_example};
use treeprompt::train_eval::{
    ablate, evaluate_model, log_convergence, pretune_global, smooth, tune, ConvergenceLog, RunConfig, TrainError,
};
use treeprompt::tree_prompt::prompt_grad_check;
use treeprompt::injection::PromptMode;
use treeprompt::{FrozenBackbone32, ParamStore32, PromptedModel32, Tensor32};

use crate::config::Config;
use crate::{Cli, Command, Common, Failure};

pub const PROMPT_FILE: &str = "prompt.tpck";
pub const GLOBAL_FILE: &str = "global_ml.tpck";
pub const REPORT_FILE: &str = "report.json";
/// Gradient checks pass at or below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

/// Config-file values with command-line overrides applied.
fn effective_config(common: &Common) -> Result<Config, Failure> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).map_err(invalid)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(m) = common.prompt_mode {
        cfg.run.prompt_mode = m;
    }
    if common.no_tree {
        cfg.run.tree_enabled = false;
    }
    if common.no_modules {
        cfg.run.modules_enabled = false;
    }
    if let Some(n) = common.prompt_len {
        cfg.run.prompt_len = n;
    }
    let seed = cfg.seed().map_err(invalid)?;
    cfg.run.seed = seed;
    cfg.run.validate().map_err(invalid)?;
    cfg.data.world.validate().map_err(invalid)?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(invalid(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| invalid(anyhow!(e)))?;
    }
    // Commands that neither train nor sample do not need a seed.
    match &cli.command {
        Command::Parse { input } => return parse(input),
        Command::Plot { csv, window } => return plot(csv, *window, &cli.common),
        _ => {}
    }
    let cfg = effective_config(&cli.common)?;
    let out = out_dir(&cli.common);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let echoed = cfg.to_toml()?;
    fs::write(out.join("config.toml"), &echoed)?;
    log::info!("output directory {}", out.display());
    println!("# effective configuration\n{echoed}");
    let seed = cfg.seed.expect("checked");

    match cli.command {
        Command::Parse { .. } | Command::Plot { .. } => unreachable!(),
        Command::GenData => {
            let ds = Dataset::generate(seed, &cfg.data)?;
            ds.save(&out)?;
            ds.vocab().save(&out.join(VOCAB_FILE))?;
            for s in Split::ALL {
                println!("{s}: {} examples", ds.split(s).len());
            }
        }
        Command::PretrainBackbone { data } => {
            let ds = dataset(data.as_deref(), &cfg, &out)?;
            let fb = pretrain(&ds, &cfg, &out.join("backbone"))?;
            println!("backbone hash {}", fb.hash());
        }
        Command::Tune { data, backbone, global } => {
            let ds = dataset(data.as_deref(), &cfg, &out)?;
            let fb = frozen(backbone.as_deref(), &ds, &cfg, &out)?;
            let global = global_prompt(global.as_deref(), &fb, &ds, &cfg.run, &out)?;
            let (report, model) = tune(&fb, &ds, &cfg.run, global.as_ref())?;
            checkpoint::save(&model.prompt_store(), &out.join(PROMPT_FILE), serde_json::to_value(&cfg.run)?)?;
            write_json(&out.join(REPORT_FILE), &report)?;
            let losses: String = report.step_losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)).collect();
            fs::write(out.join("loss.csv"), format!("step,loss\n{losses}"))?;
            println!("{} (best epoch {})", report.variant, report.best_epoch);
            for (split, acc) in &report.test_accuracy {
                println!("{split}: {acc:.4}");
            }
        }
        Command::Eval { data, backbone, prompt, split } => {
            let split: Split = split.parse().map_err(|e: String| invalid(anyhow!(e)))?;
            let ds = dataset(data.as_deref(), &cfg, &out)?;
            let fb = frozen(backbone.as_deref(), &ds, &cfg, &out)?;
            let model = load_model(&fb, &prompt)?;
            let examples = ds.split(split);
            let acc = evaluate_model(&model, examples)?;
            write_json(&out.join("eval.json"), &serde_json::json!({ "split": split.to_string(), "examples": examples.len(), "accuracy": acc }))?;
            println!("{split}: {acc:.4} on {} examples", examples.len());
        }
        Command::Ablate { data, backbone } => {
            let ds = dataset(data.as_deref(), &cfg, &out)?;
            let fb = frozen(backbone.as_deref(), &ds, &cfg, &out)?;
            let report = ablate(&fb, &ds, &cfg.run, &cfg.ablation)?;
            fs::write(out.join("ablation.md"), report.to_markdown())?;
            fs::write(out.join("ablation.csv"), report.cells_csv())?;
            fs::write(out.join("lengths.csv"), report.lengths_csv())?;
            write_json(&out.join(REPORT_FILE), &report)?;
            let first = cfg.ablation.seeds[0];
            let run_of = |v: &str| report.runs.iter().find(|r| r.variant == v && r.seed == first && r.config.prompt_len == cfg.run.prompt_len);
            if let (Some(a), Some(b)) = (run_of("full"), run_of("continuous")) {
                let log = log_convergence(a, b, CONVERGENCE_WINDOW)?;
                fs::write(out.join("convergence.csv"), log.to_csv())?;
                fs::write(out.join("convergence.svg"), loss_svg(&log))?;
                write_json(&out.join("convergence.json"), &summary(&log))?;
            }
            println!("{}", report.to_markdown());
        }
        Command::Inspect { data, backbone, prompt, example } => {
            let ds = dataset(data.as_deref(), &cfg, &out)?;
            let fb = frozen(backbone.as_deref(), &ds, &cfg, &out)?;
            let model = load_model(&fb, &prompt)?;
            let e = find_example(&ds, &example).ok_or_else(|| invalid(anyhow!("no example with id `{example}`")))?;
            let trace = trace_example(&model, e)?;
            export_trace(&trace, &out)?;
            println!("{} nodes traced; prediction IoU {:.3}", trace.nodes.len(), trace.prediction_iou);
        }
        Command::GradCheck => {
            let r = prompt_grad_check(seed)?;
            let worst = r.worst.as_ref().map_or(String::from("-"), |(n, i)| format!("{n}[{i}]"));
            println!("max relative error {:.3e} over {} entries (worst {worst})", r.max_rel_error, r.entries_checked);
            if !(r.max_rel_error <= GRAD_TOLERANCE) {
                return Err(Failure::Runtime(anyhow!("gradient check failed: {:.3e} > {GRAD_TOLERANCE:e}", r.max_rel_error)));
            }
        }
    }
    Ok(())
}

/// Steps in the trailing mean applied to loss curves.
pub const CONVERGENCE_WINDOW: usize = 50;

fn summary(log: &ConvergenceLog) -> serde_json::Value {
    serde_json::json!({
        "label_a": log.label_a,
        "label_b": log.label_b,
        "steps": log.loss_a.len(),
        "window": log.window,
        "threshold": log.threshold,
        "steps_a": log.steps_a,
        "steps_b": log.steps_b,
        "ratio_to_total": log.ratio_to_total,
        "truncated_from": log.truncated_from,
    })
}

fn parse(input: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display())).map_err(invalid)?;
    let trees = parse_conllu(&text).map_err(invalid)?;
    for t in trees {
        let t = t.without_punct().map_err(invalid)?;
        let routes = t.routes();
        let tokens: Vec<_> = t
            .nodes()
            .iter()
            .zip(&routes)
            .map(|(n, m)| serde_json::json!({ "index": n.index, "word": n.word, "dep": n.dep, "head": n.head, "module": m }))
            .collect();
        println!("{}", serde_json::json!({ "sentence_id": t.sentence_id, "text": t.text(), "tokens": tokens }));
    }
    Ok(())
}

fn dataset(dir: Option<&Path>, cfg: &Config, out: &Path) -> anyhow::Result<Dataset> {
    match dir {
        Some(d) => Ok(Dataset::load(d).with_context(|| format!("loading dataset from {}", d.display()))?),
        None => {
            log::info!("no --data given; generating the dataset");
            let ds = Dataset::generate(cfg.seed.expect("checked"), &cfg.data)?;
            ds.save(&out.join("data"))?;
            Ok(ds)
        }
    }
}

fn pretrain(ds: &Dataset, cfg: &Config, dir: &Path) -> anyhow::Result<FrozenBackbone32> {
    let vocab = ds.vocab();
    let bcfg = cfg.backbone.config(cfg.data.world.feature_dim(), vocab.words.len());
    let (fb, report) = pretrain_backbone::<f32>(ds, bcfg, &cfg.pretrain, cfg.seed.expect("checked"))?;
    fb.save(dir)?;
    write_json(&dir.join("pretrain.json"), &report)?;
    log::info!(
        "pretrained backbone in {} epochs: simple test {:.3}, compositional {:.3}",
        report.epochs,
        report.simple_test_accuracy,
        report.compositional_floor
    );
    Ok(fb)
}

fn frozen(dir: Option<&Path>, ds: &Dataset, cfg: &Config, out: &Path) -> anyhow::Result<FrozenBackbone32> {
    match dir {
        Some(d) => Ok(FrozenBackbone32::load(d).with_context(|| format!("loading backbone from {}", d.display()))?),
        None => {
            log::info!("no --backbone given; pretraining one");
            pretrain(ds, cfg, &out.join("backbone"))
        }
    }
}

/// The frozen global multi-layer prompt for multi mode: loaded, or pretuned
/// and saved next to the run.
fn global_prompt(
    path: Option<&Path>,
    fb: &FrozenBackbone32,
    ds: &Dataset,
    run: &RunConfig,
    out: &Path,
) -> anyhow::Result<Option<Tensor32>> {
    if run.prompt_mode != PromptMode::Multi {
        return Ok(None);
    }
    let name = treeprompt::injection::GLOBAL_MULTI_PROMPT;
    if let Some(p) = path {
        let (store, _) = checkpoint::load::<f32>(p)?;
        let t = store.by_name(name).ok_or_else(|| anyhow!("{} has no `{name}`", p.display()))?;
        return Ok(Some(t.clone()));
    }
    log::info!("pretuning the global multi-layer prompt");
    let (t, report) = pretune_global(fb, ds, run)?;
    let mut store = ParamStore32::new();
    store.insert(name, t.clone())?;
    checkpoint::save(&store, &out.join(GLOBAL_FILE), serde_json::to_value(&report)?)?;
    Ok(Some(t))
}

/// Rebuilds a tuned model from the output directory of `tune`.
fn load_model(fb: &FrozenBackbone32, dir: &Path) -> Result<PromptedModel32, Failure> {
    let path = if dir.is_dir() { dir.join(PROMPT_FILE) } else { dir.to_path_buf() };
    let (store, manifest) = checkpoint::load::<f32>(&path).with_context(|| format!("loading {}", path.display()))?;
    let meta = manifest.map(|m| m.meta).filter(|m| !m.is_null()).ok_or_else(|| invalid(anyhow!("{} has no run configuration", path.display())))?;
    let run: RunConfig = serde_json::from_value(meta).map_err(invalid)?;
    let global = store.by_name(treeprompt::injection::GLOBAL_MULTI_PROMPT);
    let mut model = PromptedModel32::build(fb, &run, global)?;
    model.load_prompt(&store).map_err(|e| match e {
        TrainError::Config(m) => invalid(anyhow!(m)),
        e => Failure::Runtime(e.into()),
    })?;
    Ok(model)
}

fn find_example<'d>(ds: &'d Dataset, id: &str) -> Option<&'d GroundingExample> {
    Split::ALL.into_iter().flat_map(|s| ds.split(s)).find(|e| e.id == id)
}

fn plot(csv: &Path, window: usize, common: &Common) -> Result<(), Failure> {
    if window == 0 {
        return Err(invalid(anyhow!("--window must be positive")));
    }
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display())).map_err(invalid)?;
    let (a, b) = ConvergenceLog::parse_csv(&text).map_err(invalid)?;
    if a.is_empty() {
        return Err(invalid(anyhow!("{} has no rows", csv.display())));
    }
    let log = ConvergenceLog::from_curves("A", &a, "B", &b, window);
    let target = match &common.out {
        Some(o) => {
            fs::create_dir_all(o)?;
            o.join("convergence.svg")
        }
        None => csv.with_extension("svg"),
    };
    fs::write(&target, loss_svg(&log))?;
    println!("{}", serde_json::to_string_pretty(&summary(&log)).map_err(|e| Failure::Runtime(e.into()))?);
    println!("wrote {}", target.display());
    Ok(())
}

/// Smoothed loss curves of both runs plus the threshold line, as SVG.
pub fn loss_svg(log: &ConvergenceLog) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let sa = smooth(&log.loss_a, log.window);
    let sb = smooth(&log.loss_b, log.window);
    let all = sa.iter().chain(&sb).copied().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let n = sa.len().max(2) as f64;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let path = |s: &[f64]| s.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect::<Vec<_>>().join(" ");
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    svg += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    svg += &format!(
        "<line x1=\"{pad}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n",
        y(log.threshold),
        w - pad
    );
    svg += &format!("<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"{}\"/>\n", path(&sa));
    svg += &format!("<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n", path(&sb));
    svg += &format!("<text x=\"{pad}\" y=\"20\" fill=\"#d62728\">{}</text>\n", log.label_a);
    svg += &format!("<text x=\"{}\" y=\"20\" fill=\"#1f77b4\">{}</text>\n", pad + 120.0, log.label_b);
    svg += &format!("<text x=\"{pad}\" y=\"{}\">step (smoothed over {})</text>\n", h - 10.0, log.window);
    svg += &format!("<text x=\"4\" y=\"{:.1}\">{hi:.2}</text><text x=\"4\" y=\"{:.1}\">{lo:.2}</text>\n", y(hi) + 4.0, y(lo));
    svg += "</svg>\n";
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic() {
        let log = ConvergenceLog::from_curves("a", &[3.0, 2.0, 1.0], "b", &[3.0, 2.5, 2.0], 2);
        assert_eq!(loss_svg(&log), loss_svg(&log));
        assert!(loss_svg(&log).contains("<polyline"));
    }

    #[test]
    fn missing_seed_is_a_validation_error() {
        let common = Common {
            seed: None,
            out: None,
            config: None,
            prompt_mode: None,
            no_tree: false,
            no_modules: false,
            prompt_len: None,
            threads: None,
        };
        match effective_config(&common) {
            Err(Failure::Validation(e)) => assert!(e.to_string().contains("seed")),
            _ => panic!("expected a validation failure"),
        }
    }
}
