//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! The directional experiments use the shipped desk configuration
//! (`configs/desk.toml`); artifacts land in `$CARGO_TARGET_TMPDIR/acceptance`.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use treeprompt::conllu::{parse_conllu, serialize_document, DepTree, ModuleKind};
use treeprompt::grounder::{
    iou, pretrain_backbone, BBox, BackboneConfig, Dataset, DatasetConfig, FrozenBackbone, PretrainConfig, Split,
};
use treeprompt::injection::{expand_multi_layer, MultiLayerExpander};
use treeprompt::numerics::checkpoint::sha256_hex;
use treeprompt::numerics::{Graph, ParamStore};
use treeprompt::train_eval::{ablate, log_convergence, AblationConfig, AblationReport, RunConfig, SWEEP_LENGTHS};
use treeprompt::tree_prompt::{prompt_grad_check, TreePrompt, TreePromptConfig, Vocab};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET_S: f64 = 60.0;
const LOCALITY_TREES: usize = 200;
const LOCALITY_MAX_NODES: usize = 12;
const LOCALITY_BUDGET_S: f64 = 30.0;
const TABLE_MARGIN: f64 = 0.02;
const TABLE_BUDGET_S: f64 = 45.0 * 60.0;
const CONVERGENCE_RATIO: f64 = 0.8;
const CONVERGENCE_WINDOW: usize = 50;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Outcome { name, pass, detail });
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> Vec<(PathBuf, String)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(workspace().join("fixtures"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "conllu"))
        .collect();
    files.sort();
    files.into_iter().map(|p| (p.clone(), std::fs::read_to_string(&p).unwrap())).collect()
}

fn fixture_trees() -> Vec<DepTree> {
    fixtures().iter().flat_map(|(_, text)| parse_conllu(text).unwrap()).collect()
}

fn grad_fidelity(results: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..GRAD_SEEDS {
        let r = prompt_grad_check(seed).unwrap();
        worst = worst.max(r.max_rel_error);
        entries += r.entries_checked;
    }
    let secs = start.elapsed().as_secs_f64();
    record(
        results,
        "gradient fidelity",
        worst <= GRAD_TOL && secs < GRAD_BUDGET_S,
        format!("max rel error {worst:.2e} (tol {GRAD_TOL:e}) over {entries} entries, {GRAD_SEEDS} seeds, {secs:.1}s (< {GRAD_BUDGET_S}s)"),
    );
}

fn subtree_locality(results: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let vocab = common::pool_vocab();
    let config = TreePromptConfig { d_w: 6, d_l: 3, d_p: 8, prompt_len: 8, max_tree_len: 16, init_std: 0.5, ..Default::default() };
    let (mut violations, mut comparisons) = (0, 0);
    for t in 0..LOCALITY_TREES {
        let n = 2 + t % (LOCALITY_MAX_NODES - 1);
        let tree = common::random_tree(&mut rng, n);
        let mut store = ParamStore::<f64>::new();
        let tp = TreePrompt::register(&mut store, config.clone(), &vocab, &mut rng).unwrap();
        let base = tp.node_prompts(&store, &tree, &vocab).unwrap();
        for target in 1..=n {
            let word = if tree.node(target).word == "ball" { "cube" } else { "ball" };
            let changed = tp.node_prompts(&store, &common::with_word(&tree, target, word), &vocab).unwrap();
            for i in 1..=n {
                if !tree.subtree(i).contains(&target) {
                    comparisons += 1;
                    violations += usize::from(base[i - 1].h != changed[i - 1].h);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    record(
        results,
        "subtree locality",
        violations == 0 && comparisons > 0 && secs < LOCALITY_BUDGET_S,
        format!("{violations} bitwise violations in {comparisons} out-of-subtree comparisons over {LOCALITY_TREES} trees, {secs:.2}s (< {LOCALITY_BUDGET_S}s)"),
    );
}

/// Shape checks for one prompt configuration over a set of trees.
fn shape_violations(trees: &[&DepTree], d_w: usize, d_l: usize, d_p: usize, n: usize, layers: usize) -> (usize, usize) {
    let vocab = Vocab::build(trees.iter().copied(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = TreePromptConfig { d_w, d_l, d_p, prompt_len: n, max_tree_len: 32, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    let tp = TreePrompt::register(&mut store, config.clone(), &vocab, &mut rng).unwrap();
    let expander = MultiLayerExpander::register(&mut store, d_p, layers, &mut rng).unwrap();
    let tables = tp.tables(&store).unwrap();
    let pos = store.by_name("tree.pos_embed").unwrap().clone();
    let mut bad = 0;
    for tree in trees {
        let mut check = |ok: bool| bad += usize::from(!ok);
        for node in tree.nodes() {
            check(treeprompt::tree_prompt::embed_node(node, &vocab, &tables).len() == d_w + 2 * d_l);
        }
        check(config.d_n() == d_w + 2 * d_l);
        let mut g = Graph::inference(&store);
        let nodes = tp.compose_tree(&mut g, tree, &vocab).unwrap();
        let h = tp.order_prompts(&mut g, &nodes, tree).unwrap();
        let hv = g.value(h).clone();
        check(hv.shape() == [tree.len(), d_p]);
        let root = g.value(nodes[tree.root() - 1].h).data().to_vec();
        let want: Vec<f64> = root.iter().zip(pos.row_slice(0)).map(|(a, b)| a + b).collect();
        check(hv.row_slice(0) == &want[..]);
        let p = tp.fuse_with_global(&mut g, h).unwrap();
        check(g.value(p).shape() == [n, d_p]);
        let ex = expander.expand(&mut g, p).unwrap();
        let per_layer = expander.layer_prompts(&mut g, ex, None).unwrap();
        check(per_layer.len() == layers && per_layer.iter().all(|v| g.value(*v).shape() == [n, d_p]));
        let tensor = expand_multi_layer(g.value(p), &expander.mlp(&store), layers).unwrap();
        check(tensor.shape() == [layers, n, d_p]);
    }
    (bad, trees.len())
}

fn shape_chain(results: &mut Vec<Outcome>, templates: &Dataset) {
    let fixture = fixture_trees();
    let mut trees: Vec<&DepTree> = fixture.iter().collect();
    for s in Split::ALL {
        trees.extend(templates.split(s).iter().take(100).map(|e| &e.tree));
    }
    let mut violations = 0;
    let mut details = Vec::new();
    // Desk width, then the default width with N = 64 and L = 4.
    for (d_w, d_l, d_p, n, l) in [(32, 8, 32, 16, 2), (32, 8, 64, 64, 4), (6, 3, 8, 8, 1)] {
        let (bad, count) = shape_violations(&trees, d_w, d_l, d_p, n, l);
        violations += bad;
        details.push(format!("d_p={d_p} N={n} L={l}: {bad}/{count}"));
    }
    record(
        results,
        "shape chain",
        violations == 0,
        format!("{violations} violations over {} fixture + template trees ({})", trees.len(), details.join(", ")),
    );
}

fn routing(results: &mut Vec<Outcome>) {
    let trees = fixture_trees();
    let sentence = "a woman with flowers on her sweater holding a remote";
    let Some(t) = trees.iter().find(|t| t.text() == sentence) else {
        record(results, "routing conformance", false, "figure sentence missing from fixtures".into());
        return;
    };
    let routes = t.routes();
    let kind = |w: &str| t.nodes().iter().position(|n| n.word == w).map(|i| routes[i]);
    let got = [("remote", kind("remote")), ("holding", kind("holding")), ("woman", kind("woman"))];
    let want = [ModuleKind::Leaf, ModuleKind::Rel, ModuleKind::Enti];
    let pass = got.iter().zip(want).all(|((_, g), w)| *g == Some(w));
    let shown: Vec<String> = got.iter().map(|(w, k)| format!("{w}→{}", k.map_or("?", |k| k.name()))).collect();
    record(results, "routing conformance", pass, shown.join(", "));
}

/// Token tuples straight from the text, independent of the parser.
fn token_tuples(text: &str) -> Vec<(String, String, String, String, String)> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[0].into(), c[1].to_lowercase(), c[3].into(), c[6].into(), c[7].into())
        })
        .collect()
}

fn conllu_round_trip(results: &mut Vec<Outcome>) {
    let mut bad = Vec::new();
    let mut sentences = 0;
    for (path, text) in fixtures() {
        let trees = parse_conllu(&text).unwrap();
        sentences += trees.len();
        let out = serialize_document(&trees);
        let same = out == text && token_tuples(&out) == token_tuples(&text) && parse_conllu(&out).unwrap() == trees;
        if !same {
            bad.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    record(
        results,
        "CoNLL-U round trip",
        bad.is_empty() && sentences > 0,
        format!("{sentences} sentences; mismatching files: {bad:?}"),
    );
}

fn iou_cases(results: &mut Vec<Outcome>) {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let same = iou(&a, &a).unwrap();
    let disjoint = iou(&a, &BBox::new(3.0, 3.0, 4.0, 4.0)).unwrap();
    let partial = iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap();
    record(
        results,
        "IoU unit cases",
        same == 1.0 && disjoint == 0.0 && partial == 1.0 / 7.0,
        format!("identical {same}, disjoint {disjoint}, overlap {partial} (1/7 = {})", 1.0 / 7.0),
    );
}

fn default_max_text_len() -> usize {
    24
}

#[derive(Deserialize)]
struct DeskBackbone {
    d_model: usize,
    layers: usize,
    heads: usize,
    ffn: usize,
    #[serde(default = "default_max_text_len")]
    max_text_len: usize,
}

#[derive(Deserialize)]
struct Desk {
    seed: u64,
    #[serde(default)]
    data: DatasetConfig,
    backbone: DeskBackbone,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default)]
    run: RunConfig,
    #[serde(default)]
    ablation: AblationConfig,
}

struct Experiment {
    report: AblationReport,
    seconds: f64,
    pretrain_seconds: f64,
    hash_before: String,
    hash_after: String,
}

fn run_experiment(desk: &Desk, ds: &Dataset, out: &Path) -> Experiment {
    let start = Instant::now();
    let vocab = ds.vocab();
    let b = &desk.backbone;
    let config = BackboneConfig {
        d_model: b.d_model,
        layers: b.layers,
        heads: b.heads,
        ffn: b.ffn,
        max_text_len: b.max_text_len,
        ..BackboneConfig::new(desk.data.world.feature_dim(), vocab.words.len())
    };
    let (fb, pre) = pretrain_backbone::<f32>(ds, config, &desk.pretrain, desk.seed).unwrap();
    println!(
        "  backbone: {} params, {} epochs, simple test {:.3}, compositional floor {:.3}",
        pre.parameters, pre.epochs, pre.simple_test_accuracy, pre.compositional_floor
    );
    let dir = out.join("backbone");
    fb.save(&dir).unwrap();
    let file_hash = || sha256_hex(&std::fs::read(dir.join(treeprompt::grounder::CHECKPOINT_FILE)).unwrap());
    let hash_before = file_hash();
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let frozen = FrozenBackbone::<f32>::load(&dir).unwrap();
    let run = RunConfig { seed: desk.seed, ..desk.run.clone() };
    let report = ablate(&frozen, ds, &run, &desk.ablation).unwrap();
    let reloaded = FrozenBackbone::<f32>::load(&dir).unwrap();
    let in_memory_same = frozen.hash() == reloaded.hash();
    let hash_after = if in_memory_same { file_hash() } else { String::from("in-memory backbone diverged") };
    Experiment { report, seconds: start.elapsed().as_secs_f64(), pretrain_seconds, hash_before, hash_after }
}

fn frozen_invariance(results: &mut Vec<Outcome>, ex: &Experiment, epochs: usize) {
    let runs = &ex.report.runs;
    let per_run = runs.iter().all(|r| r.backbone_hash_before == r.backbone_hash_after);
    let all_twenty = runs.iter().filter(|r| r.config.epochs_tree >= 20).count();
    record(
        results,
        "frozen backbone",
        ex.hash_before == ex.hash_after && per_run && all_twenty > 0,
        format!(
            "checkpoint sha256 {}… before and {}… after {} tuning runs ({} at {epochs} epochs, plus the length sweep); per-run hashes equal: {per_run}",
            &ex.hash_before[..12],
            &ex.hash_after[..12.min(ex.hash_after.len())],
            runs.len(),
            all_twenty
        ),
    );
}

fn table(results: &mut Vec<Outcome>, ex: &Experiment) {
    let mean = |v: &str| ex.report.cell(v).map_or(f64::NAN, |c| c.mean);
    let (full, no_tree, no_module, cont) = (mean("full"), mean("w/o tree"), mean("w/o module"), mean("continuous"));
    let pass = full >= no_tree && full >= no_module && full >= cont + TABLE_MARGIN && ex.seconds < TABLE_BUDGET_S;
    let seeds = ex.report.seeds.len();
    record(
        results,
        "ablation ordering",
        pass && seeds >= 3,
        format!(
            "mean over {seeds} seeds: full {full:.3}, w/o tree {no_tree:.3}, w/o module {no_module:.3}, continuous {cont:.3} (margin {:+.3} vs {TABLE_MARGIN}); total {:.1} min incl. {:.1} min pretraining (< 45)",
            full - cont,
            ex.seconds / 60.0,
            ex.pretrain_seconds / 60.0
        ),
    );
}

fn convergence(results: &mut Vec<Outcome>, ex: &Experiment, out: &Path) {
    let seed = ex.report.seeds[0];
    let base_len = ex.report.runs.iter().find(|r| r.variant == "full").map(|r| r.config.prompt_len);
    let find = |v: &str| ex.report.runs.iter().find(|r| r.variant == v && r.seed == seed && Some(r.config.prompt_len) == base_len);
    let (Some(a), Some(b)) = (find("full"), find("continuous")) else {
        record(results, "convergence speed", false, "missing full or continuous run".into());
        return;
    };
    let log = log_convergence(a, b, CONVERGENCE_WINDOW).unwrap();
    std::fs::write(out.join("convergence.csv"), log.to_csv()).unwrap();
    let total = log.loss_b.len();
    let pass = log.ratio_to_total.is_some_and(|r| r <= CONVERGENCE_RATIO);
    let strict = match (log.steps_a, log.steps_b) {
        (Some(sa), Some(sb)) => format!("{:.2}× the baseline's own first crossing ({sa} vs {sb})", sa as f64 / sb as f64),
        _ => "n/a".into(),
    };
    record(
        results,
        "convergence speed",
        pass,
        format!(
            "seed {seed}: full reaches continuous final smoothed loss {:.4} at step {} of {total} = {:.3}× (≤ {CONVERGENCE_RATIO}); stricter reading {strict}",
            log.threshold,
            log.steps_a.map_or("never".into(), |s| s.to_string()),
            log.ratio_to_total.unwrap_or(f64::NAN)
        ),
    );
}

fn length_sweep(results: &mut Vec<Outcome>, ex: &Experiment) {
    let got: Vec<usize> = ex.report.lengths.iter().map(|r| r.prompt_len).collect();
    let finite = ex.report.lengths.iter().all(|r| r.accuracy.is_finite());
    let want: BTreeSet<usize> = SWEEP_LENGTHS.into_iter().collect();
    let rows: Vec<String> = ex.report.lengths.iter().map(|r| format!("{}:{:.3}", r.prompt_len, r.accuracy)).collect();
    record(
        results,
        "length sweep",
        got.len() == 5 && got.iter().copied().collect::<BTreeSet<_>>() == want && finite,
        format!("rows {}", rows.join(", ")),
    );
}

fn main() {
    let mut results = Vec::new();
    grad_fidelity(&mut results);
    subtree_locality(&mut results);
    routing(&mut results);
    conllu_round_trip(&mut results);
    iou_cases(&mut results);

    let desk_path = workspace().join("configs/desk.toml");
    let desk: Desk = toml::from_str(&std::fs::read_to_string(&desk_path).unwrap()).unwrap();
    let ds = Dataset::generate(desk.seed, &desk.data).unwrap();
    shape_chain(&mut results, &ds);

    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out).unwrap();
    println!("  desk experiment ({}); artifacts in {}", desk_path.display(), out.display());
    let ex = run_experiment(&desk, &ds, &out);
    std::fs::write(out.join("ablation.md"), ex.report.to_markdown()).unwrap();
    std::fs::write(out.join("lengths.csv"), ex.report.lengths_csv()).unwrap();
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&ex.report).unwrap()).unwrap();
    frozen_invariance(&mut results, &ex, desk.run.epochs_tree);
    table(&mut results, &ex);
    convergence(&mut results, &ex, &out);
    length_sweep(&mut results, &ex);
    println!("{}", ex.report.to_markdown());

    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        for r in results.iter().filter(|r| !r.pass) {
            eprintln!("failed: {} ({})", r.name, r.detail);
        }
        std::process::exit(1);
    }
}
