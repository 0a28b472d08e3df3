//! Command-line front end. Every subcommand is a thin shell over the
//! library; `run` returns the process exit code.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ograph_core::embed::{HashEmbedder, TextEmbedder};
use ograph_core::ifa::{FeatureProvider, PassThrough};
use ograph_core::pipeline::{build_scene, scene_stats, SceneStats};
use ograph_core::planning::{plan, PlanMode, PlanRequest, PlanStatus};
use ograph_core::retrieval::{execute, plan_query, ExecOptions, PlanError, Planner, RetrievalError};
use ograph_core::{Point3, SceneGraph};

use crate::bundle::{read_bundle, write_bundle};
use crate::codec::{self, CodecError};
use crate::http::{HttpChatClient, HttpEmbedder, HttpFeatureProvider};
use crate::settings::{load_or_default, SettingsError};
use crate::synth::{generate, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;
pub const EXIT_EMPTY: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(m: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: m.to_string(),
        }
    }

    fn internal(m: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_INTERNAL,
            message: m.to_string(),
        }
    }

    fn empty(m: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_EMPTY,
            message: m.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        CliError {
            code: EXIT_CORRUPT,
            message: e.to_string(),
        }
    }
}

impl From<SettingsError> for CliError {
    fn from(e: SettingsError) -> Self {
        CliError::input(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::internal(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "ograph", version, about = "Build and query octree scene graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Binary,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlannerKind {
    Grammar,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "3d")]
    Full3d,
    Slice,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene bundle and its ground-truth sidecar.
    Gen {
        /// Scene spec (TOML); omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the spec's object count.
        #[arg(long)]
        objects: Option<u32>,
    },
    /// Build a scene graph from a bundle.
    Build {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// View-feature service; merged segment features are kept when absent.
        #[arg(long)]
        features_endpoint: Option<String>,
    },
    /// Per-node storage and EOR report.
    Stats {
        #[arg(long)]
        graph: PathBuf,
        /// Points sidecar; defaults to the graph path with a `.points` extension.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Re-encode a graph, or export one node's octree.
    ExportGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: GraphFormat,
        /// Export only this node's octree records (binary only).
        #[arg(long)]
        node: Option<u32>,
    },
    /// Is a point inside any node's occupied space?
    Occupied {
        #[arg(long)]
        graph: PathBuf,
        /// x,y,z
        #[arg(long, allow_hyphen_values = true)]
        point: String,
    },
    /// Answer a natural-language object query.
    Retrieve {
        command: String,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, default_value = "grammar")]
        planner: PlannerKind,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Plan a collision-free path; prints one waypoint per line.
    Plan {
        #[arg(long)]
        graph: PathBuf,
        /// x,y,z
        #[arg(long, allow_hyphen_values = true)]
        start: String,
        /// x,y,z
        #[arg(long, allow_hyphen_values = true)]
        goal: String,
        #[arg(long)]
        res: Option<f64>,
        /// Agent half extents hx,hy,hz.
        #[arg(long)]
        agent: Option<String>,
        #[arg(long, value_enum, default_value = "3d")]
        mode: ModeArg,
    },
    /// Adaptive and classic EOR per node.
    Eor {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        node: Option<u32>,
    },
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// Loads a binary or text graph.
pub fn load_graph_file(path: &Path) -> Result<SceneGraph, CliError> {
    let bytes = read_file(path)?;
    if bytes.starts_with(codec::GRAPH_MAGIC) {
        Ok(codec::load_graph(&bytes)?)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| CodecError::CorruptFile("neither a binary nor a text graph".into()))?;
        Ok(codec::import_text(&text)?)
    }
}

pub fn points_path_for(graph: &Path) -> PathBuf {
    graph.with_extension("points")
}

pub fn truth_path_for(bundle: &Path) -> PathBuf {
    bundle.with_extension("truth.json")
}

/// Node points aligned with `graph.nodes`.
fn load_node_points(graph: &SceneGraph, path: &Path) -> Result<Vec<Vec<Point3>>, CliError> {
    let mut by_id: std::collections::BTreeMap<u32, Vec<Point3>> = codec::load_points(&read_file(path)?)?.into_iter().collect();
    graph
        .nodes
        .iter()
        .map(|n| {
            by_id
                .remove(&n.id)
                .ok_or_else(|| CliError::from(CodecError::CorruptFile(format!("points sidecar lacks node {}", n.id))))
        })
        .collect()
}

fn parse_point(s: &str) -> Result<Point3, CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::input(format!("expected x,y,z, got {s:?}")));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(parts) {
        *slot = p
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CliError::input(format!("bad coordinate {p:?} in {s:?}")))?;
    }
    Ok(Point3::from_array(v))
}

fn print_stats(out: &mut dyn Write, s: &SceneStats) -> std::io::Result<()> {
    writeln!(out, "id\tcaption\tpoints\toctree_bytes\teor_adaptive\teor_classic")?;
    for n in &s.nodes {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            n.id, n.caption, n.point_count, n.octree_bytes, n.eor_adaptive, n.eor_classic
        )?;
    }
    writeln!(
        out,
        "total\t{} nodes\t{}\t{}\t{:.6}\t{:.6}",
        s.nodes.len(),
        s.total_points,
        s.total_octree_bytes,
        s.meor_adaptive,
        s.meor_classic
    )
}

fn cmd_gen(spec: Option<PathBuf>, out_path: PathBuf, seed: Option<u64>, objects: Option<u32>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec: SceneSpec = match spec {
        Some(p) => {
            let text = String::from_utf8(read_file(&p)?).map_err(|_| CliError::input("spec is not UTF-8"))?;
            toml::from_str(&text).map_err(|e| CliError::input(format!("bad spec {}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = objects {
        spec.objects = n;
    }
    let (bundle, truth) = generate(&spec).map_err(CliError::input)?;
    write_bundle(&bundle, &out_path).map_err(CliError::input)?;
    let truth_json = serde_json::to_string_pretty(&truth).map_err(CliError::internal)?;
    write_file(&truth_path_for(&out_path), truth_json.as_bytes())?;
    let segments: usize = bundle.frames.iter().map(|f| f.segments.len()).sum();
    writeln!(
        out,
        "wrote {} frames, {} segments, {} objects to {}",
        bundle.frames.len(),
        segments,
        truth.objects.len(),
        out_path.display()
    )?;
    Ok(())
}

fn cmd_build(
    bundle_path: PathBuf,
    config: Option<PathBuf>,
    out_path: PathBuf,
    features_endpoint: Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_or_default(config.as_deref())?;
    let bundle = read_bundle(&bundle_path).map_err(CliError::input)?;
    let remote = features_endpoint.map(|u| HttpFeatureProvider::new(&u, None));
    let provider: &dyn FeatureProvider = match &remote {
        Some(p) => p,
        None => &PassThrough,
    };
    let built = build_scene(&bundle, &cfg, provider).map_err(CliError::input)?;
    if built.graph.nodes.is_empty() {
        writeln!(err, "warning: bundle produced no instances; writing an empty graph")?;
    }
    let bytes = codec::save_graph(&built.graph);
    write_file(&out_path, &bytes)?;
    let pts: Vec<(u32, &[Point3])> = built
        .graph
        .nodes
        .iter()
        .zip(&built.node_points)
        .map(|(n, p)| (n.id, p.as_slice()))
        .collect();
    write_file(&points_path_for(&out_path), &codec::save_points(&pts))?;
    let stats = scene_stats(&built.graph, &built.node_points, &cfg).map_err(CliError::internal)?;
    let r = &built.report;
    writeln!(out, "segments {} (dropped {})", r.segments, r.drops.total())?;
    writeln!(out, "instances {} (under-segment sources removed {})", r.instances, r.removed_sources.len())?;
    writeln!(out, "nodes {} edges {}", r.nodes, r.edges)?;
    writeln!(out, "graph bytes {} octree bytes {}", bytes.len(), stats.total_octree_bytes)?;
    writeln!(out, "mEOR adaptive {:.6} classic {:.6}", stats.meor_adaptive, stats.meor_classic)?;
    Ok(())
}

fn graph_stats(graph_path: &Path, points: Option<PathBuf>) -> Result<(SceneGraph, SceneStats), CliError> {
    let graph = load_graph_file(graph_path)?;
    let points_path = points.unwrap_or_else(|| points_path_for(graph_path));
    let node_points = load_node_points(&graph, &points_path)?;
    let stats = scene_stats(&graph, &node_points, &graph.config).map_err(CliError::internal)?;
    Ok((graph, stats))
}

fn cmd_export(graph_path: PathBuf, out_path: PathBuf, format: GraphFormat, node: Option<u32>) -> Result<(), CliError> {
    let graph = load_graph_file(&graph_path)?;
    let bytes = match (node, format) {
        (Some(id), GraphFormat::Binary) => {
            let n = graph.node(id).ok_or_else(|| CliError::input(format!("no node {id}")))?;
            let mut b = Vec::with_capacity(n.octree.storage_size());
            n.octree.encode(&mut b);
            b
        }
        (Some(_), GraphFormat::Text) => return Err(CliError::input("--node exports binary octree records only")),
        (None, GraphFormat::Binary) => codec::save_graph(&graph),
        (None, GraphFormat::Text) => codec::export_text(&graph).into_bytes(),
    };
    write_file(&out_path, &bytes)
}

fn cmd_retrieve(command: &str, graph_path: PathBuf, planner: PlannerKind, top_k: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let graph = load_graph_file(&graph_path)?;
    let chat;
    let planner = match planner {
        PlannerKind::Grammar => Planner::Grammar,
        PlannerKind::Llm => {
            chat = HttpChatClient::from_env(None).ok_or_else(|| CliError::input("--planner llm needs LLM_ENDPOINT"))?;
            Planner::Llm(&chat)
        }
    };
    let query_plan = plan_query(command, &planner).map_err(|e| match e {
        PlanError::LlmUnavailable(_) => CliError::internal(e),
        _ => CliError::input(e),
    })?;
    let remote = HttpEmbedder::from_env(graph.feature_dim);
    let local = HashEmbedder::new(graph.feature_dim);
    let embedder: &dyn TextEmbedder = match &remote {
        Some(e) => e,
        None => &local,
    };
    let opts = ExecOptions {
        top_k: top_k.max(1),
        ref_top_k: graph.config.ref_top_k as usize,
        target_score_ratio: graph.config.target_score_ratio,
    };
    for step in &query_plan.steps {
        writeln!(out, "# {step}")?;
    }
    let result = execute(&graph, &query_plan, embedder, &opts).map_err(|e| match e {
        RetrievalError::EmptyGraph => CliError::empty(e),
        RetrievalError::EmbedderFailure(_) => CliError::internal(e),
        _ => CliError::input(e),
    })?;
    if result.is_empty() {
        return Err(CliError::empty("no matching object"));
    }
    for h in &result.hits {
        let caption = graph.node(h.id).map(|n| n.caption.as_str()).unwrap_or("");
        writeln!(out, "{}\t{}\t{:.6}", h.id, caption, h.score)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_plan(
    graph_path: PathBuf,
    start: &str,
    goal: &str,
    res: Option<f64>,
    agent: Option<String>,
    mode: ModeArg,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let graph = load_graph_file(&graph_path)?;
    let start = parse_point(start)?;
    let goal = parse_point(goal)?;
    let mut req = PlanRequest::new(start, goal);
    req.grid_res = res.unwrap_or(graph.config.grid_res);
    req.padding = graph.config.plan_padding;
    if let Some(a) = agent {
        req.agent_half_extents = parse_point(&a)?;
    }
    req.mode = match mode {
        ModeArg::Full3d => PlanMode::Full3d,
        ModeArg::Slice => PlanMode::Slice(start.z),
    };
    let r = plan(&graph, &req).map_err(CliError::input)?;
    writeln!(err, "status {:?} cost {:.6} expanded {}", r.status, r.cost, r.expanded)?;
    if r.status != PlanStatus::Success {
        return Err(CliError::empty(format!("no path: {:?}", r.status)));
    }
    for w in &r.waypoints {
        writeln!(out, "{},{},{}", w.x, w.y, w.z)?;
    }
    Ok(())
}

/// Runs one parsed command, writing results to `out` and diagnostics to `err`.
pub fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { spec, out: o, seed, objects } => cmd_gen(spec, o, seed, objects, out),
        Command::Build {
            bundle,
            config,
            out: o,
            features_endpoint,
        } => cmd_build(bundle, config, o, features_endpoint, out, err),
        Command::Stats { graph, points, json } => {
            let (g, stats) = graph_stats(&graph, points)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&stats).map_err(CliError::internal)?)?;
            } else {
                writeln!(out, "nodes {} edges {}", g.nodes.len(), g.edges.len())?;
                print_stats(out, &stats)?;
            }
            Ok(())
        }
        Command::ExportGraph { graph, out: o, format, node } => cmd_export(graph, o, format, node),
        Command::Occupied { graph, point } => {
            let g = load_graph_file(&graph)?;
            let p = parse_point(&point)?;
            writeln!(out, "{}", g.is_occupied(p))?;
            Ok(())
        }
        Command::Retrieve {
            command,
            graph,
            planner,
            top_k,
        } => cmd_retrieve(&command, graph, planner, top_k, out),
        Command::Plan {
            graph,
            start,
            goal,
            res,
            agent,
            mode,
        } => cmd_plan(graph, &start, &goal, res, agent, mode, out, err),
        Command::Eor { graph, points, node } => {
            let (_, mut stats) = graph_stats(&graph, points)?;
            if let Some(id) = node {
                stats.nodes.retain(|n| n.id == id);
                if stats.nodes.is_empty() {
                    return Err(CliError::input(format!("no node {id}")));
                }
            }
            writeln!(out, "id\teor_adaptive\teor_classic")?;
            for n in &stats.nodes {
                writeln!(out, "{}\t{:.6}\t{:.6}", n.id, n.eor_adaptive, n.eor_classic)?;
            }
            if node.is_none() {
                writeln!(out, "mean\t{:.6}\t{:.6}", stats.meor_adaptive, stats.meor_classic)?;
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}
