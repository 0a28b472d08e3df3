use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ograph::bundle::read_bundle;
use ograph::cli::{load_graph_file, points_path_for, truth_path_for};
use ograph::codec;
use ograph::synth::GroundTruth;
use ograph_core::ifa::PassThrough;
use ograph_core::pipeline::{build_scene, scene_stats, SceneStats};
use ograph_core::{PipelineConfig, Point3};

fn ograph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ograph")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_spec(dir: &Path, objects: u32) -> PathBuf {
    let p = dir.join("spec.toml");
    std::fs::write(&p, format!("objects = {objects}\nframes = 3\nseed = 11\n")).unwrap();
    p
}

/// Generates and builds a small scene; returns (bundle, graph) paths.
fn built_scene(dir: &Path, objects: u32) -> (PathBuf, PathBuf) {
    let spec = small_spec(dir, objects);
    let bundle = dir.join("scene.jsonl");
    let graph = dir.join("scene.ogr");
    let o = ograph(&["gen", "--spec", s(&spec), "--out", s(&bundle)]);
    assert!(o.status.success(), "{o:?}");
    let o = ograph(&["build", "--bundle", s(&bundle), "--out", s(&graph)]);
    assert!(o.status.success(), "{o:?}");
    (bundle, graph)
}

#[test]
fn gen_is_deterministic_and_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 4);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert!(ograph(&["gen", "--spec", s(&spec), "--out", s(&a)]).status.success());
    assert!(ograph(&["gen", "--spec", s(&spec), "--out", s(&b)]).status.success());
    let blob = |m: &Path| std::fs::read(m.with_extension("bin")).unwrap();
    assert_eq!(blob(&a), blob(&b));
    assert_eq!(std::fs::read(&a).unwrap().len(), std::fs::read(&b).unwrap().len());
    let truth: GroundTruth = serde_json::from_slice(&std::fs::read(truth_path_for(&a)).unwrap()).unwrap();
    assert_eq!(truth.objects.len(), 4);
    let bundle = read_bundle(&a).unwrap();
    let segments: usize = bundle.frames.iter().map(|f| f.segments.len()).sum();
    assert_eq!(truth.segments.len(), segments);
}

#[test]
fn gen_zero_objects_and_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.jsonl");
    assert!(ograph(&["gen", "--objects", "0", "--out", s(&out)]).status.success());
    let bundle = read_bundle(&out).unwrap();
    assert!(bundle.frames.iter().all(|f| f.segments.is_empty()));

    let o = ograph(&["gen", "--objects", "999", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_bundle_builds_empty_graph_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("e.jsonl");
    let graph = dir.path().join("e.ogr");
    assert!(ograph(&["gen", "--objects", "0", "--out", s(&bundle)]).status.success());
    let o = ograph(&["build", "--bundle", s(&bundle), "--out", s(&graph)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let g = load_graph_file(&graph).unwrap();
    assert!(g.nodes.is_empty() && g.edges.is_empty());

    let o = ograph(&["retrieve", "a chair", "--graph", s(&graph)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn build_is_deterministic_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, graph) = built_scene(dir.path(), 2);
    let again = dir.path().join("again.ogr");
    assert!(ograph(&["build", "--bundle", s(&bundle), "--out", s(&again)]).status.success());
    assert_eq!(std::fs::read(&graph).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(
        std::fs::read(points_path_for(&graph)).unwrap(),
        std::fs::read(points_path_for(&again)).unwrap()
    );

    let g = load_graph_file(&graph).unwrap();
    assert_eq!(g.nodes.len(), 2);

    let cfg = PipelineConfig::default();
    let direct = build_scene(&read_bundle(&bundle).unwrap(), &cfg, &PassThrough).unwrap();
    assert_eq!(codec::save_graph(&direct.graph), std::fs::read(&graph).unwrap());

    let o = ograph(&["stats", "--graph", s(&graph), "--json"]);
    assert!(o.status.success(), "{o:?}");
    let reported: SceneStats = serde_json::from_slice(&o.stdout).unwrap();
    let expected = scene_stats(&direct.graph, &direct.node_points, &cfg).unwrap();
    assert_eq!(reported, expected);

    let o = ograph(&["eor", "--graph", s(&graph), "--node", "1"]);
    assert!(o.status.success());
    let line = stdout(&o).lines().nth(1).unwrap().to_string();
    assert_eq!(
        line,
        format!("1\t{:.6}\t{:.6}", expected.nodes[1].eor_adaptive, expected.nodes[1].eor_classic)
    );
}

#[test]
fn export_occupied_retrieve_plan() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, graph) = built_scene(dir.path(), 3);
    let g = load_graph_file(&graph).unwrap();
    let truth: GroundTruth = serde_json::from_slice(&std::fs::read(truth_path_for(&bundle)).unwrap()).unwrap();

    // text export loads back to the same graph; binary re-export is byte-stable
    let text = dir.path().join("scene.json");
    assert!(ograph(&["export-graph", "--graph", s(&graph), "--out", s(&text), "--format", "text"]).status.success());
    assert_eq!(load_graph_file(&text).unwrap(), g);
    let bin = dir.path().join("re.ogr");
    assert!(ograph(&["export-graph", "--graph", s(&text), "--out", s(&bin)]).status.success());
    assert_eq!(std::fs::read(&bin).unwrap(), std::fs::read(&graph).unwrap());

    let tree = dir.path().join("node0.oct");
    assert!(ograph(&["export-graph", "--graph", s(&graph), "--out", s(&tree), "--node", "0"]).status.success());
    let mut expected = Vec::new();
    g.nodes[0].octree.encode(&mut expected);
    assert_eq!(std::fs::read(&tree).unwrap(), expected);

    let inside = g.nodes[0].octree.occupied_nodes().next().unwrap().center;
    let o = ograph(&["occupied", "--graph", s(&graph), "--point", &format!("{},{},{}", inside.x, inside.y, inside.z)]);
    assert_eq!(stdout(&o).trim(), "true");
    let o = ograph(&["occupied", "--graph", s(&graph), "--point", "-50,-50,-50"]);
    assert_eq!(stdout(&o).trim(), "false");
    assert_eq!(ograph(&["occupied", "--graph", s(&graph), "--point", "1,2"]).status.code(), Some(2));

    // every object is found by its own caption
    for obj in &truth.objects {
        let o = ograph(&["retrieve", &format!("the {}", obj.caption), "--graph", s(&graph), "--top-k", "1"]);
        assert!(o.status.success(), "{o:?}");
        let top = stdout(&o).lines().find(|l| !l.starts_with('#')).unwrap().to_string();
        let id: u32 = top.split('\t').next().unwrap().parse().unwrap();
        assert_eq!(g.node(id).unwrap().caption, obj.caption);
    }
    assert_eq!(ograph(&["retrieve", "   ", "--graph", s(&graph)]).status.code(), Some(2));

    // a path around the scene at mid-height; waypoints are free and joined
    let b = g.bounds().unwrap();
    let z = 0.05;
    let start = format!("{},{},{z}", b.min.x - 0.5, b.min.y - 0.5);
    let goal = format!("{},{},{z}", b.max.x + 0.5, b.max.y + 0.5);
    let o = ograph(&["plan", "--graph", s(&graph), "--start", &start, "--goal", &goal, "--mode", "slice"]);
    assert!(o.status.success(), "{o:?}");
    let pts: Vec<Point3> = stdout(&o)
        .lines()
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            Point3::new(v[0], v[1], v[2])
        })
        .collect();
    assert!(pts.len() >= 2);
    assert!(pts.iter().all(|p| !g.is_occupied(*p)));
    assert!(pts.windows(2).all(|w| w[0].distance(w[1]) < 0.1 * 2f64.sqrt() + 1e-9));

    // goal inside the fattest leaf, on a grid fine enough to land in it
    let leaf = g
        .nodes
        .iter()
        .flat_map(|n| n.octree.occupied_nodes())
        .max_by(|a, b| a.half.min_component().total_cmp(&b.half.min_component()))
        .unwrap();
    let res = leaf.half.min_component();
    let l = leaf.center;
    let o = ograph(&[
        "plan",
        "--graph",
        s(&graph),
        "--start",
        &format!("{},{},{}", b.min.x - 0.5, b.min.y - 0.5, l.z),
        "--goal",
        &format!("{},{},{}", l.x, l.y, l.z),
        "--mode",
        "slice",
        "--res",
        &res.to_string(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("GoalBlocked"));
}

#[test]
fn corrupt_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, graph) = built_scene(dir.path(), 2);
    let mut bytes = std::fs::read(&graph).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.ogr");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(ograph(&["occupied", "--graph", s(&bad), "--point", "0,0,0"]).status.code(), Some(3));
    assert_eq!(ograph(&["stats", "--graph", s(&bad)]).status.code(), Some(3));

    let missing = dir.path().join("nope.ogr");
    assert_eq!(ograph(&["occupied", "--graph", s(&missing), "--point", "0,0,0"]).status.code(), Some(2));
    assert_eq!(ograph(&["frobnicate"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "voxel_size = 0.0\n").unwrap();
    let bundle = dir.path().join("scene.jsonl");
    let o = ograph(&["build", "--bundle", s(&bundle), "--config", s(&cfg), "--out", s(&graph)]);
    assert_eq!(o.status.code(), Some(2));
}
