//! Text-driven object retrieval over a [`SceneGraph`].
//!
//! Four query forms are supported: by target description, by reference
//! object and relation, by reference, relation and target, and by distance
//! comparison. Natural-language commands become [`QueryPlan`]s through a
//! deterministic grammar or an external chat model.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, EmbedError, TextEmbedder};
use crate::graph::{Relation, SceneGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("embedder failure: {0}")]
    EmbedderFailure(#[from] EmbedError),
    #[error("relation `{0}` cannot be answered from edges")]
    NoSuchRelation(Relation),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("distance comparison needs a non-empty {0} operand")]
    EmptyOperand(&'static str),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("cannot parse command: {raw:?}")]
    UnparsableCommand { raw: String },
    #[error("malformed model output ({reason}): {raw:?}")]
    LlmProtocolError { raw: String, reason: String },
    #[error("chat client failed: {0}")]
    LlmUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u32,
    pub score: f64,
}

/// Ranked hits, best first, with the query that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<Hit> {
        self.hits.first().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

fn rank(mut hits: Vec<Hit>) -> Vec<Hit> {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    hits
}

fn scores(graph: &SceneGraph, text: &str, embedder: &dyn TextEmbedder) -> Result<Vec<Hit>, RetrievalError> {
    let q = embedder.embed(text)?;
    Ok(graph
        .nodes
        .iter()
        .map(|n| Hit {
            id: n.id,
            score: embed::cosine(&q, &n.feature).unwrap_or(-1.0),
        })
        .collect())
}

/// Nodes ranked by cosine similarity to the embedded text.
pub fn query_for_target(
    graph: &SceneGraph,
    text: &str,
    embedder: &dyn TextEmbedder,
    top_k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    let mut hits = rank(scores(graph, text, embedder)?);
    hits.truncate(top_k.max(1));
    Ok(RetrievalResult {
        query: text.to_string(),
        hits,
    })
}

/// Nodes reached from the best-matching reference node(s) by an edge with
/// the given relation, scored by the reference match.
pub fn query_for_reference_relation(
    graph: &SceneGraph,
    reference: &str,
    relation: Relation,
    embedder: &dyn TextEmbedder,
    ref_top_k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if relation.is_comparative() || relation == Relation::None {
        return Err(RetrievalError::NoSuchRelation(relation));
    }
    if graph.nodes.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    let refs = query_for_target(graph, reference, embedder, ref_top_k)?;
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for r in &refs.hits {
        for e in graph.edges_from(r.id) {
            if e.relation == relation {
                let s = best.entry(e.to).or_insert(f64::NEG_INFINITY);
                *s = s.max(r.score);
            }
        }
    }
    Ok(RetrievalResult {
        query: alloc::format!("{reference} / {relation}"),
        hits: rank(best.into_iter().map(|(id, score)| Hit { id, score }).collect()),
    })
}

/// Relation candidates re-ranked by similarity to the target text.
pub fn query_for_reference_relation_target(
    graph: &SceneGraph,
    reference: &str,
    relation: Relation,
    target: &str,
    embedder: &dyn TextEmbedder,
    ref_top_k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    let candidates = query_for_reference_relation(graph, reference, relation, embedder, ref_top_k)?;
    let mut hits = Vec::with_capacity(candidates.hits.len());
    if !candidates.hits.is_empty() {
        let q = embedder.embed(target)?;
        for c in &candidates.hits {
            let node = graph.node(c.id).expect("edge targets exist");
            hits.push(Hit {
                id: c.id,
                score: embed::cosine(&q, &node.feature).unwrap_or(-1.0),
            });
        }
    }
    Ok(RetrievalResult {
        query: alloc::format!("{reference} / {relation} / {target}"),
        hits: rank(hits),
    })
}

/// The single target farthest from (`far`) or nearest to (`close`) the
/// reference's top node, by center distance. The reference node itself is
/// never its own target. Ties go to the smaller id.
pub fn query_for_compare_dis(
    relation: Relation,
    reference: &RetrievalResult,
    targets: &RetrievalResult,
    graph: &SceneGraph,
) -> Result<RetrievalResult, RetrievalError> {
    if !relation.is_comparative() {
        return Err(RetrievalError::NoSuchRelation(relation));
    }
    let r = reference.top().ok_or(RetrievalError::EmptyOperand("reference"))?;
    let origin = graph
        .node(r.id)
        .ok_or(RetrievalError::InvalidPlan(alloc::format!("unknown node {}", r.id)))?
        .center;
    let mut best: Option<Hit> = None;
    for t in targets.hits.iter().filter(|t| t.id != r.id) {
        let node = graph
            .node(t.id)
            .ok_or(RetrievalError::InvalidPlan(alloc::format!("unknown node {}", t.id)))?;
        let d = node.center.distance(origin);
        let better = match best {
            None => true,
            Some(b) => {
                let wins = if relation == Relation::Far { d > b.score } else { d < b.score };
                wins || (d == b.score && t.id < b.id)
            }
        };
        if better {
            best = Some(Hit { id: t.id, score: d });
        }
    }
    let hit = best.ok_or(RetrievalError::EmptyOperand("target"))?;
    Ok(RetrievalResult {
        query: alloc::format!("{relation} {} / {}", reference.query, targets.query),
        hits: alloc::vec![hit],
    })
}

/// One retrieval API invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "api", rename_all = "snake_case")]
pub enum ApiCall {
    Target {
        text: String,
    },
    RefRelation {
        reference: String,
        relation: Relation,
    },
    RefRelationTarget {
        reference: String,
        relation: Relation,
        target: String,
    },
    CompareDis {
        relation: Relation,
        reference: Box<ApiCall>,
        targets: Box<ApiCall>,
    },
}

impl ApiCall {
    pub fn target(text: &str) -> Self {
        ApiCall::Target { text: text.to_string() }
    }

    pub fn ref_relation(reference: &str, relation: Relation) -> Self {
        ApiCall::RefRelation {
            reference: reference.to_string(),
            relation,
        }
    }

    pub fn ref_relation_target(reference: &str, relation: Relation, target: &str) -> Self {
        ApiCall::RefRelationTarget {
            reference: reference.to_string(),
            relation,
            target: target.to_string(),
        }
    }

    pub fn compare_dis(relation: Relation, reference: ApiCall, targets: ApiCall) -> Self {
        ApiCall::CompareDis {
            relation,
            reference: Box::new(reference),
            targets: Box::new(targets),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let text_ok = |t: &str, what: &str| {
            if t.trim().is_empty() {
                Err(alloc::format!("empty {what}"))
            } else {
                Ok(())
            }
        };
        let edge_relation = |r: Relation| {
            if r.is_comparative() || r == Relation::None {
                Err(alloc::format!("relation `{r}` is not an edge relation"))
            } else {
                Ok(())
            }
        };
        match self {
            ApiCall::Target { text } => text_ok(text, "target"),
            ApiCall::RefRelation { reference, relation } => {
                text_ok(reference, "reference")?;
                edge_relation(*relation)
            }
            ApiCall::RefRelationTarget {
                reference,
                relation,
                target,
            } => {
                text_ok(reference, "reference")?;
                text_ok(target, "target")?;
                edge_relation(*relation)
            }
            ApiCall::CompareDis {
                relation,
                reference,
                targets,
            } => {
                if !relation.is_comparative() {
                    return Err(alloc::format!("distance comparison needs far or close, got `{relation}`"));
                }
                reference.validate()?;
                targets.validate()
            }
        }
    }
}

impl fmt::Display for ApiCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ApiCall::Target { text } => write!(f, "graph.query_for_target('{text}')"),
            ApiCall::RefRelation { reference, relation } => {
                write!(f, "graph.query_for_reference_relation('{reference}', '{relation}')")
            }
            ApiCall::RefRelationTarget {
                reference,
                relation,
                target,
            } => write!(
                f,
                "graph.query_for_reference_relation_target('{reference}', '{relation}', '{target}')"
            ),
            ApiCall::CompareDis {
                relation,
                reference,
                targets,
            } => write!(f, "graph.query_for_compare_dis('{relation}', {reference}, {targets})"),
        }
    }
}

/// Calls to try in order; the answer is the first non-empty result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub steps: Vec<ApiCall>,
}

impl QueryPlan {
    pub fn single(call: ApiCall) -> Self {
        QueryPlan {
            steps: alloc::vec![call],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err(String::from("plan has no steps"));
        }
        self.steps.iter().try_for_each(ApiCall::validate)
    }
}

/// Execution knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOptions {
    pub top_k: usize,
    pub ref_top_k: usize,
    /// Distance-comparison targets must score at least this fraction of
    /// the best target match.
    pub target_score_ratio: f64,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            top_k: 5,
            ref_top_k: 1,
            target_score_ratio: 0.8,
        }
    }
}

pub fn execute_call(
    graph: &SceneGraph,
    call: &ApiCall,
    embedder: &dyn TextEmbedder,
    opts: &ExecOptions,
) -> Result<RetrievalResult, RetrievalError> {
    match call {
        ApiCall::Target { text } => query_for_target(graph, text, embedder, opts.top_k),
        ApiCall::RefRelation { reference, relation } => {
            query_for_reference_relation(graph, reference, *relation, embedder, opts.ref_top_k)
        }
        ApiCall::RefRelationTarget {
            reference,
            relation,
            target,
        } => query_for_reference_relation_target(graph, reference, *relation, target, embedder, opts.ref_top_k),
        ApiCall::CompareDis {
            relation,
            reference,
            targets,
        } => {
            let ref_opts = ExecOptions { top_k: 1, ..*opts };
            let r = execute_call(graph, reference, embedder, &ref_opts)?;
            let all = ExecOptions {
                top_k: graph.nodes.len().max(1),
                ..*opts
            };
            let mut t = execute_call(graph, targets, embedder, &all)?;
            if let Some(best) = t.hits.iter().filter(|h| Some(h.id) != r.top().map(|x| x.id)).map(|h| h.score).next() {
                let floor = if best > 0.0 { best * opts.target_score_ratio } else { best };
                t.hits.retain(|h| h.score >= floor);
            }
            query_for_compare_dis(*relation, &r, &t, graph)
        }
    }
}

/// Runs the plan's steps in order and returns the first non-empty result
/// (or the last, empty one).
pub fn execute(
    graph: &SceneGraph,
    plan: &QueryPlan,
    embedder: &dyn TextEmbedder,
    opts: &ExecOptions,
) -> Result<RetrievalResult, RetrievalError> {
    plan.validate().map_err(RetrievalError::InvalidPlan)?;
    let mut last = None;
    for step in &plan.steps {
        let r = execute_call(graph, step, embedder, opts)?;
        if !r.is_empty() {
            return Ok(r);
        }
        last = Some(r);
    }
    Ok(last.expect("validated plans have steps"))
}

// ---------------------------------------------------------------------------
// Grammar planner

const VERBS: &[&str] = &[
    "find", "locate", "show", "get", "fetch", "retrieve", "identify", "search", "look", "point", "bring", "where",
];
const VERB_FILLERS: &[&str] = &["me", "for", "to", "at", "is", "are", "us"];
const DETERMINERS: &[&str] = &["a", "an", "the", "some", "any", "this", "that", "these", "those"];
const ALL_NOUNS: &[&str] = &["objects", "object", "things", "thing", "items", "item", "stuff"];
const CLAUSE_FILLERS: &[&str] = &["that", "which", "who", "is", "are", "sits", "sitting", "lies", "lying", "placed", "located", "standing", "stands"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Surface {
    Edge(Relation),
    Comparative(Relation),
    Beside,
}

/// Surface phrases, lowercase token sequences, mapped onto the vocabulary.
/// Position-based relations name where the target sits relative to the
/// reference; `contain` means the reference contains the target.
const PHRASES: &[(&[&str], Surface)] = &[
    (&["on", "top", "of"], Surface::Edge(Relation::Above)),
    (&["on"], Surface::Edge(Relation::Above)),
    (&["above"], Surface::Edge(Relation::Above)),
    (&["over"], Surface::Edge(Relation::Above)),
    (&["atop"], Surface::Edge(Relation::Above)),
    (&["upon"], Surface::Edge(Relation::Above)),
    (&["under"], Surface::Edge(Relation::Below)),
    (&["underneath"], Surface::Edge(Relation::Below)),
    (&["beneath"], Surface::Edge(Relation::Below)),
    (&["below"], Surface::Edge(Relation::Below)),
    (&["in", "front", "of"], Surface::Edge(Relation::Front)),
    (&["front", "of"], Surface::Edge(Relation::Front)),
    (&["behind"], Surface::Edge(Relation::Back)),
    (&["in", "back", "of"], Surface::Edge(Relation::Back)),
    (&["back", "of"], Surface::Edge(Relation::Back)),
    (&["to", "the", "left", "of"], Surface::Edge(Relation::Left)),
    (&["on", "the", "left", "of"], Surface::Edge(Relation::Left)),
    (&["left", "of"], Surface::Edge(Relation::Left)),
    (&["to", "the", "right", "of"], Surface::Edge(Relation::Right)),
    (&["on", "the", "right", "of"], Surface::Edge(Relation::Right)),
    (&["right", "of"], Surface::Edge(Relation::Right)),
    (&["inside", "of"], Surface::Edge(Relation::Contain)),
    (&["inside"], Surface::Edge(Relation::Contain)),
    (&["within"], Surface::Edge(Relation::Contain)),
    (&["in"], Surface::Edge(Relation::Contain)),
    (&["containing"], Surface::Edge(Relation::Included)),
    (&["contains"], Surface::Edge(Relation::Included)),
    (&["contain"], Surface::Edge(Relation::Included)),
    (&["holding"], Surface::Edge(Relation::Included)),
    (&["enclosing"], Surface::Edge(Relation::Included)),
    (&["near", "to"], Surface::Comparative(Relation::Close)),
    (&["near"], Surface::Comparative(Relation::Close)),
    (&["close", "to"], Surface::Comparative(Relation::Close)),
    (&["nearby"], Surface::Comparative(Relation::Close)),
    (&["far", "away", "from"], Surface::Comparative(Relation::Far)),
    (&["far", "from"], Surface::Comparative(Relation::Far)),
    (&["away", "from"], Surface::Comparative(Relation::Far)),
    (&["next", "to"], Surface::Beside),
    (&["beside"], Surface::Beside),
    (&["alongside"], Surface::Beside),
];

const SUPERLATIVES: &[(&str, Relation)] = &[
    ("farthest", Relation::Far),
    ("furthest", Relation::Far),
    ("farthermost", Relation::Far),
    ("closest", Relation::Close),
    ("nearest", Relation::Close),
];

#[derive(Debug, Clone)]
struct Token {
    raw: String,
    low: String,
}

fn tokenize(command: &str) -> Vec<Token> {
    command
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(|w| Token {
            raw: w.to_string(),
            low: w.to_lowercase(),
        })
        .collect()
}

fn phrase_at(tokens: &[Token], i: usize) -> Option<(usize, Surface)> {
    let mut best: Option<(usize, Surface)> = None;
    for (words, surface) in PHRASES {
        let n = words.len();
        if i + n <= tokens.len() && tokens[i..i + n].iter().zip(words.iter()).all(|(t, w)| t.low == *w) && best.is_none_or(|(bn, _)| n > bn) {
            best = Some((n, *surface));
        }
    }
    best
}

fn strip_leading<'a>(mut tokens: &'a [Token], words: &[&str]) -> &'a [Token] {
    while let Some(t) = tokens.first() {
        if words.contains(&t.low.as_str()) {
            tokens = &tokens[1..];
        } else {
            break;
        }
    }
    tokens
}

fn strip_trailing<'a>(mut tokens: &'a [Token], words: &[&str]) -> &'a [Token] {
    while let Some(t) = tokens.last() {
        if words.contains(&t.low.as_str()) {
            tokens = &tokens[..tokens.len() - 1];
        } else {
            break;
        }
    }
    tokens
}

/// Noun phrase text with determiners and trailing clause words removed.
fn noun_phrase(tokens: &[Token]) -> Option<String> {
    let t = strip_leading(tokens, DETERMINERS);
    let t = strip_leading(t, &["one", "ones", "all"]);
    let t = strip_leading(t, DETERMINERS);
    let t = strip_trailing(t, CLAUSE_FILLERS);
    let t = strip_trailing(t, &["one", "ones", "object", "objects", "thing", "things", "it", "them"]);
    if t.is_empty() {
        return None;
    }
    Some(t.iter().map(|x| x.raw.as_str()).collect::<Vec<_>>().join(" "))
}

fn is_all_phrase(tokens: &[Token]) -> bool {
    match tokens {
        [] => false,
        [a, ..] if a.low == "everything" || a.low == "anything" => true,
        [a, b, ..] if a.low == "all" => {
            ALL_NOUNS.contains(&b.low.as_str()) || (b.low == "the" && tokens.get(2).is_some_and(|c| ALL_NOUNS.contains(&c.low.as_str())))
        }
        _ => false,
    }
}

fn unparsable(command: &str) -> PlanError {
    PlanError::UnparsableCommand {
        raw: command.to_string(),
    }
}

/// Deterministic command parser.
///
/// Handles "find X", "find all objects <relation> Y", "find X <relation> Y",
/// "find X with a Y <relation> it" and "find the X farthest/closest from/to Y",
/// with a leading request phrase ("please help me ...") ignored.
pub fn plan_grammar(command: &str) -> Result<QueryPlan, PlanError> {
    let all_tokens = tokenize(command);
    if all_tokens.is_empty() {
        return Err(unparsable(command));
    }
    let start = all_tokens
        .iter()
        .position(|t| VERBS.contains(&t.low.as_str()))
        .map_or(0, |i| i + 1);
    let body = strip_leading(&all_tokens[start..], VERB_FILLERS);
    if body.is_empty() {
        return Err(unparsable(command));
    }
    let wants_all = is_all_phrase(body);

    // "X farthest from Y" / "the farthest X from Y"
    if let Some((si, rel)) = body
        .iter()
        .enumerate()
        .find_map(|(i, t)| SUPERLATIVES.iter().find(|(w, _)| *w == t.low).map(|(_, r)| (i, *r)))
    {
        let link = body[si + 1..]
            .iter()
            .position(|t| t.low == "from" || t.low == "to")
            .map(|p| si + 1 + p)
            .ok_or_else(|| unparsable(command))?;
        let before = noun_phrase(&body[..si]);
        let between = noun_phrase(&body[si + 1..link]);
        let target = before.or(between).ok_or_else(|| unparsable(command))?;
        let reference = noun_phrase(&body[link + 1..]).ok_or_else(|| unparsable(command))?;
        return Ok(QueryPlan::single(ApiCall::compare_dis(
            rel,
            ApiCall::target(&reference),
            ApiCall::target(&target),
        )));
    }

    // "X with a Y <relation> it": the relation describes Y relative to X
    if let Some(wi) = body.iter().position(|t| t.low == "with") {
        let target = noun_phrase(&body[..wi]).ok_or_else(|| unparsable(command))?;
        let rest = &body[wi + 1..];
        let (ri, len, surface) = (0..rest.len())
            .find_map(|i| phrase_at(rest, i).map(|(n, s)| (i, n, s)))
            .ok_or_else(|| unparsable(command))?;
        let reference = noun_phrase(&rest[..ri]).ok_or_else(|| unparsable(command))?;
        let tail = strip_leading(&rest[ri + len..], &["it", "them", "itself"]);
        if !tail.is_empty() {
            return Err(unparsable(command));
        }
        return match surface {
            Surface::Edge(r) => Ok(QueryPlan::single(ApiCall::ref_relation_target(&reference, r.inverse(), &target))),
            Surface::Comparative(r) => Ok(QueryPlan::single(ApiCall::compare_dis(
                r,
                ApiCall::target(&reference),
                ApiCall::target(&target),
            ))),
            Surface::Beside => Ok(beside_plan(&reference, &target)),
        };
    }

    // "X <relation> Y", relation phrase located after the first target word
    let first = if wants_all { 0 } else { 1 };
    if let Some((ri, len, surface)) = (first..body.len()).find_map(|i| phrase_at(body, i).map(|(n, s)| (i, n, s))) {
        let reference = noun_phrase(&body[ri + len..]).ok_or_else(|| unparsable(command))?;
        if wants_all {
            return match surface {
                Surface::Edge(r) => Ok(QueryPlan::single(ApiCall::ref_relation(&reference, r))),
                Surface::Beside => Ok(QueryPlan {
                    steps: alloc::vec![
                        ApiCall::ref_relation(&reference, Relation::Left),
                        ApiCall::ref_relation(&reference, Relation::Right),
                    ],
                }),
                Surface::Comparative(_) => Err(unparsable(command)),
            };
        }
        let target = noun_phrase(&body[..ri]).ok_or_else(|| unparsable(command))?;
        return match surface {
            Surface::Edge(r) => Ok(QueryPlan::single(ApiCall::ref_relation_target(&reference, r, &target))),
            Surface::Comparative(r) => Ok(QueryPlan::single(ApiCall::compare_dis(
                r,
                ApiCall::target(&reference),
                ApiCall::target(&target),
            ))),
            Surface::Beside => Ok(beside_plan(&reference, &target)),
        };
    }

    if wants_all {
        return Err(unparsable(command));
    }
    let target = noun_phrase(body).ok_or_else(|| unparsable(command))?;
    Ok(QueryPlan::single(ApiCall::target(&target)))
}

fn beside_plan(reference: &str, target: &str) -> QueryPlan {
    QueryPlan {
        steps: alloc::vec![
            ApiCall::ref_relation_target(reference, Relation::Left, target),
            ApiCall::ref_relation_target(reference, Relation::Right, target),
        ],
    }
}

// ---------------------------------------------------------------------------
// Chat-model planner

/// System prompt sent to the chat model. It is the published task protocol
/// and is kept word for word so model outputs stay comparable.
pub const LLM_PROMPT: &str = "[Task Description]: You are a professional object retrieval agent capable of performing semantic-based object search in three-dimensional space based on a scene graph where each node denotes an object and each edge maintains object-to-object relations. Every object contains semantic information and location, each edge contains semantic relation (such as \"right\" or \"on\"), distance, and 3D vector between two connected objects. Several Python APIs built upon the sense graph can be used to search the target. Your primary tasks include: extracting the reference object reference, target object target, and relative relation relation from the query instructions; translating the relation into a standardized description (including \"above\", \"below\", \"front\", \"back\", \"left\", \"right\", \"contain\", \"included\", \"far\", and \"close\"); and invoking the appropriate query API functions to perform the retrieval.

[API Description]: Below are the predefined query APIs that you are allowed to invoke:
1. graph.query_for_target('target') – This function allows you to query the target object based solely on its semantic description. When invoking this API, you need to extract the target from the query instruction.
[An example for this API]:
[Query]: \"Please help me find a vase.\"
[Your Output]: graph.query_for_target('vase')

2. graph.query_for_reference_relation('reference', 'relation') – This function first locates the reference object based on the semantic information, and then finds all objects that have a relationship defined by relation with the reference. When calling this API, you need to extract the reference and relation from the query instruction, and replace relation with a term from the standardized relational vocabulary.
[An example for this API]:
[Query]: \"Find all objects on the table.\"
[Your Output]: graph.query_for_reference_relation('table', 'above')

3. graph.query_for_reference_relation_target('reference', 'relation', 'target') – This function first identifies the object based on the reference, then queries objects that have a relationship defined by relation with the reference. It then finds the object that semantically corresponds to target. When invoking this API, you need to extract reference, relation, and target from the query instruction, and replace relation with a term from the standardized relational vocabulary.
[An example for this API]:
[Query]: \"Find the TV above the table.\"
[Your Output]: graph.query_for_reference_relation_target('table', 'above', 'TV')
[Query]: \"Find the TV with a table underneath it.\"
[Your Output]: graph.query_for_reference_relation_target('table', 'above', 'TV')
[Note]: In the second query, you should flexibly change the description and correctly call this API.

4. graph.query_for_compare_dis('relation', ref_obj, tar_objs) – When the spatial relationship in the query involves far or close, before this function you should first sequentially invoke graph.query_for_target('target') to query both the reference and target objects in the scene. It then compares the distances between each target and the reference, returning the closest or farthest target based on the specified relation. When calling this API, select relation as either close or far according to the query instruction.
[An example for this API]:
[Query]: \"Find the trash can farthest from the door.\"
[Your Output]: ref_obj = graph.query_for_target('door'),
tar_objs = graph.query_for_target('trash can'),
graph.query_for_compare_dis('far', ref_obj, tar_objs)";

/// Single-turn chat completion.
pub trait ChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq)]
enum Arg {
    Text(String),
    Var(String),
}

fn protocol(raw: &str, reason: impl Into<String>) -> PlanError {
    PlanError::LlmProtocolError {
        raw: raw.to_string(),
        reason: reason.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

const QUOTES: &[(char, char)] = &[('\'', '\''), ('"', '"'), ('`', '`'), ('‘', '’'), ('“', '”'), ('`', '\''), ('‘', '\'')];

fn parse_args(s: &str) -> Result<Vec<Arg>, String> {
    let mut args = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        let first = rest.chars().next().expect("non-empty");
        if QUOTES.iter().any(|(open, _)| *open == first) {
            let body = &rest[first.len_utf8()..];
            let end = body
                .find(|c: char| QUOTES.iter().any(|(open, close)| *open == first && *close == c))
                .ok_or("unterminated string")?;
            let closer = body[end..].chars().next().expect("found");
            args.push(Arg::Text(body[..end].to_string()));
            rest = body[end + closer.len_utf8()..].trim_start();
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            let name = rest[..end].trim();
            if !is_ident(name) {
                return Err(alloc::format!("bad argument `{name}`"));
            }
            args.push(Arg::Var(name.to_string()));
            rest = rest[end..].trim_start();
        }
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err(String::from("dangling comma"));
            }
        } else if !rest.is_empty() {
            return Err(alloc::format!("unexpected `{rest}`"));
        }
    }
    Ok(args)
}

fn text_arg(a: &Arg) -> Result<&str, String> {
    match a {
        Arg::Text(t) => Ok(t),
        Arg::Var(v) => Err(alloc::format!("expected a string, got `{v}`")),
    }
}

fn relation_arg(a: &Arg) -> Result<Relation, String> {
    let t = text_arg(a)?;
    t.parse::<Relation>().map_err(|_| alloc::format!("`{t}` is outside the relation vocabulary"))
}

fn parse_call(expr: &str, vars: &BTreeMap<String, ApiCall>) -> Result<ApiCall, String> {
    let expr = expr.trim();
    let expr = expr.strip_prefix("graph.").unwrap_or(expr);
    let open = expr.find('(').ok_or("missing `(`")?;
    if !expr.ends_with(')') {
        return Err(String::from("missing `)`"));
    }
    let name = expr[..open].trim();
    let args = parse_args(&expr[open + 1..expr.len() - 1])?;
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(alloc::format!("{name} takes {n} arguments, got {}", args.len()))
        }
    };
    let var = |a: &Arg| match a {
        Arg::Var(v) => vars.get(v).cloned().ok_or(alloc::format!("unknown variable `{v}`")),
        Arg::Text(t) => Err(alloc::format!("expected a variable, got '{t}'")),
    };
    let call = match name {
        "query_for_target" => {
            arity(1)?;
            ApiCall::target(text_arg(&args[0])?.trim())
        }
        "query_for_reference_relation" => {
            arity(2)?;
            ApiCall::ref_relation(text_arg(&args[0])?.trim(), relation_arg(&args[1])?)
        }
        "query_for_reference_relation_target" => {
            arity(3)?;
            ApiCall::ref_relation_target(text_arg(&args[0])?.trim(), relation_arg(&args[1])?, text_arg(&args[2])?.trim())
        }
        "query_for_compare_dis" => {
            arity(3)?;
            ApiCall::compare_dis(relation_arg(&args[0])?, var(&args[1])?, var(&args[2])?)
        }
        other => return Err(alloc::format!("unknown API `{other}`")),
    };
    call.validate()?;
    Ok(call)
}

/// Parses model output: one API call per line, optionally bound to a
/// variable (`name = graph.query_for_target('x')`) and optionally ending in
/// a comma or semicolon. Blank lines and code fences are skipped; any other
/// line is an error. Unbound calls become plan steps; if every call is
/// bound, the last one is the plan.
pub fn parse_llm_response(raw: &str) -> Result<QueryPlan, PlanError> {
    let mut vars: BTreeMap<String, ApiCall> = BTreeMap::new();
    let mut steps = Vec::new();
    let mut last_bound = None;
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let line = line.trim_end_matches([',', ';']).trim_end();
        let (name, expr) = match line.split_once('=') {
            Some((lhs, rhs)) if is_ident(lhs.trim()) && !rhs.starts_with('=') => (Some(lhs.trim()), rhs),
            _ => (None, line),
        };
        let call = parse_call(expr, &vars).map_err(|e| protocol(raw, e))?;
        match name {
            Some(n) => {
                vars.insert(n.to_string(), call.clone());
                last_bound = Some(call);
            }
            None => steps.push(call),
        }
    }
    if steps.is_empty() {
        steps.extend(last_bound);
    }
    if steps.is_empty() {
        return Err(protocol(raw, "no API calls"));
    }
    Ok(QueryPlan { steps })
}

/// Sends the command with [`LLM_PROMPT`] and parses the reply.
pub fn plan_llm(command: &str, client: &dyn ChatClient) -> Result<QueryPlan, PlanError> {
    let reply = client.complete(LLM_PROMPT, command).map_err(PlanError::LlmUnavailable)?;
    parse_llm_response(&reply)
}

pub enum Planner<'a> {
    Grammar,
    Llm(&'a dyn ChatClient),
}

pub fn plan_query(command: &str, planner: &Planner<'_>) -> Result<QueryPlan, PlanError> {
    if command.trim().is_empty() {
        return Err(unparsable(command));
    }
    match planner {
        Planner::Grammar => plan_grammar(command),
        Planner::Llm(client) => plan_llm(command, *client),
    }
}
