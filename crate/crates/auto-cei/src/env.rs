//! Synthetic rule-chain reasoning tasks.
//!
//! A task is a set of base facts (atoms known true), propositional rules
//! (literal premises, one literal conclusion), and a query atom whose status
//! is `true` (derivable), `false` (its negation is derivable) or `unknown`
//! (neither). Tasks carry their ground-truth difficulty `optimal_steps`: the
//! length of the shortest derivation settling the query or, for `unknown`,
//! the number of rule firings needed to saturate the fact closure and rule
//! the query out.
//!
//! Generation is fully deterministic in `(difficulty, seed)`. Every rule has
//! at most one premise outside the base facts, so the shortest derivation is
//! a chain and [`oracle_solve`] computes it exactly; distractor rules (two
//! per depth level) either branch off the chain into fresh atoms or are
//! never fireable, and never shorten the optimal derivation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest supported difficulty (chain depth).
pub const MAX_DEPTH: u32 = 12;

pub type Atom = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    True,
    False,
    Unknown,
}

impl Label {
    pub fn parse(s: &str) -> Result<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" => Ok(Label::True),
            "false" => Ok(Label::False),
            "unknown" => Ok(Label::Unknown),
            other => Err(Error::MalformedAnswer(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::True => "true",
            Label::False => "false",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An atom with a required (premise) or assigned (conclusion) truth value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Literal {
    pub atom: Atom,
    pub value: bool,
}

impl Literal {
    pub fn pos(atom: impl Into<Atom>) -> Literal {
        Literal { atom: atom.into(), value: true }
    }

    pub fn neg(atom: impl Into<Atom>) -> Literal {
        Literal { atom: atom.into(), value: false }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.value {
            f.write_str(&self.atom)
        } else {
            write!(f, "!{}", self.atom)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub premises: Vec<Literal>,
    pub conclusion: Literal,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.premises.iter().map(|p| p.to_string()).collect();
        write!(f, "{}: {} -> {}", self.id, parts.join(" & "), self.conclusion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleChainTask {
    pub id: String,
    pub facts: Vec<Atom>,
    pub rules: Vec<Rule>,
    pub query: Atom,
    pub label: Label,
    pub optimal_steps: u32,
}

/// Forward-chaining state: truth assignments derived so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivationState {
    pub known: BTreeMap<Atom, bool>,
    pub steps_taken: u32,
}

impl DerivationState {
    pub fn initial(task: &RuleChainTask) -> DerivationState {
        let known = task.facts.iter().map(|a| (a.clone(), true)).collect();
        DerivationState { known, steps_taken: 0 }
    }

    fn satisfies(&self, premises: &[Literal]) -> bool {
        premises.iter().all(|p| self.known.get(&p.atom) == Some(&p.value))
    }
}

/// Shortest proof (or disproof) of a task's query: rule ids in firing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub steps: Vec<String>,
    pub conclusion: Literal,
}

/// Saturated closure of the facts under the task's rules.
#[derive(Debug, Clone)]
pub struct Closure {
    pub state: DerivationState,
    pub fired: Vec<String>,
}

impl RuleChainTask {
    pub fn rule(&self, rule_id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == rule_id)
    }

    /// True when `answer` matches the task's ground-truth label.
    pub fn evaluate_answer(&self, answer: Label) -> bool {
        answer == self.label
    }

    /// Deterministic textual rendering used as the prompt of dataset records.
    pub fn prompt(&self) -> String {
        let facts = self.facts.join(", ");
        let rules: Vec<String> = self.rules.iter().map(|r| r.to_string()).collect();
        format!(
            "Facts: {facts}. Rules: {rules}. Query: {query}?",
            rules = rules.join("; "),
            query = self.query
        )
    }

    /// Structural sanity plus closure consistency.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidTask { task: self.id.clone(), reason });
        if self.optimal_steps == 0 || self.optimal_steps > MAX_DEPTH {
            return fail(format!("optimal_steps {} outside 1..={MAX_DEPTH}", self.optimal_steps));
        }
        if self.facts.is_empty() {
            return fail("no facts".into());
        }
        if self.rules.is_empty() {
            return fail("no rules".into());
        }
        let mut fact_set = BTreeSet::new();
        for fact in &self.facts {
            if !fact_set.insert(fact.clone()) {
                return fail(format!("duplicate fact {fact}"));
            }
        }
        let mut ids = BTreeSet::new();
        for rule in &self.rules {
            if !ids.insert(rule.id.clone()) {
                return fail(format!("duplicate rule id {}", rule.id));
            }
            if rule.premises.is_empty() {
                return fail(format!("rule {} has no premises", rule.id));
            }
        }
        self.check_acyclic()?;
        // Closure errors on derivable contradictions.
        self.closure()?;
        Ok(())
    }

    /// Rejects cyclic literal dependencies (premise literal -> conclusion
    /// literal edges must form a DAG).
    fn check_acyclic(&self) -> Result<()> {
        let mut nodes: BTreeMap<(Atom, bool), usize> = BTreeMap::new();
        let key = |lit: &Literal, nodes: &mut BTreeMap<(Atom, bool), usize>| {
            let next = nodes.len();
            *nodes.entry((lit.atom.clone(), lit.value)).or_insert(next)
        };
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for rule in &self.rules {
            let c = key(&rule.conclusion, &mut nodes);
            for p in &rule.premises {
                let pk = key(p, &mut nodes);
                edges.push((pk, c));
            }
        }
        let n = nodes.len();
        let mut adj = vec![Vec::new(); n];
        for (a, b) in edges {
            adj[a].push(b);
        }
        // Iterative three-colour DFS.
        let mut colour = vec![0u8; n];
        for start in 0..n {
            if colour[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            colour[start] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if *next < adj[node].len() {
                    let child = adj[node][*next];
                    *next += 1;
                    match colour[child] {
                        0 => {
                            colour[child] = 1;
                            stack.push((child, 0));
                        }
                        1 => {
                            return Err(Error::InvalidTask {
                                task: self.id.clone(),
                                reason: "cyclic rule dependencies".into(),
                            })
                        }
                        _ => {}
                    }
                } else {
                    colour[node] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Saturates the closure, firing at most once per rule, scanning rules in
    /// order so the firing sequence is deterministic.
    pub fn closure(&self) -> Result<Closure> {
        let mut state = DerivationState::initial(self);
        let mut fired_flags = vec![false; self.rules.len()];
        let mut fired = Vec::new();
        loop {
            let next = self
                .rules
                .iter()
                .enumerate()
                .find(|(i, r)| !fired_flags[*i] && state.satisfies(&r.premises));
            let Some((i, rule)) = next else { break };
            if let Some(&prev) = state.known.get(&rule.conclusion.atom) {
                if prev != rule.conclusion.value {
                    return Err(Error::InvalidTask {
                        task: self.id.clone(),
                        reason: format!("rule {} derives a contradiction", rule.id),
                    });
                }
            }
            state.known.insert(rule.conclusion.atom.clone(), rule.conclusion.value);
            state.steps_taken += 1;
            fired_flags[i] = true;
            fired.push(rule.id.clone());
        }
        Ok(Closure { state, fired })
    }
}

/// Applies one rule to `state`, returning the successor state.
pub fn transition(
    task: &RuleChainTask,
    state: &DerivationState,
    rule_id: &str,
) -> Result<DerivationState> {
    let rule = task
        .rule(rule_id)
        .ok_or_else(|| Error::UnknownRule { task: task.id.clone(), rule: rule_id.to_string() })?;
    let violated =
        || Error::PreconditionViolation { task: task.id.clone(), rule: rule_id.to_string() };
    if !state.satisfies(&rule.premises) {
        return Err(violated());
    }
    if let Some(&prev) = state.known.get(&rule.conclusion.atom) {
        if prev != rule.conclusion.value {
            // Contradicting an established value would break monotonicity.
            return Err(violated());
        }
    }
    let mut next = state.clone();
    next.known.insert(rule.conclusion.atom.clone(), rule.conclusion.value);
    next.steps_taken += 1;
    Ok(next)
}

/// Shortest derivation proving or disproving the query, if one exists.
///
/// Cost relaxation over literals: exact whenever each rule has at most one
/// premise outside the base facts (true for every generated task; checked
/// exhaustively against breadth-first search in tests).
pub fn oracle_solve(task: &RuleChainTask) -> Option<Derivation> {
    let mut derived: BTreeMap<(Atom, bool), Vec<usize>> =
        task.facts.iter().map(|a| ((a.clone(), true), Vec::new())).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for (ri, rule) in task.rules.iter().enumerate() {
            let premise_derivs: Option<Vec<&Vec<usize>>> =
                rule.premises.iter().map(|p| derived.get(&(p.atom.clone(), p.value))).collect();
            let Some(premise_derivs) = premise_derivs else { continue };
            let mut steps: Vec<usize> = Vec::new();
            for d in premise_derivs {
                for &s in d {
                    if !steps.contains(&s) {
                        steps.push(s);
                    }
                }
            }
            if !steps.contains(&ri) {
                steps.push(ri);
            }
            let key = (rule.conclusion.atom.clone(), rule.conclusion.value);
            let better = derived.get(&key).is_none_or(|old| steps.len() < old.len());
            if better {
                derived.insert(key, steps);
                changed = true;
            }
        }
    }
    let lookup = |value: bool| derived.get(&(task.query.clone(), value));
    let best = match (lookup(true), lookup(false)) {
        (Some(t), Some(f)) => {
            if t.len() <= f.len() {
                Some((t, true))
            } else {
                Some((f, false))
            }
        }
        (Some(t), None) => Some((t, true)),
        (None, Some(f)) => Some((f, false)),
        (None, None) => None,
    };
    best.map(|(steps, value)| Derivation {
        steps: steps.iter().map(|&i| task.rules[i].id.clone()).collect(),
        conclusion: Literal { atom: task.query.clone(), value },
    })
}

/// Reasoning-step texts of the reference solution: the shortest derivation
/// for decided queries, the full saturation trace for unknown ones. One text
/// per step, so a rendered response has exactly `optimal_steps` steps.
pub fn oracle_steps(task: &RuleChainTask) -> Result<Vec<String>> {
    let rule_text = |id: &str| {
        let rule = task.rule(id).expect("derivations reference task rules");
        format!("rule {} gives {}", rule.id, rule.conclusion)
    };
    match task.label {
        Label::True | Label::False => {
            let derivation = oracle_solve(task).ok_or_else(|| Error::InvalidTask {
                task: task.id.clone(),
                reason: "decided label but underivable query".into(),
            })?;
            Ok(derivation.steps.iter().map(|id| rule_text(id)).collect())
        }
        Label::Unknown => {
            let closure = task.closure()?;
            Ok(closure.fired.iter().map(|id| rule_text(id)).collect())
        }
    }
}

/// Deterministically generates one task of the given difficulty.
pub fn generate_task(difficulty: u32, seed: u64) -> Result<RuleChainTask> {
    if difficulty == 0 || difficulty > MAX_DEPTH {
        return Err(Error::InvalidDifficulty(difficulty));
    }
    let l = difficulty as usize;
    let mut rng = rng::stream(seed, &["task", &difficulty.to_string()]);
    let label = match rng.gen_range(0..3u8) {
        0 => Label::True,
        1 => Label::False,
        _ => Label::Unknown,
    };

    let n_facts = rng.gen_range(2..=3usize);
    let (n_side, n_dead) = match label {
        Label::Unknown => (0usize, 2 * l),
        _ => (l, l),
    };
    let n_dead_concl = match label {
        Label::Unknown => n_dead - 2,
        _ => n_dead.saturating_sub(1),
    };
    let needs_query_atom = label == Label::Unknown;
    let n_atoms = n_facts + l + n_side + n_dead + n_dead_concl + usize::from(needs_query_atom);

    let mut pool: Vec<Atom> = (0..n_atoms).map(|i| format!("a{i:03}")).collect();
    pool.shuffle(&mut rng);
    let mut next_atom = pool.into_iter();
    let mut take = |n: usize| -> Vec<Atom> { (&mut next_atom).take(n).collect() };

    let facts = take(n_facts);
    let chain = take(l);
    let side = take(n_side);
    let dead_premise = take(n_dead);
    let dead_concl = take(n_dead_concl);
    let query = if needs_query_atom {
        take(1).pop().expect("query atom allocated")
    } else {
        chain[l - 1].clone()
    };

    let mut chain_pol: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.5)).collect();
    if label != Label::Unknown {
        chain_pol[l - 1] = label == Label::True;
    }

    struct Proto {
        premises: Vec<Literal>,
        conclusion: Literal,
    }
    let mut protos: Vec<Proto> = Vec::with_capacity(l + n_side + n_dead);

    // Main chain: rule i turns the previous conclusion (or a base fact) into
    // the next chain literal.
    for i in 0..l {
        let first = if i == 0 {
            Literal::pos(facts[rng.gen_range(0..n_facts)].clone())
        } else {
            Literal { atom: chain[i - 1].clone(), value: chain_pol[i - 1] }
        };
        let mut premises = vec![first];
        if rng.gen_bool(0.5) {
            let extra = Literal::pos(facts[rng.gen_range(0..n_facts)].clone());
            if !premises.contains(&extra) {
                premises.push(extra);
            }
        }
        protos.push(Proto {
            premises,
            conclusion: Literal { atom: chain[i].clone(), value: chain_pol[i] },
        });
    }

    // Applicable distractors: branch off a derivable literal into a fresh atom.
    let mut supports: Vec<Literal> = facts.iter().map(|f| Literal::pos(f.clone())).collect();
    supports.extend((0..l).map(|i| Literal { atom: chain[i].clone(), value: chain_pol[i] }));
    for side_atom in &side {
        let mut premises = vec![supports[rng.gen_range(0..supports.len())].clone()];
        if rng.gen_bool(0.3) {
            let extra = Literal::pos(facts[rng.gen_range(0..n_facts)].clone());
            if !premises.contains(&extra) {
                premises.push(extra);
            }
        }
        protos.push(Proto {
            premises,
            conclusion: Literal { atom: side_atom.clone(), value: rng.gen_bool(0.5) },
        });
    }

    // Dead distractors: gated on an underivable atom, so they never fire. For
    // unknown tasks the first two advertise the query itself (both
    // polarities), which is what makes the query worth exploring.
    for (i, gate) in dead_premise.iter().enumerate() {
        let mut premises = vec![Literal::pos(gate.clone())];
        // The counter-claim rule (decided label, i == 0) concludes the
        // negated final chain literal; drawing that same literal as its
        // impossible extra premise would self-loop the dependency graph.
        let exclude_last = label != Label::Unknown && i == 0;
        let choices = if exclude_last { l - 1 } else { l };
        if choices > 0 && rng.gen_bool(0.5) {
            // Extra impossible premise: the negation of an established literal.
            let j = rng.gen_range(0..choices);
            premises.push(Literal { atom: chain[j].clone(), value: !chain_pol[j] });
        }
        let conclusion = match label {
            Label::Unknown => match i {
                0 => Literal::pos(query.clone()),
                1 => Literal::neg(query.clone()),
                _ => Literal { atom: dead_concl[i - 2].clone(), value: rng.gen_bool(0.5) },
            },
            _ => {
                if i == 0 {
                    // A never-fireable counter-claim about the query.
                    Literal { atom: query.clone(), value: !chain_pol[l - 1] }
                } else {
                    Literal { atom: dead_concl[i - 1].clone(), value: rng.gen_bool(0.5) }
                }
            }
        };
        protos.push(Proto { premises, conclusion });
    }

    protos.shuffle(&mut rng);
    let rules: Vec<Rule> = protos
        .into_iter()
        .enumerate()
        .map(|(i, p)| Rule {
            id: format!("r{}", i + 1),
            premises: p.premises,
            conclusion: p.conclusion,
        })
        .collect();

    let task = RuleChainTask {
        id: format!("t{seed:016x}-l{difficulty}"),
        facts,
        rules,
        query,
        label,
        optimal_steps: difficulty,
    };
    task.validate()?;

    // Generation guarantees, kept as hard checks: the oracle must agree with
    // the intended label and difficulty.
    match task.label {
        Label::True | Label::False => {
            let derivation = oracle_solve(&task).ok_or_else(|| Error::InvalidTask {
                task: task.id.clone(),
                reason: "generated decided task is underivable".into(),
            })?;
            let expect_value = task.label == Label::True;
            if derivation.conclusion.value != expect_value || derivation.steps.len() != l {
                return Err(Error::InvalidTask {
                    task: task.id.clone(),
                    reason: "oracle disagrees with generated label/difficulty".into(),
                });
            }
        }
        Label::Unknown => {
            if oracle_solve(&task).is_some() {
                return Err(Error::InvalidTask {
                    task: task.id.clone(),
                    reason: "generated unknown task is derivable".into(),
                });
            }
            let closure = task.closure()?;
            if closure.fired.len() != l {
                return Err(Error::InvalidTask {
                    task: task.id.clone(),
                    reason: "saturation length disagrees with difficulty".into(),
                });
            }
        }
    }
    Ok(task)
}

/// A set of tasks with unique ids.
#[derive(Debug, Clone)]
pub struct TaskSet {
    tasks: Vec<RuleChainTask>,
    by_id: BTreeMap<String, usize>,
}

impl TaskSet {
    pub fn new(tasks: Vec<RuleChainTask>) -> Result<TaskSet> {
        let mut by_id = BTreeMap::new();
        for (i, task) in tasks.iter().enumerate() {
            if by_id.insert(task.id.clone(), i).is_some() {
                return Err(Error::InvalidTask {
                    task: task.id.clone(),
                    reason: "duplicate task id in task set".into(),
                });
            }
        }
        Ok(TaskSet { tasks, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&RuleChainTask> {
        self.by_id.get(id).map(|&i| &self.tasks[i])
    }

    pub fn tasks(&self) -> &[RuleChainTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for task in &self.tasks {
            out.push_str(&serde_json::to_string(task).expect("task serialization is infallible"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl_string())?;
        Ok(())
    }

    pub fn from_jsonl(path: &Path) -> Result<TaskSet> {
        let text = std::fs::read_to_string(path)?;
        let mut tasks = Vec::new();
        let mut by_id = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let task: RuleChainTask = serde_json::from_str(line).map_err(|e| Error::ParseLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if by_id.insert(task.id.clone(), tasks.len()).is_some() {
                return Err(Error::DuplicateTaskId {
                    path: path.to_path_buf(),
                    line: i + 1,
                    id: task.id,
                });
            }
            tasks.push(task);
        }
        Ok(TaskSet { tasks, by_id })
    }
}

/// Generates `n` tasks with difficulties uniform over `depths`.
///
/// Each task draws from a stream keyed by `(seed, split, index)`, so batches
/// are reproducible and distinct splits get disjoint tasks.
pub fn generate_batch(
    split: &str,
    n: usize,
    depths: std::ops::RangeInclusive<u32>,
    seed: u64,
) -> Result<TaskSet> {
    if *depths.start() == 0 || *depths.end() > MAX_DEPTH || depths.is_empty() {
        return Err(Error::InvalidDifficulty(*depths.end()));
    }
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, &["batch", split, &i.to_string()]);
        let difficulty = r.gen_range(*depths.start()..=*depths.end());
        let task_seed = r.gen::<u64>();
        tasks.push(generate_task(difficulty, task_seed)?);
    }
    TaskSet::new(tasks)
}
