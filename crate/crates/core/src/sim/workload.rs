//! Workload model and the line-oriented workload format.
//!
//! ```text
//! # declarations
//! mutex m1
//! barrier b1 4
//! condvar cv1
//! counter queued 0
//! sampled hot main.c:7          # sampled progress point on a line
//! entry main                    # optional; defaults to `main` or the first thread
//!
//! thread main:
//!   spawn worker
//!   repeat 100:
//!     compute main.c:42 1000us
//!     progress tx
//!   join worker
//!
//! thread worker:
//!   lock m1
//!   while queued < 4:
//!     condwait cv1 m1
//!   add queued -1
//!   unlock m1
//! ```
//!
//! Segments: `compute <file:line> <dur> [jitter <dur>]`, `delay <file:line> <dur>`,
//! `lock m`, `unlock m`, `barrier b`, `condwait cv m`, `signal cv`,
//! `broadcast cv`, `spawn t`, `join t`, `progress id`, `latency_begin key`,
//! `latency_end key`, `add counter <delta>`, `set counter <value>`.
//! Blocks: `repeat <n>:` and `while <counter> <op> <value>:` with op one of
//! `< <= > >= == !=`. Durations take `ns`, `us`, `ms` or `s` suffixes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::model::{parse_location, ProgressKind, ProgressPointId, SourceLocation};
use crate::time::TimeNs;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("workload line {line}: {message}")]
pub struct WorkloadError {
    /// 1-based line in the workload text; 0 when the error is not tied to a line.
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, WorkloadError> {
    Err(WorkloadError {
        line,
        message: message.into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn parse(s: &str) -> Option<CmpOp> {
        Some(match s {
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            ">" => CmpOp::Gt,
            ">=" => CmpOp::Ge,
            "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            _ => return None,
        })
    }

    pub fn eval(self, lhs: i64, rhs: i64) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

/// Loop condition over a shared counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cond {
    pub counter: usize,
    pub op: CmpOp,
    pub value: i64,
}

/// One step of a simulated thread. Sync objects, threads, counters and
/// progress points are referred to by index into the workload's tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    /// Each execution draws its length uniformly from `duration ± jitter`.
    Compute {
        line: SourceLocation,
        duration: TimeNs,
        jitter: TimeNs,
    },
    /// Artificial slowdown placed inside `line`; counts trips.
    InsertedDelay { line: SourceLocation, duration: TimeNs },
    Lock(usize),
    Unlock(usize),
    Barrier(usize),
    CondWait { cv: usize, mutex: usize },
    CondSignal(usize),
    CondBroadcast(usize),
    Spawn(usize),
    Join(usize),
    Progress(usize),
    LatencyBegin(usize),
    LatencyEnd(usize),
    Add { counter: usize, delta: i64 },
    Set { counter: usize, value: i64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Seg(Segment),
    Repeat { count: u64, body: Vec<Node> },
    While { cond: Cond, body: Vec<Node> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThreadTemplate {
    pub name: String,
    pub body: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgressDecl {
    pub id: ProgressPointId,
    pub kind: ProgressKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    pub threads: Vec<ThreadTemplate>,
    pub mutexes: Vec<String>,
    pub barriers: Vec<(String, u32)>,
    pub condvars: Vec<String>,
    pub counters: Vec<(String, i64)>,
    /// Every progress point, in first-use order. Latency pairs use the ids
    /// `<key>.begin` and `<key>.end`.
    pub progress: Vec<ProgressDecl>,
    pub entry: usize,
}

impl Workload {
    pub fn thread_index(&self, name: &str) -> Option<usize> {
        self.threads.iter().position(|t| t.name == name)
    }

    pub fn progress_index(&self, id: &str) -> Option<usize> {
        self.progress.iter().position(|p| p.id.as_str() == id)
    }

    /// The first source-level progress point, else the first point of any kind.
    pub fn primary_progress(&self) -> Option<&ProgressPointId> {
        self.progress
            .iter()
            .find(|p| p.kind == ProgressKind::Source)
            .or(self.progress.first())
            .map(|p| &p.id)
    }

    /// Distinct lines that appear in compute or delay segments.
    pub fn lines(&self) -> BTreeSet<SourceLocation> {
        let mut out = BTreeSet::new();
        for t in &self.threads {
            visit_segments(&t.body, &mut |s| match s {
                Segment::Compute { line, .. } | Segment::InsertedDelay { line, .. } => {
                    out.insert(line.clone());
                }
                _ => {}
            });
        }
        out
    }

    /// Durations of every compute segment on `line`, in program order.
    pub fn compute_durations(&self, line: &SourceLocation) -> Vec<TimeNs> {
        let mut out = Vec::new();
        for t in &self.threads {
            visit_segments(&t.body, &mut |s| {
                if let Segment::Compute { line: l, duration, .. } = s {
                    if l == line {
                        out.push(*duration);
                    }
                }
            });
        }
        out
    }

    /// Copy of the workload with an inserted delay after every compute
    /// segment on `line`.
    pub fn with_inserted_delay(&self, line: &SourceLocation, delay: TimeNs) -> Workload {
        fn rewrite(nodes: &[Node], line: &SourceLocation, delay: TimeNs) -> Vec<Node> {
            let mut out = Vec::with_capacity(nodes.len());
            for n in nodes {
                match n {
                    Node::Seg(seg @ Segment::Compute { line: l, .. }) if l == line => {
                        out.push(Node::Seg(seg.clone()));
                        if !delay.is_zero() {
                            out.push(Node::Seg(Segment::InsertedDelay {
                                line: line.clone(),
                                duration: delay,
                            }));
                        }
                    }
                    Node::Seg(s) => out.push(Node::Seg(s.clone())),
                    Node::Repeat { count, body } => out.push(Node::Repeat {
                        count: *count,
                        body: rewrite(body, line, delay),
                    }),
                    Node::While { cond, body } => out.push(Node::While {
                        cond: cond.clone(),
                        body: rewrite(body, line, delay),
                    }),
                }
            }
            out
        }
        let mut w = self.clone();
        for t in &mut w.threads {
            t.body = rewrite(&t.body, line, delay);
        }
        w
    }
}

pub(crate) fn visit_segments(nodes: &[Node], f: &mut impl FnMut(&Segment)) {
    for n in nodes {
        match n {
            Node::Seg(s) => f(s),
            Node::Repeat { body, .. } | Node::While { body, .. } => visit_segments(body, f),
        }
    }
}

struct RawLine<'a> {
    number: usize,
    indent: usize,
    words: Vec<&'a str>,
}

#[derive(Default)]
struct Names {
    mutexes: BTreeMap<String, usize>,
    barriers: BTreeMap<String, usize>,
    condvars: BTreeMap<String, usize>,
    counters: BTreeMap<String, usize>,
    threads: BTreeMap<String, usize>,
}

struct Builder {
    names: Names,
    progress: Vec<ProgressDecl>,
    progress_index: BTreeMap<String, usize>,
    latency_begin_keys: BTreeSet<String>,
    latency_end_uses: Vec<(String, usize)>,
    spawned: BTreeSet<usize>,
    joined: Vec<(usize, usize)>,
}

impl Builder {
    fn progress_point(&mut self, id: String, kind: ProgressKind, line: usize) -> Result<usize, WorkloadError> {
        if let Some(&i) = self.progress_index.get(&id) {
            if self.progress[i].kind != kind {
                return err(line, format!("progress point `{id}` used with two different kinds"));
            }
            return Ok(i);
        }
        let i = self.progress.len();
        self.progress.push(ProgressDecl {
            id: ProgressPointId::new(id.clone()),
            kind,
        });
        self.progress_index.insert(id, i);
        Ok(i)
    }
}

fn lookup(map: &BTreeMap<String, usize>, what: &str, name: &str, line: usize) -> Result<usize, WorkloadError> {
    map.get(name)
        .copied()
        .ok_or_else(|| WorkloadError {
            line,
            message: format!("undeclared {what} `{name}`"),
        })
}

fn parse_duration(text: &str, line: usize) -> Result<TimeNs, WorkloadError> {
    text.parse::<TimeNs>().map_err(|e| WorkloadError {
        line,
        message: e.to_string(),
    })
}

fn parse_int<T: std::str::FromStr>(text: &str, what: &str, line: usize) -> Result<T, WorkloadError> {
    text.parse::<T>().map_err(|_| WorkloadError {
        line,
        message: format!("malformed {what} `{text}`"),
    })
}

fn expect_args(raw: &RawLine, n: usize) -> Result<(), WorkloadError> {
    if raw.words.len() != n + 1 {
        return err(
            raw.number,
            format!("`{}` takes {} argument(s), found {}", raw.words[0], n, raw.words.len() - 1),
        );
    }
    Ok(())
}

/// Parses and validates a workload.
pub fn load_workload(text: &str) -> Result<Workload, WorkloadError> {
    let mut raw = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let content = l.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        if content.contains('\t') {
            return err(i + 1, "tabs are not allowed in indentation");
        }
        let indent = content.len() - content.trim_start().len();
        raw.push(RawLine {
            number: i + 1,
            indent,
            words: content.split_whitespace().collect(),
        });
    }

    // Pass 1: declarations and thread headers, so bodies may reference
    // objects declared later in the file.
    let mut w = Workload {
        threads: Vec::new(),
        mutexes: Vec::new(),
        barriers: Vec::new(),
        condvars: Vec::new(),
        counters: Vec::new(),
        progress: Vec::new(),
        entry: 0,
    };
    let mut names = Names::default();
    let mut entry_name: Option<(String, usize)> = None;
    let mut thread_spans: Vec<(usize, usize)> = Vec::new();
    let mut sampled: Vec<(String, SourceLocation, usize)> = Vec::new();
    let mut idx = 0;
    while idx < raw.len() {
        let r = &raw[idx];
        if r.indent != 0 {
            return err(r.number, "indented line outside a thread body");
        }
        let declared = |map: &BTreeMap<String, usize>, name: &str| map.contains_key(name);
        match r.words[0] {
            "mutex" | "condvar" => {
                expect_args(r, 1)?;
                let name = r.words[1].to_string();
                let (map, list) = if r.words[0] == "mutex" {
                    (&mut names.mutexes, &mut w.mutexes)
                } else {
                    (&mut names.condvars, &mut w.condvars)
                };
                if declared(map, &name) {
                    return err(r.number, format!("`{name}` declared twice"));
                }
                map.insert(name.clone(), list.len());
                list.push(name);
            }
            "barrier" => {
                expect_args(r, 2)?;
                let name = r.words[1].to_string();
                let count: u32 = parse_int(r.words[2], "barrier count", r.number)?;
                if count == 0 {
                    return err(r.number, format!("barrier `{name}` needs an arrival count of at least 1"));
                }
                if declared(&names.barriers, &name) {
                    return err(r.number, format!("`{name}` declared twice"));
                }
                names.barriers.insert(name.clone(), w.barriers.len());
                w.barriers.push((name, count));
            }
            "counter" => {
                expect_args(r, 2)?;
                let name = r.words[1].to_string();
                let init: i64 = parse_int(r.words[2], "counter value", r.number)?;
                if declared(&names.counters, &name) {
                    return err(r.number, format!("`{name}` declared twice"));
                }
                names.counters.insert(name.clone(), w.counters.len());
                w.counters.push((name, init));
            }
            "sampled" => {
                expect_args(r, 2)?;
                let loc = parse_location(r.words[2]).map_err(|e| WorkloadError {
                    line: r.number,
                    message: e.to_string(),
                })?;
                sampled.push((r.words[1].to_string(), loc, r.number));
            }
            "entry" => {
                expect_args(r, 1)?;
                entry_name = Some((r.words[1].to_string(), r.number));
            }
            "thread" => {
                if r.words.len() != 2 || !r.words[1].ends_with(':') || r.words[1].len() < 2 {
                    return err(r.number, "thread header must look like `thread <name>:`");
                }
                let name = r.words[1].trim_end_matches(':').to_string();
                if declared(&names.threads, &name) {
                    return err(r.number, format!("thread `{name}` declared twice"));
                }
                names.threads.insert(name.clone(), w.threads.len());
                w.threads.push(ThreadTemplate {
                    name,
                    body: Vec::new(),
                });
                let start = idx + 1;
                let mut end = start;
                while end < raw.len() && raw[end].indent > 0 {
                    end += 1;
                }
                thread_spans.push((start, end));
                idx = end;
                continue;
            }
            other => return err(r.number, format!("unknown declaration `{other}`")),
        }
        idx += 1;
    }
    if w.threads.is_empty() {
        return err(0, "workload declares no threads");
    }
    w.entry = match entry_name {
        Some((name, line)) => lookup(&names.threads, "thread", &name, line)?,
        None => names.threads.get("main").copied().unwrap_or(0),
    };

    let mut b = Builder {
        names,
        progress: Vec::new(),
        progress_index: BTreeMap::new(),
        latency_begin_keys: BTreeSet::new(),
        latency_end_uses: Vec::new(),
        spawned: BTreeSet::new(),
        joined: Vec::new(),
    };
    for (name, loc, line) in sampled {
        b.progress_point(name, ProgressKind::Sampled { line: loc }, line)?;
    }

    // Pass 2: thread bodies.
    for (t, &(start, end)) in thread_spans.iter().enumerate() {
        let lines = &raw[start..end];
        if lines.is_empty() {
            continue;
        }
        let mut pos = 0;
        let body = parse_block(lines, &mut pos, lines[0].indent, &mut b)?;
        debug_assert_eq!(pos, lines.len());
        let header_line = lines[0].number.saturating_sub(1);
        let mut held = Vec::new();
        check_lock_nesting(&body, &mut held, header_line, &w)?;
        if let Some(m) = held.last() {
            return err(
                header_line,
                format!("thread `{}` ends holding mutex `{}`", w.threads[t].name, w.mutexes[*m]),
            );
        }
        w.threads[t].body = body;
    }

    for (key, line) in &b.latency_end_uses {
        if !b.latency_begin_keys.contains(key) {
            return err(*line, format!("latency_end `{key}` has no matching latency_begin"));
        }
    }
    for &(t, line) in &b.joined {
        if !b.spawned.contains(&t) {
            return err(line, format!("thread `{}` is joined but never spawned", w.threads[t].name));
        }
    }
    if b.spawned.contains(&w.entry) {
        return err(0, format!("entry thread `{}` cannot be spawned", w.threads[w.entry].name));
    }
    w.progress = b.progress;
    Ok(w)
}

fn parse_block(
    lines: &[RawLine],
    pos: &mut usize,
    indent: usize,
    b: &mut Builder,
) -> Result<Vec<Node>, WorkloadError> {
    let mut out = Vec::new();
    while *pos < lines.len() {
        let r = &lines[*pos];
        if r.indent < indent {
            break;
        }
        if r.indent > indent {
            return err(r.number, "unexpected indentation");
        }
        *pos += 1;
        let head = r.words[0];
        if head == "repeat" || head == "while" {
            let last = r.words.last().copied().unwrap_or("");
            if !last.ends_with(':') {
                return err(r.number, format!("`{head}` header must end with `:`"));
            }
            let mut words: Vec<&str> = r.words.clone();
            let trimmed = last.trim_end_matches(':');
            words.pop();
            if !trimmed.is_empty() {
                words.push(trimmed);
            }
            let body_indent = match lines.get(*pos) {
                Some(next) if next.indent > indent => next.indent,
                _ => return err(r.number, format!("`{head}` block has an empty body")),
            };
            let header = RawLine {
                number: r.number,
                indent: r.indent,
                words,
            };
            let node = if head == "repeat" {
                expect_args(&header, 1)?;
                let count: u64 = parse_int(header.words[1], "repeat count", r.number)?;
                let body = parse_block(lines, pos, body_indent, b)?;
                Node::Repeat { count, body }
            } else {
                expect_args(&header, 3)?;
                let counter = lookup(&b.names.counters, "counter", header.words[1], r.number)?;
                let op = CmpOp::parse(header.words[2]).ok_or_else(|| WorkloadError {
                    line: r.number,
                    message: format!("unknown comparison `{}`", header.words[2]),
                })?;
                let value: i64 = parse_int(header.words[3], "comparison value", r.number)?;
                let body = parse_block(lines, pos, body_indent, b)?;
                Node::While {
                    cond: Cond { counter, op, value },
                    body,
                }
            };
            out.push(node);
            continue;
        }
        out.push(Node::Seg(parse_segment(r, b)?));
    }
    Ok(out)
}

fn parse_segment(r: &RawLine, b: &mut Builder) -> Result<Segment, WorkloadError> {
    let n = r.number;
    let names = &b.names;
    let seg = match r.words[0] {
        "compute" | "delay" => {
            let jittered = r.words[0] == "compute" && r.words.len() == 5;
            expect_args(r, if jittered { 4 } else { 2 })?;
            let line = parse_location(r.words[1]).map_err(|e| WorkloadError {
                line: n,
                message: e.to_string(),
            })?;
            let duration = parse_duration(r.words[2], n)?;
            let jitter = if jittered {
                if r.words[3] != "jitter" {
                    return err(n, format!("expected `jitter`, found `{}`", r.words[3]));
                }
                let j = parse_duration(r.words[4], n)?;
                if j > duration {
                    return err(n, "jitter exceeds the duration");
                }
                j
            } else {
                TimeNs::ZERO
            };
            if r.words[0] == "compute" {
                Segment::Compute { line, duration, jitter }
            } else {
                Segment::InsertedDelay { line, duration }
            }
        }
        "lock" => {
            expect_args(r, 1)?;
            Segment::Lock(lookup(&names.mutexes, "mutex", r.words[1], n)?)
        }
        "unlock" => {
            expect_args(r, 1)?;
            Segment::Unlock(lookup(&names.mutexes, "mutex", r.words[1], n)?)
        }
        "barrier" => {
            expect_args(r, 1)?;
            Segment::Barrier(lookup(&names.barriers, "barrier", r.words[1], n)?)
        }
        "condwait" => {
            expect_args(r, 2)?;
            Segment::CondWait {
                cv: lookup(&names.condvars, "condvar", r.words[1], n)?,
                mutex: lookup(&names.mutexes, "mutex", r.words[2], n)?,
            }
        }
        "signal" => {
            expect_args(r, 1)?;
            Segment::CondSignal(lookup(&names.condvars, "condvar", r.words[1], n)?)
        }
        "broadcast" => {
            expect_args(r, 1)?;
            Segment::CondBroadcast(lookup(&names.condvars, "condvar", r.words[1], n)?)
        }
        "spawn" => {
            expect_args(r, 1)?;
            let t = lookup(&names.threads, "thread", r.words[1], n)?;
            b.spawned.insert(t);
            Segment::Spawn(t)
        }
        "join" => {
            expect_args(r, 1)?;
            let t = lookup(&names.threads, "thread", r.words[1], n)?;
            b.joined.push((t, n));
            Segment::Join(t)
        }
        "progress" => {
            expect_args(r, 1)?;
            Segment::Progress(b.progress_point(r.words[1].to_string(), ProgressKind::Source, n)?)
        }
        "latency_begin" => {
            expect_args(r, 1)?;
            let key = r.words[1].to_string();
            b.latency_begin_keys.insert(key.clone());
            let id = format!("{key}.begin");
            Segment::LatencyBegin(b.progress_point(id, ProgressKind::LatencyBegin { key }, n)?)
        }
        "latency_end" => {
            expect_args(r, 1)?;
            let key = r.words[1].to_string();
            b.latency_end_uses.push((key.clone(), n));
            let id = format!("{key}.end");
            Segment::LatencyEnd(b.progress_point(id, ProgressKind::LatencyEnd { key }, n)?)
        }
        "add" => {
            expect_args(r, 2)?;
            Segment::Add {
                counter: lookup(&names.counters, "counter", r.words[1], n)?,
                delta: parse_int(r.words[2], "counter delta", n)?,
            }
        }
        "set" => {
            expect_args(r, 2)?;
            Segment::Set {
                counter: lookup(&names.counters, "counter", r.words[1], n)?,
                value: parse_int(r.words[2], "counter value", n)?,
            }
        }
        other => return err(n, format!("unknown segment `{other}`")),
    };
    Ok(seg)
}

/// Locks must be released in reverse order of acquisition, every block must
/// leave the held set as it found it, and a thread must end holding nothing.
fn check_lock_nesting(
    nodes: &[Node],
    held: &mut Vec<usize>,
    line: usize,
    w: &Workload,
) -> Result<(), WorkloadError> {
    for node in nodes {
        match node {
            Node::Seg(Segment::Lock(m)) => {
                if held.contains(m) {
                    return err(line, format!("mutex `{}` locked twice by one thread", w.mutexes[*m]));
                }
                held.push(*m);
            }
            Node::Seg(Segment::Unlock(m)) => match held.last() {
                Some(top) if top == m => {
                    held.pop();
                }
                _ => {
                    return err(
                        line,
                        format!("unlock of `{}` does not match the innermost held lock", w.mutexes[*m]),
                    )
                }
            },
            Node::Seg(Segment::CondWait { mutex, .. }) => {
                if !held.contains(mutex) {
                    return err(line, format!("condwait without holding `{}`", w.mutexes[*mutex]));
                }
            }
            Node::Seg(_) => {}
            Node::Repeat { body, .. } | Node::While { body, .. } => {
                let before = held.clone();
                check_lock_nesting(body, held, line, w)?;
                if *held != before {
                    return err(line, "lock/unlock not balanced inside a loop body");
                }
            }
        }
    }
    Ok(())
}

impl fmt::Display for Workload {
    /// Writes the workload back in the text format.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.mutexes {
            writeln!(f, "mutex {m}")?;
        }
        for (b, n) in &self.barriers {
            writeln!(f, "barrier {b} {n}")?;
        }
        for c in &self.condvars {
            writeln!(f, "condvar {c}")?;
        }
        for (c, v) in &self.counters {
            writeln!(f, "counter {c} {v}")?;
        }
        for p in &self.progress {
            if let ProgressKind::Sampled { line } = &p.kind {
                writeln!(f, "sampled {} {}", p.id, line)?;
            }
        }
        writeln!(f, "entry {}", self.threads[self.entry].name)?;
        for t in &self.threads {
            writeln!(f, "\nthread {}:", t.name)?;
            self.write_nodes(f, &t.body, 1)?;
        }
        Ok(())
    }
}

impl Workload {
    fn write_nodes(&self, f: &mut fmt::Formatter<'_>, nodes: &[Node], depth: usize) -> fmt::Result {
        let pad = "  ".repeat(depth);
        for n in nodes {
            match n {
                Node::Seg(s) => writeln!(f, "{pad}{}", self.segment_text(s))?,
                Node::Repeat { count, body } => {
                    writeln!(f, "{pad}repeat {count}:")?;
                    self.write_nodes(f, body, depth + 1)?;
                }
                Node::While { cond, body } => {
                    writeln!(
                        f,
                        "{pad}while {} {} {}:",
                        self.counters[cond.counter].0,
                        cond.op.symbol(),
                        cond.value
                    )?;
                    self.write_nodes(f, body, depth + 1)?;
                }
            }
        }
        Ok(())
    }

    fn latency_key(&self, p: usize) -> &str {
        match &self.progress[p].kind {
            ProgressKind::LatencyBegin { key } | ProgressKind::LatencyEnd { key } => key,
            _ => self.progress[p].id.as_str(),
        }
    }

    pub(crate) fn segment_text(&self, s: &Segment) -> String {
        match s {
            Segment::Compute { line, duration, jitter } if jitter.is_zero() => {
                format!("compute {line} {duration}")
            }
            Segment::Compute { line, duration, jitter } => {
                format!("compute {line} {duration} jitter {jitter}")
            }
            Segment::InsertedDelay { line, duration } => format!("delay {line} {duration}"),
            Segment::Lock(m) => format!("lock {}", self.mutexes[*m]),
            Segment::Unlock(m) => format!("unlock {}", self.mutexes[*m]),
            Segment::Barrier(b) => format!("barrier {}", self.barriers[*b].0),
            Segment::CondWait { cv, mutex } => {
                format!("condwait {} {}", self.condvars[*cv], self.mutexes[*mutex])
            }
            Segment::CondSignal(cv) => format!("signal {}", self.condvars[*cv]),
            Segment::CondBroadcast(cv) => format!("broadcast {}", self.condvars[*cv]),
            Segment::Spawn(t) => format!("spawn {}", self.threads[*t].name),
            Segment::Join(t) => format!("join {}", self.threads[*t].name),
            Segment::Progress(p) => format!("progress {}", self.progress[*p].id),
            Segment::LatencyBegin(p) => format!("latency_begin {}", self.latency_key(*p)),
            Segment::LatencyEnd(p) => format!("latency_end {}", self.latency_key(*p)),
            Segment::Add { counter, delta } => format!("add {} {delta}", self.counters[*counter].0),
            Segment::Set { counter, value } => format!("set {} {value}", self.counters[*counter].0),
        }
    }
}
