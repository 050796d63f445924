//! Context-aware instruction translation.
//!
//! A single top-to-bottom pass simulates the operand stack and the local
//! variable array symbolically. Each instruction's template is filled with
//! its constant, the resolved variable name, the popped stack values and its
//! branch target, and the pass records which instruction produced every
//! popped value (data dependencies) and every branch target (control
//! dependencies).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disasm::{resolve_variable, Instruction, MethodDisassembly};
use crate::ruleset::{Category, Placeholder, PopSpec, PushSpec, RuleSet, TemplatePart, TranslationRule};

/// Rendered in place of a stack value the pass cannot name.
pub const GENERIC_VALUE: &str = "value";
/// Joins sentences in the flat text stream fed to the encoders.
pub const SENTENCE_BOUNDARY: &str = ".";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranslateError {
    #[error("no translation rule for opcode `{0}`")]
    UnknownOpcode(String),
    #[error("instruction {index}: simulated stack exceeds declared max_stack {max_stack}")]
    StackOverflowSim { index: u32, max_stack: u16 },
    #[error("`{0}` is not a pop-operate-push instruction")]
    NotPopOperatePush(String),
}

/// A value on the simulated operand stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicValue {
    pub text: String,
    pub producer_index: u32,
}

impl SymbolicValue {
    pub fn new(text: impl Into<String>, producer_index: u32) -> Self {
        Self {
            text: text.into(),
            producer_index,
        }
    }

    /// Stand-in for a value popped off an empty stack; its producer is the
    /// consuming instruction itself, so no dependency edge is recorded.
    pub fn sentinel(at: u32) -> Self {
        Self::new(GENERIC_VALUE, at)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimState {
    pub stack: Vec<SymbolicValue>,
    /// Current variable name per slot.
    pub locals: Vec<Option<String>>,
}

impl SimState {
    pub fn with_stack<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        Self {
            stack: values.into_iter().map(|(t, p)| SymbolicValue::new(t, p)).collect(),
            locals: Vec::new(),
        }
    }

    fn set_local(&mut self, slot: usize, name: &str) {
        if self.locals.len() <= slot {
            self.locals.resize(slot + 1, None);
        }
        self.locals[slot] = Some(name.to_string());
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionDependencyGraph {
    pub nodes: Vec<u32>,
    /// (consumer, producer)
    pub data_edges: Vec<(u32, u32)>,
    /// (branch, target)
    pub control_edges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub method_id: String,
    pub sentences: Vec<(u32, String)>,
    pub dependency_graph: InstructionDependencyGraph,
    /// Simulated operand-stack depth after the last instruction.
    pub final_stack_depth: usize,
}

impl Translation {
    /// All sentences as one stream, separated by the boundary token.
    pub fn text_stream(&self) -> String {
        let sep = format!(" {SENTENCE_BOUNDARY} ");
        self.sentences
            .iter()
            .map(|(_, s)| s.as_str())
            .collect::<Vec<_>>()
            .join(&sep)
    }

    /// `idx:\tsentence` lines.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for (idx, s) in &self.sentences {
            let _ = writeln!(out, "{idx}:\t{s}");
        }
        out
    }
}

/// Parameter count and result presence of a call, read from the
/// `// Method owner.name:(…)R` comment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallShape {
    pub params: usize,
    pub returns_value: bool,
}

pub fn parse_call_descriptor(comment: &str) -> Option<CallShape> {
    let start = comment.rfind(":(")? + 2;
    let mut chars = comment[start..].chars();
    let mut params = 0;
    loop {
        match chars.next()? {
            ')' => break,
            'B' | 'C' | 'D' | 'F' | 'I' | 'J' | 'S' | 'Z' => params += 1,
            'L' => {
                chars.by_ref().find(|&c| c == ';')?;
                params += 1;
            }
            '[' => {
                let mut c = chars.next()?;
                while c == '[' {
                    c = chars.next()?;
                }
                if c == 'L' {
                    chars.by_ref().find(|&c| c == ';')?;
                }
                params += 1;
            }
            _ => return None,
        }
    }
    let returns_value = chars.next()? != 'V';
    Some(CallShape { params, returns_value })
}

fn has_receiver(opcode: &str) -> bool {
    matches!(opcode, "invokevirtual" | "invokespecial" | "invokeinterface")
}

fn simple_class_name(internal: &str) -> &str {
    let name = internal.trim_matches('"');
    name.rsplit('/').next().unwrap_or(name)
}

/// Short human-readable form of a disassembler comment:
/// `Method java/io/PrintStream.println:(I)V` → `PrintStream.println`,
/// `String hello` → `hello`, `class java/lang/String` → `String`.
pub fn symbolic_reference(comment: &str) -> String {
    let comment = comment.trim();
    let Some((kind, rest)) = comment.split_once(char::is_whitespace) else {
        return comment.to_string();
    };
    let rest = rest.trim();
    match kind {
        "Method" | "InterfaceMethod" | "Field" => {
            let member = rest.rsplit_once(':').map_or(rest, |(m, _)| m);
            match member.rsplit_once('.') {
                Some((owner, name)) => {
                    format!("{}.{}", simple_class_name(owner), name.trim_matches('"'))
                }
                None => member.trim_matches('"').to_string(),
            }
        }
        "InvokeDynamic" => rest
            .split(':')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| rest.to_string()),
        "class" => simple_class_name(rest).to_string(),
        "String" | "int" | "long" | "float" | "double" => rest.to_string(),
        _ => comment.to_string(),
    }
}

fn constant_text(instr: &Instruction, category: Category) -> Option<String> {
    if instr.opcode == "aconst_null" {
        return Some("null".to_string());
    }
    if let Some(comment) = &instr.descriptor_comment {
        return Some(symbolic_reference(comment));
    }
    let pos = if category == Category::VariableOnly { 1 } else { 0 };
    instr.operands.get(pos).map(i64::to_string)
}

/// Number of values `rule` takes off the stack for `instr`, and whether that
/// number is actually known (a call without a descriptor comment is not).
fn pop_count(rule: &TranslationRule, instr: &Instruction) -> (usize, bool) {
    match rule.pop {
        PopSpec::Fixed(n) => (n, true),
        PopSpec::Operand(k) => (instr.operands.get(k).map_or(0, |&n| n.clamp(0, 255) as usize), true),
        PopSpec::Descriptor => match instr.descriptor_comment.as_deref().and_then(parse_call_descriptor) {
            Some(shape) => (shape.params + usize::from(has_receiver(&rule.opcode)), true),
            None => (0, false),
        },
    }
}

/// Pops the values `rule` consumes, top of stack first. Missing values are
/// replaced by [`SymbolicValue::sentinel`].
pub fn pop_for(rule: &TranslationRule, instr: &Instruction, state: &mut SimState) -> Vec<SymbolicValue> {
    let (n, _) = pop_count(rule, instr);
    (0..n)
        .map(|_| {
            state
                .stack
                .pop()
                .unwrap_or_else(|| SymbolicValue::sentinel(instr.index))
        })
        .collect()
}

/// The value a pop-operate-push instruction leaves on the stack.
pub fn render_result(
    rule: &TranslationRule,
    _popped: &[SymbolicValue],
    instr: &Instruction,
) -> Result<SymbolicValue, TranslateError> {
    if rule.category != Category::PopOperatePush {
        return Err(TranslateError::NotPopOperatePush(rule.opcode.clone()));
    }
    Ok(SymbolicValue::new(GENERIC_VALUE, instr.index))
}

fn pushed_values(
    rule: &TranslationRule,
    instr: &Instruction,
    popped: &[SymbolicValue],
    constant: Option<&str>,
    variable: Option<&str>,
) -> Vec<SymbolicValue> {
    let single = |rule: &TranslationRule| match rule.category {
        Category::PopOperatePush => render_result(rule, popped, instr).expect("category checked"),
        Category::PushOnly => SymbolicValue::new(constant.unwrap_or(GENERIC_VALUE), instr.index),
        Category::StackAndVariable => SymbolicValue::new(variable.unwrap_or(GENERIC_VALUE), instr.index),
        _ => SymbolicValue::new(GENERIC_VALUE, instr.index),
    };
    match &rule.push {
        PushSpec::Count(n) => (0..*n).map(|_| single(rule)).collect(),
        PushSpec::Descriptor => {
            let returns = instr
                .descriptor_comment
                .as_deref()
                .and_then(parse_call_descriptor)
                .is_some_and(|s| s.returns_value);
            if returns {
                vec![single(rule)]
            } else {
                Vec::new()
            }
        }
        PushSpec::Copies(indices) => indices
            .iter()
            .map(|&i| {
                let text = popped.get(i).map_or(GENERIC_VALUE, |v| v.text.as_str());
                SymbolicValue::new(text, instr.index)
            })
            .collect(),
    }
}

struct Fill<'a> {
    constant: Option<&'a str>,
    variable: Option<&'a str>,
    popped: &'a [SymbolicValue],
    arity_known: bool,
    target: Option<i64>,
}

fn fill_template(parts: &[TemplatePart], fill: &Fill<'_>) -> String {
    let stack_slots = parts
        .iter()
        .filter(|p| matches!(p, TemplatePart::Slot(Placeholder::Stack)))
        .count();
    let positional = stack_slots > 0 && stack_slots == fill.popped.len();
    let joined = if fill.popped.is_empty() {
        if fill.arity_known { "none" } else { GENERIC_VALUE }.to_string()
    } else {
        fill.popped
            .iter()
            .map(|v| v.text.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };

    let mut out = String::new();
    let mut stack_seen = 0;
    for part in parts {
        match part {
            TemplatePart::Text(t) => out.push_str(t),
            TemplatePart::Slot(Placeholder::Constant) => out.push_str(fill.constant.unwrap_or(GENERIC_VALUE)),
            TemplatePart::Slot(Placeholder::Variable) => out.push_str(fill.variable.unwrap_or(GENERIC_VALUE)),
            TemplatePart::Slot(Placeholder::Target) => match fill.target {
                Some(t) => out.push_str(&t.to_string()),
                None => out.push_str(GENERIC_VALUE),
            },
            TemplatePart::Slot(Placeholder::Stack) => {
                if positional {
                    // deepest value first
                    let v = &fill.popped[fill.popped.len() - 1 - stack_seen];
                    out.push_str(&v.text);
                } else {
                    out.push_str(&joined);
                }
                stack_seen += 1;
            }
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Instructions after which execution never falls through.
fn is_unconditional_transfer(opcode: &str) -> bool {
    matches!(
        opcode,
        "goto"
            | "goto_w"
            | "return"
            | "ireturn"
            | "lreturn"
            | "freturn"
            | "dreturn"
            | "areturn"
            | "athrow"
            | "tableswitch"
            | "lookupswitch"
            | "ret"
    )
}

fn branch_targets(instr: &Instruction) -> &[i64] {
    match instr.opcode.as_str() {
        "tableswitch" | "lookupswitch" => &instr.operands,
        _ => &instr.operands[..instr.operands.len().min(1)],
    }
}

fn variable_name(md: &MethodDisassembly, instr: &Instruction, slot: u16, is_store: bool, state: &SimState) -> String {
    // A stored variable's scope begins at the instruction after the store.
    let next = md.next_index(instr.index).or(Some(instr.index + 1));
    let probes = if is_store {
        [next, Some(instr.index)]
    } else {
        [Some(instr.index), next]
    };
    probes
        .into_iter()
        .flatten()
        .find_map(|at| resolve_variable(md, slot, at).ok().map(|e| e.name.clone()))
        .or_else(|| state.locals.get(usize::from(slot)).cloned().flatten())
        .unwrap_or_else(|| format!("var{slot}"))
}

/// Translates one method into one sentence per instruction plus its
/// instruction dependency graph.
pub fn translate_method(md: &MethodDisassembly, rs: &RuleSet) -> Result<Translation, TranslateError> {
    let mut state = SimState::default();
    let nodes: Vec<u32> = md.instructions.iter().map(|i| i.index).collect();
    let node_set: BTreeSet<u32> = nodes.iter().copied().collect();
    let mut data_edges = BTreeSet::new();
    let mut control_edges = BTreeSet::new();
    let mut sentences = Vec::with_capacity(md.instructions.len());
    // Stack state recorded at forward branches, restored at their targets
    // when the preceding instruction does not fall through.
    let mut branch_states: HashMap<u32, Vec<SymbolicValue>> = HashMap::new();
    let mut falls_through = true;

    for instr in &md.instructions {
        let rule = rs
            .get(&instr.opcode)
            .ok_or_else(|| TranslateError::UnknownOpcode(instr.opcode.clone()))?;
        let parts = rule
            .parts()
            .map_err(|_| TranslateError::UnknownOpcode(instr.opcode.clone()))?;

        if !falls_through {
            state.stack = branch_states.remove(&instr.index).unwrap_or_default();
        }

        let (_, arity_known) = pop_count(rule, instr);
        let popped = pop_for(rule, instr, &mut state);
        for v in &popped {
            if v.producer_index != instr.index {
                data_edges.insert((instr.index, v.producer_index));
            }
        }

        let constant = constant_text(instr, rule.category);
        let variable = if rule.has_placeholder(Placeholder::Variable) {
            instr.operands.first().and_then(|&s| u16::try_from(s).ok()).map(|slot| {
                let is_store = !popped.is_empty();
                let name = variable_name(md, instr, slot, is_store, &state);
                state.set_local(usize::from(slot), &name);
                name
            })
        } else {
            None
        };
        let target = if rule.has_placeholder(Placeholder::Target) {
            instr.operands.first().copied()
        } else {
            None
        };

        let sentence = fill_template(
            &parts,
            &Fill {
                constant: constant.as_deref(),
                variable: variable.as_deref(),
                popped: &popped,
                arity_known,
                target,
            },
        );
        sentences.push((instr.index, sentence));

        for v in pushed_values(rule, instr, &popped, constant.as_deref(), variable.as_deref()) {
            state.stack.push(v);
            if let Some(max) = md.max_stack {
                if state.stack.len() > usize::from(max) {
                    return Err(TranslateError::StackOverflowSim {
                        index: instr.index,
                        max_stack: max,
                    });
                }
            }
        }

        if rule.has_placeholder(Placeholder::Target) {
            for &t in branch_targets(instr) {
                let Ok(t) = u32::try_from(t) else { continue };
                if node_set.contains(&t) {
                    control_edges.insert((instr.index, t));
                    if t > instr.index {
                        branch_states.entry(t).or_insert_with(|| state.stack.clone());
                    }
                }
            }
        }
        falls_through = !is_unconditional_transfer(&instr.opcode);
    }

    Ok(Translation {
        method_id: md.method_id.clone(),
        sentences,
        dependency_graph: InstructionDependencyGraph {
            nodes,
            data_edges: data_edges.into_iter().collect(),
            control_edges: control_edges.into_iter().collect(),
        },
        final_stack_depth: state.stack.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

/// Serializes the dependency graph. In dot output data edges are solid and
/// control edges dashed.
pub fn export_graph(t: &Translation, format: GraphFormat) -> String {
    let g = &t.dependency_graph;
    match format {
        GraphFormat::Dot => {
            let mut out = String::new();
            let _ = writeln!(out, "digraph {:?} {{", t.method_id);
            for n in &g.nodes {
                let _ = writeln!(out, "  {n};");
            }
            for (a, b) in &g.data_edges {
                let _ = writeln!(out, "  {a} -> {b} [style=solid];");
            }
            for (a, b) in &g.control_edges {
                let _ = writeln!(out, "  {a} -> {b} [style=dashed];");
            }
            out.push_str("}\n");
            out
        }
        GraphFormat::Json => serde_json::to_string(&serde_json::json!({
            "method_id": t.method_id,
            "nodes": g.nodes,
            "data_edges": g.data_edges,
            "control_edges": g.control_edges,
        }))
        .expect("graph serializes"),
    }
}
