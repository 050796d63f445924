//! Per-opcode translation rules and the six-way stack/variable interaction
//! categories.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The rule file shipped with the crate.
pub const SHIPPED_RULES: &str = include_str!("../rules/jvm.rules");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("opcode `{0}` is defined more than once")]
    DuplicateOpcode(String),
    #[error("opcode `{0}`: template has an unknown or unbalanced placeholder")]
    BadPlaceholder(String),
    #[error("opcode `{0}`: rule is inconsistent with its category")]
    CategoryMismatch(String),
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
}

/// How an instruction interacts with the operand stack and the local
/// variable array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Pushes its operand onto the stack.
    PushOnly,
    /// Pops values off the stack.
    PopOnly,
    /// Pops values, operates, pushes the result.
    PopOperatePush,
    /// Touches only the local variable array.
    VariableOnly,
    /// Touches both the stack and the local variable array.
    StackAndVariable,
    /// Touches neither.
    Neither,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::PushOnly,
        Category::PopOnly,
        Category::PopOperatePush,
        Category::VariableOnly,
        Category::StackAndVariable,
        Category::Neither,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Category::PushOnly => "PU",
            Category::PopOnly => "PO",
            Category::PopOperatePush => "POU",
            Category::VariableOnly => "V",
            Category::StackAndVariable => "SV",
            Category::Neither => "O",
        }
    }

    fn allows(self, p: Placeholder) -> bool {
        use Placeholder::*;
        match self {
            Category::PushOnly => matches!(p, Constant | Target),
            Category::PopOnly => matches!(p, Constant | Stack | Target),
            Category::PopOperatePush => matches!(p, Constant | Stack),
            Category::VariableOnly => matches!(p, Constant | Variable),
            Category::StackAndVariable => matches!(p, Constant | Stack | Variable),
            Category::Neither => matches!(p, Constant | Target),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Category {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL.into_iter().find(|c| c.code() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placeholder {
    /// `[pc]`
    Constant,
    /// `[pv]`
    Variable,
    /// `[ps]`
    Stack,
    /// `[pi]`
    Target,
}

impl Placeholder {
    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Constant => "[pc]",
            Placeholder::Variable => "[pv]",
            Placeholder::Stack => "[ps]",
            Placeholder::Target => "[pi]",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplatePart {
    Text(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed template `{0}`")]
pub struct TemplateError(pub String);

/// Splits a template into literal text and placeholders. Any `[` or `]`
/// that is not part of one of the four placeholders is an error.
pub fn parse_template(template: &str) -> Result<Vec<TemplatePart>, TemplateError> {
    let mut parts = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('[') {
        let text = &rest[..open];
        if text.contains(']') {
            return Err(TemplateError(template.to_string()));
        }
        if !text.is_empty() {
            parts.push(TemplatePart::Text(text.to_string()));
        }
        let slot = match rest.get(open..open + 4) {
            Some("[pc]") => Placeholder::Constant,
            Some("[pv]") => Placeholder::Variable,
            Some("[ps]") => Placeholder::Stack,
            Some("[pi]") => Placeholder::Target,
            _ => return Err(TemplateError(template.to_string())),
        };
        parts.push(TemplatePart::Slot(slot));
        rest = &rest[open + 4..];
    }
    if rest.contains(']') {
        return Err(TemplateError(template.to_string()));
    }
    if !rest.is_empty() {
        parts.push(TemplatePart::Text(rest.to_string()));
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PopSpec {
    Fixed(usize),
    /// Parameter count from the call descriptor, plus the receiver for
    /// instance calls.
    Descriptor,
    /// The count is the instruction operand at this position
    /// (`multianewarray` dimensions).
    Operand(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PushSpec {
    Count(usize),
    /// One value unless the call descriptor returns `V`.
    Descriptor,
    /// Re-push popped values, bottom to top; index 0 is the value that was on top.
    Copies(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRule {
    pub opcode: String,
    pub category: Category,
    pub template: String,
    pub pop: PopSpec,
    pub push: PushSpec,
}

impl TranslationRule {
    pub fn parts(&self) -> Result<Vec<TemplatePart>, TemplateError> {
        parse_template(&self.template)
    }

    pub fn has_placeholder(&self, p: Placeholder) -> bool {
        self.template.contains(p.token())
    }

    fn line(&self) -> String {
        let pop = match &self.pop {
            PopSpec::Fixed(n) => format!("pop {n}"),
            PopSpec::Descriptor => "pop descriptor".to_string(),
            PopSpec::Operand(k) => format!("pop operand {k}"),
        };
        let push = match &self.push {
            PushSpec::Count(n) => format!("push {n}"),
            PushSpec::Descriptor => "push descriptor".to_string(),
            PushSpec::Copies(c) => {
                let idx: Vec<String> = c.iter().map(usize::to_string).collect();
                format!("push copies {}", idx.join(" "))
            }
        };
        format!(
            "{} | {} | {} | {} | {}",
            self.opcode, self.category, self.template, pop, push
        )
    }
}

/// `anewarray` sits in the push-only category but consumes the array length.
const COUNT_CONSUMING_PUSH_ONLY: &[&str] = &["anewarray"];

/// Opcodes whose operand is an instruction index.
pub fn is_branch_opcode(opcode: &str) -> bool {
    opcode.starts_with("if")
        || matches!(
            opcode,
            "goto" | "goto_w" | "jsr" | "jsr_w" | "tableswitch" | "lookupswitch"
        )
}

/// Category/placeholder/stack-effect inconsistencies of a single rule.
fn rule_violations(rule: &TranslationRule) -> Vec<String> {
    let mut out = Vec::new();
    let cat = rule.category;
    for p in [
        Placeholder::Constant,
        Placeholder::Variable,
        Placeholder::Stack,
        Placeholder::Target,
    ] {
        if rule.has_placeholder(p) && !cat.allows(p) {
            out.push(format!("{} not allowed in category {}", p.token(), cat));
        }
    }

    let branch = is_branch_opcode(&rule.opcode);
    let has_target = rule.has_placeholder(Placeholder::Target);
    if branch && !has_target {
        out.push("branch instruction without [pi] jump placeholder".to_string());
    }
    if !branch && has_target {
        out.push("[pi] on an instruction without a branch target".to_string());
    }

    let count_consuming = COUNT_CONSUMING_PUSH_ONLY.contains(&rule.opcode.as_str());
    let pops = !matches!(rule.pop, PopSpec::Fixed(0));
    match cat {
        Category::PushOnly | Category::VariableOnly | Category::Neither => {
            let allowed = count_consuming && rule.pop == PopSpec::Fixed(1);
            if pops && !allowed {
                out.push(format!("category {cat} must not pop"));
            }
        }
        _ => {}
    }
    if matches!(rule.pop, PopSpec::Descriptor) && cat != Category::PopOnly {
        out.push("descriptor arity only applies to call instructions".to_string());
    }
    if rule.has_placeholder(Placeholder::Stack) != pops && !count_consuming {
        out.push("[ps] must appear exactly when the rule pops".to_string());
    }

    let push_ok = match (&rule.push, cat) {
        (PushSpec::Count(1), Category::PushOnly) => true,
        (PushSpec::Count(0), Category::VariableOnly | Category::Neither) => true,
        (PushSpec::Count(n), Category::PopOnly | Category::StackAndVariable) => *n <= 1,
        (PushSpec::Descriptor, Category::PopOnly) => true,
        (PushSpec::Count(1), Category::PopOperatePush) => true,
        (PushSpec::Copies(c), Category::PopOperatePush) => match rule.pop {
            PopSpec::Fixed(n) => !c.is_empty() && c.iter().all(|&i| i < n),
            _ => false,
        },
        _ => false,
    };
    if !push_ok {
        out.push(format!("push spec inconsistent with category {cat}"));
    }
    out
}

/// Immutable, validated map from base mnemonic to rule.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleSet {
    pub rules: BTreeMap<String, TranslationRule>,
}

impl RuleSet {
    /// The rules compiled into the crate.
    pub fn shipped() -> RuleSet {
        load_rules(SHIPPED_RULES).expect("shipped rule file is valid")
    }

    pub fn get(&self, opcode: &str) -> Option<&TranslationRule> {
        self.rules.get(opcode)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Canonical rule-file rendering (sorted by opcode, no comments).
    pub fn to_rule_text(&self) -> String {
        let mut s = String::new();
        for rule in self.rules.values() {
            s.push_str(&rule.line());
            s.push('\n');
        }
        s
    }

    /// SHA-256 over the canonical rendering; independent of row order and
    /// comments in the source file.
    pub fn checksum(&self) -> [u8; 32] {
        Sha256::digest(self.to_rule_text().as_bytes()).into()
    }

    pub fn checksum_hex(&self) -> String {
        hex::encode(self.checksum())
    }
}

fn parse_pop(spec: &str) -> Option<PopSpec> {
    let words: Vec<&str> = spec.split_whitespace().collect();
    match words.as_slice() {
        ["pop", "descriptor"] => Some(PopSpec::Descriptor),
        ["pop", "operand", k] => k.parse().ok().map(PopSpec::Operand),
        ["pop", n] => n.parse().ok().map(PopSpec::Fixed),
        _ => None,
    }
}

fn parse_push(spec: &str) -> Option<PushSpec> {
    let words: Vec<&str> = spec.split_whitespace().collect();
    match words.as_slice() {
        ["push", "descriptor"] => Some(PushSpec::Descriptor),
        ["push", "copies", rest @ ..] if !rest.is_empty() => rest
            .iter()
            .map(|w| w.parse().ok())
            .collect::<Option<Vec<usize>>>()
            .map(PushSpec::Copies),
        ["push", n] => n.parse().ok().map(PushSpec::Count),
        _ => None,
    }
}

/// Parses and validates a rule file.
pub fn load_rules(source: &str) -> Result<RuleSet, RuleError> {
    let mut rules = BTreeMap::new();
    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = |message: &str| RuleError::Syntax {
            line: line_no,
            message: message.to_string(),
        };
        let cols: Vec<&str> = line.split('|').map(str::trim).collect();
        let [opcode, category, template, pop, push] = cols.as_slice() else {
            return Err(syntax("expected five `|`-separated columns"));
        };
        if opcode.is_empty() {
            return Err(syntax("empty mnemonic"));
        }
        let category: Category = category
            .parse()
            .map_err(|_| syntax(&format!("unknown category `{category}`")))?;
        let rule = TranslationRule {
            opcode: opcode.to_string(),
            category,
            template: template.to_string(),
            pop: parse_pop(pop).ok_or_else(|| syntax(&format!("bad pop spec `{pop}`")))?,
            push: parse_push(push).ok_or_else(|| syntax(&format!("bad push spec `{push}`")))?,
        };
        if rule.parts().is_err() {
            return Err(RuleError::BadPlaceholder(rule.opcode));
        }
        if !rule_violations(&rule).is_empty() {
            return Err(RuleError::CategoryMismatch(rule.opcode));
        }
        if rules.contains_key(*opcode) {
            return Err(RuleError::DuplicateOpcode(opcode.to_string()));
        }
        rules.insert(opcode.to_string(), rule);
    }
    Ok(RuleSet { rules })
}

pub fn category_of(rs: &RuleSet, opcode: &str) -> Result<Category, RuleError> {
    rs.get(opcode)
        .map(|r| r.category)
        .ok_or_else(|| RuleError::UnknownOpcode(opcode.to_string()))
}

/// Instruction categories as enumerated in the reference classification,
/// with `<cond>`/`<op>` families expanded and suffix-fused forms reduced to
/// their base mnemonic.
pub const CLASSIFIED_OPCODES: &[(&str, Category)] = {
    use Category::*;
    &[
        ("aconst_null", PushOnly),
        ("anewarray", PushOnly),
        ("iconst", PushOnly),
        ("fconst", PushOnly),
        ("bipush", PushOnly),
        ("dconst", PushOnly),
        ("jsr", PushOnly),
        ("jsr_w", PushOnly),
        ("lconst", PushOnly),
        ("ldc", PushOnly),
        ("ldc_w", PushOnly),
        ("ldc2_w", PushOnly),
        ("new", PushOnly),
        ("sipush", PushOnly),
        ("areturn", PopOnly),
        ("ireturn", PopOnly),
        ("athrow", PopOnly),
        ("dreturn", PopOnly),
        ("freturn", PopOnly),
        ("if_acmpeq", PopOnly),
        ("if_acmpne", PopOnly),
        ("if_icmpeq", PopOnly),
        ("if_icmpne", PopOnly),
        ("if_icmplt", PopOnly),
        ("if_icmpge", PopOnly),
        ("if_icmpgt", PopOnly),
        ("if_icmple", PopOnly),
        ("ifeq", PopOnly),
        ("ifne", PopOnly),
        ("iflt", PopOnly),
        ("ifge", PopOnly),
        ("ifgt", PopOnly),
        ("ifle", PopOnly),
        ("ifnonnull", PopOnly),
        ("ifnull", PopOnly),
        ("invokedynamic", PopOnly),
        ("invokeinterface", PopOnly),
        ("invokespecial", PopOnly),
        ("invokestatic", PopOnly),
        ("invokevirtual", PopOnly),
        ("ishl", PopOnly),
        ("ishr", PopOnly),
        ("lookupswitch", PopOnly),
        ("lreturn", PopOnly),
        ("monitorexit", PopOnly),
        ("pop", PopOnly),
        ("pop2", PopOnly),
        ("putfield", PopOnly),
        ("putstatic", PopOnly),
        ("tableswitch", PopOnly),
        ("aaload", PopOperatePush),
        ("arraylength", PopOperatePush),
        ("baload", PopOperatePush),
        ("caload", PopOperatePush),
        ("d2f", PopOperatePush),
        ("d2i", PopOperatePush),
        ("d2l", PopOperatePush),
        ("dadd", PopOperatePush),
        ("daload", PopOperatePush),
        ("dcmpl", PopOperatePush),
        ("dcmpg", PopOperatePush),
        ("ddiv", PopOperatePush),
        ("dmul", PopOperatePush),
        ("dneg", PopOperatePush),
        ("drem", PopOperatePush),
        ("dsub", PopOperatePush),
        ("dup", PopOperatePush),
        ("dup_x1", PopOperatePush),
        ("dup_x2", PopOperatePush),
        ("dup2", PopOperatePush),
        ("dup2_x1", PopOperatePush),
        ("dup2_x2", PopOperatePush),
        ("f2d", PopOperatePush),
        ("f2i", PopOperatePush),
        ("f2l", PopOperatePush),
        ("fadd", PopOperatePush),
        ("faload", PopOperatePush),
        ("fcmpl", PopOperatePush),
        ("fcmpg", PopOperatePush),
        ("fdiv", PopOperatePush),
        ("fmul", PopOperatePush),
        ("fneg", PopOperatePush),
        ("frem", PopOperatePush),
        ("fsub", PopOperatePush),
        ("getfield", PopOperatePush),
        ("getstatic", PopOperatePush),
        ("i2b", PopOperatePush),
        ("i2c", PopOperatePush),
        ("i2d", PopOperatePush),
        ("i2f", PopOperatePush),
        ("i2l", PopOperatePush),
        ("i2s", PopOperatePush),
        ("iadd", PopOperatePush),
        ("iaload", PopOperatePush),
        ("iand", PopOperatePush),
        ("idiv", PopOperatePush),
        ("imul", PopOperatePush),
        ("ineg", PopOperatePush),
        ("instanceof", PopOperatePush),
        ("ior", PopOperatePush),
        ("irem", PopOperatePush),
        ("isub", PopOperatePush),
        ("iushr", PopOperatePush),
        ("ixor", PopOperatePush),
        ("l2d", PopOperatePush),
        ("l2f", PopOperatePush),
        ("l2i", PopOperatePush),
        ("ladd", PopOperatePush),
        ("laload", PopOperatePush),
        ("land", PopOperatePush),
        ("lcmp", PopOperatePush),
        ("ldiv", PopOperatePush),
        ("lmul", PopOperatePush),
        ("lneg", PopOperatePush),
        ("lor", PopOperatePush),
        ("lrem", PopOperatePush),
        ("lshl", PopOperatePush),
        ("lshr", PopOperatePush),
        ("lsub", PopOperatePush),
        ("lushr", PopOperatePush),
        ("multianewarray", PopOperatePush),
        ("lxor", PopOperatePush),
        ("newarray", PopOperatePush),
        ("saload", PopOperatePush),
        ("swap", PopOperatePush),
        ("iinc", VariableOnly),
        ("wide", VariableOnly),
        ("aastore", StackAndVariable),
        ("aload", StackAndVariable),
        ("astore", StackAndVariable),
        ("bastore", StackAndVariable),
        ("castore", StackAndVariable),
        ("dastore", StackAndVariable),
        ("dload", StackAndVariable),
        ("dstore", StackAndVariable),
        ("fastore", StackAndVariable),
        ("fload", StackAndVariable),
        ("fstore", StackAndVariable),
        ("iastore", StackAndVariable),
        ("iload", StackAndVariable),
        ("istore", StackAndVariable),
        ("lastore", StackAndVariable),
        ("lload", StackAndVariable),
        ("lstore", StackAndVariable),
        ("sastore", StackAndVariable),
        ("goto", Neither),
        ("checkcast", Neither),
        ("goto_w", Neither),
        ("nop", Neither),
        ("ret", Neither),
        ("return", Neither),
    ]
};

/// Rules whose rendering is knowingly incomplete: switches only show their
/// default target.
const PARTIAL_OPCODES: &[&str] = &["lookupswitch", "tableswitch"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    /// Classified opcodes with no rule.
    pub missing: Vec<String>,
    /// Classified opcodes whose rule has a different category.
    pub wrong_category: Vec<(String, Category, Category)>,
    /// (opcode, reason) for placeholder and stack-effect inconsistencies.
    pub violations: Vec<(String, String)>,
    pub unparseable: Vec<String>,
    /// Informational; does not make the report invalid.
    pub partial: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.missing.is_empty()
            && self.wrong_category.is_empty()
            && self.violations.is_empty()
            && self.unparseable.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.missing {
            writeln!(f, "missing\t{op}")?;
        }
        for (op, want, got) in &self.wrong_category {
            writeln!(f, "category\t{op}\texpected {want}, found {got}")?;
        }
        for (op, why) in &self.violations {
            writeln!(f, "violation\t{op}\t{why}")?;
        }
        for op in &self.unparseable {
            writeln!(f, "unparseable\t{op}")?;
        }
        for op in &self.partial {
            writeln!(f, "partial\t{op}")?;
        }
        Ok(())
    }
}

pub fn validate_ruleset(rs: &RuleSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    for &(op, want) in CLASSIFIED_OPCODES {
        match rs.get(op) {
            None => report.missing.push(op.to_string()),
            Some(rule) if rule.category != want => report.wrong_category.push((op.to_string(), want, rule.category)),
            Some(_) => {}
        }
    }
    for rule in rs.rules.values() {
        if rule.parts().is_err() {
            report.unparseable.push(rule.opcode.clone());
            continue;
        }
        for why in rule_violations(rule) {
            report.violations.push((rule.opcode.clone(), why));
        }
        if PARTIAL_OPCODES.contains(&rule.opcode.as_str()) {
            report.partial.push(rule.opcode.clone());
        }
    }
    report
}
