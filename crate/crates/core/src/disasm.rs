//! Parser for the textual output of a class-file disassembler (`javap -c -l`,
//! optionally `-v`/`-p`).
//!
//! Only the parts needed for translation are retained: method headers, the
//! numbered instruction listing, the `stack=…, locals=…` line and the
//! `LocalVariableTable` block. Everything else (constant pool, line number
//! tables, stack map frames, exception tables) is skipped.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DisasmError {
    #[error("line {0}: malformed instruction line")]
    MalformedLine(usize),
    #[error("method `{0}` has no Code section")]
    MissingCode(String),
    #[error("slot {0} is not covered by the local variable table")]
    UnknownSlot(u16),
}

/// One disassembled instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    /// Byte offset within the method, as printed at the start of the line.
    pub index: u32,
    /// Base mnemonic; fused suffixes such as `_2` or `_m1` are moved into `operands`.
    pub opcode: String,
    pub operands: Vec<i64>,
    /// Trailing `// …` comment (symbolic member reference and descriptor), or the
    /// bare type word of `newarray`.
    pub descriptor_comment: Option<String>,
}

impl Instruction {
    pub fn new(index: u32, opcode: &str, operands: Vec<i64>) -> Self {
        Self {
            index,
            opcode: opcode.to_string(),
            operands,
            descriptor_comment: None,
        }
    }

    pub fn with_comment(mut self, comment: &str) -> Self {
        self.descriptor_comment = Some(comment.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalVariableEntry {
    pub start: u32,
    pub length: u32,
    pub slot: u16,
    pub name: String,
    pub signature: String,
}

impl LocalVariableEntry {
    pub fn covers(&self, index: u32) -> bool {
        index >= self.start && u64::from(index) < u64::from(self.start) + u64::from(self.length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodDisassembly {
    pub method_id: String,
    pub instructions: Vec<Instruction>,
    pub variable_table: Vec<LocalVariableEntry>,
    /// Declared operand-stack depth; absent when the disassembler was not run verbose.
    pub max_stack: Option<u16>,
    pub max_locals: Option<u16>,
}

impl MethodDisassembly {
    pub fn new(method_id: impl Into<String>) -> Self {
        Self {
            method_id: method_id.into(),
            instructions: Vec::new(),
            variable_table: Vec::new(),
            max_stack: None,
            max_locals: None,
        }
    }

    /// Index of the instruction that follows `index` in the listing, if any.
    pub fn next_index(&self, index: u32) -> Option<u32> {
        let pos = self.instructions.binary_search_by_key(&index, |i| i.index).ok()?;
        self.instructions.get(pos + 1).map(|i| i.index)
    }

    /// Matches the compiler-generated no-argument constructor body.
    pub fn is_default_constructor(&self) -> bool {
        let ops: Vec<&str> = self.instructions.iter().map(|i| i.opcode.as_str()).collect();
        ops == ["aload", "invokespecial", "return"]
            && self.instructions[1]
                .descriptor_comment
                .as_deref()
                .is_some_and(|c| c.contains("\"<init>\":()V"))
    }
}

/// Looks up the table entry for `slot` whose scope covers `at_index`.
///
/// When several scopes match, the one starting last wins.
pub fn resolve_variable(md: &MethodDisassembly, slot: u16, at_index: u32) -> Result<&LocalVariableEntry, DisasmError> {
    md.variable_table
        .iter()
        .filter(|e| e.slot == slot && e.covers(at_index))
        .max_by_key(|e| e.start)
        .ok_or(DisasmError::UnknownSlot(slot))
}

/// Splits a suffix-fused mnemonic into its base opcode and operand:
/// `istore_2` → (`istore`, 2), `iconst_m1` → (`iconst`, -1).
pub fn split_fused_operand(opcode_text: &str) -> (String, Option<i64>) {
    if let Some((base, suffix)) = opcode_text.rsplit_once('_') {
        let base_ok = !base.is_empty() && base.chars().all(|c| c.is_ascii_alphanumeric());
        if base_ok {
            if suffix == "m1" {
                return (base.to_string(), Some(-1));
            }
            if !suffix.is_empty() && suffix.chars().all(|c| c.is_ascii_digit()) {
                if let Ok(n) = suffix.parse() {
                    return (base.to_string(), Some(n));
                }
            }
        }
    }
    (opcode_text.to_string(), None)
}

// `javap` prints wide-index local accesses as `iload_w`, `iinc_w`, …
const WIDE_LOCAL_OPCODES: &[&str] = &[
    "iload", "lload", "fload", "dload", "aload", "istore", "lstore", "fstore", "dstore", "astore", "iinc", "ret",
];

fn normalize_mnemonic(text: &str) -> (String, Option<i64>) {
    if let Some(base) = text.strip_suffix("_w") {
        if WIDE_LOCAL_OPCODES.contains(&base) {
            return (base.to_string(), None);
        }
    }
    split_fused_operand(text)
}

static INSTRUCTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+):\s+([a-z][a-z0-9_]*)\s*(.*)$").unwrap());
static STACK_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^stack=(\d+),\s*locals=(\d+)").unwrap());
static LVT_ROW_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)\s+(\d+)\s+(\d+)\s+(\S+)\s+(\S+)$").unwrap());
static HEADER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[^:/=]*\([^()]*\)(\s+throws\s+[\w.$, <>]+)?;$").unwrap());
static SECTION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z][A-Za-z ]*:").unwrap());
static SWITCH_CASE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(-?\d+|default):\s*(\d+)$").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Outside,
    Code,
    Switch,
    VariableTable,
    OtherSection,
}

struct PendingHeader {
    id: String,
    needs_code: bool,
}

struct Parser {
    methods: Vec<MethodDisassembly>,
    current: Option<MethodDisassembly>,
    pending: Option<PendingHeader>,
    mode: Mode,
    implicit_count: usize,
}

impl Parser {
    fn new() -> Self {
        Self {
            methods: Vec::new(),
            current: None,
            pending: None,
            mode: Mode::Outside,
            implicit_count: 0,
        }
    }

    fn close_method(&mut self) {
        if let Some(m) = self.current.take() {
            self.methods.push(m);
        }
        self.mode = Mode::Outside;
    }

    fn check_pending(&mut self) -> Result<(), DisasmError> {
        match self.pending.take() {
            Some(p) if p.needs_code => Err(DisasmError::MissingCode(p.id)),
            _ => Ok(()),
        }
    }

    fn header(&mut self, trimmed: &str) -> Result<(), DisasmError> {
        self.close_method();
        self.check_pending()?;
        let id = trimmed.trim_end_matches(';').to_string();
        let needs_code = !id.split_whitespace().any(|w| w == "abstract" || w == "native");
        self.pending = Some(PendingHeader { id, needs_code });
        Ok(())
    }

    fn start_code(&mut self) {
        self.close_method();
        let id = match self.pending.take() {
            Some(p) => p.id,
            None => self.implicit_id(),
        };
        self.current = Some(MethodDisassembly::new(id));
        self.mode = Mode::Code;
    }

    fn implicit_id(&mut self) -> String {
        let id = format!("method{}", self.implicit_count);
        self.implicit_count += 1;
        id
    }

    fn instruction(&mut self, caps: &regex::Captures<'_>, line_no: usize) -> Result<(), DisasmError> {
        if self.current.is_none() {
            // A bare listing without method header or `Code:` marker.
            let id = match self.pending.take() {
                Some(p) => p.id,
                None => self.implicit_id(),
            };
            self.current = Some(MethodDisassembly::new(id));
        }
        let index: u32 = caps[1].parse().map_err(|_| DisasmError::MalformedLine(line_no))?;
        let (opcode, fused) = normalize_mnemonic(&caps[2]);
        let rest = caps[3].trim();
        let (operand_text, comment) = match rest.find("//") {
            Some(pos) => (rest[..pos].trim(), Some(rest[pos + 2..].trim().to_string())),
            None => (rest, None),
        };

        let mut instr = Instruction {
            index,
            opcode,
            operands: fused.into_iter().collect(),
            descriptor_comment: None,
        };
        if operand_text.starts_with('{') {
            self.mode = Mode::Switch;
        } else {
            instr.descriptor_comment = comment;
            for token in operand_text
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
            {
                let digits = token.strip_prefix('#').unwrap_or(token);
                match digits.parse::<i64>() {
                    Ok(n) => instr.operands.push(n),
                    Err(_) if instr.descriptor_comment.is_none() => {
                        // e.g. `newarray int`
                        instr.descriptor_comment = Some(token.to_string());
                    }
                    Err(_) => return Err(DisasmError::MalformedLine(line_no)),
                }
            }
            self.mode = Mode::Code;
        }

        let method = self.current.as_mut().expect("method opened above");
        if let Some(last) = method.instructions.last() {
            if last.index >= index {
                return Err(DisasmError::MalformedLine(line_no));
            }
        }
        method.instructions.push(instr);
        Ok(())
    }

    fn switch_line(&mut self, trimmed: &str, line_no: usize) -> Result<(), DisasmError> {
        if trimmed == "}" {
            self.mode = Mode::Code;
            return Ok(());
        }
        let caps = SWITCH_CASE_RE
            .captures(trimmed)
            .ok_or(DisasmError::MalformedLine(line_no))?;
        let target: i64 = caps[2].parse().map_err(|_| DisasmError::MalformedLine(line_no))?;
        let instr = self
            .current
            .as_mut()
            .and_then(|m| m.instructions.last_mut())
            .ok_or(DisasmError::MalformedLine(line_no))?;
        // The default target is kept first so `[pi]` renders it.
        if &caps[1] == "default" {
            instr.operands.insert(0, target);
        } else {
            instr.operands.push(target);
        }
        Ok(())
    }

    fn section(&mut self, trimmed: &str) {
        if self.current.is_none() {
            return;
        }
        self.mode = if trimmed.starts_with("LocalVariableTable:") {
            Mode::VariableTable
        } else {
            Mode::OtherSection
        };
    }

    fn line(&mut self, raw: &str, line_no: usize) -> Result<(), DisasmError> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Ok(());
        }
        if self.mode == Mode::Switch {
            return self.switch_line(trimmed, line_no);
        }
        if trimmed == "Code:" {
            self.start_code();
            return Ok(());
        }
        if let Some(caps) = STACK_RE.captures(trimmed) {
            if let Some(m) = self.current.as_mut() {
                m.max_stack = caps[1].parse().ok();
                m.max_locals = caps[2].parse().ok();
            }
            return Ok(());
        }
        if self.mode == Mode::VariableTable {
            if trimmed.starts_with("Start") {
                return Ok(());
            }
            if let Some(caps) = LVT_ROW_RE.captures(trimmed) {
                let parse = |i: usize| caps[i].parse::<u32>().map_err(|_| DisasmError::MalformedLine(line_no));
                let entry = LocalVariableEntry {
                    start: parse(1)?,
                    length: parse(2)?,
                    slot: u16::try_from(parse(3)?).map_err(|_| DisasmError::MalformedLine(line_no))?,
                    name: caps[4].to_string(),
                    signature: caps[5].to_string(),
                };
                if let Some(m) = self.current.as_mut() {
                    m.variable_table.push(entry);
                }
                return Ok(());
            }
        }
        let in_code = self.mode == Mode::Code || (self.current.is_none() && self.mode == Mode::Outside);
        if in_code && trimmed.starts_with(|c: char| c.is_ascii_digit()) {
            return match INSTRUCTION_RE.captures(trimmed) {
                Some(caps) => self.instruction(&caps, line_no),
                None => Err(DisasmError::MalformedLine(line_no)),
            };
        }
        if !trimmed.contains("//") && (HEADER_RE.is_match(trimmed) || trimmed == "static {};") {
            return self.header(trimmed);
        }
        if SECTION_RE.is_match(trimmed) {
            self.section(trimmed);
            return Ok(());
        }
        if trimmed == "}" {
            self.close_method();
            return Ok(());
        }
        if self.mode == Mode::Code {
            return Err(DisasmError::MalformedLine(line_no));
        }
        Ok(())
    }
}

/// Parses disassembler text into one [`MethodDisassembly`] per method body.
///
/// Line numbers in errors are 1-based.
pub fn parse_disassembly(text: &str) -> Result<Vec<MethodDisassembly>, DisasmError> {
    let mut parser = Parser::new();
    for (i, line) in text.lines().enumerate() {
        parser.line(line, i + 1)?;
    }
    parser.close_method();
    parser.check_pending()?;
    Ok(parser.methods)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING_1: &str = "\
  LocalVariableTable:
    Start  Length  Slot  Name   Signature
        0      24     0  this   LCalArraySum;
        0      24     1 array   [I
        2      22     2   sum   I
        4      20     3     i   I
";

    fn listing_method() -> MethodDisassembly {
        let text = format!("Code:\n0: iconst_0\n1: istore_2\n{LISTING_1}");
        parse_disassembly(&text).unwrap().remove(0)
    }

    #[test]
    fn fused_constant_and_store() {
        let methods = parse_disassembly("0: iconst_0\n1: istore_2\n").unwrap();
        assert_eq!(methods.len(), 1);
        assert_eq!(
            methods[0].instructions,
            vec![
                Instruction::new(0, "iconst", vec![0]),
                Instruction::new(1, "istore", vec![2])
            ]
        );
    }

    #[test]
    fn empty_text_has_no_methods() {
        assert!(parse_disassembly("").unwrap().is_empty());
    }

    #[test]
    fn variable_table_rows() {
        let md = listing_method();
        assert_eq!(md.variable_table.len(), 4);
        assert_eq!(
            md.variable_table[2],
            LocalVariableEntry {
                start: 2,
                length: 22,
                slot: 2,
                name: "sum".into(),
                signature: "I".into()
            }
        );
        assert_eq!(md.variable_table[0].signature, "LCalArraySum;");
    }

    #[test]
    fn resolve_by_scope() {
        let md = listing_method();
        assert_eq!(resolve_variable(&md, 2, 4).unwrap().name, "sum");
        assert_eq!(resolve_variable(&md, 3, 10).unwrap().name, "i");
        assert_eq!(resolve_variable(&md, 9, 0), Err(DisasmError::UnknownSlot(9)));
        // `sum` is only in scope from offset 2
        assert_eq!(resolve_variable(&md, 2, 1), Err(DisasmError::UnknownSlot(2)));
    }

    #[test]
    fn resolve_prefers_latest_scope() {
        let mut md = MethodDisassembly::new("m");
        for (start, name) in [(0, "outer"), (5, "inner")] {
            md.variable_table.push(LocalVariableEntry {
                start,
                length: 10,
                slot: 1,
                name: name.into(),
                signature: "I".into(),
            });
        }
        assert_eq!(resolve_variable(&md, 1, 7).unwrap().name, "inner");
        assert_eq!(resolve_variable(&md, 1, 2).unwrap().name, "outer");
    }

    #[test]
    fn fused_suffixes() {
        assert_eq!(split_fused_operand("istore_2"), ("istore".into(), Some(2)));
        assert_eq!(split_fused_operand("iconst_m1"), ("iconst".into(), Some(-1)));
        assert_eq!(split_fused_operand("goto"), ("goto".into(), None));
        assert_eq!(split_fused_operand("if_icmpge"), ("if_icmpge".into(), None));
        assert_eq!(split_fused_operand("dup2_x1"), ("dup2_x1".into(), None));
        assert_eq!(split_fused_operand("ldc2_w"), ("ldc2_w".into(), None));
        assert_eq!(split_fused_operand("aconst_null"), ("aconst_null".into(), None));
    }

    #[test]
    fn wide_local_forms_normalize() {
        let md = parse_disassembly("0: iinc_w 300, 1000\n6: goto_w 0\n")
            .unwrap()
            .remove(0);
        assert_eq!(md.instructions[0], Instruction::new(0, "iinc", vec![300, 1000]));
        assert_eq!(md.instructions[1].opcode, "goto_w");
    }

    #[test]
    fn javap_method_listing() {
        let text = r#"Compiled from "CalArraySum.java"
public class CalArraySum {
  public CalArraySum();
    Code:
       0: aload_0
       1: invokespecial #1                  // Method java/lang/Object."<init>":()V
       4: return
    LineNumberTable:
      line 1: 0
    LocalVariableTable:
      Start  Length  Slot  Name   Signature
          0       5     0  this   LCalArraySum;

  public int calArraySum(int[]) throws java.io.IOException;
    descriptor: ([I)I
    flags: (0x0001) ACC_PUBLIC
    Code:
      stack=3, locals=4, args_size=2
         0: iconst_0
         1: newarray       int
         3: lookupswitch  { // 2
                       1: 28
                      -2: 30
                 default: 32
            }
        28: invokeinterface #4,  2            // InterfaceMethod java/util/List.add:(Ljava/lang/Object;)Z
        33: return
      StackMapTable: number_of_entries = 1
        frame_type = 252 /* append */
          offset_delta = 4
          locals = [ int ]

  public abstract void run();
}
"#;
        let methods = parse_disassembly(text).unwrap();
        assert_eq!(methods.len(), 2);
        assert!(methods[0].is_default_constructor());
        assert_eq!(methods[0].variable_table.len(), 1);
        let m = &methods[1];
        assert_eq!(m.method_id, "public int calArraySum(int[]) throws java.io.IOException");
        assert_eq!((m.max_stack, m.max_locals), (Some(3), Some(4)));
        let ops: Vec<_> = m.instructions.iter().map(|i| i.opcode.as_str()).collect();
        assert_eq!(ops, ["iconst", "newarray", "lookupswitch", "invokeinterface", "return"]);
        assert_eq!(m.instructions[1].descriptor_comment.as_deref(), Some("int"));
        assert_eq!(m.instructions[2].operands, vec![32, 28, 30]);
        assert_eq!(m.instructions[3].operands, vec![4, 2]);
        assert_eq!(
            m.instructions[3].descriptor_comment.as_deref(),
            Some("InterfaceMethod java/util/List.add:(Ljava/lang/Object;)Z")
        );
    }

    #[test]
    fn malformed_instruction_line() {
        let err = parse_disassembly("Code:\n0: iconst_0\n1 istore_2\n").unwrap_err();
        assert_eq!(err, DisasmError::MalformedLine(3));
        let err = parse_disassembly("Code:\n0: iconst_0\n1: bipush ten six\n").unwrap_err();
        assert_eq!(err, DisasmError::MalformedLine(3));
    }

    #[test]
    fn non_increasing_indices_rejected() {
        let err = parse_disassembly("0: iconst_0\n0: istore_1\n").unwrap_err();
        assert_eq!(err, DisasmError::MalformedLine(2));
    }

    #[test]
    fn header_without_code() {
        let err = parse_disassembly("public class A {\n  public void run();\n}\n").unwrap_err();
        assert_eq!(err, DisasmError::MissingCode("public void run()".into()));
        let ok = parse_disassembly("public interface A {\n  public abstract void run();\n}\n").unwrap();
        assert!(ok.is_empty());
    }

    #[test]
    fn next_index_walks_listing() {
        let md = listing_method();
        assert_eq!(md.next_index(0), Some(1));
        assert_eq!(md.next_index(1), None);
        assert_eq!(md.next_index(5), None);
    }
}
