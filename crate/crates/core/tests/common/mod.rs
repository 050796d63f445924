//! Shared fixtures: a synthetic corpus of small methods in disassembler text
//! format. Each method is a random sequence of statement steps and its
//! docstring is the matching sequence of phrases, so records differ both in
//! structure and in identifiers.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stacktrans::pipeline::CorpusRecord;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).expect("fixture exists")
}

const CLASS: &str = "Toy";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Ty {
    Int,
    IntArray,
    Str,
}

impl Ty {
    fn java(self) -> &'static str {
        match self {
            Ty::Int => "int",
            Ty::IntArray => "int[]",
            Ty::Str => "java.lang.String",
        }
    }

    fn signature(self) -> &'static str {
        match self {
            Ty::Int => "I",
            Ty::IntArray => "[I",
            Ty::Str => "Ljava/lang/String;",
        }
    }

    fn prefix(self) -> char {
        match self {
            Ty::Int => 'i',
            Ty::IntArray | Ty::Str => 'a',
        }
    }
}

#[derive(Clone, Copy)]
enum Ret {
    Void,
    Int,
    Bool,
}

impl Ret {
    fn java(self) -> &'static str {
        match self {
            Ret::Void => "void",
            Ret::Int => "int",
            Ret::Bool => "boolean",
        }
    }
}

enum Item {
    Plain {
        mnemonic: String,
        args: String,
        comment: Option<String>,
    },
    Load(String),
    Store(String),
    Iinc(String, i32),
    Branch(&'static str, String),
}

/// Method body with symbolic variables and labels; slots and offsets are
/// assigned at render time (parameters first, then locals).
#[derive(Default)]
struct Method {
    params: Vec<(String, Ty)>,
    locals: Vec<(String, Ty)>,
    items: Vec<Item>,
    labels: BTreeMap<String, usize>,
    /// item index after the first store of each local
    starts: BTreeMap<String, usize>,
    pool: u32,
    label_seq: u32,
}

fn size_of(mnemonic: &str) -> u32 {
    let fused = mnemonic
        .rsplit_once('_')
        .is_some_and(|(_, s)| s == "m1" || s.chars().all(|c| c.is_ascii_digit()));
    match mnemonic {
        m if fused && !m.starts_with("if_") => 1,
        "bipush" | "ldc" | "newarray" | "iload" | "istore" | "aload" | "astore" => 2,
        "invokeinterface" | "invokedynamic" | "goto_w" => 5,
        m if m.starts_with("if") || m.starts_with("invoke") => 3,
        "sipush" | "iinc" | "goto" | "getfield" | "putfield" | "getstatic" | "putstatic" | "new" | "anewarray"
        | "checkcast" | "instanceof" | "ldc_w" => 3,
        _ => 1,
    }
}

impl Method {
    fn ty_of(&self, name: &str) -> Ty {
        self.params
            .iter()
            .chain(&self.locals)
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
            .expect("declared variable")
    }

    fn emit(&mut self, mnemonic: &str, args: &str) -> &mut Self {
        self.items.push(Item::Plain {
            mnemonic: mnemonic.to_string(),
            args: args.to_string(),
            comment: None,
        });
        self
    }

    fn op(&mut self, mnemonic: &str) -> &mut Self {
        self.emit(mnemonic, "")
    }

    fn load(&mut self, name: &str) -> &mut Self {
        self.items.push(Item::Load(name.to_string()));
        self
    }

    fn store(&mut self, name: &str) -> &mut Self {
        self.items.push(Item::Store(name.to_string()));
        let next = self.items.len();
        self.starts.entry(name.to_string()).or_insert(next);
        self
    }

    fn iinc(&mut self, name: &str, by: i32) -> &mut Self {
        self.items.push(Item::Iinc(name.to_string(), by));
        self
    }

    fn iconst(&mut self, v: i32) -> &mut Self {
        match v {
            -1 => self.op("iconst_m1"),
            0..=5 => self.op(&format!("iconst_{v}")),
            _ => self.emit("bipush", &v.to_string()),
        }
    }

    fn fresh_label(&mut self) -> String {
        self.label_seq += 1;
        format!("L{}", self.label_seq)
    }

    fn branch(&mut self, mnemonic: &'static str, label: &str) -> &mut Self {
        self.items.push(Item::Branch(mnemonic, label.to_string()));
        self
    }

    fn label(&mut self, label: &str) -> &mut Self {
        self.labels.insert(label.to_string(), self.items.len());
        self
    }

    fn pooled(&mut self, mnemonic: &str, comment: &str) -> &mut Self {
        self.pool += 1;
        self.items.push(Item::Plain {
            mnemonic: mnemonic.to_string(),
            args: format!("#{}", self.pool + 1),
            comment: Some(comment.to_string()),
        });
        self
    }

    fn render(&self, name: &str, ret: Ret) -> String {
        let slots: BTreeMap<&str, usize> = self
            .params
            .iter()
            .chain(&self.locals)
            .enumerate()
            .map(|(i, (n, _))| (n.as_str(), i + 1))
            .collect();
        let var_op = |kind: &str, v: &str| {
            let slot = slots[v];
            let prefix = self.ty_of(v).prefix();
            if slot <= 3 {
                (format!("{prefix}{kind}_{slot}"), String::new())
            } else {
                (format!("{prefix}{kind}"), slot.to_string())
            }
        };
        let lowered: Vec<(String, String, Option<&String>)> = self
            .items
            .iter()
            .map(|it| match it {
                Item::Plain {
                    mnemonic,
                    args,
                    comment,
                } => (mnemonic.clone(), args.clone(), comment.as_ref()),
                Item::Load(v) => {
                    let (m, a) = var_op("load", v);
                    (m, a, None)
                }
                Item::Store(v) => {
                    let (m, a) = var_op("store", v);
                    (m, a, None)
                }
                Item::Iinc(v, by) => ("iinc".to_string(), format!("{}, {by}", slots[v.as_str()]), None),
                Item::Branch(m, _) => (m.to_string(), String::new(), None),
            })
            .collect();
        let mut offsets = Vec::with_capacity(lowered.len() + 1);
        let mut at = 0u32;
        for (m, _, _) in &lowered {
            offsets.push(at);
            at += size_of(m);
        }
        offsets.push(at);
        let code_len = at;

        let params: Vec<&str> = self.params.iter().map(|(_, t)| t.java()).collect();
        let mut out = format!("  public {} {name}({});\n    Code:\n", ret.java(), params.join(", "));
        out.push_str(&format!(
            "      stack=8, locals={}, args_size={}\n",
            slots.len() + 1,
            self.params.len() + 1
        ));
        for (i, (m, args, comment)) in lowered.iter().enumerate() {
            let args = match &self.items[i] {
                Item::Branch(_, l) => offsets[self.labels[l]].to_string(),
                _ => args.clone(),
            };
            let mut line = format!("{:>10}: {m:<13} {args}", offsets[i]);
            if let Some(c) = comment {
                line = format!("{line:<40}// {c}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out.push_str("      LocalVariableTable:\n        Start  Length  Slot  Name   Signature\n");
        out.push_str(&format!("{:>13}{code_len:>8}{:>6}{:>6}   L{CLASS};\n", 0, 0, "this"));
        for (n, t) in &self.params {
            out.push_str(&format!(
                "{:>13}{code_len:>8}{:>6}{n:>6}   {}\n",
                0,
                slots[n.as_str()],
                t.signature()
            ));
        }
        for (n, t) in &self.locals {
            let start = offsets[*self.starts.get(n).unwrap_or(&self.items.len())];
            out.push_str(&format!(
                "{start:>13}{:>8}{:>6}{n:>6}   {}\n",
                code_len - start,
                slots[n.as_str()],
                t.signature()
            ));
        }
        out
    }
}

const ARRAYS: &[&str] = &[
    "values", "numbers", "scores", "prices", "weights", "items", "counts", "ages", "sizes", "marks", "grades",
    "samples", "readings", "points", "votes", "levels",
];
const SCALARS: &[&str] = &[
    "limit", "target", "amount", "width", "height", "speed", "offset", "factor", "step", "base", "depth", "rate",
    "bonus", "delta", "margin", "quota",
];
const ACCS: &[&str] = &["total", "sum", "result", "acc", "tally", "best", "answer", "running"];
const INDICES: &[&str] = &["i", "j", "k", "idx", "pos", "cursor"];
const STRINGS: &[&str] = &[
    "name", "title", "label", "message", "text", "word", "city", "email", "owner", "nickname",
];
const FIELDS: &[&str] = &[
    "count", "size", "balance", "capacity", "age", "price", "level", "score", "volume", "budget",
];
const HELPERS: &[&str] = &[
    "refresh", "notify", "record", "validate", "publish", "reset", "flush", "schedule",
];
const GREETINGS: &[&str] = &["Hello", "Welcome", "Goodbye", "Thanks"];

/// Random identifiers, unique within one method.
struct Names<'r> {
    rng: &'r mut ChaCha8Rng,
    used: HashSet<&'static str>,
}

impl Names<'_> {
    fn take(&mut self, pool: &[&'static str]) -> String {
        let free: Vec<&'static str> = pool.iter().copied().filter(|n| !self.used.contains(n)).collect();
        let n = *free.choose(self.rng).expect("pool larger than one method needs");
        self.used.insert(n);
        n.to_string()
    }
}

const BODY_KINDS: usize = 15;

/// Appends one stack-neutral step and returns its docstring phrase. Int
/// variables usable by the return step are pushed onto `ints`.
fn body_step(kind: usize, m: &mut Method, names: &mut Names, ints: &mut Vec<String>) -> String {
    match kind {
        0 => {
            let s = names.take(STRINGS);
            m.params.push((s.clone(), Ty::Str));
            m.pooled("getstatic", "Field java/lang/System.out:Ljava/io/PrintStream;")
                .load(&s);
            m.pooled(
                "invokevirtual",
                "Method java/io/PrintStream.println:(Ljava/lang/String;)V",
            );
            format!("prints the {s}")
        }
        1 => {
            let x = names.take(SCALARS);
            let f = names.take(FIELDS);
            m.params.push((x.clone(), Ty::Int));
            m.op("aload_0").load(&x).pooled("putfield", &format!("Field {f}:I"));
            ints.push(x.clone());
            format!("stores the {x} as the {f}")
        }
        2 => {
            let f = names.take(FIELDS);
            m.op("aload_0").op("dup").pooled("getfield", &format!("Field {f}:I"));
            m.iconst(1).op("iadd").pooled("putfield", &format!("Field {f}:I"));
            format!("increments the {f}")
        }
        3 => {
            let x = names.take(SCALARS);
            m.params.push((x.clone(), Ty::Int));
            let ok = m.fresh_label();
            m.load(&x).branch("ifge", &ok);
            m.pooled("new", "class java/lang/IllegalArgumentException").op("dup");
            m.pooled("ldc", &format!("String negative {x}"));
            m.pooled(
                "invokespecial",
                "Method java/lang/IllegalArgumentException.\"<init>\":(Ljava/lang/String;)V",
            );
            m.op("athrow").label(&ok);
            ints.push(x.clone());
            format!("rejects a negative {x}")
        }
        4..=6 => {
            let (op, init, what) = match kind {
                4 => ("iadd", 0, "sum"),
                5 => ("imul", 1, "product"),
                _ => ("ixor", 0, "xor"),
            };
            let arr = names.take(ARRAYS);
            let acc = names.take(ACCS);
            let i = names.take(INDICES);
            m.params.push((arr.clone(), Ty::IntArray));
            m.locals.push((acc.clone(), Ty::Int));
            m.locals.push((i.clone(), Ty::Int));
            m.iconst(init).store(&acc);
            let (top, end) = (m.fresh_label(), m.fresh_label());
            m.iconst(0).store(&i);
            m.label(&top)
                .load(&i)
                .load(&arr)
                .op("arraylength")
                .branch("if_icmpge", &end);
            m.load(&acc).load(&arr).load(&i).op("iaload").op(op).store(&acc);
            m.iinc(&i, 1).branch("goto", &top).label(&end);
            ints.push(acc.clone());
            format!("computes the {what} of the {arr} into {acc}")
        }
        7 => {
            let arr = names.take(ARRAYS);
            let x = names.take(SCALARS);
            let i = names.take(INDICES);
            m.params.push((arr.clone(), Ty::IntArray));
            m.params.push((x.clone(), Ty::Int));
            m.locals.push((i.clone(), Ty::Int));
            let (top, end) = (m.fresh_label(), m.fresh_label());
            m.iconst(0).store(&i);
            m.label(&top)
                .load(&i)
                .load(&arr)
                .op("arraylength")
                .branch("if_icmpge", &end);
            m.load(&arr)
                .load(&i)
                .op("dup2")
                .op("iaload")
                .load(&x)
                .op("imul")
                .op("iastore");
            m.iinc(&i, 1).branch("goto", &top).label(&end);
            ints.push(x.clone());
            format!("multiplies each of the {arr} by {x}")
        }
        8 => {
            let x = names.take(SCALARS);
            let lo = names.take(SCALARS);
            let hi = names.take(SCALARS);
            for v in [&x, &lo, &hi] {
                m.params.push((v.clone(), Ty::Int));
            }
            m.load(&lo)
                .load(&x)
                .pooled("invokestatic", "Method java/lang/Math.max:(II)I");
            m.load(&hi)
                .pooled("invokestatic", "Method java/lang/Math.min:(II)I")
                .store(&x);
            ints.push(x.clone());
            format!("clamps the {x} between {lo} and {hi}")
        }
        9 => {
            let arr = names.take(ARRAYS);
            let a = names.take(INDICES);
            let b = names.take(INDICES);
            let tmp = names.take(ACCS);
            m.params.push((arr.clone(), Ty::IntArray));
            m.params.push((a.clone(), Ty::Int));
            m.params.push((b.clone(), Ty::Int));
            m.locals.push((tmp.clone(), Ty::Int));
            m.load(&arr).load(&a).op("iaload").store(&tmp);
            m.load(&arr).load(&a).load(&arr).load(&b).op("iaload").op("iastore");
            m.load(&arr).load(&b).load(&tmp).op("iastore");
            format!("swaps the {arr} at {a} and {b}")
        }
        10 => {
            let arr = names.take(ARRAYS);
            let i = names.take(INDICES);
            let c = names.rng.gen_range(6..100);
            m.params.push((arr.clone(), Ty::IntArray));
            m.locals.push((i.clone(), Ty::Int));
            let (top, end) = (m.fresh_label(), m.fresh_label());
            m.iconst(0).store(&i);
            m.label(&top)
                .load(&i)
                .load(&arr)
                .op("arraylength")
                .branch("if_icmpge", &end);
            m.load(&arr).load(&i).iconst(c).op("iastore");
            m.iinc(&i, 1).branch("goto", &top).label(&end);
            format!("fills the {arr} with {c}")
        }
        11 => {
            let h = names.take(HELPERS);
            let x = names.take(SCALARS);
            m.params.push((x.clone(), Ty::Int));
            m.op("aload_0")
                .load(&x)
                .pooled("invokevirtual", &format!("Method {h}:(I)V"));
            ints.push(x.clone());
            format!("calls {h} with the {x}")
        }
        12 => {
            let f = names.take(FIELDS);
            let x = names.take(SCALARS);
            m.params.push((x.clone(), Ty::Int));
            m.pooled("getstatic", &format!("Field {f}:I")).load(&x).op("iadd");
            m.pooled("putstatic", &format!("Field {f}:I"));
            ints.push(x.clone());
            format!("adds the {x} to the shared {f}")
        }
        13 => {
            let s = names.take(STRINGS);
            let g = names.take(GREETINGS);
            m.params.push((s.clone(), Ty::Str));
            let ok = m.fresh_label();
            m.load(&s).branch("ifnonnull", &ok);
            m.pooled("ldc", &format!("String {g}")).store(&s).label(&ok);
            format!("defaults a missing {s} to {}", g.to_lowercase())
        }
        14 => {
            let s = names.take(STRINGS);
            let out = names.take(STRINGS);
            let g = names.take(GREETINGS);
            m.params.push((s.clone(), Ty::Str));
            m.locals.push((out.clone(), Ty::Str));
            m.pooled("new", "class java/lang/StringBuilder").op("dup");
            m.pooled("invokespecial", "Method java/lang/StringBuilder.\"<init>\":()V");
            m.pooled("ldc", &format!("String {g} "));
            m.pooled(
                "invokevirtual",
                "Method java/lang/StringBuilder.append:(Ljava/lang/String;)Ljava/lang/StringBuilder;",
            );
            m.load(&s);
            m.pooled(
                "invokevirtual",
                "Method java/lang/StringBuilder.append:(Ljava/lang/String;)Ljava/lang/StringBuilder;",
            );
            m.pooled(
                "invokevirtual",
                "Method java/lang/StringBuilder.toString:()Ljava/lang/String;",
            )
            .store(&out);
            format!("builds a {} greeting for the {s} as {out}", g.to_lowercase())
        }
        _ => unreachable!("step kind out of range"),
    }
}

/// Appends the final return; the phrase is `None` for a plain `return`.
fn return_step(m: &mut Method, names: &mut Names, ints: &[String]) -> (Ret, Option<String>) {
    match names.rng.gen_range(0..4) {
        0 if !ints.is_empty() => {
            let v = ints.choose(names.rng).expect("non-empty").clone();
            m.load(&v).op("ireturn");
            (Ret::Int, Some(format!("returns the {v}")))
        }
        1 if ints.len() >= 2 => {
            let mut two: Vec<String> = ints.choose_multiple(names.rng, 2).cloned().collect();
            two.sort();
            let (a, b) = (&two[0], &two[1]);
            let (no, end) = (m.fresh_label(), m.fresh_label());
            m.load(a)
                .load(b)
                .branch("if_icmple", &no)
                .iconst(1)
                .branch("goto", &end);
            m.label(&no).iconst(0).label(&end).op("ireturn");
            (Ret::Bool, Some(format!("reports whether {a} exceeds {b}")))
        }
        2 => {
            let f = names.take(FIELDS);
            m.op("aload_0")
                .pooled("getfield", &format!("Field {f}:I"))
                .op("ireturn");
            (Ret::Int, Some(format!("returns the current {f}")))
        }
        _ => {
            m.op("return");
            (Ret::Void, None)
        }
    }
}

/// camelCase name from the leading verb of each phrase.
fn method_name(phrases: &[String]) -> String {
    let mut name = String::new();
    for (i, w) in phrases.iter().filter_map(|p| p.split_whitespace().next()).enumerate() {
        let w = w.trim_end_matches('s');
        if i == 0 {
            name.push_str(w);
        } else {
            let mut c = w.chars();
            if let Some(f) = c.next() {
                name.extend(f.to_uppercase());
                name.push_str(c.as_str());
            }
        }
    }
    name
}

fn generate(rng: &mut ChaCha8Rng) -> (String, String) {
    let steps = rng.gen_range(1..=3);
    let mut kinds: Vec<usize> = (0..BODY_KINDS).collect();
    kinds.shuffle(rng);
    kinds.truncate(steps);
    let mut names = Names {
        rng,
        used: HashSet::new(),
    };
    let mut m = Method::default();
    let mut ints = Vec::new();
    let mut phrases: Vec<String> = kinds
        .iter()
        .map(|&k| body_step(k, &mut m, &mut names, &mut ints))
        .collect();
    let (ret, phrase) = return_step(&mut m, &mut names, &ints);
    phrases.extend(phrase);
    let name = method_name(&phrases);
    let doc = match phrases.as_slice() {
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
        [] => unreachable!("at least one step"),
    };
    let mut chars = doc.chars();
    let doc = chars
        .next()
        .map(|c| c.to_uppercase().collect::<String>())
        .unwrap_or_default()
        + chars.as_str()
        + ".";
    (m.render(&name, ret), doc)
}

/// `n` records with pairwise distinct docstrings and disassemblies.
/// Deterministic per seed.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen_docs = HashSet::new();
    let mut seen_code = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (disassembly, doc) = generate(&mut rng);
        if !seen_docs.insert(doc.clone()) || !seen_code.insert(disassembly.clone()) {
            continue;
        }
        out.push(CorpusRecord {
            id: format!("toy{:04}", out.len()),
            code: String::new(),
            comment: doc,
            disassembly: Some(disassembly),
        });
    }
    out
}

/// Disjoint train and test records from one generator stream.
pub fn toy_split(train: usize, test: usize, seed: u64) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let mut all = toy_corpus(train + test, seed);
    let test_out = all.split_off(train);
    (all, test_out)
}

/// Train/test sizes and corpus seed of the desk-scale toy experiment.
pub const TOY_TRAIN: usize = 200;
pub const TOY_TEST: usize = 50;
pub const TOY_SEED: u64 = 7;

/// Configuration for the toy experiment. Dimensions and learning rate are
/// scaled to the corpus; dropout is off since memorization is the goal.
pub fn toy_config(mapping: stacktrans::trainer::WordMapping) -> stacktrans::trainer::TrainConfig {
    stacktrans::trainer::TrainConfig {
        embed_dim: 64,
        hidden_dim: 64,
        learning_rate: 3e-3,
        dropout: 0.0,
        epochs: 200,
        word_mapping: mapping,
        seed: 0,
        ..Default::default()
    }
}

/// Replaces whole words according to `map`.
pub fn rename_words(sentence: &str, map: &[(&str, &str)]) -> String {
    sentence
        .split(' ')
        .map(|w| map.iter().find(|(from, _)| *from == w).map_or(w, |(_, to)| to))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Hand-derived transcript of the for-loop sum method.
pub const SUM_TRANSCRIPT: &[(u32, &str)] = &[
    (0, "push int constant 0 onto the operand stack"),
    (1, "store int 0 into local variable sum"),
    (2, "push int constant 0 onto the operand stack"),
    (3, "store int 0 into local variable i"),
    (4, "load int from local variable i"),
    (5, "load reference from local variable array"),
    (6, "get length of array array"),
    (
        7,
        "if int i is greater than or equal to int value jump to instruction 22",
    ),
    (10, "load int from local variable sum"),
    (11, "load reference from local variable array"),
    (12, "load int from local variable i"),
    (13, "load int from array array at index i"),
    (14, "add int sum and value"),
    (15, "store int value into local variable sum"),
    (16, "increment local variable i by constant 1"),
    (19, "go to instruction 4"),
    (22, "load int from local variable sum"),
    (23, "return int sum from method"),
];
