//! Straightline input language: JSON schema, validation and dependency analysis.
//!
//! A function is a list of scalar operations in single-assignment form. Array
//! arguments are flattened into scalar pseudo-variables `name[i]` that remember
//! which argument pointer and element they come from, so the emitter can address
//! them in memory.
//!
//! ```json
//! {
//!   "name": "add1",
//!   "args": [{"name": "a", "type": "u64[1]"}, {"name": "b", "type": "u64[1]"}],
//!   "returns": ["o0"],
//!   "body": [{"out": ["o0"], "op": "+", "in": ["a[0]", "b[0]"]}]
//! }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    U1,
    U64,
    /// Only used to describe a `(lo, hi)` input pair of a double-word shift.
    U128,
}

impl Width {
    pub fn bits(self) -> u32 {
        match self {
            Width::U1 => 1,
            Width::U64 => 64,
            Width::U128 => 128,
        }
    }

    pub fn max_value(self) -> u64 {
        match self {
            Width::U1 => 1,
            _ => u64::MAX,
        }
    }

    fn parse(s: &str) -> Option<Width> {
        match s {
            "u1" => Some(Width::U1),
            "u64" => Some(Width::U64),
            "u128" => Some(Width::U128),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Width::U1 => "u1",
            Width::U64 => "u64",
            Width::U128 => "u128",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    /// Logical not: `x == 0`.
    Not,
    And,
    Mul,
    Add,
    Sub,
    Shl,
    Assign,
    Shr,
    /// Bitwise complement.
    BitNot,
    Or,
    AddCarryX,
    CmovZnz,
    MulX,
    StaticCast,
    SubBorrowX,
}

impl Operator {
    pub const ALL: [Operator; 15] = [
        Operator::Not,
        Operator::And,
        Operator::Mul,
        Operator::Add,
        Operator::Sub,
        Operator::Shl,
        Operator::Assign,
        Operator::Shr,
        Operator::BitNot,
        Operator::Or,
        Operator::AddCarryX,
        Operator::CmovZnz,
        Operator::MulX,
        Operator::StaticCast,
        Operator::SubBorrowX,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Not => "!",
            Operator::And => "&",
            Operator::Mul => "*",
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Shl => "<<",
            Operator::Assign => "=",
            Operator::Shr => ">>",
            Operator::BitNot => "~",
            Operator::Or => "or",
            Operator::AddCarryX => "addcarryx",
            Operator::CmovZnz => "cmovznz",
            Operator::MulX => "mulx",
            Operator::StaticCast => "static_cast",
            Operator::SubBorrowX => "subborrowx",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Operator> {
        let op = match s {
            "!" => Operator::Not,
            "&" => Operator::And,
            "*" => Operator::Mul,
            "+" => Operator::Add,
            "-" => Operator::Sub,
            "<<" => Operator::Shl,
            "=" => Operator::Assign,
            ">>" => Operator::Shr,
            "~" => Operator::BitNot,
            "or" | "|" => Operator::Or,
            "addcarryx" => Operator::AddCarryX,
            "cmovznz" => Operator::CmovZnz,
            "mulx" => Operator::MulX,
            "static_cast" => Operator::StaticCast,
            "subborrowx" => Operator::SubBorrowX,
            _ => return None,
        };
        Some(op)
    }

    /// Accepted input counts.
    pub fn input_arity(self) -> &'static [usize] {
        match self {
            Operator::Not | Operator::Assign | Operator::BitNot | Operator::StaticCast => &[1],
            Operator::And | Operator::Or | Operator::Mul | Operator::Add | Operator::Sub => &[2],
            Operator::MulX => &[2],
            // (x, k) or the double-word form (lo, hi, k)
            Operator::Shl | Operator::Shr => &[2, 3],
            Operator::AddCarryX | Operator::SubBorrowX | Operator::CmovZnz => &[3],
        }
    }

    pub fn output_arity(self) -> usize {
        match self {
            Operator::AddCarryX | Operator::SubBorrowX | Operator::MulX => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub u32);

impl ValueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(ValueId),
    Lit(u64),
}

impl Operand {
    pub fn var(self) -> Option<ValueId> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Lit(_) => None,
        }
    }

    pub fn lit(self) -> Option<u64> {
        match self {
            Operand::Lit(v) => Some(v),
            Operand::Var(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Def {
    /// Element `index` of argument `arg`.
    Arg { arg: usize, index: usize },
    /// Output `slot` of operation `op` (index into the body in file order).
    Op { op: usize, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarInfo {
    pub name: String,
    pub width: Width,
    pub def: Def,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arg {
    pub name: String,
    pub width: Width,
    /// `None` for a scalar argument, which is still passed by pointer.
    pub len: Option<usize>,
}

impl Arg {
    pub fn elements(&self) -> usize {
        self.len.unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    pub outputs: Vec<ValueId>,
    pub operator: Operator,
    pub inputs: Vec<Operand>,
    /// Target width of a `static_cast`.
    pub cast: Option<Width>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSpec {
    pub name: String,
    pub args: Vec<Arg>,
    pub returns: Vec<Operand>,
    pub body: Vec<Operation>,
    pub vars: Vec<VarInfo>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error{}: {msg}", .op.map(|i| format!(" in operation {i}")).unwrap_or_default())]
    Validation { op: Option<usize>, msg: String },
}

impl IrError {
    fn at(op: usize, msg: impl Into<String>) -> Self {
        IrError::Validation {
            op: Some(op),
            msg: msg.into(),
        }
    }

    fn global(msg: impl Into<String>) -> Self {
        IrError::Validation {
            op: None,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub op: usize,
    pub msg: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "warning in operation {}: {}", self.op, self.msg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct RawArg {
    name: String,
    #[serde(rename = "type")]
    ty: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct RawOp {
    out: Vec<String>,
    op: String,
    #[serde(rename = "in")]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    args: Vec<RawArg>,
    returns: Vec<String>,
    body: Vec<RawOp>,
}

/// Parses a literal in hex (`0x`), binary (`0b`) or decimal notation.
pub fn parse_literal(text: &str) -> Result<Option<u64>, String> {
    let t = text.trim();
    let (digits, radix) = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        (h, 16)
    } else if let Some(b) = t.strip_prefix("0b").or_else(|| t.strip_prefix("0B")) {
        (b, 2)
    } else if t.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        (t, 10)
    } else {
        return Ok(None);
    };
    let digits = digits.replace('_', "");
    if digits.is_empty() || !digits.chars().all(|c| c.is_digit(radix)) {
        return Err(format!("malformed literal {t}"));
    }
    u64::from_str_radix(&digits, radix)
        .map(Some)
        .map_err(|_| format!("literal overflow {t}"))
}

fn parse_arg_type(ty: &str) -> Option<(Width, Option<usize>)> {
    let ty = ty.trim();
    if let Some(open) = ty.find('[') {
        let close = ty.strip_suffix(']')?;
        let width = Width::parse(&ty[..open])?;
        let len: usize = close[open + 1..].parse().ok()?;
        if len == 0 || width == Width::U128 {
            return None;
        }
        Some((width, Some(len)))
    } else {
        match Width::parse(ty)? {
            Width::U128 => None,
            w => Some((w, None)),
        }
    }
}

pub fn parse_function(json_text: &str) -> Result<FunctionSpec, IrError> {
    parse_function_with_warnings(json_text).map(|(spec, _)| spec)
}

pub fn parse_function_with_warnings(
    json_text: &str,
) -> Result<(FunctionSpec, Vec<Warning>), IrError> {
    let raw: RawSpec =
        serde_json::from_str(json_text).map_err(|e| IrError::Schema(e.to_string()))?;
    build(raw)
}

fn build(raw: RawSpec) -> Result<(FunctionSpec, Vec<Warning>), IrError> {
    let mut vars: Vec<VarInfo> = Vec::new();
    let mut by_name: HashMap<String, ValueId> = HashMap::new();
    let mut args = Vec::with_capacity(raw.args.len());
    let mut warnings = Vec::new();

    for (ai, ra) in raw.args.iter().enumerate() {
        let (width, len) = parse_arg_type(&ra.ty).ok_or_else(|| {
            IrError::Schema(format!(
                "argument {}: unsupported type {:?}",
                ra.name, ra.ty
            ))
        })?;
        if !is_identifier(&ra.name) {
            return Err(IrError::Schema(format!(
                "argument name {:?} is not an identifier",
                ra.name
            )));
        }
        let arg = Arg {
            name: ra.name.clone(),
            width,
            len,
        };
        for index in 0..arg.elements() {
            let name = match len {
                Some(_) => format!("{}[{}]", ra.name, index),
                None => ra.name.clone(),
            };
            let id = ValueId(vars.len() as u32);
            if by_name.insert(name.clone(), id).is_some() {
                return Err(IrError::global(format!("duplicate definition {name}")));
            }
            vars.push(VarInfo {
                name,
                width,
                def: Def::Arg { arg: ai, index },
            });
        }
        args.push(arg);
    }

    let mut body = Vec::with_capacity(raw.body.len());
    for (oi, rop) in raw.body.iter().enumerate() {
        let operator = Operator::from_symbol(&rop.op).ok_or_else(|| {
            IrError::Schema(format!("operation {oi}: unknown operator {:?}", rop.op))
        })?;
        if !operator.input_arity().contains(&rop.inputs.len()) {
            return Err(IrError::at(
                oi,
                format!(
                    "arity mismatch: {} takes {:?} inputs, got {}",
                    operator,
                    operator.input_arity(),
                    rop.inputs.len()
                ),
            ));
        }
        if rop.out.len() != operator.output_arity() {
            return Err(IrError::at(
                oi,
                format!(
                    "arity mismatch: {} has {} outputs, got {}",
                    operator,
                    operator.output_arity(),
                    rop.out.len()
                ),
            ));
        }
        let mut inputs = Vec::with_capacity(rop.inputs.len());
        for text in &rop.inputs {
            let operand = match parse_literal(text).map_err(|m| IrError::at(oi, m))? {
                Some(v) => Operand::Lit(v),
                None => match by_name.get(text.trim()) {
                    Some(&id) => Operand::Var(id),
                    None => {
                        return Err(IrError::at(
                            oi,
                            format!("use before definition {}", text.trim()),
                        ))
                    }
                },
            };
            inputs.push(operand);
        }
        let width_of = |o: &Operand| match o {
            Operand::Var(v) => vars[v.index()].width,
            Operand::Lit(x) if *x <= 1 => Width::U1,
            Operand::Lit(_) => Width::U64,
        };
        let cast = match (&rop.width, operator) {
            (Some(w), Operator::StaticCast) => match Width::parse(w) {
                Some(Width::U128) | None => {
                    return Err(IrError::Schema(format!(
                        "operation {oi}: unsupported cast width {w:?}"
                    )))
                }
                Some(w) => Some(w),
            },
            (None, Operator::StaticCast) => {
                return Err(IrError::Schema(format!(
                    "operation {oi}: static_cast needs a \"width\""
                )))
            }
            (Some(_), _) => {
                return Err(IrError::Schema(format!(
                    "operation {oi}: \"width\" only applies to static_cast"
                )))
            }
            (None, _) => None,
        };

        let out_widths: Vec<Width> = match operator {
            Operator::AddCarryX | Operator::SubBorrowX => {
                if width_of(&inputs[0]) != Width::U1 {
                    return Err(IrError::at(
                        oi,
                        format!("{operator} carry input must be u1"),
                    ));
                }
                vec![Width::U64, Width::U1]
            }
            Operator::MulX => vec![Width::U64, Width::U64],
            Operator::Not => vec![Width::U1],
            Operator::Assign => vec![width_of(&inputs[0])],
            Operator::And | Operator::Or => {
                if width_of(&inputs[0]) == Width::U1 && width_of(&inputs[1]) == Width::U1 {
                    vec![Width::U1]
                } else {
                    vec![Width::U64]
                }
            }
            Operator::CmovZnz => {
                if width_of(&inputs[1]) == Width::U1 && width_of(&inputs[2]) == Width::U1 {
                    vec![Width::U1]
                } else {
                    vec![Width::U64]
                }
            }
            Operator::StaticCast => {
                let target = cast.unwrap();
                if target.bits() < width_of(&inputs[0]).bits()
                    && !matches!(inputs[0], Operand::Lit(0 | 1))
                {
                    warnings.push(Warning {
                        op: oi,
                        msg: format!("narrowing static_cast to {} truncates", target.name()),
                    });
                }
                vec![target]
            }
            Operator::Shl | Operator::Shr => {
                let amount = inputs.last().unwrap();
                match amount {
                    Operand::Lit(k) if *k < 64 => {}
                    Operand::Lit(k) => {
                        return Err(IrError::at(
                            oi,
                            format!("shift amount {k} out of range 0..64"),
                        ))
                    }
                    Operand::Var(_) => {
                        return Err(IrError::at(oi, "shift amount must be a literal"))
                    }
                }
                vec![Width::U64]
            }
            Operator::Add | Operator::Sub | Operator::Mul | Operator::BitNot => vec![Width::U64],
        };

        let mut outputs = Vec::with_capacity(rop.out.len());
        for (slot, name) in rop.out.iter().enumerate() {
            let name = name.trim();
            if !is_identifier(name) {
                return Err(IrError::at(
                    oi,
                    format!("output name {name:?} is not an identifier"),
                ));
            }
            let id = ValueId(vars.len() as u32);
            if by_name.insert(name.to_string(), id).is_some() {
                return Err(IrError::at(oi, format!("duplicate definition {name}")));
            }
            vars.push(VarInfo {
                name: name.to_string(),
                width: out_widths[slot],
                def: Def::Op { op: oi, slot },
            });
            outputs.push(id);
        }
        body.push(Operation {
            outputs,
            operator,
            inputs,
            cast,
        });
    }

    let mut returns = Vec::with_capacity(raw.returns.len());
    for text in &raw.returns {
        let operand = match parse_literal(text).map_err(IrError::global)? {
            Some(v) => Operand::Lit(v),
            None => match by_name.get(text.trim()) {
                Some(&id) => Operand::Var(id),
                None => {
                    return Err(IrError::global(format!(
                        "returned value {} is not defined",
                        text.trim()
                    )))
                }
            },
        };
        returns.push(operand);
    }
    if returns.is_empty() {
        return Err(IrError::global("function returns nothing"));
    }

    Ok((
        FunctionSpec {
            name: raw.name,
            args,
            returns,
            body,
            vars,
        },
        warnings,
    ))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl FunctionSpec {
    pub fn var(&self, id: ValueId) -> &VarInfo {
        &self.vars[id.index()]
    }

    pub fn width_of(&self, operand: Operand) -> Width {
        match operand {
            Operand::Var(v) => self.vars[v.index()].width,
            Operand::Lit(x) if x <= 1 => Width::U1,
            Operand::Lit(_) => Width::U64,
        }
    }

    /// Total number of scalar inputs, i.e. the length of a flattened input vector.
    pub fn input_len(&self) -> usize {
        self.args.iter().map(Arg::elements).sum()
    }

    pub fn output_len(&self) -> usize {
        self.returns.len()
    }

    /// Offset of each argument inside a flattened input vector.
    pub fn arg_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.args
            .iter()
            .map(|a| {
                let o = off;
                off += a.elements();
                o
            })
            .collect()
    }

    /// Widths of the flattened inputs, in order.
    pub fn input_widths(&self) -> Vec<Width> {
        self.args
            .iter()
            .flat_map(|a| std::iter::repeat_n(a.width, a.elements()))
            .collect()
    }

    /// Position in the flattened input vector of an argument variable.
    pub fn flat_input_index(&self, id: ValueId) -> Option<usize> {
        match self.vars[id.index()].def {
            // argument variables are allocated first and in flattened order
            Def::Arg { .. } => Some(id.index()),
            Def::Op { .. } => None,
        }
    }

    /// Number of times each variable is read by the body or returned.
    pub fn use_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vars.len()];
        for op in &self.body {
            for v in op.inputs.iter().filter_map(|o| o.var()) {
                counts[v.index()] += 1;
            }
        }
        for v in self.returns.iter().filter_map(|o| o.var()) {
            counts[v.index()] += 1;
        }
        counts
    }

    fn operand_text(&self, o: Operand) -> String {
        match o {
            Operand::Var(v) => self.vars[v.index()].name.clone(),
            Operand::Lit(x) => format!("{x:#x}"),
        }
    }

    fn to_raw(&self) -> RawSpec {
        RawSpec {
            name: self.name.clone(),
            args: self
                .args
                .iter()
                .map(|a| RawArg {
                    name: a.name.clone(),
                    ty: match a.len {
                        Some(n) => format!("{}[{}]", a.width.name(), n),
                        None => a.width.name().to_string(),
                    },
                })
                .collect(),
            returns: self.returns.iter().map(|&o| self.operand_text(o)).collect(),
            body: self
                .body
                .iter()
                .map(|op| RawOp {
                    out: op
                        .outputs
                        .iter()
                        .map(|v| self.vars[v.index()].name.clone())
                        .collect(),
                    op: op.operator.symbol().to_string(),
                    inputs: op.inputs.iter().map(|&o| self.operand_text(o)).collect(),
                    width: op.cast.map(|w| w.name().to_string()),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("spec serializes")
    }

    /// One-line rendering of an operation for diagnostics, e.g. `x1, x2 <- addcarryx(0x0, a[0], b[0])`.
    pub fn describe_op(&self, index: usize) -> String {
        let op = &self.body[index];
        let outs: Vec<_> = op
            .outputs
            .iter()
            .map(|v| self.vars[v.index()].name.as_str())
            .collect();
        let ins: Vec<_> = op.inputs.iter().map(|&o| self.operand_text(o)).collect();
        let cast = op
            .cast
            .map(|w| format!("<{}>", w.name()))
            .unwrap_or_default();
        format!(
            "{} <- {}{}({})",
            outs.join(", "),
            op.operator,
            cast,
            ins.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepGraph {
    pub edges: Vec<(usize, usize)>,
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
}

impl DepGraph {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// True if `order` is a permutation of the nodes respecting every edge.
    pub fn is_topological(&self, order: &[usize]) -> bool {
        if order.len() != self.len() {
            return false;
        }
        let mut pos = vec![usize::MAX; self.len()];
        for (p, &n) in order.iter().enumerate() {
            if n >= self.len() || pos[n] != usize::MAX {
                return false;
            }
            pos[n] = p;
        }
        self.edges.iter().all(|&(a, b)| pos[a] < pos[b])
    }
}

pub fn dependency_graph(spec: &FunctionSpec) -> DepGraph {
    let n = spec.body.len();
    let mut preds = vec![Vec::new(); n];
    let mut succs = vec![Vec::new(); n];
    for (j, op) in spec.body.iter().enumerate() {
        for v in op.inputs.iter().filter_map(|o| o.var()) {
            if let Def::Op { op: i, .. } = spec.vars[v.index()].def {
                if !preds[j].contains(&i) {
                    preds[j].push(i);
                    succs[i].push(j);
                }
            }
        }
    }
    for list in preds.iter_mut().chain(succs.iter_mut()) {
        list.sort_unstable();
    }
    let mut edges: Vec<(usize, usize)> = succs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
        .collect();
    edges.sort_unstable();
    DepGraph {
        edges,
        preds,
        succs,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stats {
    pub op_count: usize,
    pub per_operator: BTreeMap<Operator, usize>,
}

pub fn stats(spec: &FunctionSpec) -> Stats {
    let mut per_operator = BTreeMap::new();
    for op in &spec.body {
        *per_operator.entry(op.operator).or_insert(0) += 1;
    }
    Stats {
        op_count: spec.body.len(),
        per_operator,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_json(args: &str, returns: &str, body: &str) -> String {
        format!(r#"{{"name":"t","args":[{args}],"returns":[{returns}],"body":[{body}]}}"#)
    }

    #[test]
    fn single_mul() {
        let s = parse_function(&spec_json(
            r#"{"name":"a0","type":"u64"},{"name":"a1","type":"u64"}"#,
            r#""o0""#,
            r#"{"out":["o0"],"op":"*","in":["a0","a1"]}"#,
        ))
        .unwrap();
        assert_eq!(s.body.len(), 1);
        assert_eq!(s.body[0].operator, Operator::Mul);
        assert_eq!(stats(&s).op_count, 1);
    }

    #[test]
    fn addcarryx_outputs() {
        let s = parse_function(&spec_json(
            r#"{"name":"a","type":"u64[1]"},{"name":"b","type":"u64[1]"}"#,
            r#""x1","x2""#,
            r#"{"out":["x1","x2"],"op":"addcarryx","in":["0x0","a[0]","b[0]"]}"#,
        ))
        .unwrap();
        let op = &s.body[0];
        assert_eq!(op.operator, Operator::AddCarryX);
        assert_eq!(op.outputs.len(), 2);
        assert_eq!(s.var(op.outputs[0]).name, "x1");
        assert_eq!(s.var(op.outputs[1]).width, Width::U1);
        assert_eq!(op.inputs[0], Operand::Lit(0));
    }

    #[test]
    fn duplicate_definition_rejected() {
        let err = parse_function(&spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x1""#,
            r#"{"out":["x1"],"op":"=","in":["a"]},{"out":["x1"],"op":"~","in":["a"]}"#,
        ))
        .unwrap_err();
        assert_eq!(
            err,
            IrError::Validation {
                op: Some(1),
                msg: "duplicate definition x1".into()
            }
        );
    }

    #[test]
    fn schema_and_validation_errors() {
        assert!(matches!(
            parse_function("{\"name\":\"x\"}"),
            Err(IrError::Schema(_))
        ));
        let unknown = spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x"],"op":"pow","in":["a"]}"#,
        );
        assert!(matches!(parse_function(&unknown), Err(IrError::Schema(_))));
        let before = spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x"],"op":"+","in":["a","y"]}"#,
        );
        assert!(matches!(
            parse_function(&before),
            Err(IrError::Validation { op: Some(0), .. })
        ));
        let arity = spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x"],"op":"+","in":["a"]}"#,
        );
        assert!(matches!(
            parse_function(&arity),
            Err(IrError::Validation { .. })
        ));
        let overflow = spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x"],"op":"+","in":["a","0x10000000000000000"]}"#,
        );
        let err = parse_function(&overflow).unwrap_err();
        assert!(err.to_string().contains("literal overflow"), "{err}");
        let shift = spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x"],"op":"<<","in":["a","64"]}"#,
        );
        assert!(matches!(
            parse_function(&shift),
            Err(IrError::Validation { .. })
        ));
        let carry = spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x","c"],"op":"addcarryx","in":["a","a","a"]}"#,
        );
        assert!(parse_function(&carry)
            .unwrap_err()
            .to_string()
            .contains("carry input must be u1"));
        let undefined_ret = spec_json(r#"{"name":"a","type":"u64"}"#, r#""zz""#, "");
        assert!(matches!(
            parse_function(&undefined_ret),
            Err(IrError::Validation { op: None, .. })
        ));
    }

    #[test]
    fn literal_forms() {
        assert_eq!(parse_literal("0x1f").unwrap(), Some(31));
        assert_eq!(parse_literal("0b101").unwrap(), Some(5));
        assert_eq!(
            parse_literal("18446744073709551615").unwrap(),
            Some(u64::MAX)
        );
        assert_eq!(parse_literal("x1").unwrap(), None);
        assert!(parse_literal("0xzz").is_err());
    }

    #[test]
    fn narrowing_cast_warns() {
        let (_, warnings) = parse_function_with_warnings(&spec_json(
            r#"{"name":"a","type":"u64"}"#,
            r#""x""#,
            r#"{"out":["x"],"op":"static_cast","in":["a"],"width":"u1"}"#,
        ))
        .unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn identity_has_empty_body() {
        let s = parse_function(&spec_json(r#"{"name":"a0","type":"u64"}"#, r#""a0""#, "")).unwrap();
        assert_eq!(stats(&s).op_count, 0);
        assert!(dependency_graph(&s).is_empty());
    }

    fn graph_of(body: &str) -> DepGraph {
        let args = r#"{"name":"a","type":"u64"},{"name":"b","type":"u64"},{"name":"c","type":"u64"},{"name":"d","type":"u64"}"#;
        dependency_graph(&parse_function(&spec_json(args, r#""a""#, body)).unwrap())
    }

    #[test]
    fn dependency_edges() {
        let chain = graph_of(
            r#"{"out":["x"],"op":"+","in":["a","b"]},{"out":["y"],"op":"+","in":["x","c"]}"#,
        );
        assert_eq!(chain.edges, vec![(0, 1)]);
        let indep = graph_of(
            r#"{"out":["x"],"op":"+","in":["a","b"]},{"out":["y"],"op":"+","in":["c","d"]}"#,
        );
        assert!(indep.edges.is_empty());
        let diamond = graph_of(
            r#"{"out":["x"],"op":"+","in":["a","b"]},{"out":["y"],"op":"-","in":["a","b"]},{"out":["z"],"op":"*","in":["x","y"]}"#,
        );
        // brute-force def/use scan
        let spec_body = [
            (vec!["x"], vec!["a", "b"]),
            (vec!["y"], vec!["a", "b"]),
            (vec!["z"], vec!["x", "y"]),
        ];
        let mut expected = Vec::new();
        for (i, (outs, _)) in spec_body.iter().enumerate() {
            for (j, (_, ins)) in spec_body.iter().enumerate() {
                if outs.iter().any(|o| ins.contains(o)) {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(diamond.edges, expected);
        assert_eq!(diamond.edges, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn round_trip_json() {
        let text = spec_json(
            r#"{"name":"a","type":"u64[2]"},{"name":"c","type":"u1"}"#,
            r#""s","k","0x5""#,
            r#"{"out":["s","k"],"op":"addcarryx","in":["c","a[0]","a[1]"]},{"out":["m"],"op":"static_cast","in":["s"],"width":"u1"}"#,
        );
        let spec = parse_function(&text).unwrap();
        let again = parse_function(&spec.to_json()).unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.describe_op(0), "s, k <- addcarryx(c, a[0], a[1])");
    }
}
