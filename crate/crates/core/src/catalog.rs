//! Instruction-selection templates.
//!
//! Each operation gets a [`Shape`] (operator plus a guard on its operands, such as
//! "carry-in is the literal 0" or "multiplier is a power of two"), and each shape has
//! an ordered list of semantically equivalent templates. Variant 0 is the default the
//! model starts from; the search is free to switch to any other.

use serde::{Deserialize, Serialize};

use crate::ir::{FunctionSpec, Operand, Operator, Width};
use crate::x86::Flags;

/// CPU extensions that some templates depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Features {
    /// ADCX / ADOX
    pub adx: bool,
    /// MULX / RORX
    pub bmi2: bool,
}

impl Features {
    pub const ALL: Features = Features {
        adx: true,
        bmi2: true,
    };
    pub const BASELINE: Features = Features {
        adx: false,
        bmi2: false,
    };

    /// Extensions available on the running CPU (none on other architectures).
    pub fn detect() -> Features {
        #[cfg(target_arch = "x86_64")]
        {
            Features {
                adx: std::arch::is_x86_feature_detected!("adx"),
                bmi2: std::arch::is_x86_feature_detected!("bmi2"),
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            Features::BASELINE
        }
    }

    pub fn intersect(self, other: Features) -> Features {
        Features {
            adx: self.adx && other.adx,
            bmi2: self.bmi2 && other.bmi2,
        }
    }
}

impl Default for Features {
    fn default() -> Self {
        Features::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Add,
    Sub,
    Mul,
    MulPow2(u32),
    MulSmallConst(u64),
    MulX { hi_used: bool },
    AddCarry { zero_carry: bool },
    SubBorrow { zero_borrow: bool },
    Shl(u32),
    Shr(u32),
    ShlDouble(u32),
    ShrDouble(u32),
    And,
    Or,
    BitNot,
    Not,
    Assign,
    CmovZnz,
    CastU1,
    CastU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateKind {
    AddAdd,
    AddLea,
    SubSub,
    MulImul,
    MulShl,
    MulLea,
    MulShiftAdd,
    MulxMulx,
    MulxMul,
    MulxImul,
    CarryAdd,
    CarryAdc,
    CarryAdcx,
    CarryAdox,
    BorrowSub,
    BorrowSbb,
    ShiftImm,
    ShlLea,
    ShiftDouble,
    ShiftDoubleSplit,
    And,
    Or,
    Not,
    LogicalNot,
    Mov,
    CmovTest,
    CastAnd,
    CastSetc,
}

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::AddAdd => "add",
            TemplateKind::AddLea => "lea",
            TemplateKind::SubSub => "sub",
            TemplateKind::MulImul => "imul",
            TemplateKind::MulShl => "shl",
            TemplateKind::MulLea => "lea",
            TemplateKind::MulShiftAdd => "shift-add",
            TemplateKind::MulxMulx => "mulx",
            TemplateKind::MulxMul => "mul",
            TemplateKind::MulxImul => "imul-lo",
            TemplateKind::CarryAdd => "add",
            TemplateKind::CarryAdc => "adc",
            TemplateKind::CarryAdcx => "adcx",
            TemplateKind::CarryAdox => "adox",
            TemplateKind::BorrowSub => "sub",
            TemplateKind::BorrowSbb => "sbb",
            TemplateKind::ShiftImm => "shift",
            TemplateKind::ShlLea => "lea",
            TemplateKind::ShiftDouble => "shld/shrd",
            TemplateKind::ShiftDoubleSplit => "split-shift",
            TemplateKind::And => "and",
            TemplateKind::Or => "or",
            TemplateKind::Not => "not",
            TemplateKind::LogicalNot => "test-setz",
            TemplateKind::Mov => "mov",
            TemplateKind::CmovTest => "test-cmovnz",
            TemplateKind::CastAnd => "and-mask",
            TemplateKind::CastSetc => "bt-setc-movzx",
        }
    }

    /// Flags the template body leaves clobbered. The carry-producing templates also
    /// leave their carry-out in one of these.
    pub fn writes(self) -> Flags {
        match self {
            TemplateKind::AddLea
            | TemplateKind::MulLea
            | TemplateKind::ShlLea
            | TemplateKind::MulxMulx
            | TemplateKind::Not
            | TemplateKind::Mov => Flags::NONE,
            TemplateKind::CarryAdcx => Flags::CF,
            TemplateKind::CarryAdox => Flags::OF,
            _ => Flags::CF_OF,
        }
    }

    /// The flag a carry-in is consumed from.
    pub fn reads(self) -> Flags {
        match self {
            TemplateKind::CarryAdc | TemplateKind::CarryAdcx | TemplateKind::BorrowSbb => Flags::CF,
            TemplateKind::CarryAdox => Flags::OF,
            _ => Flags::NONE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub operator: Operator,
    pub shape: Shape,
    pub kind: TemplateKind,
    pub reads: Flags,
    pub writes: Flags,
}

/// Multipliers the shift/add variant handles: not a power of two, at most four set bits.
fn is_small_const(c: u64) -> bool {
    c > 2 && !c.is_power_of_two() && c.count_ones() <= 4 && c < (1 << 32)
}

/// Classifies operation `index` of `spec`. `use_counts` comes from [`FunctionSpec::use_counts`].
pub fn shape_of(spec: &FunctionSpec, index: usize, use_counts: &[usize]) -> Shape {
    let op = &spec.body[index];
    let lit = |i: usize| op.inputs[i].lit();
    match op.operator {
        Operator::Add => Shape::Add,
        Operator::Sub => Shape::Sub,
        Operator::Mul => {
            let c = match (lit(0), lit(1)) {
                (_, Some(c)) => Some(c),
                (Some(c), None) => Some(c),
                _ => None,
            };
            match c {
                Some(c) if c.is_power_of_two() => Shape::MulPow2(c.trailing_zeros()),
                Some(c) if is_small_const(c) => Shape::MulSmallConst(c),
                _ => Shape::Mul,
            }
        }
        Operator::MulX => Shape::MulX {
            hi_used: use_counts[op.outputs[1].index()] > 0,
        },
        Operator::AddCarryX => Shape::AddCarry {
            zero_carry: op.inputs[0] == Operand::Lit(0),
        },
        Operator::SubBorrowX => Shape::SubBorrow {
            zero_borrow: op.inputs[0] == Operand::Lit(0),
        },
        Operator::Shl | Operator::Shr => {
            let k = op.inputs.last().and_then(|o| o.lit()).unwrap_or(0) as u32;
            match (op.operator, op.inputs.len()) {
                (Operator::Shl, 2) => Shape::Shl(k),
                (Operator::Shr, 2) => Shape::Shr(k),
                (Operator::Shl, _) => Shape::ShlDouble(k),
                _ => Shape::ShrDouble(k),
            }
        }
        Operator::And => Shape::And,
        Operator::Or => Shape::Or,
        Operator::BitNot => Shape::BitNot,
        Operator::Not => Shape::Not,
        Operator::Assign => Shape::Assign,
        Operator::CmovZnz => Shape::CmovZnz,
        Operator::StaticCast => match op.cast {
            Some(Width::U1) if spec.width_of(op.inputs[0]) != Width::U1 => Shape::CastU1,
            _ => Shape::CastU64,
        },
    }
}

/// Template variants for a shape, default first. Never empty.
pub fn variants(shape: Shape, features: Features) -> Vec<TemplateKind> {
    use TemplateKind as T;
    let mut v = Vec::with_capacity(4);
    match shape {
        Shape::Add => v.extend([T::AddAdd, T::AddLea]),
        Shape::Sub => v.push(T::SubSub),
        Shape::Mul => v.push(T::MulImul),
        Shape::MulPow2(k) => {
            v.extend([T::MulImul, T::MulShl]);
            if (1..=3).contains(&k) {
                v.push(T::MulLea);
            }
        }
        Shape::MulSmallConst(_) => v.extend([T::MulImul, T::MulShiftAdd]),
        Shape::MulX { hi_used } => {
            if features.bmi2 {
                v.push(T::MulxMulx);
            }
            v.push(T::MulxMul);
            if !hi_used {
                v.push(T::MulxImul);
            }
        }
        Shape::AddCarry { zero_carry } => {
            if zero_carry {
                v.push(T::CarryAdd);
            }
            v.push(T::CarryAdc);
            if features.adx {
                v.extend([T::CarryAdcx, T::CarryAdox]);
            }
        }
        Shape::SubBorrow { zero_borrow } => {
            if zero_borrow {
                v.push(T::BorrowSub);
            }
            v.push(T::BorrowSbb);
        }
        Shape::Shl(k) => {
            v.push(T::ShiftImm);
            if (1..=3).contains(&k) {
                v.push(T::ShlLea);
            }
        }
        Shape::Shr(_) => v.push(T::ShiftImm),
        Shape::ShlDouble(k) | Shape::ShrDouble(k) => {
            v.push(T::ShiftDouble);
            if k > 0 {
                v.push(T::ShiftDoubleSplit);
            }
        }
        Shape::And => v.push(T::And),
        Shape::Or => v.push(T::Or),
        Shape::BitNot => v.push(T::Not),
        Shape::Not => v.push(T::LogicalNot),
        Shape::Assign | Shape::CastU64 => v.push(T::Mov),
        Shape::CmovZnz => v.push(T::CmovTest),
        Shape::CastU1 => v.extend([T::CastAnd, T::CastSetc]),
    }
    v
}

/// The variant lists the model draws from: CPU features plus templates the user switched off.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub features: Features,
    #[serde(default)]
    pub disabled: Vec<TemplateKind>,
}

impl Catalog {
    pub fn new(features: Features) -> Catalog {
        Catalog {
            features,
            disabled: Vec::new(),
        }
    }

    /// Variants for `shape` after filtering; empty if every candidate is disabled.
    pub fn variants(&self, shape: Shape) -> Vec<TemplateKind> {
        let mut v = variants(shape, self.features);
        v.retain(|k| !self.disabled.contains(k));
        v
    }
}

fn operator_of(shape: Shape) -> Operator {
    match shape {
        Shape::Add => Operator::Add,
        Shape::Sub => Operator::Sub,
        Shape::Mul | Shape::MulPow2(_) | Shape::MulSmallConst(_) => Operator::Mul,
        Shape::MulX { .. } => Operator::MulX,
        Shape::AddCarry { .. } => Operator::AddCarryX,
        Shape::SubBorrow { .. } => Operator::SubBorrowX,
        Shape::Shl(_) | Shape::ShlDouble(_) => Operator::Shl,
        Shape::Shr(_) | Shape::ShrDouble(_) => Operator::Shr,
        Shape::And => Operator::And,
        Shape::Or => Operator::Or,
        Shape::BitNot => Operator::BitNot,
        Shape::Not => Operator::Not,
        Shape::Assign => Operator::Assign,
        Shape::CmovZnz => Operator::CmovZnz,
        Shape::CastU1 | Shape::CastU64 => Operator::StaticCast,
    }
}

/// Full template descriptors for a shape.
pub fn template_catalog(shape: Shape, features: Features) -> Vec<Template> {
    variants(shape, features)
        .into_iter()
        .map(|kind| Template {
            operator: operator_of(shape),
            shape,
            kind,
            reads: kind.reads(),
            writes: kind.writes(),
        })
        .collect()
}

/// Bit positions of `c`; the shift/add multiply sums `x << k` over them.
pub fn shift_add_terms(c: u64) -> Vec<u32> {
    (0..64).filter(|b| c >> b & 1 == 1).collect()
}
