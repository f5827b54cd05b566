//! The typed, variable-free query language.
//!
//! Two variants share most of their inventory. `New` filters boxes with a
//! generic `boxFilter` whose predicate is an ordinary object-set function;
//! `Old` has no `boxFilter` and instead carries box-level macros such as
//! `memberColorCountGrtEq`.
//!
//! Programs are trees over [`Expr`]. Every node corresponds to exactly one
//! grammar [`Action`], and the pre-order listing of those actions is the
//! program's linearization. Functions are built without variables: a
//! two-argument counter can be curried on its `int`, and object-set
//! functions compose right to left, so `yellow(square)` is the filter
//! `s -> yellow(square(s))`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Color, Shape, Size};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SemType {
    Bool,
    Int,
    ObjSet,
    BoxSet,
    Func(Vec<SemType>, Box<SemType>),
}

impl SemType {
    pub fn func(args: Vec<SemType>, ret: SemType) -> SemType {
        assert!(!args.is_empty(), "function types take at least one argument");
        SemType::Func(args, Box::new(ret))
    }

    /// `<Set[Object]:Set[Object]>`
    pub fn obj_filter() -> SemType {
        SemType::func(vec![SemType::ObjSet], SemType::ObjSet)
    }

    /// `<Set[Object]:bool>`
    pub fn obj_predicate() -> SemType {
        SemType::func(vec![SemType::ObjSet], SemType::Bool)
    }

    pub fn is_func(&self) -> bool {
        matches!(self, SemType::Func(..))
    }
}

impl fmt::Display for SemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemType::Bool => f.write_str("bool"),
            SemType::Int => f.write_str("int"),
            SemType::ObjSet => f.write_str("Set[Object]"),
            SemType::BoxSet => f.write_str("Set[Box]"),
            SemType::Func(args, ret) => {
                f.write_str("<")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ":{ret}>")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cmp {
    Eq,
    GtEq,
    LtEq,
}

impl Cmp {
    pub fn holds(self, count: usize, bound: u8) -> bool {
        let bound = bound as usize;
        match self {
            Cmp::Eq => count == bound,
            Cmp::GtEq => count >= bound,
            Cmp::LtEq => count <= bound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjFilter {
    Color(Color),
    Shape(Shape),
    Size(Size),
    Top,
    Bottom,
    Above,
    Below,
}

impl ObjFilter {
    pub fn all() -> Vec<ObjFilter> {
        let mut v: Vec<ObjFilter> = Color::ALL.iter().map(|&c| ObjFilter::Color(c)).collect();
        v.extend(Shape::ALL.iter().map(|&s| ObjFilter::Shape(s)));
        v.extend(Size::ALL.iter().map(|&s| ObjFilter::Size(s)));
        v.extend([ObjFilter::Top, ObjFilter::Bottom, ObjFilter::Above, ObjFilter::Below]);
        v
    }
}

/// A named constant or function of the language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    AllObjs,
    AllBoxes,
    Int(u8),
    True,
    False,
    Filter(ObjFilter),
    ObjExists,
    ObjectCount(Cmp),
    ColorCount(Cmp),
    ShapeCount(Cmp),
    BoxFilter,
    BoxExists,
    BoxCount(Cmp),
    And,
    Or,
    Not,
    MemberColorCountGrtEq,
    MemberObjCountEq,
}

pub const MIN_INT: u8 = 1;
pub const MAX_INT: u8 = 9;

impl Sym {
    pub fn name(self) -> String {
        let s = match self {
            Sym::AllObjs => "allObjs",
            Sym::AllBoxes => "allBoxes",
            Sym::Int(n) => return n.to_string(),
            Sym::True => "true",
            Sym::False => "false",
            Sym::Filter(ObjFilter::Color(c)) => c.name(),
            Sym::Filter(ObjFilter::Shape(s)) => s.name(),
            Sym::Filter(ObjFilter::Size(s)) => s.name(),
            Sym::Filter(ObjFilter::Top) => "top",
            Sym::Filter(ObjFilter::Bottom) => "bottom",
            Sym::Filter(ObjFilter::Above) => "above",
            Sym::Filter(ObjFilter::Below) => "below",
            Sym::ObjExists => "objExists",
            Sym::ObjectCount(Cmp::Eq) => "objectCountEq",
            Sym::ObjectCount(Cmp::GtEq) => "objectCountGtEq",
            Sym::ObjectCount(Cmp::LtEq) => "objectCountLtEq",
            Sym::ColorCount(Cmp::Eq) => "objColorCountEq",
            Sym::ColorCount(Cmp::GtEq) => "objColorCountGrtEq",
            Sym::ColorCount(Cmp::LtEq) => "objColorCountLtEq",
            Sym::ShapeCount(Cmp::Eq) => "objShapeCountEq",
            Sym::ShapeCount(Cmp::GtEq) => "objShapeCountGrtEq",
            Sym::ShapeCount(Cmp::LtEq) => "objShapeCountLtEq",
            Sym::BoxFilter => "boxFilter",
            Sym::BoxExists => "boxExists",
            Sym::BoxCount(Cmp::Eq) => "boxCountEq",
            Sym::BoxCount(Cmp::GtEq) => "boxCountGtEq",
            Sym::BoxCount(Cmp::LtEq) => "boxCountLtEq",
            Sym::And => "andBool",
            Sym::Or => "orBool",
            Sym::Not => "notBool",
            Sym::MemberColorCountGrtEq => "memberColorCountGrtEq",
            Sym::MemberObjCountEq => "memberObjCountEq",
        };
        s.to_string()
    }

    pub fn ty(self) -> SemType {
        use SemType::*;
        match self {
            Sym::AllObjs => ObjSet,
            Sym::AllBoxes => BoxSet,
            Sym::Int(_) => Int,
            Sym::True | Sym::False => Bool,
            Sym::Filter(_) => SemType::obj_filter(),
            Sym::ObjExists => SemType::obj_predicate(),
            Sym::ObjectCount(_) | Sym::ColorCount(_) | Sym::ShapeCount(_) => SemType::func(vec![Int, ObjSet], Bool),
            Sym::BoxFilter => SemType::func(vec![BoxSet, SemType::obj_predicate()], BoxSet),
            Sym::BoxExists => SemType::func(vec![BoxSet], Bool),
            Sym::BoxCount(_) => SemType::func(vec![Int, BoxSet], Bool),
            Sym::And | Sym::Or => SemType::func(vec![Bool, Bool], Bool),
            Sym::Not => SemType::func(vec![Bool], Bool),
            Sym::MemberColorCountGrtEq | Sym::MemberObjCountEq => SemType::func(vec![Int, BoxSet], BoxSet),
        }
    }
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Old,
    New,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Old => "old",
            Variant::New => "new",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "old" => Ok(Variant::Old),
            "new" => Ok(Variant::New),
            _ => Err(Error::InvalidArgument(format!("unknown grammar variant `{s}` (expected old or new)"))),
        }
    }
}

/// Symbols present in both variants.
pub fn shared_symbols() -> Vec<Sym> {
    let mut syms = vec![Sym::AllObjs, Sym::AllBoxes];
    syms.extend((MIN_INT..=MAX_INT).map(Sym::Int));
    syms.extend(ObjFilter::all().into_iter().map(Sym::Filter));
    syms.push(Sym::ObjExists);
    syms.extend([Cmp::Eq, Cmp::GtEq, Cmp::LtEq].map(Sym::ObjectCount));
    syms.extend([Cmp::Eq, Cmp::GtEq].map(Sym::ColorCount));
    syms.extend([Cmp::Eq, Cmp::GtEq].map(Sym::ShapeCount));
    syms.push(Sym::BoxExists);
    syms.extend([Cmp::Eq, Cmp::GtEq, Cmp::LtEq].map(Sym::BoxCount));
    syms.extend([Sym::And, Sym::Or, Sym::Not]);
    syms
}

pub fn variant_symbols(variant: Variant) -> Vec<Sym> {
    let mut syms = shared_symbols();
    match variant {
        Variant::New => syms.push(Sym::BoxFilter),
        Variant::Old => syms.extend([Sym::MemberColorCountGrtEq, Sym::MemberObjCountEq]),
    }
    syms
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionId(pub u16);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Index of a nonterminal (a type) within one grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NtId(pub u8);

impl NtId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rhs {
    Terminal(Sym),
    /// Function type followed by its argument types.
    Apply(Vec<SemType>),
    /// Function type and the type of the bound first argument.
    Curry(SemType, SemType),
    /// Outer function type, inner function type.
    Compose(SemType, SemType),
}

#[derive(Clone, Debug)]
pub struct Action {
    pub lhs: SemType,
    pub rhs: Rhs,
    lhs_nt: NtId,
    children: Vec<NtId>,
    text: String,
}

impl Action {
    fn new(lhs: SemType, rhs: Rhs) -> Action {
        let rhs_text = match &rhs {
            Rhs::Terminal(s) => s.name(),
            Rhs::Apply(tys) => format!("[{}]", join_types(tys)),
            Rhs::Curry(f, a) => format!("[{f}, {a}]"),
            Rhs::Compose(f, g) => format!("[*, {f}, {g}]"),
        };
        let text = format!("{lhs} -> {rhs_text}");
        Action { lhs, rhs, lhs_nt: NtId(0), children: Vec::new(), text }
    }

    fn child_types(&self) -> Vec<SemType> {
        match &self.rhs {
            Rhs::Terminal(_) => Vec::new(),
            Rhs::Apply(tys) => tys.clone(),
            Rhs::Curry(f, a) => vec![f.clone(), a.clone()],
            Rhs::Compose(f, g) => vec![f.clone(), g.clone()],
        }
    }

    /// `lhs -> rhs`, the canonical textual identity of the action.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn lhs_nt(&self) -> NtId {
        self.lhs_nt
    }

    /// Nonterminals this action expands into, left to right.
    pub fn children(&self) -> &[NtId] {
        &self.children
    }

    pub fn terminal(&self) -> Option<Sym> {
        match self.rhs {
            Rhs::Terminal(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn join_types(tys: &[SemType]) -> String {
    tys.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GrammarOptions {
    /// Adds `bool -> true` and `bool -> false`.
    pub bool_literals: bool,
}

/// A closed set of typed production rules rooted at `bool`.
///
/// Action ids are positions in the lexicographic order of the action texts,
/// so comparing ids compares texts.
#[derive(Clone, Debug)]
pub struct Grammar {
    variant: Variant,
    types: Vec<SemType>,
    actions: Vec<Action>,
    by_lhs: Vec<Vec<ActionId>>,
    by_text: HashMap<String, ActionId>,
    by_sym: HashMap<Sym, ActionId>,
    min_len: Vec<usize>,
    root: NtId,
}

impl Grammar {
    pub fn build(variant: Variant) -> Grammar {
        Grammar::with_options(variant, GrammarOptions::default())
    }

    pub fn with_options(variant: Variant, options: GrammarOptions) -> Grammar {
        let mut syms = variant_symbols(variant);
        if options.bool_literals {
            syms.extend([Sym::True, Sym::False]);
        }
        Grammar::from_symbols(variant, &syms)
    }

    /// Builds the grammar generated by an arbitrary symbol inventory.
    ///
    /// Apply actions are derived from every function type whose result is
    /// not itself a function. Currying is offered for `<int,Set[Object]:bool>`
    /// and composition for the two object-set signatures, whenever the
    /// inventory contains a function of the relevant type.
    pub fn from_symbols(variant: Variant, syms: &[Sym]) -> Grammar {
        let mut syms = syms.to_vec();
        syms.sort();
        syms.dedup();

        let mut actions: Vec<Action> = syms.iter().map(|&s| Action::new(s.ty(), Rhs::Terminal(s))).collect();

        let mut func_types: Vec<SemType> = syms.iter().map(|s| s.ty()).filter(|t| t.is_func()).collect();
        func_types.sort();
        func_types.dedup();

        let counter = SemType::func(vec![SemType::Int, SemType::ObjSet], SemType::Bool);
        let predicate = SemType::obj_predicate();
        let filter = SemType::obj_filter();
        let has_counter = func_types.contains(&counter);
        let has_filter = func_types.contains(&filter);
        if has_counter && !func_types.contains(&predicate) {
            func_types.push(predicate.clone());
        }
        let has_predicate = func_types.contains(&predicate);

        if has_counter {
            actions.push(Action::new(predicate.clone(), Rhs::Curry(counter.clone(), SemType::Int)));
        }
        if has_filter {
            if has_predicate {
                actions.push(Action::new(predicate.clone(), Rhs::Compose(predicate.clone(), filter.clone())));
            }
            actions.push(Action::new(filter.clone(), Rhs::Compose(filter.clone(), filter.clone())));
        }

        for ft in &func_types {
            if let SemType::Func(args, ret) = ft {
                if !ret.is_func() {
                    let mut tys = vec![ft.clone()];
                    tys.extend(args.iter().cloned());
                    actions.push(Action::new((**ret).clone(), Rhs::Apply(tys)));
                }
            }
        }

        actions.sort_by(|a, b| a.text.cmp(&b.text));
        actions.dedup_by(|a, b| a.text == b.text);
        assert!(actions.len() <= u16::MAX as usize);

        let mut types: Vec<SemType> = Vec::new();
        let intern = |t: &SemType, types: &mut Vec<SemType>| -> NtId {
            match types.iter().position(|x| x == t) {
                Some(i) => NtId(i as u8),
                None => {
                    types.push(t.clone());
                    NtId((types.len() - 1) as u8)
                }
            }
        };
        let root = intern(&SemType::Bool, &mut types);
        for a in &mut actions {
            a.lhs_nt = intern(&a.lhs, &mut types);
            a.children = a.child_types().iter().map(|t| intern(t, &mut types)).collect();
        }

        let mut by_lhs = vec![Vec::new(); types.len()];
        let mut by_text = HashMap::new();
        let mut by_sym = HashMap::new();
        for (i, a) in actions.iter().enumerate() {
            let id = ActionId(i as u16);
            by_lhs[a.lhs_nt.index()].push(id);
            by_text.insert(a.text.clone(), id);
            if let Some(s) = a.terminal() {
                by_sym.insert(s, id);
            }
        }

        // Shortest derivation per nonterminal, by fixpoint.
        let mut min_len = vec![usize::MAX; types.len()];
        loop {
            let mut changed = false;
            for a in &actions {
                let mut total = 1usize;
                for c in &a.children {
                    total = total.saturating_add(min_len[c.index()]);
                }
                if total < min_len[a.lhs_nt.index()] {
                    min_len[a.lhs_nt.index()] = total;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        Grammar { variant, types, actions, by_lhs, by_text, by_sym, min_len, root }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn root(&self) -> NtId {
        self.root
    }

    pub fn root_type(&self) -> &SemType {
        &self.types[self.root.index()]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action(&self, id: ActionId) -> &Action {
        &self.actions[id.index()]
    }

    pub fn action_ids(&self) -> impl Iterator<Item = ActionId> {
        (0..self.actions.len() as u16).map(ActionId)
    }

    pub fn nonterminals(&self) -> &[SemType] {
        &self.types
    }

    pub fn nt_type(&self, nt: NtId) -> &SemType {
        &self.types[nt.index()]
    }

    pub fn nt_of(&self, ty: &SemType) -> Option<NtId> {
        self.types.iter().position(|t| t == ty).map(|i| NtId(i as u8))
    }

    /// Actions whose left-hand side is `nt`, in id order.
    pub fn valid_actions(&self, nt: NtId) -> &[ActionId] {
        &self.by_lhs[nt.index()]
    }

    pub fn lookup(&self, text: &str) -> Option<ActionId> {
        self.by_text.get(text.trim()).copied()
    }

    pub fn terminal_action(&self, sym: Sym) -> Option<ActionId> {
        self.by_sym.get(&sym).copied()
    }

    pub fn has_symbol(&self, sym: Sym) -> bool {
        self.by_sym.contains_key(&sym)
    }

    pub fn symbols(&self) -> impl Iterator<Item = Sym> + '_ {
        self.actions.iter().filter_map(|a| a.terminal())
    }

    /// Fewest actions needed to fully expand `nt`.
    pub fn min_len(&self, nt: NtId) -> usize {
        self.min_len[nt.index()]
    }

    /// Set of exact derivation lengths `0..=max` achievable from each
    /// nonterminal, as bitmasks (bit `l` set when length `l` is reachable).
    pub fn length_masks(&self, max: usize) -> Vec<u64> {
        assert!(max < 64);
        let limit = if max == 63 { u64::MAX } else { (1u64 << (max + 1)) - 1 };
        let mut masks = vec![0u64; self.types.len()];
        loop {
            let mut changed = false;
            for a in &self.actions {
                let mut m = 1u64 << 1;
                for c in &a.children {
                    m = shift_sum(m, masks[c.index()]) & limit;
                }
                let slot = &mut masks[a.lhs_nt.index()];
                if *slot | m != *slot {
                    *slot |= m;
                    changed = true;
                }
            }
            if !changed {
                return masks;
            }
        }
    }

    fn action_for(&self, text: &str) -> Result<ActionId> {
        self.lookup(text).ok_or_else(|| Error::UnknownAction(text.to_string()))
    }
}

/// Minkowski sum of two length sets encoded as bitmasks.
pub(crate) fn shift_sum(a: u64, b: u64) -> u64 {
    let mut out = 0u64;
    let mut bits = b;
    while bits != 0 {
        let l = bits.trailing_zeros();
        out |= a << l;
        bits &= bits - 1;
    }
    out
}

/// A typed expression tree.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Sym(Sym),
    Apply(Box<Expr>, Vec<Expr>),
    Curry(Box<Expr>, Box<Expr>),
    Compose(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn apply(f: Expr, args: Vec<Expr>) -> Expr {
        Expr::Apply(Box::new(f), args)
    }

    pub fn curry(f: Expr, arg: Expr) -> Expr {
        Expr::Curry(Box::new(f), Box::new(arg))
    }

    pub fn compose(outer: Expr, inner: Expr) -> Expr {
        Expr::Compose(Box::new(outer), Box::new(inner))
    }

    /// Structural type, or `None` if the tree is ill-typed.
    pub fn ty(&self) -> Option<SemType> {
        match self {
            Expr::Sym(s) => Some(s.ty()),
            Expr::Apply(f, args) => match f.ty()? {
                SemType::Func(params, ret) => {
                    if params.len() != args.len() {
                        return None;
                    }
                    for (p, a) in params.iter().zip(args) {
                        if a.ty()? != *p {
                            return None;
                        }
                    }
                    Some(*ret)
                }
                _ => None,
            },
            Expr::Curry(f, a) => match f.ty()? {
                SemType::Func(params, ret) if params.len() >= 2 && a.ty()? == params[0] => {
                    Some(SemType::Func(params[1..].to_vec(), ret))
                }
                _ => None,
            },
            Expr::Compose(outer, inner) => {
                let (o, i) = (outer.ty()?, inner.ty()?);
                match (&o, &i) {
                    (SemType::Func(op, oret), SemType::Func(ip, iret))
                        if op.len() == 1 && ip.len() == 1 && **iret == op[0] =>
                    {
                        Some(SemType::Func(ip.clone(), oret.clone()))
                    }
                    _ => None,
                }
            }
        }
    }

    fn action_text(&self) -> Option<String> {
        let ty = self.ty()?;
        let text = match self {
            Expr::Sym(s) => format!("{ty} -> {}", s.name()),
            Expr::Apply(f, args) => {
                let mut tys = vec![f.ty()?];
                for a in args {
                    tys.push(a.ty()?);
                }
                format!("{ty} -> [{}]", join_types(&tys))
            }
            Expr::Curry(f, a) => format!("{ty} -> [{}, {}]", f.ty()?, a.ty()?),
            Expr::Compose(o, i) => format!("{ty} -> [*, {}, {}]", o.ty()?, i.ty()?),
        };
        Some(text)
    }

    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Sym(_) => Vec::new(),
            Expr::Apply(f, args) => std::iter::once(&**f).chain(args.iter()).collect(),
            Expr::Curry(f, a) => vec![&**f, &**a],
            Expr::Compose(o, i) => vec![&**o, &**i],
        }
    }

    /// Pre-order action sequence under `grammar`.
    pub fn linearize(&self, grammar: &Grammar) -> Result<Vec<ActionId>> {
        let mut out = Vec::new();
        self.linearize_into(grammar, &mut out)?;
        Ok(out)
    }

    fn linearize_into(&self, grammar: &Grammar, out: &mut Vec<ActionId>) -> Result<()> {
        let text = self.action_text().ok_or_else(|| Error::InvalidArgument(format!("ill-typed expression {self}")))?;
        out.push(grammar.action_for(&text)?);
        for c in self.children() {
            c.linearize_into(grammar, out)?;
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        1 + self.children().iter().map(|c| c.size()).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(|c| c.depth()).max().unwrap_or(0)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Sym(s) => write!(f, "{s}"),
            Expr::Apply(func, args) => {
                write!(f, "{func}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::Curry(func, a) => write!(f, "{func}({a})"),
            Expr::Compose(o, i) => write!(f, "{o}({i})"),
        }
    }
}

/// A complete, well-typed `bool` program with its linearization.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Program {
    expr: Expr,
    actions: Vec<ActionId>,
}

impl Program {
    pub fn from_expr(grammar: &Grammar, expr: Expr) -> Result<Program> {
        match expr.ty() {
            Some(ref t) if t == grammar.root_type() => {}
            Some(t) => {
                return Err(Error::InvalidArgument(format!("program has type {t}, expected {}", grammar.root_type())))
            }
            None => return Err(Error::InvalidArgument(format!("ill-typed expression {expr}"))),
        }
        let actions = expr.linearize(grammar)?;
        Ok(Program { expr, actions })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn actions(&self) -> &[ActionId] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// One `lhs -> rhs` line per action.
    pub fn action_text(&self, grammar: &Grammar) -> String {
        let mut out = String::new();
        for &a in &self.actions {
            out.push_str(grammar.action(a).text());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

/// Checks that `actions` is a complete derivation from the root and returns
/// the corresponding program. Indices in errors are 1-based step numbers.
pub fn parse_actions(grammar: &Grammar, actions: &[ActionId]) -> Result<Program> {
    if actions.is_empty() {
        return Err(Error::Truncated { missing: 1 });
    }
    let mut stack = vec![grammar.root()];
    for (i, &a) in actions.iter().enumerate() {
        let Some(expected) = stack.pop() else {
            return Err(Error::Trailing { extra: actions.len() - i });
        };
        let action = grammar.action(a);
        if action.lhs_nt() != expected {
            return Err(Error::IllTyped {
                index: i + 1,
                expected: grammar.nt_type(expected).to_string(),
                actual: action.text().to_string(),
            });
        }
        stack.extend(action.children().iter().rev());
    }
    if !stack.is_empty() {
        return Err(Error::Truncated { missing: stack.len() });
    }
    let mut pos = 0;
    let expr = build_expr(grammar, actions, &mut pos);
    debug_assert_eq!(pos, actions.len());
    Ok(Program { expr, actions: actions.to_vec() })
}

fn build_expr(grammar: &Grammar, actions: &[ActionId], pos: &mut usize) -> Expr {
    let action = grammar.action(actions[*pos]);
    *pos += 1;
    let mut kids: Vec<Expr> = action.children().iter().map(|_| build_expr(grammar, actions, pos)).collect();
    match &action.rhs {
        Rhs::Terminal(s) => Expr::Sym(*s),
        Rhs::Apply(_) => {
            let f = kids.remove(0);
            Expr::apply(f, kids)
        }
        Rhs::Curry(..) => {
            let a = kids.pop().expect("curry has two children");
            Expr::curry(kids.pop().expect("curry has two children"), a)
        }
        Rhs::Compose(..) => {
            let i = kids.pop().expect("compose has two children");
            Expr::compose(kids.pop().expect("compose has two children"), i)
        }
    }
}

/// Reads one `lhs -> rhs` action per non-blank line.
pub fn parse_action_lines(grammar: &Grammar, text: &str) -> Result<Vec<ActionId>> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| grammar.action_for(l)).collect()
}

pub fn linearize(grammar: &Grammar, program: &Program) -> Result<Vec<ActionId>> {
    program.expr.linearize(grammar)
}

pub fn pretty_print(program: &Program) -> String {
    program.to_string()
}

// ---- textual syntax ------------------------------------------------------

#[derive(Debug)]
struct RawCall {
    offset: usize,
    args: Vec<Raw>,
}

#[derive(Debug)]
struct Raw {
    name: String,
    offset: usize,
    calls: Vec<RawCall>,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, want: char) -> Result<()> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(self.error(format!("expected `{want}`, found `{c}`"))),
            None => Err(self.error(format!("expected `{want}`, found end of input"))),
        }
    }

    fn error(&self, message: String) -> Error {
        Error::Syntax { offset: self.pos, message }
    }

    fn ident(&mut self) -> Result<(String, usize)> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .char_indices()
            .find(|&(_, c)| !(c.is_ascii_alphanumeric() || c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(match rest.chars().next() {
                Some(c) => self.error(format!("expected a name, found `{c}`")),
                None => self.error("expected a name, found end of input".to_string()),
            });
        }
        self.pos += len;
        Ok((rest[..len].to_string(), start))
    }

    fn raw(&mut self) -> Result<Raw> {
        let (name, offset) = self.ident()?;
        let mut calls = Vec::new();
        while self.peek() == Some('(') {
            let call_offset = self.pos;
            self.pos += 1;
            let mut args = vec![self.raw()?];
            while self.peek() == Some(',') {
                self.pos += 1;
                args.push(self.raw()?);
            }
            self.expect(')')?;
            calls.push(RawCall { offset: call_offset, args });
        }
        Ok(Raw { name, offset, calls })
    }
}

fn sym_by_name(grammar: &Grammar, name: &str) -> Option<Sym> {
    grammar.symbols().find(|s| s.name() == name)
}

fn resolve(grammar: &Grammar, raw: &Raw) -> Result<Expr> {
    let sym = sym_by_name(grammar, &raw.name).ok_or_else(|| Error::Syntax {
        offset: raw.offset,
        message: format!("`{}` is not part of the {} language", raw.name, grammar.variant()),
    })?;
    let mut expr = Expr::Sym(sym);
    for call in &raw.calls {
        let args = call.args.iter().map(|a| resolve(grammar, a)).collect::<Result<Vec<_>>>()?;
        expr = combine(grammar, expr, args, call.offset)?;
    }
    Ok(expr)
}

/// Shorthand accepted in text: an object filter written where a predicate is
/// expected means "some object survives the filter", i.e. `objExists(filter)`.
fn coerce_filters(grammar: &Grammar, params: &[SemType], args: Vec<Expr>) -> Vec<Expr> {
    if !grammar.has_symbol(Sym::ObjExists) {
        return args;
    }
    args.into_iter()
        .zip(params)
        .map(|(a, p)| {
            if *p == SemType::obj_predicate() && a.ty() == Some(SemType::obj_filter()) {
                Expr::compose(Expr::Sym(Sym::ObjExists), a)
            } else {
                a
            }
        })
        .collect()
}

fn combine(grammar: &Grammar, f: Expr, args: Vec<Expr>, offset: usize) -> Result<Expr> {
    let fty = f.ty().expect("resolved expressions are typed");
    let mut args = match &fty {
        SemType::Func(params, _) if params.len() == args.len() && params.len() > 1 => {
            coerce_filters(grammar, params, args)
        }
        _ => args,
    };
    let arg_tys: Vec<SemType> = args.iter().map(|a| a.ty().expect("typed")).collect();
    let candidate = match &fty {
        SemType::Func(params, _) if *params == arg_tys => Some(Expr::apply(f, args)),
        SemType::Func(params, _) if args.len() == 1 && params.len() >= 2 && params[0] == arg_tys[0] => {
            Some(Expr::curry(f, args.pop().expect("one arg")))
        }
        SemType::Func(params, _)
            if args.len() == 1
                && params.len() == 1
                && arg_tys[0] == SemType::obj_filter()
                && params[0] == SemType::ObjSet =>
        {
            Some(Expr::compose(f, args.pop().expect("one arg")))
        }
        _ => None,
    };
    let Some(expr) = candidate else {
        let shown = arg_tys.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
        return Err(Error::Syntax { offset, message: format!("cannot apply a {fty} to ({shown})") });
    };
    let text = expr.action_text().expect("combined expressions are typed");
    if grammar.lookup(&text).is_none() {
        return Err(Error::Syntax {
            offset,
            message: format!("the {} language has no action `{text}`", grammar.variant()),
        });
    }
    Ok(expr)
}

/// Parses the `name(arg, ...)` surface syntax. Whether a call is an
/// application, a curry or a composition is decided by the argument types.
pub fn parse_text(grammar: &Grammar, src: &str) -> Result<Program> {
    let mut lx = Lexer { src, pos: 0 };
    let raw = lx.raw()?;
    if let Some(c) = lx.peek() {
        return Err(lx.error(format!("unexpected `{c}` after a complete program")));
    }
    let expr = resolve(grammar, &raw)?;
    match expr.ty() {
        Some(ref t) if t == grammar.root_type() => Program::from_expr(grammar, expr),
        Some(t) => {
            Err(Error::Syntax { offset: 0, message: format!("program has type {t}, expected {}", grammar.root_type()) })
        }
        None => unreachable!("resolve only builds typed expressions"),
    }
}

/// Parses a closed expression of any type (used for sub-program annotations).
pub fn parse_expr(grammar: &Grammar, src: &str) -> Result<Expr> {
    let mut lx = Lexer { src, pos: 0 };
    let raw = lx.raw()?;
    if let Some(c) = lx.peek() {
        return Err(lx.error(format!("unexpected `{c}` after a complete expression")));
    }
    resolve(grammar, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const GOLDEN_ACTIONS: &str = "\
bool -> [<int,Set[Box]:bool>, int, Set[Box]]
<int,Set[Box]:bool> -> boxCountEq
int -> 1
Set[Box] -> [<Set[Box],<Set[Object]:bool>:Set[Box]>, Set[Box], <Set[Object]:bool>]
<Set[Box],<Set[Object]:bool>:Set[Box]> -> boxFilter
Set[Box] -> allBoxes
<Set[Object]:bool> -> [*, <Set[Object]:bool>, <Set[Object]:Set[Object]>]
<Set[Object]:bool> -> [<int,Set[Object]:bool>, int]
<int,Set[Object]:bool> -> objectCountGtEq
int -> 2
<Set[Object]:Set[Object]> -> [*, <Set[Object]:Set[Object]>, <Set[Object]:Set[Object]>]
<Set[Object]:Set[Object]> -> yellow
<Set[Object]:Set[Object]> -> square
";

    const GOLDEN_TEXT: &str = "boxCountEq(1, boxFilter(allBoxes, objectCountGtEq(2)(yellow(square))))";

    #[test]
    fn variants_differ_only_in_box_macros() {
        let new = Grammar::build(Variant::New);
        let old = Grammar::build(Variant::Old);
        assert!(new.has_symbol(Sym::BoxFilter));
        assert!(!new.has_symbol(Sym::MemberColorCountGrtEq));
        assert!(old.has_symbol(Sym::MemberObjCountEq));
        assert!(old.has_symbol(Sym::MemberColorCountGrtEq));
        assert!(!old.has_symbol(Sym::BoxFilter));
        assert_eq!(new.root_type(), &SemType::Bool);
        assert_eq!(old.root_type(), &SemType::Bool);

        let new_syms: Vec<Sym> = new.symbols().collect();
        let old_syms: Vec<Sym> = old.symbols().collect();
        let only_new: Vec<_> = new_syms.iter().filter(|s| !old_syms.contains(s)).collect();
        let only_old: Vec<_> = old_syms.iter().filter(|s| !new_syms.contains(s)).collect();
        assert_eq!(only_new, vec![&Sym::BoxFilter]);
        assert_eq!(only_old, vec![&Sym::MemberColorCountGrtEq, &Sym::MemberObjCountEq]);
    }

    #[test]
    fn action_texts_are_unique_and_sorted() {
        for v in [Variant::Old, Variant::New] {
            let g = Grammar::build(v);
            let texts: Vec<&str> = g.actions().iter().map(|a| a.text()).collect();
            let mut sorted = texts.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(texts, sorted);
        }
    }

    #[test]
    fn every_nonterminal_is_derivable() {
        for v in [Variant::Old, Variant::New] {
            let g = Grammar::build(v);
            for (i, t) in g.nonterminals().iter().enumerate() {
                assert!(g.min_len(NtId(i as u8)) < usize::MAX, "{t} has no derivation");
            }
            for a in g.actions() {
                for c in a.children() {
                    assert!(!g.valid_actions(*c).is_empty());
                }
            }
        }
    }

    #[test]
    fn golden_box_count_sequence() {
        let g = Grammar::build(Variant::New);
        let actions = parse_action_lines(&g, GOLDEN_ACTIONS).unwrap();
        assert_eq!(actions.len(), 13);
        let p = parse_actions(&g, &actions).unwrap();
        assert_eq!(p.to_string(), GOLDEN_TEXT);
        assert_eq!(p.action_text(&g), GOLDEN_ACTIONS);
        let q = parse_text(&g, GOLDEN_TEXT).unwrap();
        assert_eq!(q.actions(), actions.as_slice());
    }

    #[test]
    fn swapped_golden_steps_fail_at_step_nine() {
        let g = Grammar::build(Variant::New);
        let mut actions = parse_action_lines(&g, GOLDEN_ACTIONS).unwrap();
        actions.swap(8, 9);
        match parse_actions(&g, &actions) {
            Err(Error::IllTyped { index, expected, actual }) => {
                assert_eq!(index, 9);
                assert_eq!(expected, "<int,Set[Object]:bool>");
                assert_eq!(actual, "int -> 2");
            }
            other => panic!("expected type error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing_sequences() {
        let g = Grammar::build(Variant::New);
        let actions = parse_action_lines(&g, GOLDEN_ACTIONS).unwrap();
        assert!(matches!(parse_actions(&g, &actions[..12]), Err(Error::Truncated { missing: 1 })));
        let mut longer = actions.clone();
        longer.push(actions[2]);
        assert!(matches!(parse_actions(&g, &longer), Err(Error::Trailing { extra: 1 })));
        assert!(parse_actions(&g, &[]).is_err());
    }

    #[test]
    fn object_chain_round_trips() {
        let g = Grammar::build(Variant::New);
        let p = parse_text(&g, "objExists(yellow(above(black(allObjs))))").unwrap();
        assert_eq!(p.len(), 9);
        let again = parse_actions(&g, p.actions()).unwrap();
        assert_eq!(again, p);
        assert_eq!(linearize(&g, &again).unwrap(), p.actions());
    }

    #[test]
    fn bool_literal_program_is_one_action() {
        let g = Grammar::with_options(Variant::New, GrammarOptions { bool_literals: true });
        let t = g.terminal_action(Sym::True).unwrap();
        let p = parse_actions(&g, &[t]).unwrap();
        assert_eq!(p.to_string(), "true");
        assert!(p.len() <= 2);
        assert!(Grammar::build(Variant::New).terminal_action(Sym::True).is_none());
    }

    #[test]
    fn shortest_program_without_literals_is_three_actions() {
        let g = Grammar::build(Variant::New);
        assert_eq!(g.min_len(g.root()), 3);
    }

    #[test]
    fn text_examples_from_both_languages() {
        let new = Grammar::build(Variant::New);
        let old = Grammar::build(Variant::Old);
        assert!(parse_text(&new, "boxExists(boxFilter(allBoxes, black(top)))").is_ok());
        assert!(parse_text(&old, "boxExists(memberObjCountEq(1,allBoxes))").is_ok());
        let err = parse_text(&new, "boxExists(memberObjCountEq(1,allBoxes))").unwrap_err();
        match err {
            Error::Syntax { offset, .. } => assert_eq!(offset, 10),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(parse_text(&new, "boxCountEq(1, boxFilter(allBoxes, objColorCountGrtEq(2)))").is_ok());
        assert!(parse_text(&new, "objColorCountGrtEq(2, allObjs)").is_ok());
        assert!(parse_text(&old, "boxExists(memberColorCountGrtEq(2, allBoxes))").is_ok());
        assert!(parse_text(&new, "objExists(black(top(allObjs)))").is_ok());
    }

    #[test]
    fn filter_in_predicate_position_means_exists() {
        let g = Grammar::build(Variant::New);
        let short = parse_text(&g, "boxExists(boxFilter(allBoxes, black(top)))").unwrap();
        let long = parse_text(&g, "boxExists(boxFilter(allBoxes, objExists(black(top))))").unwrap();
        assert_eq!(short, long);
        assert_eq!(short.to_string(), "boxExists(boxFilter(allBoxes, objExists(black(top))))");
    }

    #[test]
    fn pretty_print_canonicalizes_whitespace() {
        let g = Grammar::build(Variant::Old);
        let p = parse_text(&g, "boxExists( memberObjCountEq(1,allBoxes) )").unwrap();
        assert_eq!(pretty_print(&p), "boxExists(memberObjCountEq(1, allBoxes))");
        assert_eq!(parse_text(&g, &pretty_print(&p)).unwrap(), p);
    }

    #[test]
    fn text_errors_carry_offsets() {
        let g = Grammar::build(Variant::New);
        let cases = [
            ("objExists(allObjs", 17),
            ("objExists(allBoxes)", 9),
            ("objExists(allObjs) x", 19),
            ("frobnicate(allObjs)", 0),
            ("allObjs", 0),
            ("objExists(,)", 10),
        ];
        for (src, want) in cases {
            match parse_text(&g, src) {
                Err(Error::Syntax { offset, .. }) => assert_eq!(offset, want, "{src}"),
                other => panic!("{src}: expected syntax error, got {other:?}"),
            }
        }
    }

    #[test]
    fn curry_and_apply_forms_are_distinct_programs() {
        let g = Grammar::build(Variant::New);
        let a = parse_text(&g, "objectCountGtEq(2, allObjs)").unwrap();
        let b = parse_text(&g, "objectCountGtEq(2)(allObjs)").unwrap();
        assert_ne!(a.actions(), b.actions());
        assert_eq!(b.to_string(), "objectCountGtEq(2)(allObjs)");
    }
}
