//! Program evaluation against a scene.
//!
//! [`SceneIndex`] flattens a scene into at most 24 objects and represents
//! object sets as `u32` bitmasks and box sets as `u8` bitmasks. Every
//! function is total: empty sets flow through filters and count as zero.
//!
//! [`reference`] holds a second, deliberately naive interpreter used as a
//! test oracle.

use crate::language::{Cmp, Expr, ObjFilter, Program, Sym};
use crate::scene::{Color, Scene, Shape};

pub type ObjMask = u32;
pub type BoxMask = u8;

/// Precomputed masks for one scene.
#[derive(Clone, Debug)]
pub struct SceneIndex {
    n_boxes: usize,
    all: ObjMask,
    box_masks: Vec<ObjMask>,
    ys: Vec<u8>,
    colors: Vec<Color>,
    shapes: Vec<Shape>,
    color_masks: [ObjMask; 3],
    shape_masks: [ObjMask; 3],
    size_masks: [ObjMask; 3],
    top: ObjMask,
    bottom: ObjMask,
}

impl SceneIndex {
    pub fn new(scene: &Scene) -> SceneIndex {
        let n = scene.object_count();
        assert!(n <= 32, "scene {} has more than 32 objects", scene.id);
        let mut idx = SceneIndex {
            n_boxes: scene.boxes.len(),
            all: 0,
            box_masks: vec![0; scene.boxes.len()],
            ys: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            shapes: Vec::with_capacity(n),
            color_masks: [0; 3],
            shape_masks: [0; 3],
            size_masks: [0; 3],
            top: 0,
            bottom: 0,
        };
        let mut k = 0;
        for (b, bx) in scene.boxes.iter().enumerate() {
            let min_y = bx.objects.iter().map(|o| o.y).min();
            let max_y = bx.objects.iter().map(|o| o.y).max();
            for o in &bx.objects {
                let bit = 1u32 << k;
                idx.all |= bit;
                idx.box_masks[b] |= bit;
                idx.ys.push(o.y);
                idx.colors.push(o.color);
                idx.shapes.push(o.shape);
                idx.color_masks[o.color as usize] |= bit;
                idx.shape_masks[o.shape as usize] |= bit;
                idx.size_masks[o.size as usize] |= bit;
                if Some(o.y) == min_y {
                    idx.top |= bit;
                }
                if Some(o.y) == max_y {
                    idx.bottom |= bit;
                }
                k += 1;
            }
        }
        idx
    }

    pub fn all_objects(&self) -> ObjMask {
        self.all
    }

    pub fn all_boxes(&self) -> BoxMask {
        ((1u16 << self.n_boxes) - 1) as BoxMask
    }

    pub fn box_objects(&self, b: usize) -> ObjMask {
        self.box_masks[b]
    }

    fn filter(&self, f: ObjFilter, set: ObjMask) -> ObjMask {
        match f {
            ObjFilter::Color(c) => set & self.color_masks[c as usize],
            ObjFilter::Shape(s) => set & self.shape_masks[s as usize],
            ObjFilter::Size(s) => set & self.size_masks[s as usize],
            ObjFilter::Top => set & self.top,
            ObjFilter::Bottom => set & self.bottom,
            ObjFilter::Above => self.relative(set, true),
            ObjFilter::Below => self.relative(set, false),
        }
    }

    /// Objects strictly above (or below) some member of `set` in the same box.
    fn relative(&self, set: ObjMask, above: bool) -> ObjMask {
        let mut out = 0;
        for (b, &bm) in self.box_masks.iter().enumerate() {
            let inside = set & bm;
            if inside == 0 {
                continue;
            }
            let ys = bits(inside).map(|k| self.ys[k]);
            let pivot = if above { ys.max() } else { ys.min() }.expect("non-empty");
            for k in bits(self.box_masks[b]) {
                let y = self.ys[k];
                if (above && y < pivot) || (!above && y > pivot) {
                    out |= 1 << k;
                }
            }
        }
        out
    }

    fn distinct_colors(&self, set: ObjMask) -> usize {
        let mut seen = 0u8;
        for k in bits(set) {
            seen |= 1 << (self.colors[k] as u8);
        }
        seen.count_ones() as usize
    }

    fn distinct_shapes(&self, set: ObjMask) -> usize {
        let mut seen = 0u8;
        for k in bits(set) {
            seen |= 1 << (self.shapes[k] as u8);
        }
        seen.count_ones() as usize
    }
}

fn bits(mask: u32) -> impl Iterator<Item = usize> {
    let mut m = mask;
    std::iter::from_fn(move || {
        if m == 0 {
            None
        } else {
            let k = m.trailing_zeros() as usize;
            m &= m - 1;
            Some(k)
        }
    })
}

fn box_bits(mask: BoxMask) -> impl Iterator<Item = usize> {
    bits(mask as u32)
}

/// Evaluates a `bool` program.
pub fn execute(program: &Program, scene: &Scene) -> bool {
    eval_bool(program.expr(), &SceneIndex::new(scene))
}

pub fn execute_indexed(program: &Program, idx: &SceneIndex) -> bool {
    eval_bool(program.expr(), idx)
}

pub fn eval_bool(e: &Expr, idx: &SceneIndex) -> bool {
    match e {
        Expr::Sym(Sym::True) => true,
        Expr::Sym(Sym::False) => false,
        Expr::Apply(f, args) => match (&**f, args.as_slice()) {
            (Expr::Sym(Sym::And), [a, b]) => eval_bool(a, idx) && eval_bool(b, idx),
            (Expr::Sym(Sym::Or), [a, b]) => eval_bool(a, idx) || eval_bool(b, idx),
            (Expr::Sym(Sym::Not), [a]) => !eval_bool(a, idx),
            (Expr::Sym(Sym::BoxExists), [bs]) => eval_boxes(bs, idx) != 0,
            (Expr::Sym(Sym::BoxCount(c)), [n, bs]) => c.holds(eval_boxes(bs, idx).count_ones() as usize, eval_int(n)),
            (Expr::Sym(counter), [n, objs]) => count_holds(*counter, eval_int(n), eval_objs(objs, idx), idx),
            (pred, [objs]) => apply_predicate(pred, eval_objs(objs, idx), idx),
            _ => unreachable!("ill-typed bool application {e}"),
        },
        _ => unreachable!("not a bool expression: {e}"),
    }
}

fn count_holds(counter: Sym, bound: u8, set: ObjMask, idx: &SceneIndex) -> bool {
    match counter {
        Sym::ObjectCount(c) => c.holds(set.count_ones() as usize, bound),
        Sym::ColorCount(c) => c.holds(idx.distinct_colors(set), bound),
        Sym::ShapeCount(c) => c.holds(idx.distinct_shapes(set), bound),
        other => unreachable!("{other} is not an object counter"),
    }
}

fn eval_int(e: &Expr) -> u8 {
    match e {
        Expr::Sym(Sym::Int(n)) => *n,
        _ => unreachable!("not an int expression: {e}"),
    }
}

fn eval_objs(e: &Expr, idx: &SceneIndex) -> ObjMask {
    match e {
        Expr::Sym(Sym::AllObjs) => idx.all,
        Expr::Apply(f, args) if args.len() == 1 => apply_filter(f, eval_objs(&args[0], idx), idx),
        _ => unreachable!("not an object-set expression: {e}"),
    }
}

fn apply_filter(f: &Expr, set: ObjMask, idx: &SceneIndex) -> ObjMask {
    match f {
        Expr::Sym(Sym::Filter(flt)) => idx.filter(*flt, set),
        Expr::Compose(outer, inner) => apply_filter(outer, apply_filter(inner, set, idx), idx),
        _ => unreachable!("not an object filter: {f}"),
    }
}

fn apply_predicate(f: &Expr, set: ObjMask, idx: &SceneIndex) -> bool {
    match f {
        Expr::Sym(Sym::ObjExists) => set != 0,
        Expr::Curry(counter, n) => match &**counter {
            Expr::Sym(s) => count_holds(*s, eval_int(n), set, idx),
            _ => unreachable!("curried non-symbol {counter}"),
        },
        Expr::Compose(outer, inner) => apply_predicate(outer, apply_filter(inner, set, idx), idx),
        _ => unreachable!("not an object predicate: {f}"),
    }
}

fn eval_boxes(e: &Expr, idx: &SceneIndex) -> BoxMask {
    match e {
        Expr::Sym(Sym::AllBoxes) => idx.all_boxes(),
        Expr::Apply(f, args) => match (&**f, args.as_slice()) {
            (Expr::Sym(Sym::BoxFilter), [bs, pred]) => {
                let input = eval_boxes(bs, idx);
                let mut out = 0;
                for b in box_bits(input) {
                    if apply_predicate(pred, idx.box_masks[b], idx) {
                        out |= 1 << b;
                    }
                }
                out
            }
            (Expr::Sym(Sym::MemberColorCountGrtEq), [n, bs]) => {
                let bound = eval_int(n);
                let input = eval_boxes(bs, idx);
                let mut out = 0;
                for b in box_bits(input) {
                    if Cmp::GtEq.holds(idx.distinct_colors(idx.box_masks[b]), bound) {
                        out |= 1 << b;
                    }
                }
                out
            }
            (Expr::Sym(Sym::MemberObjCountEq), [n, bs]) => {
                let bound = eval_int(n);
                let input = eval_boxes(bs, idx);
                let mut out = 0;
                for b in box_bits(input) {
                    if Cmp::Eq.holds(idx.box_masks[b].count_ones() as usize, bound) {
                        out |= 1 << b;
                    }
                }
                out
            }
            _ => unreachable!("ill-typed box application {e}"),
        },
        _ => unreachable!("not a box-set expression: {e}"),
    }
}

/// Evaluates a program over every scene, returning one bit per scene.
pub fn denotations(program: &Program, scenes: &[SceneIndex]) -> Vec<bool> {
    scenes.iter().map(|s| execute_indexed(program, s)).collect()
}

/// Object-set result of an object-typed expression; exposed for property tests.
pub fn eval_object_set(e: &Expr, idx: &SceneIndex) -> ObjMask {
    eval_objs(e, idx)
}

pub mod reference {
    //! Structural-recursion interpreter over explicit values and closures.
    //! Shares nothing with the bitmask engine beyond the scene types.

    use std::rc::Rc;

    use crate::language::{Cmp, Expr, ObjFilter, Program, Sym};
    use crate::scene::{Obj, Scene};

    /// (box index, position within box)
    type ObjRef = (usize, usize);

    #[derive(Clone)]
    enum Value {
        Bool(bool),
        Int(usize),
        Objs(Vec<ObjRef>),
        Boxes(Vec<usize>),
        Func(Rc<dyn Fn(Vec<Value>) -> Value>),
    }

    impl Value {
        fn bool(self) -> bool {
            match self {
                Value::Bool(b) => b,
                _ => panic!("expected bool"),
            }
        }
        fn int(self) -> usize {
            match self {
                Value::Int(n) => n,
                _ => panic!("expected int"),
            }
        }
        fn objs(self) -> Vec<ObjRef> {
            match self {
                Value::Objs(v) => v,
                _ => panic!("expected object set"),
            }
        }
        fn boxes(self) -> Vec<usize> {
            match self {
                Value::Boxes(v) => v,
                _ => panic!("expected box set"),
            }
        }
        fn call(&self, args: Vec<Value>) -> Value {
            match self {
                Value::Func(f) => f(args),
                _ => panic!("expected function"),
            }
        }
    }

    fn get(scene: &Scene, r: ObjRef) -> Obj {
        scene.boxes[r.0].objects[r.1]
    }

    fn keep(scene: &Rc<Scene>, set: Vec<ObjRef>, pred: impl Fn(&Obj) -> bool) -> Vec<ObjRef> {
        set.into_iter().filter(|&r| pred(&get(scene, r))).collect()
    }

    fn filter_fn(scene: Rc<Scene>, f: ObjFilter) -> Value {
        Value::Func(Rc::new(move |args: Vec<Value>| {
            let set = args.into_iter().next().expect("one argument").objs();
            let out = match f {
                ObjFilter::Color(c) => keep(&scene, set, |o| o.color == c),
                ObjFilter::Shape(s) => keep(&scene, set, |o| o.shape == s),
                ObjFilter::Size(s) => keep(&scene, set, |o| o.size == s),
                ObjFilter::Top | ObjFilter::Bottom => {
                    set.into_iter()
                        .filter(|&(b, i)| {
                            let y = scene.boxes[b].objects[i].y;
                            scene.boxes[b].objects.iter().all(|other| {
                                if f == ObjFilter::Top {
                                    other.y >= y
                                } else {
                                    other.y <= y
                                }
                            })
                        })
                        .collect()
                }
                ObjFilter::Above | ObjFilter::Below => {
                    let mut out = Vec::new();
                    for (b, bx) in scene.boxes.iter().enumerate() {
                        for (i, o) in bx.objects.iter().enumerate() {
                            let related = set.iter().any(|&(b2, j)| {
                                let other = scene.boxes[b2].objects[j];
                                b2 == b && if f == ObjFilter::Above { o.y < other.y } else { o.y > other.y }
                            });
                            if related {
                                out.push((b, i));
                            }
                        }
                    }
                    out
                }
            };
            Value::Objs(out)
        }))
    }

    fn compare(c: Cmp, count: usize, bound: usize) -> bool {
        match c {
            Cmp::Eq => count == bound,
            Cmp::GtEq => count >= bound,
            Cmp::LtEq => count <= bound,
        }
    }

    fn distinct<T: PartialEq>(items: impl Iterator<Item = T>) -> usize {
        let mut seen: Vec<T> = Vec::new();
        for it in items {
            if !seen.contains(&it) {
                seen.push(it);
            }
        }
        seen.len()
    }

    fn symbol(scene: &Rc<Scene>, s: Sym) -> Value {
        let sc = scene.clone();
        match s {
            Sym::AllObjs => Value::Objs(
                scene.boxes.iter().enumerate().flat_map(|(b, bx)| (0..bx.objects.len()).map(move |i| (b, i))).collect(),
            ),
            Sym::AllBoxes => Value::Boxes((0..scene.boxes.len()).collect()),
            Sym::Int(n) => Value::Int(n as usize),
            Sym::True => Value::Bool(true),
            Sym::False => Value::Bool(false),
            Sym::Filter(f) => filter_fn(sc, f),
            Sym::ObjExists => {
                Value::Func(Rc::new(|a: Vec<Value>| Value::Bool(!a.into_iter().next().expect("arg").objs().is_empty())))
            }
            Sym::ObjectCount(c) | Sym::ColorCount(c) | Sym::ShapeCount(c) => {
                Value::Func(Rc::new(move |a: Vec<Value>| {
                    let mut it = a.into_iter();
                    let bound = it.next().expect("int").int();
                    let set = it.next().expect("set").objs();
                    let count = match s {
                        Sym::ObjectCount(_) => set.len(),
                        Sym::ColorCount(_) => distinct(set.iter().map(|&r| get(&sc, r).color)),
                        _ => distinct(set.iter().map(|&r| get(&sc, r).shape)),
                    };
                    Value::Bool(compare(c, count, bound))
                }))
            }
            Sym::BoxFilter => Value::Func(Rc::new(move |a: Vec<Value>| {
                let mut it = a.into_iter();
                let boxes = it.next().expect("boxes").boxes();
                let pred = it.next().expect("predicate");
                let kept = boxes
                    .into_iter()
                    .filter(|&b| {
                        let members = (0..sc.boxes[b].objects.len()).map(|i| (b, i)).collect();
                        pred.call(vec![Value::Objs(members)]).bool()
                    })
                    .collect();
                Value::Boxes(kept)
            })),
            Sym::BoxExists => Value::Func(Rc::new(|a: Vec<Value>| {
                Value::Bool(!a.into_iter().next().expect("arg").boxes().is_empty())
            })),
            Sym::BoxCount(c) => Value::Func(Rc::new(move |a: Vec<Value>| {
                let mut it = a.into_iter();
                let bound = it.next().expect("int").int();
                Value::Bool(compare(c, it.next().expect("boxes").boxes().len(), bound))
            })),
            Sym::And | Sym::Or => Value::Func(Rc::new(move |a: Vec<Value>| {
                let mut it = a.into_iter();
                let x = it.next().expect("lhs").bool();
                let y = it.next().expect("rhs").bool();
                Value::Bool(if s == Sym::And { x && y } else { x || y })
            })),
            Sym::Not => Value::Func(Rc::new(|a: Vec<Value>| Value::Bool(!a.into_iter().next().expect("arg").bool()))),
            Sym::MemberColorCountGrtEq | Sym::MemberObjCountEq => Value::Func(Rc::new(move |a: Vec<Value>| {
                let mut it = a.into_iter();
                let bound = it.next().expect("int").int();
                let boxes = it.next().expect("boxes").boxes();
                let kept = boxes
                    .into_iter()
                    .filter(|&b| {
                        let objs = &sc.boxes[b].objects;
                        if s == Sym::MemberObjCountEq {
                            objs.len() == bound
                        } else {
                            distinct(objs.iter().map(|o| o.color)) >= bound
                        }
                    })
                    .collect();
                Value::Boxes(kept)
            })),
        }
    }

    fn eval(scene: &Rc<Scene>, e: &Expr) -> Value {
        match e {
            Expr::Sym(s) => symbol(scene, *s),
            Expr::Apply(f, args) => {
                let fv = eval(scene, f);
                let argv = args.iter().map(|a| eval(scene, a)).collect();
                fv.call(argv)
            }
            Expr::Curry(f, a) => {
                let fv = eval(scene, f);
                let bound = eval(scene, a);
                Value::Func(Rc::new(move |rest: Vec<Value>| {
                    let mut all = vec![bound.clone()];
                    all.extend(rest);
                    fv.call(all)
                }))
            }
            Expr::Compose(outer, inner) => {
                let o = eval(scene, outer);
                let i = eval(scene, inner);
                Value::Func(Rc::new(move |args: Vec<Value>| o.call(vec![i.call(args)])))
            }
        }
    }

    pub fn execute(program: &Program, scene: &Scene) -> bool {
        let scene = Rc::new(scene.clone());
        eval(&scene, program.expr()).bool()
    }
}

pub use reference::execute as reference_execute;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{parse_text, Grammar, Variant};
    use crate::scene::{Obj, SceneBox, Size};

    fn o(x: u8, y: u8, color: Color, shape: Shape) -> Obj {
        Obj { x, y, color, shape, size: Size::Medium }
    }

    fn scene(boxes: Vec<Vec<Obj>>) -> Scene {
        Scene { id: "t".into(), boxes: boxes.into_iter().map(|objects| SceneBox { objects }).collect() }
    }

    fn run(variant: Variant, text: &str, s: &Scene) -> bool {
        let g = Grammar::build(variant);
        let p = parse_text(&g, text).unwrap();
        let fast = execute(&p, s);
        assert_eq!(fast, reference_execute(&p, s), "engines disagree on {text}");
        fast
    }

    #[test]
    fn yellow_above_black_in_same_box() {
        let s = scene(vec![
            vec![o(10, 10, Color::Yellow, Shape::Circle), o(10, 50, Color::Black, Shape::Square)],
            vec![o(5, 5, Color::Blue, Shape::Circle)],
            vec![o(5, 5, Color::Blue, Shape::Circle)],
        ]);
        assert!(run(Variant::New, "objExists(yellow(above(black(allObjs))))", &s));
        assert!(!run(Variant::New, "objExists(black(above(yellow(allObjs))))", &s));
    }

    #[test]
    fn above_does_not_cross_boxes() {
        let s = scene(vec![
            vec![o(10, 10, Color::Yellow, Shape::Circle)],
            vec![o(10, 50, Color::Black, Shape::Square)],
            vec![o(5, 5, Color::Blue, Shape::Circle)],
        ]);
        assert!(!run(Variant::New, "objExists(yellow(above(black(allObjs))))", &s));
    }

    #[test]
    fn box_with_two_colors() {
        let two = vec![o(1, 1, Color::Yellow, Shape::Circle), o(1, 9, Color::Black, Shape::Circle)];
        let one = vec![o(1, 1, Color::Blue, Shape::Circle), o(1, 9, Color::Blue, Shape::Square)];
        let s = scene(vec![two.clone(), one.clone(), one.clone()]);
        let z2 = "boxCountEq(1, boxFilter(allBoxes, objColorCountGrtEq(2)))";
        assert!(run(Variant::New, z2, &s));
        let s2 = scene(vec![two.clone(), two.clone(), one.clone()]);
        assert!(!run(Variant::New, z2, &s2));
        assert!(run(Variant::Old, "boxExists(memberColorCountGrtEq(2, allBoxes))", &s));
        assert!(run(Variant::New, "objColorCountGrtEq(2, allObjs)", &s));
    }

    #[test]
    fn golden_box_count_program() {
        let sq = |y| o(1, y, Color::Yellow, Shape::Square);
        let s = scene(vec![
            vec![sq(1), sq(20)],
            vec![sq(1), o(1, 30, Color::Blue, Shape::Square)],
            vec![o(1, 1, Color::Yellow, Shape::Circle)],
        ]);
        let z = "boxCountEq(1, boxFilter(allBoxes, objectCountGtEq(2)(yellow(square))))";
        assert!(run(Variant::New, z, &s));
        let s2 = scene(vec![vec![sq(1), sq(20)], vec![sq(1), sq(30)], vec![sq(40)]]);
        assert!(!run(Variant::New, z, &s2));
    }

    #[test]
    fn top_is_relative_to_the_whole_box() {
        let s = scene(vec![
            vec![o(1, 5, Color::Yellow, Shape::Square), o(1, 20, Color::Black, Shape::Square)],
            vec![o(1, 1, Color::Blue, Shape::Circle)],
            vec![o(1, 1, Color::Blue, Shape::Circle)],
        ]);
        assert!(!run(Variant::New, "objExists(black(top(allObjs)))", &s));
        assert!(!run(Variant::New, "objExists(top(black(allObjs)))", &s));
        assert!(run(Variant::New, "objExists(black(bottom(allObjs)))", &s));
        assert!(!run(Variant::New, "boxExists(boxFilter(allBoxes, black(top)))", &s));
        assert!(run(Variant::New, "boxExists(boxFilter(allBoxes, yellow(top)))", &s));
    }

    #[test]
    fn contradictory_filters_are_empty() {
        let s = scene(vec![
            vec![o(1, 5, Color::Yellow, Shape::Square)],
            vec![o(1, 1, Color::Blue, Shape::Circle)],
            vec![o(1, 1, Color::Black, Shape::Triangle)],
        ]);
        assert!(!run(Variant::New, "objExists(blue(yellow(allObjs)))", &s));
        assert!(!run(Variant::New, "objectCountGtEq(1, blue(yellow(allObjs)))", &s));
        assert!(run(Variant::New, "objExists(allObjs)", &s));
        assert!(!run(Variant::New, "objExists(above(blue(yellow(allObjs))))", &s));
    }

    #[test]
    fn counts_and_connectives() {
        let s = scene(vec![
            vec![o(1, 5, Color::Yellow, Shape::Square), o(2, 5, Color::Yellow, Shape::Circle)],
            vec![o(1, 1, Color::Blue, Shape::Circle)],
            vec![o(1, 1, Color::Black, Shape::Triangle)],
        ]);
        assert!(run(Variant::New, "objectCountEq(2, yellow(allObjs))", &s));
        assert!(run(Variant::New, "objectCountLtEq(4, allObjs)", &s));
        assert!(run(Variant::New, "objShapeCountEq(3, allObjs)", &s));
        assert!(run(Variant::New, "objShapeCountGrtEq(2, yellow(allObjs))", &s));
        assert!(run(Variant::New, "boxCountEq(3, allBoxes)", &s));
        assert!(run(Variant::New, "boxCountGtEq(2, boxFilter(allBoxes, objectCountEq(1)))", &s));
        assert!(run(Variant::New, "andBool(objExists(blue(allObjs)), notBool(objExists(large(allObjs))))", &s));
        assert!(run(Variant::New, "orBool(objExists(large(allObjs)), objExists(medium(allObjs)))", &s));
        assert!(run(Variant::Old, "boxCountEq(2, memberObjCountEq(1, allBoxes))", &s));
    }
}
