//! Nested parameter trees and structural arithmetic over them.
//!
//! Model parameters, client deltas and optimizer slots are all
//! [`ParamTree`]s. Two trees are *congruent* when they have the same branch
//! structure, the same keys in the same order and the same leaf shapes; every
//! binary operation requires congruence and reports the first offending path
//! otherwise.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum ParamTree<T = f64> {
    Leaf(Tensor<T>),
    Branch(IndexMap<String, ParamTree<T>>),
}

impl<T: Scalar> ParamTree<T> {
    pub fn leaf(t: Tensor<T>) -> Self {
        ParamTree::Leaf(t)
    }

    /// Builds a branch, keeping the given key order. Keys must be unique.
    pub fn branch<K: Into<String>>(children: impl IntoIterator<Item = (K, ParamTree<T>)>) -> Result<Self> {
        let mut map = IndexMap::new();
        for (k, v) in children {
            let k = k.into();
            if map.contains_key(&k) {
                return Err(Error::DuplicateKey(k));
            }
            map.insert(k, v);
        }
        Ok(ParamTree::Branch(map))
    }

    /// Looks up a node by `/`-separated path; the empty path is the root.
    pub fn get(&self, path: &str) -> Option<&ParamTree<T>> {
        let mut node = self;
        for part in path.split('/').filter(|p| !p.is_empty()) {
            match node {
                ParamTree::Branch(map) => node = map.get(part)?,
                ParamTree::Leaf(_) => return None,
            }
        }
        Some(node)
    }

    pub fn tensor(&self, path: &str) -> Option<&Tensor<T>> {
        match self.get(path)? {
            ParamTree::Leaf(t) => Some(t),
            ParamTree::Branch(_) => None,
        }
    }

    pub fn tensor_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        let mut node = self;
        for part in path.split('/').filter(|p| !p.is_empty()) {
            match node {
                ParamTree::Branch(map) => node = map.get_mut(part)?,
                ParamTree::Leaf(_) => return None,
            }
        }
        match node {
            ParamTree::Leaf(t) => Some(t),
            ParamTree::Branch(_) => None,
        }
    }

    /// Leaves in depth-first insertion order, with their paths.
    pub fn leaves(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_leaves(String::new(), &mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, prefix: String, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            ParamTree::Leaf(t) => out.push((prefix, t)),
            ParamTree::Branch(map) => {
                for (k, v) in map {
                    v.collect_leaves(join(&prefix, k), out);
                }
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        match self {
            ParamTree::Leaf(t) => t.len(),
            ParamTree::Branch(map) => map.values().map(ParamTree::num_elements).sum(),
        }
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.check_congruent(other).is_ok()
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        congruence(self, other, "")
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        match self {
            ParamTree::Leaf(t) => ParamTree::Leaf(t.map(f)),
            ParamTree::Branch(map) => {
                ParamTree::Branch(map.iter().map(|(k, v)| (k.clone(), v.map(f))).collect())
            }
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T + Copy) -> Result<Self> {
        self.check_congruent(other)?;
        Ok(self.zip_map_unchecked(other, f))
    }

    fn zip_map_unchecked(&self, other: &Self, f: impl Fn(T, T) -> T + Copy) -> Self {
        match (self, other) {
            (ParamTree::Leaf(a), ParamTree::Leaf(b)) => {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                ParamTree::Leaf(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
            }
            (ParamTree::Branch(a), ParamTree::Branch(b)) => ParamTree::Branch(
                a.iter()
                    .zip(b.values())
                    .map(|((k, x), y)| (k.clone(), x.zip_map_unchecked(y, f)))
                    .collect(),
            ),
            _ => unreachable!("congruence checked by caller"),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(move |x| x * s)
    }

    pub fn squared_norm(&self) -> T {
        self.leaves()
            .into_iter()
            .fold(T::zero(), |acc, (_, t)| acc + t.squared_norm())
    }

    /// Global l2 norm over every leaf.
    pub fn l2_norm(&self) -> T {
        self.squared_norm().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|(_, t)| t.is_finite())
    }

    /// All elements in leaf order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_elements());
        for (_, t) in self.leaves() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a tree congruent to `self` from flat values in leaf order.
    pub fn unflatten_like(&self, values: &[T]) -> Result<Self> {
        if values.len() != self.num_elements() {
            return Err(Error::ShapeMismatch {
                shape: vec![self.num_elements()],
                len: values.len(),
            });
        }
        let mut offset = 0;
        Ok(self.rebuild(values, &mut offset))
    }

    fn rebuild(&self, values: &[T], offset: &mut usize) -> Self {
        match self {
            ParamTree::Leaf(t) => {
                let n = t.len();
                let data = values[*offset..*offset + n].to_vec();
                *offset += n;
                ParamTree::Leaf(Tensor::from_parts_unchecked(t.shape().to_vec(), data))
            }
            ParamTree::Branch(map) => ParamTree::Branch(
                map.iter()
                    .map(|(k, v)| (k.clone(), v.rebuild(values, offset)))
                    .collect(),
            ),
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}/{key}")
    }
}

fn congruence<T: Scalar>(a: &ParamTree<T>, b: &ParamTree<T>, path: &str) -> Result<()> {
    let fail = |reason: String| {
        Err(Error::IncongruentTrees {
            path: path.to_string(),
            reason,
        })
    };
    match (a, b) {
        (ParamTree::Leaf(x), ParamTree::Leaf(y)) => {
            if x.shape() != y.shape() {
                return fail(format!("shape {:?} vs {:?}", x.shape(), y.shape()));
            }
            Ok(())
        }
        (ParamTree::Branch(x), ParamTree::Branch(y)) => {
            if x.len() != y.len() || x.keys().zip(y.keys()).any(|(p, q)| p != q) {
                return fail(format!(
                    "keys {:?} vs {:?}",
                    x.keys().collect::<Vec<_>>(),
                    y.keys().collect::<Vec<_>>()
                ));
            }
            for (k, v) in x {
                congruence(v, &y[k.as_str()], &join(path, k))?;
            }
            Ok(())
        }
        _ => fail("leaf vs branch".to_string()),
    }
}

pub fn tree_map<T: Scalar>(f: impl Fn(T) -> T + Copy, t: &ParamTree<T>) -> ParamTree<T> {
    t.map(f)
}

pub fn tree_zip_map<T: Scalar>(
    f: impl Fn(T, T) -> T + Copy,
    a: &ParamTree<T>,
    b: &ParamTree<T>,
) -> Result<ParamTree<T>> {
    a.zip_map(b, f)
}

/// `Σ wᵢ·tᵢ`, accumulated strictly left to right so the result is
/// bit-reproducible for a fixed term order.
pub fn tree_weighted_sum<T: Scalar>(terms: &[(&ParamTree<T>, T)]) -> Result<ParamTree<T>> {
    let ((first, w0), rest) = terms.split_first().ok_or(Error::EmptyTermList)?;
    for (t, _) in rest {
        first.check_congruent(t)?;
    }
    let w0 = *w0;
    let mut acc = first.map(move |x| w0 * x);
    for (t, w) in rest {
        let w = *w;
        acc = acc.zip_map_unchecked(t, move |a, x| a + w * x);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vleaf(v: &[f64]) -> ParamTree<f64> {
        ParamTree::leaf(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn map_negate() {
        assert_eq!(tree_map(|x: f64| -x, &vleaf(&[1.0, -2.0])), vleaf(&[-1.0, 2.0]));
    }

    #[test]
    fn map_identity() {
        let t = ParamTree::branch([("a", vleaf(&[1.0, 2.0])), ("b", vleaf(&[3.0]))]).unwrap();
        assert_eq!(tree_map(|x| x, &t), t);
    }

    #[test]
    fn map_double() {
        let t = ParamTree::branch([("a", vleaf(&[0.5]))]).unwrap();
        let want = ParamTree::branch([("a", vleaf(&[1.0]))]).unwrap();
        assert_eq!(tree_map(|x| 2.0 * x, &t), want);
    }

    #[test]
    fn zip_sub() {
        let d = tree_zip_map(|a, b| a - b, &vleaf(&[0.5]), &vleaf(&[0.75])).unwrap();
        assert_eq!(d, vleaf(&[-0.25]));
    }

    #[test]
    fn zip_add_zeros_is_identity() {
        let t = ParamTree::branch([("w", vleaf(&[1.5, -3.0])), ("b", vleaf(&[0.25]))]).unwrap();
        assert_eq!(tree_zip_map(|a, b| a + b, &t, &t.zeros_like()).unwrap(), t);
    }

    #[test]
    fn zip_rejects_mismatched_shapes() {
        let err = tree_zip_map(|a, b| a - b, &vleaf(&[1.0]), &vleaf(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::IncongruentTrees { .. }));
    }

    #[test]
    fn incongruence_reports_path() {
        let a = ParamTree::branch([("layer", ParamTree::branch([("w", vleaf(&[1.0]))]).unwrap())]).unwrap();
        let b = ParamTree::branch([("layer", ParamTree::branch([("w", vleaf(&[1.0, 2.0]))]).unwrap())])
            .unwrap();
        match a.check_congruent(&b).unwrap_err() {
            Error::IncongruentTrees { path, .. } => assert_eq!(path, "layer/w"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn key_order_matters_for_congruence() {
        let a = ParamTree::branch([("a", vleaf(&[1.0])), ("b", vleaf(&[1.0]))]).unwrap();
        let b = ParamTree::branch([("b", vleaf(&[1.0])), ("a", vleaf(&[1.0]))]).unwrap();
        assert!(!a.is_congruent(&b));
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(ParamTree::branch([("a", vleaf(&[1.0])), ("a", vleaf(&[2.0]))]).is_err());
    }

    #[test]
    fn weighted_sum_examples() {
        let (a, b) = (vleaf(&[1.0]), vleaf(&[3.0]));
        assert_eq!(tree_weighted_sum(&[(&a, 2.0), (&b, 1.0)]).unwrap(), vleaf(&[5.0]));
        assert_eq!(tree_weighted_sum(&[(&b, 1.0)]).unwrap(), b);
        assert_eq!(tree_weighted_sum(&[(&a, 0.0), (&b, 0.0)]).unwrap(), vleaf(&[0.0]));
    }

    #[test]
    fn weighted_sum_errors() {
        assert_eq!(tree_weighted_sum::<f64>(&[]).unwrap_err(), Error::EmptyTermList);
        let (a, b) = (vleaf(&[1.0]), vleaf(&[1.0, 2.0]));
        assert!(matches!(
            tree_weighted_sum(&[(&a, 1.0), (&b, 1.0)]),
            Err(Error::IncongruentTrees { .. })
        ));
    }

    #[test]
    fn flatten_round_trip() {
        let t = ParamTree::branch([("w", vleaf(&[1.0, 2.0])), ("b", vleaf(&[3.0]))]).unwrap();
        let flat = t.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0]);
        assert_eq!(t.unflatten_like(&flat).unwrap(), t);
        assert!(t.unflatten_like(&flat[..2]).is_err());
    }

    #[test]
    fn path_lookup() {
        let inner = ParamTree::branch([("w", vleaf(&[4.0]))]).unwrap();
        let t = ParamTree::branch([("layer_0", inner)]).unwrap();
        assert_eq!(t.tensor("layer_0/w").unwrap().data(), &[4.0]);
        assert!(t.tensor("layer_0").is_none());
        assert!(t.get("nope").is_none());
    }

    fn arb_tree() -> impl Strategy<Value = ParamTree<f64>> {
        let leaf = prop::collection::vec(-10.0..10.0_f64, 1..5).prop_map(|v| vleaf(&v));
        leaf.prop_recursive(3, 16, 4, |inner| {
            prop::collection::vec(inner, 1..4).prop_map(|kids| {
                ParamTree::branch(kids.into_iter().enumerate().map(|(i, k)| (format!("k{i}"), k))).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn ops_preserve_congruence(t in arb_tree(), s in -3.0..3.0_f64) {
            let m = t.map(|x| x * s);
            prop_assert!(m.is_congruent(&t));
            let z = t.zip_map(&m, |a, b| a + b).unwrap();
            prop_assert!(z.is_congruent(&t));
            let w = tree_weighted_sum(&[(&t, s), (&m, 1.0)]).unwrap();
            prop_assert!(w.is_congruent(&t));
        }

        #[test]
        fn self_difference_is_exact_zero(t in arb_tree()) {
            let d = tree_zip_map(|a, b| a - b, &t, &t).unwrap();
            prop_assert!(d.flatten().iter().all(|&x| x == 0.0));
        }

        #[test]
        fn weighted_sum_is_reproducible(t in arb_tree(), w in prop::collection::vec(0.0..5.0_f64, 3)) {
            let u = t.map(|x| x * 0.3 + 1.0);
            let v = t.map(|x| x.sin());
            let terms = [(&t, w[0]), (&u, w[1]), (&v, w[2])];
            let a = tree_weighted_sum(&terms).unwrap();
            let b = tree_weighted_sum(&terms).unwrap();
            prop_assert_eq!(a.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
