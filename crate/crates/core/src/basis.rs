//! Candidate function libraries: polynomial monomials over the state, with
//! per-row candidate masks for localized libraries.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A product of state components raised to positive integer powers.
///
/// Factors are kept sorted by state index with no repeated index; the empty
/// product is the constant function.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    factors: Vec<(usize, u32)>,
}

impl Monomial {
    pub fn constant() -> Self {
        Self { factors: Vec::new() }
    }

    pub fn var(index: usize) -> Self {
        Self {
            factors: vec![(index, 1)],
        }
    }

    /// Builds a monomial from a multiset of state indices, e.g. `[0, 0, 2]` is `x0²·x2`.
    pub fn from_indices(indices: &[usize]) -> Self {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let mut factors: Vec<(usize, u32)> = Vec::new();
        for i in sorted {
            match factors.last_mut() {
                Some((last, e)) if *last == i => *e += 1,
                _ => factors.push((i, 1)),
            }
        }
        Self { factors }
    }

    pub fn from_exponents(exponents: &[(usize, u32)]) -> Self {
        let mut indices = Vec::new();
        for &(i, e) in exponents {
            indices.extend(core::iter::repeat_n(i, e as usize));
        }
        Self::from_indices(&indices)
    }

    pub fn factors(&self) -> &[(usize, u32)] {
        &self.factors
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|&(_, e)| e).sum()
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn max_exponent(&self) -> u32 {
        self.factors.iter().map(|&(_, e)| e).max().unwrap_or(0)
    }

    pub fn max_index(&self) -> Option<usize> {
        self.factors.last().map(|&(i, _)| i)
    }

    /// Product with another monomial.
    pub fn times(&self, other: &Monomial) -> Monomial {
        let mut idx = self.indices();
        idx.extend(other.indices());
        Monomial::from_indices(&idx)
    }

    /// Sorted multiset of state indices.
    pub fn indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.degree() as usize);
        for &(i, e) in &self.factors {
            out.extend(core::iter::repeat_n(i, e as usize));
        }
        out
    }

    /// Total power of state `index` in this monomial.
    pub fn exponent_of(&self, index: usize) -> u32 {
        self.factors.iter().find(|&&(i, _)| i == index).map_or(0, |&(_, e)| e)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors.iter().fold(1.0, |acc, &(i, e)| acc * powi(x[i], e))
    }

    /// Display name such as `1`, `x`, `x^2` or `x*y`.
    pub fn name(&self, var_names: &[String]) -> String {
        if self.factors.is_empty() {
            return "1".to_owned();
        }
        let mut s = String::new();
        for (k, &(i, e)) in self.factors.iter().enumerate() {
            if k > 0 {
                s.push('*');
            }
            s.push_str(&var_names[i]);
            if e > 1 {
                let _ = write!(s, "^{e}");
            }
        }
        s
    }

    /// Inverse of [`Monomial::name`]: `"1"`, or `*`-separated factors such as
    /// `x`, `x^2` or `v1*u`.
    pub fn parse(name: &str, var_names: &[String]) -> Result<Self> {
        let name = name.trim();
        if name == "1" {
            return Ok(Self::constant());
        }
        let mut exps = Vec::new();
        for factor in name.split('*') {
            let factor = factor.trim();
            let (var, e) = match factor.split_once('^') {
                Some((v, e)) => {
                    let e: u32 = e
                        .trim()
                        .parse()
                        .map_err(|_| Error::InvalidParameter(format!("bad exponent in term {name}")))?;
                    (v.trim(), e)
                }
                None => (factor, 1),
            };
            let i = var_names
                .iter()
                .position(|v| v == var)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown variable {var} in term {name}")))?;
            if e == 0 {
                return Err(Error::InvalidParameter(format!("zero exponent in term {name}")));
            }
            exps.push((i, e));
        }
        Ok(Self::from_exponents(&exps))
    }

    /// Library ordering: total degree, then largest single power, then the
    /// sorted index tuple lexicographically.
    pub fn canonical_cmp(&self, other: &Monomial) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then(self.max_exponent().cmp(&other.max_exponent()))
            .then_with(|| self.indices().cmp(&other.indices()))
    }
}

fn powi(x: f64, e: u32) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        2 => x * x,
        _ => (0..e).fold(1.0, |acc, _| acc * x),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionKind {
    Constant,
    Monomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisFunction {
    pub name: String,
    pub monomial: Monomial,
}

impl BasisFunction {
    pub fn kind(&self) -> FunctionKind {
        if self.monomial.is_constant() {
            FunctionKind::Constant
        } else {
            FunctionKind::Monomial
        }
    }
}

/// Default component names: `x, y, z` up to three dimensions, `x1..xp` beyond.
pub fn default_var_names(p: usize) -> Vec<String> {
    if p <= 3 {
        ["x", "y", "z"][..p].iter().map(|s| (*s).to_owned()).collect()
    } else {
        (1..=p).map(|i| format!("x{i}")).collect()
    }
}

/// Ordered set of candidate functions with one candidate mask per state row.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisLibrary {
    var_names: Vec<String>,
    functions: Vec<BasisFunction>,
    row_masks: Vec<Vec<bool>>,
}

impl BasisLibrary {
    /// Validates and builds a library. Rows may have an empty mask: such rows
    /// are never examined by the detector.
    pub fn new(var_names: Vec<String>, monomials: Vec<Monomial>, row_masks: Vec<Vec<bool>>) -> Result<Self> {
        let p = var_names.len();
        if p == 0 {
            return Err(Error::InvalidParameter(
                "library needs at least one state component".into(),
            ));
        }
        let mut names_seen: Vec<&String> = Vec::new();
        for v in &var_names {
            if names_seen.contains(&v) {
                return Err(Error::InvalidParameter(format!("duplicate component name {v}")));
            }
            names_seen.push(v);
        }
        if row_masks.len() != p {
            return Err(Error::DimensionMismatch {
                context: "row mask count",
                expected: p,
                found: row_masks.len(),
            });
        }
        let n = monomials.len();
        if let Some(mask) = row_masks.iter().find(|m| m.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "row mask length",
                expected: n,
                found: mask.len(),
            });
        }
        for (k, m) in monomials.iter().enumerate() {
            if let Some(i) = m.max_index().filter(|&i| i >= p) {
                return Err(Error::DimensionMismatch {
                    context: "monomial state index",
                    expected: p,
                    found: i + 1,
                });
            }
            if monomials[..k].contains(m) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate candidate function {}",
                    m.name(&var_names)
                )));
            }
        }
        let functions = monomials
            .into_iter()
            .map(|monomial| BasisFunction {
                name: monomial.name(&var_names),
                monomial,
            })
            .collect();
        Ok(Self {
            var_names,
            functions,
            row_masks,
        })
    }

    /// Every monomial of total degree `1..=max_degree` in `p` variables (plus
    /// the constant when requested), in canonical order, all masks full.
    pub fn polynomial(p: usize, max_degree: u32, include_constant: bool) -> Result<Self> {
        Self::polynomial_named(default_var_names(p), max_degree, include_constant)
    }

    pub fn polynomial_named(var_names: Vec<String>, max_degree: u32, include_constant: bool) -> Result<Self> {
        let p = var_names.len();
        if p == 0 || max_degree == 0 {
            return Err(Error::InvalidParameter(
                "polynomial library needs p >= 1 and max_degree >= 1".into(),
            ));
        }
        let mut monomials = Vec::new();
        if include_constant {
            monomials.push(Monomial::constant());
        }
        for degree in 1..=max_degree {
            let mut combos = Vec::new();
            multisets(p, degree as usize, 0, &mut Vec::new(), &mut combos);
            monomials.extend(combos.iter().map(|c| Monomial::from_indices(c)));
        }
        monomials.sort_by(Monomial::canonical_cmp);
        let n = monomials.len();
        Self::new(var_names, monomials, vec![vec![true; n]; p])
    }

    /// Localized library on a periodic lattice of `p` sites: row `j` may use
    /// only the stencil terms centred at `j`. Products shared by several rows
    /// are stored once.
    pub fn localized(p: usize, stencil: &Stencil, include_constant: bool) -> Result<Self> {
        let span = stencil.span();
        if p < 2 * span + 1 {
            return Err(Error::InvalidParameter(format!(
                "lattice of {p} sites is smaller than the stencil span {}",
                2 * span + 1
            )));
        }
        let row_terms: Vec<Vec<Monomial>> = (0..p)
            .map(|j| {
                stencil
                    .terms
                    .iter()
                    .map(|offsets| {
                        let idx: Vec<usize> = offsets.iter().map(|&o| wrap(j, o, p)).collect();
                        Monomial::from_indices(&idx)
                    })
                    .collect()
            })
            .collect();
        let mut monomials: Vec<Monomial> = Vec::new();
        if include_constant {
            monomials.push(Monomial::constant());
        }
        for terms in &row_terms {
            for t in terms {
                if !monomials.contains(t) {
                    monomials.push(t.clone());
                }
            }
        }
        monomials.sort_by(Monomial::canonical_cmp);
        let masks = row_terms
            .iter()
            .map(|terms| {
                monomials
                    .iter()
                    .map(|m| (include_constant && m.is_constant()) || terms.contains(m))
                    .collect()
            })
            .collect();
        Self::new(default_var_names(p), monomials, masks)
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn row_masks(&self) -> &[Vec<bool>] {
        &self.row_masks
    }

    /// State dimension `p`.
    pub fn dim(&self) -> usize {
        self.var_names.len()
    }

    /// Number of candidate functions `N`.
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn is_admissible(&self, row: usize, n: usize) -> bool {
        self.row_masks[row][n]
    }

    /// Column indices admissible for `row`, in library order.
    pub fn candidates(&self, row: usize) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.row_masks[row][n]).collect()
    }

    pub fn index_of(&self, monomial: &Monomial) -> Option<usize> {
        self.functions.iter().position(|f| &f.monomial == monomial)
    }

    pub fn index_by_name(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    /// Name of the time derivative of component `row`, e.g. `dx/dt`.
    pub fn derivative_name(&self, row: usize) -> String {
        format!("d{}/dt", self.var_names[row])
    }

    pub fn with_var_names(self, var_names: Vec<String>) -> Result<Self> {
        let monomials = self.functions.into_iter().map(|f| f.monomial).collect();
        Self::new(var_names, monomials, self.row_masks)
    }

    pub fn with_row_masks(self, row_masks: Vec<Vec<bool>>) -> Result<Self> {
        let monomials = self.functions.into_iter().map(|f| f.monomial).collect();
        Self::new(self.var_names, monomials, row_masks)
    }

    /// Replaces the mask of one row by the functions named in `names`.
    pub fn with_row_candidates(mut self, row: usize, names: &[&str]) -> Result<Self> {
        let mut mask = vec![false; self.len()];
        for name in names {
            let n = self
                .index_by_name(name)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown candidate function {name}")))?;
            mask[n] = true;
        }
        self.row_masks[row] = mask;
        Ok(self)
    }

    /// Reorders functions (and masks) so that new column `k` is old column `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let monomials = order.iter().map(|&k| self.functions[k].monomial.clone()).collect();
        let masks = self
            .row_masks
            .iter()
            .map(|m| order.iter().map(|&k| m[k]).collect())
            .collect();
        Self::new(self.var_names.clone(), monomials, masks)
    }

    /// Evaluates every candidate function on each state row: `M×p -> M×N`.
    pub fn evaluate(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if states.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "library evaluation",
                expected: self.dim(),
                found: states.ncols(),
            });
        }
        let rows = states.nrows();
        let mut out = DMatrix::from_element(rows, self.len(), 1.0);
        for (n, f) in self.functions.iter().enumerate() {
            let mut col = out.column_mut(n);
            for &(i, e) in f.monomial.factors() {
                let src = states.column(i);
                for m in 0..rows {
                    col[m] *= powi(src[m], e);
                }
            }
        }
        Ok(out)
    }
}

fn wrap(j: usize, offset: isize, p: usize) -> usize {
    (j as isize + offset).rem_euclid(p as isize) as usize
}

fn multisets(p: usize, len: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == len {
        out.push(cur.clone());
        return;
    }
    for i in start..p {
        cur.push(i);
        multisets(p, len, i, cur, out);
        cur.pop();
    }
}

/// A set of products of lattice offsets relative to the row site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stencil {
    pub terms: Vec<Vec<isize>>,
}

impl Stencil {
    /// `{x_j, x_j², x_j x_{j-1}, x_j x_{j+1}, x_j x_{j-2}, x_j x_{j+2}}`.
    pub fn lorenz96() -> Self {
        Self {
            terms: vec![vec![0], vec![0, 0], vec![0, -1], vec![0, 1], vec![0, -2], vec![0, 2]],
        }
    }

    /// The six-term stencil plus, for each site `k` in `{j-1, j, j+1}`, the
    /// block `{x_k, x_k², x_{k+1} x_{k-1}, x_{k-2} x_{k-1}}`.
    pub fn lorenz96_extended() -> Self {
        let mut terms = Self::lorenz96().terms;
        for k in -1isize..=1 {
            for t in [vec![k], vec![k, k], vec![k + 1, k - 1], vec![k - 2, k - 1]] {
                let mut sorted = t.clone();
                sorted.sort_unstable();
                if !terms.iter().any(|u| {
                    let mut s = u.clone();
                    s.sort_unstable();
                    s == sorted
                }) {
                    terms.push(t);
                }
            }
        }
        Self { terms }
    }

    /// Largest absolute offset.
    pub fn span(&self) -> usize {
        self.terms.iter().flatten().map(|o| o.unsigned_abs()).max().unwrap_or(0)
    }
}
