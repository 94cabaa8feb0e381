//! Linear matrix inequalities for stochastic contraction.
//!
//! Every constraint is stored in the canonical form
//! `F(y) = F₀ + Σ yᵢ Fᵢ ⪯ 0` over a flat decision vector `y` holding the
//! per-sample metric variables `W̄ᵢ` (upper triangle, row-major) followed by
//! the shared scalars `ν`, `ν_c`, `χ` and any auxiliary scalars.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{tri_len, unpack_sym, upper_tri_indices};

/// Positions of the decision variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    /// Metric dimension.
    pub n: usize,
    pub samples: usize,
    pub nu: usize,
    pub nu_c: usize,
    pub chi: usize,
    /// Auxiliary scalars appended after `χ`.
    pub aux: Vec<String>,
}

impl DecisionLayout {
    pub fn new(n: usize, samples: usize) -> Self {
        let base = samples * tri_len(n);
        Self { n, samples, nu: base, nu_c: base + 1, chi: base + 2, aux: Vec::new() }
    }

    /// Metric variables plus `ν`, `ν_c`, `χ`.
    pub fn core_len(&self) -> usize {
        self.samples * tri_len(self.n) + 3
    }

    pub fn len(&self) -> usize {
        self.core_len() + self.aux.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn wbar_offset(&self, sample: usize) -> usize {
        sample * tri_len(self.n)
    }

    /// Appends an auxiliary scalar and returns its index.
    pub fn push_aux(&mut self, name: impl Into<String>) -> usize {
        self.aux.push(name.into());
        self.len() - 1
    }

    pub fn aux_index(&self, name: &str) -> Option<usize> {
        self.aux.iter().position(|a| a == name).map(|k| self.core_len() + k)
    }

    /// `W̄ᵢ` read from a decision vector.
    pub fn wbar(&self, y: &[f64], sample: usize) -> DMatrix<f64> {
        let off = self.wbar_offset(sample);
        unpack_sym(self.n, &y[off..off + tri_len(self.n)])
    }

    /// Writes `W̄ᵢ` into a decision vector.
    pub fn set_wbar(&self, y: &mut [f64], sample: usize, w: &DMatrix<f64>) {
        let off = self.wbar_offset(sample);
        for (k, (i, j)) in upper_tri_indices(self.n).into_iter().enumerate() {
            y[off + k] = w[(i, j)];
        }
    }

    /// Decision vector for the given metric variables and scalars.
    pub fn pack(&self, wbars: &[DMatrix<f64>], nu: f64, nu_c: f64, chi: f64) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        for (i, w) in wbars.iter().enumerate() {
            self.set_wbar(&mut y, i, w);
        }
        y[self.nu] = nu;
        y[self.nu_c] = nu_c;
        y[self.chi] = chi;
        y
    }

    /// Symmetric basis `E_k` of the metric variables of one sample:
    /// `W̄ = Σ w_k E_k`.
    pub fn wbar_basis(&self, sample: usize) -> Vec<(usize, DMatrix<f64>)> {
        let off = self.wbar_offset(sample);
        upper_tri_indices(self.n)
            .into_iter()
            .enumerate()
            .map(|(k, (i, j))| {
                let mut e = DMatrix::zeros(self.n, self.n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                (off + k, e)
            })
            .collect()
    }
}

/// `F₀ + Σ yᵢ Fᵢ ⪯ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub label: String,
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn new(label: impl Into<String>, dim: usize) -> Self {
        Self { label: label.into(), constant: DMatrix::zeros(dim, dim), terms: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    /// Adds `coef · y[index]`, merging with an existing term on the same index.
    pub fn add_term(&mut self, index: usize, coef: DMatrix<f64>) {
        if let Some((_, c)) = self.terms.iter_mut().find(|(i, _)| *i == index) {
            *c += coef;
        } else {
            self.terms.push((index, coef));
        }
    }

    /// Matrix value at a decision vector.
    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        let mut v = self.constant.clone();
        for (i, c) in &self.terms {
            v += c * y[*i];
        }
        v
    }

    /// Checks exact symmetry and consistent dimensions.
    pub fn validate(&self, nvars: usize) -> Result<()> {
        let d = self.dim();
        let exact_sym = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d && *m == m.transpose();
        if !exact_sym(&self.constant) {
            return Err(Error::Assembly(format!("block {}: constant not symmetric", self.label)));
        }
        for (i, c) in &self.terms {
            if *i >= nvars {
                return Err(Error::Assembly(format!("block {}: variable index {i} out of range", self.label)));
            }
            if !exact_sym(c) {
                return Err(Error::Assembly(format!("block {}: coefficient of y[{i}] not symmetric", self.label)));
            }
            if !c.iter().all(|v| v.is_finite()) {
                return Err(Error::Assembly(format!("block {}: non-finite coefficient", self.label)));
            }
        }
        Ok(())
    }

    fn symmetrize(mut self) -> Self {
        self.constant = exact_sym(&self.constant);
        for (_, c) in &mut self.terms {
            *c = exact_sym(c);
        }
        self.terms.retain(|(_, c)| c.iter().any(|v| *v != 0.0));
        self
    }
}

fn exact_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// A linear objective over LMI constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub layout: DecisionLayout,
    pub blocks: Vec<LmiBlock>,
    pub objective: Vec<f64>,
    /// Variables held at fixed values (removed from the search).
    pub fixed: Vec<(usize, f64)>,
}

impl LmiProblem {
    pub fn new(layout: DecisionLayout) -> Self {
        let len = layout.len();
        Self { layout, blocks: Vec::new(), objective: vec![0.0; len], fixed: Vec::new() }
    }

    pub fn nvars(&self) -> usize {
        self.layout.len()
    }

    /// Grows the objective after auxiliaries were added to the layout.
    pub fn sync_len(&mut self) {
        self.objective.resize(self.layout.len(), 0.0);
    }

    pub fn push(&mut self, block: LmiBlock) {
        self.blocks.push(block);
    }

    pub fn extend(&mut self, blocks: impl IntoIterator<Item = LmiBlock>) {
        self.blocks.extend(blocks);
    }

    pub fn fix(&mut self, index: usize, value: f64) {
        self.fixed.retain(|(i, _)| *i != index);
        self.fixed.push((index, value));
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective.iter().zip(y).map(|(c, v)| c * v).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.nvars();
        if self.objective.len() != nv {
            return Err(Error::Assembly(format!("objective has length {}, layout has {nv}", self.objective.len())));
        }
        for b in &self.blocks {
            b.validate(nv)?;
        }
        for (i, v) in &self.fixed {
            if *i >= nv || !v.is_finite() {
                return Err(Error::Assembly(format!("bad fixed variable {i} = {v}")));
            }
        }
        Ok(())
    }

    /// Writes the sparse text format.
    ///
    /// ```text
    /// nscm-lmi 1
    /// layout <n> <samples> <nu> <nu_c> <chi> <aux names...>
    /// objective <count>
    /// <index> <value>
    /// fixed <count>
    /// <index> <value>
    /// blocks <count>
    /// block <dim> <label>
    /// const <nnz>
    /// <row> <col> <value>          (upper triangle)
    /// term <index> <nnz>
    /// <row> <col> <value>
    /// end
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.layout;
        writeln!(s, "nscm-lmi 1").unwrap();
        write!(s, "layout {} {} {} {} {}", l.n, l.samples, l.nu, l.nu_c, l.chi).unwrap();
        for a in &l.aux {
            write!(s, " {a}").unwrap();
        }
        s.push('\n');
        let obj: Vec<_> = self.objective.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        writeln!(s, "objective {}", obj.len()).unwrap();
        for (i, v) in obj {
            writeln!(s, "{i} {v:e}").unwrap();
        }
        writeln!(s, "fixed {}", self.fixed.len()).unwrap();
        for (i, v) in &self.fixed {
            writeln!(s, "{i} {v:e}").unwrap();
        }
        writeln!(s, "blocks {}", self.blocks.len()).unwrap();
        for b in &self.blocks {
            writeln!(s, "block {} {}", b.dim(), b.label.replace(char::is_whitespace, "_")).unwrap();
            write_triplets(&mut s, "const", None, &b.constant);
            for (i, c) in &b.terms {
                write_triplets(&mut s, "term", Some(*i), c);
            }
            writeln!(s, "end").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| -> Result<Vec<String>> {
            lines
                .next()
                .map(|l| l.split_whitespace().map(str::to_owned).collect())
                .ok_or_else(|| Error::Config(format!("unexpected end of LMI text, wanted {what}")))
        };
        let bad = |msg: String| Error::Config(format!("LMI text: {msg}"));
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number {s}"))) };
        let idx = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(format!("bad index {s}"))) };

        let header = next("header")?;
        if header != ["nscm-lmi", "1"] {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let lay = next("layout")?;
        if lay.len() < 6 || lay[0] != "layout" {
            return Err(bad("missing layout".into()));
        }
        let layout = DecisionLayout {
            n: idx(&lay[1])?,
            samples: idx(&lay[2])?,
            nu: idx(&lay[3])?,
            nu_c: idx(&lay[4])?,
            chi: idx(&lay[5])?,
            aux: lay[6..].to_vec(),
        };
        let mut problem = LmiProblem::new(layout);

        let read_pairs = |tok: Vec<String>, key: &str, next: &mut dyn FnMut(&str) -> Result<Vec<String>>| {
            if tok.len() != 2 || tok[0] != key {
                return Err(bad(format!("expected '{key} <count>'")));
            }
            let count = idx(&tok[1])?;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let t = next(key)?;
                if t.len() != 2 {
                    return Err(bad(format!("bad {key} entry")));
                }
                out.push((idx(&t[0])?, num(&t[1])?));
            }
            Ok(out)
        };
        let tok = next("objective")?;
        for (i, v) in read_pairs(tok, "objective", &mut next)? {
            if i >= problem.objective.len() {
                return Err(bad(format!("objective index {i} out of range")));
            }
            problem.objective[i] = v;
        }
        let tok = next("fixed")?;
        problem.fixed = read_pairs(tok, "fixed", &mut next)?;

        let tok = next("blocks")?;
        if tok.len() != 2 || tok[0] != "blocks" {
            return Err(bad("expected 'blocks <count>'".into()));
        }
        let nblocks = idx(&tok[1])?;
        for _ in 0..nblocks {
            let head = next("block")?;
            if head.len() < 2 || head[0] != "block" {
                return Err(bad("expected 'block <dim> <label>'".into()));
            }
            let dim = idx(&head[1])?;
            let label = head.get(2).cloned().unwrap_or_default();
            let mut block = LmiBlock::new(label, dim);
            loop {
                let t = next("block body")?;
                match t.first().map(String::as_str) {
                    Some("end") => break,
                    Some("const") | Some("term") => {
                        let is_term = t[0] == "term";
                        let (var, nnz) = if is_term {
                            (Some(idx(&t[1])?), idx(t.get(2).ok_or_else(|| bad("term count".into()))?)?)
                        } else {
                            (None, idx(t.get(1).ok_or_else(|| bad("const count".into()))?)?)
                        };
                        let mut m = DMatrix::zeros(dim, dim);
                        for _ in 0..nnz {
                            let e = next("entry")?;
                            if e.len() != 3 {
                                return Err(bad("bad triplet".into()));
                            }
                            let (r, c, v) = (idx(&e[0])?, idx(&e[1])?, num(&e[2])?);
                            if r >= dim || c >= dim {
                                return Err(bad("triplet outside block".into()));
                            }
                            m[(r, c)] = v;
                            m[(c, r)] = v;
                        }
                        match var {
                            Some(i) => block.terms.push((i, m)),
                            None => block.constant = m,
                        }
                    }
                    other => return Err(bad(format!("unexpected token {other:?}"))),
                }
            }
            problem.blocks.push(block);
        }
        problem.validate()?;
        Ok(problem)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })
    }
}

fn write_triplets(s: &mut String, key: &str, var: Option<usize>, m: &DMatrix<f64>) {
    let entries: Vec<_> = upper_tri_indices(m.nrows()).into_iter().filter(|&(i, j)| m[(i, j)] != 0.0).collect();
    match var {
        Some(v) => writeln!(s, "{key} {v} {}", entries.len()).unwrap(),
        None => writeln!(s, "{key} {}", entries.len()).unwrap(),
    }
    for (i, j) in entries {
        writeln!(s, "{i} {j} {:e}", m[(i, j)]).unwrap();
    }
}

/// Treatment of the metric time derivative `dW̄/dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WdotMode {
    /// Time-invariant metric.
    #[default]
    Zero,
    /// `(W̄ᵢ − W̄ᵢ₋₁)/Δt` along time-ordered trajectory samples.
    BackwardDifference { dt: f64 },
    /// Backward difference bounded with `I ⪯ W̄ ⪯ χI`, giving
    /// `±dW̄/dt ⪯ (χ − 1)/Δt · I`.
    SufficientBound { dt: f64 },
}

impl WdotMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WdotMode::Zero => Ok(()),
            WdotMode::BackwardDifference { dt } | WdotMode::SufficientBound { dt } => {
                if dt > 0.0 && dt.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("metric time step must be positive, got {dt}")))
                }
            }
        }
    }
}

/// Numerical value of the `dW̄/dt` approximation at `sample` for given
/// metric samples, ordered along a trajectory. Under the sufficient-bound
/// mode the returned matrix is the bound `(χ − 1)/Δt · I` with `χ` the
/// largest eigenvalue over the supplied samples.
pub fn wdot_term(
    mode: WdotMode,
    samples: &[DMatrix<f64>],
    times: Option<&[f64]>,
    sample: usize,
) -> Result<DMatrix<f64>> {
    mode.validate()?;
    let n = samples.get(sample).ok_or_else(|| Error::Config(format!("sample {sample} out of range")))?.nrows();
    match mode {
        WdotMode::Zero => Ok(DMatrix::zeros(n, n)),
        WdotMode::BackwardDifference { dt } => {
            check_time_order(times)?;
            if sample == 0 {
                return Ok(DMatrix::zeros(n, n));
            }
            Ok((&samples[sample] - &samples[sample - 1]) / dt)
        }
        WdotMode::SufficientBound { dt } => {
            let chi = samples.iter().map(crate::linalg::max_eig).fold(1.0, f64::max);
            Ok(DMatrix::identity(n, n) * ((chi - 1.0) / dt))
        }
    }
}

fn check_time_order(times: Option<&[f64]>) -> Result<()> {
    let times = times
        .ok_or_else(|| Error::Config("backward-difference metric derivative requires trajectory samples".into()))?;
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(
            "backward-difference metric derivative requires strictly increasing sample times".into(),
        ));
    }
    Ok(())
}

/// Affine terms of `sign · dW̄ᵢ/dt` added to a contraction block.
/// `previous` is the index of the preceding trajectory sample.
fn add_wdot_terms(
    block: &mut LmiBlock,
    layout: &DecisionLayout,
    mode: WdotMode,
    sample: usize,
    previous: Option<usize>,
    sign: f64,
    offset: (usize, usize),
) {
    let n = layout.n;
    let dim = block.dim();
    let place = |m: &DMatrix<f64>| embed(m, dim, offset);
    match mode {
        WdotMode::Zero => {}
        WdotMode::BackwardDifference { dt } => {
            if let Some(prev) = previous {
                for (idx, e) in layout.wbar_basis(sample) {
                    block.add_term(idx, place(&(e * (sign / dt))));
                }
                for (idx, e) in layout.wbar_basis(prev) {
                    block.add_term(idx, place(&(e * (-sign / dt))));
                }
            }
        }
        WdotMode::SufficientBound { dt } => {
            let eye = DMatrix::<f64>::identity(n, n);
            block.add_term(layout.chi, place(&(&eye / dt)));
            block.constant -= place(&(&eye / dt));
        }
    }
}

fn embed(m: &DMatrix<f64>, dim: usize, (r, c): (usize, usize)) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dim, dim);
    out.view_mut((r, c), (m.nrows(), m.ncols())).copy_from(m);
    out
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Assembly(format!("{what} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Assembly(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Where the metric-derivative term of a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdotSpec {
    pub mode: WdotMode,
    /// Preceding trajectory sample for backward differences.
    pub previous: Option<usize>,
}

impl WdotSpec {
    pub fn zero() -> Self {
        Self { mode: WdotMode::Zero, previous: None }
    }
}

/// `I − W̄ᵢ ⪯ 0` and `W̄ᵢ − χI ⪯ 0`.
pub fn bound_blocks(layout: &DecisionLayout, sample: usize) -> Vec<LmiBlock> {
    let n = layout.n;
    let mut lower = LmiBlock::new(format!("wbar_lower_{sample}"), n);
    lower.constant = DMatrix::identity(n, n);
    let mut upper = LmiBlock::new(format!("wbar_upper_{sample}"), n);
    for (idx, e) in layout.wbar_basis(sample) {
        lower.add_term(idx, -e.clone());
        upper.add_term(idx, e);
    }
    upper.add_term(layout.chi, -DMatrix::identity(n, n));
    vec![lower, upper]
}

/// Control contraction constraints at one sample:
///
/// ```text
/// [ −dW̄/dt + 2 sym(A W̄) − 2ν BBᵀ + 2α W̄    W̄          ]
/// [ W̄                                      −(ν/α_gc) I ]  ⪯ 0
/// ```
///
/// plus `I ⪯ W̄ ⪯ χI`. With `α_gc = 0` only the upper-left block remains.
#[allow(clippy::too_many_arguments)]
pub fn build_control_blocks(
    layout: &DecisionLayout,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: f64,
    alpha_gc: f64,
    wdot: WdotSpec,
    sample: usize,
) -> Result<Vec<LmiBlock>> {
    let n = layout.n;
    check_square(a, n, "A")?;
    if b.nrows() != n || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::Assembly(format!("B must have {n} finite rows")));
    }
    check_rates(alpha, alpha_gc)?;
    let dim = if alpha_gc > 0.0 { 2 * n } else { n };
    let mut block = LmiBlock::new(format!("control_{sample}"), dim);
    for (idx, e) in layout.wbar_basis(sample) {
        let top = (a * &e + &e * a.transpose()) + &e * (2.0 * alpha);
        let mut coef = embed(&top, dim, (0, 0));
        if alpha_gc > 0.0 {
            coef += embed(&e, dim, (0, n)) + embed(&e, dim, (n, 0));
        }
        block.add_term(idx, coef);
    }
    let mut nu_coef = embed(&(b * b.transpose() * -2.0), dim, (0, 0));
    if alpha_gc > 0.0 {
        nu_coef += embed(&(DMatrix::identity(n, n) * (-1.0 / alpha_gc)), dim, (n, n));
    }
    block.add_term(layout.nu, nu_coef);
    add_wdot_terms(&mut block, layout, wdot.mode, sample, wdot.previous, -1.0, (0, 0));
    let mut out = vec![block.symmetrize()];
    out.extend(bound_blocks(layout, sample));
    Ok(out)
}

/// Deterministic or stochastic contraction of `dx = f dt + G dW` in the
/// transformed variables; identical to [`build_control_blocks`] with `B = 0`.
pub fn build_basic_contraction_blocks(
    layout: &DecisionLayout,
    f_x: &DMatrix<f64>,
    alpha: f64,
    alpha_g: f64,
    wdot: WdotSpec,
    sample: usize,
) -> Result<Vec<LmiBlock>> {
    let zero_b = DMatrix::zeros(layout.n, 1);
    let mut blocks = build_control_blocks(layout, f_x, &zero_b, alpha, alpha_g, wdot, sample)?;
    blocks[0].label = format!("contraction_{sample}");
    Ok(blocks)
}

/// Estimation contraction constraints at one sample:
///
/// ```text
/// dW̄/dt + 2 sym(W̄A − ν C_Lᵀ C) + ν α_e1 I + ν_c α_e2 I + 2α W̄ ⪯ 0
/// ```
///
/// plus `I ⪯ W̄ ⪯ χI`. The scalar coupling `ν³ ≤ ν_c` is added once per
/// problem by [`nu_cube_blocks`].
#[allow(clippy::too_many_arguments)]
pub fn build_estimation_blocks(
    layout: &DecisionLayout,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    c_l: &DMatrix<f64>,
    alpha: f64,
    alpha_e1: f64,
    alpha_e2: f64,
    wdot: WdotSpec,
    sample: usize,
) -> Result<Vec<LmiBlock>> {
    let n = layout.n;
    check_square(a, n, "A")?;
    if c.ncols() != n || c_l.ncols() != n || c.nrows() != c_l.nrows() {
        return Err(Error::Assembly("C and C_L must be p x n with equal p".into()));
    }
    if !c.iter().chain(c_l.iter()).all(|v| v.is_finite()) {
        return Err(Error::Assembly("C has non-finite entries".into()));
    }
    check_rates(alpha, alpha_e1)?;
    check_rates(alpha, alpha_e2)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut block = LmiBlock::new(format!("estimation_{sample}"), n);
    for (idx, e) in layout.wbar_basis(sample) {
        block.add_term(idx, (&e * a + a.transpose() * &e) + &e * (2.0 * alpha));
    }
    let ctc = c_l.transpose() * c;
    block.add_term(layout.nu, -(&ctc + ctc.transpose()) + &eye * alpha_e1);
    if alpha_e2 != 0.0 {
        block.add_term(layout.nu_c, &eye * alpha_e2);
    }
    add_wdot_terms(&mut block, layout, wdot.mode, sample, wdot.previous, 1.0, (0, 0));
    let mut out = vec![block.symmetrize()];
    out.extend(bound_blocks(layout, sample));
    Ok(out)
}

/// `ν³ ≤ ν_c` through an auxiliary `s` with `ν² ≤ s` and `s² ≤ ν_c ν`:
///
/// ```text
/// [ s  ν ]          [ ν_c  s ]
/// [ ν  1 ] ⪰ 0,     [ s    ν ] ⪰ 0.
/// ```
///
/// Then `ν⁴ ≤ s² ≤ ν_c ν`; conversely `s = ν²` certifies any `ν³ ≤ ν_c`.
pub fn nu_cube_blocks(layout: &mut DecisionLayout) -> Vec<LmiBlock> {
    let s = layout.aux_index("nu_cube_s").unwrap_or_else(|| layout.push_aux("nu_cube_s"));
    let e = |i: usize, j: usize, v: f64| {
        let mut m = DMatrix::zeros(2, 2);
        m[(i, j)] = v;
        m[(j, i)] = v;
        m
    };
    let mut first = LmiBlock::new("nu_cube_square", 2);
    first.constant = e(1, 1, -1.0);
    first.add_term(s, e(0, 0, -1.0));
    first.add_term(layout.nu, e(0, 1, -1.0));
    let mut second = LmiBlock::new("nu_cube_mean", 2);
    second.add_term(layout.nu_c, e(0, 0, -1.0));
    second.add_term(s, e(0, 1, -1.0));
    second.add_term(layout.nu, e(1, 1, -1.0));
    vec![first, second]
}

/// `lo ≤ y[index]` and optionally `y[index] ≤ hi`, as 1×1 blocks.
pub fn scalar_bounds(index: usize, name: &str, lo: f64, hi: Option<f64>) -> Vec<LmiBlock> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let mut out = Vec::with_capacity(2);
    let mut lower = LmiBlock::new(format!("{name}_lower"), 1);
    lower.constant = &one * lo;
    lower.add_term(index, -one.clone());
    out.push(lower);
    if let Some(hi) = hi {
        let mut upper = LmiBlock::new(format!("{name}_upper"), 1);
        upper.constant = &one * -hi;
        upper.add_term(index, one);
        out.push(upper);
    }
    out
}

fn check_rates(alpha: f64, extra: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("contraction rate must be positive, got {alpha}")));
    }
    if !(extra >= 0.0) || !extra.is_finite() {
        return Err(Error::Domain(format!("noise rate must be nonnegative, got {extra}")));
    }
    Ok(())
}
