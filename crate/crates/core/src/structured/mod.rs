//! Pairwise binary latent potentials and MAP inference over them.
//!
//! A configuration `z in {0,1}^n` scores
//! `sum_i unary[i][z_i] + sum_(i<j) alpha_ij z_i z_j (+ sum_i gamma[i][z_i])`.
//! When every `alpha_ij >= 0` the score is supermodular and its maximizer is
//! recovered exactly by an s-t min-cut ([`maxflow_map`]); otherwise
//! [`brute_force_map`] enumerates all `2^n` configurations.

mod maxflow;

pub use maxflow::FlowGraph;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{log_sum_exp, MlpParams, Tensor};

/// Largest `n` accepted by the enumeration routines.
pub const MAX_ENUM_VARS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
}

/// Unary and pairwise log-potentials over `n` binary variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PotentialsDoc", into = "PotentialsDoc")]
pub struct PairwisePotentials {
    n: usize,
    unary: Vec<[f64; 2]>,
    edges: Vec<Edge>,
}

#[derive(Serialize, Deserialize)]
struct PotentialsDoc {
    n: usize,
    unary: Vec<[f64; 2]>,
    edges: Vec<Edge>,
}

impl TryFrom<PotentialsDoc> for PairwisePotentials {
    type Error = Error;
    fn try_from(d: PotentialsDoc) -> Result<Self> {
        Self::new(d.n, d.unary, d.edges)
    }
}

impl From<PairwisePotentials> for PotentialsDoc {
    fn from(p: PairwisePotentials) -> Self {
        Self {
            n: p.n,
            unary: p.unary,
            edges: p.edges,
        }
    }
}

impl PairwisePotentials {
    pub fn new(n: usize, unary: Vec<[f64; 2]>, edges: Vec<Edge>) -> Result<Self> {
        if unary.len() != n {
            return Err(dim_err("PairwisePotentials unary rows", n, unary.len()));
        }
        if unary.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("unary potentials must be finite".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if !(e.i < e.j && e.j < n) {
                return Err(Error::Contract(format!(
                    "edge ({}, {}) must satisfy i < j < n = {n}",
                    e.i, e.j
                )));
            }
            if !e.alpha.is_finite() {
                return Err(Error::Domain(format!("edge ({}, {}) weight is not finite", e.i, e.j)));
            }
            if !seen.insert((e.i, e.j)) {
                return Err(Error::Contract(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
        }
        Ok(Self { n, unary, edges })
    }

    /// Potentials with no pairwise terms.
    pub fn separable(unary: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(unary.len(), unary, Vec::new())
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            unary: vec![[0.0; 2]; n],
            edges: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn unary(&self) -> &[[f64; 2]] {
        &self.unary
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// True iff every pairwise weight is non-negative.
    pub fn is_supermodular(&self) -> bool {
        self.edges.iter().all(|e| e.alpha >= 0.0)
    }

    /// Copy with `unary[i][b] += delta[i][b]`.
    pub fn with_unary_offset(&self, delta: &[[f64; 2]]) -> Result<Self> {
        if delta.len() != self.n {
            return Err(dim_err("unary offset rows", self.n, delta.len()));
        }
        let mut out = self.clone();
        for (u, d) in out.unary.iter_mut().zip(delta) {
            u[0] += d[0];
            u[1] += d[1];
        }
        Ok(out)
    }

    fn check_noise(&self, gamma: Option<&[f64]>) -> Result<()> {
        if let Some(g) = gamma {
            if g.len() != 2 * self.n {
                return Err(dim_err("structured noise length (2n)", 2 * self.n, g.len()));
            }
        }
        Ok(())
    }

    fn perturbed_unary(&self, gamma: Option<&[f64]>) -> Vec<[f64; 2]> {
        match gamma {
            None => self.unary.clone(),
            Some(g) => self
                .unary
                .iter()
                .enumerate()
                .map(|(i, u)| [u[0] + g[2 * i], u[1] + g[2 * i + 1]])
                .collect(),
        }
    }
}

/// A binary configuration `z = (z_1, ..., z_n)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment(Vec<u8>);

impl Assignment {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Domain("assignment bits must be 0 or 1".into()));
        }
        Ok(Self(bits))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Bits of `mask` read most-significant first, so increasing masks
    /// enumerate assignments in lexicographic order.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self((0..n).map(|i| ((mask >> (n - 1 - i)) & 1) as u8).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self, i: usize) -> Self {
        let mut b = self.0.clone();
        b[i] ^= 1;
        Self(b)
    }

    /// Two-hot decoder encoding `[1 - z_0, z_0, 1 - z_1, z_1, ...]`.
    pub fn two_hot(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|&b| if b == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect()
    }
}

fn score_bits(unary: &[[f64; 2]], edges: &[Edge], bits: &[u8]) -> f64 {
    let mut s = 0.0;
    for (u, &b) in unary.iter().zip(bits) {
        s += u[b as usize];
    }
    for e in edges {
        if bits[e.i] == 1 && bits[e.j] == 1 {
            s += e.alpha;
        }
    }
    s
}

/// Score of `z` under `p`, optionally Gumbel-perturbed per coordinate-state.
pub fn score(p: &PairwisePotentials, z: &Assignment, gamma: Option<&[f64]>) -> Result<f64> {
    if z.len() != p.n {
        return Err(dim_err("score assignment length", p.n, z.len()));
    }
    p.check_noise(gamma)?;
    Ok(score_bits(&p.perturbed_unary(gamma), &p.edges, z.bits()))
}

fn check_capacity(n: usize) -> Result<()> {
    if n > MAX_ENUM_VARS {
        return Err(Error::Capacity {
            what: "number of binary variables for enumeration",
            actual: n,
            limit: MAX_ENUM_VARS,
        });
    }
    Ok(())
}

/// Exhaustive MAP; ties resolve to the lexicographically smallest bits.
pub fn brute_force_map(p: &PairwisePotentials, gamma: Option<&[f64]>) -> Result<Assignment> {
    check_capacity(p.n)?;
    p.check_noise(gamma)?;
    let unary = p.perturbed_unary(gamma);
    let mut best = Assignment::zeros(p.n);
    let mut best_score = f64::NEG_INFINITY;
    for mask in 0..(1u64 << p.n) {
        let z = Assignment::from_mask(mask, p.n);
        let s = score_bits(&unary, &p.edges, z.bits());
        if s > best_score {
            best_score = s;
            best = z;
        }
    }
    Ok(best)
}

/// Exact MAP of supermodular potentials via s-t min-cut.
///
/// Variable `i` is node `i`; `z_i = 1` iff the node ends on the source side
/// of the minimal minimum cut.
pub fn maxflow_map(p: &PairwisePotentials, gamma: Option<&[f64]>) -> Result<Assignment> {
    if let Some(e) = p.edges.iter().find(|e| e.alpha < 0.0) {
        return Err(Error::Precondition(format!(
            "maxflow_map needs supermodular potentials but edge ({}, {}) has alpha = {}; \
             use brute_force_map for general pairwise weights",
            e.i, e.j, e.alpha
        )));
    }
    p.check_noise(gamma)?;
    let n = p.n;
    let unary = p.perturbed_unary(gamma);
    // Maximize sum_i c_i z_i - sum_(i,j) alpha z_i (1 - z_j) + const, using
    // alpha z_i z_j = alpha z_i - alpha z_i (1 - z_j).
    let mut gain: Vec<f64> = unary.iter().map(|u| u[1] - u[0]).collect();
    for e in &p.edges {
        gain[e.i] += e.alpha;
    }
    let (s, t) = (n, n + 1);
    let mut g = FlowGraph::new(n + 2);
    for (i, &c) in gain.iter().enumerate() {
        if c > 0.0 {
            // pay c when z_i = 0
            g.add_edge(s, i, c);
        } else if c < 0.0 {
            // pay -c when z_i = 1
            g.add_edge(i, t, -c);
        }
    }
    for e in &p.edges {
        // pay alpha when z_i = 1 and z_j = 0
        g.add_edge(e.i, e.j, e.alpha);
    }
    g.max_flow(s, t);
    let side = g.source_side(s);
    Ok(Assignment((0..n).map(|i| side[i] as u8).collect()))
}

/// MAP by the cheapest exact route: min-cut when supermodular, enumeration
/// otherwise.
pub fn structured_map(p: &PairwisePotentials, gamma: Option<&[f64]>) -> Result<Assignment> {
    if p.is_supermodular() {
        maxflow_map(p, gamma)
    } else {
        brute_force_map(p, gamma)
    }
}

/// `log sum_z exp(score(p, z))` by enumeration.
pub fn exact_log_partition(p: &PairwisePotentials) -> Result<f64> {
    check_capacity(p.n)?;
    let scores: Vec<f64> = (0..(1u64 << p.n))
        .map(|mask| score_bits(&p.unary, &p.edges, Assignment::from_mask(mask, p.n).bits()))
        .collect();
    Ok(log_sum_exp(&scores))
}

/// `KL(q || uniform)` for the Gibbs distribution `q ∝ exp(score)`, by
/// enumeration.
pub fn kl_to_uniform(p: &PairwisePotentials) -> Result<f64> {
    check_capacity(p.n)?;
    let scores: Vec<f64> = (0..(1u64 << p.n))
        .map(|mask| score_bits(&p.unary, &p.edges, Assignment::from_mask(mask, p.n).bits()))
        .collect();
    let lz = log_sum_exp(&scores);
    let mut kl = 0.0;
    for s in &scores {
        let lq = s - lz;
        kl += lq.exp() * lq;
    }
    Ok((kl + p.n as f64 * std::f64::consts::LN_2).max(0.0))
}

/// Indicator features of every assignment, one row per assignment in
/// lexicographic order. Columns are `2n` unary indicators (`2i + z_i`)
/// followed by one column per entry of `pairs` (`z_i z_j`), so
/// `features · [unary, alpha]` gives the score of each assignment.
pub fn enumeration_features(n: usize, pairs: &[(usize, usize)]) -> Result<Tensor> {
    check_capacity(n)?;
    let cols = 2 * n + pairs.len();
    let rows = 1usize << n;
    let mut data = vec![0.0; rows * cols];
    for mask in 0..rows {
        let z = Assignment::from_mask(mask as u64, n);
        let row = &mut data[mask * cols..(mask + 1) * cols];
        for (i, &b) in z.bits().iter().enumerate() {
            row[2 * i + b as usize] = 1.0;
        }
        for (e, &(i, j)) in pairs.iter().enumerate() {
            if z.bits()[i] == 1 && z.bits()[j] == 1 {
                row[2 * n + e] = 1.0;
            }
        }
    }
    Tensor::matrix(rows, cols, data)
}

/// Decoder log-likelihood `f(x, z) = -BCE(decoder(two_hot(z)), x)` for each
/// row of `latents` (already two-hot encoded) against the matching row of
/// `targets`.
pub(crate) fn decoder_log_likelihood(
    decoder: &MlpParams,
    latents: &Tensor,
    targets: &Tensor,
) -> Result<Vec<f64>> {
    let logits = decoder.forward(latents)?;
    if logits.cols() != targets.cols() || logits.rows() != targets.rows() {
        return Err(dim_err(
            "decoder output vs targets",
            format!("{:?}", targets.shape()),
            format!("{:?}", logits.shape()),
        ));
    }
    Ok((0..logits.rows())
        .map(|r| {
            -logits
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(&l, &t)| crate::tensor::bce_with_logits(l, t))
                .sum::<f64>()
        })
        .collect())
}

/// Per-coordinate decoder scores around `z_star`: entry `[i][b]` is
/// `f(x, z_star with coordinate i set to b)`. One batched decoder pass over
/// `z_star` and its `n` single-bit flips.
pub fn decoder_lowdim_approx(
    decoder: &MlpParams,
    x: &[f64],
    z_star: &Assignment,
) -> Result<Vec<[f64; 2]>> {
    let rows = lowdim_inputs(z_star);
    let latents = Tensor::from_rows(&rows)?;
    let targets = Tensor::from_rows(&vec![x; rows.len()])?;
    let f = decoder_log_likelihood(decoder, &latents, &targets)?;
    Ok(assemble_lowdim(z_star, &f))
}

/// Two-hot rows `[z*, flip_0(z*), ..., flip_{n-1}(z*)]`.
pub(crate) fn lowdim_inputs(z_star: &Assignment) -> Vec<Vec<f64>> {
    std::iter::once(z_star.two_hot())
        .chain((0..z_star.len()).map(|i| z_star.flipped(i).two_hot()))
        .collect()
}

/// Arrange `f = [f(z*), f(flip_0), ...]` into the `n x 2` table.
pub(crate) fn assemble_lowdim(z_star: &Assignment, f: &[f64]) -> Vec<[f64; 2]> {
    z_star
        .bits()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let mut row = [0.0; 2];
            row[b as usize] = f[0];
            row[1 - b as usize] = f[i + 1];
            row
        })
        .collect()
}

/// MAP of `p` with `unary[i][b] += eps * f_tilde[i][b]` under noise `gamma`.
pub fn structured_perturbed_argmax(
    p: &PairwisePotentials,
    f_tilde: &[[f64; 2]],
    eps: f64,
    gamma: Option<&[f64]>,
) -> Result<Assignment> {
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be >= 0, got {eps}")));
    }
    let delta: Vec<[f64; 2]> = f_tilde.iter().map(|r| [eps * r[0], eps * r[1]]).collect();
    structured_map(&p.with_unary_offset(&delta)?, gamma)
}
