//! Regular LDPC codes over GF(2): construction, encoding and sum-product
//! belief-propagation decoding on the binary symmetric channel.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::par;

/// Ones per column of every constructed parity-check matrix.
pub const COLUMN_WEIGHT: usize = 3;

/// Messages and posteriors are clamped to this magnitude.
const LLR_CLAMP: f64 = 30.0;

const COLUMN_RETRIES: usize = 200;
const RESTARTS: usize = 50;

#[derive(Debug, Error)]
pub enum LdpcError {
    #[error("need 3 <= n_checks < n, got n = {n}, n_checks = {n_checks}")]
    BadShape { n: usize, n_checks: usize },
    #[error("{n} weight-3 columns need {needed} distinct row pairs, only {available} exist with {n_checks} checks")]
    TooFewPairs {
        n: usize,
        n_checks: usize,
        needed: usize,
        available: usize,
    },
    #[error("could not build a 4-cycle-free matrix after {0} restarts")]
    ConstructionFailed(usize),
    #[error("parity-check matrix has rank 0")]
    RankDeficient,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid matrix: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse parity-check matrix `H` of shape `n_checks × n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityCheckMatrix {
    n: usize,
    /// Rows touched by each column, ascending.
    cols: Vec<Vec<usize>>,
    /// Columns touched by each row, ascending.
    rows: Vec<Vec<usize>>,
}

impl ParityCheckMatrix {
    /// Builds from column adjacency lists.
    pub fn from_columns(n_checks: usize, mut cols: Vec<Vec<usize>>) -> Result<Self, LdpcError> {
        let n = cols.len();
        let mut rows = vec![Vec::new(); n_checks];
        for (c, col) in cols.iter_mut().enumerate() {
            col.sort_unstable();
            col.dedup();
            for &r in col.iter() {
                if r >= n_checks {
                    return Err(LdpcError::Invalid(format!("row {r} out of range in column {c}")));
                }
                rows[r].push(c);
            }
        }
        Ok(Self { n, cols, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_checks(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    pub fn column(&self, c: usize) -> &[usize] {
        &self.cols[c]
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn column_weights(&self) -> Vec<usize> {
        self.cols.iter().map(Vec::len).collect()
    }

    pub fn row_weights(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    /// `true` if no two columns share more than one row.
    pub fn is_four_cycle_free(&self) -> bool {
        let mut pairs = HashSet::new();
        for col in &self.cols {
            for (i, &a) in col.iter().enumerate() {
                for &b in &col[i + 1..] {
                    if !pairs.insert((a, b)) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// `H · bitsᵀ` over GF(2).
    pub fn syndrome(&self, bits: &[u8]) -> Vec<u8> {
        self.rows
            .iter()
            .map(|row| row.iter().fold(0u8, |acc, &c| acc ^ bits[c]))
            .collect()
    }

    pub fn is_codeword(&self, bits: &[u8]) -> bool {
        bits.len() == self.n
            && self
                .rows
                .iter()
                .all(|row| row.iter().fold(0u8, |acc, &c| acc ^ bits[c]) == 0)
    }

    /// Coordinate list: header `n n_checks nnz`, then one `row col` pair
    /// per line (0-indexed, column-major order).
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.n, self.n_checks(), self.nnz())?;
        for (c, col) in self.cols.iter().enumerate() {
            for &r in col {
                writeln!(w, "{r} {c}")?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.n, self.n_checks(), self.nnz());
        for (c, col) in self.cols.iter().enumerate() {
            for &r in col {
                let _ = writeln!(s, "{r} {c}");
            }
        }
        s
    }

    pub fn read_text(r: impl BufRead) -> Result<Self, LdpcError> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let parse_nums = |line: usize, s: &str, want: usize| -> Result<Vec<usize>, LdpcError> {
            let v: Result<Vec<usize>, _> = s.split_whitespace().map(str::parse).collect();
            match v {
                Ok(v) if v.len() == want => Ok(v),
                _ => Err(LdpcError::Parse {
                    line,
                    reason: format!("expected {want} non-negative integers, got {s:?}"),
                }),
            }
        };
        let (hl, header) = lines.next().ok_or(LdpcError::Parse {
            line: 1,
            reason: "missing header".into(),
        })?;
        let header = parse_nums(hl + 1, &header?, 3)?;
        let (n, n_checks, nnz) = (header[0], header[1], header[2]);
        let mut cols = vec![Vec::new(); n];
        let mut count = 0;
        for (i, line) in lines {
            let v = parse_nums(i + 1, &line?, 2)?;
            let (r, c) = (v[0], v[1]);
            if c >= n || r >= n_checks {
                return Err(LdpcError::Parse {
                    line: i + 1,
                    reason: format!("entry ({r}, {c}) outside {n_checks} x {n}"),
                });
            }
            cols[c].push(r);
            count += 1;
        }
        if count != nnz {
            return Err(LdpcError::Parse {
                line: 1,
                reason: format!("header promises {nnz} entries, found {count}"),
            });
        }
        Self::from_columns(n_checks, cols)
    }
}

/// Builds a regular column-weight-3 matrix without 4-cycles.
///
/// Each column takes 3 distinct rows drawn uniformly from the currently
/// lightest rows; a column that would close a 4-cycle is redrawn, widening
/// the candidate pool after repeated failures. If a column cannot be placed
/// the whole construction restarts with fresh randomness.
pub fn make_parity_check<R: Rng + ?Sized>(
    n: usize,
    n_checks: usize,
    rng: &mut R,
) -> Result<ParityCheckMatrix, LdpcError> {
    if n_checks < COLUMN_WEIGHT || n_checks >= n {
        return Err(LdpcError::BadShape { n, n_checks });
    }
    // Every column claims 3 row pairs and no pair may be claimed twice.
    let needed = 3 * n;
    let available = n_checks * (n_checks - 1) / 2;
    if needed > available {
        return Err(LdpcError::TooFewPairs {
            n,
            n_checks,
            needed,
            available,
        });
    }
    'restart: for _ in 0..RESTARTS {
        let mut weights = vec![0usize; n_checks];
        let mut used_pairs: HashSet<(usize, usize)> = HashSet::new();
        let mut cols = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = None;
            for attempt in 0..COLUMN_RETRIES {
                let slack = 1 + attempt / 40;
                let min = *weights.iter().min().unwrap();
                let mut pool: Vec<usize> = (0..n_checks).filter(|&r| weights[r] < min + slack).collect();
                if pool.len() < COLUMN_WEIGHT {
                    // Not enough light rows: fall back to the next tier.
                    pool = (0..n_checks).filter(|&r| weights[r] <= min + slack).collect();
                }
                if pool.len() < COLUMN_WEIGHT {
                    pool = (0..n_checks).collect();
                }
                let mut pick: Vec<usize> = pool.choose_multiple(rng, COLUMN_WEIGHT).copied().collect();
                pick.sort_unstable();
                let pairs = [(pick[0], pick[1]), (pick[0], pick[2]), (pick[1], pick[2])];
                if pairs.iter().all(|p| !used_pairs.contains(p)) {
                    used_pairs.extend(pairs);
                    placed = Some(pick);
                    break;
                }
            }
            let Some(col) = placed else {
                continue 'restart;
            };
            for &r in &col {
                weights[r] += 1;
            }
            cols.push(col);
        }
        return ParityCheckMatrix::from_columns(n_checks, cols);
    }
    Err(LdpcError::ConstructionFailed(RESTARTS))
}

/// Dense GF(2) row stored as 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn zeros(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn xor_assign(&mut self, other: &BitRow) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a ^= b;
        }
    }
}

/// Dense systematic generator matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorMatrix {
    n: usize,
    /// `k` rows of length `n`.
    rows: Vec<Vec<u8>>,
    /// Codeword positions that carry the message bits, in message order.
    message_positions: Vec<usize>,
    rank: usize,
}

impl GeneratorMatrix {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Rank of the parity-check matrix it was derived from.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn message_positions(&self) -> &[usize] {
        &self.message_positions
    }

    /// Reads the message back out of a codeword.
    pub fn extract(&self, codeword: &[u8]) -> Vec<u8> {
        self.message_positions.iter().map(|&p| codeword[p]).collect()
    }
}

/// Systematic generator via Gaussian elimination of `H`. Dependent rows of
/// `H` are dropped, so `k = n − rank(H)`.
pub fn make_generator(h: &ParityCheckMatrix) -> Result<GeneratorMatrix, LdpcError> {
    let n = h.n();
    let mut rows: Vec<BitRow> = (0..h.n_checks())
        .map(|r| {
            let mut row = BitRow::zeros(n);
            for &c in h.row(r) {
                row.set(c);
            }
            row
        })
        .collect();
    // Reduced row echelon form; pivots[i] is the pivot column of row i.
    let mut pivots = Vec::new();
    let mut next = 0;
    for col in 0..n {
        if next == rows.len() {
            break;
        }
        let Some(found) = (next..rows.len()).find(|&r| rows[r].get(col)) else {
            continue;
        };
        rows.swap(next, found);
        let pivot = rows[next].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != next && row.get(col) {
                row.xor_assign(&pivot);
            }
        }
        pivots.push(col);
        next += 1;
    }
    let rank = pivots.len();
    if rank == 0 {
        return Err(LdpcError::RankDeficient);
    }
    rows.truncate(rank);
    let is_pivot = {
        let mut v = vec![false; n];
        pivots.iter().for_each(|&p| v[p] = true);
        v
    };
    let free: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    // For a codeword c: c[pivot_i] = Σ_{f free} R[i][f] c[f].
    let gen_rows = free
        .iter()
        .map(|&f| {
            let mut g = vec![0u8; n];
            g[f] = 1;
            for (i, &p) in pivots.iter().enumerate() {
                if rows[i].get(f) {
                    g[p] = 1;
                }
            }
            g
        })
        .collect();
    Ok(GeneratorMatrix {
        n,
        rows: gen_rows,
        message_positions: free,
        rank,
    })
}

/// `message · G` over GF(2).
pub fn ldpc_encode(g: &GeneratorMatrix, message: &[u8]) -> Result<Vec<u8>, LdpcError> {
    if message.len() != g.k() {
        return Err(LdpcError::LengthMismatch {
            expected: g.k(),
            got: message.len(),
        });
    }
    let mut out = vec![0u8; g.n()];
    for (row, &bit) in g.rows().iter().zip(message) {
        if bit & 1 == 1 {
            out.iter_mut().zip(row).for_each(|(o, r)| *o ^= r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    pub decoded: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
    /// Posterior LLRs, `ln P(0)/P(1)`.
    pub posterior: Vec<f64>,
}

/// Tanner-graph edge layout shared across decodes of the same code.
#[derive(Debug, Clone)]
pub struct BpDecoder<'a> {
    h: &'a ParityCheckMatrix,
    /// Edge ids per check, in row order.
    check_edges: Vec<Vec<usize>>,
    /// Edge ids per variable.
    var_edges: Vec<Vec<usize>>,
    /// Variable index of each edge.
    edge_var: Vec<usize>,
}

impl<'a> BpDecoder<'a> {
    pub fn new(h: &'a ParityCheckMatrix) -> Self {
        let mut check_edges = vec![Vec::new(); h.n_checks()];
        let mut var_edges = vec![Vec::new(); h.n()];
        let mut edge_var = Vec::with_capacity(h.nnz());
        for r in 0..h.n_checks() {
            for &c in h.row(r) {
                let e = edge_var.len();
                edge_var.push(c);
                check_edges[r].push(e);
                var_edges[c].push(e);
            }
        }
        Self {
            h,
            check_edges,
            var_edges,
            edge_var,
        }
    }

    /// Flooding sum-product decode of a hard-decision BSC output.
    pub fn decode(&self, received: &[u8], epsilon: f64, max_iters: usize) -> BpResult {
        assert_eq!(received.len(), self.h.n(), "received length");
        if epsilon <= 0.0 {
            let converged = self.h.is_codeword(received);
            return BpResult {
                decoded: received.to_vec(),
                converged,
                iterations: 0,
                posterior: received
                    .iter()
                    .map(|&b| if b == 0 { LLR_CLAMP } else { -LLR_CLAMP })
                    .collect(),
            };
        }
        let mag = ((1.0 - epsilon) / epsilon).ln().clamp(-LLR_CLAMP, LLR_CLAMP);
        let channel: Vec<f64> = received.iter().map(|&b| if b == 0 { mag } else { -mag }).collect();
        let n_edges = self.edge_var.len();
        let mut v2c: Vec<f64> = self.edge_var.iter().map(|&v| channel[v]).collect();
        let mut c2v = vec![0.0; n_edges];
        let mut tanh_buf = Vec::new();
        let mut posterior = channel.clone();
        let mut decoded = received.to_vec();
        let mut iterations = 0;
        let mut converged = false;

        while iterations < max_iters {
            iterations += 1;
            // check update
            for edges in &self.check_edges {
                tanh_buf.clear();
                tanh_buf.extend(edges.iter().map(|&e| (0.5 * v2c[e]).tanh()));
                for (i, &e) in edges.iter().enumerate() {
                    let prod: f64 = tanh_buf
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, t)| t)
                        .product();
                    let prod = prod.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                    c2v[e] = (2.0 * prod.atanh()).clamp(-LLR_CLAMP, LLR_CLAMP);
                }
            }
            // variable update and tentative decision
            for (v, edges) in self.var_edges.iter().enumerate() {
                let total = channel[v] + edges.iter().map(|&e| c2v[e]).sum::<f64>();
                posterior[v] = total.clamp(-LLR_CLAMP, LLR_CLAMP);
                for &e in edges {
                    v2c[e] = (total - c2v[e]).clamp(-LLR_CLAMP, LLR_CLAMP);
                }
                decoded[v] = match posterior[v] {
                    l if l > 0.0 => 0,
                    l if l < 0.0 => 1,
                    _ => received[v],
                };
            }
            if self.h.is_codeword(&decoded) {
                converged = true;
                break;
            }
        }
        BpResult {
            decoded,
            converged,
            iterations,
            posterior,
        }
    }
}

/// Convenience wrapper around [`BpDecoder::decode`].
pub fn bp_decode(h: &ParityCheckMatrix, received: &[u8], epsilon: f64, max_iters: usize) -> BpResult {
    BpDecoder::new(h).decode(received, epsilon, max_iters)
}

/// A parity-check matrix together with its generator.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    pub h: ParityCheckMatrix,
    pub g: GeneratorMatrix,
}

impl LdpcCode {
    pub fn new<R: Rng + ?Sized>(n: usize, n_checks: usize, rng: &mut R) -> Result<Self, LdpcError> {
        let h = make_parity_check(n, n_checks, rng)?;
        let g = make_generator(&h)?;
        Ok(Self { h, g })
    }
}

/// Aggregate of a Monte Carlo BER run.
#[derive(Debug, Clone, PartialEq)]
pub struct BerStats {
    pub trials: usize,
    /// Fraction of message bits flipped by the channel.
    pub raw_ber: f64,
    /// Fraction of message bits wrong after decoding.
    pub decoded_ber: f64,
    /// Fraction of codewords not decoded exactly.
    pub frame_error_rate: f64,
    pub mean_iterations: f64,
}

/// Sends `trials` random messages through a BSC and decodes them. Trial `t`
/// uses RNG stream `t` of `seed`, so the result does not depend on the
/// thread count.
pub fn simulate_ber(code: &LdpcCode, epsilon: f64, max_iters: usize, trials: usize, seed: u64) -> BerStats {
    let decoder = BpDecoder::new(&code.h);
    let k = code.g.k();
    let per_trial = par::map_range(trials, |t| {
        let mut rng = par::stream_rng(seed, t as u64);
        let msg: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
        let cw = ldpc_encode(&code.g, &msg).expect("message length");
        let rx: Vec<u8> = cw
            .iter()
            .map(|&b| b ^ u8::from(rng.random::<f64>() < epsilon))
            .collect();
        let res = decoder.decode(&rx, epsilon, max_iters);
        let raw = code.g.extract(&rx);
        let out = code.g.extract(&res.decoded);
        let raw_err = raw.iter().zip(&msg).filter(|(a, b)| a != b).count();
        let dec_err = out.iter().zip(&msg).filter(|(a, b)| a != b).count();
        (raw_err, dec_err, res.decoded != cw, res.iterations)
    });
    let bits = (trials * k).max(1) as f64;
    let (raw, dec, frames, iters) = per_trial.iter().fold((0, 0, 0, 0), |acc, &(r, d, f, i)| {
        (acc.0 + r, acc.1 + d, acc.2 + usize::from(f), acc.3 + i)
    });
    BerStats {
        trials,
        raw_ber: raw as f64 / bits,
        decoded_ber: dec as f64 / bits,
        frame_error_rate: frames as f64 / trials.max(1) as f64,
        mean_iterations: iters as f64 / trials.max(1) as f64,
    }
}
