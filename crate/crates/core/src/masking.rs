//! Mask plans (which tokens are hidden from the encoder) and decoder
//! visibility matrices for the four decoding strategies, plus a brute-force
//! oracle that rebuilds each matrix from the conditioning-set definitions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::rng::MapRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Sequential,
    Diagonal,
}

impl std::str::FromStr for MaskStrategy {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "sequential" => Ok(MaskStrategy::Sequential),
            "diagonal" => Ok(MaskStrategy::Diagonal),
            _ => Err(MapError::Usage(format!(
                "unknown mask strategy `{}` (random|sequential|diagonal)",
                s
            ))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Sequential => "sequential",
            MaskStrategy::Diagonal => "diagonal",
        };
        write!(f, "{}", s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderStrategy {
    Ar,
    Mae,
    LocalMae,
    Map,
}

impl std::str::FromStr for DecoderStrategy {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(DecoderStrategy::Ar),
            "mae" => Ok(DecoderStrategy::Mae),
            "local_mae" => Ok(DecoderStrategy::LocalMae),
            "map" => Ok(DecoderStrategy::Map),
            _ => Err(MapError::Usage(format!(
                "unknown decoder strategy `{}` (ar|mae|local_mae|map)",
                s
            ))),
        }
    }
}

impl std::fmt::Display for DecoderStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DecoderStrategy::Ar => "ar",
            DecoderStrategy::Mae => "mae",
            DecoderStrategy::LocalMae => "local_mae",
            DecoderStrategy::Map => "map",
        };
        write!(f, "{}", s)
    }
}

/// Per-row masked index sets M_i over an M x N token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub rows: usize,
    pub cols: usize,
    /// Sorted column indices masked in each row.
    pub masked: Vec<Vec<usize>>,
    pub ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Build a mask plan. Random samples uniformly without replacement over all
/// M*N positions; sequential masks the last round(ratio*N) columns of every
/// row; diagonal walks wrapped diagonals until the global quota is met.
pub fn build_mask_plan(
    rows: usize,
    cols: usize,
    ratio: f64,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MapError::Contract(format!(
            "mask ratio {} outside [0,1]",
            ratio
        )));
    }
    let total = rows * cols;
    let mut masked = vec![Vec::new(); rows];
    match strategy {
        MaskStrategy::Random => {
            let quota = round_half_up(ratio * total as f64);
            let mut rng = MapRng::seed_from_u64(seed);
            let picks = rand::seq::index::sample(&mut rng, total, quota);
            for p in picks {
                masked[p / cols].push(p % cols);
            }
        }
        MaskStrategy::Sequential => {
            let per_row = round_half_up(ratio * cols as f64).min(cols);
            for row in masked.iter_mut() {
                row.extend(cols - per_row..cols);
            }
        }
        MaskStrategy::Diagonal => {
            let quota = round_half_up(ratio * total as f64);
            let mut placed = 0;
            'outer: for d in 0..cols {
                for i in 0..rows {
                    if placed == quota {
                        break 'outer;
                    }
                    masked[i].push((i + d) % cols);
                    placed += 1;
                }
            }
        }
    }
    for row in masked.iter_mut() {
        row.sort_unstable();
    }
    Ok(MaskPlan {
        rows,
        cols,
        masked,
        ratio,
        strategy,
        seed,
    })
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_masked(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row].binary_search(&col).is_ok()
    }

    /// Flat row-major mask over the scan sequence, true = masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut out = vec![false; self.len()];
        for (i, row) in self.masked.iter().enumerate() {
            for &j in row {
                out[i * self.cols + j] = true;
            }
        }
        out
    }
}

/// Boolean query x key attention mask over the flattened token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub strategy: DecoderStrategy,
    /// L*L entries, row-major; entry (q,k) true iff q may attend to k.
    allowed: Vec<bool>,
}

impl VisibilityMatrix {
    pub fn seq_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.seq_len() + k]
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.allowed
    }

    /// Mutable access, used only by fault-injection tests.
    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        let l = self.seq_len();
        self.allowed[q * l + k] = value;
    }

    /// CSV of 0/1, one row per query token.
    pub fn to_csv(&self) -> String {
        let l = self.seq_len();
        let mut out = String::new();
        for q in 0..l {
            let row: Vec<&str> = (0..l)
                .map(|k| if self.allowed[q * l + k] { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain PBM (P1); 1 = allowed pair.
    pub fn to_pbm(&self) -> String {
        let l = self.seq_len();
        let mut out = format!("P1\n{} {}\n", l, l);
        for q in 0..l {
            let row: Vec<&str> = (0..l)
                .map(|k| if self.allowed[q * l + k] { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Direct construction of the visibility matrix for a decoder strategy.
///
/// `map_self_visible` keeps (q,q) allowed for masked MAP queries so the query
/// slot carries its positional embedding through the decoder.
pub fn build_visibility(
    plan: &MaskPlan,
    strategy: DecoderStrategy,
    map_self_visible: bool,
) -> VisibilityMatrix {
    let l = plan.len();
    let n = plan.cols;
    let mut allowed = vec![false; l * l];
    for q in 0..l {
        let qr = q / n;
        for k in 0..l {
            let kr = k / n;
            let ok = match strategy {
                DecoderStrategy::Ar => k <= q,
                DecoderStrategy::Mae => true,
                DecoderStrategy::LocalMae => kr == qr,
                DecoderStrategy::Map => {
                    kr < qr
                        || (kr == qr
                            && (!plan.is_masked(kr, k % n) || (map_self_visible && k == q)))
                }
            };
            allowed[q * l + k] = ok;
        }
    }
    VisibilityMatrix {
        rows: plan.rows,
        cols: plan.cols,
        strategy,
        allowed,
    }
}

/// Test oracle: rebuilds each query's conditioning set by explicit
/// enumeration (previous rows, then unmasked same-row tokens, then self),
/// independently of the closed-form predicate in `build_visibility`.
pub fn oracle_visibility(
    plan: &MaskPlan,
    strategy: DecoderStrategy,
    map_self_visible: bool,
) -> VisibilityMatrix {
    let l = plan.len();
    let n = plan.cols;
    let mut allowed = vec![false; l * l];
    for q in 0..l {
        let qr = q / n;
        let mut set: BTreeSet<usize> = BTreeSet::new();
        match strategy {
            DecoderStrategy::Ar => {
                set.extend(0..=q);
            }
            DecoderStrategy::Mae => {
                set.extend(0..l);
            }
            DecoderStrategy::LocalMae => {
                set.extend(qr * n..(qr + 1) * n);
            }
            DecoderStrategy::Map => {
                set.extend(0..qr * n);
                for j in 0..n {
                    if !plan.is_masked(qr, j) {
                        set.insert(qr * n + j);
                    }
                }
                if map_self_visible {
                    set.insert(q);
                }
            }
        }
        for k in set {
            allowed[q * l + k] = true;
        }
    }
    VisibilityMatrix {
        rows: plan.rows,
        cols: plan.cols,
        strategy,
        allowed,
    }
}

/// Enumerate every distinct mask plan over an M x N grid (each position
/// independently masked or not), for exhaustive small-instance sweeps.
pub fn enumerate_plans(rows: usize, cols: usize) -> impl Iterator<Item = MaskPlan> {
    let total = rows * cols;
    assert!(total <= 20, "exhaustive enumeration only for tiny grids");
    (0u32..1 << total).map(move |bits| {
        let mut masked = vec![Vec::new(); rows];
        for p in 0..total {
            if bits >> p & 1 == 1 {
                masked[p / cols].push(p % cols);
            }
        }
        let count: usize = masked.iter().map(Vec::len).sum();
        MaskPlan {
            rows,
            cols,
            masked,
            ratio: count as f64 / total as f64,
            strategy: MaskStrategy::Random,
            seed: 0,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_half_on_4x4() {
        let plan = build_mask_plan(4, 4, 0.5, MaskStrategy::Random, 1).unwrap();
        assert_eq!(plan.total_masked(), 8);
    }

    #[test]
    fn ratio_zero_empty_plan() {
        for strat in [
            MaskStrategy::Random,
            MaskStrategy::Sequential,
            MaskStrategy::Diagonal,
        ] {
            let plan = build_mask_plan(4, 4, 0.0, strat, 1).unwrap();
            assert_eq!(plan.total_masked(), 0);
        }
    }

    #[test]
    fn ratio_one_masks_everything() {
        for strat in [
            MaskStrategy::Random,
            MaskStrategy::Sequential,
            MaskStrategy::Diagonal,
        ] {
            let plan = build_mask_plan(3, 5, 1.0, strat, 1).unwrap();
            assert_eq!(plan.total_masked(), 15);
        }
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        assert!(build_mask_plan(4, 4, 1.5, MaskStrategy::Random, 1).is_err());
        assert!(build_mask_plan(4, 4, -0.1, MaskStrategy::Random, 1).is_err());
    }

    #[test]
    fn sequential_is_raster_suffix() {
        let plan = build_mask_plan(2, 4, 0.5, MaskStrategy::Sequential, 3).unwrap();
        assert_eq!(plan.masked, vec![vec![2, 3], vec![2, 3]]);
    }

    #[test]
    fn diagonal_wraps() {
        let plan = build_mask_plan(3, 3, 4.0 / 9.0, MaskStrategy::Diagonal, 0).unwrap();
        // quota = round(4) = 4: main diagonal then first cell of diagonal 1
        assert_eq!(plan.masked, vec![vec![0, 1], vec![1], vec![2]]);
    }

    #[test]
    fn plans_deterministic_per_seed() {
        let a = build_mask_plan(8, 8, 0.5, MaskStrategy::Random, 7).unwrap();
        let b = build_mask_plan(8, 8, 0.5, MaskStrategy::Random, 7).unwrap();
        let c = build_mask_plan(8, 8, 0.5, MaskStrategy::Random, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn random_inclusion_frequency_within_3_sigma() {
        let (m, n, ratio, draws) = (8, 8, 0.5, 10_000usize);
        let mut counts = vec![0usize; m * n];
        for seed in 0..draws as u64 {
            let plan = build_mask_plan(m, n, ratio, MaskStrategy::Random, seed).unwrap();
            for (flag, c) in plan.flags().iter().zip(counts.iter_mut()) {
                if *flag {
                    *c += 1;
                }
            }
        }
        let sigma = (ratio * (1.0 - ratio) / draws as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - ratio).abs() <= 3.0 * sigma,
                "inclusion freq {} outside {} +- 3*{}",
                freq,
                ratio,
                sigma
            );
        }
    }

    #[test]
    fn map_visibility_hand_case() {
        // 2x2 grid, masked {row0: {1}, row1: {0}} i.e. tokens 1 and 2 masked.
        let plan = MaskPlan {
            rows: 2,
            cols: 2,
            masked: vec![vec![1], vec![0]],
            ratio: 0.5,
            strategy: MaskStrategy::Random,
            seed: 0,
        };
        let vis = build_visibility(&plan, DecoderStrategy::Map, true);
        // per query: all previous rows, plus same-row unmasked keys, plus self
        let expect: [&[usize]; 4] = [&[0], &[0, 1], &[0, 1, 2, 3], &[0, 1, 3]];
        for (q, want) in expect.iter().enumerate() {
            for k in 0..4 {
                assert_eq!(
                    vis.allowed(q, k),
                    want.contains(&k),
                    "(q,k)=({},{})",
                    q,
                    k
                );
            }
        }
    }

    #[test]
    fn map_with_empty_plan_is_row_block_causal() {
        let plan = build_mask_plan(3, 3, 0.0, MaskStrategy::Random, 0).unwrap();
        let vis = build_visibility(&plan, DecoderStrategy::Map, true);
        for q in 0..9 {
            for k in 0..9 {
                assert_eq!(vis.allowed(q, k), k / 3 <= q / 3);
            }
        }
    }

    #[test]
    fn mae_is_all_true() {
        let plan = build_mask_plan(2, 3, 0.5, MaskStrategy::Random, 5).unwrap();
        let vis = build_visibility(&plan, DecoderStrategy::Mae, true);
        assert!(vis.as_bools().iter().all(|&a| a));
    }

    #[test]
    fn ar_oracle_is_lower_triangular() {
        let plan = build_mask_plan(2, 2, 0.5, MaskStrategy::Random, 5).unwrap();
        let vis = oracle_visibility(&plan, DecoderStrategy::Ar, true);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(vis.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn oracle_matches_builder_exhaustive_2x2() {
        for plan in enumerate_plans(2, 2) {
            for strat in [
                DecoderStrategy::Ar,
                DecoderStrategy::Mae,
                DecoderStrategy::LocalMae,
                DecoderStrategy::Map,
            ] {
                for self_vis in [true, false] {
                    assert_eq!(
                        build_visibility(&plan, strat, self_vis),
                        oracle_visibility(&plan, strat, self_vis),
                        "plan {:?} strat {:?}",
                        plan.masked,
                        strat
                    );
                }
            }
        }
    }

    #[test]
    fn map_never_sees_future_rows() {
        for seed in 0..20 {
            let plan = build_mask_plan(4, 4, 0.5, MaskStrategy::Random, seed).unwrap();
            let vis = build_visibility(&plan, DecoderStrategy::Map, true);
            for q in 0..16 {
                for k in 0..16 {
                    if k / 4 > q / 4 {
                        assert!(!vis.allowed(q, k));
                    }
                }
            }
        }
    }

    #[test]
    fn strategy_lattice_containment() {
        // AR ⊂ MAE pointwise; localMAE is MAE restricted to within-row pairs.
        let plan = build_mask_plan(3, 4, 0.4, MaskStrategy::Random, 2).unwrap();
        let ar = build_visibility(&plan, DecoderStrategy::Ar, true);
        let mae = build_visibility(&plan, DecoderStrategy::Mae, true);
        let local = build_visibility(&plan, DecoderStrategy::LocalMae, true);
        let l = plan.len();
        for q in 0..l {
            for k in 0..l {
                if ar.allowed(q, k) {
                    assert!(mae.allowed(q, k));
                }
                assert_eq!(local.allowed(q, k), mae.allowed(q, k) && k / 4 == q / 4);
            }
        }
    }

    #[test]
    fn csv_and_pbm_shapes() {
        let plan = build_mask_plan(2, 2, 0.5, MaskStrategy::Random, 1).unwrap();
        let vis = build_visibility(&plan, DecoderStrategy::Map, true);
        let csv = vis.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 4);
        let pbm = vis.to_pbm();
        assert!(pbm.starts_with("P1\n4 4\n"));
    }
}
