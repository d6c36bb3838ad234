//! Sparse LU factorization of a simplex basis with partial pivoting,
//! column-at-a-time (Gilbert-Peierls style), plus sparse triangular
//! solves. Row pivoting is recorded as a permutation `row -> position`;
//! basis slot `j` is eliminated in step `j`, so position `j` of a solve
//! corresponds to basis slot `j`.

/// Workspace-backed sparse vector: dense values plus the list of touched
/// positions. Values of untouched positions are zero.
pub struct WorkVec {
    pub vals: Vec<f64>,
    pub touched: Vec<usize>,
    pub seen: Vec<bool>,
}

impl WorkVec {
    pub fn new(m: usize) -> Self {
        Self {
            vals: vec![0.0; m],
            touched: Vec::new(),
            seen: vec![false; m],
        }
    }

    pub fn clear(&mut self) {
        for &p in &self.touched {
            self.vals[p] = 0.0;
            self.seen[p] = false;
        }
        self.touched.clear();
    }

    pub fn add(&mut self, pos: usize, val: f64) {
        if !self.seen[pos] {
            self.seen[pos] = true;
            self.touched.push(pos);
        }
        self.vals[pos] += val;
    }

    pub fn set(&mut self, pos: usize, val: f64) {
        if !self.seen[pos] {
            self.seen[pos] = true;
            self.touched.push(pos);
        }
        self.vals[pos] = val;
    }
}

#[derive(Debug)]
pub enum LuError {
    /// No acceptable pivot found for this basis slot.
    Singular { slot: usize },
}

pub struct LuFactors {
    m: usize,
    /// Column `p` of unit-lower L: entries `(q, v)` with `q > p`.
    l_cols: Vec<Vec<(usize, f64)>>,
    /// Column `p` of U above the diagonal: entries `(q, v)` with `q < p`.
    u_cols: Vec<Vec<(usize, f64)>>,
    u_diag: Vec<f64>,
    /// Row-wise views for transposed solves.
    l_rows: Vec<Vec<(usize, f64)>>,
    u_rows: Vec<Vec<(usize, f64)>>,
    /// Original row -> elimination position.
    pub row_pos: Vec<usize>,
    /// Elimination position -> basis slot (column order used internally).
    col_of_pos: Vec<usize>,
    /// Basis slot -> elimination position.
    pos_of_col: Vec<usize>,
}

impl LuFactors {
    /// Factorize the matrix given column-wise in original row indices.
    /// Right-looking elimination with Markowitz pivoting: each step picks a
    /// pivot of near-minimal `(row_count-1)*(col_count-1)` among entries
    /// that pass a relative stability threshold. Slack-heavy simplex bases
    /// are mostly singletons, so fill-in stays close to zero.
    pub fn factorize(m: usize, cols: &[Vec<(usize, f64)>]) -> Result<Self, LuError> {
        assert_eq!(cols.len(), m);
        // Active submatrix, row-wise; rows hold exact active entries. The
        // column->rows index and the count buckets are lazy: entries are
        // re-validated against the row data when read, stale ones dropped.
        let mut rows_a: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut col_count = vec![0usize; m];
        for (j, col) in cols.iter().enumerate() {
            for &(r, v) in col {
                if v != 0.0 {
                    rows_a[r].push((j, v));
                    col_rows[j].push(r);
                    col_count[j] += 1;
                }
            }
        }
        let mut col_done = vec![false; m];
        let mut row_done = vec![false; m];
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
        for j in 0..m {
            buckets[col_count[j]].push(j);
        }

        let mut l_cols_orig: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
        let mut u_by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m]; // (pos, val)
        let mut u_diag = vec![0.0; m];
        let mut row_pos = vec![usize::MAX; m];
        let mut order: Vec<usize> = Vec::with_capacity(m);
        let val_of = |rows_a: &[Vec<(usize, f64)>], r: usize, j: usize| -> Option<f64> {
            rows_a[r].iter().find(|&&(c, _)| c == j).map(|&(_, v)| v)
        };

        for k in 0..m {
            // Pivot search: best Markowitz score over the two smallest
            // nonempty count buckets, entries within 10x of the column max.
            let mut best: Option<(usize, usize, f64, usize)> = None; // (row, col, val, score)
            let mut seen_buckets = 0;
            'search: for c in 0..=m {
                let mut idx = 0;
                let mut valid_here = 0usize;
                while idx < buckets[c].len() {
                    let j = buckets[c][idx];
                    if col_done[j] || col_count[j] != c {
                        buckets[c].swap_remove(idx);
                        continue;
                    }
                    if c == 0 {
                        return Err(LuError::Singular { slot: j });
                    }
                    valid_here += 1;
                    idx += 1;
                    let mut col_max = 0.0f64;
                    for &r in &col_rows[j] {
                        if !row_done[r] {
                            if let Some(v) = val_of(&rows_a, r, j) {
                                col_max = col_max.max(v.abs());
                            }
                        }
                    }
                    if col_max < 1e-12 {
                        return Err(LuError::Singular { slot: j });
                    }
                    for i in 0..col_rows[j].len() {
                        let r = col_rows[j][i];
                        if row_done[r] {
                            continue;
                        }
                        let Some(v) = val_of(&rows_a, r, j) else {
                            continue;
                        };
                        if v.abs() < 0.1 * col_max {
                            continue;
                        }
                        let score = (rows_a[r].len() - 1) * (c - 1);
                        let better = match best {
                            None => true,
                            Some((br, bj, bv, bs)) => {
                                score < bs
                                    || (score == bs
                                        && (v.abs() > bv.abs()
                                            || (v.abs() == bv.abs() && (j, r) < (bj, br))))
                            }
                        };
                        if better {
                            best = Some((r, j, v, score));
                        }
                    }
                    // A zero score cannot be beaten; eight candidates are
                    // plenty. Unscanned entries stay for later steps.
                    if best.map_or(false, |(.., s)| s == 0) || valid_here >= 8 {
                        break;
                    }
                }
                if valid_here > 0 {
                    seen_buckets += 1;
                    if seen_buckets >= 2 || best.map_or(false, |(.., s)| s == 0) {
                        break 'search;
                    }
                }
            }
            let (piv_row, piv_col, piv_val, _) = best.ok_or(LuError::Singular { slot: k })?;

            row_pos[piv_row] = k;
            row_done[piv_row] = true;
            order.push(piv_col);
            col_done[piv_col] = true;
            u_diag[k] = piv_val;

            // Detach the pivot row and column from the active structure.
            let pivot_row: Vec<(usize, f64)> = rows_a[piv_row]
                .iter()
                .filter(|&&(c, _)| c != piv_col)
                .copied()
                .collect();
            rows_a[piv_row].clear();
            for &(c, _) in &pivot_row {
                col_count[c] -= 1;
                buckets[col_count[c]].push(c);
            }
            // Deleted-and-refilled entries can list a row twice.
            let mut elim_rows: Vec<usize> = Vec::new();
            for i in 0..col_rows[piv_col].len() {
                let r = col_rows[piv_col][i];
                if !row_done[r] && val_of(&rows_a, r, piv_col).is_some() {
                    elim_rows.push(r);
                }
            }
            elim_rows.sort_unstable();
            elim_rows.dedup();
            col_rows[piv_col].clear();
            // U entries: remaining pivot-row values, keyed by column for now.
            for &(c, v) in &pivot_row {
                u_by_col[c].push((k, v));
            }

            // Eliminate the pivot column from every other active row.
            let mut lcol = Vec::with_capacity(elim_rows.len());
            for r in elim_rows {
                let at = rows_a[r]
                    .iter()
                    .position(|&(c, _)| c == piv_col)
                    .expect("validated above");
                let mult = rows_a[r].swap_remove(at).1 / piv_val;
                lcol.push((r, mult));
                if mult != 0.0 {
                    for &(c, v) in &pivot_row {
                        if let Some(at) = rows_a[r].iter().position(|&(rc, _)| rc == c) {
                            let nv = rows_a[r][at].1 - mult * v;
                            if nv == 0.0 {
                                // Drop exact cancellations so column counts
                                // keep meaning "nonzero entries"; a dropped
                                // entry may be refilled later.
                                rows_a[r].swap_remove(at);
                                col_count[c] -= 1;
                                buckets[col_count[c]].push(c);
                            } else {
                                rows_a[r][at].1 = nv;
                            }
                        } else {
                            rows_a[r].push((c, -mult * v));
                            col_rows[c].push(r);
                            col_count[c] += 1;
                            buckets[col_count[c]].push(c);
                        }
                    }
                }
            }
            l_cols_orig.push(lcol);
        }

        let mut u_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        let mut pos_of_col = vec![0usize; m];
        for (k, &j) in order.iter().enumerate() {
            pos_of_col[j] = k;
        }
        for (j, entries) in u_by_col.iter().enumerate() {
            let p = pos_of_col[j];
            for &(k, v) in entries {
                u_cols[p].push((k, v));
            }
        }
        for col in &mut u_cols {
            col.sort_unstable_by_key(|&(p, _)| p);
        }

        // Map L's row indices into position space and build row-wise views.
        let mut l_pos_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (p, col) in l_cols_orig.iter().enumerate() {
            let mapped: Vec<(usize, f64)> = col.iter().map(|&(r, v)| (row_pos[r], v)).collect();
            l_pos_cols[p] = mapped;
        }
        let mut l_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (p, col) in l_pos_cols.iter().enumerate() {
            for &(q, v) in col {
                l_rows[q].push((p, v));
            }
        }
        let mut u_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (p, col) in u_cols.iter().enumerate() {
            for &(q, v) in col {
                u_rows[q].push((p, v));
            }
        }
        let mut pos_of_col = vec![0usize; m];
        for (k, &j) in order.iter().enumerate() {
            pos_of_col[j] = k;
        }
        Ok(Self {
            m,
            l_cols: l_pos_cols,
            u_cols,
            u_diag,
            l_rows,
            u_rows,
            row_pos,
            col_of_pos: order,
            pos_of_col,
        })
    }

    pub fn nnz(&self) -> usize {
        self.l_cols.iter().map(Vec::len).sum::<usize>()
            + self.u_cols.iter().map(Vec::len).sum::<usize>()
            + self.m
    }

    /// In-place forward solve `B x = b` with `b` scattered by `row_pos`.
    /// The result is indexed by basis slot.
    pub fn solve_in_place(&self, work: &mut WorkVec) {
        // Scatter solves process positions in elimination order; fill-in
        // positions always lie downstream, so an ordered frontier works.
        // Entries can be pushed more than once; duplicates pop
        // consecutively and are skipped.
        ascending_scatter(work, |w, p| {
            let xp = w.vals[p];
            if xp == 0.0 {
                return None;
            }
            Some(self.l_cols[p].as_slice())
        });
        descending_scatter(work, |w, p| {
            if w.vals[p] == 0.0 {
                return None;
            }
            w.vals[p] /= self.u_diag[p];
            Some(self.u_cols[p].as_slice())
        });
        // Elimination position -> slot.
        self.permute(work, &self.col_of_pos);
    }

    /// In-place transposed solve `B^T y = c` with `c` indexed by basis
    /// slot. The result is indexed by elimination position (`row_pos`).
    pub fn solve_transposed_in_place(&self, work: &mut WorkVec) {
        // Slot -> elimination position.
        self.permute(work, &self.pos_of_col);
        // U^T is lower triangular (ascending), L^T unit upper (descending).
        ascending_scatter(work, |w, p| {
            if w.vals[p] == 0.0 {
                return None;
            }
            w.vals[p] /= self.u_diag[p];
            Some(self.u_rows[p].as_slice())
        });
        descending_scatter(work, |w, p| {
            if w.vals[p] == 0.0 {
                return None;
            }
            Some(self.l_rows[p].as_slice())
        });
    }

    /// Move every touched value from position `p` to `map[p]`.
    fn permute(&self, work: &mut WorkVec, map: &[usize]) {
        let moved: Vec<(usize, f64)> = work
            .touched
            .iter()
            .map(|&p| (map[p], work.vals[p]))
            .collect();
        work.clear();
        for (p, v) in moved {
            if v != 0.0 {
                work.set(p, v);
            }
        }
    }
}

/// Dense-input cutoff: past this fraction of positions a plain sweep beats
/// the heap-ordered frontier.
fn is_dense(work: &WorkVec) -> bool {
    work.touched.len() * 8 > work.vals.len()
}

fn ascending_scatter<'a, F>(work: &mut WorkVec, mut col_of: F)
where
    F: FnMut(&mut WorkVec, usize) -> Option<&'a [(usize, f64)]>,
{
    if is_dense(work) {
        for p in 0..work.vals.len() {
            if let Some(col) = col_of(work, p) {
                let xp = work.vals[p];
                for &(q, v) in col {
                    work.add(q, -xp * v);
                }
            }
        }
        return;
    }
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<usize>> =
        work.touched.iter().map(|&p| std::cmp::Reverse(p)).collect();
    let mut last = usize::MAX;
    while let Some(std::cmp::Reverse(p)) = heap.pop() {
        if p == last {
            continue;
        }
        last = p;
        if let Some(col) = col_of(work, p) {
            let xp = work.vals[p];
            for &(q, v) in col {
                let before = work.seen[q];
                work.add(q, -xp * v);
                if !before {
                    heap.push(std::cmp::Reverse(q));
                }
            }
        }
    }
}

fn descending_scatter<'a, F>(work: &mut WorkVec, mut col_of: F)
where
    F: FnMut(&mut WorkVec, usize) -> Option<&'a [(usize, f64)]>,
{
    if is_dense(work) {
        for p in (0..work.vals.len()).rev() {
            if let Some(col) = col_of(work, p) {
                let xp = work.vals[p];
                for &(q, v) in col {
                    work.add(q, -xp * v);
                }
            }
        }
        return;
    }
    let mut heap: std::collections::BinaryHeap<usize> = work.touched.to_vec().into();
    let mut last = usize::MAX;
    while let Some(p) = heap.pop() {
        if p == last {
            continue;
        }
        last = p;
        if let Some(col) = col_of(work, p) {
            let xp = work.vals[p];
            for &(q, v) in col {
                let before = work.seen[q];
                work.add(q, -xp * v);
                if !before {
                    heap.push(q);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn dense_matvec(m: usize, cols: &[Vec<(usize, f64)>], x: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; m];
        for (j, col) in cols.iter().enumerate() {
            for &(r, v) in col {
                b[r] += v * x[j];
            }
        }
        b
    }

    fn random_sparse(m: usize, rng: &mut impl Rng) -> Vec<Vec<(usize, f64)>> {
        // Diagonal plus random off-diagonal entries keeps it nonsingular
        // with high probability.
        (0..m)
            .map(|j| {
                let mut col = vec![(j, rng.gen_range(1.0..3.0))];
                for _ in 0..rng.gen_range(0..4) {
                    let r = rng.gen_range(0..m);
                    if col.iter().all(|&(rr, _)| rr != r) {
                        col.push((r, rng.gen_range(-2.0..2.0)));
                    }
                }
                col
            })
            .collect()
    }

    #[test]
    fn factor_solve_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for m in [1usize, 2, 5, 20, 60] {
            for _ in 0..5 {
                let cols = random_sparse(m, &mut rng);
                let lu = match LuFactors::factorize(m, &cols) {
                    Ok(lu) => lu,
                    Err(_) => continue,
                };
                let x_true: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let b = dense_matvec(m, &cols, &x_true);
                let mut work = WorkVec::new(m);
                for (r, &v) in b.iter().enumerate() {
                    if v != 0.0 {
                        work.add(lu.row_pos[r], v);
                    }
                }
                lu.solve_in_place(&mut work);
                for j in 0..m {
                    assert_relative_eq!(work.vals[j], x_true[j], epsilon = 1e-7, max_relative = 1e-7);
                }

                // Transposed solve: A^T y = c.
                let y_true: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let mut c = vec![0.0; m];
                for (j, col) in cols.iter().enumerate() {
                    for &(r, v) in col {
                        c[j] += v * y_true[r];
                    }
                }
                let mut work = WorkVec::new(m);
                for (j, &v) in c.iter().enumerate() {
                    if v != 0.0 {
                        work.add(j, v);
                    }
                }
                lu.solve_transposed_in_place(&mut work);
                // Result is indexed by position; y[orig row r] = work[pos].
                for r in 0..m {
                    assert_relative_eq!(
                        work.vals[lu.row_pos[r]],
                        y_true[r],
                        epsilon = 1e-7,
                        max_relative = 1e-7
                    );
                }
            }
        }
    }

    #[test]
    fn singular_matrix_detected() {
        // Two identical columns.
        let cols = vec![vec![(0, 1.0), (1, 2.0)], vec![(0, 1.0), (1, 2.0)]];
        assert!(matches!(
            LuFactors::factorize(2, &cols),
            Err(LuError::Singular { .. })
        ));
    }
}
