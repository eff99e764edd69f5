//! Unbiased integer rounding of a fractional transport plan.

use rand::Rng;

const SNAP: f64 = 1e-9;

/// Rounds `x` (rows x cols, row-major) whose row and column sums are
/// integers into an integer matrix with the same sums. Each entry lands on
/// the floor or ceiling of its value and equals it in expectation.
///
/// Fractional parts are pushed to integers along alternating cycles of the
/// bipartite row-column graph, choosing the direction at random with the
/// probabilities that keep every entry's mean fixed.
pub(crate) fn dependent_round<R: Rng>(
    x: &[f64],
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Vec<i64> {
    assert_eq!(x.len(), rows * cols);
    let mut base: Vec<i64> = x.iter().map(|v| v.floor() as i64).collect();
    let mut frac: Vec<f64> = x.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
    for (f, b) in frac.iter_mut().zip(base.iter_mut()) {
        if *f < SNAP {
            *f = 0.0;
        } else if *f > 1.0 - SNAP {
            *f = 0.0;
            *b += 1;
        }
    }

    let is_frac = |f: f64| f > 0.0 && f < 1.0;
    while let Some(start) = frac.iter().position(|&f| is_frac(f)) {
        let Some(cycle) = find_cycle(&frac, rows, cols, start, is_frac) else {
            // float slop left a lone fractional entry; settle it by rounding
            frac[start] = frac[start].round();
            continue;
        };
        // cycle[0], cycle[2], ... gain; cycle[1], cycle[3], ... lose
        let mut up = f64::INFINITY;
        let mut down = f64::INFINITY;
        for (k, &e) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                up = up.min(1.0 - frac[e]);
                down = down.min(frac[e]);
            } else {
                up = up.min(frac[e]);
                down = down.min(1.0 - frac[e]);
            }
        }
        let delta = if rng.gen::<f64>() * (up + down) < down {
            up
        } else {
            -down
        };
        for (k, &e) in cycle.iter().enumerate() {
            frac[e] += if k % 2 == 0 { delta } else { -delta };
            if frac[e] < SNAP {
                frac[e] = 0.0;
            } else if frac[e] > 1.0 - SNAP {
                frac[e] = 1.0;
            }
        }
    }
    for (b, f) in base.iter_mut().zip(&frac) {
        *b += f.round() as i64;
    }
    base
}

/// Finds an even cycle of fractional entries through entry `start`,
/// alternating row and column moves. Returns entry indices in cycle order.
fn find_cycle(
    frac: &[f64],
    rows: usize,
    cols: usize,
    start: usize,
    is_frac: impl Fn(f64) -> bool,
) -> Option<Vec<usize>> {
    // walk: from an entry, alternate moving along its row and its column to
    // another fractional entry; stop when a row or column repeats
    let mut path = vec![start];
    let mut seen_rows = vec![usize::MAX; rows];
    let mut seen_cols = vec![usize::MAX; cols];
    seen_rows[start / cols] = 0;
    let mut along_row = true;
    let mut cur = start;
    loop {
        let (r, c) = (cur / cols, cur % cols);
        let next = if along_row {
            (0..cols)
                .map(|j| r * cols + j)
                .find(|&e| e != cur && is_frac(frac[e]))
        } else {
            (0..rows)
                .map(|i| i * cols + c)
                .find(|&e| e != cur && is_frac(frac[e]))
        }?;
        let pos = path.len();
        path.push(next);
        let (nr, nc) = (next / cols, next % cols);
        if along_row {
            // moved within row r to column nc
            if seen_cols[nc] != usize::MAX {
                // entries path[k..] form a cycle closing at column nc
                let k = seen_cols[nc];
                return Some(close(&path, k));
            }
            seen_cols[nc] = pos;
        } else {
            if seen_rows[nr] != usize::MAX {
                let k = seen_rows[nr];
                return Some(close(&path, k));
            }
            seen_rows[nr] = pos;
        }
        cur = next;
        along_row = !along_row;
    }
}

/// `path[k]` and the last entry share a row or column; the entries strictly
/// after `k` form an alternating cycle whose first and last entries share
/// the closing line.
fn close(path: &[usize], k: usize) -> Vec<usize> {
    path[k + 1..].to_vec()
}
