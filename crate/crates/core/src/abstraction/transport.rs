use std::collections::VecDeque;

use crate::error::{Error, Result};

const METRIC_TOL: f64 = 1e-12;

/// Finite metric space given by its distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMetric {
    n: usize,
    d: Vec<f64>,
}

impl DiscreteMetric {
    /// Validates symmetry, zero diagonal, positivity off the diagonal and the
    /// triangle inequality.
    pub fn from_matrix(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::InvalidInput("distance matrix has the wrong size".into()));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("distance matrix".into()));
        }
        let at = |i: usize, j: usize| d[i * n + j];
        for i in 0..n {
            if at(i, i).abs() > METRIC_TOL {
                return Err(Error::InvalidInput(format!("d({i}, {i}) != 0")));
            }
            for j in 0..n {
                if i != j && !(at(i, j) > 0.0) {
                    return Err(Error::InvalidInput(format!("d({i}, {j}) is not positive")));
                }
                if (at(i, j) - at(j, i)).abs() > METRIC_TOL {
                    return Err(Error::InvalidInput(format!("d({i}, {j}) != d({j}, {i})")));
                }
                for k in 0..n {
                    if at(i, k) > at(i, j) + at(j, k) + METRIC_TOL {
                        return Err(Error::InvalidInput(format!(
                            "triangle inequality fails for ({i}, {j}, {k})"
                        )));
                    }
                }
            }
        }
        Ok(Self { n, d })
    }

    /// `d(i, j) = 1` for `i != j`.
    pub fn discrete(n: usize) -> Self {
        let d = (0..n * n).map(|ij| if ij / n == ij % n { 0.0 } else { 1.0 }).collect();
        Self { n, d }
    }

    /// Euclidean distances between distinct points.
    pub fn euclidean(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        Self::from_matrix(n, d)
    }

    /// Points on the real line.
    pub fn line(points: &[f64]) -> Result<Self> {
        let pts: Vec<Vec<f64>> = points.iter().map(|&x| vec![x]).collect();
        Self::euclidean(&pts)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

fn check_distribution(p: &[f64], n: usize, name: &str) -> Result<()> {
    if p.len() != n {
        return Err(Error::InvalidInput(format!("{name} has {} entries, metric has {n}", p.len())));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{name} is not a probability vector")));
    }
    Ok(())
}

/// Optimal transport plan between two distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: f64,
    /// `(source, sink, mass)` for every positive flow.
    pub flows: Vec<(usize, usize, f64)>,
}

/// Wasserstein-1 distance between `p` and `q` on a finite metric space.
pub fn wasserstein1(p: &[f64], q: &[f64], metric: &DiscreteMetric) -> Result<f64> {
    Ok(optimal_transport(p, q, metric)?.cost)
}

/// Exact optimal transport by the transportation simplex: northwest-corner
/// start, dual potentials on the basis tree, Dantzig pricing with a switch to
/// Bland's rule if degenerate pivots persist.
pub fn optimal_transport(p: &[f64], q: &[f64], metric: &DiscreteMetric) -> Result<TransportPlan> {
    check_distribution(p, metric.len(), "p")?;
    check_distribution(q, metric.len(), "q")?;
    let rows: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| p[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| metric.dist(i, j)).collect())
        .collect();
    let flow = transport_simplex(&supply, &demand, &cost)?;
    let mut plan = TransportPlan {
        cost: 0.0,
        flows: Vec::new(),
    };
    for (r, row) in flow.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            if x > 0.0 {
                plan.cost += x * cost[r][c];
                plan.flows.push((rows[r], cols[c], x));
            }
        }
    }
    Ok(plan)
}

fn transport_simplex(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (m, n) = (supply.len(), demand.len());
    let mut x = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];

    // northwest corner: exactly m + n - 1 basic cells, a spanning tree
    let (mut s, mut d) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let amount = s[i].min(d[j]);
        x[i][j] = amount;
        basic[i][j] = true;
        s[i] -= amount;
        d[j] -= amount;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let scale = cost.iter().flatten().fold(1.0f64, |a, c| a.max(c.abs()));
    let opt_tol = 1e-12 * scale;
    let max_iter = 50 * (m + n) * (m + n) + 1000;
    let bland_after = 10 * (m + n);
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    for iter in 0..max_iter {
        potentials(cost, &basic, &mut u, &mut v);
        let use_bland = iter >= bland_after;
        let mut entering = None;
        let mut best = -opt_tol;
        'scan: for r in 0..m {
            for c in 0..n {
                if basic[r][c] {
                    continue;
                }
                let reduced = cost[r][c] - u[r] - v[c];
                if reduced < best {
                    entering = Some((r, c));
                    if use_bland {
                        break 'scan;
                    }
                    best = reduced;
                }
            }
        }
        let Some((er, ec)) = entering else {
            return Ok(x);
        };
        // path in the basis tree from row er to column ec
        let path = tree_path(&basic, er, ec);
        // path edges alternate -, +, -, ... starting next to the entering cell
        let mut theta = f64::INFINITY;
        let mut leaving = None;
        for (t, &(r, c)) in path.iter().enumerate() {
            if t % 2 == 0 && (x[r][c] < theta || (use_bland && x[r][c] == theta && Some((r, c)) < leaving)) {
                theta = x[r][c];
                leaving = Some((r, c));
            }
        }
        let (lr, lc) = leaving.expect("cycle has a minus cell");
        x[er][ec] = theta;
        for (t, &(r, c)) in path.iter().enumerate() {
            if t % 2 == 0 {
                x[r][c] = (x[r][c] - theta).max(0.0);
            } else {
                x[r][c] += theta;
            }
        }
        x[lr][lc] = 0.0;
        basic[lr][lc] = false;
        basic[er][ec] = true;
    }
    Err(Error::NonFinite("transportation simplex did not converge".into()))
}

/// Dual potentials with `u[0] = 0` and `u[r] + v[c] = cost[r][c]` on basic cells.
fn potentials(cost: &[Vec<f64>], basic: &[Vec<bool>], u: &mut [f64], v: &mut [f64]) {
    let (m, n) = (u.len(), v.len());
    let mut seen_r = vec![false; m];
    let mut seen_c = vec![false; n];
    let mut queue = VecDeque::new();
    u[0] = 0.0;
    seen_r[0] = true;
    queue.push_back((true, 0));
    while let Some((is_row, k)) = queue.pop_front() {
        if is_row {
            for c in 0..n {
                if basic[k][c] && !seen_c[c] {
                    v[c] = cost[k][c] - u[k];
                    seen_c[c] = true;
                    queue.push_back((false, c));
                }
            }
        } else {
            for r in 0..m {
                if basic[r][k] && !seen_r[r] {
                    u[r] = cost[r][k] - v[k];
                    seen_r[r] = true;
                    queue.push_back((true, r));
                }
            }
        }
    }
}

/// Basic cells on the tree path from row `r0` to column `c0`, ordered from
/// the row end.
fn tree_path(basic: &[Vec<bool>], r0: usize, c0: usize) -> Vec<(usize, usize)> {
    let (m, n) = (basic.len(), basic[0].len());
    // node ids: rows 0..m, columns m..m+n
    let mut prev = vec![usize::MAX; m + n];
    let mut queue = VecDeque::new();
    prev[r0] = r0;
    queue.push_back(r0);
    while let Some(node) = queue.pop_front() {
        if node == m + c0 {
            break;
        }
        if node < m {
            for c in 0..n {
                if basic[node][c] && prev[m + c] == usize::MAX {
                    prev[m + c] = node;
                    queue.push_back(m + c);
                }
            }
        } else {
            let c = node - m;
            for r in 0..m {
                if basic[r][c] && prev[r] == usize::MAX {
                    prev[r] = node;
                    queue.push_back(r);
                }
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = m + c0;
    while node != r0 {
        let p = prev[node];
        let cell = if node >= m { (p, node - m) } else { (node, p - m) };
        cells.push(cell);
        node = p;
    }
    cells.reverse();
    cells
}
