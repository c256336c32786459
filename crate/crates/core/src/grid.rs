//! Exact discretized densities for d <= 2: kernel density estimates from
//! samples, analytic mixture grids, closed-form merge targets, divergence and
//! transport metrics, and a sampling-free mirror-descent iteration that
//! serves as the ground-truth reference for the neural merge loop.

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::operators::DivergenceKind;

/// Cell values below this floor are treated as zero inside logarithms.
pub const MASS_FLOOR: f64 = 1e-12;

pub const DEFAULT_BOUNDS_1D: (f64, f64) = (-5.0, 5.0);
pub const DEFAULT_RES_1D: usize = 201;
pub const DEFAULT_BOUNDS_2D: (f64, f64) = (-4.0, 4.0);
pub const DEFAULT_RES_2D: usize = 101;

/// A probability density discretized on a rectangular grid of cell centers.
/// `values` hold densities; `sum(values) * cell_volume == 1` after
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub bounds: Vec<(f64, f64)>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Smoothing bandwidth per axis when estimated from samples.
    pub bandwidth: Option<Vec<f64>>,
}

impl GridDensity {
    pub fn new(bounds: Vec<(f64, f64)>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if bounds.len() != shape.len() {
            return Err(Error::input("grid bounds/shape rank mismatch"));
        }
        let n: usize = shape.iter().product();
        if n == 0 || values.len() != n {
            return Err(Error::Dimension {
                context: "GridDensity values",
                expected: n,
                got: values.len(),
            });
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::input("grid values must be finite and nonnegative"));
        }
        let mut g = GridDensity {
            bounds,
            shape,
            values,
            bandwidth: None,
        };
        g.normalize()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / self.shape[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.cell_width(a)).product()
    }

    pub fn center(&self, axis: usize, idx: usize) -> f64 {
        self.bounds[axis].0 + (idx as f64 + 0.5) * self.cell_width(axis)
    }

    /// Cell-center coordinates of a flat index.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut out = vec![0.0; self.dim()];
        for axis in (0..self.dim()).rev() {
            let n = self.shape[axis];
            out[axis] = self.center(axis, rem % n);
            rem /= n;
        }
        out
    }

    pub fn normalize(&mut self) -> Result<()> {
        let vol = self.cell_volume();
        let total: f64 = self.values.iter().sum::<f64>() * vol;
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Degenerate(format!(
                "grid has no mass to normalize (total {total})"
            )));
        }
        for v in &mut self.values {
            *v /= total;
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Mean of the discretized density along one axis.
    pub fn mean(&self, axis: usize) -> f64 {
        let vol = self.cell_volume();
        let mut m = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            m += v * vol * self.coords(i)[axis];
        }
        m
    }

    pub fn same_grid(&self, other: &GridDensity) -> bool {
        self.shape == other.shape && self.bounds == other.bounds
    }

    /// CSV export: a header row with bounds/resolution/bandwidth metadata,
    /// then `x_0..x_{d-1}, density` per cell.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let bounds = self
            .bounds
            .iter()
            .map(|(lo, hi)| format!("{lo}:{hi}"))
            .collect::<Vec<_>>()
            .join(";");
        let shape = self
            .shape
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let bw = match &self.bandwidth {
            Some(b) => b
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            None => "none".to_string(),
        };
        writeln!(w, "# bounds={bounds} shape={shape} bandwidth={bw}")?;
        for i in 0..self.dim() {
            write!(w, "x_{i},")?;
        }
        writeln!(w, "density")?;
        for (i, &v) in self.values.iter().enumerate() {
            for c in self.coords(i) {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim();
        if !header.starts_with('#') {
            return Err(Error::Format("missing grid metadata header".into()));
        }
        let mut bounds = Vec::new();
        let mut shape = Vec::new();
        let mut bandwidth = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some(b) = tok.strip_prefix("bounds=") {
                for pair in b.split(';') {
                    let (lo, hi) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::Format("bad bounds".into()))?;
                    bounds.push((
                        lo.parse().map_err(|_| Error::Format("bad bounds".into()))?,
                        hi.parse().map_err(|_| Error::Format("bad bounds".into()))?,
                    ));
                }
            } else if let Some(s) = tok.strip_prefix("shape=") {
                for v in s.split(';') {
                    shape.push(v.parse().map_err(|_| Error::Format("bad shape".into()))?);
                }
            } else if let Some(bw) = tok.strip_prefix("bandwidth=") {
                if bw != "none" {
                    let mut out = Vec::new();
                    for v in bw.split(';') {
                        out.push(v.parse().map_err(|_| Error::Format("bad bandwidth".into()))?);
                    }
                    bandwidth = Some(out);
                }
            }
        }
        let n: usize = shape.iter().product();
        let mut values = vec![0.0; n];
        let mut line = String::new();
        r.read_line(&mut line)?; // column names
        let mut count = 0;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                break;
            }
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v = line
                .rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Format("bad grid row".into()))?;
            if count >= n {
                return Err(Error::Format("too many grid rows".into()));
            }
            values[count] = v;
            count += 1;
        }
        if count != n {
            return Err(Error::Format(format!("expected {n} grid rows, got {count}")));
        }
        let mut g = GridDensity::new(bounds, shape, values)?;
        g.bandwidth = bandwidth;
        Ok(g)
    }
}

/// Scott's rule bandwidth per axis.
fn scott_bandwidth(samples: &[f64], dim: usize, n: usize) -> Vec<f64> {
    let mut bw = vec![0.0; dim];
    for a in 0..dim {
        let mean = (0..n).map(|r| samples[r * dim + a]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|r| {
                let d = samples[r * dim + a] - mean;
                d * d
            })
            .sum::<f64>()
            / (n as f64 - 1.0).max(1.0);
        bw[a] = var.sqrt().max(1e-6) * (n as f64).powf(-1.0 / (dim as f64 + 4.0));
    }
    bw
}

/// Kernel-smoothed, renormalized histogram of samples. Samples outside the
/// bounds are clamped into the edge cells. `bandwidth = None` applies
/// Scott's rule.
pub fn density_from_samples(
    samples: &[f64],
    dim: usize,
    bounds: &[(f64, f64)],
    shape: &[usize],
    bandwidth: Option<Vec<f64>>,
) -> Result<GridDensity> {
    if dim == 0 || dim > 2 {
        return Err(Error::unsupported(format!("grid densities support d <= 2, got {dim}")));
    }
    if samples.is_empty() {
        return Err(Error::input("empty sample set"));
    }
    if samples.len() % dim != 0 {
        return Err(Error::Dimension {
            context: "density_from_samples",
            expected: dim,
            got: samples.len() % dim,
        });
    }
    let n = samples.len() / dim;
    let bw = match bandwidth {
        Some(b) => {
            if b.len() != dim || b.iter().any(|&v| v <= 0.0) {
                return Err(Error::input("bandwidth must be positive per axis"));
            }
            b
        }
        None => scott_bandwidth(samples, dim, n),
    };
    let ncell: usize = shape.iter().product();
    let mut hist = vec![0.0; ncell];
    let widths: Vec<f64> = (0..dim)
        .map(|a| (bounds[a].1 - bounds[a].0) / shape[a] as f64)
        .collect();
    let w_each = 1.0 / n as f64;
    for r in 0..n {
        let mut flat = 0;
        for a in 0..dim {
            let x = samples[r * dim + a];
            let mut idx = ((x - bounds[a].0) / widths[a]).floor() as isize;
            idx = idx.clamp(0, shape[a] as isize - 1);
            flat = flat * shape[a] + idx as usize;
        }
        hist[flat] += w_each;
    }
    // Separable Gaussian blur along each axis, kernel truncated at 4 sigma.
    for a in 0..dim {
        let sigma_cells = bw[a] / widths[a];
        if sigma_cells < 1e-9 {
            continue;
        }
        let radius = (4.0 * sigma_cells).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut ksum = 0.0;
        for k in -radius..=radius {
            let v = (-0.5 * (k as f64 / sigma_cells).powi(2)).exp();
            kernel.push(v);
            ksum += v;
        }
        kernel.iter_mut().for_each(|v| *v /= ksum);
        hist = blur_axis(&hist, shape, a, &kernel, radius);
    }
    // Convert cell masses to densities and normalize.
    let vol: f64 = widths.iter().product();
    let values: Vec<f64> = hist.iter().map(|&m| m / vol).collect();
    let mut g = GridDensity::new(bounds.to_vec(), shape.to_vec(), values)?;
    g.bandwidth = Some(bw);
    Ok(g)
}

fn blur_axis(data: &[f64], shape: &[usize], axis: usize, kernel: &[f64], radius: isize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    match shape.len() {
        1 => {
            let n = shape[0] as isize;
            for i in 0..n {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let j = i + ki as isize - radius;
                    if j >= 0 && j < n {
                        acc += k * data[j as usize];
                    }
                }
                out[i as usize] = acc;
            }
        }
        2 => {
            let (n0, n1) = (shape[0] as isize, shape[1] as isize);
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let off = ki as isize - radius;
                        let (j0, j1) = if axis == 0 { (i0 + off, i1) } else { (i0, i1 + off) };
                        if j0 >= 0 && j0 < n0 && j1 >= 0 && j1 < n1 {
                            acc += k * data[(j0 * n1 + j1) as usize];
                        }
                    }
                    out[(i0 * n1 + i1) as usize] = acc;
                }
            }
        }
        _ => unreachable!("grids are rank 1 or 2"),
    }
    out
}

/// Exact mixture density evaluated at the cell centers.
pub fn analytic_grid(
    mix: &GaussianMixture,
    bounds: &[(f64, f64)],
    shape: &[usize],
) -> Result<GridDensity> {
    let n: usize = shape.iter().product();
    let mut values = vec![0.0; n];
    let probe = GridDensity {
        bounds: bounds.to_vec(),
        shape: shape.to_vec(),
        values: vec![0.0; n],
        bandwidth: None,
    };
    for (i, v) in values.iter_mut().enumerate() {
        *v = mix.density(&probe.coords(i));
    }
    GridDensity::new(bounds.to_vec(), shape.to_vec(), values)
}

/// Riemann-sum KL divergence between two densities on the same grid.
pub fn grid_kl(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    if !p.same_grid(q) {
        return Err(Error::input("grid_kl requires matching grids"));
    }
    let vol = p.cell_volume();
    let mut kl = 0.0;
    for (&pv, &qv) in p.values.iter().zip(q.values.iter()) {
        if pv > MASS_FLOOR {
            kl += pv * (pv / qv.max(MASS_FLOOR)).ln() * vol;
        }
    }
    Ok(kl.max(0.0))
}

/// 1D Wasserstein-1 distance via the L1 distance between CDFs.
pub fn grid_w1_1d(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    if !p.same_grid(q) {
        return Err(Error::input("grid_w1_1d requires matching grids"));
    }
    if p.dim() != 1 {
        return Err(Error::unsupported("grid W1 is 1D only"));
    }
    let w = p.cell_width(0);
    let mut fp = 0.0;
    let mut fq = 0.0;
    let mut dist = 0.0;
    for (&pv, &qv) in p.values.iter().zip(q.values.iter()) {
        fp += pv * w;
        fq += qv * w;
        dist += (fp - fq).abs() * w;
    }
    Ok(dist)
}

pub fn sup_norm(p: &GridDensity, q: &GridDensity) -> f64 {
    p.values
        .iter()
        .zip(q.values.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// The analytic optimum of a homogeneous merge on the grid:
/// - forward KL (intersection): geometric mean with exponents alpha_i / sum(alpha);
/// - reverse KL (union): arithmetic mixture with weights alpha_i / sum(alpha);
/// - W1 (interpolation, 1D only): quantile-function average.
pub fn closed_form_target(
    kind: DivergenceKind,
    alphas: &[f64],
    priors: &[GridDensity],
) -> Result<GridDensity> {
    if priors.is_empty() || priors.len() != alphas.len() {
        return Err(Error::input("closed_form_target needs one weight per prior"));
    }
    if alphas.iter().any(|&a| a <= 0.0) {
        return Err(Error::input("weights must be positive"));
    }
    for p in &priors[1..] {
        if !p.same_grid(&priors[0]) {
            return Err(Error::input("priors must share one grid"));
        }
    }
    let total: f64 = alphas.iter().sum();
    let base = &priors[0];
    match kind {
        DivergenceKind::ForwardKl => {
            // The weighted geometric mean lives on the common support; if no
            // cell carries mass under every prior at once, the product is
            // degenerate.
            let common_support = (0..base.values.len()).any(|i| {
                priors.iter().all(|p| p.values[i] > 1e-10)
            });
            if !common_support {
                return Err(Error::Degenerate(
                    "intersection of densities with disjoint supports".into(),
                ));
            }
            let mut logits = vec![0.0; base.values.len()];
            for (p, &a) in priors.iter().zip(alphas.iter()) {
                let wexp = a / total;
                for (l, &v) in logits.iter_mut().zip(p.values.iter()) {
                    *l += wexp * v.max(MASS_FLOOR).ln();
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let values: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let mut g = GridDensity::new(base.bounds.clone(), base.shape.clone(), values)?;
            g.bandwidth = None;
            Ok(g)
        }
        DivergenceKind::ReverseKl => {
            let mut values = vec![0.0; base.values.len()];
            for (p, &a) in priors.iter().zip(alphas.iter()) {
                let w = a / total;
                for (v, &pv) in values.iter_mut().zip(p.values.iter()) {
                    *v += w * pv;
                }
            }
            GridDensity::new(base.bounds.clone(), base.shape.clone(), values)
        }
        DivergenceKind::W1 => {
            if base.dim() != 1 {
                return Err(Error::unsupported("W1 barycenter target is 1D only"));
            }
            quantile_average_barycenter(alphas, priors, total)
        }
    }
}

fn quantile_average_barycenter(
    alphas: &[f64],
    priors: &[GridDensity],
    total: f64,
) -> Result<GridDensity> {
    let base = &priors[0];
    let n = base.shape[0];
    let w = base.cell_width(0);
    let lo = base.bounds[0].0;
    // Piecewise-linear CDF knots at cell edges for each prior.
    let cdfs: Vec<Vec<f64>> = priors
        .iter()
        .map(|p| {
            let mut f = Vec::with_capacity(n + 1);
            f.push(0.0);
            let mut acc = 0.0;
            for &v in &p.values {
                acc += v * w;
                f.push(acc);
            }
            let last = *f.last().unwrap();
            f.iter_mut().for_each(|v| *v /= last);
            f
        })
        .collect();
    let quantile = |cdf: &[f64], u: f64| -> f64 {
        // Smallest edge x with F(x) >= u, linear within the cell.
        let mut a = 0usize;
        let mut b = n;
        while a < b {
            let mid = (a + b) / 2;
            if cdf[mid + 1] >= u {
                b = mid;
            } else {
                a = mid + 1;
            }
        }
        let f0 = cdf[a];
        let f1 = cdf[a + 1];
        let frac = if f1 > f0 { ((u - f0) / (f1 - f0)).clamp(0.0, 1.0) } else { 0.5 };
        lo + (a as f64 + frac) * w
    };
    let m = 400_001usize;
    let mut hist = vec![0.0; n];
    let each = 1.0 / m as f64;
    for j in 0..m {
        let u = (j as f64 + 0.5) / m as f64;
        let mut x = 0.0;
        for (cdf, &a) in cdfs.iter().zip(alphas.iter()) {
            x += (a / total) * quantile(cdf, u);
        }
        let mut idx = ((x - lo) / w).floor() as isize;
        idx = idx.clamp(0, n as isize - 1);
        hist[idx as usize] += each;
    }
    let values: Vec<f64> = hist.iter().map(|&mass| mass / w).collect();
    GridDensity::new(base.bounds.clone(), base.shape.clone(), values)
}

/// Result of the exact mirror-descent iteration on the grid.
#[derive(Debug, Clone)]
pub struct MirrorDescentRun {
    pub final_density: GridDensity,
    /// Per step: reward term, weighted divergence terms, total objective.
    pub objective_trace: Vec<ObjectivePoint>,
    pub iterates: Option<Vec<GridDensity>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectivePoint {
    pub reward_term: f64,
    pub divergence_terms: Vec<f64>,
    pub total: f64,
}

/// Evaluate the decomposed objective `E_p[f] - sum_i alpha_i D_i(p, prior_i)`
/// on the grid.
pub fn grid_objective(
    p: &GridDensity,
    kinds: &[DivergenceKind],
    alphas: &[f64],
    priors: &[GridDensity],
    reward: Option<&[f64]>,
) -> Result<ObjectivePoint> {
    let vol = p.cell_volume();
    let reward_term = match reward {
        Some(f) => p
            .values
            .iter()
            .zip(f.iter())
            .map(|(&pv, &fv)| pv * fv * vol)
            .sum(),
        None => 0.0,
    };
    let mut divergence_terms = Vec::with_capacity(priors.len());
    for ((prior, &a), &kind) in priors.iter().zip(alphas.iter()).zip(kinds.iter()) {
        let d = match kind {
            DivergenceKind::ForwardKl => grid_kl(p, prior)?,
            DivergenceKind::ReverseKl => grid_kl(prior, p)?,
            DivergenceKind::W1 => grid_w1_1d(p, prior)?,
        };
        divergence_terms.push(a * d);
    }
    let total = reward_term - divergence_terms.iter().sum::<f64>();
    Ok(ObjectivePoint {
        reward_term,
        divergence_terms,
        total,
    })
}

/// Exact mirror descent on grid densities: each step applies the exponential
/// tilt `p_{k+1} proportional to p_k exp(gamma * dG(p_k))`, the closed-form
/// maximizer of the linearized objective under a KL trust region. First
/// variations: forward KL `-sum alpha (log(p/q) + 1)`, reverse KL
/// `+sum alpha q/p`, reward `+f`. W1 terms are not supported here.
pub fn exact_mirror_descent(
    priors: &[GridDensity],
    kinds: &[DivergenceKind],
    alphas: &[f64],
    reward: Option<&[f64]>,
    gamma: f64,
    steps: usize,
    init: &GridDensity,
    keep_iterates: bool,
) -> Result<MirrorDescentRun> {
    if kinds.iter().any(|k| *k == DivergenceKind::W1) {
        return Err(Error::unsupported(
            "exact mirror descent supports forward/reverse KL and reward terms only",
        ));
    }
    if priors.len() != kinds.len() || priors.len() != alphas.len() {
        return Err(Error::input("priors, kinds, and weights must align"));
    }
    for p in priors {
        if !p.same_grid(init) {
            return Err(Error::input("all grids must match the initialization"));
        }
    }
    if let Some(f) = reward {
        if f.len() != init.values.len() {
            return Err(Error::Dimension {
                context: "exact_mirror_descent reward",
                expected: init.values.len(),
                got: f.len(),
            });
        }
    }
    let mut p = init.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut iterates = keep_iterates.then(Vec::new);
    trace.push(grid_objective(&p, kinds, alphas, priors, reward)?);
    if let Some(it) = iterates.as_mut() {
        it.push(p.clone());
    }
    let ncell = init.values.len();
    for _ in 0..steps {
        let mut logits = vec![0.0; ncell];
        for i in 0..ncell {
            let pv = p.values[i].max(MASS_FLOOR);
            let mut dg = match reward {
                Some(f) => f[i],
                None => 0.0,
            };
            for ((prior, &a), &kind) in priors.iter().zip(alphas.iter()).zip(kinds.iter()) {
                let qv = prior.values[i].max(MASS_FLOOR);
                match kind {
                    DivergenceKind::ForwardKl => dg -= a * ((pv / qv).ln() + 1.0),
                    DivergenceKind::ReverseKl => dg += a * (qv / pv),
                    DivergenceKind::W1 => unreachable!(),
                }
            }
            logits[i] = pv.ln() + gamma * dg;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (v, &l) in p.values.iter_mut().zip(logits.iter()) {
            *v = (l - mx).exp();
        }
        p.normalize()?;
        trace.push(grid_objective(&p, kinds, alphas, priors, reward)?);
        if let Some(it) = iterates.as_mut() {
            it.push(p.clone());
        }
    }
    Ok(MirrorDescentRun {
        final_density: p,
        objective_trace: trace,
        iterates,
    })
}

/// Best two-component mixture weight: the w in [0, 1] minimizing
/// `KL(out || w * p2 + (1 - w) * p1)` over a uniform scan.
pub fn fit_mixture_weight(out: &GridDensity, p1: &GridDensity, p2: &GridDensity) -> Result<f64> {
    let mut best = (f64::INFINITY, 0.0);
    let mut mix = p1.clone();
    for k in 0..=500 {
        let w = k as f64 / 500.0;
        for (mv, (&a, &b)) in mix
            .values
            .iter_mut()
            .zip(p1.values.iter().zip(p2.values.iter()))
        {
            *mv = (1.0 - w) * a + w * b;
        }
        let kl = grid_kl(out, &mix)?;
        if kl < best.0 {
            best = (kl, w);
        }
    }
    Ok(best.1)
}
