//! Downstream two-class evaluation: block-mean features, L2-regularized
//! logistic regression, stratified k-fold rotation, and a paired t-test whose
//! p-value comes from numerically integrating the t density.
//!
//! The feature representation (per-block mean intensities) is deliberately
//! simple and documented as such: the experiment's subject is the *relative*
//! value of synthesized volumes, not the classifier.

use crate::error::{Error, Result};
use crate::rng::{seeded, shuffle};
use crate::volume::Volume;

/// Mean intensity of each block in a `grid × grid × grid` partition of the
/// volume, flattened x-fastest. Every axis must be divisible by `grid`.
pub fn extract_features(vol: &Volume, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 {
        return Err(Error::InvalidConfig("feature grid must be positive".into()));
    }
    for (axis, &d) in vol.dims.iter().enumerate() {
        if d % grid != 0 {
            return Err(Error::InvalidDimensions(format!(
                "axis {axis} extent {d} is not divisible by feature grid {grid}"
            )));
        }
    }
    let bs = [vol.dims[0] / grid, vol.dims[1] / grid, vol.dims[2] / grid];
    let block_voxels = (bs[0] * bs[1] * bs[2]) as f64;
    let mut features = Vec::with_capacity(grid * grid * grid);
    for bz in 0..grid {
        for by in 0..grid {
            for bx in 0..grid {
                let mut sum = 0.0f64;
                for z in bz * bs[2]..(bz + 1) * bs[2] {
                    for y in by * bs[1]..(by + 1) * bs[1] {
                        let row = vol.index(bx * bs[0], y, z);
                        for &v in &vol.data[row..row + bs[0]] {
                            sum += v as f64;
                        }
                    }
                }
                features.push(sum / block_voxels);
            }
        }
    }
    Ok(features)
}

#[derive(Debug, Clone)]
pub struct LogregModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^m)` without overflow.
fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

fn objective(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, lambda: f64) -> f64 {
    let n = x.len() as f64;
    let mut loss = 0.0f64;
    for (xi, &yi) in x.iter().zip(y) {
        let z: f64 = xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        // −[y ln σ(z) + (1−y) ln(1−σ(z))] = softplus(z) − y·z
        loss += softplus(z) - f64::from(yi) * z;
    }
    loss / n + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

fn gradient(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, lambda: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0f64; w.len()];
    let mut gb = 0.0f64;
    for (xi, &yi) in x.iter().zip(y) {
        let z: f64 = xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        let r = sigmoid(z) - f64::from(yi);
        for (g, a) in gw.iter_mut().zip(xi) {
            *g += r * a;
        }
        gb += r;
    }
    for (g, wv) in gw.iter_mut().zip(w) {
        *g = *g / n + lambda * wv;
    }
    (gw, gb / n)
}

pub const LOGREG_TOL: f64 = 1e-6;
pub const LOGREG_MAX_ITERS: usize = 10_000;

/// Minimizes mean logistic loss + (λ/2)‖w‖² (intercept unpenalized) by
/// full-batch gradient descent with Armijo backtracking. Stops when the
/// gradient ∞-norm drops below 1e-6 or after 10,000 iterations.
pub fn train_logreg(x: &[Vec<f64>], y: &[u8], lambda: f64) -> Result<LogregModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidData(format!(
            "feature matrix has {} rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    for (i, xi) in x.iter().enumerate() {
        if xi.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "feature row {i} has {} entries, expected {dim}",
                xi.len()
            )));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {i} contains a non-finite value")));
        }
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::InvalidData("labels must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::InvalidData(
            "logistic regression needs at least one sample of each class".into(),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")));
    }

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut f = objective(x, y, &w, b, lambda);
    let mut iterations = 0;
    for _ in 0..LOGREG_MAX_ITERS {
        let (gw, gb) = gradient(x, y, &w, b, lambda);
        let inf_norm = gw
            .iter()
            .chain(std::iter::once(&gb))
            .fold(0.0f64, |m, g| m.max(g.abs()));
        if inf_norm < LOGREG_TOL {
            break;
        }
        iterations += 1;
        let g2: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        let mut step = 1.0f64;
        loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wv, g)| wv - step * g).collect();
            let bt = b - step * gb;
            let ft = objective(x, y, &wt, bt, lambda);
            if ft <= f - 1e-4 * step * g2 {
                w = wt;
                b = bt;
                f = ft;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                // Gradient no longer yields descent at representable steps.
                return Ok(LogregModel { weights: w, intercept: b, iterations });
            }
        }
    }
    Ok(LogregModel { weights: w, intercept: b, iterations })
}

impl LogregModel {
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "feature vector has {} entries, model has {}",
                x.len(),
                self.weights.len()
            )));
        }
        let z: f64 =
            x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.intercept;
        Ok(sigmoid(z))
    }
}

/// Class 1 iff p ≥ 0.5 (deterministic tie rule).
pub fn classify_prob(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

pub fn accuracy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| classify_prob(p) == l)
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

/// Stratified fold assignment plus the rotation defining per-round roles.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

pub struct FoldRound {
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub train: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Round `r`: fold `r` is the test set, fold `(r+1) mod k` the validation
    /// set, the remaining k−2 folds the training set.
    pub fn round(&self, r: usize) -> FoldRound {
        let k = self.k();
        let test = self.folds[r % k].clone();
        let val = self.folds[(r + 1) % k].clone();
        let mut train = Vec::new();
        for (i, fold) in self.folds.iter().enumerate() {
            if i != r % k && i != (r + 1) % k {
                train.extend_from_slice(fold);
            }
        }
        FoldRound { test, val, train }
    }
}

/// Deterministic stratified split: each class is shuffled by the seed, the
/// classes are concatenated, and subjects are dealt round-robin, so fold
/// sizes differ by at most one overall and within each class.
pub fn kfold_split(n: usize, k: usize, labels: &[u8], seed: u64) -> Result<FoldPlan> {
    if labels.len() != n {
        return Err(Error::InvalidData(format!("{} labels for {n} subjects", labels.len())));
    }
    if k < 2 || k > n {
        return Err(Error::InvalidConfig(format!("k must be in [2, {n}], got {k}")));
    }
    for class in [0u8, 1] {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count < k / 2 {
            return Err(Error::InvalidData(format!(
                "class {class} has only {count} members; stratified {k}-fold needs at least {}",
                k / 2
            )));
        }
    }
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for class in [0u8, 1] {
        let mut members: Vec<usize> =
            (0..n).filter(|&i| labels[i] == class).collect();
        shuffle(&mut rng, &mut members);
        order.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (j, subject) in order.into_iter().enumerate() {
        folds[j % k].push(subject);
    }
    Ok(FoldPlan { folds })
}

mod tdist {
    /// Lanczos approximation (g = 7, 9 coefficients) of ln Γ(x) for x > 0.
    pub fn ln_gamma(x: f64) -> f64 {
        const G: f64 = 7.0;
        const C: [f64; 9] = [
            0.999_999_999_999_809_93,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_13,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_571_6e-6,
            1.505_632_735_149_311_6e-7,
        ];
        if x < 0.5 {
            // Reflection: Γ(x)Γ(1−x) = π/sin(πx)
            return std::f64::consts::PI.ln()
                - (std::f64::consts::PI * x).sin().ln()
                - ln_gamma(1.0 - x);
        }
        let x = x - 1.0;
        let mut a = C[0];
        for (i, &c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        let t = x + G + 0.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    pub fn t_pdf(x: f64, df: f64) -> f64 {
        let ln_coef = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        (ln_coef - 0.5 * (df + 1.0) * (1.0 + x * x / df).ln()).exp()
    }

    fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }

    fn adaptive(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }

    /// ∫₀ᵇ f, adaptive Simpson with absolute tolerance.
    pub fn integrate(f: impl Fn(f64) -> f64, b: f64, tol: f64) -> f64 {
        if b == 0.0 {
            return 0.0;
        }
        let a = 0.0;
        let m = 0.5 * b;
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = simpson(a, b, fa, fm, fb);
        adaptive(&f, a, b, fa, fm, fb, whole, tol, 60)
    }

    /// Two-sided p-value for |t| with the given degrees of freedom, by
    /// integrating the density over [0, |t|] to absolute error < 1e-8.
    pub fn two_sided_p(t: f64, df: f64) -> f64 {
        let at = t.abs();
        let mass = integrate(|x| t_pdf(x, df), at, 1e-10);
        (1.0 - 2.0 * mass).clamp(0.0, 1.0)
    }
}

pub use tdist::{t_pdf, two_sided_p};

/// Paired two-sided t-test of `a` against `b`. Returns `(t, p)` with
/// `df = n−1`. Zero-variance differences give `p = 0` when the mean
/// difference is nonzero (a deterministic, unshakable gap), and an error when
/// the sequences are identical.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidData("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n as f64 - 1.0)).sqrt();
    if sd == 0.0 {
        if mean == 0.0 {
            return Err(Error::InvalidData(
                "paired t-test is undefined for identical sequences".into(),
            ));
        }
        return Ok((if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }, 0.0));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = two_sided_p(t, n as f64 - 1.0);
    Ok((t, p))
}

pub const LAMBDA_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

/// Per-subject features for the four Table-2-shaped columns. `joint` is the
/// concatenation input ++ synth.
#[derive(Debug, Clone)]
pub struct SubjectFeatures {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub synth: Vec<f64>,
}

pub const COLUMN_NAMES: [&str; 4] = ["input_only", "target_only", "synth_only", "joint"];

#[derive(Debug, Clone)]
pub struct ColumnResult {
    pub name: &'static str,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
    pub chosen_lambdas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub columns: Vec<ColumnResult>,
    /// Paired t-test of joint vs. input-only fold accuracies.
    pub t: f64,
    pub p: f64,
}

impl ExperimentReport {
    /// Four accuracy columns plus t and p; one `mean` row and one `std` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.columns {
            out.push(',');
            out.push_str(c.name);
        }
        out.push_str(",t,p\nmean");
        for c in &self.columns {
            out.push_str(&format!(",{:.4}", c.mean));
        }
        out.push_str(&format!(",{:.4},{:.6}\nstd", self.t, self.p));
        for c in &self.columns {
            out.push_str(&format!(",{:.4}", c.stddev));
        }
        out.push_str(",,\n");
        out
    }
}

fn column_features(f: &SubjectFeatures, column: usize) -> Vec<f64> {
    match column {
        0 => f.input.clone(),
        1 => f.target.clone(),
        2 => f.synth.clone(),
        _ => {
            let mut joint = f.input.clone();
            joint.extend_from_slice(&f.synth);
            joint
        }
    }
}

fn gather(features: &[Vec<f64>], labels: &[u8], idx: &[usize]) -> (Vec<Vec<f64>>, Vec<u8>) {
    (
        idx.iter().map(|&i| features[i].clone()).collect(),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

/// Trains one classifier per fold round and column, selecting lambda on the
/// validation fold, scoring on the test fold, and closing with the paired
/// t-test of joint vs. input-only accuracies.
pub fn run_classification_experiment(
    features: &[SubjectFeatures],
    labels: &[u8],
    plan: &FoldPlan,
    lambda_grid: &[f64],
) -> Result<ExperimentReport> {
    if features.len() != labels.len() {
        return Err(Error::InvalidData(format!(
            "{} feature records for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let k = plan.k();
    let mut columns = Vec::with_capacity(4);
    for col in 0..4 {
        let matrix: Vec<Vec<f64>> =
            features.iter().map(|f| column_features(f, col)).collect();
        let mut fold_accuracies = Vec::with_capacity(k);
        let mut chosen_lambdas = Vec::with_capacity(k);
        for r in 0..k {
            let round = plan.round(r);
            let (train_x, train_y) = gather(&matrix, labels, &round.train);
            let (val_x, val_y) = gather(&matrix, labels, &round.val);
            let (test_x, test_y) = gather(&matrix, labels, &round.test);

            let mut best: Option<(f64, f64, LogregModel)> = None;
            for &lambda in lambda_grid {
                let model = train_logreg(&train_x, &train_y, lambda)?;
                let probs: Vec<f64> = val_x
                    .iter()
                    .map(|x| model.predict_proba(x))
                    .collect::<Result<_>>()?;
                let acc = accuracy(&probs, &val_y)?;
                let better = match &best {
                    None => true,
                    Some((best_acc, _, _)) => acc > *best_acc,
                };
                if better {
                    best = Some((acc, lambda, model));
                }
            }
            let (_, lambda, model) = best.expect("non-empty lambda grid");
            let probs: Vec<f64> = test_x
                .iter()
                .map(|x| model.predict_proba(x))
                .collect::<Result<_>>()?;
            fold_accuracies.push(accuracy(&probs, &test_y)?);
            chosen_lambdas.push(lambda);
        }
        let mean = fold_accuracies.iter().sum::<f64>() / k as f64;
        let ss: f64 = fold_accuracies.iter().map(|v| (v - mean) * (v - mean)).sum();
        let stddev = (ss / (k as f64 - 1.0)).sqrt();
        columns.push(ColumnResult {
            name: COLUMN_NAMES[col],
            fold_accuracies,
            mean,
            stddev,
            chosen_lambdas,
        });
    }
    let (t, p) = match paired_ttest(&columns[3].fold_accuracies, &columns[0].fold_accuracies) {
        Ok(tp) => tp,
        // Identical per-fold accuracies mean no measurable difference.
        Err(_) => (0.0, 1.0),
    };
    Ok(ExperimentReport { columns, t, p })
}
