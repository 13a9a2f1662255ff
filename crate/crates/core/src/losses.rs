//! Training losses with closed-form gradients.
//!
//! All losses take row-major `n × C` logits (or `n × D` embeddings) and
//! return the scalar loss together with its gradient. Per-point labels use
//! [`UNLABELED`] for points outside a label type; weak labels are class
//! bitsets where 0 marks an ignored point.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{ClassId, Error, Result, UNLABELED};

/// Clamp for the allowed probability mass in the weak loss.
pub const WEAK_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// Points that contributed; 0 means the loss is an empty-batch zero.
    pub count: usize,
}

impl LossOutput {
    fn zero(shape: (usize, usize)) -> Self {
        Self {
            loss: 0.0,
            grad: Array2::zeros(shape),
            count: 0,
        }
    }
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    out
}

fn check_labels(labels: &[ClassId], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&y| y != UNLABELED && y as usize >= c) {
        return Err(Error::Argument(format!("label {} at row {i} >= {c} classes", labels[i])));
    }
    Ok(())
}

fn check_weights(weights: &[f64], c: usize) -> Result<()> {
    if weights.len() != c {
        return Err(Error::Argument(format!("{} class weights for {c} classes", weights.len())));
    }
    Ok(())
}

/// Class-weighted cross-entropy averaged over labeled rows:
/// `(1/m) Σ w_y · (−log p_y)`.
pub fn loss_wce(logits: ArrayView2<f64>, labels: &[ClassId], weights: &[f64]) -> Result<LossOutput> {
    let (n, c) = logits.dim();
    check_labels(labels, n, c)?;
    check_weights(weights, c)?;
    let m = labels.iter().filter(|&&y| y != UNLABELED).count();
    if m == 0 {
        return Ok(LossOutput::zero((n, c)));
    }
    let inv = 1.0 / m as f64;
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y == UNLABELED {
            continue;
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let w = weights[y as usize];
        loss += w * (lse - row[y as usize]);
        let mut g = grad.row_mut(i);
        for k in 0..c {
            g[k] = w * inv * (row[k] - lse).exp();
        }
        g[y as usize] -= w * inv;
    }
    Ok(LossOutput {
        loss: loss * inv,
        grad,
        count: m,
    })
}

/// Negative-only weak loss: `−(1/n) Σ log(Σ_{allowed} p)`.
///
/// Rows with an empty mask are ignored; rows whose mask allows every class
/// contribute nothing and are not counted in `n`. The allowed mass is clamped
/// to at least [`WEAK_EPS`], below which the gradient is zero.
pub fn loss_weak(logits: ArrayView2<f64>, masks: &[u32]) -> Result<LossOutput> {
    let (n, c) = logits.dim();
    if masks.len() != n {
        return Err(Error::Argument(format!("{} weak masks for {n} rows", masks.len())));
    }
    if c > 32 {
        return Err(Error::Argument(format!("{c} classes exceed the 32-bit weak mask")));
    }
    let full = if c == 32 { u32::MAX } else { (1u32 << c) - 1 };
    let active: Vec<usize> = (0..n).filter(|&i| masks[i] != 0 && masks[i] & full != full).collect();
    if active.is_empty() {
        return Ok(LossOutput::zero((n, c)));
    }
    let inv = 1.0 / active.len() as f64;
    let log_eps = WEAK_EPS.ln();
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    for &i in &active {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let allowed: Array1<f64> = (0..c).filter(|&k| masks[i] >> k & 1 == 1).map(|k| row[k]).collect();
        let log_s = log_sum_exp(allowed.view()) - lse;
        if log_s < log_eps {
            loss -= log_eps;
            continue;
        }
        loss -= log_s;
        let s = log_s.exp();
        let mut g = grad.row_mut(i);
        for k in 0..c {
            let p = (row[k] - lse).exp();
            let a = if masks[i] >> k & 1 == 1 { p / s } else { 0.0 };
            g[k] = inv * (p - a);
        }
    }
    Ok(LossOutput {
        loss: loss * inv,
        grad,
        count: active.len(),
    })
}

/// Linear projection head `z = W e` followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `D' × D`.
    pub weight: Array2<f64>,
}

impl Projection {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Self { weight }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns `(z, ‖z‖)` per row before normalization.
    fn raw(&self, embeddings: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let z = embeddings.dot(&self.weight.t());
        let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE));
        (z, norms)
    }

    /// Unit-norm projections `h(e)`.
    pub fn forward(&self, embeddings: ArrayView2<f64>) -> Array2<f64> {
        let (mut z, norms) = self.raw(embeddings);
        for (mut row, &n) in z.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        z
    }
}

/// Per-class prototypes in the projected space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// `C × D'`, row-major.
    pub prototypes: Vec<Vec<f64>>,
    pub momentum: f64,
    pub temperature: f64,
}

impl PrototypeBank {
    /// Rows drawn uniformly on the unit sphere.
    pub fn new(num_classes: usize, dim: usize, momentum: f64, temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..num_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            })
            .collect();
        Self {
            prototypes,
            momentum,
            temperature,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn matrix(&self) -> Array2<f64> {
        let d = self.prototypes.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.num_classes(), d), |(c, k)| self.prototypes[c][k])
    }

    /// Moving-average update `P_c ← m P_c + (1 − m) mean{q_i : y_i = c}` for the
    /// classes present in `labels`; `projected` rows are unit-norm projections.
    pub fn update(&mut self, projected: ArrayView2<f64>, labels: &[ClassId]) -> Result<()> {
        let (n, d) = projected.dim();
        check_labels(labels, n, self.num_classes())?;
        let mut sums = vec![vec![0.0; d]; self.num_classes()];
        let mut counts = vec![0usize; self.num_classes()];
        for (i, &y) in labels.iter().enumerate() {
            if y == UNLABELED {
                continue;
            }
            counts[y as usize] += 1;
            for (s, &v) in sums[y as usize].iter_mut().zip(projected.row(i)) {
                *s += v;
            }
        }
        let m = self.momentum;
        for c in 0..self.num_classes() {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (p, s) in self.prototypes[c].iter_mut().zip(&sums[c]) {
                *p = m * *p + (1.0 - m) * s * inv;
            }
        }
        Ok(())
    }
}

/// Moving-average prototype update from raw embeddings.
pub fn prototype_update(
    bank: &mut PrototypeBank,
    embeddings: ArrayView2<f64>,
    labels: &[ClassId],
    projection: &Projection,
) -> Result<()> {
    bank.update(projection.forward(embeddings).view(), labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoOutput {
    pub loss: f64,
    /// `n × D`.
    pub grad_embeddings: Array2<f64>,
    /// `D' × D`.
    pub grad_projection: Array2<f64>,
    pub count: usize,
}

/// Prototype-contrastive loss
/// `(1/n) Σ −w_y log softmax_c(h(e_i) · P_c / τ)[y]`, with the bank held fixed.
pub fn loss_proto(
    embeddings: ArrayView2<f64>,
    labels: &[ClassId],
    bank: &PrototypeBank,
    weights: &[f64],
    projection: &Projection,
) -> Result<ProtoOutput> {
    let (n, d) = embeddings.dim();
    let c = bank.num_classes();
    check_labels(labels, n, c)?;
    check_weights(weights, c)?;
    if projection.input_dim() != d {
        return Err(Error::Argument(format!(
            "projection expects {} inputs, embeddings have {d}",
            projection.input_dim()
        )));
    }
    let protos = bank.matrix();
    if protos.ncols() != projection.output_dim() {
        return Err(Error::Argument(format!(
            "prototypes have {} dims, projection outputs {}",
            protos.ncols(),
            projection.output_dim()
        )));
    }
    let dp = projection.output_dim();
    let mut out = ProtoOutput {
        loss: 0.0,
        grad_embeddings: Array2::zeros((n, d)),
        grad_projection: Array2::zeros((dp, d)),
        count: labels.iter().filter(|&&y| y != UNLABELED).count(),
    };
    if out.count == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / out.count as f64;
    let inv_tau = 1.0 / bank.temperature;
    let (z, norms) = projection.raw(embeddings);
    let mut grad_z = Array2::<f64>::zeros((n, dp));
    for (i, &y) in labels.iter().enumerate() {
        if y == UNLABELED {
            continue;
        }
        let q = z.row(i).mapv(|v| v / norms[i]);
        let logits = protos.dot(&q) * inv_tau;
        let lse = log_sum_exp(logits.view());
        let w = weights[y as usize];
        out.loss += w * (lse - logits[y as usize]);
        // dL/dlogit_c, then back through q = z / ‖z‖
        let mut dl = logits.mapv(|s| (s - lse).exp());
        dl[y as usize] -= 1.0;
        dl *= w * inv_n * inv_tau;
        let g_q = protos.t().dot(&dl);
        let g_z = (&g_q - &(&q * q.dot(&g_q))) / norms[i];
        grad_z.row_mut(i).assign(&g_z);
    }
    out.loss *= inv_n;
    out.grad_embeddings = grad_z.dot(&projection.weight);
    out.grad_projection = grad_z.t().dot(&embeddings);
    Ok(out)
}

/// Distillation `(T²/n) Σ CE(softmax(u/T), softmax(v/T))` with student logits
/// `v` and teacher logits `u`; the gradient is with respect to `v`.
pub fn loss_distill(student: ArrayView2<f64>, teacher: ArrayView2<f64>, temperature: f64) -> Result<LossOutput> {
    if student.dim() != teacher.dim() {
        return Err(Error::Argument(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            student.dim(),
            teacher.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("distillation temperature must be positive, got {temperature}")));
    }
    let (n, c) = student.dim();
    if n == 0 {
        return Ok(LossOutput::zero((n, c)));
    }
    let t = temperature;
    let p_v = softmax((&student / t).view());
    let p_u = softmax((&teacher / t).view());
    let mut loss = 0.0;
    for i in 0..n {
        let lse = log_sum_exp((&student.row(i) / t).view());
        for k in 0..c {
            loss += p_u[[i, k]] * (lse - student[[i, k]] / t);
        }
    }
    let grad = (p_v - p_u) * (t / n as f64);
    Ok(LossOutput {
        loss: loss * t * t / n as f64,
        grad,
        count: n,
    })
}

/// Which terms of the joint objective are active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sparse: bool,
    pub propagated: bool,
    pub weak: bool,
    pub proto: bool,
    /// Distillation temperature; `None` disables the term.
    pub distill_temperature: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sparse: true,
            propagated: true,
            weak: true,
            proto: true,
            distill_temperature: None,
        }
    }
}

/// Inputs of one training step.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub logits: ArrayView2<'a, f64>,
    pub embeddings: ArrayView2<'a, f64>,
    pub sparse: &'a [ClassId],
    /// Disjoint from `sparse`.
    pub propagated: &'a [ClassId],
    pub weak: &'a [u32],
    pub teacher_logits: Option<ArrayView2<'a, f64>>,
}

/// Class weights per supervised label type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightSet {
    pub sparse: Vec<f64>,
    pub propagated: Vec<f64>,
    /// For the union of sparse and propagated labels.
    pub proto: Vec<f64>,
}

impl ClassWeightSet {
    pub fn uniform(num_classes: usize) -> Self {
        let w = vec![1.0; num_classes];
        Self {
            sparse: w.clone(),
            propagated: w.clone(),
            proto: w,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sparse: f64,
    pub propagated: f64,
    pub weak: f64,
    pub proto: f64,
    pub distill: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.sparse + self.propagated + self.weak + self.proto + self.distill
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput {
    pub parts: LossParts,
    pub grad_logits: Array2<f64>,
    pub grad_embeddings: Array2<f64>,
    pub grad_projection: Array2<f64>,
}

/// Labels for the prototype terms: sparse where present, else propagated.
pub fn proto_labels(sparse: &[ClassId], propagated: &[ClassId]) -> Vec<ClassId> {
    sparse
        .iter()
        .zip(propagated)
        .map(|(&s, &p)| if s != UNLABELED { s } else { p })
        .collect()
}

/// Unit-weight sum of the enabled losses.
pub fn joint_loss(
    batch: &Batch,
    bank: &PrototypeBank,
    projection: &Projection,
    weights: &ClassWeightSet,
    config: &LossConfig,
) -> Result<JointOutput> {
    let (n, c) = batch.logits.dim();
    let d = batch.embeddings.ncols();
    if batch.embeddings.nrows() != n {
        return Err(Error::Argument(format!("{} embeddings for {n} logits", batch.embeddings.nrows())));
    }
    let mut out = JointOutput {
        parts: LossParts::default(),
        grad_logits: Array2::zeros((n, c)),
        grad_embeddings: Array2::zeros((n, d)),
        grad_projection: Array2::zeros((projection.output_dim(), d)),
    };
    if config.sparse {
        let r = loss_wce(batch.logits, batch.sparse, &weights.sparse)?;
        out.parts.sparse = r.loss;
        out.grad_logits += &r.grad;
    }
    if config.propagated {
        let r = loss_wce(batch.logits, batch.propagated, &weights.propagated)?;
        out.parts.propagated = r.loss;
        out.grad_logits += &r.grad;
    }
    if config.weak {
        let r = loss_weak(batch.logits, batch.weak)?;
        out.parts.weak = r.loss;
        out.grad_logits += &r.grad;
    }
    if config.proto {
        let labels = if config.propagated {
            proto_labels(batch.sparse, batch.propagated)
        } else {
            batch.sparse.to_vec()
        };
        let r = loss_proto(batch.embeddings, &labels, bank, &weights.proto, projection)?;
        out.parts.proto = r.loss;
        out.grad_embeddings += &r.grad_embeddings;
        out.grad_projection += &r.grad_projection;
    }
    if let Some(t) = config.distill_temperature {
        let teacher = batch
            .teacher_logits
            .ok_or_else(|| Error::Argument("distillation enabled without teacher logits".into()))?;
        let r = loss_distill(batch.logits, teacher, t)?;
        out.parts.distill = r.loss;
        out.grad_logits += &r.grad;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, c), || rng.random_range(-scale..scale))
    }

    /// Largest relative error of `grad` against central differences of `f`.
    fn fd_error(x: &Array2<f64>, grad: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> f64 {
        let h = 1e-5;
        let scale = grad.iter().fold(1e-8_f64, |a, g| a.max(g.abs()));
        let mut worst = 0.0_f64;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[i, j]];
            xp[[i, j]] = orig + h;
            let fp = f(&xp);
            xp[[i, j]] = orig - h;
            let fm = f(&xp);
            xp[[i, j]] = orig;
            let num = (fp - fm) / (2.0 * h);
            worst = worst.max((num - grad[[i, j]]).abs() / scale);
        }
        worst
    }

    #[test]
    fn wce_uniform_and_perfect() {
        let logits = Array2::zeros((3, 4));
        let r = loss_wce(logits.view(), &[0, 1, 2], &[1.0; 4]).unwrap();
        assert_relative_eq!(r.loss, 4f64.ln(), epsilon = 1e-12);
        let mut logits = Array2::from_elem((2, 3), -50.0);
        logits[[0, 1]] = 50.0;
        logits[[1, 2]] = 50.0;
        let r = loss_wce(logits.view(), &[1, 2], &[1.0; 3]).unwrap();
        assert!(r.loss < 1e-30);
    }

    #[test]
    fn wce_empty_is_zero() {
        let r = loss_wce(Array2::zeros((2, 3)).view(), &[UNLABELED; 2], &[1.0; 3]).unwrap();
        assert_eq!((r.loss, r.count), (0.0, 0));
        assert!(r.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn wce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 7, 5, 3.0);
        let labels = [0, UNLABELED, 4, 2, 2, UNLABELED, 1];
        let w = [0.5, 1.0, 1.5, 2.0, 0.7];
        let r = loss_wce(x.view(), &labels, &w).unwrap();
        let err = fd_error(&x, &r.grad, |x| loss_wce(x.view(), &labels, &w).unwrap().loss);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn weak_hand_example() {
        let p = array![[0.7_f64.ln(), 0.2_f64.ln(), 0.1_f64.ln()]];
        let r = loss_weak(p.view(), &[0b011]).unwrap();
        assert_relative_eq!(r.loss, -(0.9_f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(r.loss, 0.10536051565782628, epsilon = 1e-12);
    }

    #[test]
    fn weak_all_allowed_or_ignored_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 4, 3, 2.0);
        let r = loss_weak(x.view(), &[0b111, 0, 0b111, 0]).unwrap();
        assert_eq!((r.loss, r.count), (0.0, 0));
    }

    #[test]
    fn weak_gradient_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 6, 4, 3.0);
        let masks = [0b0001, 0b0110, 0b1111, 0, 0b1010, 0b0111];
        let r = loss_weak(x.view(), &masks).unwrap();
        assert_eq!(r.count, 4);
        let err = fd_error(&x, &r.grad, |x| loss_weak(x.view(), &masks).unwrap().loss);
        assert!(err < 1e-6, "{err}");

        let x = array![[0.0, 40.0]];
        let r = loss_weak(x.view(), &[0b01]).unwrap();
        assert_relative_eq!(r.loss, -WEAK_EPS.ln(), epsilon = 1e-12);
        assert!(r.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn proto_closed_form() {
        // Orthonormal prototypes, embedding projected exactly onto class 2.
        let c = 4;
        let mut bank = PrototypeBank::new(c, 4, 0.99, 0.1, 0);
        for (k, p) in bank.prototypes.iter_mut().enumerate() {
            *p = (0..4).map(|j| f64::from(j == k)).collect();
        }
        let projection = Projection { weight: Array2::eye(4) };
        let e = array![[0.0, 0.0, 3.0, 0.0]];
        let r = loss_proto(e.view(), &[2], &bank, &[1.0; 4], &projection).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + (c as f64 - 1.0))).ln();
        assert_relative_eq!(r.loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn proto_uniform_similarity() {
        let mut bank = PrototypeBank::new(3, 2, 0.99, 0.1, 0);
        for p in bank.prototypes.iter_mut() {
            *p = vec![1.0, 0.0];
        }
        let projection = Projection { weight: Array2::eye(2) };
        let e = array![[1.0, 2.0], [-3.0, 0.5]];
        let w = [2.0, 1.0, 0.5];
        let r = loss_proto(e.view(), &[0, 1], &bank, &w, &projection).unwrap();
        assert_relative_eq!(r.loss, 1.5 * 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn proto_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = PrototypeBank::new(5, 6, 0.99, 0.1, 9);
        let mut projection = Projection::new(8, 6, 3);
        let e = random_matrix(&mut rng, 9, 8, 1.0);
        let labels = [0, 1, UNLABELED, 4, 4, 2, UNLABELED, 3, 0];
        let w = [1.0, 0.5, 2.0, 1.2, 0.8];
        let r = loss_proto(e.view(), &labels, &bank, &w, &projection).unwrap();
        let err = fd_error(&e, &r.grad_embeddings, |e| {
            loss_proto(e.view(), &labels, &bank, &w, &projection).unwrap().loss
        });
        assert!(err < 1e-5, "embeddings {err}");
        let weight = projection.weight.clone();
        let err = fd_error(&weight, &r.grad_projection, |wm| {
            projection.weight = wm.clone();
            loss_proto(e.view(), &labels, &bank, &w, &projection).unwrap().loss
        });
        assert!(err < 1e-5, "projection {err}");
    }

    #[test]
    fn prototype_momentum_limits() {
        let q = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let labels = [0, 0, 2];
        let mut bank = PrototypeBank::new(3, 2, 0.0, 0.1, 1);
        let untouched = bank.prototypes[1].clone();
        bank.update(q.view(), &labels).unwrap();
        assert_eq!(bank.prototypes[0], vec![0.5, 0.5]);
        assert_eq!(bank.prototypes[2], vec![0.6, 0.8]);
        assert_eq!(bank.prototypes[1], untouched);

        let mut frozen = PrototypeBank::new(3, 2, 1.0, 0.1, 1);
        let before = frozen.clone();
        frozen.update(q.view(), &labels).unwrap();
        assert_eq!(frozen, before);
    }

    #[test]
    fn distill_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(&mut rng, 5, 4, 3.0);
        let r = loss_distill(u.view(), u.view(), 4.0).unwrap();
        assert!(r.grad.iter().all(|&g| g == 0.0));
        let p = softmax((&u / 4.0).view());
        let entropy: f64 = -p.iter().map(|&v| v * v.ln()).sum::<f64>() / 5.0;
        assert_relative_eq!(r.loss, 16.0 * entropy, epsilon = 1e-10);

        let v = random_matrix(&mut rng, 5, 4, 3.0);
        let t = 1e3;
        let r = loss_distill(v.view(), u.view(), t).unwrap();
        assert_relative_eq!(r.loss, t * t * 4f64.ln(), max_relative = 1e-3);

        let r = loss_distill(v.view(), u.view(), 4.0).unwrap();
        let err = fd_error(&v, &r.grad, |v| loss_distill(v.view(), u.view(), 4.0).unwrap().loss);
        assert!(err < 1e-6, "{err}");
        assert!(matches!(
            loss_distill(v.view(), u.slice(ndarray::s![..3, ..]), 4.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn joint_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random_matrix(&mut rng, 6, 3, 2.0);
        let emb = random_matrix(&mut rng, 6, 5, 1.0);
        let teacher = random_matrix(&mut rng, 6, 3, 2.0);
        let sparse = [0, UNLABELED, UNLABELED, 2, UNLABELED, UNLABELED];
        let propagated = [UNLABELED, 0, 0, UNLABELED, 1, UNLABELED];
        let weak = [0b001, 0b001, 0b011, 0b110, 0b010, 0];
        let bank = PrototypeBank::new(3, 4, 0.99, 0.1, 2);
        let projection = Projection::new(5, 4, 1);
        let weights = ClassWeightSet {
            sparse: vec![1.0, 0.5, 1.5],
            propagated: vec![0.7, 1.3, 1.0],
            proto: vec![1.0, 1.0, 1.0],
        };
        let batch = Batch {
            logits: logits.view(),
            embeddings: emb.view(),
            sparse: &sparse,
            propagated: &propagated,
            weak: &weak,
            teacher_logits: Some(teacher.view()),
        };
        let config = LossConfig { distill_temperature: Some(4.0), ..Default::default() };
        let j = joint_loss(&batch, &bank, &projection, &weights, &config).unwrap();
        let s = loss_wce(logits.view(), &sparse, &weights.sparse).unwrap();
        let p = loss_wce(logits.view(), &propagated, &weights.propagated).unwrap();
        let w = loss_weak(logits.view(), &weak).unwrap();
        let d = loss_distill(logits.view(), teacher.view(), 4.0).unwrap();
        assert_relative_eq!(j.parts.sparse, s.loss);
        assert_relative_eq!(j.parts.propagated, p.loss);
        let sum = &s.grad + &p.grad + &w.grad + &d.grad;
        for (a, b) in j.grad_logits.iter().zip(&sum) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        let err = fd_error(&logits, &j.grad_logits, |x| {
            let b = Batch { logits: x.view(), ..batch };
            joint_loss(&b, &bank, &projection, &weights, &config).unwrap().parts.total()
        });
        assert!(err < 1e-6, "{err}");
    }
}
