//! Tasks, training loop, and measurement harnesses.
//!
//! Two synthetic tasks exercise the relaxed layers: planar shape
//! classification (whose symmetry can be switched on or off in the data)
//! and a two-body integration problem used for rotation-equivariant
//! regression demos. The training loop wires the per-step state updates
//! into plain SGD and records a tidy trajectory log.

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::equivariant::{ChannelMixLayer, UnconstrainedTerm};
use crate::error::RecmError;
use crate::groups::{GeneratingSet, Group, Representation};
use crate::modulation::{
    modulation_values, EqPath, LayerSnapshot, PruneReport, RecmLayer, RecmState, UpdateNet,
};
use crate::tensor::Tensor;
use crate::transport::EmpiricalDistribution;
use crate::Rng;

/// Points per shape cloud.
pub const N_POINTS: usize = 8;
/// Shape classes: two line orientations and a cross.
pub const N_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymmetryMode {
    /// Each cloud is transported by a uniformly drawn group element, so
    /// the data distribution is exactly invariant.
    Symmetric,
    /// Clouds keep a fixed orientation; the distribution is visibly
    /// asymmetric under the group.
    Aligned,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeTask {
    /// "C4" or "SO2".
    pub group: String,
    pub mode: SymmetryMode,
    /// Standard deviation of the per-coordinate jitter.
    pub jitter: f64,
}

impl ShapeTask {
    pub fn symmetric(group: &str) -> Self {
        ShapeTask { group: group.to_string(), mode: SymmetryMode::Symmetric, jitter: 0.02 }
    }

    pub fn aligned(group: &str) -> Self {
        ShapeTask { group: group.to_string(), mode: SymmetryMode::Aligned, jitter: 0.02 }
    }
}

/// Base point clouds. The classes are chosen so that orientation is the
/// only separator between the two lines: all rotation-invariant summaries
/// of classes 0 and 1 coincide, and the templates are deliberately offset
/// from the origin so their set means carry the orientation.
pub fn shape_template(class: usize) -> Vec<[f64; 2]> {
    match class {
        // horizontal segment from the origin
        0 => (0..N_POINTS).map(|k| [k as f64 / (N_POINTS - 1) as f64, 0.0]).collect(),
        // the same segment rotated a quarter turn
        1 => (0..N_POINTS).map(|k| [0.0, k as f64 / (N_POINTS - 1) as f64]).collect(),
        // a small cross
        2 => {
            let mut pts = Vec::with_capacity(N_POINTS);
            for k in 0..4 {
                pts.push([k as f64 / 3.0 * 0.5, 0.0]);
            }
            for k in 0..4 {
                pts.push([0.0, k as f64 / 3.0 * 0.5]);
            }
            pts
        }
        _ => panic!("unknown shape class {class}"),
    }
}

/// Draws one labeled cloud as a row-major [N_POINTS, 2] buffer.
pub fn sample_shape(task: &ShapeTask, rng: &mut Rng) -> (Vec<f64>, usize) {
    let label = rng.gen_range(0..N_CLASSES);
    let template = shape_template(label);
    let rot = match task.mode {
        SymmetryMode::Aligned => None,
        SymmetryMode::Symmetric => {
            let group = Group::by_name(&task.group).expect("task group");
            Some(group.haar_sample(rng).mat)
        }
    };
    let mut cloud = Vec::with_capacity(N_POINTS * 2);
    for p in template {
        let (x, y) = match &rot {
            Some(r) => (
                r[(0, 0)] * p[0] + r[(0, 1)] * p[1],
                r[(1, 0)] * p[0] + r[(1, 1)] * p[1],
            ),
            None => (p[0], p[1]),
        };
        let jx: f64 = StandardNormal.sample(rng);
        let jy: f64 = StandardNormal.sample(rng);
        cloud.push(x + task.jitter * jx);
        cloud.push(y + task.jitter * jy);
    }
    (cloud, label)
}

pub fn one_hot(label: usize) -> Vec<f64> {
    let mut v = vec![0.0; N_CLASSES];
    v[label] = 1.0;
    v
}

/// Mean over the cloud's points.
pub fn pool_cloud(cloud: &[f64]) -> [f64; 2] {
    let n = cloud.len() / 2;
    let mut m = [0.0; 2];
    for i in 0..n {
        m[0] += cloud[2 * i];
        m[1] += cloud[2 * i + 1];
    }
    [m[0] / n as f64, m[1] / n as f64]
}

/// Empirical distribution of pooled (input mean, one-hot label) pairs,
/// the object whose symmetry gap drives the modulation.
pub fn pooled_distribution(task: &ShapeTask, n: usize, rng: &mut Rng) -> EmpiricalDistribution {
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let (cloud, label) = sample_shape(task, rng);
            let m = pool_cloud(&cloud);
            let mut p = vec![m[0], m[1]];
            p.extend(one_hot(label));
            p
        })
        .collect();
    EmpiricalDistribution::uniform(points, 2).expect("pooled distribution")
}

// ---- model ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Decay constants of the state recursion.
    pub a: f64,
    pub b: f64,
    pub prune_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train the plain equivariant network (no relaxation terms).
    pub baseline: bool,
    pub log_every: usize,
    pub test_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            lr: 0.05,
            momentum: 0.9,
            a: 1e-3,
            b: 1.0,
            prune_eps: 0.01,
            batch_size: 16,
            seed: 0,
            baseline: false,
            log_every: 100,
            test_samples: 500,
        }
    }
}

/// Two relaxed channel-mixing layers with norm gates and a
/// rotation-invariant readout head.
pub struct Model {
    pub layers: Vec<RecmLayer>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Model {
    pub fn forward(&mut self, cloud: &Tensor, mut rng: Option<&mut Rng>) -> Tensor {
        let mut z = cloud.clone();
        for layer in &mut self.layers {
            z = layer.forward(&z, rng.as_deref_mut());
            // per-point norm gate: v -> v * sigmoid(|v|), equivariant
            // because the gate only reads rotation-invariant norms
            let gate = z.row_norms().sigmoid();
            z = z.scale_rows(&gate);
        }
        let invariants = z.row_norms();
        self.head_w
            .matmul(&invariants.reshape(vec![N_POINTS, 1]))
            .reshape(vec![N_CLASSES])
            .add(&self.head_b)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps: Vec<Tensor> = self.layers.iter().flat_map(|l| l.params()).collect();
        ps.push(self.head_w.clone());
        ps.push(self.head_b.clone());
        ps
    }

    pub fn prune_all(&mut self, eps: f64) -> Vec<PruneReport> {
        self.layers.iter_mut().map(|l| l.prune(eps)).collect()
    }

    /// Largest |f(g z) - f(z)| over random inputs and all group elements
    /// (or Haar samples for continuous groups); the readout is invariant,
    /// so this measures end-to-end symmetry of the network.
    pub fn invariance_violation(&mut self, group: &Group, n_samples: usize, rng: &mut Rng) -> f64 {
        let mut worst = 0.0f64;
        for _ in 0..n_samples {
            let cloud: Vec<f64> = (0..N_POINTS * 2)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let base = self
                .forward(&Tensor::constant(vec![N_POINTS, 2], cloud.clone()), None)
                .value();
            let elems: Vec<nalgebra::DMatrix<f64>> = match group {
                Group::Finite(g) => (0..g.order()).map(|k| g.element(k).mat).collect(),
                Group::Continuous(_) => (0..4).map(|_| group.haar_sample(rng).mat).collect(),
            };
            for r in elems {
                let moved: Vec<f64> = (0..N_POINTS)
                    .flat_map(|i| {
                        let (x, y) = (cloud[2 * i], cloud[2 * i + 1]);
                        [
                            r[(0, 0)] * x + r[(0, 1)] * y,
                            r[(1, 0)] * x + r[(1, 1)] * y,
                        ]
                    })
                    .collect();
                let out = self
                    .forward(&Tensor::constant(vec![N_POINTS, 2], moved), None)
                    .value();
                for (a, b) in base.iter().zip(&out) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        for layer in &mut self.layers {
            layer.clear_pending();
        }
        worst
    }

    pub fn snapshots(&self) -> Vec<LayerSnapshot> {
        self.layers.iter().map(LayerSnapshot::capture).collect()
    }
}

pub fn build_model(task: &ShapeTask, cfg: &TrainConfig, rng: &mut Rng) -> Model {
    let feat = N_POINTS * 2;
    let mut layers = Vec::new();
    for li in 0..2 {
        // near-identity channel mixing so signal propagates at init
        let mut mix = vec![0.0; N_POINTS * N_POINTS];
        for i in 0..N_POINTS {
            for j in 0..N_POINTS {
                let noise: f64 = StandardNormal.sample(rng);
                mix[i * N_POINTS + j] = if i == j { 1.0 } else { 0.0 } + 0.1 * noise;
            }
        }
        let eq = EqPath::ChannelMix(ChannelMixLayer::new(Tensor::param(vec![N_POINTS, N_POINTS], mix)));
        let terms = if cfg.baseline {
            Vec::new()
        } else {
            let scale = 0.3 / (feat as f64).sqrt();
            let dense: Vec<f64> = (0..feat * feat)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v * scale
                })
                .collect();
            let bias: Vec<f64> = (0..feat)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v * 0.05
                })
                .collect();
            vec![
                UnconstrainedTerm::dense(
                    Tensor::param(vec![feat, feat], dense),
                    vec![N_POINTS, 2],
                    1.0,
                ),
                UnconstrainedTerm::bias(
                    Tensor::param(vec![N_POINTS, 2], bias),
                    1.0,
                ),
                UnconstrainedTerm::noise(Tensor::param(vec![1], vec![0.6]), vec![N_POINTS, 2], 1.0),
            ]
        };
        let n_terms = terms.len();
        let net = UpdateNet::new(2 + N_CLASSES, 16, 16, 1.0, rng);
        let state = RecmState::new(16, n_terms, cfg.a, cfg.b, rng);
        let gens = GeneratingSet::canonical_for(&task.group).expect("task group generators");
        layers.push(RecmLayer::new(
            format!("layer{li}"),
            eq,
            terms,
            net,
            state,
            gens,
            Representation::Standard,
            Representation::Trivial(N_CLASSES),
        ));
    }
    let head_scale = 1.0 / (N_POINTS as f64).sqrt();
    let head_w: Vec<f64> = (0..N_CLASSES * N_POINTS)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * head_scale
        })
        .collect();
    Model {
        layers,
        head_w: Tensor::param(vec![N_CLASSES, N_POINTS], head_w),
        head_b: Tensor::param(vec![N_CLASSES], vec![0.0; N_CLASSES]),
    }
}

/// Numerically stable cross entropy of one logit vector.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Tensor {
    let vals = logits.value();
    let mx = vals.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let shifted = logits.sub(&Tensor::constant(vec![vals.len()], vec![mx; vals.len()]));
    let lse = shifted.exp().sum().ln();
    lse.sub(&shifted.dot(&Tensor::constant(vec![vals.len()], one_hot(label))))
}

/// Plain SGD with momentum over the flattened parameter list.
pub struct Sgd {
    params: Vec<Tensor>,
    vel: Vec<Vec<f64>>,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f64) -> Self {
        let vel = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Sgd { params, vel, momentum }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Update with the gradients clipped to a global norm of 5.
    pub fn step(&mut self, lr: f64) {
        let total: f64 = self
            .params
            .iter()
            .filter_map(|p| p.grad())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let clip = if total.sqrt() > 5.0 { 5.0 / total.sqrt() } else { 1.0 };
        for (p, v) in self.params.iter().zip(&mut self.vel) {
            if let Some(g) = p.grad() {
                p.update_data(|d| {
                    for i in 0..d.len() {
                        v[i] = self.momentum * v[i] - lr * clip * g[i];
                        d[i] += v[i];
                    }
                });
            }
        }
    }
}

/// One record of the training trajectory; rows are written per logged
/// step, per layer, per additive term.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajRow {
    pub step: usize,
    pub loss: f64,
    pub layer: String,
    pub term: String,
    pub alpha: f64,
    pub beta: f64,
    pub h_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajRow>,
}

/// Fixed-width float formatting used in every CSV the crate writes; 17
/// significant digits make the text representation injective on f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.17e}")
}

impl TrajectoryLog {
    pub fn log_step(&mut self, step: usize, loss: f64, layers: &[RecmLayer]) {
        for layer in layers {
            let (alphas, beta) = modulation_values(&layer.state);
            let h_norm = layer.state.h.iter().map(|v| v * v).sum::<f64>().sqrt();
            if layer.terms.is_empty() {
                self.rows.push(TrajRow {
                    step,
                    loss,
                    layer: layer.name.clone(),
                    term: "eq".into(),
                    alpha: 0.0,
                    beta,
                    h_norm,
                });
            }
            for (i, term) in layer.terms.iter().enumerate() {
                self.rows.push(TrajRow {
                    step,
                    loss,
                    layer: layer.name.clone(),
                    term: term.kind.label().into(),
                    alpha: alphas[i],
                    beta,
                    h_norm,
                });
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,layer,term,alpha,beta,h_norm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step,
                fmt_float(r.loss),
                r.layer,
                r.term,
                fmt_float(r.alpha),
                fmt_float(r.beta),
                fmt_float(r.h_norm),
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrajectoryLog,
    pub final_train_loss: f64,
    pub test_loss: f64,
    /// Final modulation scalars per layer (before pruning).
    pub final_alphas: Vec<Vec<f64>>,
    pub final_betas: Vec<f64>,
}

/// Average loss on freshly drawn clouds with deterministic evaluation
/// (noise terms at their mean).
pub fn evaluate(model: &mut Model, task: &ShapeTask, n: usize, rng: &mut Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..n {
        let (cloud, label) = sample_shape(task, rng);
        let logits = model.forward(&Tensor::constant(vec![N_POINTS, 2], cloud), None);
        total += cross_entropy(&logits, label).item();
    }
    for layer in &mut model.layers {
        layer.clear_pending();
    }
    total / n as f64
}

/// Trains the relaxed (or baseline) model with single-sample SGD, cosine
/// learning-rate decay to zero, and the per-step state bookkeeping.
pub fn train(task: &ShapeTask, cfg: &TrainConfig) -> Result<TrainOutcome, RecmError> {
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut model = build_model(task, cfg, &mut rng);
    let mut opt = Sgd::new(model.params(), cfg.momentum);
    let mut log = TrajectoryLog::default();
    let mut final_loss = 0.0;
    let batch = cfg.batch_size.max(1);
    for step in 0..cfg.steps {
        opt.zero_grad();
        let mut labels = Vec::with_capacity(batch);
        let mut loss_acc: Option<Tensor> = None;
        for _ in 0..batch {
            let (cloud, label) = sample_shape(task, &mut rng);
            labels.push(label);
            let z = Tensor::constant(vec![N_POINTS, 2], cloud);
            let logits = model.forward(&z, Some(&mut rng));
            let sample_loss = cross_entropy(&logits, label);
            loss_acc = Some(match loss_acc {
                Some(l) => l.add(&sample_loss),
                None => sample_loss,
            });
        }
        let loss = loss_acc.unwrap().scale(1.0 / batch as f64);
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(RecmError::NonFiniteLoss { step: step as u64 });
        }
        final_loss = loss_val;
        loss.backward();
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        opt.step(lr);
        if !cfg.baseline {
            let ys: Vec<Vec<f64>> = labels.iter().map(|l| one_hot(*l)).collect();
            for layer in &mut model.layers {
                layer.step_hooks(&ys)?;
            }
        } else {
            for layer in &mut model.layers {
                layer.clear_pending();
            }
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.log_step(step, loss_val, &model.layers);
        }
    }
    let final_alphas: Vec<Vec<f64>> = model
        .layers
        .iter()
        .map(|l| modulation_values(&l.state).0)
        .collect();
    let final_betas: Vec<f64> = model
        .layers
        .iter()
        .map(|l| modulation_values(&l.state).1)
        .collect();
    let mut test_rng = Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED_5EED_5EED);
    let test_loss = evaluate(&mut model, task, cfg.test_samples, &mut test_rng);
    Ok(TrainOutcome {
        model,
        log,
        final_train_loss: final_loss,
        test_loss,
        final_alphas,
        final_betas,
    })
}

// ---- state recursion harness ----

/// Exact recursion h_t = (1 - a/(b+at)) h_{t-1} + (a/(b+at)) l_t together
/// with its closed form (b h0 + a sum l_i) / (b + a t), computed with
/// compensated summation.
pub fn run_state_recursion(h0: f64, a: f64, b: f64, ls: &[f64]) -> (f64, f64) {
    let mut h = h0;
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (i, l) in ls.iter().enumerate() {
        let t = (i + 1) as f64;
        let lam = a / (b + a * t);
        h = (1.0 - lam) * h + lam * l;
        let y = l - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    let t = ls.len() as f64;
    let closed = (b * h0 + a * sum) / (b + a * t);
    (h, closed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateRecursionResult {
    pub h_final: f64,
    pub closed_form: f64,
    /// Exact expectation of the final state given the driving mean.
    pub expected: f64,
    /// Standard error of the final state under the iid driving noise.
    pub stderr: f64,
    pub within_3_stderr: bool,
    pub closed_form_gap: f64,
}

/// Runs the recursion for `t_max` steps with iid driving values
/// mean + sd * N(0,1) and reports convergence diagnostics. Under the
/// closed form every driving value enters with weight a / (b + a t), so
/// the standard error is sd * a * sqrt(t) / (b + a t), exact rather than
/// asymptotic.
pub fn lemma_harness(h0: f64, a: f64, b: f64, t_max: usize, mean: f64, sd: f64, seed: u64) -> StateRecursionResult {
    let mut rng = Rng::seed_from_u64(seed);
    let ls: Vec<f64> = (0..t_max)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            mean + sd * n
        })
        .collect();
    let (h_final, closed_form) = run_state_recursion(h0, a, b, &ls);
    let t = t_max as f64;
    let lam = b / (b + a * t);
    let expected = lam * h0 + (1.0 - lam) * mean;
    let stderr = sd * a * t.sqrt() / (b + a * t);
    StateRecursionResult {
        h_final,
        closed_form,
        expected,
        stderr,
        within_3_stderr: (h_final - expected).abs() <= 3.0 * stderr,
        closed_form_gap: (h_final - closed_form).abs(),
    }
}

// ---- two-body task ----

/// Random initial state for the planar two-body problem as a
/// [4, 2] buffer: both positions then both velocities.
pub fn sample_twobody_initial(rng: &mut Rng) -> Vec<f64> {
    // bodies on opposite sides of the origin with a tangential kick
    let r = 0.8 + 0.4 * rng.gen::<f64>();
    let th = rng.gen::<f64>() * std::f64::consts::TAU;
    let p1 = [r * th.cos(), r * th.sin()];
    let p2 = [-p1[0], -p1[1]];
    let speed = 0.4 + 0.3 * rng.gen::<f64>();
    let v1 = [-p1[1] / r * speed, p1[0] / r * speed];
    let v2 = [-v1[0], -v1[1]];
    vec![p1[0], p1[1], p2[0], p2[1], v1[0], v1[1], v2[0], v2[1]]
}

/// Leapfrog integration of two unit masses under inverse-square
/// attraction; returns the final positions as a [2, 2] buffer. The
/// integrator commutes with rotations exactly (up to roundoff), which
/// makes the task a clean equivariant regression target.
pub fn integrate_twobody(state: &[f64], dt: f64, steps: usize) -> Vec<f64> {
    assert_eq!(state.len(), 8, "state is positions then velocities for two bodies");
    let mut p = [state[0], state[1], state[2], state[3]];
    let mut v = [state[4], state[5], state[6], state[7]];
    let accel = |p: &[f64; 4]| -> [f64; 4] {
        let dx = p[2] - p[0];
        let dy = p[3] - p[1];
        let r2 = (dx * dx + dy * dy).max(1e-6);
        let inv_r3 = 1.0 / (r2 * r2.sqrt());
        [dx * inv_r3, dy * inv_r3, -dx * inv_r3, -dy * inv_r3]
    };
    let mut a = accel(&p);
    for _ in 0..steps {
        for i in 0..4 {
            v[i] += 0.5 * dt * a[i];
        }
        for i in 0..4 {
            p[i] += dt * v[i];
        }
        a = accel(&p);
        for i in 0..4 {
            v[i] += 0.5 * dt * a[i];
        }
    }
    p.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{symmetrize_full, wasserstein1_budgeted};

    #[test]
    fn templates_have_orientation_only_differences() {
        // classes 0 and 1 share all point norms; only orientation differs
        let t0 = shape_template(0);
        let t1 = shape_template(1);
        let mut n0: Vec<f64> = t0.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
        let mut n1: Vec<f64> = t1.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
        n0.sort_by(f64::total_cmp);
        n1.sort_by(f64::total_cmp);
        for (a, b) in n0.iter().zip(&n1) {
            assert!((a - b).abs() < 1e-15);
        }
        // and each template's mean is off the origin, so pooling keeps
        // the orientation information
        for c in 0..N_CLASSES {
            let flat: Vec<f64> = shape_template(c).into_iter().flatten().collect();
            let m = pool_cloud(&flat);
            assert!((m[0] * m[0] + m[1] * m[1]).sqrt() > 0.15, "class {c} template centered");
        }
    }

    #[test]
    fn sampled_labels_are_balanced() {
        let task = ShapeTask::aligned("C4");
        let mut rng = Rng::seed_from_u64(0);
        let mut counts = [0usize; N_CLASSES];
        for _ in 0..3000 {
            let (_, label) = sample_shape(&task, &mut rng);
            counts[label] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 150.0, "imbalanced counts {counts:?}");
        }
    }

    #[test]
    fn aligned_distribution_has_visible_symmetry_gap() {
        let mut rng = Rng::seed_from_u64(1);
        let task = ShapeTask::aligned("C4");
        let p = pooled_distribution(&task, 18, &mut rng);
        let g = crate::groups::c4();
        let sym = symmetrize_full(&p, &g, &Representation::Standard, &Representation::Trivial(N_CLASSES));
        let (d, _) = wasserstein1_budgeted(&p, &sym, 10_000).unwrap();
        assert!(d > 0.1, "aligned gap only {d}");
    }

    #[test]
    fn symmetric_distribution_gap_is_sampling_noise() {
        let mut rng = Rng::seed_from_u64(2);
        let task = ShapeTask::symmetric("C4");
        let p = pooled_distribution(&task, 18, &mut rng);
        let g = crate::groups::c4();
        let sym = symmetrize_full(&p, &g, &Representation::Standard, &Representation::Trivial(N_CLASSES));
        let (d_sym, _) = wasserstein1_budgeted(&p, &sym, 10_000).unwrap();
        let task_a = ShapeTask::aligned("C4");
        let pa = pooled_distribution(&task_a, 18, &mut rng);
        let sym_a = symmetrize_full(&pa, &g, &Representation::Standard, &Representation::Trivial(N_CLASSES));
        let (d_aligned, _) = wasserstein1_budgeted(&pa, &sym_a, 10_000).unwrap();
        assert!(
            d_sym < 0.5 * d_aligned,
            "symmetric gap {d_sym} not clearly below aligned gap {d_aligned}"
        );
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = Tensor::constant(vec![3], vec![2.0, -1.0, 0.5]);
        let loss = cross_entropy(&logits, 0).item();
        let z = [2.0f64, -1.0, 0.5];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((loss - (lse - 2.0)).abs() < 1e-12);
        // gradient is softmax minus one-hot
        let l = Tensor::param(vec![3], vec![2.0, -1.0, 0.5]);
        let loss = cross_entropy(&l, 1);
        loss.backward();
        let g = l.grad().unwrap();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (i, gi) in g.iter().enumerate() {
            let soft = z[i].exp() / denom - if i == 1 { 1.0 } else { 0.0 };
            assert!((gi - soft).abs() < 1e-12);
        }
    }

    #[test]
    fn recursion_matches_closed_form_hand_values() {
        // a = b = 1, h0 = 5, l = 1: 3 then 7/3
        let (h, closed) = run_state_recursion(5.0, 1.0, 1.0, &[1.0]);
        assert!((h - 3.0).abs() < 1e-15);
        assert!((closed - 3.0).abs() < 1e-15);
        let (h, closed) = run_state_recursion(5.0, 1.0, 1.0, &[1.0, 1.0]);
        assert!((h - 7.0 / 3.0).abs() < 1e-15);
        assert!((closed - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recursion_closed_form_long_run() {
        let mut rng = Rng::seed_from_u64(3);
        let ls: Vec<f64> = (0..50_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h, closed) = run_state_recursion(0.7, 0.01, 1.0, &ls);
        assert!((h - closed).abs() < 1e-12, "gap {}", (h - closed).abs());
    }

    #[test]
    fn harness_converges_to_driving_mean() {
        let res = lemma_harness(2.0, 1.0, 1.0, 100_000, 0.4, 0.3, 7);
        assert!(res.within_3_stderr, "h_final {} expected {} stderr {}", res.h_final, res.expected, res.stderr);
        assert!(res.closed_form_gap < 1e-12);
        assert!((res.h_final - 0.4).abs() < 0.01);
    }

    #[test]
    fn harness_tracks_decaying_perturbation() {
        // driving values mean + delta_t with delta_t -> 0 pull the state
        // to the mean despite an initial bias
        let mean = -0.25;
        let ls: Vec<f64> = (0..200_000)
            .map(|i| mean + 3.0 / (1.0 + i as f64).sqrt())
            .collect();
        let (h, closed) = run_state_recursion(1.0, 1.0, 1.0, &ls);
        assert!((h - closed).abs() < 1e-12);
        assert!((h - mean).abs() < 0.05, "h = {h}");
    }

    #[test]
    fn twobody_integrator_commutes_with_rotation() {
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..10 {
            let state = sample_twobody_initial(&mut rng);
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (th.cos(), th.sin());
            let rot2 = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
            let mut rotated = Vec::with_capacity(8);
            for i in 0..4 {
                let (x, y) = rot2(state[2 * i], state[2 * i + 1]);
                rotated.push(x);
                rotated.push(y);
            }
            let out_then_rot: Vec<f64> = {
                let out = integrate_twobody(&state, 0.01, 200);
                let mut v = Vec::new();
                for i in 0..2 {
                    let (x, y) = rot2(out[2 * i], out[2 * i + 1]);
                    v.push(x);
                    v.push(y);
                }
                v
            };
            let rot_then_out = integrate_twobody(&rotated, 0.01, 200);
            for (a, b) in out_then_rot.iter().zip(&rot_then_out) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn twobody_conserves_momentum() {
        let mut rng = Rng::seed_from_u64(5);
        let state = sample_twobody_initial(&mut rng);
        // total momentum is zero at init and the force is internal, so
        // the center of mass stays put
        let out = integrate_twobody(&state, 0.01, 500);
        let cm = [(out[0] + out[2]) / 2.0, (out[1] + out[3]) / 2.0];
        let cm0 = [(state[0] + state[2]) / 2.0, (state[1] + state[3]) / 2.0];
        assert!((cm[0] - cm0[0]).abs() < 1e-9);
        assert!((cm[1] - cm0[1]).abs() < 1e-9);
    }

    #[test]
    fn short_training_runs_and_logs() {
        let task = ShapeTask::symmetric("C4");
        let cfg = TrainConfig {
            steps: 120,
            log_every: 40,
            test_samples: 30,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(&task, &cfg).unwrap();
        assert!(out.final_train_loss.is_finite());
        assert!(out.test_loss.is_finite());
        assert!(!out.log.rows.is_empty());
        // schema: one row per (logged step, layer, term)
        let first = &out.log.rows[0];
        assert_eq!(first.step, 0);
        let csv = out.log.to_csv();
        assert!(csv.starts_with("step,loss,layer,term,alpha,beta,h_norm\n"));
        let cols = csv.lines().nth(1).unwrap().split(',').count();
        assert_eq!(cols, 7);
    }

    #[test]
    fn baseline_training_stays_exactly_equivariant() {
        let task = ShapeTask::aligned("C4");
        let cfg = TrainConfig {
            steps: 150,
            baseline: true,
            test_samples: 20,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut out = train(&task, &cfg).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let v = out
            .model
            .invariance_violation(&Group::by_name("C4").unwrap(), 20, &mut rng);
        assert!(v < 1e-10, "baseline violation {v}");
        for a in out.final_alphas.iter().flatten() {
            assert_eq!(*a, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let task = ShapeTask::symmetric("C4");
        let cfg = TrainConfig { steps: 80, test_samples: 10, seed: 21, ..TrainConfig::default() };
        let a = train(&task, &cfg).unwrap();
        let b = train(&task, &cfg).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv(), "trajectories must be byte identical");
        assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
    }

    #[test]
    fn relaxed_layers_keep_runtime_state_in_sync() {
        let task = ShapeTask::aligned("C4");
        let cfg = TrainConfig { steps: 50, test_samples: 5, seed: 2, ..TrainConfig::default() };
        let out = train(&task, &cfg).unwrap();
        for layer in &out.model.layers {
            assert_eq!(layer.state.t, 50, "one state update per optimizer step");
            assert!(layer.state.prev_pair.is_some());
        }
    }
}
