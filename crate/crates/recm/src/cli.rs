//! Batch command-line surface: train runs, verification suites, and
//! plot-ready CSV extraction.
//!
//! Exit codes are a stable contract: 0 success, 2 usage or config
//! error, 3 runtime abort.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::equivariant::{
    check_equivariance, ChannelMixLayer, FeatureLayout, LinearIntertwiner, UnconstrainedTerm,
};
use crate::error::RecmError;
use crate::experiments::{
    evaluate, fmt_float, lemma_harness, train, Model, ShapeTask, SymmetryMode, TrainConfig,
};
use crate::groups::{c2, c4, s2, s3, FiniteGroup, GeneratingSet, Group, Representation};
use crate::modulation::{
    l_theta, EqPath, LayerSnapshot, PruneReport, RecmLayer, RecmState, UpdateFn, UpdateNet,
};
use crate::tensor::{gradcheck, Tensor};
use crate::transport::{
    kantorovich_lower, symmetrize_full, symmetrize_generators, total_variation,
    verify_upper_bound, EmpiricalDistribution,
};
use crate::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Parser)]
#[command(name = "recm", about = "relaxed-equivariance experiments and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write trajectory, summary,
    /// and a pruned model snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one verification suite and write per-trial results.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Split a trajectory CSV into per-(layer, term) series.
    Plotdata {
        /// trajectory.csv produced by `train`.
        input: PathBuf,
        /// Restrict extraction to one layer.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

// ---- config ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// "C4" or "SO2".
    pub group: String,
    /// "symmetric" or "aligned".
    pub mode: String,
    pub jitter: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { group: "C4".into(), mode: "symmetric".into(), jitter: 0.02 }
    }
}

/// A run is reproducible from this file plus the seed alone.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RecmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RecmError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| RecmError::Config(format!("bad config: {e}")))?;
        cfg.validated()
    }

    fn validated(self) -> Result<Self, RecmError> {
        match self.task.mode.as_str() {
            "symmetric" | "aligned" => {}
            other => return Err(RecmError::Config(format!("unknown task mode {other:?}"))),
        }
        Group::by_name(&self.task.group)
            .map_err(|_| RecmError::Config(format!("unknown group {:?}", self.task.group)))?;
        if self.train.steps == 0 || self.train.a <= 0.0 || self.train.b <= 0.0 {
            return Err(RecmError::Config("steps must be positive and decay constants > 0".into()));
        }
        Ok(self)
    }

    pub fn task(&self) -> ShapeTask {
        ShapeTask {
            group: self.task.group.clone(),
            mode: if self.task.mode == "aligned" {
                SymmetryMode::Aligned
            } else {
                SymmetryMode::Symmetric
            },
            jitter: self.task.jitter,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSnapshot {
    version: u32,
    layers: Vec<LayerSnapshot>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    prune_reports: Vec<PruneReport>,
}

// ---- entry point ----

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Verify { suite, trials, seed, out } => cmd_verify(&suite, trials, seed, &out),
        Command::Plotdata { input, layer, out } => cmd_plotdata(&input, layer.as_deref(), &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RecmError::Config(_) | RecmError::Io(_) => EXIT_USAGE,
                _ => EXIT_ABORT,
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RecmError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::write(path, contents)?)
}

// ---- train ----

pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<i32, RecmError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let task = cfg.task();
    let mut outcome = train(&task, &cfg.train)?;
    write_file(&out.join("trajectory.csv"), &outcome.log.to_csv())?;

    let reports = outcome.model.prune_all(cfg.train.prune_eps);
    let group = Group::by_name(&task.group).expect("validated group");
    let mut check_rng = Rng::seed_from_u64(cfg.train.seed ^ 0xC0FFEE);
    let violation = outcome.model.invariance_violation(&group, 50, &mut check_rng);
    let mut test_rng = Rng::seed_from_u64(cfg.train.seed ^ 0x5EED_5EED_5EED_5EED);
    let pruned_test_loss = evaluate(&mut outcome.model, &task, cfg.train.test_samples, &mut test_rng);

    let mut summary = String::new();
    summary.push_str(&format!(
        "task: group={} mode={} jitter={}\n",
        cfg.task.group, cfg.task.mode, cfg.task.jitter
    ));
    summary.push_str(&format!(
        "train: steps={} seed={} a={} b={} lr={} batch={}\n",
        cfg.train.steps, cfg.train.seed, cfg.train.a, cfg.train.b, cfg.train.lr, cfg.train.batch_size
    ));
    summary.push_str(&format!("final train loss: {}\n", fmt_float(outcome.final_train_loss)));
    summary.push_str(&format!("test loss: {}\n", fmt_float(outcome.test_loss)));
    for (li, (alphas, beta)) in outcome.final_alphas.iter().zip(&outcome.final_betas).enumerate() {
        let terms: Vec<String> = outcome.model.layers[li]
            .terms
            .iter()
            .zip(alphas)
            .map(|(t, a)| format!("{}={}", t.kind.label(), fmt_float(*a)))
            .collect();
        summary.push_str(&format!(
            "layer{li}: beta={} alphas[{}]\n",
            fmt_float(*beta),
            terms.join(" ")
        ));
    }
    for (li, r) in reports.iter().enumerate() {
        summary.push_str(&format!(
            "layer{li} pruning: retained={:?} extra_params={} equivariant_params={}\n",
            r.retained, r.retained_unconstrained_params, r.equivariant_params
        ));
    }
    summary.push_str(&format!("post-prune invariance violation: {}\n", fmt_float(violation)));
    summary.push_str(&format!("post-prune test loss: {}\n", fmt_float(pruned_test_loss)));
    write_file(&out.join("summary.txt"), &summary)?;

    let snapshot = ModelSnapshot {
        version: 1,
        layers: outcome.model.snapshots(),
        head_w: outcome.model.head_w.value(),
        head_b: outcome.model.head_b.value(),
        prune_reports: reports,
    };
    let json = serde_json::to_string_pretty(&snapshot)
        .map_err(|e| RecmError::Config(format!("cannot serialize model: {e}")))?;
    write_file(&out.join("model.json"), &json)?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

// ---- verify ----

/// One verification trial: a pass flag plus named diagnostic values.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub index: usize,
    pub pass: bool,
    pub fields: Vec<(&'static str, f64)>,
}

impl TrialOutcome {
    /// Looks up a named diagnostic value.
    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

pub const SUITES: [&str; 6] =
    ["lemma41", "thm42-upper", "thm42-lower", "lemma43", "equivariance", "gradcheck"];

pub fn default_trials(suite: &str) -> usize {
    match suite {
        "lemma41" => 6,
        "thm42-upper" => 200,
        "thm42-lower" => 20,
        "lemma43" => 100,
        "equivariance" => 12,
        "gradcheck" => 50,
        _ => 1,
    }
}

fn trial_seed(root: u64, index: usize) -> u64 {
    root.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs a named suite with deterministic per-trial seeds; the suites are
/// pure functions of (suite, trials, seed).
pub fn run_suite(suite: &str, trials: usize, seed: u64) -> Result<Vec<TrialOutcome>, RecmError> {
    if trials == 0 {
        return Err(RecmError::Config("trials must be at least 1".into()));
    }
    let f: fn(usize, u64) -> TrialOutcome = match suite {
        "lemma41" => trial_lemma41,
        "thm42-upper" => trial_upper,
        "thm42-lower" => trial_lower,
        "lemma43" => trial_fixed_point,
        "equivariance" => trial_equivariance,
        "gradcheck" => trial_gradcheck,
        other => return Err(RecmError::Config(format!("unknown suite {other:?}"))),
    };
    Ok((0..trials).map(|i| f(i, trial_seed(seed, i))).collect())
}

fn random_group(trial: usize) -> (FiniteGroup, GeneratingSet) {
    if trial % 2 == 0 {
        (c4(), GeneratingSet::canonical_for("C4").unwrap())
    } else {
        (s3(), GeneratingSet::canonical_for("S3").unwrap())
    }
}

fn random_distribution(dim: usize, rng: &mut Rng) -> EmpiricalDistribution {
    let k = rng.gen_range(2..5);
    let pts: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..2 * dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let mut ws: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = ws.iter().sum();
    for w in &mut ws {
        *w /= total;
    }
    EmpiricalDistribution::new(pts, ws, dim).expect("random distribution")
}

/// State-recursion convergence: long stationary runs agree with the
/// closed form to 1e-12 and land within three standard errors of the
/// driving mean; odd trials add a decaying perturbation.
fn trial_lemma41(index: usize, seed: u64) -> TrialOutcome {
    let mut rng = Rng::seed_from_u64(seed);
    let h0 = rng.gen_range(-2.0..2.0);
    let mean = rng.gen_range(-1.0..1.0);
    let sd = rng.gen_range(0.1..0.5);
    let t_max = 100_000;
    if index % 2 == 0 {
        let res = lemma_harness(h0, 1.0, 1.0, t_max, mean, sd, seed ^ 1);
        TrialOutcome {
            index,
            pass: res.within_3_stderr && res.closed_form_gap < 1e-12,
            fields: vec![
                ("h_final", res.h_final),
                ("expected", res.expected),
                ("stderr", res.stderr),
                ("closed_form_gap", res.closed_form_gap),
            ],
        }
    } else {
        // perturbation decaying like t^{-1/2}; the state must still reach
        // the underlying mean
        let ls: Vec<f64> = (0..t_max)
            .map(|i| {
                let n: f64 = rng.gen_range(-1.0..1.0);
                mean + 2.0 / (1.0 + i as f64).sqrt() + sd * n
            })
            .collect();
        let (h, closed) = crate::experiments::run_state_recursion(h0, 1.0, 1.0, &ls);
        let gap = (h - closed).abs();
        let dev = (h - mean).abs();
        TrialOutcome {
            index,
            pass: gap < 1e-12 && dev < 0.1,
            fields: vec![("h_final", h), ("deviation", dev), ("closed_form_gap", gap)],
        }
    }
}

/// Deviation bound: |E_p[l]| per coordinate against 2 B W1(p, p_G) for a
/// random net and random discrete p; every third trial uses an invariant
/// p, for which the left side must vanish outright.
fn trial_upper(index: usize, seed: u64) -> TrialOutcome {
    let mut rng = Rng::seed_from_u64(seed);
    let (group, gens) = random_group(index);
    let dim = group.dim();
    let rep = Representation::Standard;
    let net = UpdateNet::new(2 * dim, 16, 16, rng.gen_range(0.5..2.0), &mut rng);
    let p_raw = random_distribution(dim, &mut rng);
    let invariant_case = index % 3 == 2;
    let p = if invariant_case {
        symmetrize_full(&p_raw, &group, &rep, &rep)
    } else {
        p_raw
    };
    match verify_upper_bound(&net, &p, &group, &gens, &rep, &rep) {
        Ok(check) => {
            let max_lhs = check.lhs.iter().fold(0.0f64, |a, v| a.max(*v));
            let pass = if invariant_case {
                max_lhs < 1e-10
            } else {
                check.margin >= -1e-8
            };
            TrialOutcome {
                index,
                pass,
                fields: vec![
                    ("max_lhs", max_lhs),
                    ("w1", check.w1),
                    ("margin", check.margin),
                    ("invariant", if invariant_case { 1.0 } else { 0.0 }),
                ],
            }
        }
        Err(_) => TrialOutcome { index, pass: false, fields: vec![] },
    }
}

/// Tightness: a trained Lipschitz-budgeted scalar update function must
/// recover at least half of the dual optimum C W1(p, generator average).
fn trial_lower(index: usize, seed: u64) -> TrialOutcome {
    let mut rng = Rng::seed_from_u64(seed);
    let (_, gens) = random_group(index);
    let dim = gens.generators[0].nrows();
    let rep = Representation::Standard;
    let p = random_distribution(dim, &mut rng);
    match kantorovich_lower(&p, &gens, &rep, &rep, 1.0, 2000, 0.05, &mut rng) {
        Ok(res) => TrialOutcome {
            index,
            pass: res.ratio >= 0.5,
            fields: vec![
                ("achieved", res.achieved),
                ("w1_gen", res.w1_gen),
                ("ratio", res.ratio),
                ("lipschitz", res.lipschitz),
            ],
        },
        Err(_) => TrialOutcome { index, pass: false, fields: vec![] },
    }
}

/// Fixed-point equivalence: being unmoved by the generator average is
/// the same as invariance under every element of the generated group.
fn trial_fixed_point(index: usize, seed: u64) -> TrialOutcome {
    let mut rng = Rng::seed_from_u64(seed);
    let (group, gens) = random_group(index);
    let dim = group.dim();
    let rep = Representation::Standard;
    let p_raw = random_distribution(dim, &mut rng);
    // rotate among generic, fully symmetrized, and (for C4) partially
    // symmetrized distributions so both directions of the equivalence
    // carry weight
    let p = match index % 3 {
        0 => p_raw,
        1 => symmetrize_full(&p_raw, &group, &rep, &rep),
        _ => {
            if group.name == "C4" {
                // invariant under the half-turn subgroup only
                let half = crate::groups::cyclic(2);
                let mut sub = symmetrize_full(&p_raw, &half, &rep, &rep);
                sub.normalize();
                sub
            } else {
                p_raw
            }
        }
    };
    let gen_avg = symmetrize_generators(&p, &gens, &rep, &rep);
    let fixed = total_variation(&p, &gen_avg) < 1e-10;
    let invariant = crate::transport::invariant_under_each_element(&p, &group, &rep, &rep, 1e-10);
    TrialOutcome {
        index,
        pass: fixed == invariant,
        fields: vec![
            ("tv_gap", total_variation(&p, &gen_avg)),
            ("fixed", if fixed { 1.0 } else { 0.0 }),
            ("invariant", if invariant { 1.0 } else { 0.0 }),
        ],
    }
}

/// Constructed-layer equivariance: Reynolds-projected layers over the
/// finite groups and channel-mixing layers over the rotation groups.
fn trial_equivariance(index: usize, seed: u64) -> TrialOutcome {
    let mut rng = Rng::seed_from_u64(seed);
    let construction = index % 6;
    let violation = match construction {
        c @ 0..=3 => {
            let group = match c {
                0 => c2(),
                1 => c4(),
                2 => s2(),
                _ => s3(),
            };
            let d = group.dim();
            let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let layer = LinearIntertwiner::new(
                Tensor::param(vec![d, d], w),
                group.clone(),
                Representation::Standard,
                Representation::Standard,
            );
            check_equivariance(
                |x| {
                    let v: Vec<f64> = (0..d).map(|i| x[(i, 0)]).collect();
                    let out = layer.forward(&Tensor::constant(vec![d], v)).value();
                    nalgebra::DMatrix::from_column_slice(d, 1, &out)
                },
                &Group::Finite(group),
                &Representation::Standard,
                FeatureLayout::Vector,
                &Representation::Standard,
                FeatureLayout::Vector,
                0,
                100,
                &mut rng,
            )
        }
        c => {
            let group = Group::by_name(if c == 4 { "SO2" } else { "SO3" }).unwrap();
            let d = group.dim();
            let channels = 5;
            let w: Vec<f64> = (0..channels * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let layer = ChannelMixLayer::new(Tensor::param(vec![channels, channels], w));
            check_equivariance(
                |x| {
                    let v: Vec<f64> = (0..channels)
                        .flat_map(|i| (0..d).map(move |j| x[(i, j)]))
                        .collect();
                    let out = layer.forward(&Tensor::constant(vec![channels, d], v)).value();
                    nalgebra::DMatrix::from_row_slice(channels, d, &out)
                },
                &group,
                &Representation::Standard,
                FeatureLayout::Channels,
                &Representation::Standard,
                FeatureLayout::Channels,
                channels,
                100,
                &mut rng,
            )
        }
    };
    TrialOutcome {
        index,
        pass: violation < 1e-10,
        fields: vec![("violation", violation), ("construction", construction as f64)],
    }
}

/// Analytic gradients against central finite differences on rotating
/// graph constructions, including a full relaxed-layer step.
fn trial_gradcheck(index: usize, seed: u64) -> TrialOutcome {
    let mut rng = Rng::seed_from_u64(seed);
    let kind = index % 5;
    let rel = match kind {
        0 => {
            // two-layer perceptron, sum-of-squares readout
            let net = UpdateNet::new(4, 8, 6, 1.0, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let params = net.params();
            gradcheck(&params, || {
                let out = net.forward(&Tensor::constant(vec![4], x.clone()));
                out.mul(&out).sum()
            })
        }
        1 => {
            // update function through the generator average
            let net = UpdateNet::new(4, 8, 8, 1.0, &mut rng);
            let gens = GeneratingSet::canonical_for("C4").unwrap();
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let params = net.params();
            gradcheck(&params, || {
                let l = l_theta(
                    &net,
                    &Tensor::constant(vec![2], z.clone()),
                    &Tensor::constant(vec![2], y.clone()),
                    &gens,
                    &Representation::Standard,
                    &Representation::Standard,
                )
                .unwrap();
                l.mul(&l).sum()
            })
        }
        2 => {
            // full relaxed-layer forward after one state update, so the
            // gradient path through the modulation readout is live
            let layer = std::cell::RefCell::new(gradcheck_layer(&mut rng));
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            {
                let mut l = layer.borrow_mut();
                let zt = Tensor::constant(vec![2], z.clone());
                let _ = l.forward(&zt, None);
                l.step_hooks(&[vec![1.0, 0.0]]).unwrap();
            }
            let params = layer.borrow().params();
            gradcheck(&params, || {
                let mut l = layer.borrow_mut();
                l.refresh_state_graph().unwrap();
                let zt = Tensor::constant(vec![2], z.clone());
                let out = l.forward(&zt, None);
                l.clear_pending();
                out.mul(&out).sum()
            })
        }
        3 => {
            // Reynolds-projected layer
            let group = s3();
            let w = Tensor::param(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let layer = LinearIntertwiner::new(
                w.clone(),
                group,
                Representation::Standard,
                Representation::Standard,
            );
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            gradcheck(&[w], || {
                let out = layer.forward(&Tensor::constant(vec![3], x.clone()));
                out.mul(&out).sum()
            })
        }
        _ => {
            // mixed elementwise chain over a channels-shaped tensor
            let p = Tensor::param(
                vec![4, 3],
                (0..12).map(|_| rng.gen_range(0.2..1.0)).collect(),
            );
            gradcheck(&[p.clone()], || {
                let gate = p.row_norms().sigmoid();
                let gated = p.scale_rows(&gate);
                let a = gated.tanh().exp();
                let b = gated.mul(&gated).add(&Tensor::constant(vec![4, 3], vec![0.5; 12]));
                a.mul(&b.sqrt()).sum().ln()
            })
        }
    };
    TrialOutcome {
        index,
        pass: rel < 1e-6,
        fields: vec![("rel_err", rel), ("kind", kind as f64)],
    }
}

fn gradcheck_layer(rng: &mut Rng) -> RecmLayer {
    let g = c4();
    let w = Tensor::param(vec![2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let eq = EqPath::Intertwiner(LinearIntertwiner::new(
        w,
        g,
        Representation::Standard,
        Representation::Standard,
    ));
    let terms = vec![
        UnconstrainedTerm::dense(
            Tensor::param(vec![2, 2], (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            vec![2],
            2.0,
        ),
        UnconstrainedTerm::bias(
            Tensor::param(vec![2], (0..2).map(|_| rng.gen_range(-0.3..0.3)).collect()),
            2.0,
        ),
    ];
    let net = UpdateNet::new(4, 8, 8, 1.0, rng);
    let mut state = RecmState::new(8, 2, 1.0, 1.0, rng);
    state.h = (0..8).map(|_| rng.gen_range(-0.3..0.3)).collect();
    RecmLayer::new(
        "gradcheck",
        eq,
        terms,
        net,
        state,
        GeneratingSet::canonical_for("C4").unwrap(),
        Representation::Standard,
        Representation::Trivial(2),
    )
}

pub fn cmd_verify(
    suite: &str,
    trials: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<i32, RecmError> {
    let trials = trials.unwrap_or_else(|| default_trials(suite));
    let outcomes = run_suite(suite, trials, seed)?;
    let mut csv = String::from("trial,pass");
    if let Some(first) = outcomes.first() {
        for (name, _) in &first.fields {
            csv.push(',');
            csv.push_str(name);
        }
    }
    csv.push('\n');
    let mut passed = 0usize;
    for o in &outcomes {
        let verdict = if o.pass { "pass" } else { "FAIL" };
        let detail: Vec<String> = o
            .fields
            .iter()
            .map(|(n, v)| format!("{n}={v:.3e}"))
            .collect();
        println!("trial {:03}: {verdict}  {}", o.index, detail.join(" "));
        csv.push_str(&format!("{},{}", o.index, u8::from(o.pass)));
        for (_, v) in &o.fields {
            csv.push(',');
            csv.push_str(&fmt_float(*v));
        }
        csv.push('\n');
        passed += usize::from(o.pass);
    }
    println!("{suite}: {passed}/{} passed", outcomes.len());
    write_file(&out.join(format!("verify_{suite}.csv")), &csv)?;
    Ok(if passed == outcomes.len() { EXIT_OK } else { EXIT_ABORT })
}

// ---- plotdata ----

pub fn cmd_plotdata(input: &Path, layer: Option<&str>, out: &Path) -> Result<i32, RecmError> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| RecmError::Config(format!("cannot read {}: {e}", input.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "step,loss,layer,term,alpha,beta,h_norm" {
        return Err(RecmError::Config(format!("unexpected trajectory header: {header:?}")));
    }
    // (layer, term) -> (step, alpha); (layer,) -> (step, beta)
    let mut alpha_series: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    let mut beta_series: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    let mut seen_layers: Vec<String> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(RecmError::Config(format!("malformed row {}: {line:?}", ln + 2)));
        }
        let step: u64 = parts[0]
            .parse()
            .map_err(|_| RecmError::Config(format!("bad step on row {}", ln + 2)))?;
        let alpha: f64 = parts[4]
            .parse()
            .map_err(|_| RecmError::Config(format!("bad alpha on row {}", ln + 2)))?;
        let beta: f64 = parts[5]
            .parse()
            .map_err(|_| RecmError::Config(format!("bad beta on row {}", ln + 2)))?;
        let (lname, term) = (parts[2].to_string(), parts[3].to_string());
        if !seen_layers.contains(&lname) {
            seen_layers.push(lname.clone());
        }
        if let Some(filter) = layer {
            if lname != filter {
                continue;
            }
        }
        alpha_series.entry((lname.clone(), term)).or_default().push((step, alpha));
        let bs = beta_series.entry(lname).or_default();
        if bs.last().map(|(s, _)| *s) != Some(step) {
            bs.push((step, beta));
        }
    }
    if let Some(filter) = layer {
        if !seen_layers.iter().any(|l| l == filter) {
            return Err(RecmError::Config(format!(
                "layer {filter:?} not present; trajectory has {seen_layers:?}"
            )));
        }
    }
    for ((lname, term), rows) in &alpha_series {
        let mut csv = String::from("step,alpha\n");
        for (s, a) in rows {
            csv.push_str(&format!("{s},{}\n", fmt_float(*a)));
        }
        write_file(&out.join(format!("alpha_{lname}_{term}.csv")), &csv)?;
    }
    for (lname, rows) in &beta_series {
        let mut csv = String::from("step,beta\n");
        for (s, b) in rows {
            csv.push_str(&format!("{s},{}\n", fmt_float(*b)));
        }
        write_file(&out.join(format!("beta_{lname}.csv")), &csv)?;
    }
    println!(
        "wrote {} alpha series and {} beta series to {}",
        alpha_series.len(),
        beta_series.len(),
        out.display()
    );
    Ok(EXIT_OK)
}

/// Builds the distribution the multidimensional bound is checked against
/// at the end of a training run: pooled inputs paired with their one-hot
/// targets, sampled from the trained task.
pub fn final_epoch_distribution(
    task: &ShapeTask,
    n: usize,
    seed: u64,
) -> EmpiricalDistribution {
    let mut rng = Rng::seed_from_u64(seed);
    crate::experiments::pooled_distribution(task, n, &mut rng)
}

/// Convenience wrapper for the bound diagnostics of a trained model: for
/// each layer, the per-term |alpha| and the bound 2 sqrt(m) B W1.
pub fn alpha_bound_check(
    model: &Model,
    w1: f64,
    w1_stderr: f64,
) -> Vec<(Vec<f64>, f64)> {
    model
        .layers
        .iter()
        .map(|layer| {
            let (alphas, _) = crate::modulation::modulation_values(&layer.state);
            let abs: Vec<f64> = alphas.iter().map(|a| a.abs()).collect();
            let b = crate::transport::lipschitz_upper(&layer.net);
            let m = layer.state.dim() as f64;
            (abs, 2.0 * m.sqrt() * b * (w1 + 3.0 * w1_stderr))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_config_error() {
        assert!(matches!(run_suite("nope", 1, 0), Err(RecmError::Config(_))));
        assert!(matches!(run_suite("lemma43", 0, 0), Err(RecmError::Config(_))));
    }

    #[test]
    fn suites_small_smoke() {
        for suite in ["thm42-upper", "lemma43", "equivariance", "gradcheck"] {
            let outcomes = run_suite(suite, 6, 7).unwrap();
            assert_eq!(outcomes.len(), 6);
            for o in &outcomes {
                assert!(o.pass, "{suite} trial {} failed: {:?}", o.index, o.fields);
            }
        }
    }

    #[test]
    fn suite_results_are_deterministic() {
        let a = run_suite("thm42-upper", 4, 3).unwrap();
        let b = run_suite("thm42-upper", 4, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pass, y.pass);
            for ((_, u), (_, v)) in x.fields.iter().zip(&y.fields) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn config_validation() {
        let cfg: RunConfig = toml::from_str(
            "[task]\ngroup = \"C4\"\nmode = \"aligned\"\n[train]\nsteps = 100\n",
        )
        .unwrap();
        assert!(cfg.validated().is_ok());
        let bad: RunConfig = toml::from_str("[task]\nmode = \"sideways\"\n").unwrap();
        assert!(bad.validated().is_err());
        let bad2: RunConfig = toml::from_str("[task]\ngroup = \"E8\"\n").unwrap();
        assert!(bad2.validated().is_err());
    }

    #[test]
    fn plotdata_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let traj = dir.path().join("trajectory.csv");
        let mut csv = String::from("step,loss,layer,term,alpha,beta,h_norm\n");
        for step in [0u64, 10, 20] {
            for term in ["w", "b"] {
                csv.push_str(&format!("{step},0.5,layer0,{term},0.1,1.0,0.2\n"));
            }
        }
        std::fs::write(&traj, &csv).unwrap();
        let out = dir.path().join("plot");
        assert_eq!(cmd_plotdata(&traj, None, &out).unwrap(), EXIT_OK);
        let alpha = std::fs::read_to_string(out.join("alpha_layer0_w.csv")).unwrap();
        // row count equals the input step count per series
        assert_eq!(alpha.lines().count(), 4);
        let beta = std::fs::read_to_string(out.join("beta_layer0.csv")).unwrap();
        assert_eq!(beta.lines().count(), 4);
        // nonexistent layer filter is a usage error
        assert!(cmd_plotdata(&traj, Some("layer9"), &out).is_err());
    }
}
