//! Exactly equivariant linear maps and the unconstrained relaxation
//! terms they are combined with.
//!
//! Finite groups get intertwiners by group averaging of a raw weight
//! matrix; continuous rotation groups get the channel-mixing
//! construction, which is equivariant for every rotation at once without
//! any integration.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::RecmError;
use crate::groups::{FiniteGroup, Group, GroupElement, Representation};
use crate::tensor::Tensor;
use crate::Rng;

/// How a layer's features carry the group action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayout {
    /// Column vector acted on by the representation matrix from the left.
    Vector,
    /// `channels x d` matrix whose rows are d-vectors, each acted on by
    /// the rotation; the action is right multiplication by rho(g)^T.
    Channels,
}

/// Apply the group action to a plain feature matrix under the given layout.
pub fn act(rep: &Representation, layout: FeatureLayout, g: &GroupElement, x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = rep.apply(g);
    match layout {
        FeatureLayout::Vector => &m * x,
        FeatureLayout::Channels => x * m.transpose(),
    }
}

/// Group average of the conjugated weight: (1/|G|) sum_g rho_out(g^-1) W rho_in(g).
/// The result satisfies W rho_in(g) = rho_out(g) W for every element, and the
/// map W -> W_eq is linear and idempotent.
pub fn reynolds_project(
    w: &DMatrix<f64>,
    rep_in: &Representation,
    rep_out: &Representation,
    group: &FiniteGroup,
) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(w.nrows(), w.ncols());
    for i in 0..group.order() {
        let g = group.element(i);
        let g_inv = group.element(group.inverse_of(i));
        acc += rep_out.apply(&g_inv) * w * rep_in.apply(&g);
    }
    acc / group.order() as f64
}

/// Differentiable version of [`reynolds_project`]: the representation
/// matrices enter as constants, so gradients flow linearly back to the
/// raw weight tensor.
pub fn reynolds_project_tensor(
    w: &Tensor,
    rep_in: &Representation,
    rep_out: &Representation,
    group: &FiniteGroup,
) -> Tensor {
    assert_eq!(w.shape().len(), 2, "projection expects a 2-d weight");
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut acc: Option<Tensor> = None;
    for i in 0..group.order() {
        let g = group.element(i);
        let g_inv = group.element(group.inverse_of(i));
        let left = rep_out.apply(&g_inv);
        let right = rep_in.apply(&g);
        assert_eq!(left.ncols(), rows, "rep_out dimension does not match weight rows");
        assert_eq!(right.nrows(), cols, "rep_in dimension does not match weight cols");
        let left_t = Tensor::constant(
            vec![left.nrows(), left.ncols()],
            left.transpose().as_slice().to_vec(), // nalgebra stores column-major
        );
        let right_t = Tensor::constant(
            vec![right.nrows(), right.ncols()],
            right.transpose().as_slice().to_vec(),
        );
        let term = left_t.matmul(w).matmul(&right_t);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.unwrap().scale(1.0 / group.order() as f64)
}

/// Linear layer constrained to the intertwiner space of a finite group by
/// projecting its raw weight on every forward pass.
pub struct LinearIntertwiner {
    pub weight: Tensor,
    pub group: FiniteGroup,
    pub rep_in: Representation,
    pub rep_out: Representation,
}

impl LinearIntertwiner {
    pub fn new(
        weight: Tensor,
        group: FiniteGroup,
        rep_in: Representation,
        rep_out: Representation,
    ) -> Self {
        let d = group.dim();
        assert_eq!(weight.shape()[0], rep_out.dim(d));
        assert_eq!(weight.shape()[1], rep_in.dim(d));
        LinearIntertwiner {
            weight,
            group,
            rep_in,
            rep_out,
        }
    }

    pub fn projected(&self) -> Tensor {
        reynolds_project_tensor(&self.weight, &self.rep_in, &self.rep_out, &self.group)
    }

    pub fn forward(&self, z: &Tensor) -> Tensor {
        let n = self.weight.shape()[1];
        let out = self.projected().matmul(&z.reshape(vec![n, 1]));
        out.reshape(vec![self.weight.shape()[0]])
    }
}

/// Channel-mixing layer for vector features: rows of a `c_in x d` feature
/// matrix are mixed by a learned `c_out x c_in` matrix. Rotating every
/// row commutes with the mix, so the layer is equivariant for the whole
/// rotation group by construction.
pub struct ChannelMixLayer {
    pub mix: Tensor,
}

impl ChannelMixLayer {
    pub fn new(mix: Tensor) -> Self {
        assert_eq!(mix.shape().len(), 2);
        ChannelMixLayer { mix }
    }

    pub fn forward(&self, z: &Tensor) -> Tensor {
        assert_eq!(z.shape().len(), 2, "channel-mix expects channels x d features");
        self.mix.matmul(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Dense,
    Bias,
    Noise,
}

impl TermKind {
    pub fn label(&self) -> &'static str {
        match self {
            TermKind::Dense => "w",
            TermKind::Bias => "b",
            TermKind::Noise => "noise",
        }
    }
}

/// One additive non-equivariant candidate term of a relaxed layer.
pub struct UnconstrainedTerm {
    pub kind: TermKind,
    pub params: Tensor,
    pub norm_bound: f64,
    pub out_shape: Vec<usize>,
}

impl UnconstrainedTerm {
    /// Fully unconstrained linear map on the flattened feature.
    pub fn dense(w: Tensor, out_shape: Vec<usize>, norm_bound: f64) -> Self {
        assert_eq!(w.shape()[0], out_shape.iter().product::<usize>());
        UnconstrainedTerm {
            kind: TermKind::Dense,
            params: w,
            norm_bound,
            out_shape,
        }
    }

    /// Constant bias in the output space.
    pub fn bias(b: Tensor, norm_bound: f64) -> Self {
        let out_shape = b.shape().to_vec();
        UnconstrainedTerm {
            kind: TermKind::Bias,
            params: b,
            norm_bound,
            out_shape,
        }
    }

    /// Gaussian noise with learnable standard deviation; evaluates to its
    /// mean (zero) when no RNG is supplied.
    pub fn noise(sigma: Tensor, out_shape: Vec<usize>, norm_bound: f64) -> Self {
        assert_eq!(sigma.len(), 1);
        UnconstrainedTerm {
            kind: TermKind::Noise,
            params: sigma,
            norm_bound,
            out_shape,
        }
    }

    pub fn forward(&self, z: &Tensor, rng: Option<&mut Rng>) -> Tensor {
        let n_out: usize = self.out_shape.iter().product();
        match self.kind {
            TermKind::Dense => {
                let n_in = self.params.shape()[1];
                assert_eq!(z.len(), n_in, "dense term input length mismatch");
                self.params
                    .matmul(&z.reshape(vec![n_in, 1]))
                    .reshape(self.out_shape.clone())
            }
            TermKind::Bias => self.params.reshape(self.out_shape.clone()),
            TermKind::Noise => {
                let eps: Vec<f64> = match rng {
                    Some(r) => {
                        // sigma kept nonnegative by construction; eps ~ N(0, 1)
                        (0..n_out).map(|_| StandardNormal.sample(r)).collect()
                    }
                    None => vec![0.0; n_out],
                };
                Tensor::constant(self.out_shape.clone(), eps).scalar_mul(&self.params)
            }
        }
    }

    /// Rescales the parameters back onto the Frobenius-norm ball after an
    /// optimizer step; the noise sigma is additionally kept nonnegative.
    pub fn clamp_norm(&self) {
        if self.kind == TermKind::Noise {
            self.params.update_data(|d| {
                if d[0] < 0.0 {
                    d[0] = -d[0];
                }
            });
        }
        let norm = self.params.frobenius_norm();
        if norm > self.norm_bound {
            let s = self.norm_bound / norm;
            self.params.update_data(|d| {
                for v in d {
                    *v *= s;
                }
            });
        }
    }
}

/// beta * eq_out + sum_i alpha_i * un_i, with every factor on the tape.
pub fn apply_relaxed(eq_out: &Tensor, un_outs: &[Tensor], beta: &Tensor, alphas: &[Tensor]) -> Tensor {
    assert_eq!(
        un_outs.len(),
        alphas.len(),
        "one modulation scalar per unconstrained term"
    );
    let mut out = eq_out.scalar_mul(beta);
    for (un, alpha) in un_outs.iter().zip(alphas) {
        out = out.add(&un.scalar_mul(alpha));
    }
    out
}

/// Max violation of f(g . v) = g . f(v) over sampled elements and inputs.
pub fn check_equivariance<F>(
    mut f: F,
    group: &Group,
    rep_in: &Representation,
    layout_in: FeatureLayout,
    rep_out: &Representation,
    layout_out: FeatureLayout,
    channels: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> f64
where
    F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
{
    assert!(n_samples >= 1);
    let gd = group.dim();
    let in_shape = match layout_in {
        FeatureLayout::Vector => (rep_in.dim(gd), 1),
        FeatureLayout::Channels => (channels, rep_in.dim(gd)),
    };
    let mut worst = 0.0_f64;
    for _ in 0..n_samples {
        let v = DMatrix::from_fn(in_shape.0, in_shape.1, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let g = group.haar_sample(rng);
        let lhs = f(&act(rep_in, layout_in, &g, &v));
        let rhs = act(rep_out, layout_out, &g, &f(&v));
        let diff = lhs - rhs;
        worst = worst.max(diff.iter().fold(0.0_f64, |a, x| a.max(x.abs())));
    }
    worst
}

/// Convenience error used when a continuous group reaches a finite-only path.
pub fn require_finite(group: &Group) -> Result<&FiniteGroup, RecmError> {
    match group {
        Group::Finite(g) => Ok(g),
        Group::Continuous(_) => Err(RecmError::contract(
            "operation requires a finite group (use the channel-mix construction for continuous groups)",
        )),
    }
}
