//! Group elements as orthogonal matrices, finite-group closure, Haar
//! sampling, generating sets, and representations of the compact groups
//! used by the relaxed layers and the transport oracles.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::RecmError;
use crate::Rng;

/// An element carried with its matrix in the defining representation.
/// `index` is set for elements of an enumerated finite group.
#[derive(Clone, Debug)]
pub struct GroupElement {
    pub mat: DMatrix<f64>,
    pub index: Option<usize>,
}

impl GroupElement {
    pub fn from_matrix(mat: DMatrix<f64>) -> Self {
        GroupElement { mat, index: None }
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn orthogonality_defect(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    max_abs(&(m.transpose() * m - DMatrix::identity(d, d)))
}

/// Enumerated matrix group with multiplication and inverse tables.
#[derive(Clone, Debug)]
pub struct FiniteGroup {
    pub name: String,
    pub elements: Vec<DMatrix<f64>>,
    pub mult_table: Vec<Vec<usize>>,
    pub inverse: Vec<usize>,
    pub identity_index: usize,
}

impl FiniteGroup {
    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn dim(&self) -> usize {
        self.elements[0].nrows()
    }

    pub fn element(&self, i: usize) -> GroupElement {
        GroupElement {
            mat: self.elements[i].clone(),
            index: Some(i),
        }
    }

    pub fn multiply(&self, i: usize, j: usize) -> usize {
        self.mult_table[i][j]
    }

    pub fn inverse_of(&self, i: usize) -> usize {
        self.inverse[i]
    }
}

/// Smallest matrix group containing the generators, found by breadth-first
/// multiplication with deduplication at `tol` in the max norm. Errors out
/// once `max_elems` is exceeded, which signals a non-finite generated group.
pub fn closure(
    generators: &[DMatrix<f64>],
    tol: f64,
    max_elems: usize,
) -> Result<FiniteGroup, RecmError> {
    if generators.is_empty() {
        return Err(RecmError::contract("closure: empty generator list"));
    }
    let d = generators[0].nrows();
    for g in generators {
        if g.nrows() != d || g.ncols() != d {
            return Err(RecmError::contract("closure: generators must share one square shape"));
        }
        if orthogonality_defect(g) > 1e-9 {
            return Err(RecmError::contract("closure: generators must be orthogonal matrices"));
        }
    }
    let mut elements: Vec<DMatrix<f64>> = vec![DMatrix::identity(d, d)];
    let find = |elements: &[DMatrix<f64>], m: &DMatrix<f64>| -> Option<usize> {
        elements.iter().position(|e| max_abs(&(e - m)) < tol)
    };
    let mut frontier = vec![0usize];
    while let Some(i) = frontier.pop() {
        for g in generators {
            let prod = &elements[i] * g;
            if find(&elements, &prod).is_none() {
                elements.push(prod);
                if elements.len() > max_elems {
                    return Err(RecmError::NonFiniteClosure { max_elems });
                }
                frontier.push(elements.len() - 1);
            }
        }
    }
    // identity was seeded first
    let identity_index = 0;
    let n = elements.len();
    let mut mult_table = vec![vec![0usize; n]; n];
    let mut inverse = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            let prod = &elements[i] * &elements[j];
            let k = find(&elements, &prod)
                .ok_or_else(|| RecmError::contract("closure: product escaped the element set"))?;
            mult_table[i][j] = k;
            if k == identity_index {
                inverse[i] = j;
            }
        }
    }
    Ok(FiniteGroup {
        name: format!("closure({} gens, dim {})", generators.len(), d),
        elements,
        mult_table,
        inverse,
        identity_index,
    })
}

fn rotation2(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
}

fn rotation3_x(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
}

fn rotation3_z(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
}

fn named(mut g: FiniteGroup, name: &str) -> FiniteGroup {
    g.name = name.to_string();
    g
}

/// C2 realized as the 1x1 orthogonal matrices {+1, -1}.
pub fn c2() -> FiniteGroup {
    named(
        closure(&[DMatrix::from_row_slice(1, 1, &[-1.0])], 1e-9, 4).unwrap(),
        "C2",
    )
}

/// Planar rotation group of order n.
pub fn cyclic(n: usize) -> FiniteGroup {
    let g = rotation2(2.0 * std::f64::consts::PI / n as f64);
    named(closure(&[g], 1e-9, 4 * n).unwrap(), &format!("C{n}"))
}

pub fn c4() -> FiniteGroup {
    cyclic(4)
}

pub fn c8() -> FiniteGroup {
    cyclic(8)
}

/// S2 as the 2x2 permutation matrices {I, swap}.
pub fn s2() -> FiniteGroup {
    let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    named(closure(&[swap], 1e-9, 4).unwrap(), "S2")
}

/// S3 as 3x3 permutation matrices, generated by a swap and a 3-cycle.
pub fn s3() -> FiniteGroup {
    let swap = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let cycle = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    named(closure(&[swap, cycle], 1e-9, 12).unwrap(), "S3")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContinuousGroup {
    SO2,
    SO3,
}

impl ContinuousGroup {
    pub fn dim(&self) -> usize {
        match self {
            ContinuousGroup::SO2 => 2,
            ContinuousGroup::SO3 => 3,
        }
    }

    /// Haar-uniform random element: uniform angle for SO(2), uniform unit
    /// quaternion for SO(3).
    pub fn haar_sample(&self, rng: &mut Rng) -> GroupElement {
        match self {
            ContinuousGroup::SO2 => {
                let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                GroupElement::from_matrix(rotation2(theta))
            }
            ContinuousGroup::SO3 => {
                let mut q = [0.0_f64; 4];
                loop {
                    for v in q.iter_mut() {
                        *v = StandardNormal.sample(rng);
                    }
                    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 1e-8 {
                        for v in q.iter_mut() {
                            *v /= n;
                        }
                        break;
                    }
                }
                let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
                let mat = DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        1.0 - 2.0 * (y * y + z * z),
                        2.0 * (x * y - w * z),
                        2.0 * (x * z + w * y),
                        2.0 * (x * y + w * z),
                        1.0 - 2.0 * (x * x + z * z),
                        2.0 * (y * z - w * x),
                        2.0 * (x * z - w * y),
                        2.0 * (y * z + w * x),
                        1.0 - 2.0 * (x * x + y * y),
                    ],
                );
                GroupElement::from_matrix(mat)
            }
        }
    }
}

/// Either kind of built-in compact group, selectable by config name.
#[derive(Clone, Debug)]
pub enum Group {
    Finite(FiniteGroup),
    Continuous(ContinuousGroup),
}

impl Group {
    pub fn by_name(name: &str) -> Result<Group, RecmError> {
        Ok(match name {
            "C2" => Group::Finite(c2()),
            "C4" => Group::Finite(c4()),
            "C8" => Group::Finite(c8()),
            "S2" => Group::Finite(s2()),
            "S3" => Group::Finite(s3()),
            "SO2" => Group::Continuous(ContinuousGroup::SO2),
            "SO3" => Group::Continuous(ContinuousGroup::SO3),
            other => return Err(RecmError::contract(format!("unknown group name '{other}'"))),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Group::Finite(g) => g.dim(),
            Group::Continuous(g) => g.dim(),
        }
    }

    pub fn haar_sample(&self, rng: &mut Rng) -> GroupElement {
        match self {
            Group::Finite(g) => g.element(rng.gen_range(0..g.order())),
            Group::Continuous(g) => g.haar_sample(rng),
        }
    }
}

/// Finite subset of group elements used to generate (a dense subgroup of)
/// the group of interest.
#[derive(Clone, Debug)]
pub struct GeneratingSet {
    pub generators: Vec<DMatrix<f64>>,
}

impl GeneratingSet {
    pub fn new(generators: Vec<DMatrix<f64>>) -> Result<Self, RecmError> {
        if generators.is_empty() {
            return Err(RecmError::contract("generating set must be nonempty"));
        }
        Ok(GeneratingSet { generators })
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> + '_ {
        self.generators.iter().cloned().map(GroupElement::from_matrix)
    }

    /// All elements of a finite group, usable wherever exact symmetrization
    /// over the whole group is wanted.
    pub fn full(group: &FiniteGroup) -> Self {
        GeneratingSet {
            generators: group.elements.clone(),
        }
    }

    /// Minimal generating sets for the built-in groups.
    pub fn canonical_for(name: &str) -> Result<Self, RecmError> {
        Ok(match name {
            "C2" => GeneratingSet::new(vec![DMatrix::from_row_slice(1, 1, &[-1.0])])?,
            "C4" => GeneratingSet::new(vec![rotation2(std::f64::consts::FRAC_PI_2)])?,
            "C8" => GeneratingSet::new(vec![rotation2(std::f64::consts::FRAC_PI_4)])?,
            "S2" => GeneratingSet::new(vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])])?,
            "S3" => GeneratingSet::new(vec![
                DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
                DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            ])?,
            "SO2" => so2_generating_singleton(),
            "SO3" => so3_generating_pair(),
            other => return Err(RecmError::contract(format!("no canonical generating set for '{other}'"))),
        })
    }
}

/// The single rotation by 1 radian: an irrational multiple of pi, so it
/// generates a dense subgroup of SO(2).
pub fn so2_generating_singleton() -> GeneratingSet {
    GeneratingSet {
        generators: vec![rotation2(1.0)],
    }
}

/// Rotations by 3/2 rad about the x and z axes. Non-commuting rotations
/// about distinct axes with irrational angle generate a dense subgroup
/// of SO(3).
pub fn so3_generating_pair() -> GeneratingSet {
    GeneratingSet {
        generators: vec![rotation3_x(1.5), rotation3_z(1.5)],
    }
}

/// Alternative pair: pi/2 about x and pi/3 about z.
pub fn so3_generating_pair_alt() -> GeneratingSet {
    GeneratingSet {
        generators: vec![
            rotation3_x(std::f64::consts::FRAC_PI_2),
            rotation3_z(std::f64::consts::FRAC_PI_3),
        ],
    }
}

/// How a group element acts on a feature space.
#[derive(Clone, Debug)]
pub enum Representation {
    /// The defining matrix itself.
    Standard,
    /// Identity action on a `dim`-dimensional space (invariant features).
    Trivial(usize),
    /// det(g) as a 1x1 matrix (sign of a permutation; +-1 for O(1)).
    Sign,
    /// Explicit per-element matrices of a finite group, indexed like its
    /// element list.
    Table(Vec<DMatrix<f64>>),
}

impl Representation {
    pub fn dim(&self, group_dim: usize) -> usize {
        match self {
            Representation::Standard => group_dim,
            Representation::Trivial(d) => *d,
            Representation::Sign => 1,
            Representation::Table(ms) => ms[0].nrows(),
        }
    }

    pub fn apply(&self, g: &GroupElement) -> DMatrix<f64> {
        match self {
            Representation::Standard => g.mat.clone(),
            Representation::Trivial(d) => DMatrix::identity(*d, *d),
            Representation::Sign => {
                let det = g.mat.clone().determinant();
                DMatrix::from_row_slice(1, 1, &[if det < 0.0 { -1.0 } else { 1.0 }])
            }
            Representation::Table(ms) => {
                let i = g.index.expect("table representation needs an enumerated element");
                ms[i].clone()
            }
        }
    }

    /// Apply to a column vector of values.
    pub fn apply_vec(&self, g: &GroupElement, v: &[f64]) -> Vec<f64> {
        let m = self.apply(g);
        assert_eq!(m.ncols(), v.len(), "representation/vector dimension mismatch");
        let x = DMatrix::from_column_slice(v.len(), 1, v);
        (m * x).as_slice().to_vec()
    }
}

/// Max homomorphism violation over `n_pairs` sampled element pairs;
/// unitarity defect is folded in when `check_unitary` is set.
pub fn check_representation(
    rep: &Representation,
    group: &Group,
    n_pairs: usize,
    check_unitary: bool,
    rng: &mut Rng,
) -> f64 {
    assert!(n_pairs >= 1);
    let mut worst = 0.0_f64;
    for _ in 0..n_pairs {
        let (g1, g2, g12) = match group {
            Group::Finite(fg) => {
                let i = rng.gen_range(0..fg.order());
                let j = rng.gen_range(0..fg.order());
                (fg.element(i), fg.element(j), fg.element(fg.multiply(i, j)))
            }
            Group::Continuous(cg) => {
                let g1 = cg.haar_sample(rng);
                let g2 = cg.haar_sample(rng);
                let prod = GroupElement::from_matrix(&g1.mat * &g2.mat);
                (g1, g2, prod)
            }
        };
        let lhs = rep.apply(&g1) * rep.apply(&g2);
        let rhs = rep.apply(&g12);
        worst = worst.max(max_abs(&(lhs - rhs)));
        if check_unitary {
            worst = worst.max(orthogonality_defect(&rep.apply(&g1)));
        }
    }
    worst
}
