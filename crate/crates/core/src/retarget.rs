//! Kinematic chains, forward kinematics, Jacobians and the joint-limited
//! trust-region solver that maps fingertip targets to robot joint angles.
//!
//! Convention: a link frame is `parent * origin * Rot(axis, q)` when the link
//! is the child of a revolute joint, `parent * origin` otherwise. The root
//! link is the wrist frame in which targets are expressed. Tracking error is
//! the right (body) error `e = log(T^-1 E)` with `T` the target pose.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{exp_so3, hat, se3_log, se3_right_jacobian_inv, Pose, RotationMatrix, Twist, UnitQuaternion, Vec3};
use crate::simnet::{Bone, Digit, Segment};
use crate::spatialcal::HandFrameSeries;

pub type JointConfig = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetargetError {
    #[error("chain: {0}")]
    Chain(String),
    #[error("chain file: {0}")]
    Parse(String),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("joint {joint} value {value} outside [{lower}, {upper}]")]
    OutOfLimits { joint: String, value: f64, lower: f64, upper: f64 },
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("expected {expected} fingertip targets, got {got}")]
    TargetCount { expected: usize, got: usize },
    #[error("target stream is empty")]
    EmptyStream,
    #[error("non-finite target")]
    NonFinite,
}

// ---------------------------------------------------------------------------
// Chain description

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub xyz: [f64; 3],
    /// Scalar-first unit quaternion.
    #[serde(default = "identity_quat")]
    pub quat: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    pub parent: String,
    pub child: String,
    pub axis: [f64; 3],
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub name: String,
    pub wrist: String,
    pub fingertips: Vec<String>,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct Link {
    name: String,
    parent: Option<usize>,
    origin: Pose,
    joint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub axis: Vec3,
    pub lower: f64,
    pub upper: f64,
    child: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    name: String,
    /// Topologically ordered, root first.
    links: Vec<Link>,
    joints: Vec<Joint>,
    tips: Vec<usize>,
    /// Joint indices on the root path of each link.
    paths: Vec<Vec<usize>>,
    spec: ChainSpec,
}

impl KinematicChain {
    pub fn from_spec(spec: ChainSpec) -> Result<Self, RetargetError> {
        let err = |m: String| RetargetError::Chain(m);
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, l) in spec.links.iter().enumerate() {
            if index.insert(l.name.as_str(), i).is_some() {
                return Err(err(format!("duplicate link `{}`", l.name)));
            }
        }
        let roots: Vec<&LinkSpec> = spec.links.iter().filter(|l| l.parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(err(format!("expected exactly one root link, found {}", roots.len())));
        }
        if roots[0].name != spec.wrist {
            return Err(err(format!("wrist `{}` must be the root link", spec.wrist)));
        }
        // Topological order by repeated relaxation; also catches cycles and dangling parents.
        let mut order: Vec<usize> = Vec::with_capacity(spec.links.len());
        let mut placed = vec![false; spec.links.len()];
        while order.len() < spec.links.len() {
            let before = order.len();
            for (i, l) in spec.links.iter().enumerate() {
                if placed[i] {
                    continue;
                }
                let ready = match &l.parent {
                    None => true,
                    Some(p) => {
                        let pi = *index.get(p.as_str()).ok_or_else(|| err(format!("link `{}` has unknown parent `{p}`", l.name)))?;
                        placed[pi]
                    }
                };
                if ready {
                    placed[i] = true;
                    order.push(i);
                }
            }
            if order.len() == before {
                return Err(err("link graph contains a cycle".into()));
            }
        }
        let new_index: HashMap<usize, usize> = order.iter().enumerate().map(|(n, o)| (*o, n)).collect();
        let mut links = Vec::with_capacity(order.len());
        for &o in &order {
            let l = &spec.links[o];
            let q = UnitQuaternion::from_parts_unit(l.quat[0], l.quat[1], l.quat[2], l.quat[3])
                .map_err(|e| err(format!("link `{}` origin rotation: {e}", l.name)))?;
            if l.xyz.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("link `{}` origin is not finite", l.name)));
            }
            links.push(Link {
                name: l.name.clone(),
                parent: l.parent.as_ref().map(|p| new_index[&index[p.as_str()]]),
                origin: Pose::new(q.to_matrix(), Vec3::from(l.xyz)),
                joint: None,
            });
        }
        let mut joints = Vec::with_capacity(spec.joints.len());
        for (ji, j) in spec.joints.iter().enumerate() {
            let axis = Vec3::from(j.axis);
            if !axis.iter().all(|v| v.is_finite()) || (axis.norm() - 1.0).abs() > 1e-12 {
                return Err(err(format!("joint `{}` axis must be unit-norm", j.name)));
            }
            if !(j.lower < j.upper) {
                return Err(err(format!("joint `{}` needs lower < upper", j.name)));
            }
            let child = *index.get(j.child.as_str()).ok_or_else(|| err(format!("joint `{}`: unknown child `{}`", j.name, j.child)))?;
            let child = new_index[&child];
            let parent = *index.get(j.parent.as_str()).ok_or_else(|| err(format!("joint `{}`: unknown parent `{}`", j.name, j.parent)))?;
            if links[child].parent != Some(new_index[&parent]) {
                return Err(err(format!("joint `{}`: `{}` is not the parent link of `{}`", j.name, j.parent, j.child)));
            }
            if links[child].joint.is_some() {
                return Err(err(format!("link `{}` is the child of two joints", j.child)));
            }
            links[child].joint = Some(ji);
            joints.push(Joint { name: j.name.clone(), axis, lower: j.lower, upper: j.upper, child });
        }
        let mut paths: Vec<Vec<usize>> = Vec::with_capacity(links.len());
        for i in 0..links.len() {
            let mut p = links[i].parent.map(|pi| paths[pi].clone()).unwrap_or_default();
            if let Some(j) = links[i].joint {
                p.push(j);
            }
            paths.push(p);
        }
        if spec.fingertips.is_empty() {
            return Err(err("no fingertip frames".into()));
        }
        let tips = spec
            .fingertips
            .iter()
            .map(|t| {
                index.get(t.as_str()).map(|i| new_index[i]).ok_or_else(|| RetargetError::UnknownFrame(t.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { name: spec.name.clone(), links, joints, tips, paths, spec })
    }

    pub fn from_toml(text: &str) -> Result<Self, RetargetError> {
        let spec: ChainSpec = toml::from_str(text).map_err(|e| RetargetError::Parse(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.spec).unwrap_or_default()
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn fingertip_count(&self) -> usize {
        self.tips.len()
    }

    /// Per fingertip, the joints that move no other fingertip.
    pub fn exclusive_joints(&self) -> Vec<Vec<usize>> {
        self.tips
            .iter()
            .map(|t| {
                self.paths[*t]
                    .iter()
                    .copied()
                    .filter(|j| self.tips.iter().filter(|o| *o != t).all(|o| !self.paths[*o].contains(j)))
                    .collect()
            })
            .collect()
    }

    pub fn fingertip_names(&self) -> Vec<&str> {
        self.tips.iter().map(|t| self.links[*t].name.as_str()).collect()
    }

    pub fn link_names(&self) -> Vec<&str> {
        self.links.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn frame_index(&self, name: &str) -> Result<usize, RetargetError> {
        self.links.iter().position(|l| l.name == name).ok_or_else(|| RetargetError::UnknownFrame(name.to_string()))
    }

    pub fn lower(&self) -> JointConfig {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.lower))
    }

    pub fn upper(&self) -> JointConfig {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.upper))
    }

    pub fn clamp(&self, q: &JointConfig) -> JointConfig {
        DVector::from_iterator(self.dof(), q.iter().zip(&self.joints).map(|(v, j)| v.clamp(j.lower, j.upper)))
    }

    /// All-zero configuration clamped into the limits.
    pub fn rest(&self) -> JointConfig {
        self.clamp(&DVector::zeros(self.dof()))
    }

    pub fn mid_range(&self) -> JointConfig {
        (self.lower() + self.upper()) * 0.5
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.len() == self.dof() && q.iter().zip(&self.joints).all(|(v, j)| *v >= j.lower && *v <= j.upper)
    }

    pub fn check(&self, q: &JointConfig) -> Result<(), RetargetError> {
        if q.len() != self.dof() {
            return Err(RetargetError::Dimension { expected: self.dof(), got: q.len() });
        }
        for (v, j) in q.iter().zip(&self.joints) {
            if !(*v >= j.lower && *v <= j.upper) {
                return Err(RetargetError::OutOfLimits { joint: j.name.clone(), value: *v, lower: j.lower, upper: j.upper });
            }
        }
        Ok(())
    }

    fn fk_unchecked(&self, q: &JointConfig) -> Vec<Pose> {
        let mut poses: Vec<Pose> = Vec::with_capacity(self.links.len());
        for l in &self.links {
            let mut p = match l.parent {
                Some(pi) => poses[pi] * l.origin,
                None => l.origin,
            };
            if let Some(j) = l.joint {
                p = p * Pose::new(exp_so3(&(self.joints[j].axis * q[j])), Vec3::zeros());
            }
            poses.push(p);
        }
        // Express everything relative to the root (wrist) frame.
        let root_inv = poses[0].inverse();
        poses.iter().map(|p| root_inv * *p).collect()
    }

    fn jacobian_from(&self, poses: &[Pose], frame: usize) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.dof());
        let p_f = poses[frame].translation;
        for &j in &self.paths[frame] {
            let jp = &poses[self.joints[j].child];
            let a = jp.rotation.apply(&self.joints[j].axis);
            let v = a.cross(&(p_f - jp.translation));
            for r in 0..3 {
                jac[(r, j)] = v[r];
                jac[(r + 3, j)] = a[r];
            }
        }
        jac
    }

    pub fn tip_positions(&self, q: &JointConfig) -> Vec<Vec3> {
        let poses = self.fk_unchecked(q);
        self.tips.iter().map(|t| poses[*t].translation).collect()
    }
}

/// Pose of every link in the wrist frame, in the chain's link order.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointConfig) -> Result<Vec<Pose>, RetargetError> {
    chain.check(q)?;
    Ok(chain.fk_unchecked(q))
}

/// Geometric Jacobian of `frame` in the wrist frame: rows 0..3 linear
/// velocity of the frame origin, rows 3..6 angular velocity.
pub fn frame_jacobian(chain: &KinematicChain, q: &JointConfig, frame: &str) -> Result<DMatrix<f64>, RetargetError> {
    let f = chain.frame_index(frame)?;
    if q.len() != chain.dof() {
        return Err(RetargetError::Dimension { expected: chain.dof(), got: q.len() });
    }
    Ok(chain.jacobian_from(&chain.fk_unchecked(q), f))
}

/// Position-only tracking error. The target pose takes the current rotation,
/// so `e` is a pure translation `R_E^T (p_E - p_target)`.
pub fn error_twist(current: &Pose, target: &Vec3) -> (Twist, Matrix6<f64>) {
    let t = Pose::new(current.rotation, *target);
    let e = se3_log(&(t.inverse() * *current));
    let j = se3_right_jacobian_inv(&e);
    (e, j)
}

// ---------------------------------------------------------------------------
// Solver

#[derive(Debug, Clone, PartialEq)]
pub struct FingertipTargets(pub Vec<Vec3>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetargetOptions {
    /// Convergence threshold on the largest per-finger error norm, meters.
    pub tol: f64,
    pub max_iter: usize,
    pub initial_trust: f64,
    pub max_trust: f64,
    /// Relative damping: `lambda = damping * sigma_max^2`.
    pub damping: f64,
    /// Stop when an accepted step lowers the summed squared error by less
    /// than this fraction, both actually and as predicted.
    pub ftol: f64,
    /// Re-seeding attempts for fingers that stall above `tol`.
    pub max_restarts: usize,
    pub record_trace: bool,
}

impl Default for RetargetOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 100, initial_trust: 0.5, max_trust: 2.0, damping: 1e-6, ftol: 1e-8, max_restarts: 8, record_trace: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetResult {
    pub q: JointConfig,
    /// Per-finger `Lambda e`, meters.
    pub residuals: Vec<Vec3>,
    pub rmse: f64,
    /// Total iterations over the initial descent and every restart.
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    /// Accepted iterates with their summed-norm objective, one path per
    /// descent (initial, then each restart), when recorded.
    pub trace: Vec<Vec<(JointConfig, f64)>>,
}

/// `sqrt(1/(3 N_f) sum |Lambda e_i|^2)`.
pub fn rmse(residuals: &[Vec3]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    (residuals.iter().map(|r| r.norm_squared()).sum::<f64>() / (3.0 * residuals.len() as f64)).sqrt()
}

struct Linearization {
    residuals: Vec<Vec3>,
    /// Stacked translational rows of the effective task Jacobian.
    jac: DMatrix<f64>,
}

fn check_targets(chain: &KinematicChain, targets: &FingertipTargets) -> Result<(), RetargetError> {
    if targets.0.len() != chain.fingertip_count() {
        return Err(RetargetError::TargetCount { expected: chain.fingertip_count(), got: targets.0.len() });
    }
    if targets.0.iter().any(|t| !t.iter().all(|v| v.is_finite())) {
        return Err(RetargetError::NonFinite);
    }
    Ok(())
}

fn residuals(chain: &KinematicChain, q: &JointConfig, targets: &FingertipTargets) -> Vec<Vec3> {
    let poses = chain.fk_unchecked(q);
    chain
        .tips
        .iter()
        .zip(&targets.0)
        .map(|(t, p)| poses[*t].rotation.transpose().apply(&(poses[*t].translation - p)))
        .collect()
}

fn linearize(chain: &KinematicChain, q: &JointConfig, targets: &FingertipTargets) -> Linearization {
    let poses = chain.fk_unchecked(q);
    let d = chain.dof();
    let mut jac = DMatrix::zeros(3 * chain.tips.len(), d);
    let mut res = Vec::with_capacity(chain.tips.len());
    for (i, (t, p)) in chain.tips.iter().zip(&targets.0).enumerate() {
        let pose = &poses[*t];
        let (e, jlog) = error_twist(pose, p);
        let jg = chain.jacobian_from(&poses, *t);
        let rt = pose.rotation.transpose();
        let mut jb = DMatrix::zeros(6, d);
        for c in 0..d {
            let v = rt.apply(&Vec3::new(jg[(0, c)], jg[(1, c)], jg[(2, c)]));
            let w = rt.apply(&Vec3::new(jg[(3, c)], jg[(4, c)], jg[(5, c)]));
            for r in 0..3 {
                jb[(r, c)] = v[r];
                jb[(r + 3, c)] = w[r];
            }
        }
        let jlog = DMatrix::from_fn(3, 6, |r, c| jlog[(r, c)]);
        jac.view_mut((3 * i, 0), (3, d)).copy_from(&(jlog * jb));
        res.push(e.translation());
    }
    Linearization { residuals: res, jac }
}

/// Effective task Jacobian: translational rows of `J(E) J_body(q)` per finger, stacked.
pub fn effective_jacobian(chain: &KinematicChain, q: &JointConfig, targets: &FingertipTargets) -> Result<DMatrix<f64>, RetargetError> {
    check_targets(chain, targets)?;
    if q.len() != chain.dof() {
        return Err(RetargetError::Dimension { expected: chain.dof(), got: q.len() });
    }
    Ok(linearize(chain, q, targets).jac)
}

fn stack(res: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(3 * res.len(), res.iter().flat_map(|r| r.iter().copied()))
}

/// `min |J dq + r|^2 + lambda |dq|^2` subject to `lo <= dq <= hi`, by a
/// bounded-variable active-set iteration.
fn box_dls(j: &DMatrix<f64>, r: &DVector<f64>, lambda: f64, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let d = j.ncols();
    let h = j.transpose() * j + DMatrix::identity(d, d) * lambda;
    let g = j.transpose() * r;
    // fixed[i]: None free, Some(bound value)
    let mut fixed: Vec<Option<f64>> = (0..d).map(|i| if lo[i] == hi[i] { Some(lo[i]) } else { None }).collect();
    let mut x = DVector::zeros(d);
    for _ in 0..(4 * d + 4) {
        let free: Vec<usize> = (0..d).filter(|i| fixed[*i].is_none()).collect();
        for i in 0..d {
            if let Some(v) = fixed[i] {
                x[i] = v;
            }
        }
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                let i = free[a];
                let mut s = -g[i];
                for k in 0..d {
                    if let Some(v) = fixed[k] {
                        s -= h[(i, k)] * v;
                    }
                }
                s
            });
            let sol = hf.clone().cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| {
                hf.svd(true, true).solve(&rhs, 1e-14).unwrap_or_else(|_| DVector::zeros(free.len()))
            });
            let mut violated = false;
            for (a, &i) in free.iter().enumerate() {
                let v = sol[a];
                if v < lo[i] {
                    fixed[i] = Some(lo[i]);
                    violated = true;
                } else if v > hi[i] {
                    fixed[i] = Some(hi[i]);
                    violated = true;
                }
                x[i] = v.clamp(lo[i], hi[i]);
            }
            if violated {
                continue;
            }
        }
        // Release the bound variable whose gradient points most strongly inward.
        let grad = &h * &x + &g;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..d {
            if let Some(v) = fixed[i] {
                if lo[i] == hi[i] {
                    continue;
                }
                let inward = if v == lo[i] { -grad[i] } else { grad[i] };
                if inward > 1e-14 * (1.0 + g.amax()) && best.is_none_or(|(_, b)| inward > b) {
                    best = Some((i, inward));
                }
            }
        }
        match best {
            Some((i, _)) => fixed[i] = None,
            None => break,
        }
    }
    x
}

/// One trust-region subproblem at `q`. Returns `(dq, predicted reduction of
/// the summed squared error)`; `q + dq` always lies within the limits.
pub fn retarget_step(
    chain: &KinematicChain,
    q: &JointConfig,
    targets: &FingertipTargets,
    trust_radius: f64,
) -> Result<(JointConfig, f64), RetargetError> {
    chain.check(q)?;
    check_targets(chain, targets)?;
    let lin = linearize(chain, q, targets);
    Ok(step_from(chain, q, &lin, trust_radius, RetargetOptions::default().damping))
}

fn step_from(chain: &KinematicChain, q: &JointConfig, lin: &Linearization, trust: f64, damping: f64) -> (JointConfig, f64) {
    let d = chain.dof();
    let r = stack(&lin.residuals);
    if r.amax() == 0.0 {
        return (DVector::zeros(d), 0.0);
    }
    let jtj = lin.jac.transpose() * &lin.jac;
    let sigma2 = SymmetricEigen::new(jtj).eigenvalues.amax();
    let lambda = (damping * sigma2).max(f64::MIN_POSITIVE);
    let lo = DVector::from_fn(d, |i, _| (chain.joints[i].lower - q[i]).max(-trust).min(0.0));
    let hi = DVector::from_fn(d, |i, _| (chain.joints[i].upper - q[i]).min(trust).max(0.0));
    let mut dq = box_dls(&lin.jac, &r, lambda, &lo, &hi);
    // Keep q + dq inside the limits exactly, despite rounding.
    for i in 0..d {
        let j = &chain.joints[i];
        let mut v = (q[i] + dq[i]).clamp(j.lower, j.upper) - q[i];
        while q[i] + v > j.upper {
            v = v.next_down();
        }
        while q[i] + v < j.lower {
            v = v.next_up();
        }
        dq[i] = v;
    }
    let model = &r + &lin.jac * &dq;
    (dq, r.norm_squared() - model.norm_squared())
}

fn objective(res: &[Vec3]) -> f64 {
    res.iter().map(|r| r.norm()).sum()
}

struct Descent {
    q: JointConfig,
    lin: Linearization,
    iterations: usize,
    converged: bool,
    path: Vec<(JointConfig, f64)>,
}

fn max_err(res: &[Vec3]) -> f64 {
    res.iter().fold(0.0f64, |m, r| m.max(r.norm()))
}

/// Trust-region damped least squares from `q` for at most `budget` iterations.
fn descend(chain: &KinematicChain, q: JointConfig, targets: &FingertipTargets, opts: &RetargetOptions, budget: usize) -> Descent {
    let mut q = q;
    let mut lin = linearize(chain, &q, targets);
    let mut obj = objective(&lin.residuals);
    let mut sq: f64 = lin.residuals.iter().map(|r| r.norm_squared()).sum();
    let mut trust = opts.initial_trust;
    let mut path = Vec::new();
    if opts.record_trace {
        path.push((q.clone(), obj));
    }
    let mut converged = max_err(&lin.residuals) < opts.tol;
    let mut iterations = 0;
    while !converged && iterations < budget {
        iterations += 1;
        let (dq, predicted) = step_from(chain, &q, &lin, trust, opts.damping);
        let step = dq.amax();
        if step < 1e-10 || predicted <= 0.0 {
            break;
        }
        let q_new = &q + &dq;
        let res_new = residuals(chain, &q_new, targets);
        let sq_new: f64 = res_new.iter().map(|r| r.norm_squared()).sum();
        let obj_new = objective(&res_new);
        let ratio = (sq - sq_new) / predicted;
        if ratio > 0.0 && obj_new <= obj {
            let stalled = sq - sq_new <= opts.ftol * sq && predicted <= opts.ftol * sq;
            q = q_new;
            lin = linearize(chain, &q, targets);
            obj = obj_new;
            sq = sq_new;
            if opts.record_trace {
                path.push((q.clone(), obj));
            }
            converged = max_err(&lin.residuals) < opts.tol;
            if stalled {
                break;
            }
        }
        if ratio > 0.75 && step >= 0.5 * trust {
            trust = (2.0 * trust).min(opts.max_trust);
        } else if ratio < 0.25 || obj_new > obj {
            trust = 0.25 * step.min(trust);
            if trust < 1e-10 {
                break;
            }
        }
    }
    Descent { q, lin, iterations, converged, path }
}

/// Deterministic low-discrepancy point in `[0, 1)` for restart `k`, joint `i`.
fn restart_fraction(k: usize, i: usize) -> f64 {
    const G: f64 = 0.618_033_988_749_894_9;
    const H: f64 = 0.754_877_666_246_692_8;
    (0.5 + k as f64 * G + i as f64 * H).fract()
}

pub fn retarget(
    chain: &KinematicChain,
    q0: &JointConfig,
    targets: &FingertipTargets,
    opts: &RetargetOptions,
) -> Result<RetargetResult, RetargetError> {
    chain.check(q0)?;
    check_targets(chain, targets)?;
    let mut best = descend(chain, q0.clone(), targets, opts, opts.max_iter);
    let mut iterations = best.iterations;
    let mut trace = vec![std::mem::take(&mut best.path)];
    // A stalled finger is re-seeded on the joints no other fingertip depends
    // on; the better of the old and new solution is kept finger by finger.
    let exclusive = chain.exclusive_joints();
    let mut restarts = 0;
    while !best.converged && iterations < opts.max_iter && restarts < opts.max_restarts {
        let stuck: Vec<usize> = (0..chain.fingertip_count())
            .filter(|f| best.lin.residuals[*f].norm() >= opts.tol && !exclusive[*f].is_empty())
            .collect();
        if stuck.is_empty() {
            break;
        }
        restarts += 1;
        let mut seed = best.q.clone();
        for &f in &stuck {
            for &i in &exclusive[f] {
                let j = &chain.joints[i];
                seed[i] = j.lower + restart_fraction(restarts, i) * (j.upper - j.lower);
            }
        }
        let mut trial = descend(chain, seed, targets, opts, opts.max_iter - iterations);
        iterations += trial.iterations;
        trace.push(std::mem::take(&mut trial.path));
        let mut merged = best.q.clone();
        for &f in &stuck {
            if trial.lin.residuals[f].norm() < best.lin.residuals[f].norm() {
                for &i in &exclusive[f] {
                    merged[i] = trial.q[i];
                }
            }
        }
        let lin = linearize(chain, &merged, targets);
        best = Descent { converged: max_err(&lin.residuals) < opts.tol, q: merged, lin, iterations: 0, path: Vec::new() };
    }
    Ok(RetargetResult {
        rmse: rmse(&best.lin.residuals),
        residuals: best.lin.residuals,
        q: best.q,
        iterations,
        restarts,
        converged: best.converged,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub q: Vec<JointConfig>,
    pub rmse: Vec<f64>,
    pub converged: Vec<bool>,
}

/// Solves each frame warm-started from the previous solution.
pub fn retarget_sequence(
    chain: &KinematicChain,
    stream: &[FingertipTargets],
    q0: &JointConfig,
    opts: &RetargetOptions,
) -> Result<SequenceResult, RetargetError> {
    if stream.is_empty() {
        return Err(RetargetError::EmptyStream);
    }
    let mut q = q0.clone();
    let mut out = SequenceResult { q: Vec::with_capacity(stream.len()), rmse: Vec::new(), converged: Vec::new() };
    for t in stream {
        let r = retarget(chain, &q, t, opts)?;
        q = r.q.clone();
        out.q.push(r.q);
        out.rmse.push(r.rmse);
        out.converged.push(r.converged);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shipped synthetic hands

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShippedHand {
    /// Four fingers, abduction + two flexion joints each.
    FourFinger,
    /// Thumb and four fingers, abduction + three flexion joints each.
    FiveFinger,
}

/// Palm-frame layout shared by the synthetic robot hands and the human
/// fingertip model: base position of each digit and its bone lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitGeometry {
    pub digit: Digit,
    pub base: Vec3,
    pub lengths: Vec<f64>,
}

pub fn hand_geometry() -> Vec<DigitGeometry> {
    let g = |digit, x: f64, y: f64, lengths: &[f64]| DigitGeometry { digit, base: Vec3::new(x, y, 0.0), lengths: lengths.to_vec() };
    vec![
        g(Digit::Thumb, -0.045, 0.030, &[0.045, 0.035, 0.030]),
        g(Digit::Index, -0.027, 0.090, &[0.045, 0.027, 0.022]),
        g(Digit::Middle, -0.009, 0.093, &[0.050, 0.031, 0.024]),
        g(Digit::Ring, 0.009, 0.090, &[0.046, 0.029, 0.023]),
        g(Digit::Pinky, 0.027, 0.083, &[0.036, 0.021, 0.020]),
    ]
}

fn finger_links(spec: &mut ChainSpec, name: &str, base: Vec3, lengths: &[f64], limits: &[(f64, f64)]) {
    let link = |n: String, parent: &str, xyz: [f64; 3]| LinkSpec { name: n, parent: Some(parent.into()), xyz, quat: identity_quat() };
    let mut parent = spec.wrist.clone();
    let mut names = vec![format!("{name}_base")];
    spec.links.push(link(names[0].clone(), &parent, [base.x, base.y, base.z]));
    spec.joints.push(JointSpec {
        name: format!("{name}_abd"),
        parent: parent.clone(),
        child: names[0].clone(),
        axis: [0.0, 0.0, 1.0],
        lower: limits[0].0,
        upper: limits[0].1,
    });
    parent = names[0].clone();
    let flex_names = ["mcp", "pip", "dip"];
    let mut offset = 0.0;
    for (k, (lo, hi)) in limits[1..].iter().enumerate() {
        let n = format!("{name}_{}", flex_names[k]);
        spec.links.push(link(n.clone(), &parent, [0.0, offset, 0.0]));
        spec.joints.push(JointSpec {
            name: format!("{name}_{}_flex", flex_names[k]),
            parent: parent.clone(),
            child: n.clone(),
            axis: [-1.0, 0.0, 0.0],
            lower: *lo,
            upper: *hi,
        });
        offset = lengths[k];
        parent = n.clone();
        names.push(n);
    }
    let tip = format!("{name}_tip");
    spec.links.push(link(tip.clone(), &parent, [0.0, offset, 0.0]));
    spec.fingertips.push(tip);
}

pub fn shipped_hand(which: ShippedHand) -> KinematicChain {
    let mut spec = ChainSpec {
        name: match which {
            ShippedHand::FourFinger => "synthetic-four-finger".into(),
            ShippedHand::FiveFinger => "synthetic-five-finger".into(),
        },
        wrist: "palm".into(),
        fingertips: Vec::new(),
        links: vec![LinkSpec { name: "palm".into(), parent: None, xyz: [0.0; 3], quat: identity_quat() }],
        joints: Vec::new(),
    };
    for g in hand_geometry() {
        let name = g.digit.label();
        match which {
            ShippedHand::FourFinger => {
                if g.digit == Digit::Thumb {
                    continue;
                }
                // Two phalanges: proximal, then middle and distal merged.
                let lengths = [g.lengths[0], g.lengths[1] + g.lengths[2]];
                finger_links(&mut spec, name, g.base, &lengths, &[(-0.35, 0.35), (-0.2, 1.6), (0.0, 1.8)]);
            }
            ShippedHand::FiveFinger => {
                let abd = if g.digit == Digit::Thumb { (-0.6, 0.6) } else { (-0.35, 0.35) };
                finger_links(&mut spec, name, g.base, &g.lengths, &[abd, (-0.2, 1.6), (0.0, 1.8), (0.0, 1.4)]);
            }
        }
    }
    KinematicChain::from_spec(spec).expect("shipped hand is well formed")
}

// ---------------------------------------------------------------------------
// Human fingertip targets

/// Digits driving the fingertips of a shipped hand, in fingertip order.
pub fn target_digits(which: ShippedHand) -> Vec<Digit> {
    match which {
        ShippedHand::FourFinger => vec![Digit::Index, Digit::Middle, Digit::Ring, Digit::Pinky],
        ShippedHand::FiveFinger => Digit::ALL.to_vec(),
    }
}

fn digit_bones(d: Digit) -> [Bone; 3] {
    if d == Digit::Thumb {
        [Bone::MC, Bone::PP, Bone::DP]
    } else {
        [Bone::PP, Bone::MP, Bone::DP]
    }
}

/// Fingertip positions in the palm frame at one tick, from reconstructed bone
/// orientations and the shared hand geometry (bones point along +y at the
/// zero pose). `None` if any needed segment is invalid at that tick.
pub fn fingertip_targets(frames: &HandFrameSeries, tick: usize, digits: &[Digit]) -> Option<FingertipTargets> {
    let palm = frames.index_of(Segment::Palm)?;
    if !frames.valid[palm][tick] {
        return None;
    }
    let q_palm_inv = frames.orientations[palm][tick].conjugate();
    let geometry = hand_geometry();
    let mut out = Vec::with_capacity(digits.len());
    for d in digits {
        let g = geometry.iter().find(|g| g.digit == *d)?;
        let mut p = g.base;
        for (bone, len) in digit_bones(*d).iter().zip(&g.lengths) {
            let s = frames.index_of(Segment::Finger(*d, *bone))?;
            if !frames.valid[s][tick] {
                return None;
            }
            let rel = q_palm_inv * frames.orientations[s][tick];
            p += rel.rotate(&Vec3::new(0.0, *len, 0.0));
        }
        out.push(p);
    }
    Some(FingertipTargets(out))
}

/// Rotation convenience for chain files.
pub fn link_rotation(quat: [f64; 4]) -> Option<RotationMatrix> {
    UnitQuaternion::from_parts_unit(quat[0], quat[1], quat[2], quat[3]).ok().map(|q| q.to_matrix())
}

/// `hat` re-exported for callers assembling custom Jacobian blocks.
pub fn skew(v: &Vec3) -> crate::geom::Mat3 {
    hat(v)
}
