//! Dense 2×2 / 4×4 complex algebra for one- and two-qubit gates.
//!
//! Convention: in every two-qubit object the control qubit is the LEFT
//! tensor factor, so basis index `2*c + t` holds control bit `c` and target
//! bit `t`. `IX(θ)` therefore means identity on the control, `R_X(θ)` on the
//! target.
//!
//! Global phase is kept in storage. Comparisons that should ignore it go
//! through [`Unitary::phase_overlap`], `|Tr(U†V)| / d`.

use std::fmt;
use std::ops::Mul;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

const MAX_DIM: usize = 4;

/// Entry-wise tolerance used for the unitarity check.
pub fn unitarity_tol<T: Real>() -> T {
    T::lit(1e-12).max(T::eps_times(64.0))
}

fn c<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

fn check_finite<T: Real>(name: &str, v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite, got {v}")))
    }
}

/// Fixed-capacity square complex matrix of dimension 2 or 4.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CMat<T> {
    dim: usize,
    e: [[Complex<T>; MAX_DIM]; MAX_DIM],
}

impl<T: Real> CMat<T> {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim == 2 || dim == 4, "dimension must be 2 or 4");
        Self {
            dim,
            e: [[Complex::new(T::zero(), T::zero()); MAX_DIM]; MAX_DIM],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.e[i][i] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex<T>>]) -> Result<Self> {
        let dim = rows.len();
        if dim != 2 && dim != 4 {
            return Err(Error::invalid(format!(
                "dimension must be 2 or 4, got {dim}"
            )));
        }
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid("matrix rows must be square"));
            }
            m.e[i][..dim].copy_from_slice(row);
        }
        Ok(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        assert!(i < self.dim && j < self.dim);
        self.e[i][j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex<T>) {
        assert!(i < self.dim && j < self.dim);
        self.e[i][j] = v;
    }

    pub fn dagger(&self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.e[i][j] = self.e[j][i].conj();
            }
        }
        m
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch in matmul");
        let d = self.dim;
        let mut m = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.e[i][k];
                for j in 0..d {
                    m.e[i][j] += a * rhs.e[k][j];
                }
            }
        }
        m
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.e[i][j] *= s;
            }
        }
        m
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.dim, rhs.dim);
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.e[i][j] += rhs.e[i][j];
            }
        }
        m
    }

    pub fn trace(&self) -> Complex<T> {
        (0..self.dim).fold(c(T::zero(), T::zero()), |acc, i| acc + self.e[i][i])
    }

    /// Largest entry-wise deviation of `self` from `other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dim, other.dim);
        let mut worst = T::zero();
        for i in 0..self.dim {
            for j in 0..self.dim {
                worst = worst.max((self.e[i][j] - other.e[i][j]).norm());
            }
        }
        worst
    }

    pub fn kron(&self, rhs: &Self) -> Result<Self> {
        if self.dim != 2 || rhs.dim != 2 {
            return Err(Error::invalid("tensor product expects two 2x2 factors"));
        }
        let mut m = Self::zeros(4);
        for a in 0..2 {
            for b in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        m.e[2 * a + i][2 * b + j] = self.e[a][b] * rhs.e[i][j];
                    }
                }
            }
        }
        Ok(m)
    }
}

impl<T: Real> fmt::Debug for CMat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut l = f.debug_list();
        for i in 0..self.dim {
            l.entry(&&self.e[i][..self.dim]);
        }
        l.finish()
    }
}

/// A 2×2 or 4×4 unitary. Construction checks `U†U = I`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CMat<T>", into = "CMat<T>")]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
pub struct Unitary<T: Real>(CMat<T>);

impl<T: Real> TryFrom<CMat<T>> for Unitary<T> {
    type Error = Error;
    fn try_from(m: CMat<T>) -> Result<Self> {
        Unitary::new(m)
    }
}

impl<T: Real> From<Unitary<T>> for CMat<T> {
    fn from(u: Unitary<T>) -> Self {
        u.0
    }
}

impl<T: Real> Unitary<T> {
    pub fn new(m: CMat<T>) -> Result<Self> {
        let dev = m.dagger().matmul(&m).max_abs_diff(&CMat::identity(m.dim));
        if dev > unitarity_tol::<T>() {
            return Err(Error::invalid(format!(
                "matrix is not unitary (max |U†U - I| = {dev})"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMat::identity(dim))
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.0.get(i, j)
    }

    pub fn dagger(&self) -> Self {
        Self(self.0.dagger())
    }

    pub fn try_mul(&self, rhs: &Self) -> Result<Self> {
        if self.dim() != rhs.dim() {
            return Err(Error::invalid("unitary dimension mismatch"));
        }
        Ok(Self(self.0.matmul(&rhs.0)))
    }

    /// Multiplies by a global phase `e^{iφ}`.
    pub fn with_phase(&self, phi: T) -> Self {
        Self(self.0.scale(Complex::from_polar(T::one(), phi)))
    }

    /// `|Tr(U†V)| / d`: 1 iff the two agree up to global phase.
    pub fn phase_overlap(&self, other: &Self) -> T {
        assert_eq!(self.dim(), other.dim());
        self.0.dagger().matmul(&other.0).trace().norm() / T::from_usize_lossy(self.dim())
    }

    /// The global phase `φ` with `other ≈ e^{iφ} self`, from `arg Tr(U†V)`.
    pub fn relative_phase(&self, other: &Self) -> T {
        self.0.dagger().matmul(&other.0).trace().arg()
    }

    pub fn max_unitarity_error(&self) -> T {
        self.0
            .dagger()
            .matmul(&self.0)
            .max_abs_diff(&CMat::identity(self.dim()))
    }

    pub fn apply(&self, psi: &PureState<T>) -> PureState<T> {
        assert_eq!(self.dim(), psi.dim);
        let d = self.dim();
        let mut out = [c(T::zero(), T::zero()); MAX_DIM];
        for (i, o) in out.iter_mut().enumerate().take(d) {
            for j in 0..d {
                *o += self.0.e[i][j] * psi.amps[j];
            }
        }
        PureState { dim: d, amps: out }
    }
}

impl<T: Real> Mul for Unitary<T> {
    type Output = Unitary<T>;
    /// Panics on dimension mismatch; use [`Unitary::try_mul`] for a
    /// fallible product.
    fn mul(self, rhs: Self) -> Self {
        Self(self.0.matmul(&rhs.0))
    }
}

impl<T: Real> Mul for &Unitary<T> {
    type Output = Unitary<T>;
    fn mul(self, rhs: Self) -> Unitary<T> {
        Unitary(self.0.matmul(&rhs.0))
    }
}

impl<T: Real> fmt::Debug for Unitary<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Unitary{:?}", self.0)
    }
}

/// Normalized state vector on one or two qubits.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PureState<T> {
    dim: usize,
    amps: [Complex<T>; MAX_DIM],
}

impl<T: Real> PureState<T> {
    /// Computational basis state `|index⟩`.
    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if (dim != 2 && dim != 4) || index >= dim {
            return Err(Error::invalid(format!(
                "no basis state {index} in dimension {dim}"
            )));
        }
        let mut amps = [c(T::zero(), T::zero()); MAX_DIM];
        amps[index] = c(T::one(), T::zero());
        Ok(Self { dim, amps })
    }

    pub fn from_amplitudes(amps: &[Complex<T>]) -> Result<Self> {
        let dim = amps.len();
        if dim != 2 && dim != 4 {
            return Err(Error::invalid("state dimension must be 2 or 4"));
        }
        let norm2 = amps.iter().fold(T::zero(), |acc, a| acc + a.norm_sqr());
        if (norm2 - T::one()).abs() > unitarity_tol::<T>() {
            return Err(Error::invalid(format!(
                "state is not normalized (|ψ|² = {norm2})"
            )));
        }
        let mut a = [c(T::zero(), T::zero()); MAX_DIM];
        a[..dim].copy_from_slice(amps);
        Ok(Self { dim, amps: a })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn amplitudes(&self) -> &[Complex<T>] {
        &self.amps[..self.dim]
    }

    pub fn probabilities(&self) -> Vec<T> {
        self.amplitudes().iter().map(|a| a.norm_sqr()).collect()
    }

    /// Bloch vector of one qubit (0 = control / left factor) obtained from
    /// the reduced density matrix.
    pub fn bloch(&self, qubit: usize) -> BlochExpectations<T> {
        let (r00, r11, r01) = if self.dim == 2 {
            let a = self.amps;
            (a[0].norm_sqr(), a[1].norm_sqr(), a[0] * a[1].conj())
        } else {
            let a = self.amps;
            // amplitude index = 2*c + t
            let idx = |q_bit: usize, other: usize| {
                if qubit == 0 {
                    2 * q_bit + other
                } else {
                    2 * other + q_bit
                }
            };
            let mut r00 = T::zero();
            let mut r11 = T::zero();
            let mut r01 = c(T::zero(), T::zero());
            for o in 0..2 {
                r00 += a[idx(0, o)].norm_sqr();
                r11 += a[idx(1, o)].norm_sqr();
                r01 += a[idx(0, o)] * a[idx(1, o)].conj();
            }
            (r00, r11, r01)
        };
        let two = T::lit(2.0);
        BlochExpectations {
            x: two * r01.re,
            y: -two * r01.im,
            z: r00 - r11,
        }
    }
}

/// Bloch-vector expectation values ⟨X⟩, ⟨Y⟩, ⟨Z⟩ of one qubit.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct BlochExpectations<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> BlochExpectations<T> {
    pub fn new(x: T, y: T, z: T) -> Result<Self> {
        let v = Self { x, y, z };
        let tol = T::lit(1e-9);
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::invalid("Bloch components must be finite"));
        }
        if v.norm() > T::one() + tol {
            return Err(Error::invalid(format!(
                "Bloch vector longer than 1: {}",
                v.norm()
            )));
        }
        Ok(v)
    }

    /// From independently estimated expectations (e.g. shot averages), which
    /// may land slightly outside the ball; projects radially onto it.
    pub fn from_estimates(x: T, y: T, z: T) -> Self {
        let v = Self { x, y, z };
        let n = v.norm();
        if n > T::one() {
            Self {
                x: x / n,
                y: y / n,
                z: z / n,
            }
        } else {
            v
        }
    }

    pub fn norm(&self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// `R_X(θ) = [[cos θ/2, −i sin θ/2], [−i sin θ/2, cos θ/2]]`.
pub fn rot_x<T: Real>(theta: T) -> Result<Unitary<T>> {
    check_finite("theta", theta)?;
    let half = theta / T::lit(2.0);
    let (s, co) = half.sin_cos();
    let mut m = CMat::zeros(2);
    m.e[0][0] = c(co, T::zero());
    m.e[0][1] = c(T::zero(), -s);
    m.e[1][0] = c(T::zero(), -s);
    m.e[1][1] = c(co, T::zero());
    Ok(Unitary(m))
}

/// `R_Y(θ) = [[cos θ/2, −sin θ/2], [sin θ/2, cos θ/2]]`.
pub fn rot_y<T: Real>(theta: T) -> Result<Unitary<T>> {
    check_finite("theta", theta)?;
    let half = theta / T::lit(2.0);
    let (s, co) = half.sin_cos();
    let mut m = CMat::zeros(2);
    m.e[0][0] = c(co, T::zero());
    m.e[0][1] = c(-s, T::zero());
    m.e[1][0] = c(s, T::zero());
    m.e[1][1] = c(co, T::zero());
    Ok(Unitary(m))
}

/// `R_Z(θ) = diag(e^{−iθ/2}, e^{iθ/2})`.
pub fn rot_z<T: Real>(theta: T) -> Result<Unitary<T>> {
    check_finite("theta", theta)?;
    let half = theta / T::lit(2.0);
    let mut m = CMat::zeros(2);
    m.e[0][0] = Complex::from_polar(T::one(), -half);
    m.e[1][1] = Complex::from_polar(T::one(), half);
    Ok(Unitary(m))
}

/// Rotation by `theta` about the Bloch axis `(nx, ny, nz)` (normalized
/// internally).
pub fn rot_axis<T: Real>(nx: T, ny: T, nz: T, theta: T) -> Result<Unitary<T>> {
    check_finite("theta", theta)?;
    let n = (nx * nx + ny * ny + nz * nz).sqrt();
    if !(n > T::zero()) {
        return Err(Error::invalid("rotation axis must be non-zero"));
    }
    let (nx, ny, nz) = (nx / n, ny / n, nz / n);
    let (s, co) = (theta / T::lit(2.0)).sin_cos();
    let mut m = CMat::zeros(2);
    m.e[0][0] = c(co, -s * nz);
    m.e[0][1] = c(-s * ny, -s * nx);
    m.e[1][0] = c(s * ny, -s * nx);
    m.e[1][1] = c(co, s * nz);
    Ok(Unitary(m))
}

/// Kronecker product `a ⊗ b`, `a` acting on the control (left) qubit.
pub fn tensor<T: Real>(a: &Unitary<T>, b: &Unitary<T>) -> Result<Unitary<T>> {
    Ok(Unitary(a.0.kron(&b.0)?))
}

/// CNOT with qubit 0 (left factor) as control.
pub fn cnot<T: Real>() -> Unitary<T> {
    let mut m = CMat::zeros(4);
    let one = c(T::one(), T::zero());
    m.e[0][0] = one;
    m.e[1][1] = one;
    m.e[2][3] = one;
    m.e[3][2] = one;
    Unitary(m)
}

/// CNOT with qubit 1 (right factor) as control.
pub fn cnot_reversed<T: Real>() -> Unitary<T> {
    let mut m = CMat::zeros(4);
    let one = c(T::one(), T::zero());
    m.e[0][0] = one;
    m.e[3][1] = one;
    m.e[2][2] = one;
    m.e[1][3] = one;
    Unitary(m)
}

/// `exp(−i θ/2 · Z⊗X)`, the bare cross-resonance entangler.
pub fn zx_rotation<T: Real>(theta: T) -> Result<Unitary<T>> {
    check_finite("theta", theta)?;
    let (s, co) = (theta / T::lit(2.0)).sin_cos();
    // Z⊗X: block diag(X, −X); exp = cos·I − i sin·Z⊗X
    let mut m = CMat::zeros(4);
    let cc = c(co, T::zero());
    for i in 0..4 {
        m.e[i][i] = cc;
    }
    m.e[0][1] = c(T::zero(), -s);
    m.e[1][0] = c(T::zero(), -s);
    m.e[2][3] = c(T::zero(), s);
    m.e[3][2] = c(T::zero(), s);
    Ok(Unitary(m))
}

/// Single-qubit frame corrections sandwiching a CR pulse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionKind {
    /// `I ⊗ R_X(θ)`; one angle.
    IX,
    /// `R_Z(θa) ⊗ R_Z(θb)`; two angles.
    ZZ,
    /// `I ⊗ R_Z(θ)`; one angle.
    IZ,
}

pub fn build_correction<T: Real>(kind: CorrectionKind, angles: &[T]) -> Result<Unitary<T>> {
    let expected = match kind {
        CorrectionKind::ZZ => 2,
        CorrectionKind::IX | CorrectionKind::IZ => 1,
    };
    if angles.len() != expected {
        return Err(Error::invalid(format!(
            "{kind:?} takes {expected} angle(s), got {}",
            angles.len()
        )));
    }
    let id = Unitary::identity(2);
    match kind {
        CorrectionKind::IX => tensor(&id, &rot_x(angles[0])?),
        CorrectionKind::IZ => tensor(&id, &rot_z(angles[0])?),
        CorrectionKind::ZZ => tensor(&rot_z(angles[0])?, &rot_z(angles[1])?),
    }
}

/// Which of the two phase-equivalent correction sets a [`CnotAngles`] is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Primary,
    /// Reproduces `e^{iπ/2}·CNOT` relative to the primary set.
    HalfPiPhase,
}

/// Correction angles around a CR pulse:
/// `CNOT = IX(θ4)·ZZ(θ1, θ2)·CR·IZ(θ3)`.
///
/// θ3 is never free: it is pinned to `2π − θ2` so the target-frame phase
/// added before the pulse is cancelled after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnotAngles<T> {
    /// ZI phase (control `R_Z`).
    pub theta1: T,
    /// IZ phase (target `R_Z` after the pulse).
    pub theta2: T,
    /// target `R_Z` before the pulse.
    pub theta3: T,
    /// IX phase (target `R_X` after the pulse).
    pub theta4: T,
    pub branch: Branch,
}

/// θ3 implied by θ2 under the phase constraint θ2 + θ3 = 2π.
pub fn constrained_theta3<T: Real>(theta2: T) -> T {
    T::TAU() - theta2
}

impl<T: Real> CnotAngles<T> {
    pub fn new(theta1: T, theta2: T, theta4: T, branch: Branch) -> Self {
        Self {
            theta1,
            theta2,
            theta3: constrained_theta3(theta2),
            theta4,
            branch,
        }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), Branch::Primary)
    }

    /// Deviation from θ2 + θ3 = 2π.
    pub fn constraint_residual(&self) -> T {
        (self.theta2 + self.theta3 - T::TAU()).abs()
    }

    /// The phase-equivalent set: θ4 → −θ4, θ1,2 → θ1,2 − π, θ3 → θ3 + π.
    pub fn other_branch(&self) -> Self {
        let pi = T::PI();
        Self {
            theta1: self.theta1 - pi,
            theta2: self.theta2 - pi,
            theta3: self.theta3 + pi,
            theta4: -self.theta4,
            branch: match self.branch {
                Branch::Primary => Branch::HalfPiPhase,
                Branch::HalfPiPhase => Branch::Primary,
            },
        }
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.theta1, -self.theta2, -self.theta4, self.branch)
    }
}

/// `IX(θ4)·ZZ(θ1,θ2)·CR·IZ(θ3)`.
pub fn cnot_from_cr<T: Real>(cr: &Unitary<T>, angles: &CnotAngles<T>) -> Result<Unitary<T>> {
    if cr.dim() != 4 {
        return Err(Error::invalid("CR must be a two-qubit unitary"));
    }
    if cr.max_unitarity_error() > unitarity_tol::<T>() {
        return Err(Error::invalid("CR is not unitary"));
    }
    let ix = build_correction(CorrectionKind::IX, &[angles.theta4])?;
    let zz = build_correction(CorrectionKind::ZZ, &[angles.theta1, angles.theta2])?;
    let iz = build_correction(CorrectionKind::IZ, &[angles.theta3])?;
    Ok(ix * zz * *cr * iz)
}

/// The CR unitary implied by fitted angles:
/// `CR = ZZ(θ1,θ2)·IX(θ4)·CNOT·IZ(θ3)`.
pub fn cr_from_cnot<T: Real>(fit: &CnotAngles<T>) -> Result<Unitary<T>> {
    let ix = build_correction(CorrectionKind::IX, &[fit.theta4])?;
    let zz = build_correction(CorrectionKind::ZZ, &[fit.theta1, fit.theta2])?;
    let iz = build_correction(CorrectionKind::IZ, &[fit.theta3])?;
    Ok(zz * ix * cnot() * iz)
}

/// Target Bloch-vector divergence between control preparations |0⟩ and |1⟩:
/// `½·|r₀ − r₁|`.
pub fn bloch_r_length<T: Real>(e0: &BlochExpectations<T>, e1: &BlochExpectations<T>) -> T {
    let dx = e0.x - e1.x;
    let dy = e0.y - e1.y;
    let dz = e0.z - e1.z;
    (dx * dx + dy * dy + dz * dz).sqrt() / T::lit(2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

    fn cplx(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn assert_mat(u: &Unitary<f64>, expect: &[[Complex<f64>; 2]; 2]) {
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (u.get(i, j) - expect[i][j]).norm() < 1e-12,
                    "({i},{j}) {:?}",
                    u
                );
            }
        }
    }

    #[test]
    fn rot_x_cases() {
        let one = cplx(1.0, 0.0);
        let zero = cplx(0.0, 0.0);
        assert_mat(&rot_x(0.0).unwrap(), &[[one, zero], [zero, one]]);
        let mi = cplx(0.0, -1.0);
        assert_mat(&rot_x(PI).unwrap(), &[[zero, mi], [mi, zero]]);
        let h = rot_x(PI / 2.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((h.get(i, j).norm() - FRAC_1_SQRT_2).abs() < 1e-12);
            }
        }
        assert!(rot_x(f64::NAN).is_err());
        assert!(rot_x(f64::INFINITY).is_err());
    }

    #[test]
    fn rot_z_cases() {
        let one = cplx(1.0, 0.0);
        let zero = cplx(0.0, 0.0);
        assert_mat(&rot_z(0.0).unwrap(), &[[one, zero], [zero, one]]);
        assert_mat(
            &rot_z(PI).unwrap(),
            &[[cplx(0.0, -1.0), zero], [zero, cplx(0.0, 1.0)]],
        );
        assert_mat(&rot_z(TAU).unwrap(), &[[-one, zero], [zero, -one]]);
        assert!(rot_z(f64::NAN).is_err());
    }

    #[test]
    fn tensor_identity_and_disjoint_commute() {
        let i2 = Unitary::<f64>::identity(2);
        let i4 = tensor(&i2, &i2).unwrap();
        assert!(i4.matrix().max_abs_diff(&CMat::identity(4)) < 1e-15);
        let a = tensor(&rot_z(0.7).unwrap(), &i2).unwrap();
        let b = tensor(&i2, &rot_x(1.3).unwrap()).unwrap();
        assert!((a * b).matrix().max_abs_diff((b * a).matrix()) < 1e-12);
        assert!(tensor(&i4, &i2).is_err());
    }

    #[test]
    fn ix_matches_hand_expansion() {
        // I ⊗ R_X(π/3) written out: block diagonal with the 2x2 R_X block twice.
        let t: f64 = PI / 3.0;
        let (co, s) = ((t / 2.0).cos(), (t / 2.0).sin());
        let expect = [
            [cplx(co, 0.0), cplx(0.0, -s), cplx(0.0, 0.0), cplx(0.0, 0.0)],
            [cplx(0.0, -s), cplx(co, 0.0), cplx(0.0, 0.0), cplx(0.0, 0.0)],
            [cplx(0.0, 0.0), cplx(0.0, 0.0), cplx(co, 0.0), cplx(0.0, -s)],
            [cplx(0.0, 0.0), cplx(0.0, 0.0), cplx(0.0, -s), cplx(co, 0.0)],
        ];
        let ix = tensor(&Unitary::identity(2), &rot_x(t).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((ix.get(i, j) - expect[i][j]).norm() < 1e-12);
            }
        }
        let built = build_correction(CorrectionKind::IX, &[t]).unwrap();
        assert!(built.matrix().max_abs_diff(ix.matrix()) < 1e-15);
    }

    #[test]
    fn build_correction_cases() {
        let ix0 = build_correction(CorrectionKind::IX, &[0.0_f64]).unwrap();
        assert!(ix0.matrix().max_abs_diff(&CMat::identity(4)) < 1e-15);

        let t = 0.9_f64;
        let zz = build_correction(CorrectionKind::ZZ, &[t, 0.0]).unwrap();
        let (m, p) = (
            Complex::from_polar(1.0, -t / 2.0),
            Complex::from_polar(1.0, t / 2.0),
        );
        for (i, want) in [m, m, p, p].into_iter().enumerate() {
            assert!((zz.get(i, i) - want).norm() < 1e-12);
        }

        let iz = build_correction(CorrectionKind::IZ, &[PI]).unwrap();
        let want = tensor(&Unitary::identity(2), &rot_z(PI).unwrap()).unwrap();
        assert!(iz.matrix().max_abs_diff(want.matrix()) < 1e-15);

        assert!(build_correction(CorrectionKind::ZZ, &[1.0_f64]).is_err());
        assert!(build_correction(CorrectionKind::IX, &[1.0_f64, 2.0]).is_err());
    }

    #[test]
    fn cnot_from_cr_identity_angles() {
        let u = cnot_from_cr(&cnot::<f64>(), &CnotAngles::zero()).unwrap();
        // IZ(2π) = −I is a global phase, so only the overlap is exact
        assert!((u.phase_overlap(&cnot()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cnot_from_cr_recovers_from_fitted_cr() {
        // θᶠ = (0.3, 0.7, 2π−0.7, −0.2): build CR, then undo with θ = −θᶠ.
        let fit = CnotAngles::new(0.3, 0.7, -0.2, Branch::Primary);
        assert!((fit.theta3 - (TAU - 0.7)).abs() < 1e-15);
        let cr = cr_from_cnot(&fit).unwrap();
        let corr = fit.negated();
        let u = cnot_from_cr(&cr, &corr).unwrap();
        assert!((u.phase_overlap(&cnot()) - 1.0).abs() < 1e-10);
        // the other direction: CR = ZZ·IX·(IX⁻¹ ZZ⁻¹ CR IZ⁻¹)·IZ
        let back = cr_from_cnot(&fit).unwrap();
        assert!(back.matrix().max_abs_diff(cr.matrix()) < 1e-15);
    }

    #[test]
    fn half_pi_branch_gives_i_cnot() {
        let fit = CnotAngles::new(0.3, 0.7, -0.2, Branch::Primary);
        let cr = cr_from_cnot(&fit).unwrap();
        let primary = fit.negated();
        let second = primary.other_branch();
        assert_eq!(second.branch, Branch::HalfPiPhase);
        assert!(second.constraint_residual() < 1e-12);
        let u1 = cnot_from_cr(&cr, &primary).unwrap();
        let u2 = cnot_from_cr(&cr, &second).unwrap();
        // u2 = e^{iπ/2}·u1 exactly (not just up to phase)
        assert!(u2.matrix().max_abs_diff(u1.with_phase(PI / 2.0).matrix()) < 1e-12);
    }

    #[test]
    fn bloch_r_cases() {
        let b = |x: f64, y: f64, z: f64| BlochExpectations::new(x, y, z).unwrap();
        assert_eq!(bloch_r_length(&b(0.3, 0.1, 0.2), &b(0.3, 0.1, 0.2)), 0.0);
        assert!((bloch_r_length(&b(0.0, 0.0, 1.0), &b(0.0, 0.0, -1.0)) - 1.0).abs() < 1e-15);
        assert!(
            (bloch_r_length(&b(1.0, 0.0, 0.0), &b(0.0, 1.0, 0.0)) - 0.5 * 2f64.sqrt()).abs()
                < 1e-15
        );
        assert!(BlochExpectations::new(1.0, 1.0, 0.0).is_err());
        let p = BlochExpectations::from_estimates(0.8_f64, 0.8, 0.0);
        assert!((p.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zx_rotation_at_half_pi_is_local_equivalent_to_cnot() {
        // exp(−iπ/4 ZX) = phase · (R_Z(π/2) ⊗ R_X(π/2)) · CNOT
        let zx = zx_rotation(PI / 2.0).unwrap();
        let fit = CnotAngles::new(PI / 2.0, 0.0, PI / 2.0, Branch::Primary);
        let model = cr_from_cnot(&fit).unwrap();
        assert!((zx.phase_overlap(&model) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reduced_bloch_of_product_state() {
        let psi = PureState::<f64>::basis(4, 0).unwrap();
        let h = tensor(&rot_y(PI / 2.0).unwrap(), &rot_x(PI / 2.0).unwrap()).unwrap();
        let out = h.apply(&psi);
        let c0 = out.bloch(0);
        let t1 = out.bloch(1);
        assert!((c0.x - 1.0).abs() < 1e-12 && c0.z.abs() < 1e-12);
        assert!((t1.y + 1.0).abs() < 1e-12 && t1.z.abs() < 1e-12);
    }

    #[test]
    fn serde_rejects_non_unitary() {
        let good = rot_x(0.4_f64).unwrap();
        let s = serde_json::to_string(&good).unwrap();
        let back: Unitary<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, good);
        let mut bad = *good.matrix();
        bad.set(0, 0, Complex::new(2.0, 0.0));
        let s = serde_json::to_string(&bad).unwrap();
        assert!(serde_json::from_str::<Unitary<f64>>(&s).is_err());
    }

    #[test]
    fn works_in_f32() {
        let u = rot_x(std::f32::consts::FRAC_PI_2).unwrap();
        assert!(u.max_unitarity_error() < 1e-6);
        let v = cnot_from_cr(&cnot::<f32>(), &CnotAngles::zero()).unwrap();
        assert!((v.phase_overlap(&cnot()) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn constructors_are_unitary(a in -20.0..20.0f64, b in -20.0..20.0f64, t in -20.0..20.0f64) {
            for u in [rot_x(a).unwrap(), rot_z(b).unwrap(), rot_axis(a, b, t, 0.3).unwrap_or(rot_y(t).unwrap())] {
                prop_assert!(u.max_unitarity_error() < 1e-12);
            }
            let w = build_correction(CorrectionKind::ZZ, &[a, b]).unwrap();
            prop_assert!(w.max_unitarity_error() < 1e-12);
            prop_assert!(zx_rotation(t).unwrap().max_unitarity_error() < 1e-12);
        }

        #[test]
        fn rot_x_composes(a in -10.0..10.0f64, b in -10.0..10.0f64) {
            let ab = rot_x(a).unwrap() * rot_x(b).unwrap();
            prop_assert!(ab.matrix().max_abs_diff(rot_x(a + b).unwrap().matrix()) < 1e-12);
        }

        #[test]
        fn eq10_roundtrip(t1 in 0.0..TAU, t2 in 0.0..TAU, t4 in 0.0..TAU) {
            let fit = CnotAngles::new(t1, t2, t4, Branch::Primary);
            let cr = cr_from_cnot(&fit).unwrap();
            let u = cnot_from_cr(&cr, &fit.negated()).unwrap();
            prop_assert!(u.phase_overlap(&cnot()) >= 1.0 - 1e-9);
        }

        #[test]
        fn r_length_bounded(v in proptest::collection::vec(-1.0..1.0f64, 6)) {
            let e0 = BlochExpectations::from_estimates(v[0], v[1], v[2]);
            let e1 = BlochExpectations::from_estimates(v[3], v[4], v[5]);
            prop_assert!(bloch_r_length(&e0, &e1) <= 1.0 + 1e-12);
        }
    }
}
