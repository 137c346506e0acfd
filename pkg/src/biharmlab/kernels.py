"""Fundamental solutions of the Laplacian and bilaplacian.

Every kernel here is radial, k(x) = F(|x|).  Derivatives are written through
the coefficients

    a1 = F'(r)/r,  a2 = a1'(r)/r,  a3 = a2'(r)/r,

so that

    d_i k       = a1 x_i
    d_ij k      = a1 d_ij + a2 x_i x_j
    d_ijk k     = a2 (d_ij x_k + d_ik x_j + d_jk x_i) + a3 x_i x_j x_k.

Sign convention: G is positive, so Lap G = -delta (SIGN = -1), and B is
normalized so that Lap B = -G and Lap^2 B = +delta.
"""
from dataclasses import dataclass
from math import gamma, pi, log

import numpy as np

SIGN = -1  # Lap G = SIGN * delta


def omega(n):
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return 2.0 * pi ** (n / 2.0) / gamma(n / 2.0)


def c4_log():
    """Constant of the n = 4 bilaplacian kernel B = c4 log|x|."""
    return -1.0 / (4.0 * omega(4))


@dataclass(frozen=True)
class RadialKernel:
    """F(r) = c * r**p, or c * log r when p is None."""
    n: int
    c: float
    p: object = None

    def _r2(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.einsum("...i,...i->...", x, x)
        if np.any(r2 == 0.0):
            raise ZeroDivisionError("kernel evaluated at its singularity x = 0")
        return x, r2

    def value_r2(self, r2):
        if self.p is None:
            return 0.5 * self.c * np.log(r2)
        return self.c * r2 ** (0.5 * self.p)

    def coeffs_r2(self, r2, order=3):
        """Return [a1, a2, a3][:order] as arrays of the shape of r2."""
        c, p = self.c, self.p
        if p is None:
            inv = 1.0 / r2
            a1 = c * inv
            out = [a1, -2.0 * a1 * inv, 8.0 * a1 * inv * inv]
        else:
            base = c * r2 ** (0.5 * p - 1.0)
            inv = 1.0 / r2
            a1 = p * base
            a2 = p * (p - 2) * base * inv
            a3 = p * (p - 2) * (p - 4) * base * inv * inv
            out = [a1, a2, a3]
        return out[:order]

    def __call__(self, x):
        x, r2 = self._r2(x)
        return self.value_r2(r2)

    def grad(self, x):
        x, r2 = self._r2(x)
        (a1,) = self.coeffs_r2(r2, 1)
        return a1[..., None] * x

    def hess(self, x):
        x, r2 = self._r2(x)
        a1, a2 = self.coeffs_r2(r2, 2)
        eye = np.eye(x.shape[-1])
        return a1[..., None, None] * eye + a2[..., None, None] * x[..., :, None] * x[..., None, :]

    def third(self, x):
        x, r2 = self._r2(x)
        _, a2, a3 = self.coeffs_r2(r2, 3)
        eye = np.eye(x.shape[-1])
        t = (eye[:, :, None] * x[..., None, None, :]
             + eye[:, None, :] * x[..., None, :, None]
             + eye[None, :, :] * x[..., :, None, None])
        xxx = x[..., :, None, None] * x[..., None, :, None] * x[..., None, None, :]
        return a2[..., None, None, None] * t + a3[..., None, None, None] * xxx

    def laplacian(self):
        """Radial Laplacian as a new RadialKernel (away from the origin)."""
        n, c, p = self.n, self.c, self.p
        if p is None:
            # Lap log r = (n-2) r^-2
            return RadialKernel(n, c * (n - 2), -2.0)
        return RadialKernel(n, c * p * (p + n - 2), p - 2.0)

    def order(self, x, k):
        return [self.__call__, self.grad, self.hess, self.third][k](x)


@dataclass(frozen=True)
class KernelTable:
    n: int
    omega_n: float
    sign_convention: int
    G: RadialKernel
    B: object


def _laplace_kernel(n):
    if n == 2:
        return RadialKernel(2, -1.0 / (2.0 * pi), None)
    if n < 2:
        raise ValueError("dimension must be at least 2")
    return RadialKernel(n, 1.0 / ((n - 2) * omega(n)), 2.0 - n)


def _biharm_kernel(n):
    if n == 4:
        return RadialKernel(4, c4_log(), None)
    if n < 4:
        raise ValueError(f"bilaplacian kernel supported for n >= 4, got n={n}")
    return RadialKernel(n, 1.0 / (2.0 * (4 - n) * (2 - n) * omega(n)), 4.0 - n)


def kernel_table(n):
    B = _biharm_kernel(n) if n >= 4 else None
    return KernelTable(n, omega(n), SIGN, _laplace_kernel(n), B)


def laplace_G(x, n=None):
    x = np.asarray(x, dtype=float)
    return _laplace_kernel(n or x.shape[-1])(x)


def grad_G(x, n=None):
    x = np.asarray(x, dtype=float)
    return _laplace_kernel(n or x.shape[-1]).grad(x)


def hess_G(x, n=None):
    x = np.asarray(x, dtype=float)
    return _laplace_kernel(n or x.shape[-1]).hess(x)


def third_G(x, n=None):
    x = np.asarray(x, dtype=float)
    return _laplace_kernel(n or x.shape[-1]).third(x)


def biharm_B(x, n=None, order=0):
    x = np.asarray(x, dtype=float)
    n = n or x.shape[-1]
    if n not in (4, 5, 6, 7):
        raise ValueError(f"bilaplacian kernel supported for n in 4..7, got n={n}")
    if not 0 <= order <= 3:
        raise ValueError("order must be 0..3")
    return _biharm_kernel(n).order(x, order)


def mollified_identity(kernel, n, power, radius=1.0, m=None):
    """Quadrature of  int k(y) (Lap^power phi)(y) dy  for a radial C^inf bump.

    The bump is phi(r) = exp(-1/(1 - (r/radius)^2)) and phi(0) = exp(-1).
    Radial reduction: for radial f, int f dy = omega_n int f(r) r^{n-1} dr.
    Returns (integral, phi(0)).
    """
    from scipy.integrate import quad

    def phi_derivs(r):
        # radial Laplacian applied `power` times, by nested finite polynomials
        return _lap_bump(r / radius, n, power) / radius ** (2 * power)

    def f(r):
        if r <= 0:
            return 0.0
        val = kernel.value_r2(np.array(r * r))
        return float(val) * phi_derivs(r) * r ** (n - 1)

    total, _ = quad(f, 0.0, radius, limit=400, epsabs=1e-13, epsrel=1e-11)
    return omega(n) * total, np.exp(-1.0)


def _lap_bump(r, n, power):
    """Lap^power of exp(-1/(1-r^2)) as a radial function, via sympy-free recursion.

    Uses the representation g(s) with s = r^2:  Lap f = 4 s f'' + 2 n f'.
    f is stored as a callable of s built from exact derivatives of
    exp(-1/(1-s)); derivatives obtained with a small automatic scheme.
    """
    s = r * r
    if s >= 1.0:
        return 0.0
    # Taylor-mode: represent f(s) = P(u) exp(-u), u = 1/(1-s), du/ds = u^2.
    # Polynomials in u as coefficient arrays.
    P = np.array([1.0])

    def d_ds(P):
        # d/ds [P(u) e^{-u}] = (P'(u) - P(u)) u^2 e^{-u}
        dP = np.polynomial.polynomial.polyder(P) if len(P) > 1 else np.array([0.0])
        Q = np.polynomial.polynomial.polysub(dP, P)
        return np.polynomial.polynomial.polymul(Q, [0.0, 0.0, 1.0])

    for _ in range(power):
        # Lap f = 4 s f_ss + 2 n f_s, with s = 1 - 1/u
        P1 = d_ds(P)
        P2 = d_ds(P1)
        # s as polynomial in 1/u is not polynomial in u; multiply through by u:
        # 4 s P2 = 4 P2 - 4 P2/u.  Keep exact by working with Laurent -> shift.
        P2_over_u = _div_u(P2)
        term = np.polynomial.polynomial.polysub(4.0 * P2, 4.0 * P2_over_u)
        P = np.polynomial.polynomial.polyadd(term, 2.0 * n * P1)
    u = 1.0 / (1.0 - s)
    return float(np.polynomial.polynomial.polyval(u, P) * np.exp(-u))


def _div_u(P):
    # every derivative polynomial carries a factor u^2, so division is exact
    P = np.asarray(P, dtype=float)
    if abs(P[0]) > 1e-300:
        raise ArithmeticError("non-divisible polynomial")
    return P[1:]
