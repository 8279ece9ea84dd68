"""Saddle-point solves, static condensation and the online QoI map.

The mixed system

    [ A   B ] [r]   [L]
    [ B^T 0 ] [u] = [0]

is solved by eliminating ``r``: ``S = B^T A^{-1} B``, ``u = S^{-1} B^T A^{-1} L``,
``r = A^{-1} (L - B u)``. A is SPD by construction and S is SPD exactly when
B has full column rank (the discrete inf-sup condition).

S is never formed. With ``A = R^T R`` and the thin QR ``R^{-T} B = Q_1 R_1``
we have ``S = R_1^T R_1``, so ``u`` is a least-squares solve with the
conditioning of ``R^{-T} B`` rather than its square. This matters for
trained weights spanning many orders of magnitude.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import linalg

from .quadrature import gauss_interval

CONDENSED_MAGIC = b"GFEMCOND"
CONDENSED_VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")


class SolverError(RuntimeError):
    """A factorization failed; ``matrix`` names the offending operator."""

    def __init__(self, matrix, message):
        super().__init__(f"{matrix}: {message}")
        self.matrix = matrix


def cholesky(M, name):
    """Upper-triangular R with M = R^T R."""
    M = np.array(M, dtype=float, order="F")
    try:
        if not np.all(np.isfinite(M)):
            raise ValueError("array must not contain infs or NaNs")
        c = linalg.cholesky(M, lower=False, overwrite_a=True, check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        hint = {
            "A": "Gram matrix is not SPD (check the weight and quadrature)",
            "S": "B^T A^-1 B is singular: the trial/test pairing violates inf-sup",
        }.get(name, "matrix is not symmetric positive definite")
        raise SolverError(name, f"{hint} ({exc})") from exc
    return c


@dataclass
class MixedSolution:
    r: np.ndarray
    u: np.ndarray


def _tri(R, X, trans="N"):
    # inputs come from a checked factorization
    return linalg.solve_triangular(R, X, trans=trans, check_finite=False)


RANK_TOL = 1e-14  # relative size of the smallest R_1 pivot before S counts as singular


class MixedFactorization:
    """Factorization of the pair (A, B): ``A = R^T R``, ``R^{-T} B = Q_1 R_1``."""

    def __init__(self, A, B):
        self.B = np.asarray(B, float)
        self.R = cholesky(A, "A")
        self.C = _tri(self.R, self.B, "T")
        self.Q1, self.R1 = np.linalg.qr(self.C)
        d = np.abs(np.diag(self.R1))
        if d.size and not (np.all(np.isfinite(self.R1)) and d.min() > RANK_TOL * d.max()):
            raise SolverError("S", "B^T A^-1 B is singular: the trial/test pairing "
                                   "violates inf-sup")

    @property
    def S(self):
        return self.R1.T @ self.R1

    def whiten(self, X):
        """R^{-T} X."""
        return _tri(self.R, np.asarray(X, float), "T")

    def unwhiten(self, Y):
        """R^{-1} Y."""
        return _tri(self.R, Y)

    def solve_S(self, X):
        """S^{-1} X."""
        return _tri(self.R1, _tri(self.R1, np.asarray(X, float), "T"))

    def solve(self, L):
        y = self.whiten(L)
        u = _tri(self.R1, self.Q1.T @ y)
        return MixedSolution(self.unwhiten(y - self.C @ u), u)

    def adjoint(self, X):
        """A^{-1} B S^{-1} X, the test-space representative of a trial functional."""
        return self.unwhiten(self.Q1 @ _tri(self.R1, np.asarray(X, float), "T"))

    def online_map(self, Q):
        """Q S^{-1} B^T A^{-1} as a (k, m) matrix."""
        return self.adjoint(np.atleast_2d(Q).T).T


def solve_mixed(system, L):
    """Solve the mixed system for one or several load vectors (columns of L)."""
    return MixedFactorization(system.A, system.B).solve(L)


# -- equivalent formulations (verification views) -------------------------------


def solve_block(system, L):
    """Direct LU solve of the full (m+n) x (m+n) saddle-point matrix."""
    A, B = system.A, system.B
    m, n = B.shape
    K = np.block([[A, B], [B.T, np.zeros((n, n))]])
    L = np.asarray(L, float)
    rhs = np.concatenate([L, np.zeros((n,) + L.shape[1:])])
    x = np.linalg.solve(K, rhs)
    return MixedSolution(x[:m], x[m:])


def projected_optimal_test(system):
    """Coefficients (m, n) of the projected optimal test functions
    T psi_j, i.e. the solutions of (T psi_j, v)_omega = b(psi_j, v) on V_h."""
    return np.linalg.solve(system.A, system.B)


def solve_petrov_galerkin(system, L):
    """Square Petrov-Galerkin system on the projected optimal test space."""
    T = projected_optimal_test(system)
    return np.linalg.solve(T.T @ system.B, T.T @ np.asarray(L, float))


def solve_min_residual(system, L):
    """Minimizer of the discrete dual residual norm ||A^{-1/2}(L - B w)||_2."""
    evals, evecs = np.linalg.eigh(system.A)
    A_mhalf = (evecs / np.sqrt(evals)) @ evecs.T
    w, *_ = np.linalg.lstsq(A_mhalf @ system.B, A_mhalf @ np.asarray(L, float), rcond=None)
    return w


# -- offline/online split --------------------------------------------------------


class CondensedOperator:
    """Stored offline data for fast QoI evaluation.

    ``online_map`` is the (qoi_count, m) matrix Q^T S^{-1} B^T A^{-1}; it is
    the only operator kept after a write/read round trip. Freshly condensed
    operators also keep the factorization, to solve for ``u``.
    """

    def __init__(self, Q, online_map, *, factor=None,
                 assemble_load: Callable | None = None, lambda_domain=None):
        self.Q = np.atleast_2d(np.asarray(Q, float))
        self.online_map = np.atleast_2d(np.asarray(online_map, float))
        self.factor = factor
        self.assemble_load = assemble_load
        self.lambda_domain = lambda_domain

    @property
    def m(self):
        return self.online_map.shape[1]

    @property
    def n(self):
        return self.Q.shape[1]

    @property
    def qoi_count(self):
        return self.Q.shape[0]

    def _factor(self):
        if self.factor is None:
            raise SolverError("S", "operator was loaded without factorizations")
        return self.factor

    @property
    def S(self):
        return self._factor().S

    def solve(self, L):
        return self._factor().solve(L).u

    def qoi_from_load(self, L):
        return self.online_map @ np.asarray(L, float)


def condense(system, assemble_load=None, lambda_domain=None):
    if system.Q is None:
        raise ValueError("system has no QoI vectors")
    f = MixedFactorization(system.A, system.B)
    return CondensedOperator(system.Q, f.online_map(system.Q), factor=f,
                             assemble_load=assemble_load, lambda_domain=lambda_domain)


def online_qoi(condensed, lam):
    """QoI values of the discrete solution for parameter ``lam``."""
    if condensed.assemble_load is None:
        raise ValueError("condensed operator has no load assembler attached")
    if condensed.lambda_domain is not None:
        a, b = condensed.lambda_domain
        if not a <= lam <= b:
            raise ValueError(f"lambda={lam} outside [{a}, {b}]")
    return condensed.qoi_from_load(condensed.assemble_load(lam))


def write_condensed(op, path):
    """Header (magic, version, m, n, qoi_count) then Q and the online map,
    all little-endian float64."""
    with open(Path(path), "wb") as f:
        f.write(_HEADER.pack(CONDENSED_MAGIC, CONDENSED_VERSION, op.m, op.n, op.qoi_count))
        f.write(op.Q.astype("<f8").tobytes())
        f.write(op.online_map.astype("<f8").tobytes())


def read_condensed(path, assemble_load=None, lambda_domain=None):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated condensed operator file")
    magic, version, m, n, k = _HEADER.unpack_from(data)
    if magic != CONDENSED_MAGIC:
        raise ValueError(f"{path}: not a condensed operator file")
    if version != CONDENSED_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(data, "<f8", offset=_HEADER.size)
    if body.size != k * n + k * m:
        raise ValueError(f"{path}: payload size does not match header")
    Q = body[: k * n].reshape(k, n).astype(float)
    M = body[k * n:].reshape(k, m).astype(float)
    return CondensedOperator(Q, M, assemble_load=assemble_load, lambda_domain=lambda_domain)


# -- closed-form optimal test function (1D diffusion, trial psi(x) = x) --------


def _inverse_weight_integral(net, theta, x, panels, with_grad):
    """phi(x) = int_0^x 1/omega and optionally d phi / d theta."""
    x = np.atleast_1d(np.asarray(x, float))
    g = gauss_interval(5)
    t, w = g.points[:, 0], g.weights
    h = 1.0 / panels
    edges = np.arange(panels) * h
    s = (edges[:, None] + h * t[None, :]).ravel()
    k = np.clip(np.floor(x / h).astype(int), 0, panels)
    base = k * h
    sp = (base[:, None] + (x - base)[:, None] * t[None, :]).ravel()
    wp = ((x - base)[:, None] * w[None, :]).ravel()
    pts = np.concatenate([s, sp])
    if with_grad:
        om, dom = net.weight_and_grad(pts, theta)
    else:
        om, dom = net.weight(pts, theta), None
    ns = len(s)
    inv = 1.0 / om
    cum = np.concatenate([[0.0], np.cumsum((inv[:ns] * h).reshape(panels, 5) @ w)])
    phi = cum[k] + (inv[ns:] * wp).reshape(len(x), 5).sum(1)
    if not with_grad:
        return phi, None
    dinv = -dom / om[:, None] ** 2
    cell = np.einsum("cqp,q->cp", (dinv[:ns] * h).reshape(panels, 5, -1), w)
    dcum = np.vstack([np.zeros((1, dom.shape[1])), np.cumsum(cell, axis=0)])
    dphi = dcum[k] + (dinv[ns:] * wp[:, None]).reshape(len(x), 5, -1).sum(1)
    return phi, dphi


def optimal_test_function_1d(weightnet, panels=1024):
    """Return phi(x) = int_0^x ds / omega(s) by composite 5-point Gauss."""

    def phi(x):
        scalar = np.ndim(x) == 0
        out, _ = _inverse_weight_integral(weightnet, weightnet.theta, x, panels, False)
        return float(out[0]) if scalar else out

    return phi


def optimal_test_relative_error(phi, lam, x0, signed=False):
    """Relative QoI error of the optimal-test Petrov-Galerkin solution
    u_h(x) = x phi(lam) / phi(1) for the point-load diffusion problem.

    With ``signed=True`` returns (u - u_h)(x0) / u(x0) instead of its modulus.
    """
    ratio = phi(lam) / phi(1.0)
    err = 1.0 - ratio if x0 <= lam else 1.0 - x0 / lam * ratio
    return err if signed else abs(err)
