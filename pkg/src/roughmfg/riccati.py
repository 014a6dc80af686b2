"""Backward matrix Riccati machinery.

Everything backward is stepped on the original intervals from k = N down to
0.  Drift parts take two half-interval RK4 steps (so the classical solver and
the zero-rough reduction of the rough solver share one arithmetic path);
rough parts take one explicit backward Davie step anchored at the right
endpoint, where the second-level data of the reversed increment is
``b = delta (x) delta - area`` (exact by Chen's relation).  Iterates are
symmetrized after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controlled import ControlledPath, integral_terms
from .errors import AssumptionError, ConfigError, NumericalError
from .linear_rde import RoughCoefficient, as_node_matrices, quarter_values
from .rough_core import RoughPath, TimeGrid

BLOWUP = 1e8
PSD_TOL = 1e-12


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def min_eigenvalue(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(_sym(a)).min())


@dataclass(frozen=True)
class DriftSpec:
    """Per-node drift data A, B, C and noise loading Sigma."""

    A: np.ndarray          # (N+1, d, d)
    B: np.ndarray          # (N+1, d, kappa)
    C: np.ndarray          # (N+1, d, d)
    Sigma: np.ndarray      # (N+1, d, q)

    @classmethod
    def build(cls, grid: TimeGrid, d: int, kappa: int, q: int, A=0.0, B=0.0, C=0.0, Sigma=0.0):
        return cls(A=as_node_matrices(A, grid, d),
                   B=as_node_matrices(B, grid, d, kappa),
                   C=as_node_matrices(C, grid, d),
                   Sigma=as_node_matrices(Sigma, grid, d, q))

    def __post_init__(self):
        for name in ("A", "B", "C", "Sigma"):
            a = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ConfigError(f"(S2): drift coefficient {name} must be finite")
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class CostSpec:
    """Quadratic cost data; symmetrized on ingest, definiteness enforced."""

    Q: np.ndarray            # (N+1, d, d) PSD
    Qbar: np.ndarray         # (N+1, d, d) PSD
    R: np.ndarray            # (N+1, kappa, kappa), R >= lam
    S: np.ndarray            # (N+1, d, d)
    terminal_Q: np.ndarray   # (d, d) PSD
    terminal_Qbar: np.ndarray
    terminal_S: np.ndarray
    lam: float

    @classmethod
    def build(cls, grid: TimeGrid, d: int, kappa: int, Q=0.0, Qbar=0.0, R=1.0, S=0.0,
              terminal_Q=None, terminal_Qbar=None, terminal_S=None, lam=1.0):
        def term(x, rows, cols):
            if x is None:
                return np.zeros((rows, cols))
            x = np.asarray(x, dtype=float)
            return x * np.eye(rows) if x.ndim == 0 else x
        return cls(Q=as_node_matrices(Q, grid, d), Qbar=as_node_matrices(Qbar, grid, d),
                   R=as_node_matrices(R, grid, kappa, kappa), S=as_node_matrices(S, grid, d),
                   terminal_Q=term(terminal_Q, d, d), terminal_Qbar=term(terminal_Qbar, d, d),
                   terminal_S=term(terminal_S, d, d), lam=float(lam))

    def __post_init__(self):
        for name in ("Q", "Qbar", "R"):
            a = _sym(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, a)
        for name in ("terminal_Q", "terminal_Qbar"):
            a = _sym(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, a)
        for name in ("S", "terminal_S"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.lam <= 0:
            raise AssumptionError("(S3): lambda must be positive")
        for name in ("Q", "Qbar"):
            ev = np.linalg.eigvalsh(getattr(self, name)).min()
            if ev < -PSD_TOL:
                raise AssumptionError(f"(S3): {name}_t not positive semidefinite "
                                      f"(min eigenvalue {ev:.3e})")
        for name in ("terminal_Q", "terminal_Qbar"):
            ev = float(np.linalg.eigvalsh(getattr(self, name)).min())
            if ev < -PSD_TOL:
                raise AssumptionError(f"(S3): {name} not positive semidefinite")
        ev = np.linalg.eigvalsh(self.R)
        bad = np.argmin(ev.min(axis=-1))
        if ev.min() < self.lam - PSD_TOL:
            raise AssumptionError(f"(S3): R_t not positive definite above lambda at node {bad} "
                                  f"(min eigenvalue {ev.min():.3e} < {self.lam})")

    def qsum(self) -> np.ndarray:
        """Q_t + Qbar_t - Qbar_t S_t per node, symmetrized."""
        return _sym(self.Q + self.Qbar - np.einsum("kab,kbc->kac", self.Qbar, self.S))

    def terminal_qsum(self) -> np.ndarray:
        return _sym(self.terminal_Q + self.terminal_Qbar - self.terminal_Qbar @ self.terminal_S)


@dataclass
class RiccatiBundle:
    """Backward decoupling data: rough Riccati, e-path, and Volterra P, Pi."""

    p_tilde: np.ndarray            # (N+1, d, d) symmetric rough Riccati
    e: np.ndarray                  # (N+1, d, d)
    lam: np.ndarray                # (N+1,)
    p_bar: np.ndarray              # (N+1, d, d) = e p_tilde
    s4r_holds: bool
    P: np.ndarray = None           # (N+1, d, d) classical Riccati on hats
    Pi: np.ndarray = None          # (N+1, d)
    hats: dict = field(default_factory=dict)


# ------------------------------------------------------------- drift stepping

def _riccati_rhs(p, right, leftT, bq, scale, src):
    """dP/dt for the backward Riccati written forward in time."""
    return -(p @ right + leftT @ p - scale * (p @ bq @ p) + src)


def _quad_eval(q, k, slot):
    """Coefficient value at quarter slot (0 -> node k, 1..3 -> interior, 4 -> node k+1)."""
    nodes, quarters = q
    if slot == 0:
        return nodes[k]
    if slot == 4:
        return nodes[k + 1]
    return quarters[k, slot - 1]


def _backward_interval(p, k, dt, coeffs, rhs):
    """Two backward RK4 half-steps across [t_k, t_{k+1}] given p at t_{k+1}."""
    h = -0.5 * dt
    for (s0, s1, s2) in ((4, 3, 2), (2, 1, 0)):
        c0 = [_quad_eval(c, k, s0) for c in coeffs]
        c1 = [_quad_eval(c, k, s1) for c in coeffs]
        c2 = [_quad_eval(c, k, s2) for c in coeffs]
        k1 = rhs(p, *c0)
        k2 = rhs(p + 0.5 * h * k1, *c1)
        k3 = rhs(p + 0.5 * h * k2, *c1)
        k4 = rhs(p + h * k3, *c2)
        p = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def _with_quarters(nodes: np.ndarray):
    return (nodes, quarter_values(nodes))


def _guard(p, k, what):
    if not np.all(np.isfinite(p)) or np.abs(p).max() > BLOWUP:
        raise NumericalError(f"{what} diverged at node {k}; check (S3)/(S4-R)")


def solve_classical_riccati(hat_a: np.ndarray, bqb: np.ndarray, qsum: np.ndarray,
                            terminal: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Backward RK4 for dP + P A + A^T P - P (B R^-1 B^T) P + Qsum = 0, P_T given.

    ``bqb`` is the assembled middle factor B R^-1 B^T per node.
    """
    n = grid.n_steps
    d = hat_a.shape[-1]
    coeffs = [_with_quarters(hat_a), _with_quarters(np.swapaxes(hat_a, 1, 2)),
              _with_quarters(bqb), (np.ones(n + 1), np.ones((n, 3))), _with_quarters(qsum)]
    out = np.empty((n + 1, d, d))
    out[n] = _sym(np.asarray(terminal, dtype=float))
    dt = grid.dt
    for k in range(n - 1, -1, -1):
        p = _backward_interval(out[k + 1], k, dt[k], coeffs, _riccati_rhs)
        out[k] = _sym(p)
        _guard(out[k], k, "classical Riccati")
    return out


def _linear_rhs(x, mat, forcing):
    return -(mat @ x + forcing)


def solve_linear_backward(mat: np.ndarray, forcing: np.ndarray, terminal: np.ndarray,
                          grid: TimeGrid) -> np.ndarray:
    """Backward RK4 for dX/dt + mat_t X + forcing_t = 0, X_T given (vector X)."""
    n = grid.n_steps
    coeffs = [_with_quarters(mat), _with_quarters(forcing)]
    out = np.empty((n + 1,) + np.shape(terminal))
    out[n] = np.asarray(terminal, dtype=float)
    dt = grid.dt
    for k in range(n - 1, -1, -1):
        out[k] = _backward_interval(out[k + 1], k, dt[k], coeffs, _linear_rhs)
        _guard(out[k], k, "linear backward equation")
    return out


def solve_Pi(hat_a: np.ndarray, bqb: np.ndarray, P: np.ndarray, forcing: np.ndarray,
             terminal: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Offset equation dPi + (A^T - P B R^-1 B^T) Pi + forcing = 0, Pi_T given."""
    mat = np.swapaxes(hat_a, 1, 2) - np.einsum("kab,kbc->kac", P, bqb)
    return solve_linear_backward(mat, forcing, terminal, grid)


# --------------------------------------------------------------- rough steps

def _lyapunov_rough_increment(p, h_mats, h_dmats, delta, barea):
    """Backward Davie increment for d p = p H[d eta] + H^T[d eta] p."""
    f1 = np.einsum("iab,i->ab", h_mats, delta)
    first = p @ f1 + f1.T @ p
    fp = np.einsum("jabi,ij->ab", h_dmats, barea)

    def lyap(m, x):
        return x @ m + m.T @ x

    # F_j(F_i(p)) contracted against barea, minus the coefficient correction
    inner = np.einsum("iab,ij->jab", h_mats, barea)
    second = np.zeros_like(p)
    for j in range(h_mats.shape[0]):
        second += lyap(h_mats[j], lyap(inner[j], p))
    return first + second - lyap(fp, p)


def solve_symmetric_rough_riccati(right: np.ndarray, leftT: np.ndarray, bqb: np.ndarray,
                                  scale: np.ndarray, src: np.ndarray, terminal: np.ndarray,
                                  rough: RoughCoefficient, grid: TimeGrid,
                                  symmetry_tol: float = 1e-6) -> np.ndarray:
    """Backward symmetric rough Riccati with Lyapunov-type rough part.

    Solves, backward from ``terminal``,

        dp = -(p right_t + leftT_t p - scale_t p bqb_t p + src_t) dt
             - (p H[d eta] + H[d eta]^T p),       H = rough coefficient,

    by Strang steps: half RK4 drift, backward Davie rough increment anchored
    at the right endpoint, half RK4 drift; symmetrized each step.
    """
    rp = rough.reference
    if not rp.grid.matches(grid):
        raise ConfigError("rough coefficient grid mismatch")
    n, d = grid.n_steps, right.shape[-1]
    coeffs = [_with_quarters(right), _with_quarters(leftT), _with_quarters(bqb),
              _with_quarters(scale), _with_quarters(src)]
    delta = rp.increments()
    barea = np.einsum("ki,kj->kij", delta, delta) - rp.areas
    out = np.empty((n + 1, d, d))
    out[n] = _sym(np.asarray(terminal, dtype=float))
    dt = grid.dt
    have_rough = not rough.is_zero()
    for k in range(n - 1, -1, -1):
        p = out[k + 1]
        if have_rough:
            p = _half_backward(p, k, dt[k], coeffs, upper=True)
            p = p + _lyapunov_rough_increment(p, rough.mats[k + 1], rough.dmats[k + 1],
                                              delta[k], barea[k])
            p = _half_backward(p, k, dt[k], coeffs, upper=False)
        else:
            p = _backward_interval(p, k, dt[k], coeffs, _riccati_rhs)
        sym_drift = float(np.abs(p - p.T).max())
        if sym_drift > symmetry_tol * max(1.0, float(np.abs(p).max())):
            raise NumericalError(f"symmetric rough Riccati lost symmetry at node {k} "
                                 f"({sym_drift:.3e}); scheme failure")
        out[k] = _sym(p)
        _guard(out[k], k, "symmetric rough Riccati")
    return out


def _half_backward(p, k, dt, coeffs, upper: bool):
    """One backward RK4 half-step across the upper or lower half interval."""
    h = -0.5 * dt
    slots = (4, 3, 2) if upper else (2, 1, 0)
    s0, s1, s2 = slots
    c0 = [_quad_eval(c, k, s0) for c in coeffs]
    c1 = [_quad_eval(c, k, s1) for c in coeffs]
    c2 = [_quad_eval(c, k, s2) for c in coeffs]
    k1 = _riccati_rhs(p, *c0)
    k2 = _riccati_rhs(p + 0.5 * h * k1, *c1)
    k3 = _riccati_rhs(p + 0.5 * h * k2, *c1)
    k4 = _riccati_rhs(p + h * k3, *c2)
    return p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def solve_nonsymmetric_rough_riccati(right: np.ndarray, leftT: np.ndarray, bqb: np.ndarray,
                                     src: np.ndarray, terminal: np.ndarray,
                                     rough_right: RoughCoefficient,
                                     rough_leftT: RoughCoefficient,
                                     grid: TimeGrid) -> np.ndarray:
    """Direct backward scheme for the non-symmetric rough Riccati.

    Rough part d p = p H[d eta] + G^T[d eta] p with independent H (right) and
    G (left) coefficients; used as the cross-check oracle for p_bar = e p_tilde.
    """
    rp = rough_right.reference
    n, d = grid.n_steps, right.shape[-1]
    coeffs = [_with_quarters(right), _with_quarters(leftT), _with_quarters(bqb),
              (np.ones(n + 1), np.ones((n, 3))), _with_quarters(src)]
    delta = rp.increments()
    barea = np.einsum("ki,kj->kij", delta, delta) - rp.areas
    hm, hd = rough_right.mats, rough_right.dmats
    gm, gd = rough_leftT.mats, rough_leftT.dmats
    out = np.empty((n + 1, d, d))
    out[n] = np.asarray(terminal, dtype=float)
    dt = grid.dt

    def rough_inc(p, k):
        h1 = np.einsum("iab,i->ab", hm[k + 1], delta[k])
        g1 = np.einsum("iab,i->ab", gm[k + 1], delta[k])
        first = p @ h1 + g1.T @ p

        def f(mats_h, mats_g, x):
            return x @ mats_h + mats_g.T @ x

        second = np.zeros_like(p)
        hin = np.einsum("iab,ij->jab", hm[k + 1], barea[k])
        gin = np.einsum("iab,ij->jab", gm[k + 1], barea[k])
        for j in range(hm.shape[1]):
            second += f(hm[k + 1, j], gm[k + 1, j], f(hin[j], gin[j], p))
        hp = np.einsum("jabi,ij->ab", hd[k + 1], barea[k])
        gp = np.einsum("jabi,ij->ab", gd[k + 1], barea[k])
        return first + second - (p @ hp + gp.T @ p)

    for k in range(n - 1, -1, -1):
        p = _half_backward(out[k + 1], k, dt[k], coeffs, upper=True)
        p = p + rough_inc(p, k)
        p = _half_backward(p, k, dt[k], coeffs, upper=False)
        out[k] = p
        _guard(out[k], k, "non-symmetric rough Riccati")
    return out


def assemble_pbar(e: np.ndarray, p_tilde: np.ndarray, terminal_qsum: np.ndarray,
                  terminal_tol: float | None = None) -> np.ndarray:
    """p_bar = e p_tilde with the terminal identity p_bar_T = Q + Qbar - Qbar S."""
    if e.shape != p_tilde.shape:
        raise ConfigError("e and p_tilde must share shape and grid")
    pbar = np.einsum("kab,kbc->kac", e, p_tilde)
    res = float(np.abs(pbar[-1] - terminal_qsum).max())
    if terminal_tol is not None and res > terminal_tol:
        raise NumericalError(f"p_bar terminal residual {res:.3e} exceeds {terminal_tol:.3e}")
    return pbar


def nonsymmetric_residual(pbar: np.ndarray, right: np.ndarray, leftT: np.ndarray,
                          bqb: np.ndarray, src: np.ndarray, terminal: np.ndarray,
                          rough_right: RoughCoefficient, rough_leftT: RoughCoefficient,
                          grid: TimeGrid) -> float:
    """Integrated-form defect of the non-symmetric rough Riccati along ``pbar``."""
    rp = rough_right.reference
    hm, hd = rough_right.mats, rough_right.dmats
    gm, gd = rough_leftT.mats, rough_leftT.dmats
    # integrand_i = pbar H_i + G_i^T pbar, with the equation's own derivative of pbar
    dpbar = -(np.einsum("kab,kibc->kaci", pbar, hm) + np.einsum("kiba,kbc->kaci", gm, pbar))
    vals = np.einsum("kab,kibc->kaci", pbar, hm) + np.einsum("kiba,kbc->kaci", gm, pbar)
    der = (np.einsum("kabj,kibc->kacij", dpbar, hm)
           + np.einsum("kab,kibcj->kacij", pbar, hd)
           + np.einsum("kibaj,kbc->kacij", gd, pbar)
           + np.einsum("kiba,kbcj->kacij", gm, dpbar))
    rough_terms = integral_terms(ControlledPath(rp, vals, der))
    drift = (np.einsum("kab,kbc->kac", pbar, right) + np.einsum("kba,kbc->kac", leftT, pbar)
             - np.einsum("kab,kbc,kcd->kad", pbar, bqb, pbar) + src)
    dt = grid.dt[:, None, None]
    drift_terms = 0.5 * dt * (drift[:-1] + drift[1:])
    tail = np.zeros_like(pbar)
    tail[:-1] = np.cumsum((rough_terms + drift_terms)[::-1], axis=0)[::-1]
    res = pbar - (terminal + tail)
    return float(np.abs(res).max())
