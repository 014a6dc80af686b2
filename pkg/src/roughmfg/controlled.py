"""Deterministic controlled rough paths and the compensated-sum integral.

A controlled path stores node values ``Z[k]`` of any tensor shape together
with a Gubinelli derivative ``dZ[k]`` that carries one extra trailing axis of
size p (the noise direction), so ``delta Z_{s,t} ~ dZ_s . delta eta_{s,t}``.
Only the pathwise (deterministic) class is represented; conditional-moment
seminorms play no role in the mild formulation used downstream.

Integrands for the rough integral are matrix paths whose *last value axis*
contracts against d eta.  The integral is the compensated Riemann sum

    sum_k  Z_k . delta_k  +  dZ_k : area_k

with ``dZ_k : area_k = sum_{i,j} dZ[..., j, i] area[i, j]`` (the trailing
derivative axis pairs with the first area index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import linregress

from .errors import ConfigError
from .rough_core import RoughPath


@dataclass(frozen=True)
class ControlledPath:
    reference: RoughPath
    values: np.ndarray        # (N+1, *shape)
    derivative: np.ndarray    # (N+1, *shape, p)
    beta: float = None
    beta_prime: float = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        der = np.asarray(self.derivative, dtype=float)
        n1 = self.reference.values.shape[0]
        p = self.reference.dim
        if vals.shape[0] != n1 or der.shape != vals.shape + (p,):
            raise ConfigError("controlled path shapes inconsistent with reference")
        beta = self.reference.gamma if self.beta is None else self.beta
        beta_prime = beta if self.beta_prime is None else self.beta_prime
        if not (0 < beta_prime <= beta <= self.reference.gamma):
            raise ConfigError("need 0 < beta' <= beta <= gamma")
        for name, a in (("values", vals), ("derivative", der)):
            a = np.ascontiguousarray(a)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "beta_prime", beta_prime)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    def remainder(self, j: int, k: int) -> np.ndarray:
        """R^Z over [t_j, t_k]: delta Z - dZ_j . delta eta."""
        de = self.reference.values[k] - self.reference.values[j]
        return self.values[k] - self.values[j] - self.derivative[j] @ de

    def remainder_sup(self) -> float:
        """Grid-sup of |R^Z_{s,t}| / |t - s|^(beta + beta')."""
        prof = remainder_profile(self)
        expo = self.beta + self.beta_prime
        return float(max((m / h ** expo for h, m in prof), default=0.0))


def constant(reference: RoughPath, value: np.ndarray, beta=None, beta_prime=None) -> ControlledPath:
    value = np.asarray(value, dtype=float)
    n1 = reference.values.shape[0]
    vals = np.broadcast_to(value, (n1,) + value.shape).copy()
    der = np.zeros(vals.shape + (reference.dim,))
    return ControlledPath(reference, vals, der, beta, beta_prime)


def from_reference(reference: RoughPath, beta=None, beta_prime=None) -> ControlledPath:
    """The path itself as a controlled path: (eta, Id)."""
    n1, p = reference.values.shape
    der = np.broadcast_to(np.eye(p), (n1, p, p)).copy()
    return ControlledPath(reference, reference.values.copy(), der, beta, beta_prime)


def product(a: ControlledPath, b: ControlledPath) -> ControlledPath:
    """Leibniz product (ab, a'b + ab') for matrix x matrix/vector shapes."""
    if a.reference is not b.reference and not (
            a.reference.grid.matches(b.reference.grid)
            and np.array_equal(a.reference.values, b.reference.values)
            and np.array_equal(a.reference.areas, b.reference.areas)):
        raise ConfigError("controlled paths must share their reference rough path")
    if len(a.shape) != 2:
        raise ConfigError("left factor must be matrix-shaped")
    if len(b.shape) == 1:
        if a.shape[1] != b.shape[0]:
            raise ConfigError("shapes not composable")
        vals = np.einsum("kab,kb->ka", a.values, b.values)
        der = np.einsum("kabi,kb->kai", a.derivative, b.values) \
            + np.einsum("kab,kbi->kai", a.values, b.derivative)
    elif len(b.shape) == 2:
        if a.shape[1] != b.shape[0]:
            raise ConfigError("shapes not composable")
        vals = np.einsum("kab,kbc->kac", a.values, b.values)
        der = np.einsum("kabi,kbc->kaci", a.derivative, b.values) \
            + np.einsum("kab,kbci->kaci", a.values, b.derivative)
    else:
        raise ConfigError("right factor must be vector- or matrix-shaped")
    beta = min(a.beta, b.beta)
    beta_prime = min(a.beta_prime, b.beta_prime)
    return ControlledPath(a.reference, vals, der, beta, beta_prime)


def _check_exponents(z: ControlledPath) -> None:
    if z.reference.gamma + z.beta + z.beta_prime <= 1:
        raise ConfigError("rough integral needs gamma + beta + beta' > 1")


def integral_terms(z: ControlledPath) -> np.ndarray:
    """Per-interval compensated terms Z_k . delta_k + dZ_k : area_k."""
    _check_exponents(z)
    if len(z.shape) < 1 or z.shape[-1] != z.reference.dim:
        raise ConfigError("integrand's last value axis must match the noise dimension")
    d = z.reference.increments()
    t1 = np.einsum("k...i,ki->k...", z.values[:-1], d)
    t2 = np.einsum("k...ji,kij->k...", z.derivative[:-1], z.reference.areas)
    return t1 + t2


def indefinite_integral(z: ControlledPath) -> np.ndarray:
    """Cumulative rough integral at every node, starting from zero."""
    terms = integral_terms(z)
    out = np.zeros((terms.shape[0] + 1,) + terms.shape[1:])
    np.cumsum(terms, axis=0, out=out[1:])
    return out


def rough_integral(z: ControlledPath, j: int = 0, k: int | None = None) -> np.ndarray:
    """int_{t_j}^{t_k} (Z, Z') d eta as a compensated Riemann sum."""
    if k is None:
        k = z.reference.grid.n_steps
    if not (0 <= j <= k <= z.reference.grid.n_steps):
        raise ConfigError("integration endpoints must be grid nodes in order")
    cum = indefinite_integral(z)
    return cum[k] - cum[j]


def as_controlled_integral(z: ControlledPath) -> ControlledPath:
    """The indefinite integral (X, X') = (int Z d eta, Z) in D^{gamma, beta}."""
    vals = indefinite_integral(z)
    return ControlledPath(z.reference, vals, z.values.copy(),
                          beta=z.reference.gamma, beta_prime=z.beta)


def remainder_profile(z: ControlledPath) -> list[tuple[float, float]]:
    """Per dyadic scale (h in steps): (mesh width, max |R^Z| over that lag)."""
    grid = z.reference.grid
    n = grid.n_steps
    out = []
    lag = 1
    while lag <= n:
        de = z.reference.values[lag:] - z.reference.values[:-lag]
        dz = z.values[lag:] - z.values[:-lag]
        lin = np.einsum("k...i,ki->k...", z.derivative[:-lag], de)
        rem = dz - lin
        h = float(np.max(grid.nodes[lag:] - grid.nodes[:-lag]))
        out.append((h, float(np.abs(rem).max(initial=0.0))))
        lag *= 2
    return out


def profile_order(profile: list[tuple[float, float]], floor: float = 1e-14) -> float:
    """Least-squares log-log slope of a remainder profile."""
    pts = [(h, m) for h, m in profile if m > floor]
    if len(pts) < 2:
        return np.inf
    hs, ms = zip(*pts)
    return float(linregress(np.log(hs), np.log(ms)).slope)


def controlled_distance(a: ControlledPath, b: ControlledPath) -> float:
    """Grid version of || Z1, Z1' ; Z2, Z2' ||_{eta1, eta2, beta, beta'}.

    The two paths may ride on different references (that is the point of the
    distance); shapes and grids must match.
    """
    if a.shape != b.shape or not a.reference.grid.matches(b.reference.grid):
        raise ConfigError("controlled paths must share shape and grid")
    nodes = a.reference.grid.nodes
    beta = min(a.beta, b.beta)
    beta_prime = min(a.beta_prime, b.beta_prime)
    d0 = float(np.linalg.norm(a.values[0] - b.values[0]))
    d0p = float(np.linalg.norm(a.derivative[0] - b.derivative[0]))
    sup_z, sup_zp, sup_r = 0.0, 0.0, 0.0
    n = nodes.size - 1
    lag = 1
    while lag <= n:
        dt = (nodes[lag:] - nodes[:-lag])
        dz = (a.values[lag:] - a.values[:-lag]) - (b.values[lag:] - b.values[:-lag])
        flat = dz.reshape(dz.shape[0], -1)
        sup_z = max(sup_z, float(np.max(np.linalg.norm(flat, axis=1) / dt ** beta)))
        dzp = (a.derivative[lag:] - a.derivative[:-lag]) - (b.derivative[lag:] - b.derivative[:-lag])
        flatp = dzp.reshape(dzp.shape[0], -1)
        sup_zp = max(sup_zp, float(np.max(np.linalg.norm(flatp, axis=1) / dt ** beta_prime)))
        dea = a.reference.values[lag:] - a.reference.values[:-lag]
        deb = b.reference.values[lag:] - b.reference.values[:-lag]
        ra = (a.values[lag:] - a.values[:-lag]) - np.einsum("k...i,ki->k...", a.derivative[:-lag], dea)
        rb = (b.values[lag:] - b.values[:-lag]) - np.einsum("k...i,ki->k...", b.derivative[:-lag], deb)
        dr = (ra - rb).reshape(ra.shape[0], -1)
        sup_r = max(sup_r, float(np.max(np.linalg.norm(dr, axis=1) / dt ** (beta + beta_prime))))
        lag *= 2
    return d0 + d0p + sup_z + sup_zp + sup_r
