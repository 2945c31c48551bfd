"""PQ-Index sparsity measure and the adaptive prune count built on it.

All functions take the *surviving* weights of one layer as a flat vector;
masked coordinates must be dropped by the caller before calling in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class PQConfig:
    """Hyperparameters of the adaptive prune count.

    ``eta`` is used when ``eta_mode == "fixed"``; ``"exact"`` derives the
    tail ratio self-consistently from the vector instead.
    """

    p: float
    q: float
    gamma: float
    beta: float
    eta_mode: str = "fixed"
    eta: float = 0.0

    def __post_init__(self):
        if not (0 < self.p <= 1 <= self.q and self.p < self.q):
            raise ConfigError(f"need 0 < p <= 1 <= q and p < q, got p={self.p}, q={self.q}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]")
        if self.eta_mode not in ("fixed", "exact"):
            raise ConfigError(f"eta_mode must be 'fixed' or 'exact', got {self.eta_mode!r}")
        if self.eta_mode == "fixed" and not self.eta >= 0:
            raise ConfigError("fixed eta must be nonnegative")


@dataclass(frozen=True)
class SparsityReport:
    d_t: int
    pqi: float
    eta: float
    r_t: float
    c_t: int


def _flat(v) -> np.ndarray:
    return np.abs(np.asarray(v, dtype=np.float64).ravel())


def lp_norm(v, p: float) -> float:
    """(sum |v_i|^p)^(1/p); a quasi-norm for p < 1."""
    a = _flat(v)
    scale = a.max() if a.size else 0.0
    if scale == 0:
        return 0.0
    return float(scale * np.sum((a / scale) ** p) ** (1.0 / p))


def pq_index(v, p: float, q: float) -> float:
    """1 - d^(1/q - 1/p) * ||v||_p / ||v||_q over all d entries of ``v``."""
    a = _flat(v)
    scale = a.max() if a.size else 0.0
    if scale == 0:
        raise InputError("PQ-Index is undefined for an all-zero vector")
    # normalising by the max keeps one-hot inputs exact and the ratio scale-free
    a = a / scale
    ratio = np.sum(a ** p) ** (1.0 / p) / np.sum(a ** q) ** (1.0 / q)
    return float(1.0 - a.size ** (1.0 / q - 1.0 / p) * ratio)


def _top_order(a: np.ndarray) -> np.ndarray:
    # descending magnitude, ties by lowest index
    return np.lexsort((np.arange(a.size), -a))


def eta_r(v, p: float, r: int) -> float:
    """Tail-to-head ratio of sum |v_i|^p for the top-``r`` magnitude set."""
    a = _flat(v)
    if not 1 <= r <= a.size:
        raise InputError(f"r must lie in [1, {a.size}], got {r}")
    if not a.any():
        raise InputError("eta_r is undefined for an all-zero vector")
    powered = (a / a.max())[_top_order(a)] ** p
    head = powered[:r].sum()
    return float(powered[r:].sum() / head)


def _bound(d: int, eta: float, pqi: float, p: float, q: float) -> float:
    return d * (1.0 + eta) ** (-q / (q - p)) * (1.0 - pqi) ** (q * p / (q - p))


def lower_bound_r(v, cfg: PQConfig) -> float:
    """Lower bound r_t on the number of weights worth keeping.

    In exact mode the smallest r with ``r >= bound(eta_r)`` is returned; the
    largest such r is always d (eta_d = 0), which would never prune.
    """
    a = _flat(v)
    d = a.size
    pqi = pq_index(a, cfg.p, cfg.q)
    if cfg.eta_mode == "fixed":
        r = _bound(d, cfg.eta, pqi, cfg.p, cfg.q)
    else:
        r = float(_exact_r(a, pqi, cfg)[0])
    return min(max(r, 0.0), float(d))


def _exact_r(a: np.ndarray, pqi: float, cfg: PQConfig) -> tuple[int, float]:
    d = a.size
    powered = (a / a.max())[_top_order(a)] ** cfg.p
    head = np.cumsum(powered)
    tail = head[-1] - head
    for r in range(1, d + 1):
        eta = float(tail[r - 1] / head[r - 1])
        if r >= _bound(d, eta, pqi, cfg.p, cfg.q):
            return r, eta
    return d, 0.0


def prune_count(v, cfg: PQConfig) -> int:
    """c_t = floor(d_t * min(gamma * (1 - r_t / d_t), beta))."""
    return sparsity_report(v, cfg).c_t


def sparsity_report(v, cfg: PQConfig) -> SparsityReport:
    a = _flat(v)
    d = a.size
    pqi = pq_index(a, cfg.p, cfg.q)
    if cfg.eta_mode == "fixed":
        eta = cfg.eta
        r = _bound(d, eta, pqi, cfg.p, cfg.q)
    else:
        r_int, eta = _exact_r(a, pqi, cfg)
        r = float(r_int)
    r = min(max(r, 0.0), float(d))
    c = math.floor(d * min(cfg.gamma * (1.0 - r / d), cfg.beta))
    c = min(max(c, 0), d)
    return SparsityReport(d_t=d, pqi=pqi, eta=eta, r_t=r, c_t=c)
