"""Linear feature maps ``psi(x, u)`` and the Q-functions they span.

A basis is stored as an array of shape ``(d, n_states, n_actions)``; entries on
inadmissible pairs are zero and never read.
"""

from __future__ import annotations

import numpy as np

from .mdp import ControlledMDP


def tabular_basis(mdp: ControlledMDP) -> np.ndarray:
    """Indicator basis, one coordinate per admissible pair in row-major order."""
    pairs = mdp.pairs
    psi = np.zeros((len(pairs),) + mdp.cost.shape)
    psi[np.arange(len(pairs)), pairs[:, 0], pairs[:, 1]] = 1.0
    return psi


def random_basis(mdp: ControlledMDP, d: int, rng: np.random.Generator,
                 kind: str = "uniform") -> np.ndarray:
    """Random dense basis with ``d`` features.

    ``kind="uniform"`` draws nonnegative entries from U[0, 1); ``"normal"``
    draws standard normals.  Entries on inadmissible pairs are zeroed.
    """
    shape = (d,) + mdp.cost.shape
    if kind == "uniform":
        psi = rng.random(shape)
    elif kind == "normal":
        psi = rng.standard_normal(shape)
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    return np.where(mdp.mask[None], psi, 0.0)


def is_tabular(basis: np.ndarray, mask: np.ndarray) -> bool:
    """True when every admissible pair has exactly one unit feature and vice versa."""
    b = basis[:, mask]
    return bool(np.all((b == 0) | (b == 1)) and np.all(b.sum(axis=0) == 1)
                and np.all(b.sum(axis=1) == 1))


def q_values(basis: np.ndarray, theta: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``Q^theta(x, u) = theta . psi(x, u)``; inadmissible entries set to ``+inf`` if ``mask`` is given."""
    Q = np.tensordot(np.asarray(theta, dtype=float), basis, axes=1)
    if mask is not None:
        Q = np.where(mask, Q, np.inf)
    return Q


def pair_major(basis: np.ndarray) -> np.ndarray:
    """Contiguous ``(n_states, n_actions, d)`` copy for per-pair lookups."""
    return np.ascontiguousarray(np.moveaxis(basis, 0, -1))
