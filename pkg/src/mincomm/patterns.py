"""Mini-block sparsity patterns for closed-loop responses.

Masks live at mini-block granularity: ``allowed[comp][t, tau, i, j]`` says
whether the (i, j) agent mini-block of the (t, tau) sub-block of that
response component may be nonzero.  Pattern addition is elementwise OR.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import Problem

__all__ = [
    "COMPONENTS",
    "SparsityPattern",
    "build_sparsity",
    "pattern_product",
    "canonical_pattern",
]

COMPONENTS = ("xx", "xy", "ux", "uy")

# row/column signal space of each component (x-, u- or y-indexed)
ROW_SPACE = {"xx": "x", "xy": "x", "ux": "u", "uy": "u"}
COL_SPACE = {"xx": "x", "xy": "y", "ux": "x", "uy": "y"}


@dataclass(frozen=True)
class SparsityPattern:
    """Boolean allow-masks for the four response components."""

    horizon: int
    n_agents: int
    allowed: Mapping[str, np.ndarray]

    def __post_init__(self):
        masks = {}
        Tp1, n = self.horizon + 1, self.n_agents
        for comp in COMPONENTS:
            m = np.asarray(self.allowed[comp], dtype=bool)
            if m.shape != (Tp1, Tp1, n, n):
                raise ValueError(f"mask for {comp} has shape {m.shape}")
            m = m.copy()
            # block lower triangularity is never negotiable
            for t in range(Tp1):
                m[t, t + 1 :] = False
            if comp == "xy":
                for t in range(Tp1):
                    m[t, t] = False
            m.setflags(write=False)
            masks[comp] = m
        object.__setattr__(self, "allowed", masks)

    def __add__(self, other: "SparsityPattern") -> "SparsityPattern":
        if (self.horizon, self.n_agents) != (other.horizon, other.n_agents):
            raise ValueError("patterns must share horizon and agent count")
        return SparsityPattern(
            self.horizon,
            self.n_agents,
            {c: self.allowed[c] | other.allowed[c] for c in COMPONENTS},
        )

    def disallowed_minis(self, comp: str):
        """Mini-blocks forced to zero, excluding structurally-zero ones."""
        m = self.allowed[comp]
        out = []
        for t in range(self.horizon + 1):
            hi = t if comp == "xy" else t + 1
            for tau in range(hi):
                for i in range(1, self.n_agents + 1):
                    for j in range(1, self.n_agents + 1):
                        if not m[t, tau, i - 1, j - 1]:
                            out.append((t, tau, i, j))
        return out

    def cross_block_fully_masked(self, comp: str, i: int, j: int) -> bool:
        m = self.allowed[comp][:, :, i - 1, j - 1]
        return not m.any()


def _full_blt(horizon: int, n_agents: int, comp: str) -> np.ndarray:
    Tp1 = horizon + 1
    m = np.zeros((Tp1, Tp1, n_agents, n_agents), dtype=bool)
    for t in range(Tp1):
        hi = t if comp == "xy" else t + 1
        m[t, :hi] = True
    return m


def canonical_pattern(kind: str, horizon: int, n_agents: int = 2) -> SparsityPattern:
    """The three special patterns: 'diag', 'upper' ((1,2) minis), 'lower' ((2,1))."""
    masks = {}
    for comp in COMPONENTS:
        base = _full_blt(horizon, n_agents, comp)
        keep = np.zeros((n_agents, n_agents), dtype=bool)
        if kind == "diag":
            np.fill_diagonal(keep, True)
        elif kind == "upper":
            keep[0, 1] = True
        elif kind == "lower":
            keep[1, 0] = True
        else:
            raise ValueError(f"unknown canonical pattern {kind!r}")
        masks[comp] = base & keep[None, None, :, :]
    return SparsityPattern(horizon, n_agents, masks)


_PRODUCT_TABLE = {
    ("diag", "diag"): "diag",
    ("diag", "lower"): "lower",
    ("diag", "upper"): "upper",
    ("lower", "diag"): "lower",
    ("lower", "lower"): "zero",
    ("lower", "upper"): "diag",
    ("upper", "diag"): "upper",
    ("upper", "lower"): "diag",
    ("upper", "upper"): "zero",
}


def pattern_product(p: str, q: str) -> str:
    """Sparsity class of a product of matrices drawn from two patterns."""
    try:
        return _PRODUCT_TABLE[(p, q)]
    except KeyError:
        raise ValueError(f"pattern_product is defined on diag/lower/upper, got {(p, q)}")


def build_sparsity(problem: Problem, mode: str, direction: str = "lower") -> SparsityPattern:
    """Assemble the mask for a synthesis mode.

    All modes enforce block lower triangularity (strict for the state-from-
    noise component).  'decentral' zeroes every cross mini-block of every
    component; 'ours' zeroes the cross state-from-disturbance blocks on one
    side (``direction`` names the kept side) and applies the communication-
    delay mask to cross minis of all four components; 'baseline' applies only
    the delay mask.
    """
    if mode not in ("ours", "baseline", "decentral"):
        raise ValueError(f"unknown mode {mode!r}")
    if direction not in ("lower", "upper"):
        raise ValueError(f"direction must be 'lower' or 'upper', got {direction!r}")
    T, n = problem.horizon, problem.n_agents
    masks = {c: _full_blt(T, n, c) for c in COMPONENTS}

    if mode == "decentral":
        eye = np.eye(n, dtype=bool)
        for c in COMPONENTS:
            masks[c] &= eye[None, None, :, :]
        return SparsityPattern(T, n, masks)

    if mode == "ours":
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                zero_side = (i < j) if direction == "lower" else (i > j)
                if zero_side:
                    masks["xx"][:, :, i - 1, j - 1] = False

    # communication delays apply to inter-agent minis in 'ours' and 'baseline'
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            if i == j:
                continue
            ell = problem.delays.of(i, j)
            if ell <= 0:
                continue
            for t in range(T + 1):
                for tau in range(max(0, t - ell + 1), t + 1):
                    for c in COMPONENTS:
                        masks[c][t, tau, i - 1, j - 1] = False
    return SparsityPattern(T, n, masks)
