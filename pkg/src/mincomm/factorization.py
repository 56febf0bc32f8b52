"""Causal encoder/decoder factorization of cross-agent gains.

Every block-lower-triangular pair gain factors as decoder times encoder with
as many scalar messages as its rank: the greedy sweep walks action times in
order, adds an orthonormal encoder row for each new direction the current
action rows need, stamps it with the latest valid send time, and reads the
decoder coefficients off the orthonormal basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .solver import numerical_rank

__all__ = [
    "MessageSchedule",
    "MessageSummary",
    "causal_factorize",
    "schedule_summary",
    "truncate_and_factorize",
    "DelaySparsityError",
]


class DelaySparsityError(ValueError):
    """The pair gain uses information earlier than the channel allows."""


@dataclass(frozen=True)
class MessageSchedule:
    """Messages from sender to receiver realizing one cross pair gain.

    Encoder row k combines the sender's measurements up to the send time;
    decoder column k applies the received scalar to the receiver's actions
    from the arrival time on.
    """

    receiver: int
    sender: int
    delay: int
    times: tuple  # nondecreasing send times, one per message
    encoder: np.ndarray  # (r, (T+1) * sender_meas_dim), orthonormal rows
    decoder: np.ndarray  # ((T+1) * receiver_input_dim, r)
    input_dim: int
    meas_dim: int
    diagnostics: tuple = ()

    @property
    def count(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> int:
        return self.decoder.shape[0] // self.input_dim - 1

    def reconstruction(self) -> np.ndarray:
        return self.decoder @ self.encoder

    def support_violation(self) -> float:
        """Largest entry outside the causal supports (should be zero)."""
        worst = 0.0
        for k, t_k in enumerate(self.times):
            enc_tail = self.encoder[k, (t_k + 1) * self.meas_dim :]
            if enc_tail.size:
                worst = max(worst, float(np.abs(enc_tail).max()))
            head = self.decoder[: (t_k + self.delay) * self.input_dim, k]
            if head.size:
                worst = max(worst, float(np.abs(head).max()))
        return worst


def causal_factorize(
    K_pair: np.ndarray,
    input_dim: int,
    meas_dim: int,
    delay: int = 0,
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-9,
    receiver: int = 0,
    sender: int = 0,
) -> MessageSchedule:
    """Factor a pair gain into a minimal causal message schedule.

    The gain is first truncated to its numerical rank at the given
    tolerances; the sweep then works at machine precision, so the message
    count equals that rank and the reconstruction is exact to rounding.
    Rows must respect the delay: the block at action time t and measurement
    time tau must vanish whenever t - tau <= delay - 1.
    """
    K_pair = np.asarray(K_pair, dtype=float)
    rows, cols = K_pair.shape
    if rows % input_dim or cols % meas_dim:
        raise ValueError("matrix shape is not a multiple of the block dimensions")
    Tp1 = rows // input_dim
    if cols // meas_dim != Tp1:
        raise ValueError("action and measurement horizons disagree")

    sigma1 = float(np.linalg.svd(K_pair, compute_uv=False)[0]) if K_pair.any() else 0.0
    mask_tol = max(abs_tol, rel_tol * sigma1)
    for t in range(Tp1):
        for tau in range(max(0, t - delay + 1), Tp1):
            blk = K_pair[t * input_dim : (t + 1) * input_dim, tau * meas_dim : (tau + 1) * meas_dim]
            if blk.size and np.abs(blk).max() > mask_tol:
                raise DelaySparsityError(
                    f"gain uses measurement time {tau} at action time {t}, "
                    f"violating delay {delay}"
                )

    # exact-rank truncation; the sweep below must not re-threshold
    r_target = numerical_rank(K_pair, rel_tol, abs_tol)
    if r_target and K_pair.any():
        U, s, Vt = np.linalg.svd(K_pair, full_matrices=False)
        K_hat = (U[:, :r_target] * s[:r_target]) @ Vt[:r_target]
        # re-impose the structural zeros clipped by the truncation
        for t in range(Tp1):
            K_hat[t * input_dim : (t + 1) * input_dim, max(0, t - delay + 1) * meas_dim :] = 0.0
        sweep_tol = max(1e-12 * s[0], 1e-14)
        band = (0.5 * sweep_tol, 2.0 * sweep_tol)
    else:
        K_hat = np.zeros_like(K_pair)
        sweep_tol = 1e-14
        band = (0.0, 0.0)

    enc_rows = []
    times = []
    notes = []
    for t in range(Tp1):
        R_t = K_hat[t * input_dim : (t + 1) * input_dim]
        if not R_t.any():
            continue
        if enc_rows:
            E = np.array(enc_rows)
            resid = R_t - (R_t @ E.T) @ E
        else:
            resid = R_t
        _, s_r, Vt_r = np.linalg.svd(resid, full_matrices=False)
        for sv in s_r:
            if band[0] <= sv <= band[1]:
                notes.append(
                    f"residual direction at action time {t} has magnitude {sv:.2e}, "
                    "within the ambiguity band of the sweep threshold"
                )
        fresh = Vt_r[s_r > sweep_tol]
        for row in fresh:
            enc_rows.append(row)
            times.append(t - delay)

    r = len(enc_rows)
    E = np.array(enc_rows) if r else np.zeros((0, cols))
    D = K_hat @ E.T if r else np.zeros((rows, 0))
    # decoder entries before each message's arrival are analytically zero
    for k, t_k in enumerate(times):
        D[: (t_k + delay) * input_dim, k] = 0.0
    if r != r_target:
        notes.append(
            f"sweep produced {r} messages but the numerical rank is {r_target}"
        )
    return MessageSchedule(
        receiver=receiver,
        sender=sender,
        delay=delay,
        times=tuple(times),
        encoder=E,
        decoder=D,
        input_dim=input_dim,
        meas_dim=meas_dim,
        diagnostics=tuple(notes),
    )


@dataclass(frozen=True)
class MessageSummary:
    """Counts per ordered pair, per sender, and in total."""

    pair_counts: dict  # (receiver, sender) -> messages from sender to receiver
    sender_counts: dict
    total: int

    def sent(self, sender: int, receiver: int) -> int:
        return self.pair_counts.get((receiver, sender), 0)


def schedule_summary(schedules) -> MessageSummary:
    """Aggregate message counts; pair (i, j) counts messages from j to i."""
    pair_counts = {}
    sender_counts = {}
    for s in schedules:
        pair_counts[(s.receiver, s.sender)] = s.count
        sender_counts[s.sender] = sender_counts.get(s.sender, 0) + s.count
    return MessageSummary(
        pair_counts=pair_counts,
        sender_counts=sender_counts,
        total=sum(pair_counts.values()),
    )


def truncate_and_factorize(
    gain,
    problem,
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-9,
    margin_tol: float = 1e-6,
    verify=None,
):
    """Truncate cross gains at the rank tolerances, re-verify, factorize.

    Truncation happens before factorization; the truncated global gain is
    re-checked against the robust constraints and rolled back pair by pair
    (largest discarded singular value first) if any margin breaks.  Returns
    (schedules, truncated GainMatrix, report) where report carries the
    verification outcome and rollback notes.
    """
    from .robust import verify_robust_exact
    from .sls import GainMatrix, closed_loop_of_gain

    ops = gain.ops
    n = problem.n_agents
    sigma1 = float(np.linalg.svd(gain.matrix, compute_uv=False)[0]) if gain.matrix.any() else 0.0
    abs_eff = max(abs_tol, rel_tol * sigma1)

    pairs = [(i, j) for i in range(1, n + 1) for j in range(1, n + 1) if i != j]

    def zero_delay_region(block, i, j):
        du, dy = ops.u_map.dims[i - 1], ops.y_map.dims[j - 1]
        ell = problem.delays.of(i, j)
        Tp1 = block.shape[0] // du
        for t in range(Tp1):
            lo = max(0, t - ell + 1)
            block[t * du : (t + 1) * du, lo * dy :] = 0.0
        return block

    truncated = {}
    dropped = {}
    for (i, j) in pairs:
        block = zero_delay_region(gain.pair_block(i, j).copy(), i, j)
        if not block.any():
            truncated[(i, j)] = block
            dropped[(i, j)] = 0.0
            continue
        U, s, Vt = np.linalg.svd(block, full_matrices=False)
        keep = s > max(abs_eff, rel_tol * s[0])
        trunc = (U[:, keep] * s[keep]) @ Vt[keep]
        truncated[(i, j)] = zero_delay_region(trunc, i, j)
        dropped[(i, j)] = float(s[~keep].max()) if np.any(~keep) else 0.0

    def assemble(trunc_map):
        M = gain.matrix.copy()
        for (i, j), block in trunc_map.items():
            rows = ops.u_map.agent_indices(i)
            cols = ops.y_map.agent_indices(j)
            M[np.ix_(rows, cols)] = block
        return GainMatrix(ops, M)

    if verify is None:
        def verify(K_candidate):
            phi = closed_loop_of_gain(K_candidate, ops)
            return verify_robust_exact(phi, problem, ops=ops)

    notes = []
    restored = set()
    current = assemble(truncated)
    report = verify(current)
    order = sorted(pairs, key=lambda p: -dropped[p])
    while report.min_margin < -margin_tol and len(restored) < len(pairs):
        worst = next((p for p in order if p not in restored and dropped[p] > 0), None)
        if worst is None:
            break
        restored.add(worst)
        truncated[worst] = gain.pair_block(*worst)
        notes.append(
            f"rolled back truncation of pair {worst} "
            f"(largest discarded singular value {dropped[worst]:.2e})"
        )
        current = assemble(truncated)
        report = verify(current)

    schedules = []
    for (i, j) in pairs:
        schedules.append(
            causal_factorize(
                truncated[(i, j)],
                input_dim=ops.u_map.dims[i - 1],
                meas_dim=ops.y_map.dims[j - 1],
                delay=problem.delays.of(i, j),
                rel_tol=rel_tol,
                abs_tol=abs_eff,
                receiver=i,
                sender=j,
            )
        )
    return schedules, current, {"verification": report, "rollbacks": notes}
