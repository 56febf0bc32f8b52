"""Causal factorization: from a cross gain to an explicit message schedule.

A pair gain of rank r needs exactly r scalar messages.  The schedule fixes
when each message is sent, which past measurements the sender compresses
into it, and how the receiver applies it after the channel delay.
"""

import numpy as np

from mincomm.factorization import causal_factorize

rng = np.random.default_rng(3)
T, input_dim, meas_dim, delay = 6, 2, 2, 1

# plant a rank-3 causal gain by composing an encoder and decoder by hand
times = [1, 2, 4]
enc = np.zeros((3, (T + 1) * meas_dim))
for k, t_k in enumerate(times):
    row = np.zeros((T + 1) * meas_dim)
    row[: (t_k + 1) * meas_dim] = rng.standard_normal((t_k + 1) * meas_dim)
    for prev in enc[:k]:
        row -= prev * (prev @ row)
    enc[k] = row / np.linalg.norm(row)
dec = np.zeros(((T + 1) * input_dim, 3))
for k, t_k in enumerate(times):
    dec[(t_k + delay) * input_dim :, k] = rng.standard_normal((T + 1 - t_k - delay) * input_dim)
K = dec @ enc

schedule = causal_factorize(K, input_dim, meas_dim, delay=delay, receiver=2, sender=1)
print(f"messages needed: {schedule.count} (gain rank {np.linalg.matrix_rank(K)})")
print(f"send times: {schedule.times}")
print(f"reconstruction error: {np.abs(schedule.reconstruction() - K).max():.2e}")
print(f"support violations: {schedule.support_violation():.1e}")

for k, t_k in enumerate(schedule.times):
    used = np.flatnonzero(np.abs(schedule.encoder[k]) > 1e-12)
    first_use = np.flatnonzero(np.abs(schedule.decoder[:, k]) > 1e-12)[0] // input_dim
    print(
        f"message {k}: sent at t={t_k}, compresses measurements up to t={used[-1] // meas_dim}, "
        f"first applied at t={first_use} (delay {delay})"
    )
