"""Random condensed-QP instances and an independent rollout evaluation of their cost."""
from __future__ import annotations

import numpy as np

from lpvmpc.dataset import ModelScaling, Scaler
from lpvmpc.lpv import FrozenLti
from lpvmpc.mpc import MpcConfig, build_qp

ENGINE_SCALING = ModelScaling(Scaler([0.0, 1.0, 0.0], [400.0, 1.5, 800.0]),
                              Scaler([10.0, -2.0, 70.0], [70.0, 13.0, 30.0]))


def random_case(rng: np.random.Generator, cfg: MpcConfig = MpcConfig(), nox_push: float = 0.0):
    """``nox_push`` adds a scaled NOx drift that can make the limit unreachable."""
    A = rng.uniform(-0.2, 0.2, (3, 3)) + np.diag(rng.uniform(0.3, 0.8, 3))
    B = rng.uniform(-0.5, 1.0, (3, 3))
    lti = FrozenLti(A, B, None, rng.uniform(-0.2, 0.2, 3) + np.array([0.0, 0.0, nox_push]))
    x0 = rng.random(3)
    refs = rng.uniform(50.0, 350.0, cfg.Np)
    u_prev = rng.uniform(cfg.bounds.u_min, cfg.bounds.u_max)
    qp = build_qp(lti, x0, refs, u_prev, cfg, ENGINE_SCALING)
    return lti, x0, refs, u_prev, qp


def rollout(lti, x0, d, cfg: MpcConfig, scaling: ModelScaling = ENGINE_SCALING):
    """Physical states x(k+1..k+Np) and inputs u(k..k+Np-1) for decision d."""
    nu = lti.nu
    blocks = [np.asarray(d[b * nu:(b + 1) * nu]) for b in range(cfg.Nc)]
    x = np.asarray(x0, dtype=float)
    xs, us = [], []
    for i in range(cfg.Np):
        u = blocks[min(i, cfg.Nc - 1)]
        x = lti.A @ x + lti.B @ u + lti.offset
        xs.append(scaling.state.inverse(x))
        us.append(scaling.input.inverse(u))
    return np.array(xs), np.array(us)


def rollout_cost(lti, x0, refs, u_prev, d, cfg: MpcConfig, scaling: ModelScaling = ENGINE_SCALING) -> float:
    xs, us = rollout(lti, x0, d, cfg, scaling)
    s = float(d[-1])
    cost = cfg.w_tout * np.sum((xs[:, 0] - refs) ** 2) + cfg.w_nox * np.sum(xs[:, 2] ** 2)
    cost += cfg.w_fq * np.sum(us[:, 0] ** 2) + cfg.Np * cfg.w_s * s * s
    prev = np.asarray(u_prev, dtype=float)
    for i in range(cfg.Nc):
        cost += float(np.sum(np.asarray(cfg.w_du) * (us[i] - prev) ** 2))
        prev = us[i]
    return float(cost)


def grid_minimum(qp, n: int = 41) -> float:
    """Exhaustive n^3 input grid (single input block) with the best slack per point."""
    axes = [np.linspace(qp.lb[j], qp.ub[j], n) for j in range(3)]
    U = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    s = np.maximum(0.0, (U @ qp.G[:, :3].T - qp.h).max(axis=1))
    D = np.column_stack([U, s])
    cost = 0.5 * np.einsum("ij,jk,ik->i", D, qp.H_raw, D) + D @ qp.g + qp.c0
    return float(cost.min())
