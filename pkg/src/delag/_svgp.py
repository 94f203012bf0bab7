"""Minibatch SVGP training of kernel hyperparameters and inducing locations.

Whitened parameterisation: u = L v with Kuu = L L^T and q(v) = N(m, S S^T).
The bound is::

    N/|B| * sum_{i in B} E_q[log N(y_i | f_i, noise)] - KL(q(v) || N(0, I))

torch is imported lazily so exact-mode users never pay for it.
"""

from __future__ import annotations

import numpy as np


def train(X: np.ndarray, y: np.ndarray, Z0: np.ndarray, theta0: np.ndarray, cfg, seed: int):
    """Returns (log-hyper theta, inducing inputs Z, per-step bound trace)."""
    import torch

    torch.manual_seed(seed)
    dt = torch.float64
    Xt = torch.as_tensor(X, dtype=dt)
    yt = torch.as_tensor(y, dtype=dt)
    n, M = X.shape[0], Z0.shape[0]
    theta = torch.tensor(np.asarray(theta0, dtype=np.float64), dtype=dt, requires_grad=True)
    Z = torch.tensor(Z0, dtype=dt, requires_grad=True)
    # start q(v) at its closed-form optimum for the initial hyperparameters
    from .gp import KernelHyper, optimal_whitened_q

    q_mu, q_cov = optimal_whitened_q(X, y, Z0, KernelHyper.from_log(theta0), cfg.jitter)
    S0 = np.linalg.cholesky(q_cov + 1e-10 * np.eye(M))
    tril = torch.tril_indices(M, M)
    s0 = S0[tril[0].numpy(), tril[1].numpy()]
    diag_pos = (tril[0] == tril[1]).nonzero().squeeze(1).numpy()
    s0[diag_pos] = np.log(s0[diag_pos])
    m = torch.tensor(q_mu, dtype=dt, requires_grad=True)
    s_raw = torch.tensor(s0, dtype=dt, requires_grad=True)
    params = [theta, Z, m, s_raw]
    eye = torch.eye(M, dtype=dt)

    def kern(a, b, ls, sv):
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return sv * torch.exp(-0.5 * d2.clamp_min(0.0) / ls ** 2)

    def bound(idx):
        ls, sv, nv = torch.exp(theta)
        Kuu = kern(Z, Z, ls, sv) + cfg.jitter * sv * eye
        L = torch.linalg.cholesky(Kuu)
        xb, yb = Xt[idx], yt[idx]
        Kuf = kern(Z, xb, ls, sv)
        A = torch.linalg.solve_triangular(L, Kuf, upper=False)
        S = torch.zeros(M, M, dtype=dt)
        S = S.index_put((tril[0], tril[1]), s_raw)
        diag = torch.exp(torch.diagonal(S))
        S = torch.tril(S, -1) + torch.diag(diag)
        mu = A.T @ m
        SA = S.T @ A
        var = sv - (A * A).sum(0) + (SA * SA).sum(0)
        ell = -0.5 * torch.log(2 * torch.pi * nv) - 0.5 * ((yb - mu) ** 2 + var) / nv
        kl = 0.5 * ((S * S).sum() + m @ m - M - 2.0 * torch.log(diag).sum())
        return ell.sum() * (n / len(idx)) - kl

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(params, lr=cfg.schedule[0][0])
    trace = []
    for lr, epochs in cfg.schedule:
        for g in opt.param_groups:
            g["lr"] = lr
        for _ in range(int(epochs)):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = torch.as_tensor(perm[start:start + cfg.batch_size])
                opt.zero_grad()
                loss = -bound(idx)
                loss.backward()
                opt.step()
                with torch.no_grad():
                    theta.clamp_(min=torch.tensor([-6.0, -12.0, -12.0], dtype=dt),
                                 max=torch.tensor([6.0, 6.0, 6.0], dtype=dt))
                trace.append(float(-loss.detach()))
    return theta.detach().numpy().copy(), Z.detach().numpy().copy(), trace
