"""Conditional sample generator trained adversarially with a Sinkhorn loss.

The generator maps (conditioning vector, Gaussian noise) to a scalar pseudo
sample; the critic is a learned feature map defining the transport cost
c(x, y) = |phi(x) - phi(y)|^2.  Training alternates critic ascent and
generator descent on the debiased divergence

    S(mu, nu) = D(mu, nu) - D(mu, mu)/2 - D(nu, nu)/2,

where D is the entropically regularized optimal-transport value computed by
log-domain Sinkhorn scaling, differentiated exactly by reverse-mode
propagation through the unrolled iterations.  D is evaluated with both
update orders and averaged, which makes S symmetric in its arguments by
construction; two point masses at distance delta give S -> delta^2 as the
regularization vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .errors import ConfigurationError, ContractViolationError, TrainingDivergenceError


@dataclass
class GanConfig:
    z_dim: int = 5
    gen_hidden: tuple[int, ...] = (32, 32)
    critic_hidden: int = 16
    critic_out: int = 8
    sinkhorn_rho: float = 0.05
    sinkhorn_iters: int = 50
    batch_size: int = 256
    rounds: int = 300
    learning_rate: float = 1e-3


@dataclass
class ConditionalGenerator:
    """Trained sampler for one variable given a conditioning set."""

    gen_params: nn.MlpParams
    critic_params: nn.MlpParams
    z_dim: int
    sinkhorn_rho: float
    sinkhorn_iters: int
    feature_index_map: tuple[int, ...]
    half_id: int
    target: int
    feature_means: np.ndarray = field(repr=False, default=None)
    feature_scales: np.ndarray = field(repr=False, default=None)
    target_mean: float = 0.0
    target_scale: float = 1.0
    divergence_trace: list[float] = field(default_factory=list, repr=False)


@dataclass
class PseudoSampleBlock:
    """Pseudo samples indexed (observation, m)."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractViolationError("pseudo block must be 2-d")

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# log-domain Sinkhorn with exact unrolled gradients


class _Sinkhorn:
    """Entropic OT value for uniform empirical measures, plus dC gradient.

    Buffers are preallocated per cost-matrix shape; per-step allocation of
    large temporaries dominates runtime on this problem size otherwise.
    """

    def __init__(self, rho: float, iters: int):
        if rho <= 0:
            raise ContractViolationError("sinkhorn rho must be positive")
        if iters < 1:
            raise ConfigurationError("need at least one sinkhorn iteration")
        self.rho = rho
        self.iters = iters
        self._ws = {}

    def _buf(self, n, m):
        key = (n, m)
        if key not in self._ws:
            self._ws[key] = {
                "z": np.empty((n, m)),
                "dc": np.empty((n, m)),
                "f_hist": np.empty((self.iters + 1, n)),
                "g_hist": np.empty((self.iters + 1, m)),
            }
        return self._ws[key]

    def value(self, cost: np.ndarray) -> float:
        f, g, _ = self._forward(cost)
        return float(f.mean() + g.mean())

    def value_grad(self, cost: np.ndarray):
        f, g, ws = self._forward(cost)
        val = float(f.mean() + g.mean())
        # copy: the workspace gradient buffer is reused by the next call
        return val, self._backward(cost, ws).copy()

    def _forward(self, cost):
        n, m = cost.shape
        rho = self.rho
        ws = self._buf(n, m)
        z = ws["z"]
        f_hist, g_hist = ws["f_hist"], ws["g_hist"]
        f_hist[0] = 0.0
        g_hist[0] = 0.0
        g = g_hist[0]
        log_m = np.log(m)
        log_n = np.log(n)
        for l in range(1, self.iters + 1):
            # row update: f_i = -rho * LSE_j((g_j - C_ij)/rho + log b_j)
            np.subtract(g[None, :], cost, out=z)
            z /= rho
            row_max = z.max(axis=1)
            np.subtract(z, row_max[:, None], out=z)
            np.exp(z, out=z)
            f = -rho * (np.log(z.sum(axis=1)) + row_max - log_m)
            f_hist[l] = f
            # column update: g_j = -rho * LSE_i((f_i - C_ij)/rho + log a_i)
            np.subtract(f[:, None], cost, out=z)
            z /= rho
            col_max = z.max(axis=0)
            np.subtract(z, col_max[None, :], out=z)
            np.exp(z, out=z)
            g = -rho * (np.log(z.sum(axis=0)) + col_max - log_n)
            g_hist[l] = g
        return f_hist[self.iters], g_hist[self.iters], ws

    def _backward(self, cost, ws):
        """Reverse-mode d(value)/d(cost) through the stored iterates."""
        n, m = cost.shape
        rho = self.rho
        z, dc = ws["z"], ws["dc"]
        f_hist, g_hist = ws["f_hist"], ws["g_hist"]
        df = np.full(n, 1.0 / n)
        dg = np.full(m, 1.0 / m)
        dc[:] = 0.0
        for l in range(self.iters, 0, -1):
            # column softmax of (f_l - C)/rho (uniform log-weights cancel)
            np.subtract(f_hist[l][:, None], cost, out=z)
            z /= rho
            np.subtract(z, z.max(axis=0)[None, :], out=z)
            np.exp(z, out=z)
            z /= z.sum(axis=0)[None, :]
            dc += z * dg[None, :]
            df -= z @ dg
            # row softmax of (g_{l-1} - C)/rho
            np.subtract(g_hist[l - 1][None, :], cost, out=z)
            z /= rho
            np.subtract(z, z.max(axis=1)[:, None], out=z)
            np.exp(z, out=z)
            z /= z.sum(axis=1)[:, None]
            dc += z * df[:, None]
            dg = -(z.T @ df)
            df = np.zeros(n)
        return dc


def _pairwise_sq_dists(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    sq_u = (u * u).sum(axis=1)
    sq_v = (v * v).sum(axis=1)
    cost = sq_u[:, None] + sq_v[None, :] - 2.0 * (u @ v.T)
    np.maximum(cost, 0.0, out=cost)
    return cost


def _sq_dist_backward(u, v, d_cost):
    """Chain d(value)/d(cost) to the two embedded point clouds."""
    row = d_cost.sum(axis=1)
    col = d_cost.sum(axis=0)
    du = 2.0 * (row[:, None] * u - d_cost @ v)
    dv = 2.0 * (col[:, None] * v - d_cost.T @ u)
    return du, dv


def _sym_value(solver: _Sinkhorn, cost: np.ndarray) -> float:
    return 0.5 * (solver.value(cost) + solver.value(cost.T.copy()))


def _sym_value_grad(solver: _Sinkhorn, cost: np.ndarray):
    v1, d1 = solver.value_grad(cost)
    v2, d2 = solver.value_grad(cost.T.copy())
    return 0.5 * (v1 + v2), 0.5 * (d1 + d2.T)


def _self_value(solver: _Sinkhorn, cost: np.ndarray) -> float:
    return solver.value(cost)  # symmetric cost: both orders coincide


def _embed(cost_params, batch):
    if cost_params is None:
        return batch
    return nn.mlp_forward_batch(cost_params, batch)


def sinkhorn_divergence(batch_a, batch_b, cost_params=None, rho: float = 0.05,
                        iters: int = 50) -> float:
    """Debiased entropic OT divergence between two sample batches.

    ``cost_params`` is an optional MLP feature map phi defining the cost
    |phi(x) - phi(y)|^2; identity when None.  Nonnegative up to numerical
    slack, zero for identical batches, and symmetric by construction.
    """
    a = np.asarray(batch_a, dtype=float)
    b = np.asarray(batch_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractViolationError("empty batch")
    solver = _Sinkhorn(rho, iters)
    u, v = _embed(cost_params, a), _embed(cost_params, b)
    cross = _sym_value(solver, _pairwise_sq_dists(u, v))
    self_a = _self_value(solver, _pairwise_sq_dists(u, u))
    self_b = _self_value(solver, _pairwise_sq_dists(v, v))
    return cross - 0.5 * self_a - 0.5 * self_b


# ---------------------------------------------------------------------------
# adversarial training


def _gen_forward(gen_params, cond, noise):
    gen_in = np.concatenate([cond, noise], axis=1) if cond.shape[1] else noise
    return nn.mlp_forward_batch(gen_params, gen_in)[:, 0], gen_in


def _divergence_with_grads(solver, critic, real, fake, want_critic, want_fake):
    """S(real, fake) plus requested gradients.

    Returns (value, critic_grads or None, d_fake or None); d_fake is the
    gradient with respect to the fake joint rows.
    """
    u = nn.mlp_forward_batch(critic, real)
    v = nn.mlp_forward_batch(critic, fake)
    c_rf = _pairwise_sq_dists(u, v)
    c_rr = _pairwise_sq_dists(u, u)
    c_ff = _pairwise_sq_dists(v, v)

    if not (want_critic or want_fake):
        value = (_sym_value(solver, c_rf) - 0.5 * _self_value(solver, c_rr)
                 - 0.5 * _self_value(solver, c_ff))
        return value, None, None

    v_rf, d_rf = _sym_value_grad(solver, c_rf)
    v_ff, d_ff = solver.value_grad(c_ff)
    du_rf, dv_rf = _sq_dist_backward(u, v, d_rf)
    du_ff, dv_ff = _sq_dist_backward(v, v, -0.5 * d_ff)
    dv_total = dv_rf + du_ff + dv_ff

    if want_critic:
        v_rr, d_rr = solver.value_grad(c_rr)
        du_rr, dv_rr = _sq_dist_backward(u, u, -0.5 * d_rr)
        du_total = du_rf + du_rr + dv_rr
        value = v_rf - 0.5 * v_rr - 0.5 * v_ff
        g_real, _ = nn.mlp_backward(critic, real, du_total)
        g_fake, d_fake_rows = nn.mlp_backward(critic, fake, dv_total)
        critic_grads = g_real.add(g_fake)
        return value, critic_grads, d_fake_rows if want_fake else None

    v_rr = solver.value(c_rr)
    value = v_rf - 0.5 * v_rr - 0.5 * v_ff
    _, d_fake_rows = nn.mlp_backward(critic, fake, dv_total)
    return value, None, d_fake_rows


def fit_generator(
    data,
    target: int,
    members,
    config: GanConfig | None = None,
    seed: int = 0,
    half_id: int = 1,
) -> ConditionalGenerator:
    """Alternating critic-ascent / generator-descent rounds on the Sinkhorn
    divergence between real and generated joint batches; deterministic given
    the seed.  Variables are standardized internally; generated samples are
    returned on the original scale of the target variable."""
    cfg = config or GanConfig()
    x = np.asarray(data, dtype=float)
    if x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    n = x.shape[0]
    if n == 0:
        raise ContractViolationError("empty data half")
    members = tuple(sorted(int(m) for m in members))
    if any(m < 0 or m >= x.shape[1] for m in members) or target in members:
        raise ContractViolationError(
            f"bad conditioning set {members} for target {target}"
        )

    t_mean = float(x[:, target].mean())
    t_scale = float(x[:, target].std()) or 1.0
    target_std = (x[:, target] - t_mean) / t_scale
    if members:
        f_means = x[:, members].mean(axis=0)
        f_scales = np.where(x[:, members].std(axis=0) < 1e-12, 1.0,
                            x[:, members].std(axis=0))
        cond_std = (x[:, members] - f_means) / f_scales
    else:
        f_means = np.zeros(0)
        f_scales = np.ones(0)
        cond_std = np.zeros((n, 0))

    rng = np.random.default_rng(seed)
    gen = nn.init_params(
        (len(members) + cfg.z_dim, *cfg.gen_hidden, 1), seed=None, rng=rng
    )
    critic = nn.init_params(
        (1 + len(members), cfg.critic_hidden, cfg.critic_out), seed=None, rng=rng
    )
    gen_state = nn.init_adam(gen, lr=cfg.learning_rate)
    critic_state = nn.init_adam(critic, lr=cfg.learning_rate)
    solver = _Sinkhorn(cfg.sinkhorn_rho, cfg.sinkhorn_iters)
    batch = min(cfg.batch_size, n)
    trace = []

    with threadpool_limits(limits=1):
        for _ in range(cfg.rounds):
            idx = rng.choice(n, size=batch, replace=False)
            cond_b = cond_std[idx]
            real = np.column_stack([target_std[idx], cond_b])
            noise = rng.standard_normal((batch, cfg.z_dim))

            # critic ascent
            xt, gen_in = _gen_forward(gen, cond_b, noise)
            fake = np.column_stack([xt, cond_b])
            value, critic_grads, _ = _divergence_with_grads(
                solver, critic, real, fake, want_critic=True, want_fake=False
            )
            if not np.isfinite(value):
                raise TrainingDivergenceError("non-finite divergence (critic step)")
            nn.adam_step(critic_state, critic, critic_grads.scale(-1.0))

            # generator descent under the updated critic
            xt, gen_in = _gen_forward(gen, cond_b, noise)
            fake = np.column_stack([xt, cond_b])
            value, _, d_fake = _divergence_with_grads(
                solver, critic, real, fake, want_critic=False, want_fake=True
            )
            if not np.isfinite(value):
                raise TrainingDivergenceError("non-finite divergence (generator step)")
            gen_grads, _ = nn.mlp_backward(gen, gen_in, d_fake[:, 0:1])
            nn.adam_step(gen_state, gen, gen_grads)
            trace.append(float(value))

    return ConditionalGenerator(
        gen_params=gen,
        critic_params=critic,
        z_dim=cfg.z_dim,
        sinkhorn_rho=cfg.sinkhorn_rho,
        sinkhorn_iters=cfg.sinkhorn_iters,
        feature_index_map=members,
        half_id=half_id,
        target=target,
        feature_means=f_means,
        feature_scales=f_scales,
        target_mean=t_mean,
        target_scale=t_scale,
        divergence_trace=trace,
    )


def generate(generator: ConditionalGenerator, conditioning_rows, n_draws: int,
             seed: int = 0) -> PseudoSampleBlock:
    """Evaluate the generator on each row with ``n_draws`` independent
    standard normal noise vectors.

    Noise streams are spawned per draw index, so the first column is
    identical whether one or one hundred draws are requested.
    """
    if n_draws < 1:
        raise ContractViolationError("need at least one pseudo sample per row")
    rows = np.asarray(conditioning_rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    k = len(generator.feature_index_map)
    if rows.shape[1] != k:
        raise ContractViolationError(
            f"conditioning rows have width {rows.shape[1]}, expected {k}"
        )
    n = rows.shape[0]
    cond_std = (rows - generator.feature_means) / generator.feature_scales \
        if k else np.zeros((n, 0))
    out = np.empty((n, n_draws))
    children = np.random.SeedSequence(seed).spawn(n_draws)
    for m, child in enumerate(children):
        noise = np.random.default_rng(child).standard_normal((n, generator.z_dim))
        std_draw, _ = _gen_forward(generator.gen_params, cond_std, noise)
        out[:, m] = std_draw * generator.target_scale + generator.target_mean
    return PseudoSampleBlock(values=out)
