"""Supervised learner for conditional means: an MLP fit by mini-batch Adam.

Used for the regression adjustment of the target variable, and doubled up by
the double-regression baseline for the candidate variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .errors import ContractViolationError, TrainingDivergenceError


@dataclass
class RegressionConfig:
    hidden_dims: tuple[int, ...] = (32, 32)
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass
class ConditionalMeanModel:
    """Fitted conditional mean of one variable given a set of others.

    ``feature_index_map`` is the sorted tuple of conditioning-variable
    indices; inputs to ``predict`` must be ordered the same way.  An empty
    conditioning set degenerates to the sample mean (``constant``).
    """

    params: nn.MlpParams | None
    feature_index_map: tuple[int, ...]
    target: int
    half_id: int
    training_loss_trace: list[float] = field(default_factory=list)
    constant: float | None = None

    def in_dim(self) -> int:
        return len(self.feature_index_map)


def _flatten(data) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if data.ndim == 3:
        return data.reshape(-1, data.shape[-1])
    if data.ndim == 2:
        return data
    raise ContractViolationError(f"expected (n, d) or (N, T, d) data, got {data.shape}")


def fit_conditional_mean(
    data,
    target: int,
    members,
    config: RegressionConfig | None = None,
    seed: int = 0,
    half_id: int = 1,
) -> ConditionalMeanModel:
    """Least-squares MLP fit of X_target on X_members over a fixed epoch
    budget; deterministic given the seed.  Conditioning on nothing returns
    the sample-mean model."""
    cfg = config or RegressionConfig()
    x = _flatten(data)
    n = x.shape[0]
    if n == 0:
        raise ContractViolationError("empty data half")
    members = tuple(sorted(int(m) for m in members))
    if any(m < 0 or m >= x.shape[1] for m in members) or target in members:
        raise ContractViolationError(
            f"bad conditioning set {members} for target {target}"
        )
    y = x[:, target]

    if not members:
        mean = float(y.mean())
        mse = float(((y - mean) ** 2).mean())
        return ConditionalMeanModel(
            params=None,
            feature_index_map=(),
            target=target,
            half_id=half_id,
            training_loss_trace=[mse],
            constant=mean,
        )

    feats = x[:, members]
    rng = np.random.default_rng(seed)
    params = nn.init_params(
        (len(members), *cfg.hidden_dims, 1), seed=None, rng=rng
    )
    state = nn.init_adam(params, lr=cfg.learning_rate)
    trace = []
    batch = min(cfg.batch_size, n)
    with threadpool_limits(limits=1):
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n - batch + 1, batch):
                idx = order[start : start + batch]
                xb, yb = feats[idx], y[idx]
                pred = nn.mlp_forward_batch(params, xb)[:, 0]
                resid = pred - yb
                epoch_loss += float(resid @ resid)
                grads, _ = nn.mlp_backward(
                    params, xb, (2.0 / batch) * resid[:, None]
                )
                nn.adam_step(state, params, grads)
            if not np.isfinite(epoch_loss):
                raise TrainingDivergenceError("non-finite regression loss")
            trace.append(epoch_loss / (batch * max(1, n // batch)))
    return ConditionalMeanModel(
        params=params,
        feature_index_map=members,
        target=target,
        half_id=half_id,
        training_loss_trace=trace,
    )


def predict(model: ConditionalMeanModel, x) -> float:
    """Evaluate the fitted mean at one conditioning vector (ordered as
    ``feature_index_map``)."""
    if model.constant is not None:
        if np.ndim(x) and len(np.atleast_1d(x)) != 0:
            raise ContractViolationError("constant model takes an empty vector")
        return model.constant
    x = np.asarray(x, dtype=float)
    if x.shape != (model.in_dim(),):
        raise ContractViolationError(
            f"expected vector of length {model.in_dim()}, got shape {x.shape}"
        )
    return float(nn.mlp_forward(model.params, x))


def predict_rows(model: ConditionalMeanModel, rows) -> np.ndarray:
    """Vectorized prediction over (n, |members|) conditioning rows."""
    rows = np.asarray(rows, dtype=float)
    if model.constant is not None:
        return np.full(rows.shape[0], model.constant)
    return nn.mlp_forward_batch(model.params, rows)[:, 0]


def predict_from_full(model: ConditionalMeanModel, full_rows) -> np.ndarray:
    """Prediction from full-width data rows, slicing by feature_index_map."""
    full_rows = np.asarray(full_rows, dtype=float)
    if model.constant is not None:
        return np.full(full_rows.shape[0], model.constant)
    return predict_rows(model, full_rows[:, list(model.feature_index_map)])
