"""Ground-truth simulation designs: random triangular DAGs, nonlinear and
linear structural equations with AR(1) errors, and the three-variable
v-structure example used as a power benchmark.

All generators are pure functions of (parameters, seed): the same seed
reproduces bitwise-identical data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolationError, DataFormatError

_TRIG = (np.sin, np.cos)


@dataclass
class GroundTruthDag:
    """Sampled truth graph.

    ``adjacency[j, k] == 1`` means k is a parent of j (strictly lower
    triangular, so the index order is a valid topological order).  Nonlinear
    designs carry pairwise and single-parent coefficients with sine/cosine
    selectors; linear designs carry a single coefficient per edge.
    """

    d: int
    zeta: float
    mode: str  # "nonlinear" | "linear"
    adjacency: np.ndarray
    seed: int
    pair_coeffs: dict = field(default_factory=dict)   # (j, k1, k2) -> (c, f1, f2)
    single_coeffs: dict = field(default_factory=dict)  # (j, k) -> (c, f3) or c

    def parents(self, j: int) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.adjacency[j]))

    def edge_set(self) -> set[tuple[int, int]]:
        """Directed edges as (parent, child) pairs."""
        rows, cols = np.nonzero(self.adjacency)
        return {(int(k), int(j)) for j, k in zip(rows, cols)}


@dataclass
class Dataset:
    """Observations indexed (subject, time, variable)."""

    values: np.ndarray
    provenance: str = "simulated"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ContractViolationError(
                f"expected (N, T, d) values, got shape {self.values.shape}"
            )

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def n_vars(self) -> int:
        return self.values.shape[2]


def _coeff(rng, lo, hi):
    return rng.uniform(lo, hi) * (1.0 if rng.random() < 0.5 else -1.0)


def sample_dag(d: int, zeta: float, mode: str = "nonlinear", seed: int = 0,
               zero_fraction: float = 0.0) -> GroundTruthDag:
    """Strictly lower-triangular Bernoulli(zeta) graph with random coefficients.

    Nonlinear coefficients are uniform on +/-[0.5, 1.5] with sine/cosine
    selectors drawn per term; linear coefficients uniform on +/-[0.3, 0.5].
    ``zero_fraction`` then zeroes that share of coefficients at random
    (default 0 so hypothesis labels match the adjacency exactly).
    """
    if not 0.0 <= zeta < 1.0:
        raise ConfigurationError(f"edge probability zeta={zeta} outside [0, 1)")
    if mode not in ("nonlinear", "linear"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    adj = np.zeros((d, d), dtype=np.int8)
    for j in range(1, d):
        adj[j, :j] = rng.random(j) < zeta

    truth = GroundTruthDag(d=d, zeta=zeta, mode=mode, adjacency=adj, seed=seed)
    if mode == "linear":
        for j in range(d):
            for k in truth.parents(j):
                truth.single_coeffs[(j, k)] = _coeff(rng, 0.3, 0.5)
    else:
        for j in range(d):
            pa = truth.parents(j)
            for a, k1 in enumerate(pa):
                for k2 in pa[a:]:  # ordered pairs k1 <= k2, diagonal included
                    truth.pair_coeffs[(j, k1, k2)] = (
                        _coeff(rng, 0.5, 1.5),
                        _TRIG[rng.integers(2)],
                        _TRIG[rng.integers(2)],
                    )
            for k3 in pa:
                truth.single_coeffs[(j, k3)] = (
                    _coeff(rng, 0.5, 1.5),
                    _TRIG[rng.integers(2)],
                )

    if zero_fraction > 0.0:
        for table in (truth.pair_coeffs, truth.single_coeffs):
            for key in list(table):
                if rng.random() < zero_fraction:
                    val = table[key]
                    table[key] = 0.0 if mode == "linear" else (0.0, *val[1:])
    return truth


def ar_noise(t: int, phi: float, seed=None, rng: np.random.Generator | None = None,
             size: tuple = ()) -> np.ndarray:
    """AR(1) series with standard normal innovations, stationary start.

    Returns shape ``size + (t,)``; each leading index is an independent series.
    """
    if not abs(phi) < 1:
        raise ConfigurationError(f"|phi| must be < 1, got {phi}")
    if rng is None:
        rng = np.random.default_rng(seed)
    out = np.empty(size + (t,))
    out[..., 0] = rng.normal(scale=1.0 / np.sqrt(1.0 - phi * phi), size=size)
    white = rng.normal(size=size + (t - 1,)) if t > 1 else None
    for step in range(1, t):
        out[..., step] = phi * out[..., step - 1] + white[..., step - 1]
    return out


def _simulate(truth: GroundTruthDag, n_subjects: int, n_times: int, seed: int,
              phi: float) -> Dataset:
    rng = np.random.default_rng(seed)
    d = truth.d
    # independent error series per (subject, variable)
    eps = np.empty((n_subjects, n_times, d))
    for j in range(d):
        eps[:, :, j] = ar_noise(n_times, phi, rng=rng, size=(n_subjects,))

    x = np.empty_like(eps)
    for j in range(d):  # index order is topological by construction
        pa = truth.parents(j)
        acc = eps[:, :, j].copy()
        if truth.mode == "linear":
            for k in pa:
                acc += truth.single_coeffs[(j, k)] * x[:, :, k]
        else:
            for a, k1 in enumerate(pa):
                for k2 in pa[a:]:
                    c, f1, f2 = truth.pair_coeffs[(j, k1, k2)]
                    acc += c * f1(x[:, :, k1]) * f2(x[:, :, k2])
            for k3 in pa:
                c, f3 = truth.single_coeffs[(j, k3)]
                acc += c * f3(x[:, :, k3])
        x[:, :, j] = acc
    return Dataset(values=x, provenance=f"simulated:{truth.mode}:seed={seed}")


def simulate_nonlinear(truth: GroundTruthDag, n_subjects: int, n_times: int,
                       seed: int = 0, phi: float = 0.5) -> Dataset:
    """Nonlinear structural equations: pairwise trig products over parent
    pairs (k1 <= k2, diagonal included) plus single-parent trig terms, with
    AR(phi) errors per (subject, variable)."""
    if truth.mode != "nonlinear":
        raise ContractViolationError("truth graph was sampled in linear mode")
    return _simulate(truth, n_subjects, n_times, seed, phi)


def simulate_linear(truth: GroundTruthDag, n_subjects: int, n_times: int,
                    seed: int = 0, phi: float = 0.5) -> Dataset:
    """Linear structural equations with AR(phi) errors."""
    if truth.mode != "linear":
        raise ContractViolationError("truth graph was sampled in nonlinear mode")
    return _simulate(truth, n_subjects, n_times, seed, phi)


def vstructure_example(n_subjects: int, n_times: int, seed: int = 0,
                       phi: float = 0.0) -> Dataset:
    """X1 = e1, X2 = e2, X3 = X1^2 + X2 + e3 with symmetric errors.

    Errors are i.i.d. standard normal over time by default (phi = 0);
    pass phi to add AR structure.
    """
    rng = np.random.default_rng(seed)
    if phi == 0.0:
        eps = rng.normal(size=(n_subjects, n_times, 3))
    else:
        eps = np.empty((n_subjects, n_times, 3))
        for j in range(3):
            eps[:, :, j] = ar_noise(n_times, phi, rng=rng, size=(n_subjects,))
    x = np.empty_like(eps)
    x[:, :, 0] = eps[:, :, 0]
    x[:, :, 1] = eps[:, :, 1]
    x[:, :, 2] = x[:, :, 0] ** 2 + x[:, :, 1] + eps[:, :, 2]
    return Dataset(values=x, provenance=f"simulated:vstructure:seed={seed}")


# ---------------------------------------------------------------------------
# persistence: long-format CSV and a versioned binary dump

CSV_HEADER = ("subject", "time", "variable", "value")
_BINARY_FORMAT_VERSION = 1


def write_csv(dataset: Dataset, path) -> None:
    """Long format with a required header row; indices are 1-based on disk."""
    n, t, d = dataset.values.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(n):
            for tt in range(t):
                row_vals = dataset.values[i, tt]
                for j in range(d):
                    # repr of a Python float round-trips exactly
                    writer.writerow((i + 1, tt + 1, j + 1, repr(float(row_vals[j]))))


def read_csv(path) -> Dataset:
    triples = {}
    max_i = max_t = max_j = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(
                f"expected header {','.join(CSV_HEADER)}", line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                i, tt, j = int(row[0]), int(row[1]), int(row[2])
                val = float(row[3])
            except (ValueError, IndexError) as exc:
                raise DataFormatError(str(exc), line=lineno) from None
            if min(i, tt, j) < 1:
                raise DataFormatError("indices must be 1-based", line=lineno)
            triples[(i - 1, tt - 1, j - 1)] = val
            max_i, max_t, max_j = max(max_i, i), max(max_t, tt), max(max_j, j)
    if not triples:
        raise DataFormatError("no data rows", line=2)
    if len(triples) != max_i * max_t * max_j:
        raise DataFormatError(
            f"expected {max_i}*{max_t}*{max_j} rows, found {len(triples)}"
        )
    values = np.empty((max_i, max_t, max_j))
    for (i, tt, j), val in triples.items():
        values[i, tt, j] = val
    return Dataset(values=values, provenance=f"ingested:{path}")


def write_binary(dataset: Dataset, path) -> None:
    np.savez_compressed(
        path,
        format_version=np.array([_BINARY_FORMAT_VERSION]),
        values=dataset.values,
        provenance=np.array([dataset.provenance]),
    )


def read_binary(path) -> Dataset:
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["format_version"][0])
        if version != _BINARY_FORMAT_VERSION:
            raise DataFormatError(f"unsupported dump version {version}")
        return Dataset(
            values=archive["values"], provenance=str(archive["provenance"][0])
        )


def write_truth_csv(truth: GroundTruthDag, path) -> None:
    """Edge list (parent, child) of the ground-truth graph, 1-based."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("parent", "child"))
        for k, j in sorted(truth.edge_set()):
            writer.writerow((k + 1, j + 1))
