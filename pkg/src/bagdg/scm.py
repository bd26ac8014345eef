"""Synthetic multi-environment data from a linear structural causal model.

Each row is drawn along the chain

    e ~ Categorical(pi)
    y = 1{w . E_e + b0 + noise > 0}
    c = anchor_y + noise               (content: depends on y only)
    b = E_e + C[e][y] + noise          (bias: depends on e and y)
    x = Mmix [c; b] + noise

The held-out target environment has its own embedding and bias table and
is indexed ``n_envs`` in the ``e`` column.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, StorageError
from .numkit import make_rng

SOURCE = "source"
TARGET = "target"

_DATA_STREAM = {SOURCE: 1, TARGET: 2}


@dataclass(frozen=True)
class ScmConfig:
    env_probs: np.ndarray  # (M,)
    env_embeddings: np.ndarray  # (M, nb)
    label_weights: np.ndarray  # (nb,)
    label_offset: float
    label_noise: float
    content_anchors: np.ndarray  # (2, nc): row y is the anchor for label y
    content_noise: float
    bias_table: np.ndarray  # (M, 2, nb)
    bias_noise: float
    mixing_matrix: np.ndarray  # (nc+nb, nc+nb)
    obs_noise: float
    target_embedding: np.ndarray  # (nb,)
    target_bias_table: np.ndarray  # (2, nb)

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, (float, int)):
                object.__setattr__(self, f.name, float(val))
            else:
                object.__setattr__(self, f.name, np.array(val, dtype=np.float64))
        self.validate()

    @property
    def n_envs(self) -> int:
        return self.env_probs.shape[0]

    @property
    def n_c(self) -> int:
        return self.content_anchors.shape[1]

    @property
    def n_b(self) -> int:
        return self.env_embeddings.shape[1]

    @property
    def n_x(self) -> int:
        return self.mixing_matrix.shape[0]

    def validate(self) -> None:
        pi = self.env_probs
        if pi.ndim != 1 or pi.size == 0:
            raise ConfigError("env_probs must be a non-empty vector")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ConfigError(f"env_probs must be positive and sum to 1, got {pi.tolist()}")
        M = pi.size
        if self.content_anchors.ndim != 2 or self.content_anchors.shape[0] != 2:
            raise ConfigError("content_anchors must hold two rows (one per label)")
        nc = self.content_anchors.shape[1]
        if self.env_embeddings.ndim != 2 or self.env_embeddings.shape[0] != M:
            raise ConfigError(f"env_embeddings must have {M} rows")
        nb = self.env_embeddings.shape[1]
        expect = {
            "label_weights": (nb,),
            "bias_table": (M, 2, nb),
            "mixing_matrix": (nc + nb, nc + nb),
            "target_embedding": (nb,),
            "target_bias_table": (2, nb),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("label_noise", "content_noise", "bias_noise", "obs_noise"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if np.array_equal(self.content_anchors[0], self.content_anchors[1]):
            raise ConfigError("content anchors for the two labels must differ")
        cond = np.linalg.cond(self.mixing_matrix)
        if not np.isfinite(cond) or cond >= 1e6:
            raise ConfigError(f"mixing matrix is ill-conditioned (condition number {cond:.3g})")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise ConfigError(f"{f.name} contains non-finite values")

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    def replace(self, **changes) -> "ScmConfig":
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(changes) - set(current)
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        current.update(changes)
        return ScmConfig(**current)


SCM_FIELDS = tuple(f.name for f in fields(ScmConfig))


@dataclass(frozen=True)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    e: np.ndarray
    c: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        e = np.array(self.e, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],) or e.shape != (X.shape[0],):
            raise ContractError("X, y and e must describe the same rows")
        if X.shape[0] == 0:
            raise ContractError("dataset is empty")
        if y.min() < 0 or e.min() < 0:
            raise ContractError("labels and environment indices must be non-negative")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "e", e)
        if (self.c is None) != (self.b is None):
            raise ContractError("store both latent blocks or neither")
        if self.c is not None:
            c = np.array(self.c, dtype=np.float64)
            b = np.array(self.b, dtype=np.float64)
            if c.ndim != 2 or b.ndim != 2 or c.shape[0] != X.shape[0] or b.shape[0] != X.shape[0]:
                raise ContractError("latent blocks must have one row per observation")
            object.__setattr__(self, "c", c)
            object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_x(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.X[idx],
            self.y[idx],
            self.e[idx],
            None if self.c is None else self.c[idx],
            None if self.b is None else self.b[idx],
        )


# -- per-draw samplers (vectorised over an optional batch) -------------------


def sample_environment(probs, rng: np.random.Generator, size=None):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ContractError("environment probabilities must form a simplex")
    u = rng.random(size)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    # smallest index with u < cdf; zero-mass entries never win
    return np.searchsorted(cdf, u, side="right")


def sample_label(embedding, weights, offset: float, noise: float, rng: np.random.Generator, size=None):
    embedding = np.asarray(embedding, dtype=np.float64)
    score = embedding @ np.asarray(weights, dtype=np.float64) + offset
    shape = np.shape(score) if size is None else size
    xi = noise * rng.standard_normal(shape) if noise > 0 else np.zeros(shape)
    return (score + xi > 0).astype(np.int64)


def sample_content(y, c0, c1, noise: float, rng: np.random.Generator):
    anchors = np.stack([np.asarray(c0, dtype=np.float64), np.asarray(c1, dtype=np.float64)])
    mean = anchors[np.asarray(y)]
    if noise == 0:
        return mean.copy()
    return mean + noise * rng.standard_normal(mean.shape)


def _bias_means(e, y, config: ScmConfig) -> np.ndarray:
    e = np.asarray(e)
    y = np.asarray(y)
    M = config.n_envs
    if np.any(e > M) or np.any(e < 0):
        raise ContractError(f"environment index out of range 0..{M}")
    emb = np.vstack([config.env_embeddings, config.target_embedding[None, :]])
    table = np.concatenate([config.bias_table, config.target_bias_table[None]], axis=0)
    return emb[e] + table[e, y]


def sample_bias(e, y, config: ScmConfig, rng: np.random.Generator):
    mean = _bias_means(e, y, config)
    if config.bias_noise == 0:
        return mean
    return mean + config.bias_noise * rng.standard_normal(mean.shape)


def generate(config: ScmConfig, n_samples: int, env_set: str, seed: int) -> LabeledDataset:
    if n_samples <= 0:
        raise ContractError("n_samples must be positive")
    if env_set not in _DATA_STREAM:
        raise ContractError(f"env_set must be {SOURCE!r} or {TARGET!r}")
    rng = make_rng(seed, _DATA_STREAM[env_set])
    n = n_samples
    if env_set == SOURCE:
        e = sample_environment(config.env_probs, rng, size=n)
        emb = config.env_embeddings[e]
    else:
        e = np.full(n, config.n_envs, dtype=np.int64)
        emb = np.tile(config.target_embedding, (n, 1))
    y = sample_label(emb, config.label_weights, config.label_offset, config.label_noise, rng, size=n)
    c = sample_content(y, *config.content_anchors, config.content_noise, rng)
    b = sample_bias(e, y, config, rng)
    z = np.hstack([c, b])
    X = z @ config.mixing_matrix.T
    if config.obs_noise > 0:
        X = X + config.obs_noise * rng.standard_normal(X.shape)
    return LabeledDataset(X, y, e, c, b)


# -- default generator -------------------------------------------------------


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with the sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def default_config(
    seed: int,
    n_c: int = 5,
    n_b: int = 5,
    anchor_scale: float = 1.1,
    env_probs=(0.475, 0.475, 0.05),
    env_scales=(1.5, 1.5, 3.0),
    label_shifts=(3.0, 1.0, 0.0),
    target_stretch: float = 1.5,
    reversal_gain: float = 3.0,
    label_weights=(0.0, 0.2, -0.2, 0.0, 0.0),
    label_noise: float = 1.0,
    content_noise: float = 1.0,
    bias_noise: float = 1.0,
    obs_noise: float = 0.1,
) -> ScmConfig:
    """Three source environments and a target where the bias cue flips.

    Bias coordinate 0 carries the label-dependent shift; coordinate k+1
    carries environment k's offset. The rare third environment has no
    label shift at all. The target sits further out along that
    environment's axis and its label shift points against the
    frequency-weighted source shift, scaled by ``reversal_gain``.
    """
    M = len(env_probs)
    if n_b < M + 1:
        raise ConfigError(f"need at least {M + 1} bias dimensions for {M} environments")
    rng = make_rng(seed, 0)
    direction = rng.standard_normal(n_c)
    direction /= np.linalg.norm(direction)
    anchors = np.stack([-anchor_scale * direction, anchor_scale * direction])

    pi = np.asarray(env_probs, dtype=np.float64)
    emb = np.zeros((M, n_b))
    table = np.zeros((M, 2, n_b))
    for k in range(M):
        emb[k, k + 1] = env_scales[k]
        table[k, 1, 0] = label_shifts[k] / 2
        table[k, 0, 0] = -label_shifts[k] / 2
    pooled = np.tensordot(pi, table, axes=1)  # (2, nb)
    target_table = -reversal_gain * pooled
    target_emb = target_stretch * emb[M - 1]

    weights = np.zeros(n_b)
    lw = np.asarray(label_weights, dtype=np.float64)[:n_b]
    weights[: lw.size] = lw

    return ScmConfig(
        env_probs=pi,
        env_embeddings=emb,
        label_weights=weights,
        label_offset=0.0,
        label_noise=label_noise,
        content_anchors=anchors,
        content_noise=content_noise,
        bias_table=table,
        bias_noise=bias_noise,
        mixing_matrix=random_rotation(n_c + n_b, rng),
        obs_noise=obs_noise,
        target_embedding=target_emb,
        target_bias_table=target_table,
    )


# -- dataset files -----------------------------------------------------------

_MAGIC = "bagset v1"


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_dataset(path, data: LabeledDataset) -> None:
    nc = 0 if data.c is None else data.c.shape[1]
    nb = 0 if data.b is None else data.b.shape[1]
    lines = [f"{_MAGIC} n={data.n} nx={data.n_x} nc={nc} nb={nb}"]
    for i in range(data.n):
        row = [_fmt(v) for v in data.X[i]]
        row += [str(int(data.y[i])), str(int(data.e[i]))]
        if nc:
            row += [_fmt(v) for v in data.c[i]]
            row += [_fmt(v) for v in data.b[i]]
        lines.append(",".join(row))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {path}: {exc}") from exc


def read_dataset(path) -> LabeledDataset:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_MAGIC + " "):
        raise StorageError(f"{path}: missing '{_MAGIC}' header")
    try:
        meta = dict(tok.split("=", 1) for tok in lines[0][len(_MAGIC) + 1 :].split())
        n, nx, nc, nb = (int(meta[k]) for k in ("n", "nx", "nc", "nb"))
    except (KeyError, ValueError) as exc:
        raise StorageError(f"{path}: malformed header {lines[0]!r}") from exc
    rows = lines[1:]
    if len(rows) != n:
        raise StorageError(f"{path}: header promises {n} rows, found {len(rows)}")
    width = nx + 2 + nc + nb
    X = np.empty((n, nx))
    y = np.empty(n, dtype=np.int64)
    e = np.empty(n, dtype=np.int64)
    lat = np.empty((n, nc + nb))
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != width:
            raise StorageError(f"{path}: row {i + 1} has {len(parts)} fields, expected {width}")
        try:
            X[i] = [float(v) for v in parts[:nx]]
            y[i] = int(parts[nx])
            e[i] = int(parts[nx + 1])
            lat[i] = [float(v) for v in parts[nx + 2 :]]
        except ValueError as exc:
            raise StorageError(f"{path}: row {i + 1} is not numeric") from exc
    if nc + nb:
        return LabeledDataset(X, y, e, lat[:, :nc], lat[:, nc:])
    return LabeledDataset(X, y, e)
