"""VAE with a latent split into a content block and a bias block.

The encoder emits ``2 * n_z`` numbers per row: means then log-variances.
By convention the first ``n_c`` latent dimensions are content, the rest
are bias.

Every loss here has a ``*_grads`` twin returning the value together with
gradients w.r.t. its array inputs; the training code chains those through
``numkit.backward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalError
from .numkit import Mlp, ForwardCache, forward, init_mlp

LOGVAR_MIN = -20.0
LOGVAR_MAX = 20.0


@dataclass(frozen=True)
class LatentCode:
    c_mean: np.ndarray
    c_logvar: np.ndarray
    b_mean: np.ndarray
    b_logvar: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return np.hstack([self.c_mean, self.b_mean])

    @property
    def logvar(self) -> np.ndarray:
        return np.hstack([self.c_logvar, self.b_logvar])

    @property
    def n_c(self) -> int:
        return self.c_mean.shape[1]


@dataclass(frozen=True)
class Vae:
    encoder: Mlp
    decoder: Mlp
    n_c: int
    beta: float = 1.0

    def __post_init__(self):
        n_z = self.decoder.in_dim
        if self.encoder.out_dim != 2 * n_z:
            raise ContractError(f"encoder width {self.encoder.out_dim} != 2 * latent size {n_z}")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ContractError("decoder must map back to the observation width")
        if not 0 < self.n_c < n_z:
            raise ContractError(f"content size {self.n_c} must leave room for a bias block in {n_z}")
        if self.beta < 0:
            raise ContractError("beta must be >= 0")

    @property
    def n_x(self) -> int:
        return self.encoder.in_dim

    @property
    def n_z(self) -> int:
        return self.decoder.in_dim

    @property
    def n_b(self) -> int:
        return self.n_z - self.n_c

    def named(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named("encoder"), **self.decoder.named("decoder")}

    def with_named(self, arrays) -> "Vae":
        return Vae(self.encoder.with_named(arrays, "encoder"), self.decoder.with_named(arrays, "decoder"), self.n_c, self.beta)


def init_vae(n_x: int, n_c: int, n_b: int, rng: np.random.Generator, decoder_hidden: int = 16, beta: float = 1.0) -> Vae:
    n_z = n_c + n_b
    encoder = init_mlp([n_x, 2 * n_z], ["identity"], rng)
    decoder = init_mlp([n_z, decoder_hidden, n_x], ["tanh", "identity"], rng)
    return Vae(encoder, decoder, n_c, beta)


def split_code(raw: np.ndarray, n_c: int) -> LatentCode:
    n_z = raw.shape[1] // 2
    mean, logvar = raw[:, :n_z], np.clip(raw[:, n_z:], LOGVAR_MIN, LOGVAR_MAX)
    return LatentCode(mean[:, :n_c], logvar[:, :n_c], mean[:, n_c:], logvar[:, n_c:])


def encode_with_cache(vae: Vae, X) -> tuple[LatentCode, np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != vae.n_x:
        raise ContractError(f"expected rows of width {vae.n_x}, got {np.shape(X)}")
    raw, cache = forward(vae.encoder, X)
    return split_code(raw, vae.n_c), raw, cache


def encode(vae: Vae, X) -> LatentCode:
    return encode_with_cache(vae, X)[0]


def reparameterize(code: LatentCode, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(code.mean.shape)
    return reparameterize_with(code, noise)


def reparameterize_with(code: LatentCode, noise: np.ndarray) -> np.ndarray:
    return code.mean + np.exp(0.5 * code.logvar) * noise


def decode(vae: Vae, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != vae.n_z:
        raise ContractError(f"expected latent rows of width {vae.n_z}, got {np.shape(z)}")
    return forward(vae.decoder, z)[0]


# -- losses ------------------------------------------------------------------


def vae_loss_grads(X, x_hat, code: LatentCode, beta: float):
    """Value and gradients w.r.t. (x_hat, latent mean, latent logvar)."""
    X = np.asarray(X, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if X.shape != x_hat.shape:
        raise ContractError(f"reconstruction shape {x_hat.shape} != input shape {X.shape}")
    mean, logvar = code.mean, code.logvar
    if mean.shape[0] != X.shape[0]:
        raise ContractError("codes and inputs disagree on batch size")
    n = X.shape[0]
    diff = x_hat - X
    var = np.exp(logvar)
    recon = (diff * diff).sum(axis=1)
    kl = 0.5 * (var + mean * mean - 1.0 - logvar).sum(axis=1)
    value = float(np.mean(recon + beta * kl))
    if not np.isfinite(value):
        raise NumericalError("VAE loss is not finite")
    d_xhat = 2.0 * diff / n
    d_mean = beta * mean / n
    d_logvar = beta * 0.5 * (var - 1.0) / n
    return value, d_xhat, d_mean, d_logvar


def vae_loss(X, x_hat, code: LatentCode, beta: float) -> float:
    return vae_loss_grads(X, x_hat, code, beta)[0]


def _class_means(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row mean of ``values`` over the rows sharing the row's label."""
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((classes.size, values.shape[1]))
    np.add.at(sums, inverse, values)
    return (sums / counts[:, None])[inverse]


def independence_penalty_grads(C, B, y):
    """Squared Frobenius norm of the batch cross-moment between content and
    the class-centred bias block, plus gradients w.r.t. C and B."""
    C = np.asarray(C, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    y = np.asarray(y)
    n = C.shape[0]
    if n == 0:
        raise ContractError("independence penalty needs a non-empty batch")
    if B.shape[0] != n or y.shape != (n,):
        raise ContractError("C, B and y must have the same number of rows")
    R = B - _class_means(B, y)
    S = C.T @ R / n
    value = float((S * S).sum())
    dC = (2.0 / n) * R @ S.T
    dR = (2.0 / n) * C @ S
    # centring within classes is a symmetric projection
    dB = dR - _class_means(dR, y)
    return value, dC, dB


def independence_penalty(C, B, y) -> float:
    return independence_penalty_grads(C, B, y)[0]


def environment_invariance_grads(C, y, e):
    """How far the content means of each (environment, label) cell drift
    from the pooled label mean.

    Cells are weighted by their share of the batch:
    ``sum_cells (n_cell / n) * ||mean(C | e, y) - mean(C | y)||^2``.
    With that weighting the gradient on a row is simply
    ``2 (cell mean - label mean) / n``.
    """
    C = np.asarray(C, dtype=np.float64)
    y = np.asarray(y)
    e = np.asarray(e)
    n = C.shape[0]
    if n == 0:
        raise ContractError("invariance penalty needs a non-empty batch")
    if y.shape != (n,) or e.shape != (n,):
        raise ContractError("C, y and e must have the same number of rows")
    label_mean = _class_means(C, y)
    cell = y.astype(np.int64) * (int(e.max()) + 1) + e.astype(np.int64)
    cell_mean = _class_means(C, cell)
    gap = cell_mean - label_mean
    value = float((gap * gap).sum() / n)
    return value, 2.0 * gap / n


def environment_invariance_penalty(C, y, e) -> float:
    return environment_invariance_grads(C, y, e)[0]
