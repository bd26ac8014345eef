"""The trained object: VAE, decomposed head and optional calibration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .calibrate import BinaryCalib, ConfusionMatrix
from .disentangle import Vae, encode
from .errors import ContractError
from .predictor import DecomposedHead, bias_mixture, clip_simplex, combined_logits
from .numkit import softmax


@dataclass(frozen=True)
class BagModel:
    vae: Vae
    head: DecomposedHead
    calib: BinaryCalib | ConfusionMatrix | None = None

    def __post_init__(self):
        if self.head.n_c != self.vae.n_c or self.head.n_b != self.vae.n_b:
            raise ContractError(
                f"head expects blocks ({self.head.n_c}, {self.head.n_b}), "
                f"encoder yields ({self.vae.n_c}, {self.vae.n_b})"
            )

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def named(self) -> dict[str, np.ndarray]:
        return {**self.vae.named(), **self.head.named()}

    def with_named(self, arrays) -> "BagModel":
        return replace(self, vae=self.vae.with_named(arrays), head=self.head.with_named(arrays))

    def with_head(self, head: DecomposedHead) -> "BagModel":
        return replace(self, head=head)

    def with_calib(self, calib) -> "BagModel":
        return replace(self, calib=calib)

    def bias_head_names(self) -> list[str]:
        return self.head.bias_head_names()

    def frozen_names(self) -> list[str]:
        trainable = set(self.bias_head_names())
        return sorted(k for k in self.named() if k not in trainable)

    def n_params(self) -> int:
        return sum(a.size for a in self.named().values())


def latent_blocks(model: BagModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means of the content and bias blocks."""
    code = encode(model.vae, X)
    return code.c_mean, code.b_mean


def stage1_probs(model: BagModel, X) -> np.ndarray:
    C, B = latent_blocks(model, X)
    return clip_simplex(softmax(combined_logits(model.head, C, bias_mixture(model.head, B)), axis=1))


def parameter_digest(model: BagModel, names=None) -> str:
    """SHA-256 over the named arrays (names, shapes and raw bytes)."""
    arrays = model.named()
    h = hashlib.sha256()
    for name in sorted(arrays if names is None else names):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
