"""Source-training objective and its exact gradient.

total = cls + w.vae * vae + w.ind * ind
        + w.env * env + w.inv * inv + w.dom * dom

``cls``  cross-entropy of the combined prediction
``vae``  reconstruction + beta * KL
``ind``  content / class-centred bias cross-moment
``env``  drift of per-environment content means within each label
``inv``  cross-entropy of the invariant head on its own
``dom``  cross-entropy of the domain classifier against environment labels

The last three are off when their weight is zero, which leaves the plain
three-term objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .disentangle import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    LatentCode,
    environment_invariance_grads,
    independence_penalty_grads,
    vae_loss_grads,
)
from .errors import ContractError, NumericalError
from .model import BagModel
from .numkit import EPS_CLIP, backward, forward, log_softmax
from .predictor import mixture_backward, mixture_forward


@dataclass(frozen=True)
class LossWeights:
    vae: float = 0.1
    ind: float = 0.1
    env: float = 100.0
    inv: float = 1.0
    dom: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("vae", "ind", "env", "inv", "dom", "beta"):
            if not getattr(self, name) >= 0:
                raise ContractError(f"loss weight {name} must be >= 0")


PART_NAMES = ("cls", "vae", "ind", "env", "inv", "dom")


def _onehot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((labels.size, width))
    out[np.arange(labels.size), labels] = 1.0
    return out


def assemble(parts: dict, w: LossWeights) -> float:
    return (
        parts["cls"]
        + w.vae * parts["vae"]
        + w.ind * parts["ind"]
        + w.env * parts["env"]
        + w.inv * parts["inv"]
        + w.dom * parts["dom"]
    )


def composite_loss(model: BagModel, X, y, e, noise, weights: LossWeights):
    """Return (total, parts, grads) for one batch.

    ``noise`` is the standard-normal draw used by the reparameterised
    reconstruction path; passing it in keeps the loss a deterministic
    function of the parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    e = np.asarray(e, dtype=np.int64)
    vae, head = model.vae, model.head
    n, K, M = X.shape[0], head.n_classes, head.n_domains
    n_z, n_c = vae.n_z, vae.n_c
    if noise.shape != (n, n_z):
        raise ContractError(f"noise must have shape {(n, n_z)}")
    use_dom = weights.dom > 0 and M > 1
    if use_dom and (e.min() < 0 or e.max() >= M):
        raise ContractError(f"environment labels must index the {M} experts")

    raw, enc_cache = forward(vae.encoder, X)
    mean = raw[:, :n_z]
    lv_raw = raw[:, n_z:]
    logvar = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
    C, B = mean[:, :n_c], mean[:, n_c:]

    # classification through the decomposed head
    mix = mixture_forward(head, B)
    q = mix.mixture
    qc = np.clip(q, EPS_CLIP, 1.0 - EPS_CLIP)
    inv_logits, inv_cache = forward(head.invariant, C)
    logits = np.log(qc) + inv_logits - head.prior_logits
    Y = _onehot(y, K)
    ls = log_softmax(logits, axis=1)
    cls = -float(np.mean(ls[np.arange(n), y]))
    d_logits = (np.exp(ls) - Y) / n

    inv_ls = log_softmax(inv_logits, axis=1)
    inv = -float(np.mean(inv_ls[np.arange(n), y]))
    d_inv = (np.exp(inv_ls) - Y) / n

    dom = 0.0
    d_scores = None
    if use_dom:
        dom_ls = log_softmax(mix.gate_cache.post[-1], axis=1)
        dom = -float(np.mean(dom_ls[np.arange(n), e]))
        d_scores = weights.dom * (mix.weights - _onehot(e, M)) / n

    # reconstruction path on a reparameterised sample
    sd = np.exp(0.5 * logvar)
    z = mean + sd * noise
    x_hat, dec_cache = forward(vae.decoder, z)
    code = LatentCode(C, logvar[:, :n_c], B, logvar[:, n_c:])
    vae_val, d_xhat, d_mean_kl, d_lv_kl = vae_loss_grads(X, x_hat, code, weights.beta)

    ind, dC_ind, dB_ind = independence_penalty_grads(C, B, y)
    env, dC_env = environment_invariance_grads(C, y, e)

    parts = {"cls": cls, "vae": vae_val, "ind": ind, "env": env, "inv": inv, "dom": dom}
    total = assemble(parts, weights)
    if not np.isfinite(total):
        raise NumericalError(f"training loss is not finite: {parts}")

    # backward
    grads = {}
    keep = (q > EPS_CLIP) & (q < 1.0 - EPS_CLIP)
    d_q = np.where(keep, d_logits / qc, 0.0)
    head_grads, dB = mixture_backward(head, mix, d_q, d_scores)
    grads.update(head_grads)
    inv_grads, dC = backward(head.invariant, inv_cache, d_logits + weights.inv * d_inv)
    grads.update(inv_grads.named("invariant"))
    grads["prior"] = -d_logits.sum(axis=0)

    dec_grads, dz = backward(vae.decoder, dec_cache, weights.vae * d_xhat)
    grads.update(dec_grads.named("decoder"))

    d_mean = np.hstack([dC + weights.ind * dC_ind + weights.env * dC_env, dB + weights.ind * dB_ind])
    d_mean = d_mean + weights.vae * d_mean_kl + dz
    d_lv = weights.vae * d_lv_kl + dz * noise * sd * 0.5
    d_lv = np.where((lv_raw >= LOGVAR_MIN) & (lv_raw <= LOGVAR_MAX), d_lv, 0.0)
    enc_grads, _ = backward(vae.encoder, enc_cache, np.hstack([d_mean, d_lv]))
    grads.update(enc_grads.named("encoder"))
    return total, parts, grads
