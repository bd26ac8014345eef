"""Decomposed classifier: invariant head, label prior and a mixture of
per-environment bias experts.

For K classes the combined prediction is

    softmax(log q(y | b) + f_c(c) - Pr)

where ``q`` is the expert mixture in probability space. With K = 2 this
collapses to ``sigmoid(logit q1 + f_c1 - Pr1)`` on logit differences,
which is ``combine_binary``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numkit import (
    EPS_CLIP,
    ForwardCache,
    Mlp,
    backward,
    clip_prob,
    forward,
    init_mlp,
    logit,
    sigmoid,
    softmax,
    softmax_backward,
)


@dataclass(frozen=True)
class DecomposedHead:
    invariant: Mlp
    prior_logits: np.ndarray
    embeddings: np.ndarray
    gate: Mlp
    experts: tuple[Mlp, ...]

    def __post_init__(self):
        prior = np.asarray(self.prior_logits, dtype=np.float64)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        experts = tuple(self.experts)
        object.__setattr__(self, "prior_logits", prior)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "experts", experts)
        K = self.invariant.out_dim
        M = len(experts)
        if prior.shape != (K,):
            raise ContractError(f"prior logits must have {K} entries")
        if emb.ndim != 2 or emb.shape[0] != M:
            raise ContractError(f"need one embedding per expert ({M}), got {emb.shape}")
        if self.gate.out_dim != M:
            raise ContractError(f"domain classifier scores {self.gate.out_dim} domains but there are {M} experts")
        for i, ex in enumerate(experts):
            if ex.out_dim != K:
                raise ContractError(f"expert {i} predicts {ex.out_dim} classes, invariant head {K}")
            if ex.in_dim != self.gate.in_dim + emb.shape[1]:
                raise ContractError(f"expert {i} input width does not equal bias width + embedding width")

    @property
    def n_classes(self) -> int:
        return self.invariant.out_dim

    @property
    def n_domains(self) -> int:
        return len(self.experts)

    @property
    def n_c(self) -> int:
        return self.invariant.in_dim

    @property
    def n_b(self) -> int:
        return self.gate.in_dim

    def named(self) -> dict[str, np.ndarray]:
        out = dict(self.invariant.named("invariant"))
        out["prior"] = self.prior_logits
        out["embeddings"] = self.embeddings
        out.update(self.gate.named("gate"))
        for i, ex in enumerate(self.experts):
            out.update(ex.named(f"expert{i}"))
        return out

    def with_named(self, arrays) -> "DecomposedHead":
        return DecomposedHead(
            self.invariant.with_named(arrays, "invariant"),
            arrays.get("prior", self.prior_logits),
            arrays.get("embeddings", self.embeddings),
            self.gate.with_named(arrays, "gate"),
            tuple(ex.with_named(arrays, f"expert{i}") for i, ex in enumerate(self.experts)),
        )

    def bias_head_names(self) -> list[str]:
        names = ["embeddings", *self.gate.named("gate")]
        for i, ex in enumerate(self.experts):
            names += list(ex.named(f"expert{i}"))
        return names


def init_head(
    n_c: int,
    n_b: int,
    n_classes: int,
    n_domains: int,
    rng: np.random.Generator,
    embed_dim: int = 8,
    class_freq=None,
    embed_scale: float = 0.1,
) -> DecomposedHead:
    invariant = init_mlp([n_c, n_classes], ["identity"], rng)
    gate = init_mlp([n_b, n_domains], ["identity"], rng)
    embeddings = embed_scale * rng.standard_normal((n_domains, embed_dim))
    experts = tuple(init_mlp([n_b + embed_dim, n_classes], ["identity"], rng) for _ in range(n_domains))
    if class_freq is None:
        prior = np.zeros(n_classes)
    else:
        prior = np.log(clip_prob(np.asarray(class_freq, dtype=np.float64)))
    return DecomposedHead(invariant, prior, embeddings, gate, experts)


def _check_width(A, width: int, what: str) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[1] != width:
        raise ContractError(f"{what} rows must have width {width}, got {np.shape(A)}")
    return A


def invariant_logits(head: DecomposedHead, C) -> np.ndarray:
    return forward(head.invariant, _check_width(C, head.n_c, "content"))[0]


def domain_posterior(head: DecomposedHead, B) -> np.ndarray:
    return softmax(forward(head.gate, _check_width(B, head.n_b, "bias"))[0], axis=1)


def _expert_input(head: DecomposedHead, B: np.ndarray, i: int) -> np.ndarray:
    return np.hstack([B, np.broadcast_to(head.embeddings[i], (B.shape[0], head.embeddings.shape[1]))])


def expert_probs(head: DecomposedHead, B, i: int) -> np.ndarray:
    if not 0 <= i < head.n_domains:
        raise ContractError(f"expert index {i} out of range 0..{head.n_domains - 1}")
    B = _check_width(B, head.n_b, "bias")
    return softmax(forward(head.experts[i], _expert_input(head, B, i))[0], axis=1)


@dataclass(frozen=True)
class MixtureCache:
    B: np.ndarray
    gate_cache: ForwardCache
    weights: np.ndarray  # (n, M)
    expert_caches: tuple[ForwardCache, ...]
    expert_p: np.ndarray  # (M, n, K)
    mixture: np.ndarray  # (n, K)


def mixture_forward(head: DecomposedHead, B) -> MixtureCache:
    B = _check_width(B, head.n_b, "bias")
    scores, gate_cache = forward(head.gate, B)
    weights = softmax(scores, axis=1)
    caches, probs = [], []
    for i, ex in enumerate(head.experts):
        out, cache = forward(ex, _expert_input(head, B, i))
        caches.append(cache)
        probs.append(softmax(out, axis=1))
    expert_p = np.stack(probs)
    mixture = np.einsum("nm,mnk->nk", weights, expert_p)
    return MixtureCache(B, gate_cache, weights, tuple(caches), expert_p, mixture)


def mixture_backward(head: DecomposedHead, cache: MixtureCache, d_mixture: np.ndarray, d_scores=None):
    """Gradients of the bias head given upstream grads on the mixture (and
    optionally directly on the domain-classifier scores). Returns
    (named grads, dB)."""
    d_weights = np.einsum("nk,mnk->nm", d_mixture, cache.expert_p)
    d_gate = softmax_backward(cache.weights, d_weights)
    if d_scores is not None:
        d_gate = d_gate + d_scores
    gate_grads, dB = backward(head.gate, cache.gate_cache, d_gate)
    grads = dict(gate_grads.named("gate"))
    d_emb = np.zeros_like(head.embeddings)
    n_b = head.n_b
    for i, ex in enumerate(head.experts):
        d_p = cache.weights[:, i : i + 1] * d_mixture
        d_logits = softmax_backward(cache.expert_p[i], d_p)
        ex_grads, d_in = backward(ex, cache.expert_caches[i], d_logits)
        grads.update(ex_grads.named(f"expert{i}"))
        dB = dB + d_in[:, :n_b]
        d_emb[i] = d_in[:, n_b:].sum(axis=0)
    grads["embeddings"] = d_emb
    return grads, dB


def bias_mixture(head: DecomposedHead, B) -> np.ndarray:
    return mixture_forward(head, B).mixture


def combine_binary(bias_p1, inv_logit1, prior_logit1):
    z = logit(clip_prob(bias_p1)) + np.asarray(inv_logit1, dtype=np.float64) - prior_logit1
    return clip_prob(sigmoid(z))


def combine_multiclass(bias_probs, inv_probs, prior_probs) -> np.ndarray:
    bias_probs = clip_prob(np.atleast_2d(bias_probs))
    inv_probs = np.atleast_2d(np.asarray(inv_probs, dtype=np.float64))
    prior_probs = clip_prob(np.asarray(prior_probs, dtype=np.float64))
    P = bias_probs * inv_probs / prior_probs
    out = P / P.sum(axis=1, keepdims=True)
    return clip_simplex(out)


def clip_simplex(P: np.ndarray) -> np.ndarray:
    if P.min() >= EPS_CLIP and P.max() <= 1.0 - EPS_CLIP:
        return P
    P = np.clip(P, EPS_CLIP, 1.0 - EPS_CLIP)
    return P / P.sum(axis=1, keepdims=True)


def combined_logits(head: DecomposedHead, C, mixture: np.ndarray) -> np.ndarray:
    """Row logits ``log q + f_c(c) - Pr``; softmax of these is the prediction."""
    return np.log(clip_prob(mixture)) + invariant_logits(head, C) - head.prior_logits


def kl_optimal_mixture(domain_post, per_env_cond) -> np.ndarray:
    w = np.asarray(domain_post, dtype=np.float64)
    P = np.asarray(per_env_cond, dtype=np.float64)
    if w.ndim != 1 or P.ndim != 2 or P.shape[0] != w.size:
        raise ContractError("need one conditional row per domain weight")
    return w @ P


def expected_kl(domain_post, per_env_cond, q) -> float:
    """sum_e w_e KL(p_e || q); used to test the mixture's optimality."""
    w = np.asarray(domain_post, dtype=np.float64)
    P = np.asarray(per_env_cond, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(q)), 0.0)
    return float(w @ terms.sum(axis=1))
