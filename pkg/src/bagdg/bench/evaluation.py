"""Accuracy metrics for the two prediction stages."""

from __future__ import annotations

import numpy as np

from ..adapt import AdaptConfig, adapt, final_predict
from ..errors import ContractError
from ..model import BagModel, stage1_probs
from ..numkit import AdamState, Mlp, backward, forward, init_mlp, make_rng, optim_step, softmax
from ..scm import LabeledDataset
from .training import erm_probs

STAGES = ("pre_tta", "post_tta")


def classification_metrics(pred, truth, n_classes: int | None = None) -> dict:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.size == 0:
        raise ContractError("cannot score an empty dataset")
    if pred.shape != truth.shape:
        raise ContractError("predictions and labels differ in length")
    K = n_classes or int(max(pred.max(), truth.max())) + 1
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    per_class = []
    for k in range(K):
        support = counts[:, k].sum()
        per_class.append(float(counts[k, k] / support) if support else None)
    return {
        "n": int(truth.size),
        "accuracy": float(np.trace(counts) / truth.size),
        "per_class_accuracy": per_class,
        "confusion_counts": counts.tolist(),  # [predicted][true]
    }


def evaluate(model, data: LabeledDataset, stage: str = "pre_tta", adapt_config: AdaptConfig | None = None) -> dict:
    if stage not in STAGES:
        raise ContractError(f"stage must be one of {STAGES}")
    if isinstance(model, Mlp):
        probs = erm_probs(model, data.X)
    elif not isinstance(model, BagModel):
        raise ContractError(f"cannot evaluate a {type(model).__name__}")
    elif stage == "pre_tta":
        probs = stage1_probs(model, data.X)
    else:
        cfg = adapt_config or AdaptConfig()
        adapted, _ = adapt(model, data.X, cfg)
        probs = final_predict(adapted, model.calib, data.X, cfg.correction_mode)
    out = classification_metrics(np.argmax(probs, axis=1), data.y, probs.shape[1])
    out["stage"] = stage
    return out


def linear_probe_accuracy(Z_train, y_train, Z_test, y_test, epochs: int = 300, step_size: float = 0.05) -> float:
    """Held-out accuracy of a softmax-linear classifier fit on standardised
    features (full-batch Adam on cross-entropy)."""
    Z_train = np.asarray(Z_train, dtype=np.float64)
    Z_test = np.asarray(Z_test, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    mu, sd = Z_train.mean(axis=0), Z_train.std(axis=0) + 1e-12
    A, T = (Z_train - mu) / sd, (Z_test - mu) / sd
    K = int(max(y_train.max(), np.max(y_test))) + 1
    net = init_mlp([A.shape[1], K], ["identity"], make_rng(0, 99))
    params = net.named("probe")
    state = AdamState(step_size=step_size)
    onehot = np.eye(K)[y_train]
    for _ in range(epochs):
        cur = net.with_named(params, "probe")
        out, cache = forward(cur, A)
        grads, _ = backward(cur, cache, (softmax(out, axis=1) - onehot) / A.shape[0])
        params, state = optim_step(params, grads.named("probe"), state)
    pred = forward(net.with_named(params, "probe"), T)[0].argmax(axis=1)
    return float(np.mean(pred == np.asarray(y_test)))
