"""Test-time adaptation of the bias head on an unlabeled target set.

1. label the target rows with the invariant head alone
2. fine-tune the bias head (experts, domain classifier, embeddings) on
   those labels; encoder, invariant head and prior stay frozen
3. undo the pseudo-label noise in the bias estimate with the source
   calibration statistics and combine as usual
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibrate import (
    BinaryCalib,
    check_informative,
    correct_multiclass,
    phi,
)
from .errors import ContractError, NumericalError
from .model import BagModel, latent_blocks
from .numkit import AdamState, clip_prob, logit, make_rng, optim_step, sigmoid, softmax
from .predictor import (
    clip_simplex,
    combine_multiclass,
    combined_logits,
    invariant_logits,
    mixture_backward,
    mixture_forward,
)

log = logging.getLogger(__name__)

MODES = ("binary_phi", "multiclass_ls", "none")


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 10
    step_size: float = 0.1
    batch_size: int | None = None  # None: full batch
    correction_mode: str = "binary_phi"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.step_size <= 0:
            raise ContractError("step_size must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ContractError("batch_size must be positive")
        if self.correction_mode not in MODES:
            raise ContractError(f"correction_mode must be one of {MODES}")


@dataclass
class AdaptReport:
    pre_accuracy: float | None
    post_accuracy: float | None
    pseudo_label_accuracy: float | None
    pseudo_agreement: float
    margin: float | None
    mode_used: str
    loss_trace: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def pseudo_label(model: BagModel, X) -> np.ndarray:
    C, _ = latent_blocks(model, X)
    # argmax keeps the first maximum, so ties go to the lower class
    return np.argmax(invariant_logits(model.head, C), axis=1)


def adaptation_loss(head, B, labels):
    """Mean cross-entropy of the bias mixture against ``labels`` and its
    gradient for every bias-head parameter."""
    mix = mixture_forward(head, B)
    n = B.shape[0]
    rows = np.arange(n)
    q = mix.mixture[rows, labels]
    qc = clip_prob(q)
    loss = -float(np.mean(np.log(qc)))
    d_mix = np.zeros_like(mix.mixture)
    d_mix[rows, labels] = np.where(q == qc, -1.0 / (n * qc), 0.0)
    grads, _ = mixture_backward(head, mix, d_mix)
    return loss, grads


def tta_finetune(model: BagModel, B_target, labels, config: AdaptConfig):
    """Return the model with an adapted bias head, plus the per-epoch loss
    (measured before each epoch's updates)."""
    B_target = np.asarray(B_target, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B_target.shape[0],):
        raise ContractError("need one pseudo-label per target row")
    head = model.head
    names = head.bias_head_names()
    params = head.named()
    state = AdamState(step_size=config.step_size)
    rng = make_rng(config.seed, 7)
    n = B_target.shape[0]
    trace = []
    for epoch in range(config.epochs):
        if config.batch_size is None or config.batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n)
            batches = [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
        epoch_loss = None
        for idx in batches:
            loss, grads = adaptation_loss(head.with_named(params), B_target[idx], labels[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"adaptation loss diverged at epoch {epoch}; trace so far {trace}")
            if epoch_loss is None:
                epoch_loss = loss
            params, state = optim_step(params, {k: grads[k] for k in names}, state)
        trace.append(epoch_loss)
    return model.with_head(head.with_named(params)), trace


def _resolve_mode(model: BagModel, calib, mode: str) -> tuple[str, float | None]:
    if mode == "none":
        return "none", None
    K = model.n_classes
    if mode == "binary_phi":
        if K != 2:
            raise ContractError("binary_phi correction needs a two-class model")
        if not isinstance(calib, BinaryCalib):
            log.warning("no binary calibration available; predicting without correction")
            return "none", None
        ok, margin = check_informative(calib)
        if not ok:
            log.warning("pseudo-labels barely informative (h0 + h1 - 1 = %.4f); skipping correction", margin)
            return "none", margin
        return "binary_phi", margin
    if mode == "multiclass_ls":
        if calib is None:
            log.warning("no confusion matrix available; predicting without correction")
            return "none", None
        return "multiclass_ls", None
    raise ContractError(f"unknown correction mode {mode!r}")


def final_predict(model: BagModel, calib, X, mode: str = "binary_phi") -> np.ndarray:
    """Class probabilities on ``X`` after (optional) bias-head correction."""
    used, _ = _resolve_mode(model, calib, mode)
    C, B = latent_blocks(model, X)
    head = model.head
    q = mixture_forward(head, B).mixture
    if used == "none":
        return clip_simplex(softmax(combined_logits(head, C, q), axis=1))
    inv = invariant_logits(head, C)
    if used == "binary_phi":
        corrected = phi(logit(clip_prob(q[:, 1])), calib)
        z = corrected + (inv[:, 1] - inv[:, 0]) - (head.prior_logits[1] - head.prior_logits[0])
        p1 = clip_prob(sigmoid(z))
        return np.column_stack([1.0 - p1, p1])
    eps = calib.as_confusion().eps if isinstance(calib, BinaryCalib) else calib.eps
    bias = np.stack([correct_multiclass(np.clip(row, 0.0, 1.0), eps) for row in q])
    return combine_multiclass(bias, softmax(inv, axis=1), softmax(head.prior_logits))


def adapt(model: BagModel, X_target, config: AdaptConfig, y_target=None):
    """Pseudo-label, fine-tune and report. Returns (adapted model, report)."""
    X_target = np.asarray(X_target, dtype=np.float64)
    labels = pseudo_label(model, X_target)
    _, B = latent_blocks(model, X_target)
    adapted, trace = tta_finetune(model, B, labels, config)
    used, margin = _resolve_mode(adapted, model.calib, config.correction_mode)
    agree = float(np.mean(np.argmax(mixture_forward(adapted.head, B).mixture, axis=1) == labels))
    pre = post = pl_acc = None
    if y_target is not None:
        y_target = np.asarray(y_target)
        pre = float(np.mean(np.argmax(final_predict(model, None, X_target, "none"), axis=1) == y_target))
        probs = final_predict(adapted, model.calib, X_target, config.correction_mode)
        post = float(np.mean(np.argmax(probs, axis=1) == y_target))
        pl_acc = float(np.mean(labels == y_target))
    report = AdaptReport(pre, post, pl_acc, agree, margin, used, trace)
    return adapted, report
