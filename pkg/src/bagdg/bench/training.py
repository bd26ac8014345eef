"""Source training for the decomposed model and the ERM baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..adapt import pseudo_label
from ..calibrate import estimate_binary, estimate_confusion
from ..disentangle import init_vae
from ..errors import ContractError, NumericalError
from ..model import BagModel, stage1_probs
from ..numkit import AdamState, Mlp, backward, forward, init_mlp, log_softmax, make_rng, optim_step
from ..objective import composite_loss
from ..predictor import init_head
from ..scm import LabeledDataset
from .config import TrainConfig, uses_experts

log = logging.getLogger(__name__)

# RNG stream ids, one per independent use of a seed
_SPLIT, _INIT, _NOISE, _BATCH, _ERM = 3, 10, 11, 12, 20


@dataclass
class TrainResult:
    model: object
    source_val_acc: float
    loss_trace: list[float] = field(default_factory=list)


def split_source(data: LabeledDataset, fractions, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    order = make_rng(seed, _SPLIT).permutation(data.n)
    n_train = int(round(fractions[0] * data.n))
    if n_train <= 0 or n_train >= data.n:
        raise ContractError(f"split of {data.n} rows leaves an empty part")
    return data.subset(np.sort(order[:n_train])), data.subset(np.sort(order[n_train:]))


def _batches(n: int, batch_size, rng):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def init_bag(cfg: TrainConfig, n_x: int, n_classes: int, n_domains: int, class_freq) -> BagModel:
    rng = make_rng(cfg.seed, _INIT)
    vae = init_vae(n_x, cfg.n_c, cfg.n_b, rng, decoder_hidden=cfg.decoder_hidden, beta=cfg.beta)
    head = init_head(cfg.n_c, cfg.n_b, n_classes, n_domains, rng, embed_dim=cfg.embed_dim, class_freq=class_freq)
    return BagModel(vae, head)


def fit_bag(cfg: TrainConfig, train: LabeledDataset, n_domains: int | None = None):
    """Optimise the composite objective; returns (model, per-epoch loss)."""
    if n_domains is None:
        n_domains = int(train.e.max()) + 1 if uses_experts(cfg.variant) else 1
    if n_domains < 1:
        raise ContractError("need at least one domain")
    K = train.n_classes
    freq = np.bincount(train.y, minlength=K) / train.n
    model = init_bag(cfg, train.n_x, K, n_domains, freq)
    weights = cfg.loss_weights()
    params = model.named()
    state = AdamState(step_size=cfg.step_size)
    noise_rng = make_rng(cfg.seed, _NOISE)
    batch_rng = make_rng(cfg.seed, _BATCH)
    trace = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(train.n, cfg.batch_size, batch_rng):
            noise = noise_rng.standard_normal((idx.size, model.vae.n_z))
            current = model.with_named(params)
            try:
                loss, _, grads = composite_loss(current, train.X[idx], train.y[idx], train.e[idx], noise, weights)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}: {exc}; loss trace {trace[-5:]}") from exc
            params, state = optim_step(params, grads, state)
            total += loss * idx.size
        trace.append(total / train.n)
    return model.with_named(params), trace


def calibrate_model(model: BagModel, holdout: LabeledDataset) -> BagModel:
    pseudo = pseudo_label(model, holdout.X)
    K = model.n_classes
    if K == 2:
        calib = estimate_binary(pseudo, holdout.y)
    else:
        calib = estimate_confusion(pseudo, holdout.y, K)
    return model.with_calib(calib)


def accuracy(probs: np.ndarray, y) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


def train_source(cfg: TrainConfig, source: LabeledDataset) -> TrainResult:
    """Train on the training split, calibrate on the held-out split."""
    if cfg.variant == "ERM":
        raise ContractError("use run_erm for the ERM baseline")
    if uses_experts(cfg.variant) and int(source.e.max()) + 1 < 2:
        raise ContractError("source data must span at least two environments")
    train, holdout = split_source(source, cfg.split_fractions, cfg.seed)
    model, trace = fit_bag(cfg, train)
    model = calibrate_model(model, holdout)
    return TrainResult(model, accuracy(stage1_probs(model, holdout.X), holdout.y), trace)


# -- ERM baseline ------------------------------------------------------------


def matched_hidden_width(n_params: int, n_x: int, n_classes: int) -> int:
    """Hidden width h making an n_x -> h -> K network about n_params big."""
    return max(1, int(round((n_params - n_classes) / (n_x + 1 + n_classes))))


def erm_probs(net: Mlp, X) -> np.ndarray:
    return np.exp(log_softmax(forward(net, X)[0], axis=1))


def fit_erm(cfg: TrainConfig, train: LabeledDataset, hidden: int):
    K = train.n_classes
    rng = make_rng(cfg.seed, _ERM)
    net = init_mlp([train.n_x, hidden, K], ["relu", "identity"], rng, gain=2.0)
    params = net.named("net")
    state = AdamState(step_size=cfg.step_size)
    batch_rng = make_rng(cfg.seed, _ERM, 1)
    trace = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(train.n, cfg.batch_size, batch_rng):
            cur = net.with_named(params, "net")
            out, cache = forward(cur, train.X[idx])
            ls = log_softmax(out, axis=1)
            rows = np.arange(idx.size)
            loss = -float(np.mean(ls[rows, train.y[idx]]))
            if not np.isfinite(loss):
                raise NumericalError(f"ERM training diverged at epoch {epoch}")
            d = np.exp(ls)
            d[rows, train.y[idx]] -= 1.0
            grads, _ = backward(cur, cache, d / idx.size)
            params, state = optim_step(params, grads.named("net"), state)
            total += loss * idx.size
        trace.append(total / train.n)
    return net.with_named(params, "net"), trace


def run_erm(cfg: TrainConfig, source: LabeledDataset, reference_params: int | None = None) -> TrainResult:
    """Plain network from x to y with about as many weights as the full model."""
    train, holdout = split_source(source, cfg.split_fractions, cfg.seed)
    K = train.n_classes
    if reference_params is None:
        n_domains = int(train.e.max()) + 1
        reference_params = init_bag(cfg, train.n_x, K, n_domains, None).n_params()
    hidden = matched_hidden_width(reference_params, train.n_x, K)
    net, trace = fit_erm(cfg, train, hidden)
    return TrainResult(net, accuracy(erm_probs(net, holdout.X), holdout.y), trace)
