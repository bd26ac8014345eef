"""Pseudo-label reliability statistics and the closed-form corrections that
undo pseudo-label noise in a bias-head estimate.

Binary case: a head trained on pseudo-labels estimates
``p_hat = h1 * p + (1 - h0) * (1 - p)`` instead of ``p``; ``correct_binary``
inverts that map. Multi-class case: ``E[onehot(y_hat) | b] = eps @ p`` and
``correct_multiclass`` recovers ``p`` by least squares on the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ContractError, ConvergenceError
from .numkit import EPS_CLIP, sigmoid

MARGIN = 0.05
# corrected logits are held inside +-PHI_LIMIT so phi stays finite and monotone
PHI_LIMIT = 40.0


@dataclass(frozen=True)
class BinaryCalib:
    h0: float
    h1: float
    counts: np.ndarray  # counts[predicted, true]

    def __post_init__(self):
        if not (0.0 <= self.h0 <= 1.0 and 0.0 <= self.h1 <= 1.0):
            raise ContractError(f"h0={self.h0}, h1={self.h1} must lie in [0, 1]")
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64).reshape(2, 2))

    @property
    def margin(self) -> float:
        return self.h0 + self.h1 - 1.0

    def as_confusion(self) -> "ConfusionMatrix":
        eps = np.array([[self.h0, 1.0 - self.h1], [1.0 - self.h0, self.h1]])
        return ConfusionMatrix(eps, self.counts)


@dataclass(frozen=True)
class ConfusionMatrix:
    eps: np.ndarray  # eps[i, j] = P(y_hat = i | y = j)
    counts: np.ndarray

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=np.float64)
        if eps.ndim != 2 or eps.shape[0] != eps.shape[1]:
            raise ContractError("confusion matrix must be square")
        if np.any(eps < 0) or np.any(eps > 1) or np.max(np.abs(eps.sum(axis=0) - 1.0)) > 1e-10:
            raise ContractError("confusion matrix columns must be distributions")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.eps.shape[0]


def _label_counts(pseudo, truth, K: int) -> np.ndarray:
    pseudo = np.asarray(pseudo, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pseudo.shape != truth.shape or pseudo.ndim != 1 or pseudo.size == 0:
        raise ContractError("pseudo and true labels must be equal-length non-empty sequences")
    for name, lab in (("pseudo", pseudo), ("true", truth)):
        if lab.min() < 0 or lab.max() >= K:
            raise ContractError(f"{name} labels must lie in 0..{K - 1}")
    missing = [k for k in range(K) if not np.any(truth == k)]
    if missing:
        raise ContractError(f"classes {missing} never occur in the true labels")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (pseudo, truth), 1)
    return counts


def estimate_binary(pseudo, truth) -> BinaryCalib:
    counts = _label_counts(pseudo, truth, 2)
    col = counts.sum(axis=0)
    h0 = (counts[0, 0] + 1) / (col[0] + 2)
    h1 = (counts[1, 1] + 1) / (col[1] + 2)
    return BinaryCalib(float(h0), float(h1), counts)


def check_informative(calib: BinaryCalib, margin: float = MARGIN) -> tuple[bool, float]:
    m = calib.h0 + calib.h1 - 1.0
    return bool(m > margin), float(m)


def _require_informative(calib: BinaryCalib) -> None:
    ok, m = check_informative(calib)
    if not ok:
        raise CalibrationError(
            f"h0 + h1 - 1 = {m:.4f} is not above {MARGIN}; pseudo-labels are too weak to correct, "
            "use correction mode 'none'"
        )


def correct_binary(p_hat, calib: BinaryCalib, clip: bool = True):
    _require_informative(calib)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    out = (p_hat + calib.h0 - 1.0) / (calib.h0 + calib.h1 - 1.0)
    if clip:
        out = np.clip(out, EPS_CLIP, 1.0 - EPS_CLIP)
    return out if out.ndim else float(out)


def phi(logit_val, calib: BinaryCalib):
    """Corrected bias logit, ``logit(correct_binary(sigmoid(l)))``.

    Computed as ``log(sigmoid(l) - (1 - h0)) - log(sigmoid(-l) - (1 - h1))``:
    both terms keep full relative precision for large ``|l|``, so perfect
    calibration gives back ``l`` exactly instead of saturating.
    """
    _require_informative(calib)
    l = np.asarray(logit_val, dtype=np.float64)
    num = sigmoid(l) - (1.0 - calib.h0)
    den = sigmoid(-l) - (1.0 - calib.h1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.maximum(num, 0.0)) - np.log(np.maximum(den, 0.0))
    out = np.clip(np.nan_to_num(out, nan=0.0, posinf=PHI_LIMIT, neginf=-PHI_LIMIT), -PHI_LIMIT, PHI_LIMIT)
    return out if out.ndim else float(out)


def estimate_confusion(pseudo, truth, K: int) -> ConfusionMatrix:
    counts = _label_counts(pseudo, truth, K)
    eps = (counts + 1.0) / (counts.sum(axis=0, keepdims=True) + K)
    return ConfusionMatrix(eps, counts)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {p >= 0, sum p = 1} (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def _polish_on_support(A, e_hat, p, floor: float = 1e-12):
    # equality-constrained least squares on the nonzero entries of p; kept
    # only if it stays feasible and does not raise the objective
    S = p > floor
    k = int(S.sum())
    As = A[:, S]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = As.T @ As
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.append(As.T @ e_hat, 1.0)
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    if np.any(sol < 0) or not np.all(np.isfinite(sol)):
        return p
    cand = np.zeros_like(p)
    cand[S] = sol
    cand /= cand.sum()
    if np.sum((A @ cand - e_hat) ** 2) <= np.sum((A @ p - e_hat) ** 2):
        return cand
    return p


def correct_multiclass(e_hat, eps, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """argmin over the simplex of ||eps p - e_hat||, by projected gradient.

    Accelerated (momentum with adaptive restart) steps of fixed length
    1 / ||eps||_2^2, the Lipschitz constant of the gradient of half the
    squared residual. Stops once the gradient-mapping norm at the current
    iterate drops below ``tol``; that norm is zero exactly at the optimum.
    The result is then refined by an exact solve on its support.
    """
    if isinstance(eps, ConfusionMatrix):
        eps = eps.eps
    A = np.asarray(eps, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if A.ndim != 2 or e_hat.shape != (A.shape[0],):
        raise ContractError("e_hat must have one entry per row of eps")
    if np.any(e_hat < 0) or np.any(e_hat > 1):
        raise ContractError("e_hat entries must lie in [0, 1]")
    K = A.shape[1]
    L = np.linalg.norm(A, 2) ** 2
    if L == 0:
        return np.full(K, 1.0 / K)
    AtA = A.T @ A
    Ate = A.T @ e_hat
    p = project_simplex(e_hat) if A.shape[0] == K else np.full(K, 1.0 / K)
    look, t = p, 1.0
    gm = np.inf
    for _ in range(max_iter):
        gm = L * np.linalg.norm(p - project_simplex(p - (AtA @ p - Ate) / L))
        if gm < tol:
            return _polish_on_support(A, e_hat, p)
        nxt = project_simplex(look - (AtA @ look - Ate) / L)
        if (look - nxt) @ (nxt - p) > 0:
            # momentum points uphill: drop it
            look, t = p, 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        look = nxt + ((t - 1.0) / t_next) * (nxt - p)
        p, t = nxt, t_next
    resid = float(np.linalg.norm(A @ p - e_hat))
    raise ConvergenceError(
        f"simplex least squares stopped after {max_iter} iterations with gradient-mapping norm {gm:.3e} "
        f"(residual {resid:.3e})",
        residual=resid,
        iterations=max_iter,
    )
