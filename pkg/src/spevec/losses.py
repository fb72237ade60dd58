"""Classification objectives and deep length normalization.

Every loss returns a :class:`LossOutput` carrying the scalar value, the
gradient w.r.t. the embeddings it was given, and gradients for its own
parameters keyed by name.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.polynomial import chebyshev

from .numerics import Module


class DegenerateBatchError(ValueError):
    pass


class LossOutput(NamedTuple):
    value: float
    d_embeddings: np.ndarray
    d_params: dict


class ClassifierHead(Module):
    """Last fully connected layer: weight (n_speakers, dim), bias (n_speakers)."""

    def __init__(self, n_speakers: int, dim: int, rng: np.random.Generator | None = None,
                 unit_rows: bool = False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(dim)
        self.add_param("weight", rng.uniform(-bound, bound, (n_speakers, dim)))
        self.add_param("bias", np.zeros(n_speakers))
        self.unit_rows = unit_rows
        if unit_rows:
            self.renormalize()

    def renormalize(self) -> None:
        """Project weight rows back onto the unit sphere and zero the bias."""
        w = self.params["weight"]
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.params["bias"][...] = 0.0

    def accumulate(self, d_params: dict) -> None:
        for key in ("weight", "bias"):
            if key in d_params:
                self.grads[key] += d_params[key]


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    value = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(value), dlogits / n


def softmax_loss(embeddings: np.ndarray, labels, head: ClassifierHead) -> LossOutput:
    """Mean cross-entropy of softmax(W f + b)."""
    W, b = head.params["weight"], head.params["bias"]
    labels = _check_labels(labels, W.shape[0])
    value, dz = _cross_entropy(embeddings @ W.T + b, labels)
    return LossOutput(value, dz @ W, {"weight": dz.T @ embeddings, "bias": dz.sum(0)})


# ---------------------------------------------------------------------------
# A-softmax


def asoftmax_psi(theta, m: int = 4):
    """Monotone margin function (-1)^k cos(m theta) - 2k on [k pi/m, (k+1) pi/m]."""
    if m < 1:
        raise ValueError("margin must be >= 1")
    th = np.asarray(theta, dtype=np.float64)
    if np.any(th < 0) or np.any(th > math.pi):
        raise ValueError("theta must lie in [0, pi]")
    k = np.minimum(np.floor(m * th / math.pi), m - 1)
    out = (-1.0) ** k * np.cos(m * th) - 2.0 * k
    return float(out) if out.ndim == 0 else out


def psi_of_cos(c: np.ndarray, m: int):
    """psi and d psi / d cos(theta), via the Chebyshev form of cos(m theta)."""
    c = np.clip(c, -1.0, 1.0)
    k = np.minimum(np.floor(m * np.arccos(c) / math.pi), m - 1)
    sign = (-1.0) ** k
    coef = np.zeros(m + 1)
    coef[m] = 1.0
    psi = sign * chebyshev.chebval(c, coef) - 2.0 * k
    dpsi = sign * chebyshev.chebval(c, chebyshev.chebder(coef))
    return psi, dpsi


@dataclass
class AnnealSchedule:
    """Blend weight beta = max(beta_min, beta0 / (1 + gamma * iteration))."""

    beta0: float = 1000.0
    beta_min: float = 5.0
    gamma: float = 0.1

    def beta(self, iteration: int) -> float:
        return max(self.beta_min, self.beta0 / (1.0 + self.gamma * iteration))

    @classmethod
    def constant(cls, beta: float) -> "AnnealSchedule":
        return cls(beta0=beta, beta_min=beta, gamma=0.0)


def asoftmax_loss(embeddings: np.ndarray, labels, head: ClassifierHead, margin: int = 4,
                  beta: float = 0.0) -> LossOutput:
    """Angular-margin softmax.

    Rows of the head weight are normalized inside the loss (the trainer also
    renormalizes them after each step), the bias is ignored. The target logit is
    ||f|| * (psi(theta) + beta cos(theta)) / (1 + beta); other logits are
    ||f|| cos(theta_j).
    """
    f = embeddings
    W = head.params["weight"]
    labels = _check_labels(labels, W.shape[0])
    fn = np.linalg.norm(f, axis=1)
    if np.any(fn == 0):
        raise ValueError("zero-norm embedding: angle undefined")
    wn = np.linalg.norm(W, axis=1)
    what = W / wn[:, None]
    rows = np.arange(f.shape[0])

    logits = f @ what.T
    c = logits[rows, labels] / fn
    psi, dpsi = psi_of_cos(c, margin)
    psi_eff = (psi + beta * c) / (1.0 + beta)
    dpsi_eff = (dpsi + beta) / (1.0 + beta)
    logits[rows, labels] = fn * psi_eff
    value, dz = _cross_entropy(logits, labels)

    g_t = dz[rows, labels].copy()
    dz[rows, labels] = 0.0
    fhat = f / fn[:, None]
    wy = what[labels]
    df = dz @ what + g_t[:, None] * (psi_eff[:, None] * fhat
                                     + dpsi_eff[:, None] * (wy - c[:, None] * fhat))
    dwhat = dz.T @ f
    np.add.at(dwhat, labels, (g_t * dpsi_eff)[:, None] * f)
    dW = (dwhat - what * (what * dwhat).sum(1, keepdims=True)) / wn[:, None]
    return LossOutput(value, df, {"weight": dW})


# ---------------------------------------------------------------------------
# length normalization


def l2_constrain(f: np.ndarray, alpha: float):
    """Scale each embedding onto the sphere of radius ``alpha``.

    Returns the constrained embeddings and a backward closure mapping the
    upstream gradient to (d_f, d_alpha).
    """
    n = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot constrain a zero vector")
    u = f / n
    out = alpha * u

    def backward(dy):
        d_alpha = float((dy * u).sum())
        d_f = alpha * (dy - u * (dy * u).sum(-1, keepdims=True)) / n
        return d_f, d_alpha

    return out, backward


class L2Constraint(Module):
    """Scale layer radius alpha, fixed or learned. A learned radius starts at the
    first batch's mean norm."""

    def __init__(self, alpha: float = 1.0, learned: bool = False):
        super().__init__()
        self.add_param("alpha", np.array([float(alpha)]))
        self.learned = learned
        self.initialized = not learned

    @property
    def alpha(self) -> float:
        return float(self.params["alpha"][0])

    @alpha.setter
    def alpha(self, value: float) -> None:
        self.params["alpha"][0] = value


class RingState(Module):
    """Learnable target norm R and fixed weight lambda for the ring loss."""

    def __init__(self, R: float = 1.0, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        self.add_param("R", np.array([float(R)]))
        self.lam = lam
        self.initialized = False

    @property
    def R(self) -> float:
        return float(self.params["R"][0])

    @R.setter
    def R(self, value: float) -> None:
        self.params["R"][0] = value


def init_ring_R(first_batch: np.ndarray) -> float:
    """Initial target norm: mean L2 norm of the first training batch."""
    norms = np.linalg.norm(first_batch, axis=-1)
    mean = float(norms.mean()) if norms.size else 0.0
    if mean <= 0:
        raise DegenerateBatchError("first batch has zero mean norm")
    return mean


def ring_loss(embeddings: np.ndarray, R: float, mean_norm: float | None = None) -> LossOutput:
    """Mean over the batch of ((||f_i|| - R) / E||f||)^2.

    The batch mean norm in the denominator is treated as a constant; pass
    ``mean_norm`` to freeze it explicitly (as finite-difference checks must).
    """
    norms = np.linalg.norm(embeddings, axis=-1)
    E = float(norms.mean()) if mean_norm is None else float(mean_norm)
    if E <= 0:
        raise DegenerateBatchError("mean embedding norm is zero")
    m = norms.shape[0]
    resid = norms - R
    value = float((resid ** 2).sum() / (m * E * E))
    dn = 2.0 * resid / (m * E * E)
    safe = np.where(norms > 0, norms, 1.0)
    d_emb = (dn / safe)[:, None] * embeddings
    return LossOutput(value, d_emb, {"R": np.array([-dn.sum()])})


def total_loss(primary: LossOutput, ring: LossOutput | None, lam: float) -> LossOutput:
    """Combined objective primary + lambda * ring; gradients superpose."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if ring is None or lam == 0:
        return primary
    params = dict(primary.d_params)
    for key, g in ring.d_params.items():
        params[key] = params[key] + lam * g if key in params else lam * g
    return LossOutput(primary.value + lam * ring.value,
                      primary.d_embeddings + lam * ring.d_embeddings, params)
