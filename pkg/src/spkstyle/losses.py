"""Training objectives: contrastive, KL, reconstruction, classification.

Each loss comes in two flavors: a plain value (the public contract) and a
``*_grad`` variant returning ``(value, gradients)`` for the hand-rolled
backward pass.  All gradients are exact analytic derivatives; the test suite
checks every one against central finite differences.

Softmax and log-softmax are computed with max subtraction.  Cross-entropy
consumes logits internally; probabilities appear only at the public
interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class LossWeights:
    """Coefficients balancing the composite objective."""

    lambda_s: float = 1.0
    lambda_z: float = 1.0
    beta: float = 0.01


@dataclass
class LossBreakdown:
    """The individual objective terms and their weighted sum."""

    rec: float
    cpc_s: float
    kld: float
    adv_cpc: float
    ce_spk: float
    adv_ce_sty: float
    total: float

    FIELDS = ("rec", "cpc_s", "kld", "adv_cpc", "ce_spk", "adv_ce_sty", "total")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_dict().values())


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# contrastive predictive coding
# ---------------------------------------------------------------------------


def _cpc_scores(emb: np.ndarray, lag: int):
    """Dot-product score tensor over anchors and batch candidates.

    ``emb`` is (B, T, D) with a common T across the batch.  For each anchor
    time t the candidate set is the embedding at t+lag from *every* utterance
    in the batch, the true future included.
    """
    b, t, _ = emb.shape
    if b < 2:
        raise ParameterError(f"contrastive loss needs at least 2 utterances, got {b}")
    if t <= lag:
        raise ParameterError(f"sequence length {t} leaves no anchors for lag {lag}")
    anchors = emb[:, : t - lag, :]  # (B, Ta, D), index u
    futures = emb[:, lag:, :]  # (B, Ta, D), index v
    # scores[ta, u, v] = <futures[v, ta], anchors[u, ta]>
    scores = np.einsum("vtd,utd->tuv", futures, anchors)
    return scores, anchors, futures


def cpc_loss(emb: np.ndarray, lag: int) -> float:
    """InfoNCE over in-batch negatives at a fixed time lag.

    Mean over anchors of the negative log probability that the true future
    embedding wins the softmax over the batch.  Equals ``ln B`` when every
    candidate scores identically.
    """
    scores, _, _ = _cpc_scores(np.asarray(emb), lag)
    logp = log_softmax(scores, axis=2)
    b = emb.shape[0]
    idx = np.arange(b)
    return float(-logp[:, idx, idx].mean())


def cpc_loss_grad(emb: np.ndarray, lag: int):
    """Value and gradient of :func:`cpc_loss` w.r.t. the embeddings."""
    emb = np.asarray(emb)
    scores, anchors, futures = _cpc_scores(emb, lag)
    b, t, _ = emb.shape
    ta = t - lag
    p = softmax(scores, axis=2)
    idx = np.arange(b)
    value = float(-np.log(p[:, idx, idx]).mean())
    g = p.copy()
    g[:, idx, idx] -= 1.0
    g /= b * ta
    gemb = np.zeros_like(emb)
    gemb[:, : t - lag, :] += np.einsum("tuv,vtd->utd", g, futures)
    gemb[:, lag:, :] += np.einsum("tuv,utd->vtd", g, anchors)
    return value, gemb


# ---------------------------------------------------------------------------
# KL divergence of the content posterior against a unit Gaussian
# ---------------------------------------------------------------------------


def kld_loss(mu: np.ndarray, log_sigma: np.ndarray) -> float:
    """Frame-averaged KL(N(mu, diag sigma^2) || N(0, I)).

    Per frame: 0.5 * sum_j (mu_j^2 + sigma_j^2 - 1 - ln sigma_j^2).
    Leading axes (batch, time) are averaged; the feature axis is summed.
    """
    mu = np.asarray(mu)
    log_sigma = np.asarray(log_sigma)
    var = np.exp(2.0 * log_sigma)
    per_frame = 0.5 * (mu * mu + var - 1.0 - 2.0 * log_sigma).sum(axis=-1)
    return float(per_frame.mean())


def kld_loss_grad(mu: np.ndarray, log_sigma: np.ndarray):
    mu = np.asarray(mu)
    log_sigma = np.asarray(log_sigma)
    n = mu.size // mu.shape[-1]
    var = np.exp(2.0 * log_sigma)
    per_frame = 0.5 * (mu * mu + var - 1.0 - 2.0 * log_sigma).sum(axis=-1)
    value = float(per_frame.mean())
    gmu = mu / n
    gls = (var - 1.0) / n
    return value, gmu, gls


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def xsigmoid_loss(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Sign-symmetric |d| * (2*sigmoid(d) - 1) regression loss, d = x_hat - x.

    The error and the sigmoid factor always share a sign, so each element
    equals d * (2*sigmoid(d) - 1) >= 0.  Elements are summed over the feature
    axis (the l1 norm) and averaged over every remaining axis.  Behaves like
    a smoothed L1: quadratic near zero, |d| for large errors.
    """
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    if x_hat.shape != x.shape:
        raise ParameterError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    d = x_hat - x
    elems = d * (2.0 * sigmoid(d) - 1.0)
    frames = elems.sum(axis=-1)
    return float(frames.mean())


def xsigmoid_loss_grad(x_hat: np.ndarray, x: np.ndarray):
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    if x_hat.shape != x.shape:
        raise ParameterError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    d = x_hat - x
    s = sigmoid(d)
    tanh_half = 2.0 * s - 1.0
    value = float((d * tanh_half).sum(axis=-1).mean())
    n = d.size // d.shape[-1]
    gd = (tanh_half + d * 2.0 * s * (1.0 - s)) / n
    return value, gd


# ---------------------------------------------------------------------------
# frame-wise speaker classification
# ---------------------------------------------------------------------------


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Frame-averaged negative log probability of the true class.

    ``probs`` has classes on the last axis and may carry (T, K), (B, K) or
    (B, T, K) shapes; ``labels`` is one class index per utterance (or a
    scalar for a single utterance).
    """
    probs = np.asarray(probs)
    labels = np.atleast_1d(np.asarray(labels))
    k = probs.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ParameterError(f"label out of range for {k} classes")
    if probs.ndim == 2:
        picked = probs[:, labels] if labels.size == 1 else probs[np.arange(len(labels)), labels]
    else:
        picked = probs[np.arange(probs.shape[0])[:, None], np.arange(probs.shape[1])[None, :], labels[:, None]]
    return float(-np.log(picked).mean())


def cross_entropy_logits_grad(logits: np.ndarray, labels: np.ndarray):
    """Value and logits-gradient of frame-wise cross entropy.

    ``logits`` is (B, T, K); ``labels`` is (B,), one speaker per utterance
    broadcast over frames.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, t, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ParameterError(f"label out of range for {k} classes")
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(b)[:, None]
    cols = np.arange(t)[None, :]
    value = float(-logp[rows, cols, labels[:, None]].mean())
    g = np.exp(logp)
    g[rows, cols, labels[:, None]] -= 1.0
    g /= b * t
    return value, g


# ---------------------------------------------------------------------------
# gradient reversal
# ---------------------------------------------------------------------------


def gradient_reversal(x):
    """Identity in the forward direction; see :func:`gradient_reversal_vjp`."""
    return x


def gradient_reversal_vjp(g):
    """Backward rule of the reversal: the upstream gradient, negated."""
    return -g


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------


def total_loss(rec, cpc_s, kld, adv_cpc, ce_spk, adv_ce_sty, weights: LossWeights) -> LossBreakdown:
    """Assemble the weighted training objective from its parts.

    The adversarial terms enter with positive sign; the reversal layer in the
    forward graph is what turns them into ascent directions for the encoders.
    """
    total = (
        rec
        + weights.lambda_s * cpc_s
        + weights.beta * kld
        + weights.lambda_z * adv_cpc
        + ce_spk
        + adv_ce_sty
    )
    return LossBreakdown(
        rec=float(rec),
        cpc_s=float(cpc_s),
        kld=float(kld),
        adv_cpc=float(adv_cpc),
        ce_spk=float(ce_spk),
        adv_ce_sty=float(adv_ce_sty),
        total=float(total),
    )
