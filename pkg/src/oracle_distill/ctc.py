"""Exact CTC machinery: collapse mapping, alignment enumeration, log-space
forward-backward loss, alignment posteriors, analytic gradients, greedy
decoding, and the frame-level distillation losses.

Two independent routes compute the same quantities: an exhaustive
enumeration over all label paths (the trust anchor, usable only for tiny
instances) and the dynamic-programming recursion over the blank-extended
target (the one that scales).  Tests hold them to 1e-9 agreement.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    EnumerationCapError,
    InfeasibleTargetError,
    ShapeError,
)
from .tensor import Tensor, as_tensor, custom_op
from . import tensor as tt

BLANK = 0

# probability floor inside logs for the KL distillation form
EPS_P = 1e-12

# refuse exhaustive enumeration beyond this many raw paths
ENUMERATION_CAP = 10 ** 6


@dataclass(frozen=True)
class Vocab:
    """Label alphabet of ``size`` entries where index 0 is the blank."""

    size: int
    blank_id: int = BLANK

    def __post_init__(self):
        if self.size < 2:
            raise ContractError("vocab needs the blank plus at least one label")
        if self.blank_id != BLANK:
            raise ContractError("blank is fixed at index 0")

    @property
    def labels(self) -> range:
        """Non-blank label ids."""
        return range(1, self.size)


def collapse(path) -> tuple[int, ...]:
    """Merge repeated labels, then drop blanks."""
    return tuple(k for k, _ in itertools.groupby(path) if k != BLANK)


def min_frames(y) -> int:
    """Shortest path length able to produce ``y`` (repeats force a blank)."""
    y = tuple(y)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _check_target(y, vocab: Vocab) -> tuple[int, ...]:
    y = tuple(int(t) for t in y)
    if len(y) < 1:
        raise ContractError("target must contain at least one token")
    if any(t == BLANK or not 0 < t < vocab.size for t in y):
        raise ContractError(f"target tokens must lie in 1..{vocab.size - 1}")
    return y


def enumerate_alignments(y, n_frames: int, vocab: Vocab, cap: int = ENUMERATION_CAP):
    """All length-``n_frames`` paths whose collapse equals ``y``.

    Exhaustive scan over every one of the ``vocab.size ** n_frames`` raw
    paths; this is the oracle, so it stays deliberately brute force.
    Returns an empty list when no path can produce ``y``.
    """
    y = _check_target(y, vocab)
    if vocab.size ** n_frames > cap:
        raise EnumerationCapError(
            f"{vocab.size}^{n_frames} paths exceed the cap of {cap}"
        )
    return [
        z
        for z in itertools.product(range(vocab.size), repeat=n_frames)
        if collapse(z) == y
    ]


def _as_logits(u) -> np.ndarray:
    data = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"frame logits must be T x K, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ContractError("frame logits must be finite")
    return data


def _log_softmax_rows(u: np.ndarray) -> np.ndarray:
    shifted = u - u.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax_rows(u: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax_rows(u))


def _logsumexp(values) -> float:
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in values))


def ctc_loss_bruteforce(u, y, vocab: Vocab, cap: int = ENUMERATION_CAP) -> float:
    """-log sum over enumerated paths of the product of frame posteriors."""
    data = _as_logits(u)
    y = _check_target(y, vocab)
    if data.shape[1] != vocab.size:
        raise ShapeError("logit width must equal vocab size")
    paths = enumerate_alignments(y, data.shape[0], vocab, cap=cap)
    if not paths:
        raise InfeasibleTargetError(
            f"no length-{data.shape[0]} path collapses to target of length {len(y)}"
        )
    lp = _log_softmax_rows(data)
    path_logps = [sum(lp[t, k] for t, k in enumerate(z)) for z in paths]
    return -_logsumexp(path_logps)


def _extended(y) -> np.ndarray:
    ext = [BLANK]
    for t in y:
        ext.append(t)
        ext.append(BLANK)
    return np.asarray(ext, dtype=np.int64)


def _forward_backward(lp: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Log-space recursion over the blank-extended target.

    Returns (negative log-likelihood, per-frame label posterior sigma).
    ``lp`` holds log frame posteriors, shape T x K.
    """
    n_frames, n_labels = lp.shape
    ext = _extended(y)
    S = ext.size
    NEG = -np.inf

    alpha = np.full((n_frames, S), NEG)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, n_frames):
        for s in range(S):
            terms = [alpha[t - 1, s]]
            if s >= 1:
                terms.append(alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2]:
                terms.append(alpha[t - 1, s - 2])
            prev = _logsumexp(terms)
            alpha[t, s] = prev + lp[t, ext[s]] if prev != NEG else NEG

    tail = [alpha[n_frames - 1, S - 1]]
    if S > 1:
        tail.append(alpha[n_frames - 1, S - 2])
    loglik = _logsumexp(tail)
    if loglik == NEG:
        raise InfeasibleTargetError("target cannot be aligned to the given frames")

    beta = np.full((n_frames, S), NEG)
    beta[n_frames - 1, S - 1] = lp[n_frames - 1, ext[S - 1]]
    if S > 1:
        beta[n_frames - 1, S - 2] = lp[n_frames - 1, ext[S - 2]]
    for t in range(n_frames - 2, -1, -1):
        for s in range(S):
            terms = [beta[t + 1, s]]
            if s + 1 < S:
                terms.append(beta[t + 1, s + 1])
            if s + 2 < S and ext[s + 2] != BLANK and ext[s + 2] != ext[s]:
                terms.append(beta[t + 1, s + 2])
            nxt = _logsumexp(terms)
            beta[t, s] = nxt + lp[t, ext[s]] if nxt != NEG else NEG

    # state occupancy: alpha and beta both include lp at (t, s), divide once
    with np.errstate(invalid="ignore"):
        log_gamma = alpha + beta - lp[:, ext] - loglik
    log_gamma[np.isnan(log_gamma)] = NEG
    gamma = np.exp(log_gamma)

    sigma = np.zeros((n_frames, n_labels))
    for s, k in enumerate(ext):
        sigma[:, k] += gamma[:, s]
    sigma /= sigma.sum(axis=1, keepdims=True)
    return -loglik, sigma


def _dp_inputs(u, y, vocab: Vocab):
    data = _as_logits(u)
    y = _check_target(y, vocab)
    if data.shape[1] != vocab.size:
        raise ShapeError("logit width must equal vocab size")
    if data.shape[0] < min_frames(y):
        raise InfeasibleTargetError(
            f"{data.shape[0]} frames cannot carry a target needing {min_frames(y)}"
        )
    return data, y


def ctc_loss_dp(u, y, vocab: Vocab) -> Tensor:
    """CTC negative log-likelihood via forward recursion.

    Differentiable: the backward rule is the analytic gradient
    softmax(u) - sigma, where sigma is the alignment posterior.
    """
    data, y = _dp_inputs(u, y, vocab)
    loss, sigma = _forward_backward(_log_softmax_rows(data), y)
    u_t = as_tensor(u)
    grad = _softmax_rows(data) - sigma

    def bwd(g):
        return (float(g) * grad,)

    return custom_op(loss, (u_t,), bwd)


def ctc_posterior(u, y, vocab: Vocab) -> np.ndarray:
    """Alignment posterior sigma[t, k] = P(path label k at frame t | target)."""
    data, y = _dp_inputs(u, y, vocab)
    _, sigma = _forward_backward(_log_softmax_rows(data), y)
    return sigma


def ctc_grad(u, y, vocab: Vocab) -> np.ndarray:
    """Analytic d(loss)/d(logits): frame posterior minus alignment posterior."""
    data, y = _dp_inputs(u, y, vocab)
    _, sigma = _forward_backward(_log_softmax_rows(data), y)
    return _softmax_rows(data) - sigma


def posterior_from_enumeration(u, y, vocab: Vocab, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Path-weighted label frequencies; the oracle for ctc_posterior."""
    data = _as_logits(u)
    y = _check_target(y, vocab)
    paths = enumerate_alignments(y, data.shape[0], vocab, cap=cap)
    if not paths:
        raise InfeasibleTargetError("no feasible path")
    lp = _log_softmax_rows(data)
    logw = np.array([sum(lp[t, k] for t, k in enumerate(z)) for z in paths])
    w = np.exp(logw - _logsumexp(list(logw)))
    sigma = np.zeros_like(data)
    for weight, z in zip(w, paths):
        for t, k in enumerate(z):
            sigma[t, k] += weight
    sigma /= sigma.sum(axis=1, keepdims=True)
    return sigma


def _smoothed_rows(p: Tensor, n_labels: int) -> Tensor:
    # floor entries at EPS_P, renormalized so rows stay exact distributions
    return tt.scale(tt.add(p, EPS_P), 1.0 / (1.0 + n_labels * EPS_P))


def kl_rows(teacher: Tensor, student: Tensor) -> Tensor:
    """Mean over rows of KL(teacher || student) on floored distributions."""
    teacher, student = as_tensor(teacher), as_tensor(student)
    if teacher.shape != student.shape:
        raise ShapeError(f"kl rows {teacher.shape} vs {student.shape}")
    n_rows, n_labels = teacher.shape
    t = _smoothed_rows(teacher, n_labels)
    s = _smoothed_rows(student, n_labels)
    per_entry = tt.mul(t, tt.sub(tt.log(t), tt.log(s)))
    return tt.scale(tt.sum_all(per_entry), 1.0 / n_rows)


def kd_loss_ctc(student_posterior: Tensor, teacher_posterior: Tensor, form: str = "l2") -> Tensor:
    """Frame-level posterior transfer loss between student and teacher.

    ``l2``: mean over frames of the squared Euclidean distance between
    posterior rows.  ``kl``: mean over frames of KL(teacher || student).
    Gradients flow into both arguments; detach the teacher posterior
    before calling to cut its side off.
    """
    s, t = as_tensor(student_posterior), as_tensor(teacher_posterior)
    if s.shape != t.shape:
        raise ShapeError(f"kd posteriors {s.shape} vs {t.shape}")
    if s.data.ndim != 2:
        raise ShapeError("kd posteriors must be T x K")
    if form == "l2":
        return tt.scale(tt.sum_sq(tt.sub(s, t)), 1.0 / s.shape[0])
    if form == "kl":
        return kl_rows(t, s)
    raise ContractError(f"unknown kd form {form!r}")


def greedy_decode(u) -> tuple[int, ...]:
    """Per-frame argmax then collapse; ties go to the lowest label index."""
    data = _as_logits(u)
    return collapse(np.argmax(data, axis=1))
