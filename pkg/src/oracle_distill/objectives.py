"""The combined training objective and its optimizer.

Three terms are summed every step: the student's own sequence loss on the
source, the teacher's sequence loss given source plus (masked) target, and
a distillation bridge between the two output distributions, weighted by
``alpha``.  The teacher is recomputed from the live parameters at every
step; nothing is cached across steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tt
from .ctc import ctc_loss_dp, kd_loss_ctc, kl_rows
from .errors import ContractError, TrainingAbort
from .models import MASK, AedModel, CtcModel
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Every knob of a training run.

    ``use_teacher=False`` drops the teacher and distillation terms
    entirely, which is the plain baseline trained in the same harness.
    """

    task: str = "ctc"
    alpha: float = 2.0
    lambda_mask: float = 0.5
    kd_form: str = "l2"
    stop_teacher_grad: bool = False
    temperature: float = 1.0
    use_teacher: bool = True
    seed: int = 0
    steps: int = 400
    batch_size: int = 8
    lr: float = 3e-3
    warmup_steps: int = 40
    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    fusion_layers: int = 1

    def __post_init__(self):
        if self.task not in ("ctc", "aed"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.alpha < 0:
            raise ContractError("alpha must be nonnegative")
        if not 0.0 <= self.lambda_mask <= 1.0:
            raise ContractError("lambda_mask must lie in [0, 1]")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.kd_form not in ("l2", "kl"):
            raise ContractError(f"unknown kd_form {self.kd_form!r}")
        for name in ("steps", "batch_size", "d_model", "heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass(frozen=True)
class MaskedTarget:
    """A target with some tokens replaced by MASK."""

    tokens: tuple[int, ...]
    mask_positions: tuple[int, ...]


def mask_target(y, lambda_mask: float, rng: np.random.Generator) -> MaskedTarget:
    """Independently replace each token by MASK with probability lambda."""
    if not 0.0 <= lambda_mask <= 1.0:
        raise ContractError("lambda_mask must lie in [0, 1]")
    y = tuple(int(t) for t in y)
    draws = rng.random(len(y))
    masked = tuple(MASK if d < lambda_mask else t for t, d in zip(y, draws))
    positions = tuple(i for i, t in enumerate(masked) if t == MASK)
    return MaskedTarget(masked, positions)


@dataclass
class LossBreakdown:
    l_org: float
    l_em: float
    l_kd: float
    l_total: float


@dataclass
class StepOutputs:
    """Everything a training step produced, for logging and diagnostics."""

    total: Tensor
    breakdown: LossBreakdown
    student_logits: list[np.ndarray] = field(default_factory=list)
    teacher_logits: list = field(default_factory=list)
    masked_targets: list = field(default_factory=list)


def _xy(item):
    if hasattr(item, "x"):
        return item.x, item.y
    x, y = item
    return x, y


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax probability of the target id."""
    picked = tt.pick(tt.log_softmax(logits, axis=-1), list(targets))
    return tt.scale(tt.sum_all(picked), -1.0 / len(list(targets)))


def _mean_of(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = tt.add(acc, t)
    return tt.scale(acc, 1.0 / len(terms))


def _student_item_loss(model, x, y) -> Tensor:
    if isinstance(model, CtcModel):
        return ctc_loss_dp(model.student_logits(x), y, model.vocab)
    logits = model.student_logits(x, y)
    return cross_entropy(logits, list(y) + [model.eos])


def loss_org(model, batch) -> Tensor:
    """Mean original sequence loss over the batch, student parameters only."""
    return _mean_of([_student_item_loss(model, *_xy(item)) for item in batch])


def loss_em(model, batch, config: TrainConfig, rng: np.random.Generator) -> Tensor:
    """Mean teacher-mode sequence loss given source and (masked) target."""
    terms = []
    for item in batch:
        x, y = _xy(item)
        if isinstance(model, CtcModel):
            u_t = model.teacher_logits(model.encode(x), y)
            terms.append(ctc_loss_dp(u_t, y, model.vocab))
        else:
            masked = mask_target(y, config.lambda_mask, rng)
            logits = model.teacher_logits(model.encode(x), y, masked.tokens)
            terms.append(cross_entropy(logits, list(y) + [model.eos]))
    return _mean_of(terms)


def _kd_item_loss(model, config, u_student: Tensor, u_teacher: Tensor) -> Tensor:
    if isinstance(model, CtcModel):
        p_s = tt.softmax(u_student, axis=-1)
        p_t = tt.softmax(u_teacher, axis=-1)
        if config.stop_teacher_grad:
            p_t = p_t.detach()
        return kd_loss_ctc(p_s, p_t, config.kd_form)
    inv_t = 1.0 / config.temperature
    p_s = tt.softmax(tt.scale(u_student, inv_t), axis=-1)
    p_t = tt.softmax(tt.scale(u_teacher, inv_t), axis=-1)
    if config.stop_teacher_grad:
        p_t = p_t.detach()
    return kl_rows(p_t, p_s)


def loss_kd(model, batch, config: TrainConfig, rng: np.random.Generator) -> Tensor:
    """Mean distillation loss; gradients reach both student and teacher
    unless ``stop_teacher_grad`` is set."""
    terms = []
    for item in batch:
        x, y = _xy(item)
        if isinstance(model, CtcModel):
            hidden = model.encode(x)
            u_s = model._head("seq.out", hidden)
            u_t = model.teacher_logits(hidden, y)
        else:
            memory = model.encode(x)
            u_s = model.decode_logits(memory, [model.bos] + list(y))
            masked = mask_target(y, config.lambda_mask, rng)
            u_t = model.teacher_logits(memory, y, masked.tokens)
        terms.append(_kd_item_loss(model, config, u_s, u_t))
    return _mean_of(terms)


def loss_total(model, batch, config: TrainConfig, rng: np.random.Generator) -> StepOutputs:
    """All three loss terms from one shared encoder pass per example.

    The breakdown satisfies l_total = l_org + l_em + alpha * l_kd exactly,
    because the total is assembled from the same scalars.
    """
    batch = list(batch)
    if not batch:
        raise ContractError("empty batch")
    org_terms: list[Tensor] = []
    em_terms: list[Tensor] = []
    kd_terms: list[Tensor] = []
    outputs = StepOutputs(total=None, breakdown=None)  # filled below

    for item in batch:
        x, y = _xy(item)
        y = tuple(int(t) for t in y)
        u_t = None
        masked = None
        if isinstance(model, CtcModel):
            hidden = model.encode(x)
            u_s = model._head("seq.out", hidden)
            org_terms.append(ctc_loss_dp(u_s, y, model.vocab))
            if config.use_teacher:
                u_t = model.teacher_logits(hidden, y)
                em_terms.append(ctc_loss_dp(u_t, y, model.vocab))
                kd_terms.append(_kd_item_loss(model, config, u_s, u_t))
        else:
            memory = model.encode(x)
            u_s = model.decode_logits(memory, [model.bos] + list(y))
            org_terms.append(cross_entropy(u_s, list(y) + [model.eos]))
            if config.use_teacher:
                masked = mask_target(y, config.lambda_mask, rng)
                u_t = model.teacher_logits(memory, y, masked.tokens)
                em_terms.append(cross_entropy(u_t, list(y) + [model.eos]))
                kd_terms.append(_kd_item_loss(model, config, u_s, u_t))
        outputs.student_logits.append(u_s.data.copy())
        outputs.teacher_logits.append(u_t.data.copy() if u_t is not None else None)
        outputs.masked_targets.append(masked)

    l_org = _mean_of(org_terms)
    if config.use_teacher:
        l_em = _mean_of(em_terms)
        l_kd = _mean_of(kd_terms)
        total = tt.add(tt.add(l_org, l_em), tt.scale(l_kd, config.alpha))
        breakdown = LossBreakdown(l_org.item(), l_em.item(), l_kd.item(), total.item())
    else:
        total = l_org
        breakdown = LossBreakdown(l_org.item(), 0.0, 0.0, total.item())
    outputs.total = total
    outputs.breakdown = breakdown
    return outputs


class Adam:
    """Adaptive-moment optimizer with linear warmup then a constant rate."""

    def __init__(self, params, lr: float, warmup_steps: int = 0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def rate(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, self.t / self.warmup_steps)
        return self.lr

    def step(self) -> None:
        self.t += 1
        lr_t = self.rate()
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingAbort("non-finite gradient; aborting the run")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= lr_t * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def train_config_to_dict(cfg: TrainConfig) -> dict[str, str]:
    return {f.name: str(getattr(cfg, f.name)) for f in fields(TrainConfig)}
