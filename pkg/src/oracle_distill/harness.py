"""Training orchestration, evaluation, and the verification suites.

A run owns its output directory exclusively (lock file) and leaves behind
metrics.csv, a loss-curve SVG, periodic and final checkpoints, and a
timing.csv.  Everything in metrics.csv is deterministic for a fixed
config and seed; wall-clock timings live in their own file so reruns stay
byte-identical.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_mapping, config_to_mapping
from .ctc import Vocab, ctc_grad, ctc_loss_bruteforce, ctc_loss_dp, kd_loss_ctc, min_frames
from .ctc import posterior_from_enumeration, ctc_posterior
from .diagnostics import BoundReport, check_lower_bound, bound_report_from_logits, repetition_ratio
from .errors import ConfigError, ContractError, TrainingAbort
from .metrics import exact_match_rate, token_error_rate
from .models import (
    AedModel,
    CtcModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import Adam, TrainConfig, loss_total, mask_target
from .tasks import batch_iter, gen_aed_dataset, gen_ctc_dataset, split_examples
from .tensor import Tensor, backward, grad_check
from . import tensor as tt

METRICS_HEADER = "step,l_org,l_em,l_kd,l_total,ter_student,ter_teacher,rep_ratio"

OUT_ROOT_ENV = "ORACLE_DISTILL_OUT"


@dataclass
class MetricsRecord:
    step: int
    l_org: float
    l_em: float
    l_kd: float
    l_total: float
    ter_student: float | None = None
    ter_teacher: float | None = None
    rep_ratio: float | None = None

    def csv_row(self) -> str:
        def opt(v):
            return "" if v is None else repr(float(v))

        return (
            f"{self.step},{self.l_org!r},{self.l_em!r},{self.l_kd!r},{self.l_total!r},"
            f"{opt(self.ter_student)},{opt(self.ter_teacher)},{opt(self.rep_ratio)}"
        )


def parse_metrics_csv(path) -> list[MetricsRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ContractError(f"unexpected metrics header in {path}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(
            MetricsRecord(
                step=int(parts[0]),
                l_org=float(parts[1]),
                l_em=float(parts[2]),
                l_kd=float(parts[3]),
                l_total=float(parts[4]),
                ter_student=float(parts[5]) if parts[5] else None,
                ter_teacher=float(parts[6]) if parts[6] else None,
                rep_ratio=float(parts[7]) if parts[7] else None,
            )
        )
    return rows


def generate_dataset(cfg: RunConfig):
    cfg = cfg.resolved()
    spec = cfg.task_spec()
    if cfg.task == "ctc":
        return gen_ctc_dataset(spec, cfg.n_examples)
    return gen_aed_dataset(spec, cfg.n_examples)


# ---------------------------------------------------------------------------
# evaluation with access instrumentation
# ---------------------------------------------------------------------------


class _CountedTargets:
    """Reference targets behind a read counter, to prove the student
    prediction phase never looks at them."""

    def __init__(self, targets):
        self._targets = list(targets)
        self.reads = 0

    def __len__(self):
        return len(self._targets)

    def get(self, i):
        self.reads += 1
        return self._targets[i]


def evaluate(model, examples, mode: str, train_cfg: TrainConfig, mask_seed: int = 0) -> dict:
    """TER, exact match, and repetition ratio for one split.

    ``student`` mode predicts from the source alone and asserts that no
    auxiliary parameter and no target token was read while predicting.
    ``teacher`` mode additionally consumes the target (masked for the
    encoder-decoder task), as a diagnostic upper bound.
    """
    if mode not in ("student", "teacher"):
        raise ContractError(f"unknown eval mode {mode!r}")
    examples = list(examples)
    if not examples:
        raise ContractError("empty evaluation split")
    sources = [ex.x for ex in examples]
    counted = _CountedTargets([ex.y for ex in examples])

    model.store.reset_reads()
    predictions = []
    if mode == "student":
        for x in sources:
            predictions.append(model.predict(x))
        aux_reads = model.store.reads_with_prefix("oracle.", "fusion.", "teacher_out.")
        target_reads = counted.reads
        if aux_reads or target_reads:
            raise ContractError(
                f"student evaluation touched {aux_reads} aux params, {target_reads} targets"
            )
    else:
        rng = np.random.default_rng(mask_seed)
        for i, x in enumerate(sources):
            y = counted.get(i)
            if isinstance(model, CtcModel):
                predictions.append(model.predict_teacher(x, y))
            else:
                masked = mask_target(y, train_cfg.lambda_mask, rng)
                predictions.append(model.predict_teacher(x, y, masked.tokens))
        aux_reads = model.store.reads_with_prefix("oracle.", "fusion.", "teacher_out.")
        target_reads = counted.reads

    references = [counted.get(i) for i in range(len(counted))]
    return {
        "ter": token_error_rate(predictions, references),
        "exact_match": exact_match_rate(predictions, references),
        "rep_ratio": repetition_ratio(predictions) if any(len(p) for p in predictions) else 0.0,
        "aux_param_reads_during_predict": aux_reads,
        "target_reads_during_predict": target_reads,
        "predictions": predictions,
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    records: list[MetricsRecord]
    out_dir: Path | None
    aborted: bool = False


def fit_loop(model, train_examples, train_cfg: TrainConfig, on_step=None) -> list[MetricsRecord]:
    """The bare optimization loop; file handling lives in train_run."""
    seq = np.random.SeedSequence(train_cfg.seed)
    shuffle_seed, mask_seed = seq.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    mask_rng = np.random.default_rng(mask_seed)
    optimizer = Adam(model.store.tensors(), lr=train_cfg.lr, warmup_steps=train_cfg.warmup_steps)
    records = []
    step = 0
    while step < train_cfg.steps:
        for batch in batch_iter(train_examples, train_cfg.batch_size, shuffle_rng):
            step += 1
            out = loss_total(model, batch.items(), train_cfg, mask_rng)
            optimizer.zero_grad()
            backward(out.total)
            optimizer.step()
            b = out.breakdown
            record = MetricsRecord(step, b.l_org, b.l_em, b.l_kd, b.l_total)
            records.append(record)
            if on_step is not None:
                on_step(step, record, model)
            if step >= train_cfg.steps:
                break
    return records


def _acquire_lock(out_dir: Path) -> Path:
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"output directory {out_dir} is owned by another run (.lock exists)")
    os.close(fd)
    return lock


def train_run(cfg: RunConfig, out_dir: Path, quiet: bool = True) -> TrainResult:
    """Full training run with metrics, checkpoints, plot, and locking."""
    cfg = cfg.resolved()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = _acquire_lock(out_dir)
    t0 = time.monotonic()
    timings: list[tuple[int, float]] = []
    try:
        dataset = generate_dataset(cfg)
        train_examples = split_examples(dataset, "train")
        dev_examples = split_examples(dataset, "dev")
        train_cfg = cfg.train_config()
        model = build_model(cfg.model_config(), seed=cfg.seed)
        run_kv = config_to_mapping(cfg)

        collected: list[MetricsRecord] = []

        def on_step(step, record, model_):
            collected.append(record)
            final = step == cfg.steps
            if cfg.eval_every > 0 and (step % cfg.eval_every == 0 or final) and dev_examples:
                student = evaluate(model_, dev_examples, "student", train_cfg, mask_seed=cfg.seed)
                record.ter_student = student["ter"]
                record.rep_ratio = student["rep_ratio"]
                if train_cfg.use_teacher:
                    teacher = evaluate(model_, dev_examples, "teacher", train_cfg, mask_seed=cfg.seed)
                    record.ter_teacher = teacher["ter"]
                timings.append((step, time.monotonic() - t0))
                if not quiet:
                    print(
                        f"step {step}: l_total {record.l_total:.4f} "
                        f"dev ter {record.ter_student:.4f}"
                    )
            if cfg.checkpoint_every > 0 and (step % cfg.checkpoint_every == 0 or final):
                name = "checkpoint_final.txt" if final else f"checkpoint_{step:06d}.txt"
                save_checkpoint(model_, out_dir / name, run_config=run_kv)

        try:
            fit_loop(model, train_examples, train_cfg, on_step=on_step)
        finally:
            # on a NaN abort the rows so far and the periodic checkpoints
            # are retained
            _write_metrics(out_dir / "metrics.csv", collected)
            (out_dir / "loss_curve.svg").write_text(loss_curve_svg(collected))
            _write_timings(out_dir / "timing.csv", timings, time.monotonic() - t0)
        return TrainResult(model=model, records=collected, out_dir=out_dir)
    finally:
        lock.unlink(missing_ok=True)


def _write_metrics(path, records):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")


def _write_timings(path, timings, total):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("step,seconds\n")
        for step, sec in timings:
            fh.write(f"{step},{sec:.3f}\n")
        fh.write(f"total,{total:.3f}\n")


def loss_curve_svg(records, width: int = 640, height: int = 400) -> str:
    """Static polyline plot of the three loss terms against the step."""
    series = {
        "l_org": ([r.l_org for r in records], "#1f77b4"),
        "l_em": ([r.l_em for r in records], "#d62728"),
        "l_kd": ([r.l_kd for r in records], "#2ca02c"),
    }
    pad = 40
    n = max(1, len(records))
    all_vals = [v for vals, _ in series.values() for v in vals] or [0.0]
    v_lo, v_hi = min(all_vals), max(all_vals)
    if v_hi - v_lo < 1e-12:
        v_hi = v_lo + 1.0

    def sx(i):
        return pad + (width - 2 * pad) * (i / max(1, n - 1))

    def sy(v):
        return height - pad - (height - 2 * pad) * ((v - v_lo) / (v_hi - v_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 8}" font-size="12" text-anchor="middle">step</text>',
        f'<text x="{pad}" y="{pad - 8}" font-size="12">loss</text>',
        f'<text x="{pad - 35}" y="{height - pad + 4}" font-size="10">{v_lo:.2f}</text>',
        f'<text x="{pad - 35}" y="{pad + 4}" font-size="10">{v_hi:.2f}</text>',
    ]
    for idx, (name, (vals, color)) in enumerate(series.items()):
        if not vals:
            continue
        points = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * idx}" font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------


@dataclass
class SuiteReport:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        body = ", ".join(f"{k}={v}" for k, v in self.details.items())
        return [f"[{status}] {self.name}: {body}"]


def _random_ctc_instance(rng, max_t=8, max_l=4, max_k=4):
    k = int(rng.integers(2, max_k + 1))
    vocab = Vocab(k)
    while True:
        l = int(rng.integers(1, max_l + 1))
        y = tuple(int(t) for t in rng.integers(1, k, size=l))
        if min_frames(y) <= max_t:
            break
    t = int(rng.integers(min_frames(y), max_t + 1))
    return rng.standard_normal((t, k)) * 2.0, y, vocab


def check_ctc_suite(n_instances: int = 100, seed: int = 0, max_t: int = 8,
                    max_l: int = 4, max_k: int = 4, corrupt: float = 0.0) -> SuiteReport:
    """Dynamic-programming loss and posterior against exhaustive
    enumeration.  ``corrupt`` shifts the DP value, as a negative control."""
    rng = np.random.default_rng(seed)
    max_loss_dev = 0.0
    max_post_dev = 0.0
    for _ in range(n_instances):
        u, y, vocab = _random_ctc_instance(rng, max_t=max_t, max_l=max_l, max_k=max_k)
        dp = ctc_loss_dp(u, y, vocab).item() + corrupt
        bf = ctc_loss_bruteforce(u, y, vocab)
        max_loss_dev = max(max_loss_dev, abs(dp - bf))
        post_dp = ctc_posterior(u, y, vocab)
        post_enum = posterior_from_enumeration(u, y, vocab)
        max_post_dev = max(max_post_dev, float(np.abs(post_dp - post_enum).max()))
    passed = max_loss_dev <= 1e-9 and max_post_dev <= 1e-9
    return SuiteReport(
        "ctc dp vs enumeration",
        passed,
        {"instances": n_instances, "max_loss_dev": f"{max_loss_dev:.3e}",
         "max_posterior_dev": f"{max_post_dev:.3e}"},
    )


def full_gradient_report(model, batch, train_cfg: TrainConfig, mask_seed: int = 0,
                         h: float = 1e-5) -> dict:
    """Finite-difference check of the combined objective over every
    parameter coordinate of the model."""

    def objective():
        return loss_total(model, batch, train_cfg, np.random.default_rng(mask_seed)).total

    for t in model.store.tensors():
        t.zero_grad()
    backward(objective())
    worst = {"rel_err": 0.0, "param": None, "index": None}
    checked = 0
    for name, tensor in model.store.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective().item()
            flat[i] = orig - h
            fm = objective().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            rel = abs(aflat[i] - numeric) / max(1e-8, abs(numeric))
            checked += 1
            if rel > worst["rel_err"]:
                worst = {"rel_err": rel, "param": name, "index": i}
    worst["coordinates"] = checked
    return worst


def grad_check_suite(seed: int = 0, n_ctc: int = 50, full_tol: float = 1e-4) -> SuiteReport:
    """Analytic gradients against central differences at three levels:
    the CTC loss rule, both distillation forms, and the full objective."""
    rng = np.random.default_rng(seed)
    worst_ctc = 0.0
    for _ in range(n_ctc):
        u, y, vocab = _random_ctc_instance(rng, max_t=6, max_l=3, max_k=4)
        x = Tensor(u, requires_grad=True)
        worst_ctc = max(worst_ctc, grad_check(lambda t: ctc_loss_dp(t, y, vocab), x))

    worst_kd = 0.0
    for form in ("l2", "kl"):
        teacher = tt.softmax(Tensor(rng.standard_normal((4, 3))), axis=-1)
        logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        worst_kd = max(
            worst_kd,
            grad_check(lambda t: kd_loss_ctc(tt.softmax(t, axis=-1), teacher, form), logits),
        )

    model = CtcModel(
        ModelConfig(task="ctc", vocab_size=3, feature_dim=4, d_model=8,
                    enc_layers=1, heads=2, ffn_dim=16),
        seed=seed,
    )
    batch = []
    for _ in range(2):
        y = tuple(int(t) for t in rng.integers(1, 4, size=2))
        batch.append((rng.standard_normal((5, 4)), y))
    train_cfg = TrainConfig(task="ctc", alpha=2.0, kd_form="l2", seed=seed)
    full = full_gradient_report(model, batch, train_cfg, mask_seed=seed)

    passed = worst_ctc <= 1e-5 and worst_kd <= 1e-5 and full["rel_err"] <= full_tol
    return SuiteReport(
        "gradient vs finite differences",
        passed,
        {
            "ctc_rel_err": f"{worst_ctc:.3e}",
            "kd_rel_err": f"{worst_kd:.3e}",
            "objective_rel_err": f"{full['rel_err']:.3e}",
            "worst_param": f"{full['param']}[{full['index']}]",
            "coordinates": full["coordinates"],
        },
    )


def bound_check_suite(n_instances: int = 200, seed: int = 0, csv_path=None) -> SuiteReport:
    """Jensen lower bound on random small models and inputs, plus the
    equality configuration."""
    rng = np.random.default_rng(seed)
    reports: list[BoundReport] = []
    min_slack = math.inf
    for i in range(n_instances):
        vocab_size = int(rng.integers(2, 4))
        model = CtcModel(
            ModelConfig(task="ctc", vocab_size=vocab_size, feature_dim=3, d_model=8,
                        enc_layers=1, heads=2, ffn_dim=16),
            seed=seed * 1000 + i,
        )
        l = int(rng.integers(1, 3))
        y = tuple(int(t) for t in rng.integers(1, vocab_size + 1, size=l))
        t = int(rng.integers(min_frames(y), 7))
        x = rng.standard_normal((t, 3))
        reports.append(check_lower_bound(model, x, y))
        min_slack = min(min_slack, reports[-1].slack)

    u = rng.standard_normal((5, 3)) * 2.0
    tight = bound_report_from_logits(u, u, (1, 2), Vocab(3))
    passed = min_slack >= -1e-9 and abs(tight.slack) <= 1e-9

    if csv_path is not None:
        with open(csv_path, "w", encoding="ascii") as fh:
            fh.write("loglik,bound,slack,entropy\n")
            for r in reports:
                fh.write(
                    f"{r.log_likelihood_student!r},{r.neg_kl_bound!r},"
                    f"{r.slack!r},{r.teacher_entropy!r}\n"
                )
    return SuiteReport(
        "jensen lower bound",
        passed,
        {"instances": n_instances, "min_slack": f"{min_slack:.3e}",
         "tight_slack": f"{tight.slack:.3e}"},
    )
