"""Run configuration: a flat, typed key = value text format.

Unknown keys are a hard startup error so that a typo can never silently
fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .models import ModelConfig
from .objectives import TrainConfig
from .tasks import AedTaskSpec, CtcTaskSpec


def _parse_bool(s: str) -> bool:
    if s in ("true", "True", "1", "yes"):
        return True
    if s in ("false", "False", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # training
    task: str = "ctc"
    seed: int = 0
    steps: int = 400
    batch_size: int = 8
    lr: float = 3e-3
    warmup_steps: int = 40
    alpha: float = 2.0
    lambda_mask: float = 0.5
    kd_form: str = "l2"
    stop_teacher_grad: bool = False
    temperature: float = 1.0
    use_teacher: bool = True
    # model
    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    fusion_layers: int = 1
    # data
    n_examples: int = 600
    data_seed: int = -1  # -1: follow seed
    vocab_size: int = -1  # -1: task default (6 ctc, 12 aed)
    len_min: int = -1
    len_max: int = -1
    frames_min: int = 2
    frames_max: int = 4
    feature_dim: int = 8
    noise: float = 0.3
    ambiguity: float = 0.3
    rule: str = "cipher"
    copy_noise: float = 0.1
    # harness
    eval_every: int = 50
    checkpoint_every: int = -1  # -1: every 20% of steps
    out_dir: str = ""

    def resolved(self) -> "RunConfig":
        cfg = RunConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        if cfg.data_seed < 0:
            cfg.data_seed = cfg.seed
        if cfg.vocab_size < 0:
            cfg.vocab_size = 6 if cfg.task == "ctc" else 12
        if cfg.len_min < 0:
            cfg.len_min = 2 if cfg.task == "ctc" else 3
        if cfg.len_max < 0:
            cfg.len_max = 6 if cfg.task == "ctc" else 8
        if cfg.checkpoint_every < 0:
            cfg.checkpoint_every = max(1, cfg.steps // 5)
        return cfg

    # -- derived views ------------------------------------------------------

    def train_config(self) -> TrainConfig:
        cfg = self.resolved()
        return TrainConfig(
            task=cfg.task,
            alpha=cfg.alpha,
            lambda_mask=cfg.lambda_mask,
            kd_form=cfg.kd_form,
            stop_teacher_grad=cfg.stop_teacher_grad,
            temperature=cfg.temperature,
            use_teacher=cfg.use_teacher,
            seed=cfg.seed,
            steps=cfg.steps,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            warmup_steps=cfg.warmup_steps,
            d_model=cfg.d_model,
            enc_layers=cfg.enc_layers,
            dec_layers=cfg.dec_layers,
            heads=cfg.heads,
            ffn_dim=cfg.ffn_dim,
            fusion_layers=cfg.fusion_layers,
        )

    def task_spec(self):
        cfg = self.resolved()
        if cfg.task == "ctc":
            return CtcTaskSpec(
                vocab_size=cfg.vocab_size,
                len_min=cfg.len_min,
                len_max=cfg.len_max,
                frames_min=cfg.frames_min,
                frames_max=cfg.frames_max,
                feature_dim=cfg.feature_dim,
                noise=cfg.noise,
                ambiguity=cfg.ambiguity,
                seed=cfg.data_seed,
            )
        return AedTaskSpec(
            vocab_size=cfg.vocab_size,
            len_min=cfg.len_min,
            len_max=cfg.len_max,
            rule=cfg.rule,
            copy_noise=cfg.copy_noise,
            seed=cfg.data_seed,
        )

    def model_config(self) -> ModelConfig:
        cfg = self.resolved()
        if cfg.task == "ctc":
            longest = max(cfg.len_max * cfg.frames_max, 2 * cfg.len_max + 1) + cfg.len_max
        else:
            longest = 2 * cfg.len_max + 8
        return ModelConfig(
            task=cfg.task,
            vocab_size=cfg.vocab_size,
            feature_dim=cfg.feature_dim,
            d_model=cfg.d_model,
            enc_layers=cfg.enc_layers,
            dec_layers=cfg.dec_layers,
            heads=cfg.heads,
            ffn_dim=cfg.ffn_dim,
            fusion_layers=cfg.fusion_layers,
            max_len=max(64, longest),
        )


_CASTERS = {int: int, float: float, str: str, bool: _parse_bool}


def config_from_mapping(mapping: dict[str, str]) -> RunConfig:
    """Build a RunConfig from string key/values, rejecting unknown keys."""
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, raw in mapping.items():
        caster = _CASTERS[{"int": int, "float": float, "str": str, "bool": bool}.get(known[key], known[key])]
        try:
            values[key] = caster(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    try:
        resolved = cfg.resolved()
        resolved.train_config()
        resolved.task_spec()
        resolved.model_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> RunConfig:
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in mapping:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        mapping[key] = value
    return config_from_mapping(mapping)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_mapping(cfg: RunConfig) -> dict[str, str]:
    return {f.name: str(getattr(cfg, f.name)) for f in fields(RunConfig)}
