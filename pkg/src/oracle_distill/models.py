"""Sequence models, the oracle encoder, and the attention fusion module.

Parameters are split into two named groups: the ``seq.`` prefix holds the
sequence model proper (everything the student needs at inference), and
the ``oracle.`` / ``fusion.`` / ``teacher_out.`` prefixes hold the
auxiliary teacher-side modules that are discarded after training.  Every
parameter read goes through the store, so tests can prove that a student
decode touches no auxiliary weight.

Blocks are pre-norm residual: zeroing a sublayer's output projection
turns that sublayer into the identity, which is what the structural
reduction tests rely on.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tt
from .ctc import Vocab, greedy_decode
from .errors import CheckpointFormatError, ContractError, ShapeError, VocabularyError
from .tensor import Tensor

MASK = -1  # sentinel for masked target tokens; rendered as the oracle's row 0

CHECKPOINT_MAGIC = "oracle-distill-checkpoint v1"


@dataclass
class ModelConfig:
    task: str = "ctc"  # "ctc" or "aed"
    vocab_size: int = 6  # non-blank labels (ctc) or content tokens (aed)
    feature_dim: int = 8  # ctc source feature width
    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    fusion_layers: int = 1
    max_len: int = 128

    def __post_init__(self):
        if self.task not in ("ctc", "aed"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.d_model % self.heads != 0:
            raise ContractError("heads must divide d_model")
        if self.vocab_size < 1:
            raise ContractError("vocab_size must be positive")


class ParamStore:
    """Named float64 parameters with per-name read counters."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self.reads: Counter = Counter()

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def get(self, name: str) -> Tensor:
        self.reads[name] += 1
        return self._tensors[name]

    def peek(self, name: str) -> Tensor:
        """Access without counting a read (checkpointing, optimizers)."""
        return self._tensors[name]

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def reset_reads(self):
        self.reads.clear()

    def reads_with_prefix(self, *prefixes: str) -> int:
        return sum(n for name, n in self.reads.items() if name.startswith(prefixes))


AUX_PREFIXES = ("oracle.", "fusion.", "teacher_out.")


def is_student_param(name: str) -> bool:
    return name.startswith("seq.")


def count_params(model) -> dict[str, int]:
    """Exact scalar counts for the student group, the auxiliary group, and
    their union."""
    student = aux = 0
    for name, t in model.store.items():
        if is_student_param(name):
            student += t.size
        else:
            aux += t.size
    return {"student": student, "aux": aux, "total": student + aux}


def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    dim = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, dim / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d - d // 2])
    return pe


class _TransformerBase:
    """Shared parameter building and forward helpers."""

    def __init__(self, config: ModelConfig, seed: int):
        self.cfg = config
        self.store = ParamStore()
        self._rng = np.random.default_rng(seed)
        self._pos = sinusoidal_positions(config.max_len, config.d_model)

    # -- building ----------------------------------------------------------

    def _build_attention(self, prefix: str):
        # projections carry no biases: a key bias is a pure gauge direction
        # (softmax scores are invariant to it), which would defeat per
        # coordinate finite-difference validation
        d = self.cfg.d_model
        for part in ("wq", "wk", "wv", "wo"):
            self.store.create(f"{prefix}.{part}", _xavier(self._rng, d, d))

    def _build_ffn(self, prefix: str):
        d, f = self.cfg.d_model, self.cfg.ffn_dim
        self.store.create(f"{prefix}.w1", _xavier(self._rng, d, f))
        self.store.create(f"{prefix}.b1", np.zeros(f))
        self.store.create(f"{prefix}.w2", _xavier(self._rng, f, d))
        self.store.create(f"{prefix}.b2", np.zeros(d))

    def _build_encoder_block(self, prefix: str):
        self._build_attention(f"{prefix}.attn")
        self._build_ffn(f"{prefix}.ffn")

    def _build_head(self, prefix: str, out_dim: int):
        self.store.create(f"{prefix}.w", _xavier(self._rng, self.cfg.d_model, out_dim))
        self.store.create(f"{prefix}.b", np.zeros(out_dim))

    def _build_oracle_and_fusion(self, oracle_rows: int):
        d = self.cfg.d_model
        self.store.create("oracle.embed", _xavier(self._rng, oracle_rows, d))
        self._build_encoder_block("oracle.enc0")
        for i in range(self.cfg.fusion_layers):
            self._build_attention(f"fusion.f{i}.self")
            self._build_attention(f"fusion.f{i}.cross")
            self._build_ffn(f"fusion.f{i}.ffn")

    # -- forward -----------------------------------------------------------

    def _positions(self, n: int) -> Tensor:
        if n > self.cfg.max_len:
            raise ContractError(f"sequence of length {n} exceeds max_len {self.cfg.max_len}")
        return Tensor(self._pos[:n])

    def _attention(self, prefix, q_in, kv_in, mask=None, capture=None):
        d, h = self.cfg.d_model, self.cfg.heads
        dh = d // h
        s = self.store
        q = tt.matmul(q_in, s.get(f"{prefix}.wq"))
        k = tt.matmul(kv_in, s.get(f"{prefix}.wk"))
        v = tt.matmul(kv_in, s.get(f"{prefix}.wv"))
        outs = []
        weights = []
        for i in range(h):
            lo, hi = i * dh, (i + 1) * dh
            qs = tt.narrow(q, lo, hi, axis=1)
            ks = tt.narrow(k, lo, hi, axis=1)
            vs = tt.narrow(v, lo, hi, axis=1)
            scores = tt.scale(tt.matmul(qs, tt.transpose(ks)), 1.0 / math.sqrt(dh))
            if mask is not None:
                scores = tt.add(scores, mask)
            w = tt.softmax(scores, axis=-1)
            weights.append(w.data)
            outs.append(tt.matmul(w, vs))
        if capture is not None:
            capture.append(np.mean(weights, axis=0))
        merged = tt.concat(outs, axis=1)
        return tt.matmul(merged, s.get(f"{prefix}.wo"))

    def _ffn(self, prefix, x):
        s = self.store
        hidden = tt.relu(tt.add(tt.matmul(x, s.get(f"{prefix}.w1")), s.get(f"{prefix}.b1")))
        return tt.add(tt.matmul(hidden, s.get(f"{prefix}.w2")), s.get(f"{prefix}.b2"))

    def _encoder_block(self, prefix, x, mask=None):
        normed = tt.layer_norm(x)
        x = tt.add(x, self._attention(f"{prefix}.attn", normed, normed, mask=mask))
        return tt.add(x, self._ffn(f"{prefix}.ffn", tt.layer_norm(x)))

    def _head(self, prefix, x):
        s = self.store
        return tt.add(tt.matmul(x, s.get(f"{prefix}.w")), s.get(f"{prefix}.b"))

    def oracle_encode(self, tokens, n_vocab_rows: int) -> Tensor:
        """Target-side context vectors, one per input token.

        ``tokens`` may contain MASK; it is rendered as embedding row 0,
        which no real token uses.
        """
        ids = []
        for t in tokens:
            t = int(t)
            if t == MASK:
                ids.append(0)
            elif 0 < t < n_vocab_rows:
                ids.append(t)
            else:
                raise VocabularyError(f"oracle token {t} outside 1..{n_vocab_rows - 1}")
        if not ids:
            raise ContractError("oracle input must be non-empty")
        emb = tt.embedding_lookup(self.store.get("oracle.embed"), ids)
        x = tt.add(tt.scale(emb, math.sqrt(self.cfg.d_model)), self._positions(len(ids)))
        return self._encoder_block("oracle.enc0", x)

    def fuse(self, rep: Tensor, guidance: Tensor, capture=None) -> Tensor:
        """Combine the sequence model's representation with oracle guidance.

        Self-attention over ``rep``, whose output queries cross-attention
        into ``guidance`` (keys and values), then a feed-forward sublayer.
        The output always keeps the representation's own length.
        """
        if guidance.shape[1] != rep.shape[1]:
            raise ShapeError(f"fuse width {rep.shape} vs {guidance.shape}")
        x = rep
        for i in range(self.cfg.fusion_layers):
            normed = tt.layer_norm(x)
            x = tt.add(x, self._attention(f"fusion.f{i}.self", normed, normed))
            x = tt.add(
                x,
                self._attention(
                    f"fusion.f{i}.cross", tt.layer_norm(x), tt.layer_norm(guidance), capture=capture
                ),
            )
            x = tt.add(x, self._ffn(f"fusion.f{i}.ffn", tt.layer_norm(x)))
        return x


class CtcModel(_TransformerBase):
    """Frame classifier with an auxiliary target-aware teacher head.

    Labels are 1..vocab_size with blank 0; logits have vocab_size + 1
    columns.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        self.vocab = Vocab(config.vocab_size + 1)
        out_dim = config.vocab_size + 1
        self.store.create("seq.in_proj.w", _xavier(self._rng, config.feature_dim, config.d_model))
        self.store.create("seq.in_proj.b", np.zeros(config.d_model))
        for i in range(config.enc_layers):
            self._build_encoder_block(f"seq.enc{i}")
        self._build_head("seq.out", out_dim)
        self._build_oracle_and_fusion(config.vocab_size + 1)
        self._build_head("teacher_out", out_dim)

    def encode(self, feats: np.ndarray) -> Tensor:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ContractError(f"source features must be non-empty T x {self.cfg.feature_dim}")
        if feats.shape[1] != self.cfg.feature_dim:
            raise ShapeError(f"feature width {feats.shape[1]} != {self.cfg.feature_dim}")
        s = self.store
        x = tt.add(tt.matmul(Tensor(feats), s.get("seq.in_proj.w")), s.get("seq.in_proj.b"))
        x = tt.add(x, self._positions(feats.shape[0]))
        for i in range(self.cfg.enc_layers):
            x = self._encoder_block(f"seq.enc{i}", x)
        return x

    def student_logits(self, feats) -> Tensor:
        return self._head("seq.out", self.encode(feats))

    def oracle_guidance(self, tokens) -> Tensor:
        return self.oracle_encode(tokens, self.cfg.vocab_size + 1)

    def teacher_logits(self, hidden: Tensor, tokens, capture=None) -> Tensor:
        """Teacher frame logits from an already-encoded representation."""
        fused = self.fuse(hidden, self.oracle_guidance(tokens), capture=capture)
        return self._head("teacher_out", fused)

    def predict(self, feats) -> tuple[int, ...]:
        return greedy_decode(self.student_logits(feats).data)

    def predict_teacher(self, feats, tokens) -> tuple[int, ...]:
        return greedy_decode(self.teacher_logits(self.encode(feats), tokens).data)


class AedModel(_TransformerBase):
    """Encoder-decoder transducer with an auxiliary masked-target teacher.

    Content tokens are 1..vocab_size; id 0 is the decoder start symbol and
    id vocab_size + 1 is the end symbol, so output logits have
    vocab_size + 2 columns.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        self.bos = 0
        self.eos = config.vocab_size + 1
        out_dim = config.vocab_size + 2
        self.store.create("seq.src_embed", _xavier(self._rng, out_dim, config.d_model))
        self.store.create("seq.tgt_embed", _xavier(self._rng, out_dim, config.d_model))
        for i in range(config.enc_layers):
            self._build_encoder_block(f"seq.enc{i}")
        for i in range(config.dec_layers):
            self._build_attention(f"seq.dec{i}.self")
            self._build_attention(f"seq.dec{i}.cross")
            self._build_ffn(f"seq.dec{i}.ffn")
        self._build_head("seq.out", out_dim)
        self._build_oracle_and_fusion(config.vocab_size + 1)
        self._build_head("teacher_out", out_dim)

    def _check_tokens(self, tokens, what: str) -> list[int]:
        out = []
        for t in tokens:
            t = int(t)
            if not 0 < t <= self.cfg.vocab_size:
                raise VocabularyError(f"{what} token {t} outside 1..{self.cfg.vocab_size}")
            out.append(t)
        if not out:
            raise ContractError(f"{what} must be non-empty")
        return out

    def encode(self, src_tokens) -> Tensor:
        ids = self._check_tokens(src_tokens, "source")
        x = tt.scale(tt.embedding_lookup(self.store.get("seq.src_embed"), ids), math.sqrt(self.cfg.d_model))
        x = tt.add(x, self._positions(len(ids)))
        for i in range(self.cfg.enc_layers):
            x = self._encoder_block(f"seq.enc{i}", x)
        return x

    def _causal_mask(self, n: int) -> Tensor:
        mask = np.triu(np.full((n, n), -1e9), k=1)
        return Tensor(mask)

    def decode_logits(self, memory: Tensor, prefix_ids, head: str = "seq.out") -> Tensor:
        """Logits at every prefix position; position i sees prefix_ids[:i+1]."""
        ids = [int(t) for t in prefix_ids]
        if not ids or ids[0] != self.bos:
            raise ContractError("decoder prefix must start with the start symbol")
        if any(not 0 <= t <= self.eos for t in ids):
            raise VocabularyError("decoder prefix token out of range")
        n = len(ids)
        x = tt.scale(tt.embedding_lookup(self.store.get("seq.tgt_embed"), ids), math.sqrt(self.cfg.d_model))
        x = tt.add(x, self._positions(n))
        mask = self._causal_mask(n)
        for i in range(self.cfg.dec_layers):
            normed = tt.layer_norm(x)
            x = tt.add(x, self._attention(f"seq.dec{i}.self", normed, normed, mask=mask))
            x = tt.add(x, self._attention(f"seq.dec{i}.cross", tt.layer_norm(x), tt.layer_norm(memory)))
            x = tt.add(x, self._ffn(f"seq.dec{i}.ffn", tt.layer_norm(x)))
        return self._head(head, x)

    def student_logits(self, src_tokens, target) -> Tensor:
        """Teacher-forced logits over len(target) + 1 positions (incl. end)."""
        y = self._check_tokens(target, "target")
        return self.decode_logits(self.encode(src_tokens), [self.bos] + y)

    def oracle_guidance(self, tokens) -> Tensor:
        return self.oracle_encode(tokens, self.cfg.vocab_size + 1)

    def teacher_logits(self, memory: Tensor, target, masked_target, capture=None) -> Tensor:
        """Teacher-forced logits attending to the fused memory.

        The decoder body is shared with the student; only the fusion
        modules, oracle encoder, and output head are auxiliary.
        """
        y = self._check_tokens(target, "target")
        fused = self.fuse(memory, self.oracle_guidance(masked_target), capture=capture)
        return self.decode_logits(fused, [self.bos] + y, head="teacher_out")

    def predict(self, src_tokens, max_len: int | None = None) -> tuple[int, ...]:
        """Greedy autoregressive decode from the source alone."""
        memory = self.encode(src_tokens)
        limit = max_len if max_len is not None else min(self.cfg.max_len - 1, 2 * len(list(src_tokens)) + 4)
        prefix = [self.bos]
        out = []
        for _ in range(limit):
            logits = self.decode_logits(memory, prefix)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == self.eos:
                break
            prefix.append(nxt)
            out.append(nxt)
        return tuple(out)

    def predict_teacher(self, src_tokens, target, masked_target, max_len: int | None = None) -> tuple[int, ...]:
        """Greedy decode with access to the (masked) target via fusion."""
        fused = self.fuse(self.encode(src_tokens), self.oracle_guidance(masked_target))
        limit = max_len if max_len is not None else min(self.cfg.max_len - 1, 2 * len(list(src_tokens)) + 4)
        prefix = [self.bos]
        out = []
        for _ in range(limit):
            logits = self.decode_logits(fused, prefix, head="teacher_out")
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == self.eos:
                break
            prefix.append(nxt)
            out.append(nxt)
        return tuple(out)


def build_model(config: ModelConfig, seed: int = 0):
    return CtcModel(config, seed) if config.task == "ctc" else AedModel(config, seed)


# ---------------------------------------------------------------------------
# ablation helpers used by the structural reduction checks
# ---------------------------------------------------------------------------


def zero_fusion(model) -> None:
    """Zero every fusion output projection so fuse() becomes the identity."""
    for i in range(model.cfg.fusion_layers):
        for name in (
            f"fusion.f{i}.self.wo",
            f"fusion.f{i}.cross.wo",
            f"fusion.f{i}.ffn.w2",
            f"fusion.f{i}.ffn.b2",
        ):
            t = model.store.peek(name)
            t.data[...] = 0.0


def zero_cross_attention(model) -> None:
    """Zero only the cross-attention output projection; fuse() then ignores
    the oracle guidance but keeps its self-attention and feed-forward parts."""
    for i in range(model.cfg.fusion_layers):
        t = model.store.peek(f"fusion.f{i}.cross.wo")
        t.data[...] = 0.0


def tie_teacher_head(model) -> None:
    """Copy the student head weights into the teacher head."""
    model.store.peek("teacher_out.w").data[...] = model.store.peek("seq.out.w").data
    model.store.peek("teacher_out.b").data[...] = model.store.peek("seq.out.b").data


# ---------------------------------------------------------------------------
# checkpoint format: versioned text with hex floats, byte-exact round trip
# ---------------------------------------------------------------------------


def save_checkpoint(model, path, run_config: dict | None = None) -> None:
    lines = [CHECKPOINT_MAGIC, "[config]"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(model.cfg, f.name)}")
    if run_config:
        lines.append("[run]")
        for key in sorted(run_config):
            lines.append(f"{key} = {run_config[key]}")
    for name, t in model.store.items():
        shape = " ".join(str(n) for n in t.data.shape)
        lines.append(f"[param {name}]")
        lines.append(shape if shape else "scalar")
        flat = t.data.reshape(-1)
        lines.append(" ".join(float.hex(float(v)) for v in flat))
    lines.append("[end]")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path, seed: int = 0):
    """Rebuild the model from a checkpoint; returns (model, run_config)."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"bad or missing header; expected {CHECKPOINT_MAGIC!r}, "
            f"got {lines[0][:60]!r}" if lines else "empty checkpoint file"
        )
    if lines[-1] != "[end]":
        raise CheckpointFormatError("truncated checkpoint: missing [end]")

    sections: list[tuple[str, list[str]]] = []
    current = None
    for line in lines[1:-1]:
        if line.startswith("["):
            current = (line.strip("[]"), [])
            sections.append(current)
        elif current is not None:
            current[1].append(line)
        else:
            raise CheckpointFormatError(f"content before first section: {line!r}")

    def parse_kv(body):
        out = {}
        for line in body:
            key, _, value = line.partition(" = ")
            out[key] = value
        return out

    config_kv = {}
    run_kv: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    for header, body in sections:
        if header == "config":
            config_kv = parse_kv(body)
        elif header == "run":
            run_kv = parse_kv(body)
        elif header.startswith("param "):
            name = header[len("param "):]
            if len(body) != 2:
                raise CheckpointFormatError(f"param {name}: expected shape and data lines")
            shape = tuple(int(n) for n in body[0].split()) if body[0] != "scalar" else ()
            values = np.array([float.fromhex(v) for v in body[1].split()])
            params[name] = values.reshape(shape)
        else:
            raise CheckpointFormatError(f"unknown section {header!r}")

    try:
        cfg = ModelConfig(
            task=config_kv["task"],
            vocab_size=int(config_kv["vocab_size"]),
            feature_dim=int(config_kv["feature_dim"]),
            d_model=int(config_kv["d_model"]),
            enc_layers=int(config_kv["enc_layers"]),
            dec_layers=int(config_kv["dec_layers"]),
            heads=int(config_kv["heads"]),
            ffn_dim=int(config_kv["ffn_dim"]),
            fusion_layers=int(config_kv["fusion_layers"]),
            max_len=int(config_kv["max_len"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"bad [config] section: {exc}") from exc

    model = build_model(cfg, seed=seed)
    expected = set(model.store.names())
    if set(params) != expected:
        missing = expected - set(params)
        extra = set(params) - expected
        raise CheckpointFormatError(f"parameter set mismatch: missing {missing}, extra {extra}")
    for name, values in params.items():
        t = model.store.peek(name)
        if t.data.shape != values.shape:
            raise CheckpointFormatError(f"param {name}: shape {values.shape} != {t.data.shape}")
        t.data[...] = values
    model.store.reset_reads()
    return model, run_kv
