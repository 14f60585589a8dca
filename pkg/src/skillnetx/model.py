"""Encoder assembly for the dense, MoE, and skill-routed variants, plus task heads."""

from __future__ import annotations

import enum
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from .layers import (
    FfnParams,
    MhaParams,
    SkillFfnBank,
    SkillMhaParams,
    dense_ffn,
    dense_mha,
    moe_ffn,
    skill_ffn,
    skill_mha,
)
from .skills import SkillMask, SkillMatrix, SkillTaxonomy, TaskSpec, TaskType
from .tensor import (
    ContractError,
    Tensor,
    add,
    add_const,
    cross_entropy,
    dropout,
    layer_norm,
    linear,
    no_grad,
    parameter,
    reshape,
    scale,
    take,
    transpose,
)

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
NUM_SPECIAL = 4
IGNORE = -1
_NEG = -1e9


class Variant(str, enum.Enum):
    DENSE = "dense"
    MOE = "moe"
    SKILL_FFN = "skill-ffn"
    SKILL_FFN_MHA = "skill-ffn-mha"


@dataclass
class ModelConfig:
    variant: Variant = Variant.SKILL_FFN_MHA
    layers: int = 2
    hidden: int = 64
    intermediate: int = 128
    heads: int = 4
    vocab_size: int = 512
    max_len: int = 32
    dropout: float = 0.0
    num_segments: int = 2
    num_experts: Optional[int] = None  # MoE only; defaults to the skill count
    init_std: float = 0.02
    ln_eps: float = 1e-5
    taxonomy: SkillTaxonomy = field(default_factory=SkillTaxonomy)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.taxonomy, dict):
            self.taxonomy = SkillTaxonomy(
                tuple(self.taxonomy["task_skills"]), tuple(self.taxonomy["languages"])
            )
        self.validate()

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if min(self.layers, self.hidden, self.intermediate, self.heads, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError("vocabulary must extend beyond the special tokens")
        if self.variant is Variant.MOE and self.experts < 2:
            raise ValueError("MoE needs at least two experts")

    @property
    def experts(self) -> int:
        return self.num_experts if self.num_experts is not None else self.taxonomy.n_total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["taxonomy"] = {
            "task_skills": list(self.taxonomy.task_skills),
            "languages": list(self.taxonomy.languages),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


SHARED = "shared"


def head_owner(task_id: str) -> str:
    return f"head:{task_id}"


class ParameterStore:
    """Named parameters, each tagged with exactly one owner.

    Owners are ``shared``, a skill name (``t_s3``, ``l_s2``) or ``head:<task_id>``.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.owners: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, owner: str) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = parameter(np.array(data, dtype=np.float64), name=name)
        self.params[name] = t
        self.owners[name] = owner
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def owned_by(self, owner: str) -> list[str]:
        return [n for n, o in self.owners.items() if o == owner]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.data = np.array(arrays[n], dtype=np.float64)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def has_head(self, task_id: str) -> bool:
        return f"head.{task_id}.w" in self.params


@dataclass
class Batch:
    task_id: str
    token_ids: np.ndarray  # [b, T] int
    attention_mask: np.ndarray  # [b, T] 0/1
    segment_ids: np.ndarray  # [b, T]
    labels: np.ndarray  # per task type, see forward_task

    def __len__(self) -> int:
        return self.token_ids.shape[0]


# ----------------------------------------------------------------- construction


def _stable_seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def _head_dims(spec: TaskSpec, cfg: ModelConfig) -> int:
    if spec.task_type is TaskType.SPAN_EXTRACTION:
        return 2
    if spec.task_type is TaskType.MLM:
        return cfg.vocab_size
    return spec.num_classes


def add_head(store: ParameterStore, cfg: ModelConfig, spec: TaskSpec, seed: int) -> None:
    """Create the output head for ``spec`` (no-op if it already exists)."""
    if store.has_head(spec.task_id):
        return
    if spec.task_type is TaskType.SPAN_EXTRACTION and spec.num_classes != cfg.max_len:
        raise ValueError(
            f"span task {spec.task_id!r} declares {spec.num_classes} classes; "
            f"span heads emit one score per position ({cfg.max_len})"
        )
    out = _head_dims(spec, cfg)
    rng = np.random.default_rng(_stable_seed(seed, "head", spec.task_id))
    owner = head_owner(spec.task_id)
    store.add(f"head.{spec.task_id}.w", rng.normal(0, cfg.init_std, (cfg.hidden, out)), owner)
    store.add(f"head.{spec.task_id}.b", np.zeros(out), owner)


def build_model(cfg: ModelConfig, skills: SkillMatrix, seed: int) -> ParameterStore:
    """Initialise every variant from the same backbone draw.

    Each parameter role gets one random draw per seed; every skill (or expert)
    module holding that role receives a copy, so skill modules start identical
    and diverge only through training.
    """
    cfg.validate()
    if skills.taxonomy != cfg.taxonomy:
        raise ValueError("skill matrix taxonomy differs from the model config taxonomy")
    rng = np.random.default_rng(_stable_seed(seed, "backbone"))
    d, h, std = cfg.hidden, cfg.intermediate, cfg.init_std
    tax = cfg.taxonomy
    store = ParameterStore()

    def normal(*shape):
        return rng.normal(0.0, std, shape)

    store.add("embed.token", normal(cfg.vocab_size, d), SHARED)
    store.add("embed.position", normal(cfg.max_len, d), SHARED)
    store.add("embed.segment", normal(cfg.num_segments, d), SHARED)
    store.add("embed.ln.gamma", np.ones(d), SHARED)
    store.add("embed.ln.beta", np.zeros(d), SHARED)

    for i in range(cfg.layers):
        p = f"layer{i}"
        q, k, v, o = normal(d, d), normal(d, d), normal(d, d), normal(d, d)
        w1, w2 = normal(d, h), normal(h, d)
        if cfg.variant is Variant.SKILL_FFN_MHA:
            for j in range(tax.n_language):
                owner = f"l_s{j + 1}"
                store.add(f"{p}.attn.{owner}.q", q, owner)
                store.add(f"{p}.attn.{owner}.k", k, owner)
                store.add(f"{p}.attn.{owner}.v", v, owner)
        else:
            store.add(f"{p}.attn.q", q, SHARED)
            store.add(f"{p}.attn.k", k, SHARED)
            store.add(f"{p}.attn.v", v, SHARED)
        store.add(f"{p}.attn.o", o, SHARED)
        for ln in ("ln1", "ln2"):
            store.add(f"{p}.{ln}.gamma", np.ones(d), SHARED)
            store.add(f"{p}.{ln}.beta", np.zeros(d), SHARED)

        if cfg.variant is Variant.DENSE:
            members = [("", SHARED)]
        elif cfg.variant is Variant.MOE:
            members = [(f"expert{e}.", SHARED) for e in range(cfg.experts)]
        elif cfg.variant is Variant.SKILL_FFN:
            members = [(f"{s}.", str(s)) for s in tax.skills()]
        else:
            members = [(f"{s}.", str(s)) for s in tax.skills()[: tax.n_task]]
        for prefix, owner in members:
            store.add(f"{p}.ffn.{prefix}w1", w1, owner)
            store.add(f"{p}.ffn.{prefix}b1", np.zeros(h), owner)
            store.add(f"{p}.ffn.{prefix}w2", w2, owner)
            store.add(f"{p}.ffn.{prefix}b2", np.zeros(d), owner)
        if cfg.variant is Variant.MOE:
            grng = np.random.default_rng(_stable_seed(seed, "gate", i))
            store.add(f"{p}.ffn.gate", grng.normal(0.0, std, (d, cfg.experts)), SHARED)

    for spec in skills.tasks:
        add_head(store, cfg, spec, seed)
    return store


def _ffn(store: ParameterStore, prefix: str) -> FfnParams:
    return FfnParams(
        store[prefix + "w1"], store[prefix + "b1"], store[prefix + "w2"], store[prefix + "b2"]
    )


def ffn_bank(store: ParameterStore, cfg: ModelConfig, layer: int) -> SkillFfnBank:
    p = f"layer{layer}.ffn."
    tax = cfg.taxonomy
    if cfg.variant is Variant.MOE:
        return SkillFfnBank([_ffn(store, f"{p}expert{e}.") for e in range(cfg.experts)])
    skills = tax.skills() if cfg.variant is Variant.SKILL_FFN else tax.skills()[: tax.n_task]
    return SkillFfnBank([_ffn(store, f"{p}{s}.") for s in skills])


def skill_attention(store: ParameterStore, cfg: ModelConfig, layer: int) -> SkillMhaParams:
    p = f"layer{layer}.attn."
    triples = [
        (store[f"{p}l_s{j}.q"], store[f"{p}l_s{j}.k"], store[f"{p}l_s{j}.v"])
        for j in range(1, cfg.taxonomy.n_language + 1)
    ]
    return SkillMhaParams(triples, store[p + "o"], cfg.heads)


def dense_attention(store: ParameterStore, cfg: ModelConfig, layer: int) -> MhaParams:
    p = f"layer{layer}.attn."
    return MhaParams(store[p + "q"], store[p + "k"], store[p + "v"], store[p + "o"], cfg.heads)


# ----------------------------------------------------------------- forward


def _mask_bits(mask: Union[SkillMask, np.ndarray, tuple, None], cfg: ModelConfig) -> Optional[SkillMask]:
    if mask is None or isinstance(mask, SkillMask):
        return mask
    return SkillMask(tuple(int(b) for b in mask), cfg.taxonomy.n_task)


def encode(
    store: ParameterStore,
    cfg: ModelConfig,
    batch: Batch,
    mask: Optional[SkillMask] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Token + position + segment embeddings followed by post-LN blocks."""
    ids = np.asarray(batch.token_ids)
    b, t = ids.shape
    if t > cfg.max_len:
        raise ContractError(f"sequence length {t} exceeds model maximum {cfg.max_len}")
    mask = _mask_bits(mask, cfg)
    if cfg.variant in (Variant.SKILL_FFN, Variant.SKILL_FFN_MHA):
        if mask is None:
            raise ContractError(f"variant {cfg.variant.value} needs a skill mask")
        if len(mask.bits) != cfg.taxonomy.n_total:
            raise ContractError(f"mask of length {len(mask.bits)} for {cfg.taxonomy.n_total} skills")
        language = mask.language_index
    attn_mask = np.asarray(batch.attention_mask)
    positions = np.broadcast_to(np.arange(t), (b, t))
    x = add(
        add(take(store["embed.token"], ids), take(store["embed.position"], positions)),
        take(store["embed.segment"], np.asarray(batch.segment_ids)),
    )
    x = layer_norm(x, store["embed.ln.gamma"], store["embed.ln.beta"], cfg.ln_eps)
    x = dropout(x, cfg.dropout, rng)
    for i in range(cfg.layers):
        p = f"layer{i}"
        if cfg.variant is Variant.SKILL_FFN_MHA:
            a = skill_mha(x, skill_attention(store, cfg, i), language, attn_mask)
        else:
            a = dense_mha(x, dense_attention(store, cfg, i), attn_mask)
        x = layer_norm(
            add(x, dropout(a, cfg.dropout, rng)),
            store[f"{p}.ln1.gamma"], store[f"{p}.ln1.beta"], cfg.ln_eps,
        )
        if cfg.variant is Variant.DENSE:
            f = dense_ffn(x, _ffn(store, f"{p}.ffn."))
        elif cfg.variant is Variant.MOE:
            f = moe_ffn(x, ffn_bank(store, cfg, i), store[f"{p}.ffn.gate"])
        elif cfg.variant is Variant.SKILL_FFN:
            f = skill_ffn(x, ffn_bank(store, cfg, i), mask.bits)
        else:
            f = skill_ffn(x, ffn_bank(store, cfg, i), mask.task_bits)
        x = layer_norm(
            add(x, dropout(f, cfg.dropout, rng)),
            store[f"{p}.ln2.gamma"], store[f"{p}.ln2.beta"], cfg.ln_eps,
        )
    return x


def default_mask(spec: TaskSpec, cfg: ModelConfig) -> SkillMask:
    return SkillMask.from_skills(spec.skills, cfg.taxonomy)


def _check_labels(spec: TaskSpec, batch: Batch) -> None:
    labels = np.asarray(batch.labels)
    b, t = batch.token_ids.shape
    tt = spec.task_type
    expected = {
        TaskType.CLASSIFICATION: (b,),
        TaskType.PAIR_CLASSIFICATION: (b,),
        TaskType.NSP: (b,),
        TaskType.TOKEN_CLASSIFICATION: (b, t),
        TaskType.MLM: (b, t),
        TaskType.SPAN_EXTRACTION: (b, 2),
    }[tt]
    if labels.shape != expected:
        raise ValueError(
            f"{tt.value} task {spec.task_id!r} expects labels of shape {expected}, got {labels.shape}"
        )


def task_logits(
    store: ParameterStore,
    cfg: ModelConfig,
    batch: Batch,
    spec: TaskSpec,
    mask: Optional[SkillMask] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Head outputs.

    Sentence-level tasks: ``[b, C]``; tagging: ``[b, T, C]``; span extraction:
    ``[b, 2, T]`` (start row, end row, padding masked); MLM: ``[m, V]`` at the
    ``m`` labelled positions.
    """
    if batch.task_id != spec.task_id:
        raise ValueError(f"batch for {batch.task_id!r} passed with spec {spec.task_id!r}")
    _check_labels(spec, batch)
    if mask is None:
        mask = default_mask(spec, cfg)
    h = encode(store, cfg, batch, mask, rng)
    b, t, d = h.shape
    w, bias = store[f"head.{spec.task_id}.w"], store[f"head.{spec.task_id}.b"]
    tt = spec.task_type
    if tt.is_sentence_level:
        return linear(take(h, (slice(None), 0)), w, bias)
    if tt is TaskType.TOKEN_CLASSIFICATION:
        return linear(h, w, bias)
    if tt is TaskType.SPAN_EXTRACTION:
        scores = transpose(linear(h, w, bias), (0, 2, 1))
        pad = np.where(np.asarray(batch.attention_mask)[:, None, :] > 0, 0.0, _NEG)
        return add_const(scores, pad)
    # MLM
    flat = np.flatnonzero(np.asarray(batch.labels).reshape(-1) >= 0)
    return linear(take(reshape(h, (b * t, d)), flat), w, bias)


def forward_task(
    store: ParameterStore,
    cfg: ModelConfig,
    batch: Batch,
    spec: TaskSpec,
    mask: Optional[SkillMask] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Tensor]:
    """Return ``(logits, loss)`` for one task batch."""
    logits = task_logits(store, cfg, batch, spec, mask, rng)
    labels = np.asarray(batch.labels)
    tt = spec.task_type
    if tt.is_sentence_level:
        loss = cross_entropy(logits, labels)
    elif tt is TaskType.TOKEN_CLASSIFICATION:
        b, t, c = logits.shape
        flat = labels.reshape(-1)
        keep = np.flatnonzero(flat >= 0)
        loss = cross_entropy(take(reshape(logits, (b * t, c)), keep), flat[keep])
    elif tt is TaskType.SPAN_EXTRACTION:
        start = cross_entropy(take(logits, (slice(None), 0)), labels[:, 0])
        end = cross_entropy(take(logits, (slice(None), 1)), labels[:, 1])
        loss = scale(add(start, end), 0.5)
    else:
        flat = labels.reshape(-1)
        loss = cross_entropy(logits, flat[flat >= 0])
    return logits, loss


def best_span(start: np.ndarray, end: np.ndarray, valid: Optional[np.ndarray] = None) -> tuple[int, int]:
    """argmax of ``start[i] + end[j]`` over ``i <= j`` in one left-to-right pass."""
    n = len(start)
    if valid is None:
        valid = np.ones(n, dtype=bool)
    best, best_pair = -np.inf, (0, 0)
    run_i, run_val = -1, -np.inf
    for j in range(n):
        if not valid[j]:
            continue
        if start[j] > run_val:
            run_i, run_val = j, start[j]
        score = run_val + end[j]
        if score > best:
            best, best_pair = score, (run_i, j)
    return best_pair


def predict(
    store: ParameterStore,
    cfg: ModelConfig,
    batch: Batch,
    spec: TaskSpec,
    mask: Optional[SkillMask] = None,
) -> np.ndarray:
    """Class ``[b]``; tag ``[b, T]``; span ``[b, 2]``; MLM token ``[m]``."""
    with no_grad():
        logits = task_logits(store, cfg, batch, spec, mask).data
    tt = spec.task_type
    if tt is TaskType.SPAN_EXTRACTION:
        valid = np.asarray(batch.attention_mask) > 0
        return np.array([best_span(lg[0], lg[1], v) for lg, v in zip(logits, valid)], dtype=np.int64)
    return np.argmax(logits, axis=-1)

