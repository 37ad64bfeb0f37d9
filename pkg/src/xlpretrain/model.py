"""Post-norm Transformer encoder with an MLM head, first-token classification,
and a binary checkpoint format partitioned for embedding transplant.

Parameters live in a flat name -> Tensor dict. Names encode the partition:
`tok_emb` / `pos_emb` are the embedding tables, `emb_ln_*` and `blocks.*`
form the body, `lm_bias` (plus `lm_w` when untied) the LM head, and `head.*`
the task heads. Transplant and freezing operate on these partitions.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import IGNORE_INDEX, Tensor
from .optim import AdamState
from .seeding import STREAM_INIT, stream_rng
from .tokenization import Vocabulary

FORMAT_VERSION = 1
PARTITIONS = ("token_embeddings", "position_embeddings", "body", "lm_head", "task_heads")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn_inner: int = 0  # 0 means the conventional 4*hidden
    max_positions: int = 128
    dropout: float = 0.1
    tie_lm_head: bool = True
    use_positions: bool = True
    n_classes: int = 0

    def __post_init__(self):
        if self.ffn_inner == 0:
            object.__setattr__(self, "ffn_inner", 4 * self.hidden)
        if self.vocab_size <= 0 or self.layers < 1 or self.hidden < 1:
            raise ValueError("vocab_size, layers, and hidden must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1): {self.dropout}")
        if self.max_positions < 1 or self.n_classes < 0:
            raise ValueError("max_positions must be >= 1 and n_classes >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)


def partition_of(name: str) -> str:
    if name == "tok_emb":
        return "token_embeddings"
    if name == "pos_emb":
        return "position_embeddings"
    if name.startswith("emb_ln_") or name.startswith("blocks."):
        return "body"
    if name in ("lm_bias", "lm_w"):
        return "lm_head"
    if name.startswith("head."):
        return "task_heads"
    raise ValueError(f"tensor {name!r} belongs to no partition")


def expected_shapes(config: ModelConfig) -> dict:
    H, F, V = config.hidden, config.ffn_inner, config.vocab_size
    shapes = {
        "tok_emb": (V, H),
        "pos_emb": (config.max_positions, H),
        "emb_ln_g": (H,),
        "emb_ln_b": (H,),
        "lm_bias": (V,),
    }
    if not config.tie_lm_head:
        shapes["lm_w"] = (V, H)
    for i in range(config.layers):
        b = f"blocks.{i}."
        for n in ("q", "k", "v", "o"):
            shapes[b + n + "_w"] = (H, H)
            shapes[b + n + "_b"] = (H,)
        shapes[b + "ln1_g"] = (H,)
        shapes[b + "ln1_b"] = (H,)
        shapes[b + "w1"] = (H, F)
        shapes[b + "b1"] = (F,)
        shapes[b + "w2"] = (F, H)
        shapes[b + "b2"] = (H,)
        shapes[b + "ln2_g"] = (H,)
        shapes[b + "ln2_b"] = (H,)
    if config.n_classes:
        shapes["head.w"] = (H, config.n_classes)
        shapes["head.b"] = (config.n_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict:
    """Fresh parameters: weights ~ Normal(0, 0.02^2), biases 0, LN gains 1.

    The draw order is the fixed iteration order of expected_shapes, so equal
    (config, seed) always yields bit-identical tensors.
    """
    rng = stream_rng(seed, STREAM_INIT)
    params = {}
    for name, shape in expected_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            data = np.ones(shape)
        elif base.endswith("_b") or base in ("b", "b1", "b2") or name == "lm_bias":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _linear(x2d: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x2d, w), b)


def forward(
    params: dict,
    config: ModelConfig,
    input_ids: np.ndarray,
    attention_mask: np.ndarray | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    probe: dict | None = None,
) -> list:
    """All L+1 hidden states: index 0 is the embedding output, index L the
    final encoder state, each (B, T, H). Padded key positions get zero
    attention from every query. Pass `probe` to capture per-layer attention
    probabilities (forward values only).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval': {mode!r}")
    ids = np.asarray(input_ids)
    if ids.ndim != 2:
        raise ValueError("input_ids must be (B, T)")
    B, T = ids.shape
    if T > config.max_positions:
        raise ValueError(f"sequence length {T} exceeds max_positions {config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id outside [0, {config.vocab_size})")
    training = mode == "train"
    if training and config.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    if attention_mask is None:
        attention_mask = np.ones((B, T), dtype=bool)

    H, A, L = config.hidden, config.heads, config.layers
    dh = H // A
    p = config.dropout

    x = ag.gather_rows(params["tok_emb"], ids)
    if config.use_positions:
        x = ag.add(x, ag.gather_rows(params["pos_emb"], np.arange(T)))
    x = ag.layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    x = ag.dropout(x, p, rng, training)
    hiddens = [x]

    neg = np.where(attention_mask, 0.0, -1e9)[:, None, None, :].astype(x.data.dtype)
    x2 = ag.reshape(x, (B * T, H))
    for i in range(L):
        blk = {k: params[f"blocks.{i}.{k}"] for k in (
            "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b",
            "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
        )}

        def heads(t2d):
            return ag.transpose(ag.reshape(t2d, (B, T, A, dh)), (0, 2, 1, 3))

        q = heads(_linear(x2, blk["q_w"], blk["q_b"]))
        k = heads(_linear(x2, blk["k_w"], blk["k_b"]))
        v = heads(_linear(x2, blk["v_w"], blk["v_b"]))
        scores = ag.mul_scalar(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = ag.softmax(ag.add_const(scores, neg), axis=-1)
        if probe is not None:
            probe.setdefault("attention", []).append(probs.data.copy())
        probs = ag.dropout(probs, p, rng, training)
        ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (B * T, H))
        attn = ag.dropout(_linear(ctx, blk["o_w"], blk["o_b"]), p, rng, training)
        x2 = ag.layer_norm(ag.add(x2, attn), blk["ln1_g"], blk["ln1_b"])
        ff = _linear(ag.gelu(_linear(x2, blk["w1"], blk["b1"])), blk["w2"], blk["b2"])
        ff = ag.dropout(ff, p, rng, training)
        x2 = ag.layer_norm(ag.add(x2, ff), blk["ln2_g"], blk["ln2_b"])
        hiddens.append(ag.reshape(x2, (B, T, H)))
    return hiddens


def _decoder_matrix(params: dict, config: ModelConfig) -> Tensor:
    return params["tok_emb"] if config.tie_lm_head else params["lm_w"]


def mlm_logits(params: dict, config: ModelConfig, final_hidden: Tensor, flat_positions: np.ndarray | None = None) -> Tensor:
    """Vocabulary logits from the final hidden state.

    With flat_positions (indices into the flattened B*T axis) only those
    rows are projected, which is the cheap path for MLM training; otherwise
    returns the full (B, T, V) block.
    """
    B, T, H = final_hidden.shape
    flat = ag.reshape(final_hidden, (B * T, H))
    if flat_positions is not None:
        flat = ag.gather_rows(flat, flat_positions)
    logits = ag.add(ag.matmul(flat, ag.transpose(_decoder_matrix(params, config), (1, 0))), params["lm_bias"])
    if flat_positions is None:
        logits = ag.reshape(logits, (B, T, config.vocab_size))
    return logits


def mlm_loss(params: dict, config: ModelConfig, batch, mode: str = "train", rng=None):
    """Masked-position cross-entropy for an MlmBatch; returns (loss, n_predicted).

    Logits are computed only at selected positions, so the projection cost
    scales with the corruption rate instead of the sequence length.
    """
    hiddens = forward(params, config, batch.input_ids, batch.attention_mask, mode, rng)
    targets = batch.target_ids.reshape(-1)
    flat_positions = np.flatnonzero(targets != IGNORE_INDEX)
    logits = mlm_logits(params, config, hiddens[-1], flat_positions)
    loss = ag.cross_entropy(logits, targets[flat_positions])
    return loss, len(flat_positions)


def classify(params: dict, config: ModelConfig, final_hidden: Tensor) -> Tensor:
    """Label logits from the first-token pooled representation."""
    if "head.w" not in params:
        raise ValueError("no task head present; call add_task_head first")
    B, T, H = final_hidden.shape
    if params["head.w"].shape[0] != H:
        raise ValueError(f"task head expects hidden {params['head.w'].shape[0]}, model has {H}")
    flat = ag.reshape(final_hidden, (B * T, H))
    pooled = ag.gather_rows(flat, np.arange(B) * T)
    return _linear(pooled, params["head.w"], params["head.b"])


def add_task_head(params: dict, config: ModelConfig, n_classes: int, seed: int) -> ModelConfig:
    """Attach a fresh classification head; returns the updated config."""
    if n_classes < 2:
        raise ValueError("a classification head needs at least 2 classes")
    rng = stream_rng(seed, STREAM_INIT, 1)
    params["head.w"] = Tensor(rng.normal(0.0, 0.02, size=(config.hidden, n_classes)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(n_classes), requires_grad=True)
    return dataclasses.replace(config, n_classes=n_classes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    vocab: Vocabulary
    params: dict
    optimizer: AdamState | None = None
    metadata: dict = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.metadata is None:
            self.metadata = {}


_ALIGN = 64


def _aligned(offset: int) -> int:
    return (offset + _ALIGN - 1) // _ALIGN * _ALIGN


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Length-prefixed JSON header, then 64-byte-aligned little-endian
    float32 tensors; written to a temp file and atomically renamed."""
    shapes = expected_shapes(ckpt.config)
    names = sorted(ckpt.params)
    for name in names:
        got = tuple(ckpt.params[name].shape)
        if name not in shapes:
            raise CheckpointShapeError(f"tensor {name!r} not derivable from config")
        if got != shapes[name]:
            raise CheckpointShapeError(f"tensor {name!r} has shape {got}, config implies {shapes[name]}")
        partition_of(name)  # every tensor must belong to a partition

    tensors = {name: ckpt.params[name].data for name in names}
    optimizer = None
    if ckpt.optimizer is not None:
        st = ckpt.optimizer
        optimizer = {
            "lr_base": st.lr_base, "beta1": st.beta1, "beta2": st.beta2,
            "eps": st.eps, "weight_decay": st.weight_decay, "clip_norm": st.clip_norm,
            "warmup_steps": st.warmup_steps, "total_steps": st.total_steps,
            "step": st.step, "skipped_steps": st.skipped_steps,
        }
        for name in names:
            if name in st.m:
                tensors[f"opt.m.{name}"] = st.m[name]
                tensors[f"opt.v.{name}"] = st.v[name]

    directory = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        offset = _aligned(offset)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4

    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "vocabulary": list(ckpt.vocab.tokens),
        "metadata": ckpt.metadata,
        "optimizer": optimizer,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        payload_start = _aligned(8 + len(header_bytes))
        f.write(b"\x00" * (payload_start - 8 - len(header_bytes)))
        pos = 0
        for entry in directory:
            f.write(b"\x00" * (entry["offset"] - pos))
            data = np.ascontiguousarray(tensors[entry["name"]], dtype="<f4").tobytes()
            f.write(data)
            pos = entry["offset"] + len(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise CheckpointCorruptError("file too short for a header length prefix")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise CheckpointCorruptError("declared header extends past end of file")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"unreadable header: {e}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version!r}, reader supports {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocabulary"])
        directory = header["tensors"]
        metadata = header["metadata"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointCorruptError(f"malformed header: {e}") from None
    if config.vocab_size != vocab.size:
        raise CheckpointShapeError(f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}")

    payload_start = _aligned(8 + header_len)
    tensors = {}
    for entry in directory:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = payload_start + entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise CheckpointCorruptError(f"tensor {entry['name']!r} extends past end of file")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()

    shapes = expected_shapes(config)
    params = {}
    for name, arr in tensors.items():
        if name.startswith("opt."):
            continue
        if name not in shapes:
            raise CheckpointShapeError(f"tensor {name!r} not derivable from config")
        if arr.shape != shapes[name]:
            raise CheckpointShapeError(f"tensor {name!r} has shape {arr.shape}, config implies {shapes[name]}")
        params[name] = Tensor(arr, requires_grad=True)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointShapeError(f"missing tensors: {sorted(missing)}")

    optimizer = None
    if header.get("optimizer") is not None:
        opt = header["optimizer"]
        optimizer = AdamState(
            lr_base=opt["lr_base"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
            weight_decay=opt["weight_decay"], clip_norm=opt["clip_norm"],
            warmup_steps=opt["warmup_steps"], total_steps=opt["total_steps"],
            step=opt["step"], skipped_steps=opt["skipped_steps"],
        )
        for name in params:
            m = tensors.get(f"opt.m.{name}")
            v = tensors.get(f"opt.v.{name}")
            if m is not None:
                optimizer.m[name] = m
                optimizer.v[name] = v

    return ModelCheckpoint(config, vocab, params, optimizer, metadata, version)
