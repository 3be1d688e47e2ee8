"""Small bidirectional transformer encoder in plain numpy.

The model is the usual recipe: summed token/position/segment embeddings,
a stack of post-norm attention + feed-forward blocks, a per-position
vocabulary head and a single-logit pair head read from the CLS state.
Everything runs at float64 and the backward pass is written out by hand,
so analytic gradients can be checked against finite differences to tight
tolerance.

Padding is excluded from attention with an additive -inf mask before the
softmax, which makes the weight on PAD keys exactly zero: hidden states at
non-PAD positions are bit-identical no matter what token ids sit in the
padded tail.

Checkpoint layout (version TRENC001, little-endian):
    magic            8 bytes  b"TRENC001"
    config           6 x uint32 (vocab_size, d_model, n_heads, n_layers,
                     d_ff, max_len) + 2 x float64 (dropout_rate,
                     layer_norm_epsilon)
    tensor count     uint32
    per tensor       uint16 name length, utf-8 name, uint8 ndim,
                     ndim x uint32 dims, float64 data in C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, expit

from .ioutil import atomic_write_bytes
from .errors import (
    ArtifactFormatError,
    CheckpointMismatchError,
    InvalidConfigError,
    NoRecordedForwardError,
    PositionOutOfRangeError,
    ShapeMismatchError,
)
from .tokenizer import TokenSequence

CHECKPOINT_MAGIC = b"TRENC001"

INIT_SCALE = 0.02
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 48
    dropout_rate: float = 0.0
    layer_norm_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_len < 5:
            raise InvalidConfigError(f"max_len must be >= 5, got {self.max_len}")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.layer_norm_epsilon <= 0.0:
            raise InvalidConfigError("layer_norm_epsilon must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class EncoderParams:
    """Named parameter tensors plus the config that fixes their shapes."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def names(self) -> list[str]:
        return list(self.tensors)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class ForwardTrace:
    """Outputs of one forward pass plus the cache the backward pass needs."""

    hidden_states: np.ndarray
    attention_weights: tuple[np.ndarray, ...]
    pooled_cls: np.ndarray
    cache: dict | None = field(default=None, repr=False)


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes; also fixes serialization order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (c.vocab_size, c.d_model),
        "position_embedding": (c.max_len, c.d_model),
        "segment_embedding": (2, c.d_model),
    }
    for i in range(c.n_layers):
        p = f"layer{i}"
        shapes[f"{p}.attn.w_q"] = (c.d_model, c.d_model)
        shapes[f"{p}.attn.b_q"] = (c.d_model,)
        shapes[f"{p}.attn.w_k"] = (c.d_model, c.d_model)
        shapes[f"{p}.attn.b_k"] = (c.d_model,)
        shapes[f"{p}.attn.w_v"] = (c.d_model, c.d_model)
        shapes[f"{p}.attn.b_v"] = (c.d_model,)
        shapes[f"{p}.attn.w_o"] = (c.d_model, c.d_model)
        shapes[f"{p}.attn.b_o"] = (c.d_model,)
        shapes[f"{p}.ln1.gain"] = (c.d_model,)
        shapes[f"{p}.ln1.bias"] = (c.d_model,)
        shapes[f"{p}.ffn.w1"] = (c.d_model, c.d_ff)
        shapes[f"{p}.ffn.b1"] = (c.d_ff,)
        shapes[f"{p}.ffn.w2"] = (c.d_ff, c.d_model)
        shapes[f"{p}.ffn.b2"] = (c.d_model,)
        shapes[f"{p}.ln2.gain"] = (c.d_model,)
        shapes[f"{p}.ln2.bias"] = (c.d_model,)
    shapes["mlm_head.weight"] = (c.d_model, c.vocab_size)
    shapes["mlm_head.bias"] = (c.vocab_size,)
    shapes["np_head.weight"] = (c.d_model, 1)
    shapes["np_head.bias"] = (1,)
    return shapes


def init_params(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    """Gaussian(0, 0.02) weight matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gain",):
            tensors[name] = np.ones(shape)
        elif leaf in ("bias", "b_q", "b_k", "b_v", "b_o", "b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, INIT_SCALE, size=shape)
    return EncoderParams(config, tensors)


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    return cdf + x * pdf


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Per-position normalization. Returns (out, x_hat, inv_std) for backward."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv
    return gain * x_hat + bias, x_hat, inv


def layer_norm_backward(d_out, x_hat, inv, gain):
    """Gradients of layer_norm: returns (d_x, d_gain, d_bias)."""
    d_hat = d_out * gain
    m1 = d_hat.mean(axis=-1, keepdims=True)
    m2 = (d_hat * x_hat).mean(axis=-1, keepdims=True)
    d_x = inv * (d_hat - m1 - x_hat * m2)
    return d_x, (d_out * x_hat).sum(axis=0), d_out.sum(axis=0)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dk = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dk)


def forward(
    params: EncoderParams,
    seq: TokenSequence,
    record: bool = True,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run the encoder over one fixed-length sequence.

    With ``record`` the trace keeps every intermediate needed by the
    backward pass; embedding-only callers can switch it off. Dropout is
    applied only when both ``rng`` is given and the config rate is nonzero,
    so inference is deterministic by default.
    """
    c = params.config
    if len(seq) != c.max_len:
        raise ShapeMismatchError(f"sequence length {len(seq)} != max_len {c.max_len}")
    ids = np.asarray(seq.ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= c.vocab_size:
        raise ShapeMismatchError(f"token ids must lie in [0, {c.vocab_size})")
    segments = np.asarray(seq.segments, dtype=np.int64)
    attn_mask = np.asarray(seq.attn_mask, dtype=np.float64)
    pad_keys = attn_mask == 0.0

    drop_rate = c.dropout_rate if rng is not None else 0.0

    x = (
        params["token_embedding"][ids]
        + params["position_embedding"]
        + params["segment_embedding"][segments]
    )
    cache: dict | None = None
    if record:
        cache = {"ids": ids, "segments": segments, "pad_keys": pad_keys, "layers": []}

    scale = 1.0 / np.sqrt(c.d_head)
    all_attn: list[np.ndarray] = []
    for i in range(c.n_layers):
        p = f"layer{i}"
        q = _split_heads(x @ params[f"{p}.attn.w_q"] + params[f"{p}.attn.b_q"], c.n_heads)
        k = _split_heads(x @ params[f"{p}.attn.w_k"] + params[f"{p}.attn.b_k"], c.n_heads)
        v = _split_heads(x @ params[f"{p}.attn.w_v"] + params[f"{p}.attn.b_v"], c.n_heads)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores[:, :, pad_keys] = -np.inf
        # exp(-inf) underflows to exactly 0, so PAD keys get weight 0.0
        shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = shifted / shifted.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        attn_out = ctx @ params[f"{p}.attn.w_o"] + params[f"{p}.attn.b_o"]
        drop1 = None
        if drop_rate > 0.0:
            drop1 = (rng.random(attn_out.shape) >= drop_rate) / (1.0 - drop_rate)
            attn_out = attn_out * drop1
        ln1_out, ln1_hat, ln1_inv = layer_norm(
            x + attn_out, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], c.layer_norm_epsilon
        )
        h1 = ln1_out @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"]
        a1 = gelu(h1)
        ffn_out = a1 @ params[f"{p}.ffn.w2"] + params[f"{p}.ffn.b2"]
        drop2 = None
        if drop_rate > 0.0:
            drop2 = (rng.random(ffn_out.shape) >= drop_rate) / (1.0 - drop_rate)
            ffn_out = ffn_out * drop2
        ln2_out, ln2_hat, ln2_inv = layer_norm(
            ln1_out + ffn_out,
            params[f"{p}.ln2.gain"],
            params[f"{p}.ln2.bias"],
            c.layer_norm_epsilon,
        )
        all_attn.append(attn)
        if cache is not None:
            cache["layers"].append(
                {
                    "x_in": x,
                    "q": q,
                    "k": k,
                    "v": v,
                    "attn": attn,
                    "ctx": ctx,
                    "drop1": drop1,
                    "ln1_hat": ln1_hat,
                    "ln1_inv": ln1_inv,
                    "ln1_out": ln1_out,
                    "h1": h1,
                    "a1": a1,
                    "drop2": drop2,
                    "ln2_hat": ln2_hat,
                    "ln2_inv": ln2_inv,
                }
            )
        x = ln2_out

    if cache is not None:
        cache["h_final"] = x
    return ForwardTrace(
        hidden_states=x,
        attention_weights=tuple(all_attn),
        pooled_cls=x[0],
        cache=cache,
    )


def mlm_distribution(params: EncoderParams, trace: ForwardTrace, position: int) -> np.ndarray:
    """Vocabulary distribution predicted at one position (softmax row)."""
    if not 0 <= position < params.config.max_len:
        raise PositionOutOfRangeError(f"position {position} outside [0, {params.config.max_len})")
    logits = trace.hidden_states[position] @ params["mlm_head.weight"] + params["mlm_head.bias"]
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def np_probability(params: EncoderParams, trace: ForwardTrace) -> float:
    """Probability that the encoded pair is a true co-purchase.

    Large logits saturate the sigmoid to exactly 0.0 or 1.0 in float64; the
    result is nudged back inside the open interval so callers can rely on
    0 < p < 1.
    """
    logit = trace.pooled_cls @ params["np_head.weight"][:, 0] + params["np_head.bias"][0]
    p = float(expit(logit))
    return min(max(p, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))


def _nll(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], computed without forming probabilities."""
    m = logits.max()
    return float(m + np.log(np.sum(np.exp(logits - m))) - logits[label])


def sequence_loss(
    params: EncoderParams,
    trace: ForwardTrace,
    mlm_targets: list[tuple[int, int]],
    np_label: int | None,
) -> tuple[float, float]:
    """Loss terms for one sequence: (sum of masked-token NLLs, pair BCE).

    The pair term is log(1 + e^z) - label*z, the exact binary cross-entropy
    of sigmoid(z); it stays finite for any finite logit.
    """
    mlm_sum = 0.0
    if mlm_targets:
        w, b = params["mlm_head.weight"], params["mlm_head.bias"]
        for position, label in mlm_targets:
            mlm_sum += _nll(trace.hidden_states[position] @ w + b, label)
    np_sum = 0.0
    if np_label is not None:
        z = float(trace.pooled_cls @ params["np_head.weight"][:, 0] + params["np_head.bias"][0])
        np_sum = float(np.logaddexp(0.0, z) - np_label * z)
    return mlm_sum, np_sum


def loss_and_grads(
    params: EncoderParams,
    trace: ForwardTrace,
    mlm_targets: list[tuple[int, int]],
    np_label: int | None = None,
    mlm_scale: float = 1.0,
    np_scale: float = 1.0,
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Losses plus gradients of mlm_scale*mlm_sum + np_scale*np_sum.

    The scales let a batch driver weight each sequence's contribution
    (for example 1/total masked positions) while accumulating gradients.
    """
    if trace.cache is None:
        raise NoRecordedForwardError("forward was run without record=True")
    c = params.config
    cache = trace.cache
    grads = zero_grads(params)
    if not mlm_targets and np_label is None:
        return 0.0, 0.0, grads

    h_final = cache["h_final"]
    d_h = np.zeros_like(h_final)
    mlm_sum = 0.0
    if mlm_targets:
        positions = np.asarray([p for p, _ in mlm_targets], dtype=np.int64)
        labels = np.asarray([l for _, l in mlm_targets], dtype=np.int64)
        logits = h_final[positions] @ params["mlm_head.weight"] + params["mlm_head.bias"]
        m = logits.max(axis=-1, keepdims=True)
        shifted = np.exp(logits - m)
        total = shifted.sum(axis=-1, keepdims=True)
        rows = np.arange(len(positions))
        mlm_sum = float(np.sum(m[:, 0] + np.log(total[:, 0]) - logits[rows, labels]))
        d_logits = shifted / total
        d_logits[rows, labels] -= 1.0
        d_logits *= mlm_scale
        grads["mlm_head.weight"] += h_final[positions].T @ d_logits
        grads["mlm_head.bias"] += d_logits.sum(axis=0)
        np.add.at(d_h, positions, d_logits @ params["mlm_head.weight"].T)

    np_sum = 0.0
    if np_label is not None:
        z = float(h_final[0] @ params["np_head.weight"][:, 0] + params["np_head.bias"][0])
        np_sum = float(np.logaddexp(0.0, z) - np_label * z)
        d_z = (expit(z) - np_label) * np_scale
        grads["np_head.weight"][:, 0] += h_final[0] * d_z
        grads["np_head.bias"][0] += d_z
        d_h[0] += params["np_head.weight"][:, 0] * d_z

    scale = 1.0 / np.sqrt(c.d_head)
    for i in reversed(range(c.n_layers)):
        p = f"layer{i}"
        lc = cache["layers"][i]
        d_res2, d_g2, d_b2 = layer_norm_backward(
            d_h, lc["ln2_hat"], lc["ln2_inv"], params[f"{p}.ln2.gain"]
        )
        grads[f"{p}.ln2.gain"] += d_g2
        grads[f"{p}.ln2.bias"] += d_b2

        d_ffn_out = d_res2 if lc["drop2"] is None else d_res2 * lc["drop2"]
        grads[f"{p}.ffn.w2"] += lc["a1"].T @ d_ffn_out
        grads[f"{p}.ffn.b2"] += d_ffn_out.sum(axis=0)
        d_h1 = (d_ffn_out @ params[f"{p}.ffn.w2"].T) * gelu_grad(lc["h1"])
        grads[f"{p}.ffn.w1"] += lc["ln1_out"].T @ d_h1
        grads[f"{p}.ffn.b1"] += d_h1.sum(axis=0)
        d_ln1_out = d_res2 + d_h1 @ params[f"{p}.ffn.w1"].T

        d_res1, d_g1, d_b1 = layer_norm_backward(
            d_ln1_out, lc["ln1_hat"], lc["ln1_inv"], params[f"{p}.ln1.gain"]
        )
        grads[f"{p}.ln1.gain"] += d_g1
        grads[f"{p}.ln1.bias"] += d_b1

        d_attn_out = d_res1 if lc["drop1"] is None else d_res1 * lc["drop1"]
        grads[f"{p}.attn.w_o"] += lc["ctx"].T @ d_attn_out
        grads[f"{p}.attn.b_o"] += d_attn_out.sum(axis=0)
        d_ctx = _split_heads(d_attn_out @ params[f"{p}.attn.w_o"].T, c.n_heads)

        attn = lc["attn"]
        d_attn = d_ctx @ lc["v"].transpose(0, 2, 1)
        d_v = attn.transpose(0, 2, 1) @ d_ctx
        # softmax rows: PAD-key columns have weight 0, so they get grad 0
        d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
        d_q = _merge_heads((d_scores @ lc["k"]) * scale)
        d_k = _merge_heads((d_scores.transpose(0, 2, 1) @ lc["q"]) * scale)
        d_v = _merge_heads(d_v)

        x_in = lc["x_in"]
        d_x = d_res1.copy()
        for name, d_proj in (("q", d_q), ("k", d_k), ("v", d_v)):
            grads[f"{p}.attn.w_{name}"] += x_in.T @ d_proj
            grads[f"{p}.attn.b_{name}"] += d_proj.sum(axis=0)
            d_x += d_proj @ params[f"{p}.attn.w_{name}"].T
        d_h = d_x

    np.add.at(grads["token_embedding"], cache["ids"], d_h)
    grads["position_embedding"] += d_h
    np.add.at(grads["segment_embedding"], cache["segments"], d_h)
    return mlm_sum, np_sum, grads


def backward(
    params: EncoderParams,
    trace: ForwardTrace,
    mlm_targets: list[tuple[int, int]],
    np_label: int | None = None,
    mlm_scale: float = 1.0,
    np_scale: float = 1.0,
) -> dict[str, np.ndarray]:
    """Gradient of the recorded sequence's loss for every parameter tensor."""
    return loss_and_grads(params, trace, mlm_targets, np_label, mlm_scale, np_scale)[2]


# --- checkpoint io ---


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Write params to ``path`` atomically in the TRENC001 layout."""
    c = params.config
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<6I2d",
            c.vocab_size,
            c.d_model,
            c.n_heads,
            c.n_layers,
            c.d_ff,
            c.max_len,
            c.dropout_rate,
            c.layer_norm_epsilon,
        ),
        struct.pack("<I", len(params.tensors)),
    ]
    for name, tensor in params.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


class ByteReader:
    """Cursor over a binary blob that fails loudly on truncation."""

    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.source = source
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise ArtifactFormatError(f"{self.source}: truncated at byte {self.offset}")
        piece = self.blob[self.offset : self.offset + n]
        self.offset += n
        return piece

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, expected_config: EncoderConfig | None = None) -> EncoderParams:
    """Read a TRENC001 checkpoint; any structural inconsistency fails loudly."""
    reader = ByteReader(Path(path).read_bytes(), str(path))
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ArtifactFormatError(f"{path}: bad magic, not a checkpoint file")
    v, d_model, n_heads, n_layers, d_ff, max_len, dropout, eps = reader.unpack("<6I2d")
    try:
        config = EncoderConfig(v, d_model, n_heads, n_layers, d_ff, max_len, dropout, eps)
    except InvalidConfigError as exc:
        raise ArtifactFormatError(f"{path}: invalid stored config ({exc})") from None
    if expected_config is not None and config != expected_config:
        raise CheckpointMismatchError(
            f"{path}: stored config {config} != expected {expected_config}"
        )
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(size * 8), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    expected_shapes = parameter_shapes(config)
    if set(tensors) != set(expected_shapes):
        raise CheckpointMismatchError(f"{path}: tensor names do not match the stored config")
    for name, shape in expected_shapes.items():
        if tensors[name].shape != shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}"
            )
    return EncoderParams(config, {name: tensors[name] for name in expected_shapes})
