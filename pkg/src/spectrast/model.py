"""The spectral transformer ST(i,j,k) / ST-pe(i,j,k).

Tokenization is one token per wavenumber point: a shared scalar -> d_model
linear embedding, optionally plus a learned positional table. Encoder blocks
are pre-norm with residual connections (switchable), followed by a final
layer norm, attention-based sequence pooling, and a linear classifier head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import CheckpointError, ConfigError, ShapeError
from .nn import Tensor

_CKPT_MAGIC = b"STCKPT\x00\x01"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class STConfig:
    depth_i: int = 1
    heads_j: int = 10
    mlp_ratio_k: int = 3
    d_model: int = 40
    use_positional_embedding: bool = True
    dropout_p: float = 0.1
    n_classes: int = 15
    seq_len: int = 480
    residual: bool = True

    def __post_init__(self):
        if self.depth_i < 1 or self.heads_j < 1 or self.mlp_ratio_k < 1:
            raise ConfigError("depth, heads, and mlp ratio must all be >= 1")
        if self.d_model % self.heads_j != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.heads_j} heads"
            )
        if self.n_classes < 2 or self.seq_len < 1:
            raise ConfigError("need n_classes >= 2 and seq_len >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")

    def to_dict(self):
        return {
            "depth_i": self.depth_i,
            "heads_j": self.heads_j,
            "mlp_ratio_k": self.mlp_ratio_k,
            "d_model": self.d_model,
            "use_positional_embedding": self.use_positional_embedding,
            "dropout_p": self.dropout_p,
            "n_classes": self.n_classes,
            "seq_len": self.seq_len,
            "residual": self.residual,
        }

    @staticmethod
    def from_dict(d):
        return STConfig(**d)


@dataclass
class MHAParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mha: MHAParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class ModelParams:
    embed_w: Tensor
    embed_b: Tensor
    pos: Tensor | None
    blocks: list[BlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    pool_u: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self):
        """(name, Tensor) pairs in fixed declaration order."""
        yield "embed_w", self.embed_w
        yield "embed_b", self.embed_b
        if self.pos is not None:
            yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.ln1_gamma", blk.ln1_gamma
            yield f"block{i}.ln1_beta", blk.ln1_beta
            yield f"block{i}.mha.wq", blk.mha.wq
            yield f"block{i}.mha.bq", blk.mha.bq
            yield f"block{i}.mha.wk", blk.mha.wk
            yield f"block{i}.mha.bk", blk.mha.bk
            yield f"block{i}.mha.wv", blk.mha.wv
            yield f"block{i}.mha.bv", blk.mha.bv
            yield f"block{i}.mha.wo", blk.mha.wo
            yield f"block{i}.mha.bo", blk.mha.bo
            yield f"block{i}.ln2_gamma", blk.ln2_gamma
            yield f"block{i}.ln2_beta", blk.ln2_beta
            yield f"block{i}.mlp_w1", blk.mlp_w1
            yield f"block{i}.mlp_b1", blk.mlp_b1
            yield f"block{i}.mlp_w2", blk.mlp_w2
            yield f"block{i}.mlp_b2", blk.mlp_b2
        yield "final_gamma", self.final_gamma
        yield "final_beta", self.final_beta
        yield "pool_u", self.pool_u
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def n_parameters(self):
        return sum(t.data.size for _, t in self.named_parameters())

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()

    def copy(self):
        def clone(t):
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        blocks = []
        for blk in self.blocks:
            blocks.append(
                BlockParams(
                    clone(blk.ln1_gamma),
                    clone(blk.ln1_beta),
                    MHAParams(*(clone(getattr(blk.mha, f)) for f in
                                ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"))),
                    clone(blk.ln2_gamma),
                    clone(blk.ln2_beta),
                    clone(blk.mlp_w1),
                    clone(blk.mlp_b1),
                    clone(blk.mlp_w2),
                    clone(blk.mlp_b2),
                )
            )
        return ModelParams(
            clone(self.embed_w),
            clone(self.embed_b),
            clone(self.pos) if self.pos is not None else None,
            blocks,
            clone(self.final_gamma),
            clone(self.final_beta),
            clone(self.pool_u),
            clone(self.head_w),
            clone(self.head_b),
        )


def parameter_count(cfg: STConfig) -> int:
    """Closed-form parameter count for a config."""
    d, k, s, c = cfg.d_model, cfg.mlp_ratio_k, cfg.seq_len, cfg.n_classes
    n = d + d  # scalar embedding weight row + bias
    if cfg.use_positional_embedding:
        n += s * d
    per_block = (
        2 * d  # ln1
        + 4 * (d * d + d)  # q, k, v, o projections
        + 2 * d  # ln2
        + d * (k * d) + k * d  # mlp in
        + (k * d) * d + d  # mlp out
    )
    n += cfg.depth_i * per_block
    n += 2 * d  # final ln
    n += d  # pooling score vector
    n += d * c + c  # head
    return n


def _trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) truncated at +-bound*std, by redraw."""
    out = rng.standard_normal(shape) * std
    lim = bound * std
    bad = np.abs(out) > lim
    while bad.any():
        out[bad] = rng.standard_normal(bad.sum()) * std
        bad = np.abs(out) > lim
    return out


def init(cfg: STConfig, seed: int) -> ModelParams:
    """Truncated-normal weights (std 0.02), zero biases.

    The positional table is also truncated-normal: peak position carries most
    of the class information here, so a zero-initialized table leaves the
    attention and pooling scores position-blind for many early steps. The
    scalar-to-vector embedding uses a much larger std (0.5): intensities live
    in [0, 1], and injecting them at the same tiny scale as every other weight
    buries the signal under the positional table, which measurably stalls
    early training.
    """
    rng = np.random.default_rng(seed)
    d, k = cfg.d_model, cfg.mlp_ratio_k

    def w(*shape, std=0.02):
        return Tensor(_trunc_normal(rng, shape, std=std), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    blocks = []
    for _ in range(cfg.depth_i):
        blocks.append(
            BlockParams(
                ones(d), zeros(d),
                MHAParams(
                    w(d, d), zeros(d), w(d, d), zeros(d),
                    w(d, d), zeros(d), w(d, d), zeros(d),
                ),
                ones(d), zeros(d),
                w(d, k * d), zeros(k * d),
                w(k * d, d), zeros(d),
            )
        )
    return ModelParams(
        embed_w=w(1, d, std=0.5),
        embed_b=zeros(d),
        pos=w(cfg.seq_len, d) if cfg.use_positional_embedding else None,
        blocks=blocks,
        final_gamma=ones(d),
        final_beta=zeros(d),
        pool_u=w(d, 1),
        head_w=w(d, cfg.n_classes),
        head_b=zeros(cfg.n_classes),
    )


def embed(batch, params: ModelParams, cfg: STConfig, training=False, rng=None):
    """Map [batch, seq_len] intensities to [batch, seq_len, d_model] tokens."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[-1] != cfg.seq_len:
        raise ShapeError(
            f"input length {x.shape[-1]} does not match seq_len {cfg.seq_len}"
        )
    b, s = x.shape
    tokens = nn.linear(x.reshape(b, s, 1), params.embed_w, params.embed_b)
    if cfg.use_positional_embedding and params.pos is not None:
        tokens = tokens + params.pos
    if training and cfg.dropout_p > 0.0:
        if rng is None:
            raise ConfigError("training-mode embed needs an rng for dropout")
        tokens = nn.dropout(tokens, cfg.dropout_p, training=True, rng=rng)
    return tokens


def forward(batch, params: ModelParams, cfg: STConfig, training=False, rng=None,
            pool_weights_out: list | None = None,
            attn_weights_out: list | None = None) -> Tensor:
    """Full ST forward pass: [batch, seq_len] -> logits [batch, n_classes]."""
    h = embed(batch, params, cfg, training, rng)
    for blk in params.blocks:
        attended = nn.multi_head_attention(
            nn.layer_norm(h, blk.ln1_gamma, blk.ln1_beta),
            blk.mha, cfg.heads_j, attn_weights_out,
        )
        h = h + attended if cfg.residual else attended
        mlp_in = nn.layer_norm(h, blk.ln2_gamma, blk.ln2_beta)
        mlp_out = nn.linear(
            nn.gelu(nn.linear(mlp_in, blk.mlp_w1, blk.mlp_b1)),
            blk.mlp_w2, blk.mlp_b2,
        )
        h = h + mlp_out if cfg.residual else mlp_out
    h = nn.layer_norm(h, params.final_gamma, params.final_beta)
    scores = nn.linear(h, params.pool_u)  # [b, s, 1]
    weights = nn.softmax(scores.transpose((0, 2, 1)))  # [b, 1, s]
    if pool_weights_out is not None:
        pool_weights_out.append(weights.data[:, 0, :].copy())
    pooled = (weights @ h).reshape(h.shape[0], cfg.d_model)
    return nn.linear(pooled, params.head_w, params.head_b)


def predict_proba(batch, params: ModelParams, cfg: STConfig, chunk=64):
    """Inference class probabilities as an ndarray [batch, n_classes]."""
    batch = np.asarray(batch, dtype=nn.get_default_dtype())
    outs = []
    for lo in range(0, len(batch), chunk):
        logits = forward(batch[lo : lo + chunk], params, cfg, training=False)
        outs.append(nn.softmax(logits).data)
    return np.concatenate(outs, axis=0)


def predict(batch, params: ModelParams, cfg: STConfig, chunk=64):
    return predict_proba(batch, params, cfg, chunk).argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON config, then raw little-endian float64
# arrays in declaration order.


def save_checkpoint(params: ModelParams, cfg: STConfig, path):
    cfg_bytes = json.dumps(cfg.to_dict()).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        for _, t in params.named_parameters():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a spectrast checkpoint")
    off = len(_CKPT_MAGIC)
    try:
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != _CKPT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} not supported"
            )
        (cfg_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        cfg = STConfig.from_dict(json.loads(blob[off : off + cfg_len].decode()))
        off += cfg_len
    except (struct.error, json.JSONDecodeError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    params = init(cfg, seed=0)
    for name, t in params.named_parameters():
        nbytes = t.data.size * 8
        chunk = blob[off : off + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        t.data = (
            np.frombuffer(chunk, dtype="<f8")
            .reshape(t.data.shape)
            .astype(nn.get_default_dtype())
        )
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return params, cfg


def check_compat(cfg: STConfig, registry, axis=None):
    """Raise when a checkpointed config cannot serve a registry/axis pair."""
    if cfg.n_classes != len(registry):
        raise CheckpointError(
            f"checkpoint trained for {cfg.n_classes} classes, "
            f"registry has {len(registry)}"
        )
    if axis is not None and cfg.seq_len != axis.n_points:
        raise CheckpointError(
            f"checkpoint expects {cfg.seq_len}-point spectra, "
            f"axis has {axis.n_points}"
        )
