"""Small trainable transformer text encoder plus the CNN local encoder.

The transformer stands in for a pretrained language model: it yields the
layer-mixed word matrix ``H`` and the global vector ``v_g`` (final-layer CLS
row).  The local encoder convolves ``H`` with several kernel widths, max- and
average-pools each result, and maps the concatenation through an affine+ReLU.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .params import Params, add_linear, linear
from .tensor import ShapeError, Tensor


def init_encoder(p: Params, cfg: TrainConfig, vocab_size: int, rng: np.random.Generator) -> None:
    d = cfg.d_p
    p.matrix("enc.tok_emb", (vocab_size, d), rng)
    p.matrix("enc.pos_emb", (cfg.n_max, d), rng)
    for l in range(cfg.layers):
        pre = f"enc.layer{l}"
        for name in ("q", "k", "v", "o"):
            add_linear(p, f"{pre}.{name}", d, d, rng)
        p.ones(f"{pre}.ln1.g", (d,))
        p.zeros(f"{pre}.ln1.b", (d,))
        add_linear(p, f"{pre}.ff1", d, cfg.d_ff, rng)
        add_linear(p, f"{pre}.ff2", cfg.d_ff, d, rng)
        p.ones(f"{pre}.ln2.g", (d,))
        p.zeros(f"{pre}.ln2.b", (d,))
    # raw layer-mix weights; zero gives a uniform mixture
    p.zeros("mix.a", (cfg.n_mix,))


def init_local_encoder(p: Params, cfg: TrainConfig, rng: np.random.Generator) -> None:
    d = cfg.d_p
    for k in cfg.kernel_sizes:
        p.matrix(f"local.conv{k}.w", (k, d, d), rng)
        p.zeros(f"local.conv{k}.b", (d,))
    add_linear(p, "local.out", 2 * len(cfg.kernel_sizes) * d, d, rng)


def trim_padding(ids: np.ndarray, mask: np.ndarray):
    """Drop trailing positions that are padding in every row."""
    ids = np.atleast_2d(ids)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    real = np.flatnonzero(mask.any(axis=0))
    n = int(real[-1]) + 1 if real.size else 1
    return ids[:, :n], mask[:, :n]


def layer_weights(p: Params, cfg: TrainConfig) -> Tensor:
    a = p["mix.a"]
    return T.softmax(a) if cfg.layer_mix == "softmax" else a


def _attention(p: Params, pre: str, x: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    B, n, d = x.shape
    dh = d // heads
    q, k, v = (linear(p, f"{pre}.{name}", x) for name in ("q", "k", "v"))
    key_mask = np.broadcast_to(mask[:, None, :], (B, n, n))
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (T.slice_(t, lo, hi) for t in (q, k, v))
        scores = T.matmul(qh, T.transpose(kh)) * (1.0 / math.sqrt(dh))
        outs.append(T.matmul(T.softmax(scores, axis=-1, mask=key_mask), vh))
    merged = outs[0] if heads == 1 else T.concat(outs, axis=-1)
    return linear(p, f"{pre}.o", merged)


def _norm(p: Params, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x) * p[f"{name}.g"] + p[f"{name}.b"]


def _block(p: Params, l: int, x: Tensor, mask: np.ndarray, cfg: TrainConfig) -> Tensor:
    pre = f"enc.layer{l}"
    x = _norm(p, f"{pre}.ln1", x + _attention(p, pre, x, mask, cfg.heads))
    ff = linear(p, f"{pre}.ff2", T.relu(linear(p, f"{pre}.ff1", x)))
    return _norm(p, f"{pre}.ln2", x + ff)


def _check_tokens(ids: np.ndarray, p: Params, cfg: TrainConfig) -> None:
    V = p["enc.tok_emb"].shape[0]
    if ids.shape[-1] > cfg.n_max:
        raise ShapeError(f"sequence length {ids.shape[-1]} exceeds n_max={cfg.n_max}")
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"token id out of vocabulary range [0, {V})")


def encode_batch(p: Params, ids, mask, cfg: TrainConfig):
    """Encode a (B, n) id matrix; returns (H (B, n', d), v_g (B, d), mask (B, n')).

    Trailing all-padding columns are trimmed first, so ``n' <= n``; padded rows
    of ``H`` are zero.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    _check_tokens(ids, p, cfg)
    ids, mask = trim_padding(ids, mask)
    if not mask[:, 0].all():
        raise ValueError("position 0 (CLS) must be unmasked in every row")
    B, n = ids.shape
    x = T.reshape(T.embedding(p["enc.tok_emb"], ids.reshape(-1)), (B, n, cfg.d_p))
    if cfg.use_positions:
        x = x + T.slice_(p["enc.pos_emb"], 0, n, axis=0)
    outputs = []
    for l in range(cfg.layers):
        x = _block(p, l, x, mask, cfg)
        outputs.append(x)
    mixed = outputs[-cfg.n_mix:]
    alpha = layer_weights(p, cfg)
    H = None
    for l, Hl in enumerate(mixed):
        term = Hl * T.slice_(alpha, l, l + 1)
        H = term if H is None else H + term
    H = H * mask[:, :, None].astype(np.float64)
    v_g = T.reshape(T.slice_(outputs[-1], 0, 1, axis=1), (B, cfg.d_p))
    return H, v_g, mask


def encode_text(tokens, p: Params, cfg: TrainConfig):
    """Word matrix ``H`` (n x d_p, padded rows zero) and global vector ``v_g`` for one sequence."""
    ids, mask = np.asarray(tokens.ids), np.asarray(tokens.mask, dtype=bool)
    H, v_g, tmask = encode_batch(p, ids[None], mask[None], cfg)
    n_full, n = ids.shape[0], tmask.shape[1]
    H = T.reshape(H, (n, cfg.d_p))
    if n < n_full:
        H = T.concat([H, np.zeros((n_full - n, cfg.d_p))], axis=0)
    return H, T.reshape(v_g, (cfg.d_p,))


def local_encode(H: Tensor, mask, p: Params, cfg: TrainConfig) -> Tensor:
    """CNN local vector ``v_l`` for H of shape (n, d) or (B, n, d)."""
    mask = np.asarray(mask, dtype=bool)
    single = H.data.ndim == 2
    if single:
        H = T.reshape(H, (1,) + H.shape)
        mask = mask[None]
    widest = max(cfg.kernel_sizes)
    shortest = int(mask.sum(axis=-1).min())
    if shortest < widest:
        raise ShapeError(
            f"local_encode: sequence of {shortest} real tokens is shorter than kernel width {widest}"
        )
    pooled = []
    for k in cfg.kernel_sizes:
        conv = T.conv1d(H, p[f"local.conv{k}.w"]) + p[f"local.conv{k}.b"]
        pooled.append(T.max_pool(conv, mask))
        pooled.append(T.avg_pool(conv, mask))
    v_l = T.relu(linear(p, "local.out", T.concat(pooled, axis=-1)))
    return T.reshape(v_l, (cfg.d_p,)) if single else v_l


def fuse(v_g: Tensor, v_l: Tensor) -> Tensor:
    """Concatenate global and local vectors along the feature axis."""
    if v_g.shape != v_l.shape:
        raise ShapeError(f"fuse: shapes differ, {v_g.shape} vs {v_l.shape}")
    return T.concat([v_g, v_l], axis=-1)
