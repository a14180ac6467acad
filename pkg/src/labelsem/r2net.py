"""Relation-of-relation network: label head, R² pair head, triplet distances and loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoder import encode_batch, fuse, init_encoder, init_local_encoder, local_encode
from .params import Params, add_linear, add_mlp, init_bound, linear, mlp_probs
from .tensor import ShapeError, Tensor


@dataclass
class R2LossWeights:
    eta: float = 0.5
    margin: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


def init_heads(p: Params, cfg: TrainConfig, m: int, rng: np.random.Generator) -> None:
    width = 2 * cfg.d_p
    add_mlp(p, "r2.label", width, cfg.d_m, m, rng)
    # separate weights from the label MLP, see ledger
    add_linear(p, "r2.transform", width, cfg.d_m, rng)
    add_mlp(p, "r2.pair", 4 * cfg.d_m, cfg.d_2, 2, rng)
    add_linear(p, "r2.dist", width, cfg.d_m, rng)


def init_r2net(cfg: TrainConfig, vocab_size: int, m: int, rng: np.random.Generator) -> Params:
    p = Params(init_bound(cfg.d_p))
    init_encoder(p, cfg, vocab_size, rng)
    if cfg.use_local_encoder:
        init_local_encoder(p, cfg, rng)
    init_heads(p, cfg, m, rng)
    return p


def represent(p: Params, ids, mask, cfg: TrainConfig) -> Tensor:
    """Sentence vectors ``v = [v_g; v_l]`` of width 2*d_p.

    Without the local encoder the global vector is duplicated to keep the
    head widths unchanged.
    """
    H, v_g, tmask = encode_batch(p, ids, mask, cfg)
    v_l = local_encode(H, tmask, p, cfg) if cfg.use_local_encoder else v_g
    return fuse(v_g, v_l)


def predict_label(p: Params, v: Tensor) -> Tensor:
    return mlp_probs(p, "r2.label", v)


def heuristic_match(a: Tensor, b: Tensor) -> Tensor:
    """``[a; b; a*b; a-b]`` along the feature axis."""
    if a.shape != b.shape:
        raise ShapeError(f"heuristic_match: shapes differ, {a.shape} vs {b.shape}")
    return T.concat([a, b, a * b, a - b], axis=-1)


def transform(p: Params, v: Tensor) -> Tensor:
    return T.relu(linear(p, "r2.transform", v))


def r2_predict(p: Params, v1: Tensor, v2: Tensor) -> Tensor:
    """Distribution over {different, same}; index 1 means the labels match."""
    return mlp_probs(p, "r2.pair", heuristic_match(transform(p, v1), transform(p, v2)))


def triplet_transform(p: Params, v: Tensor) -> Tensor:
    return T.relu(linear(p, "r2.dist", v))


def triplet_distances(p: Params, va: Tensor, vp: Tensor, vn: Tensor):
    if not va.shape == vp.shape == vn.shape:
        raise ShapeError(f"triplet_distances: shapes {va.shape}, {vp.shape}, {vn.shape} differ")
    a, pos, neg = (triplet_transform(p, v) for v in (va, vp, vn))
    return T.euclidean_dist(a, pos), T.euclidean_dist(a, neg)


def triplet_loss(d_ap: Tensor, d_an: Tensor, margin: float) -> Tensor:
    """Batch mean of max(d_ap - d_an + margin, 0)."""
    return T.mean(T.relu(d_ap - d_an + margin))


def combine(ls: Tensor, lr2: Tensor | None, ld: Tensor | None, w: R2LossWeights) -> Tensor:
    """``eta * L_s + (1 - eta) * (L_R2 + L_d)``."""
    if w.eta == 1.0:
        return ls * 1.0
    if lr2 is None or ld is None:
        raise ValueError("pair and triplet terms are required when eta < 1")
    return ls * w.eta + (lr2 + ld) * (1.0 - w.eta)


def r2net_forward(p: Params, batch, cfg: TrainConfig) -> dict:
    """Loss and its components for one batch; also returns predictions."""
    from .dele import nt_xent

    w = R2LossWeights(cfg.eta, cfg.margin)
    v = represent(p, batch.ids, batch.mask, cfg)
    probs = predict_label(p, v)
    ls = T.cross_entropy(probs, batch.y)
    out = {"probs": probs, "vectors": v, "l_cls": ls}
    lr2 = ld = None
    if w.eta < 1.0:
        pr = r2_predict(p, T.take(v, batch.pairs[:, 0]), T.take(v, batch.pairs[:, 1]))
        lr2 = T.cross_entropy(pr, batch.pair_targets)
        out["pair_probs"] = pr
        trip = batch.triplets
        if len(trip) == 0:
            ld = T.Tensor(0.0)
        elif cfg.r2_aux_loss == "triplet":
            d_ap, d_an = triplet_distances(
                p, T.take(v, trip[:, 0]), T.take(v, trip[:, 1]), T.take(v, trip[:, 2])
            )
            ld = triplet_loss(d_ap, d_an, w.margin)
        elif len(trip) >= 2:
            za = triplet_transform(p, T.take(v, trip[:, 0]))
            zp = triplet_transform(p, T.take(v, trip[:, 1]))
            ld = nt_xent(za, zp, cfg.tau)
        else:
            ld = T.Tensor(0.0)
        out["l_r2"], out["l_aux"] = lr2, ld
    out["loss"] = combine(ls, lr2, ld, w)
    return out
