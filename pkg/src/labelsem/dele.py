"""Description-enhanced label embedding network.

Labels are embedded as a learned vector plus the mean encoder CLS vector of
their descriptions.  Sentence-to-label attention (guided by ``v_g``) yields
``h_e``; label-to-sentence attention (one word distribution per label,
merged by elementwise max) yields ``h_s``.  Classification reads ``h_s``; the
R² pair head reads ``h_e``; both views are projected for NT-Xent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import LabelSet, Vocab, tokenize_many
from .encoder import encode_batch, init_encoder
from .params import Params, add_mlp, init_bound, mlp, mlp_probs
from .r2net import heuristic_match
from .tensor import ShapeError, Tensor


@dataclass
class DeleLossWeights:
    delta: float = 0.1
    mu: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if self.delta < 0 or self.mu < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LabelTokens:
    """Tokenised descriptions of every label, flattened, with their owners."""

    ids: np.ndarray  # (D, n_max)
    mask: np.ndarray
    owner: np.ndarray  # (D,) label index
    m: int

    @classmethod
    def build(cls, labels: LabelSet, vocab: Vocab, n_max: int) -> "LabelTokens":
        texts, owner = [], []
        for i, descs in enumerate(labels.descriptions):
            texts.extend(descs)
            owner.extend([i] * len(descs))
        ids, mask = tokenize_many(texts, vocab, n_max)
        return cls(ids, mask, np.asarray(owner, dtype=np.int64), labels.m)

    def averaging_matrix(self) -> np.ndarray:
        """(m, D) matrix mapping description vectors to per-label means."""
        A = np.zeros((self.m, len(self.owner)))
        counts = np.bincount(self.owner, minlength=self.m)
        for j, i in enumerate(self.owner):
            A[i, j] = 1.0 / counts[i]
        return A


def init_heads(p: Params, cfg: TrainConfig, m: int, rng: np.random.Generator) -> None:
    d, da = cfg.d_p, cfg.d_a
    p.matrix("dele.label_emb", (m, d), rng)
    p.matrix("dele.s2l.w", (d, da), rng)
    p.matrix("dele.s2l.u", (d, da), rng)
    p.matrix("dele.s2l.omega", (da, 1), rng)
    p.matrix("dele.l2s.w", (d, da), rng)
    p.matrix("dele.l2s.u", (d, da), rng)
    p.matrix("dele.l2s.omega", (da, 1), rng)
    add_mlp(p, "dele.proj", d, cfg.d_2, cfg.d_2, rng)
    add_mlp(p, "dele.cls", d, cfg.d_3, m, rng)
    add_mlp(p, "dele.pair", 4 * d, cfg.d_3, 2, rng)


def init_dele(cfg: TrainConfig, vocab_size: int, m: int, rng: np.random.Generator) -> Params:
    p = Params(init_bound(cfg.d_p))
    init_encoder(p, cfg, vocab_size, rng)
    init_heads(p, cfg, m, rng)
    return p


def _label_matrix(p: Params, desc_vecs: Tensor | None, tokens: LabelTokens) -> Tensor:
    E_f = p["dele.label_emb"]
    if desc_vecs is None or len(tokens.owner) == 0:
        return E_f
    return E_f + T.matmul(T.Tensor(tokens.averaging_matrix()), desc_vecs)


def encode_labels(p: Params, tokens: LabelTokens, cfg: TrainConfig) -> Tensor:
    """Label matrix E (m x d_p): vanilla embedding plus mean description CLS vector."""
    if len(tokens.owner) == 0:
        return _label_matrix(p, None, tokens)
    _, v_desc, _ = encode_batch(p, tokens.ids, tokens.mask, cfg)
    return _label_matrix(p, v_desc, tokens)


def s2l_attention(E: Tensor, v_g: Tensor, p: Params, mutual: bool = True):
    """Label selection guided by the text: returns (h_e, beta_norm).

    ``v_g`` is (d,) or (B, d).  Without mutual interaction the text guidance
    term is dropped, so the output no longer depends on the input text.
    """
    single = v_g.data.ndim == 1
    vg = T.reshape(v_g, (1, v_g.shape[0])) if single else v_g
    B = vg.shape[0]
    m, d = E.shape
    WE = T.matmul(E, p["dele.s2l.w"])  # (m, d_a)
    if mutual:
        guide = T.reshape(T.matmul(vg, p["dele.s2l.u"]), (B, 1, WE.shape[1]))
        pre = T.tanh(guide + WE)  # (B, m, d_a)
    else:
        pre = T.repeat(T.tanh(WE), B)
    beta = T.reshape(T.matmul(pre, p["dele.s2l.omega"]), (B, m))
    weights = T.softmax(beta, axis=-1)
    h_e = T.matmul(weights, E)
    if single:
        return T.reshape(h_e, (d,)), T.reshape(weights, (m,))
    return h_e, weights


def l2s_attention(H: Tensor, mask, E: Tensor, p: Params, mutual: bool = True):
    """Word selection guided by each label, merged by elementwise max: returns (h_s, beta_norm).

    ``H`` is (n, d) or (B, n, d); ``beta_norm`` is (m, n) or (B, m, n).  Without
    mutual interaction a single label-free distribution is used.
    """
    mask = np.asarray(mask, dtype=bool)
    single = H.data.ndim == 2
    if single:
        H = T.reshape(H, (1,) + H.shape)
        mask = mask[None]
    B, n, d = H.shape
    m = E.shape[0]
    WH = T.matmul(H, p["dele.l2s.w"])  # (B, n, d_a)
    UE = T.matmul(E, p["dele.l2s.u"])  # (m, d_a)
    omega = p["dele.l2s.omega"]
    contexts, dists = [], []
    for t in range(m if mutual else 1):
        pre = WH + T.slice_(UE, t, t + 1, axis=0) if mutual else WH
        beta = T.reshape(T.matmul(T.tanh(pre), omega), (B, n))
        a = T.softmax(beta, axis=-1, mask=mask)
        ctx = T.matmul(T.reshape(a, (B, 1, n)), H)  # (B, 1, d)
        contexts.append(ctx)
        dists.append(T.reshape(a, (B, 1, n)))
    stacked = contexts[0] if len(contexts) == 1 else T.concat(contexts, axis=1)
    h_s = T.max_pool(stacked)
    beta_norm = dists[0] if len(dists) == 1 else T.concat(dists, axis=1)
    if single:
        return T.reshape(h_s, (d,)), T.reshape(beta_norm, beta_norm.shape[1:])
    return h_s, beta_norm


def project(h: Tensor, p: Params) -> Tensor:
    """Shared two-layer projection into the contrastive space."""
    return mlp(p, "dele.proj", h)


def dele_predict(h_s: Tensor, p: Params) -> Tensor:
    return mlp_probs(p, "dele.cls", h_s)


def dele_r2_predict(h1: Tensor, h2: Tensor, p: Params) -> Tensor:
    """Distribution over {different, same} from two text-guided label vectors."""
    return mlp_probs(p, "dele.pair", heuristic_match(h1, h2))


def nt_xent(Z_s: Tensor, Z_e: Tensor, tau: float, ze_negatives: bool = False) -> Tensor:
    """Batch mean of -log softmax of the positive pair (z_s^i, z_e^i).

    The denominator holds the positive plus every other z_s^j (and the other
    z_e^j when ``ze_negatives``); similarities are cosine over ``tau``.
    """
    if Z_s.shape != Z_e.shape or len(Z_s.shape) != 2:
        raise ShapeError(f"nt_xent: shapes {Z_s.shape} and {Z_e.shape} must be equal (N, d)")
    N = Z_s.shape[0]
    if N < 2:
        raise ValueError("nt_xent needs at least 2 rows to have negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    eye = np.eye(N)
    s_ss = T.cosine_sim(Z_s, Z_s)
    s_se = T.cosine_sim(Z_s, Z_e)
    logits = (s_ss * (1.0 - eye) + s_se * eye) * (1.0 / tau)
    if ze_negatives:
        logits = T.concat([logits, s_se * (1.0 / tau)], axis=1)
        mask = np.concatenate([np.ones((N, N), bool), ~np.eye(N, dtype=bool)], axis=1)
        pick = np.concatenate([eye, np.zeros((N, N))], axis=1)
    else:
        mask, pick = None, eye
    logp = T.log_softmax(logits, axis=1, mask=mask)
    return -T.mean(T.sum_(logp * pick, axis=1))


def dele_loss(l1, l2, l3, weights: DeleLossWeights) -> Tensor:
    """``delta * L1 + mu * L2 + L3``; zero-weighted terms may be None."""
    total = l3 * 1.0
    if weights.delta > 0:
        total = total + l1 * weights.delta
    if weights.mu > 0:
        total = total + l2 * weights.mu
    return total


def dele_forward(p: Params, batch, tokens: LabelTokens, cfg: TrainConfig) -> dict:
    """Loss and its components for one batch; also returns predictions and vectors."""
    w = DeleLossWeights(cfg.delta, cfg.mu, cfg.tau)
    B = len(batch.y)
    D = len(tokens.owner)
    if D and not cfg.freeze_descriptions:
        ids = np.concatenate([batch.ids, tokens.ids])
        mask = np.concatenate([batch.mask, tokens.mask])
        H_all, vg_all, tmask = encode_batch(p, ids, mask, cfg)
        H = T.slice_(H_all, 0, B, axis=0)
        v_g = T.slice_(vg_all, 0, B, axis=0)
        E = _label_matrix(p, T.slice_(vg_all, B, B + D, axis=0), tokens)
        tmask = tmask[:B]
    else:
        H, v_g, tmask = encode_batch(p, batch.ids, batch.mask, cfg)
        if D:
            with T.no_grad():
                _, v_desc, _ = encode_batch(p, tokens.ids, tokens.mask, cfg)
            E = _label_matrix(p, T.Tensor(v_desc.data), tokens)
        else:
            E = _label_matrix(p, None, tokens)
    h_e, _ = s2l_attention(E, v_g, p, cfg.mutual_interaction)
    h_s, _ = l2s_attention(H, tmask, E, p, cfg.mutual_interaction)
    probs = dele_predict(h_s if cfg.classifier_input == "hs" else h_e, p)
    l3 = T.cross_entropy(probs, batch.y)
    out = {"probs": probs, "vectors": h_s, "h_e": h_e, "l_cls": l3}
    l1 = l2 = None
    if w.delta > 0:
        l1 = nt_xent(project(h_s, p), project(h_e, p), w.tau, cfg.ntxent_ze_negatives)
        out["l_cl"] = l1
    if w.mu > 0:
        pr = dele_r2_predict(T.take(h_e, batch.pairs[:, 0]), T.take(h_e, batch.pairs[:, 1]), p)
        l2 = T.cross_entropy(pr, batch.pair_targets)
        out["l_r2"], out["pair_probs"] = l2, pr
    out["loss"] = dele_loss(l1, l2, l3, w)
    return out
