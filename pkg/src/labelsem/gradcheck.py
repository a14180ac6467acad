"""Finite-difference gradient suite over every primitive, head and full loss.

Checks run at tiny dimensions so that every parameter entry can be
perturbed.  Primitive and head checks use tolerance 1e-4; the two full
losses use 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import dele, r2net
from . import tensor as T
from .config import TrainConfig
from .data import Batch, LabelSet, Vocab, make_batch, tokenize_many
from .encoder import encode_batch, fuse, init_local_encoder, local_encode
from .params import Params

PRIMITIVE_TOL = 1e-4
LOSS_TOL = 1e-3
MODULES = ("tensor_core", "encoder", "r2net", "dele")


@dataclass
class CheckResult:
    module: str
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def tiny_config(**changes) -> TrainConfig:
    base = dict(d_p=8, d_ff=8, layers=2, heads=2, n_max=10, kernel_sizes=(1, 2, 3),
                d_m=6, d_a=5, d_2=5, d_3=5, batch_size=6)
    base.update(changes)
    return TrainConfig(**base).validate()


TOY_TEXTS = [
    "red apple pie", "green apple tart", "blue sky today",
    "grey sky tonight", "red berry jam", "blue sea wave",
]
TOY_LABELS = [0, 0, 1, 1, 0, 1]
TOY_DESCRIPTIONS = [["apple berry red", "sweet pie"], ["sky sea blue"]]


def toy_vocab() -> Vocab:
    words = sorted({w for t in TOY_TEXTS for w in t.split()} |
                   {w for ds in TOY_DESCRIPTIONS for d in ds for w in d.split()})
    return Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]"] + words)


def toy_batch(n: int, vocab: Vocab, cfg: TrainConfig, seed: int) -> Batch:
    ids, mask = tokenize_many(TOY_TEXTS[:n], vocab, cfg.n_max)
    return make_batch(ids, mask, TOY_LABELS[:n], np.random.default_rng(seed))


def _weighted(out: T.Tensor, rng) -> T.Tensor:
    """Scalarise with random weights so every output entry matters."""
    return T.sum_(out * rng.normal(size=out.shape))


def _leaves(p: Params, prefixes) -> list[T.Tensor]:
    return [t for n, t in p.items() if n.startswith(tuple(prefixes))]


def _primitive_cases(rng) -> Iterator[tuple[str, Callable, list]]:
    def leaf(*shape, low=-1.0, high=1.0):
        return T.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    def case(name, build, *leaves):
        w = {}

        def fn():
            out = build(*leaves)
            if "w" not in w:
                w["w"] = rng.normal(size=out.shape)
            return T.sum_(out * w["w"])

        return name, fn, list(leaves)

    a, b = leaf(3, 4), leaf(3, 4)
    yield case("add", T.add, a, b)
    yield case("add_broadcast", T.add, leaf(2, 3, 4), leaf(4))
    yield case("sub", T.sub, leaf(3, 4), leaf(1, 4))
    yield case("mul", T.mul, leaf(3, 4), leaf(3, 4))
    yield case("div", lambda x, y: x / y, leaf(3, 4), leaf(3, 4, low=0.5, high=2.0))
    yield case("scale", lambda x: x * 2.5, leaf(5))
    yield case("matmul_2d", T.matmul, leaf(3, 4), leaf(4, 2))
    yield case("matmul_batched", T.matmul, leaf(2, 3, 4), leaf(2, 4, 5))
    yield case("matmul_shared", T.matmul, leaf(2, 3, 4), leaf(4, 5))
    yield case("matmul_vector", T.matmul, leaf(4), leaf(4, 3))
    yield case("transpose", T.transpose, leaf(2, 3, 4))
    yield case("reshape", lambda x: T.reshape(x, (3, 8)), leaf(2, 3, 4))
    yield case("concat", lambda x, y: T.concat([x, y], axis=1), leaf(2, 3), leaf(2, 4))
    yield case("slice", lambda x: T.slice_(x, 1, 3, axis=1), leaf(2, 4, 3))
    yield case("take", lambda x: T.take(x, [2, 0, 2, 1]), leaf(3, 4))
    yield case("repeat", lambda x: T.repeat(x, 3), leaf(2, 4))
    yield case("tanh", T.tanh, leaf(8))
    yield case("relu", T.relu, leaf(3, 5))
    yield case("exp", T.exp, leaf(6))
    yield case("log", T.log, leaf(6, low=0.2, high=3.0))
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    yield case("softmax", lambda x: T.softmax(x, axis=-1), leaf(3, 5))
    yield case("softmax_masked", lambda x: T.softmax(x, axis=1, mask=mask), leaf(2, 4))
    yield case("log_softmax_masked", lambda x: T.log_softmax(x, axis=1, mask=mask), leaf(2, 4))
    yield case("sum_axis", lambda x: T.sum_(x, axis=1), leaf(2, 3, 4))
    yield case("mean_axis", lambda x: T.mean(x, axis=0), leaf(3, 4))
    yield case("max_pool", lambda x: T.max_pool(x, mask), leaf(2, 4, 3))
    yield case("avg_pool", lambda x: T.avg_pool(x, mask), leaf(2, 4, 3))
    for width in (1, 2, 3):
        yield case(f"conv1d_same_k{width}", T.conv1d, leaf(2, 5, 3), leaf(width, 3, 4))
    yield case("conv1d_valid", lambda x, w: T.conv1d(x, w, padding="valid"), leaf(5, 3), leaf(2, 3, 2))
    yield case("layer_norm", T.layer_norm, leaf(2, 3, 6))
    yield case("l2norm", T.l2norm, leaf(3, 4))
    yield case("cosine_sim", T.cosine_sim, leaf(3, 4), leaf(5, 4))
    yield case("sq_dist", T.sq_dist, leaf(3, 4), leaf(3, 4))
    yield case("euclidean_dist", T.euclidean_dist, leaf(3, 4), leaf(3, 4))
    yield case(
        "cross_entropy",
        lambda x: T.cross_entropy(T.softmax(x, axis=-1), [0, 2, 1]),
        leaf(3, 4),
    )


def _encoder_cases(seed: int):
    rng = np.random.default_rng(seed)
    vocab = toy_vocab()
    cfg = tiny_config()
    p = r2net.init_r2net(cfg, len(vocab), 2, rng)
    # non-zero layer weights and biases exercise every path
    for name, t in p.items():
        if name.endswith(".b") or name == "mix.a":
            t.data[...] = rng.uniform(-0.5, 0.5, size=t.shape)
    batch = toy_batch(4, vocab, cfg, seed)
    enc = _leaves(p, ["enc.", "mix."])

    def words():
        H, v_g, _ = encode_batch(p, batch.ids, batch.mask, cfg)
        return _weighted(H, np.random.default_rng(seed)) + _weighted(v_g, np.random.default_rng(seed + 1))

    yield "encode_text", words, enc

    def mix_only():
        H, _, _ = encode_batch(p, batch.ids, batch.mask, cfg)
        return T.sum_(H)

    yield "layer_mix_weights", mix_only, [p["mix.a"]]

    H0 = T.Tensor(rng.normal(size=(3, 6, cfg.d_p)), requires_grad=True)
    m0 = np.array([[1] * 6, [1] * 4 + [0] * 2, [1] * 3 + [0] * 3], dtype=bool)

    def local():
        return _weighted(local_encode(H0, m0, p, cfg), np.random.default_rng(seed))

    yield "local_encode", local, [H0] + _leaves(p, ["local."])

    a = T.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    yield "fuse", lambda: _weighted(fuse(a, b), np.random.default_rng(seed)), [a, b]


def _r2net_cases(seed: int):
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    m = 3
    p = Params(0.5)
    r2net.init_heads(p, cfg, m, rng)
    for name, t in p.items():
        if name.endswith(".b"):
            t.data[...] = rng.uniform(-0.3, 0.3, size=t.shape)
    v1 = T.Tensor(rng.normal(size=(4, 2 * cfg.d_p)), requires_grad=True)
    v2 = T.Tensor(rng.normal(size=(4, 2 * cfg.d_p)), requires_grad=True)
    v3 = T.Tensor(rng.normal(size=(4, 2 * cfg.d_p)), requires_grad=True)
    w = lambda k: np.random.default_rng(seed + k)  # noqa: E731

    yield "predict_label", lambda: _weighted(r2net.predict_label(p, v1), w(0)), [v1] + _leaves(p, ["r2.label"])
    yield (
        "r2_predict",
        lambda: _weighted(r2net.r2_predict(p, v1, v2), w(1)),
        [v1, v2] + _leaves(p, ["r2.transform", "r2.pair"]),
    )
    yield (
        "heuristic_match",
        lambda: _weighted(r2net.heuristic_match(v1, v2), w(2)),
        [v1, v2],
    )

    def trip():
        d_ap, d_an = r2net.triplet_distances(p, v1, v2, v3)
        return _weighted(d_ap, w(3)) + _weighted(d_an, w(4))

    yield "triplet_distances", trip, [v1, v2, v3] + _leaves(p, ["r2.dist"])


def _r2net_loss_case(seed: int):
    rng = np.random.default_rng(seed)
    vocab = toy_vocab()
    cfg = tiny_config(model="r2net", eta=0.4)
    p = r2net.init_r2net(cfg, len(vocab), 2, rng)
    for name, t in p.items():
        if name.endswith(".b"):
            t.data[...] = rng.uniform(-0.3, 0.3, size=t.shape)
    batch = toy_batch(6, vocab, cfg, seed)
    return "r2net_loss", lambda: r2net.r2net_forward(p, batch, cfg)["loss"], [t for _, t in p.items()]


def _dele_setup(seed: int, **changes):
    rng = np.random.default_rng(seed)
    vocab = toy_vocab()
    cfg = tiny_config(model="dele", delta=0.7, mu=0.6, tau=0.5, **changes)
    labels = LabelSet(["fruit", "nature"], [list(d) for d in TOY_DESCRIPTIONS])
    p = dele.init_dele(cfg, len(vocab), labels.m, rng)
    for name, t in p.items():
        if name.endswith(".b"):
            t.data[...] = rng.uniform(-0.3, 0.3, size=t.shape)
    tokens = dele.LabelTokens.build(labels, vocab, cfg.n_max)
    return rng, vocab, cfg, p, tokens


def _dele_cases(seed: int):
    rng, vocab, cfg, p, tokens = _dele_setup(seed)
    w = lambda k: np.random.default_rng(seed + k)  # noqa: E731
    enc = _leaves(p, ["enc.", "mix."])

    yield (
        "encode_labels",
        lambda: _weighted(dele.encode_labels(p, tokens, cfg), w(0)),
        enc + [p["dele.label_emb"]],
    )
    E = T.Tensor(rng.normal(size=(3, cfg.d_p)), requires_grad=True)
    vg = T.Tensor(rng.normal(size=(4, cfg.d_p)), requires_grad=True)
    H = T.Tensor(rng.normal(size=(4, 5, cfg.d_p)), requires_grad=True)
    mask = np.array([[1] * 5, [1] * 3 + [0] * 2, [1] * 4 + [0], [1] + [0] * 4], dtype=bool)

    def s2l():
        h_e, beta = dele.s2l_attention(E, vg, p)
        return _weighted(h_e, w(1)) + _weighted(beta, w(2))

    yield "s2l_attention", s2l, [E, vg] + _leaves(p, ["dele.s2l"])

    def l2s():
        h_s, beta = dele.l2s_attention(H, mask, E, p)
        return _weighted(h_s, w(3)) + _weighted(beta, w(4))

    yield "l2s_attention", l2s, [H, E] + _leaves(p, ["dele.l2s"])
    h = T.Tensor(rng.normal(size=(4, cfg.d_p)), requires_grad=True)
    h2 = T.Tensor(rng.normal(size=(4, cfg.d_p)), requires_grad=True)
    yield "project", lambda: _weighted(dele.project(h, p), w(5)), [h] + _leaves(p, ["dele.proj"])
    yield "dele_predict", lambda: _weighted(dele.dele_predict(h, p), w(6)), [h] + _leaves(p, ["dele.cls"])
    yield (
        "dele_r2_predict",
        lambda: _weighted(dele.dele_r2_predict(h, h2, p), w(7)),
        [h, h2] + _leaves(p, ["dele.pair"]),
    )
    yield "nt_xent", lambda: dele.nt_xent(h, h2, 0.5), [h, h2]
    yield "nt_xent_ze_negatives", lambda: dele.nt_xent(h, h2, 0.5, ze_negatives=True), [h, h2]


def _dele_loss_case(seed: int):
    _, vocab, cfg, p, tokens = _dele_setup(seed)
    batch = toy_batch(4, vocab, cfg, seed)
    return "dele_loss", lambda: dele.dele_forward(p, batch, tokens, cfg)["loss"], [t for _, t in p.items()]


def run_suite(module: str | None = None, seeds=(0, 1, 2), eps: float = 1e-5) -> list[CheckResult]:
    if module is not None and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")
    results = []
    for seed in seeds:
        cases = []
        if module in (None, "tensor_core"):
            cases += [("tensor_core", n, f, l, PRIMITIVE_TOL)
                      for n, f, l in _primitive_cases(np.random.default_rng(seed))]
        if module in (None, "encoder"):
            cases += [("encoder", n, f, l, PRIMITIVE_TOL) for n, f, l in _encoder_cases(seed)]
        if module in (None, "r2net"):
            cases += [("r2net", n, f, l, PRIMITIVE_TOL) for n, f, l in _r2net_cases(seed)]
            cases.append(("r2net",) + _r2net_loss_case(seed) + (LOSS_TOL,))
        if module in (None, "dele"):
            cases += [("dele", n, f, l, PRIMITIVE_TOL) for n, f, l in _dele_cases(seed)]
            cases.append(("dele",) + _dele_loss_case(seed) + (LOSS_TOL,))
        for mod, name, fn, leaves, tol in cases:
            err = T.grad_check(fn, leaves, eps)
            results.append(CheckResult(mod, name, seed, err, tol))
    return results
