import math

import numpy as np
import pytest

from labelsem import dele
from labelsem import tensor as T
from labelsem.data import LabelSet
from labelsem.encoder import encode_batch
from labelsem.gradcheck import TOY_DESCRIPTIONS, tiny_config, toy_batch, toy_vocab
from labelsem.r2net import heuristic_match
from labelsem.tensor import ShapeError, Tensor


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()


def setup(descriptions=None, seed=0, **changes):
    cfg = tiny_config(model="dele", **changes)
    vocab = toy_vocab()
    descriptions = [list(d) for d in TOY_DESCRIPTIONS] if descriptions is None else descriptions
    labels = LabelSet([f"l{i}" for i in range(len(descriptions))], descriptions)
    p = dele.init_dele(cfg, len(vocab), labels.m, np.random.default_rng(seed))
    return cfg, p, dele.LabelTokens.build(labels, vocab, cfg.n_max)


def nt_xent_oracle(Zs, Ze, tau, ze_negatives=False):
    """Explicit loops over rows and coordinates; no vectorised maths."""

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        return dot / (na * nb)

    N = len(Zs)
    total = 0.0
    for i in range(N):
        pos = math.exp(cos(Zs[i], Ze[i]) / tau)
        denom = pos
        for j in range(N):
            if j != i:
                denom += math.exp(cos(Zs[i], Zs[j]) / tau)
                if ze_negatives:
                    denom += math.exp(cos(Zs[i], Ze[j]) / tau)
        total += -math.log(pos / denom)
    return total / N


# ---------------------------------------------------------------- label encoder


def test_zero_vanilla_embedding_gives_mean_cls():
    cfg, p, tokens = setup()
    p["dele.label_emb"].data[:] = 0.0
    E = dele.encode_labels(p, tokens, cfg).data
    _, v, _ = encode_batch(p, tokens.ids, tokens.mask, cfg)
    np.testing.assert_allclose(E[0], v.data[:2].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(E[1], v.data[2], atol=1e-12)


def test_no_descriptions_is_vanilla_embedding():
    cfg, p, tokens = setup([[], []])
    E = dele.encode_labels(p, tokens, cfg)
    np.testing.assert_array_equal(E.data, p["dele.label_emb"].data)


def test_duplicate_descriptions_do_not_change_e():
    cfg, p, tokens = setup([["sweet pie"], ["blue sky"]])
    _, _, doubled = setup([["sweet pie", "sweet pie"], ["blue sky", "blue sky"]])
    np.testing.assert_allclose(
        dele.encode_labels(p, tokens, cfg).data, dele.encode_labels(p, doubled, cfg).data, atol=1e-12
    )


def test_label_permutation_equivariance():
    descs = [["sweet pie"], ["blue sky today"], ["red berry jam"]]
    cfg, p, tokens = setup(descs)
    perm = [2, 0, 1]
    _, _, permuted = setup([descs[i] for i in perm])
    E = dele.encode_labels(p, tokens, cfg).data
    p["dele.label_emb"].data[:] = p["dele.label_emb"].data[perm]
    np.testing.assert_allclose(dele.encode_labels(p, permuted, cfg).data, E[perm], atol=1e-12)


# ---------------------------------------------------------------- attention


def test_s2l_single_label():
    cfg, p, _ = setup()
    E = Tensor(np.random.default_rng(1).normal(size=(1, cfg.d_p)))
    h_e, w = dele.s2l_attention(E, Tensor(np.ones(cfg.d_p)), p)
    np.testing.assert_array_equal(h_e.data, E.data[0])
    assert w.data.tolist() == [1.0]


def test_s2l_identical_rows():
    cfg, p, _ = setup()
    row = np.random.default_rng(2).normal(size=cfg.d_p)
    h_e, _ = dele.s2l_attention(Tensor(np.tile(row, (4, 1))), Tensor(np.ones(cfg.d_p)), p)
    np.testing.assert_allclose(h_e.data, row, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_s2l_convex_hull(seed):
    cfg, p, _ = setup(seed=seed)
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(5, cfg.d_p))
    h_e, w = dele.s2l_attention(Tensor(E), Tensor(rng.normal(size=(3, cfg.d_p))), p)
    assert (h_e.data >= E.min(axis=0) - 1e-12).all() and (h_e.data <= E.max(axis=0) + 1e-12).all()
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


def test_s2l_without_mutual_ignores_text():
    cfg, p, _ = setup()
    rng = np.random.default_rng(3)
    E = Tensor(rng.normal(size=(3, cfg.d_p)))
    a, _ = dele.s2l_attention(E, Tensor(rng.normal(size=cfg.d_p)), p, mutual=False)
    b, _ = dele.s2l_attention(E, Tensor(rng.normal(size=cfg.d_p)), p, mutual=False)
    np.testing.assert_array_equal(a.data, b.data)


def test_l2s_single_word():
    cfg, p, _ = setup()
    rng = np.random.default_rng(4)
    H = rng.normal(size=(1, cfg.d_p))
    h_s, beta = dele.l2s_attention(Tensor(H), np.ones(1, bool), Tensor(rng.normal(size=(3, cfg.d_p))), p)
    np.testing.assert_allclose(h_s.data, H[0], atol=1e-15)
    assert beta.shape == (3, 1)


def test_l2s_single_label_is_its_context():
    cfg, p, _ = setup()
    rng = np.random.default_rng(5)
    H, E = Tensor(rng.normal(size=(4, cfg.d_p))), Tensor(rng.normal(size=(1, cfg.d_p)))
    h_s, beta = dele.l2s_attention(H, np.ones(4, bool), E, p)
    np.testing.assert_allclose(h_s.data, beta.data[0] @ H.data, atol=1e-12)


def test_l2s_elementwise_max_hand_set():
    cfg, p, _ = setup(d_p=2, heads=1, d_a=2)
    p["dele.l2s.w"].data[:] = 10 * np.eye(2)
    p["dele.l2s.u"].data[:] = 10 * np.eye(2)
    p["dele.l2s.omega"].data[:] = 50.0
    H = Tensor([[1.0, 0.0], [0.0, 1.0]])
    E = Tensor([[0.0, -2.0], [-2.0, 0.0]])  # label 1 picks word 1, label 2 picks word 2
    h_s, beta = dele.l2s_attention(H, np.ones(2, bool), E, p)
    np.testing.assert_allclose(beta.data, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(h_s.data, [1.0, 1.0], atol=1e-12)


def test_l2s_ignores_padding():
    cfg, p, _ = setup()
    rng = np.random.default_rng(6)
    H = rng.normal(size=(3, cfg.d_p))
    E = Tensor(rng.normal(size=(2, cfg.d_p)))
    short_h, short_b = dele.l2s_attention(Tensor(H), np.ones(3, bool), E, p)
    padded = np.vstack([H, rng.normal(size=(2, cfg.d_p))])
    long_h, long_b = dele.l2s_attention(Tensor(padded), np.array([1, 1, 1, 0, 0], bool), E, p)
    np.testing.assert_allclose(long_h.data, short_h.data, atol=1e-12)
    np.testing.assert_allclose(long_b.data[:, :3], short_b.data, atol=1e-12)
    assert not long_b.data[:, 3:].any()


def test_l2s_all_masked_errors():
    cfg, p, _ = setup()
    with pytest.raises(ValueError):
        dele.l2s_attention(Tensor(np.ones((2, cfg.d_p))), np.zeros(2, bool), Tensor(np.ones((2, cfg.d_p))), p)


# ---------------------------------------------------------------- heads


def test_project_shares_weights():
    cfg, p, _ = setup()
    h = Tensor(np.random.default_rng(7).normal(size=cfg.d_p))
    assert dele.project(h, p).data.tobytes() == dele.project(Tensor(h.data.copy()), p).data.tobytes()
    for name in ("dele.proj.0.w", "dele.proj.1.w"):
        p[name].data[:] = 0.0
    np.testing.assert_array_equal(dele.project(h, p).data, p["dele.proj.1.b"].data)


def test_dele_predict():
    cfg, p, _ = setup()
    h = Tensor(np.random.default_rng(8).normal(size=cfg.d_p))
    probs = dele.dele_predict(h, p).data
    assert abs(probs.sum() - 1) < 1e-9
    top = probs.argmax()
    p["dele.cls.1.w"].data *= 3.0
    p["dele.cls.1.b"].data *= 3.0
    assert dele.dele_predict(h, p).data.argmax() == top
    for name in ("dele.cls.1.w", "dele.cls.1.b"):
        p[name].data[:] = 0.0
    np.testing.assert_allclose(dele.dele_predict(h, p).data, [0.5, 0.5], atol=1e-15)


def test_dele_r2_predict_matches_scalar_evaluation():
    cfg, p, _ = setup()
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=cfg.d_p), rng.normal(size=cfg.d_p)
    assert not heuristic_match(Tensor(a), Tensor(a)).data[3 * cfg.d_p:].any()
    got = dele.dele_r2_predict(Tensor(a), Tensor(b), p).data
    assert abs(got.sum() - 1) < 1e-9

    u = list(a) + list(b) + [x * y for x, y in zip(a, b)] + [x - y for x, y in zip(a, b)]
    W0, b0 = p["dele.pair.0.w"].data, p["dele.pair.0.b"].data
    W1, b1 = p["dele.pair.1.w"].data, p["dele.pair.1.b"].data
    hidden = [max(0.0, sum(u[i] * W0[i, j] for i in range(len(u))) + b0[j]) for j in range(W0.shape[1])]
    logits = [sum(hidden[i] * W1[i, k] for i in range(len(hidden))) + b1[k] for k in range(2)]
    top = max(logits)
    z = sum(math.exp(v - top) for v in logits)
    np.testing.assert_allclose(got, [math.exp(v - top) / z for v in logits], atol=1e-12)


# ---------------------------------------------------------------- NT-Xent


@pytest.mark.parametrize("ze_negatives", [False, True])
@pytest.mark.parametrize("N", range(2, 9))
def test_nt_xent_matches_oracle(N, ze_negatives):
    rng = np.random.default_rng(N)
    Zs, Ze = rng.normal(size=(N, 5)), rng.normal(size=(N, 5))
    got = dele.nt_xent(Tensor(Zs), Tensor(Ze), 0.3, ze_negatives).item()
    assert abs(got - nt_xent_oracle(Zs.tolist(), Ze.tolist(), 0.3, ze_negatives)) <= 1e-9


@pytest.mark.parametrize("N", [2, 3, 5])
def test_nt_xent_identical_rows_is_log_n(N):
    Z = Tensor(np.ones((N, 4)))
    assert abs(dele.nt_xent(Z, Z, 0.1).item() - math.log(N)) < 1e-12
    if N == 2:
        assert abs(dele.nt_xent(Z, Z, 0.1).item() - 0.6931) < 1e-4


def test_nt_xent_aligned_positives_orthogonal_negatives():
    Z = Tensor([[1.0, 0.0], [0.0, 1.0]])
    got = dele.nt_xent(Z, Z, 0.1).item()
    assert abs(got - (-math.log(math.exp(10) / (math.exp(10) + 1)))) < 1e-15
    assert abs(got - 4.54e-5) < 1e-7


def test_nt_xent_decreases_with_positive_similarity():
    rng = np.random.default_rng(10)
    Zs = rng.normal(size=(4, 3))
    Ze = rng.normal(size=(4, 3))
    before = dele.nt_xent(Tensor(Zs), Tensor(Ze), 0.2).item()
    Ze[0] = 0.5 * Ze[0] + 0.5 * Zs[0] / np.linalg.norm(Zs[0]) * np.linalg.norm(Ze[0])
    assert dele.nt_xent(Tensor(Zs), Tensor(Ze), 0.2).item() < before


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_nt_xent_scale_invariant(c):
    rng = np.random.default_rng(11)
    Zs, Ze = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    a = dele.nt_xent(Tensor(Zs), Tensor(Ze), 0.1).item()
    b = dele.nt_xent(Tensor(c * Zs), Tensor(c * Ze), 0.1).item()
    assert abs(a - b) < 1e-9


def test_nt_xent_errors():
    with pytest.raises(ValueError):
        dele.nt_xent(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), 0.1)
    with pytest.raises(ValueError):
        dele.nt_xent(Tensor([[0.0, 0.0], [1.0, 1.0]]), Tensor(np.ones((2, 2))), 0.1)
    with pytest.raises(ValueError):
        dele.nt_xent(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.0)
    with pytest.raises(ShapeError):
        dele.nt_xent(Tensor(np.eye(2)), Tensor(np.ones((3, 2))), 0.1)


# ---------------------------------------------------------------- objective


def test_dele_loss_arithmetic():
    one = Tensor(1.0)
    assert dele.dele_loss(one, one, one, dele.DeleLossWeights(1.0, 1.0)).item() == 3.0
    l3 = Tensor(0.8125)
    assert dele.dele_loss(None, None, l3, dele.DeleLossWeights(0.0, 0.0)).item() == 0.8125
    with pytest.raises(ValueError):
        dele.DeleLossWeights(delta=-0.1)
    with pytest.raises(ValueError):
        dele.DeleLossWeights(tau=0.0)


def test_ablation_limit_is_classification_loss():
    cfg, p, tokens = setup(delta=0.0, mu=0.0)
    out = dele.dele_forward(p, toy_batch(6, toy_vocab(), cfg, 0), tokens, cfg)
    assert out["loss"].item() == out["l_cls"].item()
    assert "l_cl" not in out and "l_r2" not in out


def test_frozen_descriptions_same_forward_value():
    cfg, p, tokens = setup(delta=0.3, mu=0.3)
    batch = toy_batch(6, toy_vocab(), cfg, 0)
    live = dele.dele_forward(p, batch, tokens, cfg)["loss"].item()
    frozen = dele.dele_forward(p, batch, tokens, cfg.replace(freeze_descriptions=True))["loss"].item()
    assert abs(live - frozen) < 1e-12


def test_dele_grad_suite():
    from labelsem.gradcheck import run_suite

    bad = [(r.name, r.error) for r in run_suite("dele", seeds=(0,)) if not r.passed]
    assert not bad
