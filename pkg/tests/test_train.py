import json
import math

import numpy as np
import pytest

from labelsem import cli
from labelsem import tensor as T
from labelsem import train as tr
from labelsem.config import ConfigError, TrainConfig, load_config, parse_config
from labelsem.data import DataError, SynthSpec, gen_synthetic, load_dataset, make_batch
from labelsem.train import (
    Adam,
    LabelSetMismatch,
    checkpoint_bytes,
    error_rate_reduction,
    evaluate,
    export_embeddings,
    load_checkpoint,
    load_eval_examples,
    lr_factor,
    optimizer_step,
    train,
)

SMALL = dict(d_p=8, d_ff=16, n_max=24, d_m=12, d_a=6, d_2=8, d_3=8, batch_size=12, epochs=2)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    gen_synthetic(SynthSpec(classes=3, vocab_size=60, per_class=24, seed=4), root)
    return root


def small_config(corpus, **changes):
    values = dict(SMALL, train_path=str(corpus / "train.jsonl"), dev_path=str(corpus / "dev.jsonl"),
                  test_path=str(corpus / "test.jsonl"), labels_path=str(corpus / "labels.json"))
    values.update(changes)
    return TrainConfig(**values).validate()


@pytest.fixture(scope="module", params=["dele", "r2net"])
def trained(request, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp(request.param)
    cfg = small_config(corpus, model=request.param, checkpoint_path=str(out / "m.ckpt"))
    return train(cfg)


# ---------------------------------------------------------------- schedule


def test_lr_factor_examples():
    C, w = 100, 0.1
    assert lr_factor(10, C, w) == 1.0  # second branch at the boundary
    assert lr_factor(9, C, w) == 1.0  # warmup crest
    assert abs(lr_factor(C, C, w)) < 1e-30
    lr = lr_factor(C, C, w) * (1.0 - 1e-6) + 1e-6
    assert math.isclose(lr, 1e-6)


@pytest.mark.parametrize("C,w", [(100, 0.1), (37, 0.3), (10, 0.5), (250, 0.05)])
def test_lr_factor_bounds_and_monotone_decay(C, w):
    values = [lr_factor(i, C, w) for i in range(C + 1)]
    assert all(0.0 <= v <= 1.0 for v in values)
    decay = values[math.ceil(w * C):]
    assert all(b <= a for a, b in zip(decay, decay[1:]))


def test_lr_factor_continuity_at_boundary():
    C, w = 200, 0.1
    k = math.ceil(w * C)
    slope = math.pi / (2 * w * C)  # steepest slope of the warmup branch
    assert abs(lr_factor(k - 1, C, w) - lr_factor(k, C, w)) <= slope


def test_lr_factor_degenerate_warmup():
    assert lr_factor(0, 10, 0.0) == 1.0
    assert lr_factor(9, 10, 1.0) == 1.0
    assert lr_factor(0, 10, 1.0) < lr_factor(5, 10, 1.0)


def test_lr_factor_errors():
    with pytest.raises(ValueError):
        lr_factor(11, 10, 0.1)
    with pytest.raises(ValueError):
        lr_factor(-1, 10, 0.1)


# ---------------------------------------------------------------- metric convention


@pytest.mark.parametrize("a,b,expected", [(0.903, 0.911, "+8.25%"), (0.903, 0.913, "+10.31%")])
def test_error_rate_reduction_table_values(a, b, expected):
    assert f"{error_rate_reduction(a, b):+.2f}%" == expected


def test_error_rate_reduction_edges():
    assert error_rate_reduction(0.8, 0.8) == 0.0
    assert error_rate_reduction(0.9, 0.8) < 0
    with pytest.raises(ValueError):
        error_rate_reduction(1.0, 0.9)


# ---------------------------------------------------------------- config


def test_config_parsing(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("model = r2net  # comment\nkernel_sizes = 1, 2\nuse_positions = false\ntrain_path = d/t.jsonl\n")
    cfg = load_config(f)
    assert cfg.model == "r2net" and cfg.kernel_sizes == (1, 2) and cfg.use_positions is False
    assert cfg.train_path == str(tmp_path / "d" / "t.jsonl")
    assert parse_config(cfg.to_text()).to_text() == cfg.to_text()


@pytest.mark.parametrize("text", ["bogus = 1", "epochs = many", "batch_size = 10", "eta = 2",
                                  "tau = 0", "model = bert", "no equals sign"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# ---------------------------------------------------------------- training


def test_history_and_test_metrics(trained):
    assert [h["epoch"] for h in trained.history] == [1, 2]
    for h in trained.history:
        assert 0 <= h["dev"]["accuracy"] <= 1 and 0 <= h["train_accuracy"] <= 1
        assert "loss" in h["losses"] and h["epoch_seconds"] >= 0
    assert 0 <= trained.test["accuracy"] <= 1 and 0 <= trained.test["r2_accuracy"] <= 1
    assert trained.checkpoint.exists()


def test_zero_epochs_reports_initial_evaluation(corpus):
    res = train(small_config(corpus, epochs=0))
    assert len(res.history) == 1 and res.history[0]["epoch"] == 0
    assert set(res.history[0]) == {"epoch", "dev"}


def test_same_seed_same_losses(corpus):
    a = train(small_config(corpus, epochs=1, model="r2net"))
    b = train(small_config(corpus, epochs=1, model="r2net"))
    assert a.history[0]["losses"] == b.history[0]["losses"]


def test_divergence_names_batch(corpus, monkeypatch):
    real = tr.Model.forward

    def poisoned(self, batch):
        out = real(self, batch)
        out["loss"] = out["loss"] * float("nan")
        return out

    monkeypatch.setattr(tr.Model, "forward", poisoned)
    with pytest.raises(tr.DivergenceError, match="batch 0"):
        train(small_config(corpus, epochs=1))


def test_zero_aux_weights_leave_pair_head_untouched(corpus):
    cfg = small_config(corpus, delta=0.0, mu=0.0)
    vocab, labels, splits = tr.prepare(cfg)
    model = tr.Model.create(cfg, vocab, labels)
    ids, mask = model.encode_examples(splits["train"][:12])
    y = [e.label for e in splits["train"][:12]]
    before = model.params.snapshot()
    T.reset_tape()
    grads = T.backward(model.forward(make_batch(ids, mask, y, np.random.default_rng(0)))["loss"])
    optimizer_step(Adam(), model.params, grads, 1.0, cfg)
    after = model.params.snapshot()
    for name in before:
        changed = not np.array_equal(before[name], after[name])
        if name.startswith(("dele.pair", "dele.proj")):
            assert not changed, name
    assert not np.array_equal(before["dele.cls.1.w"], after["dele.cls.1.w"])


# ---------------------------------------------------------------- evaluation


def test_evaluate_invariant_to_batch_size_and_order(trained, corpus):
    model = trained.model
    examples = load_eval_examples(model, corpus / "test.jsonl")
    base = evaluate(model, examples)
    assert evaluate(model, examples, batch_size=5) == base
    assert evaluate(model, examples[::-1], batch_size=7) == base


def test_evaluate_empty_and_mismatch(trained, tmp_path):
    with pytest.raises(DataError):
        evaluate(trained.model, [])
    f = tmp_path / "x.jsonl"
    f.write_text(json.dumps({"text": "a", "label": "not_a_label"}) + "\n")
    with pytest.raises(LabelSetMismatch):
        load_eval_examples(trained.model, f)


def test_evaluate_perfect_and_random_predictors(trained, corpus, monkeypatch):
    model = trained.model
    examples = load_eval_examples(model, corpus / "test.jsonl")[:10]
    width = model.cfg.d_p * (2 if model.cfg.model == "r2net" else 1)

    def oracle(m, exs, batch_size=64):
        probs = np.eye(m.labels.m)[[e.label for e in exs]]
        return probs, probs, np.zeros((len(exs), width))

    monkeypatch.setattr(tr, "_infer_all", oracle)
    assert evaluate(model, examples)["accuracy"] == 1.0

    rng = np.random.default_rng(0)
    many = [type(examples[0])("t", int(c), f"id{i}") for i, c in enumerate(rng.integers(2, size=10_000))]

    def coin(m, exs, batch_size=64):
        probs = rng.random((len(exs), m.labels.m))
        probs[:, 2:] = 0.0
        return probs, probs, np.zeros((len(exs), width))

    monkeypatch.setattr(tr, "_infer_all", coin)
    assert abs(evaluate(model, many)["accuracy"] - 0.5) <= 0.02


def test_export_embeddings(trained, corpus, tmp_path):
    model = trained.model
    examples = load_eval_examples(model, corpus / "test.jsonl")[:3]
    a = export_embeddings(model, examples, tmp_path / "a.csv")
    b = export_embeddings(model, examples, tmp_path / "b.csv")
    lines = a.read_text().splitlines()
    width = model.cfg.d_p * (2 if model.cfg.model == "r2net" else 1)
    assert len(lines) == 4
    assert all(len(line.split(",")) == 2 + width for line in lines)
    assert lines[0].startswith("example_id,label,v0")
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_roundtrip(trained, corpus):
    model = load_checkpoint(trained.checkpoint)
    assert checkpoint_bytes(model) == trained.checkpoint.read_bytes()
    examples = load_eval_examples(model, corpus / "test.jsonl")
    assert evaluate(model, examples) == trained.test


def test_checkpoint_rejects_garbage(tmp_path):
    f = tmp_path / "bad.ckpt"
    f.write_bytes(b"not a checkpoint at all")
    with pytest.raises(tr.CheckpointError):
        load_checkpoint(f)
    f.write_bytes(tr.MAGIC + b"\x01\x00\x00\x00\xff")
    with pytest.raises(tr.CheckpointError):
        load_checkpoint(f)


# ---------------------------------------------------------------- command line


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_metric(capsys):
    code, out, _ = run_cli(capsys, "metric", "err-reduction", "--backbone", "90.3%", "--model", "91.1%")
    assert code == 0 and out.strip() == "+8.25%"
    code, out, _ = run_cli(capsys, "metric", "err-reduction", "--backbone", "0.903", "--model", "0.913")
    assert out.strip() == "+10.31%"


def test_cli_errors_are_one_line(capsys, tmp_path):
    code, out, err = run_cli(capsys, "eval", "--checkpoint", str(tmp_path / "none"), "--data", "x")
    assert code != 0 and out == "" and len(err.strip().splitlines()) == 1
    (tmp_path / "c.txt").write_text("unknown_key = 3\n")
    code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "c.txt"))
    assert code != 0 and "unknown_key" in err


def test_cli_end_to_end(capsys, tmp_path):
    (tmp_path / "spec.txt").write_text("classes = 3\nvocab_size = 60\nper_class = 24\nseed = 2\n")
    code, out, _ = run_cli(capsys, "synth", "--spec", str(tmp_path / "spec.txt"), "--out", str(tmp_path / "d"))
    assert code == 0 and (tmp_path / "d" / "train.jsonl").exists()

    cfg = "\n".join(f"{k} = {v}" for k, v in SMALL.items())
    cfg += "\nmodel = r2net\ntrain_path = d/train.jsonl\ndev_path = d/dev.jsonl\ntest_path = d/test.jsonl\n"
    cfg += "labels_path = d/labels.json\ncheckpoint_path = out/m.ckpt\n"
    (tmp_path / "cfg.txt").write_text(cfg)
    code, out, _ = run_cli(capsys, "train", "--config", str(tmp_path / "cfg.txt"))
    records = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and [r["epoch"] for r in records[:-1]] == [1, 2] and records[-1]["split"] == "test"

    ckpt = str(tmp_path / "out" / "m.ckpt")
    data = str(tmp_path / "d" / "test.jsonl")
    code, out, _ = run_cli(capsys, "eval", "--checkpoint", ckpt, "--data", data)
    assert code == 0 and json.loads(out)["accuracy"] == records[-1]["accuracy"]

    code, _, _ = run_cli(capsys, "export-embeddings", "--checkpoint", ckpt, "--data", data,
                         "--out", str(tmp_path / "e.csv"))
    assert code == 0 and len((tmp_path / "e.csv").read_text().splitlines()) == 1 + 18

    code, out, _ = run_cli(capsys, "train", "--config", str(tmp_path / "cfg.txt"), "--seeds", "0,1")
    summary = json.loads(out.splitlines()[-1])
    assert code == 0 and [s["seed"] for s in summary["summary"]] == [0, 1]
    assert summary["best_seed"] in (0, 1)


def test_cli_gradcheck_module(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--module", "tensor_core")
    rows = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and rows and all(r["passed"] for r in rows)
    assert {r["seed"] for r in rows} == {0, 1, 2}


def test_dataset_ids_are_stable(corpus):
    a, _ = load_dataset(corpus / "test.jsonl")
    b, _ = load_dataset(corpus / "test.jsonl")
    assert [e.id for e in a] == [e.id for e in b]
