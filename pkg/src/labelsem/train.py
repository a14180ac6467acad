"""Optimisation loop, learning-rate schedule, evaluation, checkpoints and exports."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig, parse_config
from .data import (
    DataError,
    Example,
    LabelSet,
    Vocab,
    build_vocab,
    load_dataset,
    load_label_descriptions,
    make_batch,
    make_pairs,
    tokenize_many,
)
from .dele import LabelTokens, dele_forward, dele_r2_predict, dele_predict, encode_labels
from .dele import init_dele, l2s_attention, s2l_attention
from .encoder import encode_batch
from .params import Params
from . import r2net


class DivergenceError(RuntimeError):
    pass


class LabelSetMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# schedule and metric conventions
# ----------------------------------------------------------------------------


def lr_factor(i: int, C: int, warmup: float) -> float:
    """Warmup-then-decay multiplier in [0, 1] for batch ``i`` of ``C``.

    Cosine rise to 1 at batch ``warmup*C - 1``, then a squared cosine decay
    that reaches 0 at ``i == C``.
    """
    if C < 1:
        raise ValueError("total batch count must be positive")
    if not 0 <= i <= C:
        raise ValueError(f"batch index {i} outside [0, {C}]")
    if not 0.0 <= warmup <= 1.0:
        raise ValueError(f"warmup fraction must lie in [0, 1], got {warmup}")
    boundary = round(warmup * C, 9)  # absorb float noise such as 0.1 * 1660
    if warmup < 1.0 and i >= boundary:
        return (0.5 * math.cos(math.pi / (C - boundary) * (i - boundary)) + 0.5) ** 2
    return 0.5 * math.cos(math.pi / boundary * (i - boundary + 1)) + 0.5


def scheduled_multiplier(i: int, C: int, cfg: TrainConfig) -> float:
    return lr_factor(i, C, cfg.warmup) * (cfg.lr_max - cfg.lr_min) + cfg.lr_min


def error_rate_reduction(acc_backbone: float, acc_model: float) -> float:
    """Signed percentage decrease of the error rate relative to the backbone."""
    if not (0.0 < acc_backbone < 1.0 and 0.0 < acc_model < 1.0):
        if acc_backbone == 1.0:
            raise ValueError("backbone accuracy of 1 leaves no error to reduce")
        raise ValueError("accuracies must lie in (0, 1)")
    err_b, err_m = 1.0 - acc_backbone, 1.0 - acc_model
    return (err_b - err_m) / err_b * 100.0


# ----------------------------------------------------------------------------
# model bundle
# ----------------------------------------------------------------------------


@dataclass
class Model:
    cfg: TrainConfig
    vocab: Vocab
    labels: LabelSet
    params: Params
    tokens: LabelTokens = field(init=False)

    def __post_init__(self):
        self.tokens = LabelTokens.build(self.labels, self.vocab, self.cfg.n_max)

    @classmethod
    def create(cls, cfg: TrainConfig, vocab: Vocab, labels: LabelSet) -> "Model":
        rng = np.random.default_rng([cfg.seed, 0])
        init = r2net.init_r2net if cfg.model == "r2net" else init_dele
        return cls(cfg, vocab, labels, init(cfg, len(vocab), labels.m, rng))

    def forward(self, batch) -> dict:
        if self.cfg.model == "r2net":
            return r2net.r2net_forward(self.params, batch, self.cfg)
        return dele_forward(self.params, batch, self.tokens, self.cfg)

    def label_matrix(self):
        return encode_labels(self.params, self.tokens, self.cfg)

    def infer(self, ids, mask, E=None):
        """(label probabilities, exported vectors, pair-head vectors) without recording."""
        p, cfg = self.params, self.cfg
        with T.no_grad():
            if cfg.model == "r2net":
                v = r2net.represent(p, ids, mask, cfg)
                return r2net.predict_label(p, v).data, v.data, v.data
            E = self.label_matrix() if E is None else E
            H, v_g, tmask = encode_batch(p, ids, mask, cfg)
            h_e, _ = s2l_attention(E, v_g, p, cfg.mutual_interaction)
            h_s, _ = l2s_attention(H, tmask, E, p, cfg.mutual_interaction)
            probs = dele_predict(h_s if cfg.classifier_input == "hs" else h_e, p)
            return probs.data, h_s.data, h_e.data

    def pair_probs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        p = self.params
        with T.no_grad():
            if self.cfg.model == "r2net":
                return r2net.r2_predict(p, T.Tensor(a), T.Tensor(b)).data
            return dele_r2_predict(T.Tensor(a), T.Tensor(b), p).data

    def encode_examples(self, examples):
        texts = [e.text for e in examples]
        texts2 = [e.text2 for e in examples] if any(e.text2 is not None for e in examples) else None
        return tokenize_many(texts, self.vocab, self.cfg.n_max, texts2)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


def _infer_all(model: Model, examples, batch_size: int = 64):
    ids, mask = model.encode_examples(examples)
    E = None
    if model.cfg.model == "dele":
        with T.no_grad():
            E = model.label_matrix()
    probs, vecs, pair_vecs = [], [], []
    for s in range(0, len(examples), batch_size):
        pr, v, pv = model.infer(ids[s:s + batch_size], mask[s:s + batch_size], E)
        probs.append(pr)
        vecs.append(v)
        pair_vecs.append(pv)
    return np.concatenate(probs), np.concatenate(vecs), np.concatenate(pair_vecs)


def evaluate(model: Model, examples, batch_size: int = 64) -> dict:
    """Accuracy, per-class accuracy and R² pair accuracy on ``examples``."""
    if not examples:
        raise DataError("cannot evaluate on an empty dataset")
    y = np.array([e.label for e in examples])
    if y.max() >= model.labels.m:
        raise LabelSetMismatch("dataset labels exceed the model's label set")
    probs, _, pair_vecs = _infer_all(model, examples, batch_size)
    pred = probs.argmax(axis=1)
    per_class = {}
    for c, name in enumerate(model.labels.names):
        sel = y == c
        if sel.any():
            per_class[name] = float((pred[sel] == c).mean())
    metrics = {
        "n": len(examples),
        "accuracy": float((pred == y).mean()),
        "per_class_accuracy": per_class,
    }
    # pairs are drawn over id-sorted examples so the metric ignores input order
    by_id = sorted(range(len(examples)), key=lambda i: examples[i].id)
    by_id = np.array(by_id[: len(by_id) - len(by_id) % 2], dtype=np.int64)
    if by_id.size >= 2:
        local, targets = make_pairs(y[by_id], np.random.default_rng([model.cfg.seed, 2]))
        pairs = by_id[local]
        pp = model.pair_probs(pair_vecs[pairs[:, 0]], pair_vecs[pairs[:, 1]])
        metrics["r2_accuracy"] = float((pp.argmax(axis=1) == targets).mean())
    return metrics


def export_embeddings(model: Model, examples, path) -> Path:
    """CSV of example id, label name and the representation vector of each example."""
    _, vecs, _ = _infer_all(model, examples)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["example_id", "label"] + [f"v{j}" for j in range(vecs.shape[1])])
    for ex, v in zip(examples, vecs):
        writer.writerow([ex.id, model.labels.names[ex.label]] + [repr(float(x)) for x in v])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------


class Adam:
    """Adam moments per parameter; ``decay`` applies decoupled weight decay (AdamW)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float, decay: float = 0.0):
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        v = self.v[name]
        self.t[name] += 1
        t = self.t[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        if decay:
            param -= lr * decay * param
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(opt: Adam, params: Params, grads: T.GradientMap, multiplier: float, cfg: TrainConfig):
    for name, leaf in params.items():
        g = grads.get(leaf.node_id)
        if g is None:
            continue
        if name.startswith("enc."):
            opt.update(name, leaf.data, g, cfg.lr1 * multiplier, cfg.weight_decay)
        else:
            opt.update(name, leaf.data, g, cfg.lr2 * multiplier)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    test: dict | None = None
    checkpoint: Path | None = None


def prepare(cfg: TrainConfig):
    """Load splits, build the vocabulary and label set; returns (vocab, labels, splits)."""
    if not cfg.train_path:
        raise DataError("train_path is not set")
    train, names = load_dataset(cfg.train_path)
    labels = (
        load_label_descriptions(cfg.labels_path, names) if cfg.labels_path else LabelSet.bare(names)
    )
    splits = {"train": train}
    for split, path in (("dev", cfg.dev_path), ("test", cfg.test_path)):
        if path:
            splits[split], _ = load_dataset(path, names)
    corpus = [e.text for e in train] + [e.text2 for e in train if e.text2]
    corpus += [d for descs in labels.descriptions for d in descs]
    return build_vocab(corpus, cfg.min_freq), labels, splits


def _component_values(out: dict) -> dict:
    return {k: float(v.data) for k, v in out.items() if k.startswith("l_") and v is not None}


def _selection_key(metrics: dict) -> tuple[float, float]:
    # dev accuracy first; R² accuracy breaks ties once accuracy saturates
    return metrics["accuracy"], metrics.get("r2_accuracy", 0.0)


def train(cfg: TrainConfig, emit: Callable[[dict], None] | None = None) -> TrainResult:
    """Train per ``cfg``; keeps the best-dev parameters and writes a checkpoint if configured."""
    cfg.validate()
    vocab, labels, splits = prepare(cfg)
    model = Model.create(cfg, vocab, labels)
    train_set = splits["train"]
    select_set = splits.get("dev", train_set)
    ids, mask = model.encode_examples(train_set)
    y = np.array([e.label for e in train_set])
    N = cfg.batch_size
    per_epoch = len(train_set) // N
    if cfg.epochs and per_epoch == 0:
        raise DataError(f"training set of {len(train_set)} is smaller than one batch of {N}")
    C = cfg.epochs * per_epoch
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam()
    history: list[dict] = []

    def record(entry):
        history.append(entry)
        if emit:
            emit(entry)

    best = evaluate(model, select_set)
    best_key, best_params, stale = _selection_key(best), model.params.snapshot(), 0
    if cfg.epochs == 0:
        record({"epoch": 0, "dev": best})

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        totals: dict[str, float] = {}
        correct = 0
        factor = 0.0
        for b in range(per_epoch):
            idx = order[b * N:(b + 1) * N]
            batch = make_batch(ids[idx], mask[idx], y[idx], rng)
            T.reset_tape()
            out = model.forward(batch)
            loss = out["loss"]
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became non-finite at batch {step}")
            grads = T.backward(loss)
            factor = lr_factor(step, C, cfg.warmup)
            optimizer_step(opt, model.params, grads, scheduled_multiplier(step, C, cfg), cfg)
            step += 1
            totals["loss"] = totals.get("loss", 0.0) + float(loss.data)
            for k, v in _component_values(out).items():
                totals[k] = totals.get(k, 0.0) + v
            correct += int((out["probs"].data.argmax(axis=1) == batch.y).sum())
        T.reset_tape()
        dev = evaluate(model, select_set)
        entry = {
            "epoch": epoch,
            "train_accuracy": correct / (per_epoch * N),
            "losses": {k: v / per_epoch for k, v in sorted(totals.items())},
            "lr_factor": factor,
            "dev": dev,
            "epoch_seconds": round(time.perf_counter() - started, 3),
        }
        record(entry)
        if _selection_key(dev) > best_key:
            best_key, best_params, stale = _selection_key(dev), model.params.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.params.load(best_params)
    result = TrainResult(model, history)
    if "test" in splits:
        result.test = evaluate(model, splits["test"])
    if cfg.checkpoint_path:
        result.checkpoint = save_checkpoint(model, cfg.checkpoint_path)
    return result


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC = b"LSEMCKPT"
VERSION = 1


def _pack_bytes(buf: io.BytesIO, data: bytes) -> None:
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def checkpoint_bytes(model: Model) -> bytes:
    """Little-endian blob: header, config text, JSON metadata, then named float64 arrays."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _pack_bytes(buf, model.cfg.to_text().encode("utf-8"))
    meta = {"vocab": model.vocab.tokens, "labels": model.labels.names,
            "descriptions": model.labels.descriptions}
    _pack_bytes(buf, json.dumps(meta, sort_keys=True).encode("utf-8"))
    buf.write(struct.pack("<I", len(model.params)))
    for name, leaf in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        shape = leaf.data.shape
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(leaf.data.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    cfg = parse_config(bytes(take(n)).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    values = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = bytes(take(ln)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if shape else 1
        values[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    model = Model.create(cfg, Vocab(meta["vocab"]), LabelSet(meta["labels"], meta["descriptions"]))
    model.params.load(values)
    return model


def load_eval_examples(model: Model, path):
    try:
        examples, _ = load_dataset(path, model.labels.names)
    except DataError as exc:
        if "unknown label" in str(exc):
            raise LabelSetMismatch(str(exc)) from None
        raise
    return examples
