"""Adam, the training loop, inference and checkpoint files."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ndtensor as nd
from .encoder import iter_batches
from .graphdata import Graph
from .model import PRESETS, VARIANTS, Model, ModelConfig
from .protobank import PrototypeBank

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    K: int = 4
    beta: float = 0.1
    alpha: float = 0.99
    tau: float = 0.1
    prune_n: int = 2
    seed: int = 0
    preset: str = "synthetic"
    variant: str = "full"
    layers: int | None = None
    hidden: int | None = None
    d_p: int | None = None
    d_att: int | None = None
    readout: str = "mean"
    val_metric: str = "accuracy"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("epochs", "batch_size", "K", "prune_n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.tau <= 0 or self.beta < 0:
            raise ValueError("lr and tau must be positive, beta non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.val_metric not in ("accuracy", "roc_auc"):
            raise ValueError(f"unknown validation metric {self.val_metric!r}")

    def model_config(self, in_dim: int, num_classes: int) -> ModelConfig:
        layers, hidden = PRESETS[self.preset]
        return ModelConfig(
            in_dim=in_dim,
            num_classes=num_classes,
            layers=self.layers or layers,
            hidden=self.hidden or hidden,
            K=self.K,
            prune_n=self.prune_n,
            alpha=self.alpha,
            tau=self.tau,
            beta=self.beta,
            d_p=self.d_p,
            d_att=self.d_att,
            readout=self.readout,
            variant=self.variant,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: Sequence[nd.Tensor]) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[nd.Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update; ``None`` gradients count as zero."""
    if len(params) != len(grads):
        raise nd.ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise nd.ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ----------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    in_dim: int
    num_classes: int
    tensors: dict[str, np.ndarray]
    bank: np.ndarray | None
    rng: str
    epoch: int
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> Model:
        model = Model(self.config.model_config(self.in_dim, self.num_classes), np.random.default_rng(0))
        named = dict(model.named_tensors())
        if set(named) != set(self.tensors):
            raise CheckpointError(f"checkpoint tensors {sorted(self.tensors)} do not match model {sorted(named)}")
        for name, t in named.items():
            if t.data.shape != self.tensors[name].shape:
                raise CheckpointError(f"tensor {name}: shape {self.tensors[name].shape} vs model {t.data.shape}")
            t.data = self.tensors[name].copy()
        if self.bank is not None:
            K = model.cfg.K
            model.bank = PrototypeBank(self.bank.reshape(self.num_classes, K, -1).copy())
        return model

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_checkpoint(self).encode()).hexdigest()


def snapshot(model: Model, config: TrainConfig, rng: np.random.Generator, epoch: int) -> Checkpoint:
    return Checkpoint(
        config=config,
        in_dim=model.cfg.in_dim,
        num_classes=model.cfg.num_classes,
        tensors={name: t.data.copy() for name, t in model.named_tensors()},
        bank=None if model.bank is None else model.bank.matrix().copy(),
        rng=json.dumps(rng.bit_generator.state, sort_keys=True),
        epoch=epoch,
    )


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype="<f8")
    if a.ndim != 2:
        a = a.reshape(1, -1) if a.ndim < 2 else a.reshape(a.shape[0], -1)
    return {"shape": [int(a.shape[0]), int(a.shape[1])], "data_b64": base64.b64encode(a.tobytes(order="C")).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    r, c = d["shape"]
    raw = base64.b64decode(d["data_b64"], validate=True)
    if len(raw) != 8 * r * c:
        raise CheckpointError(f"tensor payload has {len(raw)} bytes, expected {8 * r * c}")
    return np.frombuffer(raw, dtype="<f8").reshape(r, c).astype(np.float64)


def dumps_checkpoint(ckpt: Checkpoint) -> str:
    config = asdict(ckpt.config)
    config["in_dim"] = ckpt.in_dim
    config["num_classes"] = ckpt.num_classes
    doc = {
        "version": ckpt.version,
        "config": config,
        "tensors": {name: _encode_array(a) for name, a in sorted(ckpt.tensors.items())},
        "bank": None if ckpt.bank is None else _encode_array(ckpt.bank),
        "rng": ckpt.rng,
        "epoch": ckpt.epoch,
    }
    return json.dumps(doc, indent=1)


def loads_checkpoint(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CheckpointError("corrupt checkpoint: missing version")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc['version']} (this build reads version {CHECKPOINT_VERSION})")
    try:
        cfg = dict(doc["config"])
        in_dim = int(cfg.pop("in_dim"))
        num_classes = int(cfg.pop("num_classes"))
        return Checkpoint(
            config=TrainConfig.from_dict(cfg),
            in_dim=in_dim,
            num_classes=num_classes,
            tensors={name: _decode_array(t) for name, t in doc["tensors"].items()},
            bank=None if doc["bank"] is None else _decode_array(doc["bank"]),
            rng=str(doc["rng"]),
            epoch=int(doc["epoch"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(dumps_checkpoint(ckpt), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------- inference


def infer_model(model: Model, graphs: Sequence[Graph], batch_size: int = 256, with_embeddings: bool = False):
    if not graphs:
        raise ValueError("no graphs to run inference on")
    probs, embs = [], []
    for _, batch in iter_batches(graphs, batch_size):
        p, z = model.predict_batch(batch)
        probs.append(p)
        embs.append(z)
    P = np.concatenate(probs)
    return (P, np.concatenate(embs)) if with_embeddings else P


def infer(ckpt: Checkpoint, graphs: Sequence[Graph], batch_size: int = 256, with_embeddings: bool = False):
    """Per-graph class probabilities with frozen prototypes; never mutates ``ckpt``."""
    if graphs and graphs[0].x.shape[1] != ckpt.in_dim:
        raise ValueError(f"graphs have {graphs[0].x.shape[1]} node features, checkpoint expects {ckpt.in_dim}")
    return infer_model(ckpt.build_model(), graphs, batch_size, with_embeddings)


# -------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord] = field(default_factory=list)
    final_model: Model | None = None


def _val_score(model: Model, graphs: Sequence[Graph], metric: str) -> float:
    from .evalcli import accuracy, roc_auc

    P = infer_model(model, graphs)
    labels = np.array([g.y for g in graphs])
    if metric == "roc_auc":
        return roc_auc(P[:, 1], labels)
    return accuracy(P.argmax(axis=1), labels)


def train(
    config: TrainConfig,
    dataset: dict[str, Sequence[Graph]],
    hook: Callable[[str], None] | None = None,
    on_batch: Callable[[Model], None] | None = None,
) -> TrainResult:
    """Fit a model on ``dataset['train']``, keeping the best epoch on ``dataset['val']``.

    ``hook`` receives step events in execution order; ``on_batch`` sees the
    model after every optimizer step.
    """
    train_set, val_set = dataset.get("train"), dataset.get("val")
    if not train_set:
        raise ValueError("empty train split")
    if not val_set:
        raise ValueError("empty val split")
    in_dim = train_set[0].x.shape[1]
    num_classes = int(max(g.y for g in (*train_set, *val_set))) + 1
    num_classes = max(num_classes, 2)
    rng = np.random.default_rng(config.seed)
    model = Model(config.model_config(in_dim, num_classes), rng)
    params = model.parameters()
    state = adam_init(params)
    emit = hook or (lambda _: None)

    best: Checkpoint | None = None
    best_score = -np.inf
    log: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for _, batch in iter_batches(train_set, config.batch_size, order):
            for p in params:
                p.zero_grad()
            with nd.Tape() as tape:
                out = model.forward_train(batch, hook)
            tape.backward(out.loss)
            adam_step(params, [p.grad for p in params], state, config.lr)
            emit("step")
            if out.bank is not None:
                model.bank = out.bank
            total += out.loss.item() * batch.num_graphs
            seen += batch.num_graphs
            if on_batch is not None:
                on_batch(model)
        score = _val_score(model, val_set, config.val_metric)
        rec = EpochRecord(epoch, float(total / seen), float(score))
        log.append(rec)
        logger.info("epoch %d train_loss %.6f val_%s %.4f", epoch, rec.train_loss, config.val_metric, score)
        if score > best_score:
            best_score = score
            best = snapshot(model, config, rng, epoch)
    return TrainResult(best, log, model)


def write_metrics_csv(path, log: Sequence[EpochRecord]) -> None:
    lines = ["epoch,train_loss,val_metric"]
    lines += [f"{r.epoch},{float(r.train_loss)!r},{float(r.val_metric)!r}" for r in log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
