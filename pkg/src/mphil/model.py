"""Full model: encoder -> projector -> prototype classifier, plus ablations and the ERM reference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndtensor as nd
from .encoder import EncoderParams, GraphBatch, encode, gated_readout, gin_stack, graph_pool
from .hypersphere import ProjectorParams, project
from .losses import loss_cls, loss_ipm, loss_ps, cross_entropy, total_loss
from .ndtensor import Tensor
from .protobank import (
    AttentionParams,
    PrototypeBank,
    assignment_weights,
    class_probabilities,
    ema_update,
    init_prototypes,
    prune_weights,
    uniform_weights,
)

VARIANTS = ("full", "no-ipm", "no-ps", "no-projector", "single-proto", "no-update", "no-prune", "erm")
PRESETS = {"synthetic": (4, 128), "molecular": (3, 300)}


@dataclass
class ModelConfig:
    in_dim: int
    num_classes: int
    layers: int = 4
    hidden: int = 128
    K: int = 4
    prune_n: int = 2
    alpha: float = 0.99
    tau: float = 0.1
    beta: float = 0.1
    d_p: int | None = None
    d_att: int | None = None
    readout: str = "mean"
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "single-proto":
            self.K = 1
        if self.K < 1 or self.num_classes < 2:
            raise ValueError("need K >= 1 and at least two classes")
        self.prune_n = min(self.prune_n, self.K)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class StepOutput:
    loss: Tensor
    bank: PrototypeBank
    parts: dict = field(default_factory=dict)


class Model:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = EncoderParams(cfg.in_dim, cfg.hidden, cfg.layers, rng, cfg.readout)
        self.projector = None
        self.att = None
        self.bank = None
        self.head_w = self.head_b = None
        if cfg.variant == "erm":
            bound = 1.0 / np.sqrt(cfg.hidden)
            self.head_w = nd.parameter(rng.uniform(-bound, bound, (cfg.hidden, cfg.num_classes)), "head.w")
            self.head_b = nd.parameter(rng.uniform(-bound, bound, (1, cfg.num_classes)), "head.b")
            return
        if cfg.variant == "no-projector":
            d_p = cfg.hidden
        else:
            self.projector = ProjectorParams(cfg.hidden, cfg.d_p, rng)
            d_p = self.projector.d_p
        self.d_p = d_p
        self.att = AttentionParams(d_p, cfg.d_att, rng)
        self.bank = init_prototypes(cfg.num_classes, cfg.K, d_p, rng)

    # ------------------------------------------------------------ parameters

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.named_tensors()
        if self.cfg.variant == "erm":
            return out + [("head.w", self.head_w), ("head.b", self.head_b)]
        if self.projector is not None:
            out += self.projector.named_tensors()
        return out + self.att.named_tensors()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    # --------------------------------------------------------------- forward

    def embed(self, batch: GraphBatch) -> Tensor:
        """Graph embeddings fed to the classifier: unit vectors unless the projector is ablated."""
        if self.cfg.variant == "erm":
            return graph_pool(gin_stack(self.encoder.gnn_e, nd.constant(batch.x), batch), batch, "mean")
        H, S = encode(self.encoder, batch)
        z = gated_readout(H, S, batch, self.cfg.readout)
        if self.projector is None:
            return z
        return project(self.projector, z)

    def weights(self, Z: Tensor, bank: PrototypeBank) -> list[Tensor]:
        cfg = self.cfg
        if cfg.variant == "no-update":
            return [uniform_weights(Z.rows, cfg.K) for _ in range(cfg.num_classes)]
        out = []
        for c in range(cfg.num_classes):
            w = assignment_weights(self.att, Z, bank.class_tensor(c))
            if cfg.variant != "no-prune":
                w = prune_weights(w, cfg.prune_n)
            out.append(w)
        return out

    def logits_erm(self, Z: Tensor) -> Tensor:
        return nd.add_row(nd.matmul(Z, self.head_w), self.head_b)

    def forward_train(self, batch: GraphBatch, hook: Callable[[str], None] | None = None) -> StepOutput:
        """One training forward pass in the order: embed, weights, EMA, probabilities, loss."""
        emit = hook or (lambda _: None)
        cfg = self.cfg
        y = batch.labels
        Z = self.embed(batch)
        emit("embed")
        if cfg.variant == "erm":
            loss = cross_entropy(self.logits_erm(Z), y)
            emit("loss")
            return StepOutput(loss, None, {"L_C": loss.item()})
        W = self.weights(Z, self.bank)
        emit("weights")
        updated = [
            ema_update(self.bank.class_tensor(c), Z, y, W[c], cfg.alpha, c) for c in range(cfg.num_classes)
        ]
        protos = nd.concat(updated, axis=0)
        emit("ema_update")
        p = class_probabilities(protos, W, Z, cfg.tau)
        emit("probabilities")
        l_c = loss_cls(p, y)
        l_ps = None if cfg.variant == "no-ps" else loss_ps(protos, cfg.tau, cfg.num_classes)
        l_ipm = None if cfg.variant == "no-ipm" else loss_ipm(Z, y, protos, cfg.tau, cfg.num_classes)
        loss = total_loss(l_c, l_ps, l_ipm, cfg.beta)
        emit("loss")
        parts = {"L_C": l_c.item()}
        if l_ps is not None:
            parts["L_PS"] = l_ps.item()
        if l_ipm is not None:
            parts["L_IPM"] = l_ipm.item()
        new_bank = PrototypeBank(protos.data.reshape(cfg.num_classes, cfg.K, -1).copy())
        return StepOutput(loss, new_bank, parts)

    def predict_batch(self, batch: GraphBatch) -> tuple[np.ndarray, np.ndarray]:
        """(probabilities [B x C], embeddings [B x d_p]) with frozen prototypes."""
        Z = self.embed(batch)
        if self.cfg.variant == "erm":
            return nd.softmax_rows(self.logits_erm(Z)).data, Z.data
        W = self.weights(Z, self.bank)
        p = class_probabilities(nd.constant(self.bank.matrix()), W, Z, self.cfg.tau)
        return p.data, Z.data
