#!/usr/bin/env python3
"""
BPR training for GGCF.

Every trainable value (both embedding tables, the tangent tables behind the
hyperbolic points, gamma, gamma' and lambda) lives in flat Euclidean space,
so plain Adam over torch autograd gradients is all the optimizer needs.
"""

import math
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from tqdm import tqdm

from errors import ConfigError, DegenerateInputError, DimensionError, NumericError
from evaluation import evaluate
from graph import BprTriples, InteractionGraph, InteractionSet, sample_epoch
from model import AblationFlags, ParamSet, effective_lambda, forward, init_params, score, snapshot

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

Record = Dict[str, Any]


@dataclass
class TrainConfig:
    """Optimization settings for one training run."""

    learning_rate: float = 1e-3
    l2_weight: float = 1e-4
    batch_size: int = 1024
    epochs: int = 400
    layers: int = 3
    dim: int = 64
    seed: int = 2020
    eval_every: int = 10
    k: int = 20
    train_interaction_scales: bool = True
    deterministic: bool = False

    def validate(self) -> "TrainConfig":
        checks = [
            (self.learning_rate > 0, f"learning_rate must be > 0, got {self.learning_rate}"),
            (self.l2_weight >= 0, f"l2_weight must be >= 0, got {self.l2_weight}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.layers >= 0, f"layers must be >= 0, got {self.layers}"),
            (self.dim >= 1, f"dim must be >= 1, got {self.dim}"),
            (self.eval_every >= 1, f"eval_every must be >= 1, got {self.eval_every}"),
            (self.k >= 1, f"k must be >= 1, got {self.k}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class GradSet(ParamSet):
    """d(loss)/d(theta) for every ParamSet entry, plus the batch loss they came from."""

    loss: float = 0.0

    @classmethod
    def names(cls) -> List[str]:
        return ParamSet.names()


class AdamState:
    """Adam moments and step counter for one ParamSet (torch.optim.Adam underneath)."""

    def __init__(self, params: ParamSet, learning_rate: float = 1e-3):
        self.names = ParamSet.names()
        self.optimizer = torch.optim.Adam(
            params.tensors(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
        )
        self.step = 0

    def _param_state(self, name: str) -> Dict[str, torch.Tensor]:
        param = self.optimizer.param_groups[0]["params"][self.names.index(name)]
        return self.optimizer.state.get(param, {})

    def first_moment(self, name: str) -> Optional[torch.Tensor]:
        return self._param_state(name).get("exp_avg")

    def second_moment(self, name: str) -> Optional[torch.Tensor]:
        return self._param_state(name).get("exp_avg_sq")


def enable_determinism() -> None:
    """Single-threaded, deterministic kernels for byte-reproducible runs."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Mean of -ln sigmoid(pos - neg), computed as softplus(neg - pos)."""
    if pos_scores.shape != neg_scores.shape:
        raise DimensionError(
            f"positive and negative scores differ in shape: {tuple(pos_scores.shape)} vs {tuple(neg_scores.shape)}"
        )
    if pos_scores.numel() == 0:
        raise DegenerateInputError("bpr_loss on an empty batch")
    return F.softplus(-(pos_scores - neg_scores)).mean()


def l2_penalty(
    params: ParamSet, batch: BprTriples, l2_weight: float, flags: AblationFlags = AblationFlags()
) -> torch.Tensor:
    """(l2_weight / batch) * squared norms of the layer-0 rows the batch touches.

    Both tables are penalised, except the table of a branch the ablation
    switches off.
    """
    squared = torch.zeros((), dtype=params.euclid_user.dtype)
    if l2_weight == 0 or len(batch) == 0:
        return squared
    u = torch.from_numpy(batch.users)
    items = torch.from_numpy(np.concatenate([batch.pos_items, batch.neg_items]))
    tables = []
    if not flags.hyperbolic_only:
        tables.append((params.euclid_user, params.euclid_item))
    if not flags.euclidean_only:
        tables.append((params.tangent_user, params.tangent_item))
    for user_table, item_table in tables:
        squared = squared + user_table[u].pow(2).sum() + item_table[items].pow(2).sum()
    return (l2_weight / len(batch)) * squared


def batch_loss(
    graph: InteractionGraph,
    params: ParamSet,
    batch: BprTriples,
    config: TrainConfig,
    flags: AblationFlags = AblationFlags(),
) -> torch.Tensor:
    """BPR loss plus L2 penalty for one batch, with the autograd graph attached."""
    if len(batch) == 0:
        raise DegenerateInputError("cannot compute a loss on an empty batch")
    final = forward(graph, params, config.layers, flags)
    lam = effective_lambda(params, flags)
    pos = score(final, batch.users, batch.pos_items, lam)
    neg = score(final, batch.users, batch.neg_items, lam)
    return bpr_loss(pos, neg) + l2_penalty(params, batch, config.l2_weight, flags)


def gradients(
    graph: InteractionGraph,
    params: ParamSet,
    batch: BprTriples,
    config: TrainConfig,
    flags: AblationFlags = AblationFlags(),
) -> GradSet:
    """Exact gradients of the batch loss with respect to every parameter."""
    loss = batch_loss(graph, params, batch, config, flags)
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite batch loss: {float(loss)}")

    raw = torch.autograd.grad(loss, params.tensors(), allow_unused=True)
    grads = {}
    for name, tensor, grad in zip(ParamSet.names(), params.tensors(), raw):
        grad = torch.zeros_like(tensor) if grad is None else grad.detach()
        if not bool(torch.isfinite(grad).all()):
            raise NumericError(f"non-finite gradient for {name}")
        grads[name] = grad

    if not config.train_interaction_scales:
        grads["gamma"] = torch.zeros_like(grads["gamma"])
        grads["gamma_prime"] = torch.zeros_like(grads["gamma_prime"])

    return GradSet(**grads, loss=float(loss.detach()))


def adam_step(
    params: ParamSet, grads: GradSet, state: AdamState, learning_rate: float
) -> Tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update, in place."""
    for name in ParamSet.names():
        grad = getattr(grads, name)
        if not bool(torch.isfinite(grad).all()):
            bad = int((~torch.isfinite(grad)).sum())
            raise NumericError(f"refusing Adam step: {bad} non-finite entries in the gradient of {name}")

    for param, name in zip(params.tensors(), ParamSet.names()):
        param.grad = getattr(grads, name).clone()
    for group in state.optimizer.param_groups:
        group["lr"] = learning_rate

    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return params, state


def _should_evaluate(epoch: int, config: TrainConfig) -> bool:
    return epoch % config.eval_every == 0 or epoch == config.epochs


def fit(
    graph: InteractionGraph,
    config: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    test: Optional[InteractionSet] = None,
    config_hash: Optional[str] = None,
    on_record: Optional[Callable[[Record], None]] = None,
    on_checkpoint: Optional[Callable[[int, ParamSet], None]] = None,
    progress: bool = True,
) -> Tuple[ParamSet, List[Record]]:
    """
    Train a fresh ParamSet with mini-batch BPR.

    Each epoch visits every training edge once in shuffled order, each with
    one freshly drawn negative. With ``test`` given, recall/ndcg are computed
    every ``eval_every`` epochs and after the last one.

    Args:
        graph: Training graph
        config: Optimization settings
        flags: Ablation variant
        test: Held-out interactions for periodic evaluation
        config_hash: Stamped onto every history record
        on_record: Called with each epoch record as soon as it is complete
        on_checkpoint: Called with (epoch, params) whenever evaluation runs
        progress: Show a tqdm bar over batches

    Returns:
        Tuple of (trained params, per-epoch history records)
    """
    config.validate()
    if config.deterministic:
        enable_determinism()

    rng = np.random.default_rng(config.seed)
    params = init_params(graph.user_count, graph.item_count, config.dim, config.seed)
    state = AdamState(params, config.learning_rate)
    history: List[Record] = []
    metric_keys = (f"recall@{config.k}", f"ndcg@{config.k}")

    logger.info(
        f"Training {flags.name} for {config.epochs} epochs",
        layers=config.layers,
        dim=config.dim,
        lr=config.learning_rate,
        l2=config.l2_weight,
        config_hash=config_hash,
    )

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        triples = sample_epoch(graph, rng)
        total, seen = 0.0, 0

        batches = tqdm(
            triples.batches(config.batch_size),
            total=math.ceil(len(triples) / config.batch_size),
            desc=f"epoch {epoch}/{config.epochs}",
            disable=not progress,
            leave=False,
        )
        for batch in batches:
            grads = gradients(graph, params, batch, config, flags)
            adam_step(params, grads, state, config.learning_rate)
            total += grads.loss * len(batch)
            seen += len(batch)

        record: Record = {"epoch": epoch, "loss": total / seen}
        record.update(dict.fromkeys(metric_keys))
        if test is not None and _should_evaluate(epoch, config):
            final, lam = snapshot(graph, params, config.layers, flags)
            report = evaluate(final, graph, test, config.k, lam)
            record[metric_keys[0]] = report.recall
            record[metric_keys[1]] = report.ndcg

        elapsed = time.perf_counter() - started
        record["seconds"] = None if config.deterministic else round(elapsed, 3)
        if config_hash is not None:
            record["config_hash"] = config_hash

        history.append(record)
        if on_record is not None:
            on_record(record)
        logger.debug("Epoch complete", epoch=epoch, loss=record["loss"], seconds=round(elapsed, 3))
        if record[metric_keys[0]] is not None:
            logger.info(
                f"Epoch {epoch}: loss={record['loss']:.5f} "
                f"{metric_keys[0]}={record[metric_keys[0]]:.4f} {metric_keys[1]}={record[metric_keys[1]]:.4f}"
            )

        if on_checkpoint is not None and _should_evaluate(epoch, config):
            on_checkpoint(epoch, params)

    logger.success(f"Training finished after {config.epochs} epochs", final_loss=history[-1]["loss"])
    return params, history
