#!/usr/bin/env python3
"""
GGCF forward computation.

Each layer propagates user/item features over the interaction graph in two
geometries at once (a weighted sum in Euclidean space, a Lorentzian centroid
on the hyperboloid), lets the two geometries adjust each other, and feeds the
fused result to the next layer. Layers are averaged at the end and pairs are
scored with a Euclidean dot product plus a lambda-weighted Lorentzian product.
"""

from dataclasses import dataclass, fields
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch

import lorentz
from errors import ConfigError, DimensionError, NumericError
from graph import InteractionGraph

INIT_STD = 0.1

IndexLike = Union[int, Sequence[int], np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class AblationFlags:
    """Switches for the ablation variants."""

    disable_interaction: bool = False
    euclidean_only: bool = False
    hyperbolic_only: bool = False

    def __post_init__(self):
        if self.euclidean_only and self.hyperbolic_only:
            raise ConfigError("euclidean_only and hyperbolic_only are mutually exclusive")

    @property
    def interaction_active(self) -> bool:
        return not (self.disable_interaction or self.euclidean_only or self.hyperbolic_only)

    @property
    def name(self) -> str:
        for name, flags in ABLATIONS.items():
            if flags == self:
                return name
        return "custom"

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation: {name!r}. Valid: {', '.join(ABLATIONS)}")
        return ABLATIONS[name]


ABLATIONS = {
    "full": AblationFlags(),
    "no-interaction": AblationFlags(disable_interaction=True),
    "euclidean-only": AblationFlags(euclidean_only=True),
    "hyperbolic-only": AblationFlags(hyperbolic_only=True),
}


@dataclass
class ParamSet:
    """All trainable parameters.

    The hyperbolic tables hold tangent coordinates at the origin; the points
    themselves are exp0 of the rows, so every parameter is Euclidean.
    """

    euclid_user: torch.Tensor
    euclid_item: torch.Tensor
    tangent_user: torch.Tensor
    tangent_item: torch.Tensor
    gamma: torch.Tensor
    gamma_prime: torch.Tensor
    lam: torch.Tensor

    @property
    def user_count(self) -> int:
        return int(self.euclid_user.shape[0])

    @property
    def item_count(self) -> int:
        return int(self.euclid_item.shape[0])

    @property
    def dim(self) -> int:
        return int(self.euclid_user.shape[1])

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def tensors(self) -> List[torch.Tensor]:
        return [getattr(self, name) for name in self.names()]

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self


@dataclass
class LayerState:
    """Fused features of one layer (or the final fused representation)."""

    euclid_user: torch.Tensor
    euclid_item: torch.Tensor
    hyper_user: torch.Tensor
    hyper_item: torch.Tensor
    layer_index: int = 0

    @property
    def user_count(self) -> int:
        return int(self.euclid_user.shape[0])

    @property
    def item_count(self) -> int:
        return int(self.euclid_item.shape[0])


def init_params(user_count: int, item_count: int, d: int, seed: int) -> ParamSet:
    """Gaussian(0, 0.1) tables, gamma = gamma' = 0, lambda = 1; deterministic per seed."""
    if d < 1:
        raise ConfigError(f"embedding dimension must be >= 1, got {d}")
    generator = torch.Generator().manual_seed(seed)

    def table(rows: int) -> torch.Tensor:
        return torch.randn(rows, d, generator=generator, dtype=lorentz.DTYPE) * INIT_STD

    params = ParamSet(
        euclid_user=table(user_count),
        euclid_item=table(item_count),
        tangent_user=table(user_count),
        tangent_item=table(item_count),
        gamma=torch.zeros((), dtype=lorentz.DTYPE),
        gamma_prime=torch.zeros((), dtype=lorentz.DTYPE),
        lam=torch.ones((), dtype=lorentz.DTYPE),
    )
    return params.requires_grad_(True)


def _check_rows(graph: InteractionGraph, user_feats: torch.Tensor, item_feats: torch.Tensor) -> None:
    if user_feats.dim() != 2 or user_feats.shape[0] != graph.user_count:
        raise DimensionError(f"user features of shape {tuple(user_feats.shape)} do not fit {graph.user_count} users")
    if item_feats.dim() != 2 or item_feats.shape[0] != graph.item_count:
        raise DimensionError(f"item features of shape {tuple(item_feats.shape)} do not fit {graph.item_count} items")
    if user_feats.shape[1] != item_feats.shape[1]:
        raise DimensionError("user and item features differ in width")


def propagate_euclidean(
    graph: InteractionGraph, user_feats: torch.Tensor, item_feats: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """h_u = sum_i w_ui e_i and h_i = sum_u w_ui e_u; isolated rows come out zero."""
    _check_rows(graph, user_feats, item_feats)
    return (
        torch.sparse.mm(graph.user_to_item, item_feats),
        torch.sparse.mm(graph.item_to_user, user_feats),
    )


def _aggregate_centroid(
    adjacency: torch.Tensor, points: torch.Tensor, degree: np.ndarray
) -> torch.Tensor:
    z = torch.sparse.mm(adjacency, points)
    isolated = torch.from_numpy(degree == 0).unsqueeze(-1)
    norm = lorentz._linner(z, z).abs().clamp_min(lorentz.MIN_NORM**2).sqrt().unsqueeze(-1)
    safe = torch.where(isolated, torch.ones_like(norm), norm)
    h = torch.where(isolated, lorentz.origin_like(z), z / safe)
    return lorentz._project(h)


def propagate_hyperbolic(
    graph: InteractionGraph, user_points: torch.Tensor, item_points: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Weighted Lorentzian centroid of each node's neighbours; isolated rows become the origin."""
    _check_rows(graph, user_points, item_points)
    lorentz.check_on_manifold(user_points, "user points")
    lorentz.check_on_manifold(item_points, "item points")
    return _propagate_hyperbolic(graph, user_points, item_points)


def _propagate_hyperbolic(
    graph: InteractionGraph, user_points: torch.Tensor, item_points: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    return (
        _aggregate_centroid(graph.user_to_item, item_points, graph.user_degree),
        _aggregate_centroid(graph.item_to_user, user_points, graph.item_degree),
    )


def interact(
    h_r: torch.Tensor, h_h: torch.Tensor, gamma: torch.Tensor, gamma_prime: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Let each geometry pull on the other, scaled by how far apart they are.

    f_R = h_R + gamma * ‖h_R - log0(h_H)‖ * log0(h_H)
    f_H = h_H ⊕ ((gamma' * d_H(h_H, exp0(h_R))) ⊗ exp0(h_R))
    Works row-wise; users and items use the same formulas and scalars.
    """
    h_r, h_h = lorentz.as_tensor(h_r), lorentz.as_tensor(h_h)
    lorentz.check_on_manifold(h_h, "hyperbolic features")
    if h_h.shape[-1] != h_r.shape[-1] + 1:
        raise DimensionError("hyperbolic features must have one more coordinate than Euclidean ones")
    gamma, gamma_prime = lorentz.as_tensor(gamma), lorentz.as_tensor(gamma_prime)
    lorentz._check_finite(h_r, "euclidean features")
    lorentz._check_finite(torch.stack([gamma.reshape(()), gamma_prime.reshape(())]), "interaction scales")
    return _interact(h_r, h_h, gamma, gamma_prime)


def _interact(
    h_r: torch.Tensor, h_h: torch.Tensor, gamma: torch.Tensor, gamma_prime: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    log_h = lorentz._log0(h_h)
    d_r = torch.linalg.vector_norm(h_r - log_h, dim=-1, keepdim=True)
    f_r = h_r + gamma * d_r * log_h

    exp_r = lorentz._exp0(h_r)
    s = gamma_prime * lorentz._dist(h_h, exp_r)
    f_h = lorentz._madd(h_h, lorentz._smul(s, exp_r))
    return f_r, f_h


def fuse_layers(states: Sequence[LayerState]) -> LayerState:
    """Equal-weight fusion: mean in Euclidean space, uniform Lorentzian centroid on the hyperboloid."""
    if len(states) == 0:
        raise DimensionError("no layers to fuse")
    n = float(len(states))

    def euclid_mean(rows: List[torch.Tensor]) -> torch.Tensor:
        return torch.stack(rows).sum(dim=0) / n

    def hyper_mean(rows: List[torch.Tensor]) -> torch.Tensor:
        return lorentz.project(lorentz.normalize_timelike(torch.stack(rows).sum(dim=0) / n))

    return LayerState(
        euclid_user=euclid_mean([s.euclid_user for s in states]),
        euclid_item=euclid_mean([s.euclid_item for s in states]),
        hyper_user=hyper_mean([s.hyper_user for s in states]),
        hyper_item=hyper_mean([s.hyper_item for s in states]),
        layer_index=states[-1].layer_index,
    )


def _check_finite_layer(state: LayerState) -> None:
    for name in ("euclid_user", "euclid_item", "hyper_user", "hyper_item"):
        if not bool(torch.isfinite(getattr(state, name).detach()).all()):
            raise NumericError(f"layer {state.layer_index}: non-finite {name}")


def forward(graph: InteractionGraph, params: ParamSet, layers: int, flags: AblationFlags = AblationFlags()) -> LayerState:
    """Run ``layers`` dual-geometry layers and fuse them with layer 0."""
    if layers < 0:
        raise ConfigError(f"layer count must be >= 0, got {layers}")
    _check_rows(graph, params.euclid_user, params.euclid_item)
    _check_rows(graph, params.tangent_user, params.tangent_item)

    U, I, d = graph.user_count, graph.item_count, params.dim
    if flags.hyperbolic_only:
        e_u = torch.zeros(U, d, dtype=lorentz.DTYPE)
        e_i = torch.zeros(I, d, dtype=lorentz.DTYPE)
    else:
        e_u, e_i = params.euclid_user, params.euclid_item
    if flags.euclidean_only:
        p_u, p_i = lorentz.origin(d, U), lorentz.origin(d, I)
    else:
        p_u = lorentz.project(lorentz.exp0(params.tangent_user))
        p_i = lorentz.project(lorentz.exp0(params.tangent_item))

    states = [LayerState(e_u, e_i, p_u, p_i, 0)]
    _check_finite_layer(states[0])
    for k in range(1, layers + 1):
        prev = states[-1]
        e_u, e_i = prev.euclid_user, prev.euclid_item
        p_u, p_i = prev.hyper_user, prev.hyper_item
        if not flags.hyperbolic_only:
            e_u, e_i = propagate_euclidean(graph, e_u, e_i)
        if not flags.euclidean_only:
            p_u, p_i = _propagate_hyperbolic(graph, p_u, p_i)
        if flags.interaction_active:
            e_u, p_u = _interact(e_u, p_u, params.gamma, params.gamma_prime)
            e_i, p_i = _interact(e_i, p_i, params.gamma, params.gamma_prime)
            p_u, p_i = lorentz._project(p_u), lorentz._project(p_i)
        state = LayerState(e_u, e_i, p_u, p_i, k)
        _check_finite_layer(state)
        states.append(state)

    return fuse_layers(states)


def effective_lambda(params: ParamSet, flags: AblationFlags) -> torch.Tensor:
    """Score mixing weight; the Euclidean-only variant drops the Lorentzian term."""
    if flags.euclidean_only:
        return torch.zeros((), dtype=lorentz.DTYPE)
    return params.lam


def _as_index(index: IndexLike, bound: int, name: str) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(index) if not isinstance(index, torch.Tensor) else index, dtype=torch.int64)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= bound):
        raise DimensionError(f"{name} index out of range [0, {bound})")
    return idx


def score(final: LayerState, u: IndexLike, i: IndexLike, lam) -> torch.Tensor:
    """y_ui = <f_u, f_i> + lambda * <f_u^H, f_i^H>_L for matching index arrays (or scalars)."""
    u = _as_index(u, final.user_count, "user")
    i = _as_index(i, final.item_count, "item")
    euclid = (final.euclid_user[u] * final.euclid_item[i]).sum(dim=-1)
    return euclid + lam * lorentz.linner(final.hyper_user[u], final.hyper_item[i])


def score_all(final: LayerState, users: IndexLike, lam) -> torch.Tensor:
    """Scores of ``users`` against the whole catalog, shape (len(users), item_count)."""
    u = _as_index(users, final.user_count, "user").reshape(-1)
    hu, hi = final.hyper_user[u], final.hyper_item
    euclid = final.euclid_user[u] @ final.euclid_item.T
    lorentzian = hu[:, 1:] @ hi[:, 1:].T - torch.outer(hu[:, 0], hi[:, 0])
    return euclid + lam * lorentzian


def snapshot(graph: InteractionGraph, params: ParamSet, layers: int, flags: AblationFlags) -> Tuple[LayerState, float]:
    """Gradient-free forward pass plus the effective lambda, for evaluation."""
    with torch.no_grad():
        final = forward(graph, params, layers, flags)
        return final, float(effective_lambda(params, flags))

