"""
Lorentz (hyperboloid) model primitives with curvature -1.

Points live in Minkowski space R^{d+1} with the time-like coordinate first.
Every function is batched over leading axes and works on the last axis, so a
single point is a (d+1,) tensor and a table of points is (N, d+1). Tangent
vectors at the origin are stored as d-dimensional coordinates; ``lift`` adds
the structural leading zero and ``drop`` removes it again.

All arithmetic is float64. Inputs that are not tensors are converted.
"""

from typing import Sequence, Union

import torch

from errors import DegenerateInputError, DimensionError, DomainError, NumericError

DTYPE = torch.float64

# Smallest norm treated as non-zero (keeps v/||v|| and asinh(r)/r finite)
MIN_NORM = 1e-15
# cosh/sinh overflow past ~710; cap well before that
MAX_ARG = 50.0
# Relative residual allowed for |<x,x>_L + 1| before an input counts as off-manifold
ON_MANIFOLD_TOL = 1e-6
TANGENT_TOL = 1e-6

TensorLike = Union[torch.Tensor, Sequence[float], float]


def as_tensor(x: TensorLike) -> torch.Tensor:
    """Return ``x`` as a float64 tensor (no copy when already float64)."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def origin(d: int, *batch: int) -> torch.Tensor:
    """The hyperboloid origin (1, 0, ..., 0), optionally repeated over ``batch``."""
    o = torch.zeros(*batch, d + 1, dtype=DTYPE)
    o[..., 0] = 1.0
    return o


def origin_like(x: torch.Tensor) -> torch.Tensor:
    o = torch.zeros_like(x)
    o[..., 0] = 1.0
    return o


def lift(v: TensorLike) -> torch.Tensor:
    """Tangent coordinates at the origin -> ambient vector (0, v)."""
    v = as_tensor(v)
    return torch.cat([torch.zeros_like(v[..., :1]), v], dim=-1)


def drop(u: torch.Tensor) -> torch.Tensor:
    """Ambient tangent vector at the origin -> d coordinates (first entry discarded)."""
    return u[..., 1:]


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(x.detach()).all()):
        raise NumericError(f"{name} contains non-finite entries")


def _check_ambient(x: torch.Tensor, name: str) -> None:
    if x.dim() == 0 or x.shape[-1] < 2:
        raise DimensionError(f"{name} needs at least 2 ambient coordinates, got shape {tuple(x.shape)}")


def check_on_manifold(x: torch.Tensor, name: str = "point") -> None:
    """Raise DomainError unless every row of ``x`` lies on the hyperboloid."""
    _check_ambient(x, name)
    _check_finite(x, name)
    with torch.no_grad():
        x = x.detach()
        x0 = x[..., 0]
        residual = (linner(x, x) + 1.0).abs()
        bound = ON_MANIFOLD_TOL * torch.clamp(x0 * x0, min=1.0)
        if bool((residual > bound).any()) or bool((x0 < 1.0 - ON_MANIFOLD_TOL).any()):
            worst = float(residual.max())
            raise DomainError(f"{name} is off the hyperboloid (|<x,x>_L + 1| up to {worst:.3e})")


def _linner(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return -x[..., 0] * y[..., 0] + (x[..., 1:] * y[..., 1:]).sum(dim=-1)


def linner(x: TensorLike, y: TensorLike) -> torch.Tensor:
    """Lorentzian scalar product -x0*y0 + sum_i x_i*y_i."""
    x, y = as_tensor(x), as_tensor(y)
    _check_ambient(x, "x")
    _check_ambient(y, "y")
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    return _linner(x, y)


def lnorm_abs(z: TensorLike) -> torch.Tensor:
    """|‖z‖_L| = sqrt(|<z,z>_L|)."""
    z = as_tensor(z)
    return linner(z, z).abs().sqrt()


def _safe_lnorm(z: torch.Tensor) -> torch.Tensor:
    # Space-like norm with the zero vector mapped to MIN_NORM (finite gradients)
    return torch.clamp(_linner(z, z), min=MIN_NORM * MIN_NORM).sqrt()


def arcosh_clamped(z: torch.Tensor) -> torch.Tensor:
    """arcosh with the argument clamped to [1, inf); zero derivative inside the clamp."""
    above = z > 1.0
    # the dummy 2.0 keeps the unused branch's derivative finite
    safe = torch.where(above, z, torch.full_like(z, 2.0))
    return torch.where(above, torch.acosh(safe), torch.zeros_like(z))


def _coincident(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return (x == y).all(dim=-1)


# Unchecked kernels. Callers guarantee float64 tensors of matching width that
# lie on the hyperboloid; the public wrappers below validate first.


def _dist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    d = arcosh_clamped(-_linner(x, y))
    return torch.where(_coincident(x, y), torch.zeros_like(d), d)


def _exp0(v: torch.Tensor) -> torch.Tensor:
    r = torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(MIN_NORM)
    theta = r.clamp_max(MAX_ARG)
    return torch.cat([torch.cosh(theta), torch.sinh(theta) * v / r], dim=-1)


def _log0(x: torch.Tensor) -> torch.Tensor:
    xs = x[..., 1:]
    r = torch.linalg.vector_norm(xs, dim=-1, keepdim=True).clamp_min(MIN_NORM)
    return torch.asinh(r) / r * xs


def _exp_at(x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    n = _safe_lnorm(v).unsqueeze(-1)
    theta = n.clamp_max(MAX_ARG)
    return torch.cosh(theta) * x + torch.sinh(theta) * v / n


def _transport_from_origin(x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    vt = lift(v)
    coef = _linner(x, vt) / (1.0 + x[..., 0])
    return vt + (origin_like(x) + x) * coef.unsqueeze(-1)


def _madd(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return _exp_at(x, _transport_from_origin(x, _log0(y)))


def _smul(r: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if r.dim() > 0:
        r = r.unsqueeze(-1)
    return _exp0(r * _log0(x))


def _project(x: torch.Tensor) -> torch.Tensor:
    xs = x[..., 1:]
    x0 = torch.sqrt(1.0 + (xs * xs).sum(dim=-1, keepdim=True))
    return torch.cat([x0, xs], dim=-1)


def dist(x: TensorLike, y: TensorLike) -> torch.Tensor:
    """Geodesic distance arcosh(-<x,y>_L); exactly 0 for identical points."""
    x, y = as_tensor(x), as_tensor(y)
    check_on_manifold(x, "x")
    check_on_manifold(y, "y")
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    return _dist(x, y)


def exp0(v: TensorLike) -> torch.Tensor:
    """Exponential map at the origin for tangent coordinates ``v`` (shape (..., d))."""
    v = as_tensor(v)
    _check_finite(v, "tangent vector")
    return _exp0(v)


def log0(x: TensorLike) -> torch.Tensor:
    """Logarithmic map at the origin; returns d tangent coordinates.

    On the manifold arcosh(x0) = asinh(‖x_s‖) and x - x0*origin = (0, x_s), so
    the map reduces to asinh(‖x_s‖) * x_s / ‖x_s‖, which is smooth at the origin.
    """
    x = as_tensor(x)
    check_on_manifold(x, "x")
    return _log0(x)


def check_tangent(x: torch.Tensor, v: torch.Tensor, name: str = "v") -> None:
    with torch.no_grad():
        x, v = x.detach(), v.detach()
        scale = torch.clamp(x[..., 0].abs() * v.abs().amax(dim=-1), min=1.0)
        if bool((_linner(x, v).abs() > TANGENT_TOL * scale).any()):
            raise DomainError(f"{name} is not tangent at the base point")


def exp_at(x: TensorLike, v: TensorLike) -> torch.Tensor:
    """Exponential map at an arbitrary base point ``x`` for an ambient tangent vector ``v``."""
    x, v = as_tensor(x), as_tensor(v)
    check_on_manifold(x, "x")
    _check_finite(v, "v")
    if v.shape[-1] != x.shape[-1]:
        raise DimensionError(f"length mismatch: {x.shape[-1]} vs {v.shape[-1]}")
    check_tangent(x, v)
    return _exp_at(x, v)


def log_at(x: TensorLike, y: TensorLike) -> torch.Tensor:
    """Logarithmic map at ``x``: the ambient tangent vector at ``x`` pointing to ``y``."""
    x, y = as_tensor(x), as_tensor(y)
    check_on_manifold(x, "x")
    check_on_manifold(y, "y")
    xy = linner(x, y)
    d = arcosh_clamped(-xy).unsqueeze(-1)
    u = y + xy.unsqueeze(-1) * x
    v = d * u / _safe_lnorm(u).unsqueeze(-1)
    return torch.where(_coincident(x, y).unsqueeze(-1), torch.zeros_like(v), v)


def transport_from_origin(x: TensorLike, v: TensorLike) -> torch.Tensor:
    """Parallel transport of origin-tangent coordinates ``v`` to the tangent space at ``x``.

    P(v) = v + (origin + x) * <x, v>_L / (1 + x0)
    """
    x, v = as_tensor(x), as_tensor(v)
    check_on_manifold(x, "x")
    _check_finite(v, "v")
    if v.shape[-1] + 1 != x.shape[-1]:
        raise DimensionError(f"tangent coordinates of length {v.shape[-1]} do not fit points of length {x.shape[-1]}")
    return _transport_from_origin(x, v)


def madd(x: TensorLike, y: TensorLike) -> torch.Tensor:
    """Hyperbolic addition x ⊕ y = exp_x(P_{0->x}(log_0(y)))."""
    x = as_tensor(x)
    return exp_at(x, transport_from_origin(x, log0(y)))


def smul(r: TensorLike, x: TensorLike) -> torch.Tensor:
    """Hyperbolic scalar multiplication r ⊗ x = exp_0(r * log_0(x)).

    ``r`` is a scalar or a tensor matching the batch shape of ``x``.
    """
    r, x = as_tensor(r), as_tensor(x)
    _check_finite(r, "scalar")
    check_on_manifold(x, "x")
    return _smul(r, x)


def normalize_timelike(z: torch.Tensor) -> torch.Tensor:
    """z / |‖z‖_L| for time-like accumulators ``z``."""
    return z / _linner(z, z).abs().sqrt().unsqueeze(-1)


def centroid(weights: TensorLike, points: TensorLike) -> torch.Tensor:
    """Lorentzian centroid of ``points`` (..., n, d+1) under ``weights`` (..., n)."""
    w, p = as_tensor(weights), as_tensor(points)
    if p.dim() < 2 or p.shape[-2] == 0:
        raise DimensionError("centroid needs at least one point")
    if w.shape[-1] != p.shape[-2]:
        raise DimensionError(f"{w.shape[-1]} weights for {p.shape[-2]} points")
    check_on_manifold(p, "points")
    _check_finite(w, "weights")
    if bool((w.detach() < 0).any()):
        raise DomainError("centroid weights must be non-negative")
    if bool((w.detach().sum(dim=-1) <= 0).any()):
        raise DegenerateInputError("centroid needs at least one strictly positive weight")
    z = (w.unsqueeze(-1) * p).sum(dim=-2)
    return normalize_timelike(z)


def project(x: TensorLike) -> torch.Tensor:
    """Re-project onto the hyperboloid by recomputing x0 from the spatial part."""
    x = as_tensor(x)
    _check_ambient(x, "x")
    _check_finite(x[..., 1:], "spatial part")
    return _project(x)
