"""Differentiable volume rendering of voxel attribute fields.

Fields live at voxel centers and are read back by trilinear interpolation
(edge-clamped inside the grid volume, zero outside it). Along each ray the
compositor turns densities into transmittance and weights,

    T_m = exp(-sum_{p<m} sigma_p delta_p)
    w_m = T_m (1 - exp(-sigma_m delta_m))

and accumulates depth, semantic logits, color and opacity as w-weighted
sums. The compositor is a single autograd op with a hand-derived backward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import GridGeometry, SemanticGrid
from .raygen import RayBundle, RaySamples, stratified_depths

MAX_OPTICAL_DEPTH = 80.0
OPACITY_GUARD = 0.05


@dataclass(eq=False)
class AttributeFields:
    geometry: GridGeometry
    density: Tensor      # (N,)
    semantics: Tensor    # (N, Ds) logits
    color: Tensor        # (N, 3)

    def __post_init__(self):
        n = self.geometry.num_voxels
        for name in ("density", "semantics", "color"):
            v = getattr(self, name)
            if not isinstance(v, Tensor):
                setattr(self, name, Tensor(np.asarray(v, dtype=float)))
        if self.density.shape != (n,):
            raise ValueError(f"density must have shape ({n},), got {self.density.shape}")
        if self.semantics.ndim != 2 or self.semantics.shape[0] != n:
            raise ValueError(f"semantics must have shape ({n}, Ds), got {self.semantics.shape}")
        if self.color.shape != (n, 3):
            raise ValueError(f"color must have shape ({n}, 3), got {self.color.shape}")

    @property
    def num_semantic(self) -> int:
        return self.semantics.shape[1]

    def stacked(self) -> Tensor:
        """(N, 1 + Ds + 3) channel stack: density, semantic logits, color."""
        return ag.concat([ag.reshape(self.density, (-1, 1)), self.semantics, self.color], axis=1)


@dataclass
class RenderedPixel:
    depth: float
    semantics: np.ndarray
    color: np.ndarray
    opacity: float


@dataclass
class RenderOutput:
    """Per-ray rendered tensors for a batch of R rays."""

    depth: Tensor      # (R,)
    opacity: Tensor    # (R,)
    semantics: Tensor  # (R, Ds)
    color: Tensor      # (R, 3)
    weights: np.ndarray  # (R, M), detached

    def pixels(self) -> list[RenderedPixel]:
        return [RenderedPixel(float(self.depth.data[i]), self.semantics.data[i].copy(),
                              self.color.data[i].copy(), float(self.opacity.data[i]))
                for i in range(self.depth.shape[0])]


def interpolation_weights(geometry: GridGeometry, points: np.ndarray,
                          mode: str = "trilinear") -> tuple[np.ndarray, np.ndarray]:
    """Voxel indices (S, K) and weights (S, K) for reading fields at ``points``.

    ``trilinear`` uses the 8 surrounding voxel centers; ``nearest`` the voxel
    containing the point. Points outside the grid volume get all-zero weights.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    dims = np.asarray(geometry.dims)
    g = (points - np.asarray(geometry.origin)) / geometry.resolution
    inside = np.all((g >= 0) & (g < dims), axis=1)
    if mode == "nearest":
        ijk = np.clip(np.floor(g).astype(np.int64), 0, dims - 1)
        return geometry.flat_index(ijk)[:, None], inside.astype(float)[:, None]
    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    q = np.clip(g - 0.5, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(q).astype(np.int64), dims - 1)
    frac = q - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    idx = np.empty((points.shape[0], 8), dtype=np.int64)
    wts = np.empty((points.shape[0], 8))
    c = 0
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                ijk = np.stack([i1[:, 0] if bx else i0[:, 0], i1[:, 1] if by else i0[:, 1],
                                i1[:, 2] if bz else i0[:, 2]], axis=1)
                idx[:, c] = geometry.flat_index(ijk)
                wts[:, c] = ((frac[:, 0] if bx else 1 - frac[:, 0]) * (frac[:, 1] if by else 1 - frac[:, 1])
                             * (frac[:, 2] if bz else 1 - frac[:, 2]))
                c += 1
    wts *= inside[:, None]
    return idx, wts


def field_at(fields: AttributeFields, p, mode: str = "trilinear") -> tuple[float, np.ndarray, np.ndarray]:
    """Interpolated (density, semantic logits, color) at one point."""
    idx, w = interpolation_weights(fields.geometry, np.asarray(p, dtype=float)[None], mode)
    stack = fields.stacked().data
    v = (w[0, :, None] * stack[idx[0]]).sum(axis=0)
    return float(v[0]), v[1:-3], v[-3:]


def composite(samples: Tensor, depths: np.ndarray, deltas: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Alpha-composite sampled channels along rays.

    ``samples`` is (R, M, 1 + C) with density in channel 0. Returns an
    (R, 2 + C) tensor (expected depth, opacity, then the weighted sums of the
    C value channels) and the detached (R, M) weights.
    """
    data = samples.data
    dtype = data.dtype
    sigma = data[..., 0]
    vals = data[..., 1:]
    depths = np.asarray(depths, dtype=dtype)
    deltas = np.asarray(deltas, dtype=dtype)
    raw = sigma * deltas
    unclipped = raw <= MAX_OPTICAL_DEPTH
    a = np.minimum(raw, MAX_OPTICAL_DEPTH)
    csum = np.cumsum(a, axis=1)
    trans = np.exp(-(csum - a))          # T_m, exclusive prefix
    survive = np.exp(-a)
    w = trans * (1 - survive)
    out = np.empty(data.shape[:1] + (data.shape[2] + 1,), dtype=dtype)
    out[:, 0] = (w * depths).sum(axis=1)
    out[:, 1] = w.sum(axis=1)
    out[:, 2:] = np.einsum("rm,rmc->rc", w, vals)

    def backward(g):
        gd, go, gv = g[:, 0], g[:, 1], g[:, 2:]
        q = gd[:, None] * depths + go[:, None] + np.einsum("rmc,rc->rm", vals, gv)
        wq = w * q
        after = wq.sum(axis=1, keepdims=True) - np.cumsum(wq, axis=1)
        d_a = trans * survive * q - after
        grad = np.empty_like(data)
        grad[..., 0] = d_a * deltas * unclipped
        grad[..., 1:] = w[..., None] * gv[:, None, :]
        return (grad,)

    return ag._result(out, (samples,), backward), w


def render_rays(fields: AttributeFields, origins: np.ndarray, dirs: np.ndarray,
                depths: np.ndarray, deltas: np.ndarray, mode: str = "trilinear") -> RenderOutput:
    r, m = depths.shape
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    idx, wts = interpolation_weights(fields.geometry, points.reshape(-1, 3), mode)
    stack = fields.stacked()
    sampled = ag.trilinear_sample(stack, idx, wts)
    sampled = ag.reshape(sampled, (r, m, stack.shape[1]))
    out, w = composite(sampled, depths, deltas)
    ds = fields.num_semantic
    return RenderOutput(out[:, 0], out[:, 1], out[:, 2:2 + ds], out[:, 2 + ds:], w)


def render_bundle_tensors(fields: AttributeFields, bundle: RayBundle, m: int, jitter: bool = False,
                          rng: np.random.Generator | None = None, mode: str = "trilinear") -> RenderOutput:
    depths, deltas = stratified_depths(bundle.t_near, bundle.t_far, m, jitter, rng)
    return render_rays(fields, bundle.origins, bundle.dirs, depths, deltas, mode)


def render_ray(fields: AttributeFields, samples: RaySamples, mode: str = "trilinear") -> RenderedPixel:
    with ag.no_grad():
        out = render_rays(fields, samples.ray.origin[None], samples.ray.direction[None],
                          samples.depths[None], samples.deltas[None], mode)
    return out.pixels()[0]


def render_bundle(fields: AttributeFields, bundle: RayBundle, m: int, mode: str = "trilinear",
                  jitter: bool = False, seed: int = 0) -> list[RenderedPixel]:
    if len(bundle) == 0:
        return []
    with ag.no_grad():
        out = render_bundle_tensors(fields, bundle, m, jitter, np.random.default_rng(seed), mode)
    return out.pixels()


def render_backward(fields: AttributeFields, samples: RaySamples, upstream: RenderedPixel,
                    mode: str = "trilinear") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of <upstream, render_ray(fields, samples)> w.r.t. density, semantics, color."""
    leaf = AttributeFields(fields.geometry,
                           Tensor(fields.density.data, requires_grad=True),
                           Tensor(fields.semantics.data, requires_grad=True),
                           Tensor(fields.color.data, requires_grad=True))
    out = render_rays(leaf, samples.ray.origin[None], samples.ray.direction[None],
                      samples.depths[None], samples.deltas[None], mode)
    dtype = leaf.density.dtype
    total = (ag.tsum(out.depth * float(upstream.depth))
             + ag.tsum(out.opacity * float(upstream.opacity))
             + ag.tsum(out.semantics * np.asarray(upstream.semantics, dtype=dtype)[None])
             + ag.tsum(out.color * np.asarray(upstream.color, dtype=dtype)[None]))
    total.backward()
    grads = []
    for t in (leaf.density, leaf.semantics, leaf.color):
        grads.append(np.zeros_like(t.data) if t.grad is None else t.grad)
    return grads[0], grads[1], grads[2]


def fields_from_grid(grid: SemanticGrid, density: float = 1e3, logit: float = 10.0,
                     albedo: np.ndarray | None = None) -> AttributeFields:
    """Renderable fields for a labelled grid: constant density on occupied voxels,
    one-hot semantic logits, per-category albedo colors."""
    occ = grid.occupied().ravel()
    cats = grid.categories.ravel().astype(np.int64)
    n = occ.size
    sem = np.zeros((n, grid.num_classes))
    sem[np.arange(n), cats] = logit
    color = np.zeros((n, 3)) if albedo is None else np.asarray(albedo, dtype=float)[cats]
    return AttributeFields(grid.geometry, Tensor(occ * float(density)), Tensor(sem), Tensor(color * occ[:, None]))
