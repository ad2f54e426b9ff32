"""Trainable components: MLPs, the unprojection encoder, attribute projection,
occupancy and trajectory heads, the state-conditioned forecasting module,
and the optimizers that update them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .geometry import CameraModel, EgoState, FeatureGrid, GridGeometry, SemanticGrid
from .render import AttributeFields

ACTIVATIONS = {
    "relu": ag.relu,
    "linear": lambda x: x,
    "softplus": ag.softplus,
    "sigmoid": ag.sigmoid,
    "tanh": ag.tanh,
}


def sinusoidal_encoding(coords: np.ndarray, num_freqs: int) -> np.ndarray:
    """sin/cos features at frequencies 2^k * pi, k < num_freqs, for coords in [-1, 1]."""
    coords = np.asarray(coords, dtype=float)
    if num_freqs == 0:
        return np.zeros((coords.shape[0], 0))
    freqs = np.pi * 2.0 ** np.arange(num_freqs)
    ang = coords[:, :, None] * freqs[None, None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(coords.shape[0], -1)


class Mlp:
    """Fully connected stack; ``activations`` has one entry per layer."""

    def __init__(self, widths: list[int], activations: list[str] | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 zero_last: bool = False, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        n_layers = len(widths) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers:
            raise ValueError(f"{n_layers} layers but {len(activations)} activations")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = list(widths)
        self.activations = list(activations)
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for li, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = li == n_layers - 1
            if last and zero_last:
                w = np.zeros((a, b))
            else:
                gain = np.sqrt(2.0) if activations[li] == "relu" else 1.0
                w = rng.normal(0.0, gain / np.sqrt(a), size=(a, b))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w{li}"))
            self.biases.append(Tensor(np.zeros(b, dtype=dtype), requires_grad=True, name=f"{name}.b{li}"))

    @property
    def num_parameters(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{li}"] = w
            out[f"{self.name}.b{li}"] = b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x, self.weights[0].dtype)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"{self.name}: expected (n, {self.widths[0]}) input, got {x.shape}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = ACTIVATIONS[act](ag.matmul(x, w) + b)
        return x


# -- occupancy network N (toy unprojection encoder) --------------------------------

def bilinear_matrix(camera: CameraModel, points: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse (n_points, H*W) bilinear sampling matrix of a pixel map, and a visibility mask.

    A point is visible when it projects in front of the camera inside the image.
    """
    uv, z = camera.project(points)
    w, h = camera.width, camera.height
    visible = (z > 1e-6) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    # pixel centers sit at integer + 0.5
    px = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    py = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    px = np.where(visible, px, 0)
    py = np.where(visible, py, 0)
    x0 = np.minimum(np.floor(px).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(py).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = px - x0, py - y0
    rows, cols, vals = [], [], []
    n = points.shape[0]
    ar = np.arange(n)
    for xi, yi, wt in ((x0, y0, (1 - fx) * (1 - fy)), (x1, y0, fx * (1 - fy)),
                       (x0, y1, (1 - fx) * fy), (x1, y1, fx * fy)):
        keep = visible & (wt > 0)
        rows.append(ar[keep])
        cols.append(yi[keep] * w + xi[keep])
        vals.append(wt[keep])
    m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, h * w))
    m.sum_duplicates()
    return m, visible


class SceneEncoder:
    """Lifts multi-view images into a voxel feature grid.

    Per-pixel MLP on [RGB, pixel positional encoding]; each voxel center is
    projected into every camera, the pixel features are bilinearly sampled
    and averaged over the cameras that see it, then a per-voxel MLP maps
    [average feature, voxel positional encoding] to D channels. Unseen
    voxels take the zero-feature path.
    """

    def __init__(self, geometry: GridGeometry, rig: list[CameraModel], feature_dim: int = 32,
                 pixel_dim: int = 16, hidden: int = 64, pixel_freqs: int = 4, voxel_freqs: int = 8,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if not rig:
            raise ValueError("encoder needs at least one camera")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.geometry = geometry
        self.rig = list(rig)
        self.dtype = dtype
        self.pixel_freqs = pixel_freqs
        self.voxel_freqs = voxel_freqs
        self.pixel_mlp = Mlp([3 + 4 * pixel_freqs, hidden, pixel_dim], rng=rng, dtype=dtype, name="enc.pixel")
        voxel_pe = sinusoidal_encoding(geometry.normalized_centers(), voxel_freqs)
        self.voxel_pe = voxel_pe.astype(dtype)
        self.voxel_mlp = Mlp([pixel_dim + voxel_pe.shape[1], hidden, feature_dim], rng=rng, dtype=dtype,
                             name="enc.voxel")
        self._pixel_pe = []
        blocks, counts = [], np.zeros(geometry.num_voxels)
        centers = geometry.centers()
        for cam in self.rig:
            m, vis = bilinear_matrix(cam, centers)
            blocks.append(m)
            counts += vis
            vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
            coords = np.stack([(uu.ravel() + 0.5) / cam.width, (vv.ravel() + 0.5) / cam.height], 1) * 2 - 1
            self._pixel_pe.append(sinusoidal_encoding(coords, pixel_freqs).astype(dtype))
        scale = sp.diags(np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0))
        self.lift = (scale @ sp.hstack(blocks)).tocsr().astype(dtype)
        self.visible_count = counts

    @property
    def feature_dim(self) -> int:
        return self.voxel_mlp.widths[-1]

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.pixel_mlp.named_parameters(), **self.voxel_mlp.named_parameters()}

    def __call__(self, images: list[np.ndarray]) -> FeatureGrid:
        if len(images) != len(self.rig):
            raise ValueError(f"expected {len(self.rig)} images, got {len(images)}")
        pix = []
        for cam, img, pe in zip(self.rig, images, self._pixel_pe):
            img = np.asarray(img)
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"image shape {img.shape} does not match camera {cam.height}x{cam.width}")
            rgb = img.astype(self.dtype) / 255.0 if img.dtype == np.uint8 else img.astype(self.dtype)
            pix.append(np.concatenate([rgb.reshape(-1, 3), pe], axis=1))
        pixel_feats = self.pixel_mlp(Tensor(np.concatenate(pix, axis=0)))
        lifted = ag.sparse_apply(self.lift, pixel_feats)
        x = ag.concat([lifted, Tensor(self.voxel_pe)], axis=1)
        return FeatureGrid(self.geometry, self.voxel_mlp(x))


def encode_scene(images: list[np.ndarray], encoder: SceneEncoder) -> FeatureGrid:
    return encoder(images)


# -- heads ------------------------------------------------------------------------------

class AttributeProjection:
    """Shared per-voxel trunk with density (softplus), semantic (linear) and color (sigmoid) branches."""

    def __init__(self, feature_dim: int, num_semantic: int, hidden: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32, density_bias: float = 0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.trunk = Mlp([feature_dim, hidden], ["relu"], rng=rng, dtype=dtype, name="proj.trunk")
        self.density = Mlp([hidden, 1], ["linear"], rng=rng, dtype=dtype, name="proj.density")
        self.density.biases[0].data[:] = density_bias
        self.semantic = Mlp([hidden, num_semantic], ["linear"], rng=rng, dtype=dtype, name="proj.semantic")
        self.color = Mlp([hidden, 3], ["linear"], rng=rng, dtype=dtype, name="proj.color")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in (self.trunk, self.density, self.semantic, self.color):
            out.update(m.named_parameters())
        return out

    def __call__(self, grid: FeatureGrid) -> AttributeFields:
        h = self.trunk(grid.features)
        density = ag.reshape(ag.softplus(self.density(h)), (-1,))
        return AttributeFields(grid.geometry, density, self.semantic(h), ag.sigmoid(self.color(h)))


def project_attributes(grid: FeatureGrid, head: AttributeProjection) -> AttributeFields:
    return head(grid)


class OccupancyHead:
    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.num_classes = num_classes
        self.mlp = Mlp([feature_dim, hidden, num_classes], rng=rng, dtype=dtype, name="occ")

    def named_parameters(self) -> dict[str, Tensor]:
        return self.mlp.named_parameters()

    def __call__(self, grid: FeatureGrid) -> Tensor:
        return self.mlp(grid.features)


def occupancy_head(grid: FeatureGrid, head: OccupancyHead) -> Tensor:
    return head(grid)


def predict(logits, geometry: GridGeometry, num_classes: int | None = None) -> SemanticGrid:
    """Argmax per voxel; ties resolve to the lowest category index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    num_classes = data.shape[1] if num_classes is None else num_classes
    cats = np.argmax(data, axis=1).reshape(geometry.dims)
    return SemanticGrid(geometry, cats, num_classes)


class StateEmbedding:
    """Embeds an EgoState vector; the zero state maps to a learned null vector."""

    def __init__(self, k: int, dim: int = 16, hidden: int = 32,
                 rng: np.random.Generator | None = None, dtype=np.float32, scale: float = 0.2):
        self.k = k
        self.scale = scale
        self.mlp = Mlp([3 + 2 * k, hidden, dim], rng=rng, dtype=dtype, name="state")

    @property
    def dim(self) -> int:
        return self.mlp.widths[-1]

    def named_parameters(self) -> dict[str, Tensor]:
        return self.mlp.named_parameters()

    def __call__(self, ego: EgoState | None) -> Tensor:
        vec = np.zeros(3 + 2 * self.k) if ego is None else ego.to_vector()
        if vec.shape[0] != 3 + 2 * self.k:
            raise ValueError(f"ego state with history {ego.k} does not match embedding k={self.k}")
        return self.mlp(Tensor((vec * self.scale)[None].astype(self.mlp.weights[0].dtype)))


class ForecastModule:
    """Per-voxel MLP over [feature, broadcast ego embedding, voxel encoding], optionally residual."""

    def __init__(self, geometry: GridGeometry, feature_dim: int, hidden: int = 128, layers: int = 2,
                 use_ego: bool = True, k: int = 2, residual: bool = True, voxel_freqs: int = 8,
                 ego_dim: int = 16, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.geometry = geometry
        self.residual = residual
        self.voxel_pe = sinusoidal_encoding(geometry.normalized_centers(), voxel_freqs).astype(dtype)
        # built even when ego is off so both settings share one architecture and initialization;
        # with ego off every step sees the null state
        self._use_ego = use_ego
        self.state_mlp = StateEmbedding(k, ego_dim, rng=rng, dtype=dtype)
        in_dim = feature_dim + ego_dim + self.voxel_pe.shape[1]
        self.feature_mlp = Mlp([in_dim] + [hidden] * layers + [feature_dim], rng=rng, dtype=dtype,
                               zero_last=residual, name="fcst")

    @property
    def use_ego(self) -> bool:
        return self._use_ego

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.feature_mlp.named_parameters())
        out.update({f"fcst.{k}": v for k, v in self.state_mlp.named_parameters().items()})
        return out

    def __call__(self, grid: FeatureGrid, ego: EgoState | None = None) -> FeatureGrid:
        if grid.dim != self.feature_mlp.widths[-1]:
            raise ShapeError(f"feature dim {grid.dim} does not match forecast module")
        n = grid.features.shape[0]
        emb = self.state_mlp(ego if self._use_ego else None)
        parts = [grid.features, ag.matmul(Tensor(np.ones((n, 1), dtype=emb.dtype)), emb), Tensor(self.voxel_pe)]
        delta = self.feature_mlp(ag.concat(parts, axis=1))
        out = grid.features + delta if self.residual else delta
        return FeatureGrid(grid.geometry, out)


def forecast_step(grid: FeatureGrid, ego: EgoState | None, module: ForecastModule) -> FeatureGrid:
    return module(grid, ego)


def rollout(grid: FeatureGrid, egos: list, module: ForecastModule, horizon: int) -> list[FeatureGrid]:
    """Recursively apply the forecasting module ``horizon`` times."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if egos and len(egos) != horizon:
        raise ValueError(f"need {horizon} ego states or none, got {len(egos)}")
    out = []
    cur = grid
    for step in range(horizon):
        cur = module(cur, egos[step] if egos else None)
        out.append(cur)
    return out


class TrajectoryHead:
    """Mean-pooled features and ego embedding to cumulative (x, y) waypoints."""

    def __init__(self, feature_dim: int, horizon: int, ego_dim: int = 16, hidden: int = 64,
                 k: int = 2, use_ego: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.horizon = horizon
        self.use_ego = use_ego
        self.state_mlp = StateEmbedding(k, ego_dim, rng=rng, dtype=dtype, scale=0.2)
        in_dim = feature_dim + ego_dim
        self.mlp = Mlp([in_dim, hidden, 2 * horizon], rng=rng, dtype=dtype, zero_last=True, name="traj")

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.mlp.named_parameters())
        out.update({f"traj.{k}": v for k, v in self.state_mlp.named_parameters().items()})
        return out

    def __call__(self, grid: FeatureGrid, ego: EgoState | None = None) -> Tensor:
        pooled = ag.mean(grid.features, axis=0, keepdims=True)
        emb = self.state_mlp(ego if self.use_ego else None)
        out = self.mlp(ag.concat([pooled, emb], axis=1))
        return ag.reshape(out, (self.horizon, 2))


def trajectory_head(grid: FeatureGrid, ego: EgoState | None, head: TrajectoryHead) -> Tensor:
    return head(grid, ego)


# -- optimizers --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], lr: float, state: AdamState, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, grads: dict[str, np.ndarray] | None = None) -> None:
    """In-place Adam update. Parameters without a gradient are left untouched."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def sgd_step(params: dict[str, Tensor], lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        p.data -= (lr * g).astype(p.dtype)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
