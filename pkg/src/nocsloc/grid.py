"""Multi-resolution latent grids, low-rank deformation and the MLP decoder.

A grid is stored as one ``(V, F)`` array holding the vertices of every level
back to back (coarse first). Level ``R`` has ``R**3`` vertices on the corners
of ``R - 1`` cells per axis, including both boundaries. Query points live in
``[0, 1]^3``; NOCS points are shifted by ``+0.5`` before querying.

All gradients here are written by hand. ``forward``/``backward`` pairs
implement vector-Jacobian products so the renderer and losses can chain them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

DEFAULT_RESOLUTIONS = (2, 4, 8, 16, 32)
DEFAULT_FEATURE_DIM = 4
DEFAULT_HIDDEN = (64, 64, 64)

# clamp slack for query points that leave the unit cube through rounding
QUERY_TOLERANCE = 1e-9

_CORNERS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])


@dataclass(frozen=True)
class GridLayout:
    resolutions: Tuple[int, ...] = DEFAULT_RESOLUTIONS
    feature_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        if not self.resolutions or min(self.resolutions) < 2:
            raise ValueError("every level needs at least 2 vertices per axis")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")

    @property
    def offsets(self) -> np.ndarray:
        sizes = np.array([r ** 3 for r in self.resolutions])
        return np.concatenate([[0], np.cumsum(sizes)[:-1]])

    @property
    def num_vertices(self) -> int:
        return int(sum(r ** 3 for r in self.resolutions))

    @property
    def num_levels(self) -> int:
        return len(self.resolutions)

    @property
    def output_dim(self) -> int:
        return self.num_levels * self.feature_dim

    def to_dict(self) -> dict:
        return {"resolutions": list(self.resolutions), "feature_dim": self.feature_dim}


@dataclass
class LatentGrid:
    layout: GridLayout
    data: np.ndarray  # (V, F)

    def __post_init__(self):
        expected = (self.layout.num_vertices, self.layout.feature_dim)
        if self.data.shape != expected:
            raise ValueError(f"grid data has shape {self.data.shape}, layout needs {expected}")

    def level(self, i: int) -> np.ndarray:
        """View of level ``i`` as an ``(R, R, R, F)`` array."""
        r = self.layout.resolutions[i]
        start = self.layout.offsets[i]
        return self.data[start:start + r ** 3].reshape(r, r, r, self.layout.feature_dim)


@dataclass
class InterpPlan:
    """Trilinear corner indices and weights for a batch of query points."""

    index: np.ndarray  # (N, L, 8) global vertex rows
    weight: np.ndarray  # (N, L, 8)
    num_vertices: int
    _matrix: Optional[sparse.csr_matrix] = field(default=None, repr=False)

    @property
    def num_points(self) -> int:
        return self.index.shape[0]

    @property
    def matrix(self) -> sparse.csr_matrix:
        """Sparse ``(N * L, V)`` interpolation operator, 8 entries per row."""
        if self._matrix is None:
            rows = self.index.shape[0] * self.index.shape[1]
            self._matrix = sparse.csr_matrix(
                (self.weight.ravel(), self.index.ravel(), np.arange(0, 8 * rows + 1, 8)),
                shape=(rows, self.num_vertices),
            )
        return self._matrix


def interpolation_plan(layout: GridLayout, u) -> InterpPlan:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[-1] != 3:
        raise ValueError("query points must be 3-vectors")
    if u.size and (u.min() < -QUERY_TOLERANCE or u.max() > 1.0 + QUERY_TOLERANCE):
        raise ValueError(f"query outside the unit cube: range [{u.min()}, {u.max()}]")
    u = np.clip(u, 0.0, 1.0)
    n = u.shape[0]
    index = np.empty((n, layout.num_levels, 8), dtype=np.int64)
    weight = np.empty((n, layout.num_levels, 8))
    for li, (r, off) in enumerate(zip(layout.resolutions, layout.offsets)):
        pos = u * (r - 1)
        base = np.clip(np.floor(pos).astype(np.int64), 0, r - 2)
        frac = pos - base
        for ci, (dx, dy, dz) in enumerate(_CORNERS):
            index[:, li, ci] = off + ((base[:, 0] + dx) * r + (base[:, 1] + dy)) * r + (base[:, 2] + dz)
            wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
            weight[:, li, ci] = wx * wy * wz
    return InterpPlan(index, weight, layout.num_vertices)


def interpolate(data: np.ndarray, plan: InterpPlan) -> np.ndarray:
    """Concatenated per-level features, shape (N, L * F)."""
    return (plan.matrix @ data).reshape(plan.num_points, -1)


def interpolate_backward(d_feat: np.ndarray, plan: InterpPlan, feature_dim: int) -> np.ndarray:
    """Scatter feature cotangents back onto grid vertices, shape (V, F)."""
    return np.asarray(plan.matrix.T @ d_feat.reshape(-1, feature_dim))


def query(grid: LatentGrid, u) -> np.ndarray:
    """Trilinear query of every level, concatenated coarse to fine.

    A single point returns a vector of length ``levels * feature_dim``; a
    batch ``(N, 3)`` returns ``(N, levels * feature_dim)``.
    """
    single = np.ndim(u) == 1
    out = interpolate(grid.data, interpolation_plan(grid.layout, u))
    return out[0] if single else out


# --------------------------------------------------------------------------
# decoder


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpDecoder:
    """Fully connected ReLU network; the last layer yields 1 density + 3 color logits."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases differ in length")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("decoder layer shapes do not chain")
        if self.weights[-1].shape[1] != 4:
            raise ValueError("decoder must output 4 channels")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out: np.ndarray):
        """Returns ``(d_input, d_weights, d_biases)``."""
        d_w = [None] * len(self.weights)
        d_b = [None] * len(self.biases)
        g = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            d_w[i] = acts[i].T @ g
            d_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return g, d_w, d_b

    def copy(self) -> "MlpDecoder":
        return MlpDecoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def decode(decoder: MlpDecoder, features) -> Tuple[np.ndarray, np.ndarray]:
    """Density (softplus) and color (sigmoid) from grid features."""
    single = np.ndim(features) == 1
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != decoder.input_dim:
        raise ValueError(f"expected {decoder.input_dim} features, got {x.shape[1]}")
    raw, _ = decoder.forward(x)
    sigma, color = softplus(raw[:, 0]), sigmoid(raw[:, 1:4])
    return (sigma[0], color[0]) if single else (sigma, color)


# --------------------------------------------------------------------------
# deformable model


@dataclass
class DeformableShapeModel:
    """Canonical grid plus ``B`` deformation bases sharing one decoder."""

    layout: GridLayout
    canonical: np.ndarray  # (V, F)
    bases: np.ndarray  # (B, V, F)
    decoder: MlpDecoder

    def __post_init__(self):
        shape = (self.layout.num_vertices, self.layout.feature_dim)
        if self.canonical.shape != shape:
            raise ValueError(f"canonical grid shape {self.canonical.shape} != {shape}")
        if self.bases.ndim != 3 or self.bases.shape[1:] != shape:
            raise ValueError(f"bases must have shape (B, {shape[0]}, {shape[1]})")
        if self.decoder.input_dim != self.layout.output_dim:
            raise ValueError("decoder input size does not match grid output")

    @property
    def num_bases(self) -> int:
        return self.bases.shape[0]

    def copy(self) -> "DeformableShapeModel":
        return DeformableShapeModel(self.layout, self.canonical.copy(), self.bases.copy(), self.decoder.copy())


def compose_instance(model: DeformableShapeModel, z) -> LatentGrid:
    """Instance grid ``canonical + sum_i z_i basis_i / B``."""
    return LatentGrid(model.layout, _compose(model, z))


def _compose(model: DeformableShapeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != model.num_bases:
        raise ValueError(f"expected {model.num_bases} coefficients, got {z.shape[0]}")
    if model.num_bases == 0:
        return model.canonical.copy()
    return model.canonical + np.tensordot(z, model.bases, axes=1) / model.num_bases


def init_model(
    layout: GridLayout = GridLayout(),
    num_bases: int = 0,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    seed: int = 0,
    feature_scale: float = 1e-2,
    density_bias: float = -2.0,
) -> DeformableShapeModel:
    """Random initialization.

    Grid features are uniform in ``(-feature_scale, feature_scale)``; decoder
    weights are Gaussian with variance ``2 / fan_in`` (``1 / fan_in`` on the
    output layer) and zero biases except the density logit, which starts at
    ``density_bias`` so a fresh model renders mostly empty space.
    """
    rng = np.random.default_rng(seed)
    shape = (layout.num_vertices, layout.feature_dim)
    canonical = rng.uniform(-feature_scale, feature_scale, size=shape)
    bases = rng.uniform(-feature_scale, feature_scale, size=(num_bases,) + shape)
    dims = [layout.output_dim] + list(hidden) + [4]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = 1.0 if i == len(dims) - 2 else 2.0
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    biases[-1][0] = density_bias
    return DeformableShapeModel(layout, canonical, bases, MlpDecoder(weights, biases))


@dataclass
class ModelGrad:
    """Gradient with the same structure as a model plus its coefficients."""

    canonical: np.ndarray
    bases: np.ndarray
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    z: np.ndarray

    @classmethod
    def zeros_like(cls, model: DeformableShapeModel) -> "ModelGrad":
        return cls(
            np.zeros_like(model.canonical),
            np.zeros_like(model.bases),
            [np.zeros_like(w) for w in model.decoder.weights],
            [np.zeros_like(b) for b in model.decoder.biases],
            np.zeros(model.num_bases),
        )

    def __iadd__(self, other: "ModelGrad") -> "ModelGrad":
        self.canonical += other.canonical
        self.bases += other.bases
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        self.z += other.z
        return self

    def scale(self, factor: float) -> "ModelGrad":
        self.canonical *= factor
        self.bases *= factor
        for a in self.weights + self.biases:
            a *= factor
        self.z *= factor
        return self

    def grid_norm(self) -> float:
        return float(np.sqrt(np.sum(self.canonical ** 2) + np.sum(self.bases ** 2)))


@dataclass
class FieldCache:
    model: DeformableShapeModel
    z: np.ndarray
    plan: InterpPlan
    acts: list = field(repr=False)
    raw: np.ndarray = field(repr=False)


def evaluate(model: DeformableShapeModel, z, plan: InterpPlan):
    """Decoded density and color at the points of ``plan``.

    Returns ``(sigma (N,), color (N, 3), cache)``; pass the cache to
    :func:`evaluate_backward`.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    feats = interpolate(_compose(model, z), plan)
    raw, acts = model.decoder.forward(feats)
    sigma = softplus(raw[:, 0])
    color = sigmoid(raw[:, 1:4])
    return sigma, color, FieldCache(model, z, plan, acts, raw)


def evaluate_backward(cache: FieldCache, d_sigma: Optional[np.ndarray], d_color: Optional[np.ndarray]) -> ModelGrad:
    model = cache.model
    n = cache.raw.shape[0]
    d_raw = np.zeros((n, 4))
    if d_sigma is not None:
        d_raw[:, 0] = d_sigma * sigmoid(cache.raw[:, 0])
    if d_color is not None:
        s = sigmoid(cache.raw[:, 1:4])
        d_raw[:, 1:4] = d_color * s * (1.0 - s)
    d_feat, d_w, d_b = model.decoder.backward(cache.acts, d_raw)
    d_grid = interpolate_backward(d_feat, cache.plan, model.layout.feature_dim)
    b = model.num_bases
    if b:
        d_bases = cache.z[:, None, None] * d_grid[None] / b
        d_z = np.tensordot(model.bases, d_grid, axes=([1, 2], [0, 1])) / b
    else:
        d_bases = np.zeros_like(model.bases)
        d_z = np.zeros(0)
    return ModelGrad(d_grid, d_bases, d_w, d_b, d_z)


def query_decode_grad(model: DeformableShapeModel, z, u):
    """Value and full parameter gradients of ``(sigma, c_r, c_g, c_b)`` at one point.

    Returns ``(sigma, color, grads)`` with ``grads`` a list of four
    :class:`ModelGrad`, one per output channel.
    """
    plan = interpolation_plan(model.layout, np.asarray(u, dtype=float)[None])
    sigma, color, cache = evaluate(model, z, plan)
    grads = [evaluate_backward(cache, np.ones(1), None)]
    for k in range(3):
        d_color = np.zeros((1, 3))
        d_color[0, k] = 1.0
        grads.append(evaluate_backward(cache, None, d_color))
    return float(sigma[0]), color[0], grads
