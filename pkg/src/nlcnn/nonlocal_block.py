"""Embedded-Gaussian non-local blocks over spectrogram feature maps.

Feature maps are ``N x C x H x W`` with H the frequency axis and W the time
axis. A block computes ``z = W_z y + x`` where ``y`` at position ``(i, j)`` is a
softmax-weighted sum of ``g(x)`` over the positions selected by the variant:

* ``TIME_FREQUENCY`` - every position ``(h, k)``
* ``TIME`` - every ``(i, k)``, same frequency row
* ``FREQUENCY`` - every ``(h, j)``, same time column
* ``FRAME`` - every frame ``k``; the weight between frames ``j`` and ``k`` comes
  from whole-frame vectors (all channels and frequencies) and is shared by
  every frequency row ``i``.

The weights are ``exp(theta(x_a) . phi(x_b))`` normalised over the aggregation
positions, i.e. a softmax.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor


class Variant(str, enum.Enum):
    TIME_FREQUENCY = "time_frequency"
    TIME = "time"
    FREQUENCY = "frequency"
    FRAME = "frame"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace("+", "_")
        aliases = {"tf": cls.TIME_FREQUENCY, "timefrequency": cls.TIME_FREQUENCY,
                   "frequency_time": cls.TIME_FREQUENCY, "freq": cls.FREQUENCY}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown non-local variant {name!r}; "
                             f"choose from {[v.value for v in cls]}") from None


@dataclass
class NonLocalBlockParams:
    """1x1 transforms of one block; θ, φ, g map C_in -> C_int and W_z maps back."""

    theta_w: Tensor  # C_in x C_int
    phi_w: Tensor
    g_w: Tensor
    z_w: Tensor  # C_int x C_in
    variant: Variant

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        c_in, c_int = self.theta_w.shape
        for name in ("phi_w", "g_w"):
            if getattr(self, name).shape != (c_in, c_int):
                raise DimensionError(f"{name} must be {c_in}x{c_int}, got {getattr(self, name).shape}")
        if self.z_w.shape != (c_int, c_in):
            raise DimensionError(f"z_w must be {c_int}x{c_in}, got {self.z_w.shape}")

    @property
    def c_in(self) -> int:
        return self.theta_w.shape[0]

    @property
    def c_int(self) -> int:
        return self.theta_w.shape[1]

    @classmethod
    def initialize(cls, c_in: int, variant, rng: np.random.Generator,
                   c_int: Optional[int] = None, dtype=np.float64) -> "NonLocalBlockParams":
        """Fan-in normal init for θ, φ, g; zero W_z so the block starts as the identity."""
        c_int = c_in if c_int is None else c_int
        std = np.sqrt(2.0 / c_in)

        def draw():
            return Tensor(rng.normal(0.0, std, size=(c_in, c_int)).astype(dtype), requires_grad=True)

        return cls(draw(), draw(), draw(),
                   Tensor(np.zeros((c_int, c_in), dtype=dtype), requires_grad=True), variant)

    def parameters(self) -> Dict[str, Tensor]:
        return {"theta_w": self.theta_w, "phi_w": self.phi_w, "g_w": self.g_w, "z_w": self.z_w}


# ---------------------------------------------------------------------------
# grouping: channels-last maps <-> (groups, positions, features)


def _group(t: Tensor, variant: Variant) -> Tensor:
    N, H, W, C = t.shape
    if variant is Variant.TIME_FREQUENCY:
        return F.reshape(t, (N, H * W, C))
    if variant is Variant.TIME:
        return F.reshape(t, (N * H, W, C))
    swapped = F.permute(t, (0, 2, 1, 3))  # N x W x H x C
    if variant is Variant.FREQUENCY:
        return F.reshape(swapped, (N * W, H, C))
    return F.reshape(swapped, (N, W, H * C))


def _ungroup(t: Tensor, variant: Variant, shape) -> Tensor:
    N, H, W, C = shape
    if variant in (Variant.TIME_FREQUENCY, Variant.TIME):
        return F.reshape(t, (N, H, W, C))
    return F.permute(F.reshape(t, (N, W, H, C)), (0, 2, 1, 3))


def _public_weights(attn: Tensor, variant: Variant, N: int, H: int, W: int) -> Tensor:
    if variant is Variant.TIME:
        return F.reshape(attn, (N, H, W, W))
    if variant is Variant.FREQUENCY:
        return F.reshape(attn, (N, W, H, H))
    return attn


def _grouped_affinity(theta_g: Tensor, phi_g: Tensor) -> Tensor:
    return F.softmax(F.matmul(theta_g, F.transpose(phi_g)), axis=-1)


def affinity(theta_x: Tensor, phi_x: Tensor, variant) -> Tensor:
    """Normalised pairwise weights from embedded maps of shape N x C_int x H x W.

    Returned shapes: TIME_FREQUENCY ``N x HW x HW`` (positions flattened
    row-major over (h, k)); TIME ``N x H x W x W``; FREQUENCY ``N x W x H x H``;
    FRAME ``N x W x W``. The last axis indexes the aggregated positions.
    """
    variant = Variant.parse(variant)
    if theta_x.ndim != 4 or theta_x.shape != phi_x.shape:
        raise DimensionError(f"affinity: embeddings {theta_x.shape} and {phi_x.shape} must be equal 4-d shapes")
    N, _, H, W = theta_x.shape
    t = _group(F.permute(theta_x, (0, 2, 3, 1)), variant)
    p = _group(F.permute(phi_x, (0, 2, 3, 1)), variant)
    return _public_weights(_grouped_affinity(t, p), variant, N, H, W)


def _check_input(params: NonLocalBlockParams, x, channels_last: bool = False) -> None:
    if x.ndim != 4:
        raise DimensionError(f"non-local block expects a 4-d feature map, got {x.shape}")
    c = x.shape[3] if channels_last else x.shape[1]
    if c != params.c_in:
        raise DimensionError(f"non-local block built for {params.c_in} channels, input has {c}")


def _forward(params: NonLocalBlockParams, x: Tensor, channels_last: bool = False):
    _check_input(params, x, channels_last)
    xl = x if channels_last else F.permute(x, (0, 2, 3, 1))
    theta = _group(F.linear(xl, params.theta_w), params.variant)
    phi = _group(F.linear(xl, params.phi_w), params.variant)
    g = _group(F.linear(xl, params.g_w), params.variant)
    attn = _grouped_affinity(theta, phi)
    N, H, W, _ = xl.shape
    y = _ungroup(F.matmul(attn, g), params.variant, (N, H, W, params.c_int))
    wy = F.linear(y, params.z_w)
    if not channels_last:
        wy = F.permute(wy, (0, 3, 1, 2))
    return F.add(x, wy), attn


def nonlocal_forward(params: NonLocalBlockParams, x: Tensor, channels_last: bool = False) -> Tensor:
    """``z = W_z y + x``; output shape equals input shape.

    ``x`` is N x C x H x W, or N x H x W x C when ``channels_last``.
    """
    return _forward(params, x, channels_last)[0]


def attention_matrix(params: NonLocalBlockParams, x: Tensor) -> np.ndarray:
    """The normalised weights the block applies to ``x`` (shapes as in :func:`affinity`)."""
    _check_input(params, x)
    N, _, H, W = x.shape
    attn = _forward(params, x)[1]
    return _public_weights(attn, params.variant, N, H, W).data


def nonlocal_oracle(params: NonLocalBlockParams, x) -> np.ndarray:
    """Literal nested-loop evaluation of the block; small inputs only."""
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_input(params, xd)
    tw, pw, gw, zw = (np.asarray(w.data, dtype=np.float64)
                      for w in (params.theta_w, params.phi_w, params.g_w, params.z_w))
    N, C, H, W = xd.shape
    variant = params.variant
    out = xd.copy()
    for n in range(N):
        vec = [[xd[n, :, h, k] for k in range(W)] for h in range(H)]
        theta = [[vec[h][k] @ tw for k in range(W)] for h in range(H)]
        phi = [[vec[h][k] @ pw for k in range(W)] for h in range(H)]
        g = [[vec[h][k] @ gw for k in range(W)] for h in range(H)]
        if variant is Variant.FRAME:
            frame_theta = [np.concatenate([theta[h][k] for h in range(H)]) for k in range(W)]
            frame_phi = [np.concatenate([phi[h][k] for h in range(H)]) for k in range(W)]
        for i in range(H):
            for j in range(W):
                if variant is Variant.TIME_FREQUENCY:
                    positions = [(h, k) for h in range(H) for k in range(W)]
                elif variant is Variant.TIME:
                    positions = [(i, k) for k in range(W)]
                elif variant is Variant.FREQUENCY:
                    positions = [(h, j) for h in range(H)]
                else:
                    positions = [(i, k) for k in range(W)]
                if variant is Variant.FRAME:
                    logits = [float(frame_theta[j] @ frame_phi[k]) for (_, k) in positions]
                else:
                    logits = [float(theta[i][j] @ phi[h][k]) for (h, k) in positions]
                top = max(logits)
                f = [np.exp(v - top) for v in logits]
                norm = sum(f)
                y = np.zeros(gw.shape[1])
                for weight, (h, k) in zip(f, positions):
                    y += (weight / norm) * g[h][k]
                out[n, :, i, j] += y @ zw
    return out
