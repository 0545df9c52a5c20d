"""Linear blendshape face with a single jaw joint.

A desk-sized stand-in for FLAME: vertices are the template plus a linear
expression offset, and the lower face is blended toward a copy rotated about
the jaw pivot. Identity shape is fixed at zero, so there is no shape basis.

The torch path (:class:`TorchFace`) is what training code differentiates
through; the numpy entry points wrap it in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import Delaunay

from .errors import InvalidArgument

FPS = 25
_SMALL_ANGLE = 1e-6


@dataclass(frozen=True)
class FaceTemplate:
    template: np.ndarray  # (n_v, 3)
    expr_basis: np.ndarray  # (n_v, 3, psi_dim)
    jaw_weights: np.ndarray  # (n_v,)
    jaw_pivot: np.ndarray  # (3,)
    faces: np.ndarray  # (n_f, 3)
    mouth_idx: np.ndarray
    lip_idx: np.ndarray
    upper_idx: np.ndarray
    upper_lip_mid: int
    lower_lip_mid: int
    mouth_channels: np.ndarray = field(default_factory=lambda: np.arange(0))

    def __post_init__(self):
        n_v = self.template.shape[0]
        if self.template.shape != (n_v, 3):
            raise InvalidArgument(f"template must be (n_v, 3), got {self.template.shape}")
        if self.expr_basis.ndim != 3 or self.expr_basis.shape[:2] != (n_v, 3):
            raise InvalidArgument("expr_basis must be (n_v, 3, psi_dim)")
        if self.jaw_weights.shape != (n_v,):
            raise InvalidArgument("jaw_weights must have one entry per vertex")
        if np.any(self.jaw_weights < 0) or np.any(self.jaw_weights > 1):
            raise InvalidArgument("jaw_weights must lie in [0, 1]")
        for name in ("mouth_idx", "lip_idx", "upper_idx"):
            idx = getattr(self, name)
            if idx.size == 0:
                raise InvalidArgument(f"{name} must be non-empty")
            if idx.min() < 0 or idx.max() >= n_v:
                raise InvalidArgument(f"{name} out of range")
        if not np.isin(self.lip_idx, self.mouth_idx).all():
            raise InvalidArgument("lip_idx must be a subset of mouth_idx")
        if self.upper_lip_mid == self.lower_lip_mid:
            raise InvalidArgument("lip midpoints must differ")
        if not np.isin([self.upper_lip_mid, self.lower_lip_mid], self.lip_idx).all():
            raise InvalidArgument("lip midpoints must be lip vertices")
        for arr in (self.template, self.expr_basis, self.jaw_pivot):
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument("template arrays must be finite")

    @property
    def n_v(self) -> int:
        return self.template.shape[0]

    @property
    def psi_dim(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def param_dim(self) -> int:
        return self.psi_dim + 3

    @property
    def upper_channels(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.psi_dim), self.mouth_channels)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "template": self.template,
            "expr_basis": self.expr_basis,
            "jaw_weights": self.jaw_weights,
            "jaw_pivot": self.jaw_pivot,
            "faces": self.faces,
            "mouth_idx": self.mouth_idx,
            "lip_idx": self.lip_idx,
            "upper_idx": self.upper_idx,
            "lip_mids": np.array([self.upper_lip_mid, self.lower_lip_mid]),
            "mouth_channels": self.mouth_channels,
        }

    @classmethod
    def from_arrays(cls, arrs) -> "FaceTemplate":
        mids = np.asarray(arrs["lip_mids"])
        return cls(
            template=np.asarray(arrs["template"]),
            expr_basis=np.asarray(arrs["expr_basis"]),
            jaw_weights=np.asarray(arrs["jaw_weights"]),
            jaw_pivot=np.asarray(arrs["jaw_pivot"]),
            faces=np.asarray(arrs["faces"]),
            mouth_idx=np.asarray(arrs["mouth_idx"]),
            lip_idx=np.asarray(arrs["lip_idx"]),
            upper_idx=np.asarray(arrs["upper_idx"]),
            upper_lip_mid=int(mids[0]),
            lower_lip_mid=int(mids[1]),
            mouth_channels=np.asarray(arrs["mouth_channels"]),
        )


@dataclass(frozen=True)
class ExpressionParams:
    psi: np.ndarray
    jaw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float))
        object.__setattr__(self, "jaw", np.asarray(self.jaw, dtype=float))
        if self.jaw.shape != (3,):
            raise InvalidArgument("jaw must be a 3-vector")
        if not (np.all(np.isfinite(self.psi)) and np.all(np.isfinite(self.jaw))):
            raise InvalidArgument("expression parameters must be finite")
        if np.linalg.norm(self.jaw) >= np.pi:
            raise InvalidArgument("jaw rotation angle must be below pi")

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.psi, self.jaw])


@dataclass(frozen=True)
class ExpressionSequence:
    """T rows of ``[psi | jaw]`` sampled at 25 fps."""

    frames: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 4:
            raise InvalidArgument(f"frames must be (T>=1, psi_dim+3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InvalidArgument("expression frames must be finite")
        if np.any(np.linalg.norm(frames[:, -3:], axis=1) >= np.pi):
            raise InvalidArgument("jaw rotation angle must be below pi")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def psi(self) -> np.ndarray:
        return self.frames[:, :-3]

    @property
    def jaw(self) -> np.ndarray:
        return self.frames[:, -3:]


def _rodrigues(r: torch.Tensor) -> torch.Tensor:
    """Batched axis-angle -> rotation matrix, shape (..., 3) -> (..., 3, 3)."""
    zero = torch.zeros_like(r[..., 0])
    rx, ry, rz = r[..., 0], r[..., 1], r[..., 2]
    skew = torch.stack(
        [
            torch.stack([zero, -rz, ry], dim=-1),
            torch.stack([rz, zero, -rx], dim=-1),
            torch.stack([-ry, rx, zero], dim=-1),
        ],
        dim=-2,
    )
    theta_sq = (r * r).sum(-1)
    small = theta_sq < _SMALL_ANGLE**2
    # keep sqrt away from 0 so the unused branch has finite gradients
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta_sq), theta_sq))
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / (theta * theta))
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(skew.shape)
    return eye + a[..., None, None] * skew + b[..., None, None] * (skew @ skew)


def rotation_from_axis_angle(jaw) -> np.ndarray:
    jaw = np.asarray(jaw, dtype=np.float64)
    if jaw.shape != (3,) or not np.all(np.isfinite(jaw)):
        raise InvalidArgument("jaw must be a finite 3-vector")
    if np.linalg.norm(jaw) >= np.pi:
        raise InvalidArgument("rotation angle must be below pi")
    return _rodrigues(torch.from_numpy(jaw)).numpy()


class TorchFace:
    """Template tensors for batched, differentiable decoding."""

    def __init__(self, template: FaceTemplate, dtype=torch.float32):
        self.face = template
        self.dtype = dtype
        self.template = torch.as_tensor(template.template, dtype=dtype)
        self.basis = torch.as_tensor(
            template.expr_basis.reshape(template.n_v * 3, template.psi_dim), dtype=dtype
        )
        self.weights = torch.as_tensor(template.jaw_weights, dtype=dtype)
        self.pivot = torch.as_tensor(template.jaw_pivot, dtype=dtype)
        self.psi_dim = template.psi_dim
        self.mouth_idx = torch.as_tensor(template.mouth_idx, dtype=torch.long)

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        """(..., psi_dim+3) -> (..., n_v, 3)."""
        psi, jaw = x[..., : self.psi_dim], x[..., self.psi_dim :]
        offsets = (psi @ self.basis.T).reshape(*psi.shape[:-1], -1, 3)
        shaped = self.template + offsets
        rot = _rodrigues(jaw) - torch.eye(3, dtype=x.dtype)
        # V = P + w (R - I)(P - pivot); exact identity when R == I
        swing = (shaped - self.pivot) @ rot.transpose(-1, -2)
        return shaped + self.weights[:, None] * swing


def _check_params(template: FaceTemplate, x: np.ndarray):
    if x.shape[-1] != template.param_dim:
        raise InvalidArgument(
            f"expected {template.param_dim} expression parameters, got {x.shape[-1]}"
        )


def decode(template: FaceTemplate, params) -> np.ndarray:
    """Vertices for one set of expression parameters, shape (n_v, 3)."""
    if isinstance(params, ExpressionParams):
        x = params.x
    else:
        x = np.asarray(params, dtype=np.float64)
    _check_params(template, x)
    if x.ndim != 1:
        raise InvalidArgument("decode takes a single parameter vector")
    with torch.no_grad():
        return TorchFace(template, torch.float64).decode(torch.from_numpy(x)).numpy()


def decode_sequence(template: FaceTemplate, seq) -> np.ndarray:
    """Per-frame decode, (T, psi_dim+3) -> (T, n_v, 3)."""
    frames = seq.frames if isinstance(seq, ExpressionSequence) else np.asarray(seq)
    frames = np.asarray(frames, dtype=np.float64)
    _check_params(template, frames)
    if frames.ndim != 2:
        raise InvalidArgument("decode_sequence takes a (T, psi_dim+3) array")
    with torch.no_grad():
        return TorchFace(template, torch.float64).decode(torch.from_numpy(frames)).numpy()


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _surface_depth(xy):
    x, y = xy[:, 0], xy[:, 1]
    return 0.6 * (1.0 - 0.35 * x**2 - 0.15 * y**2)


MOUTH_CENTER = np.array([0.0, -0.55])
_LIP_AXES = np.array([0.32, 0.12])


def make_synthetic_template(seed: int = 0, n_v: int = 300, psi_dim: int = 16) -> FaceTemplate:
    """Deterministic face-like template.

    Vertex blocks, in index order: lip ring, two outer mouth rings, upper
    face, remaining lower face. With the defaults (300 vertices, 16
    expression channels) this yields 20 lip, 60 mouth and 120 upper-face
    vertices, and channels 0-5 are the mouth channels.
    """
    if n_v < 50:
        raise InvalidArgument(f"n_v must be >= 50, got {n_v}")
    if psi_dim < 8:
        raise InvalidArgument(f"psi_dim must be >= 8, got {psi_dim}")
    rng = np.random.default_rng(seed)

    n_lip = 2 * max(3, n_v // 30)
    n_mouth = 3 * n_lip
    n_upper = (2 * n_v) // 5
    n_rest = n_v - n_mouth - n_upper

    ang = np.pi / 2 + 2 * np.pi * np.arange(n_lip) / n_lip
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    lips = MOUTH_CENTER + ring * _LIP_AXES
    lips[1:] += rng.normal(0.0, 0.004, size=(n_lip - 1, 2))
    lips[n_lip // 2] = MOUTH_CENTER - [0.0, _LIP_AXES[1]]
    outer1 = MOUTH_CENTER + ring * _LIP_AXES * [1.5, 2.0] + rng.normal(0, 0.01, (n_lip, 2))
    outer2 = MOUTH_CENTER + ring * _LIP_AXES * [2.1, 3.0] + rng.normal(0, 0.01, (n_lip, 2))

    upper = np.stack(
        [rng.uniform(-0.9, 0.9, n_upper), rng.uniform(0.15, 1.2, n_upper)], axis=1
    )
    rest = []
    while len(rest) < n_rest:
        p = np.array([rng.uniform(-0.95, 0.95), rng.uniform(-1.25, 0.1)])
        q = (p - MOUTH_CENTER) / (_LIP_AXES * [2.4, 3.4])
        if q @ q > 1.0:
            rest.append(p)
    xy = np.vstack([lips, outer1, outer2, upper, np.array(rest)])
    z = _surface_depth(xy)
    z[:n_lip] += 0.05
    template = np.column_stack([xy, z])

    lip_idx = np.arange(n_lip)
    mouth_idx = np.arange(n_mouth)
    upper_idx = np.arange(n_mouth, n_mouth + n_upper)

    # jaw influence ramps in below the upper lip and saturates at the chin
    jaw_weights = _smoothstep((-0.35 - xy[:, 1]) / 0.4)
    jaw_weights[upper_idx] = 0.0
    jaw_pivot = np.array([0.0, -0.1, -0.5])

    n_mc = 6 if psi_dim >= 12 else psi_dim // 2
    basis = np.zeros((n_v, 3, psi_dim))
    rel = (xy - MOUTH_CENTER) / (_LIP_AXES * 2.5)
    mouth_fall = np.exp(-0.5 * (rel**2).sum(1) / 0.35**2)
    above = (xy[:, 1] > MOUTH_CENTER[1]).astype(float)
    # lip part: upper lip up, lower lip down
    basis[:, 1, 0] = mouth_fall * (2 * above - 1)
    # spread: corners outward
    basis[:, 0, 1] = mouth_fall * rel[:, 0]
    for k in range(2, n_mc):
        basis[:, :, k] = _rbf_field(rng, xy, MOUTH_CENTER, 0.25, 0.15) * mouth_fall[:, None]
    for k in range(n_mc, psi_dim):
        basis[:, :, k] = _rbf_field(rng, xy, np.array([0.0, 0.7]), 0.6, 0.3)
        basis[mouth_idx, :, k] = 0.0
    basis[upper_idx, :, :n_mc] = 0.0
    for k in range(psi_dim):
        peak = np.abs(basis[:, :, k]).max()
        scale = 0.04 if k < n_mc else 0.03
        basis[:, :, k] *= scale / peak

    faces = Delaunay(xy).simplices.astype(np.int64)
    return FaceTemplate(
        template=template,
        expr_basis=basis,
        jaw_weights=jaw_weights,
        jaw_pivot=jaw_pivot,
        faces=faces,
        mouth_idx=mouth_idx,
        lip_idx=lip_idx,
        upper_idx=upper_idx,
        upper_lip_mid=0,
        lower_lip_mid=n_lip // 2,
        mouth_channels=np.arange(n_mc),
    )


def _rbf_field(rng, xy, center, spread, width, n_centers=4):
    """Smooth random 3-D displacement field from a few Gaussian bumps."""
    centers = center + rng.normal(0.0, spread, size=(n_centers, 2))
    dirs = rng.normal(size=(n_centers, 3))
    d2 = ((xy[:, None, :] - centers[None]) ** 2).sum(-1)
    return np.exp(-0.5 * d2 / width**2) @ dirs
