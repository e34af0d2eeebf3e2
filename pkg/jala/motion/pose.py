"""Pose frames, motion chunks and axis-angle helpers.

A pose vector is laid out as ``[wrist_translation(3), wrist_rotation(3), finger_joints(D_f)]``.
Hand shape parameters are deliberately absent.
"""

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Sequence, Tuple, Union

import torch

from jala.errors import DataError, EmptyResultError, ShapeError

TRANSLATION = slice(0, 3)
ROTATION = slice(3, 6)
FINGERS = slice(6, None)


class HandSide(IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class PoseFrame:
    wrist_translation: Tuple[float, float, float]
    wrist_rotation: Tuple[float, float, float]
    finger_joints: Tuple[float, ...]

    def __post_init__(self):
        values = (*self.wrist_translation, *self.wrist_rotation, *self.finger_joints)
        if len(self.wrist_translation) != 3 or len(self.wrist_rotation) != 3:
            raise ShapeError("wrist translation and rotation must have 3 entries")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("pose frame entries must be finite")

    def to_tensor(self, dtype=None) -> torch.Tensor:
        return torch.tensor([*self.wrist_translation, *self.wrist_rotation, *self.finger_joints],
                            dtype=dtype or torch.get_default_dtype())

    @classmethod
    def from_tensor(cls, v: torch.Tensor) -> "PoseFrame":
        v = [float(x) for x in v.reshape(-1)]
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:]))

    @classmethod
    def zero(cls, finger_dims: int = 5) -> "PoseFrame":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0,) * finger_dims)


@dataclass
class MotionChunk:
    poses: torch.Tensor  # (T_c, 6 + D_f)
    hand_side: HandSide = HandSide.RIGHT

    def __post_init__(self):
        if self.poses.dim() != 2 or self.poses.shape[1] < 7:
            raise ShapeError(f"chunk poses must be (frames, 6 + D_f), got {tuple(self.poses.shape)}")
        if not torch.isfinite(self.poses).all():
            raise ValueError("chunk poses must be finite")
        self.hand_side = HandSide(self.hand_side)

    def __len__(self):
        return self.poses.shape[0]

    @property
    def frames(self) -> List[PoseFrame]:
        return [PoseFrame.from_tensor(row) for row in self.poses]

    @property
    def wrist(self) -> torch.Tensor:
        return self.poses[:, :6]

    @property
    def fingers(self) -> torch.Tensor:
        return self.poses[:, FINGERS]


def as_pose_tensor(poses: Union[torch.Tensor, Sequence[PoseFrame]]) -> torch.Tensor:
    if isinstance(poses, torch.Tensor):
        return poses
    if len(poses) == 0:
        return torch.zeros(0, 0)
    return torch.stack([p.to_tensor() for p in poses])


def chunk_sequence(poses, chunk_length: int, hand_side=HandSide.RIGHT) -> List[MotionChunk]:
    """Split a pose sequence into consecutive non-overlapping chunks; the remainder is dropped."""
    if chunk_length <= 0:
        raise DataError(f"chunk length must be positive, got {chunk_length}")
    poses = as_pose_tensor(poses)
    n = poses.shape[0]
    if n < chunk_length:
        raise EmptyResultError(f"sequence of {n} frames is shorter than chunk length {chunk_length}")
    return [
        MotionChunk(poses[i * chunk_length:(i + 1) * chunk_length].clone(), hand_side)
        for i in range(n // chunk_length)
    ]


def canonicalize_axis_angle(r: torch.Tensor) -> torch.Tensor:
    """Map axis-angle vectors to the equivalent rotation with angle in [-pi, pi]."""
    theta = r.norm(dim=-1, keepdim=True)
    wrapped = torch.remainder(theta + math.pi, 2 * math.pi) - math.pi
    safe = torch.where(theta > 0, theta, torch.ones_like(theta))
    return torch.where(theta > math.pi, r * wrapped / safe, r)


def axis_angle_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula for (..., 3) axis-angle vectors."""
    theta = r.norm(dim=-1, keepdim=True)
    axis = r / theta.clamp_min(1e-12)
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=r.dtype).expand(k.shape)
    s = torch.sin(theta)[..., None]
    c = torch.cos(theta)[..., None]
    return eye + s * k + (1 - c) * (k @ k)
