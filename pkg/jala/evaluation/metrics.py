"""Hand-motion metrics: toy forward kinematics, MPJPE, PA-MPJPE, MWTE and MDE.

All metrics take pose tensors shaped (..., T, 6 + D_f), a ``MotionChunk`` or
a list of ``PoseFrame``. Joints are the wrist point plus one fingertip per
finger joint angle.
"""

import logging

import torch

from jala.errors import ShapeError
from jala.motion.pose import MotionChunk, PoseFrame, ROTATION, TRANSLATION, as_pose_tensor, axis_angle_to_matrix

logger = logging.getLogger(__name__)

FINGER_REACH = 0.08
FINGER_SPACING = 0.02
FINGER_LENGTH = 0.05


def _poses(x) -> torch.Tensor:
    if isinstance(x, MotionChunk):
        return x.poses
    if isinstance(x, PoseFrame):
        return x.to_tensor()
    return as_pose_tensor(x)


def _finger_bases(finger_dims: int, dtype) -> torch.Tensor:
    j = torch.arange(finger_dims, dtype=dtype)
    bases = torch.zeros(finger_dims, 3, dtype=dtype)
    bases[:, 0] = FINGER_REACH
    bases[:, 1] = FINGER_SPACING * (j - (finger_dims - 1) / 2)
    return bases


def rest_joints(finger_dims: int = 5, dtype=None) -> torch.Tensor:
    """Joint set of the zero pose: wrist at the origin, fingers straight along +x."""
    return joints_from_pose(torch.zeros(6 + finger_dims, dtype=dtype or torch.get_default_dtype()))


def joints_from_pose(pose) -> torch.Tensor:
    """(..., 6 + D_f) pose -> (..., 1 + D_f, 3) joints."""
    pose = _poses(pose)
    finger_dims = pose.shape[-1] - 6
    theta = pose[..., 6:]
    local = _finger_bases(finger_dims, pose.dtype).expand(*theta.shape, 3).clone()
    local[..., 0] = local[..., 0] + FINGER_LENGTH * torch.cos(theta)
    local[..., 2] = local[..., 2] - FINGER_LENGTH * torch.sin(theta)
    rot = axis_angle_to_matrix(pose[..., ROTATION])
    wrist = pose[..., TRANSLATION]
    tips = torch.einsum("...ij,...fj->...fi", rot, local) + wrist[..., None, :]
    return torch.cat([wrist[..., None, :], tips], dim=-2)


def _check_pair(pred, gt):
    pred, gt = _poses(pred), _poses(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ")
    return pred, gt


def mpjpe(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(torch.linalg.vector_norm(joints_from_pose(pred) - joints_from_pose(gt), dim=-1).mean())


def procrustes_align(pred: torch.Tensor, gt: torch.Tensor, scale: bool = True):
    """Least-squares similarity alignment of (F, J, 3) point sets, per frame.

    Returns the aligned prediction and a per-frame flag for collinear (degenerate)
    targets, where the fit falls back to rotation + translation.
    """
    mu_p = pred.mean(-2, keepdim=True)
    mu_g = gt.mean(-2, keepdim=True)
    x = pred - mu_p
    y = gt - mu_g
    h = x.transpose(-1, -2) @ y
    u, s, vt = torch.linalg.svd(h)
    v = vt.transpose(-1, -2)
    d = torch.sign(torch.linalg.det(v @ u.transpose(-1, -2)))
    d = torch.where(d == 0, torch.ones_like(d), d)
    signs = torch.ones_like(s)
    signs[..., -1] = d
    rot = v @ torch.diag_embed(signs) @ u.transpose(-1, -2)
    gt_sv = torch.linalg.svdvals(y)
    degenerate = gt_sv[..., 1] <= 1e-9 * gt_sv[..., 0].clamp_min(1e-30)
    if scale:
        norm = (x ** 2).sum((-1, -2)).clamp_min(1e-30)
        factor = (s * signs).sum(-1) / norm
        factor = torch.where(degenerate, torch.ones_like(factor), factor)
    else:
        factor = torch.ones(x.shape[:-2], dtype=x.dtype)
    aligned = factor[..., None, None] * (x @ rot.transpose(-1, -2)) + mu_g
    return aligned, degenerate


def pa_mpjpe(pred, gt, scale: bool = True) -> float:
    """MPJPE after per-frame Procrustes alignment (similarity by default, rigid with scale=False)."""
    pred, gt = _check_pair(pred, gt)
    jp = joints_from_pose(pred).reshape(-1, pred.shape[-1] - 5, 3)
    jg = joints_from_pose(gt).reshape(-1, gt.shape[-1] - 5, 3)
    aligned, degenerate = procrustes_align(jp, jg, scale=scale)
    if bool(degenerate.any()):
        logger.warning("%d frames have collinear joints; aligned without scale", int(degenerate.sum()))
    err_aligned = torch.linalg.vector_norm(aligned - jg, dim=-1).mean(-1)
    # the identity is a feasible alignment too
    err_identity = torch.linalg.vector_norm(jp - jg, dim=-1).mean(-1)
    return float(torch.minimum(err_aligned, err_identity).mean())


def mwte(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(torch.linalg.vector_norm(pred[..., TRANSLATION] - gt[..., TRANSLATION], dim=-1).mean())


def mde(pred, gt, mode: str = "distance") -> float:
    """Error of the start-to-end wrist displacement, averaged over sequences."""
    pred, gt = _check_pair(pred, gt)
    if pred.dim() < 2 or pred.shape[-2] < 2:
        raise ShapeError("mde needs sequences of at least 2 frames")
    d_pred = pred[..., -1, TRANSLATION] - pred[..., 0, TRANSLATION]
    d_gt = gt[..., -1, TRANSLATION] - gt[..., 0, TRANSLATION]
    if mode == "distance":
        return float(torch.linalg.vector_norm(d_pred - d_gt, dim=-1).mean())
    if mode == "angle":
        cos = torch.nn.functional.cosine_similarity(d_pred, d_gt, dim=-1, eps=1e-12)
        return float(torch.arccos(cos.clamp(-1.0, 1.0)).mean())
    raise ValueError(f"unknown mde mode {mode!r}")


def all_metrics(pred, gt, mde_mode: str = "distance", pa_scale: bool = True) -> dict:
    return {
        "mpjpe": mpjpe(pred, gt),
        "pa_mpjpe": pa_mpjpe(pred, gt, scale=pa_scale),
        "mwte": mwte(pred, gt),
        "mde": mde(pred, gt, mode=mde_mode),
    }

