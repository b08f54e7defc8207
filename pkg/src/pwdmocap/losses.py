"""Training objective: three distance losses, anchor, velocity and rigidity
losses, and the gravity regularizer.

All functions take torch tensors with a leading batch (or time) axis and
return scalar tensors. Mean-squared terms average over every matrix entry,
including the zero diagonal; the anchor, velocity and rigidity terms sum.
"""

from dataclasses import dataclass, fields

import torch

from .errors import InvalidInputError

TERMS = ("pd", "dd", "cons", "refs", "velo", "rigidity", "gravity")


@dataclass
class LossWeights:
    pd: float = 1.0
    dd: float = 1.0
    cons: float = 0.5
    refs: float = 0.5
    velo: float = 0.1
    rigidity: float = 1.0
    gravity: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidInputError(f"loss weight {f.name} must be >= 0")

    def scaled(self, factor):
        return LossWeights(**{f.name: getattr(self, f.name) * factor for f in fields(self)})


@dataclass
class LossReport:
    terms: dict
    weights: LossWeights
    total: torch.Tensor
    stage: int = 1

    def as_floats(self):
        row = {name: float(value.detach()) for name, value in self.terms.items()}
        row["total"] = float(self.total.detach())
        return row


def pairwise_distances(points):
    """Differentiable ``(..., N, 3) -> (..., N, N)`` distances.

    The diagonal is exactly zero and has zero gradient.
    """
    diff = points[..., :, None, :] - points[..., None, :, :]
    sq = (diff * diff).sum(-1)
    eye = torch.eye(points.shape[-2], dtype=torch.bool, device=points.device)
    sq = torch.where(eye, torch.ones_like(sq), sq)
    return torch.where(eye, torch.zeros_like(sq), sq.sqrt())


def _check(a, b):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_pd(pred_pose, target_distances):
    d = pairwise_distances(pred_pose)
    _check(d, target_distances)
    return ((d - target_distances) ** 2).mean()


def loss_dd(pred_distances, target_distances):
    _check(pred_distances, target_distances)
    return ((pred_distances - target_distances) ** 2).mean()


def loss_cons(pred_pose, pred_distances):
    d = pairwise_distances(pred_pose)
    _check(d, pred_distances)
    return ((d - pred_distances) ** 2).mean()


def loss_refs(pred_pose, anchor_targets, anchor_indices):
    """Summed Euclidean error of the predicted anchor positions."""
    if max(anchor_indices) >= pred_pose.shape[-2]:
        raise InvalidInputError("prediction has no anchor nodes")
    pred = pred_pose[..., list(anchor_indices), :]
    target = torch.as_tensor(anchor_targets, dtype=pred.dtype, device=pred.device)
    return torch.linalg.vector_norm(pred - target, dim=-1).sum()


def gravity_reg(pred_pose, num_joints=None):
    """Mean over frames and joints of ``max(0, -z)``; anchors are excluded."""
    z = pred_pose[..., :num_joints, 2]
    return torch.relu(-z).mean()


def loss_velo(pred_seq, target_seq):
    """Summed norm of the per-joint velocity error over consecutive frames.

    Inputs are ``(..., T, N, 3)``; differences are taken along ``T``.
    """
    _check(pred_seq, target_seq)
    dv = torch.diff(pred_seq, dim=-3) - torch.diff(target_seq, dim=-3)
    return torch.linalg.vector_norm(dv, dim=-1).sum()


def loss_rigidity(pred_distances, target_distances, bones):
    """Summed absolute bone-length error over the bone pairs."""
    _check(pred_distances, target_distances)
    i, j = zip(*bones)
    return (target_distances[..., i, j] - pred_distances[..., i, j]).abs().sum()


def total_loss(
    pred_pose,
    pred_distances,
    target_distances,
    weights,
    stage=1,
    anchor_targets=None,
    anchor_indices=(),
    bones=(),
    num_joints=None,
    velocity=None,
    per_sample=1.0,
):
    """Weighted sum of all terms.

    ``velocity`` is an optional ``(pred_seq, target_seq)`` pair used only in
    stage 2. The summed terms (refs, velo, rigidity) are divided by
    ``per_sample`` so the total does not grow with batch size.
    """
    zero = pred_pose.new_zeros(())
    terms = {
        "pd": loss_pd(pred_pose, target_distances),
        "dd": loss_dd(pred_distances, target_distances),
        "cons": loss_cons(pred_pose, pred_distances),
        "refs": loss_refs(pred_pose, anchor_targets, anchor_indices) / per_sample if anchor_indices else zero,
        "velo": zero,
        "rigidity": loss_rigidity(pred_distances, target_distances, bones) / per_sample if bones else zero,
        "gravity": gravity_reg(pred_pose, num_joints),
    }
    if stage == 2 and velocity is not None:
        terms["velo"] = loss_velo(*velocity) / per_sample
    total = sum(getattr(weights, name) * terms[name] for name in TERMS if stage == 2 or name != "velo")
    return LossReport(terms=terms, weights=weights, total=total, stage=stage)
