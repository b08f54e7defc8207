"""Evaluation metrics for reconstructed motion.

Positional and structural errors are reported in centimeters after undoing
the sequence normalization (``scale`` is the head-pelvis length in meters);
jitter is reported in km/s^3.
"""

import csv
from dataclasses import asdict, dataclass, field
from types import SimpleNamespace

import numpy as np

from .edm import eigen_report, pwd
from .errors import InvalidInputError


def _pair(pred, gt, num_joints):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape[0] != gt.shape[0]:
        raise InvalidInputError(f"sequence lengths differ: {pred.shape[0]} vs {gt.shape[0]}")
    if pred.ndim != 3 or gt.ndim != 3:
        raise InvalidInputError("sequences must be (T, N, 3)")
    if num_joints is not None:
        pred, gt = pred[:, :num_joints], gt[:, :num_joints]
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_errors(pred, gt, num_joints=None):
    """Per-frame, per-joint Euclidean error ``(T, J)`` in input units."""
    pred, gt = _pair(pred, gt, num_joints)
    return np.linalg.norm(pred - gt, axis=-1)


def positional_errors(pred, gt, spec, scale=1.0):
    """Return ``(PE, EEE, GTE)`` in cm.

    PE averages over all skeleton joints, EEE over the end effectors and GTE
    over the pelvis. Anchor nodes, if present, are ignored.
    """
    err = joint_errors(pred, gt, spec.num_joints) * scale * 100.0
    return (
        float(err.mean()),
        float(err[:, list(spec.end_effectors)].mean()),
        float(err[:, spec.root_index].mean()),
    )


def jerk(seq, fps):
    """Third forward difference times ``fps**3``: ``(T-3, N, 3)``."""
    return np.diff(np.asarray(seq, dtype=float), n=3, axis=0) * fps**3


def jitter_error(pred, gt, fps, scale=1.0, num_joints=None):
    """Absolute difference of mean jerk magnitudes in km/s^3.

    Returns NaN when fewer than four frames are available.
    """
    pred, gt = _pair(pred, gt, num_joints)
    if len(pred) < 4:
        return float("nan")
    mean_jerk = lambda s: np.linalg.norm(jerk(s, fps), axis=-1).mean() * scale
    return float(abs(mean_jerk(pred) - mean_jerk(gt)) / 1000.0)


def structure_error(pred, gt, scale=1.0, num_joints=None):
    """Mean absolute pairwise-distance error over joint pairs ``i < j``, in cm."""
    pred, gt = _pair(pred, gt, num_joints)
    iu = np.triu_indices(pred.shape[1], k=1)
    diff = np.abs(pwd(pred) - pwd(gt))[:, iu[0], iu[1]]
    return float(diff.mean() * scale * 100.0)


@dataclass(frozen=True)
class ContactThresholds:
    max_speed: float = 0.2
    max_height: float = 0.10


def contact_labels(seq, foot_indices, fps, scale=1.0, thresholds=ContactThresholds()):
    """Boolean ``(T, n_feet)`` contact flags: slow (m/s) and near z = 0 (m).

    Speeds use backward differences; the first frame reuses the second
    frame's speed.
    """
    feet = np.asarray(seq, dtype=float)[:, list(foot_indices)] * scale
    if len(feet) < 2:
        raise InvalidInputError("contact detection needs at least two frames")
    speed = np.linalg.norm(np.diff(feet, axis=0), axis=-1) * fps
    speed = np.concatenate([speed[:1], speed], axis=0)
    return (speed < thresholds.max_speed) & (feet[..., 2] < thresholds.max_height)


def foot_contact_accuracy(pred, gt, spec, fps, scale=1.0, thresholds=ContactThresholds()):
    """Fraction of foot-frames whose contact label agrees with the ground truth."""
    pred, gt = _pair(pred, gt, spec.num_joints)
    a = contact_labels(pred, spec.foot_indices, fps, scale, thresholds)
    b = contact_labels(gt, spec.foot_indices, fps, scale, thresholds)
    return float((a == b).mean())


def drift_curves(pred, gt, fps, root_index=0, scale=1.0):
    """Root translation error against elapsed time and against distance walked.

    Returns ``(time_curve, distance_curve)``, each ``(T, 2)`` with columns
    (seconds or meters, error in cm). The error column is the per-frame
    root error; the abscissa accumulates.
    """
    pred = np.asarray(pred, dtype=float)[:, root_index] * scale
    gt = np.asarray(gt, dtype=float)[:, root_index] * scale
    if pred.shape != gt.shape:
        raise InvalidInputError("sequence lengths differ")
    err = np.linalg.norm(pred - gt, axis=-1) * 100.0
    t = np.arange(len(gt)) / fps
    path = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gt, axis=0), axis=-1))])
    return np.column_stack([t, err]), np.column_stack([path, err])


@dataclass
class MetricReport:
    PE: float
    EEE: float
    GTE: float
    AJE: float
    GSE: float
    contact_accuracy: float
    drift_vs_time: np.ndarray = field(default=None, repr=False)
    drift_vs_distance: np.ndarray = field(default=None, repr=False)
    cev3: float = float("nan")
    tis: float = float("nan")

    def row(self):
        d = asdict(self)
        d.pop("drift_vs_time")
        d.pop("drift_vs_distance")
        return d

    def write_csv(self, path):
        row = self.row()
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(row))
            writer.writeheader()
            writer.writerow({k: f"{v:.6f}" for k, v in row.items()})

    def write_curves(self, path):
        rows = np.column_stack([self.drift_vs_time, self.drift_vs_distance])
        np.savetxt(path, rows, delimiter=",", fmt="%.6f", comments="",
                   header="time_s,gte_time_cm,distance_m,gte_distance_cm")


def evaluate(pred, gt, spec, fps, scale=1.0, predicted_distances=None):
    """Compute the full :class:`MetricReport` for one sequence.

    ``predicted_distances`` (``(T, N, N)``), when given, is summarized by its
    mean CEV(3) and TI score.
    """
    pe, eee, gte = positional_errors(pred, gt, spec, scale)
    t_curve, d_curve = drift_curves(pred, gt, fps, spec.root_index, scale)
    report = MetricReport(
        PE=pe,
        EEE=eee,
        GTE=gte,
        AJE=jitter_error(pred, gt, fps, scale, spec.num_joints),
        GSE=structure_error(pred, gt, scale, spec.num_joints),
        contact_accuracy=foot_contact_accuracy(pred, gt, spec, fps, scale),
        drift_vs_time=t_curve,
        drift_vs_distance=d_curve,
    )
    if predicted_distances is not None:
        reps = [eigen_report(d, ks=(3,)) for d in predicted_distances]
        report.cev3 = float(np.mean([r.cev_at(3) for r in reps]))
        report.tis = float(np.mean([r.tis for r in reps]))
    return report


def sensor_layout(spec):
    """Spec-like view for predictions that cover only the sensor nodes, in
    ``spec.sparse_indices`` order (as produced by the MDS baseline)."""
    sparse = list(spec.sparse_indices)
    return SimpleNamespace(
        num_joints=len(sparse),
        end_effectors=tuple(range(1, len(sparse))),
        root_index=sparse.index(spec.root_index),
        foot_indices=tuple(sparse.index(i) for i in spec.foot_indices if i in sparse),
    )
