"""Procedural 24-joint motion clips (walk, arm swing, squat, turn, figure-8).

Clips are produced by forward kinematics over the rest skeleton, so bone
lengths are constant up to round-off. Each frame is lifted so the lowest
ankle/foot joint touches z = 0. Units are meters.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from .dataio import MotionSequence
from .errors import InvalidInputError
from .skeleton import JOINT_NAMES, PARENTS, REST_OFFSETS

KINDS = ("walk", "arm_swing", "squat", "turn", "figure8")

_GROUND_JOINTS = [7, 8, 10, 11]


def forward_kinematics(root_pos, root_yaw, local_euler, offsets=REST_OFFSETS, parents=PARENTS):
    """Global joint positions from root motion and per-joint local XYZ Euler angles.

    Parameters
    ----------
    root_pos : (T, 3)
    root_yaw : (T,) heading about +z in radians
    local_euler : (T, J, 3) intrinsic x/y/z angles per joint (joint 0 is applied
        after the yaw)
    """
    n_frames, n_joints = local_euler.shape[:2]
    pos = np.zeros((n_frames, n_joints, 3))
    glob = [None] * n_joints
    yaw = Rotation.from_euler("z", root_yaw)
    glob[0] = yaw * Rotation.from_euler("xyz", local_euler[:, 0])
    pos[:, 0] = root_pos
    for j in range(1, n_joints):
        p = parents[j]
        pos[:, j] = pos[:, p] + glob[p].apply(offsets[j])
        glob[j] = glob[p] * Rotation.from_euler("xyz", local_euler[:, j])
    return pos


def _heading_from_velocity(vx, vy):
    # body forward is local +y, so yaw = direction - 90deg
    return np.unwrap(np.arctan2(vy, vx)) - np.pi / 2


def _gait(angles, phase, amp):
    """Write a walking gait for the given cycle phase into ``angles``."""
    s = np.sin(phase)
    angles[:, 1, 0] = amp * s
    angles[:, 2, 0] = -amp * s
    angles[:, 4, 0] = -1.6 * amp * ((1 + np.sin(phase + 0.5)) / 2) ** 2
    angles[:, 5, 0] = -1.6 * amp * ((1 + np.sin(phase + np.pi + 0.5)) / 2) ** 2
    angles[:, 7, 0] = 0.15 * np.sin(phase - 0.5)
    angles[:, 8, 0] = 0.15 * np.sin(phase + np.pi - 0.5)
    angles[:, 3, 2] = 0.08 * s
    angles[:, 0, 2] = -0.06 * s
    angles[:, 16, 0] = -0.8 * amp * s
    angles[:, 17, 0] = 0.8 * amp * s
    angles[:, 16, 1] = -0.1
    angles[:, 17, 1] = 0.1
    angles[:, 18, 0] = 0.35 + 0.1 * s
    angles[:, 19, 0] = 0.35 - 0.1 * s


def _path_gait(xy, fps, stride, amp, rng):
    vel = np.gradient(xy, 1.0 / fps, axis=0)
    yaw = _heading_from_velocity(vel[:, 0], vel[:, 1])
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    phase = 2 * np.pi * dist / stride + rng.uniform(0, 2 * np.pi)
    angles = np.zeros((len(xy), len(JOINT_NAMES), 3))
    _gait(angles, phase, amp)
    return yaw, angles


def _walk(t, fps, rng):
    speed = rng.uniform(0.45, 0.6)
    direction = rng.uniform(0, 2 * np.pi)
    u = np.array([np.cos(direction), np.sin(direction)])
    center = np.array([0.5, 0.5]) + rng.uniform(-0.5, 0.5, size=2)
    xy = center + np.outer(speed * (t - t[-1] / 2), u)
    # gentle lateral meander keeps the heading from being perfectly constant
    xy += np.outer(0.05 * np.sin(2 * np.pi * t / 7.0 + rng.uniform(0, 6)), [-u[1], u[0]])
    yaw, angles = _path_gait(xy, fps, rng.uniform(1.2, 1.4), rng.uniform(0.35, 0.45), rng)
    return xy, yaw, angles


def _figure8(t, fps, rng):
    size = rng.uniform(1.0, 1.4)
    period = rng.uniform(14.0, 18.0)
    theta = 2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)
    center = np.array([0.5, 0.5]) + rng.uniform(-0.3, 0.3, size=2)
    xy = center + size * np.stack([np.sin(theta), np.sin(theta) * np.cos(theta)], axis=1)
    yaw, angles = _path_gait(xy, fps, rng.uniform(1.2, 1.4), rng.uniform(0.3, 0.4), rng)
    return xy, yaw, angles


def _standing(t, rng):
    xy = np.tile(np.array([0.5, 0.5]) + rng.uniform(-0.5, 0.5, size=2), (len(t), 1))
    yaw = np.full(len(t), rng.uniform(0, 2 * np.pi))
    angles = np.zeros((len(t), len(JOINT_NAMES), 3))
    angles[:, 16, 1] = -0.1
    angles[:, 17, 1] = 0.1
    angles[:, 18:20, 0] = 0.2
    return xy, yaw, angles


def _arm_swing(t, fps, rng):
    xy, yaw, angles = _standing(t, rng)
    freq = rng.uniform(0.5, 0.9)
    phase = 2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.6, 1.0)
    angles[:, 16, 0] = amp * np.sin(phase)
    angles[:, 17, 0] = -amp * np.sin(phase)
    angles[:, 16, 1] = -0.1 - 0.4 * (1 - np.cos(phase)) / 2
    angles[:, 17, 1] = 0.1 + 0.4 * (1 - np.cos(phase + np.pi)) / 2
    angles[:, 18, 0] = 0.3 + 0.3 * (1 + np.sin(phase)) / 2
    angles[:, 19, 0] = 0.3 + 0.3 * (1 - np.sin(phase)) / 2
    angles[:, 3, 2] = 0.1 * np.sin(phase)
    return xy, yaw, angles


def _squat(t, fps, rng):
    xy, yaw, angles = _standing(t, rng)
    freq = rng.uniform(0.3, 0.5)
    depth = rng.uniform(0.6, 0.9) * (1 - np.cos(2 * np.pi * freq * t)) / 2
    angles[:, 1, 0] = angles[:, 2, 0] = 1.3 * depth
    angles[:, 4, 0] = angles[:, 5, 0] = -2.2 * depth
    angles[:, 7, 0] = angles[:, 8, 0] = 0.9 * depth
    angles[:, 3, 0] = 0.3 * depth
    angles[:, 16, 0] = angles[:, 17, 0] = 1.2 * depth
    return xy, yaw, angles


def _turn(t, fps, rng):
    xy, yaw, angles = _standing(t, rng)
    rate = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
    yaw = yaw + rate * t
    phase = 2 * np.pi * 1.0 * t
    angles[:, 4, 0] = -0.15 * (1 + np.sin(phase)) / 2
    angles[:, 5, 0] = -0.15 * (1 + np.sin(phase + np.pi)) / 2
    angles[:, 1, 0] = 0.08 * (1 + np.sin(phase)) / 2
    angles[:, 2, 0] = 0.08 * (1 + np.sin(phase + np.pi)) / 2
    angles[:, 16, 0] = 0.2 * np.sin(phase)
    angles[:, 17, 0] = -0.2 * np.sin(phase)
    return xy, yaw, angles


_BUILDERS = {
    "walk": _walk,
    "arm_swing": _arm_swing,
    "squat": _squat,
    "turn": _turn,
    "figure8": _figure8,
}


def generate_synthetic(kind, duration_s=10.0, fps=60.0, seed=0):
    """Generate a clip of one of ``KINDS`` in meters (no anchors, not normalized)."""
    if kind not in _BUILDERS:
        raise InvalidInputError(f"unknown motion kind {kind!r}; expected one of {KINDS}")
    if not duration_s > 0 or not fps > 0:
        raise InvalidInputError("duration_s and fps must be positive")
    rng = np.random.default_rng(seed)
    n_frames = int(round(duration_s * fps))
    t = np.arange(n_frames) / fps
    xy, yaw, angles = _BUILDERS[kind](t, fps, rng)
    root = np.column_stack([xy, np.zeros(n_frames)])
    pos = forward_kinematics(root, yaw, angles)
    pos[..., 2] -= pos[:, _GROUND_JOINTS, 2].min(axis=1)[:, None]
    return MotionSequence(frames=pos, fps=float(fps), node_labels=JOINT_NAMES)
