"""24-joint human skeleton layout, sensor subsets and ground anchors."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# rest offsets from the parent joint in meters; x left, y forward, z up
REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.06, -0.01, -0.09],
    [-0.06, -0.01, -0.09],
    [0.0, -0.02, 0.11],
    [0.04, 0.0, -0.38],
    [-0.04, 0.0, -0.38],
    [0.0, 0.01, 0.135],
    [0.0, -0.03, -0.40],
    [0.0, -0.03, -0.40],
    [0.0, 0.0, 0.055],
    [0.0, 0.12, -0.05],
    [0.0, 0.12, -0.05],
    [0.0, -0.02, 0.21],
    [0.07, -0.01, 0.12],
    [-0.07, -0.01, 0.12],
    [0.0, 0.05, 0.09],
    [0.11, -0.01, 0.03],
    [-0.11, -0.01, 0.03],
    [0.02, 0.0, -0.26],
    [-0.02, 0.0, -0.26],
    [0.0, 0.01, -0.25],
    [0.0, 0.01, -0.25],
    [0.0, 0.02, -0.08],
    [0.0, 0.02, -0.08],
])

ANCHOR_NAMES = ("r_o", "r_x", "r_y")
ANCHOR_TARGETS = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

PELVIS, HEAD = 0, 15
LEFT_KNEE, RIGHT_KNEE = 4, 5
LEFT_FOOT, RIGHT_FOOT = 10, 11
LEFT_HAND, RIGHT_HAND = 22, 23


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint layout plus the sparse sensor subset and anchor definitions."""

    joint_names: tuple = JOINT_NAMES
    parents: tuple = PARENTS
    lower_body_mode: str = "feet"
    anchor_targets: np.ndarray = ANCHOR_TARGETS

    def __post_init__(self):
        if self.lower_body_mode not in ("feet", "knees"):
            raise InvalidInputError(f"lower_body_mode must be 'feet' or 'knees', got {self.lower_body_mode!r}")
        if len(self.parents) != len(self.joint_names):
            raise InvalidInputError("parents and joint_names differ in length")

    @property
    def num_joints(self):
        return len(self.joint_names)

    @property
    def num_anchors(self):
        return len(self.anchor_targets)

    @property
    def bones(self):
        return tuple((p, j) for j, p in enumerate(self.parents) if p >= 0)

    @property
    def sparse_indices(self):
        lower = (LEFT_FOOT, RIGHT_FOOT) if self.lower_body_mode == "feet" else (LEFT_KNEE, RIGHT_KNEE)
        return (PELVIS, HEAD, LEFT_HAND, RIGHT_HAND) + lower

    @property
    def end_effectors(self):
        return self.sparse_indices[1:]

    @property
    def foot_indices(self):
        return (LEFT_FOOT, RIGHT_FOOT)

    @property
    def root_index(self):
        return PELVIS

    @property
    def anchor_indices(self):
        j = self.num_joints
        return tuple(range(j, j + self.num_anchors))

    @property
    def input_indices(self):
        """Node indices, in a (J+3)-node frame, that the sensors observe."""
        return self.sparse_indices + self.anchor_indices

    def node_labels(self, anchors=True):
        return self.joint_names + (ANCHOR_NAMES if anchors else ())


def human_skeleton(lower_body_mode="feet"):
    return SkeletonSpec(lower_body_mode=lower_body_mode)
