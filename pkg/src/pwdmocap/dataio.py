"""Motion sequences, preprocessing, windowed training samples and file formats."""

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .edm import NoiseConfig, corrupt, pwd
from .errors import DegenerateGeometryError, InvalidInputError, ParseError
from .skeleton import ANCHOR_NAMES, SkeletonSpec

SEQUENCE_MAGIC = "WIPSEQ v1"


@dataclass
class MotionSequence:
    """Timestamped joint positions, optionally followed by the three anchors.

    ``frames`` has shape ``(T, N, 3)``. ``scale`` is the head-pelvis distance
    (meters) divided out by :func:`preprocess`; it is 1.0 for raw data.
    """

    frames: np.ndarray
    fps: float
    scale: float = 1.0
    floor_aligned: bool = False
    node_labels: tuple = ()
    has_anchors: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3:
            raise InvalidInputError(f"frames must be (T, N, 3), got {self.frames.shape}")
        if not self.fps > 0:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")
        if self.node_labels and len(self.node_labels) != self.frames.shape[1]:
            raise InvalidInputError("node_labels length does not match node count")

    def __len__(self):
        return len(self.frames)

    @property
    def num_nodes(self):
        return self.frames.shape[1]

    def joints(self, num_joints):
        return self.frames[:, :num_joints]


@dataclass
class WindowedSample:
    """One supervised example: ``w`` clean past frames, the noisy sparse
    measurement at ``t``, and dense targets at ``t``."""

    past_distances: np.ndarray
    past_poses: np.ndarray
    current_noisy: np.ndarray
    target_pose: np.ndarray
    target_distances: np.ndarray
    frame_index: int = 0
    sequence_id: int = 0
    realization: int = 0
    meta: dict = field(default_factory=dict)


def head_pelvis_distance(frames, spec):
    frames = np.asarray(frames)
    return np.linalg.norm(frames[:, spec.sparse_indices[1]] - frames[:, spec.root_index], axis=-1)


def preprocess(seq, spec):
    """Normalize the mean head-pelvis distance to 1 and put the floor at z = 0.

    The divisor is folded into ``seq.scale`` so the operation is idempotent.
    """
    if seq.has_anchors:
        raise InvalidInputError("preprocess expects a sequence without anchors")
    frames = seq.frames[:, :spec.num_joints]
    factor = float(head_pelvis_distance(frames, spec).mean())
    if not factor > 0:
        raise DegenerateGeometryError("head-pelvis distance is zero")
    out = frames / factor
    out[..., 2] -= out[..., 2].min()
    return replace(
        seq,
        frames=out,
        scale=seq.scale * factor,
        floor_aligned=True,
        node_labels=tuple(spec.joint_names),
    )


def attach_anchors(seq, spec):
    """Append the three fixed ground anchors to every frame."""
    if seq.has_anchors or seq.num_nodes != spec.num_joints:
        raise InvalidInputError("sequence already carries anchors or has the wrong node count")
    anchors = np.broadcast_to(spec.anchor_targets, (len(seq), spec.num_anchors, 3))
    return replace(
        seq,
        frames=np.concatenate([seq.frames, anchors], axis=1),
        node_labels=tuple(spec.joint_names) + ANCHOR_NAMES,
        has_anchors=True,
    )


def prepare(seq, spec):
    """``attach_anchors(preprocess(seq))``."""
    return attach_anchors(preprocess(seq, spec), spec)


def sparse_stream(seq, spec):
    """Clean (T, J_in, J_in) distance stream over the sensor and anchor nodes."""
    if not seq.has_anchors:
        raise InvalidInputError("sequence has no anchors attached")
    idx = np.asarray(spec.input_indices)
    return pwd(seq.frames[:, idx])


def sample_range(num_frames, window, noise_window):
    half = noise_window // 2
    return range(window + half, num_frames - half)


def make_samples(seq, spec, noise, window=16, sequence_id=0, realization=0):
    """Slice a prepared sequence into stride-1 windowed samples.

    Frames whose noise window would be truncated are skipped, giving
    ``T - window - 2 * (noise.window // 2)`` samples.
    """
    if not seq.has_anchors:
        raise InvalidInputError("attach anchors before making samples")
    n_frames = len(seq)
    if n_frames <= window + noise.window:
        raise InvalidInputError(
            f"sequence of {n_frames} frames is too short for window {window} "
            f"and noise window {noise.window}"
        )
    dense = pwd(seq.frames)
    idx = np.asarray(spec.input_indices)
    noisy = corrupt(dense[:, idx][:, :, idx], noise)
    return [
        WindowedSample(
            past_distances=dense[t - window:t],
            past_poses=seq.frames[t - window:t],
            current_noisy=noisy[t],
            target_pose=seq.frames[t],
            target_distances=dense[t],
            frame_index=t,
            sequence_id=sequence_id,
            realization=realization,
        )
        for t in sample_range(n_frames, window, noise.window)
    ]


def _fmt(values):
    return " ".join(f"{v:.17g}" for v in values)


def save_sequence(seq, path):
    n_joints = seq.num_nodes - (3 if seq.has_anchors else 0)
    labels = seq.node_labels or tuple(f"node{i}" for i in range(seq.num_nodes))
    lines = [
        SEQUENCE_MAGIC,
        f"fps={seq.fps:.17g} J={n_joints} anchors={int(seq.has_anchors)} scale={seq.scale:.17g}",
        ",".join(labels),
    ]
    lines.extend(_fmt(frame.ravel()) for frame in seq.frames)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line):
    fields = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {token!r}", line=2)
        fields[key] = value
    for key in ("fps", "J", "anchors", "scale"):
        if key not in fields:
            raise ParseError("missing header field", line=2, field=key)
    try:
        return float(fields["fps"]), int(fields["J"]), int(fields["anchors"]), float(fields["scale"])
    except ValueError as exc:
        raise ParseError(str(exc), line=2) from exc


def load_sequence(path, spec=None):
    """Read a ``WIPSEQ v1`` file. With ``spec``, the joint count is checked."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != SEQUENCE_MAGIC:
        raise ParseError(f"expected {SEQUENCE_MAGIC!r} magic line", line=1)
    if len(lines) < 3:
        raise ParseError("truncated header", line=len(lines))
    fps, n_joints, anchors, scale = _parse_header(lines[1])
    if spec is not None and n_joints != spec.num_joints:
        raise ParseError(f"expected J={spec.num_joints} joints, file has J={n_joints}", line=2, field="J")
    n_nodes = n_joints + (3 if anchors else 0)
    labels = tuple(lines[2].split(","))
    if len(labels) != n_nodes:
        raise ParseError(f"expected {n_nodes} node names, got {len(labels)}", line=3)
    frames = []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        try:
            values = np.array(line.split(), dtype=float)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        if values.size != 3 * n_nodes:
            raise ParseError(f"expected {3 * n_nodes} values, got {values.size}", line=lineno)
        frames.append(values.reshape(n_nodes, 3))
    if not frames:
        raise ParseError("no frames", line=len(lines))
    return MotionSequence(
        frames=np.stack(frames),
        fps=fps,
        scale=scale,
        floor_aligned=bool(anchors) or scale != 1.0,
        node_labels=labels,
        has_anchors=bool(anchors),
    )


def write_matrix_stream(matrices, fh):
    """Write one row-major flattened matrix per line to a path or text handle."""
    if isinstance(fh, (str, Path)):
        with open(fh, "w") as f:
            return write_matrix_stream(matrices, f)
    for m in np.asarray(matrices):
        fh.write(_fmt(m.ravel()) + "\n")


def iter_matrix_stream(fh):
    """Yield ``(N, N)`` matrices from a line-delimited stream; blank lines are skipped."""
    for lineno, line in enumerate(fh, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            values = np.array(line.split(), dtype=float)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        n = int(round(np.sqrt(values.size)))
        if n * n != values.size:
            raise ParseError(f"{values.size} values do not form a square matrix", line=lineno)
        yield values.reshape(n, n)


def read_matrix_stream(fh):
    if isinstance(fh, (str, Path)):
        with open(fh) as f:
            return read_matrix_stream(f)
    mats = list(iter_matrix_stream(fh))
    if not mats:
        return np.zeros((0, 0, 0))
    if len({m.shape for m in mats}) != 1:
        raise ParseError("matrices in the stream differ in size")
    return np.stack(mats)


def matrix_stream_text(matrices):
    buf = io.StringIO()
    write_matrix_stream(matrices, buf)
    return buf.getvalue()


def write_pose_stream(poses, fh):
    """One pose per line: ``3 * N`` decimals, nodes in order, xyz per node."""
    write_matrix_stream(np.asarray(poses, dtype=float), fh)


def read_pose_stream(fh):
    if isinstance(fh, (str, Path)):
        with open(fh) as f:
            return read_pose_stream(f)
    rows = []
    for lineno, line in enumerate(fh, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            values = np.array(line.split(), dtype=float)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        if values.size % 3 or (rows and values.size != rows[0].size):
            raise ParseError(f"line has {values.size} values, expected a constant multiple of 3", line=lineno)
        rows.append(values)
    if not rows:
        raise ParseError("empty pose stream")
    return np.stack(rows).reshape(len(rows), -1, 3)


def is_sequence_file(path):
    with open(path) as f:
        return f.readline().strip() == SEQUENCE_MAGIC
