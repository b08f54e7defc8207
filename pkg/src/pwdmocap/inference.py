"""Autoregressive generation, output smoothing and the classical baseline."""

import copy
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .edm import classical_mds, double_center, procrustes_align, pwd
from .errors import DegenerateGeometryError, InvalidInputError, NumericError
from .skeleton import ANCHOR_TARGETS


def smoothing_weights(n, sigma=1.5):
    """Half-normal weights for lags ``0 .. n-1`` (lag 0 = newest), summing to 1."""
    lags = np.arange(n)
    w = np.exp(-lags**2 / (2.0 * sigma**2))
    return w / w.sum()


def smooth(poses, sigma=1.5):
    """Weighted average of recent poses ordered oldest to newest."""
    poses = np.asarray(poses, dtype=float)
    w = smoothing_weights(len(poses), sigma)[::-1]
    return np.tensordot(w, poses, axes=1)


@dataclass
class GeneratorState:
    """Feedback window, recent raw predictions and a frame counter."""

    feedback: deque
    recent: deque
    frame: int = 0
    last_raw: np.ndarray = None

    def copy(self):
        return copy.deepcopy(self)


class PoseGenerator:
    """Streaming reconstruction with a trained model.

    Feedback for the next frame is the input-node submatrix of
    ``pwd(predicted pose)`` (or of the PWD-head output when the model's
    ``feedback`` is ``"pwd_head"``; the predicted pose itself for the
    geometric-feedback variant). The returned pose is the half-normal
    weighted mean of the last ``w // 2`` raw predictions.
    """

    def __init__(self, model, spec, smoothing_sigma=1.5, feedback=None):
        self.model = model.eval()
        self.cfg = model.cfg
        self.spec = spec
        self.sigma = smoothing_sigma
        self.feedback_mode = feedback or self.cfg.feedback
        if self.cfg.variant == "WiP-SI":
            self.fb_index = np.arange(self.cfg.j_in)
        else:
            self.fb_index = np.asarray(spec.input_indices)
        self.window = self.cfg.window
        self.smooth_len = max(1, self.window // 2)

    def _predict(self, history, measurement):
        past = torch.as_tensor(np.stack(history), dtype=torch.float32)
        cur = torch.as_tensor(np.clip(measurement, 0.0, None), dtype=torch.float32)
        with torch.no_grad():
            pose, dist = self.model(past, cur)
        pose, dist = pose.double().numpy(), dist.double().numpy()
        if not np.all(np.isfinite(pose)):
            raise NumericError(f"non-finite prediction")
        return pose, dist

    def _feedback(self, pose, dist):
        if self.cfg.geometric_feedback:
            return pose
        if self.feedback_mode == "pwd_head":
            return dist[np.ix_(self.fb_index, self.fb_index)]
        return pwd(pose[self.fb_index])

    def _stand_in(self, measurements):
        if not self.cfg.geometric_feedback:
            return [np.clip(m, 0.0, None) for m in measurements]
        # no distances to stand in for poses: iterate the first frame to a guess
        guess = np.zeros((self.cfg.j_out, 3))
        for _ in range(3):
            guess, _ = self._predict([guess] * self.window, measurements[0])
        return [guess] * self.window

    def warm_start(self, measurements):
        """Bootstrap from the first ``w`` measurements.

        The measured matrices stand in for feedback; each of the ``w`` frames
        is then predicted in turn and its feedback replaces the oldest stand-in.
        """
        measurements = [np.asarray(m, dtype=float) for m in measurements]
        if len(measurements) < self.window:
            raise InvalidInputError(f"warm start needs {self.window} measurements, got {len(measurements)}")
        state, _ = self._warm(measurements[:self.window])
        return state

    def _warm(self, measurements):
        state = GeneratorState(
            feedback=deque(self._stand_in(measurements), maxlen=self.window),
            recent=deque(maxlen=self.smooth_len),
        )
        out, raw = [], []
        for m in measurements:
            out.append(self._advance(state, m))
            raw.append(state.last_raw)
        return state, (out, raw)

    def _advance(self, state, measurement):
        pose, dist = self._predict(list(state.feedback), measurement)
        state.feedback.append(self._feedback(pose, dist))
        state.recent.append(pose)
        state.frame += 1
        state.last_raw = pose
        return smooth(list(state.recent), self.sigma)

    def step(self, state, measurement):
        """Consume one measurement and return the smoothed pose. Mutates ``state``."""
        if state.frame < self.window:
            raise InvalidInputError("state is not warmed up")
        return self._advance(state, np.asarray(measurement, dtype=float))

    def run(self, measurements, return_raw=False):
        """Reconstruct a whole ``(T, J_in, J_in)`` stream.

        The first ``w`` outputs are the smoothed warm-start predictions.
        """
        measurements = np.asarray(measurements, dtype=float)
        if len(measurements) < self.window:
            raise InvalidInputError(f"warm start needs {self.window} measurements, got {len(measurements)}")
        state, (out, raw) = self._warm(list(measurements[:self.window]))
        for m in measurements[self.window:]:
            out.append(self.step(state, m))
            raw.append(state.last_raw)
        if return_raw:
            return np.stack(out), np.stack(raw)
        return np.stack(out)


def measure_throughput(generator, measurements, repeats=1):
    """Frames per second of :meth:`PoseGenerator.run` on a stream."""
    start = time.perf_counter()
    for _ in range(repeats):
        generator.run(measurements)
    return repeats * len(measurements) / (time.perf_counter() - start)


@dataclass
class BaselineResult:
    poses: np.ndarray
    flagged: np.ndarray = field(default=None)


def _gravity_flip(points, body, prev_flip):
    mean_z = points[body, 2].mean()
    if abs(mean_z) < 1e-9:
        return prev_flip
    return mean_z < 0


def mds_procrustes_baseline(stream, num_sparse=6, anchor_targets=ANCHOR_TARGETS, anchored=True):
    """Per-frame classical MDS reconstruction of the sensor and anchor nodes.

    With anchors, each embedding is rigidly aligned (reflection allowed) so
    the anchor nodes land on ``anchor_targets``, then mirrored through the
    anchor plane if the body's mean height is negative. Without anchors,
    frames are rigidly aligned to the previous output instead. Frames whose
    embedding has rank < 3 are flagged and the previous pose is held.

    Node order follows the stream: sensors first, then anchors.
    """
    stream = np.asarray(stream, dtype=float)
    n = stream.shape[1]
    body = np.arange(num_sparse)
    anchors = np.arange(num_sparse, n)
    out = np.zeros((len(stream), n, 3))
    flagged = np.zeros(len(stream), dtype=bool)
    prev, flip = None, False
    for t, d in enumerate(stream):
        try:
            d = 0.5 * (d + d.T)
            evals = np.linalg.eigvalsh(double_center(d))
            rank = int(np.sum(evals > 1e-9 * max(evals.max(), 1e-300)))
            if rank < 3:
                raise DegenerateGeometryError("embedding rank < 3", rank=rank)
            emb = classical_mds(d, 3)
            if anchored:
                _, tf = procrustes_align(emb[anchors], anchor_targets, allow_reflection=True)
                pose = tf.apply(emb)
                flip = _gravity_flip(pose, body, flip)
                if flip:
                    pose[:, 2] *= -1
            elif prev is not None:
                pose, _ = procrustes_align(emb, prev, allow_reflection=True)
            else:
                pose = emb
        except DegenerateGeometryError:
            if prev is None:
                raise
            pose = prev.copy()
            flagged[t] = True
        out[t] = pose
        prev = pose
    return BaselineResult(poses=out, flagged=flagged)
