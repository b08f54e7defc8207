import numpy as np
import pytest
import torch

from pwdmocap.dataio import prepare, sparse_stream
from pwdmocap.edm import NoiseConfig, corrupt, pwd
from pwdmocap.errors import DegenerateGeometryError, InvalidInputError
from pwdmocap.inference import (
    PoseGenerator,
    mds_procrustes_baseline,
    smooth,
    smoothing_weights,
)
from pwdmocap.model import ModelConfig, WiPModel
from pwdmocap.skeleton import human_skeleton
from pwdmocap.synth import generate_synthetic

torch.set_num_threads(1)
SPEC = human_skeleton()
TINY = dict(num_blocks=2, channels=8, heads=2, stj_heads=2, dropout=0.0, window=6)


@pytest.fixture(scope="module")
def walk():
    return prepare(generate_synthetic("walk", 2.0, 60, seed=5), SPEC)


@pytest.fixture(scope="module")
def generator():
    torch.manual_seed(0)
    return PoseGenerator(WiPModel(ModelConfig(**TINY)), SPEC)


# smoothing


def test_smoothing_weights():
    w = smoothing_weights(8, 1.5)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(w) < 0)
    assert w[1] / w[0] == pytest.approx(np.exp(-1 / (2 * 1.5**2)))


def test_smooth_identical_poses():
    pose = np.random.default_rng(0).normal(size=(27, 3))
    np.testing.assert_allclose(smooth([pose] * 8), pose, atol=1e-14)


def test_smooth_linear_trajectory_lag():
    # poses move by one unit per frame; the output lags by sum k w_k
    frames = np.arange(8.0)[:, None, None] * np.ones((8, 2, 3))
    w = smoothing_weights(8)
    lag = np.sum(np.arange(8) * w)
    np.testing.assert_allclose(smooth(frames), frames[-1] - lag, atol=1e-12)


def test_smooth_is_convex():
    poses = np.random.default_rng(1).normal(size=(8, 27, 3))
    out = smooth(poses)
    assert np.all(out >= poses.min(0) - 1e-12) and np.all(out <= poses.max(0) + 1e-12)


# generator loop


def test_warm_start_state(generator, walk):
    stream = sparse_stream(walk, SPEC)
    state = generator.warm_start(stream[:6])
    assert state.frame == 6
    assert len(state.feedback) == 6 and state.feedback.maxlen == 6
    assert state.recent.maxlen == 3
    with pytest.raises(InvalidInputError):
        generator.warm_start(stream[:5])


def test_step_requires_warm_state(generator, walk):
    stream = sparse_stream(walk, SPEC)
    state = generator.warm_start(stream[:6])
    state.frame = 0
    with pytest.raises(InvalidInputError):
        generator.step(state, stream[6])


def test_step_is_pure_given_state(generator, walk):
    stream = sparse_stream(walk, SPEC)
    state = generator.warm_start(stream[:6])
    a = generator.step(state.copy(), stream[6])
    b = generator.step(state.copy(), stream[6])
    np.testing.assert_array_equal(a, b)


def test_feedback_is_pwd_of_prediction(generator, walk):
    state = generator.warm_start(sparse_stream(walk, SPEC)[:6])
    idx = list(SPEC.input_indices)
    np.testing.assert_allclose(state.feedback[-1], pwd(state.last_raw[idx]), atol=1e-12)


def test_truncation_never_changes_past(generator, walk):
    stream = sparse_stream(walk, SPEC)[:30]
    full = generator.run(stream)
    for cut in (6, 7, 19):
        np.testing.assert_array_equal(generator.run(stream[:cut]), full[:cut])


def test_run_output_length_and_determinism(generator, walk):
    stream = sparse_stream(walk, SPEC)[:20]
    out, raw = generator.run(stream, return_raw=True)
    assert out.shape == raw.shape == (20, 27, 3)
    np.testing.assert_array_equal(out, generator.run(stream))


@pytest.mark.parametrize("variant", ["WiP-SI", "WiP-Geo"])
def test_variants_run(variant, walk):
    torch.manual_seed(1)
    gen = PoseGenerator(WiPModel(ModelConfig(variant=variant, **TINY)), SPEC)
    out = gen.run(sparse_stream(walk, SPEC)[:10])
    assert out.shape == (10, gen.cfg.j_out, 3) and np.all(np.isfinite(out))


def test_pwd_head_feedback(walk):
    torch.manual_seed(2)
    gen = PoseGenerator(WiPModel(ModelConfig(feedback="pwd_head", **TINY)), SPEC)
    state = gen.warm_start(sparse_stream(walk, SPEC)[:6])
    assert state.feedback[-1].shape == (9, 9)


# classical baseline


def test_baseline_exact_on_clean_stream(walk):
    res = mds_procrustes_baseline(sparse_stream(walk, SPEC))
    target = walk.frames[:, list(SPEC.input_indices)]
    err = np.linalg.norm(res.poses - target, axis=-1).mean(1)
    assert err.max() < 1e-6
    assert not res.flagged.any()


def test_baseline_mirrored_world(walk):
    mirrored = walk.frames * [1, -1, 1]
    # body mirrored through the xz-plane, anchors left in place
    mirrored[:, 24:] = walk.frames[:, 24:]
    stream = sparse_stream(type(walk)(mirrored, walk.fps, has_anchors=True), SPEC)
    res = mds_procrustes_baseline(stream)
    np.testing.assert_allclose(res.poses, mirrored[:, list(SPEC.input_indices)], atol=1e-6)


def test_baseline_reflected_input_same_output(walk):
    stream = sparse_stream(walk, SPEC)
    flipped = walk.frames * [1, 1, -1]
    # distances are invariant to reflection: the gravity rule must pick the upright solution
    res = mds_procrustes_baseline(sparse_stream(type(walk)(flipped, walk.fps, has_anchors=True), SPEC))
    np.testing.assert_allclose(res.poses, mds_procrustes_baseline(stream).poses, atol=1e-9)


def test_baseline_degenerate_frame_holds_previous(walk):
    stream = sparse_stream(walk, SPEC)[:5].copy()
    stream[3] = pwd(np.outer(np.arange(9.0), [1.0, 0, 0]))
    res = mds_procrustes_baseline(stream)
    assert res.flagged.tolist() == [False, False, False, True, False]
    np.testing.assert_array_equal(res.poses[3], res.poses[2])
    with pytest.raises(DegenerateGeometryError):
        mds_procrustes_baseline(stream[3:4])


def test_baseline_noise_hurts(walk):
    stream = sparse_stream(walk, SPEC)
    target = walk.frames[:, list(SPEC.input_indices)]
    errs = []
    for sigma in (0.0, 0.05, 0.15):
        res = mds_procrustes_baseline(corrupt(stream, NoiseConfig(sigma, 5, seed=0)))
        errs.append(np.linalg.norm(res.poses - target, axis=-1)[:, :6].mean())
    assert errs[0] < errs[1] < errs[2]


def test_constant_input_settles_to_constant_pose(generator, walk):
    const = np.repeat(sparse_stream(walk, SPEC)[:1], 60, axis=0)
    out = generator.run(const)
    # the feedback loop reaches a fixed point; consecutive outputs stop moving
    assert np.abs(np.diff(out[-20:], axis=0)).max() < 1e-3
