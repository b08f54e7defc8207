"""Two-stage optimization with teacher forcing.

Stage I learns distance-to-motion on clean data. Stage II inserts STJ-SA
layers, freezes everything except gated cross-attention and STJ-SA, and
fine-tunes on noise-corrupted measurements with the velocity loss enabled.
"""

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataio import make_samples
from .edm import NoiseConfig, random_permutation
from .errors import FreezeAuditError, InvalidInputError, NumericError
from .losses import TERMS, LossWeights, total_loss
from .model import WiPModel, is_stage2_trainable, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    warmup_steps: int = 500
    total_steps: int = 5000
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(0.15, 5))
    weights: LossWeights = field(default_factory=LossWeights)
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    realizations: int = 4
    log_every: int = 50
    checkpoint_every: int = 0
    max_seconds: float = 0.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise InvalidInputError(f"stage must be 1 or 2, got {self.stage}")
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_file(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def lr_at(step, cfg):
    """Linear warmup to the base rate over ``warmup_steps``, then constant (steps count from 1)."""
    if cfg.warmup_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, step / cfg.warmup_steps)


@dataclass
class TrainingSet:
    """Stacked samples as float32 tensors.

    ``past`` holds the feedback the model consumes: input-node distance
    submatrices, or full poses for the geometric-feedback variant.
    ``prev_index[i]`` is the sample one frame earlier in the same sequence and
    noise realization, or -1.
    """

    past: torch.Tensor
    current: torch.Tensor
    target_pose: torch.Tensor
    target_distances: torch.Tensor
    prev_index: torch.Tensor

    def __len__(self):
        return len(self.current)

    @classmethod
    def from_samples(cls, samples, spec, model_cfg):
        if not samples:
            raise InvalidInputError("no samples")
        idx = np.asarray(spec.input_indices)
        si = model_cfg.variant == "WiP-SI"
        out_idx = idx if si else np.arange(model_cfg.j_out)
        if model_cfg.geometric_feedback:
            past = np.stack([s.past_poses[:, out_idx] for s in samples])
        else:
            past = np.stack([s.past_distances[:, idx][:, :, idx] for s in samples])
        keys = {(s.sequence_id, s.realization, s.frame_index): i for i, s in enumerate(samples)}
        prev = [keys.get((s.sequence_id, s.realization, s.frame_index - 1), -1) for s in samples]
        as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)
        return cls(
            past=as_t(past),
            current=as_t(np.stack([s.current_noisy for s in samples])),
            target_pose=as_t(np.stack([s.target_pose[out_idx] for s in samples])),
            target_distances=as_t(np.stack([s.target_distances[out_idx][:, out_idx] for s in samples])),
            prev_index=torch.as_tensor(prev, dtype=torch.long),
        )

    def batch(self, index):
        return self.past[index], self.current[index], self.target_pose[index], self.target_distances[index]


def build_dataset(sequences, spec, model_cfg, noise, realizations=1, seed=0):
    """Windowed samples from prepared sequences, with independent noise draws
    per sequence and realization."""
    samples = []
    n_real = realizations if noise.sigma > 0 else 1
    for sid, seq in enumerate(sequences):
        for r in range(n_real):
            draw_seed = int(np.random.SeedSequence([seed, noise.seed, sid, r]).generate_state(1)[0])
            cfg = NoiseConfig(noise.sigma, noise.window, draw_seed)
            samples.extend(make_samples(seq, spec, cfg, model_cfg.window, sequence_id=sid, realization=r))
    return TrainingSet.from_samples(samples, spec, model_cfg)


def teacher_forcing_batcher(samples, batch_size, seed, epochs=None):
    """Yield ``(epoch, indices)`` over shuffled epochs.

    ``samples`` may be a sized collection or a sample count. Each epoch is a
    seeded permutation split into batches; the last batch may be short.
    """
    n = samples if isinstance(samples, int) else len(samples)
    if n <= 0 or batch_size <= 0:
        raise InvalidInputError("need a non-empty dataset and a positive batch size")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([seed, epoch]).permutation(n)
        log.debug("epoch %d begins (%d samples)", epoch, n)
        for start in range(0, n, batch_size):
            yield epoch, order[start:start + batch_size]
        epoch += 1


@dataclass
class FreezeAudit:
    trainable: int
    total: int
    changed: list

    @property
    def unchanged_fraction(self):
        return 1.0 - self.trainable / self.total

    def line(self):
        return (
            f"freeze audit: trainable {self.trainable} / {self.total} parameters "
            f"({100.0 * self.trainable / self.total:.2f}%), frozen groups changed: {len(self.changed)}"
        )


@dataclass
class TrainResult:
    model: WiPModel
    log: list
    checkpoint: Path = None
    audit: FreezeAudit = None


def _layout(spec, model_cfg):
    if model_cfg.variant == "WiP-SI":
        ns = model_cfg.num_sparse
        return dict(anchor_indices=tuple(range(ns, ns + model_cfg.num_anchors)), bones=(), num_joints=ns)
    return dict(anchor_indices=spec.anchor_indices, bones=spec.bones, num_joints=spec.num_joints)


def _permute_batch(past, current, target_pose, target_distances, rng, model_cfg):
    perm = torch.as_tensor(random_permutation(model_cfg.j_in, rng, fixed=range(model_cfg.num_sparse, model_cfg.j_in)))
    past = past[..., perm, :][..., perm]
    current = current[..., perm, :][..., perm]
    return past, current, target_pose[:, perm], target_distances[:, perm][:, :, perm]


def _write_log(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _optimize(model, data, cfg, spec, stage, out_dir=None, tag="stage1", callback=None):
    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    layout = _layout(spec, model.cfg)
    anchor_targets = torch.as_tensor(spec.anchor_targets, dtype=torch.float32)
    pool = np.arange(len(data))
    if stage == 2:
        pool = pool[data.prev_index.numpy() >= 0]
    batches = teacher_forcing_batcher(len(pool), cfg.batch_size, cfg.seed)
    perm_rng = np.random.default_rng([cfg.seed, 17])
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    last_good = copy.deepcopy(model.state_dict())
    started = time.perf_counter()
    model.train()
    for step in range(1, cfg.total_steps + 1):
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        epoch, picked = next(batches)
        index = torch.as_tensor(pool[picked])
        if stage == 2:
            index = torch.cat([index, data.prev_index[index]])
        past, current, target_pose, target_d = data.batch(index)
        if model.cfg.variant == "WiP-SI":
            past, current, target_pose, target_d = _permute_batch(past, current, target_pose, target_d, perm_rng, model.cfg)
        pose, dist = model(past, current)
        velocity = None
        b = len(picked)
        if stage == 2:
            velocity = (torch.stack([pose[b:], pose[:b]], 1), torch.stack([target_pose[b:], target_pose[:b]], 1))
        report = total_loss(
            pose, dist, target_d, cfg.weights, stage=stage, anchor_targets=anchor_targets,
            velocity=velocity, per_sample=len(index), **layout,
        )
        if not torch.isfinite(report.total):
            model.load_state_dict(last_good)
            path = None
            if out_dir:
                path = out_dir / f"{tag}_last_good.pt"
                save_checkpoint(model, path, tag, {"aborted_at": step})
            err = NumericError(f"non-finite loss at step {step}")
            err.checkpoint = path
            raise err
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        out_of_time = cfg.max_seconds and time.perf_counter() - started > cfg.max_seconds
        stop = False
        if step == 1 or step % cfg.log_every == 0 or step == cfg.total_steps or out_of_time:
            row = {"step": step, "epoch": epoch, "lr": lr, **report.as_floats()}
            rows.append(row)
            last_good = copy.deepcopy(model.state_dict())
            if callback:
                # a callback returning True ends training early
                model.eval()
                stop = bool(callback(row))
                model.train()
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"{tag}_step{step}.pt", tag)
        if stop or out_of_time:
            log.info("%s stopped at step %d", tag, step)
            break
    model.eval()
    if out_dir:
        _write_log(rows, out_dir / f"{tag}_loss.csv")
    return rows


def train_stage1(model, data, cfg, spec, out_dir=None, callback=None):
    """Distance-to-motion training on clean, teacher-forced samples."""
    if model.cfg.stj_sa:
        raise InvalidInputError("stage 1 expects a model without STJ-SA layers")
    rows = _optimize(model, data, cfg, spec, stage=1, out_dir=out_dir, tag="stage1", callback=callback)
    path = None
    if out_dir:
        path = Path(out_dir) / "stage1.pt"
        save_checkpoint(model, path, "stage1", {"train_config": cfg.to_dict()})
    return TrainResult(model=model, log=rows, checkpoint=path)


def freeze_for_stage2(model):
    for name, p in model.named_parameters():
        p.requires_grad_(is_stage2_trainable(name))


def train_stage2(stage1, data, cfg, spec, out_dir=None, callback=None):
    """Denoising fine-tune of a stage-1 model or checkpoint path.

    A deep copy is trained; the input model is left untouched. Raises
    :class:`FreezeAuditError` if any frozen parameter changed.
    """
    if isinstance(stage1, (str, Path)):
        model, payload = load_checkpoint(stage1)
        if payload["stage"] != "stage1":
            raise InvalidInputError("stage 2 must start from a stage-1 checkpoint")
    else:
        model = copy.deepcopy(stage1)
    torch.manual_seed(cfg.seed)
    model.add_stj_sa()
    freeze_for_stage2(model)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    rows = _optimize(model, data, cfg, spec, stage=2, out_dir=out_dir, tag="stage2", callback=callback)
    params = dict(model.named_parameters())
    changed = [n for n, before in frozen.items() if not torch.equal(before, params[n].detach())]
    total = model.parameter_count()
    audit = FreezeAudit(trainable=total - sum(t.numel() for t in frozen.values()), total=total, changed=changed)
    log.info(audit.line())
    if changed:
        raise FreezeAuditError(f"frozen parameters changed: {changed[:5]}")
    for p in model.parameters():
        p.requires_grad_(True)
    path = None
    if out_dir:
        path = Path(out_dir) / "stage2.pt"
        save_checkpoint(model, path, "stage2", {"train_config": cfg.to_dict(), "freeze_audit": audit.line()})
    return TrainResult(model=model, log=rows, checkpoint=path, audit=audit)


__all__ = [
    "TrainConfig", "TrainingSet", "TrainResult", "FreezeAudit", "build_dataset",
    "teacher_forcing_batcher", "train_stage1", "train_stage2", "lr_at", "TERMS",
]
