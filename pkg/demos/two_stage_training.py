"""Small two-stage training run from Python.

Stage 1 learns distances-to-pose on clean clips with teacher forcing;
stage 2 adds spatio-temporal attention, freezes everything except the
cross-attention and the new layers, and fine-tunes on noisy measurements.
Both models are then run autoregressively on a held-out noisy clip.

    python3 demos/two_stage_training.py --steps1 1500 --steps2 500
"""

import argparse
import time

import torch

from pwdmocap.dataio import prepare, sparse_stream
from pwdmocap.edm import NoiseConfig, corrupt
from pwdmocap.inference import PoseGenerator, measure_throughput
from pwdmocap.metrics import evaluate
from pwdmocap.model import ModelConfig, WiPModel
from pwdmocap.skeleton import human_skeleton
from pwdmocap.synth import generate_synthetic
from pwdmocap.training import TrainConfig, build_dataset, train_stage1, train_stage2


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps1", type=int, default=1500)
    parser.add_argument("--steps2", type=int, default=500)
    parser.add_argument("--sigma", type=float, default=0.15)
    parser.add_argument("--out", default=None, help="directory for checkpoints and loss logs")
    args = parser.parse_args()

    torch.set_num_threads(1)
    spec = human_skeleton()
    clips = [prepare(generate_synthetic(k, 10.0, 60.0, seed=s), spec)
             for k, s in [("walk", 1), ("walk", 2), ("figure8", 1), ("arm_swing", 1)]]
    test = prepare(generate_synthetic("walk", 10.0, 60.0, seed=100), spec)
    cfg = ModelConfig(dropout=0.0)

    torch.manual_seed(0)
    model = WiPModel(cfg)
    print(f"model: {model.parameter_count()} parameters, d_model {cfg.d_model}")
    started = time.perf_counter()
    show = lambda row: print(f"  step {row['step']:>5d}  loss {row['total']:.4f}  pd {row['pd']:.4f}")
    print("stage 1")
    train_stage1(model, build_dataset(clips, spec, cfg, NoiseConfig(0.0, 1)),
                 TrainConfig(stage=1, warmup_steps=100, total_steps=args.steps1, learning_rate=1e-3,
                             batch_size=16, log_every=250), spec, args.out, show)
    print("stage 2")
    noisy_data = build_dataset(clips, spec, cfg, NoiseConfig(args.sigma, 5), realizations=2)
    result = train_stage2(model, noisy_data,
                          TrainConfig(stage=2, warmup_steps=50, total_steps=args.steps2, learning_rate=1e-3,
                                      batch_size=8, log_every=100), spec, args.out, show)
    print(result.audit.line())
    print(f"training took {time.perf_counter() - started:.0f} s")

    stream = corrupt(sparse_stream(test, spec), NoiseConfig(args.sigma, 5, seed=7))
    for name, m in (("stage 1", model), ("stage 2", result.model)):
        gen = PoseGenerator(m, spec)
        report = evaluate(gen.run(stream), test.frames, spec, test.fps, test.scale)
        fps = measure_throughput(gen, stream[:120])
        print(f"{name}: PE {report.PE:.1f} cm  EEE {report.EEE:.1f} cm  AJE {report.AJE:.2f}  "
              f"GSE {report.GSE:.1f} cm  {fps:.0f} frames/s")


if __name__ == "__main__":
    main()
