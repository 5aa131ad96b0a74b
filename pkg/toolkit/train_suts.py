"""
Reference SUT Training — one-time setup, never part of an evaluation run.

Trains every registered SUT with the fixed recipe (SGD with momentum, batch
16, lr 1e-3, 2000 steps, 1000 real-style renders with photometric jitter,
seed 42) and writes the frozen MFWT weights named in registry.yaml.

Usage:
    python train_suts.py                  # Train all enabled SUTs
    python train_suts.py steer            # Train only the steering SUT
    python train_suts.py da ll --steps 500
"""

import argparse
import os
import sys

import numpy as np
from dotenv import load_dotenv

from numerics import Rng
from pipeline import weights_path
from run_dff import load_registry
from scene_gen import GeneratorKnobs, post_process, render_masks, render_real, sample_scenario_grid
from sut import build_sut, forward_batch, load_weights, save_weights
from toolkit_utils import banner, print_result

load_dotenv()

TRAIN_SEED = 42
TRAIN_STEPS = 2000
BATCH_SIZE = 16
LEARNING_RATE = 1e-3
MOMENTUM = 0.9
TRAIN_SCENES = 1000
GRAD_CLIP = 5.0

# positive-class weight in the BCE loss; lane dividers cover few pixels
POS_WEIGHT = {"drivable": 1.0, "lane": 4.0}


def label_for(sd, target):
    drivable, lane, angle = render_masks(sd)
    if target == "steering":
        return np.array(angle)
    if target == "drivable":
        return drivable.astype(np.float64)
    if target == "lane":
        return lane.astype(np.float64)
    raise ValueError(f"unknown training target {target!r}")


def jitter(img, rng):
    """Photometric augmentation reusing the generator's post-processing."""
    knobs = GeneratorKnobs(
        contrast=rng.uniform(0.8, 1.25),
        brightness=rng.uniform(-0.1, 0.1),
        blur_radius=rng.uniform(0.0, 1.0) if rng.uniform() < 0.5 else 0.0,
    )
    return post_process(img, knobs)


def make_batch(scenes, real_seeds, target, rng, batch=BATCH_SIZE, augment=True):
    idx = rng.integers(0, len(scenes), size=batch)
    xs, ys = [], []
    for j, i in enumerate(idx):
        img = render_real(scenes[i], Rng(real_seeds[i]))
        xs.append(jitter(img, rng.substream("jitter", j)) if augment else img)
        ys.append(label_for(scenes[i], target))
    return np.stack(xs), np.stack(ys)


def loss_and_grad(raw, labels, target):
    """Loss and d loss / d raw output for a batch (MSE for angles, weighted BCE for masks)."""
    if target == "steering":
        diff = raw[:, 0] - labels
        return float(np.mean(diff ** 2)), (2.0 * diff / len(diff))[:, None]
    logits = raw[:, 0]
    pos = POS_WEIGHT[target]
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
    weight = np.where(labels > 0.5, pos, 1.0)
    log_p = -np.logaddexp(0.0, -logits)
    log_not_p = -np.logaddexp(0.0, logits)
    loss = -np.mean(weight * (labels * log_p + (1.0 - labels) * log_not_p))
    grad = weight * (prob - labels) / logits.size
    return float(loss), grad[:, None]


def train_reference_sut(key, entry, steps=TRAIN_STEPS, seed=TRAIN_SEED, scenes=TRAIN_SCENES,
                        lr=LEARNING_RATE, verbose=True):
    """Fixed training recipe; returns the frozen SUT."""
    root = Rng(seed)
    sut = build_sut(entry["kind"], root.substream("init", key), name=key)
    scenarios = sample_scenario_grid(scenes, root.substream("train-scenes"))
    real_seeds = [root.substream("train-real", i).seed for i in range(scenes)]
    velocity = [[np.zeros_like(p) for p in layer.params()] for layer in sut.layers]

    for step in range(1, steps + 1):
        step_rng = root.substream("batch", step)
        xs, ys = make_batch(scenarios, real_seeds, entry["target"], step_rng)
        raw, _, caches = sut.run(sut.to_batch(xs), keep_caches=True)
        loss, grad = loss_and_grad(raw, ys, entry["target"])
        _, param_grads = sut.backward(caches, grad.reshape(raw.shape), want_params=True)

        norm = np.sqrt(sum(float(np.sum(g * g)) for grads in param_grads for g in grads))
        scale = min(1.0, GRAD_CLIP / norm) if norm > 0 else 1.0
        for layer, grads, vel in zip(sut.layers, param_grads, velocity):
            if not grads:
                continue
            updated = []
            for i, (p, g) in enumerate(zip(layer.params(), grads)):
                vel[i] = MOMENTUM * vel[i] - lr * scale * g
                updated.append(p + vel[i])
            layer.set_params(updated)

        if verbose and (step % 100 == 0 or step == steps):
            print(f"  step {step}/{steps}  loss={loss:.5f}")

    return sut.freeze()


def evaluate_reference_sut(sut, target, n=100, seed=1234):
    """Held-out quality: mean |angle error| (steering) or mean IoU (masks)."""
    root = Rng(seed)
    scenarios = sample_scenario_grid(n, root.substream("eval-scenes"))
    xs = np.stack([render_real(sd, root.substream("eval-real", i)) for i, sd in enumerate(scenarios)])
    ys = np.stack([label_for(sd, target) for sd in scenarios])
    outputs = np.concatenate([forward_batch(sut, xs[i:i + 16]) for i in range(0, n, 16)])
    if target == "steering":
        return float(np.mean(np.abs(outputs - ys)))
    pred = outputs > 0
    truth = ys > 0.5
    union = np.logical_or(pred, truth).sum(axis=(1, 2))
    inter = np.logical_and(pred, truth).sum(axis=(1, 2))
    return float(np.mean(np.where(union > 0, inter / np.maximum(union, 1), 1.0)))


def main(argv=None):
    parser = argparse.ArgumentParser(description="Train the reference SUTs once and freeze their weights.")
    parser.add_argument("keys", nargs="*", help="SUT keys from registry.yaml (default: all enabled)")
    parser.add_argument("--steps", type=int, default=TRAIN_STEPS)
    parser.add_argument("--scenes", type=int, default=TRAIN_SCENES)
    parser.add_argument("--weights-dir", default=None, help="Override the weights directory")
    args = parser.parse_args(argv)

    registry = load_registry()
    keys = args.keys or [k for k, v in registry.items() if v.get("enabled", True)]
    unknown = [k for k in keys if k not in registry]
    if unknown:
        print(f"ERROR: unknown SUT key(s): {', '.join(unknown)}", file=sys.stderr)
        return 1

    for key in keys:
        entry = registry[key]
        banner(f"Training: {entry['name']} ({key})")
        trained = train_reference_sut(key, entry, steps=args.steps, scenes=args.scenes)
        path = weights_path(entry, args.weights_dir)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_weights(trained, path)
        # score the weights as stored (float32)
        sut = load_weights(path)
        quality = evaluate_reference_sut(sut, entry["target"])
        metric = "mae_rad" if entry["target"] == "steering" else "mean_iou"
        print(f"  {metric}={quality:.4f}  -> {path}")
        print_result("train", "ok", 1, sut=key, **{metric: round(quality, 6)}, checksum=f"{sut.checksum():08x}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
