"""
DFF-guided generator calibration.

A small calibrator network C_eta maps the synthetic context (x_s_init
summary features + encoded scenario) to continuous knob offsets; the
discrete seed is searched separately by a population argmin (ES). Training
minimises

    L_total = L_recon + beta * L_ov + lambda_dff * L_dff

where L_dff is refreshed every dff_every steps and held in between. Knob
gradients come from finite differences through the renderer only; the SUT
is never differentiated with respect to its weights and never changes.

The calibrator weights are updated with Adam by default; optimizer = sgd
switches to plain SGD at the same per-knob learning rates.

Checkpoint (.mfck): b"MFCK", 12-byte config hash, u64 step, u64 root seed,
f64 held L_dff, u32 pair count + u64 seed per pair, u32 tensor count, then
per tensor u32 ndim, u32 dims, float32 values; trailing CRC32.
"""

import csv
import io
import os
import struct
from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from cf_explainer import CfConfig, MapCache, decisive_map, dff_distance
from fidelity import ov_distance_and_score
from numerics import check_image, gradient_magnitude, mse, pool_to_grid, to_gray
from scene_gen import CONTINUOUS_KNOBS, KNOB_HIGH, KNOB_LOW, GeneratorKnobs, render_synthetic
from sut import forward
from toolkit_utils import (ContractViolation, CorruptFileError, DimensionError, NumericError,
                           atomic_write_bytes, atomic_write_text, provenance_line, read_csv_rows, seal, short_hash,
                           unseal)

CHECKPOINT_MAGIC = b"MFCK"
FEATURE_GRID = 4
N_FEATURES = 2 * FEATURE_GRID * FEATURE_GRID + 6
HIDDEN = 16
N_KNOBS = len(CONTINUOUS_KNOBS)
LOG_FIELDS = ("step", "l_recon", "l_ov", "l_dff", "l_total", "knobs")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CalibrationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    total_steps: int = Field(2000, ge=1)
    beta: float = Field(0.3, ge=0)
    lambda_dff: float = Field(0.08, ge=0)
    dff_every: int = Field(3, ge=1)
    es_every: int = Field(50, ge=1)
    es_population: int = Field(32, ge=1)
    es_sigma: float = Field(0.1, gt=0)
    lr_primary: float = Field(5e-3, gt=0)
    lr_post: float = Field(1e-3, gt=0)
    fd_step: float = Field(1e-3, gt=0)
    # SPSA perturbation size for the DFF term, as a fraction of each knob range
    dff_perturbation: float = Field(0.05, gt=0)
    cf_k_cf: int = Field(8, ge=1)
    cf_steps: int = Field(30, ge=1)
    checkpoint_every: int = Field(100, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"

    def learning_rates(self):
        """Per-knob rates: style_strength uses lr_primary, post-operations lr_post."""
        return np.array([self.lr_primary if k == "style_strength" else self.lr_post for k in CONTINUOUS_KNOBS])

    def cf_profile(self, cf):
        return cf.model_copy(update={"k_cf": self.cf_k_cf, "steps": self.cf_steps})

    def config_hash(self):
        return short_hash(self.model_dump())


@dataclass(frozen=True)
class LossBreakdown:
    l_recon: float
    l_ov: float
    l_dff: float
    l_total: float
    dff_computed: bool


class TrainLogEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int
    l_recon: float
    l_ov: float
    l_dff: Optional[float] = None
    l_total: float
    knobs: str


# =============================================================================
# Losses
# =============================================================================

def combined_loss(x_s, x_r, sut, cfg, compute_dff, held_dff=0.0, cf=None, cache=None):
    """(L_recon, L_ov, L_dff, L_total); L_dff is the held value unless compute_dff."""
    x_s, x_r = check_image(x_s, "x_s"), check_image(x_r, "x_r")
    if x_s.shape != x_r.shape:
        raise DimensionError(f"x_s {x_s.shape} and x_r {x_r.shape} differ")
    l_recon = mse(x_s, x_r)
    l_ov, _ = ov_distance_and_score(sut.kind, forward(sut, x_s), forward(sut, x_r))
    l_dff = held_dff
    if compute_dff:
        profile = cfg.cf_profile(cf or CfConfig())
        l_dff = dff_distance(decisive_map(sut, x_r, profile, cache), decisive_map(sut, x_s, profile, cache))
    total = l_recon + cfg.beta * l_ov + cfg.lambda_dff * l_dff
    if not np.isfinite(total):
        raise NumericError("non-finite calibration loss")
    return LossBreakdown(l_recon, float(l_ov), float(l_dff), float(total), compute_dff)


def _base_loss(sd, knobs, x_r, out_r, sut, cfg):
    x_s = render_synthetic(sd, knobs)
    l_ov, _ = ov_distance_and_score(sut.kind, forward(sut, x_s), out_r)
    return mse(x_s, x_r) + cfg.beta * l_ov


def knob_gradient(sample, knobs, sut, cfg, rng, with_dff=False, cf=None, cache=None):
    """Knob-space gradient of the loss, by finite differences through the renderer.

    L_recon + beta * L_ov uses central differences per knob; on DFF steps the
    DFF term adds a two-sided simultaneous-perturbation estimate.
    """
    out_r = forward(sut, sample.x_r)
    values = knobs.continuous()
    span = KNOB_HIGH - KNOB_LOW
    grad = np.zeros(N_KNOBS)
    for k in range(N_KNOBS):
        plus, minus = values.copy(), values.copy()
        plus[k] += cfg.fd_step * span[k]
        minus[k] -= cfg.fd_step * span[k]
        k_plus, k_minus = knobs.with_continuous(plus), knobs.with_continuous(minus)
        width = k_plus.continuous()[k] - k_minus.continuous()[k]
        if width > 0:
            grad[k] = (_base_loss(sample.sd, k_plus, sample.x_r, out_r, sut, cfg)
                       - _base_loss(sample.sd, k_minus, sample.x_r, out_r, sut, cfg)) / width

    if with_dff and cfg.lambda_dff > 0:
        profile = cfg.cf_profile(cf or CfConfig())
        direction = np.where(rng.substream("spsa").uniform(size=N_KNOBS) < 0.5, -1.0, 1.0)
        k_plus = knobs.with_continuous(values + cfg.dff_perturbation * span * direction)
        k_minus = knobs.with_continuous(values - cfg.dff_perturbation * span * direction)
        map_r = decisive_map(sut, sample.x_r, profile, cache)
        d_plus = dff_distance(map_r, decisive_map(sut, render_synthetic(sample.sd, k_plus), profile, cache))
        d_minus = dff_distance(map_r, decisive_map(sut, render_synthetic(sample.sd, k_minus), profile, cache))
        widths = k_plus.continuous() - k_minus.continuous()
        safe = np.where(widths != 0, widths, 1.0)
        grad += cfg.lambda_dff * np.where(widths != 0, (d_plus - d_minus) / safe, 0.0)

    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite knob gradient")
    return grad


# =============================================================================
# Optimiser steps
# =============================================================================

def sgd_step(knobs, grad, cfg):
    """One projected SGD step on the continuous knobs; the seed is untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (N_KNOBS,) or not np.all(np.isfinite(grad)):
        raise NumericError(f"knob gradient must be {N_KNOBS} finite values, got {grad}")
    return knobs.with_continuous(knobs.continuous() - cfg.learning_rates() * grad)


def es_candidates(knobs, rng, population=32):
    """Incumbent seed first, then population - 1 candidate seeds from the rng."""
    drawn = rng.substream("es-candidates").integers(0, 2 ** 63, size=max(population - 1, 0))
    return [knobs.seed] + [int(s) for s in drawn]


def es_step(sd, knobs, fitness, rng, population=32, sigma=0.1):
    """Population argmin over seeds, ties to the incumbent.

    Every candidate is evaluated at the same sigma-jittered continuous knobs,
    so only the seed differs between them.
    """
    seeds = es_candidates(knobs, rng, population)
    jitter = rng.substream("es-jitter").normal(size=N_KNOBS)
    jittered = knobs.with_continuous(knobs.continuous() + sigma * jitter * (KNOB_HIGH - KNOB_LOW))
    scores = [fitness(sd, jittered.with_seed(seed)) for seed in seeds]
    return knobs.with_seed(seeds[int(np.argmin(scores))])


# =============================================================================
# Calibrator network
# =============================================================================

@dataclass
class CalibratorParams:
    """eta: float32 weights of a 38 -> 16 (tanh) -> 5 network."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def initial(cls, rng):
        # zero output layer: the untrained calibrator reproduces knobs_init
        w1 = rng.normal(0.0, 1.0 / np.sqrt(N_FEATURES), size=(HIDDEN, N_FEATURES))
        return cls(w1.astype(np.float32), np.zeros(HIDDEN, np.float32),
                   np.zeros((N_KNOBS, HIDDEN), np.float32), np.zeros(N_KNOBS, np.float32))

    def checksum(self):
        return short_hash(b"".join(t.astype("<f4").tobytes() for t in self.tensors()))


def calibrator_features(x_s_init, sd):
    """4x4 pooled intensity + 4x4 pooled gradient magnitude of x_s_init, plus the SD encoding."""
    gray = to_gray(x_s_init)
    intensity = pool_to_grid(gray, FEATURE_GRID).ravel() - 0.5
    edges = 10.0 * pool_to_grid(gradient_magnitude(gray), FEATURE_GRID).ravel()
    return np.concatenate([intensity, edges, sd.encode()])


def _init_logits(knobs_init):
    unit = (knobs_init.continuous() - KNOB_LOW) / (KNOB_HIGH - KNOB_LOW)
    return np.arctanh(np.clip(2.0 * unit - 1.0, -1.0 + 1e-6, 1.0 - 1e-6))


def _forward_calibrator(params, features, knobs_init):
    w1, b1, w2, b2 = (t.astype(np.float64) for t in params.tensors())
    hidden = np.tanh(w1 @ features + b1)
    offsets = w2 @ hidden + b2
    squashed = np.tanh(_init_logits(knobs_init) + offsets)
    values = KNOB_LOW + (KNOB_HIGH - KNOB_LOW) * (squashed + 1.0) / 2.0
    return values, (features, hidden, squashed)


def _backward_calibrator(params, cache, grad_values):
    features, hidden, squashed = cache
    grad_offsets = grad_values * (KNOB_HIGH - KNOB_LOW) / 2.0 * (1.0 - squashed ** 2)
    w2 = params.w2.astype(np.float64)
    grad_hidden = (w2.T @ grad_offsets) * (1.0 - hidden ** 2)
    return [np.outer(grad_hidden, features), grad_hidden, np.outer(grad_offsets, hidden), grad_offsets]


def predict_knobs(params, context):
    """Theta* = C_eta(x_s_init, SD); continuous knobs always inside their bounds."""
    values, _ = _forward_calibrator(params, calibrator_features(context.x_s_init, context.sd), context.knobs_init)
    return context.knobs_init.with_continuous(values)


def apply_calibrator(params, context):
    """x_s* = render_synthetic(SD, C_eta(x_s_init, SD)); sees only the synthetic context."""
    return render_synthetic(context.sd, predict_knobs(params, context))


class _Optimizer:
    """Adam or plain SGD over the calibrator tensors with per-tensor learning-rate arrays.

    Adam moments are kept in float32; they stay zero under SGD.
    """

    def __init__(self, params, cfg):
        lr = cfg.learning_rates()
        self.kind = cfg.optimizer
        self.rates = [np.full((HIDDEN, N_FEATURES), cfg.lr_post), np.full(HIDDEN, cfg.lr_post),
                      np.repeat(lr[:, None], HIDDEN, axis=1), lr.copy()]
        self.m = [np.zeros_like(t) for t in params.tensors()]
        self.v = [np.zeros_like(t) for t in params.tensors()]

    def step(self, params, grads, t):
        if self.kind == "sgd":
            return CalibratorParams(*[(p.astype(np.float64) - rate * g).astype(np.float32)
                                      for p, rate, g in zip(params.tensors(), self.rates, grads)])
        updated = []
        for i, (p, g) in enumerate(zip(params.tensors(), grads)):
            m = ADAM_BETA1 * self.m[i].astype(np.float64) + (1 - ADAM_BETA1) * g
            v = ADAM_BETA2 * self.v[i].astype(np.float64) + (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1 ** t)
            v_hat = v / (1 - ADAM_BETA2 ** t)
            new = p.astype(np.float64) - self.rates[i] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            self.m[i], self.v[i] = m.astype(np.float32), v.astype(np.float32)
            updated.append(new.astype(np.float32))
        return CalibratorParams(*updated)


# =============================================================================
# Checkpoints and logs
# =============================================================================

@dataclass
class TrainingState:
    config_hash: str
    step: int
    root_seed: int
    held_dff: float
    seeds: List[int]
    params: CalibratorParams
    adam_m: List[np.ndarray]
    adam_v: List[np.ndarray]


def encode_checkpoint(state):
    tensors = state.params.tensors() + list(state.adam_m) + list(state.adam_v)
    parts = [
        state.config_hash.encode().ljust(12)[:12],
        struct.pack("<QQd", state.step, state.root_seed, state.held_dff),
        struct.pack("<I", len(state.seeds)),
        np.asarray(state.seeds, dtype="<u8").tobytes(),
        struct.pack("<I", len(tensors)),
    ]
    for t in tensors:
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return seal(CHECKPOINT_MAGIC, b"".join(parts))


def decode_checkpoint(data, path="<bytes>"):
    body = unseal(data, CHECKPOINT_MAGIC, path)
    try:
        config_hash = body[:12].decode().strip()
        step, root_seed, held_dff = struct.unpack_from("<QQd", body, 12)
        offset = 12 + 24
        (n_seeds,) = struct.unpack_from("<I", body, offset)
        offset += 4
        seeds = [int(s) for s in np.frombuffer(body, dtype="<u8", count=n_seeds, offset=offset)]
        offset += 8 * n_seeds
        (count,) = struct.unpack_from("<I", body, offset)
        offset += 4
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", body, offset)
            shape = struct.unpack_from(f"<{ndim}I", body, offset + 4)
            offset += 4 + 4 * ndim
            size = int(np.prod(shape))
            tensors.append(np.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32))
            offset += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CorruptFileError(f"{path}: malformed checkpoint ({e})")
    if count != 12:
        raise CorruptFileError(f"{path}: expected 12 tensors, found {count}")
    return TrainingState(config_hash, step, root_seed, held_dff, seeds,
                         CalibratorParams(*tensors[:4]), tensors[4:8], tensors[8:12])


def save_checkpoint(path, state):
    atomic_write_bytes(path, encode_checkpoint(state))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), path)


def format_log(entries, config_hash):
    buffer = io.StringIO()
    buffer.write(provenance_line(config_hash))
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for e in entries:
        writer.writerow([e.step, repr(e.l_recon), repr(e.l_ov), "" if e.l_dff is None else repr(e.l_dff),
                         repr(e.l_total), e.knobs])
    return buffer.getvalue()


def read_log(path):
    return [TrainLogEntry(step=int(row["step"]), l_recon=float(row["l_recon"]), l_ov=float(row["l_ov"]),
                          l_dff=float(row["l_dff"]) if row["l_dff"] else None,
                          l_total=float(row["l_total"]), knobs=row["knobs"])
            for row in read_csv_rows(path)]


# =============================================================================
# Training
# =============================================================================

def training_run_hash(dataset, sut, cfg, rng, cf):
    """Identity of a training run; a checkpoint only resumes or serves the run it came from."""
    return short_hash({"calibration": cfg.model_dump(), "cf": cf.model_dump(), "seed": rng.seed,
                       "pairs": [s.id for s in dataset], "sut": sut.name})


def train_calibrator(dataset, sut, cfg, rng, cf=None, checkpoint_path=None, log_path=None,
                     resume=True, cache=None, verbose=False, config_hash=None):
    """Train C_eta on calibration pairs; returns (params, log entries).

    With checkpoint_path set, state is written atomically every
    checkpoint_every steps and a matching checkpoint is resumed from.
    config_hash labels the training log; it defaults to the run identity.
    """
    if not dataset:
        raise ValueError("calibration dataset is empty")
    held_out = [s.id for s in dataset if s.split != "calibration"]
    if held_out:
        raise ValueError(f"train_calibrator only takes calibration pairs; got held-out {held_out[:3]}")
    cf = cf or CfConfig()
    cache = cache if cache is not None else MapCache()
    checksum = sut.checksum()
    run_hash = training_run_hash(dataset, sut, cfg, rng, cf)
    features = [calibrator_features(s.x_s_init, s.sd) for s in dataset]

    params = CalibratorParams.initial(rng.substream("calibrator-init"))
    optimizer = _Optimizer(params, cfg)
    seeds = [s.knobs_init.seed for s in dataset]
    held_dff = 0.0
    log = []
    start = 1

    if checkpoint_path and resume and os.path.exists(checkpoint_path):
        state = load_checkpoint(checkpoint_path)
        if state.config_hash != run_hash:
            raise ContractViolation(f"{checkpoint_path} belongs to a different run ({state.config_hash} != {run_hash})")
        params, optimizer.m, optimizer.v = state.params, state.adam_m, state.adam_v
        seeds, held_dff, start = list(state.seeds), state.held_dff, state.step + 1
        if log_path and os.path.exists(log_path):
            log = [e for e in read_log(log_path) if e.step <= state.step]
        if verbose:
            print(f"  Resuming from step {state.step}")

    def fitness(sd, knobs, sample):
        x_s = render_synthetic(sd, knobs)
        compute = cfg.lambda_dff > 0
        return combined_loss(x_s, sample.x_r, sut, cfg, compute, cf=cf, cache=cache).l_total

    def checkpoint(step):
        if checkpoint_path:
            save_checkpoint(checkpoint_path, TrainingState(run_hash, step, rng.seed, held_dff, seeds,
                                                           params, optimizer.m, optimizer.v))
        if log_path:
            atomic_write_text(log_path, format_log(log, config_hash or run_hash))

    for t in range(start, cfg.total_steps + 1):
        step_rng = rng.substream("calibration-step", t)
        i = int(step_rng.integers(0, len(dataset)))
        sample = dataset[i]
        values, fwd_cache = _forward_calibrator(params, features[i], sample.knobs_init)
        knobs = sample.knobs_init.with_continuous(values).with_seed(seeds[i])

        if t % cfg.es_every == 0:
            knobs = es_step(sample.sd, knobs, lambda sd, k: fitness(sd, k, sample), step_rng.substream("es"),
                            cfg.es_population, cfg.es_sigma)
            seeds[i] = knobs.seed

        compute_dff = t % cfg.dff_every == 0 and cfg.lambda_dff > 0
        losses = combined_loss(render_synthetic(sample.sd, knobs), sample.x_r, sut, cfg, compute_dff,
                               held_dff=held_dff, cf=cf, cache=cache)
        if compute_dff:
            held_dff = losses.l_dff

        grad = knob_gradient(sample, knobs, sut, cfg, step_rng, with_dff=compute_dff, cf=cf, cache=cache)
        params = optimizer.step(params, _backward_calibrator(params, fwd_cache, grad), t)

        log.append(TrainLogEntry(step=t, l_recon=losses.l_recon, l_ov=losses.l_ov,
                                 l_dff=losses.l_dff if compute_dff else None,
                                 l_total=losses.l_total, knobs=short_hash(knobs.model_dump())))
        if verbose and (t % 100 == 0 or t == cfg.total_steps):
            print(f"  step {t}/{cfg.total_steps}  L_total={losses.l_total:.5f}  L_dff(held)={held_dff:.5f}")
        if t % cfg.checkpoint_every == 0 or t == cfg.total_steps:
            checkpoint(t)

    if sut.checksum() != checksum:
        raise ContractViolation(f"{sut.name} weights changed during calibration")
    return params, log


def calibrate_knobs_direct(sample, sut, cfg, rng, steps=None, cf=None, cache=None):
    """Direct-Theta mode: optimise one pair's knobs in place, no calibrator network."""
    cf = cf or CfConfig()
    cache = cache if cache is not None else MapCache()
    checksum = sut.checksum()
    knobs = sample.knobs_init

    def fitness(sd, candidate):
        return combined_loss(render_synthetic(sd, candidate), sample.x_r, sut, cfg, cfg.lambda_dff > 0,
                             cf=cf, cache=cache).l_total

    for t in range(1, (steps or cfg.total_steps) + 1):
        step_rng = rng.substream("direct-step", t)
        if t % cfg.es_every == 0:
            knobs = es_step(sample.sd, knobs, fitness, step_rng.substream("es"), cfg.es_population, cfg.es_sigma)
        with_dff = t % cfg.dff_every == 0
        knobs = sgd_step(knobs, knob_gradient(sample, knobs, sut, cfg, step_rng, with_dff, cf, cache), cfg)

    if sut.checksum() != checksum:
        raise ContractViolation(f"{sut.name} weights changed during calibration")
    return knobs
