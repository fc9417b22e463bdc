"""Optimization loop: batches of (cached caption embedding, image) pairs,
one of the two alignment losses, Adam with decoupled weight decay, linear
warmup into cosine LR decay.

Only the image encoder, projection head, and (optionally) the temperature
receive optimizer state; caption embeddings come straight from the cache and
are never touched. Training state is float32 end to end and the shuffle order
is a pure function of (seed, epoch), so a run can be stopped at any checkpoint
and resumed bit-exactly, and two runs with the same seed produce identical
metrics files when given the same clock.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import vision
from .cache import EmbeddingCache
from .container import load_arrays, save_arrays
from .errors import ConfigError, NumericError, RangeError, UnknownIdError
from .losses import (
    INIT_LOG_SCALE,
    AlignedBatch,
    LossResult,
    Temperature,
    contrastive_loss,
    cosine_loss,
)
from .vision import EncoderParams, ViTConfig, init_params

LOSS_KINDS = ("contrastive", "cosine")

METRICS_HEADER = "step,lr,loss,wall_ms"

_TEMP_KEY = "temperature.log_scale"


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    warmup_steps: int = 500
    peak_lr: float = 1e-3
    weight_decay: float = 0.2
    batch_size: int = 64
    loss_kind: str = "contrastive"
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_epsilon: float = 1e-8
    learn_temperature: bool = True
    init_log_scale: float = INIT_LOG_SCALE

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}"
            )
        if not self.peak_lr > 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ConfigError("adam_epsilon must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class DatasetManifest:
    """Pairs of (caption_id, image locator) plus the image source that
    resolves locators and the seed driving per-epoch shuffles."""

    entries: list  # (caption_id, locator) tuples
    image_source: object
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("manifest has no entries")

    def caption_ids(self) -> list:
        return [cid for cid, _ in self.entries]


@dataclass
class TrainState:
    step: int
    params: EncoderParams
    adam_m: dict
    adam_v: dict
    temperature: Temperature
    temp_m: np.float32
    temp_v: np.float32
    loss_history: list = field(default_factory=list)
    last_similarity_evals: int = 0


def init_state(vit_config: ViTConfig, config: TrainConfig) -> TrainState:
    params = init_params(vit_config, seed=config.seed)
    zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    return TrainState(
        step=0,
        params=params,
        adam_m=zeros,
        adam_v={k: np.zeros_like(v) for k, v in params.arrays.items()},
        # float32 from the start: updates and checkpoints round-trip the
        # scalar through float32, so a zero-lr step must be a bitwise no-op
        temperature=Temperature(float(np.float32(config.init_log_scale)),
                                config.learn_temperature),
        temp_m=np.float32(0.0),
        temp_v=np.float32(0.0),
    )


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup from peak_lr/warmup_steps, then cosine decay to zero."""
    if not 0 <= step < config.total_steps:
        raise RangeError(f"step {step} outside [0, {config.total_steps})")
    if step < config.warmup_steps:
        return config.peak_lr * (step + 1) / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def epoch_permutation(shuffle_seed: int, epoch: int, n: int) -> np.ndarray:
    """Stateless per-epoch shuffle: a pure function of (seed, epoch), so any
    step's batch indices can be recomputed without replaying prior steps."""
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_indices_for_step(config: TrainConfig, manifest: DatasetManifest, step: int):
    per_epoch = len(manifest.entries) // config.batch_size
    if per_epoch == 0:
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds dataset size {len(manifest.entries)}"
        )
    epoch, slot = divmod(step, per_epoch)
    perm = epoch_permutation(manifest.shuffle_seed, epoch, len(manifest.entries))
    return perm[slot * config.batch_size : (slot + 1) * config.batch_size]


def make_batch(manifest: DatasetManifest, cache: EmbeddingCache, params: EncoderParams,
               indices) -> AlignedBatch:
    """Assemble one aligned batch: gather frozen caption embeddings by id,
    load and encode the paired images, keep the pixels for the backward pass."""
    chosen = [manifest.entries[int(i)] for i in indices]
    ids = [cid for cid, _ in chosen]
    text = cache.batch_gather(ids)
    images = np.stack([manifest.image_source.load(loc) for _, loc in chosen])
    image_embeds = vision.forward(params, images)
    return AlignedBatch(text, image_embeds, ids, images=images)


def _decayed(name: str) -> bool:
    # weight matrices, the class token, and positional embeddings decay;
    # biases, layer-norm scales/offsets, and the temperature never do
    return name.endswith(".weight") or name in ("cls_token", "pos_embed")


def _adam_update(p, g, m, v, lr, config: TrainConfig, t: int, decay: bool):
    b1 = np.float32(config.adam_beta1)
    b2 = np.float32(config.adam_beta2)
    one = np.float32(1.0)
    m[...] = b1 * m + (one - b1) * g
    v[...] = b2 * v + (one - b2) * (g * g)
    mhat = m / np.float32(1.0 - config.adam_beta1**t)
    vhat = v / np.float32(1.0 - config.adam_beta2**t)
    step_term = mhat / (np.sqrt(vhat) + np.float32(config.adam_epsilon))
    if decay:
        step_term = step_term + np.float32(config.weight_decay) * p
    p[...] = p - np.float32(lr) * step_term


def evaluate_loss(state: TrainState, batch: AlignedBatch, config: TrainConfig) -> LossResult:
    if config.loss_kind == "contrastive":
        return contrastive_loss(batch, state.temperature)
    return cosine_loss(batch)


def train_step(state: TrainState, batch: AlignedBatch, config: TrainConfig) -> TrainState:
    """One optimizer update, in place; returns the same state object.

    The forward pass is recomputed from batch.images (caching intermediate
    activations), so the gradients always match the parameters currently in
    state even if batch.image_embeds was built earlier.
    """
    if batch.images is None:
        raise ConfigError("train_step needs batch.images to backpropagate")
    lr = lr_at(config, state.step)

    out, fwd_cache = vision._forward_cached(state.params, batch.images)
    live = AlignedBatch(batch.text_embeds, out, batch.ids, images=None)
    result = evaluate_loss(state, live, config)
    if not math.isfinite(result.loss):
        raise NumericError(f"loss is non-finite at step {state.step}")
    grads = vision._backward_from_cache(
        state.params, fwd_cache, result.image_embed_grad.astype(out.dtype)
    )

    t = state.step + 1
    for name, p in state.params.arrays.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
        _adam_update(p, g, state.adam_m[name], state.adam_v[name], lr, config, t,
                     decay=_decayed(name))

    if result.log_scale_grad is not None and state.temperature.learnable:
        g = np.float32(result.log_scale_grad)
        if not np.isfinite(g):
            raise NumericError(f"non-finite gradient for log_scale at step {state.step}")
        s = np.array(state.temperature.log_scale, dtype=np.float32)
        m = np.array(state.temp_m, dtype=np.float32)
        v = np.array(state.temp_v, dtype=np.float32)
        _adam_update(s, g, m, v, lr, config, t, decay=False)
        state.temp_m = np.float32(m)
        state.temp_v = np.float32(v)
        state.temperature = state.temperature.updated(float(np.float32(s)))

    state.step += 1
    state.loss_history.append(result.loss)
    state.last_similarity_evals = result.similarity_evals
    return state


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str, state: TrainState, config: TrainConfig) -> None:
    meta = {
        "kind": "train-checkpoint",
        "step": state.step,
        "vit_config": dataclasses.asdict(state.params.config),
        "train_config": dataclasses.asdict(config),
        "temperature": {
            "learnable": state.temperature.learnable,
            "clamp_max": state.temperature.clamp_max,
        },
    }
    arrays = {}
    for k, v in state.params.arrays.items():
        arrays["param." + k] = v
    for k, v in state.adam_m.items():
        arrays["adam_m." + k] = v
    for k, v in state.adam_v.items():
        arrays["adam_v." + k] = v
    arrays[_TEMP_KEY] = np.array(state.temperature.log_scale, dtype=np.float32)
    arrays["temperature.adam_m"] = np.array(state.temp_m, dtype=np.float32)
    arrays["temperature.adam_v"] = np.array(state.temp_v, dtype=np.float32)
    save_arrays(path, meta, arrays)


def load_checkpoint(path: str):
    """Returns (state, vit_config, train_config_dict)."""
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "train-checkpoint":
        raise ConfigError(f"{path!r} is not a training checkpoint")
    vit_config = ViTConfig(**meta["vit_config"])
    params = {}
    adam_m = {}
    adam_v = {}
    for key, arr in arrays.items():
        if key.startswith("param."):
            params[key[len("param."):]] = arr
        elif key.startswith("adam_m.") and key != "temperature.adam_m":
            adam_m[key[len("adam_m."):]] = arr
        elif key.startswith("adam_v.") and key != "temperature.adam_v":
            adam_v[key[len("adam_v."):]] = arr
    temp_meta = meta.get("temperature", {})
    state = TrainState(
        step=int(meta["step"]),
        params=EncoderParams(vit_config, params),
        adam_m=adam_m,
        adam_v=adam_v,
        temperature=Temperature(
            float(arrays[_TEMP_KEY]),
            bool(temp_meta.get("learnable", True)),
            float(temp_meta.get("clamp_max", 100.0)),
        ),
        temp_m=np.float32(arrays["temperature.adam_m"]),
        temp_v=np.float32(arrays["temperature.adam_v"]),
    )
    return state, vit_config, meta.get("train_config", {})


# --- the loop --------------------------------------------------------------------


def _format_metrics_row(step: int, lr: float, loss: float, wall_ms: float) -> str:
    return f"{step},{lr:.12g},{loss:.12g},{wall_ms:.3f}"


def run(
    manifest: DatasetManifest,
    cache: EmbeddingCache,
    config: TrainConfig,
    vit_config: ViTConfig = None,
    out_dir: str = None,
    resume_from: str = None,
    clock=None,
):
    """Train for config.total_steps steps. Writes metrics.csv and checkpoints
    into out_dir; returns (final TrainState, metrics path).

    clock is an injectable zero-argument callable returning seconds; it only
    feeds the wall_ms metrics column, so tests can pin it for byte-identical
    logs. Resuming from a checkpoint replays the exact remaining schedule:
    step -> batch indices is stateless, and state is float32 round-tripped.
    """
    if out_dir is None:
        raise ConfigError("run needs an output directory")
    os.makedirs(out_dir, exist_ok=True)
    if clock is None:
        clock = time.perf_counter

    missing = sorted(set(manifest.caption_ids()) - set(int(i) for i in cache.ids()))
    if missing:
        raise UnknownIdError(missing)
    batch_indices_for_step(config, manifest, 0)  # validates batch_size vs dataset

    if resume_from is not None:
        state, ckpt_vit, _ = load_checkpoint(resume_from)
        if vit_config is not None and vit_config != ckpt_vit:
            raise ConfigError("vit_config disagrees with the checkpoint")
    else:
        if vit_config is None:
            raise ConfigError("run needs a vit_config when not resuming")
        state = init_state(vit_config, config)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        while state.step < config.total_steps:
            step = state.step
            indices = batch_indices_for_step(config, manifest, step)
            batch = make_batch(manifest, cache, state.params, indices)
            t0 = clock()
            state = train_step(state, batch, config)
            wall_ms = (clock() - t0) * 1000.0
            lr = lr_at(config, step)
            metrics.write(_format_metrics_row(step, lr, state.loss_history[-1], wall_ms) + "\n")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{state.step:06d}.ckpt"), state, config
                )
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), state, config)
    return state, metrics_path
