"""Behavior cloning: fit the policy to expert windows with AdamW.

Windows pair k+1 observation frames with the l+1 future actions taken from
the same timestep. Histories that would start before the episode are
left-padded by repeating the first frame; target chunks running past the
episode end are right-padded by repeating the final action.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig, init_params, pooled_features, save_checkpoint
from .decoders import ar_loss, flow_loss, train_tokenizer
from .envs import Dataset, evaluate_policy, load_dataset
from .numerics import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    warmup_iters: int = 200
    total_iters: int = 20000
    # Cosine horizon when training shorter than the schedule it was
    # designed for; None decays to zero exactly at total_iters.
    schedule_total: int | None = None
    batch: int = 16
    seed: int = 0
    decoder: str = "flow"
    eps: float = 1e-8
    eval_interval: int = 2000
    eval_trials: int = 20
    eval_seed: int = 1000
    early_stop_full: float = 100.0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters must be <= total_iters")
        if self.schedule_total is not None and self.schedule_total < self.total_iters:
            raise ValueError("schedule_total must be >= total_iters")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.decoder not in ("flow", "ar"):
            raise ValueError(f"unknown decoder {self.decoder!r}")


def finetune_preset(**overrides) -> TrainConfig:
    """Published fine-tuning values; the scratch-toy default lr is higher."""
    base = dict(lr=2.5e-5, betas=(0.9, 0.95), weight_decay=1e-10,
                warmup_iters=1000, total_iters=20000, batch=32)
    base.update(overrides)
    return TrainConfig(**base)


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> lr, then cosine decay lr -> 0 at the schedule
    horizon (schedule_total if set, else total_iters)."""
    horizon = cfg.schedule_total if cfg.schedule_total is not None else cfg.total_iters
    if it < 0 or it > horizon:
        raise ValueError(f"iter {it} outside [0, {horizon}]")
    if cfg.warmup_iters > 0 and it < cfg.warmup_iters:
        return cfg.lr * it / cfg.warmup_iters
    span = max(horizon - cfg.warmup_iters, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (it - cfg.warmup_iters) / span))


# ---------------------------------------------------------------------------
# Window sampling.

def sample_window(ds: Dataset, cfg: ModelConfig, rng: np.random.Generator):
    """One (frames, instruction, target chunk) training example.

    Uniform over (episode, t). Returns ((k+1, V, H, W, C) uint8, (L,) int64,
    (chunk_len, A) float64): the actions taken at t .. t+chunk_len-1.
    """
    if not ds.episodes:
        raise ValueError("empty dataset")
    ep = ds.episodes[rng.integers(len(ds.episodes))]
    t = int(rng.integers(len(ep.actions)))
    return window_at(ep, t, cfg)


def window_at(ep, t: int, cfg: ModelConfig):
    """The deterministic window anchored at timestep t (see sample_window)."""
    total = len(ep.actions)
    hist = [max(t - j, 0) for j in range(cfg.history_len, 0, -1)]
    frame_idx = hist + [t]
    chunk_idx = [min(t + j, total - 1) for j in range(cfg.chunk_len)]
    frames = ep.images[frame_idx][:, None]  # single recorded view
    instr = np.zeros(cfg.instr_len, dtype=np.int64)
    instr[0] = ep.instruction
    chunk = ep.actions[chunk_idx].astype(np.float64)
    return frames, instr, chunk


def sample_batch(ds: Dataset, cfg: ModelConfig, batch: int,
                 rng: np.random.Generator):
    frames, instrs, chunks = zip(*(sample_window(ds, cfg, rng)
                                   for _ in range(batch)))
    return np.stack(frames), np.stack(instrs), np.stack(chunks)


# ---------------------------------------------------------------------------
# AdamW with decoupled decay and bias correction.

@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    applied: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "OptState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptState, cfg: TrainConfig, it: int,
               trainable: set[str] | None = None) -> None:
    """In-place update. A non-finite gradient anywhere skips the whole step
    (counted in state.skipped) so one bad batch cannot poison the moments."""
    names = [k for k in params if trainable is None or k in trainable]
    for k in names:
        if k not in grads:
            raise ValueError(f"missing gradient for {k}")
        if grads[k].shape != params[k].data.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
    if not all(np.all(np.isfinite(grads[k])) for k in names):
        state.skipped += 1
        return
    lr = lr_schedule(it, cfg)
    b1, b2 = cfg.betas
    state.applied += 1
    t = state.applied
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in names:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        p = params[k].data
        p -= lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * p)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


# ---------------------------------------------------------------------------
# Losses over a batch of windows.

def bc_loss(params: dict[str, Tensor], cfg: ModelConfig, frames, instr,
            chunks, decoder: str, rng: np.random.Generator,
            tokenizer=None) -> Tensor:
    from .backbone import build_mask, encode_prefix, forward_upper

    prefix = encode_prefix(frames, instr, params, cfg)
    if decoder == "ar":
        ids = encode_chunk_batch(tokenizer, chunks, cfg)
        return ar_loss(prefix, params, cfg, tokenizer, ids)
    out = forward_upper(prefix, params, cfg, build_mask(cfg, compressed=True))
    return flow_loss(params, cfg, pooled_features(out), chunks, rng)


def encode_chunk_batch(tokenizer, chunks: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Tokenize each chunk; rows right-padded with -1 to the longest."""
    seqs = [tokenizer.encode(c) for c in chunks]
    width = cfg.max_action_tokens
    longest = max(len(s) for s in seqs)
    if longest > width:
        raise ValueError(f"encoded chunk needs {longest} tokens, cap is {width}")
    out = np.full((len(seqs), width), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collect_grads(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}


# ---------------------------------------------------------------------------
# The training loop.

def train_bc(
    dataset_path: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str,
    eval_task: str | None = None,
) -> dict:
    """Fit a policy to a demonstration file; writes checkpoint, loss CSV,
    and the tokenizer file when the AR decoder is used.

    With eval_task set, rolls out the policy every eval_interval iterations
    and keeps the checkpoint with the best full-success rate; training stops
    early once early_stop_full is reached (success is latched, so longer
    training cannot beat a perfect score). Returns a summary dict.
    """
    ds = load_dataset(dataset_path)
    _check_compat(ds, model_cfg)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 11)))
    params = init_params(model_cfg, seed=train_cfg.seed)
    state = OptState.init(params)
    trainable = None
    if train_cfg.freeze_backbone:
        trainable = {k for k in params if k.startswith(("flow.", "act_"))}

    tokenizer = None
    if train_cfg.decoder == "ar":
        tokenizer = _fit_tokenizer(ds, model_cfg)
        tokenizer.save(os.path.join(out_dir, "tokenizer.txt"))

    ckpt_path = os.path.join(out_dir, "policy.ckpt")
    log_path = os.path.join(out_dir, "loss.csv")
    eval_path = os.path.join(out_dir, "eval.csv")
    best = {"full_pct": -1.0, "iter": -1}
    rows = []
    evals = []
    final_loss = float("nan")
    it = 0
    for it in range(train_cfg.total_iters):
        frames, instr, chunks = sample_batch(ds, model_cfg, train_cfg.batch, rng)
        loss = bc_loss(params, model_cfg, frames, instr, chunks,
                       train_cfg.decoder, rng, tokenizer)
        grads = collect_grads(loss, params)
        final_loss = loss.item()
        rows.append((it, final_loss, lr_schedule(it, train_cfg), grad_norm(grads)))
        adamw_step(params, grads, state, train_cfg, it, trainable)
        if eval_task and (it + 1) % train_cfg.eval_interval == 0:
            full, partial = _eval_now(params, model_cfg, train_cfg, eval_task,
                                      tokenizer)
            evals.append((it, full, partial))
            # >= keeps the most-trained model among ties
            if full >= best["full_pct"]:
                best = {"full_pct": full, "iter": it}
                save_checkpoint(ckpt_path, params, model_cfg)
            if full >= train_cfg.early_stop_full:
                break
    if best["iter"] < 0:
        save_checkpoint(ckpt_path, params, model_cfg)
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "loss", "lr", "grad_norm"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.10g}", f"{r[2]:.10g}", f"{r[3]:.10g}"])
    if eval_task:
        with open(eval_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "full_pct", "partial_pct"])
            w.writerows(evals)
    return {
        "iters_run": it + 1,
        "final_loss": final_loss,
        "best_full_pct": best["full_pct"],
        "best_iter": best["iter"],
        "skipped_steps": state.skipped,
        "checkpoint": ckpt_path,
        "loss_csv": log_path,
    }


def _check_compat(ds: Dataset, cfg: ModelConfig) -> None:
    ep = ds.episodes[0]
    if ep.images.shape[1:] != (cfg.image_h, cfg.image_w, cfg.image_c):
        raise ValueError(
            f"dataset images {ep.images.shape[1:]} do not match model "
            f"({cfg.image_h}, {cfg.image_w}, {cfg.image_c})"
        )
    if ep.actions.shape[1] != cfg.action_dim:
        raise ValueError(
            f"dataset action dim {ep.actions.shape[1]} != model {cfg.action_dim}"
        )
    if cfg.views != 1:
        raise ValueError("demonstration files record a single view")


def _fit_tokenizer(ds: Dataset, cfg: ModelConfig):
    chunks = []
    span = cfg.chunk_len
    for ep in ds.episodes:
        acts = ep.actions.astype(np.float64)
        for t in range(0, len(acts), span):
            idx = [min(t + j, len(acts) - 1) for j in range(span)]
            chunks.append(acts[idx])
    return train_tokenizer(chunks, cfg)


def _eval_now(params, model_cfg, train_cfg, task, tokenizer) -> tuple[float, float]:
    from .inference import DecoderSpec, StreamingPolicy

    spec = (DecoderSpec("flow") if train_cfg.decoder == "flow"
            else DecoderSpec("ar", tokenizer=tokenizer))
    policy = StreamingPolicy(params, model_cfg, spec, seed=train_cfg.eval_seed)
    report = evaluate_policy(policy, task, trials=train_cfg.eval_trials,
                             seed=train_cfg.eval_seed)
    return report["full_pct"], report["partial_pct"]
