"""Streaming inference with per-frame KV caching.

Past frames are pushed through the lower blocks once, when they arrive;
their per-block key/value rows and their pooled hidden sums are cached.
Acting on the current frame then recomputes only the current-frame and
instruction rows in the lower blocks, reads the context token off the
cached sums, and runs the upper blocks on the short compressed sequence.
Visual rows never attend instruction rows, so cached activations are
instruction-independent and exactly equal a full recompute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .backbone import (
    HiddenStates,
    ModelConfig,
    TokenLayout,
    build_mask,
    embed_instruction,
    embed_observation,
    encode_prefix,
    forward_upper,
    init_params,
    pooled_features,
    upper_layout,
)
from .decoders import ActionTokenizer, ar_sample, flow_sample
from .numerics import Tensor


@dataclass(frozen=True)
class DecoderSpec:
    """How act() turns pooled features into an action chunk."""

    kind: str = "flow"
    flow_steps: int = 10
    tokenizer: ActionTokenizer | None = None

    def __post_init__(self):
        if self.kind not in ("flow", "ar"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.kind == "flow" and self.flow_steps < 1:
            raise ValueError("flow_steps must be >= 1")
        if self.kind == "ar" and self.tokenizer is None:
            raise ValueError("ar decoder needs a tokenizer")


@dataclass
class StreamCache:
    """Per-frame lower-block KV rows plus pooled hidden sums.

    keys[b] / values[b] hold one (frame_tokens, d) array per retained frame
    for lower block b. frame_sums holds each frame's summed hidden rows at
    the split block, so the context token is a running mean over exactly
    frames * frame_tokens rows.
    """

    cfg: ModelConfig
    keys: list[list[np.ndarray]] = field(default_factory=list)
    values: list[list[np.ndarray]] = field(default_factory=list)
    frame_sums: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.keys:
            self.keys = [[] for _ in range(self.cfg.split_block)]
            self.values = [[] for _ in range(self.cfg.split_block)]

    @property
    def frames(self) -> int:
        return len(self.frame_sums)

    @property
    def pooled_count(self) -> int:
        return self.frames * self.cfg.frame_tokens

    def pooled_mean(self) -> np.ndarray:
        if not self.frame_sums:
            raise ValueError("empty cache has no pooled mean")
        return sum(self.frame_sums) / self.pooled_count


def _block_kv(params, i: int, hn: Tensor) -> tuple[np.ndarray, np.ndarray]:
    prefix = f"blocks.{i}."
    k = (hn.data @ params[prefix + "wk"].data)
    v = (hn.data @ params[prefix + "wv"].data)
    return k, v


def _heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape[-2], x.shape[-1]
    return np.swapaxes(x.reshape(x.shape[:-2] + (t, heads, d // heads)), -3, -2)


def _streaming_block(
    x: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    i: int,
    past_k: np.ndarray | None,
    past_v: np.ndarray | None,
    mask: np.ndarray,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """One lower block over [current | instr] rows against cached past keys.

    Returns the block output plus this frame+instr's own key/value rows (the
    caller caches the visual slice of those when appending).
    """
    prefix = f"blocks.{i}."
    hn = nm.rms_norm(x, params[prefix + "attn_norm"])
    own_k, own_v = _block_kv(params, i, hn)
    if past_k is None:
        all_k, all_v = own_k, own_v
    else:
        all_k = np.concatenate([past_k, own_k], axis=-2)
        all_v = np.concatenate([past_v, own_v], axis=-2)
    q = _heads(hn.data @ params[prefix + "wq"].data, cfg.heads)
    out = nm.attention(Tensor(q), Tensor(_heads(all_k, cfg.heads)),
                       Tensor(_heads(all_v, cfg.heads)), mask)
    merged = np.swapaxes(out.data, -3, -2).reshape(x.data.shape)
    x = nm.add(x, nm.matmul(Tensor(merged), params[prefix + "wo"]))
    hn2 = nm.rms_norm(x, params[prefix + "mlp_norm"])
    h = nm.silu(nm.add(nm.matmul(hn2, params[prefix + "w1"]), params[prefix + "b1"]))
    x = nm.add(x, nm.add(nm.matmul(h, params[prefix + "w2"]), params[prefix + "b2"]))
    return x, own_k, own_v


def _append_mask(cfg: ModelConfig, past_frames: int) -> np.ndarray:
    """Visual-only mask for a newly arriving frame: attend past + itself."""
    ft = cfg.frame_tokens
    return np.ones((ft, (past_frames + 1) * ft), dtype=bool)


def _act_mask(cfg: ModelConfig, past_frames: int) -> np.ndarray:
    """[current | instr] queries over [past | current | instr] keys."""
    ft, li = cfg.frame_tokens, cfg.instr_len
    cols = past_frames * ft + ft + li
    mask = np.zeros((ft + li, cols), dtype=bool)
    mask[:ft, : past_frames * ft + ft] = True
    mask[ft:, :] = True
    return mask


_mask_memo: dict[tuple, np.ndarray] = {}


def _memo_mask(kind: str, cfg: ModelConfig, past: int) -> np.ndarray:
    key = (kind, cfg, past)
    m = _mask_memo.get(key)
    if m is None:
        m = _append_mask(cfg, past) if kind == "append" else _act_mask(cfg, past)
        _mask_memo[key] = m
    return m


def append_frame(cache: StreamCache, views: np.ndarray, params: dict[str, Tensor],
                 cfg: ModelConfig) -> None:
    """Push one observed frame through the lower blocks and cache it.

    Evicts the oldest frame beyond history_len. A history_len == 0 config
    keeps no history, so this is a no-op there.
    """
    if cfg.history_len == 0:
        return
    with nm.no_grad():
        x = embed_observation(views, params, cfg)
        mask = _memo_mask("append", cfg, cache.frames)
        new_k: list[np.ndarray] = []
        new_v: list[np.ndarray] = []
        for i in range(cfg.split_block):
            past_k = np.concatenate(cache.keys[i], axis=-2) if cache.keys[i] else None
            past_v = np.concatenate(cache.values[i], axis=-2) if cache.values[i] else None
            x, own_k, own_v = _streaming_block(x, params, cfg, i, past_k, past_v, mask)
            new_k.append(own_k)
            new_v.append(own_v)
        for i in range(cfg.split_block):
            cache.keys[i].append(new_k[i])
            cache.values[i].append(new_v[i])
        cache.frame_sums.append(x.data.sum(axis=-2))
        if cache.frames > cfg.history_len:
            for i in range(cfg.split_block):
                cache.keys[i].pop(0)
                cache.values[i].pop(0)
            cache.frame_sums.pop(0)


def _decode(features: Tensor, prefix: HiddenStates, params, cfg,
            decoder: DecoderSpec, rng: np.random.Generator) -> np.ndarray:
    if decoder.kind == "flow":
        return flow_sample(params, cfg, features, decoder.flow_steps, rng)
    ids = ar_sample(prefix, params, cfg, decoder.tokenizer)
    return decoder.tokenizer.decode(ids, cfg.chunk_len, cfg.action_dim)


def _single_frame_chunk(views, instr_ids, params, cfg, decoder, rng) -> np.ndarray:
    """No-history path: every block sees only [current | instr]."""
    with nm.no_grad():
        single = ModelConfig(**{**_cfg_dict(cfg), "history_len": 0})
        fv = np.asarray(views)[None]
        prefix = encode_prefix(fv, instr_ids, params, single)
        out = forward_upper(prefix, params, single, build_mask(single, compressed=True))
        return _decode(pooled_features(out), prefix, params, single, decoder, rng)


def _cfg_dict(cfg: ModelConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def act(
    cache: StreamCache,
    views: np.ndarray,
    instr_ids: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    decoder: DecoderSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """One action chunk from the current observation plus cached history.

    Does not mutate the cache; the controller appends the frame afterwards.
    An empty cache (or history_len == 0) falls back to the single-frame path.
    """
    if cache.frames > cfg.history_len:
        raise ValueError("cache holds more frames than history_len")
    if cfg.history_len == 0 or cache.frames == 0:
        return _single_frame_chunk(views, instr_ids, params, cfg, decoder, rng)
    with nm.no_grad():
        cur = embed_observation(views, params, cfg)
        ins = embed_instruction(instr_ids, params, cfg)
        x = nm.concat([cur, ins], axis=-2)
        mask = _memo_mask("act", cfg, cache.frames)
        for i in range(cfg.split_block):
            past_k = np.concatenate(cache.keys[i], axis=-2)
            past_v = np.concatenate(cache.values[i], axis=-2)
            x, _, _ = _streaming_block(x, params, cfg, i, past_k, past_v, mask)
        ctx = cache.pooled_mean()[None, :] + params["ctx_embed"].data
        if cfg.use_context:
            seq = Tensor(np.concatenate([ctx, x.data], axis=-2))
            layout = upper_layout(cfg)
        else:
            seq = x
            layout = TokenLayout(0, 1, cfg.frame_tokens, cfg.instr_len, False)
        prefix = HiddenStates(cfg.split_block, seq, layout)
        out = forward_upper(prefix, params, cfg, build_mask(cfg, compressed=True))
        return _decode(pooled_features(out), prefix, params, cfg, decoder, rng)


def oracle_act(
    history_views: list[np.ndarray],
    views: np.ndarray,
    instr_ids: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    decoder: DecoderSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Reference act(): full recompute over the given history window."""
    if len(history_views) > cfg.history_len:
        raise ValueError(f"history of {len(history_views)} exceeds {cfg.history_len}")
    if cfg.history_len == 0 or not history_views:
        return _single_frame_chunk(views, instr_ids, params, cfg, decoder, rng)
    with nm.no_grad():
        window = np.stack(list(history_views) + [np.asarray(views)])
        eff = ModelConfig(**{**_cfg_dict(cfg), "history_len": len(history_views)})
        prefix = encode_prefix(window, instr_ids, params, eff)
        out = forward_upper(prefix, params, eff, build_mask(eff, compressed=True))
        return _decode(pooled_features(out), prefix, params, eff, decoder, rng)


def lower_kv_recompute(
    frames: list[np.ndarray], params: dict[str, Tensor], cfg: ModelConfig
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-block visual K/V rows from a full frame-causal recompute.

    Test oracle for cache equivalence: feeds the frames as one sequence (no
    instruction rows; visual rows never see them) and collects each lower
    block's key/value projections of its normalized input.
    """
    from .backbone import embed_frames, transformer_block

    with nm.no_grad():
        f = len(frames)
        x = embed_frames(np.stack(frames), params, cfg)
        ft = cfg.frame_tokens
        vrows = f * ft
        frame_id = np.arange(vrows) // ft
        mask = frame_id[:, None] >= frame_id[None, :]
        ks, vs = [], []
        for i in range(cfg.split_block):
            hn = nm.rms_norm(x, params[f"blocks.{i}.attn_norm"])
            ks.append(hn.data @ params[f"blocks.{i}.wk"].data)
            vs.append(hn.data @ params[f"blocks.{i}.wv"].data)
            x = transformer_block(x, params, i, cfg.heads, mask)
        return ks, vs


# ---------------------------------------------------------------------------
# Streaming policy wrapper: the controller used by evaluation and bench.

class StreamingPolicy:
    """Holds a model plus a per-episode cache behind an act/observe protocol.

    At episode start the cache is prefilled with history_len copies of the
    first frame, matching the left-padding used for training windows.
    """

    def __init__(self, params, cfg: ModelConfig, decoder: DecoderSpec, seed: int = 0):
        self.params = params
        self.cfg = cfg
        self.decoder = decoder
        self.seed = seed
        self.cache: StreamCache | None = None
        self._episode = 0
        self._step = 0

    def begin_episode(self, instr_ids: np.ndarray, episode: int) -> None:
        self.cache = StreamCache(self.cfg)
        self.instr_ids = self._fit_instruction(np.asarray(instr_ids, dtype=np.int64))
        self._episode = episode
        self._step = 0
        self._prefilled = False

    def _fit_instruction(self, ids: np.ndarray) -> np.ndarray:
        """Pad with zeros or drop trailing zeros to match the model's
        instruction width; content ids never change silently."""
        want = self.cfg.instr_len
        if ids.ndim != 1:
            raise ValueError("instruction ids must be 1-D")
        if len(ids) == want:
            return ids
        if len(ids) < want:
            return np.concatenate([ids, np.zeros(want - len(ids), np.int64)])
        if np.any(ids[want:] != 0):
            raise ValueError(
                f"instruction of {len(ids)} ids does not fit model width {want}"
            )
        return ids[:want]

    def act(self, views: np.ndarray) -> np.ndarray:
        if self.cache is None:
            raise ValueError("begin_episode() first")
        if not self._prefilled:
            for _ in range(self.cfg.history_len):
                append_frame(self.cache, views, self.params, self.cfg)
            self._prefilled = True
        rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, self._episode, self._step))
        )
        chunk = act(self.cache, views, self.instr_ids, self.params, self.cfg,
                    self.decoder, rng)
        self._step += 1
        return chunk

    def observe(self, views: np.ndarray) -> None:
        append_frame(self.cache, views, self.params, self.cfg)


# ---------------------------------------------------------------------------
# Bench: per-act latency and attention-cost accounting across serving modes.

BENCH_MODES = ("uncompressed", "compressed", "compressed+cached")


def expected_key_tokens(cfg: ModelConfig, mode: str) -> int:
    """Key tokens attended across blocks for one act()."""
    full = cfg.frames * cfg.frame_tokens + cfg.instr_len
    short = (1 if cfg.use_context else 0) + cfg.frame_tokens + cfg.instr_len
    if mode == "uncompressed":
        return cfg.num_blocks * full
    return cfg.split_block * full + (cfg.num_blocks - cfg.split_block) * short


def bench(
    cfg: ModelConfig,
    modes: tuple[str, ...] = BENCH_MODES,
    trials: int = 20,
    seed: int = 0,
    decoder: DecoderSpec | None = None,
) -> list[dict]:
    """Measure act latency per serving mode on synthetic data.

    Returns one row per mode: median/p90 wall ms over `trials` acts (after
    two warmups), instrumented key-token and attention-MAC counts for a
    single act, and the closed-form expected key tokens.
    """
    for m in modes:
        if m not in BENCH_MODES:
            raise ValueError(f"unknown bench mode {m!r}")
    if trials < 3:
        raise ValueError("trials must be >= 3")
    decoder = decoder or DecoderSpec()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed)
    frames = [
        rng.integers(0, 256, size=(cfg.views, cfg.image_h, cfg.image_w, cfg.image_c),
                     dtype=np.uint8)
        for _ in range(cfg.frames)
    ]
    instr = np.zeros(cfg.instr_len, dtype=np.int64)
    history, current = frames[:-1], frames[-1]

    from .backbone import forward_flat

    def act_uncompressed():
        with nm.no_grad():
            window = np.stack(history + [current])
            out = forward_flat(window, instr, params, cfg)
            return _decode(pooled_features(out), out, params, cfg, decoder,
                           np.random.default_rng(seed))

    def act_compressed():
        return oracle_act(history, current, instr, params, cfg, decoder,
                          np.random.default_rng(seed))

    cache = StreamCache(cfg)
    for fr in history:
        append_frame(cache, fr, params, cfg)

    def act_cached():
        return act(cache, current, instr, params, cfg, decoder,
                   np.random.default_rng(seed))

    impls = {
        "uncompressed": act_uncompressed,
        "compressed": act_compressed,
        "compressed+cached": act_cached,
    }
    rows = []
    for mode in modes:
        fn = impls[mode]
        fn()
        fn()
        nm.counter.reset()
        fn()
        counts = nm.counter.snapshot()
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1000.0)
        times.sort()
        rows.append({
            "mode": mode,
            "median_ms": times[len(times) // 2],
            "p90_ms": times[min(len(times) - 1, int(0.9 * len(times)))],
            "key_tokens": counts["key_tokens"],
            "attn_macs": counts["attention_macs"],
            "expected_key_tokens": expected_key_tokens(cfg, mode),
        })
    return rows
