"""Multi-frame transformer backbone with mid-stack history compression.

Token layout for the lower blocks is [past frames | current frame | instr];
visual attention is frame-causal (bidirectional within a frame) and visual
tokens never attend instruction tokens, so per-frame activations are
independent of the instruction and of later frames. At the split block the
past-frame hidden states are mean-pooled into a single context token, and the
upper blocks run on [context | current frame | instr].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nm
from .numerics import Tensor

CHECKPOINT_MAGIC = b"CTXP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. frames = history_len + 1."""

    history_len: int = 7
    chunk_len: int = 8
    num_blocks: int = 8
    split_block: int = 2
    views: int = 1
    hidden_dim: int = 128
    heads: int = 4
    instr_len: int = 8
    action_dim: int = 4
    image_h: int = 32
    image_w: int = 32
    image_c: int = 1
    patch_size: int = 8
    text_vocab: int = 32
    use_context: bool = True
    mlp_ratio: int = 4
    flow_hidden: int = 256
    tau_dim: int = 16
    quant_scale: int = 64
    base_vocab: int = 512
    max_merges: int = 64

    def __post_init__(self):
        if self.history_len < 0:
            raise ValueError("history_len must be >= 0")
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if not (0 < self.split_block < self.num_blocks):
            raise ValueError(
                f"split_block must satisfy 0 < n < num_blocks, got "
                f"{self.split_block} of {self.num_blocks}"
            )
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError("patch_size must divide image height and width")
        if self.views < 1:
            raise ValueError("views must be >= 1")
        if self.tau_dim % 2 != 0:
            raise ValueError("tau_dim must be even")

    @property
    def frames(self) -> int:
        return self.history_len + 1

    @property
    def patch_tokens(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_c

    @property
    def frame_tokens(self) -> int:
        return self.views * self.patch_tokens

    @property
    def chunk_size(self) -> int:
        return self.chunk_len * self.action_dim

    @property
    def action_vocab(self) -> int:
        return self.base_vocab + self.max_merges

    @property
    def max_action_tokens(self) -> int:
        return self.chunk_size + 1


@dataclass(frozen=True)
class TokenLayout:
    """Row accounting for a token sequence at a module boundary."""

    past_frames: int
    current_frames: int
    frame_tokens: int
    instr_len: int
    has_context: bool = False
    action_len: int = 0

    @property
    def visual_rows(self) -> int:
        return (self.past_frames + self.current_frames) * self.frame_tokens

    @property
    def rows(self) -> int:
        return (
            int(self.has_context)
            + self.visual_rows
            + self.instr_len
            + self.action_len
        )


@dataclass
class HiddenStates:
    """Activations leaving a block, tagged with their row layout."""

    block_index: int
    tokens: Tensor
    layout: TokenLayout

    def __post_init__(self):
        if self.tokens.data.shape[-2] != self.layout.rows:
            raise ValueError(
                f"layout expects {self.layout.rows} rows, tensor has "
                f"{self.tokens.data.shape[-2]}"
            )


def lower_layout(cfg: ModelConfig, past_frames: int | None = None) -> TokenLayout:
    past = cfg.history_len if past_frames is None else past_frames
    return TokenLayout(past, 1, cfg.frame_tokens, cfg.instr_len)


def upper_layout(cfg: ModelConfig, action_len: int = 0) -> TokenLayout:
    has_ctx = cfg.use_context and cfg.history_len > 0
    return TokenLayout(0, 1, cfg.frame_tokens, cfg.instr_len, has_ctx, action_len)


# ---------------------------------------------------------------------------
# Masks. True means the query row may attend the key column.

def build_mask(
    cfg: ModelConfig,
    compressed: bool,
    *,
    frames: int | None = None,
    action_len: int = 0,
) -> np.ndarray:
    """Boolean attention mask for the standard token layouts.

    Uncompressed: [frame_0 .. frame_{F-1} | instr]; visual rows attend frames
    <= their own (bidirectional within a frame), never the instruction;
    instruction rows attend everything. Compressed: [context? | current |
    instr]; the context row attends only itself. Action rows (AR decoding)
    attend the whole prefix and causally among themselves; nothing attends
    back into them.
    """
    ft = cfg.frame_tokens
    li = cfg.instr_len
    if compressed:
        ctx = 1 if (cfg.use_context and cfg.history_len > 0) else 0
        base = ctx + ft + li
        n = base + action_len
        mask = np.zeros((n, n), dtype=bool)
        if ctx:
            mask[0, 0] = True
            mask[ctx : ctx + ft, 0] = True
        vis = slice(ctx, ctx + ft)
        mask[vis, vis] = True
        mask[ctx + ft : base, :base] = True
    else:
        f = cfg.frames if frames is None else frames
        vrows = f * ft
        base = vrows + li
        n = base + action_len
        mask = np.zeros((n, n), dtype=bool)
        frame_id = np.arange(vrows) // ft
        mask[:vrows, :vrows] = frame_id[:, None] >= frame_id[None, :]
        mask[vrows:base, :base] = True
    if action_len:
        mask[base:, :base] = True
        rows = np.arange(action_len)
        mask[base:, base:] = rows[:, None] >= rows[None, :]
    return mask


# ---------------------------------------------------------------------------
# Parameters.

def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded parameter dict. Residual output projections start at zero so a
    fresh stack is the identity map."""
    rng = np.random.default_rng(seed)
    std = 0.02
    p: dict[str, np.ndarray] = {}

    def norm(*shape):
        return rng.normal(0.0, std, size=shape)

    p["patch_proj"] = norm(cfg.patch_dim, cfg.hidden_dim)
    p["patch_bias"] = np.zeros(cfg.hidden_dim)
    p["pos_embed"] = norm(cfg.patch_tokens, cfg.hidden_dim)
    p["view_embed"] = norm(cfg.views, cfg.hidden_dim)
    p["instr_embed"] = norm(cfg.text_vocab, cfg.hidden_dim)
    p["instr_pos"] = norm(cfg.instr_len, cfg.hidden_dim)
    p["ctx_embed"] = norm(1, cfg.hidden_dim)
    d, h = cfg.hidden_dim, cfg.mlp_ratio * cfg.hidden_dim
    for i in range(cfg.num_blocks):
        p[f"blocks.{i}.attn_norm"] = np.ones(d)
        p[f"blocks.{i}.wq"] = norm(d, d)
        p[f"blocks.{i}.wk"] = norm(d, d)
        p[f"blocks.{i}.wv"] = norm(d, d)
        p[f"blocks.{i}.wo"] = np.zeros((d, d))
        p[f"blocks.{i}.mlp_norm"] = np.ones(d)
        p[f"blocks.{i}.w1"] = norm(d, h)
        p[f"blocks.{i}.b1"] = np.zeros(h)
        p[f"blocks.{i}.w2"] = np.zeros((h, d))
        p[f"blocks.{i}.b2"] = np.zeros(d)
    p["final_norm"] = np.ones(d)
    fin = d + cfg.chunk_size + cfg.tau_dim
    p["flow.w1"] = norm(fin, cfg.flow_hidden)
    p["flow.b1"] = np.zeros(cfg.flow_hidden)
    p["flow.w2"] = np.zeros((cfg.flow_hidden, cfg.chunk_size))
    p["flow.b2"] = np.zeros(cfg.chunk_size)
    p["act_embed"] = norm(cfg.action_vocab, cfg.hidden_dim)
    p["act_pos"] = norm(cfg.max_action_tokens, cfg.hidden_dim)
    p["act_start"] = norm(1, cfg.hidden_dim)
    p["act_out_w"] = np.zeros((d, cfg.action_vocab))
    p["act_out_b"] = np.zeros(cfg.action_vocab)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


# ---------------------------------------------------------------------------
# Embedding.

def patchify(views: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(..., V, H, W, C) uint8 -> (..., V*P, patch_dim) float in [0, 1]."""
    v = np.asarray(views)
    if v.shape[-4:] != (cfg.views, cfg.image_h, cfg.image_w, cfg.image_c):
        raise ValueError(
            f"expected views shaped (..., {cfg.views}, {cfg.image_h}, "
            f"{cfg.image_w}, {cfg.image_c}), got {v.shape}"
        )
    ps = cfg.patch_size
    gh, gw = cfg.image_h // ps, cfg.image_w // ps
    lead = v.shape[:-4]
    x = v.reshape(lead + (cfg.views, gh, ps, gw, ps, cfg.image_c))
    x = np.moveaxis(x, -4, -3)  # (..., V, gh, gw, ps, ps, C)
    x = x.reshape(lead + (cfg.views * gh * gw, ps * ps * cfg.image_c))
    return x.astype(np.float64) / 255.0


def _posview(params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(V*P, d) additive positional + view embedding for one frame."""
    parts = []
    for v in range(cfg.views):
        row = nm.tslice(params["view_embed"], v, v + 1)
        parts.append(nm.add(params["pos_embed"], row))
    return parts[0] if len(parts) == 1 else nm.concat(parts, axis=-2)


def embed_observation(views: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Embed one observation's views into (V*P, d) visual tokens."""
    patches = Tensor(patchify(views, cfg))
    x = nm.add(nm.matmul(patches, params["patch_proj"]), params["patch_bias"])
    return nm.add(x, _posview(params, cfg))


def embed_frames(frame_views: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Embed a stack of frames.

    frame_views: (..., F, V, H, W, C) uint8. Returns (..., F*V*P, d); every
    frame gets the same positional/view embeddings (frame identity comes from
    the causal mask, which keeps cached activations valid as frames age).
    """
    fv = np.asarray(frame_views)
    f = fv.shape[-5]
    lead = fv.shape[:-5]
    patches = patchify(fv, cfg)  # (..., F, V*P, pd)
    patches = patches.reshape(lead + (f * cfg.frame_tokens, cfg.patch_dim))
    x = nm.add(nm.matmul(Tensor(patches), params["patch_proj"]), params["patch_bias"])
    pv = _posview(params, cfg)
    tiled = pv if f == 1 else nm.concat([pv] * f, axis=-2)
    return nm.add(x, tiled)


def embed_instruction(ids: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(..., L) int ids -> (..., L, d) instruction tokens."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] != cfg.instr_len:
        raise ValueError(f"instruction must have {cfg.instr_len} ids, got {ids.shape}")
    return nm.add(nm.embedding(params["instr_embed"], ids), params["instr_pos"])


# ---------------------------------------------------------------------------
# Blocks.

def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, d = x.data.shape[-2], x.data.shape[-1]
    lead = x.data.shape[:-2]
    y = nm.reshape(x, lead + (t, heads, d // heads))
    return nm.swapaxes(y, -3, -2)  # (..., heads, T, dh)


def _merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.data.shape[-3], x.data.shape[-2], x.data.shape[-1]
    lead = x.data.shape[:-3]
    y = nm.swapaxes(x, -3, -2)
    return nm.reshape(y, lead + (t, h * dh))


def multihead_attention(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    mask: np.ndarray | None,
    kv: Tensor | None = None,
) -> Tensor:
    """Pre-norm multi-head attention. kv supplies key/value rows when they
    differ from the query rows (streaming); defaults to x."""
    src = x if kv is None else kv
    q = _split_heads(nm.matmul(x, params[prefix + "wq"]), heads)
    k = _split_heads(nm.matmul(src, params[prefix + "wk"]), heads)
    v = _split_heads(nm.matmul(src, params[prefix + "wv"]), heads)
    out = nm.attention(q, k, v, mask)
    return nm.matmul(_merge_heads(out), params[prefix + "wo"])


def transformer_block(
    x: Tensor,
    params: dict[str, Tensor],
    index: int,
    heads: int,
    mask: np.ndarray | None,
) -> Tensor:
    """Pre-norm block: x + attn(norm(x)); x + mlp(norm(x))."""
    prefix = f"blocks.{index}."
    hn = nm.rms_norm(x, params[prefix + "attn_norm"])
    x = nm.add(x, multihead_attention(hn, params, prefix, heads, mask))
    hn = nm.rms_norm(x, params[prefix + "mlp_norm"])
    h = nm.silu(nm.add(nm.matmul(hn, params[prefix + "w1"]), params[prefix + "b1"]))
    return nm.add(x, nm.add(nm.matmul(h, params[prefix + "w2"]), params[prefix + "b2"]))


def run_blocks(
    x: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    start: int,
    stop: int,
    mask: np.ndarray | None,
) -> Tensor:
    for i in range(start, stop):
        x = transformer_block(x, params, i, cfg.heads, mask)
    return x


def forward_lower(h: HiddenStates, params: dict[str, Tensor], cfg: ModelConfig,
                  mask: np.ndarray) -> HiddenStates:
    """Run blocks [0, split) over the uncompressed sequence."""
    if h.block_index != 0:
        raise ValueError("forward_lower starts at block 0")
    x = run_blocks(h.tokens, params, cfg, 0, cfg.split_block, mask)
    return HiddenStates(cfg.split_block, x, h.layout)


def compress_history(h: HiddenStates, params: dict[str, Tensor],
                     cfg: ModelConfig) -> HiddenStates:
    """Mean-pool past-frame rows into one context token and assemble the
    upper-block input [context | current | instr]."""
    lay = h.layout
    if lay.past_frames == 0:
        raise ValueError("no past frames to compress; bypass compression when history_len == 0")
    past_rows = lay.past_frames * lay.frame_tokens
    past = nm.tslice(h.tokens, 0, past_rows)
    rest = nm.tslice(h.tokens, past_rows, lay.rows)
    ctx = nm.mean(past, axis=-2, keepdims=True)
    ctx = nm.add(ctx, params["ctx_embed"])
    if cfg.use_context:
        seq = nm.concat([ctx, rest], axis=-2)
        out_lay = TokenLayout(0, 1, lay.frame_tokens, lay.instr_len, True)
    else:
        seq = rest
        out_lay = TokenLayout(0, 1, lay.frame_tokens, lay.instr_len, False)
    return HiddenStates(h.block_index, seq, out_lay)


def forward_upper(h: HiddenStates, params: dict[str, Tensor], cfg: ModelConfig,
                  mask: np.ndarray) -> HiddenStates:
    """Run blocks [split, N) and the final norm over the compressed sequence."""
    x = run_blocks(h.tokens, params, cfg, cfg.split_block, cfg.num_blocks, mask)
    x = nm.rms_norm(x, params["final_norm"])
    return HiddenStates(cfg.num_blocks, x, h.layout)


def pooled_features(h: HiddenStates) -> Tensor:
    """Mean over token rows; the decoder conditioning vector."""
    return nm.mean(h.tokens, axis=-2)


def encode_prefix(
    frame_views: np.ndarray,
    instr_ids: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
) -> HiddenStates:
    """Lower blocks plus compression: the upper-block input sequence.

    frame_views: (..., frames, V, H, W, C) uint8, oldest frame first, last
    frame is the current observation. With history_len == 0 the compression
    step is bypassed and the sequence stays [current | instr].
    """
    fv = np.asarray(frame_views)
    if fv.shape[-5] != cfg.frames:
        raise ValueError(f"expected {cfg.frames} frames, got {fv.shape[-5]}")
    vis = embed_frames(fv, params, cfg)
    ins = embed_instruction(instr_ids, params, cfg)
    x = nm.concat([vis, ins], axis=-2)
    if cfg.history_len == 0:
        mask = build_mask(cfg, compressed=False, frames=1)
        x = run_blocks(x, params, cfg, 0, cfg.split_block, mask)
        return HiddenStates(cfg.split_block, x, lower_layout(cfg, past_frames=0))
    low = HiddenStates(0, x, lower_layout(cfg))
    low = forward_lower(low, params, cfg, build_mask(cfg, compressed=False))
    return compress_history(low, params, cfg)


def forward_policy(
    frame_views: np.ndarray,
    instr_ids: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
) -> HiddenStates:
    """Full forward pass over a (possibly batched) frame window."""
    prefix = encode_prefix(frame_views, instr_ids, params, cfg)
    return forward_upper(prefix, params, cfg, build_mask(cfg, compressed=True))


def forward_flat(
    frame_views: np.ndarray,
    instr_ids: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
) -> HiddenStates:
    """Baseline forward with no compression: every block sees every frame."""
    fv = np.asarray(frame_views)
    frames = fv.shape[-5]
    vis = embed_frames(fv, params, cfg)
    ins = embed_instruction(instr_ids, params, cfg)
    x = nm.concat([vis, ins], axis=-2)
    mask = build_mask(cfg, compressed=False, frames=frames)
    x = run_blocks(x, params, cfg, 0, cfg.num_blocks, mask)
    x = nm.rms_norm(x, params["final_norm"])
    return HiddenStates(cfg.num_blocks, x, lower_layout(cfg, past_frames=frames - 1))


# ---------------------------------------------------------------------------
# Checkpoint I/O. Little-endian: magic, version u32, config block, then named
# tensors (name len u16, name bytes, rows u32, cols u32, f32 row-major data).

class CheckpointError(ValueError):
    pass


_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def _write_string(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_string(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def save_checkpoint(path: str, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    expected = set(init_params(cfg, seed=0))
    if set(params) != expected:
        off = sorted(expected.symmetric_difference(params))
        raise CheckpointError(f"parameter set does not match config: {off[:3]}")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(_CONFIG_FIELDS)))
        for name in _CONFIG_FIELDS:
            _write_string(fh, name)
            fh.write(struct.pack("<d", float(getattr(cfg, name))))
        for name in sorted(params):
            arr = params[name].data
            mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
            if mat.ndim != 2:
                raise CheckpointError(f"tensor {name} is not 1-D or 2-D")
            _write_string(fh, name)
            fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            fh.write(mat.astype("<f4").tobytes(order="C"))


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], ModelConfig]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (nfields,) = struct.unpack("<I", _read_exact(fh, 4))
        raw: dict[str, float] = {}
        for _ in range(nfields):
            name = _read_string(fh)
            (val,) = struct.unpack("<d", _read_exact(fh, 8))
            raw[name] = val
        if set(raw) != set(_CONFIG_FIELDS):
            raise CheckpointError("config block does not match ModelConfig fields")
        kwargs = {}
        for f in fields(ModelConfig):
            v = raw[f.name]
            kwargs[f.name] = bool(v) if f.type == "bool" else int(v)
        cfg = ModelConfig(**kwargs)

        expected = init_params(cfg, seed=0)
        params: dict[str, Tensor] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (n,) = struct.unpack("<H", head)
            name = _read_exact(fh, n).decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(fh, 8))
            data = np.frombuffer(_read_exact(fh, rows * cols * 4), dtype="<f4")
            if name not in expected:
                raise CheckpointError(f"unknown tensor name {name!r}")
            target = expected[name].data.shape
            arr = data.astype(np.float64).reshape(rows, cols).reshape(target)
            params[name] = Tensor(arr, requires_grad=True)
        missing = set(expected) - set(params)
        if missing:
            raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:3]}")
    return params, cfg
