"""Action decoders: a flow-matching regression head and a discrete
autoregressive head over DCT+BPE action tokens.

Flow matching: a noisy chunk a_tau = tau * a + (1 - tau) * eps interpolates
pure noise (tau=0) and the target chunk (tau=1). The head is trained to
predict v = eps - a; Euler sampling integrates a <- a - dt * v from a ~ N(0,I).

Tokenizer: per action dimension, an orthonormal DCT over the chunk's time
axis, scaled and rounded to integers, shifted into a base symbol range, then
compressed with learned BPE merges and offset into the model vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .backbone import (
    HiddenStates,
    ModelConfig,
    TokenLayout,
    build_mask,
    forward_upper,
)
from .numerics import Tensor


# ---------------------------------------------------------------------------
# Flow matching.

def flow_noise(chunk: np.ndarray, eps: np.ndarray, tau) -> np.ndarray:
    """Interpolate target and noise: tau=0 gives eps, tau=1 gives the chunk."""
    chunk = np.asarray(chunk, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if chunk.shape != eps.shape:
        raise ValueError(f"chunk {chunk.shape} and eps {eps.shape} differ")
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0) or np.any(tau > 1):
        raise ValueError("tau must lie in [0, 1]")
    t = tau.reshape(tau.shape + (1,) * (chunk.ndim - tau.ndim))
    return t * chunk + (1.0 - t) * eps


def tau_embedding(tau, dim: int) -> np.ndarray:
    """Sinusoidal embedding of tau in [0, 1]; frequencies double per pair."""
    tau = np.asarray(tau, dtype=np.float64)
    half = dim // 2
    freqs = 2.0 ** np.arange(half)
    ang = 2.0 * np.pi * tau[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def flow_head(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    features: Tensor,
    noisy: np.ndarray,
    tau,
) -> Tensor:
    """Two-layer MLP over [features | flattened noisy chunk | tau embedding].

    features: (..., d); noisy: (..., chunk_len * action_dim); tau scalar or
    (...,). Returns the predicted velocity, same shape as noisy.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.shape[-1] != cfg.chunk_size:
        raise ValueError(f"noisy chunk must have {cfg.chunk_size} values")
    flat = features.data.ndim == 1
    if flat:
        features = nm.reshape(features, (1, features.data.shape[-1]))
        noisy = noisy.reshape(1, -1)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), features.data.shape[:-1])
    emb = tau_embedding(tau, cfg.tau_dim)
    x = nm.concat([features, Tensor(noisy), Tensor(emb)], axis=-1)
    h = nm.silu(nm.add(nm.matmul(x, params["flow.w1"]), params["flow.b1"]))
    out = nm.add(nm.matmul(h, params["flow.w2"]), params["flow.b2"])
    return nm.reshape(out, (cfg.chunk_size,)) if flat else out


def flow_loss(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    features: Tensor,
    target_chunk: np.ndarray,
    rng: np.random.Generator,
) -> Tensor:
    """Mean squared error between the head output and eps - target."""
    target = np.asarray(target_chunk, dtype=np.float64)
    flat = target.reshape(features.data.shape[:-1] + (cfg.chunk_size,))
    eps = rng.standard_normal(flat.shape)
    tau = rng.uniform(0.0, 1.0, size=features.data.shape[:-1])
    noisy = flow_noise(flat, eps, tau)
    pred = flow_head(params, cfg, features, noisy, tau)
    return nm.mse(pred, eps - flat)


def flow_sample(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    features: Tensor,
    steps: int,
    rng: np.random.Generator,
    predictor=None,
) -> np.ndarray:
    """Euler-integrate the learned velocity field from pure noise.

    Returns a (chunk_len, action_dim) array. `predictor(noisy, tau)` can
    replace the learned head (used by tests with an analytic field).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    with nm.no_grad():
        a = rng.standard_normal(cfg.chunk_size)
        dt = 1.0 / steps
        for i in range(steps):
            tau = i / steps
            if predictor is not None:
                v = np.asarray(predictor(a, tau), dtype=np.float64)
            else:
                v = flow_head(params, cfg, features, a, tau).data
            a = a - dt * v
    return a.reshape(cfg.chunk_len, cfg.action_dim)


# ---------------------------------------------------------------------------
# DCT + BPE action tokenizer.

class TokenizerError(ValueError):
    pass


class DecodeError(ValueError):
    pass


def bpe_train(corpus: list[list[int]], target_merges: int, base_vocab: int) -> list[tuple[int, int, int]]:
    """Learn BPE merges over integer sequences.

    Repeatedly merges the most frequent adjacent pair (ties broken by the
    lexicographically smallest pair) until target_merges are made or no pair
    occurs at least twice. New ids count up from base_vocab.
    """
    if target_merges < 0:
        raise ValueError("target_merges must be >= 0")
    seqs = [list(s) for s in corpus]
    merges: list[tuple[int, int, int]] = []
    for new_id in range(base_vocab, base_vocab + target_merges):
        counts: dict[tuple[int, int], int] = {}
        for s in seqs:
            for pair in zip(s, s[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        left, right = best[0]
        merges.append((left, right, new_id))
        seqs = [_apply_merge(s, left, right, new_id) for s in seqs]
    return merges


def _apply_merge(seq: list[int], left: int, right: int, new_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


@dataclass
class ActionTokenizer:
    """Maps action chunks to discrete model-vocabulary ids and back.

    Encoding is lossy only through coefficient rounding: each DCT coefficient
    moves by at most 0.5 / quant_scale. BPE is lossless and never lengthens a
    sequence. Ids handed to the model are offset by special_offset.
    """

    quant_scale: int = 64
    base_vocab: int = 512
    special_offset: int = 32
    merges: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.quant_scale < 1 or self.base_vocab < 2 or self.special_offset < 0:
            raise TokenizerError("bad tokenizer parameters")
        self._expand: dict[int, tuple[int, int]] = {m[2]: (m[0], m[1]) for m in self.merges}

    @property
    def vocab(self) -> int:
        return self.base_vocab + len(self.merges)

    def base_symbols(self, chunk: np.ndarray) -> list[int]:
        """Quantized DCT coefficients as base symbols, action-dim major."""
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2:
            raise TokenizerError(f"chunk must be 2-D (steps, dims), got {chunk.shape}")
        coeffs = nm.dct(chunk.T)  # (A, steps): DCT along the time axis
        q = np.rint(coeffs * self.quant_scale).astype(np.int64)
        sym = q + self.base_vocab // 2
        if sym.min() < 0 or sym.max() >= self.base_vocab:
            raise TokenizerError(
                f"quantized coefficient outside base vocab range "
                f"[{-self.base_vocab // 2}, {self.base_vocab // 2})"
            )
        return [int(s) for s in sym.reshape(-1)]

    def encode(self, chunk: np.ndarray) -> list[int]:
        seq = self.base_symbols(chunk)
        for left, right, new_id in self.merges:
            seq = _apply_merge(seq, left, right, new_id)
        return [s + self.special_offset for s in seq]

    def _expand_id(self, sym: int, out: list[int]) -> None:
        if sym < self.base_vocab:
            out.append(sym)
            return
        left, right = self._expand[sym]
        self._expand_id(left, out)
        self._expand_id(right, out)

    def expand(self, ids: list[int]) -> list[int]:
        """Model ids back to base symbols; validates the id range."""
        out: list[int] = []
        for tok in ids:
            sym = tok - self.special_offset
            if sym < 0 or sym >= self.vocab:
                raise TokenizerError(f"token id {tok} outside tokenizer range")
            self._expand_id(sym, out)
        return out

    def decode(self, ids: list[int], chunk_len: int, action_dim: int) -> np.ndarray:
        syms = self.expand(ids)
        if len(syms) != chunk_len * action_dim:
            raise TokenizerError(
                f"wrong coefficient count: got {len(syms)}, "
                f"need {chunk_len * action_dim}"
            )
        q = np.array(syms, dtype=np.float64).reshape(action_dim, chunk_len)
        coeffs = (q - self.base_vocab // 2) / self.quant_scale
        return nm.idct(coeffs).T

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"quant_scale={self.quant_scale} base_vocab={self.base_vocab} "
                f"special_offset={self.special_offset}\n"
            )
            for left, right, new_id in self.merges:
                fh.write(f"{left} {right} -> {new_id}\n")

    @classmethod
    def load(cls, path: str) -> "ActionTokenizer":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines:
            raise TokenizerError("empty tokenizer file")
        header = dict(kv.split("=") for kv in lines[0].split())
        try:
            qs = int(header["quant_scale"])
            bv = int(header["base_vocab"])
            so = int(header["special_offset"])
        except (KeyError, ValueError) as e:
            raise TokenizerError(f"bad tokenizer header: {lines[0]!r}") from e
        merges = []
        for ln in lines[1:]:
            parts = ln.replace("->", " ").split()
            if len(parts) != 3:
                raise TokenizerError(f"bad merge line: {ln!r}")
            merges.append((int(parts[0]), int(parts[1]), int(parts[2])))
        return cls(qs, bv, so, merges)


def train_tokenizer(
    chunks: list[np.ndarray],
    cfg: ModelConfig,
    target_merges: int | None = None,
) -> ActionTokenizer:
    """Fit BPE merges on the base-symbol sequences of a chunk corpus."""
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab)
    corpus = [tok.base_symbols(c) for c in chunks]
    n = cfg.max_merges if target_merges is None else min(target_merges, cfg.max_merges)
    tok.merges = bpe_train(corpus, n, cfg.base_vocab)
    tok.__post_init__()
    return tok


# ---------------------------------------------------------------------------
# Autoregressive decoding over action tokens. Token rows join the sequence at
# the split block and attend the whole prefix plus earlier action rows.

def _action_rows(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokenizer: ActionTokenizer,
    input_ids: np.ndarray,
) -> Tensor:
    """Teacher-forcing input rows: [start, emb(id_0), ..., emb(id_{T-2})].

    input_ids: (..., T) model ids; padding is marked with -1 and embeds as
    zero (pads sit at the end, nothing real attends them).
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    t = ids.shape[-1]
    if t > cfg.max_action_tokens:
        raise ValueError(f"action sequence of {t} exceeds max {cfg.max_action_tokens}")
    lead = ids.shape[:-1]
    start = nm.add(params["act_start"], Tensor(np.zeros(lead + (1, cfg.hidden_dim))))
    if t > 1:
        shifted = ids[..., :-1] - tokenizer.special_offset
        valid = shifted >= 0
        emb = nm.embedding(params["act_embed"], np.where(valid, shifted, 0))
        emb = nm.mul(emb, Tensor(valid[..., None].astype(np.float64)))
        rows = nm.concat([start, emb], axis=-2)
    else:
        rows = start
    pos = nm.tslice(params["act_pos"], 0, t)
    return nm.add(rows, pos)


def _action_logits(
    prefix: HiddenStates,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rows: Tensor,
    action_len: int,
) -> Tensor:
    """Run the upper blocks on [prefix | action rows]; logits per action row."""
    seq = nm.concat([prefix.tokens, rows], axis=-2)
    lay = prefix.layout
    layout = TokenLayout(
        lay.past_frames, lay.current_frames, lay.frame_tokens,
        lay.instr_len, lay.has_context, action_len,
    )
    mask = build_mask(cfg, compressed=True, action_len=action_len)
    h = HiddenStates(prefix.block_index, seq, layout)
    out = forward_upper(h, params, cfg, mask)
    acts = nm.tslice(out.tokens, layout.rows - action_len, layout.rows)
    return nm.add(nm.matmul(acts, params["act_out_w"]), params["act_out_b"])


def ar_loss(
    prefix: HiddenStates,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokenizer: ActionTokenizer,
    target_ids: np.ndarray,
) -> Tensor:
    """Mean next-token cross-entropy over the encoded chunk.

    target_ids: (..., T) model ids, right-padded with -1; padded positions
    are excluded from the mean.
    """
    ids = np.asarray(target_ids, dtype=np.int64)
    rows = _action_rows(params, cfg, tokenizer, ids)
    logits = _action_logits(prefix, params, cfg, rows, ids.shape[-1])
    internal = ids - tokenizer.special_offset
    valid = internal >= 0
    if np.any(internal[valid] >= cfg.action_vocab):
        raise ValueError("target id outside the action vocabulary")
    return nm.cross_entropy(logits, np.where(valid, internal, 0), valid)


def ar_sample(
    prefix: HiddenStates,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokenizer: ActionTokenizer,
    max_len: int | None = None,
) -> list[int]:
    """Greedy decode until the expanded symbols cover one chunk exactly.

    Raises DecodeError when the budget runs out mid-chunk or a merge overshoots
    the expected coefficient count.
    """
    limit = cfg.max_action_tokens if max_len is None else max_len
    need = cfg.chunk_size
    ids: list[int] = []
    have = 0
    with nm.no_grad():
        while have < need:
            if len(ids) >= limit:
                raise DecodeError(f"hit max_len {limit} with {have}/{need} coefficients")
            # The trailing slot is dropped by _action_rows; it only sets the
            # row count so the last row predicts the next token.
            inp = np.array(ids + [tokenizer.special_offset], dtype=np.int64)
            rows = _action_rows(params, cfg, tokenizer, inp)
            logits = _action_logits(prefix, params, cfg, rows, len(ids) + 1)
            nxt = int(np.argmax(logits.data[..., -1, :], axis=-1))
            if nxt >= tokenizer.vocab:
                raise DecodeError(f"decoded id {nxt} outside the tokenizer vocabulary")
            tok_id = nxt + tokenizer.special_offset
            sym_count = len(tokenizer.expand([tok_id]))
            if have + sym_count > need:
                raise DecodeError("decoded token overshoots the coefficient count")
            ids.append(tok_id)
            have += sym_count
    return ids
