import numpy as np
import pytest

import ctxpolicy.numerics as nm
from ctxpolicy.backbone import ModelConfig, encode_prefix, init_params
from ctxpolicy.decoders import (
    ActionTokenizer,
    DecodeError,
    TokenizerError,
    ar_loss,
    ar_sample,
    bpe_train,
    flow_head,
    flow_loss,
    flow_noise,
    flow_sample,
    tau_embedding,
    train_tokenizer,
)
from ctxpolicy.train import OptState, TrainConfig, adamw_step, collect_grads

TINY = ModelConfig(history_len=1, chunk_len=4, num_blocks=2, split_block=1,
                   hidden_dim=16, heads=2, instr_len=4, image_h=16, image_w=16,
                   patch_size=8, mlp_ratio=2, flow_hidden=32, tau_dim=4)


def rand_params(cfg, seed=0):
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 999)
    for p in params.values():
        if not p.data.any():
            p.data[...] = rng.normal(0, 0.05, p.data.shape)
    return params


def tiny_prefix(cfg, params, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(cfg.frames, cfg.views, cfg.image_h,
                                        cfg.image_w, cfg.image_c), dtype=np.uint8)
    with nm.no_grad():
        return encode_prefix(frames, np.zeros(cfg.instr_len, dtype=np.int64),
                             params, cfg)


# ---------------------------------------------------------------------------
# Flow matching.

def test_flow_noise_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    chunk = rng.normal(size=(8, 4))
    eps = rng.normal(size=(8, 4))
    assert np.array_equal(flow_noise(chunk, eps, 0.0), eps)
    assert np.array_equal(flow_noise(chunk, eps, 1.0), chunk)
    mid = flow_noise(chunk, eps, 0.25)
    assert np.allclose(mid, 0.25 * chunk + 0.75 * eps, atol=1e-15)


def test_flow_noise_validation():
    with pytest.raises(ValueError):
        flow_noise(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)
    with pytest.raises(ValueError):
        flow_noise(np.zeros((2, 2)), np.zeros((2, 2)), 1.5)
    with pytest.raises(ValueError):
        flow_noise(np.zeros((2, 2)), np.zeros((2, 2)), -0.1)


def test_flow_noise_batched_tau():
    rng = np.random.default_rng(1)
    chunk = rng.normal(size=(3, 8))
    eps = rng.normal(size=(3, 8))
    tau = np.array([0.0, 0.5, 1.0])
    out = flow_noise(chunk, eps, tau)
    assert np.array_equal(out[0], eps[0])
    assert np.allclose(out[1], 0.5 * (chunk[1] + eps[1]), atol=1e-15)
    assert np.array_equal(out[2], chunk[2])


def test_tau_embedding_values():
    emb = tau_embedding(0.25, 4)
    ang = 2 * np.pi * 0.25 * np.array([1.0, 2.0])
    assert np.allclose(emb, np.concatenate([np.sin(ang), np.cos(ang)]), atol=1e-15)
    assert tau_embedding(np.zeros(5), 8).shape == (5, 8)


def test_flow_head_flat_matches_batched():
    cfg = TINY
    params = rand_params(cfg)
    rng = np.random.default_rng(2)
    feat = rng.normal(size=cfg.hidden_dim)
    noisy = rng.normal(size=cfg.chunk_size)
    with nm.no_grad():
        single = flow_head(params, cfg, nm.Tensor(feat), noisy, 0.3).data
        batched = flow_head(params, cfg, nm.Tensor(feat[None]),
                            noisy[None], np.array([0.3])).data
    assert single.shape == (cfg.chunk_size,)
    assert np.allclose(single, batched[0], atol=1e-12)


def test_flow_head_rejects_wrong_chunk_width():
    cfg = TINY
    params = rand_params(cfg)
    with pytest.raises(ValueError):
        flow_head(params, cfg, nm.Tensor(np.zeros(cfg.hidden_dim)),
                  np.zeros(cfg.chunk_size + 1), 0.5)


@pytest.mark.parametrize("steps", [1, 3, 7, 10, 100])
def test_euler_is_exact_on_analytic_field(steps):
    """v(x, tau) = (x - a) / (1 - tau) makes the probe path linear, so the
    Euler polyline lands on the target for any step count."""
    cfg = TINY
    rng = np.random.default_rng(42)
    target = rng.uniform(-1, 1, cfg.chunk_size)

    def field(x, tau):
        return (x - target) / (1.0 - tau)

    out = flow_sample({}, cfg, None, steps, np.random.default_rng(7),
                      predictor=field)
    assert out.shape == (cfg.chunk_len, cfg.action_dim)
    assert np.allclose(out.reshape(-1), target, atol=1e-10)


def test_flow_sample_zero_field_returns_noise():
    cfg = TINY
    params = init_params(cfg, seed=0)  # flow.w2/b2 are zero: v == 0
    out = flow_sample(params, cfg, nm.Tensor(np.zeros(cfg.hidden_dim)), 4,
                      np.random.default_rng(3))
    want = np.random.default_rng(3).standard_normal(cfg.chunk_size)
    assert np.allclose(out.reshape(-1), want, atol=1e-15)


def test_flow_sample_rejects_zero_steps():
    with pytest.raises(ValueError):
        flow_sample({}, TINY, None, 0, np.random.default_rng(0))


def test_flow_loss_backward_touches_head_params():
    cfg = TINY
    params = rand_params(cfg)
    rng = np.random.default_rng(4)
    feat = nm.Tensor(rng.normal(size=(2, cfg.hidden_dim)), requires_grad=True)
    chunk = rng.uniform(-1, 1, (2, cfg.chunk_len, cfg.action_dim))
    loss = flow_loss(params, cfg, feat, chunk, np.random.default_rng(5))
    grads = collect_grads(loss, params)
    assert np.isfinite(loss.item())
    for name in ("flow.w1", "flow.b1", "flow.w2", "flow.b2"):
        assert np.any(grads[name] != 0), name
    assert feat.grad is not None and np.any(feat.grad != 0)


# ---------------------------------------------------------------------------
# Tokenizer: quantization bounds and BPE against an independent reference.

def random_chunks(n, chunk_len=8, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, (chunk_len, dim)) for _ in range(n)]


def test_round_trip_error_bound():
    tok = ActionTokenizer()
    worst_coeff = 0.0
    worst_val = 0.0
    for chunk in random_chunks(200, seed=10):
        back = tok.decode(tok.encode(chunk), 8, 4)
        dc = np.abs(nm.dct(chunk.T) - nm.dct(back.T)).max()
        worst_coeff = max(worst_coeff, dc)
        # orthonormal inverse: value error is the coefficient error times
        # at most sqrt(chunk_len)
        worst_val = max(worst_val, np.abs(chunk - back).max())
    assert worst_coeff <= 0.5 / tok.quant_scale + 1e-12
    assert worst_val <= np.sqrt(8) * 0.5 / tok.quant_scale + 1e-12


def test_encode_is_lossless_past_quantization():
    chunks = random_chunks(60, seed=11)
    tok = train_tokenizer(chunks, ModelConfig())
    assert len(tok.merges) > 0
    for chunk in chunks:
        assert tok.expand(tok.encode(chunk)) == tok.base_symbols(chunk)


def test_merges_never_lengthen():
    chunks = random_chunks(60, seed=12)
    tok = train_tokenizer(chunks, ModelConfig())
    for chunk in random_chunks(30, seed=13):
        assert len(tok.encode(chunk)) <= len(tok.base_symbols(chunk))


def test_encode_offsets_ids_into_model_range():
    cfg = ModelConfig()
    chunks = random_chunks(20, seed=14)
    tok = train_tokenizer(chunks, cfg)
    for chunk in chunks:
        ids = tok.encode(chunk)
        assert all(cfg.text_vocab <= i < cfg.text_vocab + tok.vocab for i in ids)


def bpe_reference(corpus, target_merges, base_vocab):
    """Recount-every-round reference with explicit tie handling."""
    from collections import Counter

    seqs = [list(s) for s in corpus]
    merges = []
    nid = base_vocab
    for _ in range(target_merges):
        counts = Counter()
        for s in seqs:
            for i in range(len(s) - 1):
                counts[(s[i], s[i + 1])] += 1
        best_pair, best_n = None, 0
        for pair in sorted(counts):
            if counts[pair] > best_n:
                best_pair, best_n = pair, counts[pair]
        if best_n < 2:
            break
        merges.append((best_pair[0], best_pair[1], nid))
        nxt = []
        for s in seqs:
            r, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == best_pair:
                    r.append(nid)
                    i += 2
                else:
                    r.append(s[i])
                    i += 1
            nxt.append(r)
        seqs = nxt
        nid += 1
    return merges


@pytest.mark.parametrize("seed", range(10))
def test_bpe_matches_reference(seed):
    rng = np.random.default_rng(seed)
    corpus = [list(rng.integers(0, 6, size=rng.integers(0, 30)))
              for _ in range(rng.integers(1, 12))]
    got = bpe_train(corpus, 20, base_vocab=8)
    want = bpe_reference(corpus, 20, base_vocab=8)
    assert got == want


def test_bpe_stops_below_two_occurrences():
    assert bpe_train([[1, 2, 3]], 10, base_vocab=4) == []
    merges = bpe_train([[1, 2, 1, 2]], 10, base_vocab=4)
    assert merges[0] == (1, 2, 4)
    # after merging, [4, 4] appears once; only that second merge can follow
    assert len(merges) <= 2


def test_bpe_rejects_negative_budget():
    with pytest.raises(ValueError):
        bpe_train([[1, 2]], -1, base_vocab=4)


def test_train_tokenizer_respects_merge_cap():
    cfg = ModelConfig()
    # a corpus with one dominant pair repeated everywhere still cannot
    # produce more than max_merges merges
    chunks = random_chunks(40, seed=15)
    tok = train_tokenizer(chunks, cfg)
    assert len(tok.merges) <= cfg.max_merges
    assert tok.vocab <= cfg.action_vocab
    tok2 = train_tokenizer(chunks, cfg, target_merges=3)
    assert len(tok2.merges) <= 3


def test_tokenizer_rejects_out_of_range_values():
    tok = ActionTokenizer()
    with pytest.raises(TokenizerError):
        tok.base_symbols(np.full((8, 4), 100.0))
    with pytest.raises(TokenizerError):
        tok.base_symbols(np.zeros(8))


def test_decode_validates_count_and_range():
    tok = ActionTokenizer()
    ids = tok.encode(random_chunks(1, seed=16)[0])
    with pytest.raises(TokenizerError):
        tok.decode(ids[:-1], 8, 4)
    with pytest.raises(TokenizerError):
        tok.expand([tok.special_offset + tok.vocab])
    with pytest.raises(TokenizerError):
        tok.expand([tok.special_offset - 1])


def test_tokenizer_save_load_round_trip(tmp_path):
    chunks = random_chunks(30, seed=17)
    tok = train_tokenizer(chunks, ModelConfig())
    path = str(tmp_path / "tok.txt")
    tok.save(path)
    back = ActionTokenizer.load(path)
    assert back.quant_scale == tok.quant_scale
    assert back.base_vocab == tok.base_vocab
    assert back.special_offset == tok.special_offset
    assert back.merges == tok.merges
    chunk = chunks[0]
    assert back.encode(chunk) == tok.encode(chunk)


def test_tokenizer_load_errors(tmp_path):
    p = tmp_path / "tok.txt"
    p.write_text("")
    with pytest.raises(TokenizerError):
        ActionTokenizer.load(str(p))
    p.write_text("quant_scale=64 base_vocab=512\n")
    with pytest.raises(TokenizerError):
        ActionTokenizer.load(str(p))
    p.write_text("quant_scale=64 base_vocab=512 special_offset=32\n1 2 3 4\n")
    with pytest.raises(TokenizerError):
        ActionTokenizer.load(str(p))


def test_tokenizer_parameter_validation():
    with pytest.raises(TokenizerError):
        ActionTokenizer(quant_scale=0)
    with pytest.raises(TokenizerError):
        ActionTokenizer(base_vocab=1)


# ---------------------------------------------------------------------------
# Autoregressive head.

def test_ar_loss_is_uniform_at_zero_logits():
    cfg = TINY
    params = init_params(cfg, seed=0)  # zero blocks and zero act_out_w
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab)
    prefix = tiny_prefix(cfg, params)
    chunk = random_chunks(1, chunk_len=cfg.chunk_len, dim=cfg.action_dim,
                          seed=18)[0]
    ids = np.array(tok.encode(chunk), dtype=np.int64)
    with nm.no_grad():
        loss = ar_loss(prefix, params, cfg, tok, ids)
    assert abs(loss.item() - np.log(cfg.action_vocab)) < 1e-12


def test_ar_loss_ignores_padding():
    cfg = TINY
    params = rand_params(cfg)
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab)
    prefix = tiny_prefix(cfg, params)
    chunk = random_chunks(1, chunk_len=cfg.chunk_len, dim=cfg.action_dim,
                          seed=19)[0]
    ids = np.array(tok.encode(chunk), dtype=np.int64)
    padded = np.concatenate([ids, [-1]])
    with nm.no_grad():
        a = ar_loss(prefix, params, cfg, tok, ids).item()
        b = ar_loss(prefix, params, cfg, tok, padded).item()
    assert abs(a - b) < 1e-12


def test_ar_loss_rejects_oversized_and_invalid_ids():
    cfg = TINY
    params = rand_params(cfg)
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab)
    prefix = tiny_prefix(cfg, params)
    too_long = np.zeros(cfg.max_action_tokens + 1, dtype=np.int64)
    with pytest.raises(ValueError):
        ar_loss(prefix, params, cfg, tok, too_long + tok.special_offset)
    bad = np.array([cfg.action_vocab + tok.special_offset], dtype=np.int64)
    with pytest.raises(ValueError):
        ar_loss(prefix, params, cfg, tok, bad)


def test_ar_sample_budget_error():
    cfg = TINY
    params = init_params(cfg, seed=0)
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab)
    prefix = tiny_prefix(cfg, params)
    with pytest.raises(DecodeError):
        ar_sample(prefix, params, cfg, tok, max_len=cfg.chunk_size - 1)


def test_ar_sample_rejects_out_of_vocab_argmax():
    cfg = TINY
    params = init_params(cfg, seed=0)
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab,
                          merges=[])
    assert tok.vocab < cfg.action_vocab
    params["act_out_b"].data[tok.vocab + 5] = 10.0
    prefix = tiny_prefix(cfg, params)
    with pytest.raises(DecodeError):
        ar_sample(prefix, params, cfg, tok)


def test_ar_overfits_one_chunk_and_decodes_it_back():
    """A few hundred steps on a single window should drive the next-token
    loss near zero, after which greedy decoding must reproduce the ids."""
    cfg = TINY
    params = rand_params(cfg, seed=3)
    tok = ActionTokenizer(cfg.quant_scale, cfg.base_vocab, cfg.text_vocab)
    prefix = tiny_prefix(cfg, params, seed=20)
    chunk = random_chunks(1, chunk_len=cfg.chunk_len, dim=cfg.action_dim,
                          seed=21)[0]
    ids = np.array(tok.encode(chunk), dtype=np.int64)

    tcfg = TrainConfig(lr=3e-3, warmup_iters=10, total_iters=400, batch=1)
    state = OptState.init(params)
    loss_val = None
    for it in range(tcfg.total_iters):
        loss = ar_loss(prefix, params, cfg, tok, ids)
        grads = collect_grads(loss, params)
        adamw_step(params, grads, state, tcfg, it)
        loss_val = loss.item()
        if loss_val < 5e-3:
            break
    assert loss_val < 5e-3
    got = ar_sample(prefix, params, cfg, tok)
    assert got == list(ids)
    back = tok.decode(got, cfg.chunk_len, cfg.action_dim)
    assert np.abs(back - chunk).max() <= np.sqrt(cfg.chunk_len) * 0.5 / tok.quant_scale + 1e-12
