"""Layered modules against the straight-line oracles, plus their invariants."""
import numpy as np
import pytest

import oracles as O
from mrg import tensor as T
from mrg.answer import AnswerSelector, answer_loss, extract
from mrg.decoder import ResponseDecoder
from mrg.encoder import LSTM, BiLSTM, Embedding
from mrg.hier import HierarchicalAttention
from mrg.mcam import CrossAttention, MCAMStack, MemoryUpdater
from mrg.module import Init, Trace
from mrg.tensor import Tensor

SEEDS = range(20)
D, H = 8, 2


def init(seed, std=0.3):
    return Init(np.random.default_rng(seed), std, np.float64)


def cam_weights(cam):
    return tuple(p.data for p in (cam.w_query, cam.w_key, cam.w_value, cam.w_out, cam.ln_gain, cam.ln_bias))


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ------------------------------------------------------------------ encoder


@pytest.mark.parametrize("seed", range(5))
def test_lstm_matches_stepwise_oracle_and_skips_padding(seed):
    rng = np.random.default_rng(seed)
    lstm = LSTM(init(seed), 3, 4)
    x = rand(rng, 2, 5, 3)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]])
    fwd = lstm(Tensor(x), mask).data
    bwd = lstm(Tensor(x), mask, reverse=True).data
    args = (lstm.w_input.data, lstm.w_hidden.data, lstm.bias.data)
    for b in range(2):
        n = int(mask[b].sum())
        h = c = np.zeros(4)
        for t in range(n):
            h, c = O.lstm_step(x[b, t], h, c, *args)
            np.testing.assert_allclose(fwd[b, t], h, atol=1e-12)
        h = c = np.zeros(4)
        for t in reversed(range(n)):  # the backward pass starts at the last real token
            h, c = O.lstm_step(x[b, t], h, c, *args)
            np.testing.assert_allclose(bwd[b, t], h, atol=1e-12)
        assert not fwd[b, n:].any() and not bwd[b, n:].any()


def test_lstm_forget_bias_initialised_to_one():
    lstm = LSTM(init(0), 3, 4)
    np.testing.assert_array_equal(lstm.bias.data, [0] * 4 + [1] * 4 + [0] * 8)


def test_bilstm_width_and_odd_hidden_rejected():
    enc = BiLSTM(init(0), 3, 6)
    out = enc(Tensor(np.ones((1, 2, 3))), np.ones((1, 2)))
    assert out.shape == (1, 2, 6)
    with pytest.raises(ValueError):
        BiLSTM(init(0), 3, 5)


# --------------------------------------------------------------------- CAM


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_attention_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = CrossAttention(init(seed), D, H)
    cam.ln_gain.data = 1 + 0.2 * rand(rng, D)
    cam.ln_bias.data = 0.2 * rand(rng, D)
    q, kv = rand(rng, 1, 4, D), rand(rng, 1, 6, D)
    kmask = np.array([[1, 1, 0, 1, 1, 0]])
    out = cam(Tensor(q), Tensor(kv), kmask).data[0]
    expected, alpha = O.cam(q[0], kv[0], kmask[0], *cam_weights(cam), H)
    np.testing.assert_allclose(out, expected, atol=1e-6)
    _, got_alpha = cam.attend(Tensor(q), Tensor(kv), kmask)
    np.testing.assert_allclose(got_alpha.data[0], alpha, atol=1e-6)


def test_cross_attention_rejects_query_with_no_keys():
    cam = CrossAttention(init(0), D, H)
    with pytest.raises(ValueError):
        cam(Tensor(np.ones((1, 2, D))), Tensor(np.ones((1, 3, D))), np.zeros((1, 3)))
    # fully masked keys are fine for a padded (masked) query row
    out = cam(Tensor(np.ones((2, 2, D))), Tensor(np.ones((2, 3, D))),
              np.array([[1, 1, 1], [0, 0, 0]]), query_mask=np.array([[1, 1], [0, 0]]))
    assert not out.data[1].any()


def test_cross_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        CrossAttention(init(0), 6, 4)


@pytest.mark.parametrize("seed", SEEDS)
def test_memory_updater_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    up = MemoryUpdater(init(seed), D, H)
    m, memory = rand(rng, 1, 4, D), rand(rng, 1, 5, D)
    m_mask, mem_mask = np.ones((1, 4)), np.array([[1, 1, 1, 0, 0]])
    trace = Trace()
    n = up(Tensor(m), m_mask, Tensor(memory), mem_mask, trace).data[0]
    w = [p.data for p in (up.w_a, up.w_b, up.w_c, up.w_d)]
    exp_n, exp_z, exp_c = O.memory_update(m[0], memory[0], mem_mask[0], cam_weights(up.attention), *w, H)
    np.testing.assert_allclose(n, exp_n, atol=1e-6)
    z = trace["gate_z"][0][0][0]
    c = trace["candidate_c"][0][0][0]
    np.testing.assert_allclose(z, exp_z, atol=1e-6)
    # the gate is strictly inside (0, 1) and n lies between c and m
    assert ((z > 0) & (z < 1)).all()
    lo, hi = np.minimum(c, m[0]), np.maximum(c, m[0])
    assert ((n >= lo - 1e-12) & (n <= hi + 1e-12)).all()


def oracle_mcam(stack, h_x, tmask, umask, h_q, qmask, use_memory=True):
    """Layer-outer, utterance-inner composition of the oracle equations (one dialog)."""
    U, L, d = h_x.shape
    current = [h_x[j] for j in range(U)]
    for layer in stack.layers:
        memory, mem_mask = np.zeros((L, d)), np.zeros(L)
        outs = []
        for j in range(U):
            if not umask[j]:
                outs.append(np.zeros((L, d)))
                continue
            m = current[j]
            live = tmask[j].astype(bool)
            n = m
            if use_memory:
                w = [p.data for p in (layer.updater.w_a, layer.updater.w_b, layer.updater.w_c, layer.updater.w_d)]
                n, _, _ = O.memory_update(m[live], memory, mem_mask, cam_weights(layer.updater.attention), *w, H)
                n = np.vstack([n, np.zeros((L - live.sum(), d))])
            out, _ = O.cam(n[live], h_q, qmask, *cam_weights(layer.cross), H)
            out = np.vstack([out, np.zeros((L - live.sum(), d))])
            outs.append(out)
            memory, mem_mask = out[live], np.ones(live.sum())
        current = outs
    return np.stack(current)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("use_memory", [True, False])
def test_mcam_stack_matches_oracle_composition(seed, use_memory):
    rng = np.random.default_rng(seed)
    stack = MCAMStack(init(seed), D, H, layers=2)
    U, L = 3, 4
    tmask = np.array([[1, 1, 1, 0], [1, 1, 0, 0], [0, 0, 0, 0]], dtype=float)
    umask = np.array([1, 1, 0], dtype=float)
    h_x = rand(rng, U, L, D) * tmask[..., None]
    h_q, qmask = rand(rng, 3, D), np.array([1, 1, 0.0])
    got = stack(Tensor(h_x[None]), tmask[None], umask[None], Tensor(h_q[None]), qmask[None], use_memory).data[0]
    # the oracle drops masked rows entirely; masked memory rows must not matter
    qlive = qmask.astype(bool)
    want = oracle_mcam(stack, h_x, tmask, umask, h_q[qlive], np.ones(qlive.sum()), use_memory)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_mcam_learned_memory_is_a_parameter():
    stack = MCAMStack(init(0), D, H, layers=2, learned_memory=4)
    names = [n for n, _ in stack.named_parameters()]
    assert "initial_memory.0" in names and "initial_memory.1" in names


# ------------------------------------------------------------ hierarchy


@pytest.mark.parametrize("seed", range(5))
def test_hierarchical_attention_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    hier = HierarchicalAttention(init(seed), D, H)
    tmask = np.array([[1, 1, 1, 0], [1, 1, 0, 0], [0, 0, 0, 0]], dtype=float)
    umask = np.array([1, 1, 0.0])
    m = rand(rng, 3, 4, D)
    h_u, h_d = hier(Tensor(m[None]), tmask[None], umask[None])
    pooled = []
    for j in range(2):
        live = tmask[j].astype(bool)
        w, _ = O.cam(m[j][live], m[j][live], np.ones(live.sum()), *cam_weights(hier.word[0]), H)
        pooled.append(w.mean(axis=0))
    pooled = np.stack(pooled)
    u, _ = O.cam(pooled, pooled, np.ones(2), *cam_weights(hier.utterance), 1)
    np.testing.assert_allclose(h_u.data[0, :2], u, atol=1e-6)
    assert not h_u.data[0, 2].any()
    np.testing.assert_allclose(h_d.data[0], u.mean(axis=0), atol=1e-6)


# --------------------------------------------------------- answer head


def test_answer_selector_pads_missing_utterances_with_zeros():
    rng = np.random.default_rng(0)
    sel = AnswerSelector(init(0), D, max_utts=3, max_utt_len=2, hidden=5)
    h_u, h_q = rand(rng, 1, 2, D), rand(rng, 1, 3, D)
    qmask = np.array([[1, 1, 0]])
    logits = sel(Tensor(h_u), Tensor(h_q), qmask).data[0]
    feats = np.concatenate([h_u[0].ravel(), np.zeros(D), h_q[0, :2].mean(axis=0)])
    want = np.tanh(feats @ sel.w_e.data + sel.b_e.data) @ sel.w_f.data + sel.b_f.data
    np.testing.assert_allclose(logits, want, atol=1e-12)


def test_answer_loss_is_masked_mean_bce():
    logits = Tensor(np.array([[0.0, 2.0, -1.0, 5.0]]))
    gold = np.array([[1, 0, 1, 0.0]])
    mask = np.array([[1, 1, 1, 0.0]])
    sig = 1 / (1 + np.exp(-logits.data[0, :3]))
    want = -np.mean(gold[0, :3] * np.log(sig) + (1 - gold[0, :3]) * np.log(1 - sig))
    assert abs(answer_loss(logits, gold, mask).data - want) < 1e-12


def test_extract_threshold_and_padding():
    logits = np.array([[0.1, -0.1, 3.0, 9.0]])
    assert extract(logits, np.array([[1, 1, 1, 0]])) == [[0, 2]]
    assert extract(logits, np.ones((1, 4)), threshold=0.99) == [[3]]


# -------------------------------------------------------------- decoder


def decoder_args(dec):
    return (dec.lstm.w_input.data, dec.lstm.w_hidden.data, dec.lstm.bias.data,
            dec.w_s.data, dec.w_h.data, dec.w_n.data, dec.w_v.data, dec.b_v.data)


@pytest.mark.parametrize("seed", SEEDS)
def test_decoder_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    V, E = 11, 5
    dec = ResponseDecoder(init(seed), E, D, V, attn_dim=6)
    emb = Embedding(init(seed + 100), V, E)
    h_u, h_d = rand(rng, 1, 3, D), rand(rng, 1, D)
    umask = np.array([[1, 1, 0.0]])
    ctx = dec.context(Tensor(h_u), umask)
    state = dec.init_state(Tensor(h_d), ctx)
    Wi, Whh, b, Ws, Wh, wn, Wv, bv = decoder_args(dec)
    s, c, f = O.decoder_init(h_d[0], h_u[0], umask[0], dec.w_g.data, dec.b_g.data, Ws, Wh, wn)
    np.testing.assert_allclose(state.h.data[0], s, atol=1e-6)
    np.testing.assert_allclose(state.f.data[0], f, atol=1e-6)
    ys = rng.integers(4, V, size=4)
    total = 0.0
    prev = 2
    for y in ys:
        trace = Trace()
        logp, state = dec.step(state, np.array([prev]), emb, ctx, trace)
        s, c, f, gamma, p = O.decoder_step(emb.weight.data[prev], s, c, f, h_u[0], umask[0],
                                           Wi, Whh, b, Ws, Wh, wn, Wv, bv)
        np.testing.assert_allclose(np.exp(logp.data[0]), p, atol=1e-6)
        np.testing.assert_allclose(trace["decoder_gamma"][0][0][0], gamma, atol=1e-6)
        total -= np.log(p[y])
        prev = y
    # the teacher-forced loss is the same recursion run over the whole sequence
    inputs = np.array([[2, *ys[:-1]]])
    nll = dec.teacher_forced_nll(Tensor(h_d), ctx, emb, inputs, ys[None], np.ones((1, 4)))
    assert abs(nll.data[0] - total) < 1e-6


def test_decoder_rejects_dialog_with_no_utterances():
    dec = ResponseDecoder(init(0), 4, D, 7, 5)
    ctx = dec.context(Tensor(np.ones((1, 2, D))), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        dec.init_state(Tensor(np.ones((1, D))), ctx)


def test_gradients_flow_through_all_module_parameters():
    rng = np.random.default_rng(0)
    cam = CrossAttention(init(0), D, H)
    out = cam(Tensor(rand(rng, 1, 3, D)), Tensor(rand(rng, 1, 4, D)), np.ones((1, 4)))
    T.backward((out * rand(rng, 1, 3, D)).sum())
    assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in cam.parameters().values())
