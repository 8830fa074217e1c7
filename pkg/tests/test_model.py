import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alice3d import tensor as T
from alice3d.gradcheck import grad_check
from alice3d.model import (
    ModelConfig,
    alice_forward,
    casa_align,
    decode_full,
    ema_update,
    encode_target,
    encode_visible,
    global_cls,
    init_casa,
    init_model,
    project_head,
    _to_params,
)
from alice3d.trainer import compute_loss
from alice3d.volume import mask_random

from conftest import micro_setup


# -- CASA against an element-wise oracle ------------------------------------------
def _oracle_layer_norm(row, gain, bias, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)]


def casa_oracle(p, V, src, eps=1e-5):
    """Scalar loops; shares no code with the vectorised implementation."""
    c = p["w_q"].shape[1]

    def proj(rows, w):
        return [[sum(r[i] * w[i][j] for i in range(len(r))) for j in range(w.shape[1])] for r in rows]

    qn = [_oracle_layer_norm(r, p["ln_q.g"], p["ln_q.b"], eps) for r in V]
    kn = [_oracle_layer_norm(r, p["ln_kv.g"], p["ln_kv.b"], eps) for r in src]
    q, k, v = proj(qn, p["w_q"]), proj(kn, p["w_k"]), proj(kn, p["w_v"])
    out = []
    for qi in q:
        scores = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(c) for kj in k]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        z = sum(w)
        mixed = [sum(w[j] / z * v[j][d] for j in range(len(v))) for d in range(c)]
        out.append([sum(mixed[i] * p["zeta.w"][i][o] for i in range(c)) + p["zeta.b"][o] for o in range(p["zeta.w"].shape[1])])
    return np.array(out)


def _casa_instance(seed, n_m=3, n=4, c=8):
    rng = np.random.default_rng(seed)
    arrays = init_casa(ModelConfig(embed_dim=c, heads=1, depth=1), rng)
    # move away from the unit/zero LN init so gain and bias are exercised
    for k in arrays:
        arrays[k] = arrays[k] + rng.normal(scale=0.3, size=arrays[k].shape)
    return arrays, rng.normal(size=(n_m, c)), rng.normal(size=(n, c))


@pytest.mark.parametrize("seed", range(20))
def test_casa_matches_oracle(seed):
    arrays, V, src = _casa_instance(seed)
    got = casa_align(_to_params(arrays, False), V, src).data
    np.testing.assert_allclose(got, casa_oracle(arrays, V, src), rtol=0, atol=1e-10)


def test_casa_single_key_is_its_value():
    arrays, V, src = _casa_instance(3, n_m=2, n=1)
    p = _to_params(arrays, False)
    out, att = casa_align(p, V, src, return_attention=True)
    np.testing.assert_array_equal(att.data, 1.0)
    kv = T.layer_norm(T.Tensor(src), arrays["ln_kv.g"], arrays["ln_kv.b"]).data @ arrays["w_v"]
    expect = kv @ arrays["zeta.w"] + arrays["zeta.b"]
    np.testing.assert_allclose(out.data, np.repeat(expect, 2, axis=0), atol=1e-12)


def test_casa_empty_query_rejected():
    arrays, _, src = _casa_instance(0)
    with pytest.raises(ValueError):
        casa_align(_to_params(arrays, False), np.zeros((0, 8)), src)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_casa_attention_rows_and_key_permutation(seed):
    arrays, V, src = _casa_instance(seed, n_m=3, n=5)
    p = _to_params(arrays, False)
    out, att = casa_align(p, V, src, return_attention=True)
    np.testing.assert_allclose(att.data.sum(-1), 1.0, atol=1e-12)
    perm = np.random.default_rng(seed).permutation(5)
    np.testing.assert_allclose(casa_align(p, V, src[perm]).data, out.data, atol=1e-12)


# -- encoder / decoder ------------------------------------------------------------
def test_encoder_sees_visible_tokens_only(micro):
    cfg, state, bundle = micro
    tokens = bundle.tokens["uQ"].copy()
    masks = bundle.masks["uQ"]
    V = encode_visible(state, tokens, masks).data
    assert V.shape == (cfg.train.batch_size, masks[0].n_visible, cfg.model.embed_dim)
    for b, m in enumerate(masks):
        tokens[b, m.masked] = np.random.default_rng(b).normal(size=tokens[b, m.masked].shape)
    assert encode_visible(state, tokens, masks).data.tobytes() == V.tobytes()


def test_decoder_outputs_every_position(micro):
    cfg, state, bundle = micro
    V = encode_visible(state, bundle.tokens["uQ"], bundle.masks["uQ"])
    feats, recon = decode_full(state, V, bundle.masks["uQ"])
    b, n = cfg.train.batch_size, cfg.model.n_tokens
    assert feats.shape == (b, n, cfg.model.embed_dim)
    assert recon.shape == (b, n, cfg.model.patch_voxels)


def test_target_starts_as_copy_of_online():
    state = init_model(ModelConfig(embed_dim=8, depth=1, heads=2, n_tokens=4, patch_voxels=64), 5)
    for k, p in state.target.items():
        assert p.data.tobytes() == state.encoder[k].data.tobytes()
    for k, p in state.psi.items():
        assert p.data.tobytes() == state.phi[k].data.tobytes()
    assert all(not p.requires_grad for p in state.target_params().values())


def test_cls_is_mean_of_projected_tokens(micro):
    cfg, state, bundle = micro
    y = project_head(state.psi, encode_target(state, bundle.tokens["wQ"]))
    np.testing.assert_allclose(global_cls(y).data, y.data.mean(axis=-2), atol=1e-15)


# -- EMA --------------------------------------------------------------------------
@pytest.mark.parametrize("m", [0.0, 0.5, 0.996, 1.0])
def test_ema_update_exact(m):
    state = init_model(ModelConfig(embed_dim=8, depth=1, heads=2, n_tokens=4, patch_voxels=64), 1)
    rng = np.random.default_rng(0)
    for p in state.online_params().values():
        p.data += rng.normal(scale=0.1, size=p.shape)
    before = {k: p.data.copy() for k, p in state.target_params().items()}
    ema_update(state, m)
    for group, src in state.EMA_SOURCE.items():
        if getattr(state, group) is None:
            continue
        for k, p in getattr(state, group).items():
            expect = m * before[f"{group}.{k}"] + (1 - m) * getattr(state, src)[k].data
            assert np.array_equal(p.data, expect)
    if m == 1.0:
        for k, p in state.target_params().items():
            assert np.array_equal(p.data, before[k])


def test_ema_rejects_out_of_range():
    state = init_model(ModelConfig(embed_dim=8, depth=1, heads=2, n_tokens=4, patch_voxels=64), 1)
    with pytest.raises(ValueError):
        ema_update(state, 1.5)


# -- stop-gradient ------------------------------------------------------------------
def test_backward_leaves_teacher_side_without_gradients(micro):
    cfg, state, bundle = micro
    total, _, fb = compute_loss(state, bundle, cfg.train)
    total.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in state.target_params().values())
    for v in ("wQ", "vK"):
        assert not fb.T[v].requires_grad and not fb.Y[v].requires_grad
    assert any(p.grad is not None and np.any(p.grad) for p in state.casa.values())


def test_full_graph_gradient_check_one_seed():
    cfg, state, bundle = micro_setup(0)
    frozen = alice_forward(state, bundle.tokens, bundle.masks)
    online = state.online_params()
    state.zero_grad()
    f = lambda: compute_loss(state, bundle, cfg.train, frozen_teacher=frozen)[0]
    assert grad_check(f, list(online.values())).passed
