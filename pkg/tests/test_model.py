import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgelora.errors import AdapterError, ConfigError, FormatError, InputError
from edgelora.lora import LoraConfig, init_adapter
from edgelora.model import (
    PRESETS,
    Backbone,
    BackboneConfig,
    Classifier,
    attach_head,
    closed_form_param_count,
    count_params,
    extend_head,
    forward,
)

from conftest import random_tokens
from oracles import shape_count


def test_init_is_deterministic_per_seed():
    cfg = BackboneConfig(vocab_size=50, seed=11)
    assert Backbone.init(cfg).to_bytes() == Backbone.init(cfg).to_bytes()
    assert Backbone.init(cfg).to_bytes() != Backbone.init(BackboneConfig(vocab_size=50, seed=12)).to_bytes()


def test_width_must_divide_by_heads():
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=65, n_heads=4)


def test_default_param_count_matches_shape_oracle():
    cfg = BackboneConfig()
    assert shape_count(cfg) == 4096 * 64 + 64 * 64 + 2 * 33472
    assert Backbone.init(cfg).count_params() == shape_count(cfg) == closed_form_param_count(cfg)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_param_counts(name):
    cfg = PRESETS[name]
    assert count_params(Backbone.init(cfg)) == shape_count(cfg)


def test_rank8_adapter_count_is_4096():
    bb = Backbone.init(BackboneConfig(vocab_size=30))
    adapter = init_adapter(LoraConfig(rank=8), bb, 0, (0, 1), seed=0)
    assert count_params(adapter) == 2 * 2 * (8 * 64 + 64 * 8) == 4096
    assert count_params(None) == 0 and count_params([]) == 0


def test_attach_head_shape_and_checks():
    head = attach_head((0, 1, 2), 64, seed=1)
    assert head.weight.shape == (3, 64) and head.bias.shape == (3,)
    np.testing.assert_array_equal(head.weight.value, attach_head((0, 1, 2), 64, seed=1).weight.value)
    with pytest.raises(ConfigError):
        attach_head((0, 0, 1), 64, seed=1)
    with pytest.raises(ConfigError):
        attach_head((), 64, seed=1)


def test_extend_head_copies_inherited_rows_and_masks_them():
    old = attach_head((1, 4), 8, seed=0)
    new = extend_head(old, (0, 1, 4), 8, seed=5, freeze_inherited=True)
    np.testing.assert_array_equal(new.weight.value[1:], old.weight.value)
    assert new.frozen_rows == (1, 2)
    assert new.weight.mask[:, 0].tolist() == [1, 0, 0]


def reference_forward(bb, head, ids):
    """Loop-by-loop evaluation of one sequence, written without the layer classes."""
    P = {k: p.value.astype(np.float64) for k, p in bb.params.items()}
    cfg = bb.config
    n = len(ids)
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    valid = [i == 0 or ids[i] != 0 for i in range(n)]
    x = [[P["tok_emb"][ids[i]][j] + P["pos_emb"][i][j] for j in range(d)] for i in range(n)]

    def lin(rows, w, b):
        return [[sum(r[k] * w[o][k] for k in range(len(r))) + b[o] for o in range(len(b))] for r in rows]

    def norm(rows, g, b):
        out = []
        for r in rows:
            mu = sum(r) / len(r)
            var = sum((v - mu) ** 2 for v in r) / len(r)
            out.append([(v - mu) / math.sqrt(var + 1e-5) * g[j] + b[j] for j, v in enumerate(r)])
        return out

    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        q, k, v = (lin(x, P[p + f"attn.{t}.weight"], P[p + f"attn.{t}.bias"]) for t in "qkv")
        ctx = [[0.0] * d for _ in range(n)]
        for hd in range(h):
            cols = range(hd * dh, (hd + 1) * dh)
            for i in range(n):
                s = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) if valid[j] else -math.inf
                     for j in range(n)]
                top = max(s)
                e = [math.exp(t - top) for t in s]
                z = sum(e)
                for c in cols:
                    ctx[i][c] = sum(e[j] / z * v[j][c] for j in range(n))
        att = lin(ctx, P[p + "attn.o.weight"], P[p + "attn.o.bias"])
        x = norm([[a + b for a, b in zip(r, s)] for r, s in zip(x, att)], P[p + "ln1.gain"], P[p + "ln1.bias"])
        hid = lin(x, P[p + "ff.fc1.weight"], P[p + "ff.fc1.bias"])
        hid = [[0.5 * t * (1 + math.tanh(math.sqrt(2 / math.pi) * (t + 0.044715 * t ** 3))) for t in r]
               for r in hid]
        ff = lin(hid, P[p + "ff.fc2.weight"], P[p + "ff.fc2.bias"])
        x = norm([[a + b for a, b in zip(r, s)] for r, s in zip(x, ff)], P[p + "ln2.gain"], P[p + "ln2.bias"])
    return lin([x[0]], head.weight.value.astype(np.float64), head.bias.value.astype(np.float64))[0]


def test_two_token_forward_matches_hand_evaluation():
    cfg = BackboneConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8, vocab_size=6, max_len=2, seed=4)
    bb = Backbone.init(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    for p in bb.params.values():
        p.value += rng.normal(0, 0.5, size=p.shape)
    head = attach_head((0, 1, 2), 4, seed=2, dtype=np.float64)
    ids = np.array([2, 5])
    np.testing.assert_allclose(forward(bb, None, head, ids)[0], reference_forward(bb, head, ids), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_matches_reference_with_padding(seed):
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(n_layers=2, d_model=4, n_heads=2, d_ff=6, vocab_size=9, max_len=4, seed=seed)
    bb = Backbone.init(cfg, dtype=np.float64)
    for p in bb.params.values():
        p.value += rng.normal(0, 0.5, size=p.shape)
    head = attach_head((3, 7), 4, seed=seed, dtype=np.float64)
    ids = random_tokens(rng, 1, cfg)[0]
    np.testing.assert_allclose(forward(bb, None, head, ids)[0], reference_forward(bb, head, ids), atol=1e-10)


def test_single_cls_token_has_defined_logits(tiny_backbone):
    head = attach_head((0, 1), tiny_backbone.config.d_model, 0)
    out = forward(tiny_backbone, None, head, np.array([2]))
    assert out.shape == (1, 2) and np.all(np.isfinite(out))


def test_token_out_of_vocab_is_input_error(tiny_backbone):
    head = attach_head((0, 1), tiny_backbone.config.d_model, 0)
    with pytest.raises(InputError):
        forward(tiny_backbone, None, head, np.array([2, 40]))


def test_adapter_for_another_shape_is_adapter_error(tiny_backbone):
    other = Backbone.init(BackboneConfig(n_layers=2, d_model=8, n_heads=4, d_ff=16, vocab_size=40, max_len=10))
    adapter = init_adapter(LoraConfig(rank=2), other, 0, (0, 1), seed=0,
                           head=attach_head((0, 1), 16, 0))
    with pytest.raises(AdapterError):
        forward(tiny_backbone, adapter, adapter.head, np.array([2, 5]))


def test_zero_b_adapter_is_an_exact_noop(tiny_backbone):
    rng = np.random.default_rng(1)
    head = attach_head((0, 1, 2), 16, 3)
    adapter = init_adapter(LoraConfig(rank=4), tiny_backbone, 0, (0, 1, 2), 1, head=head)
    ids = random_tokens(rng, 20, tiny_backbone.config)
    np.testing.assert_array_equal(forward(tiny_backbone, adapter, head, ids),
                                  forward(tiny_backbone, None, head, ids))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one_over_real_tokens(seed):
    rng = np.random.default_rng(seed)
    bb = Backbone.init(BackboneConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, vocab_size=12, max_len=6))
    clf = Classifier(bb, attach_head((0, 1, 2, 3), 8, seed))
    ids = random_tokens(rng, 3, bb.config)
    logits = clf.forward(ids)
    assert logits.shape == (3, 4)
    for w in clf.attention_weights():
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
        pad = (ids == 0)
        pad[:, 0] = False
        assert not w[np.broadcast_to(pad[:, None, None, :], w.shape)].any()


def test_checkpoint_round_trip_and_fingerprint(tmp_path, tiny_backbone):
    path = tmp_path / "b.bin"
    tiny_backbone.save(path)
    back = Backbone.load(path)
    assert back.to_bytes() == tiny_backbone.to_bytes()
    assert back.fingerprint() == tiny_backbone.fingerprint()
    raw = path.read_bytes()
    assert raw[:4] == b"MBKB"


def test_checkpoint_corruption_detected(tiny_backbone):
    raw = bytearray(tiny_backbone.to_bytes())
    raw[100] ^= 0x10
    with pytest.raises(FormatError):
        Backbone.from_bytes(bytes(raw))
    with pytest.raises(FormatError):
        Backbone.from_bytes(b"XXXX" + bytes(raw[4:]))
