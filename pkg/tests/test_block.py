import dataclasses
import math

import numpy as np
import pytest

import gha3d.block as block_mod
from gha3d.attention import gha_forward
from gha3d.block import (
    BlockConfig,
    GhaBlockParams,
    LayerParams,
    block_forward,
    init_params,
    layer_norm,
    load_params,
    save_params,
    xavier_bound,
    _dropout,
)
from gha3d.errors import ConfigError, FormatError, InvalidInputError, UnsupportedVersionError
from gha3d.hierarchy import build_hierarchy, with_values

PAIR_POSITIONS = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.0]]
)


def small_config(**kw):
    base = dict(n_layers=1, model_dim=4, ffn_dim=8, n_heads=1, seed=7,
                embedding_mode="none", dropout_enabled=False)
    base.update(kw)
    return BlockConfig(**base)


def zeroed(params):
    """All projection/FFN weights and biases zero; LayerNorm untouched."""
    zero_layers = []
    for lp in params.layers:
        repl = {
            name: np.zeros_like(getattr(lp, name))
            for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                         "w1", "b1", "w2", "b2")
        }
        zero_layers.append(dataclasses.replace(lp, **repl))
    return GhaBlockParams(config=params.config, embedding=params.embedding,
                          layers=tuple(zero_layers))


# ---------------------------------------------------------------------------
# Config / init
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(n_heads=3)  # does not divide 4
    with pytest.raises(ConfigError):
        small_config(attn_dropout=1.0)
    with pytest.raises(ConfigError):
        small_config(ffn_dropout=-0.1)
    with pytest.raises(ConfigError):
        small_config(n_layers=0)
    with pytest.raises(ConfigError):
        # head width 3 is odd, cannot host cos/sin pairs
        BlockConfig(n_layers=1, model_dim=6, ffn_dim=8, n_heads=2, embedding_mode="relative")
    assert small_config(model_dim=8, n_heads=2).head_dim == 4


def test_init_deterministic_and_zero_biases():
    cfg = small_config(n_layers=3, model_dim=8, ffn_dim=16, n_heads=2,
                       embedding_mode="relative")
    p1 = init_params(cfg)
    p2 = init_params(cfg)
    for l1, l2 in zip(p1.layers, p2.layers):
        for name in ("w_q", "w_k", "w_v", "w_o", "w1", "w2"):
            np.testing.assert_array_equal(getattr(l1, name), getattr(l2, name))
        for name in ("b_q", "b_k", "b_v", "b_o", "b1", "b2", "ln1_shift", "ln2_shift"):
            assert not getattr(l1, name).any()
        np.testing.assert_array_equal(l1.ln1_gain, np.ones(8))
    np.testing.assert_array_equal(p1.embedding.frequencies, p2.embedding.frequencies)
    assert p1.embedding.output_dim == cfg.head_dim


def test_init_seed_changes_params():
    a = init_params(small_config(seed=1))
    b = init_params(small_config(seed=2))
    assert not np.array_equal(a.layers[0].w_q, b.layers[0].w_q)


def test_xavier_bound_example():
    # c=8, c_f=16: first FFN layer bound sqrt(6 / 24) = 0.5
    assert xavier_bound(8, 16) == 0.5
    cfg = small_config(model_dim=8, ffn_dim=16)
    w1 = init_params(cfg).layers[0].w1
    assert np.all(np.abs(w1) <= 0.5)
    assert np.abs(w1).max() > 0.4  # actually spans the range


# ---------------------------------------------------------------------------
# LayerNorm / dropout units
# ---------------------------------------------------------------------------

def test_layer_norm_standardizes_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 16)) * 3.0e3  # large variance drowns the epsilon
    out = layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-10)


def test_layer_norm_gain_shift():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    g = np.array([2.0, 2.0, 2.0, 2.0])
    s = np.array([1.0, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(layer_norm(x, g, s), layer_norm(x, np.ones(4), np.zeros(4)) * 2 + 1)


def test_dropout_mask_properties():
    cfg = small_config(dropout_enabled=True)
    x = np.ones((50, 40))
    y = _dropout(x, 0.3, cfg, layer=0, role=1)
    kept = y != 0
    # inverted dropout: survivors are scaled by 1/(1-p)
    np.testing.assert_allclose(y[kept], 1.0 / 0.7)
    assert 0.5 < kept.mean() < 0.9
    # same (seed, layer, role) -> same mask; different role -> different mask
    np.testing.assert_array_equal(y, _dropout(x, 0.3, cfg, layer=0, role=1))
    assert not np.array_equal(y, _dropout(x, 0.3, cfg, layer=0, role=2))


def test_dropout_disabled_is_identity():
    cfg = small_config(dropout_enabled=False)
    x = np.ones((4, 4))
    assert _dropout(x, 0.9, cfg, 0, 0) is x


# ---------------------------------------------------------------------------
# block_forward
# ---------------------------------------------------------------------------

def test_residual_identity_zero_weights():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 4))
    pos = rng.normal(size=(10, 3))
    for n_layers in (1, 6):
        for dropout_enabled in (False, True):
            cfg = small_config(n_layers=n_layers, dropout_enabled=dropout_enabled,
                               attn_dropout=0.5, ffn_dropout=0.5)
            params = zeroed(init_params(cfg))
            out = block_forward(x, pos, params, k=3, r=2)
            np.testing.assert_array_equal(out, x)


def test_forward_composition_oracle(monkeypatch):
    """L=1, one head, LayerNorm bypassed: the block must equal the spelled
    out composition x + W_o(attn(xW_q, xW_k, xW_v)) then + FFN."""
    monkeypatch.setattr(block_mod, "layer_norm", lambda x, g, s, eps=0.0: x)
    rng = np.random.default_rng(2)
    cfg = small_config()
    params = init_params(cfg)
    lp = params.layers[0]
    x = rng.normal(size=(12, 4))
    pos = rng.normal(size=(12, 3))

    out = block_forward(x, pos, params, k=3, r=2)

    struct = build_hierarchy(pos, np.zeros((12, 1)), np.zeros((12, 1)), np.zeros((12, 1)),
                             flavor="point", k=3, r=2)
    h = with_values(struct, q=x @ lp.w_q + lp.b_q, k=x @ lp.w_k + lp.b_k, v=x @ lp.w_v + lp.b_v)
    x1 = x + (gha_forward(h).z @ lp.w_o + lp.b_o)
    u = np.maximum(x1 @ lp.w1 + lp.b1, 0.0) @ lp.w2 + lp.b2
    np.testing.assert_allclose(out, x1 + u, atol=1e-12)


def test_multi_head_splits_and_concatenates():
    rng = np.random.default_rng(3)
    cfg = small_config(model_dim=8, ffn_dim=8, n_heads=2)
    params = init_params(cfg)
    lp = params.layers[0]
    x = rng.normal(size=(15, 8))
    pos = rng.normal(size=(15, 3))
    out = block_forward(x, pos, params, k=4, r=2)

    struct = build_hierarchy(pos, np.zeros((15, 1)), np.zeros((15, 1)), np.zeros((15, 1)),
                             flavor="point", k=4, r=2)
    hn = layer_norm(x, lp.ln1_gain, lp.ln1_shift)
    q, k_rows, v = hn @ lp.w_q + lp.b_q, hn @ lp.w_k + lp.b_k, hn @ lp.w_v + lp.b_v
    heads = []
    for head in range(2):
        sl = slice(head * 4, (head + 1) * 4)
        heads.append(gha_forward(with_values(struct, q=q[:, sl], k=k_rows[:, sl], v=v[:, sl])).z)
    x1 = x + (np.concatenate(heads, axis=1) @ lp.w_o + lp.b_o)
    f = layer_norm(x1, lp.ln2_gain, lp.ln2_shift)
    expect = x1 + (np.maximum(f @ lp.w1 + lp.b1, 0.0) @ lp.w2 + lp.b2)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_forward_deterministic_with_dropout():
    rng = np.random.default_rng(4)
    cfg = small_config(n_layers=2, dropout_enabled=True, seed=99)
    params = init_params(cfg)
    x = rng.normal(size=(9, 4))
    pos = rng.normal(size=(9, 3))
    a = block_forward(x, pos, params, k=3, r=2)
    b = block_forward(x, pos, params, k=3, r=2)
    np.testing.assert_array_equal(a, b)
    # and dropout does change the result vs eval mode
    eval_params = init_params(dataclasses.replace(cfg, dropout_enabled=False))
    c = block_forward(x, pos, eval_params, k=3, r=2)
    assert not np.array_equal(a, c)


def test_forward_permutation_equivariance():
    rng = np.random.default_rng(5)
    cfg = small_config(model_dim=4, n_layers=2, embedding_mode="relative")
    params = init_params(cfg)
    x = rng.normal(size=(20, 4))
    pos = rng.normal(size=(20, 3))
    out = block_forward(x, pos, params, k=4, r=2)
    perm = rng.permutation(20)
    out_p = block_forward(x[perm], pos[perm], params, k=4, r=2)
    np.testing.assert_array_equal(out_p, out[perm])


def test_forward_voxel_flavor():
    rng = np.random.default_rng(6)
    coords = np.unique(rng.integers(0, 10, size=(200, 3)), axis=0)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    n = coords.shape[0]
    cfg = small_config(model_dim=4, embedding_mode="relative")
    params = init_params(cfg)
    x = rng.normal(size=(n, 4))
    out = block_forward(x, coords.astype(np.float64) + 0.5, params, flavor="voxel", coords=coords)
    assert out.shape == (n, 4)
    assert np.all(np.isfinite(out))
    assert not np.array_equal(out, x)


def test_positional_every_layer_switch():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(12, 4))
    pos = rng.normal(size=(12, 3))
    cfg_all = small_config(n_layers=2, embedding_mode="relative", positional_every_layer=True)
    cfg_first = small_config(n_layers=2, embedding_mode="relative", positional_every_layer=False)
    a = block_forward(x, pos, init_params(cfg_all), k=3, r=2)
    b = block_forward(x, pos, init_params(cfg_first), k=3, r=2)
    assert not np.array_equal(a, b)


def test_forward_validates_shapes():
    cfg = small_config()
    params = init_params(cfg)
    with pytest.raises(InvalidInputError):
        block_forward(np.zeros((5, 3)), np.zeros((5, 3)), params)  # c mismatch
    with pytest.raises(InvalidInputError):
        block_forward(np.zeros((5, 4)), np.zeros((4, 3)), params)
    with pytest.raises(InvalidInputError):
        block_forward(np.full((5, 4), np.nan), np.zeros((5, 3)), params)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def test_params_round_trip_bit_exact(tmp_path):
    cfg = small_config(n_layers=2, model_dim=8, ffn_dim=12, n_heads=2,
                       embedding_mode="relative", dropout_enabled=True, seed=123)
    params = init_params(cfg)
    path = tmp_path / "p.ghab"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded.config == cfg
    np.testing.assert_array_equal(loaded.embedding.frequencies, params.embedding.frequencies)
    for a, b in zip(loaded.layers, params.layers):
        for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                     "w1", "b1", "w2", "b2", "ln1_gain", "ln1_shift", "ln2_gain", "ln2_shift"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_params_same_forward_after_reload(tmp_path):
    rng = np.random.default_rng(8)
    cfg = small_config(embedding_mode="relative")
    params = init_params(cfg)
    x = rng.normal(size=(10, 4))
    pos = rng.normal(size=(10, 3))
    path = tmp_path / "p.ghab"
    save_params(params, path)
    np.testing.assert_array_equal(
        block_forward(x, pos, params, k=3, r=2),
        block_forward(x, pos, load_params(path), k=3, r=2),
    )


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "p.ghab"
    path.write_bytes(b"NOPE" + b"\x00" * 60)
    with pytest.raises(FormatError):
        load_params(path)


def test_load_rejects_bad_version(tmp_path):
    path = tmp_path / "p.ghab"
    save_params(init_params(small_config()), path)
    data = bytearray(path.read_bytes())
    data[4:8] = (999).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(UnsupportedVersionError):
        load_params(path)


def test_load_rejects_truncation_and_trailing(tmp_path):
    path = tmp_path / "p.ghab"
    save_params(init_params(small_config()), path)
    data = path.read_bytes()
    path.write_bytes(data[:-9])
    with pytest.raises(FormatError):
        load_params(path)
    path.write_bytes(data + b"\x00")
    with pytest.raises(FormatError):
        load_params(path)


# ---------------------------------------------------------------------------
# Mechanism selection / prebuilt structure
# ---------------------------------------------------------------------------

def test_forward_prebuilt_structure_bitwise():
    from gha3d.block import attention_structure

    rng = np.random.default_rng(31)
    pos = rng.normal(size=(12, 3))
    x = rng.normal(size=(12, 4))
    params = init_params(small_config())
    structure = attention_structure(pos, flavor="point", k=3, r=2)
    base = block_forward(x, pos, params, k=3, r=2)
    np.testing.assert_array_equal(
        block_forward(x, pos, params, k=3, r=2, structure=structure), base
    )


def test_forward_local_mechanism_is_truncated_gha():
    from gha3d.block import attention_structure
    from gha3d.hierarchy import truncate

    rng = np.random.default_rng(32)
    pos = rng.normal(size=(14, 3))
    x = rng.normal(size=(14, 4))
    params = init_params(small_config())
    got = block_forward(x, pos, params, k=3, r=2, mechanism="local")
    flat = truncate(attention_structure(pos, flavor="point", k=3, r=2), 0)
    want = block_forward(x, pos, params, k=3, r=2, structure=flat)
    np.testing.assert_array_equal(got, want)


def test_forward_dense_mechanism_matches_flat_hierarchy():
    rng = np.random.default_rng(33)
    n = 10
    pos = rng.normal(size=(n, 3))
    x = rng.normal(size=(n, 4))
    params = init_params(small_config())
    dense = block_forward(x, pos, params, mechanism="dense")
    flat = block_forward(x, pos, params, k=n, r=2)  # single level over all tokens
    np.testing.assert_allclose(dense, flat, atol=1e-12)


def test_forward_mechanism_validation():
    from gha3d.block import attention_structure

    rng = np.random.default_rng(34)
    pos = rng.normal(size=(8, 3))
    x = rng.normal(size=(8, 4))
    params = init_params(small_config())
    with pytest.raises(InvalidInputError):
        block_forward(x, pos, params, mechanism="sparse")
    wrong = attention_structure(pos[:5], flavor="point", k=3, r=2)
    with pytest.raises(InvalidInputError):
        block_forward(x, pos, params, structure=wrong)


def test_forward_frozen_regression_values():
    """Bit-frozen end-to-end fixture: seeded init, relative embeddings,
    2 layers x 2 heads over the two-pair layout. Catches any silent change
    in initialization order, coarsening, scoring, or block wiring."""
    from gha3d.seeding import substream

    config = BlockConfig(n_layers=2, model_dim=4, ffn_dim=8, n_heads=2, seed=11,
                         embedding_mode="relative")
    params = init_params(config)
    x = substream(11, "features").normal(size=(4, 4))
    out = block_forward(x, PAIR_POSITIONS, params, k=2, r=2)

    want = np.array([
        [float.fromhex(h) for h in
         ("0x1.5fba8d6b73185p+1", "-0x1.53d7e2e630ae0p-4",
          "-0x1.391f05b63ad7bp-1", "0x1.7eae693907635p-2")],
        [float.fromhex(h) for h in
         ("0x1.1f587bf2620bep+1", "-0x1.a16dbf0365140p-2",
          "-0x1.981c2742ebb38p-2", "-0x1.d932a63cfa568p-1")],
        [float.fromhex(h) for h in
         ("0x1.255d06eae8ad6p+0", "0x1.48a862c61cdf0p+0",
          "0x1.ba1ed54593a45p-2", "0x1.48c3cf945be19p+1")],
        [float.fromhex(h) for h in
         ("0x1.b9743ded0c650p+1", "0x1.266eedd39266dp+0",
          "-0x1.6168c3d9f484ep-1", "-0x1.40fdae96e1c57p+0")],
    ])
    np.testing.assert_array_equal(out, want)
