import numpy as np
import pytest

from dagan.diffgraph import ShapeError, backward, ops
from dagan.generator import DivergenceError, GeneratorConfig, build_generator, count_parameters, generate

DESK = GeneratorConfig(image_size=32, base_channels=16, channels=1, scales=3)
DESK_PARAMETER_COUNT = 444113   # frozen regression constant; see test_parameter_count_layer_arithmetic


def _layer_arithmetic(cfg: GeneratorConfig, attention=True) -> int:
    """Trainable scalar count of the documented layer table, computed independently."""
    w = lambda k: cfg.base_channels * 2 ** min(k, 3)  # noqa: E731
    conv = lambda cin, cout, k: cin * cout * k * k + cout  # noqa: E731
    norm = lambda c: 2 * c  # noqa: E731
    d = cfg.depth
    total = conv(cfg.channels, w(0), 3)
    for k in range(1, d + 1):
        total += conv(w(k - 1), w(k), 4) + norm(w(k))
    for k in range(1, d + 1):
        c_in, c = w(d - k + 1), w(d - k)
        total += conv(c_in, c, 4) + norm(c) + conv(2 * c, c, 3) + norm(c)
        if attention and k in cfg.resolved_attention_stages:
            ck = max(c // 8, 1)
            total += 2 * (c * ck + ck) + c * c + c + 1
    for k in range(d - cfg.scales + 1, d + 1):
        total += w(d - k) * cfg.channels + cfg.channels
    return total


def test_parameter_count_layer_arithmetic():
    assert count_parameters(build_generator(DESK)) == _layer_arithmetic(DESK)
    assert _layer_arithmetic(DESK) == DESK_PARAMETER_COUNT
    no_attn = GeneratorConfig(attention_stages=())
    assert count_parameters(build_generator(no_attn)) == _layer_arithmetic(no_attn, attention=False)


def test_parameter_count_stable_and_monotone():
    assert count_parameters(build_generator(DESK, seed=1)) == count_parameters(build_generator(DESK, seed=2))
    wide = GeneratorConfig(base_channels=32)
    assert count_parameters(build_generator(wide)) > count_parameters(build_generator(DESK))


def test_depth_and_scales():
    assert DESK.depth == 3
    assert DESK.scale_sizes() == [8, 16, 32]
    assert DESK.resolved_attention_stages == (2, 3)
    assert GeneratorConfig(image_size=128).depth == 5
    assert GeneratorConfig(image_size=128).scale_sizes() == [32, 64, 128]


@pytest.mark.parametrize("kwargs", [dict(image_size=30), dict(scales=0), dict(scales=4), dict(channels=2),
                                    dict(attention_stages=(0,))])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


def test_shapes_range_and_determinism():
    G = build_generator(DESK, seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, 1, 32, 32)).astype(np.float32)
    out = G(x)
    assert [o.shape for o in out] == [(3, 1, 8, 8), (3, 1, 16, 16), (3, 1, 32, 32)]
    assert out[-1].shape == x.shape
    for o in out:
        assert np.all(np.isfinite(o.data)) and np.all(np.abs(o.data) <= 1.0)
    again = build_generator(DESK, seed=0)(x)
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(out, again))


def test_generate_single_image():
    G = build_generator(DESK, dtype=np.float64)
    out = generate(np.zeros((1, 32, 32)), G)
    assert out[-1].shape == (1, 32, 32)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        build_generator(DESK)(np.zeros((1, 1, 16, 16), dtype=np.float32))


def test_divergence_reported():
    G = build_generator(DESK, dtype=np.float64)
    G.stem.weight.data[...] = np.nan
    with pytest.raises(DivergenceError):
        G(np.zeros((1, 1, 32, 32)))


def test_mu_zero_matches_attention_free_generator():
    x = np.random.default_rng(1).uniform(-1, 1, size=(2, 1, 32, 32))
    dual = build_generator(DESK, seed=5, dtype=np.float64)
    base = build_generator(GeneratorConfig(attention_stages=()), seed=5, dtype=np.float64)
    for block in dual.attention_blocks():
        assert block.mu.data[0] == 0.0
    for a, b in zip(dual(x), base(x)):
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-7)


def test_every_parameter_receives_gradient():
    G = build_generator(DESK, seed=0, dtype=np.float64)
    for block in G.attention_blocks():
        block.mu.assign([0.5])   # at mu = 0 the f/g/h weights are (correctly) gradient-free
    x = np.random.default_rng(2).uniform(-1, 1, size=(2, 1, 32, 32))
    target = np.random.default_rng(3).uniform(-1, 1, size=(2, 1, 32, 32))
    loss = None
    for o in G(x):
        t = target if o.shape[-1] == 32 else target[..., ::32 // o.shape[-1], ::32 // o.shape[-1]]
        term = ops.reduce_sum(ops.square(ops.sub(o, t)))
        loss = term if loss is None else ops.add(loss, term)
    grads = backward(loss)
    dead = [p.name for p in G.trainable_parameters() if p not in grads or not np.any(grads[p] != 0)]
    assert dead == []


def test_scales_describe_the_same_image():
    G = build_generator(DESK, seed=0)
    out = G(np.random.default_rng(4).uniform(-1, 1, size=(1, 1, 32, 32)).astype(np.float32))
    for o in out[:-1]:
        up = ops.upsample_nearest(o, 32 // o.shape[-1]).data
        assert up.shape == out[-1].shape
        assert np.isfinite(np.abs(up - out[-1].data).sum())
