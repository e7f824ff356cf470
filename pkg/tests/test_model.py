"""Network structure, placement/state-shift geometry, and forward passes.

The forward pass is checked against a from-scratch scipy reference
implementation (correlate2d + explicit gating) so any wiring mistake —
skip order, crop offset, head activation — shows up as a numeric
mismatch rather than a plausible-looking output.
"""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate2d

from dogm import model as M
from dogm.bev import CENTER_OFFSET, PAD, encode_core, place_core_indices
from dogm.engine import NumericFault, Tensor, add, backward, sum_all
from dogm.grid import GridSpec, Pose
from dogm.model import (
    Model,
    ModelConfig,
    build_model,
    forward_step,
    input_placement,
    place_and_shift,
    pose_anchor,
    read_model_config,
    receptive_field_cells,
    recurrent_state_shift,
    write_model_config,
)

SMALL_SPEC = GridSpec(26, 26, 0.15, 0.15, height_min=-0.2, height_max=0.7, cell_height=0.2)
SMALL_CFG = ModelConfig(
    length_cells=26,
    width_cells=26,
    input_channels=SMALL_SPEC.height_channels,
    channels=(2, 3, 4, 128),
    dropout=0.2,
)
ORIGIN = Pose(0.0, 0.0, 0.0, 0.0)


def small_model(seed=7):
    return build_model(SMALL_CFG, seed=seed)


def random_bev(rng, offset=(CENTER_OFFSET, CENTER_OFFSET)):
    pts = rng.uniform(-1.8, 1.8, size=(200, 3)) * np.array([1.0, 1.0, 0.3])
    return place_core_indices(encode_core(pts, ORIGIN, SMALL_SPEC), offset, SMALL_SPEC)


class TestConfig:
    def test_desk_level_dims(self):
        cfg = ModelConfig()
        assert cfg.padded_length == 108
        assert [cfg.level_dims(k) for k in range(4)] == [(108, 108), (36, 36), (12, 12), (4, 4)]

    def test_full_scale_grid_not_tileable(self):
        # 1001 + 28 = 1029 is not a multiple of 27; the config must say so
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(length_cells=1001, width_cells=1001)

    def test_bottleneck_pinned(self):
        with pytest.raises(ValueError, match="128"):
            ModelConfig(channels=(16, 32, 64, 96))

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kernel_size=4),
            dict(dropout=1.0),
            dict(n_in=0),
            dict(input_channels=0),
            dict(channels=(16, 32, 64)),
        ],
    )
    def test_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_kv_round_trip(self, tmp_path):
        cfg = ModelConfig(length_cells=53, width_cells=26, input_channels=7,
                          channels=(2, 3, 4, 128), n_in=4, dropout=0.25)
        path = tmp_path / "model.cfg"
        write_model_config(cfg, path)
        assert read_model_config(path) == cfg

    def test_kv_missing_key(self, tmp_path):
        path = tmp_path / "model.cfg"
        path.write_text("length_cells = 80\n")
        with pytest.raises(ValueError, match="missing"):
            read_model_config(path)


class TestParameters:
    def test_count_matches_closed_form(self):
        # independent layer-by-layer sum for the default configuration
        C = (16, 32, 64, 128)
        H, K = 25, 3

        def conv(cin, cout, k=K):
            return cin * k * k * cout + cout

        total = conv(H, C[0]) + conv(C[0], C[0])
        for lv in (1, 2, 3):
            total += conv(C[lv - 1], C[lv], 3) + 2 * conv(C[lv], C[lv])
        for lv in range(4):
            total += conv(2 * C[lv], 4 * C[lv])
        total += 3 * (conv(C[3] + C[2], C[2]) + conv(C[2] + C[1], C[1]) + conv(C[1] + C[0], C[0]))
        for ch in (1, 1, 3, 2, 1, 9):
            total += conv(C[0], ch, 1)

        assert Model(ModelConfig()).num_parameters() == total == 2494209

    def test_same_seed_identical(self):
        p1, _ = small_model(seed=11)
        p2, _ = small_model(seed=11)
        assert p1.keys() == p2.keys()
        for name in p1:
            assert np.array_equal(p1[name].data, p2[name].data), name

    def test_different_seed_differs(self):
        p1, _ = small_model(seed=11)
        p2, _ = small_model(seed=12)
        assert any(not np.array_equal(p1[n].data, p2[n].data) for n in p1)

    def test_fan_in_bounds_and_biases(self):
        params, _ = small_model()
        for name, p in params.items():
            if name.endswith("_w"):
                cin, k, _, _ = p.data.shape
                bound = 1.0 / np.sqrt(cin * k * k)
                assert np.all(np.abs(p.data) <= bound)
                assert p.data.std() > 0
            elif name.startswith("lstm"):
                cout = p.data.shape[0] // 4
                assert np.all(p.data[cout : 2 * cout] == 1.0)  # forget gate
                assert np.all(p.data[:cout] == 0) and np.all(p.data[2 * cout :] == 0)
            else:
                assert np.all(p.data == 0)

    def test_parameters_marked_trainable(self):
        params, _ = small_model()
        assert all(p.requires_grad for p in params.values())


class TestPlacement:
    def test_zero_displacement_centered(self):
        core = np.array([[5, 5, 2]])
        bev, residual = input_placement(core, ORIGIN, (0, 0), SMALL_SPEC)
        assert bev.offset == (CENTER_OFFSET, CENTER_OFFSET)
        assert residual == (0, 0)

    def test_ten_cells_east_shifts_pattern(self, rng):
        moved = Pose(0.0, 10 * SMALL_SPEC.cell_length, 0.0, 0.0)
        core = encode_core(rng.uniform(-1.8, 1.8, size=(200, 3)) * [1, 1, 0.3], ORIGIN, SMALL_SPEC)
        bev0, _ = input_placement(core, ORIGIN, (0, 0), SMALL_SPEC)
        bev10, residual = input_placement(core, moved, (0, 0), SMALL_SPEC)
        assert bev10.offset == (CENTER_OFFSET + 10, CENTER_OFFSET)
        assert residual == (10, 0)
        assert np.array_equal(np.argwhere(bev10.data), np.argwhere(bev0.data) + [10, 0, 0])

    def test_27_cells_wraps_and_shifts_state(self):
        _, model = small_model()
        state = model.initial_state()
        pose = Pose(0.0, 27 * SMALL_SPEC.cell_length, 0.0, 0.0)
        bev, state = place_and_shift(np.zeros((0, 3), dtype=np.int64), pose, state, SMALL_SPEC)
        assert bev.offset == (CENTER_OFFSET, CENTER_OFFSET)
        assert state.anchor == (27, 0)
        assert state.residual == (0, 0)

    def test_half_cell_boundary(self):
        # 14 cells east is nearer the next innermost cell: anchor jumps,
        # the residual goes negative
        _, model = small_model()
        pose = Pose(0.0, 14 * SMALL_SPEC.cell_length, 0.0, 0.0)
        bev, state = place_and_shift(np.zeros((0, 3), dtype=np.int64), pose, model.initial_state(), SMALL_SPEC)
        assert bev.offset == (1, CENTER_OFFSET)
        assert state.anchor == (27, 0)
        assert state.residual == (-13, 0)

    def test_pose_anchor_rounds_to_nearest_cell(self):
        spec = SMALL_SPEC
        assert pose_anchor(Pose(0.0, 4 * spec.cell_length + 0.01, -0.02, 0.0), spec) == (4, 0)

    @given(dx=st.integers(-2000, 2000), dy=st.integers(-2000, 2000))
    @settings(max_examples=60, deadline=None)
    def test_wrap_decomposition(self, dx, dy):
        pose = Pose(0.0, dx * SMALL_SPEC.cell_length, dy * SMALL_SPEC.cell_width, 0.0)
        bev, residual = input_placement(np.zeros((0, 3), dtype=np.int64), pose, (0, 0), SMALL_SPEC)
        for d, r in zip((dx, dy), residual):
            assert -13 <= r <= 13
            assert (d - r) % 27 == 0

    def test_streaming_keeps_invariants(self):
        _, model = small_model()
        state = model.initial_state()
        rng = np.random.default_rng(3)
        x = y = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # large jumps may teleport
            for _ in range(25):
                x += rng.uniform(-3, 3)
                y += rng.uniform(-3, 3)
                _, state = place_and_shift(
                    np.zeros((0, 3), dtype=np.int64), Pose(0.0, x, y, 0.0), state, SMALL_SPEC
                )
                assert state.anchor[0] % 27 == 0 and state.anchor[1] % 27 == 0
                assert max(abs(state.residual[0]), abs(state.residual[1])) <= 13


class TestStateShift:
    def test_zero_shift_is_identity(self):
        _, model = small_model()
        state = model.initial_state()
        assert recurrent_state_shift(state, (0, 0)) is state

    def test_per_level_displacements(self):
        # one innermost cell of ego motion moves level 0..3 contents by
        # 27/9/3/1 of their own cells, against the window motion
        model = Model(SMALL_CFG)
        state = model.initial_state()
        marks = [(40, 20), (10, 6), (4, 2), (1, 1)]
        for level, (h, _) in enumerate(state.levels):
            h.data[marks[level]][0] = 1.0
        shifted = recurrent_state_shift(state, (1, 0))
        factors = (27, 9, 3, 1)
        for level in range(4):
            got = np.argwhere(shifted.levels[level][0].data)
            expected = [marks[level][0] - factors[level], marks[level][1], 0]
            assert got.tolist() == [expected]
        assert shifted.anchor == (27, 0)

    def test_vacated_cells_zeroed(self, rng):
        _, model = small_model()
        state = model.initial_state()
        for h, c in state.levels:
            h.data[:] = rng.random(h.data.shape) + 0.1
            c.data[:] = rng.random(c.data.shape) + 0.1
        shifted = recurrent_state_shift(state, (1, 1))
        for level, (h, c) in enumerate(shifted.levels):
            f = 3 ** (3 - level)
            assert np.all(h.data[-f:] == 0) and np.all(h.data[:, -f:] == 0)
            assert np.all(c.data[-f:] == 0) and np.all(c.data[:, -f:] == 0)
            assert np.all(h.data[:-f, :-f] != 0)

    def test_shift_then_inverse(self, rng):
        _, model = small_model()
        state = model.initial_state()
        for h, _ in state.levels:
            h.data[:] = rng.random(h.data.shape)
        back = recurrent_state_shift(recurrent_state_shift(state, (1, 0)), (-1, 0))
        assert back.anchor == state.anchor
        for level in range(4):
            f = 3 ** (3 - level)
            orig = state.levels[level][0].data
            rest = back.levels[level][0].data
            assert np.array_equal(rest[f:], orig[f:])
            assert np.all(rest[:f] == 0)

    def test_teleport_resets_with_warning(self):
        _, model = small_model()
        state = model.initial_state()
        for h, _ in state.levels:
            h.data[:] = 1.0
        with pytest.warns(UserWarning, match="teleport"):
            reset = recurrent_state_shift(state, (2, 0))  # 54 cells >= 54-wide state
        assert reset.anchor == (54, 0)
        assert all(np.all(h.data == 0) and np.all(c.data == 0) for h, c in reset.levels)

    def test_shift_is_differentiable(self):
        _, model = small_model()
        state = model.initial_state()
        h0 = state.levels[0][0]
        h0.requires_grad = True
        h0.data[:] = 1.0
        shifted = recurrent_state_shift(state, (1, 0))
        backward(sum_all(shifted.levels[0][0]))
        assert h0.grad is not None
        assert h0.grad.max() == 1.0


# ---------------------------------------------------------------------------
# forward pass


def ref_conv_same(x, w, b):
    out = np.zeros(x.shape[:2] + (w.shape[3],))
    for co in range(w.shape[3]):
        acc = np.zeros(x.shape[:2])
        for ci in range(x.shape[2]):
            acc += correlate2d(x[:, :, ci], w[ci, :, :, co], mode="same")
        out[:, :, co] = acc + b[co]
    return out


def ref_conv_stride3(x, w, b):
    Ho, Wo = x.shape[0] // 3, x.shape[1] // 3
    out = np.zeros((Ho, Wo, w.shape[3]))
    for i in range(Ho):
        for j in range(Wo):
            out[i, j] = np.einsum("abc,cabo->o", x[3 * i : 3 * i + 3, 3 * j : 3 * j + 3], w) + b
    return out


def _sig(t):
    return 1.0 / (1.0 + np.exp(-t))


def ref_lstm(x, h, c, w, b):
    gates = ref_conv_same(np.concatenate([x, h], axis=2), w, b)
    C = h.shape[2]
    i, f, o = _sig(gates[..., :C]), _sig(gates[..., C : 2 * C]), _sig(gates[..., 2 * C : 3 * C])
    c_new = f * c + i * np.tanh(gates[..., 3 * C :])
    return o * np.tanh(c_new), c_new


def ref_forward(cfg, params, data, offset, state):
    P = {k: v.data for k, v in params.items()}
    feat = data.astype(np.float64)
    skips = []
    for lv in range(4):
        if lv:
            feat = np.maximum(ref_conv_stride3(feat, P[f"down{lv}_w"], P[f"down{lv}_b"]), 0)
        feat = np.maximum(ref_conv_same(feat, P[f"enc{lv}a_w"], P[f"enc{lv}a_b"]), 0)
        feat = np.maximum(ref_conv_same(feat, P[f"enc{lv}b_w"], P[f"enc{lv}b_b"]), 0)
        h, c = ref_lstm(feat, state[lv][0], state[lv][1], P[f"lstm{lv}_w"], P[f"lstm{lv}_b"])
        skips.append((h, c))
    ox, oy = offset
    L, W = cfg.length_cells, cfg.width_cells
    outs = {}
    for d in (1, 2, 3):
        feat = skips[3][0]
        for lv in (2, 1, 0):
            up = feat.repeat(3, axis=0).repeat(3, axis=1)
            feat = np.concatenate([up, skips[lv][0]], axis=2)
            feat = np.maximum(ref_conv_same(feat, P[f"dec{d}_{lv}_w"], P[f"dec{d}_{lv}_b"]), 0)
        core = feat[ox : ox + L, oy : oy + W]
        for head in cfg.heads:
            if head.decoder != d:
                continue
            y = core @ P[f"head_{head.name}_w"][:, 0, 0, :] + P[f"head_{head.name}_b"]
            if head.activation == "sigmoid":
                y = _sig(y)
            elif head.activation == "softmax":
                e = np.exp(y - y.max(axis=2, keepdims=True))
                y = e / e.sum(axis=2, keepdims=True)
            outs[head.name] = y[..., 0] if head.channels == 1 else y
    return outs, skips


class TestForward:
    def test_matches_scipy_reference(self, rng):
        params, model = small_model(seed=5)
        bev = random_bev(rng, offset=(17, 12))
        state = model.initial_state()
        for h, c in state.levels:
            h.data[:] = rng.normal(0, 0.5, h.data.shape)
            c.data[:] = rng.normal(0, 0.5, c.data.shape)
        ref_state = [(h.data.copy(), c.data.copy()) for h, c in state.levels]

        out, new_state = model.forward_step(params, bev, state, mode="infer")
        ref_out, ref_skips = ref_forward(SMALL_CFG, params, bev.data, bev.offset, ref_state)

        got = out.arrays()
        for name in ("occ", "road", "gc", "v", "dyn", "cls"):
            np.testing.assert_allclose(got[name], ref_out[name], rtol=1e-9, atol=1e-12, err_msg=name)
        for level in range(4):
            np.testing.assert_allclose(new_state.levels[level][0].data, ref_skips[level][0], rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(new_state.levels[level][1].data, ref_skips[level][1], rtol=1e-9, atol=1e-12)

    def test_output_domains(self, rng):
        params, model = small_model(seed=6)
        out, _ = model.forward_step(params, random_bev(rng), model.initial_state())
        L = SMALL_CFG.length_cells
        assert out.y_occ.data.shape == (L, L) and out.y_dyn.data.shape == (L, L)
        assert out.y_v.data.shape == (L, L, 2)
        for y in (out.y_occ, out.y_road, out.y_dyn):
            assert np.all((y.data > 0) & (y.data < 1))
        for y, ch in ((out.y_gc, 3), (out.y_cls, 9)):
            assert y.data.shape == (L, L, ch)
            assert np.abs(y.data.sum(axis=2) - 1).max() < 1e-6

    def test_zero_parameters_give_maximum_uncertainty(self, rng):
        params, model = small_model()
        zeros = {k: Tensor(np.zeros_like(v.data), requires_grad=True, name=k) for k, v in params.items()}
        out, _ = model.forward_step(zeros, random_bev(rng), model.initial_state())
        assert np.all(out.y_occ.data == 0.5)
        assert np.all(out.y_road.data == 0.5) and np.all(out.y_dyn.data == 0.5)
        assert np.allclose(out.y_gc.data, 1 / 3) and np.allclose(out.y_cls.data, 1 / 9)
        assert np.all(out.y_v.data == 0.0)

    def test_bitwise_deterministic(self, rng):
        params, model = small_model(seed=6)
        bev = random_bev(rng)
        a, _ = model.forward_step(params, bev, model.initial_state())
        b, _ = model.forward_step(params, bev, model.initial_state())
        for name in a.arrays():
            assert np.array_equal(a.arrays()[name], b.arrays()[name])

    def test_streaming_matches_sequence_processing(self, rng):
        # infer-mode state threading reproduces a training-style pass
        params, model = small_model(seed=6)
        sa, sb = model.initial_state(), model.initial_state()
        for _ in range(3):
            bev = random_bev(rng)
            oa, sa = model.forward_step(params, bev, sa, mode="train")
            ob, sb = model.forward_step(params, bev, sb, mode="infer")
            for name in oa.arrays():
                assert np.array_equal(oa.arrays()[name], ob.arrays()[name])

    def test_dropout_only_in_train_mode(self, rng):
        params, model = small_model(seed=6)
        bev = random_bev(rng)

        def run(mode, key=None):
            r = None if key is None else np.random.Generator(np.random.Philox(key=key))
            out, _ = model.forward_step(params, bev, model.initial_state(), mode=mode, rng=r)
            return out.y_occ.data

        assert np.array_equal(run("train", 1), run("train", 1))  # same masks
        assert not np.array_equal(run("train", 1), run("train", 2))
        assert np.array_equal(run("infer", 1), run("infer"))  # rng unused
        assert not np.array_equal(run("train", 1), run("infer"))

    def test_decode_false_only_advances_state(self, rng):
        params, model = small_model(seed=6)
        bev = random_bev(rng)
        out, state = model.forward_step(params, bev, model.initial_state(), decode=False)
        assert out is None
        full, state_full = model.forward_step(params, bev, model.initial_state())
        assert full is not None
        for level in range(4):
            assert np.array_equal(state.levels[level][0].data, state_full.levels[level][0].data)

    def test_numeric_fault_names_layer(self, rng):
        params, model = small_model()
        bad = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}
        bad["enc1a_w"].data[0, 0, 0, 0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NumericFault, match="enc1a"):
            model.forward_step(bad, random_bev(rng), model.initial_state())

    def test_shape_and_mode_validation(self, rng):
        params, model = small_model()
        bev = random_bev(rng)
        with pytest.raises(ValueError, match="mode"):
            model.forward_step(params, bev, model.initial_state(), mode="test")
        other = Model(ModelConfig(length_cells=53, width_cells=53, input_channels=SMALL_CFG.input_channels))
        with pytest.raises(ValueError, match="input shape"):
            other.forward_step(params, bev, other.initial_state())
        broken = model.initial_state()
        broken.levels[2] = (
            Tensor(np.zeros((5, 5, 4))),
            Tensor(np.zeros((5, 5, 4))),
        )
        with pytest.raises(ValueError, match="state level 2"):
            model.forward_step(params, bev, broken)

    def test_backward_reaches_all_parameters(self, rng):
        params, model = small_model(seed=6)
        out, _ = forward_step(model, params, random_bev(rng), model.initial_state(), mode="train")
        loss = sum_all(out.y_occ)
        for field in (out.y_v, out.y_cls, out.y_gc, out.y_road, out.y_dyn):
            loss = add(loss, sum_all(field))
        backward(loss)
        for name, p in params.items():
            assert p.grad is not None, name
            assert p.grad.shape == p.data.shape
            assert np.all(np.isfinite(p.grad))


class TestReceptiveField:
    def test_default_width(self):
        # 2 convs per level and the gate conv at enc stride j in (1,3,9,27):
        # 1 +4+2 +12+6 +36+18 +108+54 (encoder+transitions+gate) +18+6+2
        assert receptive_field_cells(ModelConfig()) == 267

    def test_grows_with_kernel(self):
        small = receptive_field_cells(ModelConfig(kernel_size=3))
        big = receptive_field_cells(ModelConfig(kernel_size=5))
        assert big > small
