import numpy as np
import pytest

import flowforge.net as fn
import flowforge.tensor as ft
from flowforge.tensor import Tape, Tensor

TINY = fn.NetConfig(num_scales=2, base_channels=4, input_channels=1)
DEFAULT_PARAM_COUNT = 230000  # regression constant for NetConfig() shapes


def rand_pair(rng, n=1, c=1, h=16, w=16):
    return (Tensor(rng.uniform(size=(n, c, h, w)).astype(np.float32)),
            Tensor(rng.uniform(size=(n, c, h, w)).astype(np.float32)))


def randomize_flow_heads(params, scale=0.05, seed=0):
    """Zero-init heads gate every upstream gradient; nudge them off zero."""
    rng = np.random.default_rng(seed)
    for name, t in params.tensors.items():
        if name.startswith("flow"):
            params.tensors[name] = Tensor(
                rng.uniform(-scale, scale, size=t.shape).astype(np.float32), requires_grad=True)


class TestConfig:
    def test_encoder_channels_default(self):
        assert fn.NetConfig().encoder_channels() == [16, 32, 64, 96]

    def test_too_few_scales_rejected(self):
        with pytest.raises(ValueError, match="num_scales"):
            fn.NetConfig(num_scales=1)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = fn.init_params(TINY, seed=3)
        b = fn.init_params(TINY, seed=3)
        assert list(a.tensors) == list(b.tensors)
        for name in a.tensors:
            assert a.tensors[name].data.tobytes() == b.tensors[name].data.tobytes()
        c = fn.init_params(TINY, seed=4)
        assert any(a.tensors[n].data.tobytes() != c.tensors[n].data.tobytes()
                   for n in a.tensors if n.endswith("weight"))

    def test_param_count_regression(self):
        assert fn.param_count(fn.NetConfig()) == DEFAULT_PARAM_COUNT

    def test_warp_inputs_add_under_five_percent(self):
        full = fn.param_count(fn.NetConfig(), include_warp_inputs=True)
        bare = fn.param_count(fn.NetConfig(), include_warp_inputs=False)
        assert full > bare
        assert (full - bare) / bare < 0.05

    def test_initial_flows_are_zero(self):
        params = fn.init_params(TINY, seed=0)
        rng = np.random.default_rng(1)
        i1, i2 = rand_pair(rng)
        flows = fn.forward_flow(params, i1, i2)
        for f in flows:
            assert np.all(f.data == 0.0)


class TestForward:
    def test_pyramid_shapes(self):
        cfg = fn.NetConfig(num_scales=3, base_channels=4)
        params = fn.init_params(cfg, seed=0)
        rng = np.random.default_rng(2)
        i1, i2 = rand_pair(rng, n=2, h=32, w=24)
        flows = fn.forward_flow(params, i1, i2)
        assert len(flows) == cfg.num_scales
        for k, f in enumerate(flows):
            s = cfg.num_scales - k  # list is coarse -> fine
            assert f.shape == (2, 2, 32 // 2 ** s, 24 // 2 ** s)

    def test_indivisible_dims_rejected(self):
        params = fn.init_params(TINY, seed=0)
        rng = np.random.default_rng(3)
        i1, i2 = rand_pair(rng, h=18, w=16)
        with pytest.raises(ValueError, match="divisible"):
            fn.forward_flow(params, i1, i2)

    def test_channel_mismatch_rejected(self):
        params = fn.init_params(TINY, seed=0)
        rng = np.random.default_rng(4)
        i1, i2 = rand_pair(rng, c=3)
        with pytest.raises(ValueError, match="channels"):
            fn.forward_flow(params, i1, i2)

    def test_full_resolution_helper(self):
        rng = np.random.default_rng(5)
        f = Tensor(rng.uniform(-1, 1, size=(1, 2, 8, 8)).astype(np.float32))
        up = fn.full_resolution_flow(f)
        assert up.shape == (1, 2, 16, 16)
        const = Tensor(np.full((1, 2, 8, 8), 1.5, dtype=np.float32))
        assert np.allclose(fn.full_resolution_flow(const).data, 3.0)


class TestBidirectional:
    def test_swap_swaps_outputs(self):
        params = fn.init_params(TINY, seed=0)
        randomize_flow_heads(params)
        rng = np.random.default_rng(6)
        i1, i2 = rand_pair(rng)
        f12, f21 = fn.bidirectional_flow(params, i1, i2)
        g21, g12 = fn.bidirectional_flow(params, i2, i1)
        for a, b in zip(f12, g12):
            assert a.data.tobytes() == b.data.tobytes()
        for a, b in zip(f21, g21):
            assert a.data.tobytes() == b.data.tobytes()

    def test_static_pair_symmetric(self):
        params = fn.init_params(TINY, seed=0)
        randomize_flow_heads(params)
        rng = np.random.default_rng(7)
        i1, _ = rand_pair(rng)
        f12, f21 = fn.bidirectional_flow(params, i1, i1)
        for a, b in zip(f12, f21):
            assert a.data.tobytes() == b.data.tobytes()

    def test_both_directions_reach_shared_params(self):
        params = fn.init_params(TINY, seed=0)
        randomize_flow_heads(params)
        rng = np.random.default_rng(8)
        i1, i2 = rand_pair(rng)
        probe = Tensor(rng.uniform(-1, 1, size=(1, 2, 8, 8)).astype(np.float32))

        def loss_of(flows):
            return ft.reduce_sum(ft.mul(flows[-1], probe))

        with Tape() as tape:
            f12, f21 = fn.bidirectional_flow(params, i1, i2)
            grads_fwd = tape.backward(loss_of(f12))
        with Tape() as tape:
            f12, f21 = fn.bidirectional_flow(params, i1, i2)
            grads_both = tape.backward(ft.add(loss_of(f12), loss_of(f21)))
        w = params.tensors["enc1.weight"]
        assert np.linalg.norm(grads_both[w.node_id]) > 0
        assert not np.allclose(grads_both[w.node_id], grads_fwd[w.node_id])


class TestGradientReach:
    def test_every_parameter_gets_gradient(self):
        params = fn.init_params(TINY, seed=0)
        randomize_flow_heads(params)
        rng = np.random.default_rng(9)
        i1, i2 = rand_pair(rng)
        with Tape() as tape:
            flows = fn.forward_flow(params, i1, i2)
            loss = None
            for f in flows:
                term = ft.reduce_sum(ft.mul(f, f))
                loss = term if loss is None else ft.add(loss, term)
            grads = tape.backward(loss)
        for name, t in params.tensors.items():
            g = grads.get(t.node_id)
            assert g is not None, f"no gradient for {name}"
            assert np.linalg.norm(g) > 0, f"zero gradient for {name}"

    @pytest.mark.parametrize("seed", range(3))
    def test_sampled_param_grads_match_finite_differences(self, seed):
        from gradcheck import rel_error

        cfg = fn.NetConfig(num_scales=2, base_channels=2)
        params = fn.init_params(cfg, seed=seed)
        randomize_flow_heads(params, seed=seed)
        rng = np.random.default_rng(40 + seed)
        # offset plane between frames keeps the decoder error map away from
        # the |.| kink, where finite differences are invalid
        ys, xs = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
        i1 = rng.uniform(0.2, 0.4, size=(1, 1, 8, 8))
        i2 = i1 + 0.35 + 0.01 * xs - 0.012 * ys
        probes = {s: rng.uniform(-1, 1, size=(1, 2, 8 // 2 ** s, 8 // 2 ** s))
                  for s in (1, 2)}

        f64 = {n: np.asarray(t.data, dtype=np.float64) for n, t in params.tensors.items()}

        def run(values):
            p = fn.NetworkParams(cfg, {n: Tensor(v, requires_grad=True, dtype=np.float64)
                                       for n, v in values.items()})
            flows = fn.forward_flow(p, Tensor(i1, dtype=np.float64), Tensor(i2, dtype=np.float64))
            loss = ft.add(ft.reduce_sum(ft.mul(flows[0], Tensor(probes[2], dtype=np.float64))),
                          ft.reduce_sum(ft.mul(flows[1], Tensor(probes[1], dtype=np.float64))))
            return p, loss

        with Tape() as tape:
            p, loss = run(f64)
            grads = tape.backward(loss)
        f0 = loss.item()

        h = 1e-4
        checked = 0
        for name in ("enc1.weight", "dec1.weight", "flow2.weight", "up1.bias"):
            analytic = grads[p.tensors[name].node_id]
            flat_index = rng.integers(0, analytic.size, size=min(6, analytic.size))
            for fi in np.unique(flat_index):
                loc = np.unravel_index(fi, analytic.shape)
                evals = {}
                for sign in (+1, -1):
                    vals = {n: v.copy() for n, v in f64.items()}
                    vals[name][loc] += sign * h
                    _, lo = run(vals)
                    evals[sign] = lo.item()
                # the net is piecewise linear: disagreeing one-sided slopes
                # mean the step straddles a kink, where central FD is invalid
                numeric = (evals[1] - evals[-1]) / (2 * h)
                slope_gap = abs(evals[1] - 2 * f0 + evals[-1]) / (2 * h)
                if slope_gap > 2e-4 * max(abs(numeric), 0.01):
                    continue
                checked += 1
                assert rel_error(np.array(analytic[loc]), np.array(numeric)) < 1e-3, \
                    f"{name}{loc}: {analytic[loc]} vs {numeric}"
        assert checked >= 12, f"too many kink-adjacent samples skipped ({checked} checked)"


class TestCheckpointRoundTrip:
    def test_save_load_bit_exact(self, tmp_path):
        params = fn.init_params(TINY, seed=11)
        randomize_flow_heads(params, seed=11)
        path = tmp_path / "net.ffwt"
        fn.save_params(path, params, extra={"meta/step": np.float32(7.0).reshape(())})
        loaded, extra = fn.load_params(path)
        assert loaded.config == TINY
        assert extra["meta/step"].item() == 7.0
        for name, t in params.tensors.items():
            assert loaded.tensors[name].data.tobytes() == t.data.tobytes()

    def test_config_mismatch_rejected(self, tmp_path):
        params = fn.init_params(TINY, seed=0)
        path = tmp_path / "net.ffwt"
        fn.save_params(path, params)
        other = fn.NetConfig(num_scales=3, base_channels=4)
        with pytest.raises(ValueError, match="config"):
            fn.load_params(path, config=other)

    def test_missing_parameter_named(self, tmp_path):
        params = fn.init_params(TINY, seed=0)
        path = tmp_path / "net.ffwt"
        fn.save_params(path, params)
        record = ft.load_checkpoint(path)
        record.pop("param/enc1.weight")
        ft.save_checkpoint(path, record)
        with pytest.raises(ValueError, match="enc1.weight"):
            fn.load_params(path)

    def test_wrong_shape_named(self, tmp_path):
        params = fn.init_params(TINY, seed=0)
        path = tmp_path / "net.ffwt"
        fn.save_params(path, params)
        record = ft.load_checkpoint(path)
        record["param/enc2.weight"] = np.zeros((3, 3), dtype=np.float32)
        ft.save_checkpoint(path, record)
        with pytest.raises(ValueError, match="enc2.weight"):
            fn.load_params(path)
