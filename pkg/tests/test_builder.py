import math

import numpy as np
import pytest

from icgd_forge import analysis
from icgd_forge.builder import (
    StackWeights,
    block_head_count,
    block_kinds,
    build_block,
    build_stack,
    make_plan,
    run_stack,
)
from icgd_forge.layers import encode_prompt, layer_forward
from icgd_forge.network import Dataset, DomainBox, NetworkParams, NetworkShape, exact_gradient, gd_trajectory, random_instance
from icgd_forge.relu_approx import evaluate

SMALL = NetworkShape(2, 2, 3, 2, 4)


def small_case(seed=0, mode="approx", segments=40, shape=SMALL, eta=0.05):
    rng = np.random.default_rng(seed)
    data = random_instance(shape, rng)
    plan = make_plan(shape, eta, DomainBox(1.0), data.B_x, data.B_y, mode=mode, segments=None if mode == "exact" else segments)
    return data, plan


class TestStructure:
    @pytest.mark.parametrize("N,L", [(2, 1), (3, 3), (4, 2)])
    def test_layer_count(self, N, L):
        shape = NetworkShape(2, 1, 2, N, 3)
        data, plan = small_case(shape=shape, mode="exact")
        stack = build_stack(plan, L)
        assert stack.n_layers == (2 * N + 4) * L
        assert stack.kinds() == block_kinds(N) * L

    def test_zero_blocks_is_identity(self):
        data, plan = small_case()
        trace = run_stack(build_stack(plan, 0), data)
        assert np.array_equal(trace.final, encode_prompt(data, np.zeros(SMALL.n_params), plan.layout).H)

    def test_negative_block_count(self):
        _, plan = small_case(mode="exact")
        with pytest.raises(ValueError):
            build_stack(plan, -1)

    def test_head_cap(self):
        rng = np.random.default_rng(0)
        data = random_instance(SMALL, rng)
        with pytest.raises(analysis.BudgetInfeasible) as exc:
            make_plan(SMALL, 0.05, DomainBox(1.0), data.B_x, data.B_y, segments=40, head_cap=10)
        assert exc.value.binding == "heads"
        _, plan = small_case()
        assert block_head_count(plan) > 10

    def test_segment_cap(self):
        rng = np.random.default_rng(0)
        data = random_instance(SMALL, rng)
        with pytest.raises(analysis.BudgetInfeasible) as exc:
            make_plan(SMALL, 0.05, DomainBox(1.0), data.B_x, data.B_y, eps_target=1e-12, seg_cap=1000)
        assert exc.value.binding == "eps_r"

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            make_plan(SMALL, 0.05, DomainBox(1.0), 1.0, 1.0, mode="fast")


class TestBlockBehaviour:
    def test_slot_discipline_and_uniform_w(self):
        data, plan = small_case()
        trace = run_stack(build_stack(plan, 2), data, check_slots=True)
        assert max(trace.w_spread) <= 1e-12

    def test_scratch_cleared_after_block(self):
        data, plan = small_case()
        trace = run_stack(build_stack(plan, 1), data)
        lay = plan.layout
        for slot in ("pbar", "rpbar", "g", "sbar"):
            assert np.all(trace.final[lay.slot(slot)] == 0.0), slot

    def test_inputs_untouched(self):
        data, plan = small_case()
        H0 = encode_prompt(data, np.zeros(SMALL.n_params), plan.layout).H
        trace = run_stack(build_stack(plan, 2), data)
        lay = plan.layout
        for slot in ("x", "y", "one", "flag"):
            assert np.array_equal(trace.final[lay.slot(slot)], H0[lay.slot(slot)])

    @pytest.mark.parametrize("mode", ["exact", "approx"])
    def test_test_token_inert(self, mode):
        data, plan = small_case(mode=mode)
        other = Dataset(data.X, data.Y, -data.x_test, data.B_x, data.B_y)
        stack = build_stack(plan, 3)
        a = run_stack(stack, data).w_bar
        b = run_stack(stack, other).w_bar
        assert np.array_equal(a, b)

    def test_g_vanishes_on_test_token(self):
        data, plan = small_case()
        trace = run_stack(build_stack(plan, 1), data)
        assert np.all(trace.mid[0][plan.layout.slot("g"), -1] == 0.0)
        assert np.all(trace.mid[0][plan.layout.slot("sbar"), -1] == 0.0)

    def test_zero_weights_give_approximant_at_zero(self):
        data, plan = small_case()
        trace = run_stack(build_stack(plan, 1), data)
        r0 = float(evaluate(plan.r_hat, 0.0))
        lay = plan.layout
        for j in range(1, SMALL.N + 1):
            assert np.allclose(trace.mid[0][lay.pbar(j)], r0, atol=1e-15, rtol=0)

    def test_zero_loss_gradient_leaves_w(self):
        # labels equal to the network output at w = 0 make every g and s vanish in exact mode
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, (SMALL.n, SMALL.d_x))
        Y = np.full((SMALL.n, SMALL.d_y), 0.5)
        data = Dataset(X, Y, np.zeros(SMALL.d_x), math.sqrt(2), math.sqrt(2))
        plan = make_plan(SMALL, 0.05, DomainBox(1.0), data.B_x, data.B_y, mode="exact")
        trace = run_stack(build_stack(plan, 1), data)
        assert np.max(np.abs(trace.mid[0][plan.layout.slot("sbar")])) <= 1e-15
        assert np.max(np.abs(trace.w_bar[1])) <= 1e-15

    def test_update_layer_with_zero_sensitivities(self):
        data, plan = small_case()
        block = build_block(plan)
        N = SMALL.N
        w0 = np.random.default_rng(1).uniform(-0.5, 0.5, SMALL.n_params)
        H = encode_prompt(data, w0, plan.layout).H
        H[plan.layout.slot("pbar")] = 0.3
        out = layer_forward(H, block[2 * N + 2])
        assert np.array_equal(out[plan.layout.slot("w")], H[plan.layout.slot("w")])

    def test_projection_clips_to_box(self):
        data, plan = small_case()
        proj = build_block(plan)[-1]
        lay = plan.layout
        w = np.linspace(-3, 3, SMALL.n_params)
        H = encode_prompt(data, np.zeros(SMALL.n_params), lay).H
        H[lay.slot("w")] = w[:, None]
        out = layer_forward(H, proj)
        assert np.max(np.abs(out[lay.slot("w"), 0] - np.clip(w, -1, 1))) <= 1e-15


class TestExactMode:
    @pytest.mark.parametrize("N", [2, 3, 4])
    @pytest.mark.parametrize("K", [1, 2, 3])
    def test_reproduces_projected_gd(self, N, K):
        shape = NetworkShape(2, 2, K, N, 4)
        data, plan = small_case(seed=N * 10 + K, mode="exact", shape=shape, eta=0.5)
        trace = run_stack(build_stack(plan, 3), data)
        gd = gd_trajectory(shape, data, 0.5, 3, DomainBox(1.0))
        assert np.max(np.abs(trace.w_bar - gd)) <= 1e-9

    def test_first_step_gradient(self):
        data, plan = small_case(mode="exact")
        w0 = np.random.default_rng(7).uniform(-0.2, 0.2, SMALL.n_params)
        trace = run_stack(build_stack(plan, 1), data, w0)
        w_after = trace.after_update[0][plan.layout.slot("w"), 0]
        g = exact_gradient(NetworkParams(SMALL, w0), data)
        assert np.max(np.abs((w0 - w_after) / 0.05 - g)) <= 1e-12


class TestApproxMode:
    def test_first_step_within_budget(self):
        rng = np.random.default_rng(0)
        data = random_instance(SMALL, rng)
        plan = make_plan(SMALL, 0.05, DomainBox(1.0), data.B_x, data.B_y, eps_target=1e-2)
        trace = run_stack(build_stack(plan, 1), data)
        gd = gd_trajectory(SMALL, data, 0.05, 1, DomainBox(1.0))
        assert np.linalg.norm(trace.w_bar[1] - gd[1]) <= 0.05 * 1e-2

    def test_more_segments_smaller_error(self):
        errs = []
        for S in (20, 80):
            data, plan = small_case(segments=S)
            w0 = np.random.default_rng(5).uniform(-0.5, 0.5, SMALL.n_params)
            trace = run_stack(build_stack(plan, 1), data, w0)
            w_after = trace.after_update[0][plan.layout.slot("w"), 0]
            g = exact_gradient(NetworkParams(SMALL, w0), data)
            errs.append(np.linalg.norm((w0 - w_after) / 0.05 - g))
        assert errs[1] < errs[0]

    def test_backends_give_same_trajectory(self):
        from icgd_forge.kernels import BACKENDS

        data, plan = small_case()
        stack = build_stack(plan, 2)
        runs = [run_stack(stack, data, backend=b).w_bar for b in BACKENDS]
        for r in runs[1:]:
            assert np.max(np.abs(r - runs[0])) <= 1e-12


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        data, plan = small_case()
        stack = build_stack(plan, 2)
        stack.save(tmp_path)
        block, manifest = StackWeights.load_block(tmp_path)
        assert manifest["L"] == 2 and len(block) == len(stack.block)
        loaded = StackWeights(tuple(block), 2, plan)
        assert np.array_equal(run_stack(loaded, data).w_bar, run_stack(stack, data).w_bar)
