import numpy as np
import pytest

from sparsemix.adapter import (
    AdapterConfig,
    AdapterParams,
    ExpertParams,
    GateParams,
    RetentionSpec,
    adapter_forward,
    adapter_param_dict,
    default_retention_schedule,
    expert_forward,
    init_adapter_params,
    retention_counts,
    retention_mask,
    routing_weights,
    sparse_retain,
    threshold_offsets,
)
from sparsemix.autodiff import Tape, Tensor, constant, finite_diff_check, mul, sum_over_axis
from sparsemix.errors import ConfigError, SelectionError


def brute_force_mask(values, k, keep_largest):
    """Sort-based oracle: pick k indices by (value, index) preference."""
    flat = values.reshape(-1)
    if keep_largest:
        chosen = sorted(range(flat.size), key=lambda i: (-flat[i], i))[:k]
    else:
        chosen = sorted(range(flat.size), key=lambda i: (flat[i], i))[:k]
    mask = np.zeros(flat.size, dtype=bool)
    mask[chosen] = True
    return mask.reshape(values.shape)


def test_retain_top2_example():
    x = Tensor(np.array([[[1.0, 4.0, 2.0, 3.0]]]))
    expected = brute_force_mask(x.data[0], 2, True) * x.data[0]
    out, mask = sparse_retain(x, 2, keep_largest=True)
    assert np.array_equal(out.data[0], expected)
    assert np.array_equal(out.data[0], [[0.0, 4.0, 0.0, 3.0]])


def test_retain_everything_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    for keep in (True, False):
        out, mask = sparse_retain(x, 12, keep_largest=keep)
        assert np.array_equal(out.data, x.data)
        assert mask.all()


def test_tie_break_prefers_smaller_flat_index():
    x = Tensor(np.array([[[2.0, 2.0], [2.0, 2.0]]]))
    out, mask = sparse_retain(x, 2, keep_largest=True)
    assert np.array_equal(out.data[0].reshape(-1), [2.0, 2.0, 0.0, 0.0])
    assert np.array_equal(mask[0].reshape(-1), [True, True, False, False])
    assert np.array_equal(mask[0], brute_force_mask(x.data[0], 2, True))


def test_retention_count_exact_with_and_without_ties():
    rng = np.random.default_rng(5)
    for trial in range(200):
        b, n, m = 2, rng.integers(1, 5), rng.integers(1, 6)
        values = rng.normal(size=(b, n, m))
        if trial % 3 == 0:  # engineered ties
            values = np.round(values * 2.0) / 2.0
        k = int(rng.integers(1, n * m + 1))
        for keep in (True, False):
            mask = retention_mask(values, k, keep, axis="token")
            assert mask.sum(axis=(1, 2)).tolist() == [k, k]
            for j in range(b):
                assert np.array_equal(mask[j], brute_force_mask(values[j], k, keep))


def test_top_bottom_masks_partition_when_distinct():
    rng = np.random.default_rng(9)
    values = rng.permutation(24).astype(float).reshape(1, 4, 6)
    for k in range(1, 24):
        top = retention_mask(values, k, True)
        bottom = retention_mask(values, 24 - k, False)
        assert not np.any(top & bottom)
        assert np.all(top | bottom)


def test_channel_axis_exact_count_and_partition():
    rng = np.random.default_rng(13)
    values = rng.normal(size=(3, 4, 7))
    k = 3
    mask = retention_mask(values, k, True, axis="channel")
    assert np.all(mask.sum(axis=2) == k)
    other = retention_mask(values, 7 - k, False, axis="channel")
    assert not np.any(mask & other)
    assert np.all(mask | other)
    for j in range(3):
        for t in range(4):
            assert np.array_equal(mask[j, t], brute_force_mask(values[j, t], k, True))


def test_retention_k_out_of_range():
    values = np.zeros((1, 2, 3))
    with pytest.raises(SelectionError):
        retention_mask(values, 0, True)
    with pytest.raises(SelectionError):
        retention_mask(values, 7, True)
    with pytest.raises(SelectionError):
        retention_mask(values, 4, True, axis="channel")


def test_retention_gradient_masks_dropped_entries():
    x = Tensor(np.array([[[1.0, 4.0, 2.0, 3.0]]]))
    with Tape() as tape:
        out, mask = sparse_retain(x, 2, keep_largest=True)
        grads = tape.backward(sum_over_axis(out))
    assert np.array_equal(grads[x][0], [[0.0, 1.0, 0.0, 1.0]])


def test_default_schedule_e4():
    assert default_retention_schedule(4) == [(0.25, True), (0.5, True), (0.25, False), (0.5, False)]


def test_default_schedule_e2():
    assert default_retention_schedule(2) == [(0.5, True), (0.5, False)]


@pytest.mark.parametrize("experts", [2, 4, 8, 16])
def test_default_schedule_properties(experts):
    sched = default_retention_schedule(experts)
    assert len(sched) == experts
    assert sum(keep for _, keep in sched) == experts // 2
    assert all(0.0 < q <= 0.5 for q, _ in sched)


def test_default_schedule_rejects_odd():
    with pytest.raises(ConfigError):
        default_retention_schedule(3)
    with pytest.raises(ConfigError):
        AdapterConfig(experts=5)


def toy_params(rng, dim, cfg):
    return init_adapter_params(rng, dim, cfg)


def test_routing_uniform_for_zero_gate():
    cfg = AdapterConfig(experts=4, hidden=2)
    gates = GateParams(
        route_w=Tensor(np.zeros((4, 6))),
        route_b=Tensor(np.zeros(4)),
        thresh_w=Tensor(np.zeros((4, 6))),
        thresh_b=Tensor(np.zeros(4)),
    )
    x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 6)))
    g = routing_weights(x, gates, use_sdd_input=True)
    assert np.allclose(g.data, 0.25, atol=1e-15)


def test_routing_rows_normalized_and_nonnegative():
    rng = np.random.default_rng(21)
    cfg = AdapterConfig(experts=4, hidden=2)
    params = toy_params(rng, 6, cfg)
    x = Tensor(rng.normal(size=(3, 5, 6)))
    g = routing_weights(x, params.gates, use_sdd_input=True).data
    assert np.all(g >= 0.0)
    assert np.all(np.abs(g.sum(axis=-1) - 1.0) <= 1e-9)


def test_routing_hand_softmax():
    # two experts, per-token logits [ln 3, 0] -> weights [0.75, 0.25]
    d = 2
    gates = GateParams(
        route_w=Tensor(np.array([[np.log(3.0), 0.0], [0.0, 0.0]])),
        route_b=Tensor(np.zeros(2)),
        thresh_w=Tensor(np.zeros((2, d))),
        thresh_b=Tensor(np.zeros(2)),
    )
    x = Tensor(np.array([[[1.0, 0.0]]]))
    g = routing_weights(x, gates, use_sdd_input=False).data
    assert np.allclose(g[0, 0], [0.75, 0.25], atol=1e-12)


def test_threshold_zero_gate_gives_static_budget():
    d, experts = 6, 4
    gates = GateParams(
        route_w=Tensor(np.zeros((experts, d))),
        route_b=Tensor(np.zeros(experts)),
        thresh_w=Tensor(np.zeros((experts, d))),
        thresh_b=Tensor(np.zeros(experts)),
    )
    x = Tensor(np.random.default_rng(2).normal(size=(3, 5, d)))
    t = threshold_offsets(x, gates)
    assert np.array_equal(t.data, np.zeros((3, experts)))
    counts = retention_counts(0.5, 0.1, t.data[:, 0], slots=40)
    assert np.array_equal(counts, np.full(3, 20))


def test_threshold_range_strictly_open():
    rng = np.random.default_rng(4)
    cfg = AdapterConfig(experts=4, hidden=2)
    params = toy_params(rng, 6, cfg)
    x = Tensor(rng.normal(scale=10.0, size=(4, 5, 6)))
    t = threshold_offsets(x, params.gates).data
    assert np.all(t > -1.0)
    assert np.all(t < 1.0)


def test_retention_budget_formula_at_saturation():
    # saturated tanh offset 1.0 with eta=0.1, q=0.5, 100 slots -> 60
    offsets = np.tanh(np.array([50.0]))
    assert offsets[0] == 1.0
    counts = retention_counts(0.5, 0.1, offsets, slots=100)
    assert counts[0] == 60


def test_retention_budget_clamps_to_valid_range():
    counts = retention_counts(0.9, 1.0, np.array([1.0]), slots=50)
    assert counts[0] == 50
    counts = retention_counts(0.02, 1.0, np.array([-1.0]), slots=50)
    assert counts[0] == 1


def test_expert_zero_init_outputs_zero():
    rng = np.random.default_rng(6)
    cfg = AdapterConfig(experts=2, hidden=3)
    params = toy_params(rng, 5, cfg)
    x = Tensor(rng.normal(size=(2, 4, 5)))
    out, _ = expert_forward(x, params.experts[0], counts=np.array([6, 6]), offset_col=None, eta=0.1)
    assert np.array_equal(out.data, np.zeros((2, 4, 5)))


def test_expert_dense_path_matches_hand_product():
    rng = np.random.default_rng(8)
    d, h, n = 3, 1, 2
    w_down = rng.normal(size=(d, h))
    w_up = rng.normal(size=(h, d))
    p = ExpertParams(
        w_down=Tensor(w_down),
        b_down=Tensor(np.zeros(h)),
        w_up=Tensor(w_up),
        b_up=Tensor(np.zeros(d)),
        spec=RetentionSpec(1.0, True),
    )
    x = rng.normal(size=(1, n, d))
    out, _ = expert_forward(Tensor(x), p, counts=np.array([n * h]), offset_col=None, eta=0.1)
    expected = np.maximum(x @ w_down, 0.0) @ w_up
    assert np.allclose(out.data, expected, atol=1e-12)


def test_eta_irrelevant_when_offset_zero():
    rng = np.random.default_rng(10)
    cfg = AdapterConfig(experts=2, hidden=3)
    params = toy_params(rng, 5, cfg)
    params.experts[0].w_up = Tensor(rng.normal(size=(3, 5)))
    x = Tensor(rng.normal(size=(2, 4, 5)))
    outs = []
    for eta in (0.1, 0.2):
        col = Tensor(np.zeros(2))
        out, _ = expert_forward(x, params.experts[0], np.array([6, 6]), col, eta)
        outs.append(out.data)
    assert np.array_equal(outs[0], outs[1])


# ---------------------------------------------------------------------------
# straight-line reimplementation used as the mixture oracle


def oracle_adapter(x, params: AdapterParams, cfg: AdapterConfig):
    b, n, d = x.shape
    num = cfg.experts
    route_w = params.gates.route_w.data
    route_b = params.gates.route_b.data
    thresh_w = params.gates.thresh_w.data
    thresh_b = params.gates.thresh_b.data

    if cfg.use_dag:
        gate_in = x.copy()
        if cfg.use_sdd:
            for j in range(b):
                m = brute_force_mask(gate_in[j], max(1, (n * d) // 2), False)
                gate_in[j] = gate_in[j] * m
        weights = np.zeros((b, n, num))
        for j in range(b):
            for t in range(n):
                logits = route_w @ gate_in[j, t] + route_b
                z = np.exp(logits - logits.max())
                weights[j, t] = z / z.sum()
    else:
        weights = np.full((b, n, num), 1.0 / num)

    if cfg.use_asg:
        offsets = np.zeros((b, num))
        for j in range(b):
            offsets[j] = np.tanh(thresh_w @ x[j].mean(axis=0) + thresh_b)
    else:
        offsets = np.zeros((b, num))

    y = np.zeros((b, n, d))
    for i, expert in enumerate(params.experts):
        w_down, b_down = expert.w_down.data, expert.b_down.data
        w_up, b_up = expert.w_up.data, expert.b_up.data
        h = w_down.shape[1]
        for j in range(b):
            hidden = np.maximum(x[j] @ w_down + b_down, 0.0)
            if cfg.use_sdd:
                slots = n * h
                frac = np.clip(
                    expert.spec.fraction + cfg.eta * offsets[j, i], 1.0 / slots, 1.0
                )
                k = int(np.floor(slots * frac + 1e-9))
                hidden = hidden * brute_force_mask(hidden, k, expert.spec.keep_largest)
            if cfg.use_asg:
                hidden = hidden * (1.0 + cfg.eta * offsets[j, i])
            out = hidden @ w_up + b_up
            y[j] += weights[j, :, i : i + 1] * out
    return y, weights, offsets


def test_adapter_zero_at_initialization():
    rng = np.random.default_rng(14)
    cfg = AdapterConfig(experts=4, hidden=3)
    params = toy_params(rng, 6, cfg)
    x = Tensor(rng.normal(size=(2, 5, 6)))
    out = adapter_forward(x, params, cfg)
    assert np.array_equal(out.y.data, np.zeros((2, 5, 6)))


def test_identical_experts_make_routing_irrelevant():
    rng = np.random.default_rng(15)
    cfg = AdapterConfig(experts=2, hidden=3, use_asg=False, use_sdd=False)
    params = toy_params(rng, 4, cfg)
    shared_down = rng.normal(size=(4, 3))
    shared_up = rng.normal(size=(3, 4))
    for e in params.experts:
        e.w_down = Tensor(shared_down)
        e.w_up = Tensor(shared_up)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    routed = adapter_forward(x, params, cfg)
    uniform_cfg = AdapterConfig(experts=2, hidden=3, use_asg=False, use_sdd=False, use_dag=False)
    uniform = adapter_forward(x, params, uniform_cfg)
    assert np.allclose(routed.y.data, uniform.y.data, atol=1e-12)


@pytest.mark.parametrize(
    "toggles",
    [
        dict(),
        dict(use_sdd=False),
        dict(use_dag=False),
        dict(use_asg=False),
        dict(use_sdd=False, use_dag=False, use_asg=False),
    ],
)
def test_adapter_matches_straightline_oracle(toggles):
    rng = np.random.default_rng(16)
    cfg = AdapterConfig(experts=4, hidden=3, **toggles)
    params = toy_params(rng, 6, cfg)
    for e in params.experts:  # random up-projections so the output is nonzero
        e.w_up = Tensor(rng.normal(size=(3, 6)))
        e.b_up = Tensor(rng.normal(size=6))
        e.b_down = Tensor(rng.normal(scale=0.1, size=3))
    x = rng.normal(size=(2, 5, 6))
    out = adapter_forward(Tensor(x), params, cfg)
    expected_y, expected_w, expected_t = oracle_adapter(x, params, cfg)
    assert np.allclose(out.y.data, expected_y, atol=1e-12)
    assert np.allclose(out.gate_weights.data, expected_w, atol=1e-12)
    assert np.allclose(out.thresholds.data, expected_t, atol=1e-12)


def test_adapter_mask_cardinality_matches_budget():
    rng = np.random.default_rng(18)
    cfg = AdapterConfig(experts=4, hidden=3)
    params = toy_params(rng, 6, cfg)
    x = Tensor(rng.normal(size=(3, 5, 6)))
    out = adapter_forward(x, params, cfg)
    for mask, counts in zip(out.masks, out.counts):
        assert np.array_equal(mask.sum(axis=(1, 2)), counts)


def test_adapter_channel_axis_mask_cardinality():
    rng = np.random.default_rng(19)
    cfg = AdapterConfig(experts=2, hidden=6, axis="channel")
    params = toy_params(rng, 4, cfg)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    out = adapter_forward(x, params, cfg)
    for mask, counts in zip(out.masks, out.counts):
        assert np.array_equal(mask.sum(axis=2), np.broadcast_to(counts[:, None], (2, 3)))


def test_adapter_gradients_match_finite_differences():
    rng = np.random.default_rng(20)
    cfg = AdapterConfig(experts=2, hidden=2, eta=0.1)
    params = toy_params(rng, 4, cfg)
    for e in params.experts:
        e.w_up = Tensor(rng.normal(scale=0.5, size=(2, 4)))
        e.b_up = Tensor(rng.normal(scale=0.1, size=4))
    x = Tensor(rng.normal(size=(1, 2, 4)))
    names = adapter_param_dict(params)
    weight = constant(np.random.default_rng(7).normal(size=(1, 2, 4)))

    def f():
        out = adapter_forward(x, params, cfg)
        return sum_over_axis(mul(out.y, weight))

    err = finite_diff_check(f, list(names.values()), step=1e-6)
    assert err < 1e-4


def test_threshold_gate_receives_gradient_when_eta_positive():
    rng = np.random.default_rng(22)
    cfg = AdapterConfig(experts=2, hidden=2, eta=0.1)
    params = toy_params(rng, 4, cfg)
    for e in params.experts:
        e.w_up = Tensor(rng.normal(scale=0.5, size=(2, 4)))
    x = Tensor(rng.normal(size=(2, 3, 4)))
    with Tape() as tape:
        out = adapter_forward(x, params, cfg)
        grads = tape.backward(sum_over_axis(out.y))
    assert np.any(grads[params.gates.thresh_w] != 0.0)
    assert np.any(grads[params.gates.route_w] != 0.0)
