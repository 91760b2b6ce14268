import numpy as np
import pytest

from mergelab.data import Dataset
from mergelab.errors import ContractError
from mergelab.merging import (
    MergeConfig,
    TaskVector,
    adamerging_fit,
    compose_merged,
    make_task_vector,
    merge_weighted_sum,
    regmean_merge,
    ties_merge,
)
from mergelab.model import init_model, text_embed
from mergelab.numerics import Rng


def random_params(seed, dtype=np.float32):
    rng = Rng(seed)
    return {"w": rng.normal((4, 3), dtype=dtype), "b": rng.normal((3,), dtype=dtype)}


def tv(delta_w, delta_b=None, source=""):
    delta_b = np.zeros(3) if delta_b is None else np.asarray(delta_b, dtype=np.float64)
    return TaskVector({"w": np.asarray(delta_w, dtype=np.float64), "b": delta_b}, source)


# --- task vectors


def test_task_vector_of_itself_is_zero():
    theta = random_params(0)
    v = make_task_vector(theta, theta)
    assert all(np.array_equal(v.delta[k], np.zeros_like(v.delta[k])) for k in v.delta)


def test_task_vector_roundtrip_bit_exact():
    pre = random_params(1)
    ft = random_params(2)
    v = make_task_vector(ft, pre)
    back = compose_merged(pre, [(1.0, v)])
    for k in pre:
        assert np.array_equal(back[k], ft[k])


def test_task_vector_structure_mismatch():
    with pytest.raises(ContractError, match="extra"):
        make_task_vector({"w": np.zeros(2), "extra": np.zeros(1)}, {"w": np.zeros(2)})
    with pytest.raises(ContractError, match="shapes"):
        make_task_vector({"w": np.zeros(3)}, {"w": np.zeros(2)})


# --- compose


def test_compose_empty_terms_is_base():
    pre = random_params(3)
    out = compose_merged(pre, [])
    for k in pre:
        assert np.array_equal(out[k], pre[k])


def test_compose_half_plus_half_of_same_vector():
    pre = random_params(4)
    ft = random_params(5)
    v = make_task_vector(ft, pre)
    out = compose_merged(pre, [(0.5, v), (0.5, v)])
    for k in pre:
        assert np.array_equal(out[k], ft[k])


def test_compose_per_layer_coefficients():
    pre = {"w": np.zeros(2, dtype=np.float32), "b": np.zeros(2, dtype=np.float32)}
    v = TaskVector({"w": np.ones(2), "b": np.ones(2)}, "x")
    out = compose_merged(pre, [({"w": 0.25, "b": 0.75}, v)])
    assert np.allclose(out["w"], 0.25)
    assert np.allclose(out["b"], 0.75)
    with pytest.raises(ContractError, match="unknown"):
        compose_merged(pre, [({"nope": 1.0}, v)])


# --- weighted sum (TA / SA)


def test_weighted_sum_single_model_at_one_recovers_model():
    pre = random_params(6)
    ft = random_params(7)
    v = make_task_vector(ft, pre)
    out = merge_weighted_sum(pre, [v], 1.0)
    for k in pre:
        assert np.array_equal(out[k], ft[k])


def test_simple_average_of_identical_models_is_exact():
    pre = random_params(8)
    ft = random_params(9)
    vs = [make_task_vector(ft, pre) for _ in range(3)]
    out = merge_weighted_sum(pre, vs, None)  # SA: coeff = 1/n
    for k in pre:
        assert np.array_equal(out[k], ft[k])


def test_weighted_sum_coefficient_bounds():
    pre = random_params(10)
    v = make_task_vector(random_params(11), pre)
    with pytest.raises(ContractError):
        merge_weighted_sum(pre, [v], 1.5)
    with pytest.raises(ContractError):
        merge_weighted_sum(pre, [], 0.3)


def test_merge_config_validation():
    with pytest.raises(ContractError):
        MergeConfig(coeff=2.0)
    with pytest.raises(ContractError):
        MergeConfig(ties_trim=0.0)


# --- Ties


def test_ties_single_model_full_trim_equals_weighted_sum():
    pre = random_params(12)
    ft = random_params(13)
    v = make_task_vector(ft, pre)
    a = ties_merge(pre, [v], coeff=0.3, trim=1.0)
    b = merge_weighted_sum(pre, [v], 0.3)
    for k in pre:
        assert np.array_equal(a[k], b[k])


def test_ties_hand_example_sign_election():
    # vectors (3, -2) and (1, 2), trim = 1: entry 1 sums to 4 -> elected +,
    # agreeing {3, 1} -> mean 2; entry 2 sums to 0 -> sign resolves +,
    # agreeing {2} -> mean 2. Final theta = coeff * (2, 2).
    pre = {"w": np.zeros(2, dtype=np.float64)}
    v1 = TaskVector({"w": np.array([3.0, -2.0])})
    v2 = TaskVector({"w": np.array([1.0, 2.0])})
    out = ties_merge(pre, [v1, v2], coeff=0.5, trim=1.0)
    assert np.allclose(out["w"], 0.5 * np.array([2.0, 2.0]))


def test_ties_hand_example_disjoint_trim():
    # vectors (1,0,0) and (0,1,0) at trim 1/3 each keep their own top entry;
    # elected signs +; zeros are excluded from the mean -> merged (1, 1, 0)
    pre = {"w": np.zeros(3, dtype=np.float64)}
    v1 = TaskVector({"w": np.array([1.0, 0.0, 0.0])})
    v2 = TaskVector({"w": np.array([0.0, 1.0, 0.0])})
    out = ties_merge(pre, [v1, v2], coeff=1.0, trim=1 / 3)
    assert np.allclose(out["w"], np.array([1.0, 1.0, 0.0]))


def test_ties_identical_vectors_match_weighted_sum():
    pre = random_params(14)
    ft = random_params(15)
    vs = [make_task_vector(ft, pre) for _ in range(4)]
    a = ties_merge(pre, vs, coeff=0.3, trim=1.0)
    b = merge_weighted_sum(pre, [vs[0]], 0.3)
    for k in pre:
        assert np.allclose(a[k], b[k], atol=1e-7)


def test_ties_trim_bounds():
    pre = random_params(16)
    v = make_task_vector(random_params(17), pre)
    with pytest.raises(ContractError):
        ties_merge(pre, [v], coeff=0.3, trim=0.0)
    with pytest.raises(ContractError):
        ties_merge(pre, [v], coeff=0.3, trim=1.2)


# --- RegMean


class _LinearFixture:
    """Tiny stand-in models sharing the ToyClipModel visual layout."""

    def __init__(self, seed, scale=1.0):
        rng = Rng(seed)
        model = init_model(rng, text_seed=3, classes=("a", "b"))
        self.visual = model.visual
        self.model = model


def _small_images(seed, n=40):
    return Rng(seed).uniform((n, 32, 32, 3))


def test_regmean_single_model_recovery():
    fx = _LinearFixture(20)
    ds = Dataset(_small_images(21), np.zeros(40, dtype=int), ["a", "b"], "train")
    merged = regmean_merge([fx.model], [ds], fx.visual)
    for k in fx.visual:
        assert np.abs(merged[k] - fx.visual[k]).max() <= 1e-6


def test_regmean_normal_equation_residual():
    models = [_LinearFixture(s).model for s in (22, 23, 24)]
    dsets = [Dataset(_small_images(30 + s), np.zeros(40, dtype=int), ["a", "b"], "train") for s in range(3)]
    from mergelab.merging import collect_linear_activations

    merged = regmean_merge(models, dsets, models[0].visual)
    decay, ridge_scale = 0.9, 1e-3
    for name in ("w0", "w1", "w2"):
        lhs = 0.0
        rhs = 0.0
        for m, ds in zip(models, dsets):
            x = collect_linear_activations(m, ds.images)[name]
            g = x.T @ x
            g = decay * g + (1 - decay) * np.diag(np.diag(g))
            g = g + ridge_scale * float(np.trace(g) / g.shape[0]) * np.eye(g.shape[0])
            lhs = lhs + g
            rhs = rhs + g @ m.visual[name].astype(np.float64)
        residual = np.linalg.norm(lhs @ merged[name].astype(np.float64) - rhs)
        assert residual <= 1e-6 * max(1.0, np.linalg.norm(rhs))


def test_regmean_1d_hand_example():
    # X1 = [1], W1 = 2; X2 = [1], W2 = 4  ->  (1 + 1) W = 2 + 4  ->  W = 3
    lhs = np.array([[1.0]]) + np.array([[1.0]])
    rhs = np.array([[1.0]]) @ np.array([[2.0]]) + np.array([[1.0]]) @ np.array([[4.0]])
    from mergelab.numerics import solve_spd

    assert solve_spd(lhs, rhs)[0, 0] == pytest.approx(3.0, abs=1e-12)


def test_regmean_perturbation_optimality():
    """Without decay or ridge the merged W minimizes the raw activation
    matching objective; random perturbations never improve it."""
    rng = np.random.default_rng(9)
    xs = [rng.standard_normal((30, 6)) for _ in range(3)]
    ws = [rng.standard_normal((6, 4)) for _ in range(3)]
    lhs = sum(x.T @ x for x in xs)
    rhs = sum((x.T @ x) @ w for x, w in zip(xs, ws))
    from mergelab.numerics import solve_spd

    w_star = solve_spd(lhs, rhs)

    def objective(w):
        return sum(np.linalg.norm(x @ w - x @ wi, "fro") ** 2 for x, wi in zip(xs, ws))

    base = objective(w_star)
    for _ in range(20):
        eta = rng.standard_normal(w_star.shape) * 1e-3
        assert objective(w_star + eta) >= base - 1e-9


def test_regmean_contract_errors():
    fx = _LinearFixture(25)
    ds = Dataset(_small_images(26), np.zeros(40, dtype=int), ["a", "b"], "train")
    with pytest.raises(ContractError):
        regmean_merge([fx.model], [], fx.visual)
    empty = Dataset(np.zeros((0, 32, 32, 3), dtype=np.float32), np.zeros(0, dtype=int), ["a"], "train")
    with pytest.raises(ContractError):
        regmean_merge([fx.model], [empty], fx.visual)


# --- AdaMerging


def _ada_setup():
    base = init_model(Rng(40), text_seed=9, classes=("a", "b", "c", "d"))
    pre = base.visual
    tvs = []
    for s in (41, 42):
        ft = init_model(Rng(s), text_seed=9, classes=("a", "b")).visual
        scaled = {k: pre[k] + 0.05 * (ft[k] - pre[k]) for k in pre}
        tvs.append(make_task_vector(scaled, pre, source=f"t{s}"))
    dev = [Rng(50).uniform((8, 32, 32, 3)), Rng(51).uniform((8, 32, 32, 3))]
    classes = [["a", "b"], ["c", "d"]]
    return base, pre, tvs, dev, classes


def test_adamerging_zero_steps_equals_initialization():
    base, pre, tvs, dev, classes = _ada_setup()
    res = adamerging_fit(pre, tvs, dev, classes, base.text_matrix, base.tau, init=0.3, steps=0)
    assert all(all(v == 0.3 for v in c.values()) for c in res.coeffs)
    ta = merge_weighted_sum(pre, tvs, 0.3)
    for k in pre:
        assert np.array_equal(res.merged[k], ta[k])


def test_adamerging_entropy_descends_and_coeffs_clamped():
    base, pre, tvs, dev, classes = _ada_setup()
    res = adamerging_fit(pre, tvs, dev, classes, base.text_matrix, base.tau, steps=30, lr=1e-2)
    assert res.entropy_final <= res.entropy_initial + 1e-9
    for c in res.coeffs:
        assert all(0.0 <= v <= 1.0 for v in c.values())


def test_adamerging_empty_dev_rejected():
    base, pre, tvs, dev, classes = _ada_setup()
    dev[0] = np.zeros((0, 32, 32, 3), dtype=np.float32)
    with pytest.raises(ContractError):
        adamerging_fit(pre, tvs, dev, classes, base.text_matrix, base.tau, steps=1)


def test_merges_leave_text_table_untouched():
    base, pre, tvs, dev, classes = _ada_setup()
    before = {k: v.tobytes() for k, v in base.text_table.items()}
    merge_weighted_sum(pre, tvs, 0.3)
    ties_merge(pre, tvs, 0.3, 0.2)
    adamerging_fit(pre, tvs, dev, classes, base.text_matrix, base.tau, steps=2)
    assert {k: v.tobytes() for k, v in base.text_table.items()} == before
