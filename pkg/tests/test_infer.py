import numpy as np
import pytest

from mtvrp.core import VARIANTS, Instance, build_distance_matrix, solution_cost, validate_solution
from mtvrp.env import Env
from mtvrp.infer import (InferenceConfig, augment8, greedy_solve, greedy_solve_many, sample_solve,
                         solve, solve_aug8, solve_aug8_many)
from mtvrp.instancegen import GenConfig, gen_variant
from mtvrp.policy import ModelConfig, init_params

SMALL = ModelConfig(embed_dim=16, n_layers=1, n_heads=2, ff_hidden=32)


@pytest.fixture(scope="module")
def model():
    return init_params(SMALL, 0)


def test_augment8_point_images():
    inst = Instance(coords=np.array([[0.5, 0.5], [0.2, 0.7]]), demands=np.array([0.0, 0.1]))
    images = [tuple(np.round(a.coords[1], 12)) for a in augment8(inst)]
    assert images == [(0.2, 0.7), (0.7, 0.2), (0.2, 0.3), (0.7, 0.8), (0.8, 0.7), (0.3, 0.2), (0.8, 0.3), (0.3, 0.8)]


@pytest.mark.parametrize("variant", ["CVRP", "OVRPBLTW"])
def test_augment8_isometry(variant):
    inst = gen_variant(variant, GenConfig(n=20, seed=1))
    copies = augment8(inst)
    np.testing.assert_array_equal(copies[0].coords, inst.coords)
    d0 = build_distance_matrix(inst)
    for c in copies:
        assert np.abs(build_distance_matrix(c) - d0).max() <= 1e-12
        np.testing.assert_array_equal(c.demands, inst.demands)


def test_augmented_mask_sequences_match():
    inst = gen_variant("VRPBLTW", GenConfig(n=8, seed=5))
    env = Env(inst)
    rng = np.random.default_rng(0)
    state = env.reset(env.feasible_mask(env.initial()).unmasked()[0])
    seq = [state.current]
    while not state.done:
        state = env.step(state, int(rng.choice(env.feasible_mask(state).unmasked())))
        seq.append(state.current)
    for copy in augment8(inst)[1:]:
        ce = Env(copy)
        s, e = ce.initial(), env.initial()
        for node in seq:
            np.testing.assert_array_equal(ce.feasible_mask(s).masked, env.feasible_mask(e).masked)
            s, e = ce.step(s, node), env.step(e, node)


def test_single_customer_tour(model):
    inst = gen_variant("CVRP", GenConfig(n=1, seed=3))
    sol, cost = greedy_solve(inst, model)
    assert sol.routes == ((1,),)
    assert cost == pytest.approx(2 * build_distance_matrix(inst)[0, 1], abs=1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
def test_greedy_and_aug8(model, variant):
    instances = [gen_variant(variant, GenConfig(n=10, seed=s)) for s in range(6)]
    greedy = greedy_solve_many(instances, model)
    aug = solve_aug8_many(instances, model)
    for inst, (gs, gc), (asol, ac) in zip(instances, greedy, aug):
        assert validate_solution(gs, inst) is None and validate_solution(asol, inst) is None
        assert gc == solution_cost(gs, inst)
        assert ac == solution_cost(asol, inst)
        assert ac <= gc


def test_batched_greedy_equals_single(model):
    instances = [gen_variant("OVRPTW", GenConfig(n=9, seed=s)) for s in range(5)]
    many = greedy_solve_many(instances, model, InferenceConfig(batch_size=2))
    for inst, (sol, cost) in zip(instances, many):
        one = greedy_solve(inst, model)
        assert one[0].routes == sol.routes and one[1] == cost


def test_greedy_is_min_over_starts(model):
    inst = gen_variant("VRPTW", GenConfig(n=8, seed=2))
    best = greedy_solve(inst, model)[1]
    singles = [greedy_solve(inst, model, InferenceConfig(n_starts=k))[1] for k in (1, 4)]
    assert best <= singles[1] <= singles[0]


def test_sampling_determinism_and_monotone(model):
    inst = gen_variant("VRPBL", GenConfig(n=10, seed=4))
    a = sample_solve(inst, model, InferenceConfig(mode="sample", samples=1, seed=3))
    b = sample_solve(inst, model, InferenceConfig(mode="sample", samples=1, seed=3))
    assert a[0].routes == b[0].routes and a[1] == b[1]
    costs = [sample_solve(inst, model, InferenceConfig(mode="sample", samples=k, seed=3))[1] for k in (1, 2, 4, 8)]
    assert all(x >= y for x, y in zip(costs, costs[1:]))
    for k in (1, 8):
        sol, _ = sample_solve(inst, model, InferenceConfig(mode="sample", samples=k, seed=3))
        assert validate_solution(sol, inst) is None


def test_solve_dispatch(model):
    inst = gen_variant("CVRP", GenConfig(n=6, seed=0))
    assert solve(inst, model, InferenceConfig())[1] == greedy_solve(inst, model)[1]
    assert solve(inst, model, InferenceConfig(augment8=True))[1] == solve_aug8(inst, model)[1]
    with pytest.raises(ValueError):
        InferenceConfig(mode="beam")
