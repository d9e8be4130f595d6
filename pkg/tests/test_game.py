import json

import numpy as np
import pytest

from forgelab import game
from forgelab.data import Domain, MiniBatch, gen_synthetic
from forgelab.game import GameConfig
from forgelab.greedy import ForgeResult
from forgelab.nn import FcnArchitecture
from forgelab.reproduce import ReductionPlan, ReproReport, measure_repr_error
from forgelab.trace import TrainConfig, train


@pytest.fixture(scope="module")
def setup():
    ds = gen_synthetic(1, 200, 32, 3)
    tr = train(ds, TrainConfig(0.05, 10, 16, 0, FcnArchitecture((32, 4, 3))))
    return tr, ds


def test_config_validation():
    with pytest.raises(ValueError):
        GameConfig(-1.0, Domain.box())
    with pytest.raises(ValueError):
        GameConfig(1.0, Domain.box(), adversary="oracle")


def test_honest_replay_rejected(setup):
    tr, ds = setup
    out = game.play(tr, GameConfig(1.0, ds.domain, adversary="honest_replay"), dataset=ds)
    assert (out.verdict, out.reject_reason) == ("REJECT", "not_distinct")
    assert not out.accepted


def test_greedy_rejected_at_repr_threshold(setup):
    tr, ds = setup
    eps = measure_repr_error(tr, 3).eps_repr
    out = game.play(tr, GameConfig(eps, ds.domain, adversary="greedy", options={"m_batches": 10}),
                    ReductionPlan("sequential_permuted", 7), ds)
    assert out.reject_reason == "error_exceeds_eps" and out.measured_error > eps


def test_exact_perturb_accepted_in_box(setup):
    tr, ds = setup
    out = game.play(tr, GameConfig(1e-6, Domain.box(), adversary="exact_perturb"), dataset=ds)
    assert out.accepted and out.reject_reason is None and out.measured_error <= 1e-6


def test_exact_perturb_off_grid(setup):
    tr, ds = setup
    out = game.play(tr, GameConfig(1.0, ds.domain, adversary="exact_perturb"), dataset=ds)
    assert out.reject_reason == "out_of_domain"


def test_out_of_domain_never_accepted(setup):
    tr, ds = setup
    for eps in (1e-6, 1.0, 1e9):
        out = game.play(tr, GameConfig(eps, Domain.box(0.0, 1.0), adversary="exact_perturb",
                                       options={"scale": 50.0}), dataset=ds)
        assert out.reject_reason == "out_of_domain"


def test_error_matrix_needs_single_layer(setup):
    tr, ds = setup
    out = game.play(tr, GameConfig(1.0, Domain.box(label="real_vector"), adversary="exact_error_matrix"),
                    dataset=ds)
    assert out.reject_reason == "not_distinct" and "adversary_failure" in out.diagnostics


def test_error_matrix_single_layer_accepted():
    ds = gen_synthetic(2, 200, 40, 3)
    tr = train(ds, TrainConfig(0.05, 5, 16, 0, FcnArchitecture((40, 3))))
    dom = Domain.box(label="real_vector")
    out = game.play(tr, GameConfig(1e-6, dom, adversary="exact_error_matrix"), dataset=ds)
    assert out.accepted
    out = game.play(tr, GameConfig(1e-6, Domain.box(), adversary="exact_error_matrix"), dataset=ds)
    assert out.reject_reason == "out_of_domain"


def test_nearest_neighbor(setup):
    tr, ds = setup
    out = game.play(tr, GameConfig(0.0, ds.domain, adversary="nearest_neighbor"), dataset=ds)
    assert out.reject_reason == "error_exceeds_eps"


def test_challenge_step_uniform_and_deterministic(setup):
    tr, ds = setup
    steps = [game.play(tr, GameConfig(1.0, ds.domain, s, "honest_replay"), dataset=ds).step
             for s in range(60)]
    assert set(steps) == set(range(tr.steps))
    again = game.play(tr, GameConfig(1.0, ds.domain, 5, "honest_replay"), dataset=ds).step
    assert again == steps[5]


def test_replay_bit_identical(setup):
    tr, ds = setup
    cfg = GameConfig(1e-3, ds.domain, 3, "greedy", 4, options={"m_batches": 5})
    a, b = game.play(tr, cfg, dataset=ds), game.play(tr, cfg, dataset=ds)
    assert a.to_json() == b.to_json()


def test_to_json(setup):
    tr, ds = setup
    d = json.loads(game.play(tr, GameConfig(1.0, ds.domain, adversary="honest_replay"), dataset=ds).to_json())
    assert d["verdict"] == "REJECT" and d["method"] == "honest_replay"


def test_strict_verifier_rejects_noisy_honest_recomputation(setup):
    tr, _ = setup
    outs = game.verify_trace(tr, 0.0, ReductionPlan("sequential_permuted", 3))
    assert any(o.reject_reason == "error_exceeds_eps" for o in outs)
    assert all(o.accepted for o in game.verify_trace(tr, 0.0))


def test_shape_mismatch_rejected(setup, monkeypatch):
    tr, ds = setup
    bad = ForgeResult(MiniBatch(np.zeros((32, 3)), np.eye(3)), 0.0, "x")
    monkeypatch.setattr(game, "forge", lambda *a: bad)
    out = game.play(tr, GameConfig(1.0, ds.domain), dataset=ds)
    assert out.reject_reason == "not_distinct"


class TestThreshold:
    def test_margins(self):
        rep = ReproReport([1e-16, 3e-16], 3e-16, 2)
        assert game.threshold_from_measurement(rep) == 3e-16
        assert game.threshold_from_measurement(rep, 10) == pytest.approx(3e-15)

    def test_zero_noise(self, setup):
        tr, _ = setup
        assert game.threshold_from_measurement(measure_repr_error(tr, 2, shuffle=False)) == 0.0
