import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glimpse import diffcore as dc
from glimpse.agent import AgentConfig
from glimpse.synthdata import Example, FrameSequence, GroundTruthInstance, SynthConfig, generate_dataset
from glimpse.training import (
    RMSProp,
    RewardConfig,
    TrainConfig,
    Trainer,
    apply_variant,
    detection_loss,
    episode_reward,
    logit,
    match_candidates,
    median_duration,
    reinforce_surrogate,
    returns_and_baseline,
    sample_minibatch,
    train,
)

from oracles import argmin_oracle

G = GroundTruthInstance
TINY = AgentConfig(hidden=8, loc_embed=4, feat_embed=8, obs_dim=8)


def _logits(rows):
    return dc.parameter(logit(np.array(rows, dtype=float)))


def test_match_picks_nearest_boundary():
    y = match_candidates([0.3], [G(0.0, 0.1), G(0.6, 0.8)])
    assert y.tolist() == [[1, 0]]


def test_match_with_no_ground_truth_is_empty():
    assert match_candidates([0.1, 0.5], []).shape == (2, 0)


def test_match_inside_an_interval_uses_the_closer_bound():
    y = match_candidates([0.55], [G(0.0, 0.2), G(0.5, 0.8)])
    assert y.tolist() == [[0, 1]]


def test_match_ties_go_to_the_smaller_index():
    y = match_candidates([0.5], [G(0.0, 0.25), G(0.75, 1.0)])
    assert y.tolist() == [[1, 0]]


def test_match_agrees_with_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        M = int(rng.integers(1, 4))
        cuts = np.sort(rng.choice(np.arange(21), size=2 * M, replace=False)) / 20
        gts = [G(cuts[2 * k], cuts[2 * k + 1]) for k in range(M)]
        locs = rng.integers(0, 21, size=6) / 20
        y = match_candidates(locs, gts)
        assert (y.sum(axis=1) == 1).all()
        assert np.argmax(y, axis=1).tolist() == argmin_oracle(locs, [(g.s, g.e) for g in gts])


def test_negative_sequence_loss_is_six_log_two():
    z = dc.parameter(np.zeros((6, 3)))
    loss = detection_loss(z, match_candidates(np.zeros(6), []), [], gamma=1.0)
    assert loss.item() == pytest.approx(6 * math.log(2), abs=1e-12)
    assert round(loss.item(), 4) == 4.1589


def test_single_matched_candidate_loss():
    z = _logits([[0.2, 0.4, 0.5]])
    g = [G(0.3, 0.5)]
    loss = detection_loss(z, match_candidates([0.35], g), g, gamma=1.0)
    assert loss.item() == pytest.approx(-math.log(0.5) + 0.02, abs=1e-12)
    assert round(loss.item(), 4) == 0.7131


def test_perfect_candidate_has_vanishing_loss():
    g = [G(0.3, 0.5)]
    z = _logits([[0.3, 0.5, 1 - 1e-7]])
    assert detection_loss(z, match_candidates([0.4], g), g).item() < 1e-6


def test_every_candidate_in_a_positive_sequence_targets_confidence_one():
    g = [G(0.0, 0.1)]
    z = _logits([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    loss = detection_loss(z, match_candidates([0.05, 0.95], g), g, gamma=0.0)
    dc.backward(loss)
    assert (z.grad[:, 2] < 0).all()  # pushing confidence logits up


def test_gamma_scales_only_the_localization_term():
    g = [G(0.3, 0.5)]
    y = match_candidates([0.4], g)
    base = detection_loss(_logits([[0.2, 0.4, 0.5]]), y, g, gamma=0.0).item()
    full = detection_loss(_logits([[0.2, 0.4, 0.5]]), y, g, gamma=3.0).item()
    assert full - base == pytest.approx(3 * 0.02, abs=1e-12)


def test_detection_loss_gradient():
    rng = np.random.default_rng(1)
    z = dc.parameter(rng.standard_normal((5, 3)))
    g = [G(0.1, 0.3), G(0.6, 0.9)]
    y = match_candidates(rng.random(5), g)
    assert dc.grad_check(lambda: detection_loss(z, y, g, 1.0), [z], probes=15) <= 1e-6


REWARD = RewardConfig()


def test_reward_missed_positive_sequence():
    assert episode_reward([], [G(0.1, 0.2), G(0.5, 0.6)], REWARD) == (-1.0, [])


def test_reward_silent_negative_sequence():
    assert episode_reward([], [], REWARD) == (0.0, [])


def test_reward_duplicate_claim_is_false_positive():
    g = [G(0.2, 0.5)]
    a = (0.2, 0.41, 0.9)   # IoU 0.7
    b = (0.2, 0.38, 0.8)   # IoU 0.6
    assert a[1] - a[0] == pytest.approx(0.7 * 0.3)
    r, flags = episode_reward([a, b], g, REWARD)
    assert r == 0.0 and flags == [True, False]


def test_reward_uses_confidence_order_not_input_order():
    g = [G(0.2, 0.5)]
    r, flags = episode_reward([(0.2, 0.38, 0.8), (0.2, 0.41, 0.9)], g, REWARD)
    assert r == 0.0 and flags == [False, True]


def test_reward_false_positives_on_negative_sequence():
    r, flags = episode_reward([(0.1, 0.2, 0.5), (0.4, 0.6, 0.5)], [], REWARD)
    assert r == -2.0 and flags == [False, False]


preds = st.lists(st.tuples(st.integers(0, 20), st.integers(1, 8), st.integers(0, 100)), max_size=6).map(
    lambda xs: [(s / 40, (s + w) / 40, c / 100) for s, w, c in xs])
gts = st.lists(st.tuples(st.integers(0, 3), st.integers(1, 9)), max_size=3).map(
    lambda xs: [G((10 * k + a) / 40, (10 * k + a + 1) / 40) for k, (a, _) in enumerate(xs) if 10 * k + a + 1 <= 40])


@settings(max_examples=200, deadline=None)
@given(preds, gts)
def test_reward_never_exceeds_possible_true_positives(p, g):
    r, flags = episode_reward(p, g, REWARD)
    if p:
        assert r <= min(len(g), len(p)) * REWARD.r_plus
        assert sum(flags) <= len(g)


@settings(max_examples=200, deadline=None)
@given(preds.map(lambda p: list({c: x for x in p for c in [x[2]]}.values())), gts, st.randoms())
def test_reward_with_distinct_confidences_is_permutation_invariant(p, g, rnd):
    shuffled = p[:]
    rnd.shuffle(shuffled)
    assert episode_reward(p, g, REWARD)[0] == episode_reward(shuffled, g, REWARD)[0]


def test_reward_config_validation():
    for bad in (RewardConfig(r_plus=0.0), RewardConfig(r_minus=0.5), RewardConfig(r_p=1.0), RewardConfig(alpha=1.0)):
        with pytest.raises(ValueError):
            bad.validate()


def test_returns_repeat_the_terminal_reward_and_fresh_baseline_is_zero():
    H = 5
    params = dc.ParamSet({"base.w": np.zeros((H, 1)), "base.b": np.zeros(1)})
    hidden = [dc.constant(np.random.default_rng(k).standard_normal((1, H))) for k in range(6)]
    returns, baselines, _ = returns_and_baseline([2.0], hidden, params)
    np.testing.assert_array_equal(returns, np.full((6, 1), 2.0))
    np.testing.assert_array_equal(baselines, 0.0)
    np.testing.assert_array_equal(returns - baselines, returns)


def test_baseline_fits_a_constant_reward():
    H = 4
    rng = np.random.default_rng(2)
    params = dc.ParamSet({"base.w": np.zeros((H, 1)), "base.b": np.zeros(1)})
    opt = RMSProp(params.group("base"), lr=1e-2)
    for _ in range(3000):
        hidden = [dc.constant(0.1 * rng.standard_normal((8, H))) for _ in range(3)]
        params.zero_grad()
        _, _, loss = returns_and_baseline(np.ones(8), hidden, params)
        dc.backward(loss)
        opt.step()
    opt.lr = 1e-4
    for _ in range(500):
        hidden = [dc.constant(0.1 * rng.standard_normal((8, H))) for _ in range(3)]
        params.zero_grad()
        _, _, loss = returns_and_baseline(np.ones(8), hidden, params)
        dc.backward(loss)
        opt.step()
    _, b, _ = returns_and_baseline(np.ones(8), hidden, params)
    assert np.abs(b - 1.0).max() <= 1e-3


def test_baseline_loss_does_not_reach_its_inputs():
    h = dc.parameter(np.ones((2, 3)))
    params = dc.ParamSet({"base.w": np.ones((3, 1)), "base.b": np.zeros(1)})
    _, _, loss = returns_and_baseline([1.0, -1.0], [h], params)
    dc.backward(loss)
    assert h.grad is None or not h.grad.any()
    assert params["base.w"].grad is not None


def test_zero_advantage_gives_zero_policy_gradient():
    z = dc.parameter(np.array([[0.3], [-0.2]]))
    lp = dc.mul(dc.bce_with_logits(z, np.array([[1.0], [0.0]])), -1.0)
    dc.backward(reinforce_surrogate([lp], np.zeros((1, 2))))
    np.testing.assert_array_equal(z.grad, 0.0)


def test_surrogate_ascends_log_probability_of_good_actions():
    z = dc.parameter(np.array([[0.0]]))
    lp = dc.mul(dc.bce_with_logits(z, np.array([[1.0]])), -1.0)
    dc.backward(reinforce_surrogate([lp], np.array([[1.0]])))
    assert z.grad[0, 0] == pytest.approx(-0.5)  # minimizing raises q


def test_rmsprop_first_step():
    p = dc.parameter(np.array([1.0]))
    p.grad = np.array([3.0])
    opt = RMSProp([p], lr=0.01, rho=0.9, eps=1e-8)
    opt.step()
    assert opt.cache[0][0] == pytest.approx(0.9)
    assert p.value[0] - 1.0 == pytest.approx(-0.01 * 3 / (math.sqrt(0.9) + 1e-8), abs=1e-15)
    assert round(p.value[0] - 1.0, 6) == -0.031623


def test_rmsprop_zero_learning_rate_keeps_parameters():
    p = dc.parameter(np.array([1.0, 2.0]))
    p.grad = np.array([5.0, -1.0])
    RMSProp([p], lr=0.0).step()
    np.testing.assert_array_equal(p.value, [1.0, 2.0])


def _examples(n_pos, n_neg):
    seq = FrameSequence("x", np.zeros((3, 1)))
    return [Example(seq, [G(0.0, 0.5)]) for _ in range(n_pos)] + [Example(seq, []) for _ in range(n_neg)]


@pytest.mark.parametrize("ratio, B, expected", [(0.5, 32, 16), (1.0, 32, 32), (0.4, 32, 13), (0.0, 8, 0)])
def test_minibatch_positive_count(ratio, B, expected):
    batch = sample_minibatch(_examples(40, 40), ratio, B, np.random.default_rng(0))
    assert len(batch) == B
    assert sum(ex.positive for ex in batch) == expected


def test_minibatch_samples_with_replacement_only_when_needed():
    ex = _examples(3, 50)
    batch = sample_minibatch(ex, 0.5, 10, np.random.default_rng(1))
    assert sum(e.positive for e in batch) == 5
    small = sample_minibatch(ex, 1.0, 3, np.random.default_rng(2))
    assert len({id(e) for e in small}) == 3


def test_minibatch_rejects_missing_positives():
    with pytest.raises(ValueError, match="positive"):
        sample_minibatch(_examples(0, 10), 0.4, 8, np.random.default_rng(0))


def test_minibatch_long_run_ratio():
    ex = _examples(200, 600)
    rng = np.random.default_rng(3)
    B = 7  # ceil(0.3 * 7) = 3, so the exact long-run fraction is 3/7
    total = sum(sum(e.positive for e in sample_minibatch(ex, 0.3, B, rng)) for _ in range(10_000))
    assert abs(total / (10_000 * B) - 3 / 7) <= 0.01
    assert abs(3 / 7 - 0.3) > 0.01  # ceil rounds the target up at odd sizes


def test_unknown_variant_is_rejected():
    with pytest.raises(ValueError, match="unknown variant"):
        apply_variant("no_everything")


def test_variant_flags():
    assert apply_variant("no_dpred").rollout_options(0.3) == {
        "uniform_observation": False, "emit_all": True, "fixed_duration": None}
    assert apply_variant("no_dobs").rollout_options(0.3)["uniform_observation"]
    assert apply_variant("no_loc").rollout_options(0.3)["fixed_duration"] == 0.3
    emitted = [(0.1, 0.3, 0.9), (0.1, 0.3, 0.8), (0.6, 0.7, 0.5)]
    assert apply_variant("no_dpred").final_predictions(emitted, 0.4) == [emitted[0], emitted[2]]
    assert apply_variant("full").final_predictions(emitted, 0.4) == emitted


def test_median_duration():
    ex = [Example(FrameSequence("x", np.zeros((3, 1))), [G(0.0, 0.2)]),
          Example(FrameSequence("y", np.zeros((3, 1))), [G(0.0, 0.4), G(0.5, 0.6)])]
    assert median_duration(ex) == pytest.approx(0.2)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(SynthConfig(amplitude=3.0), 60, 0)


def _trainer(dataset, **kwargs):
    cfg = TrainConfig(batch_size=8, max_updates=kwargs.pop("max_updates", 3), eval_every=2, **kwargs)
    return Trainer(dataset, TINY, cfg)


def test_train_step_reports_metrics(dataset):
    m = _trainer(dataset).step()
    assert m.update == 1 and math.isfinite(m.loss) and 0.0 <= m.emit_rate <= 1.0
    assert len(m.line().split("\t")) == 5


def test_zero_learning_rate_leaves_parameters_unchanged(dataset):
    t = _trainer(dataset, lr=0.0, baseline_lr=0.0)
    before = t.params.copy()
    m = t.step()
    assert t.params.equals(before)
    assert math.isfinite(m.loss)


def test_baseline_update_leaves_policy_untouched(dataset):
    t = _trainer(dataset)
    t.step()
    before = t.params.copy()
    t.params.zero_grad()
    rng = np.random.default_rng(0)
    hidden = [dc.constant(rng.standard_normal((4, TINY.hidden))) for _ in range(6)]
    _, _, loss = returns_and_baseline(np.ones(4), hidden, t.params)
    dc.backward(loss)
    t.baseline_opt.step()
    for name, tensor in t.params.items():
        same = tensor.value.tobytes() == before[name].value.tobytes()
        assert same != name.startswith("base.")


def test_training_is_bit_deterministic(dataset):
    def run():
        t = _trainer(dataset, max_updates=100, seed=4)
        lines = []
        best, _ = train(t, lines)
        return lines, t.params, best

    a, b = run(), run()
    assert a[0] == b[0]
    assert a[1].equals(b[1]) and a[2].equals(b[2])


@pytest.mark.parametrize("variant", ["no_dpred", "no_dobs", "no_dobs_no_dpred", "no_loc", "dense_frame_nms"])
def test_every_variant_trains_and_scores(dataset, variant):
    t = _trainer(dataset, variant=variant, max_updates=4)
    best, score = train(t)
    assert 0.0 <= score <= 1.0
    assert t.detector(best).predict(dataset.test) is not None


def test_uniform_variant_leaves_location_head_alone(dataset):
    t = _trainer(dataset, variant="no_dobs")
    before = t.params.copy()
    t.step()
    assert t.params["loc.w"].value.tobytes() == before["loc.w"].value.tobytes()


def test_non_finite_objective_raises(dataset):
    from glimpse.training import NumericalError

    t = _trainer(dataset)
    t.params["det.w"].value[0, 0] = np.nan
    with pytest.raises(NumericalError):
        t.step()


def test_detector_round_trip(dataset, tmp_path):
    t = _trainer(dataset)
    t.step()
    det = t.detector()
    det.save(tmp_path / "ckpt.bin")
    back = type(det).load(tmp_path / "ckpt.bin")
    assert back.params.equals(det.params) and back.agent == det.agent
    assert back.predict(dataset.test) == det.predict(dataset.test)
    assert det.observed_fraction(dataset.test) == pytest.approx(0.12)
