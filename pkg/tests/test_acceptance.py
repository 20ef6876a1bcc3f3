"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line to the terminal, even under output
capture. The benchmark criteria (6 and 7) share one sweep; it trains
5 variants × 5 seeds and dominates the runtime of the file.
"""
import filecmp
import math
import time

import numpy as np
import pytest

from glimpse import cli
from glimpse import diffcore as dc
from glimpse.evaluation import EvalConfig, Prediction, Segment, average_precision, nms
from glimpse.gradcheck import run_all
from glimpse.synthdata import GroundTruthInstance as G
from glimpse.training import RewardConfig, episode_reward, match_candidates, reinforce_surrogate

from benchmark import ABLATIONS, AGENT_VARIANTS, SEEDS, run_benchmark
from oracles import ap_oracle, argmin_oracle, nms_oracle


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok

    return emit


def test_criterion_1_gradient_correctness(report):
    start = time.perf_counter()
    results = run_all(probes=100)
    elapsed = time.perf_counter() - start
    worst = max(r.error for r in results if r.error is not None)
    ok = all(r.passed for r in results) and worst <= 1e-4 and elapsed < 60
    assert report(1, ok, f"{len(results)} checks, worst rel. error {worst:.2e}, {elapsed:.1f}s")


# A two-step MDP with one Bernoulli action per step. The second step's logit
# depends on the first action, so all three parameters interact.
REWARDS = {(0, 0): 0.3, (0, 1): -1.0, (1, 0): 2.0, (1, 1): 0.5}
THETA = np.array([0.4, -0.7, 1.3])


def _probs(theta):
    a, b, c = theta
    q1 = 1.0 / (1.0 + math.exp(-a))
    out = {}
    for p1 in (0, 1):
        q2 = 1.0 / (1.0 + math.exp(-(b + c * p1)))
        for p2 in (0, 1):
            out[p1, p2] = (q1 if p1 else 1 - q1) * (q2 if p2 else 1 - q2)
    return out


def _expected_return(theta):
    return sum(p * REWARDS[k] for k, p in _probs(theta).items())


def _exact_gradient(theta, h=1e-6):
    # central differences on the enumerated objective, independent of autodiff
    grad = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        grad[i] = (_expected_return(theta + e) - _expected_return(theta - e)) / (2 * h)
    return grad


def _estimator(actions, advantages, theta=THETA):
    """Mean REINFORCE gradient over the rows of ``actions`` via the library surrogate."""
    rows = actions.shape[0]
    a, b, c = (dc.parameter(np.array([v])) for v in theta)
    p1 = actions[:, :1].astype(float)
    p2 = actions[:, 1:].astype(float)
    z1 = dc.add(dc.constant(np.zeros((rows, 1))), a)
    z2 = dc.add(dc.add(dc.constant(np.zeros((rows, 1))), b), dc.mul(dc.constant(p1), c))
    log_probs = [dc.mul(dc.bce_with_logits(z1, p1), -1.0), dc.mul(dc.bce_with_logits(z2, p2), -1.0)]
    dc.backward(reinforce_surrogate(log_probs, np.tile(advantages, (2, 1))))
    return -np.array([a.grad[0], b.grad[0], c.grad[0]])


def _sample(rng, n, theta=THETA):
    a, b, c = theta
    p1 = (rng.random(n) < 1 / (1 + np.exp(-a))).astype(int)
    p2 = (rng.random(n) < 1 / (1 + np.exp(-(b + c * p1)))).astype(int)
    return np.stack([p1, p2], axis=1)


def test_criterion_2_reinforce_unbiasedness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = _exact_gradient(THETA)
    chunks = []
    for _ in range(100):  # 100 chunks of 1000 episodes = 10^5 episodes
        actions = _sample(rng, 1000)
        rewards = np.array([REWARDS[tuple(x)] for x in actions])
        chunks.append(_estimator(actions, rewards))
    chunks = np.array(chunks)
    mean = chunks.mean(axis=0)
    se = chunks.std(axis=0, ddof=1) / math.sqrt(len(chunks))
    within = bool((np.abs(mean - exact) <= 3 * se).all())

    # one-step case, pi(1) = q, r(1) = 1, r(0) = 0, b = 0: E[estimator] = dJ/dq = 1
    q = 0.3
    expectation = 0.0
    for action, prob in ((1, q), (0, 1 - q)):
        z = dc.parameter(np.array([[math.log(q / (1 - q))]]))
        lp = dc.mul(dc.bce_with_logits(z, np.array([[float(action)]])), -1.0)
        dc.backward(reinforce_surrogate([lp], np.array([[float(action)]])))
        dlogit = -z.grad[0, 0]
        expectation += prob * dlogit / (q * (1 - q))  # chain rule from the logit to q
    one_step = abs(expectation - 1.0) <= 1e-12
    elapsed = time.perf_counter() - start
    ok = within and one_step and elapsed < 120
    z_scores = np.round((mean - exact) / se, 2).tolist()
    assert report(2, ok, f"z-scores {z_scores} over 10^5 episodes, one-step E = {float(expectation)!r}, {elapsed:.1f}s")


def test_criterion_3_baseline_invariance(report):
    def enumerated(baseline):
        probs = _probs(THETA)
        total = np.zeros(3)
        for actions, p in probs.items():
            adv = np.array([REWARDS[actions] - baseline])
            total += p * _estimator(np.array([actions]), adv)
        return total

    reference = enumerated(0.0)
    worst = max(np.abs(enumerated(c) - reference).max() for c in (-3.0, 0.7, 5.0, 123.456))
    exact = np.abs(reference - _exact_gradient(THETA)).max()
    assert report(3, worst <= 1e-12 and exact <= 1e-8,
                  f"max change under constant baselines {worst:.1e}, vs exact gradient {exact:.1e}")


def _ap_instance(rng):
    M = int(rng.integers(1, 4))
    gts = []
    for _ in range(M):
        s = int(rng.integers(0, 20))
        gts.append((float(s), float(s + rng.integers(1, 10)), "v"))
    preds = []
    for k in range(int(rng.integers(0, 7))):
        s = int(rng.integers(0, 20))
        conf = float(rng.choice([0.1, 0.5, 0.9, rng.random()]))
        preds.append((float(s), float(s + rng.integers(0, 10)), conf, f"v#{k % 2:04d}", "v"))
    return preds, gts


def test_criterion_4_oracle_equivalence(report):
    rng = np.random.default_rng(4)
    ap_bad = 0
    for _ in range(1000):
        preds, gts = _ap_instance(rng)
        alpha = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        got = average_precision([Prediction(*p[:4]) for p in preds], [Segment(*g) for g in gts], alpha)
        ap_bad += abs(got - float(ap_oracle(preds, gts, alpha))) > 1e-12

    match_bad = 0
    for _ in range(1000):
        M = int(rng.integers(1, 5))
        cuts = np.sort(rng.choice(np.arange(41), size=2 * M, replace=False)) / 40
        gts = [G(cuts[2 * k], cuts[2 * k + 1]) for k in range(M)]
        locs = rng.integers(0, 41, size=6) / 40
        y = match_candidates(locs, gts)
        match_bad += not ((y.sum(axis=1) == 1).all()
                          and np.argmax(y, axis=1).tolist() == argmin_oracle(locs, [(g.s, g.e) for g in gts]))

    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 7))
        preds = []
        for _ in range(n):
            s = float(rng.integers(0, 15))
            preds.append(Prediction(s, s + float(rng.integers(0, 8)), float(rng.choice([0.2, 0.5, 0.8, rng.random()])),
                                    f"v{rng.integers(0, 2)}#0000"))
        thr = float(rng.choice([0.0, 0.2, 0.4, 0.5, 0.7]))
        tuples = [(p.start, p.end, p.confidence, p.sequence_id, p.video) for p in preds]
        nms_bad += nms(preds, thr) != [preds[i] for i in nms_oracle(tuples, thr)]

    ok = ap_bad == match_bad == nms_bad == 0
    assert report(4, ok, f"mismatches on 1000 instances each: AP {ap_bad}, matching {match_bad}, NMS {nms_bad}")


def test_criterion_5_reward_examples(report):
    cfg = RewardConfig()
    missed = episode_reward([], [G(0.1, 0.2), G(0.5, 0.6)], cfg)
    silent = episode_reward([], [], cfg)
    g = [G(0.2, 0.5)]
    greedy = episode_reward([(0.2, 0.41, 0.9), (0.2, 0.38, 0.8)], g, cfg)
    ok = missed == (cfg.r_p, []) and silent == (0.0, []) and greedy == (0.0, [True, False])
    assert report(5, ok, f"R_p case {missed[0]}, empty case {silent[0]}, greedy TP/FP case {greedy}")


@pytest.fixture(scope="module")
def benchmark(request):
    results = run_benchmark()
    table = {v: {str(s): {str(a): m for a, m in r.items()} for s, r in by_seed.items()} for v, by_seed in results.items()}
    request.config.cache.set("glimpse/benchmark", table)
    return results


def test_criterion_6_end_to_end_learning(benchmark, report):
    means = {v: float(np.mean([benchmark[v][s][0.5] for s in SEEDS])) for v in AGENT_VARIANTS}
    beats = all(means["full"] > means[v] for v in ABLATIONS)
    lowest = all(means["no_loc"] < means[v] for v in AGENT_VARIANTS if v != "no_loc")
    summary = ", ".join(f"{v} {m:.3f}" for v, m in means.items())
    assert report(6, beats and lowest, f"mean test mAP@0.5 over {len(SEEDS)} seeds: {summary}")


def test_criterion_7_map_rises_as_alpha_relaxes(benchmark, report):
    alphas = (0.5, 0.4, 0.3, 0.2, 0.1)
    rows = [[benchmark["full"][s][a] for a in alphas] for s in SEEDS]
    means = np.mean(rows, axis=0)
    ok = all(b >= a for row in rows for a, b in zip(row, row[1:]))
    assert report(7, ok, "full model mean mAP at α=0.5..0.1: " + " ".join(f"{m:.3f}" for m in means))


def test_criterion_8_determinism(tmp_path, report):
    data, tiny = tmp_path / "data", ["--hidden", "16", "--obs-dim", "16", "--feat-embed", "16", "--loc-embed", "8"]
    assert cli.main(["gen", "--out", str(data), "--count", "60", "--seed", "5"]) == 0
    for run in ("a", "b"):
        assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / run), "--max-updates", "30",
                         "--eval-every", "10", "--seed", "9", "--jobs", "1"] + tiny) == 0
    same_train = all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
                     for f in ("metrics.log", "validation.log", "best.ckpt", "last.ckpt", "best.ckpt.json"))
    ckpt = str(tmp_path / "a" / "best.ckpt")
    seq_id = "syn-00000"
    for run in ("x", "y"):
        assert cli.main(["eval", "--data", str(data), "--checkpoint", ckpt, "--out", str(tmp_path / f"{run}.res")]) == 0
        assert cli.main(["trace", "--data", str(data), "--checkpoint", ckpt, "--sequence-id", seq_id,
                         "--out", str(tmp_path / f"{run}.trace")]) == 0
    same_eval = filecmp.cmp(tmp_path / "x.res", tmp_path / "y.res", shallow=False)
    same_trace = filecmp.cmp(tmp_path / "x.trace", tmp_path / "y.trace", shallow=False)
    ok = same_train and same_eval and same_trace
    assert report(8, ok, f"train identical {same_train}, eval identical {same_eval}, trace identical {same_trace}")
