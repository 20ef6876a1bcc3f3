"""Hybrid trainer: backprop on the matched detection loss plus REINFORCE.

The candidate detections d_n get a supervised loss (nearest-ground-truth
matching, cross-entropy on confidence, squared error on bounds). The emission
indicator and observation location are trained with the score-function
estimator on a terminal reward, using a learned per-step baseline.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .agent import AgentConfig, Rollout, init_params, rollout_batch
from .diffcore import ParamSet, Tensor
from .evaluation import EvalConfig, Prediction, Segment, canonicalize, evaluate, iou, nms_normalized
from .synthdata import Dataset, Example, GroundTruthInstance, stream_of

log = logging.getLogger(__name__)

__all__ = [
    "RewardConfig",
    "TrainConfig",
    "Variant",
    "VARIANTS",
    "apply_variant",
    "match_candidates",
    "detection_targets",
    "detection_loss",
    "logit",
    "episode_reward",
    "returns_and_baseline",
    "reinforce_surrogate",
    "RMSProp",
    "sample_minibatch",
    "median_duration",
    "Detector",
    "Trainer",
    "NumericalError",
    "train",
    "FrameClassifier",
]


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class RewardConfig:
    r_plus: float = 1.0
    r_minus: float = -1.0
    r_p: float = -1.0
    alpha: float = 0.5

    def validate(self) -> None:
        if self.r_plus <= 0:
            raise ValueError("r_plus must be positive")
        if self.r_minus > 0:
            raise ValueError("r_minus must be <= 0")
        if self.r_p > 0:
            raise ValueError("r_p must be <= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("reward IoU threshold must lie in (0, 1)")


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    baseline_lr: float = 1e-3
    batch_size: int = 32
    positive_ratio: float = 0.4
    episodes: int = 1
    max_updates: int = 8000
    eval_every: int = 250
    variant: str = "full"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.positive_ratio <= 1.0:
            raise ValueError("positive_ratio must lie in [0, 1]")
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr < 0 or self.baseline_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.max_updates < 0:
            raise ValueError("max_updates must be non-negative")
        apply_variant(self.variant)


@dataclass(frozen=True)
class Variant:
    tag: str
    learn_location: bool = True
    learn_indicator: bool = True
    regress_bounds: bool = True
    dense: bool = False

    def rollout_options(self, median: float | None) -> dict:
        return {
            "uniform_observation": not self.learn_location,
            "emit_all": not self.learn_indicator,
            "fixed_duration": None if self.regress_bounds else median,
        }

    def final_predictions(self, emitted: list[tuple[float, float, float]], nms_threshold: float):
        """Emitted detections after the variant's post-processing."""
        if not self.learn_indicator:
            return nms_normalized(emitted, nms_threshold)
        return list(emitted)


VARIANTS = {
    "full": Variant("full"),
    "no_dpred": Variant("no_dpred", learn_indicator=False),
    "no_dobs": Variant("no_dobs", learn_location=False),
    "no_dobs_no_dpred": Variant("no_dobs_no_dpred", learn_location=False, learn_indicator=False),
    "no_loc": Variant("no_loc", regress_bounds=False),
    "dense_frame_nms": Variant("dense_frame_nms", learn_location=False, learn_indicator=False, dense=True),
}


def apply_variant(tag: str) -> Variant:
    try:
        return VARIANTS[tag]
    except KeyError:
        raise ValueError(f"unknown variant {tag!r}; expected one of {sorted(VARIANTS)}") from None


def match_candidates(locations, ground_truths: list[GroundTruthInstance]) -> np.ndarray:
    """y[n, m] = 1 iff ground truth m is nearest to location l_n (first index on ties)."""
    locs = np.asarray(locations, dtype=np.float64).reshape(-1)
    y = np.zeros((len(locs), len(ground_truths)), dtype=np.int64)
    if not ground_truths:
        return y
    s = np.array([g.s for g in ground_truths])
    e = np.array([g.e for g in ground_truths])
    dist = np.minimum(np.abs(s[None, :] - locs[:, None]), np.abs(e[None, :] - locs[:, None]))
    y[np.arange(len(locs)), np.argmin(dist, axis=1)] = 1
    return y


def detection_targets(assignment: np.ndarray, ground_truths: list[GroundTruthInstance]):
    """Per-candidate confidence target, bound target and bound mask."""
    R = assignment.shape[0]
    cls = np.zeros(R)
    bounds = np.zeros((R, 2))
    mask = np.zeros((R, 2))
    if ground_truths:
        g = np.array([[gt.s, gt.e] for gt in ground_truths])
        matched = assignment.sum(axis=1) > 0
        cls[matched] = 1.0
        bounds[matched] = g[np.argmax(assignment[matched], axis=1)]
        mask[matched] = 1.0
    return cls, bounds, mask


def _row_loss(logits: Tensor, cls: np.ndarray, bounds: np.ndarray, mask: np.ndarray, gamma: float) -> Tensor:
    conf = dc.slice_last(logits, 2, 3)
    loss = dc.sum_(dc.bce_with_logits(conf, cls.reshape(-1, 1)))
    if gamma > 0 and mask.any():
        se = dc.sigmoid(dc.slice_last(logits, 0, 2))
        loss = dc.add(loss, dc.mul(dc.sum_(dc.mul(dc.squared_error(se, bounds), mask)), gamma))
    return loss


def detection_loss(logits: Tensor, assignment: np.ndarray, ground_truths: list[GroundTruthInstance],
                   gamma: float = 1.0) -> Tensor:
    """Sum over candidates of confidence BCE plus gamma * matched squared bound error.

    ``logits`` is (N, 3): pre-sigmoid (start, end, confidence) per candidate.
    """
    cls, bounds, mask = detection_targets(assignment, ground_truths)
    return _row_loss(logits, cls, bounds, mask, gamma)


def logit(p, clamp: float = 1e-7):
    """Inverse sigmoid of externally supplied probabilities, clamped away from 0 and 1."""
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    return np.log(p) - np.log1p(-p)


def episode_reward(predictions: list[tuple[float, float, float]], ground_truths: list[GroundTruthInstance],
                   cfg: RewardConfig) -> tuple[float, list[bool]]:
    """Terminal reward and TP flags (in input order) for one episode.

    Predictions are visited by descending confidence (earlier start first on
    ties); each claims the unclaimed ground truth it overlaps most, provided
    that IoU exceeds ``cfg.alpha``.
    """
    if ground_truths and not predictions:
        return cfg.r_p, []
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i][2], predictions[i][0]))
    claimed = [False] * len(ground_truths)
    flags = [False] * len(predictions)
    for i in order:
        s, e, _ = predictions[i]
        best, best_iou = -1, cfg.alpha
        for m, g in enumerate(ground_truths):
            if not claimed[m]:
                o = iou((s, e), (g.s, g.e))
                if o > best_iou:
                    best, best_iou = m, o
        if best >= 0:
            claimed[best] = True
            flags[i] = True
    n_pos = sum(flags)
    return n_pos * cfg.r_plus + (len(predictions) - n_pos) * cfg.r_minus, flags


def returns_and_baseline(rewards, hidden: list[Tensor], params: ParamSet):
    """Returns R_n (= terminal reward), baselines b_n and the baseline regression loss.

    ``rewards`` is (B,), ``hidden`` holds N tensors (B, H). The baseline reads a
    detached copy of each hidden state, so its loss only reaches ``base.*``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    N = len(hidden)
    returns = np.tile(rewards, (N, 1))
    w, b = params["base.w"], params["base.b"]
    terms, values = [], []
    for n, h in enumerate(hidden):
        pred = dc.add(dc.matmul(dc.detach(h), w), b)
        values.append(pred.value[:, 0])
        terms.append(dc.mean(dc.squared_error(pred, returns[n].reshape(-1, 1))))
    loss = terms[0]
    for t in terms[1:]:
        loss = dc.add(loss, t)
    return returns, np.array(values), loss


def reinforce_surrogate(log_probs: list[Tensor], advantages: np.ndarray) -> Tensor:
    """Negated score-function objective, averaged over the episode rows.

    ``log_probs[n]`` is a (rows, 1) or (rows,) tensor of log pi(a_n) and
    ``advantages[n]`` the matching (rows,) constants R_n - b_n. Minimizing the
    result ascends the expected reward.
    """
    total = None
    rows = None
    for lp, adv in zip(log_probs, advantages):
        adv = np.asarray(adv, dtype=np.float64).reshape(lp.shape)
        rows = lp.shape[0]
        term = dc.sum_(dc.mul(lp, adv))
        total = term if total is None else dc.add(total, term)
    if total is None:
        return dc.constant(0.0)
    return dc.mul(total, -1.0 / rows)


class RMSProp:
    """cache <- rho * cache + (1 - rho) g^2;  theta <- theta - lr * g / (sqrt(cache) + eps)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, rho: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.cache = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        """Apply one update; an update that would leave any value non-finite is rejected whole."""
        caches, values = [], []
        with np.errstate(over="ignore", invalid="ignore"):
            for p, cache in zip(self.params, self.cache):
                g = p.grad
                c = self.rho * cache + (1.0 - self.rho) * g * g
                v = p.value - self.lr * g / (np.sqrt(c) + self.eps)
                if not (np.isfinite(c).all() and np.isfinite(v).all()):
                    raise NumericalError(f"non-finite update of {p.name}")
                caches.append(c)
                values.append(v)
        for p, cache, c, v in zip(self.params, self.cache, caches, values):
            cache[...] = c
            p.value[...] = v


def sample_minibatch(examples: list[Example], ratio: float, batch_size: int,
                     rng: np.random.Generator) -> list[Example]:
    """ceil(ratio * B) positive sequences and the rest negative, shuffled."""
    pos = [i for i, ex in enumerate(examples) if ex.positive]
    neg = [i for i, ex in enumerate(examples) if not ex.positive]
    k = math.ceil(ratio * batch_size)
    if k > 0 and not pos:
        raise ValueError("positive ratio > 0 but the dataset has no positive sequences")
    if batch_size - k > 0 and not neg:
        raise ValueError("batch needs negative sequences but the dataset has none")
    chosen = []
    if k:
        chosen.extend(rng.choice(pos, size=k, replace=len(pos) < k).tolist())
    if batch_size - k:
        chosen.extend(rng.choice(neg, size=batch_size - k, replace=len(neg) < batch_size - k).tolist())
    chosen = np.array(chosen)[rng.permutation(batch_size)]
    return [examples[i] for i in chosen]


def median_duration(examples: list[Example]) -> float:
    durations = [g.duration for ex in examples for g in ex.ground_truths]
    return float(np.median(durations)) if durations else 0.0


def _policy_log_probs(ro: Rollout, sigma: float, variant: Variant) -> list[Tensor]:
    """Per-step log pi(a_n) tensors for the actions the variant actually learns."""
    terms = []
    for n in range(len(ro.det_logits)):
        parts = []
        if variant.learn_indicator and ro.indicator_live:
            p = ro.actions.indicator[n].reshape(-1, 1)
            parts.append(dc.mul(dc.bce_with_logits(ro.ind_logits[n], p), -1.0))
        if variant.learn_location and ro.location_live[n]:
            mu = dc.sigmoid(ro.loc_logits[n])
            raw = ro.actions.location_raw[n].reshape(-1, 1)
            density = dc.mul(dc.squared_error(mu, raw), -0.5 / sigma ** 2)
            parts.append(dc.add(density, -math.log(sigma * math.sqrt(2.0 * math.pi))))
        if parts:
            lp = parts[0]
            for extra in parts[1:]:
                lp = dc.add(lp, extra)
            terms.append((n, lp))
    return terms


class FrameClassifier:
    """Per-frame logistic classifier scored with dense multi-scale windows and NMS."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.params = ParamSet({"det.frame_w": rng.uniform(-0.1, 0.1, (d, 1)), "det.frame_b": np.zeros(1)})
        self.scales: list[float] = [0.2]

    def logits(self, frames: np.ndarray) -> Tensor:
        return dc.add(dc.matmul(dc.constant(frames), self.params["det.frame_w"]), self.params["det.frame_b"])

    def fit_scales(self, examples: list[Example]) -> None:
        durations = [g.duration for ex in examples for g in ex.ground_truths]
        if durations:
            self.scales = sorted({round(float(q), 3) for q in np.quantile(durations, [0.1, 0.3, 0.5, 0.7, 0.9])})

    def detect(self, ex: Example, nms_threshold: float, top_k: int = 10) -> list[tuple[float, float, float]]:
        T = ex.sequence.T
        probs = dc._stable_sigmoid(self.logits(ex.sequence.features).value[:, 0])
        csum = np.concatenate([[0.0], np.cumsum(probs)])
        windows = []
        for scale in self.scales:
            length = max(2, int(round(scale * (T - 1))) + 1)
            for a in range(0, T - length + 1):
                score = (csum[a + length] - csum[a]) / length
                windows.append((a / (T - 1), (a + length - 1) / (T - 1), float(score)))
        return nms_normalized(windows, nms_threshold)[:top_k]


@dataclass
class Detector:
    """Everything needed to turn sequences into scored predictions at test time."""

    params: ParamSet
    agent: AgentConfig
    variant: str = "full"
    median: float = 0.0
    nms_threshold: float = 0.4
    frame_model: FrameClassifier | None = None

    def rollouts(self, examples: list[Example]) -> Rollout:
        v = apply_variant(self.variant)
        return rollout_batch([ex.sequence for ex in examples], self.params, self.agent, "test",
                             **v.rollout_options(self.median))

    def predict(self, examples: list[Example]) -> list[Prediction]:
        v = apply_variant(self.variant)
        out: list[Prediction] = []
        if v.dense:
            for ex in examples:
                out.extend(canonicalize(d, ex.sequence) for d in self.frame_model.detect(ex, self.nms_threshold))
            return out
        if not examples:
            return out
        ro = self.rollouts(examples)
        for ex, tr in zip(examples, ro.traces):
            for d in v.final_predictions(tr.emitted, self.nms_threshold):
                out.append(canonicalize(d, ex.sequence))
        return out

    def observed_fraction(self, examples: list[Example]) -> float:
        if apply_variant(self.variant).dense:
            return 1.0
        total = sum(ex.sequence.T for ex in examples)
        return self.agent.glimpses * len(examples) / total if total else 0.0

    def score(self, examples: list[Example], cfg: EvalConfig) -> dict[str, dict[float, float]]:
        gts = [Segment(ex.sequence.origin_offset + g.s * (ex.sequence.T - 1),
                       ex.sequence.origin_offset + g.e * (ex.sequence.T - 1),
                       stream_of(ex.sequence.sequence_id))
               for ex in examples for g in ex.ground_truths]
        return evaluate({"0": self.predict(examples)}, {"0": gts}, cfg)

    def meta(self) -> dict:
        return {"variant": self.variant, "median": self.median, "nms_threshold": self.nms_threshold,
                "agent": asdict(self.agent),
                "frame_scales": self.frame_model.scales if self.frame_model else None}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        params = self.frame_model.params if self.frame_model else self.params
        dc.save_params(params, path)
        Path(str(path) + ".json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Detector:
        path = Path(path)
        params = dc.load_params(path)
        meta_path = Path(str(path) + ".json")
        if not meta_path.exists():
            raise FileNotFoundError(f"missing checkpoint metadata {meta_path}")
        meta = json.loads(meta_path.read_text())
        agent = AgentConfig(**meta["agent"])
        frame_model = None
        if apply_variant(meta["variant"]).dense:
            frame_model = FrameClassifier.__new__(FrameClassifier)
            frame_model.params = params
            frame_model.scales = meta["frame_scales"]
        return cls(params, agent, meta["variant"], meta["median"], meta["nms_threshold"], frame_model)


@dataclass
class StepMetrics:
    update: int
    loss: float
    reward: float
    emit_rate: float
    lr: float

    def line(self) -> str:
        return f"{self.update}\t{self.loss:.6f}\t{self.reward:.6f}\t{self.emit_rate:.6f}\t{self.lr:g}"


@dataclass
class Trainer:
    dataset: Dataset
    agent: AgentConfig = field(default_factory=AgentConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    eval_cfg: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.train_cfg.validate()
        self.reward_cfg.validate()
        self.agent.validate()
        self.variant = apply_variant(self.train_cfg.variant)
        self.rng = np.random.default_rng(self.train_cfg.seed)
        self.examples = self.dataset.train
        if not self.examples:
            raise ValueError("training split is empty")
        d = self.examples[0].sequence.d
        if d != self.agent.feature_dim:
            raise ValueError(f"dataset feature dimension {d} != agent feature_dim {self.agent.feature_dim}")
        self.median = median_duration(self.examples)
        self.frame_model = None
        if self.variant.dense:
            self.frame_model = FrameClassifier(d, self.rng)
            self.frame_model.fit_scales(self.examples)
            self.params = self.frame_model.params
            self.optimizer = RMSProp(self.params.group("det"), self.train_cfg.lr, self.train_cfg.rho,
                                     self.train_cfg.eps)
            self.baseline_opt = None
        else:
            self.params = init_params(self.agent, self.rng)
            policy = [t for n, t in self.params.items() if not n.startswith("base.")]
            self.optimizer = RMSProp(policy, self.train_cfg.lr, self.train_cfg.rho, self.train_cfg.eps)
            self.baseline_opt = RMSProp(self.params.group("base"), self.train_cfg.baseline_lr,
                                        self.train_cfg.rho, self.train_cfg.eps)
        self.updates = 0

    def detector(self, params: ParamSet | None = None) -> Detector:
        frame_model = self.frame_model
        if params is not None and frame_model is not None:
            frame_model = FrameClassifier.__new__(FrameClassifier)
            frame_model.params, frame_model.scales = params, self.frame_model.scales
        return Detector(params or self.params, self.agent, self.train_cfg.variant, self.median,
                        self.eval_cfg.nms_threshold, frame_model)

    def _check_finite(self, what: str, tensors) -> None:
        for t in tensors:
            if not np.isfinite(t.grad if what == "gradient" else t.value).all():
                raise NumericalError(f"non-finite {what} in {t.name} at update {self.updates}")

    def _frame_step(self, batch: list[Example]) -> StepMetrics:
        frames = np.concatenate([ex.sequence.features for ex in batch])
        labels = np.concatenate([ex.frame_labels() for ex in batch]).reshape(-1, 1)
        self.params.zero_grad()
        loss = dc.mean(dc.bce_with_logits(self.frame_model.logits(frames), labels))
        if not np.isfinite(loss.value).all():
            raise NumericalError(f"non-finite loss at update {self.updates}")
        dc.backward(loss)
        self._check_finite("gradient", self.params.group("det"))
        self.optimizer.step()
        self.updates += 1
        return StepMetrics(self.updates, loss.item(), 0.0, 0.0, self.train_cfg.lr)

    def train_step(self, batch: list[Example]) -> StepMetrics:
        if self.variant.dense:
            return self._frame_step(batch)
        cfg = self.train_cfg
        K = cfg.episodes
        rows = [ex for ex in batch for _ in range(K)]
        self.params.zero_grad()
        ro = rollout_batch([ex.sequence for ex in rows], self.params, self.agent, "train", self.rng,
                           **self.variant.rollout_options(self.median))
        N, R = ro.locations.shape

        # Detection loss over all N x R candidates, step-major rows.
        gamma = cfg.gamma if self.variant.regress_bounds else 0.0
        cls = np.zeros((N, R))
        bounds = np.zeros((N, R, 2))
        mask = np.zeros((N, R, 2))
        for r, ex in enumerate(rows):
            y = match_candidates(ro.locations[:, r], ex.ground_truths)
            c, bnd, m = detection_targets(y, ex.ground_truths)
            cls[:, r], bounds[:, r], mask[:, r] = c, bnd, m
        logits = dc.concat(ro.det_logits, axis=0)
        det_loss = dc.mul(_row_loss(logits, cls.reshape(-1), bounds.reshape(-1, 2), mask.reshape(-1, 2), gamma),
                          1.0 / R)

        rewards = np.zeros(R)
        for r, (ex, tr) in enumerate(zip(rows, ro.traces)):
            preds = self.variant.final_predictions(tr.emitted, self.eval_cfg.nms_threshold)
            rewards[r], _ = episode_reward(preds, ex.ground_truths, self.reward_cfg)
        returns, baselines, base_loss = returns_and_baseline(rewards, ro.hidden, self.params)

        terms = _policy_log_probs(ro, self.agent.sigma, self.variant)
        objective = det_loss
        if terms:
            adv = returns - baselines
            surrogate = reinforce_surrogate([lp for _, lp in terms], np.array([adv[n] for n, _ in terms]))
            objective = dc.add(det_loss, surrogate)
        if not np.isfinite(objective.value).all():
            raise NumericalError(f"non-finite objective at update {self.updates}")
        dc.backward(objective)
        self._check_finite("gradient", self.optimizer.params)
        self.optimizer.step()

        if terms:
            dc.backward(base_loss)
            self._check_finite("gradient", self.baseline_opt.params)
            self.baseline_opt.step()

        self.updates += 1
        return StepMetrics(self.updates, det_loss.item(), float(rewards.mean()),
                           float(ro.actions.indicator.mean()), cfg.lr)

    def step(self) -> StepMetrics:
        batch = sample_minibatch(self.examples, self.train_cfg.positive_ratio, self.train_cfg.batch_size, self.rng)
        return self.train_step(batch)

    def validate(self, split: str = "val", alpha: float = 0.5) -> float:
        examples = self.dataset.split(split)
        if not examples:
            return float("nan")
        cfg = EvalConfig(alphas=(alpha,), nms_threshold=self.eval_cfg.nms_threshold, merge=self.eval_cfg.merge)
        return self.detector().score(examples, cfg)["ALL"][alpha]


def train(trainer: Trainer, log_lines: list[str] | None = None, on_eval=None) -> tuple[ParamSet, float]:
    """Run to ``max_updates`` and return the parameters with the best validation mAP@0.5."""
    cfg = trainer.train_cfg
    best = trainer.params.copy()
    best_map = trainer.validate() if trainer.dataset.val else float("nan")
    for _ in range(cfg.max_updates):
        metrics = trainer.step()
        if log_lines is not None:
            log_lines.append(metrics.line())
        if cfg.eval_every and trainer.updates % cfg.eval_every == 0 and trainer.dataset.val:
            score = trainer.validate()
            log.info("update %d: val mAP@0.5 = %.4f", trainer.updates, score)
            if on_eval is not None:
                on_eval(trainer, score)
            if not (score <= best_map):
                best_map, best = score, trainer.params.copy()
    if not trainer.dataset.val:
        best = trainer.params.copy()
    return best, best_map
