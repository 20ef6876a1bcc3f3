"""The glimpse agent: observation encoder, stacked LSTM core and three heads.

Rollouts run a whole batch of sequences in lock step, one row per sequence,
so a training update builds a single graph. Each row still owns its own
location, frame lookup and sampled actions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, ShapeError, Tensor
from .synthdata import FrameSequence

__all__ = [
    "AgentConfig",
    "Observation",
    "EpisodeStep",
    "EpisodeTrace",
    "Actions",
    "Rollout",
    "init_params",
    "encode_observation",
    "recurrent_step",
    "zero_state",
    "detection_head",
    "indicator_head",
    "location_head",
    "uniform_locations",
    "rollout",
    "rollout_batch",
    "format_trace",
]


@dataclass
class AgentConfig:
    feature_dim: int = 16
    loc_embed: int = 16
    feat_embed: int = 64
    obs_dim: int = 64
    hidden: int = 128
    layers: int = 2
    sigma: float = 0.1
    glimpses: int = 6

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.glimpses < 1:
            raise ValueError("glimpse budget must be at least 1")
        for name in ("feature_dim", "loc_embed", "feat_embed", "obs_dim", "hidden", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_params(cls, params: ParamSet, sigma: float = 0.1, glimpses: int = 6) -> AgentConfig:
        """Recover the architecture from parameter shapes."""
        layers = sum(1 for n in params if n.startswith("core.") and n.endswith(".wx"))
        return cls(
            feature_dim=params["obs.feat_w"].shape[0],
            loc_embed=params["obs.loc_w"].shape[1],
            feat_embed=params["obs.feat_w"].shape[1],
            obs_dim=params["obs.fuse_w"].shape[1],
            hidden=params["det.w"].shape[0],
            layers=layers,
            sigma=sigma,
            glimpses=glimpses,
        )


def _uniform(rng, fan_in, shape):
    k = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def init_params(cfg: AgentConfig, rng: np.random.Generator) -> ParamSet:
    cfg.validate()
    H = cfg.hidden
    p = ParamSet()
    p.add("obs.loc_w", _uniform(rng, 1, (1, cfg.loc_embed)))
    p.add("obs.loc_b", np.zeros(cfg.loc_embed))
    p.add("obs.feat_w", _uniform(rng, cfg.feature_dim, (cfg.feature_dim, cfg.feat_embed)))
    p.add("obs.feat_b", np.zeros(cfg.feat_embed))
    fuse_in = cfg.loc_embed + cfg.feat_embed
    p.add("obs.fuse_w", _uniform(rng, fuse_in, (fuse_in, cfg.obs_dim)))
    p.add("obs.fuse_b", np.zeros(cfg.obs_dim))
    for k in range(cfg.layers):
        width = cfg.obs_dim if k == 0 else H
        p.add(f"core.l{k}.wx", _uniform(rng, H, (width, 4 * H)))
        p.add(f"core.l{k}.wh", _uniform(rng, H, (H, 4 * H)))
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0  # forget gate
        p.add(f"core.l{k}.b", bias)
    p.add("det.w", _uniform(rng, H, (H, 3)))
    p.add("det.b", np.zeros(3))
    p.add("ind.w", _uniform(rng, H, (H, 1)))
    p.add("ind.b", np.zeros(1))
    p.add("loc.w", _uniform(rng, H, (H, 1)))
    p.add("loc.b", np.zeros(1))
    p.add("base.w", np.zeros((H, 1)))
    p.add("base.b", np.zeros(1))
    return p


@dataclass
class Observation:
    o: np.ndarray
    location: float


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return dc.add(dc.matmul(x, w), b)


def encode_observation(params: ParamSet, locations, frames) -> Tensor:
    """Embed (where, what) for a batch: ``locations`` (B,), ``frames`` (B, d)."""
    loc = np.asarray(locations, dtype=np.float64).reshape(-1, 1)
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] != loc.shape[0]:
        raise ShapeError(f"encode_observation: {loc.shape[0]} locations for {frames.shape[0]} frames")
    if frames.shape[1] != params["obs.feat_w"].shape[0]:
        raise ShapeError(f"encode_observation: frame dimension {frames.shape[1]}, "
                         f"expected {params['obs.feat_w'].shape[0]}")
    if (loc < 0).any() or (loc > 1).any():
        raise ValueError("encode_observation: locations must lie in [0, 1]")
    where = _affine(dc.constant(loc), params["obs.loc_w"], params["obs.loc_b"])
    what = _affine(dc.constant(frames), params["obs.feat_w"], params["obs.feat_b"])
    return dc.tanh(_affine(dc.concat([where, what], axis=-1), params["obs.fuse_w"], params["obs.fuse_b"]))


def zero_state(params: ParamSet, batch: int) -> list[tuple[Tensor, Tensor]]:
    layers = sum(1 for n in params if n.startswith("core.") and n.endswith(".wx"))
    H = params["det.w"].shape[0]
    return [(dc.constant(np.zeros((batch, H))), dc.constant(np.zeros((batch, H)))) for _ in range(layers)]


def recurrent_step(params: ParamSet, state: list[tuple[Tensor, Tensor]], o: Tensor) -> list[tuple[Tensor, Tensor]]:
    """One LSTM update per layer, bottom to top; state entries are (cell, hidden)."""
    x = o
    new_state = []
    for k, (c, h) in enumerate(state):
        H = h.shape[-1]
        gates = dc.add(dc.add(dc.matmul(x, params[f"core.l{k}.wx"]), dc.matmul(h, params[f"core.l{k}.wh"])),
                       params[f"core.l{k}.b"])
        i = dc.sigmoid(dc.slice_last(gates, 0, H))
        f = dc.sigmoid(dc.slice_last(gates, H, 2 * H))
        g = dc.tanh(dc.slice_last(gates, 2 * H, 3 * H))
        out = dc.sigmoid(dc.slice_last(gates, 3 * H, 4 * H))
        c_new = dc.add(dc.mul(f, c), dc.mul(i, g))
        h_new = dc.mul(out, dc.tanh(c_new))
        new_state.append((c_new, h_new))
        x = h_new
    return new_state


def detection_head(params: ParamSet, h: Tensor) -> Tensor:
    """Logits of (start, end, confidence); ``sigmoid`` maps them into [0,1]^3."""
    return _affine(h, params["det.w"], params["det.b"])


def indicator_head(params: ParamSet, h: Tensor) -> Tensor:
    """Logit of the emission probability q_n."""
    return _affine(h, params["ind.w"], params["ind.b"])


def location_head(params: ParamSet, h: Tensor) -> Tensor:
    """Logit of the next-location mean; mu_n = sigmoid(logit)."""
    return _affine(h, params["loc.w"], params["loc.b"])


def uniform_locations(n: int) -> np.ndarray:
    """Evenly spaced locations including both endpoints."""
    return np.zeros(1) if n == 1 else np.linspace(0.0, 1.0, n)


@dataclass
class EpisodeStep:
    location: float
    frame_index: int
    observation: np.ndarray
    hidden: np.ndarray
    detection: tuple[float, float, float]
    q: float
    p: int
    mu: float
    l_next: float
    log_prob_indicator: float
    log_prob_location: float


@dataclass
class EpisodeTrace:
    sequence_id: str
    steps: list[EpisodeStep] = field(default_factory=list)
    emitted: list[tuple[float, float, float]] = field(default_factory=list)
    emitted_steps: list[int] = field(default_factory=list)
    reward: float | None = None
    returns: np.ndarray | None = None
    baselines: np.ndarray | None = None

    @property
    def locations(self) -> np.ndarray:
        return np.array([s.location for s in self.steps])

    @property
    def observed_frames(self) -> set[int]:
        return {s.frame_index for s in self.steps}


@dataclass
class Actions:
    """Sampled actions of a batch rollout, (N, B) each; replayed to hold them fixed."""

    indicator: np.ndarray
    location_raw: np.ndarray


@dataclass
class Rollout:
    traces: list[EpisodeTrace]
    det_logits: list[Tensor]
    ind_logits: list[Tensor]
    loc_logits: list[Tensor]
    hidden: list[Tensor]
    locations: np.ndarray
    actions: Actions
    location_live: np.ndarray  # (N,) steps whose location action was sampled from the policy
    indicator_live: bool


def _log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def rollout_batch(
    sequences: list[FrameSequence],
    params: ParamSet,
    cfg: AgentConfig,
    mode: str = "test",
    rng: np.random.Generator | None = None,
    *,
    uniform_observation: bool = False,
    emit_all: bool = False,
    fixed_duration: float | None = None,
    replay: Actions | None = None,
) -> Rollout:
    """Run the agent over ``sequences`` for ``cfg.glimpses`` steps.

    ``mode='train'`` samples p_n ~ Bernoulli(q_n) and l ~ Normal(mu_n, sigma^2)
    clamped to [0, 1]; ``mode='test'`` takes the modes. ``replay`` reuses
    previously sampled actions so the graph can be rebuilt with them fixed.
    The last step's location action is never used, so it is not sampled.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if mode == "train" and rng is None and replay is None:
        raise ValueError("train mode needs an rng")
    cfg.validate()
    N, B = cfg.glimpses, len(sequences)
    sample = mode == "train"
    fixed_locs = uniform_locations(N) if uniform_observation else None

    state = zero_state(params, B)
    loc = np.zeros(B)
    traces = [EpisodeTrace(s.sequence_id) for s in sequences]
    det_logits, ind_logits, loc_logits, hiddens = [], [], [], []
    locations = np.zeros((N, B))
    ind_actions = np.zeros((N, B))
    loc_raw = np.zeros((N, B))
    location_live = np.zeros(N, dtype=bool)

    for n in range(N):
        if fixed_locs is not None:
            loc = np.full(B, fixed_locs[n])
        locations[n] = loc
        idx = [s.frame_index(l) for s, l in zip(sequences, loc)]
        frames = np.stack([s.features[i] for s, i in zip(sequences, idx)])
        o = encode_observation(params, loc, frames)
        state = recurrent_step(params, state, o)
        h = state[-1][1]
        zd = detection_head(params, h)
        zp = indicator_head(params, h)
        zl = location_head(params, h)
        det_logits.append(zd)
        ind_logits.append(zp)
        loc_logits.append(zl)
        hiddens.append(h)

        det = dc._stable_sigmoid(zd.value)
        zq = zp.value[:, 0]
        q = dc._stable_sigmoid(zq)
        mu = dc._stable_sigmoid(zl.value[:, 0])

        if emit_all:
            p = np.ones(B)
        elif replay is not None:
            p = replay.indicator[n]
        elif sample:
            p = (rng.random(B) < q).astype(np.float64)
        else:
            p = (q >= 0.5).astype(np.float64)
        ind_actions[n] = p

        live = fixed_locs is None and n < N - 1
        location_live[n] = live and sample
        if fixed_locs is not None:
            raw = np.full(B, fixed_locs[min(n + 1, N - 1)])
            nxt = raw
        elif not live:
            raw = mu.copy()
            nxt = mu
        elif replay is not None:
            raw = replay.location_raw[n]
            nxt = np.clip(raw, 0.0, 1.0)
        elif sample:
            raw = mu + cfg.sigma * rng.standard_normal(B)
            nxt = np.clip(raw, 0.0, 1.0)
        else:
            raw = mu.copy()
            nxt = mu
        loc_raw[n] = raw

        for b, tr in enumerate(traces):
            lp_ind = _log_sigmoid(zq[b]) if p[b] else _log_sigmoid(-zq[b])
            lp_loc = 0.0
            if location_live[n]:
                lp_loc = (-0.5 * ((raw[b] - mu[b]) / cfg.sigma) ** 2
                          - math.log(cfg.sigma * math.sqrt(2.0 * math.pi)))
            s_n, e_n, c_n = (float(x) for x in det[b])
            tr.steps.append(EpisodeStep(
                location=float(loc[b]), frame_index=idx[b], observation=o.value[b].copy(),
                hidden=h.value[b].copy(), detection=(s_n, e_n, c_n), q=float(q[b]), p=int(p[b]),
                mu=float(mu[b]), l_next=float(nxt[b]), log_prob_indicator=lp_ind, log_prob_location=lp_loc,
            ))
            if p[b]:
                if fixed_duration is not None:
                    lo = min(max(loc[b] - fixed_duration / 2.0, 0.0), 1.0)
                    hi = min(max(loc[b] + fixed_duration / 2.0, 0.0), 1.0)
                    tr.emitted.append((float(lo), float(hi), c_n))
                else:
                    tr.emitted.append((min(s_n, e_n), max(s_n, e_n), c_n))
                tr.emitted_steps.append(n)
        loc = nxt

    return Rollout(
        traces=traces, det_logits=det_logits, ind_logits=ind_logits, loc_logits=loc_logits,
        hidden=hiddens, locations=locations, actions=Actions(ind_actions, loc_raw),
        location_live=location_live, indicator_live=sample and not emit_all,
    )


def rollout(seq: FrameSequence, params: ParamSet, cfg: AgentConfig, mode: str = "test",
            rng: np.random.Generator | None = None, **options) -> EpisodeTrace:
    """Single-sequence rollout returning just its trace."""
    return rollout_batch([seq], params, cfg, mode, rng, **options).traces[0]


def format_trace(trace: EpisodeTrace) -> str:
    lines = []
    for n, s in enumerate(trace.steps, start=1):
        s_n, e_n, c_n = s.detection
        lines.append(" ".join([str(n), f"{s.location:.6f}", str(s.frame_index), f"{s_n:.6f}", f"{e_n:.6f}",
                               f"{c_n:.6f}", f"{s.q:.6f}", str(s.p), f"{s.mu:.6f}", f"{s.l_next:.6f}"]))
    for s, e, c in trace.emitted:
        lines.append(f"EMIT {s:.6f} {e:.6f} {c:.6f}")
    if trace.reward is not None:
        lines.append(f"REWARD {trace.reward:g}")
    return "\n".join(lines) + "\n"
