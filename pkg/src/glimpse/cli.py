"""Command-line entry point: ``glimpse gen|ingest|train|eval|trace|gradcheck``.

Every hyperparameter is a flat ``key = value`` setting. Values come from the
built-in defaults, then an optional ``--config`` file, then command-line
flags. The resolved settings are written to a manifest next to each output,
and that manifest can be passed back as ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, format_trace
from .evaluation import EvalConfig, Segment, evaluate, write_detections, write_results
from .gradcheck import TOLERANCE, run_all
from .synthdata import SynthConfig, generate_dataset, ingest_features, read_dataset, stream_of, write_dataset
from .training import (
    VARIANTS,
    Detector,
    NumericalError,
    RewardConfig,
    TrainConfig,
    Trainer,
    apply_variant,
    episode_reward,
    train,
)

log = logging.getLogger("glimpse")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _show(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Option:
    key: str
    parse: object
    default: object
    help: str
    group: str


_synth, _agent, _train, _reward, _eval = SynthConfig(), AgentConfig(), TrainConfig(), RewardConfig(), EvalConfig()

OPTIONS = [
    Option("seed", int, None, "global seed; falls back to $GLIMPSE_SEED, then 0", "general"),
    Option("jobs", int, 1, "worker processes for evaluation rollouts; 1 is bit-deterministic", "general"),
    Option("data", str, None, "dataset directory", "paths"),
    Option("out", str, None, "output directory (gen, ingest, train) or file (eval, trace)", "paths"),
    Option("checkpoint", str, None, "parameter checkpoint to evaluate or trace", "paths"),
    Option("features", str, None, "whitespace-separated feature matrix, one frame per line", "ingest"),
    Option("annotations", str, None, "file of absolute 'start end' frame intervals", "ingest"),
    Option("chunk_length", int, 50, "frames per ingested sequence", "ingest"),
    Option("stream_id", str, None, "stream name for ingested chunk ids (default: features file stem)", "ingest"),
    Option("sequence_id", str, None, "sequence to trace", "trace"),
    Option("count", int, 1000, "number of generated sequences", "synth"),
    Option("split", _floats, (0.8, 0.1, 0.1), "train,val,test fractions", "synth"),
    Option("T", int, _synth.T, "frames per generated sequence", "synth"),
    Option("d", int, _synth.d, "feature dimension", "synth"),
    Option("noise", float, _synth.noise, "background noise scale", "synth"),
    Option("amplitude", float, _synth.amplitude, "event signal amplitude", "synth"),
    Option("count_probs", _floats, _synth.count_probs, "probabilities of 0,1,2,... events", "synth"),
    Option("duration_range", _floats, _synth.duration_range, "min,max event duration as fractions of T", "synth"),
    Option("envelope", str, _synth.envelope, "event envelope: rectangular or ramped", "synth"),
    Option("glimpses", int, _agent.glimpses, "glimpse budget N", "agent"),
    Option("hidden", int, _agent.hidden, "LSTM width", "agent"),
    Option("layers", int, _agent.layers, "LSTM depth", "agent"),
    Option("obs_dim", int, _agent.obs_dim, "observation embedding width", "agent"),
    Option("loc_embed", int, _agent.loc_embed, "location embedding width", "agent"),
    Option("feat_embed", int, _agent.feat_embed, "frame embedding width", "agent"),
    Option("sigma", float, _agent.sigma, "std of the location policy", "agent"),
    Option("variant", str, _train.variant, "model variant: " + ", ".join(VARIANTS), "train"),
    Option("max_updates", int, _train.max_updates, "parameter updates to run", "train"),
    Option("batch_size", int, _train.batch_size, "sequences per update", "train"),
    Option("positive_ratio", float, _train.positive_ratio, "target fraction of positive sequences per batch", "train"),
    Option("episodes", int, _train.episodes, "rollouts per sequence (K)", "train"),
    Option("lr", float, _train.lr, "RMSProp learning rate", "train"),
    Option("baseline_lr", float, _train.baseline_lr, "RMSProp learning rate of the baseline", "train"),
    Option("rho", float, _train.rho, "RMSProp decay", "train"),
    Option("eps", float, _train.eps, "RMSProp epsilon", "train"),
    Option("gamma", float, _train.gamma, "weight of the localization loss", "train"),
    Option("eval_every", int, _train.eval_every, "updates between validation passes (0 disables)", "train"),
    Option("r_plus", float, _reward.r_plus, "reward per true positive", "reward"),
    Option("r_minus", float, _reward.r_minus, "reward per false positive", "reward"),
    Option("r_p", float, _reward.r_p, "reward for emitting nothing on a positive sequence", "reward"),
    Option("reward_alpha", float, _reward.alpha, "IoU a prediction must exceed to earn r_plus", "reward"),
    Option("alphas", _floats, _eval.alphas, "IoU thresholds for AP", "eval"),
    Option("nms_threshold", float, _eval.nms_threshold, "NMS overlap threshold", "eval"),
    Option("merge", _bool, _eval.merge, "union-merge predictions across chunks of a stream", "eval"),
]
BY_KEY = {o.key: o for o in OPTIONS}

COMMAND_GROUPS = {
    "gen": ("general", "paths", "synth"),
    "ingest": ("general", "paths", "ingest"),
    "train": ("general", "paths", "agent", "train", "reward", "eval"),
    "eval": ("general", "paths", "eval"),
    "trace": ("general", "paths", "trace"),
    "gradcheck": ("general",),
}

COMMAND_HELP = {
    "gen": "generate a seeded synthetic dataset",
    "ingest": "cut a precomputed feature stream into a dataset",
    "train": "train a detector variant",
    "eval": "score a checkpoint on the test split",
    "trace": "export the glimpse trace of one sequence",
    "gradcheck": "finite-difference self-test of all gradients",
}


def read_config(path: str | Path) -> dict[str, object]:
    """Parse a flat ``key = value`` file; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in BY_KEY:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = BY_KEY[key].parse(value) if value else None
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {key}: {exc}") from None
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glimpse", description="Glimpse-based temporal event detection.", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, groups in COMMAND_GROUPS.items():
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name], allow_abbrev=False,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat 'key = value' settings file; flags override it")
        if name in ("gen", "ingest", "train"):
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "gradcheck":
            p.add_argument("--probes", type=int, default=100, help="coordinates probed per check (default: 100)")
        for group in groups:
            g = p.add_argument_group(group)
            for opt in OPTIONS:
                if opt.group != group:
                    continue
                default = _show(opt.default) if opt.default is not None else "none"
                g.add_argument("--" + opt.key.replace("_", "-"), dest=opt.key, type=opt.parse, default=None,
                               metavar=opt.key.upper(), help=f"{opt.help} (default: {default})")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, object]:
    """Defaults, then the config file, then explicit flags; seed falls back to $GLIMPSE_SEED."""
    values = {o.key: o.default for o in OPTIONS}
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} not found")
        values.update(read_config(args.config))
    for key in BY_KEY:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if values["seed"] is None:
        env = os.environ.get("GLIMPSE_SEED")
        try:
            values["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"GLIMPSE_SEED must be an integer, got {env!r}") from None
    if values["jobs"] < 1:
        raise UsageError("jobs must be at least 1")
    return values


def write_manifest(path: Path, command: str, values: dict[str, object], extra: dict[str, object] | None = None):
    lines = [f"# glimpse {command}; rerun with: glimpse {command} --config {path.name}"]
    for opt in OPTIONS:
        lines.append(f"{opt.key} = {_show(values[opt.key])}")
    for key, value in (extra or {}).items():
        lines.append(f"# {key}: {value}")
    path.write_text("\n".join(lines) + "\n")


def _need(values, *keys):
    for key in keys:
        if values.get(key) in (None, ""):
            raise UsageError(f"missing required setting '{key}' (--{key.replace('_', '-')})")


def _guard(paths: list[Path], force: bool):
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def synth_config(v) -> SynthConfig:
    cfg = SynthConfig(T=v["T"], d=v["d"], noise=v["noise"], amplitude=v["amplitude"],
                      count_probs=tuple(v["count_probs"]), duration_range=tuple(v["duration_range"]),
                      envelope=v["envelope"], seed=v["seed"])
    if len(cfg.duration_range) != 2:
        raise ValueError(f"duration_range must have two values, got {cfg.duration_range}")
    return cfg


def eval_config(v) -> EvalConfig:
    return EvalConfig(alphas=tuple(v["alphas"]), nms_threshold=v["nms_threshold"], merge=v["merge"])


def cmd_gen(v, args) -> int:
    _need(v, "out")
    cfg = synth_config(v)
    split = tuple(v["split"])
    if len(split) != 3 or any(x < 0 for x in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split must be three non-negative fractions summing to 1, got {split}")
    out = Path(v["out"])
    _guard([out / f"{s}.txt" for s in ("train", "val", "test")] + [out / "manifest.txt"], args.force)
    ds = generate_dataset(cfg, v["count"], v["seed"], split)
    write_dataset(out, ds)
    write_manifest(out / "manifest.txt", "gen", v)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} sequences to {out}")
    return EXIT_OK


def _read_annotations(path) -> list[tuple[float, float]]:
    spans = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tok = line.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) != 2:
            raise UsageError(f"{path}:{lineno}: expected 'start end'")
        spans.append((float(tok[0]), float(tok[1])))
    return spans


def cmd_ingest(v, args) -> int:
    _need(v, "features", "out")
    out = Path(v["out"])
    _guard([out / "test.txt", out / "manifest.txt"], args.force)
    spans = _read_annotations(v["annotations"]) if v["annotations"] else []
    ds = ingest_features(v["features"], v["chunk_length"], spans, v["stream_id"])
    write_dataset(out, ds)
    write_manifest(out / "manifest.txt", "ingest", v)
    print(f"wrote {len(ds.test)} sequences to {out / 'test.txt'}")
    return EXIT_OK


def _load_dataset(v):
    _need(v, "data")
    if not Path(v["data"]).is_dir():
        raise UsageError(f"dataset directory {v['data']} not found")
    return read_dataset(v["data"])


def cmd_train(v, args) -> int:
    _need(v, "out")
    ds = _load_dataset(v)
    if not ds.train:
        raise UsageError(f"{v['data']}: empty training split")
    out = Path(v["out"])
    files = [out / n for n in ("initial.ckpt", "best.ckpt", "last.ckpt", "metrics.log", "validation.log",
                               "manifest.txt")]
    _guard(files, args.force)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:  # stale outputs of an earlier run must not survive a forced rerun
        f.unlink(missing_ok=True)
        Path(str(f) + ".json").unlink(missing_ok=True)
    agent = AgentConfig(feature_dim=ds.train[0].sequence.d, loc_embed=v["loc_embed"], feat_embed=v["feat_embed"],
                        obs_dim=v["obs_dim"], hidden=v["hidden"], layers=v["layers"], sigma=v["sigma"],
                        glimpses=v["glimpses"])
    tcfg = TrainConfig(gamma=v["gamma"], lr=v["lr"], rho=v["rho"], eps=v["eps"], baseline_lr=v["baseline_lr"],
                       batch_size=v["batch_size"], positive_ratio=v["positive_ratio"], episodes=v["episodes"],
                       max_updates=v["max_updates"], eval_every=v["eval_every"], variant=v["variant"],
                       seed=v["seed"])
    rcfg = RewardConfig(r_plus=v["r_plus"], r_minus=v["r_minus"], r_p=v["r_p"], alpha=v["reward_alpha"])
    trainer = Trainer(ds, agent, tcfg, rcfg, eval_config(v))
    write_manifest(out / "manifest.txt", "train", v)
    trainer.detector(trainer.params.copy()).save(out / "initial.ckpt")
    if tcfg.max_updates == 0:
        print(f"wrote initial checkpoint {out / 'initial.ckpt'}")
        return EXIT_OK

    lines: list[str] = []
    validation = []
    try:
        best, best_map = train(trainer, lines, on_eval=lambda t, score: validation.append(f"{t.updates}\t{score:.6f}"))
    except NumericalError as exc:
        # the failing step was rejected, so the live parameters are the last good ones
        trainer.detector(trainer.params.copy()).save(out / "last.ckpt")
        print(f"error: {exc}; last good checkpoint written to {out / 'last.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        (out / "metrics.log").write_text("".join(ln + "\n" for ln in lines))
        (out / "validation.log").write_text("".join(ln + "\n" for ln in validation))
    trainer.detector(best).save(out / "best.ckpt")
    trainer.detector(trainer.params.copy()).save(out / "last.ckpt")
    note = f"best val mAP@0.5 {best_map:.4f}" if ds.val else "no validation split"
    print(f"trained {trainer.updates} updates ({note}); checkpoints in {out}")
    return EXIT_OK


def _load_detector(v, ds) -> Detector:
    _need(v, "checkpoint")
    try:
        det = Detector.load(v["checkpoint"])
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None
    for ex in ds.train + ds.val + ds.test:
        if ex.sequence.d != det.agent.feature_dim:
            raise UsageError(f"dimension mismatch: sequence {ex.sequence.sequence_id} has d={ex.sequence.d}, "
                             f"checkpoint expects {det.agent.feature_dim}")
    return det


def _predict_chunk(job):
    checkpoint, data, lo, hi = job
    det = Detector.load(checkpoint)
    return det.predict(read_dataset(data).test[lo:hi])


def cmd_eval(v, args) -> int:
    _need(v, "out")
    ds = _load_dataset(v)
    det = _load_detector(v, ds)
    if not ds.test:
        raise UsageError(f"{v['data']}: test split is empty, nothing to evaluate")
    cfg = eval_config(v)
    cfg.validate()
    det.nms_threshold = cfg.nms_threshold
    if v["jobs"] == 1:
        preds = det.predict(ds.test)
    else:
        n = len(ds.test)
        bounds = np.linspace(0, n, v["jobs"] + 1).astype(int)
        jobs = [(v["checkpoint"], v["data"], lo, hi) for lo, hi in zip(bounds, bounds[1:]) if hi > lo]
        with ProcessPoolExecutor(max_workers=v["jobs"]) as pool:
            preds = [p for chunk in pool.map(_predict_chunk, jobs) for p in chunk]
    gts = [Segment(ex.sequence.origin_offset + g.s * (ex.sequence.T - 1),
                   ex.sequence.origin_offset + g.e * (ex.sequence.T - 1), stream_of(ex.sequence.sequence_id))
           for ex in ds.test for g in ex.ground_truths]
    results = evaluate({"0": preds}, {"0": gts}, cfg)
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(out, results)
    write_detections(Path(str(out) + ".detections"), {"0": preds})
    fraction = det.observed_fraction(ds.test)
    write_manifest(Path(str(out) + ".manifest"), "eval", v, {"observed_fraction": f"{fraction:.4f}"})
    for a in sorted(results["ALL"], reverse=True):
        print(f"mAP@{a:g} = {results['ALL'][a]:.4f}")
    print(f"observed fraction of frames: {fraction:.4f}")
    return EXIT_OK


def cmd_trace(v, args) -> int:
    _need(v, "out", "sequence_id")
    ds = _load_dataset(v)
    det = _load_detector(v, ds)
    if apply_variant(det.variant).dense:
        raise UsageError("dense_frame_nms checkpoints have no glimpse trace")
    try:
        ex = ds.find(v["sequence_id"])
    except KeyError:
        raise UsageError(f"unknown sequence_id {v['sequence_id']!r} in {v['data']}") from None
    trace = det.rollouts([ex]).traces[0]
    final = apply_variant(det.variant).final_predictions(trace.emitted, det.nms_threshold)
    trace.reward, _ = episode_reward(final, ex.ground_truths, RewardConfig(alpha=v["reward_alpha"]))
    occupancy = "".join(str(int(x)) for x in ex.frame_labels())
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_trace(trace) + f"GT {occupancy}\n")
    write_manifest(Path(str(out) + ".manifest"), "trace", v)
    print(f"wrote trace of {ex.sequence.sequence_id} to {out}")
    return EXIT_OK


def cmd_gradcheck(v, args) -> int:
    results = run_all(probes=args.probes, seed=v["seed"])
    for r in results:
        print(r.line())
    for component in ("diffcore", "agent"):
        checked = [r for r in results if r.error is not None and r.name.startswith("agent") == (component == "agent")]
        if checked:
            worst = max(checked, key=lambda r: r.error)
            print(f"worst {component}: {worst.error:.3e} ({worst.name}; tolerance {TOLERANCE:g})")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "trace": cmd_trace,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        values = resolve(args)
        return COMMANDS[args.command](values, args)
    except UsageError as exc:
        print(f"glimpse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"glimpse {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"glimpse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
