"""Command-line front end: ``train``, ``probe``, ``paired`` and ``report``.

Exit codes: 0 success, 1 configuration or input error, 2 divergence,
130 when a run is interrupted.
"""

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

from . import __version__, _kernels
from .config import config_hash, dump_config, load_config
from .data import LatentConfig, NoiseConfig, read_dictionary_csv
from .errors import ConfigError, DimensionError, DivergenceError, ProbeError
from .evaluation import COVERAGE_THRESHOLD, MetricsRecord, oracle_encoder
from .network import load_checkpoint
from .objective import NO_AUG, WITH_AUG
from .trainer import Problem, run_probes, train

log = logging.getLogger("sparsecl")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_ABORTED = 130

OUTPUT_ROOT_ENV = "SPARSECL_OUTPUT_ROOT"
LEGS = (WITH_AUG, NO_AUG)


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    code_version: str
    started: str
    ended: str = None
    outcome: str = None
    overrides: list = field(default_factory=list)
    backend: str = _kernels.backend()
    message: str = None

    def write(self, out_dir):
        # atomic: write a temp file in the same directory, then rename
        os.makedirs(out_dir, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, os.path.join(out_dir, "manifest.json"))


@dataclass
class ExperimentSpec:
    name: str
    config: object
    out_dir: str

    @property
    def probe_steps(self):
        return sorted(self.config.probe_steps())

    @property
    def checkpoint_steps(self):
        return sorted(self.config.checkpoint_steps())


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def default_out_dir(name):
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), name)


def _run_leg(spec, overrides):
    """Train one leg into ``spec.out_dir``; returns (exit code, trajectory)."""
    cfg = spec.config
    os.makedirs(spec.out_dir, exist_ok=True)
    with open(os.path.join(spec.out_dir, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))
    manifest = RunManifest(config_hash(cfg), cfg.seed, __version__, _now(), overrides=list(overrides))
    try:
        traj = train(cfg, out_dir=spec.out_dir)
    except DivergenceError as exc:
        manifest.outcome, manifest.message, manifest.ended = "diverged", str(exc), _now()
        manifest.write(spec.out_dir)
        log.error("%s diverged: %s", spec.name, exc)
        return EXIT_DIVERGED, exc.trajectory
    except KeyboardInterrupt:
        manifest.outcome, manifest.message, manifest.ended = "aborted", "interrupted", _now()
        manifest.write(spec.out_dir)
        log.error("%s aborted", spec.name)
        return EXIT_ABORTED, None
    manifest.outcome, manifest.ended = "completed", _now()
    manifest.write(spec.out_dir)
    return EXIT_OK, traj


def _config_from_args(args, mode=None):
    extra = {"seed": getattr(args, "seed", None), "mode": mode or getattr(args, "mode", None)}
    cfg = load_config(args.config, args.set or (), extra)
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or default_out_dir(f"train-{cfg.mode}-seed{cfg.seed}")
    code, traj = _run_leg(ExperimentSpec("train", cfg, out), args.set or ())
    if code == EXIT_OK:
        print(json.dumps(traj.final().to_dict()))
    return code


def cmd_probe(args):
    try:
        params = load_checkpoint(args.ckpt)
        dictionary = read_dictionary_csv(args.dict)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if params.d1 != dictionary.d1:
        print(f"error: checkpoint has d1={params.d1} but dictionary has d1={dictionary.d1}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.set or (), {"d": dictionary.d, "d1": dictionary.d1, "m": params.m, "seed": args.seed})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if (cfg.d, cfg.d1) != (dictionary.d, dictionary.d1):
        print("error: config dimensions disagree with the dictionary", file=sys.stderr)
        return EXIT_CONFIG
    problem = Problem(dictionary, LatentConfig(cfg.p_active), NoiseConfig(cfg.sigma_xi_sq))
    encoder = oracle_encoder if args.oracle else None
    try:
        reg, cls = run_probes(params, cfg, problem, encoder=encoder)
    except ProbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = reg if args.task == "regression" else cls
    print(json.dumps(result.to_dict()))
    return EXIT_OK


SUMMARY_COLUMNS = [
    "step",
    "sparse_fraction_aug",
    "sparse_fraction_noaug",
    "cosine_aug",
    "cosine_noaug",
    "acc_aug",
    "acc_noaug",
    "mse_aug",
    "mse_noaug",
]


def _fmt(v):
    return "" if v is None else repr(v)


def write_summary(path, aug_records, noaug_records):
    by_step = {r.step: r for r in noaug_records}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for ra in aug_records:
            rn = by_step.get(ra.step)
            g = (lambda name: None) if rn is None else (lambda name: getattr(rn, name))
            w.writerow(
                [
                    ra.step,
                    _fmt(ra.sparse_fraction),
                    _fmt(g("sparse_fraction")),
                    _fmt(ra.rep_noise_cosine),
                    _fmt(g("rep_noise_cosine")),
                    _fmt(ra.probe_accuracy),
                    _fmt(g("probe_accuracy")),
                    _fmt(ra.probe_mse_normalized),
                    _fmt(g("probe_mse_normalized")),
                ]
            )


def _leg_job(args):
    spec, overrides = args
    code, traj = _run_leg(spec, overrides)
    return code, (traj.records if traj is not None else None)


def cmd_paired(args):
    try:
        base = _config_from_args(args, mode=WITH_AUG)
        cfgs = {leg: replace(base, mode=leg).validate() for leg in LEGS}
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or default_out_dir(f"paired-seed{base.seed}")
    specs = [ExperimentSpec(leg, cfgs[leg], os.path.join(out, leg)) for leg in LEGS]
    overrides = list(args.set or ())
    if args.parallel:
        with ProcessPoolExecutor(max_workers=2) as pool:
            results = list(pool.map(_leg_job, [(s, overrides) for s in specs]))
    else:
        results = [_leg_job((s, overrides)) for s in specs]
    codes = [c for c, _ in results]
    recs = {leg: r for leg, (_, r) in zip(LEGS, results)}
    if recs[WITH_AUG] is not None:
        write_summary(os.path.join(out, "summary.csv"), recs[WITH_AUG], recs[NO_AUG] or [])
    for code in (EXIT_ABORTED, EXIT_DIVERGED):
        if code in codes:
            return code
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def read_trajectory(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: corrupt trajectory line") from exc
            if rec.get("diverged"):
                continue
            records.append(MetricsRecord.from_dict(rec))
    if not records:
        raise ValueError(f"{path}: no records")
    return records


def acceptance_verdicts(aug, noaug):
    """The four paired-run verdicts, from the final records of each leg."""

    def ok(cond):
        return "PASS" if cond else "FAIL"

    def num(v):
        return float("nan") if v is None else v

    return [
        (
            "with-aug structure",
            ok(aug.sparse_fraction >= 0.5 and aug.structured_fraction >= 0.8 and aug.coverage >= COVERAGE_THRESHOLD),
            f"sparse={aug.sparse_fraction:.3f} structured={aug.structured_fraction:.3f} coverage={aug.coverage:.3f}",
        ),
        (
            "no-aug collapse",
            ok(noaug.rep_noise_cosine >= 0.9 and noaug.sparse_fraction <= 0.25),
            f"cosine={noaug.rep_noise_cosine:.3f} sparse={noaug.sparse_fraction:.3f}",
        ),
        (
            "with-aug probes",
            ok(num(aug.probe_accuracy) >= 0.9 and num(aug.probe_mse_normalized) <= 0.1),
            f"acc={num(aug.probe_accuracy):.3f} mse/E[y^2]={num(aug.probe_mse_normalized):.3f}",
        ),
        (
            "no-aug probes",
            ok(num(noaug.probe_accuracy) <= 0.6 and num(noaug.probe_mse_normalized) >= 0.5),
            f"acc={num(noaug.probe_accuracy):.3f} mse/E[y^2]={num(noaug.probe_mse_normalized):.3f}",
        ),
    ]


_TABLE_COLS = [
    ("step", "{}"),
    ("stage", "{}"),
    ("loss", "{:.4f}"),
    ("sparse_fraction", "{:.3f}"),
    ("structured_fraction", "{:.3f}"),
    ("coverage", "{:.3f}"),
    ("rep_noise_cosine", "{:.3f}"),
    ("activation_sparsity", "{:.3f}"),
    ("probe_accuracy", "{:.3f}"),
    ("probe_mse_normalized", "{:.3f}"),
]


def markdown_table(records):
    head = "| " + " | ".join(c for c, _ in _TABLE_COLS) + " |"
    sep = "|" + "|".join("---" for _ in _TABLE_COLS) + "|"
    rows = [head, sep]
    for r in records:
        cells = []
        for name, fmt in _TABLE_COLS:
            v = getattr(r, name)
            cells.append("" if v is None else fmt.format(v))
        rows.append("| " + " | ".join(cells) + " |")
    return "\n".join(rows)


def cmd_report(args):
    run = args.run
    legs = [leg for leg in LEGS if os.path.isfile(os.path.join(run, leg, "trajectory.jsonl"))]
    single = os.path.join(run, "trajectory.jsonl")
    try:
        if os.path.isfile(single):
            records = read_trajectory(single)
            print(f"# Run {run}\n")
            print(markdown_table(records))
            return EXIT_OK
        if not legs:
            print(f"error: no trajectory.jsonl found under {run}", file=sys.stderr)
            return EXIT_CONFIG
        loaded = {leg: read_trajectory(os.path.join(run, leg, "trajectory.jsonl")) for leg in legs}
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"# Paired run {run}\n")
    for leg in legs:
        print(f"## {leg}\n")
        print(markdown_table(loaded[leg]))
        print()
    if len(legs) == 2:
        print("## Acceptance verdicts\n")
        print("| check | verdict | values |\n|---|---|---|")
        for name, verdict, detail in acceptance_verdicts(loaded[WITH_AUG][-1], loaded[NO_AUG][-1]):
            print(f"| {name} | {verdict} | {detail} |")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_config_flags(p, seed_default=None):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="sparsecl", description="Contrastive learning on sparse coding data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one encoder")
    _add_config_flags(p)
    p.add_argument("--mode", choices=LEGS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear probe on a saved checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--task", choices=("regression", "classification"), required=True)
    p.add_argument("--oracle", action="store_true", help="use the latent z as features (control)")
    _add_config_flags(p, seed_default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("paired", help="with-aug and no-aug legs on identical data")
    _add_config_flags(p)
    p.add_argument("--out")
    p.add_argument("--parallel", action="store_true", help="run both legs at once")
    p.set_defaults(func=cmd_paired)

    p = sub.add_parser("report", help="markdown summary of a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
