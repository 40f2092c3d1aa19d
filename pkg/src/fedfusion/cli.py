"""Command-line front door.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Every run embeds its fully resolved configuration in the report so
the same report can be reproduced from the report alone.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import DEFAULT_KAPPA0, DEFAULT_RIDGE, DEFAULT_S0
from .embeddings import (
    PromptBank,
    load_embeddings,
    load_prompt_bank,
    save_embeddings,
    save_prompt_bank,
)
from .errors import FedFusionError, SingularCovarianceError, ValidationError
from .orchestrator import RunConfig, run_round
from .partition import ClientSplit, PartitionSpec, partition, synth_generate
from .suffstats import compute_stats, save_stats
from .textalign import DEFAULT_KAPPA_FILTER, DEFAULT_TAU_T

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _alpha_flag(value: str) -> float:
    alpha = float(value)
    if not 0.0 <= alpha <= 1.0:
        raise argparse.ArgumentTypeError(
            f"alpha must lie in [0.0, 1.0], got {value}"
        )
    return alpha


def _parse_partition(value: str):
    match = re.fullmatch(r"dirichlet:([0-9.eE+-]+)", value)
    if match:
        return "dirichlet", float(match.group(1))
    if value == "dirichlet":
        return "dirichlet", 0.3
    if value in ("class-split", "by-domain", "iid"):
        return value, None
    raise argparse.ArgumentTypeError(
        f"unknown partition {value!r}; expected class-split, dirichlet[:beta], "
        "by-domain, or iid"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedfusion",
        description="One-shot federated adaptation over precomputed embeddings.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--workdir", default=".", help="base directory for all paths")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("TOFA_THREADS", "1")),
                        help="worker-thread cap (env TOFA_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic fixture directory")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=2)
    p_synth.add_argument("--dim", type=int, default=2)
    p_synth.add_argument("--clients", type=int, default=10)
    p_synth.add_argument("--n-per-class", type=int, default=500)
    p_synth.add_argument("--n-test-per-class", type=int, default=2000)
    p_synth.add_argument("--separation", type=float, default=2.0,
                         help="distance between adjacent class means")
    p_synth.add_argument("--sigma", type=float, default=0.5)
    p_synth.add_argument("--prompts-per-class", type=int, default=3,
                         help="M+1 prompt slots per class")
    p_synth.add_argument("--seed", type=int, default=0)

    p_part = sub.add_parser("partition", help="split one .tfe file into clients")
    p_part.add_argument("--input", required=True)
    p_part.add_argument("--out", required=True)
    p_part.add_argument("--partition", type=_parse_partition, default=("class-split", None))
    p_part.add_argument("--clients", type=int, default=10)
    p_part.add_argument("--shots", type=int, default=16)
    p_part.add_argument("--seed", type=int, default=0)

    p_stats = sub.add_parser("stats", help="compute sufficient statistics (.tfs)")
    p_stats.add_argument("--input", required=True)
    p_stats.add_argument("--out", required=True)
    p_stats.add_argument("--client-id", type=int, default=0)

    p_run = sub.add_parser("run", help="execute the one-shot round and evaluate")
    p_run.add_argument("--train", required=True,
                       help="directory of client_*.tfe (+ client_*.test.tfe) files")
    p_run.add_argument("--prompts", required=True, nargs="+",
                       help="shared prompt bank, or one bank per client")
    p_run.add_argument("--config", help="JSON file mirroring RunConfig fields")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--alpha", type=_alpha_flag, default=None)
    p_run.add_argument("--tau-t", type=float, default=None)
    p_run.add_argument("--clip-temp", type=float, default=None)
    p_run.add_argument("--kappa-filter", type=float, default=None)
    p_run.add_argument("--ridge", type=float, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--no-calibration", action="store_true")
    p_run.add_argument("--head", choices=("fused", "visual", "text"),
                       default="fused")

    p_eval = sub.add_parser("eval", help="print the per-client table of a report")
    p_eval.add_argument("--report", required=True)

    p_rep = sub.add_parser("report", help="tabulate multiple reports by a config field")
    p_rep.add_argument("--reports", required=True, nargs="+")
    p_rep.add_argument("--by", choices=("alpha", "seed", "shots"), default="alpha")
    p_rep.add_argument("--head", choices=("fused", "visual", "text"),
                       default="fused")

    return parser


def _cmd_synth(args, workdir: Path) -> int:
    out = workdir / args.out
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    c, d = args.classes, args.dim
    means = rng.standard_normal((c, d))
    means *= args.separation / 2.0 / np.maximum(np.linalg.norm(means, axis=1,
                                                               keepdims=True), 1e-12)
    cov = args.sigma ** 2 * np.eye(d)
    splits, truth = synth_generate(c, d, args.clients, means, cov,
                                   args.n_per_class, seed=args.seed,
                                   n_test_per_class=args.n_test_per_class)
    for k, split in enumerate(splits):
        save_embeddings(split.train, out / f"client_{k:04d}.tfe")
        save_embeddings(split.test, out / f"client_{k:04d}.test.tfe")
    prompts = _synthetic_bank(truth.means, args.prompts_per_class, rng)
    save_prompt_bank(prompts, out / "prompts.tfp")
    (out / "truth.json").write_text(json.dumps({
        "means": truth.means.tolist(),
        "covariance": truth.covariance.tolist(),
    }, indent=2) + "\n")
    print(f"wrote {len(splits)} clients and prompts.tfp to {out}")
    return EXIT_OK


def _synthetic_bank(means: np.ndarray, prompts_per_class: int, rng) -> PromptBank:
    """Slot 0 points along the true class mean; other slots are noisy copies."""
    c, d = means.shape
    emb = np.zeros((c, prompts_per_class, d))
    unit = means / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
    emb[:, 0] = unit
    for m in range(1, prompts_per_class):
        noisy = unit + 0.3 * rng.standard_normal((c, d))
        emb[:, m] = noisy / np.linalg.norm(noisy, axis=1, keepdims=True)
    return PromptBank(embeddings=emb, normalized=True)


def _cmd_partition(args, workdir: Path) -> int:
    ds = load_embeddings(workdir / args.input)
    scheme, beta = args.partition
    spec = PartitionSpec(scheme=scheme, num_clients=args.clients, beta=beta,
                         shots=args.shots, seed=args.seed)
    splits = partition(ds, spec)
    out = workdir / args.out
    out.mkdir(parents=True, exist_ok=True)
    for k, split in enumerate(splits):
        save_embeddings(split.train, out / f"client_{k:04d}.tfe")
        save_embeddings(split.test, out / f"client_{k:04d}.test.tfe")
    print(f"wrote {len(splits)} client splits to {out}")
    return EXIT_OK


def _cmd_stats(args, workdir: Path) -> int:
    ds = load_embeddings(workdir / args.input)
    save_stats(compute_stats(ds, client_id=args.client_id), workdir / args.out)
    print(f"wrote stats to {workdir / args.out}")
    return EXIT_OK


def _load_clients(train_dir: Path):
    train_files = sorted(p for p in train_dir.glob("client_*.tfe")
                         if not p.name.endswith(".test.tfe"))
    if not train_files:
        raise ValidationError(f"no client_*.tfe files found in {train_dir}")
    splits = []
    for path in train_files:
        train = load_embeddings(path)
        test_path = path.with_suffix("").with_suffix(".test.tfe")
        if test_path.exists():
            test = load_embeddings(test_path)
        else:
            test = train.subset(np.array([], dtype=np.int64))
        splits.append(ClientSplit(train=train, test=test))
    return splits


def _resolve_config(args) -> RunConfig:
    raw = {}
    if args.config:
        raw.update(json.loads(Path(args.config).read_text()))
    overrides = {
        "alpha": args.alpha,
        "tau_t": args.tau_t,
        "tau_clip": args.clip_temp,
        "kappa_filter": args.kappa_filter,
        "ridge": args.ridge,
        "seed": args.seed,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_calibration:
        raw["calibration"] = False
    raw.setdefault("threads", args.threads)
    return RunConfig.from_dict(raw)


def _cmd_run(args, workdir: Path) -> int:
    cfg = _resolve_config(args)
    splits = _load_clients(workdir / args.train)
    banks = [load_prompt_bank(workdir / p) for p in args.prompts]
    bank = banks[0] if len(banks) == 1 else banks
    _, report = run_round(splits, bank, cfg)
    out = workdir / args.out
    report.save(out)
    Path(str(out) + ".csv").write_text(report.flat_table())
    avg = report.averages.get(f"{args.head}_present")
    print(f"{args.head} accuracy (present-class average): {avg:.4f}"
          if avg is not None else "no scored clients")
    print(f"report written to {out}")
    return EXIT_OK


def _cmd_eval(args, workdir: Path) -> int:
    raw = json.loads((workdir / args.report).read_text())
    print("client,head,accuracy_present,accuracy_all,eta_mean")
    for entry in raw["clients"]:
        if entry.get("absent"):
            print(f"{entry['client']},absent,,,")
            continue
        for head in ("visual", "text", "fused"):
            acc = entry["accuracy"][head]
            print(f"{entry['client']},{head},{acc['present']:.6f},"
                  f"{acc['all']:.6f},{entry['eta']['mean']:.4f}")
    for key, value in sorted(raw["averages"].items()):
        print(f"# {key} = {value}")
    return EXIT_OK


def _cmd_report(args, workdir: Path) -> int:
    rows = []
    for path in args.reports:
        raw = json.loads((workdir / path).read_text())
        key = raw["config"].get(args.by)
        rows.append((key, raw["averages"].get(f"{args.head}_present")))
    rows.sort(key=lambda item: (item[0] is None, item[0]))
    print(f"{args.by},{args.head}_accuracy")
    for key, acc in rows:
        print(f"{key},{'' if acc is None else f'{acc:.6f}'}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "partition": _cmd_partition,
    "stats": _cmd_stats,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    workdir = Path(args.workdir)
    try:
        return _COMMANDS[args.command](args, workdir)
    except SingularCovarianceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FedFusionError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
