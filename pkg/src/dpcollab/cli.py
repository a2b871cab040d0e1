"""Command-line front end.

Subcommands:
  calibrate  solve for the per-step noise scale that spends a budget exactly
  account    (epsilon, delta) queries against a ledger description file
  train      run a full collaborative session from a JSON config
  seq-eps    epsilon-vs-sequence-length curves with and without correction
  mask-demo  dump one iteration's masks, their sum, and the realized noise

Exit codes: 0 success, 2 configuration/format error, 3 infeasible budget,
4 runtime abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import accounting
from .errors import CalibrationError, ConfigurationError, DpCollabError, FormatError
from .models import save_checkpoint, checkpoint_loads
from .privacy import generate_masks, per_step_sigma
from .protocol import (
    SessionConfig,
    SessionTrace,
    derive_session_keys,
    open_asset,
    prepare_session,
    run_session,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_RUNTIME = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpcollab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="noise scale for a target budget")
    cal.add_argument("--iterations", type=int, required=True)
    cal.add_argument("--clip-events", type=int, default=0, help="number of histogram aggregations n_g")
    cal.add_argument("--sigma-g", type=float, default=0.0)
    cal.add_argument("--epsilon", type=float, required=True)
    cal.add_argument("--delta", type=float, required=True)
    cal.add_argument("--lambda", dest="lam", type=float, default=0.0)

    acc = sub.add_parser("account", help="epsilon/delta of a recorded ledger")
    acc.add_argument("--ledger", type=Path, required=True, help="JSON file {events: [{sensitivity, sigma, count}]}")
    acc.add_argument("--epsilon", type=float, default=None, help="report delta at this epsilon")
    acc.add_argument("--delta", type=float, default=None, help="report epsilon at this delta")

    trn = sub.add_parser("train", help="run a collaborative training session")
    trn.add_argument("--config", type=Path, required=True)
    trn.add_argument("--out", type=Path, default=None, help="output directory (default run-<session_id>)")
    trn.add_argument("--seed", type=int, default=None, help="override the config seed")
    trn.add_argument("--scheduler", choices=("sequential", "concurrent"), default="sequential")

    seq = sub.add_parser("seq-eps", help="epsilon for bounded-length update sequences")
    seq.add_argument("--n-max", type=int, required=True)
    seq.add_argument("--lambdas", type=str, default="0.0,0.7", help="comma-separated correction coefficients")
    seq.add_argument("--sigma", type=float, required=True, help="effective (matched) noise scale sigma-tilde")
    seq.add_argument("--delta", type=float, default=1e-5)
    seq.add_argument("--out", type=Path, default=None, help="CSV output path (default stdout)")

    dem = sub.add_parser("mask-demo", help="show a mask split and its exact-sum property")
    dem.add_argument("--workers", type=int, default=4)
    dem.add_argument("--dim", type=int, default=8)
    dem.add_argument("--sigma", type=float, default=1.0)
    dem.add_argument("--clip-bound", type=float, default=1.0)
    dem.add_argument("--blinding-factor", type=float, default=100.0)
    dem.add_argument("--seed", type=int, default=0)
    dem.add_argument("--out", type=Path, default=None, help="JSON output path (default stdout)")
    return parser


def cmd_calibrate(args) -> int:
    target = accounting.EpsDelta(args.epsilon, args.delta)
    sigma_step = accounting.calibrate_sigma(
        args.iterations, args.clip_events, args.sigma_g, target, args.lam
    )
    sigma_tilde = (1.0 - args.lam) * sigma_step
    print(f"sigma_step={sigma_step!r}")
    print(f"sigma_tilde={sigma_tilde!r}")
    return EXIT_OK


def _load_ledger(path: Path) -> accounting.CompositionLedger:
    try:
        raw = json.loads(path.read_text())
        events = [
            accounting.GaussianEvent(
                sensitivity=float(e["sensitivity"]),
                sigma=float(e["sigma"]),
                count=int(e.get("count", 1)),
            )
            for e in raw["events"]
        ]
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read ledger file {path}: {exc}") from exc
    return accounting.CompositionLedger(events=events)


def cmd_account(args) -> int:
    if args.epsilon is None and args.delta is None:
        raise ConfigurationError("account needs --epsilon and/or --delta")
    ledger = _load_ledger(args.ledger)
    print(f"effective_mu={accounting.effective_mu(ledger)!r}")
    if args.epsilon is not None:
        print(f"delta_at_epsilon={accounting.ledger_delta(args.epsilon, ledger)!r}")
    if args.delta is not None:
        print(f"epsilon_at_delta={accounting.epsilon_at_delta(ledger, args.delta)!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        raw = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    config = SessionConfig.from_dict(raw)

    out_dir = args.out if args.out is not None else Path(f"run-{config.session_id}")
    out_dir.mkdir(parents=True, exist_ok=True)

    store, kds = prepare_session(config)
    trace = SessionTrace()
    report = run_session(config, store, kds, scheduler=args.scheduler, trace=trace)

    (out_dir / "report.csv").write_text(report.to_csv())
    # The owners re-derive their model key to open the final checkpoint.
    final_model = checkpoint_loads(
        open_asset(store.get("model"), derive_session_keys(config)["model"]).decode()
    )
    save_checkpoint(final_model, out_dir / "model.json")
    manifest = {
        "session_id": config.session_id,
        "config_digest": hashlib.sha256(config.canonical_bytes()).hexdigest(),
        "scheduler": args.scheduler,
        "seed": config.seed,
        "iterations_completed": report.iterations_completed,
        "stop_reason": report.stop_reason,
        "final_epsilon": report.final_epsilon,
        "final_accuracy": report.final_accuracy,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"stop_reason={report.stop_reason}")
    print(f"iterations={report.iterations_completed}")
    print(f"final_epsilon={report.final_epsilon!r}")
    print(f"final_accuracy={report.final_accuracy!r}")
    print(f"wrote {out_dir}/report.csv, model.json, manifest.json")
    return EXIT_OK


def cmd_seq_eps(args) -> int:
    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip() != ""]
    if args.n_max < 1:
        raise ConfigurationError("--n-max must be >= 1")
    for lam in lambdas:
        if not 0.0 <= lam < 1.0:
            raise ConfigurationError(f"lambda {lam} outside [0, 1)")
    header = "n," + ",".join(f"epsilon_lambda={lam!r}" for lam in lambdas)
    lines = [header]
    for n in range(1, args.n_max + 1):
        row = [str(n)]
        for lam in lambdas:
            # Matched effective noise: each lambda runs at step scale
            # sigma/(1-lambda) so all columns inject the same long-run noise.
            eps = accounting.sequence_epsilon(n, lam, per_step_sigma(args.sigma, lam), args.delta)
            row.append(repr(eps))
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_mask_demo(args) -> int:
    if args.workers < 1 or args.dim < 1:
        raise ConfigurationError("--workers and --dim must be >= 1")
    rng = np.random.default_rng(args.seed)
    scale = args.sigma * args.clip_bound
    noise = rng.normal(0.0, scale, size=args.dim) if scale > 0 else np.zeros(args.dim)
    mask_set = generate_masks(args.workers, noise, args.blinding_factor * scale, rng)
    mask_sum = np.sum(mask_set.masks, axis=0)
    payload = {
        "workers": args.workers,
        "dim": args.dim,
        "noise_scale": scale,
        "masks": [m.tolist() for m in mask_set.masks],
        "mask_sum": mask_sum.tolist(),
        "realized_noise": mask_set.realized_noise.tolist(),
        "max_abs_sum_error": float(np.max(np.abs(mask_sum - mask_set.realized_noise))),
    }
    text = json.dumps(payload, indent=2) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
        print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "account": cmd_account,
    "train": cmd_train,
    "seq-eps": cmd_seq_eps,
    "mask-demo": cmd_mask_demo,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DpCollabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
