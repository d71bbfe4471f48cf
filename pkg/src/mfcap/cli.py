"""Command-line entry point: ``mfcap <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

from . import artifacts
from .capacity import (
    ChannelSpec,
    CapacityReport,
    beta_capacity_table,
    fixed_variance_capacity,
    solve_noise_for_capacity,
)
from .data import IDXError, binarize, load_idx_dataset, take_first
from .experiments import ConfigError, SweepSpec, run_experiment, run_sweep
from .special_math import Rng

log = logging.getLogger("mfcap")

DEFAULT_BETAS = "0.01,0.1,1,10,100"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} must be a number, got {text!r}") from None
        if not value > 0 or math.isnan(value):
            raise argparse.ArgumentTypeError(f"--{name} must be > 0, got {text!r}")
        return value
    return parse


def _positive_int(name):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} must be an integer, got {text!r}") from None
        if value < 1:
            raise argparse.ArgumentTypeError(f"--{name} must be >= 1, got {text!r}")
        return value
    return parse


def _float_list(name):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError(f"--{name} needs at least one value")
        try:
            values = [float(t) for t in items]
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} has a non-numeric entry in {text!r}") from None
        if any(not v > 0 or math.isnan(v) for v in values):
            raise argparse.ArgumentTypeError(f"--{name} values must be > 0")
        return values
    return parse


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("--seed must be a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfcap", description="Information-capacity tools for mean-field Gaussian networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=_seed, default=None, help="random seed (overrides the config seed)")
        p.add_argument("--out", type=Path, default=None, help="output file")
        return p

    p = command("capacity", "Capacity of a Gaussian channel with fixed noise variance.")
    p.add_argument("--prior-var", type=_positive("prior-var"), required=True, help="prior variance")
    p.add_argument("--noise-var", type=_positive("noise-var"), required=True, help="noise variance")
    p.add_argument("--dims", type=_positive_int("dims"), default=1, help="number of independent dimensions")

    p = command("solve", "Noise variance that yields a target capacity per dimension.")
    p.add_argument("--bits", type=_positive("bits"), required=True, help="target bits per dimension")
    p.add_argument("--prior-var", type=_positive("prior-var"), default=1.0, help="prior variance")

    p = command("beta-table", "Capacity per dimension of learned-variance channels.")
    p.add_argument("--betas", type=_float_list("betas"), default=_float_list("betas")(DEFAULT_BETAS),
                   help=f"comma-separated beta values (default {DEFAULT_BETAS})")

    for name, help_text in (("train", "Train one model and write its metrics CSV."),
                            ("sweep", "Run a sweep over one config axis and write the metrics CSV.")):
        p = command(name, help_text)
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--save-model", action="store_true", help="write model artifacts next to the CSV")
        if name == "sweep":
            p.add_argument("--jobs", type=_positive_int("jobs"), default=1, help="parallel worker processes")

    p = command("reconstruct", "Write a PGM grid of VAE reconstruction means.")
    p.add_argument("--model-run", type=Path, required=True,
                   help="model artifact stem or a directory of saved sweep models")
    p.add_argument("--n-images", type=_positive_int("n-images"), default=8, help="images per row")
    p.add_argument("--capacity-bits", type=_float_list("capacity-bits"), default=None,
                   help="capacities to select from a model directory, one grid row each")
    p.add_argument("--images", type=Path, default=None,
                   help="IDX image file (default: the test images named in the model config)")
    p.add_argument("--noise-samples", type=_positive_int("noise-samples"), default=8,
                   help="parameter-noise draws averaged per reconstruction")
    return parser


# --- commands -----------------------------------------------------------------------

def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _report_line(report: CapacityReport) -> str:
    return (f"{report.per_dim_bits:.6f} bits/dim\n"
            f"{report.per_dim_nats:.6f} nats/dim\n"
            f"{report.total_bits:.6f} bits total\n")


def cmd_capacity(args) -> int:
    report = fixed_variance_capacity(ChannelSpec(args.prior_var, args.noise_var, args.dims))
    sys.stdout.write(_report_line(report))
    if args.out is not None:
        _emit(_rows_csv(("prior_var", "noise_var", "dims", "bits_per_dim", "nats_per_dim", "total_bits"),
                        [(repr(args.prior_var), repr(args.noise_var), args.dims, repr(report.per_dim_bits),
                          repr(report.per_dim_nats), repr(report.total_bits))]), args.out)
    return 0


def cmd_solve(args) -> int:
    var = solve_noise_for_capacity(args.bits, args.prior_var)
    sys.stdout.write(f"{var!r} noise variance\n")
    if args.out is not None:
        _emit(_rows_csv(("bits", "prior_var", "noise_var"),
                        [(repr(args.bits), repr(args.prior_var), repr(var))]), args.out)
    return 0


def cmd_beta_table(args) -> int:
    rows = beta_capacity_table(args.betas)
    text = _rows_csv(("beta", "bits_per_dim", "quad_err"),
                     [(repr(b), repr(r.per_dim_bits), repr(r.quadrature_err)) for b, r in rows])
    _emit(text, args.out)
    if args.out is not None:
        for b, r in rows:
            sys.stdout.write(f"beta={b:g} {r.per_dim_bits:.6f} bits/dim\n")
    return 0


def _config_from_args(args):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return artifacts.load_config(args.config, overrides)


def _check_inputs(cfg):
    if cfg.dataset != "idx":
        return
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        path = getattr(cfg, key)
        if path is not None and not Path(path).is_file():
            raise ConfigError(key, f"no such file: {path}")


def _write_run_outputs(args, cfg, records):
    text = artifacts.records_to_csv(records, cfg.digest())
    _emit(text, args.out)
    if args.out is None:
        return
    sidecar = args.out.with_name(args.out.name + ".config")
    sidecar.write_text(cfg.to_text())
    if args.save_model or cfg.save_models:
        model_dir = args.out.with_name(args.out.name + ".models")
        for rec in records:
            if rec.model is not None:
                artifacts.save_model(rec.model, model_dir / rec.run_id, rec)


def _summarize(records):
    for rec in records:
        last = {k: rec.final(k) for k in ("train_ll", "test_ll", "test_elbo_noisy")}
        log.info("%s value=%s repeat=%d status=%s test_ll=%.6g test_elbo=%.6g time=%.1fs",
                 rec.run_id, rec.axis_value, rec.repeat, rec.status, last["test_ll"],
                 last["test_elbo_noisy"], rec.wall_time)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _check_inputs(cfg)
    keep = args.save_model or cfg.save_models
    record = run_experiment(cfg, keep_model=keep and args.out is not None)
    _summarize([record])
    _write_run_outputs(args, cfg, [record])
    return 0 if record.status == "ok" else 1


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    _check_inputs(cfg)
    spec = SweepSpec.from_config(cfg)
    keep = (args.save_model or cfg.save_models) and args.out is not None
    records = run_sweep(spec, jobs=args.jobs, keep_models=keep)
    _summarize(records)
    _write_run_outputs(args, cfg, records)
    return 0 if all(r.status == "ok" for r in records) else 1


def _select_models(model_run: Path, capacities):
    """Model stems in the requested capacity order."""
    if model_run.is_dir():
        if capacities is None:
            raise UsageError("reconstruct: --capacity-bits is required with a model directory")
        found = []
        for manifest in sorted(model_run.glob("*.manifest")):
            entries = artifacts.read_manifest(manifest)
            found.append((float(entries["spec.capacity_bits"]), int(entries.get("run.repeat", 0)),
                          manifest.name, manifest.with_suffix("")))
        stems = []
        for c in capacities:
            matches = sorted(m for m in found if math.isclose(m[0], c, rel_tol=1e-12))
            if not matches:
                raise artifacts.ArtifactError(f"no saved model with capacity {c:g} bits in {model_run}")
            stems.append(matches[0][3])
        return stems
    stem = model_run.with_suffix("") if model_run.suffix in (".bin", ".manifest") else model_run
    if not stem.with_name(stem.name + ".manifest").is_file():
        raise artifacts.ArtifactError(f"missing model artifact: {model_run}")
    return [stem]


def cmd_reconstruct(args) -> int:
    stems = _select_models(args.model_run, args.capacity_bits)
    loaded = [artifacts.load_model(s) for s in stems]
    models = [m for m, _ in loaded]
    for m in models:
        if m.spec.kind != "vae":
            raise UsageError("reconstruct: model artifact is not a VAE")
    cfg = artifacts.manifest_config(loaded[0][1])
    images_path = args.images or (Path(cfg.test_images) if cfg and cfg.test_images else None)
    if images_path is None:
        raise UsageError("reconstruct: --images is required when the model carries no test image path")
    if not Path(images_path).is_file():
        raise UsageError(f"reconstruct: --images: no such file: {images_path}")
    data = load_idx_dataset(images_path)
    if len(data) < args.n_images:
        raise UsageError(f"reconstruct: --n-images {args.n_images} exceeds the {len(data)} available images")
    data = take_first(data, args.n_images)
    if cfg is None or cfg.resolved_binarize:
        data = binarize(data, cfg.threshold if cfg else 0.5)
    side = int(round(math.sqrt(data.n_features)))
    if side * side != data.n_features:
        raise UsageError(f"reconstruct: images are not square ({data.n_features} pixels)")
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    gray = artifacts.grid_from_models(models, data.images, Rng(seed), args.noise_samples, side)
    out = args.out or Path("reconstructions.pgm")
    artifacts.write_pgm(out, gray)
    sys.stdout.write(f"wrote {out} ({gray.shape[1]}x{gray.shape[0]})\n")
    return 0


COMMANDS = {
    "capacity": cmd_capacity,
    "solve": cmd_solve,
    "beta-table": cmd_beta_table,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (ValueError, OverflowError, IDXError, OSError, artifacts.ArtifactError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
