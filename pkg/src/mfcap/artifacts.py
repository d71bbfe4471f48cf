"""On-disk formats: flat config text, run CSVs, model binaries, PGM grids.

Run CSV layout: one ``# config_digest=<hex>`` comment line, a header row,
then one row per recorded epoch per run. Floats are written with
``repr`` so they parse back exactly; a blank cell means "not applicable".

Model artifacts are a pair: ``<stem>.bin`` holds every tensor as
little-endian float64 in manifest order, and ``<stem>.manifest`` is
key = value text carrying the model spec, run metadata, the config text
and one ``tensor.<name>`` line per array giving its shape.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .experiments import METRIC_KEYS, ConfigError, ExperimentConfig, RunRecord
from .models import Model, ModelSpec, build_model, reconstruct_means
from .special_math import Rng

CSV_COLUMNS = (
    "run_id", "axis_value", "repeat", "seed", "epoch",
    *METRIC_KEYS,
    "capacity_bits_per_param", "capacity_bits_total",
    "status",
)
_FLOAT_COLUMNS = set(METRIC_KEYS) | {"axis_value", "capacity_bits_per_param", "capacity_bits_total"}
_INT_COLUMNS = {"repeat", "seed", "epoch"}


class ArtifactError(ValueError):
    pass


# --- flat key = value text ------------------------------------------------------

def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment at line start or after whitespace."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw
        for i, ch in enumerate(raw):
            if ch == "#" and (i == 0 or raw[i - 1].isspace()):
                line = raw[:i]
                break
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}", "empty key")
        if key in out:
            raise ConfigError(key, f"duplicate key at {source}:{lineno}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    mapping: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"no such file: {p}")
        mapping.update(parse_key_values(p.read_text(), str(p)))
    mapping.update(overrides or {})
    return ExperimentConfig.from_mapping(mapping)


# --- run CSV ----------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def records_to_csv(records: list[RunRecord], config_digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_digest={config_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        fixed = {
            "run_id": rec.run_id,
            "axis_value": rec.axis_value,
            "repeat": rec.repeat,
            "seed": rec.seed,
            "capacity_bits_per_param": float(rec.capacity_bits_per_param),
            "capacity_bits_total": float(rec.capacity_bits_total),
            "status": rec.status,
        }
        for epoch, metrics in rec.rows():
            row = {**fixed, "epoch": epoch, **metrics}
            writer.writerow([_cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_records_csv(path, records: list[RunRecord], config_digest: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records, config_digest))
    return path


def csv_body(text: str) -> str:
    """Everything after the digest comment line."""
    return text.split("\n", 1)[1] if text.startswith("#") else text


def read_records_csv(source) -> tuple[str, list[dict]]:
    """Parse a run CSV (path or text) into ``(config_digest, rows)`` with typed cells."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    first, _, rest = text.partition("\n")
    if not first.startswith("# config_digest="):
        raise ArtifactError("missing '# config_digest=' header line")
    digest = first.split("=", 1)[1].strip()
    reader = csv.reader(io.StringIO(rest))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ArtifactError(f"unexpected columns {header}")
    rows = []
    for cells in reader:
        if len(cells) != len(CSV_COLUMNS):
            raise ArtifactError(f"row has {len(cells)} cells, expected {len(CSV_COLUMNS)}")
        row = {}
        for col, cell in zip(CSV_COLUMNS, cells):
            if col in _FLOAT_COLUMNS:
                row[col] = None if cell == "" else float(cell)
            elif col in _INT_COLUMNS:
                row[col] = int(cell)
            else:
                row[col] = cell
        rows.append(row)
    return digest, rows


# --- model artifacts ----------------------------------------------------------------

def _tensor_entries(model: Model):
    for p in model.params:
        yield f"{p.name}.mean", p.mean
        if p.learned:
            yield f"{p.name}.log_variance", p.noise.log_variance


def _manifest_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def save_model(model: Model, stem, record: RunRecord | None = None,
               config: ExperimentConfig | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` and ``<stem>.manifest``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lines = ["format = f64le"]
    for f in fields(ModelSpec):
        lines.append(f"spec.{f.name} = {_manifest_value(getattr(model.spec, f.name))}")
    if record is not None:
        lines += [
            f"run.run_id = {record.run_id}",
            f"run.seed = {record.seed}",
            f"run.axis_value = {_manifest_value(record.axis_value)}",
            f"run.repeat = {record.repeat}",
            f"run.config_digest = {record.config_digest}",
        ]
        config = config or record.config
    if config is not None:
        lines += [f"config.{line}" for line in config.to_text().splitlines()]
    chunks = []
    for name, t in _tensor_entries(model):
        lines.append(f"tensor.{name} = {','.join(str(d) for d in t.shape)}")
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    bin_path = stem.with_name(stem.name + ".bin")
    manifest_path = stem.with_name(stem.name + ".manifest")
    bin_path.write_bytes(b"".join(chunks))
    manifest_path.write_text("\n".join(lines) + "\n")
    return bin_path, manifest_path


def _spec_from_manifest(entries: dict[str, str]) -> ModelSpec:
    kwargs = {}
    for f in fields(ModelSpec):
        raw = entries.get(f"spec.{f.name}")
        if raw is None:
            raise ArtifactError(f"manifest lacks spec.{f.name}")
        if f.name == "layer_widths":
            kwargs[f.name] = tuple(int(v) for v in raw.split(","))
        elif f.name == "latent_dim":
            kwargs[f.name] = int(raw)
        elif f.name in ("kind", "likelihood", "noise_mode", "prior"):
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = None if raw == "none" else float(raw)
    return ModelSpec(**kwargs)


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"missing model manifest: {path}")
    return parse_key_values(path.read_text(), str(path))


def manifest_config(entries: dict[str, str]) -> ExperimentConfig | None:
    mapping = {k[len("config."):]: v for k, v in entries.items() if k.startswith("config.")}
    return ExperimentConfig.from_mapping(mapping) if mapping else None


def load_model(stem) -> tuple[Model, dict[str, str]]:
    """Rebuild a model from ``<stem>.manifest`` and ``<stem>.bin``."""
    stem = Path(stem)
    if stem.suffix in (".bin", ".manifest"):
        stem = stem.with_suffix("")
    entries = read_manifest(stem.with_name(stem.name + ".manifest"))
    if entries.get("format") != "f64le":
        raise ArtifactError(f"unsupported model format {entries.get('format')!r}")
    bin_path = stem.with_name(stem.name + ".bin")
    if not bin_path.is_file():
        raise ArtifactError(f"missing model binary: {bin_path}")
    model = build_model(_spec_from_manifest(entries), Rng(0))
    blob = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    offset = 0
    for name, t in _tensor_entries(model):
        declared = entries.get(f"tensor.{name}")
        shape = tuple(int(d) for d in declared.split(",")) if declared else None
        if shape != t.shape:
            raise ArtifactError(f"tensor {name}: manifest shape {shape} != model shape {t.shape}")
        size = t.size
        if offset + size > len(blob):
            raise ArtifactError(f"model binary truncated at tensor {name}")
        t.data = blob[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != len(blob):
        raise ArtifactError(f"{len(blob) - offset} trailing values in model binary")
    return model, entries


# --- PGM image grids -----------------------------------------------------------------

def to_gray(means) -> np.ndarray:
    """Map intensities in [0, 1] to bytes, ``round(255 * mean)``."""
    return np.rint(np.clip(np.asarray(means, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def image_grid(rows: list[np.ndarray], side: int = 28) -> np.ndarray:
    """Tile ``rows`` (each ``[n, side*side]`` intensities) into a uint8 image."""
    if not rows:
        raise ValueError("no rows to tile")
    n = rows[0].shape[0]
    if n < 1:
        raise ValueError("need at least one image per row")
    out = np.zeros((len(rows) * side, n * side), dtype=np.uint8)
    for r, images in enumerate(rows):
        if images.shape != (n, side * side):
            raise ValueError(f"row {r} has shape {images.shape}, expected {(n, side * side)}")
        tiles = to_gray(images).reshape(n, side, side)
        out[r * side:(r + 1) * side] = np.hstack(list(tiles))
    return out


def pgm_bytes(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def write_pgm(path, gray: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pgm_bytes(gray))
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ArtifactError("not a binary PGM with maxval 255")
    w, h = int(parts[1]), int(parts[2])
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def grid_from_models(models: list[Model], images: np.ndarray, rng: Rng, n_noise_samples: int = 8,
                     side: int = 28) -> np.ndarray:
    """Originals in the top row, then one row of reconstruction means per model."""
    rows = [images]
    with ad.no_grad():
        for model in models:
            rows.append(reconstruct_means(model, images, rng.split(), n_noise_samples))
    return image_grid(rows, side)
