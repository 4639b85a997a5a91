import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import structlog

from ..config import settings
from ..errors import CheckpointError, DataFormatError
from ..models.network import Model, build
from ..schemas.network import NetworkConfig
from ..schemas.train import TrainingReport
from .optim import AdamState

log = structlog.get_logger(__name__)

CHECKPOINT_VERSION = 1
REPORT_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds")

PathLike = Union[str, Path]


class StorageService:
    """Run artifacts (checkpoints, reports) under a local output directory."""

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root or settings.OUTPUT_DIR)
        self.root.mkdir(parents=True, exist_ok=True)

    def run_dir(self, name: Optional[str] = None) -> Path:
        """`root/name`, or the root itself for an unnamed run."""
        path = self.root / name if name else self.root
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_run(self, directory: PathLike, report: TrainingReport) -> tuple[Path, Path]:
        directory = Path(directory)
        csv_path = directory / "report.csv"
        json_path = directory / "summary.json"
        write_report_csv(report, csv_path)
        json_path.write_text(report.model_dump_json(indent=2))
        log.info("run saved", directory=str(directory), epochs=len(report.epochs))
        return csv_path, json_path


# Checkpoints


def save_checkpoint(path: PathLike, model: Model, optimizer: Optional[AdamState] = None) -> Path:
    """Write an .npz container: format_version (uint8), config (JSON), one
    array per parameter and buffer, and the optional Adam moments."""
    path = Path(path)
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION, dtype=np.uint8),
        "config": np.array(model.config.model_dump_json()),
    }
    arrays.update({f"param/{k}": v for k, v in model.parameters().items()})
    arrays.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    if optimizer is not None:
        arrays["adam/step"] = np.array(optimizer.step, dtype=np.int64)
        arrays.update({f"adam/m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam/v/{k}": v for k, v in optimizer.v.items()})
    # np.savez appends .npz to names without it
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def _restore(target: dict[str, np.ndarray], stored: dict[str, np.ndarray], kind: str) -> None:
    missing = set(target) - set(stored)
    unexpected = set(stored) - set(target)
    if missing or unexpected:
        raise CheckpointError(
            f"{kind} mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )
    for name, value in stored.items():
        if value.shape != target[name].shape:
            raise CheckpointError(
                f"{kind} {name}: checkpoint shape {value.shape}, model shape {target[name].shape}"
            )
        target[name][...] = value


def load_checkpoint(
    path: PathLike, config: Optional[NetworkConfig] = None
) -> tuple[Model, Optional[AdamState]]:
    """Rebuild the model stored at `path`.

    With `config` given, the stored tensors are loaded into a model built from
    that configuration instead; any shape or name mismatch is an error.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path}: not a checkpoint ({e})") from e
    with data:
        if "format_version" not in data.files:
            raise CheckpointError(f"{path}: missing format_version")
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        stored_config = NetworkConfig.model_validate_json(str(data["config"]))
        model = build(config or stored_config)
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        buffers = {k[len("buffer/"):]: data[k] for k in data.files if k.startswith("buffer/")}
        _restore(model.parameters(), params, "parameter")
        _restore(model.buffers(), buffers, "buffer")

        optimizer = None
        if "adam/step" in data.files:
            optimizer = AdamState(step=int(data["adam/step"]))
            optimizer.m = {k[len("adam/m/"):]: data[k].copy() for k in data.files if k.startswith("adam/m/")}
            optimizer.v = {k[len("adam/v/"):]: data[k].copy() for k in data.files if k.startswith("adam/v/")}
    log.debug("checkpoint loaded", path=str(path), version=version)
    return model.eval(), optimizer


# Reports


def write_report_csv(report: TrainingReport, path: PathLike) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in report.epochs:
            writer.writerow({k: repr(getattr(row, k)) for k in REPORT_COLUMNS})


# Plain matrices


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_matrix(path: PathLike) -> np.ndarray:
    """Read a 2-D matrix: comma- or whitespace-separated rows, optional header."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataFormatError(f"{path}: empty matrix file")
    delimiter = "," if "," in lines[0] else None
    split = lambda ln: [t.strip() for t in ln.split(delimiter)]
    if not all(_is_number(t) for t in split(lines[0])):
        lines = lines[1:]
    rows = []
    for lineno, line in enumerate(lines, start=1):
        tokens = split(line)
        if not all(_is_number(t) for t in tokens):
            raise DataFormatError(f"{path}: non-numeric value in data row {lineno}")
        rows.append([float(t) for t in tokens])
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataFormatError(f"{path}: rows have differing lengths or no data")
    return np.array(rows, dtype=np.float64)


def write_matrix(path: PathLike, matrix: np.ndarray, header: Optional[Iterable[str]] = None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w") as f:
        if header is not None:
            f.write(",".join(header) + "\n")
        for row in matrix:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def write_json(path: PathLike, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
