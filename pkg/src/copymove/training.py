"""Training protocol, checkpoints, model selection and the ablation/sweep drivers."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import evaluation
from .network import NORM_MEAN, NORM_STD, DualBranchNet, NetworkConfig, normalize_images, parameter_schema
from .objective import CSV_HEADER, LossBreakdown, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "cmfd-checkpoint/1"


class ScheduleError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigFileError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lr0: float = 0.001
    weight_decay: float = 0.0005
    power: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    gamma: float = 1000.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # network
    input_size: int = 256
    embed_channels: int = 256
    encoder_depth: int = 1
    use_transformer: bool = True
    num_heads: int = 8
    window: int = 4
    decoder_channels: tuple[int, ...] = (128, 64, 32, 16)
    mlp_ratio: int = 4
    eval_batch_size: int = 8

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if not self.lr0 > 0:
            raise ConfigFileError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigFileError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigFileError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gamma < 0:
            raise ConfigFileError(f"gamma must be >= 0, got {self.gamma}")
        self.network_config()  # validates the architecture fields

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_size=self.input_size,
            embed_channels=self.embed_channels,
            encoder_depth=self.encoder_depth,
            num_heads=self.num_heads,
            window=self.window,
            decoder_channels=self.decoder_channels,
            use_transformer=self.use_transformer,
            mlp_ratio=self.mlp_ratio,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())


REQUIRED_KEYS = ("seed",)
_DEFAULTS = TrainConfig()


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key: str, raw: str):
    if key not in {f.name for f in dataclasses.fields(TrainConfig)}:
        raise ConfigFileError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigFileError(f"bad value for {key}: {raw!r}") from None
    raise ConfigFileError(f"unsupported config key {key!r}")


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in values:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def load_train_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the config file, then explicit overrides."""
    values = parse_config_text(Path(path).read_text()) if path is not None else {}
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigFileError(f"missing config key: {key}")
    return TrainConfig(**values)


# ------------------------------------------------------------------ schedule


def poly_lr(iteration: int, maxiter: int, lr0: float = 0.001, power: float = 0.9) -> float:
    if maxiter < 1:
        raise ScheduleError(f"maxiter must be >= 1, got {maxiter}")
    if not 0 <= iteration <= maxiter:
        raise ScheduleError(f"iteration {iteration} outside [0, {maxiter}]")
    return lr0 * (1.0 - iteration / maxiter) ** power


# ------------------------------------------------------------------ optimisation


def make_model(config: TrainConfig) -> DualBranchNet:
    torch.manual_seed(config.seed)
    return DualBranchNet(config.network_config())


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    # torch's Adam adds weight_decay * param to the gradient, so the decay is scaled by the current lr
    return torch.optim.Adam(
        model.parameters(),
        lr=config.lr0,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def train_step(
    model: DualBranchNet,
    optimizer: torch.optim.Optimizer,
    images: np.ndarray,
    tri_masks: np.ndarray,
    gamma: float,
    lr: float,
    iteration: int = 0,
) -> LossBreakdown:
    """One Adam update on a batch of uint8 images and tri-class masks."""
    model.train()
    dtype = next(model.parameters()).dtype
    x = normalize_images(images).to(dtype)
    y_d = torch.as_tensor(np.asarray(tri_masks), dtype=torch.long)
    y_f = (y_d != 0).long()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    det, dist = model(x)
    loss, parts = total_loss(det, dist, y_f, y_d, gamma)
    if not math.isfinite(parts.total):
        raise NonFiniteLossError(
            f"non-finite loss at iter {iteration}: lr={lr:.3e} ce_f={parts.ce_f} ce_d={parts.ce_d} "
            f"mse={parts.mse} gamma={gamma}"
        )
    loss.backward()
    optimizer.step()
    return parts


# ------------------------------------------------------------------ checkpoints


@dataclass
class CheckpointRecord:
    state_dict: dict
    network_config: NetworkConfig
    epoch: int
    selection_score: float
    train_config: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    normalization: tuple[float, float] = (NORM_MEAN, NORM_STD)

    def build_model(self) -> DualBranchNet:
        model = DualBranchNet(self.network_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "network_config": self.network_config.to_dict(),
            "normalization": {"mean": self.normalization[0], "std": self.normalization[1]},
            "epoch": self.epoch,
            "selection_score": self.selection_score,
            "train_config": self.train_config,
            "history": list(self.history),
            "schema": {k: list(v.shape) for k, v in self.state_dict.items()},
        }
        torch.save({"header": header, "tensors": self.state_dict}, path)

    @classmethod
    def load(cls, path: str | Path, expected: NetworkConfig | None = None) -> "CheckpointRecord":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
            header, tensors = blob["header"], blob["tensors"]
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {header.get('format_version')!r} != {CHECKPOINT_VERSION!r}")
        cfg = header["network_config"]
        config = NetworkConfig(**{**cfg, "decoder_channels": tuple(cfg["decoder_channels"])})
        if expected is not None and expected != config:
            raise CheckpointError(f"checkpoint network config {config} does not match expected {expected}")
        expected_schema = parameter_schema(config)
        actual = {k: tuple(v.shape) for k, v in tensors.items()}
        declared = {k: tuple(v) for k, v in header["schema"].items()}
        if actual != expected_schema or declared != expected_schema:
            missing = sorted(set(expected_schema) - set(actual))
            extra = sorted(set(actual) - set(expected_schema))
            shape = sorted(k for k in set(actual) & set(expected_schema) if actual[k] != expected_schema[k])
            raise CheckpointError(
                f"checkpoint schema mismatch in {path}: missing={missing[:5]} extra={extra[:5]} shape={shape[:5]}"
            )
        norm = header["normalization"]
        if (norm["mean"], norm["std"]) != (NORM_MEAN, NORM_STD):
            raise CheckpointError(f"checkpoint normalisation {norm} differs from ({NORM_MEAN}, {NORM_STD})")
        return cls(
            state_dict=tensors,
            network_config=config,
            epoch=header["epoch"],
            selection_score=header["selection_score"],
            train_config=header.get("train_config", {}),
            history=list(header.get("history", [])),
            normalization=(norm["mean"], norm["std"]),
        )


# ------------------------------------------------------------------ fitting


def selection_score(model, dataset, batch_size: int = 8) -> float:
    return evaluation.selection_score_from(evaluation.evaluate_images(model, dataset, batch_size))


@dataclass
class FitResult:
    checkpoint: CheckpointRecord
    history: list[float]
    losses: list[LossBreakdown]
    model: DualBranchNet  # final-iteration weights, not the selected ones


def fit(
    train_set,
    val_set,
    config: TrainConfig,
    log_path: str | Path | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> FitResult:
    """Train for ``config.epochs`` epochs, validating after each one.

    The returned checkpoint holds the weights of the epoch with the highest
    selection score (earliest epoch on ties).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    images, tris = train_set.load_arrays()
    n = len(images)
    steps = math.ceil(n / config.batch_size)
    maxiter = config.epochs * steps

    model = make_model(config)
    optimizer = make_optimizer(model, config)

    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(CSV_HEADER)

    history: list[float] = []
    losses: list[LossBreakdown] = []
    best_score, best_epoch, best_state = -math.inf, 0, None
    it = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            for s in range(steps):
                idx = np.sort(order[s * config.batch_size : (s + 1) * config.batch_size])
                lr = poly_lr(it, maxiter, config.lr0, config.power)
                parts = train_step(model, optimizer, images[idx], tris[idx], config.gamma, lr, it)
                losses.append(parts)
                if writer is not None:
                    writer.writerow(parts.csv_row(it, lr))
                it += 1
            score = selection_score(model, val_set, config.eval_batch_size)
            history.append(score)
            log.info("epoch %d/%d loss %.4f val score %.4f", epoch, config.epochs, losses[-1].total, score)
            if on_epoch is not None:
                on_epoch(epoch, score)
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_file is not None:
            log_file.close()

    record = CheckpointRecord(
        state_dict=best_state,
        network_config=config.network_config(),
        epoch=best_epoch,
        selection_score=best_score,
        train_config=config.to_dict(),
        history=history,
    )
    return FitResult(record, history, losses, model)


# ------------------------------------------------------------------ ablation and sweeps

ABLATION_ARMS = ((False, False), (True, False), (False, True), (True, True))  # (mse_loss, transformer)
SWEEP_AXES = {"gamma": "gamma", "depth": "encoder_depth"}
DEFAULT_GAMMAS = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
DEFAULT_DEPTHS = (1, 2, 3, 4)


def _run_arm(train_set, val_set, test_set, config: TrainConfig) -> dict:
    result = fit(train_set, val_set, config)
    model = result.checkpoint.build_model()
    metrics = evaluation.evaluate_images(model, test_set, config.eval_batch_size)
    row = evaluation.table_row(metrics)
    row["selection_score"] = result.checkpoint.selection_score
    row["epoch"] = result.checkpoint.epoch
    return row


def run_ablation(train_set, val_set, test_set, base_config: TrainConfig) -> list[dict]:
    """Four arms of {with/without consistency loss} x {with/without transformer}."""
    rows = []
    for mse_on, tx_on in ABLATION_ARMS:
        cfg = base_config.replace(gamma=base_config.gamma if mse_on else 0.0, use_transformer=tx_on)
        log.info("ablation arm mse=%s transformer=%s", mse_on, tx_on)
        rows.append({"mse_loss": mse_on, "transformer": tx_on, **_run_arm(train_set, val_set, test_set, cfg)})
    return rows


def run_sweep(axis: str, values: Sequence, train_set, val_set, test_set, base_config: TrainConfig) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for v in values:
        v = float(v) if axis == "gamma" else int(v)
        cfg = base_config.replace(**{SWEEP_AXES[axis]: v})
        log.info("sweep %s=%s", axis, v)
        rows.append({axis: v, **_run_arm(train_set, val_set, test_set, cfg)})
    return rows


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def write_table_csv(rows: Sequence[dict], path: str | Path) -> None:
    header = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r[k]) for k in header])


def read_table_csv(path: str | Path) -> list[dict]:
    def conv(v: str):
        if v in ("true", "false"):
            return v == "true"
        try:
            return int(v)
        except ValueError:
            return float(v)

    with open(path, newline="") as f:
        return [{k: conv(v) for k, v in r.items()} for r in csv.DictReader(f)]
