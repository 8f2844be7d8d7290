"""Training loop, Adam, evaluation and checkpoint serialization."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .backbone import ModelConfig, forward_full, init_params
from .data import ConfigError, Dataset
from .descriptor import ground_truth_descriptor
from .geometry import PointCloud
from .losses import (DESCRIPTOR_VARIANTS, STRATEGIES, cls_loss, descriptor_loss, lambda3_schedule,
                     region_similarity_loss, select_distinguishing, total_loss)
from .metrics import confusion_matrix, descriptor_f1, iou_report, noise_score

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sceneenc-ckpt/1"
_MAGIC = b"SCENEENC-CKPT\n"


class NumericalAbort(RuntimeError):
    def __init__(self, batch: int, term: str, epoch: int):
        super().__init__(f"non-finite {term} loss at epoch {epoch}, batch {batch}")
        self.batch = batch
        self.term = term
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_base: float = 1.0
    warm_frac: float = 0.3
    M: int = 32
    k: int = 8
    eps_cos: float = 1e-8
    descriptor_variant: str = "full_bce"
    eq3_exact: bool = False
    freeze_centers: bool = False
    strategy: str = "top_confidence"
    seed: int = 0
    scene_encoder: bool = True
    rsl: bool = True
    noise_k: int = 8
    threshold: float = 0.5
    encoder_widths: tuple[int, ...] = (32, 64, 128)
    head_widths: tuple[int, ...] = (128, 64)
    descriptor_widths: tuple[int, ...] = (64, 64)

    def validate(self):
        positive_ints = ("epochs", "batch_size", "M", "k", "noise_k")
        for name in positive_ints:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"train.{name}", f"must be a positive integer, got {value!r}")
        if self.lr <= 0:
            raise ConfigError("train.lr", "must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"train.{name}", "must lie in [0, 1)")
        for name in ("adam_eps", "eps_cos"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}", "must be positive")
        for name in ("lambda1", "lambda2", "lambda_base"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name}", "must be non-negative")
        if not 0 < self.warm_frac <= 1:
            raise ConfigError("train.warm_frac", "must lie in (0, 1]")
        if self.descriptor_variant not in DESCRIPTOR_VARIANTS:
            raise ConfigError("train.descriptor_variant", f"must be one of {DESCRIPTOR_VARIANTS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError("train.strategy", f"must be one of {STRATEGIES}")
        if not 0 < self.threshold < 1:
            raise ConfigError("train.threshold", "must lie in (0, 1)")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("train.seed", "must be a non-negative integer")
        return self

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(n_classes, self.encoder_widths, self.head_widths, self.descriptor_widths)

    @classmethod
    def from_dict(cls, raw: dict, section: str = "train") -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{section}.{unknown[0]}", "unknown field")
        values = dict(raw)
        for name in ("encoder_widths", "head_widths", "descriptor_widths"):
            if name in values:
                values[name] = tuple(values[name])
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(section, str(exc)) from None
        return cfg.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("encoder_widths", "head_widths", "descriptor_widths"):
            d[name] = list(d[name])
        return d


# -- optimizer -------------------------------------------------------------------

def adam_step(params, grads, moments, step, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. ``step`` counts from 1.

    ``moments`` is a pair of dicts (first, second) keyed like ``params``.
    Returns new (params, moments); inputs are left untouched.
    """
    m_old, v_old = moments
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        m = beta1 * m_old[name] + (1.0 - beta1) * g
        v = beta2 * v_old[name] + (1.0 - beta2) * g * g
        new_params[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name] = m
        v_new[name] = v
    return new_params, (m_new, v_new)


def zeros_like(params):
    return {name: np.zeros_like(v) for name, v in params.items()}


# -- checkpoint ------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    config: TrainConfig
    n_classes: int
    class_names: tuple[str, ...] = ()
    history: list[dict] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None

    def groups(self):
        out = [("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)]
        if self.best_params is not None:
            out.append(("best", self.best_params))
        return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """JSON header followed by little-endian float64 payloads.

    Layout: magic line, uint64 header length, header bytes, payload. The
    header lists each array's name, shape, byte offset and element count.
    """
    arrays, payload, offset = [], [], 0
    for prefix, group in ckpt.groups():
        for name, value in group.items():
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            arrays.append({"name": f"{prefix}/{name}", "shape": list(value.shape),
                           "offset": offset, "length": int(value.size)})
            payload.append(data)
            offset += len(data)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "n_classes": ckpt.n_classes,
        "class_names": list(ckpt.class_names),
        "step": ckpt.step,
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "arrays": arrays,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for data in payload:
            fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    base = pos + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        flat = np.frombuffer(raw, dtype="<f8", count=entry["length"], offset=start)
        prefix, name = entry["name"].split("/", 1)
        groups.setdefault(prefix, {})[name] = flat.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(groups["param"], groups["adam_m"], groups["adam_v"], header["step"],
                      TrainConfig.from_dict(header["config"]), header["n_classes"],
                      tuple(header.get("class_names", ())), header["history"],
                      groups.get("best"), header.get("best_epoch"))


# -- evaluation ------------------------------------------------------------------

def predict(cloud: PointCloud, params, config: TrainConfig):
    """Labels and predicted descriptor for one cloud. Ground truth is never used."""
    out = forward_full(cloud, params, scene_encoder=config.scene_encoder)
    pred = out.refined.value.argmax(axis=1)
    desc = None if out.descriptor is None else out.descriptor.value.reshape(-1)
    return pred, desc


def evaluate_params(params, config: TrainConfig, clouds: list[PointCloud], n_classes: int,
                    confusable: tuple[int, int] | None = (6, 7)) -> dict:
    if not clouds:
        raise ValueError("cannot evaluate an empty split")
    total = np.zeros((n_classes, n_classes), dtype=np.int64)
    per_cat: dict[str, np.ndarray] = {}
    descs, truths, noise = [], [], []
    for cloud in clouds:
        cloud.validate(n_classes)
        pred, desc = predict(cloud, params, config)
        conf = confusion_matrix(cloud.labels, pred, n_classes)
        total += conf
        key = cloud.scene_type or ""
        per_cat[key] = per_cat.get(key, 0) + conf
        noise.append(noise_score(cloud.coords, pred, config.noise_k))
        if desc is not None:
            descs.append(desc)
            truths.append(ground_truth_descriptor(cloud.labels, n_classes))
    report = iou_report(total, [per_cat[k] for k in sorted(per_cat)])
    row = {
        "miou": report.miou,
        "mciou": report.mciou,
        "iou": [None if np.isnan(v) else float(v) for v in report.iou],
        "noise": float(np.mean(noise)),
        "descriptor_f1": None,
        "scene_encoder": "active" if config.scene_encoder else "bypassed",
    }
    if descs:
        row["descriptor_f1"] = descriptor_f1(np.array(descs), np.array(truths), config.threshold).micro_f1
    if confusable is not None and max(confusable) < n_classes:
        a, b = confusable
        mass = total[a].sum() + total[b].sum()
        row["confusable_rate"] = float((total[a, b] + total[b, a]) / mass) if mass else 0.0
    return row


def evaluate(checkpoint: Checkpoint, dataset: Dataset, split: str = "val", which: str = "final") -> dict:
    if checkpoint.n_classes != dataset.n_classes:
        raise ValueError(
            f"checkpoint has {checkpoint.n_classes} classes but dataset has {dataset.n_classes}")
    params = checkpoint.params if which == "final" else checkpoint.best_params
    if params is None:
        raise ValueError(f"checkpoint holds no {which!r} parameters")
    return evaluate_params(params, checkpoint.config, dataset.split(split), dataset.n_classes)


# -- training --------------------------------------------------------------------

def _finite(term, value, batch, epoch):
    if not np.isfinite(value):
        raise NumericalAbort(batch, term, epoch)


def cloud_losses(cloud: PointCloud, params, config: TrainConfig, n_classes: int, lam3: float, rng):
    """Forward one cloud; returns (graph, total Var, per-term floats)."""
    out = forward_full(cloud, params, scene_encoder=config.scene_encoder)
    terms = {"cls": cls_loss(out.refined, cloud.labels), "des": None, "rs": None}
    if config.scene_encoder:
        truth = ground_truth_descriptor(cloud.labels, n_classes)
        terms["des"] = descriptor_loss(out.descriptor, truth, config.descriptor_variant)
    if config.rsl:
        selected = select_distinguishing(out.refined.value, cloud.labels, config.M, config.strategy, rng)
        terms["rs"] = region_similarity_loss(out.point_features, cloud, selected, config.k, config.eps_cos,
                                             exact=config.eq3_exact, freeze_centers=config.freeze_centers)
    lam2 = config.lambda2 if config.scene_encoder else 0.0
    lam3 = lam3 if config.rsl else 0.0
    total = total_loss(terms["cls"], terms["des"], terms["rs"], config.lambda1, lam2, lam3)
    values = {k: (None if v is None else float(v.value)) for k, v in terms.items()}
    return out.graph, total, values


def train(config: TrainConfig, dataset: Dataset, progress=None) -> Checkpoint:
    config.validate()
    train_set = dataset.split("train")
    val_set = dataset.split("val") if dataset.splits.get("val") else []
    if not train_set:
        raise ValueError("dataset has no training scenes")
    n = dataset.n_classes
    params = init_params(config.model_config(n), np.random.default_rng(np.random.SeedSequence([config.seed, 0])))
    moments = (zeros_like(params), zeros_like(params))
    step = 0
    history: list[dict] = []
    best, best_epoch, best_score = None, None, -np.inf

    for epoch in range(config.epochs):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, 1, epoch])).permutation(len(train_set))
        lam3 = lambda3_schedule(epoch, config.epochs, config.lambda_base, config.warm_frac)
        sums = {"cls": 0.0, "des": 0.0, "rs": 0.0, "total": 0.0}
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start:start + config.batch_size]
            acc = None
            for j, idx in enumerate(batch):
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch, b, j]))
                graph, total, values = cloud_losses(train_set[idx], params, config, n, lam3, rng)
                for term, v in values.items():
                    if v is not None:
                        _finite(term, v, b, epoch)
                        sums[term] += v
                tv = float(total.value) if isinstance(total, dc.Var) else float(total)
                _finite("total", tv, b, epoch)
                sums["total"] += tv
                grads = dc.backward(graph, total)
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] = acc[name] + grads[name]
            scale = 1.0 / len(batch)
            acc = {name: g * scale for name, g in acc.items()}
            step += 1
            params, moments = adam_step(params, acc, moments, step, config.lr, config.beta1,
                                        config.beta2, config.adam_eps)
        row = {"epoch": epoch, "lambda3": lam3 if config.rsl else 0.0}
        for term, v in sums.items():
            row[f"train_{term}"] = v / len(train_set)
        if val_set:
            metrics = evaluate_params(params, config, val_set, n)
            row.update({f"val_{k}": v for k, v in metrics.items()})
            if metrics["miou"] > best_score:
                best_score, best_epoch = metrics["miou"], epoch
                best = {k: v.copy() for k, v in params.items()}
        history.append(row)
        log.info("epoch %d total=%.4f val_miou=%s", epoch, row["train_total"], row.get("val_miou"))
        if progress is not None:
            progress(row)
    return Checkpoint(params, moments[0], moments[1], step, config, n, tuple(dataset.class_names),
                      history, best, best_epoch)
