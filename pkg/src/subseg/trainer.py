"""Training loop, run configuration files and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import ops
from .core.optim import SgdConfig, lr_schedule, sgd_step
from .core.rng import Rng, derive
from .core.tensor import Tensor, backward, no_grad
from .data import DatasetSplit, HierarchySpec, Sample, random_crop, read_dataset
from .hiermix import hierarchical_mix, tau_schedule
from .losses import ce_dice_loss, negative_learning_loss, one_hot
from .metrics import ClassReport, average_reports, evaluate
from .segnet import ModelConfig, SegNet

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    enable_hm: bool = False
    enable_nl: bool = False
    # also supervise the superclass head on mixed images (off by default)
    hm_superclass: bool = False
    sgd: SgdConfig = SgdConfig()
    batch_size: int = 8
    patch: tuple[int, int] = (32, 32)
    n_sub: int | None = None
    seed: int = 0
    eval_every: int = 250
    out_dir: str | None = None
    data_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        step = 2 ** self.model.depth
        if self.patch[0] % step or self.patch[1] % step:
            raise ConfigError(f"patch {self.patch} not divisible by 2**depth = {step}")
        if self.eval_every <= 0:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")
        if self.enable_hm and not self.model.superclass_head:
            raise ConfigError("HierarchicalMix needs superclass supervision (coarse samples)")

    @property
    def uses_coarse(self) -> bool:
        return self.model.superclass_head or self.enable_nl


# ---------------------------------------------------------------- run.cfg

_TRAIN_KEYS = {
    "pc": ("model", "enable_pc", bool), "sn": ("model", "enable_sn", bool),
    "superclass_head": ("model", "superclass_head", bool), "prior": ("model", "prior", str),
    "base_channels": ("model", "base_channels", int), "depth": ("model", "depth", int),
    "in_channels": ("model", "in_channels", int),
    "hm": (None, "enable_hm", bool), "nl": (None, "enable_nl", bool),
    "hm_superclass": (None, "hm_superclass", bool),
    "base_lr": ("sgd", "base_lr", float), "momentum": ("sgd", "momentum", float),
    "total_iters": ("sgd", "total_iters", int),
    "batch_size": (None, "batch_size", int), "patch": (None, "patch", "patch"),
    "n_sub": (None, "n_sub", "optint"), "seed": (None, "seed", int),
    "eval_every": (None, "eval_every", int), "out_dir": (None, "out_dir", "optstr"),
    "data_dir": (None, "data_dir", "optstr"),
}


def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes", "on")
        if kind == "patch":
            parts = raw.lower().replace("x", ",").split(",")
            return (int(parts[0]), int(parts[-1]))
        if kind == "optint":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "optstr":
            return None if raw.lower() in ("", "none") else raw
        return kind(raw)
    except (ValueError, IndexError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    """Replace fields by their flat ``run.cfg`` key names (e.g. ``pc``, ``total_iters``)."""
    model, sgd, top = {}, {}, {}
    for key, raw in values.items():
        if key == "k":
            model["hierarchy"] = HierarchySpec(tuple(int(v) for v in str(raw).split(",")))
            continue
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        group, name, kind = _TRAIN_KEYS[key]
        value = _parse_value(key, raw, kind) if isinstance(raw, str) else raw
        {"model": model, "sgd": sgd, None: top}[group][name] = value
    try:
        return dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, **model), sgd=dataclasses.replace(cfg.sgd, **sgd), **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_text(cfg: TrainConfig) -> str:
    m, s = cfg.model, cfg.sgd
    pairs = [
        ("k", ",".join(map(str, m.hierarchy.k))), ("pc", m.enable_pc), ("sn", m.enable_sn),
        ("hm", cfg.enable_hm), ("nl", cfg.enable_nl), ("hm_superclass", cfg.hm_superclass),
        ("superclass_head", m.superclass_head), ("prior", m.prior),
        ("base_channels", m.base_channels), ("depth", m.depth), ("in_channels", m.in_channels),
        ("base_lr", s.base_lr), ("momentum", s.momentum), ("total_iters", s.total_iters),
        ("batch_size", cfg.batch_size), ("patch", f"{cfg.patch[0]}x{cfg.patch[1]}"),
        ("n_sub", cfg.n_sub), ("seed", cfg.seed), ("eval_every", cfg.eval_every),
        ("out_dir", cfg.out_dir), ("data_dir", cfg.data_dir),
    ]
    fmt = (lambda v: str(v).lower() if isinstance(v, bool) or v is None else str(v))
    return "".join(f"{k} = {fmt(v)}\n" for k, v in pairs)


def parse_config_text(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return apply_overrides(base, values)


def load_config(path: str | os.PathLike, base: TrainConfig = TrainConfig()) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    images: np.ndarray      # (B, C, h, w), fine rows first
    y: np.ndarray           # (B, h, w)
    z: np.ndarray           # (n_fine, h, w)
    n_fine: int

    @property
    def n_coarse(self) -> int:
        return len(self.images) - self.n_fine


def _draw(pool: list[Sample], count: int, rng: Rng) -> list[Sample]:
    if count <= len(pool):
        return [pool[i] for i in rng.sample_without_replacement(len(pool), count)]
    return [pool[rng.integers(len(pool))] for _ in range(count)]


def build_batch(split: DatasetSplit, cfg: TrainConfig, rng: Rng) -> Batch:
    """Half fine, half coarse, each randomly cropped; all fine when there is no coarse data to use."""
    if not split.fine:
        raise ValueError("build_batch: the fine (subclass-labelled) set is empty")
    use_coarse = cfg.uses_coarse and bool(split.coarse)
    n_fine = cfg.batch_size // 2 if use_coarse else cfg.batch_size
    chosen = _draw(split.fine, n_fine, rng)
    if use_coarse:
        chosen += _draw(split.coarse, cfg.batch_size - n_fine, rng)
    crops = [random_crop(s, cfg.patch, rng) for s in chosen]
    return Batch(
        images=np.stack([c.image for c in crops]),
        y=np.stack([c.y for c in crops]),
        z=np.stack([c.z for c in crops[:n_fine]]),
        n_fine=n_fine,
    )


# ---------------------------------------------------------------- steps

@dataclass
class RunRecord:
    iteration: int
    L_c: float
    L_f: float
    L_p: float
    L_nl: float
    total: float
    tau: float
    lr: float
    mixed: int = 0
    pseudo_valid: float = 0.0
    val_mean_dice: float | None = None


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def train_step(batch: Batch, net: SegNet, iteration: int, cfg: TrainConfig) -> RunRecord:
    """One SGD step on ``L = L_c + L_f + L_p (+ L_nl)``."""
    h = net.cfg.hierarchy
    total_iters = cfg.sgd.total_iters
    lr = lr_schedule(iteration, cfg.sgd)
    tau = tau_schedule(iteration, total_iters)
    B, nf = len(batch.images), batch.n_fine

    mixed = None
    if cfg.enable_hm and batch.n_coarse > 0:
        mixed = hierarchical_mix(
            net, batch.images[nf:], batch.y[nf:], batch.images[:nf], batch.y[:nf], batch.z,
            tau, Rng(derive(cfg.seed, "hm", iteration)), h)

    x = batch.images if mixed is None else np.concatenate([batch.images, mixed.images.astype(batch.images.dtype)])
    net.train()
    out = net(x)
    dtype = out.sub_logits.dtype
    main = out.select(0, B)

    l_c = _zero(dtype)
    if out.super_logits is not None:
        l_c = ce_dice_loss(main.super_logits, one_hot(batch.y, h.R, dtype))
    fine = main.select(0, nf)
    l_f = ce_dice_loss(fine.sub_logits, one_hot(batch.z, h.K, dtype))
    l_p = _zero(dtype)
    if mixed is not None:
        mix_out = out.select(B, len(x))
        l_p = ce_dice_loss(mix_out.sub_logits, mixed.targets, mixed.masks)
        if cfg.hm_superclass:
            y_mix = np.stack([h.collapse(m.z_full) for m in mixed.mixes])
            l_p = l_p + ce_dice_loss(mix_out.super_logits, one_hot(y_mix, h.R, dtype))
    l_nl = negative_learning_loss(main.sub_logits, batch.y, h) if cfg.enable_nl else _zero(dtype)

    total = l_c + l_f + l_p + l_nl
    backward(total)
    sgd_step(net.parameters(), lr, cfg.sgd.momentum)

    valid = 0.0
    if mixed is not None:
        valid = float(np.mean([p.valid.mean() for p in mixed.pseudo]))
    return RunRecord(iteration=iteration, L_c=l_c.item(), L_f=l_f.item(), L_p=l_p.item(),
                     L_nl=l_nl.item(), total=total.item(), tau=tau, lr=lr,
                     mixed=0 if mixed is None else len(mixed.images), pseudo_valid=valid)


# ---------------------------------------------------------------- evaluation

def predict(net: SegNet, images: np.ndarray, chunk: int = 8) -> np.ndarray:
    """Argmax subclass maps for (N, C, H, W) images, in inference mode."""
    was_training = net.training
    net.eval()
    preds = []
    try:
        with no_grad():
            for i in range(0, len(images), chunk):
                logits = net(images[i:i + chunk]).sub_logits
                preds.append(logits.data.argmax(axis=1))
    finally:
        net.train(was_training)
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def evaluate_samples(net: SegNet, samples: list[Sample]) -> ClassReport:
    if not samples:
        raise ValueError("evaluate_samples: no samples")
    preds = predict(net, np.stack([s.image for s in samples]))
    return average_reports([evaluate(p, s.z, net.cfg.hierarchy) for p, s in zip(preds, samples)])


# ---------------------------------------------------------------- experiments

def restrict_fine(split: DatasetSplit, n_sub: int, seed: int) -> DatasetSplit:
    """Keep ``n_sub`` of the fine samples; the rest become coarse (subclass maps hidden)."""
    if n_sub > len(split.fine):
        raise ValueError(f"n_sub={n_sub} exceeds the {len(split.fine)} fine samples available")
    if n_sub == len(split.fine):
        return split
    keep = set(Rng(derive(seed, "restrict")).sample_without_replacement(len(split.fine), n_sub))
    fine = [s for i, s in enumerate(split.fine) if i in keep]
    dropped = [s for i, s in enumerate(split.fine) if i not in keep]
    oracle = dict(split.oracle)
    oracle.update({s.id: s.z for s in dropped})
    coarse = [dataclasses.replace(s, z=None) for s in dropped] + list(split.coarse)
    return dataclasses.replace(split, fine=fine, coarse=coarse, oracle=oracle)


@dataclass
class ExperimentResult:
    report: ClassReport
    records: list[RunRecord] = field(repr=False)
    best_iteration: int
    val_history: list[tuple[int, float]]


_LOG_FIELDS = [f.name for f in dataclasses.fields(RunRecord)]


def _snapshot(net: SegNet) -> dict:
    return {"params": {k: p.data.copy() for k, p in net.params.items()},
            "buffers": {k: v.copy() for k, v in net.buffers.items()}}


def _restore(net: SegNet, snap: dict) -> None:
    for k, v in snap["params"].items():
        net.params[k].data = v.copy()
    for k, v in snap["buffers"].items():
        net.buffers[k] = v.copy()


def run_experiment(cfg: TrainConfig, split: DatasetSplit | None = None) -> ExperimentResult:
    """Train ``total_iters`` steps, keep the best validation checkpoint, report on the test split.

    With ``cfg.out_dir`` set, the run directory gets ``run.cfg``, ``log.csv``,
    ``best.ckpt/``, ``final.ckpt/`` and ``report.csv``.
    """
    if split is None:
        if cfg.data_dir is None:
            raise ConfigError("run_experiment: need a dataset (split or data_dir)")
        split = read_dataset(cfg.data_dir)
    if cfg.model.hierarchy != split.hierarchy:
        raise ConfigError(f"model hierarchy {cfg.model.hierarchy.k} does not match dataset {split.hierarchy.k}")
    if cfg.n_sub is not None:
        split = restrict_fine(split, cfg.n_sub, cfg.seed)

    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.cfg").write_text(config_to_text(cfg))

    net = SegNet(cfg.model, seed=cfg.seed)
    total = cfg.sgd.total_iters
    records: list[RunRecord] = []
    history: list[tuple[int, float]] = []
    best = (-1.0, -1, None)
    t0 = time.time()
    for it in range(total):
        batch = build_batch(split, cfg, Rng(derive(cfg.seed, "batch", it)))
        rec = train_step(batch, net, it, cfg)
        if (it + 1) % cfg.eval_every == 0 or it + 1 == total:
            eval_set = split.val or split.fine
            rec.val_mean_dice = evaluate_samples(net, eval_set).mean_dice
            history.append((it + 1, rec.val_mean_dice))
            if rec.val_mean_dice > best[0]:
                best = (rec.val_mean_dice, it + 1, _snapshot(net))
                if out is not None:
                    checkpoint.save_checkpoint(net, out / "best.ckpt", it + 1)
            log.info("iter %d/%d  loss %.4f (c %.4f f %.4f p %.4f)  val dice %.4f  %.0fs",
                     it + 1, total, rec.total, rec.L_c, rec.L_f, rec.L_p, rec.val_mean_dice, time.time() - t0)
        records.append(rec)

    if out is not None:
        checkpoint.save_checkpoint(net, out / "final.ckpt", total)
        write_log(records, out / "log.csv")
    _restore(net, best[2])
    report = evaluate_samples(net, split.test or split.val or split.fine)
    if out is not None:
        (out / "report.csv").write_text(report.to_csv())
    return ExperimentResult(report=report, records=records, best_iteration=best[1], val_history=history)


def write_log(records: list[RunRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_LOG_FIELDS)
        for r in records:
            row = dataclasses.astuple(r)
            w.writerow(["" if v is None else (f"{v:.8g}" if isinstance(v, float) else v) for v in row])


# ---------------------------------------------------------------- ablations

ABLATIONS: dict[str, dict] = {
    "unet": {"superclass_head": False},
    "nl": {"superclass_head": False, "nl": True},
    "mod": {},
    "hm": {"hm": True},
    "pc": {"pc": True},
    "sn": {"sn": True},
    "hm_pc": {"hm": True, "pc": True},
    "hm_sn": {"hm": True, "sn": True},
    "pc_sn": {"pc": True, "sn": True},
    "full": {"hm": True, "pc": True, "sn": True},
}
DEFAULT_GRID = ("mod", "hm", "pc", "sn", "full")


def ablation_config(base: TrainConfig, name: str, seed: int, out_dir: str | None = None) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    defaults = {"pc": False, "sn": False, "hm": False, "nl": False, "superclass_head": True}
    cfg = apply_overrides(base, {**defaults, **ABLATIONS[name], "seed": seed})
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(Path(out_dir) / f"{name}_seed{seed}"))
    return cfg


def _run_one(args) -> tuple[str, int, ClassReport]:
    cfg, split, name = args
    return name, cfg.seed, run_experiment(cfg, split).report


def run_ablation(base: TrainConfig, split: DatasetSplit, names=DEFAULT_GRID, seeds=(0, 1, 2),
                 out_dir: str | None = None, jobs: int = 1) -> list[dict]:
    """Train every (config, seed) pair; returns per-run rows followed by one aggregate row per config."""
    tasks = [(ablation_config(base, n, s, out_dir), split, n) for n in names for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    K = split.hierarchy.K
    rows = []
    for name, seed, rep in results:
        row = {"config": name, "seed": str(seed), "mean_dice": rep.mean_dice, "std_dice": None,
               "mean_hd95": rep.mean_hd95, "std_hd95": None}
        row.update({f"dice_{c}": rep.per_class[str(c)][0] for c in range(1, K)})
        rows.append(row)
    for name in names:
        mine = [r for r in rows if r["config"] == name and r["seed"] != "all"]
        dices = [r["mean_dice"] for r in mine]
        hds = [r["mean_hd95"] for r in mine if r["mean_hd95"] is not None]
        agg = {"config": name, "seed": "all", "mean_dice": float(np.mean(dices)),
               "std_dice": float(np.std(dices)),
               "mean_hd95": float(np.mean(hds)) if hds else None,
               "std_hd95": float(np.std(hds)) if hds else None}
        agg.update({f"dice_{c}": float(np.mean([r[f"dice_{c}"] for r in mine])) for c in range(1, K)})
        rows.append(agg)
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_csv(rows: list[dict], path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
