"""Checkpoint directories: one TSR1 file per tensor plus ``model.cfg``."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .core import tsr
from .data import HierarchySpec
from .segnet import ModelConfig, SegNet


class CheckpointError(IOError):
    pass


_BOOL_KEYS = ("enable_pc", "enable_sn", "superclass_head")
_INT_KEYS = ("base_channels", "depth", "in_channels")


def model_config_lines(cfg: ModelConfig) -> list[str]:
    return [
        f"k = {','.join(map(str, cfg.hierarchy.k))}",
        *(f"{key} = {str(getattr(cfg, key)).lower()}" for key in _BOOL_KEYS),
        *(f"{key} = {getattr(cfg, key)}" for key in _INT_KEYS),
        f"prior = {cfg.prior}",
    ]


def parse_model_config(values: dict[str, str]) -> ModelConfig:
    kwargs = {"hierarchy": HierarchySpec(tuple(int(v) for v in values["k"].split(",")))}
    for key in _BOOL_KEYS:
        kwargs[key] = values[key] == "true"
    for key in _INT_KEYS:
        kwargs[key] = int(values[key])
    kwargs["prior"] = values.get("prior", "logits")
    return ModelConfig(**kwargs)


def _read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def save_checkpoint(net: SegNet, path: str | os.PathLike, iteration: int) -> Path:
    """Write parameter values, momentum buffers and batch-norm running statistics."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, p in net.params.items():
        tsr.save(path / f"{name}.tsr1", p.data)
        tsr.save(path / f"{name}.momentum.tsr1", p.momentum_buffer)
    for name, buf in net.buffers.items():
        tsr.save(path / f"{name}.tsr1", buf)
    lines = model_config_lines(net.cfg) + [f"iteration = {iteration}"]
    (path / "model.cfg").write_text("\n".join(lines) + "\n")
    return path


def _load_tensor(path: Path, name: str, shape: tuple[int, ...]) -> np.ndarray:
    f = path / f"{name}.tsr1"
    if not f.is_file():
        raise CheckpointError(f"checkpoint {path}: missing tensor {name}")
    try:
        arr = tsr.load(f)
    except tsr.TsrError as exc:
        raise CheckpointError(f"checkpoint {path}: tensor {name} is corrupt ({exc})") from exc
    if arr.shape != shape:
        raise CheckpointError(f"checkpoint {path}: tensor {name} has shape {arr.shape}, expected {shape}")
    return arr


def load_checkpoint(path: str | os.PathLike, expect: ModelConfig | None = None) -> tuple[SegNet, int]:
    """Rebuild the network; ``expect`` guards against loading into the wrong architecture."""
    path = Path(path)
    cfg_file = path / "model.cfg"
    if not cfg_file.is_file():
        raise CheckpointError(f"checkpoint {path}: missing model.cfg")
    values = _read_kv(cfg_file)
    try:
        cfg = parse_model_config(values)
        iteration = int(values["iteration"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path}: bad model.cfg ({exc})") from exc
    if expect is not None and expect != cfg:
        raise CheckpointError(f"checkpoint {path}: model config {cfg} does not match expected {expect}")
    net = SegNet(cfg, seed=0)
    for name, p in net.params.items():
        p.data = _load_tensor(path, name, p.shape)
        p.momentum_buffer = _load_tensor(path, f"{name}.momentum", p.shape)
        p.grad = np.zeros_like(p.data)
    for name, buf in net.buffers.items():
        net.buffers[name] = _load_tensor(path, name, buf.shape)
    return net, iteration
