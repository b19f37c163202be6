"""Stage I: encoder-decoder (U-Net) regression from boundary voltages to the interior potential."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import Dataset, NormStats, normalize

log = logging.getLogger(__name__)

N_DRIVES, N_MEAS = 16, 13


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CheckpointMismatch(ValueError):
    pass


def embed_measurements(dv, N: int) -> np.ndarray:
    """Reshape a (normalised) 208-vector to 16 x 13, drive-major, and resize bilinearly to N x N."""
    dv = np.asarray(dv, dtype=np.float32)
    if dv.shape[-1] != N_DRIVES * N_MEAS:
        raise ValueError(f"expected {N_DRIVES * N_MEAS} measurements, got {dv.shape[-1]}")
    with torch.no_grad():
        out = _embed(torch.from_numpy(dv.reshape(-1, N_DRIVES * N_MEAS)), N)
    return out.numpy()[:, 0] if dv.ndim > 1 else out.numpy()[0, 0]


def _embed(dv: torch.Tensor, N: int) -> torch.Tensor:
    img = dv.reshape(-1, 1, N_DRIVES, N_MEAS)
    return F.interpolate(img, size=(N, N), mode="bilinear", align_corners=True)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; output is added to a fixed mean field.

    Besides the embedded measurements the input carries x, y and disk-mask
    channels, since a fully convolutional net has no other access to absolute
    position.
    """

    def __init__(self, N: int = 64, channels=(16, 32, 64), embedding: str = "resize", base_field=None):
        super().__init__()
        self.N, self.embedding = N, embedding
        if embedding == "dense":
            self.project = nn.Linear(N_DRIVES * N_MEAS, N * N)
        elif embedding != "resize":
            raise ValueError(f"unknown embedding {embedding!r}")
        c = np.linspace(-1.0, 1.0, N, dtype=np.float32)
        X, Y = np.meshgrid(c, c)
        coords = np.stack([X, Y, (X**2 + Y**2 <= 1.0).astype(np.float32)])
        self.register_buffer("coords", torch.from_numpy(coords)[None])
        bf = np.zeros((N, N), np.float32) if base_field is None else np.asarray(base_field, np.float32)
        self.register_buffer("base_field", torch.from_numpy(bf.copy())[None, None])

        self.down = nn.ModuleList()
        cin = 4
        for ch in channels:
            self.down.append(_block(cin, ch))
            cin = ch
        self.up = nn.ModuleList()
        for ch in reversed(channels[:-1]):
            self.up.append(_block(cin + ch, ch))
            cin = ch
        self.out = nn.Conv2d(cin, 1, 1)

    def embed(self, dv: torch.Tensor) -> torch.Tensor:
        if self.embedding == "dense":
            return self.project(dv).reshape(-1, 1, self.N, self.N)
        return _embed(dv, self.N)

    def forward(self, dv: torch.Tensor) -> torch.Tensor:
        x = torch.cat([self.embed(dv), self.coords.expand(dv.shape[0], -1, -1, -1)], dim=1)
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return (self.out(x) + self.base_field)[:, 0]


@dataclass
class Stage1Config:
    epochs: int = 200
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    patience: int = 30
    channels: tuple = (16, 32, 64)
    embedding: str = "resize"
    grad_weight: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "channels" in kw:
            kw["channels"] = tuple(kw["channels"])
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0
    stopped_early: bool = False


@dataclass
class Stage1Model:
    net: UNet
    stats: NormStats
    stats_hash: str
    config: Stage1Config
    mask: np.ndarray

    @property
    def N(self) -> int:
        return self.net.N

    def sidecar(self) -> dict:
        return {
            "N": self.N,
            "stats_hash": self.stats_hash,
            "config": asdict(self.config),
            "config_hash": self.config.digest(),
        }


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over disk nodes only."""
    m = mask.to(pred.dtype)
    return ((pred - target) ** 2 * m).sum() / (m.sum() * pred.shape[0])


def gradient_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, h: float) -> torch.Tensor:
    """Squared error of forward-difference derivatives over node pairs inside the disk."""
    d = pred - target
    mx = (mask[:, 1:] & mask[:, :-1]).to(d.dtype)
    my = (mask[1:, :] & mask[:-1, :]).to(d.dtype)
    ex = (d[:, :, 1:] - d[:, :, :-1]) / h
    ey = (d[:, 1:, :] - d[:, :-1, :]) / h
    return ((ex**2 * mx).sum() / mx.sum() + (ey**2 * my).sum() / my.sum()) / d.shape[0]


def stage1_loss(pred, target, mask, h: float, grad_weight: float = 0.0) -> torch.Tensor:
    loss = masked_mse(pred, target, mask)
    if grad_weight:
        loss = loss + grad_weight * gradient_mse(pred, target, mask, h)
    return loss


def _tensors(ds: Dataset, idx: np.ndarray, stats: NormStats):
    dv_n, u_n = normalize(ds.dv[idx].astype(float), ds.u[idx].astype(float), stats)
    return torch.tensor(dv_n, dtype=torch.float32), torch.tensor(u_n, dtype=torch.float32)


def _evaluate(net: UNet, dv: torch.Tensor, u: torch.Tensor, mask: torch.Tensor, batch: int, h: float, gw: float) -> float:
    net.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(dv), batch):
            p = net(dv[s : s + batch])
            total += float(stage1_loss(p, u[s : s + batch], mask, h, gw)) * len(p)
    return total / len(dv)


def train_stage1(ds: Dataset, cfg: Stage1Config | None = None) -> tuple[Stage1Model, TrainReport]:
    cfg = cfg or Stage1Config()
    tr, va = ds.split("train"), ds.split("val")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    stats = ds.stats
    grid = ds.grid
    mask = torch.from_numpy(grid.mask)
    dv_tr, u_tr = _tensors(ds, tr, stats)
    dv_va, u_va = _tensors(ds, va, stats)
    base = (u_tr * mask).mean(0).numpy()

    net = UNet(grid.N, cfg.channels, cfg.embedding, base_field=base)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    report = TrainReport()
    best, best_state, stale = float("inf"), None, 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(len(tr), generator=gen)
        total = 0.0
        for s in range(0, len(tr), cfg.batch):
            b = perm[s : s + cfg.batch]
            if len(b) < 2:
                continue  # batch norm needs more than one sample
            opt.zero_grad(set_to_none=True)
            loss = stage1_loss(net(dv_tr[b]), u_tr[b], mask, grid.h, cfg.grad_weight)
            if not torch.isfinite(loss):
                report.seconds = time.perf_counter() - t0
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", report)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b)
        report.train_loss.append(total / len(tr))
        val = _evaluate(net, dv_va, u_va, mask, cfg.batch, grid.h, cfg.grad_weight)
        report.val_loss.append(val)
        if val < best:
            best, best_state, stale = val, copy.deepcopy(net.state_dict()), 0
            report.best_epoch = epoch
        else:
            stale += 1
        log.info("epoch %d train %.3e val %.3e", epoch, report.train_loss[-1], val)
        if stale >= cfg.patience:
            report.stopped_early = True
            break
    report.seconds = time.perf_counter() - t0
    net.load_state_dict(best_state)
    net.eval()
    return Stage1Model(net, stats, ds.stats_hash, cfg, grid.mask.copy()), report


def predict_potential(model: Stage1Model, dv) -> np.ndarray:
    """Denormalised N x N potential, zero mean over the disk, zero outside it."""
    if model.stats is None:
        raise ValueError("normalisation statistics are missing")
    dv = np.asarray(dv, dtype=float)
    single = dv.ndim == 1
    dv_n, _ = normalize(np.atleast_2d(dv), None, model.stats)
    if dv_n.shape[1] != N_DRIVES * N_MEAS:
        raise ValueError(f"expected {N_DRIVES * N_MEAS} measurements, got {dv_n.shape[1]}")
    model.net.eval()
    with torch.no_grad():
        u = model.net(torch.tensor(dv_n, dtype=torch.float32)).numpy().astype(float)
    u *= model.stats.u_scale
    m = model.mask
    u = np.where(m, u - u[:, m].mean(axis=1)[:, None, None], 0.0)
    return u[0] if single else u


def save_stage1(model: Stage1Model, path, report: TrainReport | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.net.state_dict(), "stats": model.stats.to_dict()}, path)
    side = model.sidecar()
    if report is not None:
        side["report"] = asdict(report)
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1))
    return path


def load_stage1(path, ds: Dataset) -> Stage1Model:
    path = Path(path)
    side_path = Path(str(path) + ".json")
    if not path.exists() or not side_path.exists():
        raise FileNotFoundError(str(path if not path.exists() else side_path))
    side = json.loads(side_path.read_text())
    if side["N"] != ds.grid.N or side["stats_hash"] != ds.stats_hash:
        raise CheckpointMismatch(
            f"checkpoint {path} was trained on a different dataset "
            f"(N={side['N']}, stats {side['stats_hash']} vs N={ds.grid.N}, stats {ds.stats_hash})"
        )
    cfg = Stage1Config.from_dict(side["config"])
    blob = torch.load(path, map_location="cpu", weights_only=True)
    net = UNet(side["N"], cfg.channels, cfg.embedding)
    net.load_state_dict(blob["state_dict"])
    net.eval()
    stats = NormStats.from_dict(blob["stats"], ds.dv_ref.astype(float))
    return Stage1Model(net, stats, side["stats_hash"], cfg, ds.grid.mask.copy())
