"""Self-supervised training loops for SimCLR and BYOL with the transform-regression module."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .augmentation import TripleSampler, apply_b1, check_disjoint, sample_b1
from .config import ExperimentConfig, config_from_dict
from .data import DatasetHandle
from .geometry import PARAM_DIMS
from .model import ModelBundle, build_bundle, ema_update

log = logging.getLogger(__name__)

CHECKPOINT_PATTERN = "ckpt_epoch{:04d}.pt"


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TripleBatch:
    x1: torch.Tensor
    x2: torch.Tensor
    x1_prime: torch.Tensor | None = None
    phi: torch.Tensor | None = None
    x2_prime: torch.Tensor | None = None
    phi2: torch.Tensor | None = None


def _nchw(images) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2)))


def make_batch(images, cfg: ExperimentConfig, b1_rng, b2_rng) -> TripleBatch:
    """Produce a batch of view triples; B1 and B2 draw from separate generators."""
    b1 = cfg.b1_config()
    b2 = cfg.b2_config()
    if b2 is None:
        # same per-image draw order as the triple sampler, so B1 views match across variants
        x1, x2 = [], []
        for img in images:
            x1.append(apply_b1(img, sample_b1(b1_rng, b1)))
            x2.append(apply_b1(img, sample_b1(b1_rng, b1)))
        return TripleBatch(_nchw(x1), _nchw(x2))
    sampler = TripleSampler(b1, b2, interp=cfg.interp, second=cfg.two_modules)
    triples = [sampler(img, b1_rng, b2_rng) for img in images]
    batch = TripleBatch(
        _nchw([t.x1 for t in triples]),
        _nchw([t.x2 for t in triples]),
        _nchw([t.x1_prime for t in triples]),
        torch.tensor(np.stack([t.phi.values for t in triples]), dtype=torch.float32),
    )
    if cfg.two_modules:
        batch.x2_prime = _nchw([t.x2_prime for t in triples])
        batch.phi2 = torch.tensor(np.stack([t.phi2.values for t in triples]), dtype=torch.float32)
    return batch


def build_model(cfg: ExperimentConfig, dataset: DatasetHandle | None = None) -> ModelBundle:
    reg_dim = None
    if cfg.module != "none" and cfg.loss_variant != "invariant":
        reg_dim = PARAM_DIMS[cfg.module]
    mean = dataset.mean if dataset is not None else (0.5, 0.5, 0.5)
    std = dataset.std if dataset is not None else (0.5, 0.5, 0.5)
    return build_bundle(
        cfg.preset,
        reg_dim,
        proj_hidden=cfg.model.proj_hidden,
        proj_dim=cfg.model.proj_dim,
        reg_hidden=cfg.model.reg_hidden,
        regressor_input="concat" if cfg.loss_variant == "concat" else "diff",
        placement=cfg.placement,
        two_modules=cfg.two_modules,
        byol=cfg.method == "byol",
        widths=cfg.model.widths,
        mean=mean,
        std=std,
        seed=cfg.seed,
    )


def build_optimizer(bundle: ModelBundle, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    params = bundle.online_parameters()
    o = cfg.optimizer
    if o.name == "adam":
        return torch.optim.Adam(params, lr=o.lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)


def module_loss(bundle: ModelBundle, l1, z1, l2, z2, batch: TripleBatch, cfg: ExperimentConfig):
    """The second loss term; zero when no module is configured.

    ``x1'`` (and ``x2'``) go through the encoder in their own forward pass so
    the batch statistics seen by the contrastive views are unchanged.
    """
    if cfg.module == "none":
        return l1.new_zeros(())
    l1p = bundle.encode(batch.x1_prime)
    if cfg.loss_variant == "invariant":
        return obj.invariant_variant_loss(l1, l1p)

    def one(latent, proj, latent_p, phi, second):
        if cfg.placement == "on_g":
            a, b = proj, bundle.project(latent_p)
        else:
            a, b = latent, latent_p
        return obj.param_regression_loss(bundle.regress(a, b, second=second), phi, cfg.regression_kind)

    loss = one(l1, z1, l1p, batch.phi, False)
    if cfg.two_modules:
        l2p = bundle.encode(batch.x2_prime)
        loss = 0.5 * (loss + one(l2, z2, l2p, batch.phi2, True))
    return loss


def _finish_step(optimizer, l1_loss, l2_loss, cfg, step=None):
    try:
        report = obj.combined_loss(l1_loss, l2_loss, cfg.lam)
    except obj.DivergenceError as exc:
        exc.diagnostics.update(step=step, method=cfg.method, module=cfg.module)
        raise
    optimizer.zero_grad(set_to_none=True)
    (l1_loss + cfg.lam * l2_loss).backward()
    optimizer.step()
    return report


def train_step_simclr(bundle: ModelBundle, optimizer, batch: TripleBatch, cfg: ExperimentConfig, step=None):
    bundle.train()
    n = batch.x1.shape[0]
    latents = bundle.encode(torch.cat([batch.x1, batch.x2]))
    z = bundle.project(latents)
    l1, l2 = latents[:n], latents[n:]
    z1, z2 = z[:n], z[n:]
    contrastive = obj.nt_xent(z1, z2, cfg.temperature)
    regression = module_loss(bundle, l1, z1, l2, z2, batch, cfg)
    return _finish_step(optimizer, contrastive, regression, cfg, step)


def train_step_byol(bundle: ModelBundle, optimizer, batch: TripleBatch, cfg: ExperimentConfig, step=None):
    """Gradient step on the online network and h, then EMA of the target towards it."""
    bundle.train()
    n = batch.x1.shape[0]
    both = torch.cat([batch.x1, batch.x2])
    latents = bundle.encode(both)
    z = bundle.project(latents)
    p = bundle.predictor(z)
    with torch.no_grad():
        t = bundle.target_projector(bundle.encode_target(both))
    if cfg.byol_symmetric:
        contrastive = obj.symmetric_byol_loss(p[:n], p[n:], t[:n], t[n:])
    else:
        contrastive = obj.byol_loss(p[:n], t[n:])
    regression = module_loss(bundle, latents[:n], z[:n], latents[n:], z[n:], batch, cfg)
    report = _finish_step(optimizer, contrastive, regression, cfg, step)
    ema_update(bundle.target_parameters(), bundle.target_source_parameters(), cfg.tau)
    return report


def train_step(bundle, optimizer, batch, cfg, step=None):
    fn = train_step_simclr if cfg.method == "simclr" else train_step_byol
    return fn(bundle, optimizer, batch, cfg, step)


def parameter_hash(module: torch.nn.Module | list, include_buffers: bool = False) -> str:
    """SHA-256 over parameter bytes in registration order."""
    h = hashlib.sha256()
    if isinstance(module, torch.nn.Module):
        tensors = list(module.state_dict().values()) if include_buffers else list(module.parameters())
    else:
        tensors = list(module)
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- checkpoints ---

@dataclass
class CheckpointEntry:
    epoch: int
    path: Path
    losses: dict


@dataclass
class CheckpointSeries:
    entries: list[CheckpointEntry] = field(default_factory=list)

    def add(self, epoch, path, losses):
        if self.entries and epoch <= self.entries[-1].epoch:
            raise ValueError("checkpoint epochs must be strictly increasing")
        self.entries.append(CheckpointEntry(epoch, Path(path), dict(losses)))

    @property
    def epochs(self):
        return [e.epoch for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_json(self) -> str:
        return json.dumps(
            [{"epoch": e.epoch, "path": e.path.name, "losses": e.losses} for e in self.entries], indent=2
        )

    @classmethod
    def from_dir(cls, run_dir: str | Path) -> "CheckpointSeries":
        run_dir = Path(run_dir)
        raw = json.loads((run_dir / "checkpoints.json").read_text())
        series = cls()
        for item in raw:
            series.add(item["epoch"], run_dir / item["path"], item["losses"])
        return series


def _rng_state(rngs: dict) -> dict:
    return {k: r.bit_generator.state for k, r in rngs.items()}


def save_checkpoint(path, bundle, optimizer, cfg, epoch, step, rngs, losses) -> Path:
    """Atomic write (temp file, then rename)."""
    path = Path(path)
    payload = {
        "config": cfg.to_dict(),
        "model": bundle.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "rng": _rng_state(rngs),
        "torch_rng": torch.get_rng_state(),
        "losses": losses,
    }
    tmp = path.with_name("." + path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, dataset: DatasetHandle | None = None):
    """Rebuild the bundle stored at ``path``; returns ``(bundle, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = config_from_dict(payload["config"])
    bundle = build_model(cfg, dataset)
    bundle.load_state_dict(payload["model"])
    return bundle, payload


# --- loop ---

def _streams(seed: int) -> dict:
    shuffle, b1, b2 = np.random.SeedSequence(seed).spawn(3)
    return {"shuffle": np.random.default_rng(shuffle), "b1": np.random.default_rng(b1), "b2": np.random.default_rng(b2)}


def run_training(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    out_dir: str | Path,
    resume: bool = False,
    step_callback=None,
) -> CheckpointSeries:
    """Train from scratch (or resume) and checkpoint every ``cfg.checkpoint_every`` epochs.

    The initial model is saved as epoch 0 and the final epoch is always saved.
    Per-step metrics are appended to ``metrics.jsonl``. ``step_callback(step, bundle, report)``
    runs after every optimizer step.
    """
    cfg.validate()
    check_disjoint(cfg.b1_config(), cfg.b2_config())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = dataset.train_images
    n = len(images)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"dataset of {n} images is smaller than batch size {cfg.batch_size}")
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    rngs = _streams(cfg.seed)
    bundle = build_model(cfg, dataset)
    optimizer = build_optimizer(bundle, cfg)
    series = CheckpointSeries()
    metrics_path = out_dir / "metrics.jsonl"
    start_epoch, step = 0, 0

    if resume and (out_dir / "checkpoints.json").exists():
        series = CheckpointSeries.from_dir(out_dir)
        last = series.entries[-1]
        payload = torch.load(last.path, map_location="cpu", weights_only=False)
        bundle.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        for key, state in payload["rng"].items():
            rngs[key].bit_generator.state = state
        torch.set_rng_state(payload["torch_rng"])
        start_epoch, step = payload["epoch"], payload["step"]
        lines = metrics_path.read_text().splitlines()[:step] if metrics_path.exists() else []
        metrics_path.write_text("".join(line + "\n" for line in lines))
        log.info("resumed %s at epoch %d", out_dir, start_epoch)
    else:
        metrics_path.write_text("")
        path = save_checkpoint(out_dir / CHECKPOINT_PATTERN.format(0), bundle, optimizer, cfg, 0, 0, rngs, {})
        series.add(0, path, {})
        (out_dir / "checkpoints.json").write_text(series.to_json())

    with open(metrics_path, "a") as metrics:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = rngs["shuffle"].permutation(n)
            sums = {"l1": 0.0, "l2": 0.0, "total": 0.0}
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = make_batch(images[idx], cfg, rngs["b1"], rngs["b2"])
                lr = lr_at(step + 1, total_steps, warmup_steps, cfg.optimizer.lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                report = train_step(bundle, optimizer, batch, cfg, step)
                step += 1
                record = {"step": step, "epoch": epoch, "lr": lr, "l1": report.l1_contrastive,
                          "l2": report.l2_regression, "total": report.total}
                metrics.write(json.dumps(record) + "\n")
                for key in sums:
                    sums[key] += record[key]
                if step_callback is not None:
                    step_callback(step, bundle, report)
            metrics.flush()
            losses = {k: v / steps_per_epoch for k, v in sums.items()}
            log.info("epoch %d/%d l1=%.4f l2=%.4f", epoch, cfg.epochs, losses["l1"], losses["l2"])
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                path = out_dir / CHECKPOINT_PATTERN.format(epoch)
                save_checkpoint(path, bundle, optimizer, cfg, epoch, step, rngs, losses)
                series.add(epoch, path, losses)
                (out_dir / "checkpoints.json").write_text(series.to_json())
    return series


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def epoch_means(metrics: list[dict], key: str = "l2") -> dict[int, float]:
    out: dict[int, list] = {}
    for rec in metrics:
        out.setdefault(rec["epoch"], []).append(rec[key])
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}
