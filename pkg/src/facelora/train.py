"""Adapter fine-tuning: frozen backbone, LoRA on q/v, CosFace head, AdamW + cosine decay."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .containers import load_container, save_container
from .data import DatasetManifest, Normalization, preprocess
from .lora import AdapterMeta, ScalingMode
from .loss import CosFaceHead, cosface_loss
from .vit import FingerprintMismatchError, ViTBackbone

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    margin: float = 0.3
    scale: float = 64.0
    rank: int = 16
    alpha: float = 16.0
    scaling_mode: str = ScalingMode.RANK_STABILIZED.value
    per_head: bool = False
    embedding_dim: int | None = None
    augment: bool = True
    flip_p: float = 0.5
    randaug_ops: int = 4
    randaug_magnitude: int = 16
    grad_clip: float | None = None
    seed: int = 0
    workers: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("base_lr", "alpha", "scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        ScalingMode(self.scaling_mode)
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def adapter_meta(self, fingerprint: str) -> AdapterMeta:
        return AdapterMeta(self.rank, float(self.alpha), self.scaling_mode, self.per_head, fingerprint)


# Full-scale settings (8-GPU runs).
PRESET_CASIA = TrainConfig(epochs=40, batch_size=512)
PRESET_LARGE = TrainConfig(epochs=30, batch_size=512)
# Desk scale: tiny backbone, ten-odd identities, one CPU core. Full-scale lr
# with batch 64 barely moves the adapters in 30 epochs of a 200-image set.
PRESET_DESK = TrainConfig(epochs=30, batch_size=8, base_lr=1e-3)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``; no warmup."""
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class TrainingDiverged(RuntimeError):
    pass


def prepare_model(
    base: ViTBackbone, n_classes: int, cfg: TrainConfig
) -> tuple[ViTBackbone, CosFaceHead]:
    """Copy the base backbone, attach q/v adapters and build a fresh CosFace head."""
    model = base.stripped() if base.lora_settings is not None else _copy(base)
    model.attach_lora(cfg.rank, cfg.alpha, cfg.scaling_mode, cfg.per_head, seed=cfg.seed)
    head = CosFaceHead(
        model.cfg.d_model, n_classes, cfg.margin, cfg.scale, cfg.embedding_dim, seed=cfg.seed, dtype=model.dtype
    )
    return model, head


def _copy(m: ViTBackbone) -> ViTBackbone:
    import copy

    return copy.deepcopy(m)


ImageLoader = Callable[[str], np.ndarray]


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass
class Trainer:
    """Single-writer training loop.

    Sample order in epoch ``e`` is ``default_rng([seed, e]).permutation(n)``
    and sample ``i`` of epoch ``e`` is augmented with seed ``[seed, e, i]``, so
    runs are reproducible whatever ``workers`` is set to.
    """

    backbone: ViTBackbone
    head: CosFaceHead
    manifest: DatasetManifest
    load_image: ImageLoader
    cfg: TrainConfig
    out_dir: Path | None = None
    norm: Normalization = field(default_factory=Normalization)
    epoch: int = 0
    step: int = 0
    history: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        if len(self.manifest) == 0:
            raise ValueError("empty manifest")
        if self.backbone.lora_settings is None:
            raise ValueError("attach adapters (prepare_model) before training")
        if self.head.n_classes != len(self.manifest.identities):
            raise ValueError(
                f"head has {self.head.n_classes} classes, manifest has {len(self.manifest.identities)} identities"
            )
        self.base_fingerprint = self.backbone.fingerprint()
        self.backbone.requires_grad_(False)
        for p in self.backbone.adapter_parameters():
            p.requires_grad_(True)
        self.params = self.backbone.adapter_parameters() + list(self.head.parameters())
        self.optimizer = torch.optim.AdamW(
            self.params, lr=self.cfg.base_lr, betas=self.cfg.betas, weight_decay=self.cfg.weight_decay
        )
        self.labels = self.manifest.labels()
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.manifest) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.cfg.base_lr)

    def _sample(self, epoch: int, idx: int) -> np.ndarray:
        rec = self.manifest.records[idx]
        return preprocess(
            self.load_image(rec.path),
            self.backbone.cfg.image_size,
            train_mode=self.cfg.augment,
            seed=[self.cfg.seed, epoch, idx],
            flip_p=self.cfg.flip_p,
            randaug=(self.cfg.randaug_ops, self.cfg.randaug_magnitude) if self.cfg.randaug_ops else None,
            norm=self.norm,
        )

    def _batch(self, epoch: int, idxs: Sequence[int], pool) -> tuple[torch.Tensor, torch.Tensor]:
        fn = lambda i: self._sample(epoch, i)  # noqa: E731
        imgs = list(pool.map(fn, idxs)) if pool is not None else [fn(i) for i in idxs]
        x = torch.as_tensor(np.stack(imgs), dtype=self.backbone.dtype)
        return x, torch.as_tensor(self.labels[list(idxs)])

    def train_step(self, x: torch.Tensor, y: torch.Tensor) -> float:
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.backbone.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = cosface_loss(self.backbone(x), y, self.head)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {self.epoch} step {self.step} (lr={lr:.3g})")
        loss.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        rec = StepRecord(self.epoch, self.step, lr, value)
        self.history.append(rec)
        if self.out_dir is not None:
            with (self.out_dir / "metrics.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
        self.step += 1
        return value

    def run(self, until_epoch: int | None = None, max_steps: int | None = None) -> list[StepRecord]:
        """Train from the current epoch up to ``until_epoch`` (default: all), checkpointing each epoch."""
        until = self.cfg.epochs if until_epoch is None else min(until_epoch, self.cfg.epochs)
        start = len(self.history)
        pool = ThreadPoolExecutor(self.cfg.workers) if self.cfg.workers > 0 else None
        try:
            while self.epoch < until:
                order = np.random.default_rng([self.cfg.seed, self.epoch]).permutation(len(self.manifest))
                for b in range(self.steps_per_epoch):
                    if max_steps is not None and len(self.history) - start >= max_steps:
                        return self.history[start:]
                    x, y = self._batch(self.epoch, order[b * self.cfg.batch_size:(b + 1) * self.cfg.batch_size], pool)
                    self.train_step(x, y)
                self.epoch += 1
                log.info("epoch %d done, loss %.4f", self.epoch, self.history[-1].loss)
                if self.out_dir is not None:
                    self.save_checkpoint(self.out_dir / f"checkpoint_{self.epoch:03d}.npz")
        finally:
            if pool is not None:
                pool.shutdown()
        return self.history[start:]

    # -- checkpoints -----------------------------------------------------------

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.backbone.adapter_state())
        for name, p in self.head.named_parameters():
            arrays[f"head.{name}"] = p.detach().cpu().numpy().copy()
        for j, p in enumerate(self.params):
            state = self.optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    arrays[f"optim.{j}.{key}"] = state[key].detach().cpu().numpy().copy()
            if "step" in state:
                arrays[f"optim.{j}.step"] = np.asarray(float(state["step"]))
        return arrays

    def checkpoint_meta(self) -> dict:
        meta = asdict(self.cfg.adapter_meta(self.base_fingerprint))
        meta.update(
            kind="train_checkpoint",
            epoch=self.epoch,
            step=self.step,
            train_config=self.cfg.to_dict(),
            vit_config=self.backbone.cfg.to_dict(),
            identities=list(self.manifest.identities),
        )
        return meta

    def save_checkpoint(self, path: str | Path) -> Path:
        return save_container(path, self.checkpoint_arrays(), self.checkpoint_meta())

    @classmethod
    def resume(
        cls,
        checkpoint: str | Path,
        base: ViTBackbone,
        manifest: DatasetManifest,
        load_image: ImageLoader,
        out_dir: Path | None = None,
        cfg: TrainConfig | None = None,
        norm: Normalization | None = None,
    ) -> "Trainer":
        """Rebuild a trainer at the checkpoint's epoch/step with optimizer moments restored.

        ``cfg`` may change non-structural settings; rank, alpha, scaling mode
        and per-head layout must match the checkpoint.
        """
        arrays, meta = load_container(checkpoint)
        if meta.get("kind") != "train_checkpoint":
            raise ValueError(f"{checkpoint} is not a training checkpoint")
        saved = TrainConfig(**meta["train_config"])
        cfg = saved if cfg is None else cfg
        ck_meta = AdapterMeta(meta["rank"], meta["alpha"], meta["scaling_mode"], meta["per_head"], meta["base_fingerprint"])
        diff = cfg.adapter_meta(ck_meta.base_fingerprint).compatible_with(ck_meta)
        if diff:
            raise ValueError(f"config differs from checkpoint in {diff}")
        _check_fingerprint(base, meta["base_fingerprint"])
        if list(manifest.identities) != meta["identities"]:
            raise ValueError("manifest identities differ from the checkpoint's")
        model, head = prepare_model(base, len(manifest.identities), cfg)
        model.load_adapter_state(arrays)
        _load_head(head, arrays)
        trainer = cls(model, head, manifest, load_image, cfg, out_dir, norm or Normalization())
        trainer.epoch, trainer.step = int(meta["epoch"]), int(meta["step"])
        for j, p in enumerate(trainer.params):
            if f"optim.{j}.exp_avg" in arrays:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[f"optim.{j}.step"])),
                    "exp_avg": torch.as_tensor(arrays[f"optim.{j}.exp_avg"]).clone(),
                    "exp_avg_sq": torch.as_tensor(arrays[f"optim.{j}.exp_avg_sq"]).clone(),
                }
        return trainer


def _load_head(head: CosFaceHead, arrays: dict) -> None:
    with torch.no_grad():
        for name, p in head.named_parameters():
            src = arrays.get(f"head.{name}")
            if src is None:
                raise KeyError(f"checkpoint lacks head.{name}")
            p.copy_(torch.as_tensor(src))


def _check_fingerprint(backbone: ViTBackbone, expected: str) -> None:
    actual = backbone.fingerprint()
    if actual != expected:
        raise FingerprintMismatchError(f"backbone fingerprint {actual[:12]} != checkpoint's {expected[:12]}")


def finetune(
    backbone: ViTBackbone,
    head: CosFaceHead,
    manifest: DatasetManifest,
    load_image: ImageLoader,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    norm: Normalization | None = None,
) -> Trainer:
    """Run the full schedule and return the finished trainer (history, checkpoints)."""
    trainer = Trainer(backbone, head, manifest, load_image, cfg, Path(out_dir) if out_dir else None, norm or Normalization())
    trainer.run()
    return trainer


def save_adapters(backbone: ViTBackbone, path: str | Path, base_fingerprint: str | None = None) -> Path:
    """Adapter-only container: ``<block>.<fused|h<i>>.<q|v>.<A|B>`` + metadata."""
    if backbone.lora_settings is None:
        raise ValueError("backbone has no adapters")
    meta = dict(backbone.lora_settings)
    meta.update(kind="adapters", base_fingerprint=base_fingerprint or backbone.fingerprint())
    return save_container(path, backbone.adapter_state(), meta)


def load_adapters(path: str | Path, base: ViTBackbone) -> ViTBackbone:
    """Attach the adapters stored at ``path`` (adapter-only or training checkpoint) to a copy of ``base``."""
    arrays, meta = load_container(path)
    _check_fingerprint(base, meta["base_fingerprint"])
    model = base.stripped() if base.lora_settings is not None else _copy(base)
    model.attach_lora(meta["rank"], meta["alpha"], meta["scaling_mode"], meta["per_head"])
    model.load_adapter_state(arrays)
    return model


def export_merged(checkpoint: str | Path, base: ViTBackbone) -> ViTBackbone:
    """Fold checkpoint adapters into the base weights; the result has no adapter modules."""
    return load_adapters(checkpoint, base).merged()


def backbone_embedder(
    backbone: ViTBackbone,
    load_image: ImageLoader,
    norm: Normalization | None = None,
    batch_size: int = 128,
) -> Callable[[Sequence[str]], np.ndarray]:
    """Batch ``paths -> (n, d_model)`` embedding function (eval-mode preprocessing)."""
    norm = norm or Normalization()

    def embed(paths: Sequence[str]) -> np.ndarray:
        backbone.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(paths), batch_size):
                imgs = [preprocess(load_image(p), backbone.cfg.image_size, norm=norm) for p in paths[i:i + batch_size]]
                out.append(backbone(torch.as_tensor(np.stack(imgs), dtype=backbone.dtype)).cpu().numpy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, backbone.cfg.d_model))

    return embed


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
