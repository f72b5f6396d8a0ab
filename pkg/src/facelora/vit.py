"""Pre-norm Vision Transformer with LoRA on the query and value projections."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .containers import fingerprint, load_container, save_container
from .lora import AdaptedLinear, ScalingMode


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 56
    patch_size: int = 14
    d_model: int = 192
    n_heads: int = 3
    n_layers: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3
    final_norm: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "d_model", "n_heads", "n_layers", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


# Reference layouts; not used by the desk-scale tests.
VIT_S14_224 = ViTConfig(image_size=224, patch_size=14, d_model=384, n_heads=6, n_layers=12)
VIT_B16_224 = ViTConfig(image_size=224, patch_size=16, d_model=768, n_heads=12, n_layers=12)
VIT_L14_224 = ViTConfig(image_size=224, patch_size=14, d_model=1024, n_heads=16, n_layers=24)


def attention_head(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two dims."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"shape mismatch q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    return attention_weights(q, k) @ v


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(k.shape[-1]), dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        heads = attention_head(q, k, v)
        return self.o(heads.transpose(1, 2).reshape(b, n, d))


def multi_head_attention(tokens: torch.Tensor, block: "TransformerBlock") -> torch.Tensor:
    squeeze = tokens.dim() == 2
    x = tokens.unsqueeze(0) if squeeze else tokens
    out = block.attn(x)
    return out.squeeze(0) if squeeze else out


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, eps=cfg.ln_eps)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model, eps=cfg.ln_eps)
        self.fc1 = nn.Linear(cfg.d_model, cfg.mlp_hidden)
        self.fc2 = nn.Linear(cfg.mlp_hidden, cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


ADAPTED_PROJECTIONS = ("q", "v")


class ViTBackbone(nn.Module):
    """Patch embedding, CLS token, learnable positions and ``n_layers`` blocks.

    Images are channels-last, ``(B, H, W, C)`` or a single ``(H, W, C)``.
    The embedding is the final (layer-normed) hidden state of the CLS token.
    """

    def __init__(self, cfg: ViTConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = nn.Conv2d(cfg.channels, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches + 1, d))
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d, eps=cfg.ln_eps) if cfg.final_norm else nn.Identity()
        self._init_weights(seed)
        self.to(dtype)
        self.lora_settings: dict | None = None

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in name or name.startswith("norm"):
                    p.fill_(1.0)
                else:
                    nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_embed.dtype

    # -- forward ---------------------------------------------------------

    def _as_batch(self, images) -> tuple[torch.Tensor, bool]:
        x = torch.as_tensor(images, dtype=self.dtype)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        if x.dim() != 4:
            raise ValueError(f"expected (B, H, W, C) images, got shape {tuple(x.shape)}")
        _, h, w, c = x.shape
        s = self.cfg.image_size
        if (h, w) != (s, s):
            raise ValueError(f"image is {h}x{w}, model expects {s}x{s}")
        if c != self.cfg.channels:
            raise ValueError(f"image has {c} channels, model expects {self.cfg.channels}")
        return x, single

    def patchify_and_embed(self, images) -> torch.Tensor:
        """Token sequence ``(B, N+1, d_model)`` with the CLS token at row 0."""
        x, single = self._as_batch(images)
        patches = self.patch_embed(x.permute(0, 3, 1, 2)).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(patches.shape[0], -1, -1)
        tokens = torch.cat([cls, patches], dim=1) + self.pos_embed
        return tokens[0] if single else tokens

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, images) -> torch.Tensor:
        x, single = self._as_batch(images)
        out = self.forward_tokens(self.patchify_and_embed(x))[:, 0]
        return out[0] if single else out

    # -- adapters --------------------------------------------------------

    def attach_lora(
        self,
        rank: int = 16,
        alpha: float = 16.0,
        mode: ScalingMode | str = ScalingMode.RANK_STABILIZED,
        per_head: bool = False,
        seed: int = 0,
    ) -> "ViTBackbone":
        """Freeze every base weight and wrap q and v of every block in adapters."""
        if self.lora_settings is not None:
            raise RuntimeError("adapters already attached")
        self.requires_grad_(False)
        heads = self.cfg.n_heads if per_head else 1
        for i, block in enumerate(self.blocks):
            for j, proj in enumerate(ADAPTED_PROJECTIONS):
                lin = getattr(block.attn, proj)
                setattr(
                    block.attn,
                    proj,
                    AdaptedLinear(
                        lin.weight, lin.bias, rank, alpha, mode, heads=heads, seed=seed * 1000 + 2 * i + j
                    ),
                )
        self.lora_settings = {
            "rank": rank,
            "alpha": float(alpha),
            "scaling_mode": ScalingMode(mode).value,
            "per_head": bool(per_head),
        }
        return self

    def adapted_layers(self):
        for i, block in enumerate(self.blocks):
            for proj in ADAPTED_PROJECTIONS:
                layer = getattr(block.attn, proj)
                if isinstance(layer, AdaptedLinear):
                    yield i, proj, layer

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for _, _, layer in self.adapted_layers() for a in layer.adapters for p in (a.A, a.B)]

    def adapter_state(self) -> dict[str, np.ndarray]:
        """Adapter arrays keyed ``<block>.<fused|h<i>>.<q|v>.<A|B>``."""
        out = {}
        for i, proj, layer in self.adapted_layers():
            for h, a in enumerate(layer.adapters):
                tag = f"h{h}" if layer.per_head else "fused"
                out[f"{i}.{tag}.{proj}.A"] = a.A.detach().cpu().numpy().copy()
                out[f"{i}.{tag}.{proj}.B"] = a.B.detach().cpu().numpy().copy()
        return out

    def load_adapter_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = set(self.adapter_state())
        missing = sorted(expected - set(arrays))
        if missing:
            raise KeyError(f"adapter arrays missing: {missing[:4]}")
        with torch.no_grad():
            for i, proj, layer in self.adapted_layers():
                for h, a in enumerate(layer.adapters):
                    tag = f"h{h}" if layer.per_head else "fused"
                    for name in ("A", "B"):
                        src = torch.as_tensor(arrays[f"{i}.{tag}.{proj}.{name}"])
                        dst = getattr(a, name)
                        if src.shape != dst.shape:
                            raise ValueError(
                                f"adapter {i}.{tag}.{proj}.{name}: shape {tuple(src.shape)} != {tuple(dst.shape)}"
                            )
                        dst.copy_(src)

    def merged(self) -> "ViTBackbone":
        """A copy with every adapter folded into its base weight; ``self`` is untouched."""
        out = copy.deepcopy(self)
        for block in out.blocks:
            for proj in ADAPTED_PROJECTIONS:
                layer = getattr(block.attn, proj)
                if isinstance(layer, AdaptedLinear):
                    setattr(block.attn, proj, layer.to_linear())
        out.lora_settings = None
        out.requires_grad_(False)
        return out

    def stripped(self) -> "ViTBackbone":
        """A copy with adapters dropped, i.e. the frozen base model."""
        out = copy.deepcopy(self)
        for block in out.blocks:
            for proj in ADAPTED_PROJECTIONS:
                layer = getattr(block.attn, proj)
                if isinstance(layer, AdaptedLinear):
                    lin = nn.Linear(layer.in_features, layer.out_features, bias=layer.bias is not None,
                                    dtype=layer.weight.dtype)
                    with torch.no_grad():
                        lin.weight.copy_(layer.weight)
                        if layer.bias is not None:
                            lin.bias.copy_(layer.bias)
                    setattr(block.attn, proj, lin)
        out.lora_settings = None
        return out

    # -- base weights ----------------------------------------------------

    def base_state(self) -> dict[str, np.ndarray]:
        """Frozen base weights under canonical names (adapters excluded)."""
        out = {}
        for name, p in self.named_parameters():
            if ".adapters." in name:
                continue
            out[name] = p.detach().cpu().numpy().copy()
        return out

    def fingerprint(self) -> str:
        return fingerprint(self.base_state())


def extract_embedding(image, backbone: ViTBackbone, normalize: bool = False) -> np.ndarray:
    """CLS embedding of one image (or a batch) in inference mode."""
    backbone.eval()
    with torch.no_grad():
        emb = backbone(image)
        if normalize:
            emb = F.normalize(emb, dim=-1, eps=1e-12)
    return emb.cpu().numpy()


# -- weight import / export ------------------------------------------------


class MissingParameterError(KeyError):
    pass


class ShapeConflictError(ValueError):
    pass


class FingerprintMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MappingRule:
    target: str
    source: str
    chunk: tuple[int, int] | None = None
    optional: bool = False


@dataclass
class MappingTable:
    """Target-name <- source-name translation, one rule per line.

    Line format: ``target source [chunk=j/n] [optional]``. ``{i}`` in either
    name expands over block indices. ``chunk=j/n`` takes the j-th of n equal
    slices along axis 0 (fused qkv tensors). Blank lines and ``#`` comments
    are ignored.
    """

    rules: list[MappingRule] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "MappingTable":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"mapping line {lineno}: expected 'target source [options]'")
            chunk, optional = None, False
            for opt in parts[2:]:
                if opt == "optional":
                    optional = True
                elif opt.startswith("chunk="):
                    j, n = opt[len("chunk="):].split("/")
                    chunk = (int(j), int(n))
                else:
                    raise ValueError(f"mapping line {lineno}: unknown option {opt!r}")
            rules.append(MappingRule(parts[0], parts[1], chunk, optional))
        return cls(rules)

    @classmethod
    def from_file(cls, path: str | Path) -> "MappingTable":
        return cls.parse(Path(path).read_text())

    @classmethod
    def builtin(cls, name: str) -> "MappingTable":
        """``"dinov2"`` or ``"clip"``; see the ``mappings/`` directory."""
        return cls.from_file(Path(__file__).parent / "mappings" / f"{name}.map")

    def expand(self, n_layers: int) -> list[MappingRule]:
        out = []
        for r in self.rules:
            if "{i}" in r.target:
                out.extend(
                    MappingRule(r.target.format(i=i), r.source.format(i=i), r.chunk, r.optional)
                    for i in range(n_layers)
                )
            else:
                out.append(r)
        return out


@dataclass
class LoadReport:
    fingerprint: str
    missing_optional: list[str]
    unused_source: list[str]
    interpolated: list[str]


def interpolate_pos_embed(table: np.ndarray, new_grid: int) -> np.ndarray:
    """Resize the patch rows of a ``(1, 1+g*g, d)`` table bicubically; row 0 (CLS) is kept."""
    table = np.asarray(table)
    t = torch.as_tensor(table.reshape(-1, table.shape[-1]), dtype=torch.float64)
    cls_row, grid_rows = t[:1], t[1:]
    old_grid = int(round(math.sqrt(grid_rows.shape[0])))
    if old_grid**2 != grid_rows.shape[0]:
        raise ShapeConflictError(f"positional table with {grid_rows.shape[0]} patch rows is not a square grid")
    img = grid_rows.T.reshape(1, -1, old_grid, old_grid)
    img = F.interpolate(img, size=(new_grid, new_grid), mode="bicubic", align_corners=False)
    out = torch.cat([cls_row, img.reshape(-1, new_grid * new_grid).T], dim=0)
    return out.numpy().astype(table.dtype)[None]


def _fit(name: str, src: np.ndarray, target_shape: tuple, cfg: ViTConfig, report: LoadReport) -> np.ndarray:
    if src.shape == target_shape:
        return src
    # leading singleton dims only (e.g. CLIP stores class/positional tables unbatched)
    if src.size == int(np.prod(target_shape)) and tuple(s for s in src.shape if s != 1) == tuple(
        s for s in target_shape if s != 1
    ):
        return src.reshape(target_shape)
    if name == "pos_embed" and src.shape[-1] == target_shape[-1]:
        report.interpolated.append(name)
        return interpolate_pos_embed(src, cfg.grid)
    raise ShapeConflictError(f"{name}: source shape {src.shape} does not match expected {target_shape}")


def load_backbone_weights(
    source: str | Path | Mapping[str, np.ndarray],
    cfg: ViTConfig,
    mapping: MappingTable | None = None,
    expected_fingerprint: str | None = None,
) -> tuple[ViTBackbone, LoadReport]:
    """Build a backbone from a named-array container.

    Without a mapping, source names must equal the canonical names. The
    returned report lists optional targets left at their initial values,
    source arrays nobody consumed, and the fingerprint of the loaded weights.
    """
    arrays = dict(load_container(source)[0]) if isinstance(source, (str, Path)) else dict(source)
    backbone = ViTBackbone(cfg, dtype=_dtype_of(arrays))
    targets = dict(backbone.named_parameters())
    rules = (
        mapping.expand(cfg.n_layers)
        if mapping is not None
        else [MappingRule(name, name) for name in targets]
    )
    report = LoadReport("", [], [], [])
    used: set[str] = set()
    loaded: dict[str, np.ndarray] = {}
    for rule in rules:
        if rule.target not in targets:
            raise KeyError(f"mapping names unknown target parameter {rule.target!r}")
        if rule.source not in arrays:
            if rule.optional:
                report.missing_optional.append(rule.target)
                continue
            raise MissingParameterError(f"required parameter {rule.target!r} (source {rule.source!r}) not found")
        src = np.asarray(arrays[rule.source])
        used.add(rule.source)
        if rule.chunk is not None:
            j, n = rule.chunk
            if src.shape[0] % n:
                raise ShapeConflictError(f"{rule.target}: axis 0 of {rule.source} not divisible into {n} chunks")
            step = src.shape[0] // n
            src = src[j * step:(j + 1) * step]
        loaded[rule.target] = _fit(rule.target, src, tuple(targets[rule.target].shape), cfg, report)
    unresolved = sorted(set(targets) - set(loaded) - set(report.missing_optional))
    if unresolved:
        raise MissingParameterError(f"required parameter {unresolved[0]!r} not provided by the mapping")
    with torch.no_grad():
        for name, arr in loaded.items():
            targets[name].copy_(torch.as_tensor(np.ascontiguousarray(arr)))
    backbone.requires_grad_(False)
    report.unused_source = sorted(set(arrays) - used)
    report.fingerprint = backbone.fingerprint()
    if expected_fingerprint is not None and expected_fingerprint != report.fingerprint:
        raise FingerprintMismatchError(
            f"backbone fingerprint {report.fingerprint[:12]} != expected {expected_fingerprint[:12]}"
        )
    return backbone, report


def _dtype_of(arrays: Mapping[str, np.ndarray]) -> torch.dtype:
    for arr in arrays.values():
        if np.asarray(arr).dtype == np.float64:
            return torch.float64
    return torch.float32


def save_backbone_weights(backbone: ViTBackbone, path: str | Path) -> Path:
    """Write the base weights; adapters must be merged or stripped first."""
    if backbone.lora_settings is not None:
        raise ValueError("backbone still carries adapters; merge() or stripped() it first")
    meta = {"kind": "backbone", "config": backbone.cfg.to_dict(), "fingerprint": backbone.fingerprint()}
    return save_container(path, backbone.base_state(), meta)


def config_from_container(path: str | Path) -> ViTConfig:
    _, meta = load_container(path)
    if "config" not in meta:
        raise KeyError(f"{path} carries no backbone config")
    return ViTConfig(**meta["config"])
