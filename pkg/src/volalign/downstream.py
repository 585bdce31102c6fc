"""Fine-tuning harnesses for 3D segmentation and classification, and the data-efficiency sweep."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .alignment import load_encoder
from .encoder import EncoderConfig, ReferenceEncoder3D, VolumeEncoder, as_batch
from .volume_io import BODY_KINDS, SyntheticDataset

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5
CLASS_NAMES = ("background",) + BODY_KINDS


# --------------------------------------------------------------------------
# losses and metrics
# --------------------------------------------------------------------------


def _check_labels(labels: torch.Tensor, k: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), found range [{int(labels.min())}, {int(labels.max())}]")


def soft_dice_per_class(probs: torch.Tensor, onehot: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """(2 sum(p*g) + eps) / (sum(p) + sum(g) + eps) per class, pooled over batch and voxels."""
    dims = [0] + list(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return (2 * inter + eps) / (denom + eps)


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, return_parts: bool = False):
    """0.5 * voxel-mean cross-entropy + 0.5 * (1 - mean foreground soft Dice).

    ``logits`` is (B, K, ...) and ``labels`` (B, ...) with integer classes.
    """
    k = logits.shape[1]
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    labels = labels.long()
    _check_labels(labels, k)
    ce = F.cross_entropy(logits, labels)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels, k).movedim(-1, 1).to(probs.dtype)
    dice = soft_dice_per_class(probs, onehot)[1:].mean() if k > 1 else probs.new_tensor(1.0)
    total = 0.5 * ce + 0.5 * (1 - dice)
    if return_parts:
        return total, ce, dice
    return total


def dice_score(pred: np.ndarray, true: np.ndarray, k: int) -> float:
    """Hard Dice 2|P∩G| / (|P|+|G|) for class ``k``; 1.0 when both sets are empty."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    p = pred == k
    g = true == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Rank-based AUC (Mann-Whitney U), ties counted half; None for a single-class set."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def accuracy(pred: Sequence[int], labels: Sequence[int]) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return float((pred == labels).mean()) if len(labels) else float("nan")


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class SkipDecoder(nn.Module):
    """Lightweight UNETR-style decoder.

    The deepest token grid is upsampled by transposed convolutions, one factor
    of two per level.  At each intermediate level an earlier encoder tap is
    projected and trilinearly upsampled as the skip; the full-resolution level
    uses a convolution of the raw volume instead.
    """

    def __init__(self, channels: int, patch_size: int, depth: int, num_classes: int, base: int = 8):
        super().__init__()
        levels = int(round(math.log2(patch_size)))
        if 2 ** levels != patch_size:
            raise ValueError(f"patch_size must be a power of two, got {patch_size}")
        self.levels = levels
        widths = [base * 2 ** (levels - l) for l in range(1, levels + 1)]  # coarse -> fine
        self.skip_taps = [max(depth - l, 1) for l in range(1, levels)]
        self.input_block = _conv_block(1, widths[-1])
        self.ups = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.fuse = nn.ModuleList()
        cin = channels
        for l, w in enumerate(widths, 1):
            self.ups.append(nn.ConvTranspose3d(cin, w, kernel_size=2, stride=2))
            if l < levels:
                self.skips.append(nn.Conv3d(channels, w, kernel_size=1))
            self.fuse.append(_conv_block(2 * w, w))
            cin = w
        self.head = nn.Conv3d(widths[-1], num_classes, kernel_size=1)

    @property
    def taps(self) -> list[int]:
        return sorted(set(self.skip_taps))

    def forward(self, x: torch.Tensor, features: dict[int, torch.Tensor], deepest: torch.Tensor) -> torch.Tensor:
        h = deepest
        for l in range(1, self.levels + 1):
            h = self.ups[l - 1](h)
            if l < self.levels:
                skip = self.skips[l - 1](features[self.skip_taps[l - 1]])
                skip = F.interpolate(skip, size=h.shape[-3:], mode="trilinear", align_corners=False)
            else:
                skip = self.input_block(x)
            h = self.fuse[l - 1](torch.cat([h, skip], dim=1))
        return self.head(h)


class SegmentationNet(nn.Module):
    def __init__(self, encoder: ReferenceEncoder3D, num_classes: int, base: int = 8):
        super().__init__()
        cfg = encoder.config
        self.encoder = encoder
        self.decoder = SkipDecoder(cfg.channels, cfg.patch_size, cfg.depth, num_classes, base)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x[:, None]
        depth = self.encoder.config.depth
        taps = sorted(set(self.decoder.taps) | {depth})
        grids = self.encoder.multi_scale_features(x, taps)
        features = dict(zip(taps, grids))
        return self.decoder(x, features, features[depth])


class ClassificationNet(nn.Module):
    def __init__(self, encoder: VolumeEncoder, num_classes: int = 2):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.channels, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x).mean(dim=1))


# --------------------------------------------------------------------------
# harnesses
# --------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    fraction: float = 1.0
    seed: int = 0
    freeze_encoder: bool = False
    encoder_lr: Optional[float] = None  # None: same as learning_rate
    decoder_base: int = 8
    eval_split: str = "test"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegResult:
    per_class: dict[str, float]
    mean_dice: float
    train_size: int
    final_loss: float
    losses: list[float] = field(default_factory=list)


@dataclass
class ClsResult:
    accuracy: float
    auc: Optional[float]
    train_size: int
    final_loss: float
    losses: list[float] = field(default_factory=list)


def subsample(indices: Sequence[int], fraction: float, seed: int,
              strata: Optional[Sequence[int]] = None) -> list[int]:
    """Deterministic (optionally stratified) subset of ``indices`` of size ~fraction * n."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    indices = list(indices)
    n_keep = int(round(fraction * len(indices)))
    if n_keep == 0:
        raise ValueError(f"fraction {fraction} of {len(indices)} volumes leaves no training data")
    if fraction == 1:
        return indices
    rng = np.random.default_rng([seed, int(round(fraction * 1e6))])
    if strata is None:
        return sorted(rng.choice(indices, size=n_keep, replace=False).tolist())
    groups: dict[int, list[int]] = {}
    for i, s in zip(indices, strata):
        groups.setdefault(int(s), []).append(i)
    keys = sorted(groups)
    quotas = {k: len(groups[k]) * n_keep / len(indices) for k in keys}
    take = {k: int(math.floor(q)) for k, q in quotas.items()}
    # largest remainders fill the gap
    for k in sorted(keys, key=lambda k: -(quotas[k] - take[k]))[: n_keep - sum(take.values())]:
        take[k] += 1
    out = []
    for k in keys:
        if take[k]:
            out.extend(rng.choice(groups[k], size=take[k], replace=False).tolist())
    return sorted(out)


def _initial_encoder(init, encoder_config: EncoderConfig, seed: int) -> ReferenceEncoder3D:
    torch.manual_seed(seed)
    if init is None or init == "scratch":
        return ReferenceEncoder3D(encoder_config)
    if isinstance(init, nn.Module):
        enc = ReferenceEncoder3D(init.config)
        enc.load_state_dict(init.state_dict())
        return enc
    return load_encoder(init, expected=encoder_config)


def _train_indices(dataset: SyntheticDataset, fraction: float, seed: int, stratify: bool = True) -> list[int]:
    train = dataset.indices("train")
    strata = [dataset.class_labels[i] for i in train] if stratify else None
    if strata is not None and min(strata) < 0:
        strata = None
    return subsample(train, fraction, seed, strata)


def _batch_order(n: int, steps: int, batch_size: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng([seed, 17])
    order: list[int] = []
    while len(order) < steps * batch_size:
        order.extend(rng.permutation(n).tolist())
    return [order[s * batch_size:(s + 1) * batch_size] for s in range(steps)]


def _optimizer(model: nn.Module, encoder: nn.Module, cfg: FinetuneConfig) -> torch.optim.Optimizer:
    if cfg.freeze_encoder:
        for p in encoder.parameters():
            p.requires_grad_(False)
    enc_ids = {id(p) for p in encoder.parameters()}
    head = [p for p in model.parameters() if p.requires_grad and id(p) not in enc_ids]
    groups = [{"params": head}]
    enc = [p for p in encoder.parameters() if p.requires_grad]
    if enc:
        lr = cfg.learning_rate if cfg.encoder_lr is None else cfg.encoder_lr
        groups.append({"params": enc, "lr": lr})
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def build_segmentation_model(init, encoder_config: EncoderConfig, num_classes: int,
                             cfg: FinetuneConfig) -> SegmentationNet:
    encoder = _initial_encoder(init, encoder_config, cfg.seed)
    torch.manual_seed(cfg.seed + 7919)
    return SegmentationNet(encoder, num_classes, base=cfg.decoder_base)


@torch.no_grad()
def predict_labels(model: SegmentationNet, volumes, batch_size: int = 4) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(volumes), batch_size):
        out.append(model(as_batch(volumes[i:i + batch_size])).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def fine_tune_segmentation(init, dataset: SyntheticDataset, config: FinetuneConfig = FinetuneConfig(),
                           encoder_config: Optional[EncoderConfig] = None,
                           num_classes: int = len(CLASS_NAMES)) -> SegResult:
    """Train encoder + skip decoder with :func:`seg_loss`, report pooled test-split Dice.

    ``init`` is a checkpoint path, an encoder module, or ``None``/"scratch".
    """
    side = dataset.volumes[0].side
    encoder_config = encoder_config or EncoderConfig(side=side)
    idx = _train_indices(dataset, config.fraction, config.seed)
    present = set(np.unique(np.concatenate([np.unique(dataset.labels[i]) for i in idx])).tolist())
    for k in range(1, num_classes):
        if k not in present:
            warnings.warn(f"class {k} ({_class_name(k)}) never appears in the training subset")
    model = build_segmentation_model(init, encoder_config, num_classes, config)
    opt = _optimizer(model, model.encoder, config)
    losses = []
    model.train()
    for batch in _batch_order(len(idx), config.steps, config.batch_size, config.seed):
        sel = [idx[b] for b in batch]
        x = as_batch([dataset.volumes[i] for i in sel])
        y = torch.as_tensor(np.stack([dataset.labels[i] for i in sel]))
        loss = seg_loss(model(x), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    test = dataset.indices(config.eval_split)
    pred = predict_labels(model, [dataset.volumes[i] for i in test])
    true = np.stack([dataset.labels[i] for i in test]) if test else pred
    per_class = {_class_name(k): dice_score(pred, true, k) for k in range(1, num_classes)}
    mean = float(np.mean(list(per_class.values())))
    return SegResult(per_class, mean, len(idx), losses[-1] if losses else float("nan"), losses)


def _class_name(k: int) -> str:
    return CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class_{k}"


def fine_tune_classification(init, dataset: SyntheticDataset, config: FinetuneConfig = FinetuneConfig(),
                             encoder_config: Optional[EncoderConfig] = None) -> ClsResult:
    """Mean-pooled tokens -> linear 2-class head, cross-entropy; accuracy and AUC on the test split."""
    if not dataset.class_labels or min(dataset.class_labels) < 0:
        raise ValueError("classification needs a binary class label for every volume")
    side = dataset.volumes[0].side
    encoder_config = encoder_config or EncoderConfig(side=side)
    idx = _train_indices(dataset, config.fraction, config.seed)
    encoder = _initial_encoder(init, encoder_config, config.seed)
    torch.manual_seed(config.seed + 7919)
    model = ClassificationNet(encoder)
    opt = _optimizer(model, encoder, config)
    losses = []
    model.train()
    for batch in _batch_order(len(idx), config.steps, config.batch_size, config.seed):
        sel = [idx[b] for b in batch]
        x = as_batch([dataset.volumes[i] for i in sel])
        y = torch.as_tensor([dataset.class_labels[i] for i in sel])
        loss = F.cross_entropy(model(x), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    test = dataset.indices(config.eval_split)
    model.eval()
    with torch.no_grad():
        probs = torch.softmax(model(as_batch([dataset.volumes[i] for i in test])), dim=1)[:, 1].numpy()
    y_true = [dataset.class_labels[i] for i in test]
    auc = roc_auc(probs, y_true)
    if auc is None:
        logger.warning("test split holds a single class; AUC is undefined")
    return ClsResult(accuracy((probs >= 0.5).astype(int), y_true), auc, len(idx),
                     losses[-1] if losses else float("nan"), losses)


# --------------------------------------------------------------------------
# data efficiency
# --------------------------------------------------------------------------


@dataclass
class EfficiencyPoint:
    fraction: float
    mean: float
    std: float
    values: list[float]


@dataclass
class EfficiencyCurve:
    label: str
    points: list[EfficiencyPoint]

    def __post_init__(self):
        fr = [p.fraction for p in self.points]
        if any(b <= a for a, b in zip(fr, fr[1:])) or any(not 0 < f <= 1 for f in fr):
            raise ValueError(f"fractions must be strictly increasing in (0, 1], got {fr}")


def data_efficiency_sweep(checkpoint, dataset: SyntheticDataset, fractions: Sequence[float],
                          seeds: Sequence[int], config: FinetuneConfig = FinetuneConfig(),
                          encoder_config: Optional[EncoderConfig] = None
                          ) -> tuple[EfficiencyCurve, EfficiencyCurve]:
    """Mean +- std test Dice per training fraction, pre-trained init vs scratch."""
    if len(seeds) < 2:
        raise ValueError("at least two seeds are needed for a standard deviation")
    fractions = sorted(float(f) for f in fractions)
    for f in fractions:
        _train_indices(dataset, f, seeds[0])  # reject empty subsets before any training
    curves = {}
    for label, init in (("pretrained", checkpoint), ("scratch", None)):
        points = []
        for f in fractions:
            vals = []
            for s in seeds:
                cfg = FinetuneConfig(**{**config.to_dict(), "fraction": f, "seed": int(s)})
                res = fine_tune_segmentation(init, dataset, cfg, encoder_config)
                logger.info("%s fraction=%.2f seed=%d dice=%.4f", label, f, s, res.mean_dice)
                vals.append(res.mean_dice)
            points.append(EfficiencyPoint(f, float(np.mean(vals)), float(np.std(vals, ddof=1)), vals))
        curves[label] = EfficiencyCurve(label, points)
    return curves["pretrained"], curves["scratch"]


def write_efficiency_csv(path: str | Path, curves: Sequence[EfficiencyCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["init", "fraction", "mean_dice", "std_dice", "values"])
        for c in curves:
            for p in c.points:
                w.writerow([c.label, p.fraction, p.mean, p.std, ";".join(repr(v) for v in p.values)])


def plot_efficiency(path: str | Path, curves: Sequence[EfficiencyCurve]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in curves:
        x = [100 * p.fraction for p in c.points]
        y = [100 * p.mean for p in c.points]
        e = [100 * p.std for p in c.points]
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=c.label)
    ax.set_xlabel("training data (%)")
    ax.set_ylabel("mean Dice (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def write_dice_csv(path: str | Path, result: SegResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "dice"])
        for name, v in result.per_class.items():
            w.writerow([name, repr(v)])
        w.writerow(["mean", repr(result.mean_dice)])


def write_cls_csv(path: str | Path, result: ClsResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["accuracy", repr(result.accuracy)])
        w.writerow(["auc", "" if result.auc is None else repr(result.auc)])
