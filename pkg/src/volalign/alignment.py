"""Contrastive alignment of volume embeddings with frozen slice/text embeddings."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .checkpoint import (
    CheckpointError,
    check_config,
    load_module_state,
    load_optimizer_state,
    read_checkpoint,
    save_checkpoint,
)
from .embedders import DualEncoder, TemplateCaptioner, fingerprint
from .encoder import EncoderConfig, ReferenceEncoder3D, as_batch
from .psat import PSAT, PsatConfig, psat_forward
from .volume_io import VolumeRecord, extract_slice, sample_position

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-3


class TrainingError(RuntimeError):
    pass


class FrozenContractError(TrainingError):
    pass


@dataclass
class EmbeddingTriplet:
    h_v: np.ndarray
    h_i: np.ndarray
    h_t: np.ndarray
    plane: int
    index: int
    volume_id: str

    def __post_init__(self):
        for name in ("h_v", "h_i", "h_t"):
            n = float(np.linalg.norm(getattr(self, name)))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"{name} has norm {n}, expected 1")


@dataclass
class PretrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 30
    weight_decay: float = 0.01
    temperature_init: float = 0.07
    use_query_transformer: bool = True
    use_pspe: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: the loss needs in-batch negatives")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("learning_rate must be positive and epochs non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit_rows(x: torch.Tensor, name: str) -> None:
    dev = (x.norm(dim=-1) - 1.0).abs().max().item()
    if dev > NORM_TOLERANCE:
        raise ValueError(f"rows of {name} must be unit norm (max deviation {dev:.3g})")


def contrastive_loss(a: torch.Tensor, b: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over logits ``a @ b.T / temperature``; diagonal pairs are positives."""
    temperature = torch.as_tensor(temperature, dtype=a.dtype)
    if not (temperature > 0).all():
        raise ValueError(f"temperature must be positive, got {temperature.item()}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_unit_rows(a, "A")
    _check_unit_rows(b, "B")
    logits = a @ b.T / temperature
    target = torch.arange(a.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def alignment_objective(h_v: torch.Tensor, h_i: torch.Tensor, h_t: torch.Tensor, temperature,
                        return_parts: bool = False):
    """Equal-weight average of the volume-slice and volume-text contrastive losses."""
    if h_v.shape[0] < 2:
        raise ValueError("alignment needs a batch of at least 2 triplets")
    loss_vi = contrastive_loss(h_v, h_i, temperature)
    loss_vt = contrastive_loss(h_v, h_t, temperature)
    total = 0.5 * loss_vi + 0.5 * loss_vt
    if return_parts:
        return total, loss_vi, loss_vt
    return total


def triplet_objective(triplets: Sequence[EmbeddingTriplet], temperature) -> torch.Tensor:
    stack = lambda name: torch.as_tensor(np.stack([getattr(t, name) for t in triplets]))  # noqa: E731
    return alignment_objective(stack("h_v"), stack("h_i"), stack("h_t"), temperature)


@dataclass
class LossRecord:
    step: int
    total_loss: float
    loss_vi: float
    loss_vt: float
    tau: float


def write_loss_trace(path: str | Path, trace: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "total_loss", "loss_vi", "loss_vt", "tau"])
        for r in trace:
            w.writerow([r.step, repr(r.total_loss), repr(r.loss_vi), repr(r.loss_vt), repr(r.tau)])


def read_loss_trace(path: str | Path) -> list[LossRecord]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), float(r["total_loss"]), float(r["loss_vi"]),
                       float(r["loss_vt"]), float(r["tau"])) for r in rows]


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


class Pretrainer:
    """Owns the trainable state (encoder, PSAT, log-temperature) and the AdamW optimizer.

    Data order is a pure function of ``(seed, global step)``, so a resumed run
    sees exactly the batches an uninterrupted one would.
    """

    def __init__(self, volumes: Sequence[VolumeRecord], embedder: DualEncoder, captioner,
                 encoder_config: EncoderConfig = EncoderConfig(), psat_config: Optional[PsatConfig] = None,
                 config: PretrainConfig = PretrainConfig(), encoder: Optional[nn.Module] = None):
        if not volumes:
            raise ValueError("pre-training needs a non-empty dataset")
        self.volumes = list(volumes)
        self.embedder = embedder
        self.captioner = captioner
        self.config = config
        psat_config = psat_config or PsatConfig(dim=embedder.spec.embed_dim)
        psat_config = replace(psat_config, use_query_transformer=config.use_query_transformer,
                              use_pspe=config.use_pspe)
        if psat_config.dim != embedder.spec.embed_dim:
            raise ValueError(f"PSAT dim {psat_config.dim} != embedder dim {embedder.spec.embed_dim}")
        self.encoder_config = encoder_config
        self.psat_config = psat_config
        torch.manual_seed(config.seed)
        self.encoder = encoder if encoder is not None else ReferenceEncoder3D(encoder_config)
        self.psat = PSAT(psat_config, token_dim=encoder_config.channels, num_slices=encoder_config.side)
        self.log_tau = nn.Parameter(torch.tensor(math.log(config.temperature_init)))
        self.optimizer = torch.optim.AdamW(self.trainable_parameters(), lr=config.learning_rate,
                                           weight_decay=config.weight_decay)
        self.step = 0
        self.trace: list[LossRecord] = []
        self.frozen_digest = fingerprint(embedder.state_dict())
        self._cache: dict[tuple[str, int, int], tuple[np.ndarray, np.ndarray]] = {}

    # -- parameters ---------------------------------------------------------

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [*self.encoder.parameters(), *self.psat.parameters(), self.log_tau]

    def named_trainables(self) -> dict[str, nn.Parameter]:
        named = {f"encoder/{n}": p for n, p in self.encoder.named_parameters()}
        named.update({f"psat/{n}": p for n, p in self.psat.named_parameters()})
        named["extra/log_tau"] = self.log_tau
        return named

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_tau.exp()

    # -- data ---------------------------------------------------------------

    @property
    def batches_per_epoch(self) -> int:
        n, bs = len(self.volumes), self.config.batch_size
        full, rem = divmod(n, bs)
        return full + (1 if rem >= 2 else 0)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.batches_per_epoch

    def batch_for_step(self, step: int) -> tuple[list[int], list[tuple[int, int]]]:
        """Volume indices and one random slice position per volume."""
        epoch, b = divmod(step, self.batches_per_epoch)
        perm = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.volumes))
        bs = self.config.batch_size
        idx = perm[b * bs:(b + 1) * bs].tolist()
        rng = np.random.default_rng([self.config.seed, epoch, b, 1])
        return idx, [sample_position(self.volumes[i].side, rng) for i in idx]

    def target_embeddings(self, vol: VolumeRecord, plane: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        key = (vol.id, plane, index)
        if key not in self._cache:
            sl = extract_slice(vol, plane, index)
            cap = self.captioner.caption(sl)
            self._cache[key] = (self.embedder.embed_image(sl), self.embedder.embed_text(cap))
        return self._cache[key]

    # -- training -----------------------------------------------------------

    def forward_batch(self, idx: Sequence[int], positions: Sequence[tuple[int, int]]):
        dtype = self.log_tau.dtype
        vols = [self.volumes[i] for i in idx]
        targets = [self.target_embeddings(v, p, j) for v, (p, j) in zip(vols, positions)]
        h_i = torch.as_tensor(np.stack([t[0] for t in targets]), dtype=dtype)
        h_t = torch.as_tensor(np.stack([t[1] for t in targets]), dtype=dtype)
        h_i, h_t = F.normalize(h_i, dim=-1), F.normalize(h_t, dim=-1)
        tokens = self.encoder(as_batch(vols).to(dtype))
        planes = torch.tensor([p for p, _ in positions])
        indices = torch.tensor([j for _, j in positions])
        h_v = psat_forward(self.psat, tokens, planes, indices)
        return alignment_objective(h_v, h_i, h_t, self.temperature, return_parts=True)

    def _param_report(self) -> str:
        norms = {n: float(p.detach().norm()) for n, p in self.named_trainables().items()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
        nonfinite = [n for n, v in norms.items() if not math.isfinite(v)]
        return f"non-finite params: {nonfinite[:5]}; largest norms: {worst[:3]}"

    def train_step(self) -> LossRecord:
        self.encoder.train()
        self.psat.train()
        idx, positions = self.batch_for_step(self.step)
        total, loss_vi, loss_vt = self.forward_batch(idx, positions)
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at step {self.step}; {self._param_report()}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        rec = LossRecord(self.step, total.item(), loss_vi.item(), loss_vt.item(), self.temperature.item())
        self.trace.append(rec)
        self.step += 1
        return rec

    def verify_frozen(self) -> None:
        now = fingerprint(self.embedder.state_dict())
        if now != self.frozen_digest:
            raise FrozenContractError(
                f"frozen embedder weights changed: {self.frozen_digest.digest[:12]} -> {now.digest[:12]}"
            )

    def train(self, num_steps: Optional[int] = None, out_dir: Optional[str | Path] = None) -> list[LossRecord]:
        """Run ``num_steps`` more steps (default: until the configured epochs finish)."""
        end = self.total_steps if num_steps is None else self.step + num_steps
        every = self.config.checkpoint_every
        while self.step < end:
            rec = self.train_step()
            if rec.step % 10 == 0:
                logger.info("step %d loss %.4f tau %.4f", rec.step, rec.total_loss, rec.tau)
            if out_dir is not None and every and self.step % every == 0:
                self.save(Path(out_dir) / f"checkpoint_{self.step:06d}.npz")
        self.verify_frozen()
        return self.trace

    # -- persistence ----------------------------------------------------------

    def meta(self) -> dict:
        return {
            "version": __version__,
            "step": self.step,
            "encoder_config": self.encoder_config.to_dict(),
            "psat_config": self.psat_config.to_dict(),
            "pretrain_config": self.config.to_dict(),
            "embedder_fingerprint": self.frozen_digest.digest,
            "ablation": self.psat_config.ablation,
        }

    def save(self, path: str | Path) -> Path:
        names = {id(p): n for n, p in self.named_trainables().items()}
        return save_checkpoint(path, modules={"encoder": self.encoder, "psat": self.psat},
                               extra={"log_tau": self.log_tau}, meta=self.meta(),
                               optimizer=self.optimizer, param_names=names)

    def load(self, path: str | Path) -> None:
        meta, arrays = read_checkpoint(path)
        check_config(meta, "encoder_config", self.encoder_config.to_dict())
        check_config(meta, "psat_config", self.psat_config.to_dict())
        load_module_state(self.encoder, arrays, "encoder")
        load_module_state(self.psat, arrays, "psat")
        with torch.no_grad():
            self.log_tau.copy_(torch.as_tensor(arrays["extra/log_tau"]))
        names = {id(p): n for n, p in self.named_trainables().items()}
        load_optimizer_state(self.optimizer, arrays, names)
        self.step = int(meta["step"])


def pretrain(volumes: Sequence[VolumeRecord], embedder: DualEncoder, captioner=None,
             encoder_config: EncoderConfig = EncoderConfig(), psat_config: Optional[PsatConfig] = None,
             config: PretrainConfig = PretrainConfig(), out_dir: Optional[str | Path] = None,
             labels: Optional[dict] = None) -> tuple[Pretrainer, list[LossRecord]]:
    """Run a full pre-training job; writes ``final.npz`` and ``loss_trace.csv`` under ``out_dir``."""
    if captioner is None:
        if labels is None:
            raise ValueError("either a captioner or ground-truth labels are required")
        captioner = TemplateCaptioner(labels)
    trainer = Pretrainer(volumes, embedder, captioner, encoder_config, psat_config, config)
    trace = trainer.train(out_dir=out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save(out / "final.npz")
        write_loss_trace(out / "loss_trace.csv", trace)
    return trainer, trace


def load_encoder(path: str | Path, expected: Optional[EncoderConfig] = None) -> ReferenceEncoder3D:
    """Rebuild the reference encoder from any pre-training checkpoint."""
    meta, arrays = read_checkpoint(path)
    if "encoder_config" not in meta:
        raise CheckpointError(f"{path} holds no encoder")
    cfg = EncoderConfig(**meta["encoder_config"])
    if expected is not None:
        check_config(meta, "encoder_config", expected.to_dict())
    enc = ReferenceEncoder3D(cfg)
    load_module_state(enc, arrays, "encoder")
    return enc
