"""Frozen 2D image/text embedders and caption providers.

The embedders are consumed frozen: nothing in this module is ever handed to an
optimizer, and :func:`fingerprint` lets the training loop prove it.
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import os
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage

from .volume_io import BODY_KINDS, CaptionRecord, SliceSample, caption_text, kinds_in_labels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedderSpec:
    embed_dim: int = 512
    image_input_side: int = 16
    frozen: bool = True

    def __post_init__(self):
        if self.embed_dim <= 0 or self.image_input_side <= 0:
            raise ValueError("embed_dim and image_input_side must be positive")
        if not self.frozen:
            raise ValueError("embedders are always frozen")


@dataclass(frozen=True)
class FrozenWeightsFingerprint:
    digest: str


def fingerprint(params: Mapping[str, object] | torch.nn.Module) -> FrozenWeightsFingerprint:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    if isinstance(params, torch.nn.Module):
        params = params.state_dict()
    h = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(np.asarray(value))
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return FrozenWeightsFingerprint(h.hexdigest())


class DualEncoder(Protocol):
    spec: EmbedderSpec

    def embed_image(self, slice: SliceSample) -> np.ndarray: ...

    def embed_text(self, caption: CaptionRecord | str) -> np.ndarray: ...

    def state_dict(self) -> Mapping[str, object]: ...


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def resize_slice(pixels: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a square slice to ``side`` x ``side``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape == (side, side):
        return pixels
    factors = (side / pixels.shape[0], side / pixels.shape[1])
    return ndimage.zoom(pixels, factors, order=1, mode="nearest", grid_mode=True)


def char_ngrams(text: str, n: int = 3) -> list[str]:
    padded = f" {text.lower()} "
    grams = [padded[i:i + n] for i in range(len(padded) - n + 1)]
    return grams + text.lower().split()


def _hash_counts(tokens: Sequence[str], buckets: int) -> np.ndarray:
    counts = np.zeros(buckets)
    for t in tokens:
        counts[zlib.crc32(t.encode()) % buckets] += 1.0
    return counts


class MockDualEncoder:
    """Deterministic stand-in for a frozen CLIP-style dual encoder.

    Images: the slice is resized to ``image_input_side``, projected by a fixed
    seeded random matrix and squashed with ``tanh``.  A second term adds the
    text embedding of each body kind the slice appears to show, scored from
    connected-component shape statistics (fill ratio, aspect).  This keeps the
    image and text spaces aligned on the kind vocabulary, the way a fine-tuned
    CLIP would be.

    Text: hashed character trigram + word counts through a fixed random map,
    ``tanh``, unit normalization.
    """

    def __init__(self, spec: EmbedderSpec = EmbedderSpec(), seed: int = 1234,
                 ngram_buckets: int = 2048, concept_weight: float = 1.0,
                 foreground_threshold: float = 0.3):
        self.spec = spec
        self.ngram_buckets = ngram_buckets
        self.concept_weight = concept_weight
        self.foreground_threshold = foreground_threshold
        rng = np.random.default_rng(seed)
        pix = spec.image_input_side ** 2
        self.image_proj = rng.normal(0.0, 1.0 / np.sqrt(pix), size=(spec.embed_dim, pix))
        self.image_bias = rng.normal(0.0, 0.1, size=spec.embed_dim)
        self.text_proj = rng.normal(0.0, 1.0, size=(spec.embed_dim, ngram_buckets))
        for a in (self.image_proj, self.image_bias, self.text_proj):
            a.flags.writeable = False
        self._concepts = np.stack([self._text_vector(k) for k in BODY_KINDS])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"image_proj": self.image_proj, "image_bias": self.image_bias, "text_proj": self.text_proj}

    def _text_vector(self, text: str) -> np.ndarray:
        counts = _hash_counts(char_ngrams(text), self.ngram_buckets)
        counts /= np.sqrt(max(counts.sum(), 1.0))
        return _unit(np.tanh(self.text_proj @ counts))

    def kind_scores(self, pixels: np.ndarray) -> np.ndarray:
        """Soft evidence for (sphere, box, ellipsoid) from 2D blob shape."""
        mask = np.asarray(pixels) > self.foreground_threshold
        comps, n = ndimage.label(mask)
        scores = np.zeros(len(BODY_KINDS))
        for sl, k in zip(ndimage.find_objects(comps), range(1, n + 1)):
            area = float((comps[sl] == k).sum())
            if area < 4:
                continue
            h, w = sl[0].stop - sl[0].start, sl[1].stop - sl[1].start
            fill = area / (h * w)
            aspect = max(h, w) / min(h, w)
            boxiness = np.clip((fill - 0.80) / 0.15, 0.0, 1.0)
            elongation = np.clip((aspect - 1.25) / 0.75, 0.0, 1.0)
            weight = min(area / 16.0, 1.0)
            scores[1] = max(scores[1], weight * boxiness)
            scores[0] = max(scores[0], weight * (1 - boxiness) * (1 - elongation))
            scores[2] = max(scores[2], weight * (1 - boxiness) * elongation)
        return scores

    def embed_image(self, slice: SliceSample | np.ndarray) -> np.ndarray:
        pixels = slice.pixels if isinstance(slice, SliceSample) else np.asarray(slice)
        if not np.all(np.isfinite(pixels)):
            raise ValueError("slice pixels must be finite")
        small = resize_slice(pixels, self.spec.image_input_side).ravel()
        small = (small - 0.5) * 2.0
        base = np.tanh(self.image_proj @ small + self.image_bias)
        base = base / np.linalg.norm(base)
        concept = self.kind_scores(pixels) @ self._concepts
        return _unit(base + self.concept_weight * concept)

    def embed_text(self, caption: CaptionRecord | str) -> np.ndarray:
        text = caption.text if isinstance(caption, CaptionRecord) else caption
        if not text:
            raise ValueError("caption text must be non-empty")
        return self._text_vector(text)


class PretrainedDualEncoder:
    """Adapter over a Hugging Face ``CLIPModel``-compatible dual encoder.

    ``tokenizer`` maps a list of strings to a dict of input tensors; when
    omitted, the processor shipped with ``model_path`` is used.
    """

    def __init__(self, model=None, tokenizer: Optional[Callable] = None,
                 model_path: Optional[str] = None, image_input_side: Optional[int] = None):
        if model is None:
            from transformers import CLIPModel, CLIPTokenizer

            if model_path is None:
                raise ValueError("either model or model_path is required")
            model = CLIPModel.from_pretrained(model_path)
            tokenizer = tokenizer or CLIPTokenizer.from_pretrained(model_path)
        if tokenizer is None:
            raise ValueError("a tokenizer is required with an in-memory model")
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        side = image_input_side or model.config.vision_config.image_size
        self.spec = EmbedderSpec(embed_dim=model.config.projection_dim, image_input_side=side)

    def state_dict(self):
        return self.model.state_dict()

    @torch.no_grad()
    def embed_image(self, slice: SliceSample | np.ndarray) -> np.ndarray:
        pixels = slice.pixels if isinstance(slice, SliceSample) else np.asarray(slice)
        if not np.all(np.isfinite(pixels)):
            raise ValueError("slice pixels must be finite")
        small = resize_slice(pixels, self.spec.image_input_side)
        x = torch.as_tensor(small, dtype=torch.float32)[None, None].expand(1, 3, -1, -1)
        x = (x - 0.5) / 0.5
        param = next(self.model.parameters())
        feats = self.model.get_image_features(pixel_values=x.to(param.dtype))
        feats = getattr(feats, "pooler_output", feats)
        return _unit(feats[0].double().numpy())

    @torch.no_grad()
    def embed_text(self, caption: CaptionRecord | str) -> np.ndarray:
        text = caption.text if isinstance(caption, CaptionRecord) else caption
        if not text:
            raise ValueError("caption text must be non-empty")
        inputs = self.tokenizer([text])
        feats = self.model.get_text_features(**{k: torch.as_tensor(v) for k, v in inputs.items()})
        feats = getattr(feats, "pooler_output", feats)
        return _unit(feats[0].double().numpy())


# --------------------------------------------------------------------------
# caption providers
# --------------------------------------------------------------------------


class CaptionError(RuntimeError):
    pass


class CaptionNotFound(CaptionError, KeyError):
    def __init__(self, volume_id: str, plane: int, index: int):
        self.key = (volume_id, plane, index)
        super().__init__(f"no caption for volume_id={volume_id!r} plane={plane} index={index}")


class CaptionServiceError(CaptionError):
    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(f"{message} (last status: {status})")


class TemplateCaptioner:
    """Derives text from synthetic ground-truth label volumes keyed by volume id."""

    def __init__(self, labels: Mapping[str, np.ndarray]):
        self.labels = labels

    def caption(self, slice: SliceSample) -> CaptionRecord:
        lab = np.take(self.labels[slice.volume_id], slice.index, axis=slice.plane)
        return CaptionRecord(slice.volume_id, slice.plane, slice.index,
                             caption_text(slice.plane, slice.index, kinds_in_labels(lab)))


class ManifestCaptioner:
    """Looks up precomputed captions; a miss is an error, never a fallback."""

    def __init__(self, records: Sequence[CaptionRecord] | Mapping[tuple[str, int, int], str]):
        if isinstance(records, Mapping):
            self.index = dict(records)
        else:
            self.index = {}
            for r in records:
                if r.key in self.index:
                    raise ValueError(f"duplicate caption for {r.key}")
                self.index[r.key] = r.text

    def caption(self, slice: SliceSample) -> CaptionRecord:
        key = (slice.volume_id, slice.plane, slice.index)
        if key not in self.index:
            raise CaptionNotFound(*key)
        return CaptionRecord(*key, self.index[key])


def encode_png(pixels: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


DEFAULT_PROMPT = "Describe the anatomical content of this medical image slice."

_endpoint_locks: dict[str, threading.Semaphore] = {}
_endpoint_locks_guard = threading.Lock()


def _endpoint_semaphore(endpoint: str, limit: int) -> threading.Semaphore:
    with _endpoint_locks_guard:
        if endpoint not in _endpoint_locks:
            _endpoint_locks[endpoint] = threading.Semaphore(limit)
        return _endpoint_locks[endpoint]


class ExternalCaptioner:
    """HTTP client for an MLLM captioning service.

    POSTs ``{"image": <base64 PNG>, "prompt": ...}`` and expects ``{"text": ...}``.
    Endpoint and bearer token default to ``CAPTION_ENDPOINT`` / ``CAPTION_TOKEN``.
    """

    def __init__(self, endpoint: Optional[str] = None, token: Optional[str] = None,
                 prompt: str = DEFAULT_PROMPT, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 30.0, max_concurrency: int = 1, transport=None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint or os.environ.get("CAPTION_ENDPOINT")
        if not self.endpoint:
            raise ValueError("no captioner endpoint configured (set CAPTION_ENDPOINT)")
        self.token = token if token is not None else os.environ.get("CAPTION_TOKEN")
        self.prompt = prompt
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.transport = transport
        self.sleep = sleep
        self._sem = _endpoint_semaphore(self.endpoint, max_concurrency)

    def _post(self, payload: dict):
        import httpx

        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
            return client.post(self.endpoint, json=payload, headers=headers)

    def caption(self, slice: SliceSample) -> CaptionRecord:
        import httpx

        payload = {"image": encode_png(slice.pixels), "prompt": self.prompt}
        status = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._sem:
                    resp = self._post(payload)
            except httpx.HTTPError as exc:
                logger.warning("captioner request failed (attempt %d): %s", attempt + 1, exc)
                continue
            status = resp.status_code
            if status == 200:
                text = resp.json().get("text", "")
                if text:
                    return CaptionRecord(slice.volume_id, slice.plane, slice.index, text)
                raise CaptionServiceError("captioner returned empty text", status)
            logger.warning("captioner returned HTTP %d (attempt %d)", status, attempt + 1)
        raise CaptionServiceError(f"captioner failed after {self.retries + 1} attempts", status)


def provide_caption(slice: SliceSample, backend) -> CaptionRecord:
    return backend.caption(slice)
