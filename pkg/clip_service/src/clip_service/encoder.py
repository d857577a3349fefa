"""Encoder backends producing unit-norm 512-d embeddings.

ClipEncoder wraps the ViT-B/32 vision-language model; DeterministicEncoder
is a dependency-free stand-in with the same output contract, used where
model weights are unavailable (CI, protocol tests).
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image

EMBED_DIM = 512


class BadImage(Exception):
    pass


def _normalize(vec: np.ndarray) -> list[float]:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(vec))
    if norm <= 0 or not np.isfinite(norm):
        raise ValueError("degenerate embedding")
    return (vec / norm).tolist()


def decode_image(data: bytes) -> Image.Image:
    try:
        image = Image.open(io.BytesIO(data))
        image.load()
        return image.convert("RGB")
    except Exception as exc:
        raise BadImage(str(exc)) from exc


class ClipEncoder:
    """ViT-B/32 text and image towers, eval mode, CPU by default.

    Images go through the model's standard preprocessing (resize + center
    crop to 224, channel normalization), so the engine's 224-px frames pass
    through unresized.
    """

    model_name = "clip-vit-b32"
    _hub_id = "openai/clip-vit-base-patch32"

    def __init__(self, device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(self._hub_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(self._hub_id)
        self.device = device

    def embed_text(self, text: str) -> list[float]:
        inputs = self.processor(
            text=[text], return_tensors="pt", padding=True, truncation=True
        ).to(self.device)
        with self._torch.no_grad():
            features = self.model.get_text_features(**inputs)
        return _normalize(features[0].cpu().numpy())

    def embed_image(self, png_bytes: bytes) -> list[float]:
        image = decode_image(png_bytes)
        inputs = self.processor(images=image, return_tensors="pt").to(
            self.device
        )
        with self._torch.no_grad():
            features = self.model.get_image_features(**inputs)
        return _normalize(features[0].cpu().numpy())


class DeterministicEncoder:
    """Hash-based stand-in with the exact output contract of ClipEncoder."""

    model_name = "deterministic-stub"

    def _expand(self, tag: bytes, payload: bytes) -> list[float]:
        digest = hashlib.shake_256(tag + b"\x00" + payload).digest(
            EMBED_DIM * 2
        )
        values = np.frombuffer(digest, dtype=np.uint16).astype(np.float64)
        return _normalize(values / 32767.5 - 1.0)

    def embed_text(self, text: str) -> list[float]:
        return self._expand(b"text", text.encode("utf-8"))

    def embed_image(self, png_bytes: bytes) -> list[float]:
        # decode so invalid payloads fail the same way as the real model,
        # and hash pixels (not bytes) so re-encoded PNGs embed identically
        image = decode_image(png_bytes).resize((32, 32))
        return self._expand(b"image", image.tobytes())


def load_encoder(name: str = "clip"):
    if name == "clip":
        return ClipEncoder()
    if name == "deterministic":
        return DeterministicEncoder()
    raise ValueError(f"unknown encoder {name!r}")
