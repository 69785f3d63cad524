"""Image I/O, paired-dataset manifests, patch sampling and checkpoints.

Images are 8-bit RGB or grayscale PNG on disk and channel-first float
arrays in [0, 1] in memory. Checkpoints are a single self-describing binary
container (extension ``.tdir``) holding configs, parameter and optimizer
tensors, RNG states and the step counter; round trips are bit-exact.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CHECKPOINT_MAGIC = b"DIFR"
CHECKPOINT_VERSION = 1


class UnsupportedImageError(ValueError):
    """PNG with a bit depth or colour type outside the 8-bit RGB/gray contract."""


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB or grayscale PNG as float (C, H, W) in [0, 1]."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise UnsupportedImageError(f"{path}: only PNG input is supported")
        if im.mode not in ("RGB", "L"):
            raise UnsupportedImageError(
                f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit RGB or L)"
            )
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(img: np.ndarray, path) -> None:
    """Save float (C, H, W) values in [0, 1] as 8-bit PNG.

    Quantization is round-half-away-from-zero, so save(load(save(x)))
    reproduces the file bit-exactly.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {img.shape}")
    quant = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if quant.shape[0] == 1:
        pil = Image.fromarray(quant[0], mode="L")
    else:
        pil = Image.fromarray(quant.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


@dataclass
class PairManifest:
    """Matched (clean, degraded) file pairs with deterministic split tags."""

    pairs: list[tuple[Path, Path]]
    splits: list[str]
    unmatched: list[str] = field(default_factory=list)

    def subset(self, split: str) -> list[tuple[Path, Path]]:
        return [p for p, s in zip(self.pairs, self.splits) if s == split]

    def rows(self):
        for (clean, degraded), split in zip(self.pairs, self.splits):
            yield str(clean), str(degraded), split


def _split_of(name: str, ratios: tuple[float, float, float]) -> str:
    """Split assignment as a pure function of the filename hash."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    if u < ratios[0]:
        return "train"
    if u < ratios[0] + ratios[1]:
        return "val"
    return "test"


def build_manifest(
    clean_dir,
    degraded_dir,
    split_ratios: tuple[float, float, float] = (1.0, 0.0, 0.0),
) -> PairManifest:
    """Pair PNGs by filename across the two directories.

    Unmatched files are reported with a warning; an empty intersection is an
    error. Splits depend only on filenames and ratios, never on ordering.
    """
    clean_dir, degraded_dir = Path(clean_dir), Path(degraded_dir)
    for d in (clean_dir, degraded_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    if abs(sum(split_ratios) - 1.0) > 1e-9 or min(split_ratios) < 0.0:
        raise ValueError(f"split ratios must be >= 0 and sum to 1, got {split_ratios}")
    clean = {p.name for p in clean_dir.glob("*.png")}
    degraded = {p.name for p in degraded_dir.glob("*.png")}
    names = sorted(clean & degraded)
    unmatched = sorted(clean ^ degraded)
    if not names:
        raise FileNotFoundError(
            f"no filenames shared between {clean_dir} and {degraded_dir}"
        )
    if unmatched:
        warnings.warn(f"unpaired files skipped: {', '.join(unmatched)}", stacklevel=2)
    pairs = [(clean_dir / n, degraded_dir / n) for n in names]
    splits = [_split_of(n, split_ratios) for n in names]
    return PairManifest(pairs=pairs, splits=splits, unmatched=unmatched)


def _reflect_pad_to(img: np.ndarray, size: int) -> np.ndarray:
    c, h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")


def sample_patch(
    clean: np.ndarray,
    degraded: np.ndarray,
    size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Cut the same uniformly-placed size x size window from both images.

    Images smaller than `size` are reflect-padded first, so the offsets of
    the two crops always stay pixel-aligned.
    """
    if clean.shape != degraded.shape:
        raise ValueError(f"pair shape mismatch: {clean.shape} vs {degraded.shape}")
    clean = _reflect_pad_to(clean, size)
    degraded = _reflect_pad_to(degraded, size)
    _, h, w = clean.shape
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    window = (slice(None), slice(oy, oy + size), slice(ox, ox + size))
    return clean[window].copy(), degraded[window].copy()


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly."""

    denoiser_config: dict
    train_config: dict
    params: dict[str, torch.Tensor]
    adam_m: dict[str, torch.Tensor]
    adam_v: dict[str, torch.Tensor]
    adam_step: int
    step: int
    schedule_betas: list[float] | None = None
    numpy_rng_state: dict | None = None
    torch_rng_state: bytes | None = None


def _tensor_payload(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().numpy().astype("<f4", copy=False)
    return np.ascontiguousarray(arr).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file + rename); tensors as little-endian f32."""
    path = Path(path)
    groups = (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v))
    manifest = []
    payloads = []
    for kind, tensors in groups:
        for name, t in tensors.items():
            manifest.append({"kind": kind, "name": name, "shape": list(t.shape)})
            payloads.append(_tensor_payload(t))
    header = {
        "denoiser_config": ckpt.denoiser_config,
        "train_config": ckpt.train_config,
        "adam_step": ckpt.adam_step,
        "step": ckpt.step,
        "schedule_betas": ckpt.schedule_betas,
        "numpy_rng_state": ckpt.numpy_rng_state,
        "torch_rng_state": (
            base64.b64encode(ckpt.torch_rng_state).decode("ascii")
            if ckpt.torch_rng_state is not None
            else None
        ),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes))
    blob += header_bytes
    for p in payloads:
        blob += p
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}"
        )
    if len(data) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[16: 16 + header_len].decode("utf-8"))

    expected = sum(
        4 * int(np.prod(entry["shape"], dtype=np.int64, initial=1))
        for entry in header["tensors"]
    )
    if len(data) != 16 + header_len + expected:
        raise CheckpointError(
            f"{path}: payload is {len(data) - 16 - header_len} bytes, "
            f"expected {expected}"
        )

    offset = 16 + header_len
    groups: dict[str, dict[str, torch.Tensor]] = {
        "param": {}, "adam_m": {}, "adam_v": {},
    }
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64, initial=1))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        groups[entry["kind"]][entry["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        denoiser_config=header["denoiser_config"],
        train_config=header["train_config"],
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_step=header["adam_step"],
        step=header["step"],
        schedule_betas=header["schedule_betas"],
        numpy_rng_state=header["numpy_rng_state"],
        torch_rng_state=(
            base64.b64decode(header["torch_rng_state"])
            if header["torch_rng_state"] is not None
            else None
        ),
    )
