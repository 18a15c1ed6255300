"""Pluggable segmentation and deblurring adapters.

The pipeline only needs two behaviors: split an RGB image into class-agnostic
instance regions, and sharpen a blurry RGB image. Built-in kinds keep runs
hermetic and deterministic; heavyweight pretrained models (class-agnostic
segmenters, learned deblurrers) attach behind the same handles as external
subprocess backends exchanging image files.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import BackendError, InvalidArgument
from .mapping import SegmentMask

_SEGMENTER_KINDS = ("oracle", "external")
_DEBLURRER_KINDS = ("identity", "unsharp", "external")


@dataclass(frozen=True)
class SegmenterHandle:
    """`oracle` echoes the ground-truth mask supplied with each call;
    `external` shells out to a user-provided command."""

    kind: str = "oracle"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _SEGMENTER_KINDS:
            raise InvalidArgument(f"unknown segmenter kind {self.kind!r}")


@dataclass(frozen=True)
class DeblurrerHandle:
    """`identity` passes images through, `unsharp` applies unsharp masking,
    `external` shells out to a user-provided command."""

    kind: str = "identity"
    radius: float = 2.0
    amount: float = 1.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DEBLURRER_KINDS:
            raise InvalidArgument(f"unknown deblurrer kind {self.kind!r}")
        if self.kind == "unsharp" and (self.radius <= 0 or self.amount < 0):
            raise InvalidArgument("unsharp needs radius > 0 and amount >= 0")


def segment(handle: SegmenterHandle, rgb: np.ndarray,
            gt_mask: SegmentMask | None = None) -> SegmentMask:
    """Produce class-agnostic instance regions with segmenter-local ids."""
    if handle.kind == "oracle":
        if gt_mask is None:
            raise InvalidArgument("oracle segmenter requires a ground-truth mask")
        if gt_mask.ids.shape != rgb.shape[:2]:
            raise InvalidArgument("mask dimensions disagree with the image")
        return gt_mask
    out = _run_external(handle.config, rgb, what="segmenter")
    if out.ndim == 3:
        out = out[..., 0]
    if out.shape != rgb.shape[:2]:
        raise BackendError("external segmenter changed image dimensions")
    return SegmentMask(out.astype(np.int32))


def deblur(handle: DeblurrerHandle, rgb: np.ndarray) -> np.ndarray:
    """Sharpen an RGB image; output dimensions always match the input."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidArgument("expected an H x W x 3 image")
    if handle.kind == "identity":
        return rgb.copy()
    if handle.kind == "unsharp":
        blurred = cv2.GaussianBlur(rgb.astype(np.float64), (0, 0), handle.radius)
        sharp = rgb.astype(np.float64) + handle.amount * (rgb.astype(np.float64) - blurred)
        return np.clip(np.rint(sharp), 0, 255).astype(np.uint8)
    out = _run_external(handle.config, rgb, what="deblurrer")
    if out.shape != rgb.shape:
        raise BackendError("external deblurrer changed image dimensions")
    return out


def _run_external(config: dict, rgb: np.ndarray, what: str) -> np.ndarray:
    """File-based subprocess protocol: `command <input.png> <output.png>`."""
    command = config.get("command")
    if not command:
        raise BackendError(f"external {what} has no command configured")
    exe = command[0] if isinstance(command, (list, tuple)) else command
    if shutil.which(str(exe)) is None:
        raise BackendError(f"external {what} command not found: {exe}")
    timeout = float(config.get("timeout", 60.0))
    with tempfile.TemporaryDirectory(prefix="crossia-adapter-") as tmp:
        src = Path(tmp) / "input.png"
        dst = Path(tmp) / "output.png"
        cv2.imwrite(str(src), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
        argv = list(command) if isinstance(command, (list, tuple)) else [command]
        argv += [str(src), str(dst)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendError(f"external {what} failed: {exc}") from exc
        if proc.returncode != 0:
            detail = proc.stderr.decode(errors="replace").strip()
            raise BackendError(f"external {what} exited {proc.returncode}: {detail}")
        out = cv2.imread(str(dst), cv2.IMREAD_UNCHANGED)
        if out is None:
            raise BackendError(f"external {what} produced no readable output image")
    if out.ndim == 3 and out.shape[2] == 3:
        out = cv2.cvtColor(out, cv2.COLOR_BGR2RGB)
    return out
