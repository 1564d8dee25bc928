"""Batch image -> spatial-feature extraction with frozen CNN backbones.

The tap point is the last convolutional feature map before global pooling:
resnet50 and mobilenet_v2 both emit 7 x 7 spatial grids for 224 x 224 input
(2048 and 1280 channels respectively).  The loaded model's actual output
geometry is verified at run time against that claim; a surprise shape is an
error, never silently rewritten.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .feature_io import write_feature_file

# backbone -> (h, w, f) for input_size (224, 224)
BACKBONE_GEOMETRY = {
    "resnet50": (7, 7, 2048),
    "mobilenet_v2": (7, 7, 1280),
}

# per-channel statistics of the backbones' pretraining regime
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneUnavailable(RuntimeError):
    """Requested backbone weights cannot be loaded in this environment."""


class UnreadableImage(ValueError):
    pass


class UnexpectedFeatureShape(RuntimeError):
    """The loaded model's output geometry differs from the manifest claim."""


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "mobilenet_v2"
    input_size: tuple = (224, 224)
    normalization_mean: tuple = IMAGENET_MEAN
    normalization_std: tuple = IMAGENET_STD
    out_dir: str = "features"
    batch_size: int = 8
    # frozen pretrained weights are the normal mode; pretrained=False loads
    # the architecture with local initialization (geometry/format work only)
    pretrained: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONE_GEOMETRY:
            raise ValueError(f"backbone must be one of {sorted(BACKBONE_GEOMETRY)}")
        if len(self.input_size) != 2 or min(self.input_size) < 32:
            raise ValueError(f"implausible input_size {self.input_size}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def load_backbone(config: ExtractorConfig) -> torch.nn.Module:
    """Frozen truncated backbone ending at the last convolutional map."""
    import torchvision.models as models

    try:
        if config.backbone == "resnet50":
            weights = models.ResNet50_Weights.IMAGENET1K_V1 if config.pretrained else None
            net = models.resnet50(weights=weights)
            trunk = torch.nn.Sequential(*list(net.children())[:-2])
        else:
            weights = models.MobileNet_V2_Weights.IMAGENET1K_V1 if config.pretrained else None
            trunk = models.mobilenet_v2(weights=weights).features
    except Exception as exc:  # weight download/read failure
        raise BackboneUnavailable(
            f"cannot load {config.backbone} weights: {exc}"
        ) from exc
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


def _load_image(path, config: ExtractorConfig) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize(
                (config.input_size[1], config.input_size[0]), Image.BILINEAR
            )
    except Exception as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(config.normalization_mean, dtype=np.float32)) / np.asarray(
        config.normalization_std, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _feature_path(out_dir, image_path) -> str:
    stem = os.path.splitext(os.path.basename(str(image_path)))[0]
    return os.path.join(out_dir, stem + ".feat")


def extract(image_paths: Sequence, config: ExtractorConfig, model: torch.nn.Module = None) -> list:
    """Write one feature file per image plus a manifest; returns the manifest.

    Images run through the frozen backbone in batches; each output is checked
    against the claimed geometry and stored row-major (row, col, channel) at
    float32.  The manifest (manifest.jsonl in the output dir) maps image path
    to feature path, backbone and shape.
    """
    if model is None:
        model = load_backbone(config)
    os.makedirs(config.out_dir, exist_ok=True)
    claimed = BACKBONE_GEOMETRY[config.backbone]
    entries = []
    with torch.no_grad():
        for start in range(0, len(image_paths), config.batch_size):
            chunk = list(image_paths[start : start + config.batch_size])
            batch = torch.stack([_load_image(p, config) for p in chunk])
            out = model(batch)  # (n, f, h, w)
            if out.ndim != 4 or tuple(out.shape[1:]) != (claimed[2], claimed[0], claimed[1]):
                raise UnexpectedFeatureShape(
                    f"{config.backbone} produced {tuple(out.shape[1:])} (f, h, w); "
                    f"expected {(claimed[2], claimed[0], claimed[1])}"
                )
            grids = out.permute(0, 2, 3, 1).numpy().astype(np.float32)  # (n, h, w, f)
            for path, grid in zip(chunk, grids):
                feature_path = _feature_path(config.out_dir, path)
                write_feature_file(feature_path, grid)
                entries.append(
                    {
                        "image": str(path),
                        "feature": feature_path,
                        "backbone": config.backbone,
                        "h": claimed[0],
                        "w": claimed[1],
                        "f": claimed[2],
                    }
                )
    manifest_path = os.path.join(config.out_dir, "manifest.jsonl")
    tmp = manifest_path + ".part"
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    return entries
