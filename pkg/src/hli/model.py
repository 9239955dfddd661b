"""Small CNN re-ID encoder with a GAP + linear head, class activation maps,
and a flat little-endian checkpoint format."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn


@dataclass
class FeatureBundle:
    spatial_map: torch.Tensor  # N x C_f x H_f x W_f
    embedding: torch.Tensor  # N x D, spatial mean of spatial_map
    logits: torch.Tensor  # N x num_classes


class ReIDNet(nn.Module):
    """Four conv blocks (conv -> BN -> ReLU -> optional 2x2 max-pool), global
    average pooling, bias-free linear classifier.

    With no projection after pooling, ``logits[:, k]`` is exactly the spatial
    mean of the class-``k`` activation map.
    """

    def __init__(
        self,
        num_classes: int,
        input_size: tuple[int, int] = (64, 32),
        widths: Sequence[int] = (16, 32, 64, 64),
        downsample: Sequence[bool] = (True, True, True, False),
        in_channels: int = 3,
    ):
        super().__init__()
        if len(widths) != len(downsample):
            raise ValueError("widths and downsample must have the same length")
        self.input_size = tuple(input_size)
        self.widths = tuple(widths)
        self.downsample = tuple(bool(d) for d in downsample)
        self.in_channels = in_channels
        layers: list[nn.Module] = []
        c_in = in_channels
        for c_out, down in zip(self.widths, self.downsample):
            layers += [
                nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            if down:
                layers.append(nn.MaxPool2d(2))
            c_in = c_out
        self.backbone = nn.Sequential(*layers)
        self.embed_dim = c_in
        self.classifier = nn.Linear(c_in, num_classes, bias=False)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        nn.init.normal_(self.classifier.weight, std=0.01)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    @property
    def stride(self) -> int:
        return 2 ** sum(self.downsample)

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.stride, w // self.stride

    def arch(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_size": list(self.input_size),
            "widths": list(self.widths),
            "downsample": list(self.downsample),
            "in_channels": self.in_channels,
        }

    def forward(self, images: torch.Tensor) -> FeatureBundle:
        if images.ndim != 4 or images.shape[1] != self.in_channels or tuple(images.shape[2:]) != self.input_size:
            raise ValueError(
                f"expected N x {self.in_channels} x {self.input_size[0]} x {self.input_size[1]} "
                f"images, got {tuple(images.shape)}"
            )
        spatial = self.backbone(images)
        embedding = spatial.mean(dim=(2, 3))
        return FeatureBundle(spatial, embedding, self.classifier(embedding))

    def reset_classifier(self, num_classes: int, weight: torch.Tensor | None = None) -> None:
        """Replace the head.  ``weight`` (num_classes x D) overrides the default
        small-variance initialisation."""
        ref = self.classifier.weight
        head = nn.Linear(self.embed_dim, num_classes, bias=False).to(ref.device, ref.dtype)
        with torch.no_grad():
            if weight is None:
                nn.init.normal_(head.weight, std=0.01)
            else:
                if tuple(weight.shape) != (num_classes, self.embed_dim):
                    raise ValueError("classifier weight has the wrong shape")
                head.weight.copy_(weight)
        self.classifier = head


def compute_cam(bundle: FeatureBundle, classifier_weight, class_index) -> torch.Tensor:
    """Class activation maps, N x H_f x W_f, unnormalised:
    ``cam[i] = sum_c w[class_index[i], c] * spatial_map[i, c]``.

    ``classifier_weight`` may be the weight tensor or a :class:`ReIDNet`.
    """
    if isinstance(classifier_weight, ReIDNet):
        classifier_weight = classifier_weight.classifier.weight
    class_index = torch.as_tensor(class_index, dtype=torch.long, device=classifier_weight.device)
    n = bundle.spatial_map.shape[0]
    if class_index.ndim == 0:
        class_index = class_index.expand(n)
    if class_index.shape != (n,):
        raise ValueError("need one class index per sample")
    if (class_index < 0).any() or (class_index >= classifier_weight.shape[0]).any():
        raise IndexError("class_index out of range for the classifier head")
    w = classifier_weight[class_index]
    return torch.einsum("nc,nchw->nhw", w, bundle.spatial_map)


def most_informative_point(heatmap, image_size: tuple[int, int]) -> np.ndarray:
    """Argmax of each heatmap mapped to image pixels, returned as N x 2 (x, y).

    Feature cell (row, col) maps to the centre pixel of its stride cell:
    ``y = row * stride_y + stride_y // 2`` (likewise for x).  Ties resolve to
    the smallest row-major index.
    """
    hm = heatmap.detach().cpu().numpy() if isinstance(heatmap, torch.Tensor) else np.asarray(heatmap)
    if hm.ndim == 2:
        hm = hm[None]
    if hm.ndim != 3 or hm.shape[1] == 0 or hm.shape[2] == 0:
        raise ValueError("heatmap must be N x H_f x W_f and non-empty")
    h, w = image_size
    hf, wf = hm.shape[1:]
    if h % hf or w % wf:
        raise ValueError("image size is not a multiple of the feature map size")
    sy, sx = h // hf, w // wf
    flat = hm.reshape(hm.shape[0], -1).argmax(axis=1)
    row, col = np.divmod(flat, wf)
    return np.stack([col * sx + sx // 2, row * sy + sy // 2], axis=1).astype(np.int64)


def clone_model(model: ReIDNet) -> ReIDNet:
    return copy.deepcopy(model)


def config_hash(config: dict | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(
    model: ReIDNet,
    path: str | Path,
    *,
    step: int = 0,
    role: str = "student",
    config: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (payload).

    Tensors are stored back to back as little-endian raw bytes in state-dict
    order; the manifest records name, dtype, shape and byte offset.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with path.with_suffix(".bin").open("wb") as fh:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append(
                {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {
        "format": "hli-checkpoint/1",
        "role": role,
        "step": int(step),
        "config_hash": config_hash(config),
        "arch": model.arch(),
        "tensors": entries,
        "extra": extra or {},
    }
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return json_path


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(path: str | Path, model: ReIDNet | None = None) -> tuple[ReIDNet, dict]:
    """Rebuild (or fill) a model from a checkpoint; shapes are verified."""
    path = Path(path)
    manifest = read_manifest(path)
    if model is None:
        arch = manifest["arch"]
        model = ReIDNet(
            arch["num_classes"],
            input_size=tuple(arch["input_size"]),
            widths=arch["widths"],
            downsample=arch["downsample"],
            in_channels=arch["in_channels"],
        )
    payload = path.with_suffix(".bin").read_bytes()
    expected = model.state_dict()
    names = [e["name"] for e in manifest["tensors"]]
    if set(names) != set(expected):
        raise ValueError("checkpoint tensor names do not match the model")
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arr = arr.reshape(e["shape"])
        if tuple(arr.shape) != tuple(expected[e["name"]].shape):
            raise ValueError(f"shape mismatch for {e['name']}: {arr.shape} vs {tuple(expected[e['name']].shape)}")
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(expected[e["name"]].dtype)
    model.load_state_dict(state)
    return model, manifest


@torch.no_grad()
def embed_images(model: ReIDNet, images: np.ndarray, chunk: int = 128) -> FeatureBundle:
    """Eval-mode forward over N x C x H x W numpy images in fixed-size chunks."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    parts = []
    for start in range(0, len(images), chunk):
        x = torch.from_numpy(images[start : start + chunk]).to(dtype)
        parts.append(model(x))
    model.train(was_training)
    return FeatureBundle(
        torch.cat([p.spatial_map for p in parts]),
        torch.cat([p.embedding for p in parts]),
        torch.cat([p.logits for p in parts]),
    )
