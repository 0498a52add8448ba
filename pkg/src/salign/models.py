"""Network construction: student/teacher classifiers and saliency discriminators.

Two classifier families are registered. small_cnn is the desk-scale student
(~100k parameters, ELU activations so input gradients are C1 and second-order
training is stable). wrn_family is the standard wide residual network for
paper-scale runs; blocks per group are round((depth - 4) / 6), which covers
the canonical depths and the depth-32 variant common in the adversarial
robustness literature.

Note: batch-norm layers (wrn_family) couple examples within a batch while in
training mode, so per-sample input gradients are exact only in eval mode or
for norm-free architectures like small_cnn.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError, FrozenModelError

BLOB_SCHEMA_VERSION = 1


def _seeded():
    """Isolate torch's global RNG so builders can seed it without side effects."""
    return torch.random.fork_rng(devices=[])


def _init_params(net: nn.Module) -> None:
    """Fan-in-scaled He init; torch's default conv init under-scales deep stacks."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class _Wrapper:
    """Shared surface for classifier and discriminator wrappers."""

    def __init__(self, net: nn.Module, input_shape: tuple):
        self.net = net
        self.input_shape = tuple(input_shape)  # (h, w, c)
        self.frozen = False

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def trainable_parameters(self):
        if self.frozen:
            raise FrozenModelError(f"{type(self).__name__} is frozen; parameter updates are forbidden")
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state):
        if self.frozen:
            raise FrozenModelError(f"{type(self).__name__} is frozen; parameter updates are forbidden")
        self.net.load_state_dict(state)

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        self.frozen = True
        return self

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(str(tuple(p.shape)).encode())
            h.update(str(p.dtype).encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def train(self, mode: bool = True):
        if self.frozen and mode:
            raise FrozenModelError(f"{type(self).__name__} is frozen; cannot enter train mode")
        self.net.train(mode)
        return self

    def eval(self):
        self.net.eval()
        return self


class Classifier(_Wrapper):
    def __init__(self, net, arch_id: str, input_shape, num_classes: int, arch_params: dict = None):
        super().__init__(net, input_shape)
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.arch_params = dict(arch_params or {})

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Discriminator(_Wrapper):
    def __init__(self, net, input_shape, arch_params: dict = None):
        super().__init__(net, input_shape)
        self.arch_params = dict(arch_params or {})

    def score(self, s: torch.Tensor) -> torch.Tensor:
        """Per-input scalar in the open interval (0, 1)."""
        return self.net(s)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

class SmallCnn(nn.Module):
    """Three ELU conv blocks with average-pool downsampling and a linear head.

    ELU keeps input gradients C1, which both stabilizes second-order
    training and lets finite-difference oracles hold tightly. No batch
    norm, so per-sample input gradients are exact in any mode.
    """

    def __init__(self, in_channels: int, num_classes: int, spatial: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1), nn.ELU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ELU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ELU(),
        )
        flat = 64 * (spatial // 4) * (spatial // 4)
        self.head = nn.Linear(flat, num_classes)

    def forward(self, x):
        z = self.features(x)
        return self.head(z.flatten(1))


class WideBasic(nn.Module):
    """Pre-activation residual block of the wide residual network."""

    def __init__(self, in_planes, planes, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = torch.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(torch.relu(self.bn2(out)))
        return out + skip


class WideResNet(nn.Module):
    def __init__(self, depth: int, width: int, in_channels: int, num_classes: int):
        super().__init__()
        n = round((depth - 4) / 6)
        if n < 1:
            raise ConfigError(f"wrn depth {depth} too shallow: needs round((depth-4)/6) >= 1")
        self.blocks_per_group = n
        widths = [16, 16 * width, 32 * width, 64 * width]
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        layers = []
        in_planes = widths[0]
        for group, planes in enumerate(widths[1:]):
            for block in range(n):
                stride = 2 if (group > 0 and block == 0) else 1
                layers.append(WideBasic(in_planes, planes, stride))
                in_planes = planes
        self.body = nn.Sequential(*layers)
        self.bn = nn.BatchNorm2d(in_planes)
        self.head = nn.Linear(in_planes, num_classes)

    def forward(self, x):
        z = self.conv1(x)
        z = torch.relu(self.bn(self.body(z)))
        z = z.mean(dim=(2, 3))
        return self.head(z)


class ConvDiscriminator(nn.Module):
    """Strided conv encoder scoring an image-shaped gradient field in (0,1)."""

    def __init__(self, in_channels: int, spatial: int, base_width: int):
        super().__init__()
        widths = [base_width, 2 * base_width, 4 * base_width, 4 * base_width]
        layers = []
        prev = in_channels
        size = spatial
        for w in widths:
            stride = 2 if size > 2 else 1
            layers += [nn.Conv2d(prev, w, 3, stride=stride, padding=1), nn.ELU()]
            prev = w
            size = (size + 1) // 2 if stride == 2 else size
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)

    def forward(self, s):
        z = self.encoder(s)
        z = z.mean(dim=(2, 3))
        return torch.sigmoid(self.head(z)).squeeze(1)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_student(arch_id: str, input_shape, num_classes: int, seed: int,
                  depth: int = None, width: int = None) -> Classifier:
    """Freshly initialized classifier; init is deterministic under seed."""
    h, w, c = input_shape
    if num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {num_classes}")
    arch_params = {}
    with _seeded():
        torch.manual_seed(seed)
        if arch_id == "small_cnn":
            if h % 4 or w % 4 or h != w:
                raise ConfigError(f"small_cnn requires square inputs divisible by 4, got {(h, w)}")
            net = SmallCnn(c, num_classes, spatial=h)
        elif arch_id == "wrn_family":
            depth = depth or 16
            width = width or 1
            net = WideResNet(depth, width, c, num_classes)
            arch_params = {"depth": depth, "width": width}
        else:
            raise ConfigError(f"unknown arch_id {arch_id!r}")
        _init_params(net)
    return Classifier(net, arch_id, input_shape, num_classes, arch_params)


def build_discriminator(input_shape, seed: int, base_width: int = None) -> Discriminator:
    """Saliency-map discriminator; width scales with input resolution."""
    h, w, c = input_shape
    if base_width is None:
        base_width = max(16, min(h, w))
    with _seeded():
        torch.manual_seed(seed)
        net = ConvDiscriminator(c, min(h, w), base_width)
        _init_params(net)
    return Discriminator(net, input_shape, {"base_width": base_width})


# ---------------------------------------------------------------------------
# Checkpoint blobs (shared layout for teacher, student, discriminators)
# ---------------------------------------------------------------------------

def _atomic_torch_save(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(obj, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path) -> None:
    """Write a model blob: schema version, arch metadata, ordered tensors."""
    if isinstance(model, Classifier):
        blob = {
            "schema_version": BLOB_SCHEMA_VERSION,
            "kind": "classifier",
            "arch_id": model.arch_id,
            "arch_params": model.arch_params,
            "input_shape": model.input_shape,
            "num_classes": model.num_classes,
            "state": model.state_dict(),
        }
    elif isinstance(model, Discriminator):
        blob = {
            "schema_version": BLOB_SCHEMA_VERSION,
            "kind": "discriminator",
            "arch_params": model.arch_params,
            "input_shape": model.input_shape,
            "state": model.state_dict(),
        }
    else:
        raise TypeError(f"cannot save object of type {type(model).__name__}")
    _atomic_torch_save(blob, path)


def _load_blob(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("schema_version") != BLOB_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has unsupported schema "
            f"{blob.get('schema_version') if isinstance(blob, dict) else '?'}"
        )
    return blob


def load_classifier(path) -> Classifier:
    blob = _load_blob(path)
    if blob.get("kind") != "classifier":
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    params = blob.get("arch_params", {})
    model = build_student(blob["arch_id"], tuple(blob["input_shape"]), blob["num_classes"],
                          seed=0, depth=params.get("depth"), width=params.get("width"))
    try:
        model.load_state_dict(blob["state"])
    except Exception as exc:
        raise CheckpointError(f"corrupt parameter blob in {path}: {exc}") from exc
    return model


def load_teacher(path, expect_input_shape=None, expect_num_classes=None) -> Classifier:
    """Load a classifier checkpoint and freeze it for the rest of the run.

    Forward and input-gradient queries remain allowed; parameter updates
    raise FrozenModelError.
    """
    model = load_classifier(path)
    if expect_input_shape is not None and tuple(model.input_shape) != tuple(expect_input_shape):
        raise CheckpointError(
            f"teacher input shape {model.input_shape} does not match expected {tuple(expect_input_shape)}"
        )
    if expect_num_classes is not None and model.num_classes != expect_num_classes:
        raise CheckpointError(
            f"teacher has {model.num_classes} classes, expected {expect_num_classes}"
        )
    return model.freeze()


def load_discriminator(path) -> Discriminator:
    blob = _load_blob(path)
    if blob.get("kind") != "discriminator":
        raise CheckpointError(f"{path} is not a discriminator checkpoint")
    disc = build_discriminator(tuple(blob["input_shape"]), seed=0,
                               base_width=blob.get("arch_params", {}).get("base_width"))
    disc.load_state_dict(blob["state"])
    return disc
