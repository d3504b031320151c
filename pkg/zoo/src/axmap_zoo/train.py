"""Float training of the desk-scale reference CNNs (torch, CPU only)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES = ("lenet-mnist", "convnet-cifar10")


class TinyConvNet(nn.Module):
    """conv-relu-pool x2 then two dense layers; layout mirrors the exported
    integer graph exactly (same kernel sizes, strides, flatten order)."""

    def __init__(self, in_channels: int, side: int, classes: int = 10,
                 conv1odd: int = 4, conv2: int = 8, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, conv1odd, 3)
        self.conv2 = nn.Conv2d(conv1odd, conv2, 3)
        after1 = (side - 2) // 2
        after2 = (after1 - 2) // 2
        self.flat = conv2 * after2 * after2
        self.fc1 = nn.Linear(self.flat, hidden)
        self.fc2 = nn.Linear(hidden, classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)

    def intermediates(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Pre-activation tensors needed for quantization calibration."""
        c1 = self.conv1(x)
        p1 = F.max_pool2d(F.relu(c1), 2)
        c2 = self.conv2(p1)
        p2 = F.max_pool2d(F.relu(c2), 2)
        f1 = self.fc1(p2.flatten(1))
        f2 = self.fc2(F.relu(f1))
        return {"conv1": c1, "conv2": c2, "fc1": f1, "fc2": f2}


def build_model(arch: str, seed: int = 0) -> tuple[TinyConvNet, int, int]:
    """Model plus its (channels, side) input geometry.

    Seeds the global torch RNG before construction so layer initialization
    does not depend on whatever ran earlier in the process.
    """
    torch.manual_seed(seed)
    if arch == "lenet-mnist":
        return TinyConvNet(1, 28), 1, 28
    if arch == "convnet-cifar10":
        return TinyConvNet(3, 32, conv1odd=8, conv2=16, hidden=48), 3, 32
    raise ValueError(f"unknown architecture {arch!r} (expected one of {ARCHITECTURES})")


def train_model(model: TinyConvNet, images: np.ndarray, labels: np.ndarray,
                epochs: int, seed: int, batch_size: int = 64,
                lr: float = 2e-3) -> None:
    """In-place training; single-threaded for run-to-run determinism."""
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    x = torch.from_numpy(images.astype(np.float32) / 255.0)
    y = torch.from_numpy(labels)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed + 1)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(x.shape[0], generator=generator)
        for start in range(0, x.shape[0], batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = F.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            optimizer.step()
    model.eval()


def float_accuracy(model: TinyConvNet, images: np.ndarray, labels: np.ndarray) -> float:
    with torch.no_grad():
        x = torch.from_numpy(images.astype(np.float32) / 255.0)
        predictions = model(x).argmax(dim=1).numpy()
    return float(np.mean(predictions == labels))
