"""Training and export of the desk-scale reference CNNs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .datasets import ImageDataset, gaussian_blobs, pattern_digits, save_idx
from .export import model_to_lsnm, write_fixture

FIXTURE_COUNT = 32


class ExportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    name: str
    side: int
    classes: int
    train_per_class: int
    test_per_class: int
    epochs: int
    accuracy_floor: float


ARCHS = {
    "lenet5": ArchSpec("lenet5", 28, 10, 400, 40, 5, 0.97),
    "lenet5_mini": ArchSpec("lenet5_mini", 14, 10, 300, 60, 8, 0.97),
}


def build_net(name: str) -> nn.Sequential:
    if name == "lenet5":
        return nn.Sequential(
            nn.Conv2d(1, 6, 5, padding=2), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(6, 16, 5), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(400, 120), nn.ReLU(),
            nn.Linear(120, 84), nn.ReLU(),
            nn.Linear(84, 10),
        )
    if name == "lenet5_mini":
        return nn.Sequential(
            nn.Conv2d(1, 4, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(4, 8, 3, padding=1), nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Flatten(),
            nn.Linear(72, 32), nn.ReLU(),
            nn.Linear(32, 10),
        )
    raise ValueError(f"unknown architecture {name!r}")


def _determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def train_classifier(
    net: nn.Module, x: torch.Tensor, y: torch.Tensor, epochs: int, seed: int,
    batch: int = 64, lr: float = 1e-3,
) -> None:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    order_rng = np.random.default_rng(seed + 17)
    net.train()
    for _ in range(epochs):
        order = order_rng.permutation(len(y))
        for lo in range(0, len(y), batch):
            idx = order[lo : lo + batch]
            opt.zero_grad()
            out = net(x[idx])
            loss = loss_fn(out, y[idx])
            loss.backward()
            opt.step()


def evaluate(net: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    net.eval()
    with torch.no_grad():
        pred = net(x).argmax(dim=1)
    return float((pred == y).float().mean())


@dataclass(frozen=True)
class ExportBundle:
    model_path: str
    fixture_path: str
    metadata_path: str
    test_accuracy: float


def train_and_export(
    dataset: tuple[ImageDataset, ImageDataset],
    architecture: str,
    seed: int,
    out_dir: str,
    epochs: int | None = None,
) -> ExportBundle:
    """Train the architecture on (train, test) image datasets and write the
    LSNM model, the LSNF logit fixture (32 held-out test inputs), IDX copies
    of the data, and a metadata sidecar. Refuses to export below the
    architecture's accuracy floor."""
    spec = ARCHS[architecture]
    train_ds, test_ds = dataset
    _determinism(seed)
    net = build_net(architecture)
    xt = torch.from_numpy(train_ds.pixels[:, None, :, :])
    yt = torch.from_numpy(train_ds.labels)
    train_classifier(net, xt, yt, spec.epochs if epochs is None else epochs, seed)
    xe = torch.from_numpy(test_ds.pixels[:, None, :, :])
    ye = torch.from_numpy(test_ds.labels)
    accuracy = evaluate(net, xe, ye)
    print(f"{architecture}: test accuracy {accuracy * 100:.2f}% "
          f"on {len(test_ds)} held-out items")
    if accuracy < spec.accuracy_floor:
        raise ExportError(
            f"test accuracy {accuracy * 100:.2f}% below the "
            f"{spec.accuracy_floor * 100:.0f}% export floor"
        )
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, f"{architecture}.lsnm")
    with open(model_path, "wb") as f:
        f.write(model_to_lsnm(net, (1, spec.side, spec.side)))
    net.eval()
    with torch.no_grad():
        logits = net(xe[:FIXTURE_COUNT]).numpy().astype(np.float32)
    fixture_path = os.path.join(out_dir, f"{architecture}.lsnf")
    write_fixture(
        fixture_path,
        test_ds.pixels[:FIXTURE_COUNT],
        test_ds.labels[:FIXTURE_COUNT],
        logits,
    )
    save_idx(
        test_ds,
        os.path.join(out_dir, f"{architecture}_test_images.idx3"),
        os.path.join(out_dir, f"{architecture}_test_labels.idx1"),
    )
    sample = ImageDataset(images=train_ds.images[:256], labels=train_ds.labels[:256])
    save_idx(
        sample,
        os.path.join(out_dir, f"{architecture}_sample_images.idx3"),
        os.path.join(out_dir, f"{architecture}_sample_labels.idx1"),
    )
    metadata_path = os.path.join(out_dir, f"{architecture}_meta.json")
    with open(metadata_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "architecture": architecture,
                "seed": seed,
                "test_accuracy": accuracy,
                "accuracy_floor": spec.accuracy_floor,
                "train_items": len(train_ds),
                "test_items": len(test_ds),
                "fixture_count": FIXTURE_COUNT,
                "classes": spec.classes,
                "side": spec.side,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    return ExportBundle(
        model_path=model_path,
        fixture_path=fixture_path,
        metadata_path=metadata_path,
        test_accuracy=accuracy,
    )


def make_datasets(architecture: str, seed: int) -> tuple[ImageDataset, ImageDataset]:
    spec = ARCHS[architecture]
    train = pattern_digits(
        spec.classes, spec.train_per_class, spec.side, seed, noise_seed=seed + 1
    )
    test = pattern_digits(
        spec.classes, spec.test_per_class, spec.side, seed, noise_seed=seed + 2
    )
    return train, test


def train_blob_linear(seed: int = 0, dimension: int = 16) -> float:
    """Accuracy of a single-layer model on two antipodal Gaussian blobs
    (means +-3 in every coordinate, unit variance)."""
    _determinism(seed)
    means = np.vstack([np.full(dimension, -3.0), np.full(dimension, 3.0)])
    x, y = gaussian_blobs(2, 300, dimension, seed, noise=1.0, means=means)
    xt, yt = torch.from_numpy(x[:400]), torch.from_numpy(y[:400])
    xe, ye = torch.from_numpy(x[400:]), torch.from_numpy(y[400:])
    net = nn.Sequential(nn.Linear(dimension, 2))
    train_classifier(net, xt, yt, epochs=30, seed=seed, lr=5e-2)
    return evaluate(net, xe, ye)
