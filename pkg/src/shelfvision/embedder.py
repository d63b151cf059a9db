"""Patch encoder with max-activation descriptors and triplet training.

The encoder is five stride-2 convolutional blocks; descriptors are the
per-channel global max of the last two blocks' feature maps, concatenated
and l2-normalized (unit norm, dimension = channels(B4) + channels(B5)).

Training minimizes a hinge triplet loss with squared Euclidean distances:
anchors are augmented copies of each query image, and every anchor's
negative is mined online as the nearest different-label embedding in the
same batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import archive
from .data import image_to_tensor, resize_image
from .pyramid import ResidualStage, init_parameters, load_module_arrays, module_arrays

DEFAULT_WIDTHS = (16, 32, 64, 128, 256)
FULL_WIDTHS = (64, 64, 128, 256, 512)  # descriptor 256 + 512 = 768


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the label-preserving augmentation operator."""

    blur_sigma: tuple[float, float] = (0.0, 1.5)
    crop_fraction: tuple[float, float] = (0.8, 1.0)
    brightness: tuple[float, float] = (0.7, 1.3)
    saturation: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        for name in ("blur_sigma", "crop_fraction", "brightness", "saturation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: ({lo}, {hi})")
        if self.blur_sigma[0] < 0:
            raise ValueError("blur_sigma must be non-negative")
        if not (0.5 < self.crop_fraction[0] and self.crop_fraction[1] <= 1.0):
            raise ValueError("crop_fraction must lie in (0.5, 1.0]")
        if self.brightness[0] <= 0 or self.saturation[0] <= 0:
            raise ValueError("brightness/saturation factors must be positive")

    def to_meta(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "AugmentParams":
        return cls(**{k: tuple(v) for k, v in meta.items()})

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls((0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


def augment(image: np.ndarray, params: AugmentParams, draw_seed) -> np.ndarray:
    """Blur / crop / brightness / saturation with values drawn from *params*.

    Deterministic given (params, draw_seed); output has the input's shape
    (crops are resized back). Identity ranges reproduce the input pixel
    for pixel.
    """
    rng = np.random.default_rng(draw_seed)
    sigma = rng.uniform(*params.blur_sigma)
    crop = rng.uniform(*params.crop_fraction)
    h, w = image.shape[:2]
    ch = max(1, round(crop * h))
    cw = max(1, round(crop * w))
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    bright = rng.uniform(*params.brightness)
    sat = rng.uniform(*params.saturation)

    out = image.astype(np.float64)
    if sigma > 0.0:
        out = scipy.ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="nearest")
    if (ch, cw) != (h, w):
        patch = np.clip(np.rint(out[oy : oy + ch, ox : ox + cw]), 0, 255).astype(np.uint8)
        out = np.asarray(
            Image.fromarray(patch).resize((w, h), Image.BILINEAR), dtype=np.float64
        )
    if bright != 1.0:
        out = out * bright
    if sat != 1.0:
        gray = out[..., 0] * 0.299 + out[..., 1] * 0.587 + out[..., 2] * 0.114
        out = gray[..., None] + sat * (out - gray[..., None])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class EncoderNet(nn.Module):
    """Five-block encoder; exposes the last two blocks' feature maps."""

    def __init__(self, widths: tuple[int, ...] = DEFAULT_WIDTHS):
        super().__init__()
        if len(widths) != 5:
            raise ValueError(f"expected 5 block widths, got {len(widths)}")
        self.widths = tuple(int(w) for w in widths)
        chans = (3,) + self.widths
        self.blocks = nn.ModuleList(
            ResidualStage(chans[i], chans[i + 1]) for i in range(5)
        )

    @property
    def embedding_dim(self) -> int:
        return self.widths[3] + self.widths[4]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ValueError(f"patch dimensions must be divisible by 32, got {tuple(x.shape[-2:])}")
        for block in self.blocks[:4]:
            x = block(x)
        x4 = x
        x5 = self.blocks[4](x4)
        return x4, x5


def mac_descriptor(x4: torch.Tensor, x5: torch.Tensor) -> torch.Tensor:
    """Per-channel global max pooling of both maps, concatenated."""
    return torch.cat([x4.amax(dim=(-2, -1)), x5.amax(dim=(-2, -1))], dim=-1)


def encode(patches: torch.Tensor, net: EncoderNet) -> torch.Tensor:
    """Unit-norm descriptors for a (N, 3, H, W) patch batch."""
    vec = mac_descriptor(*net(patches))
    norms = vec.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero descriptor: embedding direction undefined")
    return vec / norms


def triplet_loss(
    anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor, margin: float = 1.0
) -> torch.Tensor:
    """Mean hinge loss max(0, d(a,p) - d(a,n) + margin), d = squared Euclidean."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    d_pos = (anchor - positive).pow(2).sum(dim=-1)
    d_neg = (anchor - negative).pow(2).sum(dim=-1)
    return F.relu(d_pos - d_neg + margin).mean()


def hard_negative_indices(anchor_emb, embeddings, labels) -> np.ndarray:
    """For each anchor, the index of the nearest different-label embedding.

    Distances are squared Euclidean over the whole batch; ties resolve to
    the smallest index. Raises if the batch holds a single label.
    """
    anchor_emb = np.asarray(anchor_emb, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("hard negative mining needs at least two distinct labels in the batch")
    d2 = ((anchor_emb[:, None, :] - embeddings[None, :, :]) ** 2).sum(axis=2)
    d2[labels[:, None] == labels[None, :]] = np.inf
    return d2.argmin(axis=1)


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    label: str
    negative_label: str


def mine_hard_negatives(
    batch: list[tuple[np.ndarray, str]],
    net: EncoderNet,
    input_size: int,
    params: AugmentParams,
    seed,
) -> list[Triplet]:
    """One triplet per batch element with an online-mined hardest negative.

    Each element is its own positive; the anchor is an augmented copy; the
    negative is the different-label element of the batch whose embedding is
    nearest to the anchor's.
    """
    images = [img for img, _ in batch]
    labels = [lbl for _, lbl in batch]
    anchors = [
        augment(img, params, _child_seed(seed, i)) for i, img in enumerate(images)
    ]
    with torch.no_grad():
        emb = encode(_patch_batch(images, input_size), net).numpy()
        emb_a = encode(_patch_batch(anchors, input_size), net).numpy()
    neg = hard_negative_indices(emb_a, emb, labels)
    return [
        Triplet(anchors[i], images[i], images[j], labels[i], labels[j])
        for i, j in enumerate(neg)
    ]


def _child_seed(seed, i: int) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed] + [i]
    return [int(seed), i]


def _patch_batch(images: list[np.ndarray], input_size: int) -> torch.Tensor:
    resized = [
        img if img.shape[:2] == (input_size, input_size) else resize_image(img, (input_size, input_size))
        for img in images
    ]
    return torch.stack([image_to_tensor(img) for img in resized])


class PatchEmbedder(BaseEstimator, TransformerMixin):
    """Metric-learning patch encoder.

    fit(X, y) trains on (image, label) pairs, typically one canonical
    query image per product class; transform(X) maps patches of any size
    to unit-norm descriptors. Defaults are the desk-scale preset; the
    full preset is ``widths=(64, 64, 128, 256, 512)``/``input_size=224``,
    giving 768-dimensional descriptors.
    """

    def __init__(
        self,
        widths=DEFAULT_WIDTHS,
        input_size=64,
        margin=1.0,
        learning_rate=1e-4,
        epochs=15,
        batch_size=8,
        batches_per_epoch=None,
        blur_sigma=(0.0, 1.5),
        crop_fraction=(0.8, 1.0),
        brightness=(0.7, 1.3),
        saturation=(0.7, 1.3),
        random_state=0,
    ):
        self.widths = widths
        self.input_size = input_size
        self.margin = margin
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.batches_per_epoch = batches_per_epoch
        self.blur_sigma = blur_sigma
        self.crop_fraction = crop_fraction
        self.brightness = brightness
        self.saturation = saturation
        self.random_state = random_state

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            blur_sigma=tuple(self.blur_sigma),
            crop_fraction=tuple(self.crop_fraction),
            brightness=tuple(self.brightness),
            saturation=tuple(self.saturation),
        )

    def _build_net(self) -> EncoderNet:
        net = EncoderNet(tuple(self.widths))
        init_parameters(net, self.random_state)
        return net

    @property
    def embedding_dim_(self) -> int:
        return int(self.widths[3] + self.widths[4])

    def fit(self, X, y):
        if y is None or len(X) != len(y):
            raise ValueError("fit expects matching image and label lists")
        labels = [str(l) for l in y]
        if len(set(labels)) < 2:
            raise ValueError("training needs at least two product classes")
        params = self.augment_params()
        net = self._build_net()
        net.train()
        optimizer = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        self.train_log_ = []

        for epoch in range(self.epochs):
            if self.batches_per_epoch is None:
                order = rng.permutation(n)
                batches = [
                    order[s : s + self.batch_size] for s in range(0, n, self.batch_size)
                ]
            else:
                batches = [
                    rng.choice(n, size=min(self.batch_size, n), replace=False)
                    for _ in range(self.batches_per_epoch)
                ]
            losses, active = [], []
            for b, idx in enumerate(batches):
                batch = [(X[i], labels[i]) for i in idx]
                if len({lbl for _, lbl in batch}) < 2:
                    warnings.warn(f"skipping single-label batch in epoch {epoch}")
                    continue
                triplets = mine_hard_negatives(
                    batch, net, self.input_size, params,
                    [int(self.random_state), epoch, b],
                )
                a = encode(_patch_batch([t.anchor for t in triplets], self.input_size), net)
                p = encode(_patch_batch([t.positive for t in triplets], self.input_size), net)
                ng = encode(_patch_batch([t.negative for t in triplets], self.input_size), net)
                loss = triplet_loss(a, p, ng, margin=self.margin)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                with torch.no_grad():
                    gap = (a - p).pow(2).sum(-1) - (a - ng).pow(2).sum(-1) + self.margin
                    active.append(float((gap > 0).float().mean()))
            self.train_log_.append(
                {
                    "epoch": epoch,
                    "mean_loss": float(np.mean(losses)) if losses else 0.0,
                    "active_triplet_fraction": float(np.mean(active)) if active else 0.0,
                }
            )

        net.eval()
        self.model_ = net
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        if len(X) == 0:
            return np.zeros((0, self.embedding_dim_), dtype=np.float32)
        with torch.no_grad():
            emb = encode(_patch_batch(list(X), self.input_size), self.model_)
        return emb.numpy().astype(np.float32)

    # -- persistence ---------------------------------------------------------

    def _config_meta(self) -> dict:
        return {
            "kind": "embedder",
            "widths": list(self.widths),
            "input_size": self.input_size,
        }

    def dump_weights(self) -> bytes:
        check_is_fitted(self, "model_")
        return archive.dump_arrays(module_arrays(self.model_), self._config_meta())

    def weights_fingerprint(self) -> str:
        return archive.fingerprint(self.dump_weights())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dump_weights())

    @classmethod
    def load(cls, path, **overrides) -> "PatchEmbedder":
        arrays, meta = archive.load_archive(path)
        if meta.get("kind") != "embedder":
            raise archive.ArchiveError(f"{path} is not an embedder weights archive")
        est = cls(widths=tuple(meta["widths"]), input_size=meta["input_size"], **overrides)
        net = est._build_net()
        load_module_arrays(net, arrays)
        net.eval()
        est.model_ = net
        est.train_log_ = []
        return est
