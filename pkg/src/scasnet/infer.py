"""Multi-scale, tiled, probability-averaged whole-image inference."""
from dataclasses import asdict, dataclass, field

import numpy as np

from scasnet.layers import bilinear_resize, softmax_channels
from scasnet.model import ConfigError, _from_dict

MIN_IMAGE_SIDE = 8


@dataclass
class InferConfig:
    scales: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    patch_size: int = 64
    batch_size: int = 4

    @classmethod
    def from_dict(cls, data, where="infer"):
        return _from_dict(cls, data, where)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if not self.scales or any(not s > 0 for s in self.scales):
            raise ConfigError("scales must be a non-empty list of positive numbers")
        if self.patch_size < 1 or self.batch_size < 1:
            raise ConfigError("patch_size and batch_size must be positive")
        return self


def tile_grid(h, w, patch):
    """Non-overlapping tiles ``(y, x, th, tw)`` covering an ``h x w`` canvas."""
    return [
        (y, x, min(patch, h - y), min(patch, w - x))
        for y in range(0, h, patch)
        for x in range(0, w, patch)
    ]


def stitch(tiles, canvas):
    """Assemble ``[(probs [K, th, tw], (y, x)), ...]`` onto an ``H x W`` canvas.

    Tiles must partition the canvas: any pixel written twice or never
    written raises ``ValueError``.
    """
    h, w = canvas
    if not tiles:
        raise ValueError("no tiles to stitch")
    k = tiles[0][0].shape[0]
    out = np.zeros((k, h, w), dtype=tiles[0][0].dtype)
    writes = np.zeros((h, w), dtype=np.int32)
    for probs, (y, x) in tiles:
        th, tw = probs.shape[1:]
        if y < 0 or x < 0 or y + th > h or x + tw > w:
            raise ValueError(f"tile at {(y, x)} of size {th}x{tw} falls outside the {h}x{w} canvas")
        out[:, y:y + th, x:x + tw] = probs
        writes[y:y + th, x:x + tw] += 1
    if writes.max() > 1:
        raise ValueError(f"tiles overlap on {int((writes > 1).sum())} pixels")
    if writes.min() == 0:
        raise ValueError(f"tiles leave {int((writes == 0).sum())} pixels uncovered")
    return out


def _padded_size(n, patch, stride):
    return min(patch, -(-n // stride) * stride) if n < patch else patch


def _reflect_pad(tile, ph, pw):
    h, w = tile.shape[1:]
    if (h, w) == (ph, pw):
        return tile
    return np.pad(tile, ((0, 0), (0, ph - h), (0, pw - w)), mode="symmetric" if min(h, w) == 1 else "reflect")


def infer_scale(model, image, patch, batch_size=4):
    """Probability map of ``image`` [C, H, W] from non-overlapping tiles.

    Ragged edge tiles are reflect-padded up to the next multiple of the
    model stride and their predictions cropped back.
    """
    _, h, w = image.shape
    stride = model.cfg.stride
    if patch % stride:
        raise ValueError(f"patch size {patch} is not a multiple of the model stride {stride}")
    groups = {}
    for y, x, th, tw in tile_grid(h, w, patch):
        size = (_padded_size(th, patch, stride), _padded_size(tw, patch, stride))
        groups.setdefault(size, []).append((y, x, th, tw))
    tiles = []
    for size, members in groups.items():
        for i in range(0, len(members), batch_size):
            chunk = members[i:i + batch_size]
            batch = np.stack([_reflect_pad(image[:, y:y + th, x:x + tw], *size) for y, x, th, tw in chunk])
            probs = softmax_channels(model.forward(batch, train=False))
            for p, (y, x, th, tw) in zip(probs, chunk):
                tiles.append((p[:, :th, :tw], (y, x)))
    tiles.sort(key=lambda t: t[1])
    return stitch(tiles, (h, w))


def infer_image(model, image, cfg):
    """Average per-scale probability maps and take the per-pixel argmax.

    ``image`` is the normalized network input [C, H, W]. Returns
    ``(probs [K, H, W], labels [H, W])``.
    """
    cfg.validate()
    _, h, w = image.shape
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValueError(f"image {h}x{w} is smaller than {MIN_IMAGE_SIDE} px on a side")
    image = np.asarray(image, dtype=model.dtype)
    acc = None
    # fixed accumulation order makes the result independent of list order
    for s in sorted(cfg.scales):
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        scaled = bilinear_resize(image, sh, sw) if (sh, sw) != (h, w) else image
        p = infer_scale(model, scaled, cfg.patch_size, cfg.batch_size)
        if (sh, sw) != (h, w):
            p = bilinear_resize(p, h, w)
            p = p / p.sum(axis=0, keepdims=True)
        acc = p if acc is None else acc + p
    probs = acc / len(cfg.scales) if len(cfg.scales) > 1 else acc
    return probs, np.argmax(probs, axis=0).astype(np.int64)
