"""Image, geometry and adversarial objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import sparse

from .autodiff import DTYPE, ParamGroup

LOG_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.1
    lambda_d: float = 1.0
    lambda_s: float = 1.0
    lambda_lap: float = 0.5
    lambda_adv: float = 0.1

    def __post_init__(self):
        for name in ("lambda_c", "lambda_d", "lambda_s", "lambda_lap", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def rgb_loss(reproj_color, validity, rendered_color) -> torch.Tensor:
    """Mean absolute color difference over valid pixels and the three channels.

    Returns an exact zero (still attached to ``rendered_color``'s graph) when
    no pixel is valid.
    """
    rendered = _t(rendered_color)
    mask = _t(validity).unsqueeze(-1)
    count = float(mask.sum())
    diff = (rendered - _t(reproj_color)).abs() * mask
    if count == 0:
        return diff.sum() * 0.0
    return diff.sum() / (3.0 * count)


def depth_loss(scan_depth, rendered_depth, rendered_silhouette=None) -> torch.Tensor:
    """Mean absolute depth difference where the scan has depth and the render covers the pixel.

    Render coverage is ``silhouette > 0.5`` when a silhouette is given,
    otherwise ``rendered_depth > 0``.
    """
    scan = _t(scan_depth)
    rendered = _t(rendered_depth)
    covered = (_t(rendered_silhouette) > 0.5) if rendered_silhouette is not None else (rendered > 0)
    mask = ((scan > 0) & covered).to(DTYPE)
    count = float(mask.sum())
    diff = (rendered - scan).abs() * mask
    if count == 0:
        return diff.sum() * 0.0
    return diff.sum() / count


def iou_loss(s_gt, s_rendered) -> torch.Tensor:
    s = _t(s_gt)
    r = _t(s_rendered)
    inter = (s * r).sum()
    union = (s + r - s * r).sum()
    return 1.0 - inter / union.clamp_min(1e-8)


def common_loss(rgb, depth, iou, weights: LossWeights = LossWeights(), rgb_only: bool = False):
    """Weighted sum of the color, depth and silhouette terms; ``rgb_only`` drops depth."""
    total = weights.lambda_c * rgb + weights.lambda_s * iou
    if not rgb_only:
        total = total + weights.lambda_d * depth
    return total


def laplacian_tensor(w: sparse.spmatrix) -> torch.Tensor:
    coo = sparse.coo_matrix(w)
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(coo.data.astype(np.float64)), coo.shape,
                                   check_invariants=False).coalesce()


def laplacian_loss(w, vertices) -> torch.Tensor:
    """Frobenius norm of the Laplacian coordinates ``W @ V``."""
    v = _t(vertices)
    wt = w if isinstance(w, torch.Tensor) else laplacian_tensor(w)
    delta = torch.sparse.mm(wt, v) if wt.is_sparse else wt @ v
    return torch.linalg.vector_norm(delta)


class DiscriminatorInputError(ValueError):
    pass


class PatchDiscriminator:
    """Conditional patch discriminator on 6-channel (condition, image) stacks.

    Four 4x4 stride-2 convolutions (6 -> 32 -> 64 -> 128 -> 1, padding 1)
    with leaky ReLU (slope 0.2) in between and a sigmoid on the patch map.
    All weights live in one flat ``ParamGroup`` buffer.
    """

    CHANNELS = (6, 32, 64, 128, 1)
    KERNEL = 4
    MIN_SIZE = 16

    def __init__(self, seed: int = 0, learning_rate: float = 1e-4):
        gen = torch.Generator().manual_seed(seed)
        chunks = []
        self.shapes = []
        n_layers = len(self.CHANNELS) - 1
        for i, (cin, cout) in enumerate(zip(self.CHANNELS[:-1], self.CHANNELS[1:])):
            wshape = (cout, cin, self.KERNEL, self.KERNEL)
            k = 1.0 / np.sqrt(cin * self.KERNEL * self.KERNEL)
            if i == n_layers - 1:
                wv = torch.zeros(wshape, dtype=DTYPE)
                bv = torch.zeros(cout, dtype=DTYPE)
            else:
                wv = (torch.rand(wshape, generator=gen, dtype=DTYPE) * 2 - 1) * k
                bv = (torch.rand(cout, generator=gen, dtype=DTYPE) * 2 - 1) * k
            self.shapes += [wshape, (cout,)]
            chunks += [wv.reshape(-1), bv]
        self.params = ParamGroup("discriminator_weights", torch.cat(chunks), learning_rate)

    def layers(self, flat: torch.Tensor | None = None):
        flat = self.params.values if flat is None else flat
        sizes = [int(np.prod(s)) for s in self.shapes]
        parts = torch.split(flat, sizes)
        return [(parts[2 * i].view(self.shapes[2 * i]), parts[2 * i + 1]) for i in range(len(parts) // 2)]

    def logits(self, cond: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
        x = torch.cat([_nchw(cond), _nchw(img)], dim=1)
        if x.shape[-1] < self.MIN_SIZE or x.shape[-2] < self.MIN_SIZE:
            raise DiscriminatorInputError(f"images must be at least {self.MIN_SIZE}x{self.MIN_SIZE}")
        layers = self.layers()
        for i, (wt, b) in enumerate(layers):
            x = F.conv2d(x, wt, b, stride=2, padding=1)
            if i < len(layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x

    def __call__(self, cond, img) -> torch.Tensor:
        return torch.sigmoid(self.logits(cond, img))


def _nchw(img) -> torch.Tensor:
    t = _t(img)
    if t.shape[-1] != 3:
        raise DiscriminatorInputError("images must have 3 channels last")
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2)


def discriminator_forward(d: PatchDiscriminator, cond, img) -> torch.Tensor:
    """Patch probability map for ``img`` conditioned on ``cond``, shape (N, 1, h, w)."""
    c, i = _t(cond), _t(img)
    if c.shape != i.shape:
        raise DiscriminatorInputError("condition and image must have equal shapes")
    return d(c, i)


def _log(x):
    return torch.log(x.clamp(min=LOG_CLAMP))


def adversarial_losses(d: PatchDiscriminator, i_a, i_reproj, i_rendered):
    """Discriminator and (non-saturating) generator losses.

    ``d_loss`` sees the rendered image detached, so it only trains the
    discriminator; ``g_loss`` carries gradients to ``i_rendered``.
    """
    cond = _t(i_a)
    real = discriminator_forward(d, cond, _t(i_reproj))
    rendered = _t(i_rendered)
    fake_d = discriminator_forward(d, cond, rendered.detach())
    d_loss = -(_log(real).mean() + _log(1 - fake_d).mean())
    fake_g = discriminator_forward(d, cond, rendered)
    g_loss = -_log(fake_g).mean()
    return d_loss, g_loss
