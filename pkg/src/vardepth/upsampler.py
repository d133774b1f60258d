"""Scale-aware conditional upsampler over depth latents.

One U-Net serves every scale: it takes the current partial depth latent and
the RGB condition latent (channel-concatenated), plus the scale index as a
learned embedding injected at the bottleneck, and predicts the final
full-resolution depth latent. The network output is a correction added to
the partial input, so a zero-initialized final layer makes the whole module
an exact identity on its first argument.

Intermediate scales of a full-resolution prediction are recovered by
re-encoding: running the tokenizer's residual loop on the prediction and
truncating, rather than keeping one model per scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nn import Adam, Conv3x3, Module, clip_grad_norm, param
from .tokenizer import MsvqTokenizer, TokenMap


@dataclass
class UpsamplerConfig:
    latent_channels: int = 16
    n_scales: int = 10
    base_width: int = 32

    def __post_init__(self):
        if self.latent_channels < 1 or self.n_scales < 1 or self.base_width < 1:
            raise ConfigError("upsampler config fields must be positive")


class CondUpsampler(Module):
    """U-Net with three resolution levels and a per-scale bottleneck bias."""

    def __init__(self, rng: np.random.Generator, config: UpsamplerConfig):
        cfg = config
        c = cfg.latent_channels
        w0, w1, w2 = cfg.base_width, 2 * cfg.base_width, 4 * cfg.base_width
        self.config = cfg
        self.enc0a = Conv3x3(rng, 2 * c, w0)
        self.enc0b = Conv3x3(rng, w0, w0)
        self.enc1a = Conv3x3(rng, w0, w1)
        self.enc1b = Conv3x3(rng, w1, w1)
        self.bott_a = Conv3x3(rng, w1, w2)
        self.bott_b = Conv3x3(rng, w2, w2)
        self.scale_embed = param(rng, (cfg.n_scales, w2), 0.02)
        self.dec1a = Conv3x3(rng, w2 + w1, w1)
        self.dec1b = Conv3x3(rng, w1, w1)
        self.dec0a = Conv3x3(rng, w1 + w0, w0)
        self.dec0b = Conv3x3(rng, w0, w0)
        # Zero-initialized correction head: identity behaviour at init.
        self.out = Conv3x3(rng, w0, c, zero_init=True)

    def _check_inputs(self, f_partial: Tensor, cond: Tensor, k: int) -> None:
        c = self.config.latent_channels
        if f_partial.ndim != 3 or f_partial.shape[0] != c:
            raise ShapeError(f"partial latent shape {f_partial.shape}, expected ({c}, h, w)")
        if cond.shape != f_partial.shape:
            raise ShapeError(
                f"condition latent {cond.shape} does not match partial {f_partial.shape}"
            )
        if not 1 <= k <= self.config.n_scales:
            raise IndexError(f"scale {k} outside 1..{self.config.n_scales}")

    def predict(self, f_partial, cond, k: int) -> Tensor:
        """Estimate of the final depth latent from a partial one, at scale k.

        Both inputs live at full latent resolution; coarser partials are
        bilinearly upsampled by the caller (exact pass-through when already
        full size).
        """
        f_partial = f_partial if isinstance(f_partial, Tensor) else Tensor(f_partial)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        self._check_inputs(f_partial, cond, k)
        h, w = f_partial.shape[1:]

        x = ad.concat([f_partial, cond], axis=0)
        e0 = ad.gelu(self.enc0b(ad.gelu(self.enc0a(x))))
        x = ad.resize_area(e0, (max(1, h // 2), max(1, w // 2)))
        e1 = ad.gelu(self.enc1b(ad.gelu(self.enc1a(x))))
        x = ad.resize_area(e1, (max(1, e1.shape[1] // 2), max(1, e1.shape[2] // 2)))

        x = self.bott_a(x)
        srow = ad.reshape(ad.narrow(self.scale_embed, 0, k - 1, 1), (x.shape[0],))
        x = ad.gelu(ad.add_channel_bias(x, srow))
        x = ad.gelu(self.bott_b(x))

        x = ad.resize_bilinear(x, e1.shape[1:])
        x = ad.concat([x, e1], axis=0)
        x = ad.gelu(self.dec1b(ad.gelu(self.dec1a(x))))
        x = ad.resize_bilinear(x, e0.shape[1:])
        x = ad.concat([x, e0], axis=0)
        x = ad.gelu(self.dec0b(ad.gelu(self.dec0a(x))))
        return ad.add(f_partial, self.out(x))

    def loss(self, f_partial, cond, k: int, f_target) -> Tensor:
        """Mean squared error between predict(...) and the target latent."""
        target = f_target if isinstance(f_target, Tensor) else Tensor(f_target)
        pred = self.predict(f_partial, cond, k)
        if target.shape != pred.shape:
            raise ShapeError(f"target {target.shape} does not match prediction {pred.shape}")
        return ad.mse(pred, target)


def reencode(tokenizer: MsvqTokenizer, f_full, k: int) -> tuple[np.ndarray, TokenMap]:
    """Scale-k view of a full-resolution latent via the tokenizer's loop.

    Returns the cumulative continuous approximation after k stages together
    with the stage-k token map, so one full-resolution prediction yields any
    intermediate scale without per-scale models.
    """
    approx, tokens = tokenizer.encode_at_scale(f_full, k, return_tokens=True)
    return approx, tokens[-1]


def cutmix_latents(c_keep: np.ndarray, c_paste: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Copy of c_keep with a random rectangle replaced from c_paste."""
    if c_keep.shape != c_paste.shape:
        raise ShapeError(f"cutmix: {c_keep.shape} vs {c_paste.shape}")
    _, h, w = c_keep.shape
    rh = int(rng.integers(1, h + 1))
    rw = int(rng.integers(1, w + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    out = np.array(c_keep)
    out[:, top:top + rh, left:left + rw] = c_paste[:, top:top + rh, left:left + rw]
    return out


@dataclass
class UpsamplerTrainStats:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _partial_pyramid(tokenizer: MsvqTokenizer, f_gt: np.ndarray) -> list[np.ndarray]:
    """Partial latents [after 0 stages, after 1, ..., after K-1], all full size.

    Entry j is the bilinearly-upsampled cumulative approximation of the first
    j token stages of the ground truth (zeros for j = 0): the training-time
    stand-in for the sampler's running latent before stage j+1.
    """
    k_total = tokenizer.config.n_scales
    full = f_gt.shape[1:]
    _, tokens = tokenizer.encode_at_scale(f_gt, k_total, return_tokens=True)
    out = [np.zeros_like(f_gt)]
    with ad.no_grad():
        for j in range(1, k_total):
            approx = tokenizer.decode_multiscale(tokens[:j])
            out.append(ad.resize_bilinear(Tensor(approx), full).data)
    return out


def train_upsampler(up: CondUpsampler, tokenizer: MsvqTokenizer,
                    dataset: list[tuple[np.ndarray, np.ndarray]], *,
                    epochs: int, lr: float = 1e-4, batch_size: int = 8,
                    rng: np.random.Generator, cutmix_prob: float = 0.5,
                    grad_clip: float = 1.0, log=None,
                    optimizer: Adam | None = None) -> UpsamplerTrainStats:
    """Train on (depth latent, condition latent) pairs with a frozen tokenizer.

    Every sample draws a scale k uniformly from 1..K; the partial input is the
    ground truth truncated to k-1 token stages. Condition latents are CutMix
    swapped with a random partner (the caller may additionally include
    colour-jittered encodings in the dataset).
    """
    if not dataset:
        raise ConfigError("train_upsampler: empty dataset")
    k_total = up.config.n_scales
    if tokenizer.config.n_scales != k_total:
        raise ConfigError(
            f"tokenizer has {tokenizer.config.n_scales} scales, upsampler {k_total}"
        )
    partials = [_partial_pyramid(tokenizer, f_gt) for f_gt, _ in dataset]
    opt = optimizer if optimizer is not None else Adam(up.parameters(), lr=lr)
    stats = UpsamplerTrainStats()
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            losses = []
            for i in batch:
                f_gt, cond = dataset[i]
                k = int(rng.integers(1, k_total + 1))
                if cutmix_prob > 0.0 and rng.random() < cutmix_prob:
                    partner = int(rng.integers(0, n))
                    cond = cutmix_latents(cond, dataset[partner][1], rng)
                losses.append(up.loss(partials[i][k - 1], cond, k, f_gt))
            loss = losses[0] if len(losses) == 1 else _mean_scalars(losses)
            loss.backward()
            clip_grad_norm(opt.params, grad_clip)
            opt.step()
            stats.step_losses.append(float(loss.data))
            epoch_losses.append(float(loss.data))
        stats.epoch_losses.append(float(np.mean(epoch_losses)))
        if log is not None:
            log(f"epoch {epoch} loss {stats.epoch_losses[-1]:.6f}")
    return stats


def _mean_scalars(losses) -> Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    return ad.scale(total, 1.0 / len(losses))


def mean_loss_at_scale(up: CondUpsampler, tokenizer: MsvqTokenizer,
                       dataset: list[tuple[np.ndarray, np.ndarray]], k: int) -> float:
    """Average clean (no augmentation) loss over a dataset at one fixed scale."""
    if not dataset:
        raise ConfigError("mean_loss_at_scale: empty dataset")
    total = 0.0
    with ad.no_grad():
        for f_gt, cond in dataset:
            if k == 1:
                partial = np.zeros_like(f_gt)
            else:
                approx = tokenizer.encode_at_scale(f_gt, k - 1)
                partial = ad.resize_bilinear(Tensor(approx), f_gt.shape[1:]).data
            total += float(up.loss(partial, cond, k, f_gt).data)
    return total / len(dataset)
