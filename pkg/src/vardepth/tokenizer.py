"""Multi-scale residual vector-quantized autoencoder.

An encoder maps images to a (C, h, w) latent; a shared V x C codebook plus a
coarse-to-fine residual loop turn that latent into K token maps; a decoder
maps the quantized latent back to image space. Each scale quantizes what the
previous scales failed to represent: downsample the running residual, snap to
the nearest codebook rows, upsample, refine with the per-scale 3x3 conv, and
subtract. The decoded approximation is the sum of those refined contributions.

Codebook learning is EMA-based (cluster means of assigned vectors) with a
commitment term pulling the encoder toward its quantization; gradients reach
the decoder input through a straight-through estimator. Row 0 is frozen to
the zero vector so "nothing left to add" stays exactly representable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nn import Adam, Conv3x3, Module

DEFAULT_SCHEDULE: tuple[tuple[int, int], ...] = (
    (1, 1), (1, 2), (2, 2), (2, 3), (3, 4),
    (4, 5), (4, 6), (5, 7), (6, 7), (6, 8),
)

DOWNSAMPLE_FACTOR = 8


def validate_schedule(schedule, latent_hw=None) -> tuple[tuple[int, int], ...]:
    """Check the scale list: starts at (1,1), non-decreasing, ends at the latent."""
    sched = tuple((int(h), int(w)) for h, w in schedule)
    if not sched:
        raise ConfigError("schedule is empty")
    if sched[0] != (1, 1):
        raise ConfigError(f"schedule must start at (1, 1), got {sched[0]}")
    for (h0, w0), (h1, w1) in zip(sched, sched[1:]):
        if h1 < h0 or w1 < w0:
            raise ConfigError(
                f"schedule resolutions must be non-decreasing: ({h0},{w0}) -> ({h1},{w1})"
            )
    if latent_hw is not None and sched[-1] != tuple(latent_hw):
        raise ConfigError(
            f"schedule ends at {sched[-1]} but the latent is {tuple(latent_hw)}"
        )
    return sched


class TokenMap:
    """Discrete code indices for one scale: a (h_k, w_k) int32 grid."""

    __slots__ = ("scale_index", "indices")

    def __init__(self, scale_index: int, indices: np.ndarray):
        idx = np.asarray(indices)
        if idx.ndim != 2:
            raise ShapeError(f"token map must be 2-D, got shape {idx.shape}")
        if idx.size and idx.min() < 0:
            raise IndexError("token map contains negative indices")
        self.scale_index = int(scale_index)
        self.indices = np.ascontiguousarray(idx, dtype=np.int32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenMap)
                and self.scale_index == other.scale_index
                and np.array_equal(self.indices, other.indices))

    def __repr__(self) -> str:
        return f"TokenMap(k={self.scale_index}, shape={self.indices.shape})"


@dataclass
class TokenizerConfig:
    in_channels: int = 1
    out_channels: int = 1
    vocab_size: int = 256
    latent_channels: int = 16
    schedule: tuple[tuple[int, int], ...] = DEFAULT_SCHEDULE
    enc_widths: tuple[int, int, int] = (16, 32, 32)
    codebook_init_scale: float = 0.5

    def __post_init__(self):
        self.schedule = validate_schedule(self.schedule)
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be >= 1")

    @property
    def n_scales(self) -> int:
        return len(self.schedule)


class Codebook:
    """Shared quantization dictionary: (V, C) float32 rows, row 0 frozen zero."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, channels: int,
                 init_scale: float = 0.5):
        e = rng.uniform(-init_scale, init_scale,
                        size=(vocab_size, channels)).astype(np.float32)
        e[0] = 0.0
        self.entries = e
        self.usage_counts = np.zeros(vocab_size, dtype=np.int64)
        # EMA cluster statistics (training state, float64 for drift resistance)
        self.ema_counts = np.zeros(vocab_size, dtype=np.float64)
        self.ema_sums = np.zeros((vocab_size, channels), dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        return self.entries.shape[0]

    @property
    def channels(self) -> int:
        return self.entries.shape[1]


def quantize(f, codebook: Codebook) -> np.ndarray:
    """Nearest codebook row per spatial position of a (C, h, w) latent.

    Distances are squared Euclidean computed in float64 through an explicit
    difference (not the expanded-gemm form), so near-ties resolve the same
    way a scalar reference would; exact ties break to the lowest index via
    argmin's first-occurrence rule. Returns (h, w) int32 indices.
    """
    data = f.data if isinstance(f, Tensor) else np.asarray(f)
    if data.ndim != 3:
        raise ShapeError(f"quantize expects (C, h, w), got {data.shape}")
    c, h, w = data.shape
    if c != codebook.channels:
        raise ShapeError(f"quantize: latent has {c} channels, codebook {codebook.channels}")
    flat = data.reshape(c, h * w).T.astype(np.float64)          # (n, C)
    rows = codebook.entries.astype(np.float64)                   # (V, C)
    diff = flat[:, None, :] - rows[None, :, :]
    d2 = np.einsum("nvc,nvc->nv", diff, diff)
    idx = np.argmin(d2, axis=1).astype(np.int32)
    return idx.reshape(h, w)


def lookup(tokens, codebook: Codebook) -> np.ndarray:
    """Gather codebook rows for a TokenMap (or raw index grid) as (C, h, w)."""
    idx = tokens.indices if isinstance(tokens, TokenMap) else np.asarray(tokens)
    if idx.ndim != 2:
        raise ShapeError(f"lookup expects a 2-D index grid, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= codebook.vocab_size):
        raise IndexError("lookup: index outside the codebook")
    h, w = idx.shape
    rows = codebook.entries[idx.reshape(-1)]
    return np.ascontiguousarray(rows.T.reshape(codebook.channels, h, w))


class MsvqTokenizer(Module):
    """Encoder, decoder, per-scale refinement convs, and the shared codebook."""

    def __init__(self, rng: np.random.Generator, config: TokenizerConfig,
                 identity_theta: bool = False):
        cfg = config
        w0, w1, w2 = cfg.enc_widths
        c = cfg.latent_channels
        self.config = cfg
        self.enc = [
            Conv3x3(rng, cfg.in_channels, w0),
            Conv3x3(rng, w0, w1),
            Conv3x3(rng, w1, w2),
            Conv3x3(rng, w2, c),
        ]
        self.dec = [
            Conv3x3(rng, c, w2),
            Conv3x3(rng, w2, w1),
            Conv3x3(rng, w1, w0),
            Conv3x3(rng, w0, cfg.out_channels),
        ]
        self.thetas = [self._make_theta(rng, c, identity_theta)
                       for _ in range(cfg.n_scales)]
        self.codebook = Codebook(rng, cfg.vocab_size, c, cfg.codebook_init_scale)

    @staticmethod
    def _make_theta(rng, c: int, exact_identity: bool) -> Conv3x3:
        theta = Conv3x3(rng, c, c)
        kernel = np.zeros((c, c, 3, 3), dtype=np.float32)
        kernel[np.arange(c), np.arange(c), 1, 1] = 1.0
        if not exact_identity:
            kernel += rng.normal(0.0, 1e-3, size=kernel.shape).astype(np.float32)
        theta.weight.data = kernel
        theta.bias.data[:] = 0.0
        return theta

    def set_identity_thetas(self) -> None:
        """Force every refinement conv to the exact delta kernel (test hook)."""
        c = self.config.latent_channels
        for theta in self.thetas:
            theta.weight.data[:] = 0.0
            theta.weight.data[np.arange(c), np.arange(c), 1, 1] = 1.0
            theta.bias.data[:] = 0.0

    # -- continuous codecs ---------------------------------------------------

    def encode_image(self, x) -> Tensor:
        """Image (in_ch, H, W) -> latent (C, H/8, W/8)."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.ndim != 3 or t.shape[0] != self.config.in_channels:
            raise ShapeError(
                f"encode_image: expected ({self.config.in_channels}, H, W), got {t.shape}"
            )
        _, h, w = t.shape
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ShapeError(
                f"encode_image: {h}x{w} not divisible by {DOWNSAMPLE_FACTOR}"
            )
        for conv in self.enc[:3]:
            t = ad.gelu(conv(t))
            t = ad.resize_area(t, (t.shape[1] // 2, t.shape[2] // 2))
        return self.enc[3](t)

    def decode_image(self, f) -> Tensor:
        """Latent (C, h, w) -> image (out_ch, 8h, 8w), clamped to [-1, 1]."""
        t = f if isinstance(f, Tensor) else Tensor(f)
        if t.ndim != 3 or t.shape[0] != self.config.latent_channels:
            raise ShapeError(
                f"decode_image: expected ({self.config.latent_channels}, h, w), got {t.shape}"
            )
        for conv in self.dec[:3]:
            t = ad.gelu(conv(t))
            t = ad.resize_bilinear(t, (t.shape[1] * 2, t.shape[2] * 2))
        return ad.clamp(self.dec[3](t), -1.0, 1.0)

    # -- multi-scale token codecs ---------------------------------------------

    def _contribution(self, tm: TokenMap, target_hw) -> Tensor:
        """theta_k(bilinear(lookup(r_k), target)); graph-free at call sites."""
        e = lookup(tm, self.codebook)
        u = ad.resize_bilinear(Tensor(e), target_hw)
        return self.thetas[tm.scale_index - 1](u)

    def _residual_loop(self, f: np.ndarray, n_stages: int):
        sched = self.config.schedule
        h, w = f.shape[1:]
        residual = np.array(f, dtype=np.float32)
        tokens: list[TokenMap] = []
        norms: list[float] = []
        with ad.no_grad():
            for k in range(1, n_stages + 1):
                hk, wk = sched[k - 1]
                rho = ad.resize_area(Tensor(residual), (hk, wk)).data
                tm = TokenMap(k, quantize(rho, self.codebook))
                residual -= self._contribution(tm, (h, w)).data
                tokens.append(tm)
                norms.append(float(np.linalg.norm(residual)))
        return tokens, norms

    def _check_latent(self, f) -> np.ndarray:
        data = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float32)
        expect = (self.config.latent_channels,) + self.config.schedule[-1]
        if data.shape != expect:
            raise ShapeError(f"latent shape {data.shape}, schedule expects {expect}")
        return data

    def encode_multiscale(self, f, return_residual_norms: bool = False):
        """Full-resolution latent -> K token maps (optionally + residual norms)."""
        data = self._check_latent(f)
        tokens, norms = self._residual_loop(data, self.config.n_scales)
        if return_residual_norms:
            return tokens, norms
        return tokens

    def decode_multiscale(self, tokens: list[TokenMap]) -> np.ndarray:
        """Sum of refined contributions, at the last given map's resolution.

        Accepts the full K maps or a truncated prefix (scales 1..k).
        """
        self._check_token_run(tokens)
        target = self.config.schedule[tokens[-1].scale_index - 1]
        c = self.config.latent_channels
        out = np.zeros((c,) + target, dtype=np.float32)
        with ad.no_grad():
            for tm in tokens:
                out += self._contribution(tm, target).data
        return out

    def encode_at_scale(self, f, k: int, return_tokens: bool = False):
        """Cumulative decoded approximation after running the loop through stage k.

        With return_tokens, also yields the stage-1..k token maps of that run.
        """
        if not 1 <= k <= self.config.n_scales:
            raise IndexError(f"scale {k} outside 1..{self.config.n_scales}")
        data = self._check_latent(f)
        tokens, _ = self._residual_loop(data, k)
        approx = self.decode_multiscale(tokens)
        if return_tokens:
            return approx, tokens
        return approx

    def _check_token_run(self, tokens: list[TokenMap]) -> None:
        if not tokens:
            raise ShapeError("empty token list")
        if len(tokens) > self.config.n_scales:
            raise ShapeError(f"{len(tokens)} token maps for {self.config.n_scales} scales")
        for pos, tm in enumerate(tokens, start=1):
            if tm.scale_index != pos:
                raise ShapeError(f"token run not contiguous at position {pos}")
            expect = self.config.schedule[pos - 1]
            if tm.indices.shape != expect:
                raise ShapeError(
                    f"scale {pos} token map is {tm.indices.shape}, schedule says {expect}"
                )
            if tm.indices.max(initial=0) >= self.config.vocab_size:
                raise IndexError(f"scale {pos} token outside vocabulary")

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        # The checkpoint container only holds float32 payloads, but EMA state
        # and usage counts are 64-bit. Reinterpreting their bytes as f32 word
        # pairs keeps resume bit-exact; _restore_wide undoes it on load.
        out = super().state_dict()
        cb = self.codebook
        out["codebook_entries"] = cb.entries.copy()
        out["codebook_usage"] = np.ascontiguousarray(cb.usage_counts).view(np.float32)
        out["ema_counts"] = np.ascontiguousarray(cb.ema_counts).view(np.float32)
        out["ema_sums"] = np.ascontiguousarray(cb.ema_sums).view(np.float32)
        return out

    @staticmethod
    def _restore_wide(arr: np.ndarray, dtype, target_shape: tuple) -> np.ndarray:
        a = np.ascontiguousarray(arr)
        if a.shape == target_shape:
            return a.astype(dtype)  # older checkpoints stored plain casts
        return a.view(dtype).reshape(target_shape)

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        extras = {k: arrays[k] for k in
                  ("codebook_entries", "codebook_usage", "ema_counts", "ema_sums")
                  if k in arrays}
        params_only = {k: v for k, v in arrays.items()
                       if k not in extras and not k.startswith("opt_")}
        super().load_state_dict(params_only)
        cb = self.codebook
        if "codebook_entries" not in extras:
            from .errors import CompatibilityError
            raise CompatibilityError("checkpoint lacks codebook_entries")
        entries = np.asarray(extras["codebook_entries"], dtype=np.float32)
        if entries.shape != cb.entries.shape:
            from .errors import CompatibilityError
            raise CompatibilityError(
                f"codebook shape {entries.shape} vs model {cb.entries.shape}"
            )
        cb.entries = entries.copy()
        if "codebook_usage" in extras:
            cb.usage_counts = self._restore_wide(
                extras["codebook_usage"], np.int64, cb.usage_counts.shape)
        if "ema_counts" in extras:
            cb.ema_counts = self._restore_wide(
                extras["ema_counts"], np.float64, cb.ema_counts.shape)
        if "ema_sums" in extras:
            cb.ema_sums = self._restore_wide(
                extras["ema_sums"], np.float64, cb.ema_sums.shape)


@dataclass
class TokenizerTrainStats:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_recon: list[float] = field(default_factory=list)
    usage_entropy: list[float] = field(default_factory=list)


def _train_forward(tok: MsvqTokenizer, x: np.ndarray, commit_weight: float):
    """One sample's loss graph plus the quantizer assignments for EMA updates."""
    f = tok.encode_image(x)
    h, w = f.shape[1:]
    residual = f.data.copy()
    contribs = []
    assignments = []  # (rho rows (n, C) float64, flat indices)
    for k, (hk, wk) in enumerate(tok.config.schedule, start=1):
        with ad.no_grad():
            rho = ad.resize_area(Tensor(residual), (hk, wk)).data
        idx = quantize(rho, tok.codebook)
        e = lookup(idx, tok.codebook)
        u = ad.resize_bilinear(Tensor(e), (h, w))
        cth = tok.thetas[k - 1](u)
        residual -= cth.data
        contribs.append(cth)
        assignments.append((rho.reshape(rho.shape[0], -1).T.astype(np.float64),
                            idx.reshape(-1).astype(np.int64)))
    fhat = contribs[0]
    for cth in contribs[1:]:
        fhat = ad.add(fhat, cth)
    # Straight-through: decoder sees the quantized value, encoder gets identity grads.
    st = ad.add(fhat, ad.sub(f, f.detach()))
    xhat = tok.decode_image(st)
    recon = ad.mse(xhat, Tensor(x))
    commit = ad.mse(f, Tensor(fhat.data))
    loss = ad.add(recon, ad.scale(commit, commit_weight))
    return loss, float(recon.data), assignments


def _ema_update(cb: Codebook, assignments, decay: float) -> np.ndarray:
    v, c = cb.entries.shape
    counts = np.zeros(v, dtype=np.float64)
    sums = np.zeros((v, c), dtype=np.float64)
    for rows, idx in assignments:
        counts += np.bincount(idx, minlength=v)
        np.add.at(sums, idx, rows)
    cb.ema_counts = decay * cb.ema_counts + (1.0 - decay) * counts
    cb.ema_sums = decay * cb.ema_sums + (1.0 - decay) * sums
    live = cb.ema_counts > 1e-6
    live[0] = False  # frozen zero row
    cb.entries[live] = (cb.ema_sums[live] / cb.ema_counts[live, None]).astype(np.float32)
    cb.usage_counts += counts.astype(np.int64)
    return counts


def _usage_entropy(hist: np.ndarray) -> float:
    total = hist.sum()
    if total <= 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(-(p * np.log(p)).sum())


def train_tokenizer(tok: MsvqTokenizer, images: list[np.ndarray], *, epochs: int,
                    lr: float, batch_size: int, rng: np.random.Generator,
                    commit_weight: float = 0.25, ema_decay: float = 0.99,
                    log=None, optimizer: Adam | None = None) -> TokenizerTrainStats:
    """EMA-codebook autoencoder training over (in_ch, H, W) arrays in [-1, 1]."""
    if not images:
        raise ConfigError("train_tokenizer: empty dataset")
    opt = optimizer if optimizer is not None else Adam(tok.parameters(), lr=lr)
    stats = TokenizerTrainStats()
    n = len(images)
    reservoir_cap = 2048
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_usage = np.zeros(tok.config.vocab_size, dtype=np.float64)
        reservoir: list[np.ndarray] = []
        losses, recons = [], []
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            batch_assignments = []
            batch_losses = []
            for i in batch:
                loss, recon, assigns = _train_forward(tok, images[i], commit_weight)
                ad.scale(loss, 1.0 / len(batch)).backward()
                batch_losses.append(float(loss.data))
                recons.append(recon)
                batch_assignments.extend(assigns)
            losses.extend(batch_losses)
            stats.step_losses.append(float(np.mean(batch_losses)))
            opt.step()
            epoch_usage += _ema_update(tok.codebook, batch_assignments, ema_decay)
            for rows, _ in batch_assignments:
                reservoir.extend(np.float32(r) for r in rows)
            if len(reservoir) > reservoir_cap:
                keep = rng.choice(len(reservoir), size=reservoir_cap, replace=False)
                reservoir = [reservoir[j] for j in sorted(keep)]
        _reseed_dead_rows(tok.codebook, epoch_usage, reservoir, rng)
        stats.epoch_losses.append(float(np.mean(losses)))
        stats.epoch_recon.append(float(np.mean(recons)))
        stats.usage_entropy.append(_usage_entropy(epoch_usage))
        if log is not None:
            log(f"epoch {epoch} loss {stats.epoch_losses[-1]:.6f} "
                f"recon {stats.epoch_recon[-1]:.6f} "
                f"usage_entropy {stats.usage_entropy[-1]:.4f}")
    return stats


def _reseed_dead_rows(cb: Codebook, epoch_usage: np.ndarray,
                      reservoir: list[np.ndarray], rng: np.random.Generator) -> None:
    """Reset rows unused for a whole epoch to random quantizer inputs (row 0 excepted)."""
    if not reservoir:
        return
    dead = np.flatnonzero(epoch_usage == 0)
    dead = dead[dead != 0]
    for row in dead:
        vec = reservoir[int(rng.integers(len(reservoir)))]
        cb.entries[row] = vec
        cb.ema_counts[row] = 1.0
        cb.ema_sums[row] = vec.astype(np.float64)
