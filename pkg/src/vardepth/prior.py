"""Conditional next-scale autoregressive transformer over token maps.

Token maps are generated coarse to fine. The transformer consumes one row per
token position, grouped by scale: scale 1 is a learned start row; scale k > 1
derives its rows from the scale-(k-1) token map, embedded through the shared
V x d table and bilinearly resized to (h_k, w_k). Learned 2-D positional
embeddings (resized per scale from the base grid) and a per-scale embedding
are added on top. A block-causal mask lets every position attend to all
positions of its own and coarser scales; the RGB condition enters through
cross-attention in every block.

Training is teacher forcing: one forward pass scores all scales at once and
the loss is the mean token negative log-likelihood. Several samples are
stacked into one row matrix per step (sequence lengths are fixed by the
schedule), with attention batched across samples and heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import Adam, Linear, LayerNorm, Module, clip_grad_norm, param
from .tokenizer import DEFAULT_SCHEDULE, TokenMap, validate_schedule


@dataclass
class PriorConfig:
    vocab_size: int = 256
    cond_channels: int = 16
    schedule: tuple[tuple[int, int], ...] = DEFAULT_SCHEDULE
    d_model: int = 128
    n_blocks: int = 6
    n_heads: int = 4
    ffn_mult: int = 4
    cond_dropout: float = 0.1

    def __post_init__(self):
        self.schedule = validate_schedule(self.schedule)
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError(f"cond_dropout {self.cond_dropout} outside [0, 1)")

    @property
    def n_scales(self) -> int:
        return len(self.schedule)


def scale_offsets(schedule) -> tuple[np.ndarray, np.ndarray]:
    """Per-scale position counts and exclusive-prefix offsets."""
    counts = np.array([h * w for h, w in schedule], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return counts, offsets


def block_causal_mask(schedule) -> np.ndarray:
    """(N, N) boolean mask: position in scale k sees all of scales 1..k."""
    counts, _ = scale_offsets(schedule)
    scale_of = np.repeat(np.arange(len(counts)), counts)
    return scale_of[:, None] >= scale_of[None, :]


class TransformerBlock(Module):
    """Pre-norm block: masked self-attention, cross-attention, feed-forward."""

    def __init__(self, rng, d: int, n_heads: int, ffn_mult: int):
        self.n_heads = n_heads
        self.ln_attn = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.attn_out = Linear(rng, d, d, std=0.02)
        self.ln_cross = LayerNorm(d)
        self.q_proj = Linear(rng, d, d)
        self.kv_proj = Linear(rng, d, 2 * d)
        self.cross_out = Linear(rng, d, d, std=0.02)
        self.ln_ffn = LayerNorm(d)
        self.ffn_in = Linear(rng, d, ffn_mult * d)
        self.ffn_out = Linear(rng, ffn_mult * d, d, std=0.02)

    def __call__(self, x: Tensor, cond: Tensor, mask: np.ndarray, batch: int) -> Tensor:
        d = x.shape[1]
        h = self.qkv(self.ln_attn(x))
        q = ad.batch_split_heads(ad.narrow(h, 1, 0, d), batch, self.n_heads)
        k = ad.batch_split_heads(ad.narrow(h, 1, d, d), batch, self.n_heads)
        v = ad.batch_split_heads(ad.narrow(h, 1, 2 * d, d), batch, self.n_heads)
        att = ad.batch_merge_heads(ad.attention(q, k, v, mask), batch)
        x = ad.add(x, self.attn_out(att))

        q = ad.batch_split_heads(self.q_proj(self.ln_cross(x)), batch, self.n_heads)
        kv = self.kv_proj(cond)
        ck = ad.batch_split_heads(ad.narrow(kv, 1, 0, d), batch, self.n_heads)
        cv = ad.batch_split_heads(ad.narrow(kv, 1, d, d), batch, self.n_heads)
        cross = ad.batch_merge_heads(ad.attention(q, ck, cv), batch)
        x = ad.add(x, self.cross_out(cross))

        h = self.ffn_out(ad.gelu(self.ffn_in(self.ln_ffn(x))))
        return ad.add(x, h)


class VarPrior(Module):
    def __init__(self, rng: np.random.Generator, config: PriorConfig):
        cfg = config
        d = cfg.d_model
        bh, bw = cfg.schedule[-1]
        self.config = cfg
        self.token_embed = param(rng, (cfg.vocab_size, d), 0.02)
        self.pos_grid = param(rng, (d, bh, bw), 0.02)
        self.scale_embed = param(rng, (cfg.n_scales, d), 0.02)
        self.start_row = param(rng, (1, d), 0.02)
        self.null_cond = param(rng, (1, d), 0.02)
        self.cond_in = Linear(rng, cfg.cond_channels, d)
        self.cond_out = Linear(rng, d, d, std=0.02)
        self.blocks = [TransformerBlock(rng, d, cfg.n_heads, cfg.ffn_mult)
                       for _ in range(cfg.n_blocks)]
        self.ln_final = LayerNorm(d)
        # Zero head: uniform distribution at init, so the initial loss is ln V.
        self.head = Linear(rng, d, cfg.vocab_size, std=0.0)
        self._counts, self._offsets = scale_offsets(cfg.schedule)
        self._mask = block_causal_mask(cfg.schedule)

    # -- conditioning ---------------------------------------------------------

    def project_condition(self, c_latent) -> Tensor:
        """RGB latent (C, h, w) -> condition rows (h*w, d_model)."""
        t = c_latent if isinstance(c_latent, Tensor) else Tensor(c_latent)
        if t.ndim != 3 or t.shape[0] != self.config.cond_channels:
            raise ShapeError(
                f"project_condition: expected ({self.config.cond_channels}, h, w), "
                f"got {t.shape}"
            )
        rows = ad.chw_to_rows(t)
        return self.cond_out(ad.gelu(self.cond_in(rows)))

    def null_condition(self) -> Tensor:
        """The learned null token as a length-1 condition sequence."""
        return self.null_cond

    # -- sequence assembly ------------------------------------------------------

    def _scale_rows(self, prev_tokens: TokenMap | None, k: int) -> Tensor:
        """Input rows for scale k (1-based), built from the k-1 token map."""
        hk, wk = self.config.schedule[k - 1]
        if k == 1:
            base = self.start_row
        else:
            ph, pw = self.config.schedule[k - 2]
            emb = ad.embed(self.token_embed, prev_tokens.indices.reshape(-1))
            grid = ad.rows_to_chw(emb, ph, pw)
            base = ad.chw_to_rows(ad.resize_bilinear(grid, (hk, wk)))
        pos = ad.chw_to_rows(ad.resize_bilinear(self.pos_grid, (hk, wk)))
        scale_bias = ad.reshape(ad.narrow(self.scale_embed, 0, k - 1, 1),
                                (self.config.d_model,))
        return ad.add_row_bias(ad.add(base, pos), scale_bias)

    def _rows_through(self, tokens: list[TokenMap], upto: int) -> Tensor:
        rows = [self._scale_rows(None if k == 1 else tokens[k - 2], k)
                for k in range(1, upto + 1)]
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)

    def _check_prefix(self, prefix: list[TokenMap], k: int) -> None:
        if not 1 <= k <= self.config.n_scales:
            raise IndexError(f"scale {k} outside 1..{self.config.n_scales}")
        if len(prefix) != k - 1:
            raise ContractError(
                f"predict at scale {k} needs exactly {k - 1} prefix maps, got {len(prefix)}"
            )
        for pos, tm in enumerate(prefix, start=1):
            if tm.scale_index != pos or tm.indices.shape != self.config.schedule[pos - 1]:
                raise ShapeError(f"prefix map at position {pos} violates the schedule")

    # -- forward passes ---------------------------------------------------------

    def _transform(self, rows: Tensor, cond: Tensor, mask: np.ndarray,
                   batch: int) -> Tensor:
        x = rows
        for block in self.blocks:
            x = block(x, cond, mask, batch)
        return self.ln_final(x)

    def predict_scale_logits(self, prefix: list[TokenMap], cond: Tensor, k: int) -> Tensor:
        """Logits (h_k*w_k, V) for every position of scale k, whole scale at once."""
        self._check_prefix(prefix, k)
        n = int(self._offsets[k - 1] + self._counts[k - 1])
        rows = self._rows_through(prefix, k)
        hidden = self._transform(rows, cond, self._mask[:n, :n], batch=1)
        block_rows = ad.narrow(hidden, 0, int(self._offsets[k - 1]),
                               int(self._counts[k - 1]))
        return self.head(block_rows)

    def teacher_forcing_loss(self, tokens: list[TokenMap], cond: Tensor) -> Tensor:
        """Mean token NLL over all scales, one forward pass."""
        return self.teacher_forcing_batch([(tokens, cond)])

    def teacher_forcing_batch(self, samples: list[tuple[list[TokenMap], Tensor]]) -> Tensor:
        """Stacked teacher forcing: mean NLL over every position of every sample.

        All condition sequences must share one length (drop-outs pass the null
        row tiled), because rows are stacked into a single matrix.
        """
        if not samples:
            raise ContractError("teacher_forcing_batch: empty batch")
        k_all = self.config.n_scales
        row_blocks, cond_blocks, target_blocks = [], [], []
        cond_len = samples[0][1].shape[0]
        for tokens, cond in samples:
            self._check_tokens(tokens)
            if cond.ndim != 2 or cond.shape[1] != self.config.d_model:
                raise ShapeError(f"condition rows have shape {cond.shape}")
            if cond.shape[0] != cond_len:
                raise ShapeError("condition sequences in a batch must share a length")
            row_blocks.append(self._rows_through(tokens, k_all))
            cond_blocks.append(cond)
            target_blocks.append(np.concatenate(
                [tm.indices.reshape(-1) for tm in tokens]))
        rows = row_blocks[0] if len(samples) == 1 else ad.concat(row_blocks, axis=0)
        cond = cond_blocks[0] if len(samples) == 1 else ad.concat(cond_blocks, axis=0)
        hidden = self._transform(rows, cond, self._mask, batch=len(samples))
        logits = self.head(hidden)
        targets = np.concatenate(target_blocks)
        return ad.cross_entropy_logits(logits, targets)

    def _check_tokens(self, tokens: list[TokenMap]) -> None:
        if len(tokens) != self.config.n_scales:
            raise ShapeError(
                f"expected {self.config.n_scales} token maps, got {len(tokens)}"
            )
        for pos, tm in enumerate(tokens, start=1):
            if tm.scale_index != pos or tm.indices.shape != self.config.schedule[pos - 1]:
                raise ShapeError(f"token map at position {pos} violates the schedule")


def sample_scale(logits, temperature: float, top_k: int, seed) -> np.ndarray:
    """Categorical per-row sample from temperature-scaled, top-k-truncated logits.

    Fully determined by the seed. top_k = 1 short-circuits to argmax (no draw,
    so temperature and seed are irrelevant, matching the greedy contract).
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.ndim != 2:
        raise ShapeError(f"sample_scale expects (n, V) logits, got {z.shape}")
    v = z.shape[1]
    if not (isinstance(temperature, (int, float)) and temperature > 0):
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not 1 <= int(top_k) <= v:
        raise ConfigError(f"top_k {top_k} outside 1..{v}")
    top_k = int(top_k)
    if top_k == 1:
        return np.argmax(z, axis=1).astype(np.int32)
    probs = topk_probabilities(z, temperature, top_k)
    rng = np.random.default_rng(seed)
    u = rng.random(z.shape[0])
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0  # guard against accumulated rounding
    choice = (u[:, None] > cdf).sum(axis=1)
    return choice.astype(np.int32)


def topk_probabilities(logits: np.ndarray, temperature: float, top_k: int) -> np.ndarray:
    """Row-wise softmax(logits/T) restricted to each row's top-k support.

    Ties at the k-th rank keep the lowest index (stable ordering), and the
    result is float64 so downstream expected-embedding sums stay exact enough
    for the guidance algebra.
    """
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    n, v = z.shape
    if top_k < v:
        order = np.argsort(-z, axis=1, kind="stable")
        keep = np.zeros_like(z, dtype=bool)
        np.put_along_axis(keep, order[:, :top_k], True, axis=1)
        z = np.where(keep, z, -np.inf)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p


@dataclass
class PriorTrainStats:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def train_prior(prior: VarPrior, dataset: list[tuple[list[TokenMap], np.ndarray]], *,
                epochs: int, lr: float, batch_size: int, rng: np.random.Generator,
                grad_clip: float = 1.0, log=None,
                optimizer: Adam | None = None) -> PriorTrainStats:
    """Teacher-forcing training over (token maps, condition latent) pairs.

    Condition latents are projected per step (the projection MLP trains too);
    with probability cond_dropout a sample's condition is replaced by the
    learned null token tiled to the common sequence length.
    """
    if not dataset:
        raise ConfigError("train_prior: empty dataset")
    opt = optimizer if optimizer is not None else Adam(prior.parameters(), lr=lr)
    stats = PriorTrainStats()
    p_drop = prior.config.cond_dropout
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            samples = []
            cond_len = None
            for i in batch:
                tokens, c_latent = dataset[i]
                cond = prior.project_condition(c_latent)
                if cond_len is None:
                    cond_len = cond.shape[0]
                if p_drop > 0.0 and rng.random() < p_drop:
                    cond = ad.concat([prior.null_cond] * cond_len, axis=0)
                samples.append((tokens, cond))
            opt.zero_grad()
            loss = prior.teacher_forcing_batch(samples)
            loss.backward()
            clip_grad_norm(opt.params, grad_clip)
            opt.step()
            stats.step_losses.append(float(loss.data))
            epoch_losses.append(float(loss.data))
        stats.epoch_losses.append(float(np.mean(epoch_losses)))
        if log is not None:
            log(f"epoch {epoch} loss {stats.epoch_losses[-1]:.6f}")
    return stats
