"""End-to-end recipe shared by the CLI and the acceptance suite.

Covers dataset generation on disk, the three training stages (tokenizers,
prior, upsampler) with epoch-granular resume, and loading a compatible model
set back for inference. Training follows a two-phase dataset schedule: each
learned stage first sees the roadway-family subset, then the indoor subset,
with one optimizer carried across the boundary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import (CheckpointData, check_compatible, expect_kind,
                         load_checkpoint, save_checkpoint)
from .config import RunConfig
from .errors import ConfigError, DataError, DependencyError
from .guidance import SamplerModels
from .nn import Adam
from .pfmio import init_dataset_dir, list_indices, load_sample, save_sample
from .prior import VarPrior, train_prior
from .synthdata import (NormalizationSpec, SceneConfig, color_jitter,
                        generate_scene, normalize_depth)
from .tokenizer import MsvqTokenizer, train_tokenizer
from .upsampler import CondUpsampler, train_upsampler

SPLITS = ("train", "val", "test")
STAGES = ("tokenizer", "prior", "upsampler")

# rng stream tags, one per consumer, so resumed runs replay identical draws
_RNG_TOK_DEPTH, _RNG_TOK_RGB, _RNG_PRIOR, _RNG_UPSAMPLER, _RNG_JITTER = 1, 2, 3, 4, 5


def split_dir(root, split: str) -> str:
    return os.path.join(str(root), split)


def _families_path(root) -> str:
    return os.path.join(str(root), "families.txt")


def run_datagen(cfg: RunConfig, log=None) -> dict[str, int]:
    """Render all three splits to disk; deterministic, rerun-identical."""
    d = cfg.data
    counts = {"train": d.train_samples, "val": d.val_samples, "test": d.test_samples}
    next_seed = d.base_seed * 10_000_000
    for split in SPLITS:
        root = split_dir(d.root, split)
        init_dataset_dir(root)
        lines = []
        for i in range(counts[split]):
            family = cfg.family_for_index(i)
            scene = SceneConfig(height=d.height, width=d.width,
                                family=family, far=d.far)
            sample = generate_scene(next_seed, scene)
            next_seed += 1
            save_sample(root, i, sample.rgb, sample.depth, sample.valid_mask)
            lines.append(f"{i:04d} {family}")
        Path(_families_path(root)).write_text("\n".join(lines) + "\n")
        if log is not None:
            log(f"{split}: {counts[split]} samples -> {root}")
    return counts


@dataclass
class LoadedSample:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    family: str


def load_split(root, split: str) -> list[LoadedSample]:
    sdir = split_dir(root, split)
    indices = list_indices(sdir)
    if not indices:
        raise DataError(f"no samples found in {sdir}")
    families = {}
    fpath = _families_path(sdir)
    if os.path.isfile(fpath):
        for line in Path(fpath).read_text().splitlines():
            idx, fam = line.split()
            families[int(idx)] = fam
    out = []
    for i in indices:
        rgb, depth, mask = load_sample(sdir, i)
        out.append(LoadedSample(rgb, depth, mask, families.get(i, "unknown")))
    return out


def _norm_depth_input(s: LoadedSample) -> np.ndarray:
    norm, _ = normalize_depth(s.depth, s.mask, NormalizationSpec())
    return norm[None].astype(np.float32)


def _rgb_input(rgb: np.ndarray) -> np.ndarray:
    return (2.0 * rgb - 1.0).astype(np.float32)


def _phase_subsets(samples: list) -> tuple[list[int], list[int]]:
    """Two-phase schedule: roadway first, then indoor (+ empty) fine-tuning."""
    phase1 = [i for i, s in enumerate(samples) if s.family == "roadway"]
    phase2 = [i for i, s in enumerate(samples) if s.family != "roadway"]
    # tiny single-family datasets degrade to two identical phases
    all_idx = list(range(len(samples)))
    return phase1 or all_idx, phase2 or all_idx


def checkpoint_path(cfg: RunConfig, kind: str) -> Path:
    return Path(cfg.paths.checkpoints) / f"{kind}.vard"


def log_path(cfg: RunConfig, kind: str) -> Path:
    return Path(cfg.paths.logs) / f"{kind}.log"


def _snapshot(cfg: RunConfig, epochs_done: int, steps_done: int) -> dict:
    snap = cfg.to_dict()
    snap["progress"] = {"epochs_done": epochs_done, "steps_done": steps_done}
    return snap


def strip_progress(config: dict) -> dict:
    return {k: v for k, v in config.items() if k != "progress"}


def _run_epochs(cfg: RunConfig, kind: str, model, opt: Adam, total_epochs: int,
                epoch_fn, *, resume: bool, log=None) -> Path:
    """Epoch loop with checkpoint-per-epoch persistence and resume.

    epoch_fn(epoch, model, opt) runs exactly one epoch and returns its step
    losses. Model, optimizer moments, and progress counters all live in the
    stage checkpoint, so a resumed run replays the identical remaining epochs.
    """
    ckpt = checkpoint_path(cfg, kind)
    lpath = log_path(cfg, kind)
    lpath.parent.mkdir(parents=True, exist_ok=True)
    start_epoch = steps_done = 0
    if resume and ckpt.is_file():
        ck = expect_kind(load_checkpoint(ckpt), kind)
        progress = ck.config.get("progress", {})
        model.load_state_dict(ck.params)
        opt.load_state_arrays(ck.params)
        start_epoch = int(progress.get("epochs_done", 0))
        steps_done = int(progress.get("steps_done", 0))
        if log is not None and start_epoch:
            log(f"{kind}: resuming after epoch {start_epoch}")
    else:
        lpath.write_text("")
    for epoch in range(start_epoch, total_epochs):
        step_losses = epoch_fn(epoch, model, opt)
        with lpath.open("a") as fh:
            for i, loss in enumerate(step_losses):
                fh.write(f"{steps_done + i} {loss:.6f}\n")
        steps_done += len(step_losses)
        params = model.state_dict()
        params.update(opt.state_arrays())
        save_checkpoint(ckpt, kind, _snapshot(cfg, epoch + 1, steps_done), params)
        if log is not None:
            mean = float(np.mean(step_losses)) if step_losses else float("nan")
            log(f"{kind}: epoch {epoch + 1}/{total_epochs} loss {mean:.6f}")
    return ckpt


def _require(cfg: RunConfig, kind: str) -> CheckpointData:
    path = checkpoint_path(cfg, kind)
    if not path.is_file():
        raise DependencyError(f"missing dependency checkpoint: {path} ({kind})")
    return expect_kind(load_checkpoint(path), kind)


def _load_frozen_tokenizers(cfg: RunConfig) -> tuple[MsvqTokenizer, MsvqTokenizer]:
    ck_d = _require(cfg, "tokenizer-depth")
    ck_r = _require(cfg, "tokenizer-rgb")
    check_compatible(ck_d, ck_r)
    tok_d = MsvqTokenizer(np.random.default_rng(0), cfg.depth_tokenizer_config())
    tok_r = MsvqTokenizer(np.random.default_rng(0), cfg.rgb_tokenizer_config())
    tok_d.load_state_dict(ck_d.params)
    tok_r.load_state_dict(ck_r.params)
    return tok_d, tok_r


def _train_one_tokenizer(cfg: RunConfig, kind: str, tag: int, images,
                         *, resume: bool, log=None) -> Path:
    t = cfg.training
    tok = MsvqTokenizer(np.random.default_rng((tag, t.seed)),
                        cfg.depth_tokenizer_config() if kind == "tokenizer-depth"
                        else cfg.rgb_tokenizer_config())
    opt = Adam(tok.parameters(), lr=t.tokenizer_lr, beta1=t.adam_beta1,
               beta2=t.adam_beta2, eps=t.adam_eps)

    def one_epoch(epoch, model, opt):
        stats = train_tokenizer(model, images, epochs=1, lr=t.tokenizer_lr,
                                batch_size=t.batch_size, optimizer=opt,
                                rng=np.random.default_rng((tag, t.seed, epoch)))
        return stats.step_losses

    return _run_epochs(cfg, kind, tok, opt, t.tokenizer_epochs, one_epoch,
                       resume=resume, log=log)


def train_stage(cfg: RunConfig, stage: str, *, resume: bool = False,
                log=None) -> list[Path]:
    """Run one named training stage; returns the checkpoint paths it wrote."""
    if stage not in STAGES:
        raise ConfigError(f"unknown training stage '{stage}' (want one of {STAGES})")
    samples = load_split(cfg.data.root, "train")
    t = cfg.training

    if stage == "tokenizer":
        depth_imgs = [_norm_depth_input(s) for s in samples]
        rgb_imgs = [_rgb_input(s.rgb) for s in samples]
        return [_train_one_tokenizer(cfg, "tokenizer-depth", _RNG_TOK_DEPTH,
                                     depth_imgs, resume=resume, log=log),
                _train_one_tokenizer(cfg, "tokenizer-rgb", _RNG_TOK_RGB,
                                     rgb_imgs, resume=resume, log=log)]

    tok_d, tok_r = _load_frozen_tokenizers(cfg)
    phase1, phase2 = _phase_subsets(samples)

    with ad.no_grad():
        cond_latents = [tok_r.encode_image(Tensor(_rgb_input(s.rgb))).data
                        for s in samples]
        depth_latents = [tok_d.encode_image(Tensor(_norm_depth_input(s))).data
                         for s in samples]

    if stage == "prior":
        with ad.no_grad():
            token_runs = [tok_d.encode_multiscale(f) for f in depth_latents]
        dataset = [(token_runs[i], cond_latents[i]) for i in range(len(samples))]
        prior = VarPrior(np.random.default_rng((_RNG_PRIOR, t.seed)),
                         cfg.prior_config())
        opt = Adam(prior.parameters(), lr=t.prior_lr, beta1=t.adam_beta1,
                   beta2=t.adam_beta2, eps=t.adam_eps)
        total = t.prior_phase1_epochs + t.prior_phase2_epochs

        def one_epoch(epoch, model, opt):
            idx = phase1 if epoch < t.prior_phase1_epochs else phase2
            stats = train_prior(model, [dataset[i] for i in idx], epochs=1,
                                lr=t.prior_lr, batch_size=t.batch_size,
                                grad_clip=t.grad_clip, optimizer=opt,
                                rng=np.random.default_rng((_RNG_PRIOR, t.seed, epoch)))
            return stats.step_losses

        return [_run_epochs(cfg, "prior", prior, opt, total, one_epoch,
                            resume=resume, log=log)]

    # upsampler: double the dataset with colour-jittered condition encodings
    with ad.no_grad():
        jit_latents = []
        for i, s in enumerate(samples):
            rng = np.random.default_rng((_RNG_JITTER, t.seed, i))
            jit_latents.append(
                tok_r.encode_image(Tensor(_rgb_input(color_jitter(s.rgb, rng)))).data)
    pairs, pair_of = [], []
    for i in range(len(samples)):
        pair_of.append(len(pairs))
        pairs.append((depth_latents[i], cond_latents[i]))
        pairs.append((depth_latents[i], jit_latents[i]))
    up = CondUpsampler(np.random.default_rng((_RNG_UPSAMPLER, t.seed)),
                       cfg.upsampler_config())
    opt = Adam(up.parameters(), lr=t.upsampler_lr, beta1=t.adam_beta1,
               beta2=t.adam_beta2, eps=t.adam_eps)
    total = t.upsampler_phase1_epochs + t.upsampler_phase2_epochs

    def one_epoch(epoch, model, opt):
        idx = phase1 if epoch < t.upsampler_phase1_epochs else phase2
        subset = [pairs[pair_of[i]] for i in idx] + [pairs[pair_of[i] + 1] for i in idx]
        stats = train_upsampler(model, tok_d, subset, epochs=1,
                                lr=t.upsampler_lr, batch_size=t.batch_size,
                                grad_clip=t.grad_clip, optimizer=opt,
                                rng=np.random.default_rng((_RNG_UPSAMPLER, t.seed, epoch)))
        return stats.step_losses

    return [_run_epochs(cfg, "upsampler", up, opt, total, one_epoch,
                        resume=resume, log=log)]


def train_all(cfg: RunConfig, *, resume: bool = False, log=None) -> list[Path]:
    paths = []
    for stage in STAGES:
        paths.extend(train_stage(cfg, stage, resume=resume, log=log))
    return paths


def load_models(cfg: RunConfig) -> SamplerModels:
    """Load all four checkpoints, verify kinds and cross-compatibility."""
    cks = {kind: _require(cfg, kind)
           for kind in ("tokenizer-depth", "tokenizer-rgb", "prior", "upsampler")}
    check_compatible(*cks.values())
    run = RunConfig.from_dict(strip_progress(cks["prior"].config))
    tok_d = MsvqTokenizer(np.random.default_rng(0), run.depth_tokenizer_config())
    tok_r = MsvqTokenizer(np.random.default_rng(0), run.rgb_tokenizer_config())
    prior = VarPrior(np.random.default_rng(0), run.prior_config())
    up = CondUpsampler(np.random.default_rng(0), run.upsampler_config())
    tok_d.load_state_dict(cks["tokenizer-depth"].params)
    tok_r.load_state_dict(cks["tokenizer-rgb"].params)
    prior.load_state_dict(cks["prior"].params)
    up.load_state_dict(cks["upsampler"].params)
    return SamplerModels(depth_tokenizer=tok_d, rgb_tokenizer=tok_r,
                         prior=prior, upsampler=up,
                         depth_range=(1.0, run.data.far))


def eval_dataset(samples: list[LoadedSample]) -> list[tuple]:
    """(rgb, depth, mask) triples in the shape evaluate() expects."""
    return [(s.rgb, s.depth, s.mask) for s in samples]
