"""Coarse-to-fine autoregressive monocular depth estimation on numpy.

Submodules are re-exported lazily so that importing the package (or running
the CLI) does not pull in numpy before thread-count environment variables are
applied.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "autodiff",
    "TokenizerConfig": "tokenizer",
    "MsvqTokenizer": "tokenizer",
    "Codebook": "tokenizer",
    "TokenMap": "tokenizer",
    "quantize": "tokenizer",
    "lookup": "tokenizer",
    "PriorConfig": "prior",
    "VarPrior": "prior",
    "UpsamplerConfig": "upsampler",
    "CondUpsampler": "upsampler",
    "GuidanceConfig": "guidance",
    "SamplerModels": "guidance",
    "make_schedule": "guidance",
    "sample_depth": "guidance",
    "sample_depth_ensemble": "guidance",
    "sample_prior_only": "guidance",
    "SceneConfig": "synthdata",
    "generate_scene": "synthdata",
    "build_splits": "synthdata",
    "normalize_depth": "synthdata",
    "denormalize_depth": "synthdata",
    "align_affine": "evaluation",
    "abs_rel": "evaluation",
    "delta1": "evaluation",
    "evaluate": "evaluation",
    "EvalReport": "evaluation",
    "save_pfm": "pfmio",
    "load_pfm": "pfmio",
    "save_checkpoint": "checkpoint",
    "load_checkpoint": "checkpoint",
    "check_compatible": "checkpoint",
    "RunConfig": "config",
    "load_config": "config",
    "default_config": "config",
}

_MODULES = ("autodiff", "nn", "tokenizer", "prior", "upsampler", "guidance",
            "synthdata", "evaluation", "pfmio", "checkpoint", "config",
            "pipeline", "cli", "errors")

__all__ = sorted(set(_EXPORTS) | set(_MODULES))


def __getattr__(name: str):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    if name in _MODULES:
        return import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
