"""Plain ``key = value`` experiment configuration files.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Tuples are comma separated (``distances = 64, 112``); booleans accept
``on/off``, ``true/false``, ``yes/no``; ``none`` clears an optional value.
Recognised keys are the fields of :class:`ModelConfig` and
:class:`ExperimentConfig` (``seed`` is shared). Example::

    # model
    d_model = 64
    n_layers = 2
    cptr_ranks = 32, 2, 16
    # training
    steps = 500
    lr = 1e-3
"""

from __future__ import annotations

from dataclasses import fields, replace

from cptr.errors import SpecError
from cptr.harness.experiment import ExperimentConfig
from cptr.model import ModelConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise SpecError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


_MODEL_KEYS = {
    "vocab_size": int, "d_model": int, "n_heads": int, "n_layers": int, "d_ff": int, "max_seq_len": int,
    "cptr_enabled": _bool, "cptr_ranks": _ints, "cptr_refresh_interval": int, "cptr_decomposition": str,
    "ffn_split_k": int, "init_std": float, "ln_eps": float,
}
_EXPERIMENT_KEYS = {
    "steps": int, "lr": float, "batch_size": int, "n_pairs": int, "distances": _ints,
    "n_eval_per_distance": int, "latency_batch_sizes": _ints, "latency_tokens": int,
    "latency_prompt_len": int, "latency_repeats": int, "seed": int,
}
assert set(_MODEL_KEYS) <= {f.name for f in fields(ModelConfig)}
assert set(_EXPERIMENT_KEYS) <= {f.name for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise SpecError(f"line {lineno}: expected 'key = value'")
        conv = _MODEL_KEYS.get(key) or _EXPERIMENT_KEYS.get(key)
        if conv is None:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = None if value.lower() == "none" else conv(value)
        except ValueError as exc:
            raise SpecError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return out


def build_config(settings: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = ExperimentConfig() if base is None else base
    model_kw = {k: v for k, v in settings.items() if k in _MODEL_KEYS}
    exp_kw = {k: v for k, v in settings.items() if k in _EXPERIMENT_KEYS}
    model = replace(base.model, **model_kw, seed=exp_kw.get("seed", base.seed))
    return replace(base, model=model, **exp_kw)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return build_config(parse_config_text(fh.read()))
