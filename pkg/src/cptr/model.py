"""Miniature decoder-only transformer in numpy with an exact backward pass.

Blocks are pre-norm::

    x = x + attn(ln1(x))
    x = x + ffn(ln2(x))        ffn(c) = gelu(c @ W1 + b1) @ W2 + b2

When CPTR is enabled, the first FFN weight ``W1`` is reshaped to
``(d_model, ffn_split_k, d_ff // ffn_split_k)`` and replaced by its
reconfigured version from :func:`cptr.reconfig.cptr_apply` before use, i.e.
the module sits after self-attention and feeds the feed-forward network.
The output projection is tied to the token embedding.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``"blocks.0.ffn.w1"``); gradients use the same keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from cptr.errors import DomainError, ShapeError, SpecError, TrainingDivergedError
from cptr.reconfig import (
    CptrConfig,
    ReconfigParams,
    cptr_apply,
    cptr_vjp,
    init_identity_params,
    refresh_decomposition,
)
from cptr.tensor import TuckerFactors

# Paper-scale training values, kept for reference only; desk defaults differ.
PAPER_LEARNING_RATE = 1e-4
PAPER_BATCH_SIZE = 64
PAPER_MAX_SEQ_LEN = 1024

_GELU_C = math.sqrt(2.0 / math.pi)
_CPTR_KEYS = ("core_gate", "residual_u", "residual_v", "residual_z")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 128
    cptr_enabled: bool = False
    cptr_ranks: tuple[int, int, int] | None = None
    cptr_refresh_interval: int = 10
    cptr_decomposition: str = "hosvd"
    ffn_split_k: int = 4
    seed: int = 0
    init_std: float = 0.02
    ln_eps: float = 1e-8

    def __post_init__(self):
        if self.cptr_ranks is not None:
            object.__setattr__(self, "cptr_ranks", tuple(int(r) for r in self.cptr_ranks))
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len", "ffn_split_k"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise SpecError("d_model must be divisible by n_heads")
        if self.d_ff % self.ffn_split_k:
            raise SpecError("ffn_split_k must divide d_ff")
        if self.cptr_enabled:
            self.cptr_config().validate_for(self.ffn_tensor_shape)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_tensor_shape(self) -> tuple[int, int, int]:
        return (self.d_model, self.ffn_split_k, self.d_ff // self.ffn_split_k)

    @property
    def ranks(self) -> tuple[int, int, int]:
        """Configured ranks, defaulting to half of each reshaped dimension."""
        if self.cptr_ranks is not None:
            return self.cptr_ranks
        return tuple(max(1, d // 2) for d in self.ffn_tensor_shape)

    def cptr_config(self) -> CptrConfig:
        return CptrConfig(self.ranks, self.cptr_refresh_interval, self.cptr_decomposition)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cptr_ranks"] = list(self.ranks) if self.cptr_ranks is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("cptr_ranks") is not None:
            d["cptr_ranks"] = tuple(d["cptr_ranks"])
        return cls(**d)


@dataclass
class Batch:
    token_ids: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.token_ids.ndim != 2 or self.token_ids.shape != self.targets.shape:
            raise ShapeError("token_ids and targets must be matching B x T grids")

    @classmethod
    def from_sequences(cls, seqs) -> "Batch":
        """Split full sequences into inputs and next-token targets."""
        seqs = np.asarray(seqs, dtype=np.int64)
        return cls(seqs[:, :-1], seqs[:, 1:])


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        names += [p + n for n in ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                                  "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]
        if config.cptr_enabled:
            names += [p + "cptr." + k for k in _CPTR_KEYS]
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    r1, r2, r3 = config.ranks
    per_block = {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
        "ln2.g": (d,), "ln2.b": (d,),
        "ffn.w1": (d, f), "ffn.b1": (f,), "ffn.w2": (f, d), "ffn.b2": (d,),
        "cptr.core_gate": (r1, r2, r3), "cptr.residual_u": (r1, r1),
        "cptr.residual_v": (r2, r2), "cptr.residual_z": (r3, r3),
    }
    shapes = {}
    for name in param_names(config):
        if name.startswith("blocks."):
            shapes[name] = per_block[name.split(".", 2)[2]]
        elif name in ("tok_emb", "pos_emb"):
            shapes[name] = (config.vocab_size if name == "tok_emb" else config.max_seq_len, d)
        else:
            shapes[name] = (d,)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Random initial weights from ``config.seed``; reconfiguration parameters start at zero.

    Weights shared by the baseline and CPTR variants are drawn in the same
    order, so both variants start from identical values for the same seed.
    """
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    params = {
        "tok_emb": rng.normal(0.0, config.init_std, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, config.init_std, (config.max_seq_len, d)),
    }
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for n in ("wq", "wk", "wv"):
            params[p + "attn." + n] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        params[p + "attn.wo"] = rng.normal(0.0, out_scale / math.sqrt(d), (d, d))
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "ffn.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        params[p + "ffn.b1"] = np.zeros(f)
        params[p + "ffn.w2"] = rng.normal(0.0, out_scale / math.sqrt(f), (f, d))
        params[p + "ffn.b2"] = np.zeros(d)
        if config.cptr_enabled:
            for k, v in init_identity_params(config.ranks).arrays().items():
                params[p + "cptr." + k] = v
    return {k: params[k] for k in param_names(config)}


def reconfig_params(params: dict, layer: int) -> ReconfigParams:
    p = f"blocks.{layer}.cptr."
    return ReconfigParams(*(params[p + k] for k in _CPTR_KEYS))


def refresh_all(params: dict, config: ModelConfig) -> dict[int, TuckerFactors]:
    """Fresh decomposition of every block's reshaped ``W1``."""
    if not config.cptr_enabled:
        return {}
    cfg = config.cptr_config()
    return {
        i: refresh_decomposition(params[f"blocks.{i}.ffn.w1"].reshape(config.ffn_tensor_shape), cfg)
        for i in range(config.n_layers)
    }


# --------------------------------------------------------------------------
# layers


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layernorm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    th = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + th), th


def _gelu_grad(x, th):
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _wgrad(a, b):
    # sum over batch and time of outer products: a^T b with leading axes flattened
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention(a, wq, wk, wv, wo, n_heads):
    t = a.shape[1]
    q, k, v = (_split_heads(a @ w, n_heads) for w in (wq, wk, wv))
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(np.tril(np.ones((t, t), dtype=bool)), s, -np.inf)
    p = _softmax(s)
    o = _merge_heads(p @ v)
    return o @ wo, (a, q, k, v, p, o, scale)


def _attention_backward(dout, cache, wq, wk, wv, wo, n_heads):
    a, q, k, v, p, o, scale = cache
    dwo = _wgrad(o, dout)
    do = _split_heads(dout @ wo.T, n_heads)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dwq = _wgrad(a, dq)
    dwk = _wgrad(a, dk)
    dwv = _wgrad(a, dv)
    da = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return da, dwq, dwk, dwv, dwo


# --------------------------------------------------------------------------
# model


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"token ids must be a B x T grid, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise DomainError("token id out of range")
    return tokens


def effective_w1(params, config, layer, decomp=None):
    """``(W1 actually used, factors or None)`` for one block."""
    w1 = params[f"blocks.{layer}.ffn.w1"]
    if not config.cptr_enabled:
        return w1, None
    cache = None if decomp is None else decomp.get(layer)
    w_prime, factors = cptr_apply(w1.reshape(config.ffn_tensor_shape), config.cptr_config(),
                                  reconfig_params(params, layer), cache)
    return w_prime.reshape(w1.shape), factors


def forward(params, config: ModelConfig, batch, decomp: dict | None = None):
    """Logits of shape ``B x T x vocab`` plus the activation cache for :func:`backward`.

    ``batch`` may be a :class:`Batch` or a bare grid of token ids. ``decomp``
    maps block index to cached Tucker factors; missing blocks are decomposed
    afresh.
    """
    tokens = _check_tokens(config, batch.token_ids if isinstance(batch, Batch) else batch)
    t = tokens.shape[1]
    x = params["tok_emb"][tokens] + params["pos_emb"][:t]
    blocks = []
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        a, ln1 = _layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"], config.ln_eps)
        att, att_cache = _attention(a, params[p + "attn.wq"], params[p + "attn.wk"],
                                    params[p + "attn.wv"], params[p + "attn.wo"], config.n_heads)
        x = x + att
        c, ln2 = _layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"], config.ln_eps)
        w1, factors = effective_w1(params, config, i, decomp)
        h = c @ w1 + params[p + "ffn.b1"]
        u, th = _gelu(h)
        x = x + u @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        blocks.append(dict(ln1=ln1, att=att_cache, ln2=ln2, c=c, w1=w1, factors=factors, h=h, u=u, th=th))
    logits = x @ params["tok_emb"].T
    return logits, dict(tokens=tokens, blocks=blocks, y=x)


def backward(params, config: ModelConfig, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tokens = cache["tokens"]
    grads["tok_emb"] += _wgrad(dlogits, cache["y"])
    dx = dlogits @ params["tok_emb"]

    for i in reversed(range(config.n_layers)):
        p = f"blocks.{i}."
        blk = cache["blocks"][i]
        # feed-forward
        grads[p + "ffn.b2"] = dx.sum(axis=(0, 1))
        grads[p + "ffn.w2"] = _wgrad(blk["u"], dx)
        dh = (dx @ params[p + "ffn.w2"].T) * _gelu_grad(blk["h"], blk["th"])
        grads[p + "ffn.b1"] = dh.sum(axis=(0, 1))
        dw1 = _wgrad(blk["c"], dh)
        if config.cptr_enabled:
            pg, dw = cptr_vjp(reconfig_params(params, i), blk["factors"],
                              dw1.reshape(config.ffn_tensor_shape))
            for k, g in pg.arrays().items():
                grads[p + "cptr." + k] = g
            dw1 = dw.reshape(dw1.shape)
        grads[p + "ffn.w1"] = dw1
        dc = dh @ blk["w1"].T
        dln2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_backward(dc, blk["ln2"])
        dx = dx + dln2
        # attention
        da, grads[p + "attn.wq"], grads[p + "attn.wk"], grads[p + "attn.wv"], grads[p + "attn.wo"] = (
            _attention_backward(dx, blk["att"], params[p + "attn.wq"], params[p + "attn.wk"],
                                params[p + "attn.wv"], params[p + "attn.wo"], config.n_heads)
        )
        dln1, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_backward(da, blk["ln1"])
        dx = dx + dln1

    np.add.at(grads["tok_emb"], tokens, dx)
    grads["pos_emb"][: tokens.shape[1]] += dx.sum(axis=0)
    return grads


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Negative log-likelihood of each target under ``softmax(logits)``."""
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return lse - picked


def loss_and_grads(params, config: ModelConfig, batch: Batch, decomp: dict | None = None):
    """Mean token cross-entropy and its exact gradient for every parameter.

    With CPTR enabled the cached factor matrices in ``decomp`` are constants;
    pass the same ``decomp`` when comparing against finite differences.
    """
    if decomp is None:
        decomp = refresh_all(params, config)
    targets = np.asarray(batch.targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= config.vocab_size):
        raise DomainError("target id out of range")
    logits, cache = forward(params, config, batch, decomp)
    loss = float(token_nll(logits, targets).mean())
    probs = _softmax(logits)
    np.subtract.at(probs, (*np.indices(targets.shape), targets), 1.0)
    grads = backward(params, config, cache, probs / targets.size)
    return loss, grads


def global_grad_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


@dataclass
class TrainState:
    """Mutable bookkeeping owned by one training loop."""

    step: int = 0
    decomp: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)


def train_step(params, config: ModelConfig, batch: Batch, lr: float, state: TrainState | None = None):
    """One plain SGD step; returns ``(new_params, loss_before_update)``.

    The CPTR decomposition in ``state`` is rebuilt every
    ``cptr_refresh_interval`` steps. Without a ``state`` it is rebuilt on
    every call.
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    state = TrainState() if state is None else state
    if config.cptr_enabled and (state.step % config.cptr_refresh_interval == 0 or not state.decomp):
        state.decomp = refresh_all(params, config)
    loss, grads = loss_and_grads(params, config, batch, state.decomp)
    if not math.isfinite(loss):
        raise TrainingDivergedError(state.step, loss)
    new_params = {k: v - lr * grads[k] for k, v in params.items()}
    state.losses.append(loss)
    state.grad_norms.append(global_grad_norm(grads))
    state.step += 1
    return new_params, loss


def perplexity_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    return math.exp(float(token_nll(logits, np.asarray(targets, dtype=np.int64)).mean()))


def perplexity(params, config: ModelConfig, dataset) -> float:
    """``exp`` of the mean per-token negative log-likelihood over all batches."""
    decomp = refresh_all(params, config)
    sums, count = [], 0
    for batch in dataset:
        logits, _ = forward(params, config, batch, decomp)
        nll = token_nll(logits, batch.targets)
        sums.extend(nll.ravel().tolist())
        count += nll.size
    if count == 0:
        raise DomainError("perplexity of an empty dataset")
    return math.exp(math.fsum(sums) / count)


def generate_batch(params, config: ModelConfig, prompts, n_tokens: int, decomp: dict | None = None) -> np.ndarray:
    """Greedy decoding for a ``B x L`` grid of prompts (no KV cache)."""
    seqs = _check_tokens(config, prompts)
    if seqs.shape[1] + n_tokens > config.max_seq_len:
        raise ShapeError("prompt length + n_tokens exceeds max_seq_len")
    if decomp is None:
        decomp = refresh_all(params, config)
    for _ in range(n_tokens):
        logits, _ = forward(params, config, seqs, decomp)
        nxt = np.argmax(logits[:, -1, :], axis=-1)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return seqs


def generate(params, config: ModelConfig, prompt, n_tokens: int) -> list[int]:
    """Greedy continuation of ``prompt``; ties go to the lowest token id."""
    return [int(t) for t in generate_batch(params, config, np.asarray([list(prompt)]), n_tokens)[0]]


def grad_stability_stats(grad_norm_series) -> tuple[float, float, float]:
    """Population ``(mean, variance, max / mean)`` of per-step gradient norms."""
    s = np.asarray(grad_norm_series, dtype=np.float64)
    if s.size == 0:
        raise DomainError("empty gradient-norm series")
    mean = float(s.mean())
    if mean == 0.0:
        raise DomainError("gradient-norm series is identically zero")
    return mean, float(np.mean((s - mean) ** 2)), float(s.max() / mean)
