"""Small encoder-decoder text-to-text transformer with hand-written
reverse-mode gradients.

Architecture: learned token + absolute position embeddings, pre-norm residual
blocks (self-attention, then feed-forward with tanh-approximated GELU), a
final layer norm on each stack, and a linear output head (optionally tied to
the token embedding). Everything runs on one example at a time in numpy;
batches are plain Python loops with gradient accumulation in example order,
which keeps runs bit-reproducible.

forward_loss computes cross-entropy of (scale * logits) against the target
with PAD positions excluded; backward returns exact gradients for every
parameter and for the scalar scale, which is how the expert selector receives
gradient through the logit-scaling coupling.

Checkpoint format (little-endian): magic "KICW", u32 version=1, u64 JSON
header length, JSON header (config, dtype, tensor names in order, metadata),
then per tensor u32 ndim, u64 dims, raw data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tokenizer import BOS_ID, EOS_ID, PAD_ID

LN_EPS = 1e-6
NEG_INF = -1e30
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

CHECKPOINT_MAGIC = b"KICW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class T2TConfig:
    vocab_size: int = 261
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_positions: int = 512
    seed: int = 0
    dtype: str = "f32"
    tie_output: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "T2TConfig":
        return cls(**data)


def config_digest(config: T2TConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def param_names(config: T2TConfig) -> list[str]:
    """Declaration order; checkpoints serialize tensors in this order."""
    names = ["tok_emb", "pos_enc", "pos_dec"]
    for i in range(config.n_enc_layers):
        p = f"enc{i}_"
        names += [p + "ln1_g", p + "ln1_b",
                  p + "att_wq", p + "att_wk", p + "att_wv", p + "att_wo",
                  p + "ln2_g", p + "ln2_b",
                  p + "ff_w1", p + "ff_b1", p + "ff_w2", p + "ff_b2"]
    names += ["enc_lnf_g", "enc_lnf_b"]
    for i in range(config.n_dec_layers):
        p = f"dec{i}_"
        names += [p + "ln1_g", p + "ln1_b",
                  p + "self_wq", p + "self_wk", p + "self_wv", p + "self_wo",
                  p + "ln2_g", p + "ln2_b",
                  p + "cross_wq", p + "cross_wk", p + "cross_wv", p + "cross_wo",
                  p + "ln3_g", p + "ln3_b",
                  p + "ff_w1", p + "ff_b1", p + "ff_w2", p + "ff_b2"]
    names += ["dec_lnf_g", "dec_lnf_b"]
    if not config.tie_output:
        names.append("out_w")
    return names


def init_params(config: T2TConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    d, v, ff, pos = config.d_model, config.vocab_size, config.d_ff, config.max_positions
    shapes: dict[str, tuple] = {
        "tok_emb": (v, d), "pos_enc": (pos, d), "pos_dec": (pos, d),
        "enc_lnf_g": (d,), "enc_lnf_b": (d,),
        "dec_lnf_g": (d,), "dec_lnf_b": (d,),
    }
    for i in range(config.n_enc_layers):
        p = f"enc{i}_"
        shapes.update({p + "ln1_g": (d,), p + "ln1_b": (d,),
                       p + "att_wq": (d, d), p + "att_wk": (d, d),
                       p + "att_wv": (d, d), p + "att_wo": (d, d),
                       p + "ln2_g": (d,), p + "ln2_b": (d,),
                       p + "ff_w1": (d, ff), p + "ff_b1": (ff,),
                       p + "ff_w2": (ff, d), p + "ff_b2": (d,)})
    for i in range(config.n_dec_layers):
        p = f"dec{i}_"
        shapes.update({p + "ln1_g": (d,), p + "ln1_b": (d,),
                       p + "self_wq": (d, d), p + "self_wk": (d, d),
                       p + "self_wv": (d, d), p + "self_wo": (d, d),
                       p + "ln2_g": (d,), p + "ln2_b": (d,),
                       p + "cross_wq": (d, d), p + "cross_wk": (d, d),
                       p + "cross_wv": (d, d), p + "cross_wo": (d, d),
                       p + "ln3_g": (d,), p + "ln3_b": (d,),
                       p + "ff_w1": (d, ff), p + "ff_b1": (ff,),
                       p + "ff_w2": (ff, d), p + "ff_b2": (d,)})
    if not config.tie_output:
        shapes["out_w"] = (d, v)
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = shapes[name]
        if name.endswith(("_g",)):
            params[name] = np.ones(shape, dtype=dt)
        elif name.endswith(("_b", "_b1", "_b2")):
            params[name] = np.zeros(shape, dtype=dt)
        else:
            params[name] = (rng.standard_normal(shape) * 0.02).astype(dt)
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(tensor) for name, tensor in params.items()}


# -- primitives ----------------------------------------------------------------

def _layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.dtype))
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_bwd(dout, cache):
    xhat, inv, g = cache
    dg = (dout * xhat).sum(axis=0)
    db = dout.sum(axis=0)
    dxhat = dout * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dout, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _attention_fwd(q_in, kv_in, wq, wk, wv, wo, n_heads, key_mask=None, causal=False):
    lq, d = q_in.shape
    lk = kv_in.shape[0]
    dh = d // n_heads
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=q_in.dtype))
    qh = (q_in @ wq).reshape(lq, n_heads, dh).transpose(1, 0, 2)
    kh = (kv_in @ wk).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    vh = (kv_in @ wv).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    if key_mask is not None and key_mask.any():
        scores = scores + np.where(key_mask, q_in.dtype.type(NEG_INF), q_in.dtype.type(0.0))[None, None, :]
    if causal:
        tri = np.triu(np.full((lq, lk), NEG_INF, dtype=q_in.dtype), k=1)
        scores = scores + tri[None, :, :]
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    ctx = (weights @ vh).transpose(1, 0, 2).reshape(lq, d)
    out = ctx @ wo
    cache = (q_in, kv_in, qh, kh, vh, weights, ctx, wq, wk, wv, wo, n_heads, scale)
    return out, cache


def _attention_bwd(dout, cache):
    q_in, kv_in, qh, kh, vh, weights, ctx, wq, wk, wv, wo, n_heads, scale = cache
    lq, d = q_in.shape
    lk = kv_in.shape[0]
    dh = d // n_heads
    dwo = ctx.T @ dout
    dctx = (dout @ wo.T).reshape(lq, n_heads, dh).transpose(1, 0, 2)
    dweights = dctx @ vh.transpose(0, 2, 1)
    dvh = weights.transpose(0, 2, 1) @ dctx
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dscores = dscores * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq = dqh.transpose(1, 0, 2).reshape(lq, d)
    dk = dkh.transpose(1, 0, 2).reshape(lk, d)
    dv = dvh.transpose(1, 0, 2).reshape(lk, d)
    dwq = q_in.T @ dq
    dwk = kv_in.T @ dk
    dwv = kv_in.T @ dv
    dq_in = dq @ wq.T
    dkv_in = dk @ wk.T + dv @ wv.T
    return dq_in, dkv_in, dwq, dwk, dwv, dwo


def _ff_fwd(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    act, gelu_cache = _gelu_fwd(pre)
    out = act @ w2 + b2
    return out, (x, act, gelu_cache, w1, w2)


def _ff_bwd(dout, cache):
    x, act, gelu_cache, w1, w2 = cache
    dw2 = act.T @ dout
    db2 = dout.sum(axis=0)
    dact = dout @ w2.T
    dpre = _gelu_bwd(dact, gelu_cache)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    dx = dpre @ w1.T
    return dx, dw1, db1, dw2, db2


# -- encoder -------------------------------------------------------------------

def _check_ids(ids, config: T2TConfig, what: str):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"{what} must be a 1-D id sequence")
    if ids.size == 0:
        raise ValueError(f"{what} is empty")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"{what} contains ids outside 0..{config.vocab_size - 1}")
    if ids.size > config.max_positions:
        raise ValueError(f"{what} length {ids.size} exceeds max_positions {config.max_positions}")
    return ids


def encode_with_cache(x_ids, params, config: T2TConfig):
    """Full encoder pass keeping activations; returns an EncCache dict."""
    ids = _check_ids(x_ids, config, "input")
    length = ids.size
    pad_mask = ids == PAD_ID
    h = params["tok_emb"][ids] + params["pos_enc"][:length]
    layers = []
    for i in range(config.n_enc_layers):
        p = f"enc{i}_"
        normed, ln1 = _layer_norm_fwd(h, params[p + "ln1_g"], params[p + "ln1_b"])
        attn, att = _attention_fwd(normed, normed,
                                   params[p + "att_wq"], params[p + "att_wk"],
                                   params[p + "att_wv"], params[p + "att_wo"],
                                   config.n_heads, key_mask=pad_mask)
        h = h + attn
        normed2, ln2 = _layer_norm_fwd(h, params[p + "ln2_g"], params[p + "ln2_b"])
        ff, ffc = _ff_fwd(normed2, params[p + "ff_w1"], params[p + "ff_b1"],
                          params[p + "ff_w2"], params[p + "ff_b2"])
        h = h + ff
        layers.append((ln1, att, ln2, ffc))
    out, lnf = _layer_norm_fwd(h, params["enc_lnf_g"], params["enc_lnf_b"])
    return {"ids": ids, "pad_mask": pad_mask, "layers": layers, "lnf": lnf,
            "H": out, "config": config, "params": params}


def encode(x_ids, params, config: T2TConfig):
    """H_enc (L x d_model) and the PAD mask (True at PAD positions)."""
    cache = encode_with_cache(x_ids, params, config)
    return cache["H"], cache["pad_mask"]


def encode_backward(d_h, cache, grads):
    """Accumulate encoder gradients into `grads` given dLoss/dH_enc."""
    params = cache["params"]
    config = cache["config"]
    ids = cache["ids"]
    dh, dg, db = _layer_norm_bwd(d_h, cache["lnf"])
    grads["enc_lnf_g"] += dg
    grads["enc_lnf_b"] += db
    for i in reversed(range(config.n_enc_layers)):
        p = f"enc{i}_"
        ln1, att, ln2, ffc = cache["layers"][i]
        dff, dw1, db1, dw2, db2 = _ff_bwd(dh, ffc)
        grads[p + "ff_w1"] += dw1
        grads[p + "ff_b1"] += db1
        grads[p + "ff_w2"] += dw2
        grads[p + "ff_b2"] += db2
        dn2, dg2, db2n = _layer_norm_bwd(dff, ln2)
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2n
        dh = dh + dn2
        dq_in, dkv_in, dwq, dwk, dwv, dwo = _attention_bwd(dh, att)
        grads[p + "att_wq"] += dwq
        grads[p + "att_wk"] += dwk
        grads[p + "att_wv"] += dwv
        grads[p + "att_wo"] += dwo
        dn1, dg1, db1n = _layer_norm_bwd(dq_in + dkv_in, ln1)
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1n
        dh = dh + dn1
    np.add.at(grads["tok_emb"], ids, dh)
    grads["pos_enc"][: ids.size] += dh


# -- decoder -------------------------------------------------------------------

def _decode_fwd(h_enc, enc_pad_mask, prefix_ids, params, config: T2TConfig):
    ids = _check_ids(prefix_ids, config, "target prefix")
    if ids[0] != BOS_ID:
        raise ValueError("target prefix must begin with BOS")
    length = ids.size
    pad_mask = ids == PAD_ID
    h = params["tok_emb"][ids] + params["pos_dec"][:length]
    layers = []
    for i in range(config.n_dec_layers):
        p = f"dec{i}_"
        normed, ln1 = _layer_norm_fwd(h, params[p + "ln1_g"], params[p + "ln1_b"])
        attn, selfc = _attention_fwd(normed, normed,
                                     params[p + "self_wq"], params[p + "self_wk"],
                                     params[p + "self_wv"], params[p + "self_wo"],
                                     config.n_heads, key_mask=pad_mask, causal=True)
        h = h + attn
        normed2, ln2 = _layer_norm_fwd(h, params[p + "ln2_g"], params[p + "ln2_b"])
        cross, crossc = _attention_fwd(normed2, h_enc,
                                       params[p + "cross_wq"], params[p + "cross_wk"],
                                       params[p + "cross_wv"], params[p + "cross_wo"],
                                       config.n_heads, key_mask=enc_pad_mask)
        h = h + cross
        normed3, ln3 = _layer_norm_fwd(h, params[p + "ln3_g"], params[p + "ln3_b"])
        ff, ffc = _ff_fwd(normed3, params[p + "ff_w1"], params[p + "ff_b1"],
                          params[p + "ff_w2"], params[p + "ff_b2"])
        h = h + ff
        layers.append((ln1, selfc, ln2, crossc, ln3, ffc))
    out, lnf = _layer_norm_fwd(h, params["dec_lnf_g"], params["dec_lnf_b"])
    out_w = params["tok_emb"].T if config.tie_output else params["out_w"]
    logits = out @ out_w
    return logits, {"ids": ids, "layers": layers, "lnf": lnf, "h_final": out,
                    "config": config, "params": params}


def _decode_bwd(dlogits, cache, grads):
    """Returns dH_enc; accumulates decoder parameter gradients."""
    params = cache["params"]
    config = cache["config"]
    ids = cache["ids"]
    out_w = params["tok_emb"].T if config.tie_output else params["out_w"]
    dh_final = dlogits @ out_w.T
    if config.tie_output:
        grads["tok_emb"] += (cache["h_final"].T @ dlogits).T
    else:
        grads["out_w"] += cache["h_final"].T @ dlogits
    dh, dg, db = _layer_norm_bwd(dh_final, cache["lnf"])
    grads["dec_lnf_g"] += dg
    grads["dec_lnf_b"] += db
    d_h_enc = None
    for i in reversed(range(config.n_dec_layers)):
        p = f"dec{i}_"
        ln1, selfc, ln2, crossc, ln3, ffc = cache["layers"][i]
        dff, dw1, db1, dw2, db2 = _ff_bwd(dh, ffc)
        grads[p + "ff_w1"] += dw1
        grads[p + "ff_b1"] += db1
        grads[p + "ff_w2"] += dw2
        grads[p + "ff_b2"] += db2
        dn3, dg3, db3 = _layer_norm_bwd(dff, ln3)
        grads[p + "ln3_g"] += dg3
        grads[p + "ln3_b"] += db3
        dh = dh + dn3
        dq_in, dkv_in, dwq, dwk, dwv, dwo = _attention_bwd(dh, crossc)
        grads[p + "cross_wq"] += dwq
        grads[p + "cross_wk"] += dwk
        grads[p + "cross_wv"] += dwv
        grads[p + "cross_wo"] += dwo
        d_h_enc = dkv_in if d_h_enc is None else d_h_enc + dkv_in
        dn2, dg2, db2n = _layer_norm_bwd(dq_in, ln2)
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2n
        dh = dh + dn2
        dq_in, dkv_in, dwq, dwk, dwv, dwo = _attention_bwd(dh, selfc)
        grads[p + "self_wq"] += dwq
        grads[p + "self_wk"] += dwk
        grads[p + "self_wv"] += dwv
        grads[p + "self_wo"] += dwo
        dn1, dg1, db1n = _layer_norm_bwd(dq_in + dkv_in, ln1)
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1n
        dh = dh + dn1
    np.add.at(grads["tok_emb"], ids, dh)
    grads["pos_dec"][: ids.size] += dh
    return d_h_enc


def decode_logits(h_enc, enc_pad_mask, target_prefix_ids, params, config: T2TConfig):
    logits, _cache = _decode_fwd(h_enc, enc_pad_mask, target_prefix_ids, params, config)
    return logits


# -- loss / backward -----------------------------------------------------------

def _log_softmax(z):
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward_loss(x_ids, y_ids, scale, params, config: T2TConfig):
    """Summed token cross-entropy of (scale * logits) vs y; PAD excluded."""
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    y = np.asarray(y_ids, dtype=np.int64)
    if y.size == 0:
        raise ValueError("target is empty")
    if y.min() < 0 or y.max() >= config.vocab_size:
        raise ValueError(f"target contains ids outside 0..{config.vocab_size - 1}")
    enc_cache = encode_with_cache(x_ids, params, config)
    prefix = np.concatenate(([BOS_ID], y[:-1]))
    logits, dec_cache = _decode_fwd(enc_cache["H"], enc_cache["pad_mask"],
                                    prefix, params, config)
    z = np.asarray(scale, dtype=logits.dtype) * logits
    log_probs = _log_softmax(z)
    non_pad = y != PAD_ID
    rows = np.arange(y.size)
    ce = float(-(log_probs[rows, y] * non_pad).sum())
    if not np.isfinite(ce):
        raise FloatingPointError(
            f"non-finite loss (ce={ce}); logit range "
            f"[{float(np.min(logits))}, {float(np.max(logits))}], scale={scale}"
        )
    cache = {"enc": enc_cache, "dec": dec_cache, "logits": logits, "z": z,
             "y": y, "non_pad": non_pad, "scale": float(scale),
             "config": config, "consumed": False}
    return ce, cache


def backward(cache, upstream: float = 1.0):
    """Gradients of upstream * ce for every parameter, plus d/d scale."""
    if cache.get("consumed"):
        raise RuntimeError("backward called twice on the same cache")
    cache["consumed"] = True
    config = cache["config"]
    params = cache["enc"]["params"]
    grads = zeros_like_params(params)
    z, y, non_pad = cache["z"], cache["y"], cache["non_pad"]
    probs = np.exp(_log_softmax(z))
    dz = probs.copy()
    dz[np.arange(y.size), y] -= 1.0
    dz *= np.asarray(upstream, dtype=dz.dtype)
    dz[~non_pad] = 0.0
    dscale = float((dz * cache["logits"]).sum())
    dlogits = np.asarray(cache["scale"], dtype=dz.dtype) * dz
    d_h_enc = _decode_bwd(dlogits, cache["dec"], grads)
    encode_backward(d_h_enc, cache["enc"], grads)
    return grads, dscale


# -- decoding / scoring ----------------------------------------------------------

def greedy_decode(h_enc, enc_pad_mask, params, config: T2TConfig,
                  max_out: int = 64, scale: float = 1.0):
    """Argmax decoding from BOS until EOS or max_out emitted tokens.

    Ties break to the lowest token id; positive scaling of the logits cannot
    change the output.
    """
    if max_out < 1:
        raise ValueError("max_out must be >= 1")
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    prefix = [BOS_ID]
    out: list[int] = []
    for _ in range(max_out):
        logits, _ = _decode_fwd(h_enc, enc_pad_mask, np.asarray(prefix), params, config)
        step_logits = logits[-1] * np.asarray(scale, dtype=logits.dtype)
        token = int(np.argmax(step_logits))  # first max = lowest id on ties
        if token == EOS_ID:
            break
        out.append(token)
        prefix.append(token)
        if len(prefix) > config.max_positions:
            break
    return out


def sequence_log_prob(x_ids, candidate_y_ids, scale, params, config: T2TConfig) -> float:
    h_enc, pad_mask = encode(x_ids, params, config)
    return sequence_log_prob_from_enc(h_enc, pad_mask, candidate_y_ids, scale, params, config)


def sequence_log_prob_from_enc(h_enc, enc_pad_mask, candidate_y_ids, scale,
                               params, config: T2TConfig) -> float:
    """Teacher-forced sum of log softmax(scale * logits)[y_t] over the candidate."""
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    y = np.asarray(candidate_y_ids, dtype=np.int64)
    if y.size == 0:
        raise ValueError("candidate is empty")
    if y.min() < 0 or y.max() >= config.vocab_size:
        raise ValueError(f"candidate contains ids outside 0..{config.vocab_size - 1}")
    prefix = np.concatenate(([BOS_ID], y[:-1]))
    logits, _ = _decode_fwd(h_enc, enc_pad_mask, prefix, params, config)
    log_probs = _log_softmax(np.asarray(scale, dtype=logits.dtype) * logits)
    return float(log_probs[np.arange(y.size), y].sum())


# -- checkpoint io ---------------------------------------------------------------

def save_tensors(path: str | Path, config: T2TConfig, tensors: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """KICW container: config + named tensors in the given dict order."""
    path = Path(path)
    names = list(tensors.keys())
    header = {
        "config": config.to_dict(),
        "config_digest": config_digest(config),
        "tensor_names": names,
        "dtype": config.dtype,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    np_dt = "<f8" if config.dtype == "f64" else "<f4"
    with path.open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", CHECKPOINT_VERSION))
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
        for name in names:
            tensor = tensors[name]
            handle.write(struct.pack("<I", tensor.ndim))
            for dim in tensor.shape:
                handle.write(struct.pack("<Q", dim))
            handle.write(np.ascontiguousarray(tensor, dtype=np_dt).tobytes())


def load_tensors(path: str | Path, expect_config: T2TConfig | None = None):
    """Returns (config, tensors, meta); errors on magic/version/digest mismatch."""
    path = Path(path)
    with path.open("rb") as handle:
        magic = handle.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", handle.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", handle.read(8))
        header = json.loads(handle.read(blob_len).decode("utf-8"))
        config = T2TConfig.from_dict(header["config"])
        if header.get("config_digest") != config_digest(config):
            raise ValueError(f"{path}: config digest mismatch inside checkpoint")
        if expect_config is not None and config_digest(expect_config) != config_digest(config):
            raise ValueError(
                f"{path}: checkpoint config digest does not match the requested config"
            )
        np_dt = "<f8" if header["dtype"] == "f64" else "<f4"
        item = 8 if header["dtype"] == "f64" else 4
        tensors: dict[str, np.ndarray] = {}
        for name in header["tensor_names"]:
            (ndim,) = struct.unpack("<I", handle.read(4))
            shape = tuple(struct.unpack("<Q", handle.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = handle.read(item * count)
            if len(data) != item * count:
                raise ValueError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype=np_dt).reshape(shape).copy()
    return config, tensors, header.get("meta", {})
