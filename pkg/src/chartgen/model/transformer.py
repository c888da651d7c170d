"""Decoder-only transformer over chart tokens, optionally cross-attending to audio codes.

Block layout (pre-norm)::

    x = x + Dropout(SelfAttn(RMSNorm(x)))            causal
    x = x + Dropout(CrossAttn(RMSNorm(x), c))        conditioned models only
    x = x + Dropout(SwiGLU(RMSNorm(x)))

The conditioning tensor ``c`` is built from the code matrix by summing one
learned embedding per codebook at every frame, then downsampling with a
strided 1-D convolution so that it runs at roughly the token rate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..audio import AudioCodes
from ..errors import MissingCodes, SequenceTooLong, ShapeMismatch
from ..tokenizer import VOCAB_SIZE
from .layers import (
    attention_backward,
    attention_forward,
    causal_mask,
    conv1d_backward,
    conv1d_forward,
    conv_output_length,
    dropout_backward,
    dropout_forward,
    key_padding_mask,
    merge_heads,
    rms_norm_backward,
    rms_norm_forward,
    softmax,
    split_heads,
    swiglu_backward,
    swiglu_forward,
)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 1026
    dropout_p: float = 0.2
    conditioned: bool = False
    adapter_kernel: int = 3
    adapter_stride: int = 2
    n_q: int = 4
    codebook_size: int = 1024
    max_audio_len: int = 1026
    pos_init: str = "sinusoidal"
    cond_init: str = "scaled"
    norm_eps: float = 1e-6
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.pos_init not in ("normal", "sinusoidal"):
            raise ValueError("pos_init must be 'normal' or 'sinusoidal'")
        if self.cond_init not in ("normal", "scaled"):
            raise ValueError("cond_init must be 'normal' or 'scaled'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in values.items():
            if key not in kinds:
                raise KeyError(f"unknown model config key {key!r}")
            out[key] = _coerce(value, kinds[key])
        return cls(**out)


def _coerce(value, kind):
    if not isinstance(value, str):
        return value
    if kind in ("bool", bool):
        return value.strip().lower() in ("1", "true", "yes")
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    return value


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


def init_params(config: ModelConfig) -> dict:
    """Fresh parameters; every array in ``config.dtype``.

    Projections and embeddings draw from N(0, 0.02); residual output
    projections are scaled by 1/sqrt(2 * n_layers); cross-attention output
    projections start at zero so a fresh conditioned model computes exactly
    what the unconditional one does.

    With ``cond_init="scaled"`` the audio path starts at unit scale instead:
    code embeddings sum to unit variance, the adapter and the cross-attention
    query/key/value projections use fan-in scaling, and audio positions are
    the full sinusoid table. Without this the cross-attention scores stay
    nearly flat for hundreds of steps and the audio goes unused.
    """
    rng = np.random.default_rng(config.seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    resid = 1.0 / np.sqrt(2 * config.n_layers)

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    def positions(n, scale=0.1):
        if config.pos_init == "sinusoidal":
            return scale * sinusoidal_table(n, d)
        return normal(n, d)

    scaled = config.cond_init == "scaled"
    fan_in = 1.0 / np.sqrt(d) if scaled else 0.02

    p = {"tok_emb": normal(v, d), "pos_emb": positions(config.max_seq_len)}
    if config.conditioned:
        k = config.adapter_kernel
        p["code_emb"] = normal(config.n_q, config.codebook_size, d, std=1 / np.sqrt(config.n_q) if scaled else 0.02)
        p["adapter.w"] = normal(k, d, d, std=1 / np.sqrt(k * d) if scaled else 0.02)
        p["adapter.b"] = np.zeros(d)
        p["audio_pos"] = positions(config.max_audio_len, 1.0 if scaled else 0.1)
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p[pre + "norm1"] = np.ones(d)
        p[pre + "attn.wqkv"] = normal(d, 3 * d)
        p[pre + "attn.wo"] = normal(d, d) * resid
        if config.conditioned:
            p[pre + "norm2"] = np.ones(d)
            p[pre + "cross.wq"] = normal(d, d, std=fan_in)
            p[pre + "cross.wkv"] = normal(d, 2 * d, std=fan_in)
            p[pre + "cross.wo"] = np.zeros((d, d))
        p[pre + "norm3"] = np.ones(d)
        p[pre + "ffn.w_gate"] = normal(d, f)
        p[pre + "ffn.w_up"] = normal(d, f)
        p[pre + "ffn.w_down"] = normal(f, d) * resid
    p["final_norm"] = np.ones(d)
    p["head.w"] = normal(d, v)
    p["head.b"] = np.zeros(v)
    return {k: np.ascontiguousarray(a, dtype=config.dtype) for k, a in p.items()}


def _rows(x):
    return x.reshape(-1, x.shape[-1])


def as_code_batch(codes, n_q: int):
    """Normalise codes to ``(B, T_e, n_q)`` plus per-row valid frame counts."""
    if isinstance(codes, AudioCodes):
        codes = [codes]
    if isinstance(codes, (list, tuple)):
        mats = [c.codes if isinstance(c, AudioCodes) else np.asarray(c) for c in codes]
        lengths = np.array([m.shape[0] for m in mats])
        batch = np.zeros((len(mats), max(lengths.max(), 1), n_q), dtype=np.int64)
        for i, m in enumerate(mats):
            batch[i, : len(m)] = m
        return batch, lengths
    codes = np.asarray(codes)
    if codes.ndim == 2:
        codes = codes[None]
    return codes, np.full(codes.shape[0], codes.shape[1])


class ChartTransformer:
    """Parameters plus forward/backward for the chart language model.

    ``forward`` keeps the activations of the most recent call so that
    ``backward`` can turn d(loss)/d(logits) into gradients for every
    parameter. One instance therefore serves one batch at a time.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params = init_params(config) if params is None else params
        self._cache = None

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    # -- conditioning -----------------------------------------------------

    def _check_codes(self, codes):
        cfg = self.config
        if codes.shape[-1] != cfg.n_q:
            raise ShapeMismatch(f"codes have {codes.shape[-1]} codebooks, model expects {cfg.n_q}")
        if codes.size and (codes.min() < 0 or codes.max() >= cfg.codebook_size):
            raise ShapeMismatch(f"code values must lie in [0, {cfg.codebook_size})")

    def _condition_forward(self, codes, frame_lengths):
        cfg, p = self.config, self.params
        self._check_codes(codes)
        b, t_e, _ = codes.shape
        t_c = conv_output_length(t_e, cfg.adapter_stride)
        if t_c > cfg.max_audio_len:
            raise SequenceTooLong(f"{t_c} conditioning steps exceed max_audio_len={cfg.max_audio_len}")
        emb = np.zeros((b, t_e, cfg.d_model), dtype=self.dtype)
        for q in range(cfg.n_q):
            emb += p["code_emb"][q][codes[:, :, q]]
        frame_mask = (np.arange(t_e)[None, :] < frame_lengths[:, None]).astype(self.dtype)[:, :, None]
        emb *= frame_mask
        cond, conv_cache = conv1d_forward(emb, p["adapter.w"], p["adapter.b"], cfg.adapter_stride)
        cond = cond + p["audio_pos"][:t_c]
        cond_lengths = -(-np.asarray(frame_lengths) // cfg.adapter_stride)
        mask = None if np.all(cond_lengths == t_c) else key_padding_mask(cond_lengths, t_c, self.dtype)
        return cond, mask, (codes, frame_mask, conv_cache, t_c)

    def _condition_backward(self, dcond, cache, grads):
        cfg = self.config
        codes, frame_mask, conv_cache, t_c = cache
        grads["audio_pos"][:t_c] += dcond.sum(axis=0)
        demb, grads["adapter.w"], grads["adapter.b"] = conv1d_backward(dcond, conv_cache)
        demb = _rows(demb * frame_mask)
        for q in range(cfg.n_q):
            np.add.at(grads["code_emb"][q], codes[:, :, q].ravel(), demb)

    def condition_audio(self, codes, frame_lengths=None) -> np.ndarray:
        """Conditioning tensor ``(B, T_c, d_model)`` with ``T_c = ceil(T_e / stride)``."""
        if not self.config.conditioned:
            raise MissingCodes("model was built without audio conditioning")
        codes, lengths = as_code_batch(codes, self.config.n_q)
        if frame_lengths is not None:
            lengths = np.asarray(frame_lengths)
        return self._condition_forward(codes, lengths)[0]

    # -- attention sublayers -------------------------------------------------

    def _self_attn_forward(self, h, pre, mask):
        p, nh = self.params, self.config.n_heads
        q, k, v = np.split(h @ p[pre + "attn.wqkv"], 3, axis=-1)
        o, att = attention_forward(split_heads(q, nh), split_heads(k, nh), split_heads(v, nh), mask)
        merged = merge_heads(o)
        return merged @ p[pre + "attn.wo"], (h, att, merged)

    def _self_attn_backward(self, dout, cache, pre, grads):
        p, nh = self.params, self.config.n_heads
        h, att, merged = cache
        grads[pre + "attn.wo"] = _rows(merged).T @ _rows(dout)
        dq, dk, dv = attention_backward(split_heads(dout @ p[pre + "attn.wo"].T, nh), att)
        dqkv = np.concatenate([merge_heads(dq), merge_heads(dk), merge_heads(dv)], axis=-1)
        grads[pre + "attn.wqkv"] = _rows(h).T @ _rows(dqkv)
        return dqkv @ p[pre + "attn.wqkv"].T

    def _cross_attn_forward(self, h, cond, pre, mask):
        p, nh = self.params, self.config.n_heads
        q = h @ p[pre + "cross.wq"]
        k, v = np.split(cond @ p[pre + "cross.wkv"], 2, axis=-1)
        o, att = attention_forward(split_heads(q, nh), split_heads(k, nh), split_heads(v, nh), mask)
        merged = merge_heads(o)
        return merged @ p[pre + "cross.wo"], (h, cond, att, merged)

    def _cross_attn_backward(self, dout, cache, pre, grads):
        p, nh = self.params, self.config.n_heads
        h, cond, att, merged = cache
        grads[pre + "cross.wo"] = _rows(merged).T @ _rows(dout)
        dq, dk, dv = attention_backward(split_heads(dout @ p[pre + "cross.wo"].T, nh), att)
        dq = merge_heads(dq)
        dkv = np.concatenate([merge_heads(dk), merge_heads(dv)], axis=-1)
        grads[pre + "cross.wq"] = _rows(h).T @ _rows(dq)
        grads[pre + "cross.wkv"] = _rows(cond).T @ _rows(dkv)
        return dq @ p[pre + "cross.wq"].T, dkv @ p[pre + "cross.wkv"].T

    # -- full model ------------------------------------------------------------

    def forward(self, tokens, codes=None, frame_lengths=None, *, train: bool = False, rng=None) -> np.ndarray:
        """Logits ``(B, T, vocab)`` for BOS-prefixed ``tokens`` of shape ``(B, T)``.

        ``codes`` may be an :class:`AudioCodes`, a list of them, or an integer
        array ``(B, T_e, n_q)`` with ``frame_lengths`` marking valid frames.
        Unconditional models ignore it. Dropout runs only when ``train``.
        """
        cfg, p = self.config, self.params
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise SequenceTooLong(f"sequence of {t} exceeds max_seq_len={cfg.max_seq_len}")
        if train and cfg.dropout_p > 0 and rng is None:
            rng = np.random.default_rng()
        drop = cfg.dropout_p

        cond = cmask = ccache = None
        if cfg.conditioned:
            if codes is None:
                raise MissingCodes("conditioned model needs audio codes")
            codes, lengths = as_code_batch(codes, cfg.n_q)
            if frame_lengths is not None:
                lengths = np.asarray(frame_lengths)
            if codes.shape[0] != b:
                raise ShapeMismatch(f"{codes.shape[0]} code rows for {b} token rows")
            cond, cmask, ccache = self._condition_forward(codes, lengths)

        x = p["tok_emb"][tokens] + p["pos_emb"][:t]
        x, drop_emb = dropout_forward(x, drop, rng, train)
        mask = causal_mask(t, self.dtype)
        layers = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            lc = {}
            h, lc["n1"] = rms_norm_forward(x, p[pre + "norm1"], cfg.norm_eps)
            a, lc["sa"] = self._self_attn_forward(h, pre, mask)
            a, lc["d1"] = dropout_forward(a, drop, rng, train)
            x = x + a
            if cfg.conditioned:
                h, lc["n2"] = rms_norm_forward(x, p[pre + "norm2"], cfg.norm_eps)
                a, lc["ca"] = self._cross_attn_forward(h, cond, pre, cmask)
                a, lc["d2"] = dropout_forward(a, drop, rng, train)
                x = x + a
            h, lc["n3"] = rms_norm_forward(x, p[pre + "norm3"], cfg.norm_eps)
            a, lc["ff"] = swiglu_forward(h, p[pre + "ffn.w_gate"], p[pre + "ffn.w_up"], p[pre + "ffn.w_down"])
            a, lc["d3"] = dropout_forward(a, drop, rng, train)
            x = x + a
            layers.append(lc)
        h, final = rms_norm_forward(x, p["final_norm"], cfg.norm_eps)
        logits = h @ p["head.w"] + p["head.b"]
        self._cache = dict(tokens=tokens, drop_emb=drop_emb, layers=layers, final=final, h=h, cond=ccache,
                           cond_shape=None if cond is None else cond.shape)
        return logits

    def backward(self, dlogits) -> dict:
        """Gradients of the loss w.r.t. every parameter, given d(loss)/d(logits)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cfg, p, c = self.config, self.params, self._cache
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        grads = {}
        grads["head.w"] = _rows(c["h"]).T @ _rows(dlogits)
        grads["head.b"] = _rows(dlogits).sum(axis=0)
        dx, grads["final_norm"] = rms_norm_backward(dlogits @ p["head.w"].T, c["final"])
        dcond = np.zeros(c["cond_shape"], dtype=self.dtype) if cfg.conditioned else None

        for i in reversed(range(cfg.n_layers)):
            pre, lc = f"layers.{i}.", c["layers"][i]
            da = dropout_backward(dx, lc["d3"])
            dh, grads[pre + "ffn.w_gate"], grads[pre + "ffn.w_up"], grads[pre + "ffn.w_down"] = swiglu_backward(da, lc["ff"])
            dn, grads[pre + "norm3"] = rms_norm_backward(dh, lc["n3"])
            dx = dx + dn
            if cfg.conditioned:
                da = dropout_backward(dx, lc["d2"])
                dh, dc = self._cross_attn_backward(da, lc["ca"], pre, grads)
                dcond += dc
                dn, grads[pre + "norm2"] = rms_norm_backward(dh, lc["n2"])
                dx = dx + dn
            da = dropout_backward(dx, lc["d1"])
            dh = self._self_attn_backward(da, lc["sa"], pre, grads)
            dn, grads[pre + "norm1"] = rms_norm_backward(dh, lc["n1"])
            dx = dx + dn

        dx = dropout_backward(dx, c["drop_emb"])
        tokens = c["tokens"]
        t = tokens.shape[1]
        grads["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(grads["tok_emb"], tokens.ravel(), _rows(dx))
        grads["pos_emb"] = np.zeros_like(p["pos_emb"])
        grads["pos_emb"][:t] = dx.sum(axis=0)
        if cfg.conditioned:
            grads["code_emb"] = np.zeros_like(p["code_emb"])
            grads["audio_pos"] = np.zeros_like(p["audio_pos"])
            self._condition_backward(dcond, c["cond"], grads)
        return {k: np.asarray(grads[k], dtype=self.dtype) for k in p}

    # -- incremental decoding ------------------------------------------------

    def start_decoding(self, codes=None, max_len: int | None = None) -> "DecodeState":
        """Prepare a single-sequence decode; cross-attention keys are computed once."""
        cfg, p = self.config, self.params
        max_len = max_len or cfg.max_seq_len
        if max_len > cfg.max_seq_len:
            raise SequenceTooLong(f"{max_len} exceeds max_seq_len={cfg.max_seq_len}")
        nh, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        cross = []
        if cfg.conditioned:
            if codes is None:
                raise MissingCodes("conditioned model needs audio codes")
            codes, lengths = as_code_batch(codes, cfg.n_q)
            cond = self._condition_forward(codes[:1], lengths[:1])[0]
            for i in range(cfg.n_layers):
                k, v = np.split(cond @ p[f"layers.{i}.cross.wkv"], 2, axis=-1)
                cross.append((split_heads(k, nh), split_heads(v, nh)))
        keys = np.zeros((cfg.n_layers, 1, nh, max_len, hd), dtype=self.dtype)
        return DecodeState(keys, np.zeros_like(keys), cross, 0)

    def decode_step(self, state: "DecodeState", token: int) -> np.ndarray:
        """Feed one token; returns logits for the next position."""
        cfg, p = self.config, self.params
        t = state.pos
        if t >= state.keys.shape[3]:
            raise SequenceTooLong("decode cache is full")
        nh = cfg.n_heads
        x = (p["tok_emb"][token] + p["pos_emb"][t])[None, None, :]
        scale = np.asarray(1.0 / np.sqrt(cfg.d_model // nh), dtype=self.dtype)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            h = rms_norm_forward(x, p[pre + "norm1"], cfg.norm_eps)[0]
            q, k, v = (split_heads(a, nh) for a in np.split(h @ p[pre + "attn.wqkv"], 3, axis=-1))
            state.keys[i, :, :, t] = k[:, :, 0]
            state.values[i, :, :, t] = v[:, :, 0]
            ks, vs = state.keys[i, :, :, : t + 1], state.values[i, :, :, : t + 1]
            o = softmax((q @ np.swapaxes(ks, -1, -2)) * scale) @ vs
            x = x + merge_heads(o) @ p[pre + "attn.wo"]
            if cfg.conditioned:
                h = rms_norm_forward(x, p[pre + "norm2"], cfg.norm_eps)[0]
                q = split_heads(h @ p[pre + "cross.wq"], nh)
                ck, cv = state.cross[i]
                o = softmax((q @ np.swapaxes(ck, -1, -2)) * scale) @ cv
                x = x + merge_heads(o) @ p[pre + "cross.wo"]
            h = rms_norm_forward(x, p[pre + "norm3"], cfg.norm_eps)[0]
            x = x + swiglu_forward(h, p[pre + "ffn.w_gate"], p[pre + "ffn.w_up"], p[pre + "ffn.w_down"])[0]
        h = rms_norm_forward(x, p["final_norm"], cfg.norm_eps)[0]
        state.pos += 1
        return (h @ p["head.w"] + p["head.b"])[0, 0]


@dataclass
class DecodeState:
    keys: np.ndarray
    values: np.ndarray
    cross: list
    pos: int
