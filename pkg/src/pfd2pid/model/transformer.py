"""Encoder-decoder transformer over token ids, written directly in numpy.

Shared input embedding with sinusoidal positions, pre-norm residual blocks
(normalization outside the residual connection), multi-head attention, ReLU
feed-forward, a final norm after each stack, and an untied output projection.
The backward pass is written by hand; grad_check validates it against central
finite differences.
"""

from __future__ import annotations

import math

import numpy as np

from . import layers
from .config import PAD_ID, ModelConfig
from .layers import NEG_INF


class ShapeError(ValueError):
    pass


def param_layout(config: ModelConfig) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Named tensor shapes in their canonical (checkpoint) order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    entries: list[tuple[str, tuple[int, ...]]] = [("embedding", (v, d))]
    for i in range(config.n_encoder_layers):
        p = f"enc{i}."
        entries += [
            (p + "ln1.g", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)),
            (p + "attn.wo", (d, d)),
            (p + "ln2.g", (d,)),
            (p + "ffn.w1", (d, f)),
            (p + "ffn.w2", (f, d)),
        ]
    entries.append(("enc.ln_f.g", (d,)))
    for i in range(config.n_decoder_layers):
        p = f"dec{i}."
        entries += [
            (p + "ln1.g", (d,)),
            (p + "self.wq", (d, d)),
            (p + "self.wk", (d, d)),
            (p + "self.wv", (d, d)),
            (p + "self.wo", (d, d)),
            (p + "ln2.g", (d,)),
            (p + "cross.wq", (d, d)),
            (p + "cross.wk", (d, d)),
            (p + "cross.wv", (d, d)),
            (p + "cross.wo", (d, d)),
            (p + "ln3.g", (d,)),
            (p + "ffn.w1", (d, f)),
            (p + "ffn.w2", (f, d)),
        ]
    entries.append(("dec.ln_f.g", (d,)))
    entries.append(("out_proj", (d, v)))
    return tuple(entries)


def n_params(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_layout(config))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Gains start at one; matrices are normal with 1/sqrt(fan_in) scale. The
    embedding uses 1/sqrt(d_model) so rows are unit-scale after the sqrt(d)
    input rescale."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_layout(config):
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            fan_in = config.d_model if name == "embedding" else shape[0]
            scale = 1.0 / math.sqrt(fan_in)
            params[name] = rng.normal(0.0, scale, size=shape).astype(dtype)
    return params


def pack_params(config: ModelConfig, params: dict) -> np.ndarray:
    """Flatten parameters into one 1-D array in layout order."""
    return np.concatenate([np.ravel(params[name]) for name, _ in param_layout(config)])


def unpack_params(config: ModelConfig, flat: np.ndarray, dtype=None) -> dict:
    flat = np.asarray(flat)
    if flat.ndim != 1 or flat.size != n_params(config):
        raise ShapeError(
            f"flat weights must have {n_params(config)} entries, got shape {flat.shape}"
        )
    if dtype is not None:
        flat = flat.astype(dtype)
    params = {}
    offset = 0
    for name, shape in param_layout(config):
        size = math.prod(shape)
        params[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    return params


class Transformer:
    """Holds a config plus named weight arrays; all methods are pure numpy."""

    def __init__(self, config: ModelConfig, params: dict | None = None, *, seed: int = 0, dtype=np.float32):
        self.config = config
        if params is None:
            params = init_params(config, seed=seed, dtype=dtype)
        else:
            expected = dict(param_layout(config))
            got = {name: arr.shape for name, arr in params.items()}
            if got != {name: shape for name, shape in expected.items()}:
                raise ShapeError("parameter dict does not match the config's layout")
        self.params = params
        self.pe = layers.sinusoidal_positions(config.max_len, config.d_model).astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_params(self) -> int:
        return n_params(self.config)

    def astype(self, dtype) -> "Transformer":
        return Transformer(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    # -- forward / backward ----------------------------------------------

    def forward(self, src_ids, tgt_ids) -> np.ndarray:
        """Teacher-forcing logits over the vocabulary per target position.

        Accepts 1-D sequences or (B, T) batches; 1-D inputs return (T, vocab).
        Position t of the output depends only on src_ids and tgt_ids[0..t].
        """
        squeeze = np.asarray(src_ids).ndim == 1
        src = self._check_ids(src_ids, "src_ids")
        tgt = self._check_ids(tgt_ids, "tgt_ids")
        logits, _, _ = self._forward(src, tgt, rng=None)
        return logits[0] if squeeze else logits

    def forward_with_attention(self, src_ids, tgt_ids):
        """Like forward but also returns every attention weight array, in
        stack order, for checks that rows are probability distributions."""
        src = self._check_ids(src_ids, "src_ids")
        tgt = self._check_ids(tgt_ids, "tgt_ids")
        sink: list[np.ndarray] = []
        logits, _, _ = self._forward(src, tgt, rng=None, attn_sink=sink)
        return logits, sink

    def loss(self, src_ids, tgt_in, tgt_out):
        """Mean cross entropy over non-pad target tokens: (loss, n_tokens)."""
        src, tgt_in, tgt_out = self._check_batch(src_ids, tgt_in, tgt_out)
        logits, _, _ = self._forward(src, tgt_in, rng=None)
        loss, n_tokens, _ = layers.cross_entropy(logits, tgt_out, PAD_ID)
        return loss, n_tokens

    def loss_and_grads(self, src_ids, tgt_in, tgt_out, *, dropout_rng=None):
        """Teacher-forcing loss plus gradients for every named parameter.

        Returns (loss, n_tokens, grads); the loss is the mean over non-pad
        positions of tgt_out.
        """
        src, tgt_in, tgt_out = self._check_batch(src_ids, tgt_in, tgt_out)
        logits, enc_cache, dec_cache = self._forward(src, tgt_in, rng=dropout_rng)
        loss, n_tokens, dlogits = layers.cross_entropy(logits, tgt_out, PAD_ID)
        grads = self._backward(dlogits, enc_cache, dec_cache)
        return loss, n_tokens, grads

    def _check_ids(self, ids, name: str) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[0] == 0 or ids.shape[1] == 0:
            raise ShapeError(f"{name} must be a non-empty sequence or (B, T) batch")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ShapeError(f"{name} must contain integers")
        if ids.shape[1] > self.config.max_len:
            raise ShapeError(
                f"{name} length {ids.shape[1]} exceeds max_len {self.config.max_len}"
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ShapeError(f"{name} contains ids outside [0, {self.config.vocab_size})")
        return ids

    def _check_batch(self, src_ids, tgt_in, tgt_out):
        src = self._check_ids(src_ids, "src_ids")
        tgt_in = self._check_ids(tgt_in, "tgt_in")
        tgt_out = self._check_ids(tgt_out, "tgt_out")
        if not (src.shape[0] == tgt_in.shape[0] == tgt_out.shape[0]):
            raise ShapeError("src_ids, tgt_in and tgt_out must agree on batch size")
        if tgt_in.shape != tgt_out.shape:
            raise ShapeError("tgt_in and tgt_out must have identical shapes")
        return src, tgt_in, tgt_out

    def _src_mask(self, src: np.ndarray) -> np.ndarray:
        return np.where(src == PAD_ID, NEG_INF, 0.0).astype(self.dtype)[:, None, None, :]

    def _causal_mask(self, t: int) -> np.ndarray:
        return np.triu(np.full((t, t), NEG_INF, dtype=self.dtype), k=1)[None, None]

    def _encode(self, src, rng, attn_sink=None):
        cfg, p = self.config, self.params
        scale = math.sqrt(cfg.d_model)
        src_mask = self._src_mask(src)
        x = p["embedding"][src] * scale + self.pe[: src.shape[1]]
        x, drop0 = layers.dropout_forward(x, cfg.dropout, rng)
        layer_caches = []
        for i in range(cfg.n_encoder_layers):
            pre = f"enc{i}."
            h, c_ln1 = layers.rms_norm_forward(x, p[pre + "ln1.g"])
            a, attn, c_att = layers.attention_forward(
                h, h, p[pre + "attn.wq"], p[pre + "attn.wk"],
                p[pre + "attn.wv"], p[pre + "attn.wo"], cfg.n_heads, src_mask,
            )
            if attn_sink is not None:
                attn_sink.append(attn)
            a, m1 = layers.dropout_forward(a, cfg.dropout, rng)
            x = x + a
            h, c_ln2 = layers.rms_norm_forward(x, p[pre + "ln2.g"])
            f, c_ffn = layers.ffn_forward(h, p[pre + "ffn.w1"], p[pre + "ffn.w2"])
            f, m2 = layers.dropout_forward(f, cfg.dropout, rng)
            x = x + f
            layer_caches.append((c_ln1, c_att, m1, c_ln2, c_ffn, m2))
        enc_out, c_final = layers.rms_norm_forward(x, p["enc.ln_f.g"])
        return enc_out, src_mask, (src, drop0, layer_caches, c_final)

    def _forward(self, src, tgt, rng, attn_sink=None):
        cfg, p = self.config, self.params
        enc_out, src_mask, enc_cache = self._encode(src, rng, attn_sink)
        if tgt.shape[0] != src.shape[0]:
            raise ShapeError("src_ids and tgt_ids must agree on batch size")

        scale = math.sqrt(cfg.d_model)
        causal = self._causal_mask(tgt.shape[1])
        y = p["embedding"][tgt] * scale + self.pe[: tgt.shape[1]]
        y, drop0 = layers.dropout_forward(y, cfg.dropout, rng)
        layer_caches = []
        for i in range(cfg.n_decoder_layers):
            pre = f"dec{i}."
            h, c_ln1 = layers.rms_norm_forward(y, p[pre + "ln1.g"])
            a, attn, c_self = layers.attention_forward(
                h, h, p[pre + "self.wq"], p[pre + "self.wk"],
                p[pre + "self.wv"], p[pre + "self.wo"], cfg.n_heads, causal,
            )
            if attn_sink is not None:
                attn_sink.append(attn)
            a, m1 = layers.dropout_forward(a, cfg.dropout, rng)
            y = y + a
            h, c_ln2 = layers.rms_norm_forward(y, p[pre + "ln2.g"])
            a, attn, c_cross = layers.attention_forward(
                h, enc_out, p[pre + "cross.wq"], p[pre + "cross.wk"],
                p[pre + "cross.wv"], p[pre + "cross.wo"], cfg.n_heads, src_mask,
            )
            if attn_sink is not None:
                attn_sink.append(attn)
            a, m2 = layers.dropout_forward(a, cfg.dropout, rng)
            y = y + a
            h, c_ln3 = layers.rms_norm_forward(y, p[pre + "ln3.g"])
            f, c_ffn = layers.ffn_forward(h, p[pre + "ffn.w1"], p[pre + "ffn.w2"])
            f, m3 = layers.dropout_forward(f, cfg.dropout, rng)
            y = y + f
            layer_caches.append((c_ln1, c_self, m1, c_ln2, c_cross, m2, c_ln3, c_ffn, m3))
        dec_out, c_final = layers.rms_norm_forward(y, p["dec.ln_f.g"])
        logits, c_out = layers.linear_forward(dec_out, p["out_proj"])
        return logits, enc_cache, (tgt, drop0, layer_caches, c_final, c_out)

    def _backward(self, dlogits, enc_cache, dec_cache):
        cfg = self.config
        scale = math.sqrt(cfg.d_model)
        grads: dict[str, np.ndarray] = {}

        tgt, dec_drop0, dec_layers, dec_final, c_out = dec_cache
        dy, grads["out_proj"] = layers.linear_backward(dlogits, c_out)
        dy, grads["dec.ln_f.g"] = layers.rms_norm_backward(dy, dec_final)
        d_enc = None
        for i in reversed(range(cfg.n_decoder_layers)):
            pre = f"dec{i}."
            c_ln1, c_self, m1, c_ln2, c_cross, m2, c_ln3, c_ffn, m3 = dec_layers[i]
            df = layers.dropout_backward(dy, m3)
            dh, grads[pre + "ffn.w1"], grads[pre + "ffn.w2"] = layers.ffn_backward(df, c_ffn)
            dh, grads[pre + "ln3.g"] = layers.rms_norm_backward(dh, c_ln3)
            dy = dy + dh
            da = layers.dropout_backward(dy, m2)
            dxq, dxkv, dwq, dwk, dwv, dwo = layers.attention_backward(da, c_cross)
            grads[pre + "cross.wq"], grads[pre + "cross.wk"] = dwq, dwk
            grads[pre + "cross.wv"], grads[pre + "cross.wo"] = dwv, dwo
            d_enc = dxkv if d_enc is None else d_enc + dxkv
            dh, grads[pre + "ln2.g"] = layers.rms_norm_backward(dxq, c_ln2)
            dy = dy + dh
            da = layers.dropout_backward(dy, m1)
            dxq, dxkv, dwq, dwk, dwv, dwo = layers.attention_backward(da, c_self)
            grads[pre + "self.wq"], grads[pre + "self.wk"] = dwq, dwk
            grads[pre + "self.wv"], grads[pre + "self.wo"] = dwv, dwo
            dh, grads[pre + "ln1.g"] = layers.rms_norm_backward(dxq + dxkv, c_ln1)
            dy = dy + dh
        dy = layers.dropout_backward(dy, dec_drop0)
        demb = np.zeros_like(self.params["embedding"])
        np.add.at(demb, tgt, dy * scale)

        src, enc_drop0, enc_layers, enc_final = enc_cache
        dx, grads["enc.ln_f.g"] = layers.rms_norm_backward(d_enc, enc_final)
        for i in reversed(range(cfg.n_encoder_layers)):
            pre = f"enc{i}."
            c_ln1, c_att, m1, c_ln2, c_ffn, m2 = enc_layers[i]
            df = layers.dropout_backward(dx, m2)
            dh, grads[pre + "ffn.w1"], grads[pre + "ffn.w2"] = layers.ffn_backward(df, c_ffn)
            dh, grads[pre + "ln2.g"] = layers.rms_norm_backward(dh, c_ln2)
            dx = dx + dh
            da = layers.dropout_backward(dx, m1)
            dxq, dxkv, dwq, dwk, dwv, dwo = layers.attention_backward(da, c_att)
            grads[pre + "attn.wq"], grads[pre + "attn.wk"] = dwq, dwk
            grads[pre + "attn.wv"], grads[pre + "attn.wo"] = dwv, dwo
            dh, grads[pre + "ln1.g"] = layers.rms_norm_backward(dxq + dxkv, c_ln1)
            dx = dx + dh
        dx = layers.dropout_backward(dx, enc_drop0)
        np.add.at(demb, src, dx * scale)
        grads["embedding"] = demb
        return grads

    # -- incremental decoding ----------------------------------------------

    def init_decode_state(self, src_ids) -> dict:
        """Encoder pass plus per-layer cross K/V for one source sequence."""
        src = self._check_ids(src_ids, "src_ids")
        if src.shape[0] != 1:
            raise ShapeError("decoding works on a single source sequence")
        enc_out, src_mask, _ = self._encode(src, rng=None)
        cfg, p = self.config, self.params
        state = {
            "t": 0,
            "src_mask": src_mask,
            "cross_k": [],
            "cross_v": [],
            "self_k": [],
            "self_v": [],
        }
        empty = np.zeros((1, cfg.n_heads, 0, cfg.d_k), dtype=self.dtype)
        for i in range(cfg.n_decoder_layers):
            pre = f"dec{i}.cross."
            state["cross_k"].append(layers.split_heads(enc_out @ p[pre + "wk"], cfg.n_heads))
            state["cross_v"].append(layers.split_heads(enc_out @ p[pre + "wv"], cfg.n_heads))
            state["self_k"].append(empty)
            state["self_v"].append(empty)
        return state

    @staticmethod
    def clone_decode_state(state: dict) -> dict:
        """Cheap fork: cache arrays are replaced (never mutated in place) by
        decode_step, so clones can share them."""
        clone = dict(state)
        clone["self_k"] = list(state["self_k"])
        clone["self_v"] = list(state["self_v"])
        return clone

    def decode_step(self, state: dict, token_id: int) -> np.ndarray:
        """Feed one target token; returns log-probabilities for the next
        position. Attending over all cached positions is exactly the causal
        row for position t."""
        cfg, p = self.config, self.params
        t = state["t"]
        if t >= cfg.max_len:
            raise ShapeError(f"decode position {t} exceeds max_len {cfg.max_len}")
        if not 0 <= token_id < cfg.vocab_size:
            raise ShapeError(f"token id {token_id} outside [0, {cfg.vocab_size})")
        sqd = math.sqrt
        x = p["embedding"][token_id][None, None, :] * sqd(cfg.d_model) + self.pe[t]
        for i in range(cfg.n_decoder_layers):
            pre = f"dec{i}."
            h, _ = layers.rms_norm_forward(x, p[pre + "ln1.g"])
            q = layers.split_heads(h @ p[pre + "self.wq"], cfg.n_heads)
            k = np.concatenate(
                [state["self_k"][i], layers.split_heads(h @ p[pre + "self.wk"], cfg.n_heads)], axis=2
            )
            v = np.concatenate(
                [state["self_v"][i], layers.split_heads(h @ p[pre + "self.wv"], cfg.n_heads)], axis=2
            )
            state["self_k"][i] = k
            state["self_v"][i] = v
            attn = layers.softmax(q @ k.transpose(0, 1, 3, 2) / sqd(cfg.d_k))
            x = x + layers.merge_heads(attn @ v) @ p[pre + "self.wo"]
            h, _ = layers.rms_norm_forward(x, p[pre + "ln2.g"])
            q = layers.split_heads(h @ p[pre + "cross.wq"], cfg.n_heads)
            scores = q @ state["cross_k"][i].transpose(0, 1, 3, 2) / sqd(cfg.d_k)
            attn = layers.softmax(scores + state["src_mask"])
            x = x + layers.merge_heads(attn @ state["cross_v"][i]) @ p[pre + "cross.wo"]
            h, _ = layers.rms_norm_forward(x, p[pre + "ln3.g"])
            x = x + np.maximum(h @ p[pre + "ffn.w1"], 0.0) @ p[pre + "ffn.w2"]
        x, _ = layers.rms_norm_forward(x, p["dec.ln_f.g"])
        state["t"] = t + 1
        return layers.log_softmax((x @ p["out_proj"])[0, 0])


def grad_check(model: Transformer, src_ids, tgt_in, tgt_out, *, n_samples: int = 200, h: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central finite
    differences over up to n_samples randomly chosen parameters.

    Meant for small double-precision models (d_model <= 16 keeps the finite
    differences well-conditioned)."""
    if model.dtype != np.float64:
        raise ValueError("grad_check requires a float64 model")
    _, _, grads = model.loss_and_grads(src_ids, tgt_in, tgt_out)
    names = [name for name, _ in param_layout(model.config)]
    sizes = np.array([model.params[name].size for name in names])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(n_samples, total), replace=False)
    worst = 0.0
    for flat_index in chosen:
        slot = int(np.searchsorted(bounds, flat_index, side="right"))
        offset = int(flat_index - (bounds[slot - 1] if slot else 0))
        weights = model.params[names[slot]]
        original = weights.flat[offset]
        weights.flat[offset] = original + h
        plus, _ = model.loss(src_ids, tgt_in, tgt_out)
        weights.flat[offset] = original - h
        minus, _ = model.loss(src_ids, tgt_in, tgt_out)
        weights.flat[offset] = original
        numeric = (plus - minus) / (2.0 * h)
        analytic = float(grads[names[slot]].flat[offset])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
